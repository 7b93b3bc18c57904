//! Censored-data log-likelihoods for both parameterizations and the
//! per-transition decoupling of the intensity likelihood.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{IntensityModelII, IntensitySource, SojournModelI, StateSpace, TransitionKey, TransitionLaw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Approach {
    I,
    II,
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Approach::I => "I",
            Approach::II => "II",
        })
    }
}

impl FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "i" | "1" => Ok(Approach::I),
            "II" | "ii" | "2" => Ok(Approach::II),
            other => Err(Error::Domain(format!("unknown approach '{other}' (expected I or II)"))),
        }
    }
}

/// One subject's observed path: `J₀ → J₁ → … → J_N` with sojourns
/// `τ₁..τ_N`, plus the residual time `U` in `J_N` when censored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectHistory {
    pub id: String,
    pub initial_state: usize,
    pub states: Vec<usize>,
    pub sojourns: Vec<f64>,
    /// `Some(U)` when right-censored (δ = 0), `None` when absorbed (δ = 1).
    pub censored_tail: Option<f64>,
    pub covariates: Vec<f64>,
}

impl SubjectHistory {
    pub fn n_transitions(&self) -> usize {
        self.states.len()
    }

    /// δ: whether the subject was observed to absorb.
    pub fn delta(&self) -> bool {
        self.censored_tail.is_none()
    }

    pub fn final_state(&self) -> usize {
        self.states.last().copied().unwrap_or(self.initial_state)
    }

    /// State occupied during the `k`-th sojourn (0-based).
    pub fn state_before(&self, k: usize) -> usize {
        if k == 0 {
            self.initial_state
        } else {
            self.states[k - 1]
        }
    }

    /// `Στ + U`.
    pub fn follow_up(&self) -> f64 {
        self.sojourns.iter().sum::<f64>() + self.censored_tail.unwrap_or(0.0)
    }

    pub fn validate(&self, space: &StateSpace, n_covariates: usize) -> Result<()> {
        let bad = |msg: String| Error::Domain(format!("subject '{}': {msg}", self.id));
        let n = space.n_states();
        if self.initial_state >= n {
            return Err(bad(format!("initial state index {} out of range", self.initial_state)));
        }
        if self.states.len() != self.sojourns.len() {
            return Err(bad(format!(
                "{} states but {} sojourns",
                self.states.len(),
                self.sojourns.len()
            )));
        }
        if self.covariates.len() != n_covariates {
            return Err(Error::DimensionMismatch {
                expected: n_covariates,
                actual: self.covariates.len(),
                context: format!("covariates of subject '{}'", self.id),
            });
        }
        if let Some(z) = self.covariates.iter().find(|z| !z.is_finite()) {
            return Err(bad(format!("non-finite covariate {z}")));
        }
        let mut prev = self.initial_state;
        for (k, (&s, &tau)) in self.states.iter().zip(&self.sojourns).enumerate() {
            if s >= n {
                return Err(bad(format!("state index {s} out of range at step {}", k + 1)));
            }
            if space.is_absorbing(prev) {
                return Err(bad(format!(
                    "leaves absorbing state {} at step {}",
                    space.label(prev),
                    k + 1
                )));
            }
            if s == prev {
                return Err(bad(format!(
                    "self transition in state {} at step {}",
                    space.label(s),
                    k + 1
                )));
            }
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(bad(format!("sojourn {tau} at step {} must be positive", k + 1)));
            }
            prev = s;
        }
        match self.censored_tail {
            Some(u) if !(u >= 0.0 && u.is_finite()) => Err(bad(format!("censored tail {u} must be nonnegative"))),
            Some(_) if space.is_absorbing(prev) => {
                Err(bad(format!("censored in absorbing state {}", space.label(prev))))
            }
            None if !space.is_absorbing(prev) => Err(bad(format!(
                "ends uncensored in non-absorbing state {}",
                space.label(prev)
            ))),
            _ => Ok(()),
        }
    }
}

/// One epoch in state `from` as seen by a two-state model: `to` is the
/// observed destination, or `None` when the epoch is censored for the
/// transition of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub from: usize,
    pub to: Option<usize>,
    pub duration: f64,
    pub covariates: Vec<f64>,
}

impl TransitionRecord {
    pub fn is_event(&self) -> bool {
        self.to.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    space: StateSpace,
    covariate_names: Vec<String>,
    subjects: Vec<SubjectHistory>,
}

impl Dataset {
    pub fn new(space: StateSpace, covariate_names: Vec<String>, subjects: Vec<SubjectHistory>) -> Result<Self> {
        for s in &subjects {
            s.validate(&space, covariate_names.len())?;
        }
        Ok(Dataset {
            space,
            covariate_names,
            subjects,
        })
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn subjects(&self) -> &[SubjectHistory] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// SHA-256 over every field, bitwise for reals. Fits on different data
    /// never share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for label in self.space.labels() {
            h.update(label.as_bytes());
            h.update([0u8]);
        }
        for a in self.space.absorbing() {
            h.update((a as u64).to_le_bytes());
        }
        h.update([1u8]);
        for name in &self.covariate_names {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        for s in &self.subjects {
            h.update([2u8]);
            h.update(s.id.as_bytes());
            h.update([0u8]);
            h.update((s.initial_state as u64).to_le_bytes());
            for (&j, &tau) in s.states.iter().zip(&s.sojourns) {
                h.update((j as u64).to_le_bytes());
                h.update(tau.to_bits().to_le_bytes());
            }
            match s.censored_tail {
                Some(u) => {
                    h.update([3u8]);
                    h.update(u.to_bits().to_le_bytes());
                }
                None => h.update([4u8]),
            }
            for z in &s.covariates {
                h.update(z.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Observed `i → j` transition counts.
    pub fn transition_counts(&self) -> Vec<Vec<usize>> {
        let n = self.space.n_states();
        let mut counts = vec![vec![0; n]; n];
        for s in &self.subjects {
            for k in 0..s.n_transitions() {
                counts[s.state_before(k)][s.states[k]] += 1;
            }
        }
        counts
    }
}

fn check_dims(space: &StateSpace, n_covariates: usize, dataset: &Dataset) -> Result<()> {
    if space.n_states() != dataset.space.n_states() {
        return Err(Error::DimensionMismatch {
            expected: space.n_states(),
            actual: dataset.space.n_states(),
            context: "number of states in dataset".into(),
        });
    }
    if n_covariates != dataset.n_covariates() {
        return Err(Error::DimensionMismatch {
            expected: n_covariates,
            actual: dataset.n_covariates(),
            context: "number of covariates in dataset".into(),
        });
    }
    Ok(())
}

fn impossible(space: &StateSpace, h: &SubjectHistory, step: usize, from: usize, to: usize) -> Error {
    Error::ImpossiblePath {
        subject: h.id.clone(),
        step: step + 1,
        from: space.label(from).to_string(),
        to: space.label(to).to_string(),
    }
}

fn singular(space: &StateSpace, from: usize, to: usize, duration: f64) -> Error {
    Error::SingularLikelihood {
        from: space.label(from).to_string(),
        to: space.label(to).to_string(),
        duration,
    }
}

/// `ln L` under Approach I: `Σ_k [ln p + ln f(τ_k)] + (1-δ) ln Σ_j p_ij S_ij(U)`.
pub fn subject_loglik_i(model: &SojournModelI, h: &SubjectHistory) -> Result<f64> {
    let space = model.space();
    let z = &h.covariates;
    let mut ll = 0.0;
    for (k, (&to, &tau)) in h.states.iter().zip(&h.sojourns).enumerate() {
        let from = h.state_before(k);
        let key = TransitionKey { from, to };
        let law = match model.law(key) {
            Some(law) if model.chain().p(from, to) > 0.0 => law,
            _ => return Err(impossible(space, h, k, from, to)),
        };
        let lf = law.log_density(z, tau)?;
        if lf == f64::INFINITY {
            return Err(singular(space, from, to, tau));
        }
        ll += model.chain().p(from, to).ln() + lf;
    }
    if let Some(u) = h.censored_tail {
        if u > 0.0 {
            ll += model.log_holding_survival(h.final_state(), z, u)?;
        }
    }
    Ok(ll)
}

/// `ln L` under Approach II: `Σ_k [ln α̃(τ_k) − Λ(τ_k)] − (1-δ) Λ(U)`.
pub fn subject_loglik_ii<S: IntensitySource + ?Sized>(model: &S, h: &SubjectHistory) -> Result<f64> {
    let space = model.space();
    let z = &h.covariates;
    let mut ll = 0.0;
    for (k, (&to, &tau)) in h.states.iter().zip(&h.sojourns).enumerate() {
        let from = h.state_before(k);
        if !model.targets(from).contains(&to) {
            return Err(impossible(space, h, k, from, to));
        }
        let term = model.log_exit_density(from, to, z, tau)?;
        if term == f64::INFINITY {
            return Err(singular(space, from, to, tau));
        }
        ll += term;
    }
    if let Some(u) = h.censored_tail {
        if u > 0.0 {
            ll -= model.cumulative_total_intensity(h.final_state(), z, u)?;
        }
    }
    Ok(ll)
}

/// Two-state records for transition `i → j`: one per epoch in `i`, an event
/// when the next state is `j`. Zero-length censored tails carry no
/// information and are omitted.
pub fn decouple(dataset: &Dataset, from: usize, to: usize) -> Vec<TransitionRecord> {
    let mut out = Vec::new();
    for h in &dataset.subjects {
        for k in 0..h.n_transitions() {
            if h.state_before(k) == from {
                out.push(TransitionRecord {
                    from,
                    to: (h.states[k] == to).then_some(to),
                    duration: h.sojourns[k],
                    covariates: h.covariates.clone(),
                });
            }
        }
        if let Some(u) = h.censored_tail {
            if u > 0.0 && h.final_state() == from {
                out.push(TransitionRecord {
                    from,
                    to: None,
                    duration: u,
                    covariates: h.covariates.clone(),
                });
            }
        }
    }
    out
}

/// Right-censored survival log-likelihood `Σ [event · ln α̃(τ)] − Λ̃(τ)`.
pub fn transition_loglik(law: &TransitionLaw, records: &[TransitionRecord]) -> Result<f64> {
    let mut ll = 0.0;
    for r in records {
        if r.is_event() {
            let lh = law.log_hazard(&r.covariates, r.duration)?;
            if lh == f64::INFINITY {
                return Err(Error::SingularLikelihood {
                    from: (law.key.from + 1).to_string(),
                    to: (law.key.to + 1).to_string(),
                    duration: r.duration,
                });
            }
            ll += lh;
        }
        ll -= law.cumulative_hazard(&r.covariates, r.duration)?;
    }
    Ok(ll)
}

/// A model of either parameterization.
#[derive(Debug, Clone, Copy)]
pub enum AnyModel<'a> {
    I(&'a SojournModelI),
    II(&'a IntensityModelII),
}

impl AnyModel<'_> {
    pub fn approach(&self) -> Approach {
        match self {
            AnyModel::I(_) => Approach::I,
            AnyModel::II(_) => Approach::II,
        }
    }
}

/// Subject-wise log-likelihood summed in subject order.
pub fn total_loglik(model: AnyModel<'_>, dataset: &Dataset) -> Result<f64> {
    match model {
        AnyModel::I(m) => {
            check_dims(m.space(), m.n_covariates(), dataset)?;
            sum_subjects(dataset, |h| subject_loglik_i(m, h))
        }
        AnyModel::II(m) => total_loglik_ii(m, dataset),
    }
}

/// Subject-wise Approach II log-likelihood for any intensity source.
pub fn total_loglik_ii<S: IntensitySource + ?Sized>(model: &S, dataset: &Dataset) -> Result<f64> {
    check_dims(model.space(), model.n_covariates(), dataset)?;
    sum_subjects(dataset, |h| subject_loglik_ii(model, h))
}

/// Approach II log-likelihood as `Σ_{(i,j)} transition_loglik` over
/// decoupled records. Observed transitions absent from the model error.
pub fn decoupled_loglik_ii(model: &IntensityModelII, dataset: &Dataset) -> Result<f64> {
    check_dims(model.space(), model.n_covariates(), dataset)?;
    let counts = dataset.transition_counts();
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 && model.law(TransitionKey { from: i, to: j }).is_none() {
                let h = dataset
                    .subjects
                    .iter()
                    .find(|h| (0..h.n_transitions()).any(|k| h.state_before(k) == i && h.states[k] == j))
                    .expect("counted transition exists");
                let k = (0..h.n_transitions())
                    .find(|&k| h.state_before(k) == i && h.states[k] == j)
                    .expect("counted transition exists");
                return Err(impossible(model.space(), h, k, i, j));
            }
        }
    }
    let laws: Vec<&TransitionLaw> = model.laws().collect();
    let parts = laws
        .par_iter()
        .map(|law| transition_loglik(law, &decouple(dataset, law.key.from, law.key.to)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.iter().sum())
}

fn sum_subjects<F>(dataset: &Dataset, f: F) -> Result<f64>
where
    F: Fn(&SubjectHistory) -> Result<f64> + Sync + Send,
{
    let parts = dataset.subjects.par_iter().map(f).collect::<Result<Vec<f64>>>()?;
    Ok(parts.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::Distribution;
    use crate::model::EmbeddedChain;
    use approx::assert_relative_eq;

    fn key(a: usize, b: usize) -> TransitionKey {
        TransitionKey::new(a, b).unwrap()
    }

    fn illness_death_space() -> StateSpace {
        StateSpace::numbered(3, [2]).unwrap()
    }

    fn model_i() -> SojournModelI {
        let chain = EmbeddedChain::new(vec![vec![0.0, 0.6, 0.4], vec![0.0, 0.0, 1.0], vec![0.0; 3]]).unwrap();
        let e = Distribution::exponential(1.0).unwrap();
        SojournModelI::new(
            illness_death_space(),
            chain,
            vec![
                TransitionLaw::baseline_only(key(0, 1), e.clone()),
                TransitionLaw::baseline_only(key(0, 2), e.clone()),
                TransitionLaw::baseline_only(key(1, 2), e),
            ],
            0,
        )
        .unwrap()
    }

    fn model_ii() -> IntensityModelII {
        let e = |r| Distribution::exponential(r).unwrap();
        IntensityModelII::new(
            illness_death_space(),
            vec![
                TransitionLaw::baseline_only(key(0, 1), e(0.2)),
                TransitionLaw::baseline_only(key(0, 2), e(0.1)),
                TransitionLaw::baseline_only(key(1, 2), e(0.3)),
            ],
            0,
        )
        .unwrap()
    }

    fn subject(states: Vec<usize>, sojourns: Vec<f64>, tail: Option<f64>) -> SubjectHistory {
        SubjectHistory {
            id: "s".into(),
            initial_state: 0,
            states,
            sojourns,
            censored_tail: tail,
            covariates: vec![],
        }
    }

    #[test]
    fn approach_i_examples() {
        let m = model_i();
        let h = subject(vec![1, 2], vec![1.0, 2.0], None);
        let ll = subject_loglik_i(&m, &h).unwrap();
        assert_relative_eq!(ll, 0.6f64.ln() - 3.0, max_relative = 1e-14);
        assert_relative_eq!(ll, -3.5108, max_relative = 1e-4);
        let stay = subject(vec![], vec![], Some(2.0));
        assert_relative_eq!(subject_loglik_i(&m, &stay).unwrap(), -2.0, max_relative = 1e-14);
        let empty = subject(vec![], vec![], Some(0.0));
        assert_eq!(subject_loglik_i(&m, &empty).unwrap(), 0.0);
    }

    #[test]
    fn approach_ii_examples() {
        let m = model_ii();
        let h = subject(vec![1], vec![1.0], Some(2.0));
        let ll = subject_loglik_ii(&m, &h).unwrap();
        assert_relative_eq!(ll, 0.2f64.ln() - 0.3 - 0.6, max_relative = 1e-14);
        assert_relative_eq!(ll, -2.5094, max_relative = 1e-4);
        let absorbed = subject(vec![1, 2], vec![1.0, 2.0], None);
        let expected = 0.2f64.ln() - 0.3 + 0.3f64.ln() - 0.6;
        assert_relative_eq!(
            subject_loglik_ii(&m, &absorbed).unwrap(),
            expected,
            max_relative = 1e-14
        );
        let stay = subject(vec![], vec![], Some(4.0));
        assert_relative_eq!(subject_loglik_ii(&m, &stay).unwrap(), -1.2, max_relative = 1e-14);
    }

    #[test]
    fn zero_probability_path_errors() {
        let m = model_i();
        let h = subject(vec![1, 0], vec![1.0, 1.0], Some(1.0));
        assert!(matches!(
            subject_loglik_i(&m, &h),
            Err(Error::ImpossiblePath { step: 2, .. })
        ));
        let m2 = model_ii();
        assert!(matches!(
            subject_loglik_ii(&m2, &h),
            Err(Error::ImpossiblePath { step: 2, .. })
        ));
    }

    #[test]
    fn decouple_examples() {
        let ds = Dataset::new(
            illness_death_space(),
            vec![],
            vec![subject(vec![1], vec![1.0], Some(2.0))],
        )
        .unwrap();
        let r12 = decouple(&ds, 0, 1);
        assert_eq!(r12.len(), 1);
        assert_eq!((r12[0].to, r12[0].duration), (Some(1), 1.0));
        let r13 = decouple(&ds, 0, 2);
        assert_eq!((r13[0].to, r13[0].duration), (None, 1.0));
        let r23 = decouple(&ds, 1, 2);
        assert_eq!(r23.len(), 1);
        assert_eq!((r23[0].to, r23[0].duration), (None, 2.0));

        let absorbed = Dataset::new(illness_death_space(), vec![], vec![subject(vec![2], vec![1.5], None)]).unwrap();
        assert!(decouple(&absorbed, 2, 0).is_empty());
    }

    #[test]
    fn repeat_visits_give_one_record_each() {
        let space = StateSpace::numbered(3, [2]).unwrap();
        let ds = Dataset::new(
            space,
            vec![],
            vec![subject(vec![1, 0, 1, 2], vec![1.0, 0.5, 0.7, 0.2], None)],
        )
        .unwrap();
        assert_eq!(decouple(&ds, 0, 1).len(), 2);
        assert_eq!(decouple(&ds, 1, 0).len(), 2);
        assert_eq!(decouple(&ds, 1, 0).iter().filter(|r| r.is_event()).count(), 1);
    }

    #[test]
    fn transition_loglik_examples() {
        let r = 0.7;
        let law = TransitionLaw::baseline_only(key(0, 1), Distribution::exponential(r).unwrap());
        let rec = |to: Option<usize>, d: f64| TransitionRecord {
            from: 0,
            to,
            duration: d,
            covariates: vec![],
        };
        let records = vec![rec(Some(1), 1.0), rec(None, 2.0)];
        assert_relative_eq!(
            transition_loglik(&law, &records).unwrap(),
            r.ln() - 3.0 * r,
            max_relative = 1e-14
        );
        assert_eq!(transition_loglik(&law, &[]).unwrap(), 0.0);
        let censored = vec![rec(None, 1.0), rec(None, 2.5)];
        assert_relative_eq!(
            transition_loglik(&law, &censored).unwrap(),
            -r * 3.5,
            max_relative = 1e-14
        );
    }

    #[test]
    fn totals() {
        let m = model_ii();
        let h = subject(vec![1], vec![1.0], Some(2.0));
        let one = Dataset::new(illness_death_space(), vec![], vec![h.clone()]).unwrap();
        let two = Dataset::new(illness_death_space(), vec![], vec![h.clone(), h]).unwrap();
        let a = total_loglik(AnyModel::II(&m), &one).unwrap();
        let b = total_loglik(AnyModel::II(&m), &two).unwrap();
        assert_relative_eq!(b, 2.0 * a, max_relative = 1e-15);
        assert!((decoupled_loglik_ii(&m, &two).unwrap() - b).abs() < 1e-12);
        let empty = Dataset::new(illness_death_space(), vec![], vec![]).unwrap();
        assert_eq!(total_loglik(AnyModel::II(&m), &empty).unwrap(), 0.0);
    }

    #[test]
    fn validation_rejects_inconsistent_histories() {
        let space = illness_death_space();
        assert!(subject(vec![1], vec![1.0], None).validate(&space, 0).is_err());
        assert!(subject(vec![2], vec![1.0], Some(1.0)).validate(&space, 0).is_err());
        assert!(subject(vec![1], vec![0.0], Some(1.0)).validate(&space, 0).is_err());
        assert!(subject(vec![0], vec![1.0], Some(1.0)).validate(&space, 0).is_err());
        assert!(subject(vec![1], vec![1.0], Some(1.0)).validate(&space, 0).is_ok());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let space = illness_death_space();
        let a = Dataset::new(space.clone(), vec![], vec![subject(vec![1], vec![1.0], Some(2.0))]).unwrap();
        let b = Dataset::new(space, vec![], vec![subject(vec![1], vec![1.0], Some(2.000001))]).unwrap();
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
