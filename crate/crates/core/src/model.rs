//! Semi-Markov process specifications under both parameterizations.
//!
//! [`SojournModelI`] describes the process through an embedded chain `p_ij`
//! plus conditional sojourn hazards `α_ij`. [`IntensityModelII`] describes it
//! through intensity transition functions `α̃_ij`. Covariates enter either
//! one proportionally: `α(t | z) = α₀(t) exp(βᵀ z_mask)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::Distribution;
use crate::quadrature::{integrate, Integral, QuadratureSpec};
use crate::special::log_sum_exp;

const ROW_SUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    labels: Vec<String>,
    absorbing: BTreeSet<usize>,
}

impl StateSpace {
    pub fn new(labels: Vec<String>, absorbing: impl IntoIterator<Item = usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidModel("state space needs at least one state".into()));
        }
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::InvalidModel("duplicate state labels".into()));
        }
        if let Some(l) = labels.iter().find(|l| l.is_empty() || l.as_str() == "cens") {
            return Err(Error::InvalidModel(format!("reserved or empty state label '{l}'")));
        }
        let absorbing: BTreeSet<usize> = absorbing.into_iter().collect();
        if let Some(&bad) = absorbing.iter().find(|&&i| i >= labels.len()) {
            return Err(Error::InvalidModel(format!("absorbing index {bad} out of range")));
        }
        Ok(StateSpace { labels, absorbing })
    }

    /// States labelled `"1"..="n"`.
    pub fn numbered(n: usize, absorbing: impl IntoIterator<Item = usize>) -> Result<Self> {
        StateSpace::new((1..=n).map(|i| i.to_string()).collect(), absorbing)
    }

    pub fn n_states(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn is_absorbing(&self, i: usize) -> bool {
        self.absorbing.contains(&i)
    }

    pub fn absorbing(&self) -> impl Iterator<Item = usize> + '_ {
        self.absorbing.iter().copied()
    }

    pub fn key_label(&self, key: TransitionKey) -> String {
        format!("{}->{}", self.label(key.from), self.label(key.to))
    }

    fn check_absorbing(&self, derived: &BTreeSet<usize>) -> Result<()> {
        if derived != &self.absorbing {
            let show = |s: &BTreeSet<usize>| {
                s.iter()
                    .map(|&i| self.label(i).to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            return Err(Error::InvalidModel(format!(
                "declared absorbing states {{{}}} disagree with the model's transitions {{{}}}",
                show(&self.absorbing),
                show(derived)
            )));
        }
        Ok(())
    }
}

/// Ordered pair of distinct states (0-based indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransitionKey {
    pub from: usize,
    pub to: usize,
}

impl TransitionKey {
    pub fn new(from: usize, to: usize) -> Result<Self> {
        if from == to {
            return Err(Error::InvalidModel(format!("self transition {from}->{to}")));
        }
        Ok(TransitionKey { from, to })
    }
}

impl fmt::Display for TransitionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from + 1, self.to + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedChain {
    probs: Vec<Vec<f64>>,
}

impl EmbeddedChain {
    /// Rows must be zero on the diagonal and sum to 1 (transient rows) or 0
    /// (absorbing rows).
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        let n = probs.len();
        for (i, row) in probs.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: row.len(),
                    context: format!("embedded chain row {}", i + 1),
                });
            }
            if row[i] != 0.0 {
                return Err(Error::InvalidModel(format!(
                    "embedded chain diagonal entry {} is {} (must be 0)",
                    i + 1,
                    row[i]
                )));
            }
            if let Some(p) = row.iter().find(|p| !(p.is_finite() && **p >= 0.0 && **p <= 1.0)) {
                return Err(Error::InvalidModel(format!(
                    "row {} has invalid probability {p}",
                    i + 1
                )));
            }
            let sum: f64 = row.iter().sum();
            if sum != 0.0 && (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidModel(format!(
                    "embedded chain row {} sums to {sum}",
                    i + 1
                )));
            }
        }
        Ok(EmbeddedChain { probs })
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn p(&self, from: usize, to: usize) -> f64 {
        self.probs[from][to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.probs[from]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn is_absorbing(&self, i: usize) -> bool {
        self.probs[i].iter().all(|&p| p == 0.0)
    }
}

/// One transition's baseline law plus proportional-hazards coefficients.
///
/// `covariates` indexes into the dataset covariate vector; `beta[k]`
/// multiplies `z[covariates[k]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionLaw {
    pub key: TransitionKey,
    pub baseline: Distribution,
    pub covariates: Vec<usize>,
    pub beta: Vec<f64>,
}

impl TransitionLaw {
    pub fn new(key: TransitionKey, baseline: Distribution, covariates: Vec<usize>, beta: Vec<f64>) -> Result<Self> {
        if covariates.len() != beta.len() {
            return Err(Error::DimensionMismatch {
                expected: covariates.len(),
                actual: beta.len(),
                context: format!("coefficients of transition {key}"),
            });
        }
        if let Some(b) = beta.iter().find(|b| !b.is_finite()) {
            return Err(Error::InvalidModel(format!("non-finite coefficient {b} on {key}")));
        }
        Ok(TransitionLaw {
            key,
            baseline,
            covariates,
            beta,
        })
    }

    /// Law without covariate effects.
    pub fn baseline_only(key: TransitionKey, baseline: Distribution) -> Self {
        TransitionLaw {
            key,
            baseline,
            covariates: Vec::new(),
            beta: Vec::new(),
        }
    }

    /// Law whose coefficients apply to the leading `beta.len()` covariates.
    pub fn with_beta(key: TransitionKey, baseline: Distribution, beta: Vec<f64>) -> Result<Self> {
        TransitionLaw::new(key, baseline, (0..beta.len()).collect(), beta)
    }

    pub fn linear_predictor(&self, z: &[f64]) -> Result<f64> {
        let mut lp = 0.0;
        for (&idx, &b) in self.covariates.iter().zip(&self.beta) {
            let value = *z.get(idx).ok_or_else(|| Error::DimensionMismatch {
                expected: idx + 1,
                actual: z.len(),
                context: format!("covariates for transition {}", self.key),
            })?;
            lp += b * value;
        }
        Ok(lp)
    }

    pub fn log_hazard(&self, z: &[f64], t: f64) -> Result<f64> {
        Ok(self.baseline.log_hazard(t) + self.linear_predictor(z)?)
    }

    pub fn hazard(&self, z: &[f64], t: f64) -> Result<f64> {
        Ok(self.log_hazard(z, t)?.exp())
    }

    pub fn cumulative_hazard(&self, z: &[f64], t: f64) -> Result<f64> {
        let h0 = self.baseline.cumulative_hazard(t);
        if h0 == 0.0 {
            return Ok(0.0);
        }
        Ok(h0 * self.linear_predictor(z)?.exp())
    }

    pub fn log_survival(&self, z: &[f64], t: f64) -> Result<f64> {
        Ok(-self.cumulative_hazard(z, t)?)
    }

    pub fn log_density(&self, z: &[f64], t: f64) -> Result<f64> {
        let lp = self.linear_predictor(z)?;
        let h0 = self.baseline.cumulative_hazard(t);
        let cum = if h0 == 0.0 { 0.0 } else { h0 * lp.exp() };
        Ok(self.baseline.log_hazard(t) + lp - cum)
    }

    /// Time at which the covariate-adjusted cumulative hazard reaches `h`.
    pub fn time_at_cumulative_hazard(&self, z: &[f64], h: f64) -> Result<f64> {
        let lp = self.linear_predictor(z)?;
        self.baseline.time_at_cumulative_hazard(h * (-lp).exp())
    }
}

/// Baseline hazard scaled by `exp(βᵀz)`.
pub fn adjusted_hazard(law: &TransitionLaw, z: &[f64], t: f64) -> Result<f64> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain(format!("time {t} must be nonnegative")));
    }
    law.hazard(z, t)
}

fn index_laws(
    space: &StateSpace,
    laws: Vec<TransitionLaw>,
    n_covariates: usize,
) -> Result<BTreeMap<TransitionKey, TransitionLaw>> {
    let mut map = BTreeMap::new();
    for law in laws {
        let key = law.key;
        if key.from >= space.n_states() || key.to >= space.n_states() || key.from == key.to {
            return Err(Error::InvalidModel(format!("transition {key} outside the state space")));
        }
        if let Some(&idx) = law.covariates.iter().find(|&&c| c >= n_covariates) {
            return Err(Error::InvalidModel(format!(
                "transition {} references covariate {idx} but the model has {n_covariates}",
                space.key_label(key)
            )));
        }
        if map.insert(key, law).is_some() {
            return Err(Error::InvalidModel(format!(
                "duplicate transition {}",
                space.key_label(key)
            )));
        }
    }
    Ok(map)
}

fn check_covariates(z: &[f64], n_covariates: usize) -> Result<()> {
    if z.len() != n_covariates {
        return Err(Error::DimensionMismatch {
            expected: n_covariates,
            actual: z.len(),
            context: "covariate vector".into(),
        });
    }
    Ok(())
}

/// Approach I: embedded chain plus conditional sojourn laws.
#[derive(Debug, Clone, PartialEq)]
pub struct SojournModelI {
    space: StateSpace,
    chain: EmbeddedChain,
    laws: BTreeMap<TransitionKey, TransitionLaw>,
    n_covariates: usize,
}

impl SojournModelI {
    pub fn new(space: StateSpace, chain: EmbeddedChain, laws: Vec<TransitionLaw>, n_covariates: usize) -> Result<Self> {
        if chain.n_states() != space.n_states() {
            return Err(Error::DimensionMismatch {
                expected: space.n_states(),
                actual: chain.n_states(),
                context: "embedded chain size".into(),
            });
        }
        let laws = index_laws(&space, laws, n_covariates)?;
        for i in 0..space.n_states() {
            for j in 0..space.n_states() {
                let key = TransitionKey { from: i, to: j };
                let has_law = laws.contains_key(&key);
                let positive = chain.p(i, j) > 0.0;
                if has_law != positive {
                    return Err(Error::InvalidModel(format!(
                        "transition {}: p = {} but sojourn law {}",
                        space.key_label(key),
                        chain.p(i, j),
                        if has_law { "present" } else { "missing" }
                    )));
                }
            }
        }
        let derived = (0..space.n_states()).filter(|&i| chain.is_absorbing(i)).collect();
        space.check_absorbing(&derived)?;
        Ok(SojournModelI {
            space,
            chain,
            laws,
            n_covariates,
        })
    }

    /// CTMC in sojourn form: `α_ij(t) = λ_i`, `p_ij = P_ij`.
    pub fn ctmc(space: StateSpace, chain: EmbeddedChain, rates: &[f64]) -> Result<Self> {
        let mut laws = Vec::new();
        for i in 0..chain.n_states() {
            for j in 0..chain.n_states() {
                if chain.p(i, j) > 0.0 {
                    let dist = Distribution::exponential(*rates.get(i).ok_or_else(|| Error::DimensionMismatch {
                        expected: chain.n_states(),
                        actual: rates.len(),
                        context: "CTMC rates".into(),
                    })?)?;
                    laws.push(TransitionLaw::baseline_only(TransitionKey::new(i, j)?, dist));
                }
            }
        }
        SojournModelI::new(space, chain, laws, 0)
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn chain(&self) -> &EmbeddedChain {
        &self.chain
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn law(&self, key: TransitionKey) -> Option<&TransitionLaw> {
        self.laws.get(&key)
    }

    pub fn laws(&self) -> impl Iterator<Item = &TransitionLaw> {
        self.laws.values()
    }

    pub fn targets(&self, from: usize) -> Vec<usize> {
        self.laws.range(key_range(from)).map(|(k, _)| k.to).collect()
    }

    pub fn is_absorbing(&self, i: usize) -> bool {
        self.space.is_absorbing(i)
    }

    /// `ln S_i(t) = ln Σ_j p_ij S_ij(t | z)`.
    pub fn log_holding_survival(&self, from: usize, z: &[f64], t: f64) -> Result<f64> {
        if self.space.is_absorbing(from) {
            return Err(Error::AbsorbingState(self.space.label(from).to_string()));
        }
        let mut terms = Vec::new();
        for (key, law) in self.laws.range(key_range(from)) {
            terms.push(self.chain.p(from, key.to).ln() + law.log_survival(z, t)?);
        }
        Ok(log_sum_exp(&terms))
    }

    /// Closed form `p_ij F_ij(t | z)`.
    pub fn cif(&self, from: usize, to: usize, z: &[f64], t: f64) -> Result<f64> {
        let p = self.chain.p(from, to);
        match self.laws.get(&TransitionKey { from, to }) {
            Some(law) => Ok(p * -(-law.cumulative_hazard(z, t)?).exp_m1()),
            None => Ok(0.0),
        }
    }
}

/// Approach II: intensity transition functions.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityModelII {
    space: StateSpace,
    laws: BTreeMap<TransitionKey, TransitionLaw>,
    n_covariates: usize,
}

impl IntensityModelII {
    pub fn new(space: StateSpace, laws: Vec<TransitionLaw>, n_covariates: usize) -> Result<Self> {
        let laws = index_laws(&space, laws, n_covariates)?;
        let derived = (0..space.n_states())
            .filter(|&i| laws.range(key_range(i)).next().is_none())
            .collect();
        space.check_absorbing(&derived)?;
        Ok(IntensityModelII {
            space,
            laws,
            n_covariates,
        })
    }

    /// CTMC in intensity form: `α̃_ij(t) = q_ij`.
    pub fn ctmc(space: StateSpace, generator: &[Vec<f64>]) -> Result<Self> {
        let mut laws = Vec::new();
        for (i, row) in generator.iter().enumerate() {
            for (j, &q) in row.iter().enumerate() {
                if i != j && q > 0.0 {
                    laws.push(TransitionLaw::baseline_only(
                        TransitionKey::new(i, j)?,
                        Distribution::exponential(q)?,
                    ));
                }
            }
        }
        IntensityModelII::new(space, laws, 0)
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn law(&self, key: TransitionKey) -> Option<&TransitionLaw> {
        self.laws.get(&key)
    }

    pub fn laws(&self) -> impl Iterator<Item = &TransitionLaw> {
        self.laws.values()
    }

    pub fn outgoing(&self, from: usize) -> impl Iterator<Item = &TransitionLaw> {
        self.laws.range(key_range(from)).map(|(_, l)| l)
    }
}

fn key_range(from: usize) -> std::ops::RangeInclusive<TransitionKey> {
    TransitionKey { from, to: 0 }..=TransitionKey { from, to: usize::MAX }
}

/// Common-shape Weibull representation of every intensity out of one state:
/// `α̃_ij(t) = c_ij η t^{η-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonShape {
    pub shape: f64,
    pub weights: Vec<(usize, f64)>,
}

/// Anything that provides intensity transition functions `α̃_ij(t | z)`:
/// a parametric [`IntensityModelII`] or a converted Approach I model.
pub trait IntensitySource: Sync {
    fn space(&self) -> &StateSpace;

    fn n_covariates(&self) -> usize;

    /// Target states with a nonzero intensity out of `from`.
    fn targets(&self, from: usize) -> Vec<usize>;

    /// `ln α̃_ij(t | z)`; `-inf` where the intensity is zero.
    fn log_intensity(&self, from: usize, to: usize, z: &[f64], t: f64) -> Result<f64>;

    /// `∫₀ᵗ Σ_j α̃_ij(u | z) du = -ln S_i(t | z)`.
    fn cumulative_total_intensity(&self, from: usize, z: &[f64], t: f64) -> Result<f64>;

    /// `ln(α̃_ij(t) S_i(t))`, the log subdensity of leaving `from` for `to` at `t`.
    fn log_exit_density(&self, from: usize, to: usize, z: &[f64], t: f64) -> Result<f64> {
        let cum = self.cumulative_total_intensity(from, z, t)?;
        if cum == f64::INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(self.log_intensity(from, to, z, t)? - cum)
    }

    fn intensity(&self, from: usize, to: usize, z: &[f64], t: f64) -> Result<f64> {
        Ok(self.log_intensity(from, to, z, t)?.exp())
    }

    fn total_intensity(&self, from: usize, z: &[f64], t: f64) -> Result<f64> {
        let mut sum = 0.0;
        for j in self.targets(from) {
            sum += self.intensity(from, j, z, t)?;
        }
        Ok(sum)
    }

    fn log_holding_survival(&self, from: usize, z: &[f64], t: f64) -> Result<f64> {
        Ok(-self.cumulative_total_intensity(from, z, t)?)
    }

    /// Closed-form Weibull structure, when every intensity out of `from` is a
    /// Weibull with one shared shape.
    fn common_shape(&self, _from: usize, _z: &[f64]) -> Result<Option<CommonShape>> {
        Ok(None)
    }
}

impl IntensitySource for IntensityModelII {
    fn space(&self) -> &StateSpace {
        &self.space
    }

    fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    fn targets(&self, from: usize) -> Vec<usize> {
        self.outgoing(from).map(|l| l.key.to).collect()
    }

    fn log_intensity(&self, from: usize, to: usize, z: &[f64], t: f64) -> Result<f64> {
        match self.laws.get(&TransitionKey { from, to }) {
            Some(law) => law.log_hazard(z, t),
            None => Ok(f64::NEG_INFINITY),
        }
    }

    fn cumulative_total_intensity(&self, from: usize, z: &[f64], t: f64) -> Result<f64> {
        let mut sum = 0.0;
        for law in self.outgoing(from) {
            sum += law.cumulative_hazard(z, t)?;
        }
        Ok(sum)
    }

    fn common_shape(&self, from: usize, z: &[f64]) -> Result<Option<CommonShape>> {
        let mut shape = None;
        let mut weights = Vec::new();
        for law in self.outgoing(from) {
            let Some((eta, mu)) = law.baseline.as_weibull() else {
                return Ok(None);
            };
            match shape {
                None => shape = Some(eta),
                Some(s) if (s - eta).abs() <= 1e-12 * s => {}
                Some(_) => return Ok(None),
            }
            weights.push((law.key.to, mu.powf(-eta) * law.linear_predictor(z)?.exp()));
        }
        Ok(shape.map(|shape| CommonShape { shape, weights }))
    }
}

/// `S_i(t | z) = Σ_j p_ij S_ij(t | z)` under Approach I.
pub fn holding_survival_i(model: &SojournModelI, from: usize, z: &[f64], t: f64) -> Result<f64> {
    check_covariates(z, model.n_covariates)?;
    check_time(t)?;
    Ok(model.log_holding_survival(from, z, t)?.exp())
}

/// `α̃_i(t | z) = Σ_j α̃_ij(t | z)`; zero for absorbing states.
pub fn total_intensity<S: IntensitySource + ?Sized>(model: &S, from: usize, z: &[f64], t: f64) -> Result<f64> {
    check_covariates(z, model.n_covariates())?;
    check_time(t)?;
    model.total_intensity(from, z, t)
}

/// `S_i(t | z) = exp(-∫₀ᵗ α̃_i)` under Approach II.
pub fn holding_survival_ii<S: IntensitySource + ?Sized>(model: &S, from: usize, z: &[f64], t: f64) -> Result<f64> {
    check_covariates(z, model.n_covariates())?;
    check_time(t)?;
    Ok(model.log_holding_survival(from, z, t)?.exp())
}

/// Cumulative incidence `CIF_ij(t) = ∫₀ᵗ S_i(u) α̃_ij(u) du`; `t` may be `+inf`.
pub fn cif<S: IntensitySource + ?Sized>(
    model: &S,
    from: usize,
    to: usize,
    z: &[f64],
    t: f64,
    spec: &QuadratureSpec,
) -> Result<Integral> {
    check_covariates(z, model.n_covariates())?;
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain(format!("time {t} must be nonnegative")));
    }
    if !model.targets(from).contains(&to) {
        return Ok(Integral {
            value: 0.0,
            error: 0.0,
            subdivisions: 0,
        });
    }
    integrate_exit_density(model, from, to, z, 0.0, t, spec)
}

/// `∫ₐᵇ α̃_ij(u) S_i(u) du` with integrand errors propagated.
pub(crate) fn integrate_exit_density<S: IntensitySource + ?Sized>(
    model: &S,
    from: usize,
    to: usize,
    z: &[f64],
    lower: f64,
    upper: f64,
    spec: &QuadratureSpec,
) -> Result<Integral> {
    let failure = std::cell::RefCell::new(None);
    let integrand = |u: f64| match model.log_exit_density(from, to, z, u) {
        Ok(v) => v.exp(),
        Err(e) => {
            failure.borrow_mut().get_or_insert(e);
            0.0
        }
    };
    let result = integrate(integrand, lower, upper, spec);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    result
}

fn check_time(t: f64) -> Result<()> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain(format!("time {t} must be nonnegative")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn key(a: usize, b: usize) -> TransitionKey {
        TransitionKey::new(a, b).unwrap()
    }

    fn constant_ii(a: f64, b: f64) -> IntensityModelII {
        let space = StateSpace::numbered(3, [1, 2]).unwrap();
        IntensityModelII::new(
            space,
            vec![
                TransitionLaw::baseline_only(key(0, 1), Distribution::exponential(a).unwrap()),
                TransitionLaw::baseline_only(key(0, 2), Distribution::exponential(b).unwrap()),
            ],
            0,
        )
        .unwrap()
    }

    #[test]
    fn adjusted_hazard_examples() {
        let law =
            TransitionLaw::with_beta(key(0, 1), Distribution::weibull(1.0, 2.0).unwrap(), vec![2f64.ln()]).unwrap();
        for t in [0.0, 0.4, 3.0] {
            assert_relative_eq!(adjusted_hazard(&law, &[1.0], t).unwrap(), 1.0, max_relative = 1e-14);
            assert_relative_eq!(
                adjusted_hazard(&law, &[0.0], t).unwrap(),
                law.baseline.hazard(t),
                max_relative = 1e-15
            );
        }
        let law =
            TransitionLaw::with_beta(key(0, 1), Distribution::exponential(0.3).unwrap(), vec![0.5, -0.5]).unwrap();
        assert_relative_eq!(
            adjusted_hazard(&law, &[1.0, 1.0], 2.0).unwrap(),
            0.3,
            max_relative = 1e-15
        );
        assert!(matches!(
            adjusted_hazard(&law, &[1.0], 2.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn covariate_rescaling_is_exact() {
        let base = Distribution::weibull(1.3, 0.7).unwrap();
        let a = TransitionLaw::with_beta(key(0, 1), base.clone(), vec![0.8]).unwrap();
        let b = TransitionLaw::with_beta(key(0, 1), base, vec![0.8 / 4.0]).unwrap();
        for t in [0.1, 1.0, 2.5] {
            assert_eq!(a.hazard(&[1.5], t).unwrap(), b.hazard(&[1.5 * 4.0], t).unwrap());
        }
    }

    #[test]
    fn holding_survival_i_examples() {
        let space = StateSpace::numbered(3, [1, 2]).unwrap();
        let build = |p: [f64; 2], rates: [f64; 2]| {
            let chain = EmbeddedChain::new(vec![vec![0.0, p[0], p[1]], vec![0.0; 3], vec![0.0; 3]]).unwrap();
            SojournModelI::new(
                space.clone(),
                chain,
                vec![
                    TransitionLaw::baseline_only(key(0, 1), Distribution::exponential(rates[0]).unwrap()),
                    TransitionLaw::baseline_only(key(0, 2), Distribution::exponential(rates[1]).unwrap()),
                ],
                0,
            )
            .unwrap()
        };
        let m = build([0.3, 0.7], [1.0, 1.0]);
        assert_relative_eq!(
            holding_survival_i(&m, 0, &[], 1.0).unwrap(),
            (-1.0f64).exp(),
            max_relative = 1e-14
        );
        assert_eq!(holding_survival_i(&m, 0, &[], 0.0).unwrap(), 1.0);
        let m = build([0.5, 0.5], [1.0, 2.0]);
        let expected = 0.5 * (-1.0f64).exp() + 0.5 * (-2.0f64).exp();
        assert_relative_eq!(
            holding_survival_i(&m, 0, &[], 1.0).unwrap(),
            expected,
            max_relative = 1e-14
        );
        assert_relative_eq!(expected, 0.2516, max_relative = 1e-3);
        assert!(matches!(
            holding_survival_i(&m, 1, &[], 1.0),
            Err(Error::AbsorbingState(_))
        ));
    }

    #[test]
    fn total_intensity_and_holding_survival_ii() {
        let m = constant_ii(0.2, 0.1);
        for t in [0.0, 1.0, 50.0] {
            assert_relative_eq!(total_intensity(&m, 0, &[], t).unwrap(), 0.3, max_relative = 1e-15);
        }
        assert_eq!(total_intensity(&m, 1, &[], 1.0).unwrap(), 0.0);
        assert_relative_eq!(
            holding_survival_ii(&m, 0, &[], 2.0).unwrap(),
            (-0.6f64).exp(),
            max_relative = 1e-14
        );
        assert_relative_eq!(
            holding_survival_ii(&m, 0, &[], 2.0).unwrap(),
            0.5488,
            max_relative = 1e-4
        );
        assert_eq!(holding_survival_ii(&m, 0, &[], 0.0).unwrap(), 1.0);

        let space = StateSpace::numbered(2, [1]).unwrap();
        let single = IntensityModelII::new(
            space,
            vec![TransitionLaw::baseline_only(
                key(0, 1),
                Distribution::weibull(1.7, 0.9).unwrap(),
            )],
            0,
        )
        .unwrap();
        assert_relative_eq!(
            total_intensity(&single, 0, &[], 1.3).unwrap(),
            Distribution::weibull(1.7, 0.9).unwrap().hazard(1.3),
            max_relative = 1e-15
        );

        let space = StateSpace::numbered(3, [1, 2]).unwrap();
        let weib = IntensityModelII::new(
            space,
            vec![
                TransitionLaw::baseline_only(key(0, 1), Distribution::weibull(2.0, 1.0).unwrap()),
                TransitionLaw::baseline_only(key(0, 2), Distribution::weibull(2.0, 2.0).unwrap()),
            ],
            0,
        )
        .unwrap();
        let s = holding_survival_ii(&weib, 0, &[], 1.0).unwrap();
        assert_relative_eq!(s, (-1.25f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(s, 0.2865, max_relative = 1e-3);
        // oracle: quadrature of the total intensity
        let q = integrate(
            |u| total_intensity(&weib, 0, &[], u).unwrap(),
            0.0,
            1.0,
            &QuadratureSpec::default(),
        )
        .unwrap();
        assert_relative_eq!(s, (-q.value).exp(), max_relative = 1e-9);
    }

    #[test]
    fn cif_examples() {
        let m = constant_ii(0.2, 0.1);
        let spec = QuadratureSpec::default();
        let inf = cif(&m, 0, 1, &[], f64::INFINITY, &spec).unwrap().value;
        assert_relative_eq!(inf, 2.0 / 3.0, max_relative = 1e-9);
        let at1 = cif(&m, 0, 1, &[], 1.0, &spec).unwrap().value;
        let closed = (2.0 / 3.0) * (1.0 - (-0.3f64).exp());
        assert_relative_eq!(at1, closed, max_relative = 1e-10);
        assert_relative_eq!(at1, 0.1728, max_relative = 1e-3);
        assert_eq!(cif(&m, 0, 1, &[], 0.0, &spec).unwrap().value, 0.0);
        assert_eq!(cif(&m, 1, 0, &[], 2.0, &spec).unwrap().value, 0.0);
    }

    #[test]
    fn chain_invariants_are_enforced() {
        assert!(EmbeddedChain::new(vec![vec![0.1, 0.9], vec![1.0, 0.0]]).is_err());
        assert!(EmbeddedChain::new(vec![vec![0.0, 0.9], vec![1.0, 0.0]]).is_err());
        assert!(EmbeddedChain::new(vec![vec![0.0, 1.0], vec![0.0, 0.0]]).is_ok());
    }

    #[test]
    fn absorbing_declaration_must_match_model() {
        let space = StateSpace::numbered(3, [2]).unwrap();
        let r = IntensityModelII::new(
            space,
            vec![TransitionLaw::baseline_only(
                key(0, 1),
                Distribution::exponential(1.0).unwrap(),
            )],
            0,
        );
        assert!(matches!(r, Err(Error::InvalidModel(_))));
    }

    #[test]
    fn sojourn_laws_must_match_chain_support() {
        let space = StateSpace::numbered(3, [1, 2]).unwrap();
        let chain = EmbeddedChain::new(vec![vec![0.0, 0.5, 0.5], vec![0.0; 3], vec![0.0; 3]]).unwrap();
        let r = SojournModelI::new(
            space,
            chain,
            vec![TransitionLaw::baseline_only(
                key(0, 1),
                Distribution::exponential(1.0).unwrap(),
            )],
            0,
        );
        assert!(r.is_err());
    }
}
