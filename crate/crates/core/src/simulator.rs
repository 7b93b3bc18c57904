//! Right-censored trajectory simulation under either parameterization.
//!
//! Every subject gets its own ChaCha8 stream: the generator is seeded with
//! the run seed and the stream id is the subject index, so output does not
//! depend on thread scheduling. Within a subject, draws happen in a fixed
//! order: covariates, initial state, then per epoch the destination (I) or
//! holding time (II) first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp1, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::converter::i_to_ii;
use crate::error::{Error, Result};
use crate::likelihood::{Dataset, SubjectHistory};
use crate::model::{IntensitySource, SojournModelI, TransitionKey};
use crate::special::solve_increasing;

/// Root-finding tolerance for holding times, in time units.
pub const HOLDING_TIME_TOL: f64 = 1e-10;

/// Offset applied to the seed of the second sample in equivalence checks.
const SECOND_SAMPLE_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Fixed(usize),
    /// Probabilities over states.
    Distribution(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovariateDraw {
    Fixed { value: f64 },
    Bernoulli { p: f64 },
    Normal { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateGenerator {
    /// Subject `h` gets `vectors[h % len]`.
    Vectors(Vec<Vec<f64>>),
    /// Independent draws per covariate.
    Independent(Vec<CovariateDraw>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: f64,
    pub n_subjects: usize,
    pub seed: u64,
    pub initial_state: InitialState,
    pub covariate_names: Vec<String>,
    pub covariates: CovariateGenerator,
}

impl SimConfig {
    /// No covariates, everyone starts in state index 0.
    pub fn new(horizon: f64, n_subjects: usize, seed: u64) -> Self {
        SimConfig {
            horizon,
            n_subjects,
            seed,
            initial_state: InitialState::Fixed(0),
            covariate_names: vec![],
            covariates: CovariateGenerator::Independent(vec![]),
        }
    }

    fn validate(&self, n_states: usize, n_covariates: usize) -> Result<()> {
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Domain(format!(
                "horizon {} must be finite and nonnegative",
                self.horizon
            )));
        }
        if self.n_subjects == 0 {
            return Err(Error::Domain("n_subjects must be at least 1".into()));
        }
        match &self.initial_state {
            InitialState::Fixed(i) if *i >= n_states => {
                return Err(Error::Domain(format!("initial state index {i} out of range")));
            }
            InitialState::Distribution(p) => {
                if p.len() != n_states {
                    return Err(Error::DimensionMismatch {
                        expected: n_states,
                        actual: p.len(),
                        context: "initial state distribution".into(),
                    });
                }
                let sum: f64 = p.iter().sum();
                if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-10 {
                    return Err(Error::Domain(
                        "initial state distribution must be a probability vector".into(),
                    ));
                }
            }
            _ => {}
        }
        if self.covariate_names.len() != n_covariates {
            return Err(Error::DimensionMismatch {
                expected: n_covariates,
                actual: self.covariate_names.len(),
                context: "covariate names in simulation config".into(),
            });
        }
        match &self.covariates {
            CovariateGenerator::Vectors(v) => {
                if v.is_empty() {
                    return Err(Error::Domain("covariate vector list is empty".into()));
                }
                if let Some(bad) = v.iter().find(|z| z.len() != n_covariates) {
                    return Err(Error::DimensionMismatch {
                        expected: n_covariates,
                        actual: bad.len(),
                        context: "fixed covariate vector".into(),
                    });
                }
            }
            CovariateGenerator::Independent(d) => {
                if d.len() != n_covariates {
                    return Err(Error::DimensionMismatch {
                        expected: n_covariates,
                        actual: d.len(),
                        context: "covariate generators".into(),
                    });
                }
                for draw in d {
                    match draw {
                        CovariateDraw::Bernoulli { p } if !(0.0..=1.0).contains(p) => {
                            return Err(Error::Domain(format!("bernoulli probability {p} outside [0, 1]")));
                        }
                        CovariateDraw::Normal { sd, .. } if !(*sd >= 0.0 && sd.is_finite()) => {
                            return Err(Error::Domain(format!("normal sd {sd} must be nonnegative")));
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_covariates(cfg: &SimConfig, index: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match &cfg.covariates {
        CovariateGenerator::Vectors(v) => v[index % v.len()].clone(),
        CovariateGenerator::Independent(draws) => draws
            .iter()
            .map(|d| match d {
                CovariateDraw::Fixed { value } => *value,
                CovariateDraw::Bernoulli { p } => {
                    if rng.random::<f64>() < *p {
                        1.0
                    } else {
                        0.0
                    }
                }
                CovariateDraw::Normal { mean, sd } => Normal::new(*mean, *sd).expect("validated normal").sample(rng),
            })
            .collect(),
    }
}

fn draw_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

fn draw_initial(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> usize {
    match &cfg.initial_state {
        InitialState::Fixed(i) => *i,
        InitialState::Distribution(p) => draw_index(p, rng),
    }
}

/// Positive unit-exponential draw.
fn exp1(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let e: f64 = Exp1.sample(rng);
        if e > 0.0 {
            return e;
        }
    }
}

/// Residual time `U` such that `Στ + U` rounds to exactly `horizon` when the
/// sojourns are summed left to right.
fn censored_tail(sojourns: &[f64], horizon: f64) -> f64 {
    let s: f64 = sojourns.iter().sum();
    let mut u = (horizon - s).max(0.0);
    while s + u > horizon && u > 0.0 {
        u = u.next_down().max(0.0);
    }
    while s + u < horizon {
        u = u.next_up();
    }
    u
}

/// Accumulates one subject's path; the elapsed time is always the
/// left-to-right sum of sojourns so it matches [`SubjectHistory::follow_up`].
struct Path {
    states: Vec<usize>,
    sojourns: Vec<f64>,
    elapsed: f64,
}

impl Path {
    fn new() -> Self {
        Path {
            states: vec![],
            sojourns: vec![],
            elapsed: 0.0,
        }
    }

    fn fits(&self, tau: f64, horizon: f64) -> bool {
        self.elapsed + tau <= horizon
    }

    fn push(&mut self, to: usize, tau: f64) {
        self.states.push(to);
        self.sojourns.push(tau);
        self.elapsed += tau;
    }

    /// Closes the path at the horizon. When a rounding tie makes `Στ + U`
    /// skip over the horizon for every `U`, the last sojourn moves down one
    /// ulp, far below the holding-time tolerance.
    fn censor(mut self, id: usize, initial: usize, covariates: Vec<f64>, horizon: f64) -> SubjectHistory {
        let u = loop {
            let u = censored_tail(&self.sojourns, horizon);
            if self.sojourns.iter().sum::<f64>() + u == horizon {
                break u;
            }
            match self.sojourns.last_mut() {
                Some(last) if *last > f64::MIN_POSITIVE => *last = last.next_down(),
                _ => break u,
            }
        };
        self.finish(id, initial, covariates, Some(u))
    }

    fn finish(self, id: usize, initial: usize, covariates: Vec<f64>, tail: Option<f64>) -> SubjectHistory {
        SubjectHistory {
            id: format!("s{}", id + 1),
            initial_state: initial,
            states: self.states,
            sojourns: self.sojourns,
            censored_tail: tail,
            covariates,
        }
    }
}

fn simulate_with<F>(space: &crate::model::StateSpace, cfg: &SimConfig, one: F) -> Result<Dataset>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Result<SubjectHistory> + Sync + Send,
{
    let subjects = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|h| one(h, &mut subject_rng(cfg.seed, h)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(space.clone(), cfg.covariate_names.clone(), subjects)
}

/// Simulates from the embedded chain and conditional sojourn laws.
pub fn simulate_i(model: &SojournModelI, cfg: &SimConfig) -> Result<Dataset> {
    let space = model.space();
    cfg.validate(space.n_states(), model.n_covariates())?;
    simulate_with(space, cfg, |h, rng| {
        let z = draw_covariates(cfg, h, rng);
        let initial = draw_initial(cfg, rng);
        let mut path = Path::new();
        let mut state = initial;
        loop {
            if space.is_absorbing(state) {
                return Ok(path.finish(h, initial, z, None));
            }
            let to = draw_index(model.chain().row(state), rng);
            let law = model
                .law(TransitionKey { from: state, to })
                .expect("chain support has laws");
            let tau = law.time_at_cumulative_hazard(&z, exp1(rng))?;
            if !path.fits(tau, cfg.horizon) || tau <= 0.0 {
                return Ok(path.censor(h, initial, z, cfg.horizon));
            }
            path.push(to, tau);
            state = to;
        }
    })
}

/// Simulates competing intensities: the holding time inverts the total
/// cumulative intensity, the destination is drawn with probability
/// `α̃_ij(τ) / α̃_i(τ)`.
pub fn simulate_ii<S: IntensitySource + ?Sized>(model: &S, cfg: &SimConfig) -> Result<Dataset> {
    let space = model.space();
    cfg.validate(space.n_states(), model.n_covariates())?;
    simulate_with(space, cfg, |h, rng| {
        let z = draw_covariates(cfg, h, rng);
        let initial = draw_initial(cfg, rng);
        let mut path = Path::new();
        let mut state = initial;
        loop {
            let targets = model.targets(state);
            if targets.is_empty() {
                return Ok(path.finish(h, initial, z, None));
            }
            let e = exp1(rng);
            let remaining = cfg.horizon - path.elapsed;
            let censor = remaining <= 0.0 || model.cumulative_total_intensity(state, &z, remaining)? < e;
            if censor {
                return Ok(path.censor(h, initial, z, cfg.horizon));
            }
            let lambda = |t: f64| model.cumulative_total_intensity(state, &z, t).unwrap_or(f64::NAN);
            let rate = |t: f64| model.total_intensity(state, &z, t).unwrap_or(f64::NAN);
            let tau = solve_increasing(lambda, rate, e, remaining.min(1.0), HOLDING_TIME_TOL).map_err(|err| {
                Error::RootFinding(format!(
                    "subject {}, state {}: holding time for cumulative intensity {e}: {err}",
                    h + 1,
                    space.label(state)
                ))
            })?;
            if !path.fits(tau, cfg.horizon) || tau <= 0.0 {
                return Ok(path.censor(h, initial, z, cfg.horizon));
            }
            let weights = targets
                .iter()
                .map(|&j| model.intensity(state, j, &z, tau))
                .collect::<Result<Vec<f64>>>()?;
            let total: f64 = weights.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                return Err(Error::RootFinding(format!(
                    "subject {}, state {}: total intensity {total} at holding time {tau}",
                    h + 1,
                    space.label(state)
                )));
            }
            let to = targets[draw_index(&weights, rng)];
            path.push(to, tau);
            state = to;
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateComparison {
    pub state: String,
    pub n_a: usize,
    pub n_b: usize,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub chi2_statistic: f64,
    pub chi2_df: usize,
    pub chi2_p_value: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub alpha: f64,
    pub states: Vec<StateComparison>,
    pub rejected: bool,
}

pub const EQUIVALENCE_ALPHA: f64 = 1e-3;

/// Simulates from `model` and from its intensity form with the same size
/// and independent seeds, then compares the samples.
pub fn simulate_equivalence_check(model: &SojournModelI, cfg: &SimConfig) -> Result<EquivalenceReport> {
    let a = simulate_i(model, cfg)?;
    let other = SimConfig {
        seed: cfg.seed.wrapping_add(SECOND_SAMPLE_SEED_OFFSET),
        ..cfg.clone()
    };
    let b = simulate_ii(&i_to_ii(model), &other)?;
    compare_simulations(&a, &b, EQUIVALENCE_ALPHA)
}

/// Per state: two-sample KS on completed holding times and a chi-square
/// homogeneity test on exit outcomes (destinations plus censoring).
pub fn compare_simulations(a: &Dataset, b: &Dataset, alpha: f64) -> Result<EquivalenceReport> {
    let n = a.space().n_states();
    if b.space().n_states() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: b.space().n_states(),
            context: "states in compared datasets".into(),
        });
    }
    let mut states = Vec::new();
    for i in (0..n).filter(|&i| !a.space().is_absorbing(i)) {
        let (ta, ca) = epochs(a, i);
        let (tb, cb) = epochs(b, i);
        if ta.is_empty() && tb.is_empty() {
            continue;
        }
        let (d, ks_p) = ks_two_sample(&ta, &tb);
        let (chi2, df, chi_p) = chi_square_homogeneity(&ca, &cb);
        let rejected = ks_p < alpha || chi_p < alpha;
        states.push(StateComparison {
            state: a.space().label(i).to_string(),
            n_a: ta.len(),
            n_b: tb.len(),
            ks_statistic: d,
            ks_p_value: ks_p,
            chi2_statistic: chi2,
            chi2_df: df,
            chi2_p_value: chi_p,
            rejected,
        });
    }
    let rejected = states.iter().any(|s| s.rejected);
    Ok(EquivalenceReport {
        alpha,
        states,
        rejected,
    })
}

/// Completed holding times in state `i` and outcome counts (destinations,
/// last slot = censored).
fn epochs(ds: &Dataset, i: usize) -> (Vec<f64>, Vec<usize>) {
    let n = ds.space().n_states();
    let mut times = Vec::new();
    let mut counts = vec![0; n + 1];
    for h in ds.subjects() {
        for k in 0..h.n_transitions() {
            if h.state_before(k) == i {
                times.push(h.sojourns[k]);
                counts[h.states[k]] += 1;
            }
        }
        if h.censored_tail.is_some() && h.final_state() == i {
            counts[n] += 1;
        }
    }
    (times, counts)
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    if a.is_empty() || b.is_empty() {
        return (0.0, 1.0);
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let t = x[i].min(y[j]);
        while i < n && x[i] <= t {
            i += 1;
        }
        while j < m && y[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    (d, kolmogorov_q(lambda))
}

/// `Q_KS(λ) = 2 Σ (-1)^{k-1} exp(-2 k² λ²)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 * sum.abs().max(1e-300) {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Chi-square test of homogeneity for two count vectors over the same
/// categories; empty categories are dropped.
pub fn chi_square_homogeneity(a: &[usize], b: &[usize]) -> (f64, usize, f64) {
    let na: usize = a.iter().sum();
    let nb: usize = b.iter().sum();
    let cols: Vec<(usize, usize)> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x, y))
        .filter(|(x, y)| x + y > 0)
        .collect();
    if na == 0 || nb == 0 || cols.len() < 2 {
        return (0.0, 0, 1.0);
    }
    let total = (na + nb) as f64;
    let mut stat = 0.0;
    for &(x, y) in &cols {
        let col = (x + y) as f64;
        for (obs, row) in [(x, na), (y, nb)] {
            let expected = row as f64 * col / total;
            stat += (obs as f64 - expected).powi(2) / expected;
        }
    }
    let df = cols.len() - 1;
    let p = 1.0 - ChiSquared::new(df as f64).expect("positive df").cdf(stat);
    (stat, df, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::Distribution;
    use crate::model::{EmbeddedChain, IntensityModelII, StateSpace, TransitionLaw};

    fn key(a: usize, b: usize) -> TransitionKey {
        TransitionKey::new(a, b).unwrap()
    }

    fn two_state(rate: f64) -> SojournModelI {
        SojournModelI::ctmc(
            StateSpace::numbered(2, [1]).unwrap(),
            EmbeddedChain::new(vec![vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap(),
            &[rate, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn zero_horizon_censors_everyone_at_zero() {
        let ds = simulate_i(&two_state(1.0), &SimConfig::new(0.0, 50, 3)).unwrap();
        for h in ds.subjects() {
            assert_eq!(h.n_transitions(), 0);
            assert_eq!(h.censored_tail, Some(0.0));
        }
    }

    #[test]
    fn censoring_consistency_is_exact() {
        let m = two_state(0.3);
        let ds = simulate_i(&m, &SimConfig::new(2.7, 500, 11)).unwrap();
        for h in ds.subjects() {
            match h.censored_tail {
                Some(_) => assert_eq!(h.follow_up(), 2.7),
                None => assert!(h.follow_up() <= 2.7),
            }
        }
    }

    #[test]
    fn rounding_ties_still_reach_the_horizon() {
        // every sum s + u lands on a tie, and both ties round away from the odd horizon
        let horizon = 3.0 + 2f64.powi(-51);
        let s = 0.5 + 2f64.powi(-52);
        let u = censored_tail(&[s], horizon);
        assert_ne!(s + u, horizon);
        let mut path = Path::new();
        path.push(1, s);
        let h = path.censor(0, 0, vec![], horizon);
        assert_eq!(h.sojourns[0], s.next_down());
        assert_eq!(h.sojourns[0] + h.censored_tail.unwrap(), horizon);
    }

    #[test]
    fn tail_adjustment_hits_horizon() {
        let sojourns = [0.1, 0.2, 0.30000000000000004, 1e-9];
        let u = censored_tail(&sojourns, 1.0);
        assert_eq!(sojourns.iter().sum::<f64>() + u, 1.0);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let m = IntensityModelII::new(
            StateSpace::numbered(3, [2]).unwrap(),
            vec![
                TransitionLaw::baseline_only(key(0, 1), Distribution::weibull(1.4, 2.0).unwrap()),
                TransitionLaw::baseline_only(key(0, 2), Distribution::exponential(0.2).unwrap()),
                TransitionLaw::baseline_only(key(1, 2), Distribution::weibull(0.8, 1.0).unwrap()),
            ],
            0,
        )
        .unwrap();
        let cfg = SimConfig::new(5.0, 300, 42);
        assert_eq!(simulate_ii(&m, &cfg).unwrap(), simulate_ii(&m, &cfg).unwrap());
        let other = SimConfig::new(5.0, 300, 43);
        assert_ne!(simulate_ii(&m, &cfg).unwrap(), simulate_ii(&m, &other).unwrap());
    }

    #[test]
    fn covariates_are_drawn_per_subject() {
        let cfg = SimConfig {
            covariate_names: vec!["x".into(), "y".into()],
            covariates: CovariateGenerator::Independent(vec![
                CovariateDraw::Bernoulli { p: 0.5 },
                CovariateDraw::Normal { mean: 0.0, sd: 1.0 },
            ]),
            ..SimConfig::new(1.0, 400, 5)
        };
        let law = TransitionLaw::with_beta(key(0, 1), Distribution::exponential(1.0).unwrap(), vec![0.5, 0.0]).unwrap();
        let m = SojournModelI::new(
            StateSpace::numbered(2, [1]).unwrap(),
            EmbeddedChain::new(vec![vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap(),
            vec![law],
            2,
        )
        .unwrap();
        let ds = simulate_i(&m, &cfg).unwrap();
        let ones = ds.subjects().iter().filter(|h| h.covariates[0] == 1.0).count();
        assert!(ones > 150 && ones < 250);
        assert!(ds
            .subjects()
            .iter()
            .all(|h| h.covariates[0] == 0.0 || h.covariates[0] == 1.0));
    }

    #[test]
    fn ks_detects_shift_and_accepts_same() {
        let a: Vec<f64> = (0..500).map(|k| k as f64 / 500.0).collect();
        let b: Vec<f64> = (0..400).map(|k| (k as f64 + 0.5) / 400.0).collect();
        assert!(ks_two_sample(&a, &b).1 > 0.5);
        let c: Vec<f64> = b.iter().map(|v| v + 0.3).collect();
        assert!(ks_two_sample(&a, &c).1 < 1e-6);
    }

    #[test]
    fn chi_square_examples() {
        let (_, df, p) = chi_square_homogeneity(&[50, 50, 0], &[48, 52, 0]);
        assert_eq!(df, 1);
        assert!(p > 0.5);
        let (_, _, p) = chi_square_homogeneity(&[90, 10], &[50, 50]);
        assert!(p < 1e-6);
    }
}
