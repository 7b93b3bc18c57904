//! Conversion between the sojourn (I) and intensity (II) parameterizations.
//!
//! I → II is exact and pointwise: `α̃_ij = p_ij f_ij / S_i`. II → I needs the
//! improper integrals `p_ij = ∫₀^∞ α̃_ij S_i`, done by adaptive quadrature
//! unless every intensity out of the state is Weibull with one shared shape.
//!
//! Under a shared shape `η`, `α̃_ij(t) = c_ij η t^{η-1}` with
//! `c_ij = μ_ij^{-η} exp(βᵀz)`, so `p_ij = c_ij / Σ_k c_ik` and every
//! conditional sojourn law out of the state is Weibull with scale
//! `(Σ_k c_ik)^{-1/η}`.

use log::warn;

use crate::error::{Error, Result};
use crate::families::Distribution;
use crate::model::{
    integrate_exit_density, CommonShape, EmbeddedChain, IntensitySource, SojournModelI, StateSpace, TransitionKey,
};
use crate::quadrature::QuadratureSpec;

pub use crate::quadrature::{integrate, Integral};

/// Row sums within this distance of 1 are renormalized; beyond it the row is
/// treated as defective.
pub const DEFECT_TOLERANCE: f64 = 1e-4;

/// Approach II view of an Approach I model, evaluated pointwise.
#[derive(Debug, Clone)]
pub struct IntensityEvaluator {
    model: SojournModelI,
}

/// Wraps `model` so it can be used wherever intensities are expected.
pub fn i_to_ii(model: &SojournModelI) -> IntensityEvaluator {
    IntensityEvaluator { model: model.clone() }
}

impl IntensityEvaluator {
    pub fn model(&self) -> &SojournModelI {
        &self.model
    }

    /// `α̃_ij(t | z)`.
    pub fn rate(&self, from: usize, to: usize, z: &[f64], t: f64) -> Result<f64> {
        if z.len() != self.model.n_covariates() {
            return Err(Error::DimensionMismatch {
                expected: self.model.n_covariates(),
                actual: z.len(),
                context: "covariate vector".into(),
            });
        }
        if t.is_nan() || t < 0.0 {
            return Err(Error::Domain(format!("time {t} must be nonnegative")));
        }
        self.intensity(from, to, z, t)
    }
}

impl IntensitySource for IntensityEvaluator {
    fn space(&self) -> &StateSpace {
        self.model.space()
    }

    fn n_covariates(&self) -> usize {
        self.model.n_covariates()
    }

    fn targets(&self, from: usize) -> Vec<usize> {
        self.model.targets(from)
    }

    fn log_intensity(&self, from: usize, to: usize, z: &[f64], t: f64) -> Result<f64> {
        if self.model.is_absorbing(from) {
            return Ok(f64::NEG_INFINITY);
        }
        let numerator = self.log_exit_density(from, to, z, t)?;
        if numerator == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let log_s = self.model.log_holding_survival(from, z, t)?;
        if log_s == f64::NEG_INFINITY {
            return Err(Error::TailEvaluation {
                state: self.model.space().label(from).to_string(),
                t,
            });
        }
        Ok(numerator - log_s)
    }

    fn cumulative_total_intensity(&self, from: usize, z: &[f64], t: f64) -> Result<f64> {
        if self.model.is_absorbing(from) {
            return Ok(0.0);
        }
        Ok(-self.model.log_holding_survival(from, z, t)?)
    }

    /// `ln(p_ij f_ij(t))`, exact even where `S_i` underflows.
    fn log_exit_density(&self, from: usize, to: usize, z: &[f64], t: f64) -> Result<f64> {
        match self.model.law(TransitionKey { from, to }) {
            Some(law) => Ok(self.model.chain().p(from, to).ln() + law.log_density(z, t)?),
            None => Ok(f64::NEG_INFINITY),
        }
    }

    fn log_holding_survival(&self, from: usize, z: &[f64], t: f64) -> Result<f64> {
        if self.model.is_absorbing(from) {
            return Ok(0.0);
        }
        self.model.log_holding_survival(from, z, t)
    }

    fn common_shape(&self, from: usize, z: &[f64]) -> Result<Option<CommonShape>> {
        Ok(weibull_closure(&self.model, from, z)?.map(|laws| {
            let shape = laws[0].1.as_weibull().map(|(s, _)| s).unwrap_or(1.0);
            CommonShape {
                shape,
                weights: laws
                    .iter()
                    .map(|(j, d)| {
                        let (eta, mu) = d.as_weibull().expect("closure yields Weibull laws");
                        (*j, mu.powf(-eta))
                    })
                    .collect(),
            }
        }))
    }
}

/// Checks the Weibull-preserving condition out of `from` at covariates `z`:
/// all covariate-adjusted sojourn laws are Weibull with one shape and one
/// scale. Returns the resulting Weibull intensities (scale `p^{-1/η} μ`)
/// when it holds.
pub fn weibull_closure(model: &SojournModelI, from: usize, z: &[f64]) -> Result<Option<Vec<(usize, Distribution)>>> {
    let mut common: Option<(f64, f64)> = None;
    let targets = model.targets(from);
    if targets.is_empty() {
        return Ok(None);
    }
    for &j in &targets {
        let law = model.law(TransitionKey { from, to: j }).expect("target has a law");
        let Some((eta, mu)) = law.baseline.as_weibull() else {
            return Ok(None);
        };
        let adjusted = mu * (-law.linear_predictor(z)? / eta).exp();
        match common {
            None => common = Some((eta, adjusted)),
            Some((e, m)) => {
                if (e - eta).abs() > 1e-12 * e || (m - adjusted).abs() > 1e-12 * m {
                    return Ok(None);
                }
            }
        }
    }
    let (eta, mu) = common.expect("at least one target");
    targets
        .into_iter()
        .map(|j| {
            let p = model.chain().p(from, j);
            Ok((j, Distribution::weibull(eta, p.powf(-1.0 / eta) * mu)?))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Result of [`ii_to_i_probs`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChainConversion {
    pub chain: EmbeddedChain,
    /// Row sums before renormalization.
    pub raw_row_sums: Vec<f64>,
    /// Quadrature error estimate per entry (zero for closed forms).
    pub errors: Vec<Vec<f64>>,
    /// Rows computed from the common-shape Weibull closed form.
    pub closed_form: Vec<bool>,
}

/// Embedded chain implied by an intensity model at covariates `z`.
pub fn ii_to_i_probs<S: IntensitySource + ?Sized>(
    model: &S,
    z: &[f64],
    spec: &QuadratureSpec,
) -> Result<ChainConversion> {
    ii_to_i_probs_with(model, z, spec, true)
}

/// As [`ii_to_i_probs`], optionally bypassing closed forms so every entry
/// goes through quadrature.
pub fn ii_to_i_probs_with<S: IntensitySource + ?Sized>(
    model: &S,
    z: &[f64],
    spec: &QuadratureSpec,
    closed_forms: bool,
) -> Result<ChainConversion> {
    check_z(model, z)?;
    let n = model.space().n_states();
    let mut probs = vec![vec![0.0; n]; n];
    let mut errors = vec![vec![0.0; n]; n];
    let mut raw_row_sums = vec![0.0; n];
    let mut closed_form = vec![false; n];
    for i in 0..n {
        let targets = model.targets(i);
        if targets.is_empty() {
            continue;
        }
        let shape = if closed_forms { model.common_shape(i, z)? } else { None };
        if let Some(shape) = shape {
            let total: f64 = shape.weights.iter().map(|(_, c)| c).sum();
            for &(j, c) in &shape.weights {
                probs[i][j] = c / total;
            }
            closed_form[i] = true;
        } else {
            for &j in &targets {
                let r = integrate_exit_density(model, i, j, z, 0.0, f64::INFINITY, spec)?;
                probs[i][j] = r.value;
                errors[i][j] = r.error;
            }
        }
        let sum: f64 = probs[i].iter().sum();
        raw_row_sums[i] = sum;
        let label = model.space().label(i);
        if (sum - 1.0).abs() > DEFECT_TOLERANCE {
            return Err(Error::DefectiveDistribution {
                state: label.to_string(),
                sum,
            });
        }
        if (sum - 1.0).abs() > 2.0 * spec.rel_tol {
            warn!("row {label} sums to {sum}; renormalizing");
        }
        for p in probs[i].iter_mut() {
            *p /= sum;
        }
    }
    Ok(ChainConversion {
        chain: EmbeddedChain::new(probs)?,
        raw_row_sums,
        errors,
        closed_form,
    })
}

/// Conditional sojourn law `f_ij = α̃_ij S_i / p_ij` of an intensity model.
#[derive(Debug)]
pub struct ConvertedSojourn<'a, S: IntensitySource + ?Sized> {
    model: &'a S,
    from: usize,
    to: usize,
    z: Vec<f64>,
    p: f64,
    ln_p: f64,
    closed: Option<Distribution>,
    spec: QuadratureSpec,
}

/// Density and survival of the `from → to` sojourn implied by `model`.
pub fn ii_to_i_density<'a, S: IntensitySource + ?Sized>(
    model: &'a S,
    from: usize,
    to: usize,
    z: &[f64],
    spec: &QuadratureSpec,
) -> Result<ConvertedSojourn<'a, S>> {
    check_z(model, z)?;
    let n = model.space().n_states();
    if from >= n || to >= n {
        return Err(Error::Domain(format!("state index out of range in {from}->{to}")));
    }
    let undefined = || Error::UndefinedConditional {
        from: model.space().label(from).to_string(),
        to: model.space().label(to).to_string(),
    };
    if !model.targets(from).contains(&to) {
        return Err(undefined());
    }
    let (p, closed) = match model.common_shape(from, z)? {
        Some(shape) => {
            let total: f64 = shape.weights.iter().map(|(_, c)| c).sum();
            let c = shape
                .weights
                .iter()
                .find(|(j, _)| *j == to)
                .map(|(_, c)| *c)
                .unwrap_or(0.0);
            let dist = Distribution::weibull(shape.shape, total.powf(-1.0 / shape.shape))?;
            (c / total, Some(dist))
        }
        None => {
            let r = integrate_exit_density(model, from, to, z, 0.0, f64::INFINITY, spec)?;
            (r.value, None)
        }
    };
    if !(p > 0.0) {
        return Err(undefined());
    }
    Ok(ConvertedSojourn {
        model,
        from,
        to,
        z: z.to_vec(),
        p,
        ln_p: p.ln(),
        closed,
        spec: *spec,
    })
}

impl<S: IntensitySource + ?Sized> ConvertedSojourn<'_, S> {
    /// `p_ij` used for the normalization.
    pub fn probability(&self) -> f64 {
        self.p
    }

    /// The closed-form Weibull law when the common-shape path applied.
    pub fn closed_form(&self) -> Option<&Distribution> {
        self.closed.as_ref()
    }

    pub fn log_density(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        if let Some(d) = &self.closed {
            return Ok(d.log_density(t));
        }
        Ok(self.model.log_exit_density(self.from, self.to, &self.z, t)? - self.ln_p)
    }

    pub fn density(&self, t: f64) -> Result<f64> {
        Ok(self.log_density(t)?.exp())
    }

    /// `S_ij(t) = ∫_t^∞ f_ij`.
    pub fn survival(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        if let Some(d) = &self.closed {
            return Ok(d.survival(t));
        }
        if t == 0.0 {
            return Ok(1.0);
        }
        let tail = integrate_exit_density(self.model, self.from, self.to, &self.z, t, f64::INFINITY, &self.spec)?;
        Ok((tail.value / self.p).clamp(0.0, 1.0))
    }

    /// Sojourn hazard `α_ij = f_ij / S_ij`.
    pub fn hazard(&self, t: f64) -> Result<f64> {
        if let Some(d) = &self.closed {
            check_t(t)?;
            return Ok(d.hazard(t));
        }
        let s = self.survival(t)?;
        if s == 0.0 {
            return Err(Error::TailEvaluation {
                state: self.model.space().label(self.from).to_string(),
                t,
            });
        }
        Ok(self.density(t)? / s)
    }
}

/// Generator of the CTMC with jump chain `chain` and holding rates `rates`:
/// `q_ij = λ_i p_ij`, `q_ii = -λ_i`. Absorbing rows are zero.
pub fn ctmc_generator(chain: &EmbeddedChain, rates: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = chain.n_states();
    if rates.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: rates.len(),
            context: "CTMC rates".into(),
        });
    }
    let mut q = vec![vec![0.0; n]; n];
    for i in 0..n {
        if chain.is_absorbing(i) {
            continue;
        }
        let lambda = rates[i];
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!(
                "rate of state {} must be positive, got {lambda}",
                i + 1
            )));
        }
        for j in 0..n {
            q[i][j] = if i == j { -lambda } else { lambda * chain.p(i, j) };
        }
    }
    Ok(q)
}

/// Inverse of [`ctmc_generator`]: returns the jump chain and holding rates.
pub fn ctmc_from_generator(q: &[Vec<f64>]) -> Result<(EmbeddedChain, Vec<f64>)> {
    let n = q.len();
    let mut probs = vec![vec![0.0; n]; n];
    let mut rates = vec![0.0; n];
    for (i, row) in q.iter().enumerate() {
        if row.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: row.len(),
                context: format!("generator row {}", i + 1),
            });
        }
        let off: f64 = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
        if row.iter().enumerate().any(|(j, &v)| j != i && !(v >= 0.0)) {
            return Err(Error::Domain(format!("generator row {} has a negative rate", i + 1)));
        }
        let lambda = -row[i];
        if (lambda - off).abs() > 1e-12 * lambda.abs().max(1.0) {
            return Err(Error::Domain(format!(
                "generator row {} sums to {} (must be 0)",
                i + 1,
                off - lambda
            )));
        }
        if lambda > 0.0 {
            rates[i] = lambda;
            for j in 0..n {
                if j != i {
                    probs[i][j] = row[j] / lambda;
                }
            }
        }
    }
    Ok((EmbeddedChain::new(probs)?, rates))
}

fn check_z<S: IntensitySource + ?Sized>(model: &S, z: &[f64]) -> Result<()> {
    if z.len() != model.n_covariates() {
        return Err(Error::DimensionMismatch {
            expected: model.n_covariates(),
            actual: z.len(),
            context: "covariate vector".into(),
        });
    }
    Ok(())
}

fn check_t(t: f64) -> Result<()> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain(format!("time {t} must be nonnegative")));
    }
    Ok(())
}
