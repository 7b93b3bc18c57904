//! Parametric families of nonnegative-time distributions.
//!
//! Every family is exposed through its hazard, cumulative hazard, survival,
//! density and quantile, with log-space variants used by the likelihood code.
//! Parameters live on their natural (strictly positive) scale; optimizers work
//! on the log scale via [`FamilyId::to_unconstrained`] and
//! [`FamilyId::from_unconstrained`].
//!
//! | family       | parameters                          |
//! |--------------|-------------------------------------|
//! | `exponential`| rate `r`                            |
//! | `weibull`    | shape `η`, scale `μ`                |
//! | `gamma`      | shape `k`, rate `λ`                 |
//! | `gengamma`   | scale `b = e^m`, `σ`, `q` (`q > 0`) |
//! | `expweibull` | shape `η`, scale `μ`, power `θ`     |
//!
//! The generalized gamma follows the Prentice form: with `w = (ln t - m)/σ`
//! and `γ = q^{-2}`, the variable `u = γ e^{q w}` is `Gamma(γ, 1)`. Setting
//! `q = 1` gives a Weibull with shape `1/σ` and scale `b`; setting `q = σ`
//! gives a gamma with shape `σ^{-2}` and rate `1/(σ² b)`. The exponentiated
//! Weibull has distribution function `(1 - e^{-(t/μ)^η})^θ`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::special::{ln_1m_exp, ln_incomplete_gamma, solve_increasing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FamilyId {
    #[serde(rename = "exponential")]
    Exponential,
    #[serde(rename = "weibull")]
    Weibull,
    #[serde(rename = "gamma")]
    Gamma,
    #[serde(rename = "gengamma")]
    GeneralizedGamma,
    #[serde(rename = "expweibull")]
    ExponentiatedWeibull,
}

impl FamilyId {
    pub const ALL: [FamilyId; 5] = [
        FamilyId::Exponential,
        FamilyId::Weibull,
        FamilyId::Gamma,
        FamilyId::GeneralizedGamma,
        FamilyId::ExponentiatedWeibull,
    ];

    pub fn n_params(self) -> usize {
        match self {
            FamilyId::Exponential => 1,
            FamilyId::Weibull | FamilyId::Gamma => 2,
            FamilyId::GeneralizedGamma | FamilyId::ExponentiatedWeibull => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FamilyId::Exponential => "exponential",
            FamilyId::Weibull => "weibull",
            FamilyId::Gamma => "gamma",
            FamilyId::GeneralizedGamma => "gengamma",
            FamilyId::ExponentiatedWeibull => "expweibull",
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            FamilyId::Exponential => &["rate"],
            FamilyId::Weibull => &["shape", "scale"],
            FamilyId::Gamma => &["shape", "rate"],
            FamilyId::GeneralizedGamma => &["scale", "sigma", "q"],
            FamilyId::ExponentiatedWeibull => &["shape", "scale", "power"],
        }
    }

    /// Natural parameters to the unconstrained (log) scale.
    pub fn to_unconstrained(self, params: &ParamVector) -> Result<Vec<f64>> {
        self.validate(params.as_slice())?;
        Ok(params.iter().map(|p| p.ln()).collect())
    }

    /// Unconstrained reals back to natural parameters.
    pub fn from_unconstrained(self, reals: &[f64]) -> Result<ParamVector> {
        if reals.len() != self.n_params() {
            return Err(self.domain_error(format!("expected {} parameters, got {}", self.n_params(), reals.len())));
        }
        if let Some(bad) = reals.iter().find(|r| !r.is_finite()) {
            return Err(self.domain_error(format!("non-finite unconstrained value {bad}")));
        }
        let values: Vec<f64> = reals.iter().map(|r| r.exp()).collect();
        self.validate(&values)?;
        Ok(ParamVector(values))
    }

    /// Parameters of the member of this family that is an exponential
    /// distribution with the given rate.
    pub fn exponential_member(self, rate: f64) -> ParamVector {
        let v = match self {
            FamilyId::Exponential => vec![rate],
            FamilyId::Weibull => vec![1.0, 1.0 / rate],
            FamilyId::Gamma => vec![1.0, rate],
            FamilyId::GeneralizedGamma => vec![1.0 / rate, 1.0, 1.0],
            FamilyId::ExponentiatedWeibull => vec![1.0, 1.0 / rate, 1.0],
        };
        ParamVector(v)
    }

    fn validate(self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(self.domain_error(format!("expected {} parameters, got {}", self.n_params(), values.len())));
        }
        for (name, v) in self.param_names().iter().zip(values) {
            if !(v.is_finite() && *v > 0.0) {
                return Err(self.domain_error(format!("{name} = {v} must be finite and positive")));
            }
        }
        Ok(())
    }

    fn domain_error(self, reason: String) -> Error {
        Error::ParameterDomain {
            family: self.name().to_string(),
            reason,
        }
    }
}

impl fmt::Display for FamilyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FamilyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FamilyId::ALL
            .into_iter()
            .find(|f| f.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Domain(format!("unknown family '{s}'")))
    }
}

/// Natural-scale parameter values for one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// A validated family + parameter pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    family: FamilyId,
    params: ParamVector,
}

impl Distribution {
    pub fn new(family: FamilyId, params: impl Into<ParamVector>) -> Result<Self> {
        let params = params.into();
        family.validate(params.as_slice())?;
        Ok(Distribution { family, params })
    }

    pub fn exponential(rate: f64) -> Result<Self> {
        Distribution::new(FamilyId::Exponential, vec![rate])
    }

    pub fn weibull(shape: f64, scale: f64) -> Result<Self> {
        Distribution::new(FamilyId::Weibull, vec![shape, scale])
    }

    pub fn family(&self) -> FamilyId {
        self.family
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    fn p(&self, i: usize) -> f64 {
        self.params.0[i]
    }

    /// `(shape, scale)` when the law is a Weibull (exponentials included).
    pub fn as_weibull(&self) -> Option<(f64, f64)> {
        match self.family {
            FamilyId::Exponential => Some((1.0, 1.0 / self.p(0))),
            FamilyId::Weibull => Some((self.p(0), self.p(1))),
            _ => None,
        }
    }

    /// `-ln S(t)`; zero at `t = 0`, `+inf` at `t = inf`.
    pub fn cumulative_hazard(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t.is_infinite() {
            return f64::INFINITY;
        }
        match self.family {
            FamilyId::Exponential => self.p(0) * t,
            FamilyId::Weibull => (t / self.p(1)).powf(self.p(0)),
            FamilyId::Gamma => -ln_incomplete_gamma(self.p(0), self.p(1) * t).1,
            FamilyId::GeneralizedGamma => {
                let (gamma, u) = self.gengamma_u(t);
                -ln_incomplete_gamma(gamma, u).1
            }
            FamilyId::ExponentiatedWeibull => -self.expweibull_log_survival(t),
        }
    }

    pub fn log_survival(&self, t: f64) -> f64 {
        -self.cumulative_hazard(t)
    }

    pub fn survival(&self, t: f64) -> f64 {
        (-self.cumulative_hazard(t)).exp()
    }

    pub fn log_density(&self, t: f64) -> f64 {
        if t.is_infinite() {
            return f64::NEG_INFINITY;
        }
        if t <= 0.0 {
            return self.log_hazard_at_zero();
        }
        match self.family {
            FamilyId::Exponential => self.p(0).ln() - self.p(0) * t,
            FamilyId::Weibull => self.log_hazard(t) - self.cumulative_hazard(t),
            FamilyId::Gamma => {
                let (k, rate) = (self.p(0), self.p(1));
                k * rate.ln() + (k - 1.0) * t.ln() - rate * t - ln_gamma(k)
            }
            FamilyId::GeneralizedGamma => {
                let (sigma, q) = (self.p(1), self.p(2));
                let (gamma, u) = self.gengamma_u(t);
                q.ln() - sigma.ln() - t.ln() + gamma * u.ln() - u - ln_gamma(gamma)
            }
            FamilyId::ExponentiatedWeibull => {
                let (shape, scale, power) = (self.p(0), self.p(1), self.p(2));
                let x = (t / scale).powf(shape);
                let ln_g = ln_1m_exp(-x);
                power.ln() + (power - 1.0) * ln_g - x + (shape / scale).ln() + (shape - 1.0) * (t / scale).ln()
            }
        }
    }

    pub fn density(&self, t: f64) -> f64 {
        self.log_density(t).exp()
    }

    /// `ln h(t)`; `+inf` where the hazard diverges (e.g. Weibull η < 1 at 0).
    pub fn log_hazard(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.log_hazard_at_zero();
        }
        match self.family {
            FamilyId::Exponential => self.p(0).ln(),
            FamilyId::Weibull => {
                let (shape, scale) = (self.p(0), self.p(1));
                (shape / scale).ln() + (shape - 1.0) * (t / scale).ln()
            }
            _ => {
                let ln_s = self.log_survival(t);
                if ln_s == f64::NEG_INFINITY {
                    return self.log_hazard_far_tail(t);
                }
                self.log_density(t) - ln_s
            }
        }
    }

    pub fn hazard(&self, t: f64) -> f64 {
        self.log_hazard(t).exp()
    }

    /// Smallest `t` with cumulative hazard equal to `h`.
    pub fn time_at_cumulative_hazard(&self, h: f64) -> Result<f64> {
        if h.is_nan() || h < 0.0 {
            return Err(Error::Domain(format!(
                "cumulative hazard target {h} must be nonnegative"
            )));
        }
        if h == 0.0 {
            return Ok(0.0);
        }
        if h.is_infinite() {
            return Ok(f64::INFINITY);
        }
        match self.family {
            FamilyId::Exponential => Ok(h / self.p(0)),
            FamilyId::Weibull => Ok(self.p(1) * h.powf(1.0 / self.p(0))),
            FamilyId::ExponentiatedWeibull => {
                let (shape, scale, power) = (self.p(0), self.p(1), self.p(2));
                // F = 1 - e^{-h}; G = F^{1/θ}; x = -ln(1 - G)
                let ln_f = ln_1m_exp(-h);
                let x = -(-(ln_f / power).exp_m1()).ln();
                Ok(scale * x.powf(1.0 / shape))
            }
            FamilyId::Gamma | FamilyId::GeneralizedGamma => {
                let guess = match self.family {
                    FamilyId::Gamma => self.p(0) / self.p(1),
                    _ => self.p(0),
                };
                solve_increasing(|t| self.cumulative_hazard(t), |t| self.hazard(t), h, guess, 0.0)
            }
        }
    }

    /// Quantile of the distribution function; `p` must lie in `[0, 1)`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("probability {p} outside [0, 1)")));
        }
        self.time_at_cumulative_hazard(-(-p).ln_1p())
    }

    fn gengamma_u(&self, t: f64) -> (f64, f64) {
        let (scale, sigma, q) = (self.p(0), self.p(1), self.p(2));
        let gamma = 1.0 / (q * q);
        let u = gamma * ((q / sigma) * (t / scale).ln()).exp();
        (gamma, u)
    }

    fn expweibull_log_survival(&self, t: f64) -> f64 {
        let (shape, scale, power) = (self.p(0), self.p(1), self.p(2));
        let x = (t / scale).powf(shape);
        // m = ln(-ln G) with G = 1 - e^{-x}
        let m = if x < 30.0 {
            (-ln_1m_exp(-x)).ln()
        } else {
            -x + (0.5 * (-x).exp()).ln_1p()
        };
        let ln_neg_y = power.ln() + m;
        if ln_neg_y < -30.0 {
            let y = -ln_neg_y.exp();
            ln_neg_y + (0.5 * y).ln_1p()
        } else {
            let y = -ln_neg_y.exp();
            (-y.exp_m1()).ln()
        }
    }

    /// Log hazard when `S(t)` underflows even in log space.
    fn log_hazard_far_tail(&self, t: f64) -> f64 {
        let eps = t * 1e-7;
        let a = self.cumulative_hazard(t - eps);
        let b = self.cumulative_hazard(t + eps);
        ((b - a) / (2.0 * eps)).ln()
    }

    /// Limit of `ln h(t)` as `t -> 0+`, from the leading power of the density.
    fn log_hazard_at_zero(&self) -> f64 {
        let (exponent, log_const) = match self.family {
            FamilyId::Exponential => (0.0, self.p(0).ln()),
            FamilyId::Weibull => {
                let (shape, scale) = (self.p(0), self.p(1));
                (shape - 1.0, (shape / scale).ln())
            }
            FamilyId::Gamma => {
                let (k, rate) = (self.p(0), self.p(1));
                (k - 1.0, k * rate.ln() - ln_gamma(k))
            }
            FamilyId::GeneralizedGamma => {
                let (scale, sigma, q) = (self.p(0), self.p(1), self.p(2));
                let gamma = 1.0 / (q * q);
                let power = gamma * q / sigma;
                (
                    power - 1.0,
                    q.ln() - sigma.ln() - ln_gamma(gamma) + gamma * gamma.ln() - power * scale.ln(),
                )
            }
            FamilyId::ExponentiatedWeibull => {
                let (shape, scale, power) = (self.p(0), self.p(1), self.p(2));
                (shape * power - 1.0, (power * shape / scale).ln())
            }
        };
        if exponent < 0.0 {
            f64::INFINITY
        } else if exponent > 0.0 {
            f64::NEG_INFINITY
        } else {
            log_const
        }
    }
}

fn checked(family: FamilyId, params: &ParamVector, t: f64) -> Result<Distribution> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain(format!("time {t} must be nonnegative")));
    }
    Distribution::new(family, params.clone())
}

pub fn hazard(family: FamilyId, params: &ParamVector, t: f64) -> Result<f64> {
    Ok(checked(family, params, t)?.hazard(t))
}

pub fn cumulative_hazard(family: FamilyId, params: &ParamVector, t: f64) -> Result<f64> {
    Ok(checked(family, params, t)?.cumulative_hazard(t))
}

pub fn survival(family: FamilyId, params: &ParamVector, t: f64) -> Result<f64> {
    Ok(checked(family, params, t)?.survival(t))
}

pub fn density(family: FamilyId, params: &ParamVector, t: f64) -> Result<f64> {
    Ok(checked(family, params, t)?.density(t))
}

pub fn quantile(family: FamilyId, params: &ParamVector, p: f64) -> Result<f64> {
    Distribution::new(family, params.clone())?.quantile(p)
}
