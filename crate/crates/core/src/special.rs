//! Numeric helpers shared across modules: log-space incomplete gamma,
//! log-sum-exp and a safeguarded root finder for increasing functions.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const EPS: f64 = f64::EPSILON;
const TINY: f64 = 1e-300;
const MAX_SERIES: usize = 10_000;

/// `ln(Σ exp(x_i))`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Returns `(ln P(a, x), ln Q(a, x))` for the regularized incomplete gamma
/// functions. Both stay finite far into the tails where `Q` itself underflows.
pub fn ln_incomplete_gamma(a: f64, x: f64) -> (f64, f64) {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        return (f64::NEG_INFINITY, 0.0);
    }
    if x.is_infinite() {
        return (0.0, f64::NEG_INFINITY);
    }
    let log_prefix = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        // series for P
        let mut ap = a;
        let mut term = 1.0 / a;
        let mut sum = term;
        for _ in 0..MAX_SERIES {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        let ln_p = log_prefix + sum.ln();
        let ln_q = ln_1m_exp(ln_p);
        (ln_p, ln_q)
    } else {
        // modified Lentz continued fraction for Q
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_SERIES {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        let ln_q = log_prefix + h.ln();
        let ln_p = ln_1m_exp(ln_q);
        (ln_p, ln_q)
    }
}

/// `ln(1 - exp(x))` for `x <= 0`, accurate on both ends.
pub fn ln_1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Solves `f(t) = target` for a continuous nondecreasing `f` on `[0, inf)` with
/// `f(0) <= target`. `deriv` is used for Newton steps; bisection keeps the
/// iterate inside the bracket. Terminates when the bracket width falls below
/// `tol` (absolute, time units) or a few ulps of the iterate.
pub fn solve_increasing<F, D>(f: F, deriv: D, target: f64, initial: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    if !target.is_finite() || target < 0.0 {
        return Err(Error::RootFinding(format!(
            "target {target} is not a finite nonnegative value"
        )));
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = if initial.is_finite() && initial > 0.0 {
        initial
    } else {
        1.0
    };
    let mut expansions = 0;
    loop {
        let v = f(hi);
        if v.is_nan() {
            return Err(Error::RootFinding(format!("function is NaN at t = {hi}")));
        }
        if v >= target {
            break;
        }
        lo = hi;
        hi *= 2.0;
        expansions += 1;
        if expansions > 2000 || !hi.is_finite() {
            return Err(Error::RootFinding(format!(
                "could not bracket target {target}; f({lo}) = {v}"
            )));
        }
    }
    let tol_at = |x: f64| tol.max(4.0 * EPS * x.abs()).max(TINY);
    let mut x = 0.5 * (lo + hi);
    for _ in 0..500 {
        let g = f(x) - target;
        if g == 0.0 {
            return Ok(x);
        }
        if g < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = deriv(x);
        let step = g / d;
        let newton = x - step;
        if d.is_finite() && d > 0.0 && newton > lo && newton < hi {
            if step.abs() <= tol_at(x) {
                return Ok(newton);
            }
            x = newton;
        } else {
            x = 0.5 * (lo + hi);
        }
        if hi - lo <= tol_at(hi) {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::RootFinding(format!(
        "no convergence for target {target}: bracket [{lo}, {hi}]"
    )))
}
