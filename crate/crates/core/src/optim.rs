//! Quasi-Newton minimization with finite-difference derivatives.
//!
//! BFGS on the inverse Hessian, central-difference gradients and a
//! backtracking Armijo line search. Non-finite objective values are treated
//! as `+inf`, so the search simply backs away from them.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Relative central-difference step.
    pub fd_step: f64,
    pub multistart: usize,
    /// Seed for multistart perturbations.
    pub seed: u64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            grad_tol: 1e-6,
            max_iters: 500,
            fd_step: 1e-5,
            multistart: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvergenceStatus {
    Converged,
    MaxIters,
    LineSearchFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub status: ConvergenceStatus,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl Convergence {
    pub fn converged(&self) -> bool {
        self.status == ConvergenceStatus::Converged
    }

    /// Status of a composite fit: the first failure wins, iterations add up,
    /// the gradient norm is the largest seen.
    pub fn combine(parts: &[Convergence]) -> Convergence {
        let status = parts
            .iter()
            .map(|c| c.status)
            .find(|s| *s != ConvergenceStatus::Converged)
            .unwrap_or(ConvergenceStatus::Converged);
        Convergence {
            status,
            iterations: parts.iter().map(|c| c.iterations).sum(),
            grad_norm: parts.iter().map(|c| c.grad_norm).fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub convergence: Convergence,
}

fn eval<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> f64 {
    let v = f(x);
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Central-difference gradient with step `rel_step · max(1, |x_i|)`.
pub fn gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = eval(f, &probe);
            probe[i] = x[i] - h;
            let down = eval(f, &probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Symmetric finite-difference Hessian.
pub fn hessian<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], rel_step: f64) -> DMatrix<f64> {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| rel_step * v.abs().max(1.0)).collect();
    let f0 = eval(f, x);
    let mut m = DMatrix::zeros(n, n);
    let mut p = x.to_vec();
    for i in 0..n {
        p[i] = x[i] + h[i];
        let up = eval(f, &p);
        p[i] = x[i] - h[i];
        let down = eval(f, &p);
        p[i] = x[i];
        m[(i, i)] = (up - 2.0 * f0 + down) / (h[i] * h[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                p[i] = x[i] + si * h[i];
                p[j] = x[j] + sj * h[j];
                let v = eval(f, &p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let v =
                (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0)) / (4.0 * h[i] * h[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Inverse of a symmetric positive-definite matrix, or `None`.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = m.clone().cholesky()?;
    let inv = chol.inverse();
    if (0..inv.nrows()).all(|i| inv[(i, i)] > 0.0) {
        Some(inv)
    } else {
        None
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const MAX_STEP: f64 = 5.0;
/// Relative decrease below which an accepted step counts as a stall.
const STALL_DECREASE: f64 = 1e-14;
const STALL_ITERATIONS: usize = 3;

/// BFGS from a single start.
pub fn bfgs<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], spec: &OptimizerSpec) -> Minimum {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = eval(f, &x);
    if n == 0 {
        return Minimum {
            x,
            value: fx,
            convergence: Convergence {
                status: ConvergenceStatus::Converged,
                iterations: 0,
                grad_norm: 0.0,
            },
        };
    }
    let mut g = gradient(f, &x, spec.fd_step);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut stalls = 0;
    // finite-difference gradients bottom out near eps·|f|/h; past that point a
    // gradient this small is as converged as the arithmetic allows
    let noise_tol = |f: f64| spec.grad_tol * f.abs().max(1.0);
    let finish = |x: Vec<f64>, value: f64, status, iterations, g: &[f64]| Minimum {
        x,
        value,
        convergence: Convergence {
            status,
            iterations,
            grad_norm: norm(g),
        },
    };
    if !fx.is_finite() {
        return finish(x, fx, ConvergenceStatus::LineSearchFailure, 0, &g);
    }
    for iter in 0..spec.max_iters {
        log::trace!("bfgs iteration {iter}: f = {fx}, |g| = {}", norm(&g));
        if norm(&g) <= spec.grad_tol {
            return finish(x, fx, ConvergenceStatus::Converged, iter, &g);
        }
        let gv = DVector::from_column_slice(&g);
        let mut d = -(&hinv * &gv);
        let mut slope = d.dot(&gv);
        if !(slope < 0.0) || d.iter().any(|v| !v.is_finite()) {
            hinv = DMatrix::identity(n, n);
            fresh = true;
            d = -gv.clone();
            slope = d.dot(&gv);
        }
        let largest = d.amax();
        if largest > MAX_STEP {
            d *= MAX_STEP / largest;
            slope = d.dot(&gv);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(d.iter()).map(|(xi, di)| xi + alpha * di).collect();
            let ft = eval(f, &trial);
            if ft.is_finite() && ft <= fx + ARMIJO_C * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if fresh {
                let status = if norm(&g) <= noise_tol(fx) {
                    ConvergenceStatus::Converged
                } else {
                    ConvergenceStatus::LineSearchFailure
                };
                return finish(x, fx, status, iter, &g);
            }
            hinv = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        let g_new = gradient(f, &x_new, spec.fd_step);
        let s = DVector::from_iterator(n, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, g_new.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                // scale the initial approximation to the observed curvature
                hinv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        if fx - f_new <= STALL_DECREASE * fx.abs().max(1.0) {
            stalls += 1;
        } else {
            stalls = 0;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        if stalls >= STALL_ITERATIONS && norm(&g) <= noise_tol(fx) {
            return finish(x, fx, ConvergenceStatus::Converged, iter + 1, &g);
        }
    }
    let status = if norm(&g) <= spec.grad_tol {
        ConvergenceStatus::Converged
    } else {
        ConvergenceStatus::MaxIters
    };
    finish(x, fx, status, spec.max_iters, &g)
}

/// BFGS from `x0` plus `multistart - 1` perturbed starts; the best converged
/// run wins, falling back to the best run overall.
pub fn minimize<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], spec: &OptimizerSpec) -> Minimum {
    let mut best = bfgs(f, x0, spec);
    if spec.multistart > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let noise = Normal::new(0.0, 0.5).expect("valid normal");
        for _ in 1..spec.multistart {
            let start: Vec<f64> = x0.iter().map(|v| v + noise.sample(&mut rng)).collect();
            let run = bfgs(f, &start, spec);
            let better = match (run.convergence.converged(), best.convergence.converged()) {
                (true, false) => true,
                (false, true) => false,
                _ => run.value < best.value,
            };
            if better {
                best = run;
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = minimize(&f, &[-1.2, 1.0], &OptimizerSpec::default());
        assert!(m.convergence.converged(), "{:?}", m.convergence);
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5);
        assert!(norm(&gradient(&f, &m.x, 1e-5)) <= 1e-6);
    }

    #[test]
    fn quadratic_hessian_is_exact() {
        let f = |x: &[f64]| 2.0 * x[0] * x[0] + x[0] * x[1] + 3.0 * x[1] * x[1];
        let h = hessian(&f, &[0.3, -0.2], 1e-4);
        assert!((h[(0, 0)] - 4.0).abs() < 1e-5);
        assert!((h[(0, 1)] - 1.0).abs() < 1e-5);
        assert!((h[(1, 1)] - 6.0).abs() < 1e-5);
        let inv = spd_inverse(&h).unwrap();
        assert!((inv[(0, 0)] - 6.0 / 23.0).abs() < 1e-6);
    }

    #[test]
    fn indefinite_hessian_has_no_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(spd_inverse(&m).is_none());
    }

    #[test]
    fn infinite_regions_are_avoided() {
        let f = |x: &[f64]| if x[0] > 3.0 { f64::NAN } else { (x[0] - 2.0).powi(2) };
        let m = minimize(&f, &[-10.0], &OptimizerSpec::default());
        assert!(m.convergence.converged());
        assert!((m.x[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn multistart_is_deterministic() {
        let f = |x: &[f64]| (x[0] * x[0] - 1.0).powi(2) + 0.1 * x[0];
        let spec = OptimizerSpec {
            multistart: 5,
            seed: 9,
            ..OptimizerSpec::default()
        };
        let a = minimize(&f, &[0.8], &spec);
        let b = minimize(&f, &[0.8], &spec);
        assert_eq!(a, b);
        assert!(a.value <= bfgs(&f, &[0.8], &spec).value);
    }
}
