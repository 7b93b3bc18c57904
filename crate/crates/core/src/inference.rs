//! Maximum-likelihood fitting for both parameterizations.
//!
//! Baseline parameters are optimized on the log scale and coefficients as
//! is. Standard errors come from the inverse finite-difference Hessian of the
//! negative log-likelihood at the optimum, mapped to the natural scale by the
//! delta method (`se(θ) = θ · se(ln θ)`).

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::families::{Distribution, FamilyId, ParamVector};
use crate::likelihood::{decouple, subject_loglik_i, transition_loglik, Approach, Dataset, TransitionRecord};
use crate::model::{EmbeddedChain, IntensityModelII, SojournModelI, StateSpace, TransitionKey, TransitionLaw};
use crate::optim::{hessian, minimize, spd_inverse, Convergence, ConvergenceStatus, OptimizerSpec};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
const HESSIAN_STEP: f64 = 1e-4;

/// What to fit for one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSpec {
    pub key: TransitionKey,
    pub family: FamilyId,
    /// Indices into the dataset covariates.
    pub covariates: Vec<usize>,
    /// Optional starting baseline parameters (natural scale).
    pub start: Option<ParamVector>,
}

impl TransitionSpec {
    pub fn new(key: TransitionKey, family: FamilyId, covariates: Vec<usize>) -> Self {
        TransitionSpec {
            key,
            family,
            covariates,
            start: None,
        }
    }

    fn n_free(&self) -> usize {
        self.family.n_params() + self.covariates.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSpec {
    pub transitions: Vec<TransitionSpec>,
}

impl FitSpec {
    pub fn new(transitions: Vec<TransitionSpec>) -> Self {
        FitSpec { transitions }
    }

    /// Same family and covariates for every listed transition.
    pub fn uniform(keys: &[TransitionKey], family: FamilyId, covariates: Vec<usize>) -> Self {
        FitSpec {
            transitions: keys
                .iter()
                .map(|&k| TransitionSpec::new(k, family, covariates.clone()))
                .collect(),
        }
    }

    fn validate(&self, dataset: &Dataset) -> Result<()> {
        let space = dataset.space();
        let mut seen = BTreeMap::new();
        for t in &self.transitions {
            let k = t.key;
            if k.from >= space.n_states() || k.to >= space.n_states() || k.from == k.to {
                return Err(Error::InvalidModel(format!("transition {k} outside the state space")));
            }
            if space.is_absorbing(k.from) {
                return Err(Error::InvalidModel(format!(
                    "transition {} leaves absorbing state",
                    space.key_label(k)
                )));
            }
            if let Some(&c) = t.covariates.iter().find(|&&c| c >= dataset.n_covariates()) {
                return Err(Error::InvalidModel(format!(
                    "transition {} uses covariate index {c} but the data has {}",
                    space.key_label(k),
                    dataset.n_covariates()
                )));
            }
            if let Some(start) = &t.start {
                Distribution::new(t.family, start.clone())?;
            }
            if seen.insert(k, ()).is_some() {
                return Err(Error::InvalidModel(format!(
                    "duplicate transition {}",
                    space.key_label(k)
                )));
            }
        }
        let counts = dataset.transition_counts();
        for (i, row) in counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 && !seen.contains_key(&TransitionKey { from: i, to: j }) {
                    return Err(Error::InvalidModel(format!(
                        "data contain {c} transitions {}->{} that the model does not allow",
                        space.label(i),
                        space.label(j)
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub z: f64,
    pub p_value: f64,
}

/// `z = estimate / se` with a two-sided standard-normal p-value.
pub fn wald_test(estimate: f64, se: Option<f64>) -> Option<WaldTest> {
    let se = se.filter(|s| *s > 0.0 && s.is_finite())?;
    let z = estimate / se;
    Some(WaldTest {
        z,
        p_value: erfc(z.abs() / std::f64::consts::SQRT_2),
    })
}

/// Per-transition block of a fit report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionFit {
    pub from: String,
    pub to: String,
    pub family: FamilyId,
    pub params: Option<Vec<f64>>,
    pub se: Option<Vec<f64>>,
    pub covariates: Vec<String>,
    pub beta: Vec<f64>,
    pub se_beta: Option<Vec<f64>>,
    pub z: Vec<Option<f64>>,
    pub p: Vec<Option<f64>>,
    pub identifiable: bool,
    pub n_events: usize,
    /// Per-transition maximized log-likelihood (Approach II only).
    pub loglik: Option<f64>,
    /// Per-transition optimizer outcome (separate Approach II fits only).
    pub convergence: Option<Convergence>,
}

impl TransitionFit {
    pub fn wald(&self) -> Vec<Option<WaldTest>> {
        self.z
            .iter()
            .zip(&self.p)
            .map(|(z, p)| {
                Some(WaldTest {
                    z: (*z)?,
                    p_value: (*p)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub schema_version: u32,
    pub approach: Approach,
    pub states: Vec<String>,
    pub absorbing: Vec<String>,
    pub covariates: Vec<String>,
    pub n_subjects: usize,
    pub data_fingerprint: String,
    pub transitions: Vec<TransitionFit>,
    pub embedded_chain: Option<Vec<Vec<f64>>>,
    pub embedded_chain_se: Option<Vec<Vec<Option<f64>>>>,
    pub loglik: f64,
    pub k: usize,
    pub aic: f64,
    pub convergence: Convergence,
    pub diagnostics: Vec<String>,
}

/// `2k − 2ℓ`.
pub fn aic(fit: &FitResult) -> f64 {
    aic_value(fit.k, fit.loglik)
}

fn aic_value(k: usize, loglik: f64) -> f64 {
    2.0 * k as f64 - 2.0 * loglik
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.convergence.converged()
    }

    fn space(&self) -> Result<StateSpace> {
        let absorbing = self
            .absorbing
            .iter()
            .map(|a| self.state_index(a))
            .collect::<Result<Vec<_>>>()?;
        StateSpace::new(self.states.clone(), absorbing)
    }

    fn state_index(&self, label: &str) -> Result<usize> {
        self.states
            .iter()
            .position(|s| s == label)
            .ok_or_else(|| Error::InvalidModel(format!("unknown state '{label}' in fit report")))
    }

    fn law(&self, t: &TransitionFit) -> Result<Option<TransitionLaw>> {
        let Some(params) = &t.params else {
            return Ok(None);
        };
        let key = TransitionKey::new(self.state_index(&t.from)?, self.state_index(&t.to)?)?;
        let mask = t
            .covariates
            .iter()
            .map(|c| {
                self.covariates
                    .iter()
                    .position(|n| n == c)
                    .ok_or_else(|| Error::InvalidModel(format!("unknown covariate '{c}' in fit report")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(TransitionLaw::new(
            key,
            Distribution::new(t.family, params.clone())?,
            mask,
            t.beta.clone(),
        )?))
    }

    /// The fitted intensity model. Non-identifiable transitions are left out
    /// and states without remaining exits become absorbing.
    pub fn model_ii(&self) -> Result<IntensityModelII> {
        if self.approach != Approach::II {
            return Err(Error::InvalidModel("fit is not an Approach II fit".into()));
        }
        let laws = self
            .transitions
            .iter()
            .map(|t| self.law(t))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect::<Vec<_>>();
        let absorbing: Vec<usize> = (0..self.states.len())
            .filter(|&i| laws.iter().all(|l| l.key.from != i))
            .collect();
        let space = StateSpace::new(self.states.clone(), absorbing)?;
        IntensityModelII::new(space, laws, self.covariates.len())
    }

    /// The fitted sojourn model.
    pub fn model_i(&self) -> Result<SojournModelI> {
        if self.approach != Approach::I {
            return Err(Error::InvalidModel("fit is not an Approach I fit".into()));
        }
        let chain = self
            .embedded_chain
            .clone()
            .ok_or_else(|| Error::InvalidModel("Approach I fit lacks an embedded chain".into()))?;
        let laws = self
            .transitions
            .iter()
            .map(|t| self.law(t))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        SojournModelI::new(self.space()?, EmbeddedChain::new(chain)?, laws, self.covariates.len())
    }
}

/// Unconstrained layout of one transition: `[ln θ…, β…]`.
fn law_from(ts: &TransitionSpec, x: &[f64]) -> Result<TransitionLaw> {
    let n = ts.family.n_params();
    let params = ts.family.from_unconstrained(&x[..n])?;
    TransitionLaw::new(
        ts.key,
        Distribution::new(ts.family, params)?,
        ts.covariates.clone(),
        x[n..].to_vec(),
    )
}

fn start_vector(ts: &TransitionSpec, events: usize, exposure: f64) -> Result<Vec<f64>> {
    let base = match &ts.start {
        Some(p) => p.clone(),
        None => {
            let rate = if exposure > 0.0 && events > 0 {
                events as f64 / exposure
            } else {
                1.0
            };
            ts.family.exponential_member(rate)
        }
    };
    let mut x = ts.family.to_unconstrained(&base)?;
    x.extend(std::iter::repeat_n(0.0, ts.covariates.len()));
    Ok(x)
}

struct Block {
    natural: Vec<f64>,
    se: Option<Vec<f64>>,
    beta: Vec<f64>,
    se_beta: Option<Vec<f64>>,
}

/// Splits an optimum and its covariance block into natural-scale estimates.
fn block(ts: &TransitionSpec, x: &[f64], cov: Option<&DMatrix<f64>>, offset: usize) -> Result<Block> {
    let n = ts.family.n_params();
    let natural = ts.family.from_unconstrained(&x[..n])?.into_inner();
    let se_of = |k: usize| cov.map(|c| c[(offset + k, offset + k)].sqrt());
    let se = cov.map(|_| (0..n).map(|k| natural[k] * se_of(k).unwrap()).collect());
    let se_beta = cov.map(|_| (n..x.len()).map(|k| se_of(k).unwrap()).collect());
    Ok(Block {
        natural,
        se,
        beta: x[n..].to_vec(),
        se_beta,
    })
}

fn transition_fit(
    space: &StateSpace,
    names: &[String],
    ts: &TransitionSpec,
    b: Option<Block>,
    n_events: usize,
    loglik: Option<f64>,
    convergence: Option<Convergence>,
) -> TransitionFit {
    let covariates = ts.covariates.iter().map(|&c| names[c].clone()).collect();
    match b {
        Some(b) => {
            let tests: Vec<Option<WaldTest>> = b
                .beta
                .iter()
                .enumerate()
                .map(|(k, &est)| wald_test(est, b.se_beta.as_ref().map(|s| s[k])))
                .collect();
            TransitionFit {
                from: space.label(ts.key.from).to_string(),
                to: space.label(ts.key.to).to_string(),
                family: ts.family,
                params: Some(b.natural),
                se: b.se,
                covariates,
                beta: b.beta,
                se_beta: b.se_beta,
                z: tests.iter().map(|t| t.map(|t| t.z)).collect(),
                p: tests.iter().map(|t| t.map(|t| t.p_value)).collect(),
                identifiable: true,
                n_events,
                loglik,
                convergence,
            }
        }
        None => TransitionFit {
            from: space.label(ts.key.from).to_string(),
            to: space.label(ts.key.to).to_string(),
            family: ts.family,
            params: None,
            se: None,
            covariates,
            beta: vec![],
            se_beta: None,
            z: vec![],
            p: vec![],
            identifiable: false,
            n_events,
            loglik,
            convergence,
        },
    }
}

fn base_result(dataset: &Dataset, approach: Approach) -> FitResult {
    let space = dataset.space();
    FitResult {
        schema_version: REPORT_SCHEMA_VERSION,
        approach,
        states: space.labels().to_vec(),
        absorbing: space.absorbing().map(|a| space.label(a).to_string()).collect(),
        covariates: dataset.covariate_names().to_vec(),
        n_subjects: dataset.len(),
        data_fingerprint: dataset.fingerprint(),
        transitions: vec![],
        embedded_chain: None,
        embedded_chain_se: None,
        loglik: 0.0,
        k: 0,
        aic: 0.0,
        convergence: Convergence {
            status: ConvergenceStatus::Converged,
            iterations: 0,
            grad_norm: 0.0,
        },
        diagnostics: vec![],
    }
}

fn covariance(f: &impl Fn(&[f64]) -> f64, x: &[f64]) -> Option<DMatrix<f64>> {
    if x.is_empty() {
        return Some(DMatrix::zeros(0, 0));
    }
    spd_inverse(&hessian(f, x, HESSIAN_STEP))
}

fn neg_transition_loglik(ts: &TransitionSpec, records: &[TransitionRecord], x: &[f64]) -> f64 {
    match law_from(ts, x).and_then(|law| transition_loglik(&law, records)) {
        Ok(ll) => -ll,
        Err(_) => f64::INFINITY,
    }
}

struct TransitionData {
    records: Vec<TransitionRecord>,
    events: usize,
    exposure: f64,
}

fn transition_data(dataset: &Dataset, spec: &FitSpec) -> Vec<TransitionData> {
    spec.transitions
        .par_iter()
        .map(|ts| {
            let records = decouple(dataset, ts.key.from, ts.key.to);
            let events = records.iter().filter(|r| r.is_event()).count();
            let exposure = records.iter().map(|r| r.duration).sum();
            TransitionData {
                records,
                events,
                exposure,
            }
        })
        .collect()
}

/// Approach II fit, one independent optimization per transition.
pub fn fit_ii(dataset: &Dataset, spec: &FitSpec, opts: &OptimizerSpec) -> Result<FitResult> {
    spec.validate(dataset)?;
    let data = transition_data(dataset, spec);
    let space = dataset.space();
    let names = dataset.covariate_names();
    let fits = spec
        .transitions
        .par_iter()
        .zip(data.par_iter())
        .map(|(ts, d)| -> Result<(TransitionFit, Option<String>)> {
            if d.events == 0 {
                let note = format!(
                    "transition {}: no observed events; parameters not identifiable",
                    space.key_label(ts.key)
                );
                let conv = Convergence {
                    status: ConvergenceStatus::Converged,
                    iterations: 0,
                    grad_norm: 0.0,
                };
                return Ok((
                    transition_fit(space, names, ts, None, 0, Some(0.0), Some(conv)),
                    Some(note),
                ));
            }
            let f = |x: &[f64]| neg_transition_loglik(ts, &d.records, x);
            let x0 = start_vector(ts, d.events, d.exposure)?;
            let m = minimize(&f, &x0, opts);
            let cov = covariance(&f, &m.x);
            let note = cov.is_none().then(|| {
                format!(
                    "transition {}: Hessian not positive definite; standard errors omitted",
                    space.key_label(ts.key)
                )
            });
            let b = block(ts, &m.x, cov.as_ref(), 0)?;
            Ok((
                transition_fit(space, names, ts, Some(b), d.events, Some(-m.value), Some(m.convergence)),
                note,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut result = base_result(dataset, Approach::II);
    let mut convs = Vec::new();
    for (ts, (tf, note)) in spec.transitions.iter().zip(fits) {
        if tf.identifiable {
            result.k += ts.n_free();
        }
        result.loglik += tf.loglik.unwrap_or(0.0);
        convs.push(tf.convergence.expect("separate fits record convergence"));
        result.diagnostics.extend(note);
        result.transitions.push(tf);
    }
    result.convergence = Convergence::combine(&convs);
    result.aic = aic(&result);
    Ok(result)
}

/// Approach II fit as a single optimization over all transitions' parameters.
pub fn fit_ii_joint(dataset: &Dataset, spec: &FitSpec, opts: &OptimizerSpec) -> Result<FitResult> {
    spec.validate(dataset)?;
    let data = transition_data(dataset, spec);
    let space = dataset.space();
    let active: Vec<usize> = (0..spec.transitions.len()).filter(|&t| data[t].events > 0).collect();
    let mut offsets = Vec::new();
    let mut x0 = Vec::new();
    for &t in &active {
        offsets.push(x0.len());
        x0.extend(start_vector(&spec.transitions[t], data[t].events, data[t].exposure)?);
    }
    let f = |x: &[f64]| -> f64 {
        let parts: Vec<f64> = active
            .par_iter()
            .zip(offsets.par_iter())
            .map(|(&t, &off)| {
                let ts = &spec.transitions[t];
                neg_transition_loglik(ts, &data[t].records, &x[off..off + ts.n_free()])
            })
            .collect();
        parts.iter().sum()
    };
    let m = minimize(&f, &x0, opts);
    let cov = covariance(&f, &m.x);
    let mut result = base_result(dataset, Approach::II);
    if cov.is_none() {
        result
            .diagnostics
            .push("joint Hessian not positive definite; standard errors omitted".into());
    }
    for (t, ts) in spec.transitions.iter().enumerate() {
        let d = &data[t];
        let tf = match active.iter().position(|&a| a == t) {
            Some(pos) => {
                let off = offsets[pos];
                let x = &m.x[off..off + ts.n_free()];
                let sub = cov
                    .as_ref()
                    .map(|c| c.view((off, off), (ts.n_free(), ts.n_free())).into_owned());
                let b = block(ts, x, sub.as_ref(), 0)?;
                let ll = -neg_transition_loglik(ts, &d.records, x);
                result.k += ts.n_free();
                transition_fit(space, dataset.covariate_names(), ts, Some(b), d.events, Some(ll), None)
            }
            None => {
                result.diagnostics.push(format!(
                    "transition {}: no observed events; parameters not identifiable",
                    space.key_label(ts.key)
                ));
                transition_fit(space, dataset.covariate_names(), ts, None, 0, Some(0.0), None)
            }
        };
        result.transitions.push(tf);
    }
    result.loglik = -m.value;
    result.convergence = m.convergence;
    result.aic = aic(&result);
    Ok(result)
}

/// Approach I fit: joint maximization over sojourn parameters, coefficients
/// and per-row softmax logits of the embedded chain (first target of each
/// row is the reference). Targets never observed get `p = 0`.
pub fn fit_i(dataset: &Dataset, spec: &FitSpec, opts: &OptimizerSpec) -> Result<FitResult> {
    spec.validate(dataset)?;
    let space = dataset.space();
    let n = space.n_states();
    let counts = dataset.transition_counts();

    // conditional sojourn summaries per observed transition
    let mut sojourn_sum = vec![vec![0.0; n]; n];
    for h in dataset.subjects() {
        for k in 0..h.n_transitions() {
            sojourn_sum[h.state_before(k)][h.states[k]] += h.sojourns[k];
        }
    }

    let mut active = Vec::new();
    let mut offsets = Vec::new();
    let mut x0 = Vec::new();
    for (t, ts) in spec.transitions.iter().enumerate() {
        let (i, j) = (ts.key.from, ts.key.to);
        if counts[i][j] > 0 {
            active.push(t);
            offsets.push(x0.len());
            x0.extend(start_vector(ts, counts[i][j], sojourn_sum[i][j])?);
        }
    }
    // rows: (state, targets with events, logit offset)
    let mut rows: Vec<(usize, Vec<usize>, usize)> = Vec::new();
    for i in (0..n).filter(|&i| !space.is_absorbing(i)) {
        let mut targets: Vec<usize> = active
            .iter()
            .map(|&t| spec.transitions[t].key)
            .filter(|k| k.from == i)
            .map(|k| k.to)
            .collect();
        targets.sort_unstable();
        if targets.is_empty() {
            return Err(Error::InvalidModel(format!(
                "state {} is non-absorbing but no transitions out of it are observed",
                space.label(i)
            )));
        }
        let total: usize = targets.iter().map(|&j| counts[i][j]).sum();
        let reference = (counts[i][targets[0]] as f64 / total as f64).ln();
        let off = x0.len();
        for &j in &targets[1..] {
            x0.push((counts[i][j] as f64 / total as f64).ln() - reference);
        }
        rows.push((i, targets, off));
    }

    let build = |x: &[f64]| -> Result<SojournModelI> {
        let mut probs = vec![vec![0.0; n]; n];
        for (i, targets, off) in &rows {
            let logits: Vec<f64> = std::iter::once(0.0)
                .chain(x[*off..*off + targets.len() - 1].iter().copied())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|a| (a - max).exp()).collect();
            let total: f64 = w.iter().sum();
            for (&j, wj) in targets.iter().zip(&w) {
                probs[*i][j] = wj / total;
            }
        }
        let laws = active
            .iter()
            .zip(&offsets)
            .map(|(&t, &off)| {
                let ts = &spec.transitions[t];
                law_from(ts, &x[off..off + ts.n_free()])
            })
            .collect::<Result<Vec<_>>>()?;
        SojournModelI::new(space.clone(), EmbeddedChain::new(probs)?, laws, dataset.n_covariates())
    };
    let f = |x: &[f64]| -> f64 {
        let Ok(model) = build(x) else {
            return f64::INFINITY;
        };
        let parts: Result<Vec<f64>> = dataset
            .subjects()
            .par_iter()
            .map(|h| subject_loglik_i(&model, h))
            .collect();
        match parts {
            Ok(p) => -p.iter().sum::<f64>(),
            Err(_) => f64::INFINITY,
        }
    };

    if !f(&x0).is_finite() {
        return Err(Error::Fit(
            "Approach I likelihood is not finite at the starting values".into(),
        ));
    }
    let m = minimize(&f, &x0, opts);
    let cov = covariance(&f, &m.x);
    let mut result = base_result(dataset, Approach::I);
    if cov.is_none() {
        result
            .diagnostics
            .push("Hessian not positive definite; standard errors omitted".into());
    }
    let model = build(&m.x)?;
    for (t, ts) in spec.transitions.iter().enumerate() {
        let (i, j) = (ts.key.from, ts.key.to);
        let tf = match active.iter().position(|&a| a == t) {
            Some(pos) => {
                let off = offsets[pos];
                let b = block(ts, &m.x[off..off + ts.n_free()], cov.as_ref(), off)?;
                result.k += ts.n_free();
                transition_fit(space, dataset.covariate_names(), ts, Some(b), counts[i][j], None, None)
            }
            None => {
                result.diagnostics.push(format!(
                    "transition {}: no observed events; p fixed at 0, parameters not identifiable",
                    space.key_label(ts.key)
                ));
                transition_fit(space, dataset.covariate_names(), ts, None, 0, None, None)
            }
        };
        result.transitions.push(tf);
    }

    // chain estimates and delta-method SEs of the softmax
    let mut chain_se = vec![vec![None; n]; n];
    for (i, targets, off) in &rows {
        result.k += targets.len() - 1;
        let p: Vec<f64> = targets.iter().map(|&j| model.chain().p(*i, j)).collect();
        let Some(c) = &cov else { continue };
        let free = targets.len() - 1;
        // ∂p_a/∂logit_b for the free logits (targets 1..)
        let jac = DMatrix::from_fn(targets.len(), free, |a, b| {
            let bb = b + 1;
            if a == bb {
                p[a] * (1.0 - p[a])
            } else {
                -p[a] * p[bb]
            }
        });
        let sub = c.view((*off, *off), (free, free)).into_owned();
        let cp = &jac * sub * jac.transpose();
        for (a, &j) in targets.iter().enumerate() {
            chain_se[*i][j] = Some(cp[(a, a)].max(0.0).sqrt());
        }
    }
    result.embedded_chain = Some(model.chain().rows().to_vec());
    result.embedded_chain_se = cov.as_ref().map(|_| chain_se);
    result.loglik = -m.value;
    result.convergence = m.convergence;
    result.aic = aic(&result);
    Ok(result)
}

/// Dispatches to [`fit_i`] or [`fit_ii`].
pub fn fit(approach: Approach, dataset: &Dataset, spec: &FitSpec, opts: &OptimizerSpec) -> Result<FitResult> {
    match approach {
        Approach::I => fit_i(dataset, spec, opts),
        Approach::II => fit_ii(dataset, spec, opts),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub approach: Approach,
    pub loglik: f64,
    pub k: usize,
    pub aic: f64,
    pub converged: bool,
    pub best: bool,
}

/// AIC table sorted ascending; the first converged row is flagged best.
pub fn compare(fits: &[(String, &FitResult)]) -> Result<Vec<ComparisonRow>> {
    if let Some((_, first)) = fits.first() {
        if let Some((name, other)) = fits.iter().find(|(_, f)| f.data_fingerprint != first.data_fingerprint) {
            return Err(Error::Comparison(format!(
                "fit '{name}' was estimated on a different dataset ({} vs {})",
                other.data_fingerprint, first.data_fingerprint
            )));
        }
    }
    let mut rows: Vec<ComparisonRow> = fits
        .iter()
        .map(|(name, f)| ComparisonRow {
            name: name.clone(),
            approach: f.approach,
            loglik: f.loglik,
            k: f.k,
            aic: aic(f),
            converged: f.converged(),
            best: false,
        })
        .collect();
    rows.sort_by(|a, b| a.aic.total_cmp(&b.aic).then_with(|| a.name.cmp(&b.name)));
    if let Some(best) = rows.iter_mut().find(|r| r.converged) {
        best.best = true;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub spec: FitSpec,
    pub fit: FitResult,
    /// `(transition, covariate index)` in drop order.
    pub dropped: Vec<(TransitionKey, usize)>,
    /// False when a refit failed to converge and the last converged state was
    /// returned instead.
    pub complete: bool,
}

/// Per-transition backward elimination: each round drops, from every
/// transition, the coefficient with the largest Wald p-value above
/// `threshold` (absent p-values count as 1), then refits.
pub fn select_covariates(
    approach: Approach,
    dataset: &Dataset,
    spec: &FitSpec,
    threshold: f64,
    opts: &OptimizerSpec,
) -> Result<Selection> {
    let mut current = spec.clone();
    let mut fit_now = fit(approach, dataset, &current, opts)?;
    if !fit_now.converged() {
        return Err(Error::Fit(
            "initial fit for covariate selection did not converge".into(),
        ));
    }
    let mut dropped = Vec::new();
    loop {
        let mut next = current.clone();
        let mut round = Vec::new();
        for (ts, tf) in next.transitions.iter_mut().zip(&fit_now.transitions) {
            if !tf.identifiable || ts.covariates.is_empty() {
                continue;
            }
            let worst =
                tf.p.iter()
                    .map(|p| p.unwrap_or(1.0))
                    .enumerate()
                    .filter(|(_, p)| *p > threshold)
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((k, _)) = worst {
                round.push((ts.key, ts.covariates.remove(k)));
            }
        }
        if round.is_empty() {
            return Ok(Selection {
                spec: current,
                fit: fit_now,
                dropped,
                complete: true,
            });
        }
        let refit = fit(approach, dataset, &next, opts)?;
        if !refit.converged() {
            return Ok(Selection {
                spec: current,
                fit: fit_now,
                dropped,
                complete: false,
            });
        }
        dropped.extend(round);
        current = next;
        fit_now = refit;
    }
}
