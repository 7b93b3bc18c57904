//! Nelson-Aalen estimation of cumulative transition intensities from
//! decoupled records, and tabulation against a parametric curve.
//!
//! Without covariates the Breslow baseline estimator reduces to
//! Nelson-Aalen, which is what is computed here.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::likelihood::TransitionRecord;

/// Right-continuous step function starting at `(0, 0)`. The first entry is
/// always the origin; later entries are the distinct event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub jump_times: Vec<f64>,
    pub cum_values: Vec<f64>,
    pub variance: Vec<f64>,
    /// Number of records the estimate was built from.
    pub n_records: usize,
}

impl StepFunction {
    fn origin(n_records: usize) -> Self {
        StepFunction {
            jump_times: vec![0.0],
            cum_values: vec![0.0],
            variance: vec![0.0],
            n_records,
        }
    }

    /// Built from no records at all.
    pub fn is_empty(&self) -> bool {
        self.n_records == 0
    }

    /// Value at `t`: the last step at or before `t`.
    pub fn value(&self, t: f64) -> f64 {
        let k = self.jump_times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.cum_values[k - 1]
        }
    }

    pub fn variance_at(&self, t: f64) -> f64 {
        let k = self.jump_times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.variance[k - 1]
        }
    }
}

/// Increments `d(t)/Y(t)` at each distinct event time, with `Y(t)` the
/// number of records whose duration is at least `t`; variance increments
/// `d/Y²`.
pub fn nelson_aalen(records: &[TransitionRecord]) -> StepFunction {
    let mut out = StepFunction::origin(records.len());
    let mut sorted: Vec<(f64, bool)> = records.iter().map(|r| (r.duration, r.is_event())).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let (mut cum, mut var) = (0.0, 0.0);
    let mut k = 0;
    while k < n {
        let t = sorted[k].0;
        let at_risk = n - k;
        let mut events = 0usize;
        let mut m = k;
        while m < n && sorted[m].0 == t {
            events += sorted[m].1 as usize;
            m += 1;
        }
        if events > 0 {
            let d = events as f64;
            let y = at_risk as f64;
            cum += d / y;
            var += d / (y * y);
            if t == 0.0 {
                // an event exactly at the origin replaces the origin point
                out.cum_values[0] = cum;
                out.variance[0] = var;
            } else {
                out.jump_times.push(t);
                out.cum_values.push(cum);
                out.variance.push(var);
            }
        }
        k = m;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub t: f64,
    /// Absent when the step function was built from no records.
    pub nonparametric: Option<f64>,
    pub parametric: f64,
    pub difference: Option<f64>,
}

/// Tabulates the step function and a parametric cumulative intensity on `grid`.
pub fn compare_curves<F>(step: &StepFunction, model_curve: F, grid: &[f64]) -> Result<Vec<CurveRow>>
where
    F: Fn(f64) -> Result<f64>,
{
    grid.iter()
        .map(|&t| {
            let parametric = model_curve(t)?;
            let nonparametric = (!step.is_empty()).then(|| step.value(t));
            Ok(CurveRow {
                t,
                nonparametric,
                parametric,
                difference: nonparametric.map(|np| np - parametric),
            })
        })
        .collect()
}
