//! Cross-module invariants on randomized models and simulated data.

mod common;

use proptest::prelude::*;
use semimarkov::converter::{i_to_ii, ii_to_i_probs};
use semimarkov::data_io::{parse_dataset, write_dataset_to, ZeroPolicy};
use semimarkov::inference::{aic, fit_i, fit_ii, FitSpec};
use semimarkov::likelihood::{
    decouple, decoupled_loglik_ii, subject_loglik_i, subject_loglik_ii, total_loglik_ii, transition_loglik,
    SubjectHistory,
};
use semimarkov::model::{
    adjusted_hazard, EmbeddedChain, IntensitySource, SojournModelI, StateSpace, TransitionKey, TransitionLaw,
};
use semimarkov::optim::{minimize, OptimizerSpec};
use semimarkov::quadrature::QuadratureSpec;
use semimarkov::simulator::{simulate_i, simulate_ii, SimConfig};
use semimarkov::{Distribution, FamilyId};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decoupling_identity(index in 0usize..40, seed in any::<u64>()) {
        let model = common::random_intensity_model(5, index);
        let ds = simulate_ii(&model, &common::sim_config(4.0, 60, seed)).unwrap();
        let subject_wise = total_loglik_ii(&model, &ds).unwrap();
        let decoupled = decoupled_loglik_ii(&model, &ds).unwrap();
        prop_assert!((subject_wise - decoupled).abs() <= 1e-10, "{subject_wise} vs {decoupled}");
    }

    #[test]
    fn parameterizations_agree_subject_by_subject(index in 0usize..40, seed in any::<u64>()) {
        let model = common::random_sojourn_model(9, index);
        let converted = i_to_ii(&model);
        let ds = simulate_i(&model, &common::sim_config(5.0, 30, seed)).unwrap();
        for h in ds.subjects() {
            let a = subject_loglik_i(&model, h).unwrap();
            let b = subject_loglik_ii(&converted, h).unwrap();
            prop_assert!((a - b).abs() <= 1e-8, "subject {}: {a} vs {b}", h.id);
        }
    }

    #[test]
    fn shrinking_a_censored_tail_never_lowers_the_likelihood(
        index in 0usize..40,
        seed in any::<u64>(),
        shrink in 0.0f64..1.0,
    ) {
        let model = common::random_intensity_model(21, index);
        let ds = simulate_ii(&model, &common::sim_config(3.0, 20, seed)).unwrap();
        for h in ds.subjects().iter().filter(|h| h.censored_tail.is_some()) {
            let u = h.censored_tail.unwrap();
            let shorter = SubjectHistory { censored_tail: Some(u * shrink), ..h.clone() };
            let full = subject_loglik_ii(&model, h).unwrap();
            let cut = subject_loglik_ii(&model, &shorter).unwrap();
            prop_assert!(cut >= full, "subject {}: {cut} < {full}", h.id);
        }
    }

    #[test]
    fn converted_intensity_satisfies_the_key_relation(index in 0usize..40, t in 0.01f64..4.0) {
        let model = common::random_sojourn_model(3, index);
        let converted = i_to_ii(&model);
        let z = [0.7];
        for law in model.laws() {
            let (i, j) = (law.key.from, law.key.to);
            let lhs = converted.log_intensity(i, j, &z, t).unwrap() - converted.cumulative_total_intensity(i, &z, t).unwrap();
            let rhs = model.chain().p(i, j).ln() + law.log_density(&z, t).unwrap();
            // equal logs within 1e-10 means equal values within 1e-10 relative
            prop_assert!((lhs - rhs).abs() <= 1e-10, "{i}->{j} at {t}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn covariate_scaling_leaves_hazards_unchanged(
        beta in -2.0f64..2.0,
        z in -3.0f64..3.0,
        c in prop_oneof![Just(2.0), Just(0.5), Just(4.0), Just(-1.0)],
        t in 0.01f64..5.0,
    ) {
        let key = TransitionKey::new(0, 1).unwrap();
        let base = Distribution::weibull(1.3, 2.0).unwrap();
        let original = TransitionLaw::new(key, base.clone(), vec![0], vec![beta]).unwrap();
        let scaled = TransitionLaw::new(key, base, vec![0], vec![beta / c]).unwrap();
        let a = adjusted_hazard(&original, &[z], t).unwrap();
        let b = adjusted_hazard(&scaled, &[z * c], t).unwrap();
        // powers of two scale exactly; the product only moves in the last ulp otherwise
        prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * a.abs(), "{a} vs {b}");
    }

    #[test]
    fn censoring_is_consistent_with_the_horizon(index in 0usize..40, seed in any::<u64>(), horizon in 0.0f64..6.0) {
        let model = common::random_intensity_model(2, index);
        let ds = simulate_ii(&model, &common::sim_config(horizon, 25, seed)).unwrap();
        for h in ds.subjects() {
            let elapsed = h.sojourns.iter().fold(0.0, |acc, s| acc + s);
            match h.censored_tail {
                Some(u) => prop_assert_eq!(elapsed + u, horizon),
                None => {
                    prop_assert!(ds.space().is_absorbing(h.final_state()));
                    prop_assert!(elapsed <= horizon);
                }
            }
        }
    }

    #[test]
    fn simulated_datasets_round_trip_through_csv(index in 0usize..40, seed in any::<u64>()) {
        let model = common::random_intensity_model(8, index);
        let ds = simulate_ii(&model, &common::sim_config(4.0, 15, seed)).unwrap();
        let mut first = Vec::new();
        write_dataset_to(&ds, &mut first).unwrap();
        let back = parse_dataset(first.as_slice(), "memory", ds.space(), Some(ds.covariate_names()), ZeroPolicy::Reject).unwrap();
        prop_assert_eq!(&back, &ds);
        let mut second = Vec::new();
        write_dataset_to(&back, &mut second).unwrap();
        prop_assert_eq!(first, second);
    }
}

/// Softplus, a positive bijection different from `exp`.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[test]
fn estimates_do_not_depend_on_the_positive_parameterization() {
    let model = common::illness_death();
    let ds = simulate_ii(&model, &common::sim_config(5.0, 800, 17)).unwrap();
    let key = TransitionKey::new(0, 1).unwrap();
    let records = decouple(&ds, 0, 1);
    let spec = OptimizerSpec::default();
    let law_at = |shape: f64, scale: f64, beta: f64| {
        TransitionLaw::new(key, Distribution::weibull(shape, scale).unwrap(), vec![0], vec![beta]).unwrap()
    };
    let nll = |law: Option<TransitionLaw>| match law {
        Some(l) => transition_loglik(&l, &records).map(|v| -v).unwrap_or(f64::INFINITY),
        None => f64::INFINITY,
    };
    let by_log = minimize(
        &|x: &[f64]| nll(Some(law_at(x[0].exp(), x[1].exp(), x[2]))),
        &[0.0, 0.0, 0.0],
        &spec,
    );
    let by_softplus = minimize(
        &|x: &[f64]| nll(Some(law_at(softplus(x[0]), softplus(x[1]), x[2]))),
        &[softplus_inv(1.0), softplus_inv(1.0), 0.0],
        &spec,
    );
    assert!(by_log.convergence.converged() && by_softplus.convergence.converged());
    let a = [by_log.x[0].exp(), by_log.x[1].exp(), by_log.x[2]];
    let b = [softplus(by_softplus.x[0]), softplus(by_softplus.x[1]), by_softplus.x[2]];
    for k in 0..3 {
        assert!((a[k] - b[k]).abs() < 1e-5, "parameter {k}: {} vs {}", a[k], b[k]);
    }
}

#[test]
fn fit_reports_satisfy_the_aic_identity() {
    let model = common::illness_death();
    let ds = simulate_ii(&model, &common::sim_config(5.0, 300, 4)).unwrap();
    let keys: Vec<TransitionKey> = model.laws().map(|l| l.key).collect();
    for family in [FamilyId::Exponential, FamilyId::Weibull] {
        let spec = FitSpec::uniform(&keys, family, vec![0]);
        for fit in [
            fit_ii(&ds, &spec, &OptimizerSpec::default()).unwrap(),
            fit_i(&ds, &spec, &OptimizerSpec::default()).unwrap(),
        ] {
            assert_eq!(fit.aic, 2.0 * fit.k as f64 - 2.0 * fit.loglik);
            assert_eq!(aic(&fit), fit.aic);
        }
    }
}

#[test]
fn uncensored_approach_i_fit_recovers_empirical_proportions() {
    let key = |i, j| TransitionKey::new(i, j).unwrap();
    let model = SojournModelI::new(
        StateSpace::numbered(3, [2]).unwrap(),
        EmbeddedChain::new(vec![vec![0.0, 0.65, 0.35], vec![0.0, 0.0, 1.0], vec![0.0; 3]]).unwrap(),
        vec![
            TransitionLaw::baseline_only(key(0, 1), Distribution::weibull(1.4, 1.5).unwrap()),
            TransitionLaw::baseline_only(key(0, 2), Distribution::exponential(0.5).unwrap()),
            TransitionLaw::baseline_only(key(1, 2), Distribution::weibull(0.9, 2.0).unwrap()),
        ],
        0,
    )
    .unwrap();
    // a horizon this long leaves nobody censored
    let ds = simulate_i(&model, &SimConfig::new(1e6, 400, 8)).unwrap();
    assert!(ds.subjects().iter().all(|h| h.censored_tail.is_none()));
    let keys: Vec<TransitionKey> = model.laws().map(|l| l.key).collect();
    let spec = FitSpec::uniform(&keys, FamilyId::Weibull, vec![]);
    let fit = fit_i(&ds, &spec, &OptimizerSpec::default()).unwrap();
    assert!(fit.converged());
    let counts = ds.transition_counts();
    let chain = fit.embedded_chain.unwrap();
    for (i, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (j, &c) in row.iter().enumerate() {
            if total > 0 {
                let empirical = c as f64 / total as f64;
                assert!(
                    (chain[i][j] - empirical).abs() < 1e-6,
                    "p[{i}][{j}] {} vs {empirical}",
                    chain[i][j]
                );
            }
        }
    }
}

#[test]
fn converted_chain_rows_are_stochastic() {
    let spec = QuadratureSpec::default();
    for index in 0..8 {
        let model = common::random_intensity_model(31, index);
        let conv = ii_to_i_probs(&model, &[0.2], &spec).unwrap();
        for (i, row) in conv.chain.rows().iter().enumerate() {
            assert_eq!(row[i], 0.0);
            let sum: f64 = row.iter().sum();
            if model.space().is_absorbing(i) {
                assert_eq!(sum, 0.0);
            } else {
                assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            }
        }
    }
}
