//! Closed-form cumulative hazards against adaptive quadrature of the hazard.

mod common;

use proptest::prelude::*;
use semimarkov::model::{holding_survival_ii, total_intensity, IntensitySource};
use semimarkov::quadrature::{integrate, QuadratureSpec};
use semimarkov::{Distribution, FamilyId};

const GRID: [f64; 6] = [0.05, 0.3, 1.0, 2.0, 4.5, 8.0];

fn check_family(d: &Distribution) {
    let spec = QuadratureSpec::tight();
    for &t in &GRID {
        let q = integrate(|u| d.hazard(u), 0.0, t, &spec).unwrap();
        let h = d.cumulative_hazard(t);
        assert!(
            (q.value - h).abs() <= 1e-8,
            "{:?}: H({t}) = {h}, quadrature {} (error {})",
            d,
            q.value,
            q.error
        );
        assert_eq!(d.survival(t), (-h).exp());
    }
}

#[test]
fn reference_members() {
    for d in [
        Distribution::exponential(0.7).unwrap(),
        Distribution::weibull(0.6, 1.3).unwrap(),
        Distribution::weibull(2.5, 0.8).unwrap(),
        Distribution::new(FamilyId::Gamma, vec![0.7, 1.5]).unwrap(),
        Distribution::new(FamilyId::Gamma, vec![3.0, 0.9]).unwrap(),
        Distribution::new(FamilyId::GeneralizedGamma, vec![1.2, 0.6, 1.4]).unwrap(),
        Distribution::new(FamilyId::GeneralizedGamma, vec![0.8, 1.3, 0.6]).unwrap(),
        Distribution::new(FamilyId::ExponentiatedWeibull, vec![1.4, 1.1, 0.7]).unwrap(),
        Distribution::new(FamilyId::ExponentiatedWeibull, vec![0.8, 2.0, 2.5]).unwrap(),
    ] {
        check_family(&d);
    }
}

#[test]
fn holding_survival_matches_integrated_total_intensity() {
    let spec = QuadratureSpec::tight();
    for index in 0..6 {
        let model = common::random_intensity_model(11, index);
        let z = [0.4];
        for i in 0..model.space().n_states() {
            if model.space().is_absorbing(i) {
                continue;
            }
            for &t in &GRID[..5] {
                let q = integrate(|u| total_intensity(&model, i, &z, u).unwrap(), 0.0, t, &spec).unwrap();
                let s = holding_survival_ii(&model, i, &z, t).unwrap();
                assert!((s - (-q.value).exp()).abs() <= 1e-8, "model {index}, state {i}, t {t}");
                assert!((model.cumulative_total_intensity(i, &z, t).unwrap() - q.value).abs() <= 1e-8);
            }
        }
    }
}

fn family_params() -> impl Strategy<Value = Distribution> {
    prop_oneof![
        (0.1f64..3.0).prop_map(|r| Distribution::exponential(r).unwrap()),
        (0.5f64..3.0, 0.3f64..3.0).prop_map(|(a, b)| Distribution::weibull(a, b).unwrap()),
        (0.5f64..4.0, 0.3f64..3.0).prop_map(|(a, b)| Distribution::new(FamilyId::Gamma, vec![a, b]).unwrap()),
        (0.5f64..2.0, 0.5f64..1.5, 0.5f64..2.0).prop_map(|(b, s, q)| Distribution::new(
            FamilyId::GeneralizedGamma,
            vec![b, s, q]
        )
        .unwrap()),
        (0.6f64..2.5, 0.5f64..2.5, 0.4f64..3.0).prop_map(|(a, b, c)| Distribution::new(
            FamilyId::ExponentiatedWeibull,
            vec![a, b, c]
        )
        .unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_members_match_quadrature(d in family_params()) {
        check_family(&d);
    }
}
