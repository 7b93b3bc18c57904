#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semimarkov::model::{EmbeddedChain, IntensityModelII, SojournModelI, StateSpace, TransitionKey, TransitionLaw};
use semimarkov::simulator::{CovariateDraw, CovariateGenerator, SimConfig};
use semimarkov::{Distribution, FamilyId};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Target sets over `n` states with the last one absorbing. With
/// `reversible`, state 1 always has an edge back to state 0.
fn random_graph(rng: &mut ChaCha8Rng, n: usize, reversible: bool) -> Vec<Vec<usize>> {
    let last = n - 1;
    (0..n)
        .map(|i| {
            if i == last {
                return vec![];
            }
            let mut targets: Vec<usize> = (0..n).filter(|&j| j != i && rng.random_bool(0.6)).collect();
            if reversible && i == 1 && !targets.contains(&0) {
                targets.push(0);
            }
            if targets.is_empty() {
                targets.push(last);
            }
            targets.sort_unstable();
            targets
        })
        .collect()
}

fn sojourn_baseline(rng: &mut ChaCha8Rng) -> Distribution {
    if rng.random_bool(0.5) {
        Distribution::exponential(rng.random_range(0.3..2.0)).unwrap()
    } else {
        Distribution::weibull(rng.random_range(0.6..2.5), rng.random_range(0.5..2.5)).unwrap()
    }
}

/// Randomized Weibull/exponential sojourn model with `l ∈ {3, 4}` states and
/// one covariate; odd `index` values get a reversible edge.
pub fn random_sojourn_model(seed: u64, index: usize) -> SojournModelI {
    let mut rng = rng(seed ^ (index as u64).wrapping_mul(0x9E37_79B9));
    let n = 3 + index % 2;
    let graph = random_graph(&mut rng, n, index % 2 == 1);
    let mut probs = vec![vec![0.0; n]; n];
    let mut laws = Vec::new();
    for (i, targets) in graph.iter().enumerate() {
        let weights: Vec<f64> = targets.iter().map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        for (&j, w) in targets.iter().zip(&weights) {
            probs[i][j] = w / total;
            let key = TransitionKey::new(i, j).unwrap();
            let beta = rng.random_range(-0.5..0.5);
            laws.push(TransitionLaw::new(key, sojourn_baseline(&mut rng), vec![0], vec![beta]).unwrap());
        }
        // exact row sums
        if let Some(&j) = targets.last() {
            let rest: f64 = targets.iter().filter(|&&k| k != j).map(|&k| probs[i][k]).sum();
            probs[i][j] = 1.0 - rest;
        }
    }
    let space = StateSpace::numbered(n, [n - 1]).unwrap();
    SojournModelI::new(space, EmbeddedChain::new(probs).unwrap(), laws, 1).unwrap()
}

fn intensity_baseline(rng: &mut ChaCha8Rng) -> Distribution {
    match rng.random_range(0..5) {
        0 => Distribution::exponential(rng.random_range(0.2..1.5)).unwrap(),
        1 => Distribution::weibull(rng.random_range(0.7..2.5), rng.random_range(0.5..3.0)).unwrap(),
        2 => Distribution::new(
            FamilyId::Gamma,
            vec![rng.random_range(0.6..3.0), rng.random_range(0.5..2.0)],
        )
        .unwrap(),
        3 => Distribution::new(
            FamilyId::GeneralizedGamma,
            vec![
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..2.0),
            ],
        )
        .unwrap(),
        _ => Distribution::new(
            FamilyId::ExponentiatedWeibull,
            vec![
                rng.random_range(0.7..2.0),
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.0),
            ],
        )
        .unwrap(),
    }
}

/// Randomized intensity model over every family, with one covariate.
pub fn random_intensity_model(seed: u64, index: usize) -> IntensityModelII {
    let mut rng = rng(seed ^ (index as u64).wrapping_mul(0xC2B2_AE35));
    let n = 3 + index % 2;
    let graph = random_graph(&mut rng, n, index % 2 == 1);
    let mut laws = Vec::new();
    for (i, targets) in graph.iter().enumerate() {
        for &j in targets {
            let key = TransitionKey::new(i, j).unwrap();
            let beta = rng.random_range(-0.5..0.5);
            laws.push(TransitionLaw::new(key, intensity_baseline(&mut rng), vec![0], vec![beta]).unwrap());
        }
    }
    IntensityModelII::new(StateSpace::numbered(n, [n - 1]).unwrap(), laws, 1).unwrap()
}

/// Illness-death Weibull intensity model: 1→2, 1→3, 2→3; covariate on 1→2.
pub fn illness_death() -> IntensityModelII {
    let space = StateSpace::new(vec!["healthy".into(), "ill".into(), "dead".into()], [2]).unwrap();
    let laws = vec![
        TransitionLaw::new(
            TransitionKey::new(0, 1).unwrap(),
            Distribution::weibull(1.5, 2.0).unwrap(),
            vec![0],
            vec![0.5],
        )
        .unwrap(),
        TransitionLaw::baseline_only(
            TransitionKey::new(0, 2).unwrap(),
            Distribution::weibull(1.2, 4.0).unwrap(),
        ),
        TransitionLaw::baseline_only(
            TransitionKey::new(1, 2).unwrap(),
            Distribution::weibull(0.8, 1.5).unwrap(),
        ),
    ];
    IntensityModelII::new(space, laws, 1).unwrap()
}

/// Simulation config with one Bernoulli(0.5) covariate named `x`.
pub fn sim_config(horizon: f64, n: usize, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::new(horizon, n, seed);
    cfg.covariate_names = vec!["x".into()];
    cfg.covariates = CovariateGenerator::Independent(vec![CovariateDraw::Bernoulli { p: 0.5 }]);
    cfg
}
