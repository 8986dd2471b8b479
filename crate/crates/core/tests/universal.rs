use prioritized_dtr::data::{split_even, standardize_outcomes, Dataset};
use prioritized_dtr::inference::universal_lambda_set;
use prioritized_dtr::irl::{estimate_lambda, normalize, sphere_grid};
use prioritized_dtr::methods::{fit_prioritized, FitSettings};
use prioritized_dtr::policy::DissimilaritySpec;
use prioritized_dtr::qreg::{Engine, FeatureBasis};
use prioritized_dtr::regime::Regime;
use prioritized_dtr::sim::{oracle_conditional_value, simulate, Design, GenerativeModel};

const REPS: u64 = 100;
const POPULATION_DRAWS: usize = 1_000_000;
const ORACLE_DRAWS: usize = 100_000;

fn settings() -> FitSettings {
    FitSettings {
        basis: FeatureBasis::default(),
        engine: Engine::Linear,
        n_lambda: 60,
        simplex_seed: 5,
        spec: DissimilaritySpec::absolute(vec![0.2; 3]).unwrap(),
    }
}

/// Fit and evaluation halves of one S1 sample, with the regime fitted on the first.
fn fitted_halves(seed: u64, n: usize) -> (Dataset, Dataset, Regime) {
    let model = GenerativeModel::new(Design::S1);
    let split = split_even(&simulate(&model, n, seed).unwrap(), seed + 1).unwrap();
    let regime = fit_prioritized(&split.first, &settings()).unwrap();
    (split.first, split.second, regime)
}

#[test]
fn the_estimate_itself_is_always_a_member() {
    let (fit, eval, regime) = fitted_halves(3, 400);
    let basis = FeatureBasis::default();
    let lambda_hat = estimate_lambda(&standardize_outcomes(&fit), &regime, &basis, &Engine::Linear).unwrap().lambda;
    let mut grid = sphere_grid(200, 3, 0);
    grid.push(lambda_hat.clone());
    let eval = standardize_outcomes(&eval);
    for alpha in [0.01, 0.05, 0.5, 0.999] {
        let set = universal_lambda_set(&eval, &regime, &basis, &Engine::Linear, &lambda_hat, &grid, alpha).unwrap();
        assert!((set.ratios[200] - 1.0).abs() < 1e-12);
        assert!(set.members[200], "alpha {alpha}");
        assert!(set.shift >= 0.0);
    }
}

#[test]
fn alpha_near_one_keeps_only_directions_no_better_than_the_estimate() {
    let (fit, eval, regime) = fitted_halves(8, 400);
    let basis = FeatureBasis::default();
    let lambda_hat = estimate_lambda(&standardize_outcomes(&fit), &regime, &basis, &Engine::Linear).unwrap().lambda;
    let grid = sphere_grid(300, 3, 0);
    let eval = standardize_outcomes(&eval);
    let set = universal_lambda_set(&eval, &regime, &basis, &Engine::Linear, &lambda_hat, &grid, 1.0 - 1e-12).unwrap();
    for (member, ratio) in set.members.iter().zip(&set.ratios) {
        assert_eq!(*member, *ratio <= 1.0 + 1e-9, "ratio {ratio}");
    }
    let loose = universal_lambda_set(&eval, &regime, &basis, &Engine::Linear, &lambda_hat, &grid, 0.05).unwrap();
    assert!(loose.fraction >= set.fraction);
}

#[test]
fn oracle_optimal_direction_is_covered_on_s1() {
    let model = GenerativeModel::new(Design::S1);
    let basis = FeatureBasis::default();
    // Outcome moments under uniform randomisation, the scale the standardized halves estimate.
    let population = oracle_conditional_value(&model, None, POPULATION_DRAWS, 77).unwrap();
    let sd: Vec<f64> = population.se.iter().map(|s| s * (POPULATION_DRAWS as f64).sqrt()).collect();
    let grid = sphere_grid(500, 3, 0);
    let mut covered = 0;
    for rep in 0..REPS {
        let (fit, eval, regime) = fitted_halves(1000 + 7 * rep, 1000);
        let lambda_hat = estimate_lambda(&standardize_outcomes(&fit), &regime, &basis, &Engine::Linear).unwrap().lambda;
        let truth = oracle_conditional_value(&model, Some(&regime), ORACLE_DRAWS, 5000 + rep).unwrap();
        let scaled: Vec<f64> = (0..3).map(|l| (truth.mean[l] - population.mean[l]) / sd[l]).collect();
        let optimal = normalize(&scaled).unwrap();
        let mut with_optimal = grid.clone();
        with_optimal.push(optimal);
        let set = universal_lambda_set(
            &standardize_outcomes(&eval),
            &regime,
            &basis,
            &Engine::Linear,
            &lambda_hat,
            &with_optimal,
            0.05,
        )
        .unwrap();
        covered += usize::from(set.members[grid.len()]);
    }
    eprintln!("oracle direction covered in {covered} of {REPS} replications");
    assert!(covered >= 90, "oracle direction covered in {covered} of {REPS} replications");
}
