mod common;

use proptest::prelude::*;

use prioritized_dtr::methods::{fit_prioritized, FitSettings};
use prioritized_dtr::policy::{select_from_values, DissimilaritySpec};
use prioritized_dtr::qreg::{Engine, FeatureBasis};
use prioritized_dtr::sim::{simulate, Design, GenerativeModel};

use common::{brute_select, Instance, X1};

fn table() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..4, 1usize..25).prop_flat_map(|(p, n)| {
        (
            prop::collection::vec(prop::collection::vec((-20i32..20).prop_map(|v| v as f64 / 10.0), p), n),
            prop::collection::vec(prop_oneof![Just(0.0), Just(f64::INFINITY), 0.0f64..1.5], p),
        )
    })
}

proptest! {
    #[test]
    fn selection_record_matches_enumeration((values, deltas) in table()) {
        let spec = DissimilaritySpec::absolute(deltas.clone()).unwrap();
        let ids: Vec<usize> = (0..values.len()).collect();
        let sel = select_from_values(ids, values.clone(), &spec).unwrap();
        let brute = brute_select(&values, &deltas);
        for (got, want) in sel.classes.iter().zip(&brute.classes) {
            prop_assert_eq!(got.iter().copied().collect::<std::collections::BTreeSet<_>>(), want.clone());
        }
        prop_assert_eq!(sel.depth, brute.depth);
        prop_assert_eq!(sel.admissible.iter().copied().collect::<std::collections::BTreeSet<_>>(), brute.admissible);
        prop_assert_eq!(sel.tau, brute.tau);
        prop_assert_eq!(sel.chosen, brute.chosen);
    }
}

#[test]
fn three_candidate_instance_by_hand() {
    let values = vec![vec![1.0, 0.0], vec![0.98, 1.0], vec![0.2, 2.0]];
    let brute = brute_select(&values, &[0.05, 0.05]);
    assert_eq!(brute.classes[0].iter().copied().collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(brute.classes[1].iter().copied().collect::<Vec<_>>(), vec![2]);
    assert_eq!(brute.depth, 1);
    assert_eq!(brute.tau, 2);
    assert_eq!(brute.chosen, 1);
    let spec = DissimilaritySpec::absolute(vec![0.05, 0.05]).unwrap();
    assert_eq!(select_from_values(vec![0, 1, 2], values, &spec).unwrap().chosen, 1);
}

#[test]
fn enumerated_instances_agree_with_the_library() {
    for seed in 0..30 {
        let inst = Instance::random(3, seed);
        let weights = common::weight_grid(3, 25, seed);
        let deltas = [0.4, 0.2, 0.6];
        let spec = DissimilaritySpec::absolute(deltas.to_vec()).unwrap();
        for x in 0..X1.len() {
            let values = inst.candidate_values(&weights, x);
            let ids: Vec<usize> = (0..values.len()).collect();
            let sel = select_from_values(ids, values.clone(), &spec).unwrap();
            assert_eq!(sel.chosen, brute_select(&values, &deltas).chosen, "seed {seed} x1 {x}");
        }
    }
}

#[test]
fn vacuous_thresholds_reduce_to_first_outcome_argmax() {
    let model = GenerativeModel::new(Design::S2);
    let data = simulate(&model, 300, 12).unwrap();
    let settings = FitSettings {
        basis: FeatureBasis::default(),
        engine: Engine::Linear,
        n_lambda: 60,
        simplex_seed: 3,
        spec: DissimilaritySpec::absolute(vec![f64::INFINITY; 3]).unwrap(),
    };
    let regime = fit_prioritized(&data, &settings).unwrap();
    let policy = regime.policy.as_deref().unwrap();
    for t in &data.trajectories {
        let h = t.history(1);
        let sel = policy.select(&h).unwrap();
        let mut best = 0;
        for (i, v) in sel.values.iter().enumerate() {
            if v[0] > sel.values[best][0] {
                best = i;
            }
        }
        assert_eq!(sel.chosen, sel.candidates[best]);
        assert_eq!(policy.choose(&h).unwrap(), sel.chosen);
    }
}

#[test]
fn single_outcome_selection_is_plain_argmax() {
    let inst = Instance::random(1, 5);
    let weights = vec![vec![1.0]];
    let spec = DissimilaritySpec::absolute(vec![0.3]).unwrap();
    for x in 0..X1.len() {
        let values = inst.candidate_values(&weights, x);
        let sel = select_from_values(vec![0, 1], values.clone(), &spec).unwrap();
        let argmax = if values[1][0] > values[0][0] { 1 } else { 0 };
        assert_eq!(sel.chosen, argmax);
        assert_eq!(sel.tau, 1);
    }
}
