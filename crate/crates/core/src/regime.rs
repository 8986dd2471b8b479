//! Treatment regimes and the finite candidate class.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{History, Trajectory};
use crate::error::{Error, Result};
use crate::policy::PrioritizedPolicy;
use crate::qreg::{QModelStack, StageModel};
use crate::rng;

/// A point of the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        let sum: f64 = lambda.iter().sum();
        if lambda.is_empty()
            || lambda.iter().any(|v| !(0.0..=1.0).contains(v))
            || (sum - 1.0).abs() > 1e-10
        {
            return Err(Error::invalid(format!("{lambda:?} is not a simplex weight vector")));
        }
        Ok(Self(lambda))
    }

    pub fn vertex(p_y: usize, l: usize) -> Self {
        let mut v = vec![0.0; p_y];
        v[l] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// Uniform draws from the simplex (sorted-uniform spacings) followed by the
/// vertices; exact duplicates are dropped so the class stays distinct.
pub fn sample_simplex(n_samples: usize, p_y: usize, seed: u64) -> Result<Vec<WeightVector>> {
    if n_samples == 0 || p_y == 0 {
        return Err(Error::invalid("sample_simplex needs n_samples >= 1 and p_y >= 1"));
    }
    let mut rng = rng::stream(seed, &[rng::label::SIMPLEX]);
    let mut out: Vec<WeightVector> = Vec::with_capacity(n_samples + p_y);
    let mut push = |w: Vec<f64>| {
        if !out.iter().any(|o| o.0 == w) {
            out.push(WeightVector(w));
        }
    };
    for _ in 0..n_samples {
        let mut cuts: Vec<f64> = (0..p_y - 1).map(|_| rng.random::<f64>()).collect();
        cuts.sort_by(f64::total_cmp);
        let mut w = Vec::with_capacity(p_y);
        let mut prev = 0.0;
        for c in cuts {
            w.push(c - prev);
            prev = c;
        }
        w.push(1.0 - prev);
        push(w);
    }
    for l in 0..p_y {
        push(WeightVector::vertex(p_y, l).0);
    }
    Ok(out)
}

/// Candidates are pairs (first-stage action, weight index), enumerated
/// action-major: `c = a * n_weights + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateClass {
    pub stage2_weights: Vec<WeightVector>,
    pub stage1_actions: usize,
}

impl CandidateClass {
    pub fn new(stage2_weights: Vec<WeightVector>, stage1_actions: usize) -> Result<Self> {
        if stage2_weights.is_empty() || stage1_actions == 0 {
            return Err(Error::invalid("empty candidate class"));
        }
        Ok(Self {
            stage2_weights,
            stage1_actions,
        })
    }

    pub fn len(&self) -> usize {
        self.stage2_weights.len() * self.stage1_actions
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, action: usize, weight: usize) -> usize {
        action * self.stage2_weights.len() + weight
    }

    pub fn decode(&self, candidate: usize) -> (usize, usize) {
        let n = self.stage2_weights.len();
        (candidate / n, candidate % n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageRule {
    Fixed { action: usize },
    WeightIndexed { weights: Vec<f64>, model: Arc<StageModel> },
    Tabulated { table: BTreeMap<String, usize> },
    /// Delegates to the regime's prioritized policy.
    Prioritized,
}

/// Per-trajectory memory: the weight index picked at the first stage.
#[derive(Debug, Clone, Default)]
pub struct RegimeState {
    pub weight_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub label: String,
    pub stages: Vec<StageRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Arc<PrioritizedPolicy>>,
}

fn argmax_weighted(model: &StageModel, h: &History<'_>, weights: &[f64]) -> Result<usize> {
    model.greedy(h, weights)
}

impl Regime {
    pub fn fixed(label: impl Into<String>, actions: &[usize]) -> Self {
        Self {
            label: label.into(),
            stages: actions.iter().map(|&action| StageRule::Fixed { action }).collect(),
            policy: None,
        }
    }

    /// Greedy in `weights . Q^k` at every stage of `stack`.
    pub fn greedy(stack: QModelStack, weights: &[f64], label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            stages: stack
                .stages
                .into_iter()
                .map(|m| StageRule::WeightIndexed {
                    weights: weights.to_vec(),
                    model: Arc::new(m),
                })
                .collect(),
            policy: None,
        }
    }

    pub fn stages(&self) -> usize {
        self.stages.len()
    }

    pub fn act(&self, h: &History<'_>, state: &mut RegimeState) -> Result<usize> {
        let k = h.stage();
        let rule = self
            .stages
            .get(k - 1)
            .ok_or_else(|| Error::invalid(format!("regime `{}` has no rule for stage {k}", self.label)))?;
        let mut feasible = h.feasible_actions();
        let first = feasible
            .next()
            .ok_or_else(|| Error::validation(format!("empty feasible set at stage {k}")))?;
        let forced = feasible.next().is_none();
        let action = match rule {
            StageRule::Prioritized => {
                let policy = self.policy.as_ref().ok_or_else(|| {
                    Error::invalid(format!("regime `{}` lacks its prioritized policy", self.label))
                })?;
                if k == 1 {
                    let (a, w) = policy.class.decode(policy.choose(h)?);
                    state.weight_index = Some(w);
                    a
                } else {
                    let w = state.weight_index.ok_or_else(|| {
                        Error::invalid("prioritized rule queried past stage 1 before its first-stage selection")
                    })?;
                    let weights = policy.class.stage2_weights[w].as_slice();
                    argmax_weighted(policy.stacks.stage_model(w, k), h, weights)?
                }
            }
            _ if forced => first,
            StageRule::Fixed { action } => *action,
            StageRule::WeightIndexed { weights, model } => argmax_weighted(model, h, weights)?,
            StageRule::Tabulated { table } => *table.get(&h.key()).ok_or_else(|| {
                Error::validation(format!(
                    "regime `{}`: no tabulated action for this stage-{k} history",
                    self.label
                ))
            })?,
        };
        if forced {
            return Ok(first);
        }
        if !h.is_feasible(action) {
            return Err(Error::validation(format!(
                "regime `{}` chose infeasible action {action} at stage {k}",
                self.label
            )));
        }
        Ok(action)
    }

    /// The regime's action at each stage given the observed histories.
    pub fn actions_along(&self, t: &Trajectory) -> Result<Vec<usize>> {
        let mut state = RegimeState::default();
        (1..=t.stages()).map(|k| self.act(&t.history(k), &mut state)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::toy_dataset;
    use crate::qreg::{fit_stage_k, Engine, FeatureBasis};
    use proptest::prelude::*;

    #[test]
    fn simplex_sample_sizes() {
        let w = sample_simplex(1000, 3, 1).unwrap();
        assert_eq!(w.len(), 1003);
        for v in &w {
            assert!((v.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        assert_eq!(w[1000..], [WeightVector::vertex(3, 0), WeightVector::vertex(3, 1), WeightVector::vertex(3, 2)]);
        let single = sample_simplex(1, 1, 9).unwrap();
        assert_eq!(single, vec![WeightVector::new(vec![1.0]).unwrap()]);
        assert!(sample_simplex(0, 3, 1).is_err());
        assert_eq!(sample_simplex(50, 3, 4).unwrap(), sample_simplex(50, 3, 4).unwrap());
    }

    #[test]
    fn simplex_draws_have_uniform_means() {
        let w = sample_simplex(100_000, 3, 2).unwrap();
        for l in 0..3 {
            let m = w.iter().map(|v| v.as_slice()[l]).sum::<f64>() / w.len() as f64;
            assert!((m - 1.0 / 3.0).abs() < 0.01);
        }
    }

    fn forced_mask() -> Vec<Vec<f64>> {
        vec![vec![0.0, 0.0], vec![1.0]]
    }

    #[test]
    fn singleton_feasible_set_forces_the_action() {
        let covs = forced_mask();
        let mask = [false, true];
        let h = History::new(&covs[..1], &[], &mask);
        let r = Regime::fixed("fixed", &[0, 0]);
        assert_eq!(r.act(&h, &mut RegimeState::default()).unwrap(), 1);
    }

    #[test]
    fn weight_indexed_argmax_and_ties() {
        let data = toy_dataset(40);
        let model = Arc::new(fit_stage_k(&data, &FeatureBasis::default(), &Engine::Linear).unwrap());
        let t = &data.trajectories[5];
        let h = t.history(2);
        let q0 = model.predict(&h, 0);
        let q1 = model.predict(&h, 1);
        let expect = if q1[0] > q0[0] { 1 } else { 0 };
        let r = Regime {
            label: "w".into(),
            stages: vec![
                StageRule::Fixed { action: 0 },
                StageRule::WeightIndexed {
                    weights: vec![1.0, 0.0, 0.0],
                    model: model.clone(),
                },
            ],
            policy: None,
        };
        assert_eq!(r.actions_along(t).unwrap(), vec![0, expect]);
        // Zero weights make every action tie.
        let tie = Regime {
            stages: vec![
                StageRule::Fixed { action: 1 },
                StageRule::WeightIndexed {
                    weights: vec![0.0, 0.0, 0.0],
                    model,
                },
            ],
            ..r
        };
        assert_eq!(tie.actions_along(t).unwrap(), vec![1, 0]);
    }

    #[test]
    fn unknown_tabulated_history_is_an_error() {
        let data = toy_dataset(4);
        let t = &data.trajectories[0];
        let mut table = BTreeMap::new();
        table.insert(t.history(1).key(), 1);
        let r = Regime {
            label: "tab".into(),
            stages: vec![StageRule::Tabulated { table }, StageRule::Fixed { action: 0 }],
            policy: None,
        };
        assert_eq!(r.actions_along(t).unwrap(), vec![1, 0]);
        assert!(r.actions_along(&data.trajectories[1]).is_err());
    }

    proptest! {
        #[test]
        fn weight_rules_are_scale_invariant_and_feasible(c in 0.01f64..100.0, i in 0usize..40, w0 in 0.0f64..1.0) {
            let mut data = toy_dataset(40);
            data.trajectories[i].feasible_masks[1] = vec![false, true];
            data.trajectories[i].actions[1] = 1;
            data.trajectories[i].propensities[1] = 1.0;
            for (j, t) in data.trajectories.iter_mut().enumerate() {
                let a = t.actions[1] as f64;
                t.outcomes[0] += a * (j as f64).sin() * t.stage_covariates[1][0];
                t.outcomes[1] += a * (0.3 * j as f64).cos();
            }
            let model = Arc::new(fit_stage_k(&data, &FeatureBasis::default(), &Engine::Linear).unwrap());
            let w = vec![w0, 1.0 - w0, 0.0];
            let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
            let make = |weights: Vec<f64>| Regime {
                label: "w".into(),
                stages: vec![StageRule::Fixed { action: 1 }, StageRule::WeightIndexed { weights, model: model.clone() }],
                policy: None,
            };
            let (a, b) = (make(w), make(scaled));
            for t in &data.trajectories {
                let x = a.actions_along(t).unwrap();
                prop_assert_eq!(&x, &b.actions_along(t).unwrap());
                prop_assert!(t.history(2).is_feasible(x[1]));
            }
        }
    }
}
