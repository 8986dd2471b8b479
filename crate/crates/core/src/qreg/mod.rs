//! Stage-wise regression of (vector) outcomes and backward induction.

mod basis;
mod linear;
mod trees;

pub use basis::{FeatureBasis, StageFeatureMap};
pub use linear::{LeastSquares, MAX_CONDITION, RIDGE, RIDGE_CONDITION};
pub use trees::{fit_ensemble, TreeConfig, TreeEnsemble};

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, History};
use crate::error::{Error, Result};
use crate::regime::{Regime, WeightVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Engine {
    #[default]
    Linear,
    Trees(TreeConfig),
}

impl Engine {
    pub fn is_linear(&self) -> bool {
        matches!(self, Engine::Linear)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regressor {
    /// features x targets
    Linear { coefficients: DMatrix<f64> },
    Trees { ensembles: Vec<TreeEnsemble> },
}

/// Fitted Q-functions of one stage, one column per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageModel {
    pub stage: usize,
    pub features: StageFeatureMap,
    pub regressor: Regressor,
}

impl StageModel {
    pub fn targets(&self) -> usize {
        match &self.regressor {
            Regressor::Linear { coefficients } => coefficients.ncols(),
            Regressor::Trees { ensembles } => ensembles.len(),
        }
    }

    pub fn predict_features(&self, phi: &[f64]) -> Vec<f64> {
        match &self.regressor {
            Regressor::Linear { coefficients } => (0..coefficients.ncols())
                .map(|t| coefficients.column(t).iter().zip(phi).map(|(b, x)| b * x).sum())
                .collect(),
            Regressor::Trees { ensembles } => ensembles.iter().map(|e| e.predict(phi)).collect(),
        }
    }

    pub fn predict(&self, h: &History<'_>, action: usize) -> Vec<f64> {
        self.predict_features(&self.features.features(h, action))
    }

    /// Feasible action maximising `weights . Q(h, a)`; lowest code on ties.
    pub fn greedy(&self, h: &History<'_>, weights: &[f64]) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for a in h.feasible_actions() {
            let q = self.predict(h, a);
            let score: f64 = weights.iter().zip(&q).map(|(w, v)| w * v).sum();
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((a, score));
            }
        }
        best.map(|(a, _)| a)
            .ok_or_else(|| Error::validation(format!("no feasible action at stage {}", h.stage())))
    }
}

/// The design of one stage built once, then fit against any number of
/// target matrices.
pub struct StageFitter {
    stage: usize,
    features: StageFeatureMap,
    engine: Engine,
    solver: Option<LeastSquares>,
    design: DMatrix<f64>,
}

impl StageFitter {
    pub fn new(data: &Dataset, basis: &FeatureBasis, engine: &Engine, stage: usize) -> Result<Self> {
        let rows: Vec<(History<'_>, usize)> = data
            .trajectories
            .iter()
            .map(|t| (t.history(stage), t.actions[stage - 1]))
            .collect();
        let features = StageFeatureMap::build(basis, &data.layout, stage, rows.iter().copied());
        let d = features.dim();
        let mut design = DMatrix::zeros(rows.len(), d);
        let mut buf = vec![0.0; d];
        for (i, (h, a)) in rows.iter().enumerate() {
            features.write(h, *a, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                design[(i, j)] = *v;
            }
        }
        let solver = match engine {
            Engine::Linear => Some(
                LeastSquares::new(design.clone())
                    .map_err(|e| Error::numerical(format!("stage {stage}: {e}")))?,
            ),
            Engine::Trees(_) => None,
        };
        Ok(Self {
            stage,
            features,
            engine: engine.clone(),
            solver,
            design,
        })
    }

    pub fn fit(&self, targets: &DMatrix<f64>) -> Result<StageModel> {
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("stage {}: non-finite regression target", self.stage)));
        }
        let regressor = match (&self.engine, &self.solver) {
            (Engine::Linear, Some(solver)) => Regressor::Linear {
                coefficients: solver.solve(targets),
            },
            (Engine::Trees(cfg), _) => Regressor::Trees {
                ensembles: (0..targets.ncols())
                    .map(|t| {
                        let y: Vec<f64> = targets.column(t).iter().copied().collect();
                        fit_ensemble(&self.design, &y, cfg, &[self.stage as u64, t as u64])
                    })
                    .collect(),
            },
            (Engine::Linear, None) => unreachable!("linear fitter always owns a solver"),
        };
        Ok(StageModel {
            stage: self.stage,
            features: self.features.clone(),
            regressor,
        })
    }
}

/// Q-models for stages 1..=K (index k-1), with a description of the rule
/// used downstream when forming pseudo-outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QModelStack {
    pub stages: Vec<StageModel>,
    pub downstream: String,
}

impl QModelStack {
    pub fn stage(&self, k: usize) -> &StageModel {
        &self.stages[k - 1]
    }

    pub fn targets(&self) -> usize {
        self.stages[0].targets()
    }
}

pub enum Downstream<'a> {
    /// Greedy in `weights . Q^{k+1}` at every later stage.
    Weights(&'a [f64]),
    Regime(&'a Regime),
}

fn outcome_matrix(data: &Dataset) -> DMatrix<f64> {
    DMatrix::from_fn(data.len(), data.p_y(), |i, l| data.trajectories[i].outcomes[l])
}

fn pseudo_outcomes<F>(data: &Dataset, next: &StageModel, mut action: F) -> Result<DMatrix<f64>>
where
    F: FnMut(usize, &History<'_>) -> Result<usize>,
{
    let k1 = next.stage;
    let mut out = DMatrix::zeros(data.len(), next.targets());
    for (i, t) in data.trajectories.iter().enumerate() {
        let h = t.history(k1);
        let a = action(i, &h)?;
        for (l, v) in next.predict(&h, a).into_iter().enumerate() {
            out[(i, l)] = v;
        }
    }
    Ok(out)
}

/// Least-squares (or tree) fit of every outcome at the last stage.
pub fn fit_stage_k(data: &Dataset, basis: &FeatureBasis, engine: &Engine) -> Result<StageModel> {
    let k = data.stages();
    StageFitter::new(data, basis, engine, k)?.fit(&outcome_matrix(data))
}

pub fn backward_induce(
    data: &Dataset,
    basis: &FeatureBasis,
    engine: &Engine,
    downstream: Downstream<'_>,
) -> Result<QModelStack> {
    match downstream {
        Downstream::Weights(w) => {
            if w.len() != data.p_y() {
                return Err(Error::invalid(format!(
                    "weight vector has {} entries for {} outcomes",
                    w.len(),
                    data.p_y()
                )));
            }
            let k_max = data.stages();
            let mut stages: Vec<StageModel> = Vec::with_capacity(k_max);
            stages.push(fit_stage_k(data, basis, engine)?);
            for k in (1..k_max).rev() {
                let next = stages.last().unwrap();
                let targets = pseudo_outcomes(data, next, |_, h| next.greedy(h, w))?;
                stages.push(StageFitter::new(data, basis, engine, k)?.fit(&targets)?);
            }
            stages.reverse();
            Ok(QModelStack {
                stages,
                downstream: format!("weights {w:?}"),
            })
        }
        Downstream::Regime(regime) => {
            let fitter = PlugInFitter::new(data, basis, engine, regime)?;
            fitter.fit(&outcome_matrix(data))
        }
    }
}

/// Estimated value of outcome `outcome` at `h1` for the regime that plays
/// `first_action` and then follows the stack's downstream rule.
pub fn conditional_value(stack: &QModelStack, h1: &History<'_>, first_action: usize, outcome: usize) -> Result<f64> {
    if outcome >= stack.targets() {
        return Err(Error::invalid(format!(
            "outcome index {outcome} out of range for {} outcomes",
            stack.targets()
        )));
    }
    Ok(stack.stage(1).predict(h1, first_action)[outcome])
}

/// Backward induction under one fixed regime, reusable across target
/// matrices (outcomes, composites).
pub struct PlugInFitter<'a> {
    data: &'a Dataset,
    fitters: Vec<StageFitter>,
    actions: Vec<Vec<usize>>,
    label: String,
}

impl<'a> PlugInFitter<'a> {
    pub fn new(data: &'a Dataset, basis: &FeatureBasis, engine: &Engine, regime: &Regime) -> Result<Self> {
        let fitters = (1..=data.stages())
            .map(|k| StageFitter::new(data, basis, engine, k))
            .collect::<Result<Vec<_>>>()?;
        let actions = data
            .trajectories
            .iter()
            .map(|t| regime.actions_along(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            data,
            fitters,
            actions,
            label: format!("regime {}", regime.label),
        })
    }

    /// Regime actions on each observed trajectory (trajectory x stage).
    pub fn regime_actions(&self) -> &[Vec<usize>] {
        &self.actions
    }

    pub fn fit(&self, targets: &DMatrix<f64>) -> Result<QModelStack> {
        let k_max = self.fitters.len();
        let mut stages = Vec::with_capacity(k_max);
        stages.push(self.fitters[k_max - 1].fit(targets)?);
        for k in (1..k_max).rev() {
            let next: &StageModel = stages.last().unwrap();
            let pseudo = pseudo_outcomes(self.data, next, |i, _| Ok(self.actions[i][k]))?;
            stages.push(self.fitters[k - 1].fit(&pseudo)?);
        }
        stages.reverse();
        Ok(QModelStack {
            stages,
            downstream: self.label.clone(),
        })
    }

    /// Sample mean of Q^1(H^1, regime action) per target.
    pub fn plug_in_values(&self, stack: &QModelStack) -> Vec<f64> {
        let mut total = vec![0.0; stack.targets()];
        for (t, acts) in self.data.trajectories.iter().zip(&self.actions) {
            let q = stack.stage(1).predict(&t.history(1), acts[0]);
            for (s, v) in total.iter_mut().zip(q) {
                *s += v;
            }
        }
        let n = self.data.len() as f64;
        total.into_iter().map(|s| s / n).collect()
    }
}

/// Stage models for every weight vector of a candidate class, sharing one
/// model wherever the downstream greedy actions coincide on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateStacks {
    /// `pools[k-1]` holds the distinct stage-k models.
    pub pools: Vec<Vec<Arc<StageModel>>>,
    /// `chains[i][k-1]` indexes the stage-k model used by weight vector i.
    pub chains: Vec<Vec<usize>>,
}

impl CandidateStacks {
    pub fn stage_model(&self, weight_index: usize, stage: usize) -> &Arc<StageModel> {
        &self.pools[stage - 1][self.chains[weight_index][stage - 1]]
    }

    pub fn stack_for(&self, weight_index: usize, weights: &WeightVector) -> QModelStack {
        QModelStack {
            stages: (1..=self.pools.len())
                .map(|k| (**self.stage_model(weight_index, k)).clone())
                .collect(),
            downstream: format!("weights {:?}", weights.as_slice()),
        }
    }
}

pub fn fit_candidate_stacks(
    data: &Dataset,
    basis: &FeatureBasis,
    engine: &Engine,
    weights: &[WeightVector],
) -> Result<CandidateStacks> {
    if weights.is_empty() {
        return Err(Error::invalid("empty candidate class"));
    }
    let k_max = data.stages();
    let n = data.len();
    let mut pools: Vec<Vec<Arc<StageModel>>> = vec![Vec::new(); k_max];
    let mut chains = vec![vec![0usize; k_max]; weights.len()];
    pools[k_max - 1].push(Arc::new(fit_stage_k(data, basis, engine)?));
    for k in (1..k_max).rev() {
        let fitter = StageFitter::new(data, basis, engine, k)?;
        // Predictions of every stage-(k+1) pool model at every feasible action.
        let next_pool = &pools[k];
        let preds: Vec<Vec<Vec<Option<Vec<f64>>>>> = next_pool
            .iter()
            .map(|model| {
                data.trajectories
                    .iter()
                    .map(|t| {
                        let h = t.history(k + 1);
                        (0..data.layout.n_actions[k])
                            .map(|a| h.is_feasible(a).then(|| model.predict(&h, a)))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut seen: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
        let mut new_pool = Vec::new();
        for (wi, w) in weights.iter().enumerate() {
            let m = chains[wi][k];
            let table = &preds[m];
            let acts: Vec<usize> = table
                .iter()
                .map(|row| {
                    let mut best: Option<(usize, f64)> = None;
                    for (a, q) in row.iter().enumerate() {
                        if let Some(q) = q {
                            let s: f64 = w.as_slice().iter().zip(q).map(|(x, y)| x * y).sum();
                            if best.is_none_or(|(_, b)| s > b) {
                                best = Some((a, s));
                            }
                        }
                    }
                    best.map(|(a, _)| a).unwrap_or(0)
                })
                .collect();
            let key = (m, acts);
            let idx = match seen.get(&key) {
                Some(&idx) => idx,
                None => {
                    let mut targets = DMatrix::zeros(n, data.p_y());
                    for (i, &a) in key.1.iter().enumerate() {
                        let q = table[i][a].as_ref().ok_or_else(|| {
                            Error::validation(format!("no feasible action at stage {}", k + 1))
                        })?;
                        for (l, v) in q.iter().enumerate() {
                            targets[(i, l)] = *v;
                        }
                    }
                    new_pool.push(Arc::new(fitter.fit(&targets)?));
                    let idx = new_pool.len() - 1;
                    seen.insert(key, idx);
                    idx
                }
            };
            chains[wi][k - 1] = idx;
        }
        pools[k - 1] = new_pool;
    }
    Ok(CandidateStacks { pools, chains })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::toy_dataset;

    fn basis() -> FeatureBasis {
        FeatureBasis::default()
    }

    #[test]
    fn constant_outcome_is_predicted_everywhere() {
        let data = toy_dataset(40).map_outcomes(vec!["c".into()], |_| vec![2.5]).unwrap();
        let model = fit_stage_k(&data, &basis(), &Engine::Linear).unwrap();
        for t in &data.trajectories {
            for a in 0..2 {
                assert!((model.predict(&t.history(2), a)[0] - 2.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn exact_linear_data_recovers_coefficients() {
        let data = toy_dataset(60);
        let map = StageFeatureMap::build(&basis(), &data.layout, 2, std::iter::empty());
        let beta: Vec<f64> = (0..map.dim()).map(|j| (j as f64 * 0.37).sin()).collect();
        let data = {
            let mut d = data.clone();
            for t in d.trajectories.iter_mut() {
                let phi = map.features(&t.history(2), t.actions[1]);
                t.outcomes = vec![phi.iter().zip(&beta).map(|(x, b)| x * b).sum()];
            }
            d.outcome_names = vec!["y".into()];
            d
        };
        let model = fit_stage_k(&data, &basis(), &Engine::Linear).unwrap();
        let Regressor::Linear { coefficients } = &model.regressor else { panic!() };
        for (j, b) in beta.iter().enumerate() {
            assert!((coefficients[(j, 0)] - b).abs() < 1e-8, "coef {j}");
        }
    }

    #[test]
    fn single_stage_stack_is_the_last_stage_fit() {
        let data = toy_dataset(30);
        let mut one = data.clone();
        one.layout.covariate_dims.truncate(1);
        one.layout.n_actions.truncate(1);
        for t in one.trajectories.iter_mut() {
            t.stage_covariates.truncate(1);
            t.actions.truncate(1);
            t.feasible_masks.truncate(1);
            t.propensities.truncate(1);
        }
        let stack = backward_induce(&one, &basis(), &Engine::Linear, Downstream::Weights(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(stack.stages.len(), 1);
        assert_eq!(stack.stages[0], fit_stage_k(&one, &basis(), &Engine::Linear).unwrap());
        let h = one.trajectories[3].history(1);
        assert_eq!(conditional_value(&stack, &h, 1, 2).unwrap(), stack.stages[0].predict(&h, 1)[2]);
        assert!(conditional_value(&stack, &h, 1, 3).is_err());
    }

    #[test]
    fn downstream_rule_changes_only_earlier_stages() {
        let data = toy_dataset(80);
        let a = backward_induce(&data, &basis(), &Engine::Linear, Downstream::Weights(&[1.0, 0.0, 0.0])).unwrap();
        let b = backward_induce(&data, &basis(), &Engine::Linear, Downstream::Weights(&[0.0, 0.0, -1.0])).unwrap();
        assert_eq!(a.stages[1], b.stages[1]);
        assert_ne!(a.stages[0], b.stages[0]);
    }

    #[test]
    fn fits_are_linear_in_targets() {
        let data = toy_dataset(50);
        let fitter = StageFitter::new(&data, &basis(), &Engine::Linear, 2).unwrap();
        let y = outcome_matrix(&data);
        let combo = DMatrix::from_fn(data.len(), 1, |i, _| 2.0 * y[(i, 0)] - 0.5 * y[(i, 2)]);
        let joint = fitter.fit(&y).unwrap();
        let single = fitter.fit(&combo).unwrap();
        for t in &data.trajectories {
            let h = t.history(2);
            let p = joint.predict(&h, 1);
            assert!((single.predict(&h, 1)[0] - (2.0 * p[0] - 0.5 * p[2])).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_rows_leaves_fits_unchanged() {
        let data = toy_dataset(64);
        let mut order: Vec<usize> = (0..64).collect();
        order.reverse();
        order.swap(3, 40);
        let permuted = data.subset(&order);
        let w = [0.2, 0.3, 0.5];
        let a = backward_induce(&data, &basis(), &Engine::Linear, Downstream::Weights(&w)).unwrap();
        let b = backward_induce(&permuted, &basis(), &Engine::Linear, Downstream::Weights(&w)).unwrap();
        for t in &data.trajectories {
            for k in 1..=2 {
                let (pa, pb) = (a.stage(k).predict(&t.history(k), 0), b.stage(k).predict(&t.history(k), 0));
                for (x, y) in pa.iter().zip(&pb) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn candidate_stacks_match_direct_induction() {
        let data = toy_dataset(90);
        let weights = crate::regime::sample_simplex(20, 3, 5).unwrap();
        let stacks = fit_candidate_stacks(&data, &basis(), &Engine::Linear, &weights).unwrap();
        assert!(stacks.pools[0].len() <= weights.len());
        for (i, w) in weights.iter().enumerate() {
            let direct = backward_induce(&data, &basis(), &Engine::Linear, Downstream::Weights(w.as_slice())).unwrap();
            let cached = stacks.stack_for(i, w);
            for t in data.trajectories.iter().take(10) {
                let h = t.history(1);
                let (x, y) = (direct.stage(1).predict(&h, 1), cached.stage(1).predict(&h, 1));
                for (u, v) in x.iter().zip(&y) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tree_engine_fits_and_is_deterministic() {
        let data = toy_dataset(120);
        let engine = Engine::Trees(TreeConfig {
            n_trees: 10,
            ..TreeConfig::default()
        });
        let a = backward_induce(&data, &basis(), &engine, Downstream::Weights(&[1.0, 0.0, 0.0])).unwrap();
        let b = backward_induce(&data, &basis(), &engine, Downstream::Weights(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(a, b);
        let q = a.stage(1).predict(&data.trajectories[0].history(1), 0);
        assert!(q.iter().all(|v| v.is_finite()));
    }
}
