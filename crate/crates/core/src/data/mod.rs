//! Trajectories, datasets, histories, and the sample-splitting used for
//! inference.

mod csv_io;

pub use csv_io::{load_csv, write_csv, CsvSchema, StageColumns};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// One subject's record: stage-wise covariates and actions plus the outcome
/// vector (priority order, larger is better).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub stage_covariates: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub feasible_masks: Vec<Vec<bool>>,
    pub propensities: Vec<f64>,
    pub outcomes: Vec<f64>,
}

impl Trajectory {
    pub fn stages(&self) -> usize {
        self.actions.len()
    }

    /// Information available at `stage` (1-based): X^1, A^1, ..., X^stage.
    pub fn history(&self, stage: usize) -> History<'_> {
        History {
            covariates: &self.stage_covariates[..stage],
            actions: &self.actions[..stage - 1],
            feasible: &self.feasible_masks[stage - 1],
        }
    }

    pub fn validate(&self, p_y: usize) -> Result<()> {
        let k = self.actions.len();
        if self.stage_covariates.len() != k
            || self.feasible_masks.len() != k
            || self.propensities.len() != k
        {
            return Err(Error::validation(format!(
                "trajectory `{}`: stage counts disagree",
                self.id
            )));
        }
        for stage in 0..k {
            let mask = &self.feasible_masks[stage];
            let action = self.actions[stage];
            if !mask.get(action).copied().unwrap_or(false) {
                return Err(Error::validation(format!(
                    "trajectory `{}`: action {} infeasible at stage {}",
                    self.id,
                    action,
                    stage + 1
                )));
            }
            let p = self.propensities[stage];
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::validation(format!(
                    "trajectory `{}`: propensity {} outside (0,1] at stage {}",
                    self.id,
                    p,
                    stage + 1
                )));
            }
            if mask.iter().filter(|&&f| f).count() == 1 && p != 1.0 {
                return Err(Error::validation(format!(
                    "trajectory `{}`: singleton feasible set requires propensity 1 at stage {}",
                    self.id,
                    stage + 1
                )));
            }
            if self.stage_covariates[stage].iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!(
                    "trajectory `{}`: non-finite covariate at stage {}",
                    self.id,
                    stage + 1
                )));
            }
        }
        if self.outcomes.len() != p_y {
            return Err(Error::validation(format!(
                "trajectory `{}`: expected {} outcomes, found {}",
                self.id,
                p_y,
                self.outcomes.len()
            )));
        }
        if self.outcomes.iter().any(|y| !y.is_finite()) {
            return Err(Error::validation(format!(
                "trajectory `{}`: non-finite outcome",
                self.id
            )));
        }
        Ok(())
    }
}

/// The information set at stage k, borrowed from a (possibly partial)
/// trajectory.
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    pub covariates: &'a [Vec<f64>],
    pub actions: &'a [usize],
    pub feasible: &'a [bool],
}

impl<'a> History<'a> {
    pub fn new(covariates: &'a [Vec<f64>], actions: &'a [usize], feasible: &'a [bool]) -> Self {
        Self {
            covariates,
            actions,
            feasible,
        }
    }

    pub fn stage(&self) -> usize {
        self.covariates.len()
    }

    pub fn baseline(&self) -> &'a [f64] {
        &self.covariates[0]
    }

    pub fn is_feasible(&self, action: usize) -> bool {
        self.feasible.get(action).copied().unwrap_or(false)
    }

    pub fn feasible_actions(&self) -> impl Iterator<Item = usize> + 'a {
        self.feasible
            .iter()
            .enumerate()
            .filter_map(|(a, &f)| f.then_some(a))
    }

    /// Exact key of the history (bit patterns of covariates plus actions).
    pub fn key(&self) -> String {
        history_key(self.covariates, self.actions)
    }
}

pub fn history_key(covariates: &[Vec<f64>], actions: &[usize]) -> String {
    let mut key = String::new();
    for (k, xs) in covariates.iter().enumerate() {
        if k > 0 {
            key.push('|');
            key.push_str(&actions[k - 1].to_string());
            key.push('|');
        }
        for (j, x) in xs.iter().enumerate() {
            if j > 0 {
                key.push(',');
            }
            key.push_str(&format!("{:016x}", x.to_bits()));
        }
    }
    key
}

/// Fixed per-stage dimensions shared by every trajectory in a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLayout {
    pub covariate_dims: Vec<usize>,
    pub n_actions: Vec<usize>,
}

impl StageLayout {
    pub fn stages(&self) -> usize {
        self.n_actions.len()
    }
}

/// Per-outcome centering and scaling, replayable on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub constant: Vec<bool>,
}

impl Standardization {
    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// `self` applied after `inner`, expressed against the raw scale.
    fn compose(&self, inner: &Standardization) -> Standardization {
        let mean = inner
            .mean
            .iter()
            .zip(&inner.scale)
            .zip(&self.mean)
            .map(|((m1, s1), m2)| m1 + s1 * m2)
            .collect();
        let scale = inner.scale.iter().zip(&self.scale).map(|(a, b)| a * b).collect();
        let constant = inner
            .constant
            .iter()
            .zip(&self.constant)
            .map(|(a, b)| *a || *b)
            .collect();
        Standardization {
            mean,
            scale,
            constant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub outcome_names: Vec<String>,
    pub layout: StageLayout,
    /// Present when `outcomes` hold standardized values; maps raw to stored.
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(
        trajectories: Vec<Trajectory>,
        outcome_names: Vec<String>,
        layout: StageLayout,
    ) -> Result<Self> {
        let data = Self {
            trajectories,
            outcome_names,
            layout,
            standardization: None,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let p_y = self.outcome_names.len();
        if p_y == 0 {
            return Err(Error::validation("dataset has no outcomes"));
        }
        let k = self.layout.stages();
        if self.layout.covariate_dims.len() != k {
            return Err(Error::validation("layout stage counts disagree"));
        }
        for t in &self.trajectories {
            t.validate(p_y)?;
            if t.stages() != k {
                return Err(Error::validation(format!(
                    "trajectory `{}` has {} stages, expected {}",
                    t.id,
                    t.stages(),
                    k
                )));
            }
            for stage in 0..k {
                if t.stage_covariates[stage].len() != self.layout.covariate_dims[stage]
                    || t.feasible_masks[stage].len() != self.layout.n_actions[stage]
                {
                    return Err(Error::validation(format!(
                        "trajectory `{}` does not match the stage layout at stage {}",
                        t.id,
                        stage + 1
                    )));
                }
            }
        }
        if let Some(s) = &self.standardization {
            if s.scale.len() != p_y || s.scale.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::validation("standardization scales must be positive"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn p_y(&self) -> usize {
        self.outcome_names.len()
    }

    pub fn stages(&self) -> usize {
        self.layout.stages()
    }

    /// Same trajectories with outcomes replaced by `f(outcomes)`.
    pub fn map_outcomes<F>(&self, names: Vec<String>, f: F) -> Result<Dataset>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| Trajectory {
                outcomes: f(&t.outcomes),
                ..t.clone()
            })
            .collect();
        let data = Dataset {
            trajectories,
            outcome_names: names,
            layout: self.layout.clone(),
            standardization: None,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            outcome_names: self.outcome_names.clone(),
            layout: self.layout.clone(),
            standardization: self.standardization.clone(),
        }
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.trajectories.iter().map(|t| t.id.as_str()).collect()
    }

    /// SHA-256 over the sorted trajectory ids.
    pub fn id_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for id in self.ids() {
            hasher.update(id.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }
}

/// The two halves of an even split plus the subject dropped when n was odd.
#[derive(Debug, Clone)]
pub struct EvenSplit {
    pub first: Dataset,
    pub second: Dataset,
    pub dropped: Option<String>,
}

/// Uniformly random partition into two halves of equal size.
pub fn split_even(data: &Dataset, seed: u64) -> Result<EvenSplit> {
    let n = data.len();
    if n < 4 {
        return Err(Error::validation(format!(
            "cannot split {n} subjects into fit and evaluation halves (need at least 4)"
        )));
    }
    let mut rng = rng::stream(seed, &[rng::label::SPLIT]);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut dropped = None;
    if n % 2 == 1 {
        let drop_at = rng.random_range(0..n);
        let id = data.trajectories[drop_at].id.clone();
        log::warn!("odd sample size {n}: dropping subject `{id}` before splitting");
        indices.remove(drop_at);
        dropped = Some(id);
    }
    indices.shuffle(&mut rng);
    let m = indices.len() / 2;
    let mut first = indices[..m].to_vec();
    let mut second = indices[m..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok(EvenSplit {
        first: data.subset(&first),
        second: data.subset(&second),
        dropped,
    })
}

/// Center and scale each outcome to sample mean 0 and (population) variance 1.
/// Constant outcomes keep scale 1 and are flagged.
pub fn standardize_outcomes(data: &Dataset) -> Dataset {
    let p_y = data.p_y();
    let n = data.len().max(1) as f64;
    let mut mean = vec![0.0; p_y];
    for t in &data.trajectories {
        for (m, y) in mean.iter_mut().zip(&t.outcomes) {
            *m += y;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; p_y];
    for t in &data.trajectories {
        for ((v, y), m) in var.iter_mut().zip(&t.outcomes).zip(&mean) {
            *v += (y - m) * (y - m);
        }
    }
    let mut scale = Vec::with_capacity(p_y);
    let mut constant = Vec::with_capacity(p_y);
    for (l, v) in var.iter().enumerate() {
        let sd = (v / n).sqrt();
        if sd > 0.0 && sd.is_finite() {
            scale.push(sd);
            constant.push(false);
        } else {
            log::warn!("outcome `{}` is constant; leaving its scale at 1", data.outcome_names[l]);
            scale.push(1.0);
            constant.push(true);
        }
    }
    let step = Standardization {
        mean,
        scale,
        constant,
    };
    let trajectories = data
        .trajectories
        .iter()
        .map(|t| Trajectory {
            outcomes: step.apply(&t.outcomes),
            ..t.clone()
        })
        .collect();
    let standardization = match &data.standardization {
        Some(inner) => step.compose(inner),
        None => step,
    };
    Dataset {
        trajectories,
        outcome_names: data.outcome_names.clone(),
        layout: data.layout.clone(),
        standardization: Some(standardization),
    }
}
