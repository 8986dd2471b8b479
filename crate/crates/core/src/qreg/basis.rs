use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{History, StageLayout};

/// Regression design used for every stage's Q-function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureBasis {
    /// Intercept, history main effects, and one block of action indicator
    /// plus action-by-history interactions per non-reference action.
    Linear {
        /// Add products of earlier action indicators with every covariate.
        prior_action_interactions: bool,
        /// Add squared covariates to the history block.
        squares: bool,
    },
    /// One indicator per distinct observed (history, action) cell.
    Saturated,
}

impl Default for FeatureBasis {
    fn default() -> Self {
        FeatureBasis::Linear {
            prior_action_interactions: true,
            squares: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MapKind {
    Linear {
        prior_action_interactions: bool,
        squares: bool,
        history_dim: usize,
    },
    Saturated {
        cells: BTreeMap<String, usize>,
    },
}

/// A basis specialised to one stage of a concrete layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFeatureMap {
    pub stage: usize,
    pub n_actions: usize,
    prior_actions: Vec<usize>,
    covariate_dims: Vec<usize>,
    kind: MapKind,
}

fn cell_key(h: &History<'_>, action: usize) -> String {
    format!("{}#{}", h.key(), action)
}

impl StageFeatureMap {
    pub fn build<'a, I>(basis: &FeatureBasis, layout: &StageLayout, stage: usize, observed: I) -> Self
    where
        I: IntoIterator<Item = (History<'a>, usize)>,
    {
        let covariate_dims = layout.covariate_dims[..stage].to_vec();
        let prior_actions = layout.n_actions[..stage - 1].to_vec();
        let kind = match basis {
            FeatureBasis::Linear {
                prior_action_interactions,
                squares,
            } => {
                let n_cov: usize = covariate_dims.iter().sum();
                let n_ind: usize = prior_actions.iter().map(|n| n.saturating_sub(1)).sum();
                let mut history_dim = n_cov + n_ind;
                if *prior_action_interactions {
                    history_dim += n_ind * n_cov;
                }
                if *squares {
                    history_dim += n_cov;
                }
                MapKind::Linear {
                    prior_action_interactions: *prior_action_interactions,
                    squares: *squares,
                    history_dim,
                }
            }
            FeatureBasis::Saturated => {
                let keys: std::collections::BTreeSet<String> =
                    observed.into_iter().map(|(h, a)| cell_key(&h, a)).collect();
                MapKind::Saturated {
                    cells: keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect(),
                }
            }
        };
        Self {
            stage,
            n_actions: layout.n_actions[stage - 1],
            prior_actions,
            covariate_dims,
            kind,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            MapKind::Linear { history_dim, .. } => {
                1 + history_dim + (self.n_actions.saturating_sub(1)) * (1 + history_dim)
            }
            MapKind::Saturated { cells } => cells.len(),
        }
    }

    fn history_into(&self, h: &History<'_>, out: &mut [f64], interactions: bool, squares: bool) {
        let mut pos = 0;
        for xs in h.covariates {
            out[pos..pos + xs.len()].copy_from_slice(xs);
            pos += xs.len();
        }
        let n_cov = pos;
        let ind_start = pos;
        for (l, &n) in self.prior_actions.iter().enumerate() {
            for code in 1..n {
                out[pos] = if h.actions[l] == code { 1.0 } else { 0.0 };
                pos += 1;
            }
        }
        let ind_end = pos;
        if interactions {
            for i in ind_start..ind_end {
                let ind = out[i];
                for j in 0..n_cov {
                    out[pos] = ind * out[j];
                    pos += 1;
                }
            }
        }
        if squares {
            for j in 0..n_cov {
                out[pos] = out[j] * out[j];
                pos += 1;
            }
        }
    }

    /// Write the feature vector of `(h, action)` into `out` (length `dim()`).
    pub fn write(&self, h: &History<'_>, action: usize, out: &mut [f64]) {
        debug_assert_eq!(h.stage(), self.stage);
        out.fill(0.0);
        match &self.kind {
            MapKind::Linear {
                prior_action_interactions,
                squares,
                history_dim,
            } => {
                let dh = *history_dim;
                out[0] = 1.0;
                self.history_into(h, &mut out[1..1 + dh], *prior_action_interactions, *squares);
                if action >= 1 && action < self.n_actions {
                    let base = 1 + dh + (action - 1) * (1 + dh);
                    out[base] = 1.0;
                    for j in 0..dh {
                        out[base + 1 + j] = out[1 + j];
                    }
                }
            }
            MapKind::Saturated { cells } => {
                if let Some(&i) = cells.get(&cell_key(h, action)) {
                    out[i] = 1.0;
                }
            }
        }
    }

    pub fn features(&self, h: &History<'_>, action: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.write(h, action, &mut out);
        out
    }

    pub fn covariate_dims(&self) -> &[usize] {
        &self.covariate_dims
    }
}
