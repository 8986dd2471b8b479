//! Small discrete two-stage problems whose candidate values can be computed
//! exactly, plus a set-based selection routine written independently of the
//! library's.

#![allow(dead_code, clippy::type_complexity, clippy::needless_range_loop)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use prioritized_dtr::data::{Dataset, StageLayout, Trajectory};

pub const X1: [f64; 3] = [-1.0, 0.0, 1.0];
pub const X2: [f64; 2] = [0.0, 1.0];

/// X¹ uniform on {-1, 0, 1}, binary actions, binary X², and a mean outcome
/// vector for every full history.
#[derive(Debug, Clone)]
pub struct Instance {
    pub p: usize,
    /// trans[x1][a1] = P(X² = 1 | x1, a1)
    pub trans: [[f64; 2]; 3],
    /// mu[x1][a1][x2][a2] = E[Y | full history]
    pub mu: [[[[Vec<f64>; 2]; 2]; 2]; 3],
}

impl Instance {
    pub fn random(p: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (0..p).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let mu = std::array::from_fn(|_| {
            std::array::from_fn(|_| std::array::from_fn(|_| std::array::from_fn(|_| draw())))
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let trans = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.15..0.85)));
        Self { p, trans, mu }
    }

    /// Greedy stage-2 action for weights `w` (lowest action on ties).
    pub fn stage2_action(&self, w: &[f64], x1: usize, a1: usize, x2: usize) -> usize {
        let score = |a2: usize| -> f64 { w.iter().zip(&self.mu[x1][a1][x2][a2]).map(|(a, b)| a * b).sum() };
        if score(1) > score(0) {
            1
        } else {
            0
        }
    }

    /// The stage-2 behaviour of `w` after (x1, a1), as (action at X²=0, action at X²=1).
    pub fn stage2_map(&self, w: &[f64], x1: usize, a1: usize) -> (usize, usize) {
        (self.stage2_action(w, x1, a1, 0), self.stage2_action(w, x1, a1, 1))
    }

    /// Exact value vector of starting with `a1` at `x1` and following `w`.
    pub fn value(&self, w: &[f64], x1: usize, a1: usize) -> Vec<f64> {
        let q = self.trans[x1][a1];
        let (b0, b1) = self.stage2_map(w, x1, a1);
        let m0 = &self.mu[x1][a1][0][b0];
        let m1 = &self.mu[x1][a1][1][b1];
        (0..self.p).map(|l| (1.0 - q) * m0[l] + q * m1[l]).collect()
    }

    /// Values of every candidate `a * n_w + w` at `x1`.
    pub fn candidate_values(&self, weights: &[Vec<f64>], x1: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(2 * weights.len());
        for a1 in 0..2 {
            for w in weights {
                out.push(self.value(w, x1, a1));
            }
        }
        out
    }

    /// A uniformly randomized trial with Gaussian noise on the outcomes.
    pub fn simulate(&self, n: usize, noise_sd: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_sd.max(1e-300)).unwrap();
        let trajectories = (0..n)
            .map(|i| {
                let x1 = rng.random_range(0..3usize);
                let a1 = rng.random_range(0..2usize);
                let x2 = usize::from(rng.random::<f64>() < self.trans[x1][a1]);
                let a2 = rng.random_range(0..2usize);
                let outcomes = self.mu[x1][a1][x2][a2]
                    .iter()
                    .map(|m| if noise_sd > 0.0 { m + noise.sample(&mut rng) } else { *m })
                    .collect();
                Trajectory {
                    id: format!("d{i}"),
                    stage_covariates: vec![vec![X1[x1]], vec![X2[x2]]],
                    actions: vec![a1, a2],
                    feasible_masks: vec![vec![true, true], vec![true, true]],
                    propensities: vec![0.5, 0.5],
                    outcomes,
                }
            })
            .collect();
        Dataset::new(
            trajectories,
            (1..=self.p).map(|l| format!("y_{l}")).collect(),
            StageLayout {
                covariate_dims: vec![1, 1],
                n_actions: vec![2, 2],
            },
        )
        .unwrap()
    }

    /// Same instance with each cell's mean outcome replaced by its sample
    /// mean in `data`.
    pub fn with_empirical_means(&self, data: &Dataset) -> Self {
        let mut sums: [[[[(usize, Vec<f64>); 2]; 2]; 2]; 3] = std::array::from_fn(|_| {
            std::array::from_fn(|_| std::array::from_fn(|_| std::array::from_fn(|_| (0, vec![0.0; self.p]))))
        });
        for t in &data.trajectories {
            let x1 = X1.iter().position(|v| *v == t.stage_covariates[0][0]).unwrap();
            let x2 = usize::from(t.stage_covariates[1][0] == 1.0);
            let cell = &mut sums[x1][t.actions[0]][x2][t.actions[1]];
            cell.0 += 1;
            for (s, y) in cell.1.iter_mut().zip(&t.outcomes) {
                *s += y;
            }
        }
        let mut out = self.clone();
        out.mu = sums.map(|a| a.map(|b| b.map(|c| c.map(|(n, s)| s.iter().map(|v| v / n as f64).collect()))));
        out
    }

    /// Same instance with X² frequencies replaced by those observed in `data`.
    pub fn with_empirical_transitions(&self, data: &Dataset) -> Self {
        let mut counts = [[[0usize; 2]; 2]; 3];
        for t in &data.trajectories {
            let x1 = X1.iter().position(|v| *v == t.stage_covariates[0][0]).unwrap();
            let x2 = usize::from(t.stage_covariates[1][0] == 1.0);
            counts[x1][t.actions[0]][x2] += 1;
        }
        let mut out = self.clone();
        for x1 in 0..3 {
            for a1 in 0..2 {
                let c = counts[x1][a1];
                out.trans[x1][a1] = c[1] as f64 / (c[0] + c[1]) as f64;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteSelection {
    pub classes: Vec<BTreeSet<usize>>,
    pub depth: usize,
    pub admissible: BTreeSet<usize>,
    pub tau: usize,
    pub chosen: usize,
}

/// Selection by enumeration. Every class is built from its definition, the
/// depth is the largest prefix whose classes share a member (found by
/// testing each prefix from the longest down), and the choice maximizes the
/// tie-breaking outcome over the admissible set with the lowest index
/// winning ties.
pub fn brute_select(values: &[Vec<f64>], deltas: &[f64]) -> BruteSelection {
    let p = deltas.len();
    let classes: Vec<BTreeSet<usize>> = (0..p)
        .map(|l| {
            let best = values.iter().map(|v| v[l]).fold(f64::NEG_INFINITY, f64::max);
            (0..values.len()).filter(|&c| best - values[c][l] <= deltas[l]).collect()
        })
        .collect();
    let prefix = |j: usize| -> BTreeSet<usize> {
        (0..values.len()).filter(|c| classes[..j].iter().all(|s| s.contains(c))).collect()
    };
    let depth = (1..=p).rev().find(|&j| !prefix(j).is_empty()).unwrap();
    let admissible = prefix(depth);
    let tau = if depth == p { 1 } else { depth + 1 };
    let mut chosen = *admissible.iter().next().unwrap();
    for &c in &admissible {
        if values[c][tau - 1] > values[chosen][tau - 1] {
            chosen = c;
        }
    }
    BruteSelection {
        classes,
        depth,
        admissible,
        tau,
        chosen,
    }
}

/// Weight vectors on the simplex for `p` outcomes.
pub fn weight_grid(p: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    prioritized_dtr::regime::sample_simplex(n, p, seed)
        .unwrap()
        .into_iter()
        .map(|w| w.as_slice().to_vec())
        .collect()
}
