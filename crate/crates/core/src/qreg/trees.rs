//! Bagged, depth-limited regression trees.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Fraction of features offered at each split.
    pub feature_fraction: f64,
    pub seed: u64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 6,
            min_leaf: 5,
            feature_fraction: 1.0 / 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    trees: Vec<Tree>,
}

impl TreeEnsemble {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let total: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        total / self.trees.len() as f64
    }
}

struct Builder<'a, R: Rng> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    cfg: &'a TreeConfig,
    n_try: usize,
    rng: R,
    nodes: Vec<Node>,
}

impl<R: Rng> Builder<'_, R> {
    fn mean(&self, rows: &[usize]) -> f64 {
        rows.iter().map(|&r| self.y[r]).sum::<f64>() / rows.len() as f64
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<(usize, f64)> {
        let d = self.x.ncols();
        let features = sample(&mut self.rng, d, self.n_try.min(d)).into_vec();
        let total: f64 = rows.iter().map(|&r| self.y[r]).sum();
        let n = rows.len() as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = rows.to_vec();
        for &f in &features {
            order.sort_by(|&a, &b| self.x[(a, f)].total_cmp(&self.x[(b, f)]).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for i in 0..order.len() - 1 {
                left_sum += self.y[order[i]];
                let nl = (i + 1) as f64;
                let (xv, xn) = (self.x[(order[i], f)], self.x[(order[i + 1], f)]);
                if xv == xn || i + 1 < self.cfg.min_leaf || order.len() - i - 1 < self.cfg.min_leaf {
                    continue;
                }
                let right_sum = total - left_sum;
                // Maximising this is equivalent to minimising the split SSE.
                let score = left_sum * left_sum / nl + right_sum * right_sum / (n - nl);
                if best.is_none_or(|(s, _, _)| score > s + 1e-12) {
                    best = Some((score, f, 0.5 * (xv + xn)));
                }
            }
        }
        let parent = total * total / n;
        best.filter(|(s, _, _)| *s > parent + 1e-12)
            .map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: self.mean(&rows),
        });
        if depth >= self.cfg.max_depth || rows.len() < 2 * self.cfg.min_leaf.max(1) {
            return id;
        }
        if let Some((feature, threshold)) = self.best_split(&rows) {
            let (l, r): (Vec<usize>, Vec<usize>) =
                rows.iter().partition(|&&row| self.x[(row, feature)] <= threshold);
            let left = self.grow(l, depth + 1);
            let right = self.grow(r, depth + 1);
            self.nodes[id] = Node::Split {
                feature,
                threshold,
                left,
                right,
            };
        }
        id
    }
}

/// Fit a bagged ensemble on the rows of `x`; `salt` separates the random
/// streams of different targets and stages.
pub fn fit_ensemble(x: &DMatrix<f64>, y: &[f64], cfg: &TreeConfig, salt: &[u64]) -> TreeEnsemble {
    let n = x.nrows();
    let n_try = ((x.ncols() as f64 * cfg.feature_fraction).ceil() as usize).max(1);
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for t in 0..cfg.n_trees.max(1) {
        let mut path = vec![rng::label::TREES];
        path.extend_from_slice(salt);
        path.push(t as u64);
        let mut stream = rng::stream(cfg.seed, &path);
        let mut rows: Vec<usize> = (0..n).map(|_| stream.random_range(0..n)).collect();
        rows.sort_unstable();
        let mut builder = Builder {
            x,
            y,
            cfg,
            n_try,
            rng: stream,
            nodes: Vec::new(),
        };
        builder.grow(rows, 0);
        trees.push(Tree {
            nodes: builder.nodes,
        });
    }
    TreeEnsemble { trees }
}
