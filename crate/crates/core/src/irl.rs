//! Composite-outcome weights under which a fixed regime looks best, and the
//! greedy regime for a composite outcome.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::qreg::{backward_induce, Downstream, Engine, FeatureBasis, PlugInFitter};
use crate::regime::Regime;
use crate::rng;

/// Unit-norm weights on the standardized outcome vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeSpec {
    pub lambda: Vec<f64>,
    /// Plug-in value of each standardized outcome under the regime, when
    /// the closed form was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome_values: Option<Vec<f64>>,
}

impl CompositeSpec {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        let norm = lambda.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("composite weights must have unit norm, got {norm}")));
        }
        Ok(Self {
            lambda,
            outcome_values: None,
        })
    }
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::numerical("composite direction undefined: all outcome values are zero"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Plug-in composite values under one regime.
pub struct CompositeValues<'a> {
    data: &'a Dataset,
    fitter: PlugInFitter<'a>,
    linear: bool,
    per_outcome: Vec<f64>,
}

impl<'a> CompositeValues<'a> {
    pub fn new(data: &'a Dataset, regime: &Regime, basis: &FeatureBasis, engine: &Engine) -> Result<Self> {
        let fitter = PlugInFitter::new(data, basis, engine, regime)?;
        let y = DMatrix::from_fn(data.len(), data.p_y(), |i, l| data.trajectories[i].outcomes[l]);
        let per_outcome = fitter.plug_in_values(&fitter.fit(&y)?);
        Ok(Self {
            data,
            fitter,
            linear: engine.is_linear(),
            per_outcome,
        })
    }

    pub fn per_outcome(&self) -> &[f64] {
        &self.per_outcome
    }

    /// V̂_λ; uses linearity in the targets when the engine allows it.
    pub fn value(&self, lambda: &[f64]) -> Result<f64> {
        if self.linear {
            Ok(lambda.iter().zip(&self.per_outcome).map(|(a, b)| a * b).sum())
        } else {
            self.scalar_fit_value(lambda)
        }
    }

    /// V̂_λ from a dedicated backward induction on the scalar composite.
    pub fn scalar_fit_value(&self, lambda: &[f64]) -> Result<f64> {
        let c = DMatrix::from_fn(self.data.len(), 1, |i, _| {
            lambda.iter().zip(&self.data.trajectories[i].outcomes).map(|(a, b)| a * b).sum()
        });
        Ok(self.fitter.plug_in_values(&self.fitter.fit(&c)?)[0])
    }
}

/// Near-uniform unit vectors: a Fibonacci lattice for three outcomes, an
/// even circle for two, ± for one, Gaussian directions otherwise.
pub fn sphere_grid(n: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
    match p {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..n)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * i as f64;
                    vec![r * phi.cos(), r * phi.sin(), z]
                })
                .collect()
        }
        _ => {
            let mut rng = rng::stream(seed, &[rng::label::SIMPLEX, p as u64]);
            (0..n)
                .map(|_| {
                    let v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
                    normalize(&v).unwrap_or_else(|_| {
                        let mut e = vec![0.0; p];
                        e[0] = 1.0;
                        e
                    })
                })
                .collect()
        }
    }
}

/// Grid maximiser of V̂_λ; the lowest grid index wins ties.
pub fn grid_argmax(values: &CompositeValues<'_>, grid: &[Vec<f64>], scalar_fits: bool) -> Result<(usize, f64)> {
    let scores = grid
        .par_iter()
        .map(|l| if scalar_fits { values.scalar_fit_value(l) } else { values.value(l) })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.into_iter().enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best)
}

pub const DEFAULT_SPHERE_GRID: usize = 10_000;

/// λ̂ for `regime` on standardized `data`.
pub fn estimate_lambda(data: &Dataset, regime: &Regime, basis: &FeatureBasis, engine: &Engine) -> Result<CompositeSpec> {
    estimate_lambda_with_grid(data, regime, basis, engine, DEFAULT_SPHERE_GRID)
}

pub fn estimate_lambda_with_grid(
    data: &Dataset,
    regime: &Regime,
    basis: &FeatureBasis,
    engine: &Engine,
    grid_size: usize,
) -> Result<CompositeSpec> {
    if data.standardization.is_none() {
        return Err(Error::invalid("composite weights are estimated on standardized outcomes"));
    }
    let values = CompositeValues::new(data, regime, basis, engine)?;
    if engine.is_linear() {
        let lambda = normalize(values.per_outcome())?;
        Ok(CompositeSpec {
            lambda,
            outcome_values: Some(values.per_outcome().to_vec()),
        })
    } else {
        let grid = sphere_grid(grid_size, data.p_y(), 0);
        let (i, _) = grid_argmax(&values, &grid, true)?;
        Ok(CompositeSpec {
            lambda: grid[i].clone(),
            outcome_values: None,
        })
    }
}

/// Greedy regime for a weighted outcome after backward induction on `data`.
pub fn greedy_regime(
    data: &Dataset,
    weights: &[f64],
    basis: &FeatureBasis,
    engine: &Engine,
    label: impl Into<String>,
) -> Result<Regime> {
    let stack = backward_induce(data, basis, engine, Downstream::Weights(weights))?;
    Ok(Regime::greedy(stack, weights, label))
}

/// Scalar Q-learning on the composite λᵀY of `data`.
pub fn tuned_composite_regime(data: &Dataset, lambda: &CompositeSpec, basis: &FeatureBasis, engine: &Engine) -> Result<Regime> {
    if lambda.lambda.len() != data.p_y() {
        return Err(Error::invalid("composite weights do not match the outcome count"));
    }
    let w = lambda.lambda.clone();
    let composite = data.map_outcomes(vec!["composite".into()], move |y| {
        vec![y.iter().zip(&w).map(|(a, b)| a * b).sum()]
    })?;
    greedy_regime(&composite, &[1.0], basis, engine, "tuned_composite")
}
