//! Sample-splitting value estimation: the augmented IPW estimator, its
//! covariance, Wald intervals, the χ² ellipsoid, and the universal-inference
//! set for composite weights.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::data::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::irl::CompositeValues;
use crate::qreg::{Engine, FeatureBasis, QModelStack};
use crate::regime::Regime;

/// ζ^k (agreement with the regime through stage k) and the cumulative
/// propensity products, both indexed k = 0..=K.
#[derive(Debug, Clone, PartialEq)]
pub struct Coarsening {
    pub zeta: Vec<bool>,
    pub propensity_product: Vec<f64>,
}

pub fn coarsening(t: &Trajectory, regime_actions: &[usize]) -> Result<Coarsening> {
    let k_max = t.stages();
    let mut zeta = Vec::with_capacity(k_max + 1);
    let mut prod = Vec::with_capacity(k_max + 1);
    zeta.push(true);
    prod.push(1.0);
    for k in 0..k_max {
        let p = t.propensities[k];
        if !(p > 0.0) {
            return Err(Error::validation(format!(
                "trajectory `{}`: zero propensity for the observed stage-{} action",
                t.id,
                k + 1
            )));
        }
        zeta.push(zeta[k] && t.actions[k] == regime_actions[k]);
        prod.push(prod[k] * p);
    }
    Ok(Coarsening {
        zeta,
        propensity_product: prod,
    })
}

fn ipw_vector(t: &Trajectory, c: &Coarsening) -> Vec<f64> {
    let k = t.stages();
    let w = if c.zeta[k] { 1.0 / c.propensity_product[k] } else { 0.0 };
    t.outcomes.iter().map(|y| y * w).collect()
}

/// Per-subject AIPW contribution (its sample mean is the estimator).
fn aipw_vector(t: &Trajectory, actions: &[usize], c: &Coarsening, stack: &QModelStack) -> Vec<f64> {
    let mut out = ipw_vector(t, c);
    for k in 1..=t.stages() {
        if !c.zeta[k - 1] {
            break;
        }
        let before = 1.0 / c.propensity_product[k - 1];
        let after = if c.zeta[k] { 1.0 / c.propensity_product[k] } else { 0.0 };
        let q = stack.stage(k).predict(&t.history(k), actions[k - 1]);
        for (o, v) in out.iter_mut().zip(q) {
            *o += (before - after) * v;
        }
    }
    out
}

/// Mean-centred outer-product average (1/m normalisation).
fn covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let m = rows.len();
    let p = rows[0].len();
    let mut mean = vec![0.0; p];
    for r in rows {
        for (a, v) in mean.iter_mut().zip(r) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut s = DMatrix::zeros(p, p);
    for r in rows {
        for i in 0..p {
            for j in 0..=i {
                s[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..p {
        for j in 0..=i {
            let v = s[(i, j)] / m as f64;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Which covariance drives the intervals and the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    /// Outer products of the centred IPW vectors.
    Ipw,
    /// Outer products of the centred per-subject AIPW contributions.
    #[default]
    Influence,
}

impl std::str::FromStr for CovarianceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ipw" => Ok(Self::Ipw),
            "influence" => Ok(Self::Influence),
            other => Err(Error::invalid(format!("unknown covariance `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: Vec<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub sigma_influence: DMatrix<f64>,
    pub covariance: CovarianceKind,
    pub m: usize,
    pub alpha: f64,
    /// Marginal Wald intervals [lower, upper] per outcome.
    pub intervals: Vec<[f64; 2]>,
    pub chi2_quantile: f64,
}

impl ValueEstimate {
    pub fn sigma(&self) -> &DMatrix<f64> {
        match self.covariance {
            CovarianceKind::Ipw => &self.sigma_hat,
            CovarianceKind::Influence => &self.sigma_influence,
        }
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        let s = self.sigma();
        (0..self.value.len()).map(|l| (s[(l, l)] / self.m as f64).sqrt()).collect()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

pub fn z_quantile(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

pub fn chi2_quantile(df: usize, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(chi.inverse_cdf(1.0 - alpha))
}

fn regime_actions(eval: &Dataset, regime: &Regime) -> Result<Vec<Vec<usize>>> {
    eval.trajectories.iter().map(|t| regime.actions_along(t)).collect()
}

/// Covariance of the IPW vectors of `regime` on `eval`.
pub fn sigma_hat(eval: &Dataset, regime: &Regime) -> Result<DMatrix<f64>> {
    if eval.len() < 2 {
        return Err(Error::invalid("covariance needs at least two evaluation subjects"));
    }
    let actions = regime_actions(eval, regime)?;
    let rows = eval
        .trajectories
        .iter()
        .zip(&actions)
        .map(|(t, a)| Ok(ipw_vector(t, &coarsening(t, a)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(covariance(&rows))
}

pub fn aipw_value(
    eval: &Dataset,
    regime: &Regime,
    stack: &QModelStack,
    alpha: f64,
    kind: CovarianceKind,
) -> Result<ValueEstimate> {
    check_alpha(alpha)?;
    let m = eval.len();
    if m < 2 {
        return Err(Error::invalid("value estimation needs at least two evaluation subjects"));
    }
    if stack.stages.len() != eval.stages() || stack.targets() != eval.p_y() {
        return Err(Error::invalid("Q-model stack does not match the evaluation data"));
    }
    let actions = regime_actions(eval, regime)?;
    let mut ipw = Vec::with_capacity(m);
    let mut aipw = Vec::with_capacity(m);
    for (t, a) in eval.trajectories.iter().zip(&actions) {
        let c = coarsening(t, a)?;
        ipw.push(ipw_vector(t, &c));
        aipw.push(aipw_vector(t, a, &c, stack));
    }
    let p = eval.p_y();
    let value: Vec<f64> = (0..p).map(|l| aipw.iter().map(|r| r[l]).sum::<f64>() / m as f64).collect();
    let mut est = ValueEstimate {
        value,
        sigma_hat: covariance(&ipw),
        sigma_influence: covariance(&aipw),
        covariance: kind,
        m,
        alpha,
        intervals: Vec::new(),
        chi2_quantile: chi2_quantile(p, alpha)?,
    };
    let z = z_quantile(alpha)?;
    est.intervals = est
        .value
        .iter()
        .zip(est.standard_errors())
        .map(|(v, se)| [v - z * se, v + z * se])
        .collect();
    Ok(est)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vec<f64>,
    pub precision: DMatrix<f64>,
    pub m: usize,
    pub radius: f64,
    pub pseudo_inverse: bool,
}

impl Ellipsoid {
    pub fn statistic(&self, nu: &[f64]) -> f64 {
        let d = DVector::from_iterator(self.center.len(), self.center.iter().zip(nu).map(|(a, b)| a - b));
        self.m as f64 * (d.transpose() * &self.precision * &d)[(0, 0)]
    }

    pub fn contains(&self, nu: &[f64]) -> bool {
        self.statistic(nu) <= self.radius
    }
}

pub fn confidence_ellipsoid(est: &ValueEstimate, alpha: f64) -> Result<Ellipsoid> {
    let sigma = est.sigma().clone();
    let p = sigma.nrows();
    let eig = SymmetricEigen::new(sigma.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let singular = !(min > 1e-12 * max.max(f64::MIN_POSITIVE));
    let precision = if singular {
        log::warn!("covariance estimate is singular; using the Moore-Penrose pseudo-inverse");
        let tol = 1e-12 * max.max(1.0);
        let mut inv = DMatrix::zeros(p, p);
        for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda > tol {
                let v = eig.eigenvectors.column(i);
                inv += (v * v.transpose()) / lambda;
            }
        }
        inv
    } else {
        sigma.try_inverse().ok_or_else(|| Error::numerical("covariance inversion failed"))?
    };
    Ok(Ellipsoid {
        center: est.value.clone(),
        precision,
        m: est.m,
        radius: chi2_quantile(p, alpha)?,
        pseudo_inverse: singular,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalSet {
    pub members: Vec<bool>,
    pub ratios: Vec<f64>,
    pub fraction: f64,
    pub shift: f64,
    pub reference_value: f64,
}

/// Grid directions whose shifted composite value, relative to that of
/// `lambda_hat`, is at most 1/alpha. Values come from `eval`, which must
/// be standardized; the shift raises the smallest per-subject composite over
/// the grid to at least 0.1.
pub fn universal_lambda_set(
    eval: &Dataset,
    regime: &Regime,
    basis: &FeatureBasis,
    engine: &Engine,
    lambda_hat: &[f64],
    grid: &[Vec<f64>],
    alpha: f64,
) -> Result<UniversalSet> {
    check_alpha(alpha)?;
    let values = CompositeValues::new(eval, regime, basis, engine)?;
    let mut min_composite = f64::INFINITY;
    for lambda in grid.iter().map(Vec::as_slice).chain(std::iter::once(lambda_hat)) {
        for t in &eval.trajectories {
            let c: f64 = lambda.iter().zip(&t.outcomes).map(|(a, b)| a * b).sum();
            min_composite = min_composite.min(c);
        }
    }
    let shift = (0.1 - min_composite).max(0.0);
    log::info!("universal set: composite values shifted by {shift:.4}");
    let reference_value = values.value(lambda_hat)? + shift;
    if !(reference_value > 0.0) {
        return Err(Error::numerical(format!(
            "reference composite value {reference_value} is not positive after shifting"
        )));
    }
    let mut ratios = Vec::with_capacity(grid.len());
    for lambda in grid {
        ratios.push((values.value(lambda)? + shift) / reference_value);
    }
    let members: Vec<bool> = ratios.iter().map(|r| *r <= 1.0 / alpha).collect();
    let fraction = members.iter().filter(|&&b| b).count() as f64 / grid.len().max(1) as f64;
    Ok(UniversalSet {
        members,
        ratios,
        fraction,
        shift,
        reference_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::toy_dataset;
    use crate::qreg::{backward_induce, Downstream};

    fn zero_stack(data: &Dataset) -> QModelStack {
        let mut stack =
            backward_induce(data, &FeatureBasis::default(), &Engine::Linear, Downstream::Weights(&[1.0, 0.0, 0.0]))
                .unwrap();
        for s in stack.stages.iter_mut() {
            if let crate::qreg::Regressor::Linear { coefficients } = &mut s.regressor {
                coefficients.fill(0.0);
            }
        }
        stack
    }

    #[test]
    fn zero_q_gives_plain_ipw() {
        let data = toy_dataset(40);
        let regime = Regime::fixed("f", &[1, 0]);
        let est = aipw_value(&data, &regime, &zero_stack(&data), 0.05, CovarianceKind::Ipw).unwrap();
        for l in 0..3 {
            let ipw: f64 = data
                .trajectories
                .iter()
                .filter(|t| t.actions == vec![1, 0])
                .map(|t| 4.0 * t.outcomes[l])
                .sum::<f64>()
                / 40.0;
            assert!((est.value[l] - ipw).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_hat_hand_values() {
        let mut data = toy_dataset(2).map_outcomes(vec!["y".into()], |_| vec![0.0]).unwrap();
        // IPW values {0, 2}: the first subject is off-regime, the second on it with weight 4.
        data.trajectories[1].outcomes = vec![0.5];
        let regime = Regime::fixed("f", &data.trajectories[1].actions.clone());
        let s = sigma_hat(&data, &regime).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-12);
        let same = toy_dataset(6).map_outcomes(vec!["y".into()], |_| vec![1.0]).unwrap();
        let all = Regime::fixed("f", &[0, 0]);
        let mut uniform = same.clone();
        for t in uniform.trajectories.iter_mut() {
            t.actions = vec![0, 0];
        }
        assert_eq!(sigma_hat(&uniform, &all).unwrap()[(0, 0)], 0.0);
        assert!(sigma_hat(&same.subset(&[0]), &all).is_err());
    }

    fn shift_stack(stack: &QModelStack, c: f64) -> QModelStack {
        let mut out = stack.clone();
        for s in out.stages.iter_mut() {
            if let crate::qreg::Regressor::Linear { coefficients } = &mut s.regressor {
                for l in 0..coefficients.ncols() {
                    coefficients[(0, l)] += c;
                }
            }
        }
        out
    }

    #[test]
    fn matching_regime_weights_telescope() {
        let mut data = toy_dataset(30);
        for (i, t) in data.trajectories.iter_mut().enumerate() {
            t.actions = vec![1, 1];
            if i % 3 == 0 {
                t.propensities = vec![1.0, 1.0];
            }
        }
        let regime = Regime::fixed("f", &[1, 1]);
        let stack = zero_stack(&data);
        let base = aipw_value(&data, &regime, &stack, 0.05, CovarianceKind::Ipw).unwrap();
        for l in 0..3 {
            let ipw: f64 = data
                .trajectories
                .iter()
                .map(|t| t.outcomes[l] / (t.propensities[0] * t.propensities[1]))
                .sum::<f64>()
                / 30.0;
            assert!((base.value[l] - ipw).abs() < 1e-12);
        }
        // With propensity one and full agreement every augmentation weight vanishes.
        let certain = data.subset(&(0..30).step_by(3).collect::<Vec<_>>());
        let a = aipw_value(&certain, &regime, &stack, 0.05, CovarianceKind::Ipw).unwrap();
        let b = aipw_value(&certain, &regime, &shift_stack(&stack, 7.0), 0.05, CovarianceKind::Ipw).unwrap();
        for l in 0..3 {
            assert!((a.value[l] - b.value[l]).abs() < 1e-9);
        }
    }

    #[test]
    fn shifting_outcomes_and_q_shifts_the_estimate() {
        let data = toy_dataset(50);
        let regime = Regime::fixed("f", &[0, 1]);
        let stack =
            backward_induce(&data, &FeatureBasis::default(), &Engine::Linear, Downstream::Regime(&regime)).unwrap();
        let base = aipw_value(&data, &regime, &stack, 0.05, CovarianceKind::Ipw).unwrap();
        let shifted = data
            .map_outcomes(data.outcome_names.clone(), |y| y.iter().map(|v| v + 3.0).collect())
            .unwrap();
        let moved = aipw_value(&shifted, &regime, &shift_stack(&stack, 3.0), 0.05, CovarianceKind::Ipw).unwrap();
        for l in 0..3 {
            assert!((moved.value[l] - base.value[l] - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn interval_arithmetic() {
        let est = ValueEstimate {
            value: vec![2.0],
            sigma_hat: DMatrix::from_element(1, 1, 1.0),
            sigma_influence: DMatrix::from_element(1, 1, 1.0),
            covariance: CovarianceKind::Ipw,
            m: 100,
            alpha: 0.05,
            intervals: vec![],
            chi2_quantile: chi2_quantile(1, 0.05).unwrap(),
        };
        let z = z_quantile(0.05).unwrap();
        assert!((z * est.standard_errors()[0] - 0.196).abs() < 1e-3);
        let e = confidence_ellipsoid(&est, 0.05).unwrap();
        assert!(e.contains(&[2.0]));
        assert!(e.contains(&[2.19]));
        assert!(!e.contains(&[2.2]));
        assert!(z_quantile(1.0).is_err());
        assert!(chi2_quantile(2, 0.0).is_err());
    }

    #[test]
    fn singular_covariance_uses_pseudo_inverse() {
        let est = ValueEstimate {
            value: vec![0.0, 0.0],
            sigma_hat: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            sigma_influence: DMatrix::zeros(2, 2),
            covariance: CovarianceKind::Ipw,
            m: 10,
            alpha: 0.05,
            intervals: vec![],
            chi2_quantile: 0.0,
        };
        let e = confidence_ellipsoid(&est, 0.05).unwrap();
        assert!(e.pseudo_inverse);
        assert!(e.contains(&[0.0, 0.0]));
        assert!(e.contains(&[1.0, -1.0]));
        assert!(!e.contains(&[3.0, 3.0]));
    }
}
