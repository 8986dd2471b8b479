//! Monte Carlo study: simulate, split, fit each method on one half, score its
//! true conditional value on a large test set, and check whether the
//! interval from the other half covers it.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::split_even;
use crate::error::{Error, Result};
use crate::inference::{aipw_value, CovarianceKind};
use crate::methods::{fit_methods, FitSettings, Method};
use crate::policy::DissimilaritySpec;
use crate::qreg::{backward_induce, Downstream, Engine, FeatureBasis};
use crate::rng;

use super::{oracle_conditional_value, simulate, GenerativeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n: usize,
    pub reps: usize,
    pub test_size: usize,
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub seed: u64,
    pub n_lambda: usize,
    #[serde(default)]
    pub basis: FeatureBasis,
    #[serde(default)]
    pub engine: Engine,
    #[serde(default)]
    pub covariance: CovarianceKind,
}

impl McConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            n: 1000,
            reps: 100,
            test_size: 10_000,
            methods: Method::TABLE.to_vec(),
            alpha: 0.05,
            seed,
            n_lambda: 1000,
            basis: FeatureBasis::default(),
            engine: Engine::Linear,
            covariance: CovarianceKind::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 || self.reps == 0 || self.test_size == 0 || self.n_lambda == 0 {
            return Err(Error::invalid("n must be at least 4 and reps, test size and N_lambda positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods to run"));
        }
        Ok(())
    }
}

/// One method in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub method: String,
    /// Test-set conditional value of the fitted regime.
    pub oracle: Vec<f64>,
    pub estimate: Vec<f64>,
    pub intervals: Vec<[f64; 2]>,
    pub covered: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRun {
    pub design: String,
    pub config: McConfig,
    /// Sorted by replication, then by method order in the config.
    pub records: Vec<RepRecord>,
    pub failed: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub design: String,
    pub method: String,
    pub outcome: usize,
    pub mean_value: f64,
    pub mc_se: f64,
    pub coverage: f64,
    pub reps: usize,
    pub n: usize,
    pub seed: u64,
}

fn run_rep(model: &GenerativeModel, config: &McConfig, rep: usize) -> Result<Vec<RepRecord>> {
    let seed = rng::derive_seed(config.seed, &[rep as u64]);
    let data = simulate(model, config.n, seed)?;
    let split = split_even(&data, seed)?;
    let settings = FitSettings {
        basis: config.basis.clone(),
        engine: config.engine.clone(),
        n_lambda: config.n_lambda,
        simplex_seed: seed,
        spec: DissimilaritySpec::absolute(model.deltas.clone())?,
    };
    let fitted = fit_methods(&config.methods, &split.first, &settings)?;
    let oracle_seed = rng::derive_seed(seed, &[rng::label::ORACLE]);
    let mut out = Vec::with_capacity(fitted.len());
    for f in fitted {
        let oracle = oracle_conditional_value(model, Some(&f.regime), config.test_size, oracle_seed)?;
        let stack = backward_induce(&split.first, &config.basis, &config.engine, Downstream::Regime(&f.regime))?;
        let est = aipw_value(&split.second, &f.regime, &stack, config.alpha, config.covariance)?;
        let covered = est
            .intervals
            .iter()
            .zip(&oracle.mean)
            .map(|(iv, v)| iv[0] <= *v && *v <= iv[1])
            .collect();
        out.push(RepRecord {
            rep,
            method: f.method.name(),
            oracle: oracle.mean,
            estimate: est.value,
            intervals: est.intervals,
            covered,
            lambda: f.lambda.map(|l| l.lambda),
        });
    }
    Ok(out)
}

/// Runs every replication; failed replications are logged and excluded, and
/// more than 5% failures abort the study.
pub fn run_mc(model: &GenerativeModel, config: &McConfig) -> Result<McRun> {
    config.validate()?;
    let results: Vec<(usize, Result<Vec<RepRecord>>)> = (0..config.reps)
        .into_par_iter()
        .map(|rep| (rep, run_rep(model, config, rep)))
        .collect();
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for (rep, r) in results {
        match r {
            Ok(mut recs) => records.append(&mut recs),
            Err(e) => {
                log::warn!("replication {rep} failed: {e}");
                failed.push((rep, e.to_string()));
            }
        }
    }
    if failed.len() * 20 > config.reps {
        return Err(Error::numerical(format!(
            "{} of {} replications failed; first failure: {}",
            failed.len(),
            config.reps,
            failed[0].1
        )));
    }
    if !failed.is_empty() {
        log::warn!("{} replication(s) excluded", failed.len());
    }
    Ok(McRun {
        design: model.design.name().to_string(),
        config: config.clone(),
        records,
        failed,
    })
}

impl McRun {
    /// Per-method, per-outcome summaries over replications `< max_rep`.
    pub fn summarize_first(&self, max_rep: usize) -> Vec<McRow> {
        let mut rows = Vec::new();
        for method in &self.config.methods {
            let name = method.name();
            let recs: Vec<&RepRecord> = self
                .records
                .iter()
                .filter(|r| r.method == name && r.rep < max_rep)
                .collect();
            if recs.is_empty() {
                continue;
            }
            let r = recs.len() as f64;
            for l in 0..recs[0].oracle.len() {
                let mean = recs.iter().map(|x| x.oracle[l]).sum::<f64>() / r;
                let var = if recs.len() > 1 {
                    recs.iter().map(|x| (x.oracle[l] - mean).powi(2)).sum::<f64>() / (r - 1.0)
                } else {
                    0.0
                };
                let coverage = recs.iter().filter(|x| x.covered[l]).count() as f64 / r;
                rows.push(McRow {
                    design: self.design.clone(),
                    method: name.clone(),
                    outcome: l + 1,
                    mean_value: mean,
                    mc_se: (var / r).sqrt(),
                    coverage,
                    reps: recs.len(),
                    n: self.config.n,
                    seed: self.config.seed,
                });
            }
        }
        rows
    }

    pub fn summarize(&self) -> Vec<McRow> {
        self.summarize_first(usize::MAX)
    }
}

pub fn write_rows<W: Write>(rows: &[McRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["design", "method", "outcome", "mean_value", "mc_se", "coverage", "reps", "n", "seed"])?;
    for r in rows {
        w.write_record([
            r.design.clone(),
            r.method.clone(),
            format!("y_{}", r.outcome),
            format!("{:.6}", r.mean_value),
            format!("{:.6}", r.mc_se),
            format!("{:.4}", r.coverage),
            r.reps.to_string(),
            r.n.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Design;

    fn small(seed: u64) -> McConfig {
        McConfig {
            n: 200,
            reps: 2,
            test_size: 500,
            n_lambda: 20,
            ..McConfig::new(seed)
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let model = GenerativeModel::new(Design::S1);
        let a = run_mc(&model, &small(4)).unwrap();
        let b = run_mc(&model, &small(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 2 * 4);
        let mut x = Vec::new();
        write_rows(&a.summarize(), &mut x).unwrap();
        let mut y = Vec::new();
        write_rows(&b.summarize(), &mut y).unwrap();
        assert_eq!(x, y);
        assert_eq!(a.summarize().len(), 4 * 3);
    }

    #[test]
    fn first_replications_match_a_shorter_run() {
        let model = GenerativeModel::new(Design::S2);
        let long = run_mc(&model, &McConfig { reps: 3, ..small(9) }).unwrap();
        let short = run_mc(&model, &McConfig { reps: 2, ..small(9) }).unwrap();
        assert_eq!(long.summarize_first(2), short.summarize());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let model = GenerativeModel::new(Design::S1);
        assert!(run_mc(&model, &McConfig { reps: 0, ..small(1) }).is_err());
        assert!(run_mc(&model, &McConfig { alpha: 1.0, ..small(1) }).is_err());
    }
}
