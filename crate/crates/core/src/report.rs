//! JSON and CSV documents exchanged between CLI commands.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, StageLayout};
use crate::error::{Error, Result};
use crate::inference::{Ellipsoid, UniversalSet, ValueEstimate};
use crate::irl::CompositeSpec;
use crate::qreg::QModelStack;
use crate::regime::Regime;

pub const FORMAT_VERSION: u32 = 1;

pub fn round4(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// A fitted regime plus what evaluation needs from the fit half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeDocument {
    pub format_version: u32,
    pub method: String,
    pub outcome_names: Vec<String>,
    pub layout: StageLayout,
    pub regime: Regime,
    /// Q-models of the regime fit on the fit half, used to augment the
    /// value estimate on held-out data.
    pub evaluation_stack: QModelStack,
    /// Composite weights under which the regime looks best, on standardized
    /// fit-half outcomes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<CompositeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_hat: Option<Vec<f64>>,
    pub fit_ids: Vec<String>,
    pub fit_id_hash: String,
    pub config: serde_json::Value,
    /// SHA-256 of the document serialized with this field empty.
    pub content_hash: String,
}

impl RegimeDocument {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        method: String,
        fit: &Dataset,
        regime: Regime,
        evaluation_stack: QModelStack,
        lambda: Option<CompositeSpec>,
        config: serde_json::Value,
    ) -> Result<Self> {
        let mut doc = Self {
            format_version: FORMAT_VERSION,
            method,
            outcome_names: fit.outcome_names.clone(),
            layout: fit.layout.clone(),
            regime,
            evaluation_stack,
            lambda_hat: lambda.as_ref().map(|l| round4(&l.lambda)),
            lambda,
            fit_ids: fit.ids().into_iter().map(str::to_string).collect(),
            fit_id_hash: fit.id_hash(),
            config,
            content_hash: String::new(),
        };
        doc.content_hash = doc.compute_hash()?;
        Ok(doc)
    }

    fn compute_hash(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.content_hash.clear();
        Ok(sha256_hex(&serde_json::to_vec(&copy)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let doc: Self = read_json(path)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::validation(format!(
                "regime document format {} is not supported (expected {FORMAT_VERSION})",
                doc.format_version
            )));
        }
        if doc.compute_hash()? != doc.content_hash {
            return Err(Error::validation("regime document content hash does not match its contents"));
        }
        Ok(doc)
    }

    /// Refuses evaluation data that shares subjects with the fit data.
    pub fn check_disjoint(&self, eval: &Dataset) -> Result<()> {
        let fit: BTreeSet<&str> = self.fit_ids.iter().map(String::as_str).collect();
        let shared = eval.ids().intersection(&fit).count();
        if shared > 0 {
            return Err(Error::validation(format!(
                "evaluation data shares {shared} subject(s) with the data the regime was fit on"
            )));
        }
        if eval.outcome_names != self.outcome_names || eval.layout != self.layout {
            return Err(Error::validation("evaluation data layout differs from the fit data"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidSummary {
    pub radius: f64,
    pub pseudo_inverse: bool,
    /// Ellipsoid statistic at the origin.
    pub statistic_at_zero: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalSummary {
    pub grid_size: usize,
    pub members: usize,
    pub fraction: f64,
    pub shift: f64,
    pub reference_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub method: String,
    pub regime_hash: String,
    pub eval_id_hash: String,
    pub outcome_names: Vec<String>,
    pub estimate: ValueEstimate,
    pub standard_errors: Vec<f64>,
    pub ellipsoid: EllipsoidSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_hat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub universal_set: Option<UniversalSummary>,
    pub config: serde_json::Value,
}

impl EvaluationReport {
    pub fn new(
        doc: &RegimeDocument,
        eval: &Dataset,
        estimate: ValueEstimate,
        ellipsoid: &Ellipsoid,
        universal: Option<&UniversalSet>,
        config: serde_json::Value,
    ) -> Self {
        let zero = vec![0.0; estimate.value.len()];
        Self {
            format_version: FORMAT_VERSION,
            method: doc.method.clone(),
            regime_hash: doc.content_hash.clone(),
            eval_id_hash: eval.id_hash(),
            outcome_names: eval.outcome_names.clone(),
            standard_errors: estimate.standard_errors(),
            ellipsoid: EllipsoidSummary {
                radius: ellipsoid.radius,
                pseudo_inverse: ellipsoid.pseudo_inverse,
                statistic_at_zero: ellipsoid.statistic(&zero),
            },
            estimate,
            lambda_hat: doc.lambda_hat.clone(),
            universal_set: universal.map(|u| UniversalSummary {
                grid_size: u.members.len(),
                members: u.members.iter().filter(|&&b| b).count(),
                fraction: u.fraction,
                shift: u.shift,
                reference_value: u.reference_value,
            }),
            config,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["outcome", "value", "se", "lower", "upper"])?;
        for (l, name) in self.outcome_names.iter().enumerate() {
            let iv = self.estimate.intervals[l];
            w.write_record([
                name.clone(),
                format!("{:.6}", self.estimate.value[l]),
                format!("{:.6}", self.standard_errors[l]),
                format!("{:.6}", iv[0]),
                format!("{:.6}", iv[1]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<String> {
    (0..m.nrows())
        .map(|i| {
            let cells: Vec<String> = (0..m.ncols()).map(|j| format!("{:>10.4}", m[(i, j)])).collect();
            cells.join(" ")
        })
        .collect()
}

/// Plain-text summary of a regime document and, optionally, its evaluation.
pub fn render_text(doc: &RegimeDocument, report: Option<&EvaluationReport>) -> String {
    let mut out = String::new();
    out.push_str(&format!("method        {}\n", doc.method));
    out.push_str(&format!("regime hash   {}\n", doc.content_hash));
    out.push_str(&format!("fit subjects  {} ({})\n", doc.fit_ids.len(), doc.fit_id_hash));
    out.push_str(&format!("outcomes      {}\n", doc.outcome_names.join(", ")));
    if let Some(l) = &doc.lambda_hat {
        let cells: Vec<String> = l.iter().map(|v| format!("{v:.4}")).collect();
        out.push_str(&format!("lambda_hat    ({})\n", cells.join(", ")));
    }
    if let Some(r) = report {
        out.push_str(&format!(
            "\nevaluation on {} subjects, alpha = {}, covariance = {:?}\n",
            r.estimate.m, r.estimate.alpha, r.estimate.covariance
        ));
        out.push_str(&format!("{:<12} {:>10} {:>10} {:>10} {:>10}\n", "outcome", "value", "se", "lower", "upper"));
        for (l, name) in r.outcome_names.iter().enumerate() {
            let iv = r.estimate.intervals[l];
            out.push_str(&format!(
                "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
                name, r.estimate.value[l], r.standard_errors[l], iv[0], iv[1]
            ));
        }
        out.push_str(&format!("\nchi-square radius {:.4}\n", r.ellipsoid.radius));
        out.push_str("covariance\n");
        for row in matrix_rows(r.estimate.sigma()) {
            out.push_str(&format!("  {row}\n"));
        }
        if let Some(u) = &r.universal_set {
            out.push_str(&format!(
                "universal lambda set: {} of {} grid directions ({:.1}%), shift {:.4}\n",
                u.members,
                u.grid_size,
                100.0 * u.fraction,
                u.shift
            ));
        }
    }
    out
}
