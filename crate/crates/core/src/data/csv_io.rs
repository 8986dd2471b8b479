use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, StageLayout, Trajectory};
use crate::error::{Error, Result};

/// Column layout of one stage: `x{k}_1..x{k}_p, a{k}, feas{k}_<code>.., prop{k}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageColumns {
    pub covariates: usize,
    pub feasible_codes: Vec<usize>,
    pub has_propensity: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub stages: Vec<StageColumns>,
    pub outcomes: Vec<String>,
}

impl CsvSchema {
    pub fn from_header(header: &[&str]) -> Result<Self> {
        let bad = |col: usize, msg: &str| Error::Parse {
            row: 0,
            column: header.get(col).unwrap_or(&"").to_string(),
            message: msg.to_string(),
        };
        if header.first().map(|h| h.trim()) != Some("id") {
            return Err(bad(0, "first column must be `id`"));
        }
        let mut pos = 1;
        let mut stages = Vec::new();
        loop {
            let k = stages.len() + 1;
            let x_prefix = format!("x{k}_");
            let a_name = format!("a{k}");
            let mut covariates = 0;
            while pos < header.len() && header[pos].trim().starts_with(&x_prefix) {
                let expect = format!("x{k}_{}", covariates + 1);
                if header[pos].trim() != expect {
                    return Err(bad(pos, &format!("expected `{expect}`")));
                }
                covariates += 1;
                pos += 1;
            }
            if pos >= header.len() || header[pos].trim() != a_name {
                if covariates > 0 {
                    return Err(bad(pos, &format!("expected `{a_name}`")));
                }
                break;
            }
            pos += 1;
            let feas_prefix = format!("feas{k}_");
            let mut feasible_codes = Vec::new();
            while pos < header.len() && header[pos].trim().starts_with(&feas_prefix) {
                let code = header[pos].trim()[feas_prefix.len()..]
                    .parse::<usize>()
                    .map_err(|_| bad(pos, "feasibility column must end in an action code"))?;
                if feasible_codes.last().is_some_and(|&last| code <= last) {
                    return Err(bad(pos, "feasibility codes must be increasing"));
                }
                feasible_codes.push(code);
                pos += 1;
            }
            let has_propensity = pos < header.len() && header[pos].trim() == format!("prop{k}");
            if has_propensity {
                pos += 1;
            }
            stages.push(StageColumns {
                covariates,
                feasible_codes,
                has_propensity,
            });
        }
        if stages.is_empty() {
            return Err(bad(pos, "no stage columns found"));
        }
        let outcomes: Vec<String> = header[pos..].iter().map(|s| s.trim().to_string()).collect();
        if outcomes.is_empty() {
            return Err(bad(pos, "no outcome columns found"));
        }
        for (i, name) in outcomes.iter().enumerate() {
            if !name.starts_with("y_") {
                return Err(bad(pos + i, "outcome columns must be named `y_*`"));
            }
        }
        Ok(Self { stages, outcomes })
    }

    pub fn for_dataset(data: &Dataset) -> Self {
        let stages = data
            .layout
            .covariate_dims
            .iter()
            .zip(&data.layout.n_actions)
            .map(|(&covariates, &n_actions)| StageColumns {
                covariates,
                feasible_codes: (0..n_actions).collect(),
                has_propensity: true,
            })
            .collect();
        Self {
            stages,
            outcomes: data.outcome_names.clone(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut cols = vec!["id".to_string()];
        for (i, s) in self.stages.iter().enumerate() {
            let k = i + 1;
            cols.extend((1..=s.covariates).map(|j| format!("x{k}_{j}")));
            cols.push(format!("a{k}"));
            cols.extend(s.feasible_codes.iter().map(|c| format!("feas{k}_{c}")));
            if s.has_propensity {
                cols.push(format!("prop{k}"));
            }
        }
        cols.extend(self.outcomes.iter().cloned());
        cols
    }
}

fn parse_f64(row: usize, column: &str, field: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|e| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{field}` is not a number ({e})"),
    })
}

fn parse_usize(row: usize, column: &str, field: &str) -> Result<usize> {
    field.trim().parse::<usize>().map_err(|e| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{field}` is not an action code ({e})"),
    })
}

/// Read a dataset. When `expected` is given the header must match it exactly.
pub fn load_csv(path: impl AsRef<Path>, expected: Option<&CsvSchema>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let schema = CsvSchema::from_header(&header_refs)?;
    if let Some(expected) = expected {
        if expected != &schema {
            return Err(Error::validation(format!(
                "header does not match the expected layout: expected {:?}",
                expected.header()
            )));
        }
    }

    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        records.push((row, rec));
    }

    // Alphabet size per stage: declared codes, widened by observed actions.
    let mut n_actions: Vec<usize> = schema
        .stages
        .iter()
        .map(|s| s.feasible_codes.last().map_or(2, |&c| c + 1))
        .collect();
    let mut action_cols = Vec::new();
    let mut pos = 1;
    for s in &schema.stages {
        pos += s.covariates;
        action_cols.push(pos);
        pos += 1 + s.feasible_codes.len() + usize::from(s.has_propensity);
    }
    for (row, rec) in &records {
        for (k, &col) in action_cols.iter().enumerate() {
            let a = parse_usize(*row, &header[col], &rec[col])?;
            if schema.stages[k].feasible_codes.is_empty() {
                n_actions[k] = n_actions[k].max(a + 1);
            }
        }
    }

    let mut trajectories = Vec::with_capacity(records.len());
    for (row, rec) in &records {
        let mut col = 1;
        let mut stage_covariates = Vec::new();
        let mut actions = Vec::new();
        let mut feasible_masks = Vec::new();
        let mut propensities = Vec::new();
        for (k, s) in schema.stages.iter().enumerate() {
            let mut xs = Vec::with_capacity(s.covariates);
            for _ in 0..s.covariates {
                xs.push(parse_f64(*row, &header[col], &rec[col])?);
                col += 1;
            }
            let action = parse_usize(*row, &header[col], &rec[col])?;
            col += 1;
            let mut mask = if s.feasible_codes.is_empty() {
                vec![true; n_actions[k]]
            } else {
                vec![false; n_actions[k]]
            };
            for &code in &s.feasible_codes {
                let flag = match rec[col].trim() {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(Error::Parse {
                            row: *row,
                            column: header[col].clone(),
                            message: format!("feasibility flag must be 0 or 1, found `{other}`"),
                        })
                    }
                };
                mask[code] = flag;
                col += 1;
            }
            if !mask.get(action).copied().unwrap_or(false) {
                return Err(Error::validation(format!(
                    "row {row}: action {action} in column `a{}` is not feasible",
                    k + 1
                )));
            }
            let prop = if s.has_propensity {
                let p = parse_f64(*row, &header[col], &rec[col])?;
                col += 1;
                p
            } else {
                1.0 / mask.iter().filter(|&&f| f).count() as f64
            };
            stage_covariates.push(xs);
            actions.push(action);
            feasible_masks.push(mask);
            propensities.push(prop);
        }
        let mut outcomes = Vec::with_capacity(schema.outcomes.len());
        for _ in 0..schema.outcomes.len() {
            let y = parse_f64(*row, &header[col], &rec[col])?;
            if !y.is_finite() {
                return Err(Error::validation(format!(
                    "row {row}: non-finite outcome in column `{}`",
                    header[col]
                )));
            }
            outcomes.push(y);
            col += 1;
        }
        let t = Trajectory {
            id: rec[0].trim().to_string(),
            stage_covariates,
            actions,
            feasible_masks,
            propensities,
            outcomes,
        };
        t.validate(schema.outcomes.len())
            .map_err(|e| Error::validation(format!("row {row}: {e}")))?;
        trajectories.push(t);
    }

    let layout = StageLayout {
        covariate_dims: schema.stages.iter().map(|s| s.covariates).collect(),
        n_actions,
    };
    Dataset::new(trajectories, schema.outcomes.clone(), layout)
}

/// Write a dataset with every column present; numbers use the shortest
/// representation that round-trips exactly.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let schema = CsvSchema::for_dataset(data);
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(schema.header())?;
    for t in &data.trajectories {
        let mut rec = vec![t.id.clone()];
        for k in 0..t.stages() {
            rec.extend(t.stage_covariates[k].iter().map(|x| x.to_string()));
            rec.push(t.actions[k].to_string());
            rec.extend(t.feasible_masks[k].iter().map(|&f| if f { "1" } else { "0" }.to_string()));
            rec.push(t.propensities[k].to_string());
        }
        rec.extend(t.outcomes.iter().map(|y| y.to_string()));
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}
