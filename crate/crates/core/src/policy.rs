//! Prioritized selection over the candidate class, regrets, and the
//! utility/preference pair used to compare regimes at a first-stage history.

use std::io::Write;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, History};
use crate::error::{Error, Result};
use crate::qreg::{fit_candidate_stacks, CandidateStacks, Engine, FeatureBasis, Regressor};
use crate::regime::{CandidateClass, Regime, StageRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dissimilarity {
    AbsoluteDifference,
    LogRatio,
}

impl std::str::FromStr for Dissimilarity {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "absolute" | "absolute_difference" => Ok(Self::AbsoluteDifference),
            "log_ratio" => Ok(Self::LogRatio),
            other => Err(format!("unknown dissimilarity `{other}`")),
        }
    }
}

impl Dissimilarity {
    pub fn apply(self, u: f64, v: f64) -> Result<f64> {
        match self {
            Self::AbsoluteDifference => Ok((u - v).abs()),
            Self::LogRatio => {
                if !(u > 0.0 && v > 0.0) {
                    return Err(Error::invalid(format!(
                        "log-ratio dissimilarity needs positive values, got ({u}, {v})"
                    )));
                }
                Ok((u / v).ln().abs())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissimilaritySpec {
    pub kinds: Vec<Dissimilarity>,
    #[serde(with = "crate::serde_ext::vec")]
    pub thresholds: Vec<f64>,
}

impl DissimilaritySpec {
    pub fn new(kinds: Vec<Dissimilarity>, thresholds: Vec<f64>) -> Result<Self> {
        if kinds.len() != thresholds.len() || kinds.is_empty() {
            return Err(Error::invalid("dissimilarity kinds and thresholds must have equal, nonzero length"));
        }
        if thresholds.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::invalid(format!("thresholds must be >= 0, got {thresholds:?}")));
        }
        Ok(Self { kinds, thresholds })
    }

    pub fn absolute(thresholds: Vec<f64>) -> Result<Self> {
        Self::new(vec![Dissimilarity::AbsoluteDifference; thresholds.len()], thresholds)
    }

    pub fn outcomes(&self) -> usize {
        self.kinds.len()
    }
}

pub fn dissimilarity(spec: &DissimilaritySpec, outcome: usize, u: f64, v: f64) -> Result<f64> {
    spec.kinds[outcome].apply(u, v)
}

fn max_of(values: &[f64]) -> Result<f64> {
    values
        .iter()
        .cloned()
        .reduce(f64::max)
        .ok_or_else(|| Error::invalid("no candidates"))
}

/// Candidates whose value is within the threshold of the best one.
pub fn equivalence_class(values: &[f64], spec: &DissimilaritySpec, outcome: usize) -> Result<Vec<usize>> {
    let best = max_of(values)?;
    let delta = spec.thresholds[outcome];
    let mut out = Vec::new();
    for (c, &v) in values.iter().enumerate() {
        if dissimilarity(spec, outcome, best, v)? <= delta {
            out.push(c);
        }
    }
    Ok(out)
}

pub fn regret(values: &[f64], candidate: usize, spec: &DissimilaritySpec, outcome: usize) -> Result<f64> {
    dissimilarity(spec, outcome, max_of(values)?, values[candidate])
}

/// Outcome of the sequential selection at one first-stage history.
/// Index sets refer to positions in `candidates`; `chosen` is a candidate id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrioritizedSelection {
    pub candidates: Vec<usize>,
    /// values[position][outcome]
    pub values: Vec<Vec<f64>>,
    pub classes: Vec<Vec<usize>>,
    /// Number of leading outcomes whose classes intersect (1-based).
    pub depth: usize,
    pub admissible: Vec<usize>,
    /// Outcome (1-based) that breaks ties within the admissible set.
    pub tau: usize,
    pub chosen_position: usize,
    pub chosen: usize,
}

/// Selection on a value table `values[position][outcome]`.
pub fn select_from_values(
    candidates: Vec<usize>,
    values: Vec<Vec<f64>>,
    spec: &DissimilaritySpec,
) -> Result<PrioritizedSelection> {
    if values.is_empty() {
        return Err(Error::invalid("empty candidate class"));
    }
    let p = spec.outcomes();
    let mut classes = Vec::with_capacity(p);
    for l in 0..p {
        let column: Vec<f64> = values.iter().map(|v| v[l]).collect();
        classes.push(equivalence_class(&column, spec, l)?);
    }
    let mut admissible = classes[0].clone();
    let mut depth = 1;
    for class in &classes[1..] {
        let next: Vec<usize> = admissible.iter().copied().filter(|c| class.binary_search(c).is_ok()).collect();
        if next.is_empty() {
            break;
        }
        admissible = next;
        depth += 1;
    }
    let tau = if depth == p { 1 } else { depth + 1 };
    let mut chosen_position = admissible[0];
    for &c in &admissible[1..] {
        if values[c][tau - 1] > values[chosen_position][tau - 1] {
            chosen_position = c;
        }
    }
    Ok(PrioritizedSelection {
        chosen: candidates[chosen_position],
        candidates,
        values,
        classes,
        depth,
        admissible,
        tau,
        chosen_position,
    })
}

/// Position chosen by the same rule as [`select_from_values`], on a
/// row-major table `flat[position * p + outcome]`, without the record.
pub fn select_position(flat: &[f64], spec: &DissimilaritySpec) -> Result<usize> {
    let p = spec.outcomes();
    let n = flat.len() / p;
    if n == 0 {
        return Err(Error::invalid("empty candidate class"));
    }
    let mut best = vec![f64::NEG_INFINITY; p];
    for row in flat.chunks_exact(p) {
        for (b, v) in best.iter_mut().zip(row) {
            *b = b.max(*v);
        }
    }
    let inside = |c: usize, l: usize| -> Result<bool> {
        Ok(dissimilarity(spec, l, best[l], flat[c * p + l])? <= spec.thresholds[l])
    };
    let mut admissible = Vec::with_capacity(n);
    for c in 0..n {
        if inside(c, 0)? {
            admissible.push(c);
        }
    }
    let mut depth = 1;
    let mut next = Vec::with_capacity(admissible.len());
    for l in 1..p {
        next.clear();
        for &c in &admissible {
            if inside(c, l)? {
                next.push(c);
            }
        }
        if next.is_empty() {
            break;
        }
        std::mem::swap(&mut admissible, &mut next);
        depth += 1;
    }
    let tau = if depth == p { 0 } else { depth };
    let mut chosen = admissible[0];
    for &c in &admissible[1..] {
        if flat[c * p + tau] > flat[chosen * p + tau] {
            chosen = c;
        }
    }
    Ok(chosen)
}

/// Strictly decreasing weights ω₁ > … > ω_p > 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityWeights {
    pub omega: Vec<f64>,
}

impl UtilityWeights {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        let descending = omega.windows(2).all(|w| w[0] > w[1]);
        if omega.is_empty() || !descending || !(*omega.last().unwrap() > 1.0) {
            return Err(Error::invalid(format!("utility weights must descend strictly above 1: {omega:?}")));
        }
        Ok(Self { omega })
    }

    /// ω_ℓ for ℓ = 0..=p+1 with ω₀ = ω_{p+1} = 1.
    fn at(&self, l: usize) -> f64 {
        if l == 0 || l > self.omega.len() {
            1.0
        } else {
            self.omega[l - 1]
        }
    }
}

pub fn indicators(regrets: &[f64], spec: &DissimilaritySpec) -> Vec<bool> {
    regrets.iter().zip(&spec.thresholds).map(|(r, d)| r <= d).collect()
}

pub fn utility(
    regrets: &[f64],
    sup_regrets: &[f64],
    spec: &DissimilaritySpec,
    weights: &UtilityWeights,
) -> Result<f64> {
    let p = spec.outcomes();
    if regrets.len() != p || sup_regrets.len() != p || weights.omega.len() != p {
        return Err(Error::invalid("utility inputs have mismatched lengths"));
    }
    for (r, s) in regrets.iter().zip(sup_regrets) {
        if !(*s > 0.0 && s.is_finite()) || !(*r >= 0.0 && r <= s) {
            return Err(Error::invalid(format!("regret {r} incompatible with normaliser {s}")));
        }
    }
    let b = indicators(regrets, spec);
    let mut total = 0.0;
    let mut prefix = 1.0;
    for l in 1..=p + 1 {
        let (bl, rl, sl) = if l <= p {
            (if b[l - 1] { 1.0 } else { 0.0 }, regrets[l - 1], sup_regrets[l - 1])
        } else {
            (0.0, regrets[p - 1], sup_regrets[p - 1])
        };
        total += (weights.at(l) * bl - weights.at(l - 1) * rl / sl * (1.0 - bl)) * prefix;
        prefix *= bl;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    First,
    Second,
    Equivalent,
}

/// Quasi-lexicographic comparison of two regret profiles: the first outcome
/// at which the two are not both within threshold decides, either by which
/// one is within threshold or, when neither is, by the smaller regret.
pub fn prefers(regrets_a: &[f64], regrets_b: &[f64], spec: &DissimilaritySpec) -> Preference {
    let ba = indicators(regrets_a, spec);
    let bb = indicators(regrets_b, spec);
    for k in 0..spec.outcomes() {
        match (ba[k], bb[k]) {
            (true, true) => continue,
            (true, false) => return Preference::First,
            (false, true) => return Preference::Second,
            (false, false) => {
                return if regrets_a[k] < regrets_b[k] {
                    Preference::First
                } else if regrets_b[k] < regrets_a[k] {
                    Preference::Second
                } else {
                    Preference::Equivalent
                };
            }
        }
    }
    Preference::Equivalent
}

/// Largest regret per outcome over a collection of value tables, floored.
pub fn sup_regrets<'a, I>(tables: I, spec: &DissimilaritySpec) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a Vec<Vec<f64>>>,
{
    let p = spec.outcomes();
    let mut sup = vec![1e-6_f64; p];
    for table in tables {
        for l in 0..p {
            let column: Vec<f64> = table.iter().map(|v| v[l]).collect();
            for c in 0..column.len() {
                sup[l] = sup[l].max(regret(&column, c, spec, l)?);
            }
        }
    }
    Ok(sup)
}

/// The estimated prioritized regime: candidate stacks fit on one dataset
/// plus the thresholds used to select among them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrioritizedPolicy {
    pub class: CandidateClass,
    pub stacks: CandidateStacks,
    pub spec: DissimilaritySpec,
    #[serde(skip)]
    bank: OnceLock<Bank>,
}

/// Stage-1 pool flattened for fast evaluation. Weight vectors sharing a
/// stage-1 model produce identical candidate values, so selection runs over
/// one representative (the lowest weight index) per model.
#[derive(Debug, Clone, PartialEq)]
struct Bank {
    /// Coefficient columns laid out representative-major, then outcome,
    /// when every stage-1 model is linear.
    coefficients: Option<Vec<f64>>,
    /// (lowest weight index, pool model), ascending in weight index
    representatives: Vec<(usize, usize)>,
}

impl PrioritizedPolicy {
    pub fn fit(
        data: &Dataset,
        basis: &FeatureBasis,
        engine: &Engine,
        class: CandidateClass,
        spec: DissimilaritySpec,
    ) -> Result<Self> {
        if spec.outcomes() != data.p_y() {
            return Err(Error::invalid(format!(
                "{} thresholds given for {} outcomes",
                spec.outcomes(),
                data.p_y()
            )));
        }
        if class.stage1_actions != data.layout.n_actions[0] {
            return Err(Error::invalid("candidate class and data disagree on first-stage actions"));
        }
        let stacks = fit_candidate_stacks(data, basis, engine, &class.stage2_weights)?;
        Ok(Self::from_parts(class, stacks, spec))
    }

    pub fn from_parts(class: CandidateClass, stacks: CandidateStacks, spec: DissimilaritySpec) -> Self {
        Self {
            class,
            stacks,
            spec,
            bank: OnceLock::new(),
        }
    }

    fn bank(&self) -> &Bank {
        self.bank.get_or_init(|| {
            let pool = &self.stacks.pools[0];
            let mut first_use = vec![usize::MAX; pool.len()];
            for (w, chain) in self.stacks.chains.iter().enumerate() {
                first_use[chain[0]] = first_use[chain[0]].min(w);
            }
            let mut representatives: Vec<(usize, usize)> =
                first_use.iter().enumerate().map(|(m, &w)| (w, m)).filter(|(w, _)| *w != usize::MAX).collect();
            representatives.sort_unstable();
            let linear: Option<Vec<&DMatrix<f64>>> = representatives
                .iter()
                .map(|&(_, m)| match &pool[m].regressor {
                    Regressor::Linear { coefficients } => Some(coefficients),
                    Regressor::Trees { .. } => None,
                })
                .collect();
            let coefficients = linear.map(|mats| {
                let mut out = Vec::with_capacity(mats.len() * mats[0].len());
                for c in mats {
                    for l in 0..c.ncols() {
                        out.extend(c.column(l).iter());
                    }
                }
                out
            });
            Bank {
                coefficients,
                representatives,
            }
        })
    }

    /// The chosen candidate id at `h1`, computed over distinct stage-1 models.
    pub fn choose(&self, h1: &History<'_>) -> Result<usize> {
        let bank = self.bank();
        let pool = &self.stacks.pools[0];
        let p = self.spec.outcomes();
        let actions: Vec<usize> = h1.feasible_actions().collect();
        let r = bank.representatives.len();
        let mut flat = Vec::with_capacity(actions.len() * r * p);
        let mut phi = vec![0.0; pool[0].features.dim()];
        for &a in &actions {
            match &bank.coefficients {
                Some(coef) => {
                    pool[0].features.write(h1, a, &mut phi);
                    for block in coef.chunks_exact(phi.len()) {
                        flat.push(block.iter().zip(&phi).map(|(c, x)| c * x).sum::<f64>());
                    }
                }
                None => {
                    for &(_, m) in &bank.representatives {
                        flat.extend(pool[m].predict(h1, a));
                    }
                }
            }
        }
        let pos = select_position(&flat, &self.spec)?;
        Ok(self.class.index(actions[pos / r], bank.representatives[pos % r].0))
    }

    /// Estimated value vectors of every feasible candidate at `h1`.
    pub fn candidate_values(&self, h1: &History<'_>) -> (Vec<usize>, Vec<Vec<f64>>) {
        let pool = &self.stacks.pools[0];
        let feasible: Vec<usize> = h1.feasible_actions().collect();
        let preds: Vec<Vec<Vec<f64>>> = pool
            .iter()
            .map(|m| {
                (0..self.class.stage1_actions)
                    .map(|a| if h1.is_feasible(a) { m.predict(h1, a) } else { Vec::new() })
                    .collect()
            })
            .collect();
        let n_w = self.class.stage2_weights.len();
        let mut ids = Vec::with_capacity(feasible.len() * n_w);
        let mut values = Vec::with_capacity(feasible.len() * n_w);
        for &a in &feasible {
            for w in 0..n_w {
                ids.push(self.class.index(a, w));
                values.push(preds[self.stacks.chains[w][0]][a].clone());
            }
        }
        (ids, values)
    }

    /// Full selection record over every feasible candidate.
    pub fn select(&self, h1: &History<'_>) -> Result<PrioritizedSelection> {
        let (ids, values) = self.candidate_values(h1);
        select_from_values(ids, values, &self.spec)
    }

    pub fn into_regime(self, label: impl Into<String>) -> Regime {
        let k = self.stacks.pools.len();
        Regime {
            label: label.into(),
            stages: vec![StageRule::Prioritized; k],
            policy: Some(std::sync::Arc::new(self)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub class_sizes: Vec<usize>,
    pub depth: usize,
    pub tau: usize,
    pub admissible_size: usize,
    pub action: usize,
    pub weight_index: usize,
    pub weights: Vec<f64>,
}

pub fn selection_trace(policy: &PrioritizedPolicy, data: &Dataset) -> Result<Vec<TraceRecord>> {
    data.trajectories
        .iter()
        .map(|t| {
            let sel = policy.select(&t.history(1))?;
            let (action, weight_index) = policy.class.decode(sel.chosen);
            Ok(TraceRecord {
                id: t.id.clone(),
                class_sizes: sel.classes.iter().map(Vec::len).collect(),
                depth: sel.depth,
                tau: sel.tau,
                admissible_size: sel.admissible.len(),
                action,
                weight_index,
                weights: policy.class.stage2_weights[weight_index].as_slice().to_vec(),
            })
        })
        .collect()
}

pub fn write_trace<W: Write>(records: &[TraceRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let p = records.first().map_or(0, |r| r.class_sizes.len());
    let mut header = vec!["id".to_string()];
    header.extend((1..=p).map(|l| format!("xi_{l}_size")));
    header.extend(["depth", "tau", "admissible_size", "action", "weight_index"].map(String::from));
    header.extend((1..=p).map(|l| format!("lambda_{l}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.id.clone()];
        row.extend(r.class_sizes.iter().map(|s| s.to_string()));
        row.extend([r.depth, r.tau, r.admissible_size, r.action, r.weight_index].map(|v| v.to_string()));
        row.extend(r.weights.iter().map(|v| format!("{v:.6}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
