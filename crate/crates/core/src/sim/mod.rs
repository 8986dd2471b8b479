//! Two-stage generative models S1-S4 with binary actions coded
//! 0 (A = -1) and 1 (A = +1), plus large-sample value oracles.

pub mod mc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, History, StageLayout, Trajectory};
use crate::error::{Error, Result};
use crate::regime::{Regime, RegimeState};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    S1,
    S2,
    S3,
    S4,
}

impl Design {
    pub const ALL: [Design; 4] = [Design::S1, Design::S2, Design::S3, Design::S4];

    pub fn name(self) -> &'static str {
        match self {
            Design::S1 => "s1",
            Design::S2 => "s2",
            Design::S3 => "s3",
            Design::S4 => "s4",
        }
    }

    fn first_collection(self) -> bool {
        matches!(self, Design::S1 | Design::S2)
    }
}

impl std::str::FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Design::S1),
            "s2" => Ok(Design::S2),
            "s3" => Ok(Design::S3),
            "s4" => Ok(Design::S4),
            other => Err(Error::invalid(format!("unknown design `{other}` (expected s1..s4)"))),
        }
    }
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Coefficients (γ1..γ7) of the three latent outcomes of the first collection.
pub const GAMMA: [[f64; 7]; 3] = [
    [0.0, 0.5, -0.7, 0.75, 0.3, 0.5, 0.5],
    [0.0, 0.5, 0.7, 0.75, 0.3, 0.5, 0.5],
    [0.0, 0.5, 0.0, 0.75, 0.1, 0.5, 0.0],
];

/// How the garbled coefficients of the S1/S2 outcome displays are read.
/// `Normalized` takes "3Z₁/3" as Z₁/3, "4Z₁/4" as 4Z₁/5 and "4Z₃/4" as
/// 4Z₃/5, so each of those rows sums to one; `Literal` cancels the factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeReading {
    #[default]
    Normalized,
    Literal,
}

impl std::str::FromStr for OutcomeReading {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "literal" => Ok(Self::Literal),
            other => Err(Error::invalid(format!("unknown outcome reading `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeModel {
    pub design: Design,
    /// Rows map onto Z1..Z3; unused by S3/S4.
    pub gamma: Vec<[f64; 7]>,
    /// Y = mixing * Z, where Z is (Z1, Z2, Z3) or (Z4, Z5, Z6).
    pub mixing: Vec<[f64; 3]>,
    pub deltas: Vec<f64>,
}

impl GenerativeModel {
    pub fn new(design: Design) -> Self {
        Self::with_reading(design, OutcomeReading::default())
    }

    pub fn with_reading(design: Design, reading: OutcomeReading) -> Self {
        let third = 1.0 / 3.0;
        let literal = reading == OutcomeReading::Literal;
        let (lead, tail) = if literal { (1.0, 1.0) } else { (third, 0.8) };
        let (mixing, delta) = match design {
            Design::S1 => (vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [lead, third, third]], 0.1),
            Design::S2 => (
                vec![[tail, 0.1, 0.1], [0.0, 0.2, tail], [0.5, 0.5, third]],
                0.25,
            ),
            Design::S3 => (vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]], 0.5),
            Design::S4 => (vec![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]], 0.5),
        };
        Self {
            design,
            gamma: GAMMA.to_vec(),
            mixing,
            deltas: vec![delta; 3],
        }
    }

    pub fn covariate_dim(&self) -> usize {
        if self.design.first_collection() {
            3
        } else {
            4
        }
    }

    pub fn layout(&self) -> StageLayout {
        let d = self.covariate_dim();
        StageLayout {
            covariate_dims: vec![d, d],
            n_actions: vec![2, 2],
        }
    }

    pub fn outcome_names(&self) -> Vec<String> {
        (1..=self.mixing.len()).map(|l| format!("y_{l}")).collect()
    }

    /// X² given X¹, A¹ ∈ {-1, +1} and the stage-2 noise.
    pub fn second_stage(&self, x1: &[f64], a1: f64, upsilon: &[f64]) -> Vec<f64> {
        if self.design.first_collection() {
            x1.iter().zip(upsilon).map(|(x, u)| 0.5 * x * a1 + u).collect()
        } else {
            let ind = |v: f64| if v > 0.0 { 1.0 } else { 0.0 };
            vec![
                ind(1.25 * x1[0] * a1 + upsilon[0]),
                ind(-1.75 * x1[0] * a1 + upsilon[1]),
                1.0 + 1.5 * x1[2] * a1 + upsilon[2],
                0.5 * x1[2] * a1 + upsilon[3],
            ]
        }
    }

    /// Latent outcomes (Z1, Z2, Z3) or (Z4, Z5, Z6).
    pub fn latent(&self, x1: &[f64], a1: f64, x2: &[f64], a2: f64, eps: &[f64]) -> [f64; 3] {
        let mut z = [0.0; 3];
        if self.design.first_collection() {
            for (j, g) in self.gamma.iter().enumerate() {
                z[j] = g[0]
                    + g[1] * x1[j]
                    + g[2] * a1
                    + g[3] * x1[j] * a1
                    + g[4] * a2
                    + g[5] * x2[j] * a2
                    + g[6] * a1 * a2
                    + eps[j];
            }
        } else {
            let core = 0.5 + x2[2] + 0.5 * a1 + 0.5 * x2[0] - 0.5 * x2[1];
            z[0] = 1.5 * a2 * core + eps[0];
            z[1] = -1.5 * a2 * core + eps[1];
            z[2] = 2.0 * a2 * (0.75 - x2[2] + 0.75 * a1 - 0.75 * x2[0] - 0.25 * x2[1]) + eps[2];
        }
        z
    }

    pub fn outcomes(&self, z: &[f64; 3]) -> Vec<f64> {
        self.mixing
            .iter()
            .map(|row| row.iter().zip(z).map(|(m, v)| m * v).sum())
            .collect()
    }
}

pub fn sign(code: usize) -> f64 {
    if code == 1 {
        1.0
    } else {
        -1.0
    }
}

fn normals(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// One subject. Random numbers are consumed in a fixed order (X¹, stage-1
/// coin, υ, stage-2 coin, ε) whether or not a regime overrides the coins, so
/// different regimes see common random numbers.
pub fn draw_trajectory(model: &GenerativeModel, regime: Option<&Regime>, rng: &mut Stream, id: String) -> Result<Trajectory> {
    let d = model.covariate_dim();
    let mask = vec![true, true];
    let x1 = normals(rng, d);
    let coin1 = rng.random_range(0..2usize);
    let mut state = RegimeState::default();
    let mut covs = vec![x1];
    let a1 = match regime {
        Some(r) => r.act(&History::new(&covs, &[], &mask), &mut state)?,
        None => coin1,
    };
    let upsilon = normals(rng, d);
    let x2 = model.second_stage(&covs[0], sign(a1), &upsilon);
    covs.push(x2);
    let coin2 = rng.random_range(0..2usize);
    let a2 = match regime {
        Some(r) => r.act(&History::new(&covs, &[a1], &mask), &mut state)?,
        None => coin2,
    };
    let eps = normals(rng, 3);
    let z = model.latent(&covs[0], sign(a1), &covs[1], sign(a2), &eps);
    let p = if regime.is_some() { 1.0 } else { 0.5 };
    Ok(Trajectory {
        id,
        stage_covariates: covs,
        actions: vec![a1, a2],
        feasible_masks: vec![mask.clone(), mask],
        propensities: vec![p, p],
        outcomes: model.outcomes(&z),
    })
}

/// `n` subjects under uniform randomisation.
pub fn simulate(model: &GenerativeModel, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    let mut rng = rng::stream(seed, &[rng::label::DATA]);
    let trajectories = (0..n)
        .map(|i| draw_trajectory(model, None, &mut rng, format!("{}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajectories, model.outcome_names(), model.layout())
}

const ORACLE_CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub draws: usize,
}

/// Mean outcome vector over `test_size` fresh subjects following `regime`
/// (uniform randomisation when `None`). Chunked substreams make the result
/// independent of the worker count.
pub fn oracle_conditional_value(
    model: &GenerativeModel,
    regime: Option<&Regime>,
    test_size: usize,
    seed: u64,
) -> Result<OracleValue> {
    if test_size == 0 {
        return Err(Error::invalid("test size must be positive"));
    }
    let p = model.mixing.len();
    let chunks = test_size.div_ceil(ORACLE_CHUNK);
    let partial: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(seed, &[rng::label::TEST, c as u64]);
            let count = ORACLE_CHUNK.min(test_size - c * ORACLE_CHUNK);
            let mut sum = vec![0.0; p];
            let mut sq = vec![0.0; p];
            for _ in 0..count {
                let t = draw_trajectory(model, regime, &mut rng, String::new())?;
                for l in 0..p {
                    sum[l] += t.outcomes[l];
                    sq[l] += t.outcomes[l] * t.outcomes[l];
                }
            }
            Ok((sum, sq))
        })
        .collect();
    let mut sum = vec![0.0; p];
    let mut sq = vec![0.0; p];
    for part in partial {
        let (s, q) = part?;
        for l in 0..p {
            sum[l] += s[l];
            sq[l] += q[l];
        }
    }
    let n = test_size as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = (0..p)
        .map(|l| {
            if test_size < 2 {
                0.0
            } else {
                let var = (sq[l] - n * mean[l] * mean[l]).max(0.0) / (n - 1.0);
                (var / n).sqrt()
            }
        })
        .collect();
    Ok(OracleValue {
        mean,
        se,
        draws: test_size,
    })
}
