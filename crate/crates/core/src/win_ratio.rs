//! Generalized win ratio between two regimes on a generative model.
//!
//! A pair is one outcome vector drawn under each regime. Outcomes are scanned
//! in priority order and the first one whose dissimilarity exceeds its margin
//! decides the pair for the larger value; pairs with no decisive outcome are
//! ties.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::Dissimilarity;
use crate::regime::Regime;
use crate::rng;
use crate::sim::{draw_trajectory, GenerativeModel};

const PAIR_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRatioSpec {
    #[serde(with = "crate::serde_ext::vec")]
    pub margins: Vec<f64>,
    pub kinds: Vec<Dissimilarity>,
    pub pairs: usize,
    pub seed: u64,
}

impl WinRatioSpec {
    pub fn absolute(margins: Vec<f64>, pairs: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            kinds: vec![Dissimilarity::AbsoluteDifference; margins.len()],
            margins,
            pairs,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 {
            return Err(Error::invalid("pair count must be at least 1"));
        }
        if self.margins.is_empty() || self.margins.len() != self.kinds.len() {
            return Err(Error::invalid("margins and dissimilarity kinds must have equal, nonzero length"));
        }
        if self.margins.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::invalid(format!("margins must be >= 0, got {:?}", self.margins)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRatio {
    pub win_a: f64,
    pub win_b: f64,
    pub tie: f64,
    pub wins_a: u64,
    pub wins_b: u64,
    pub ties: u64,
    /// Decisions by outcome: `decided_at[l] = (wins for a, wins for b)`.
    pub decided_at: Vec<(u64, u64)>,
    /// Σ_ℓ P(a wins at ℓ | nothing decided before ℓ).
    pub wr_sum_of_conditionals: f64,
    pub pairs: usize,
}

/// Which regime wins one pair: `Some(true)` for the first vector.
pub fn compare(ya: &[f64], yb: &[f64], spec: &WinRatioSpec) -> Result<Option<(usize, bool)>> {
    for (l, kind) in spec.kinds.iter().enumerate() {
        if kind.apply(ya[l], yb[l])? > spec.margins[l] {
            return Ok(Some((l, ya[l] > yb[l])));
        }
    }
    Ok(None)
}

pub fn regime_hash(regime: &Regime) -> Result<String> {
    let bytes = serde_json::to_vec(regime)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn win_ratio(model: &GenerativeModel, a: &Regime, b: &Regime, spec: &WinRatioSpec) -> Result<WinRatio> {
    spec.validate()?;
    let p = model.mixing.len();
    if spec.margins.len() != p {
        return Err(Error::invalid(format!("{} margins for {p} outcomes", spec.margins.len())));
    }
    // Substreams follow the regimes' content, so swapping the arguments
    // mirrors every pair.
    let swap = regime_hash(a)? > regime_hash(b)?;
    let (first, second) = if swap { (b, a) } else { (a, b) };
    let chunks = spec.pairs.div_ceil(PAIR_CHUNK);
    let partial: Vec<Result<Vec<(usize, bool)>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r1 = rng::stream(spec.seed, &[rng::label::PAIRS, c as u64, 0]);
            let mut r2 = rng::stream(spec.seed, &[rng::label::PAIRS, c as u64, 1]);
            let count = PAIR_CHUNK.min(spec.pairs - c * PAIR_CHUNK);
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let y1 = draw_trajectory(model, Some(first), &mut r1, String::new())?.outcomes;
                let y2 = draw_trajectory(model, Some(second), &mut r2, String::new())?.outcomes;
                let (ya, yb) = if swap { (y2, y1) } else { (y1, y2) };
                out.push(match compare(&ya, &yb, spec)? {
                    Some(d) => d,
                    None => (p, false),
                });
            }
            Ok(out)
        })
        .collect();
    let mut decided_at = vec![(0u64, 0u64); p];
    let mut ties = 0u64;
    for part in partial {
        for (l, a_wins) in part? {
            if l == p {
                ties += 1;
            } else if a_wins {
                decided_at[l].0 += 1;
            } else {
                decided_at[l].1 += 1;
            }
        }
    }
    let wins_a: u64 = decided_at.iter().map(|d| d.0).sum();
    let wins_b: u64 = decided_at.iter().map(|d| d.1).sum();
    let n = spec.pairs as f64;
    let win_a = wins_a as f64 / n;
    let win_b = wins_b as f64 / n;
    let mut remaining = spec.pairs as u64;
    let mut wr_sum_of_conditionals = 0.0;
    for &(wa, wb) in &decided_at {
        if remaining > 0 {
            wr_sum_of_conditionals += wa as f64 / remaining as f64;
        }
        remaining -= wa + wb;
    }
    Ok(WinRatio {
        win_a,
        win_b,
        tie: 1.0 - (win_a + win_b),
        wins_a,
        wins_b,
        ties,
        decided_at,
        wr_sum_of_conditionals,
        pairs: spec.pairs,
    })
}

/// Ordered triples (i, j, k) with i beating j, j beating k and k beating i,
/// where "beats" means a strictly larger win proportion. `wins[i][j]` is
/// regime i's win proportion against regime j.
pub fn cyclic_triples(wins: &[Vec<f64>]) -> Vec<[usize; 3]> {
    let n = wins.len();
    let beats = |i: usize, j: usize| wins[i][j] > wins[j][i];
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in i + 1..n {
                if k != j && beats(i, j) && beats(j, k) && beats(k, i) {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}
