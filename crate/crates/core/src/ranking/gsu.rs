//! General search units: cheap filters that cut a lifelong behaviour sequence
//! down to the part worth exact attention.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GsuMode {
    /// Top `stage1_k` behaviours by similarity to the query.
    Query,
    /// Query funnel, then top `stage2_k` by similarity to the target video.
    QueryTarget,
    /// Query funnel, then the target stage scored in the attention's own key space.
    Cp,
}

impl GsuMode {
    pub const ALL: [GsuMode; 3] = [GsuMode::Query, GsuMode::QueryTarget, GsuMode::Cp];

    pub fn name(self) -> &'static str {
        match self {
            GsuMode::Query => "query",
            GsuMode::QueryTarget => "query_target",
            GsuMode::Cp => "cp",
        }
    }
}

impl fmt::Display for GsuMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GsuMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GsuMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gsu mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GsuConfig {
    pub stage1_k: usize,
    pub stage2_k: usize,
    /// Reads the nested form literally: keep `stage2_k` by query first, then
    /// `stage1_k` by target, which makes the second stage a no-op whenever
    /// `stage1_k >= stage2_k`.
    pub literal_nesting: bool,
}

impl Default for GsuConfig {
    fn default() -> Self {
        GsuConfig {
            stage1_k: 400,
            stage2_k: 50,
            literal_nesting: false,
        }
    }
}

impl GsuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage2_k == 0 || self.stage1_k < self.stage2_k {
            return Err(Error::Config(format!(
                "gsu needs stage1_k >= stage2_k >= 1, got {} and {}",
                self.stage1_k, self.stage2_k
            )));
        }
        Ok(())
    }

    fn funnel(&self) -> (usize, usize) {
        if self.literal_nesting {
            (self.stage2_k, self.stage1_k)
        } else {
            (self.stage1_k, self.stage2_k)
        }
    }
}

/// Cosine with the zero vector defined as 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Indices of the `k` best `scores`, highest first; equal scores prefer the
/// more recent (larger) index.
pub fn top_by_score(candidates: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
    order.truncate(k);
    order
}

/// Funnel over a time-ordered behaviour list. `query_scores[i]` and
/// `target_scores[i]` are the similarities of behaviour `i` to the query and
/// to the target in the mode's stage-2 space (ignored for [`GsuMode::Query`]).
/// Returns behaviour indices in selection order.
pub fn gsu_funnel(cfg: &GsuConfig, mode: GsuMode, query_scores: &[f64], target_scores: &[f64]) -> Result<Vec<usize>> {
    cfg.validate()?;
    let all: Vec<usize> = (0..query_scores.len()).collect();
    if mode == GsuMode::Query {
        return Ok(top_by_score(&all, query_scores, cfg.stage1_k));
    }
    if target_scores.len() != query_scores.len() {
        return Err(Error::Shape(format!(
            "{} query scores but {} target scores",
            query_scores.len(),
            target_scores.len()
        )));
    }
    let (k1, k2) = cfg.funnel();
    let first = top_by_score(&all, query_scores, k1);
    Ok(top_by_score(&first, target_scores, k2))
}

/// The funnel on raw vectors: stage 1 by cosine to `query` over `stage1`
/// vectors, stage 2 by cosine to `target` over `stage2` vectors.
pub fn gsu_select(
    cfg: &GsuConfig,
    mode: GsuMode,
    query: &[f64],
    target: &[f64],
    stage1: &[Vec<f64>],
    stage2: &[Vec<f64>],
) -> Result<Vec<usize>> {
    let qs: Vec<f64> = stage1.iter().map(|b| cosine(b, query)).collect();
    let ts: Vec<f64> = if mode == GsuMode::Query {
        Vec::new()
    } else {
        if stage2.len() != stage1.len() {
            return Err(Error::Shape("both stages need one vector per behaviour".into()));
        }
        stage2.iter().map(|b| cosine(b, target)).collect()
    };
    gsu_funnel(cfg, mode, &qs, &ts)
}
