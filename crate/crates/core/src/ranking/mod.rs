//! Engagement ranking: the query-dominant interest network, its multi-task
//! objective, and the fused score that orders a result page.

pub mod gsu;
pub mod qin;
pub mod train;

use crate::error::{Error, Result};
use crate::tensor::{bce_loss, list_ce_loss};
use crate::world::{QueryId, UserId, VideoId};

pub const TASKS: [&str; 5] = ["click", "effective_play", "long_play", "full_play", "like"];
pub const TASK_COUNT: usize = TASKS.len();

/// Exponents of the fused score, one per task in [`TASKS`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedRankConfig {
    pub alpha: [f64; TASK_COUNT],
}

impl Default for FusedRankConfig {
    fn default() -> Self {
        FusedRankConfig { alpha: [1.0; TASK_COUNT] }
    }
}

impl FusedRankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config(format!("fused exponents must be finite and >= 0, got {:?}", self.alpha)));
        }
        Ok(())
    }
}

/// `∏ (1 + o_i)^{α_i}`.
pub fn fused_score(scores: &[f64], alpha: &[f64]) -> Result<f64> {
    if scores.len() != alpha.len() {
        return Err(Error::Shape(format!("{} scores but {} exponents", scores.len(), alpha.len())));
    }
    if alpha.iter().any(|&a| !(a >= 0.0)) {
        return Err(Error::Config("fused exponents must be >= 0".into()));
    }
    Ok(scores.iter().zip(alpha).map(|(&o, &a)| (1.0 + o).powf(a)).product())
}

/// Multi-task objective on plain numbers. `scores[l][i][t]` is task `t`'s
/// probability for item `i` of list `l`, `labels` mirrors it. Per task: mean
/// BCE over all items plus `alpha` times the mean list cross entropy over the
/// lists holding at least one positive.
pub fn rcr_loss(scores: &[Vec<Vec<f64>>], labels: &[Vec<Vec<f64>>], alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("rcr alpha must be >= 0, got {alpha}")));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape("one label list per score list".into()));
    }
    let tasks = scores.first().and_then(|l| l.first()).map_or(0, Vec::len);
    let items: usize = scores.iter().map(Vec::len).sum();
    if items == 0 {
        return Ok(0.0);
    }
    for (s, y) in scores.iter().zip(labels) {
        if s.len() != y.len() || s.iter().chain(y).any(|row| row.len() != tasks) {
            return Err(Error::Shape("score and label lists disagree in shape".into()));
        }
    }
    let mut total = 0.0;
    for t in 0..tasks {
        let bce: f64 = scores
            .iter()
            .zip(labels)
            .flat_map(|(s, y)| s.iter().zip(y).map(move |(si, yi)| bce_loss(si[t], yi[t])))
            .sum();
        total += bce / items as f64;
        let mut list_total = 0.0;
        let mut lists = 0usize;
        for (s, y) in scores.iter().zip(labels) {
            let ys: Vec<f64> = y.iter().map(|r| r[t]).collect();
            if ys.iter().any(|&v| v > 0.0) {
                let ps: Vec<f64> = s.iter().map(|r| r[t]).collect();
                list_total += list_ce_loss(&ps, &ys)?;
                lists += 1;
            }
        }
        if lists > 0 {
            total += alpha * list_total / lists as f64;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedItem {
    pub video_id: VideoId,
    pub fused_score: f64,
    pub scores: [f64; TASK_COUNT],
}

/// A ranked candidate list, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: QueryId,
    pub user_id: UserId,
    pub items: Vec<RankedItem>,
}

/// Descending fused score, ties by lower video id.
pub fn sort_ranked_items(items: &mut [RankedItem]) {
    items.sort_by(|a, b| b.fused_score.total_cmp(&a.fused_score).then(a.video_id.cmp(&b.video_id)));
}

impl RankedList {
    pub fn video_ids(&self) -> Vec<VideoId> {
        self.items.iter().map(|i| i.video_id).collect()
    }

    pub fn truncate(&mut self, n: usize) {
        self.items.truncate(n);
    }

    /// One record per item:
    /// `query_id user_id rank video_id fused o_click o_eff o_long o_full o_like`.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (rank, it) in self.items.iter().enumerate() {
            out.push_str(&format!("{} {} {} {} {:e}", self.query_id, self.user_id, rank + 1, it.video_id, it.fused_score));
            for s in it.scores {
                out.push_str(&format!(" {s:e}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parses records written by [`Self::to_records`], grouping consecutive
    /// lines with the same query and user.
    pub fn from_records(text: &str) -> Result<Vec<RankedList>> {
        let mut lists: Vec<RankedList> = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Data(format!("ranked record line {}: malformed", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 + TASK_COUNT {
                return Err(bad());
            }
            let q: QueryId = f[0].parse().map_err(|_| bad())?;
            let u: UserId = f[1].parse().map_err(|_| bad())?;
            let rank: usize = f[2].parse().map_err(|_| bad())?;
            let mut scores = [0.0; TASK_COUNT];
            for (s, v) in scores.iter_mut().zip(&f[5..]) {
                *s = v.parse().map_err(|_| bad())?;
            }
            let item = RankedItem {
                video_id: f[3].parse().map_err(|_| bad())?,
                fused_score: f[4].parse().map_err(|_| bad())?,
                scores,
            };
            match lists.last_mut() {
                Some(l) if rank > 1 && l.query_id == q && l.user_id == u && l.items.len() + 1 == rank => l.items.push(item),
                _ if rank == 1 => lists.push(RankedList { query_id: q, user_id: u, items: vec![item] }),
                _ => return Err(Error::Data(format!("ranked record line {}: rank {rank} out of sequence", n + 1))),
            }
        }
        Ok(lists)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fused_score_hand_case() {
        let v = fused_score(&[0.5, 0.2], &[1.0, 2.0]).unwrap();
        assert!((v - 2.16).abs() < 1e-12);
        assert_eq!(fused_score(&[0.0; 5], &[1.0; 5]).unwrap(), 1.0);
        assert!(fused_score(&[0.1], &[-1.0]).is_err());
    }

    #[test]
    fn zero_alpha_rcr_is_bce_sum() {
        let s = vec![vec![vec![0.3, 0.6]], vec![vec![0.8, 0.1]]];
        let y = vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]];
        let want = (bce_loss(0.3, 1.0) + bce_loss(0.8, 0.0)) / 2.0 + (bce_loss(0.6, 0.0) + bce_loss(0.1, 1.0)) / 2.0;
        assert!((rcr_loss(&s, &y, 0.0).unwrap() - want).abs() < 1e-12);
        // single-item lists put all mass on the item: the list term is zero
        assert!((rcr_loss(&s, &y, 1.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn records_round_trip() {
        let list = RankedList {
            query_id: 4,
            user_id: 9,
            items: vec![
                RankedItem { video_id: 3, fused_score: 2.5, scores: [0.1, 0.2, 0.3, 0.4, 0.5] },
                RankedItem { video_id: 1, fused_score: 1.25, scores: [0.01, 0.02, 0.03, 0.04, 1.0 / 3.0] },
            ],
        };
        let back = RankedList::from_records(&list.to_records()).unwrap();
        assert_eq!(back, vec![list]);
    }
}
