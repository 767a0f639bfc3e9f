//! Same-query click graph and Swing item-item similarity.
//!
//! `s(i, j) = Σ_{u ∈ S_i ∩ S_j} Σ_{v ∈ S_i ∩ S_j} 1 / (α + |I_u ∩ I_v|)` where
//! `S_i` is the set of sessions that clicked `i` and `I_u` the clicked set of
//! session `u`. Sessions are `(user, query, day)` buckets, and only sessions
//! of the same query are ever combined.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::topk::{Scored, TopK};
use crate::world::{Logs, QueryId, UserId, VideoId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionKey {
    pub user_id: UserId,
    pub query_id: QueryId,
    pub day: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryGraph {
    /// `I_u`: sorted clicked videos per session, indexed by local session id.
    pub sessions: Vec<Vec<VideoId>>,
    pub session_keys: Vec<SessionKey>,
    /// `S_i`: sorted local session ids per clicked video.
    pub clickers: BTreeMap<VideoId, Vec<u32>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClickGraph {
    pub per_query: BTreeMap<QueryId, QueryGraph>,
}

impl ClickGraph {
    /// Builds from `(session key, clicked videos)` pairs; pairs with the same
    /// key are merged.
    pub fn from_clicks<I>(clicks: I) -> Self
    where
        I: IntoIterator<Item = (SessionKey, VideoId)>,
    {
        let mut buckets: BTreeMap<QueryId, BTreeMap<SessionKey, BTreeSet<VideoId>>> = BTreeMap::new();
        for (key, v) in clicks {
            buckets.entry(key.query_id).or_default().entry(key).or_default().insert(v);
        }
        let mut per_query = BTreeMap::new();
        for (q, sessions) in buckets {
            let mut g = QueryGraph::default();
            for (key, items) in sessions {
                let sid = g.sessions.len() as u32;
                for &v in &items {
                    g.clickers.entry(v).or_default().push(sid);
                }
                g.session_keys.push(key);
                g.sessions.push(items.into_iter().collect());
            }
            per_query.insert(q, g);
        }
        ClickGraph { per_query }
    }

    pub fn query(&self, q: QueryId) -> Option<&QueryGraph> {
        self.per_query.get(&q)
    }

    pub fn is_empty(&self) -> bool {
        self.per_query.is_empty()
    }
}

/// Click graph over every clicked search impression in `logs`.
pub fn build_click_graph(logs: &Logs) -> ClickGraph {
    ClickGraph::from_clicks(logs.sessions.iter().flat_map(|s| {
        let key = SessionKey { user_id: s.user_id, query_id: s.query_id, day: s.day };
        logs.impressions(s).iter().filter(|e| e.clicked).map(move |e| (key, e.video_id))
    }))
}

fn intersect_sorted<T: Ord + Copy>(a: &[T], b: &[T]) -> Vec<T> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn count_common(a: &[VideoId], b: &[VideoId]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwingConfig {
    pub alpha: f64,
    /// Count the `u = v` terms of the double sum.
    pub self_pairs: bool,
}

impl Default for SwingConfig {
    fn default() -> Self {
        SwingConfig { alpha: 1.0, self_pairs: true }
    }
}

/// Swing similarity of `i` and `j` within one query's graph.
pub fn swing_similarity(graph: &QueryGraph, i: VideoId, j: VideoId, cfg: &SwingConfig) -> Result<f64> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::Config(format!("swing alpha must be positive, got {}", cfg.alpha)));
    }
    let (Some(si), Some(sj)) = (graph.clickers.get(&i), graph.clickers.get(&j)) else {
        return Ok(0.0);
    };
    let common = intersect_sorted(si, sj);
    let mut total = 0.0;
    for (a, &u) in common.iter().enumerate() {
        for (b, &v) in common.iter().enumerate() {
            if a == b && !cfg.self_pairs {
                continue;
            }
            let shared = count_common(&graph.sessions[u as usize], &graph.sessions[v as usize]);
            total += 1.0 / (cfg.alpha + shared as f64);
        }
    }
    Ok(total)
}

/// Per `(query, video)`: the top `n` Swing neighbours, self excluded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SwingTable {
    pub n: usize,
    pub lists: BTreeMap<(QueryId, VideoId), Vec<Scored>>,
}

impl SwingTable {
    pub fn neighbors(&self, q: QueryId, v: VideoId) -> &[Scored] {
        self.lists.get(&(q, v)).map_or(&[], Vec::as_slice)
    }
}

/// Precomputes Swing neighbours for every clicked video of every query.
/// Only co-clicked videos can score above zero, so only they are visited.
pub fn build_swing_table(graph: &ClickGraph, cfg: &SwingConfig, n: usize) -> Result<SwingTable> {
    let mut lists = BTreeMap::new();
    for (&q, g) in &graph.per_query {
        for (&i, sessions) in &g.clickers {
            let mut partners: BTreeSet<VideoId> = BTreeSet::new();
            for &s in sessions {
                partners.extend(g.sessions[s as usize].iter().copied().filter(|&j| j != i));
            }
            if partners.is_empty() {
                continue;
            }
            let mut top = TopK::new(n);
            for j in partners {
                let s = swing_similarity(g, i, j, cfg)?;
                if s > 0.0 {
                    top.push(j, s);
                }
            }
            let list = top.into_sorted();
            if !list.is_empty() {
                lists.insert((q, i), list);
            }
        }
    }
    Ok(SwingTable { n, lists })
}
