//! Query-relevant collaborative filtering: keep the watch-history items that
//! are relevant to the query, then expand each through Swing and embedding
//! neighbours.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::swing::{SwingConfig, SwingTable};
use super::{dedupe_top, Candidate, CandidateSet, RetrieverKind};
use crate::ann::{AnnIndex, SearchMode};
use crate::config::KeyValues;
use crate::encoders::RelevanceSpace;
use crate::error::{Error, Result};
use crate::io::{field, TextArtifact, TextWriter};
use crate::topk::Scored;
use crate::world::{QueryId, UserId, VideoId, WatchedItem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevantBehavior {
    pub video_id: VideoId,
    pub timestamp: u64,
    pub relevance: f64,
}

/// `B_rel`: history items with cosine to the query at least `ε`, at most `K`,
/// best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevantBehaviorSet {
    pub user_id: UserId,
    pub query_id: QueryId,
    pub behaviors: Vec<RelevantBehavior>,
}

impl RelevantBehaviorSet {
    pub fn is_empty(&self) -> bool {
        self.behaviors.is_empty()
    }

    pub fn len(&self) -> usize {
        self.behaviors.len()
    }

    pub fn video_ids(&self) -> Vec<VideoId> {
        self.behaviors.iter().map(|b| b.video_id).collect()
    }
}

/// Descending relevance, then more recent first, then lower video id.
fn behavior_order(a: &RelevantBehavior, b: &RelevantBehavior) -> Ordering {
    b.relevance
        .total_cmp(&a.relevance)
        .then(b.timestamp.cmp(&a.timestamp))
        .then(a.video_id.cmp(&b.video_id))
}

/// Core of the relevance filter on precomputed cosines. A video watched more
/// than once contributes its most recent watch only.
pub fn select_relevant(items: &[RelevantBehavior], k: usize, epsilon: f64) -> Result<Vec<RelevantBehavior>> {
    if k == 0 {
        return Err(Error::Config("relevant-behaviour cap K must be >= 1".into()));
    }
    if !(-1.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("relevance threshold {epsilon} outside [-1, 1]")));
    }
    let mut latest: BTreeMap<VideoId, RelevantBehavior> = BTreeMap::new();
    for it in items.iter().filter(|it| it.relevance >= epsilon) {
        match latest.get_mut(&it.video_id) {
            Some(prev) if prev.timestamp >= it.timestamp => {}
            Some(prev) => *prev = *it,
            None => {
                latest.insert(it.video_id, *it);
            }
        }
    }
    let mut out: Vec<RelevantBehavior> = latest.into_values().collect();
    out.sort_by(behavior_order);
    out.truncate(k);
    Ok(out)
}

pub fn filter_relevant_behaviors(
    space: &RelevanceSpace,
    user_id: UserId,
    query_id: QueryId,
    history: &[WatchedItem],
    k: usize,
    epsilon: f64,
) -> Result<RelevantBehaviorSet> {
    let items: Vec<RelevantBehavior> = history
        .iter()
        .map(|w| RelevantBehavior {
            video_id: w.video_id,
            timestamp: w.timestamp,
            relevance: space.query_video(query_id, w.video_id),
        })
        .collect();
    Ok(RelevantBehaviorSet { user_id, query_id, behaviors: select_relevant(&items, k, epsilon)? })
}

/// Nearest neighbours of an indexed video by cosine, itself excluded.
pub fn embedding_i2i_topk(index: &AnnIndex, video_id: VideoId, n: usize, mode: SearchMode) -> Result<Vec<Scored>> {
    let pos = index
        .position(video_id)
        .ok_or_else(|| Error::Lookup(format!("video {video_id} is not in the index")))?;
    let q = index.vectors().row(pos).to_vec();
    let mut hits = match mode {
        SearchMode::Exact => index.search_exact_filtered(&q, n, |id| id != video_id),
        SearchMode::Approx => {
            let mut h = index.search_f32(&q, n + 1, SearchMode::Approx)?;
            h.retain(|s| s.id != video_id);
            h
        }
    };
    hits.truncate(n);
    Ok(hits)
}

/// Query-independent embedding neighbours per video.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    pub n: usize,
    pub lists: BTreeMap<VideoId, Vec<Scored>>,
}

impl EmbeddingTable {
    pub fn build(index: &AnnIndex, videos: impl IntoIterator<Item = VideoId>, n: usize, mode: SearchMode) -> Result<Self> {
        let mut lists = BTreeMap::new();
        for v in videos {
            if let std::collections::btree_map::Entry::Vacant(slot) = lists.entry(v) {
                slot.insert(embedding_i2i_topk(index, v, n, mode)?);
            }
        }
        Ok(EmbeddingTable { n, lists })
    }

    pub fn neighbors(&self, v: VideoId) -> &[Scored] {
        self.lists.get(&v).map_or(&[], Vec::as_slice)
    }
}

/// Swing and embedding neighbour tables, persisted together.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilarityTables {
    pub swing: SwingTable,
    pub embedding: EmbeddingTable,
}

const TABLES_KIND: &str = "tables";
const TABLES_VERSION: u32 = 1;

impl SimilarityTables {
    /// Records `(table, query_id, video_id, neighbor_id, score)` sorted by key,
    /// with `*` as the query of the query-independent embedding table.
    pub fn to_text(&self) -> String {
        let mut w = TextWriter::new(TABLES_KIND, TABLES_VERSION);
        w.record(["sizes".to_string(), self.swing.n.to_string(), self.embedding.n.to_string()]);
        for (&(q, v), list) in &self.swing.lists {
            for s in list {
                w.record(["swing".to_string(), q.to_string(), v.to_string(), s.id.to_string(), s.score.to_string()]);
            }
        }
        for (&v, list) in &self.embedding.lists {
            for s in list {
                w.record(["emb".to_string(), "*".to_string(), v.to_string(), s.id.to_string(), s.score.to_string()]);
            }
        }
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let art = TextArtifact::open(text, TABLES_KIND, TABLES_VERSION)?;
        let mut out = SimilarityTables::default();
        for (line, f) in art.records() {
            match f.first().copied() {
                Some("sizes") => {
                    out.swing.n = field(&f, 1, line, "swing size")?;
                    out.embedding.n = field(&f, 2, line, "embedding size")?;
                }
                Some("swing") => {
                    let q: QueryId = field(&f, 1, line, "query id")?;
                    let v: VideoId = field(&f, 2, line, "video id")?;
                    let s = Scored::new(field(&f, 3, line, "neighbor id")?, field(&f, 4, line, "score")?);
                    out.swing.lists.entry((q, v)).or_default().push(s);
                }
                Some("emb") => {
                    let v: VideoId = field(&f, 2, line, "video id")?;
                    let s = Scored::new(field(&f, 3, line, "neighbor id")?, field(&f, 4, line, "score")?);
                    out.embedding.lists.entry(v).or_default().push(s);
                }
                other => return Err(Error::format(line, format!("unknown tables record {other:?}"))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QrcfConfig {
    /// Relevant-behaviour cap `K`.
    pub k: usize,
    pub epsilon: f64,
    pub per_behavior: usize,
    pub max_expansions: usize,
    pub top: usize,
    pub use_swing: bool,
    pub use_embedding: bool,
    pub swing: SwingConfig,
    pub table_n: usize,
}

impl Default for QrcfConfig {
    fn default() -> Self {
        QrcfConfig {
            k: 50,
            epsilon: 0.5,
            per_behavior: 20,
            max_expansions: 1000,
            top: 400,
            use_swing: true,
            use_embedding: true,
            swing: SwingConfig::default(),
            table_n: 50,
        }
    }
}

impl QrcfConfig {
    pub const KEYS: &'static [&'static str] = &[
        "qrcf.k",
        "qrcf.epsilon",
        "qrcf.per_behavior",
        "qrcf.max_expansions",
        "qrcf.top",
        "qrcf.swing_alpha",
        "qrcf.swing_self_pairs",
        "qrcf.table_n",
    ];

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.take("qrcf.k", &mut self.k)?;
        kv.take("qrcf.epsilon", &mut self.epsilon)?;
        kv.take("qrcf.per_behavior", &mut self.per_behavior)?;
        kv.take("qrcf.max_expansions", &mut self.max_expansions)?;
        kv.take("qrcf.top", &mut self.top)?;
        kv.take("qrcf.swing_alpha", &mut self.swing.alpha)?;
        kv.take("qrcf.swing_self_pairs", &mut self.swing.self_pairs)?;
        kv.take("qrcf.table_n", &mut self.table_n)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.per_behavior == 0 || self.top == 0 || self.table_n == 0 {
            return Err(Error::Config("qrcf caps must be >= 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("qrcf epsilon must lie in [-1, 1]".into()));
        }
        if !(self.swing.alpha > 0.0) {
            return Err(Error::Config("swing alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Expands `B_rel` through the tables. Each expansion scores
/// `relevance(b) × s(b, candidate)`; at most `max_expansions` are gathered in
/// behaviour order, then the best score per video is kept and the top `top`
/// returned.
pub fn qrcf_retrieve(brel: &RelevantBehaviorSet, tables: &SimilarityTables, cfg: &QrcfConfig) -> CandidateSet {
    let mut raw: Vec<Candidate> = Vec::new();
    'outer: for b in &brel.behaviors {
        let mut sources: Vec<(RetrieverKind, &[Scored])> = Vec::with_capacity(2);
        if cfg.use_swing {
            sources.push((RetrieverKind::QrcfSwing, tables.swing.neighbors(brel.query_id, b.video_id)));
        }
        if cfg.use_embedding {
            sources.push((RetrieverKind::QrcfEmb, tables.embedding.neighbors(b.video_id)));
        }
        for (kind, list) in sources {
            for s in list.iter().take(cfg.per_behavior) {
                if raw.len() >= cfg.max_expansions {
                    break 'outer;
                }
                raw.push(Candidate { video_id: s.id, source: kind, score: b.relevance * s.score });
            }
        }
    }
    CandidateSet {
        query_id: brel.query_id,
        user_id: brel.user_id,
        entries: dedupe_top(&raw, cfg.top),
    }
}
