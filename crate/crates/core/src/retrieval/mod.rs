//! Candidate generation: lexical (BM25), dense (relevance-space and
//! personalized), and query-relevant collaborative filtering.

pub mod bm25;
pub mod pdr;
pub mod qrcf;
pub mod swing;

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::topk::{rank_order, Scored};
use crate::world::{QueryId, UserId, VideoId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RetrieverKind {
    Bm25,
    DrBaseline,
    QrcfSwing,
    QrcfEmb,
    Pdr,
}

impl RetrieverKind {
    pub const ALL: [RetrieverKind; 5] = [
        RetrieverKind::Bm25,
        RetrieverKind::DrBaseline,
        RetrieverKind::QrcfSwing,
        RetrieverKind::QrcfEmb,
        RetrieverKind::Pdr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RetrieverKind::Bm25 => "bm25",
            RetrieverKind::DrBaseline => "dr_baseline",
            RetrieverKind::QrcfSwing => "qrcf_swing",
            RetrieverKind::QrcfEmb => "qrcf_emb",
            RetrieverKind::Pdr => "pdr",
        }
    }
}

impl fmt::Display for RetrieverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RetrieverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RetrieverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown retriever `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub video_id: VideoId,
    pub source: RetrieverKind,
    pub score: f64,
}

/// Retrieved videos for one `(user, query)` request, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub query_id: QueryId,
    pub user_id: UserId,
    pub entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn from_scored(query_id: QueryId, user_id: UserId, source: RetrieverKind, hits: &[Scored]) -> Self {
        CandidateSet {
            query_id,
            user_id,
            entries: hits.iter().map(|s| Candidate { video_id: s.id, source, score: s.score }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn video_ids(&self) -> Vec<VideoId> {
        self.entries.iter().map(|c| c.video_id).collect()
    }
}

/// A video in the merged pool with the score it got from every retriever
/// that returned it.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedCandidate {
    pub video_id: VideoId,
    pub sources: Vec<(RetrieverKind, f64)>,
}

/// Union of candidate sets, deduplicated by video and ordered by video id.
pub fn merge_candidates(sets: &[CandidateSet]) -> Vec<MergedCandidate> {
    let mut by_video: BTreeMap<VideoId, Vec<(RetrieverKind, f64)>> = BTreeMap::new();
    for set in sets {
        for c in &set.entries {
            let slot = by_video.entry(c.video_id).or_default();
            match slot.iter_mut().find(|(k, _)| *k == c.source) {
                Some(existing) => existing.1 = existing.1.max(c.score),
                None => slot.push((c.source, c.score)),
            }
        }
    }
    by_video
        .into_iter()
        .map(|(video_id, mut sources)| {
            sources.sort_by(|a, b| a.0.cmp(&b.0));
            MergedCandidate { video_id, sources }
        })
        .collect()
}

/// Dedupes `(video, score, source)` triples keeping each video's best score
/// (first source on ties) and returns the top `k` by score, ties by id.
pub(crate) fn dedupe_top(raw: &[Candidate], k: usize) -> Vec<Candidate> {
    let mut best: BTreeMap<VideoId, Candidate> = BTreeMap::new();
    for c in raw {
        match best.get_mut(&c.video_id) {
            Some(b) if c.score > b.score => *b = *c,
            Some(_) => {}
            None => {
                best.insert(c.video_id, *c);
            }
        }
    }
    let mut out: Vec<Candidate> = best.into_values().collect();
    out.sort_by(|a, b| rank_order(&Scored::new(a.video_id, a.score), &Scored::new(b.video_id, b.score)));
    out.truncate(k);
    out
}
