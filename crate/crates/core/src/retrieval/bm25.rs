//! Inverted index over video token bags with Okapi BM25 scoring.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::topk::{Scored, TopK};
use crate::world::{Token, VideoId, World};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    /// token → `(video, term frequency)` in video order
    postings: BTreeMap<Token, Vec<(VideoId, u32)>>,
    doc_len: Vec<u32>,
    avg_len: f64,
    pub params: Bm25Params,
}

impl InvertedIndex {
    pub fn from_docs(docs: &[(VideoId, Vec<Token>)], params: Bm25Params) -> Result<Self> {
        if !(params.k1 >= 0.0) || !(0.0..=1.0).contains(&params.b) {
            return Err(Error::Config("bm25 needs k1 >= 0 and b in [0, 1]".into()));
        }
        let mut postings: BTreeMap<Token, Vec<(VideoId, u32)>> = BTreeMap::new();
        let max_id = docs.iter().map(|(v, _)| *v as usize + 1).max().unwrap_or(0);
        let mut doc_len = vec![0u32; max_id];
        let mut sorted: Vec<&(VideoId, Vec<Token>)> = docs.iter().collect();
        sorted.sort_by_key(|(v, _)| *v);
        for (v, tokens) in sorted {
            doc_len[*v as usize] = tokens.len() as u32;
            let mut tf: BTreeMap<Token, u32> = BTreeMap::new();
            for &t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((*v, c));
            }
        }
        let total: u64 = docs.iter().map(|(_, t)| t.len() as u64).sum();
        let avg_len = if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 };
        Ok(InvertedIndex { postings, doc_len, avg_len, params })
    }

    pub fn build(world: &World, params: Bm25Params) -> Result<Self> {
        let docs: Vec<(VideoId, Vec<Token>)> = world.videos.iter().map(|v| (v.video_id, v.token_bag.clone())).collect();
        Self::from_docs(&docs, params)
    }

    pub fn doc_count(&self) -> usize {
        self.doc_len.iter().filter(|&&l| l > 0).count()
    }

    /// `ln(1 + (N − n + 0.5) / (n + 0.5))`
    pub fn idf(&self, token: Token) -> f64 {
        let n = self.postings.get(&token).map_or(0, Vec::len) as f64;
        let total = self.doc_count() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    /// BM25 score of every video sharing a token with the query. Repeated
    /// query tokens count once per occurrence.
    pub fn scores(&self, query: &[Token]) -> BTreeMap<VideoId, f64> {
        let Bm25Params { k1, b } = self.params;
        let mut acc: BTreeMap<VideoId, f64> = BTreeMap::new();
        for &t in query {
            let Some(list) = self.postings.get(&t) else { continue };
            let idf = self.idf(t);
            for &(v, tf) in list {
                let tf = tf as f64;
                let norm = 1.0 - b + b * self.doc_len[v as usize] as f64 / self.avg_len;
                *acc.entry(v).or_default() += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        acc
    }

    pub fn retrieve(&self, query: &[Token], k: usize) -> Vec<Scored> {
        let mut top = TopK::new(k);
        for (v, s) in self.scores(query) {
            top.push(v, s);
        }
        top.into_sorted()
    }
}
