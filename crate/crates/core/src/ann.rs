//! Cosine top-K search over unit-norm vectors.
//!
//! Vectors are normalised on insertion and stored as `f32`. Scores are inner
//! products accumulated in `f64` in coordinate order, so the exact scan is
//! reproducible by any sequential re-implementation. The optional graph is a
//! seeded hierarchical navigable small-world structure.

use std::collections::BinaryHeap;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::io::{write_file, BinReader, BinWriter};
use crate::rng::{self, streams};
use crate::topk::{rank_order, Scored, TopK};

/// Row-major matrix of unit-norm `f32` vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

/// Sequential `f64` inner product of two `f32` vectors.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += f64::from(*x) * f64::from(*y);
    }
    s
}

/// Normalises `v` and rounds to `f32`. A zero vector stays zero.
pub fn to_unit_f32(v: &[f64]) -> Vec<f32> {
    let n = crate::math::norm(v);
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x / n) as f32).collect()
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Self {
        EmbeddingMatrix { dim, data: Vec::new() }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(dim);
        for r in rows {
            m.push(r)?;
        }
        Ok(m)
    }

    /// Appends the unit-normalised `f32` image of `v`.
    pub fn push(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!("vector of dim {} into matrix of dim {}", v.len(), self.dim)));
        }
        self.data.extend(to_unit_f32(v));
        Ok(())
    }

    /// Appends an already-normalised `f32` row verbatim.
    pub fn push_raw(&mut self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!("vector of dim {} into matrix of dim {}", v.len(), self.dim)));
        }
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| f64::from(x)).collect()
    }

    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        dot_f32(self.row(i), self.row(j))
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Exact,
    Approx,
}

impl std::str::FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(SearchMode::Exact),
            "approx" => Ok(SearchMode::Approx),
            other => Err(Error::Config(format!("unknown search mode `{other}` (exact|approx)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HnswConfig {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswConfig {
    fn default() -> Self {
        HnswConfig { m: 16, ef_construction: 128, ef_search: 160, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Hnsw {
    config: HnswConfig,
    /// `links[node][layer]`
    links: Vec<Vec<Vec<u32>>>,
    entry: u32,
    max_level: usize,
}

/// Reusable visited marks keyed by a generation counter.
struct Visited {
    mark: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Visited { mark: vec![0; n], epoch: 0 }
    }

    fn reset(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.mark.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    /// True when `i` was not yet seen in this generation.
    fn insert(&mut self, i: u32) -> bool {
        let slot = &mut self.mark[i as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }
}

/// Max-heap entry ranked by `rank_order` (best first).
#[derive(Clone, Copy)]
struct Best(Scored);

impl PartialEq for Best {
    fn eq(&self, o: &Self) -> bool {
        rank_order(&self.0, &o.0).is_eq()
    }
}
impl Eq for Best {}
impl PartialOrd for Best {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Best {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        rank_order(&o.0, &self.0)
    }
}

impl Hnsw {
    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            self.config.m * 2
        } else {
            self.config.m
        }
    }

    fn search_layer(
        &self,
        vectors: &EmbeddingMatrix,
        query: &[f32],
        entries: &[Scored],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Scored> {
        visited.reset();
        let mut candidates: BinaryHeap<Best> = BinaryHeap::new();
        let mut found = TopK::new(ef);
        for &e in entries {
            if visited.insert(e.id) {
                candidates.push(Best(e));
                found.push(e.id, e.score);
            }
        }
        while let Some(Best(c)) = candidates.pop() {
            if let Some(worst) = found.threshold() {
                if rank_order(&c, &worst).is_gt() {
                    break;
                }
            }
            for &n in &self.links[c.id as usize][layer] {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored::new(n, dot_f32(query, vectors.row(n as usize)));
                let admit = match found.threshold() {
                    Some(worst) => rank_order(&s, &worst).is_lt(),
                    None => true,
                };
                if admit {
                    candidates.push(Best(s));
                    found.push(s.id, s.score);
                }
            }
        }
        found.into_sorted()
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every already-kept neighbour; fill with the rest if short.
    fn select(&self, vectors: &EmbeddingMatrix, sorted: &[Scored], limit: usize) -> Vec<u32> {
        let mut kept: Vec<u32> = Vec::with_capacity(limit);
        let mut pruned = Vec::new();
        for c in sorted {
            if kept.len() >= limit {
                break;
            }
            let row = vectors.row(c.id as usize);
            let dominated = kept.iter().any(|&k| dot_f32(row, vectors.row(k as usize)) > c.score);
            if dominated {
                pruned.push(c.id);
            } else {
                kept.push(c.id);
            }
        }
        for p in pruned {
            if kept.len() >= limit {
                break;
            }
            kept.push(p);
        }
        kept
    }

    fn build(vectors: &EmbeddingMatrix, config: HnswConfig) -> Result<Self> {
        if config.m < 2 || config.ef_construction == 0 || config.ef_search == 0 {
            return Err(Error::Config("hnsw needs m >= 2 and positive ef values".into()));
        }
        let n = vectors.len();
        let mut rng = rng::stream(config.seed, streams::HNSW, 0);
        let ml = 1.0 / (config.m as f64).ln();
        let mut graph = Hnsw { config, links: Vec::with_capacity(n), entry: 0, max_level: 0 };
        let mut visited = Visited::new(n);
        for i in 0..n {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let level = ((-u.ln() * ml).floor() as usize).min(16);
            graph.links.push(vec![Vec::new(); level + 1]);
            if i == 0 {
                graph.max_level = level;
                continue;
            }
            let q = vectors.row(i);
            let mut ep = vec![Scored::new(graph.entry, dot_f32(q, vectors.row(graph.entry as usize)))];
            for layer in (level + 1..=graph.max_level).rev() {
                ep = graph.search_layer(vectors, q, &ep, 1, layer, &mut visited);
            }
            for layer in (0..=level.min(graph.max_level)).rev() {
                let found = graph.search_layer(vectors, q, &ep, config.ef_construction, layer, &mut visited);
                let chosen = graph.select(vectors, &found, config.m);
                graph.links[i][layer] = chosen.clone();
                for &nb in &chosen {
                    let limit = graph.max_links(layer);
                    let list = &mut graph.links[nb as usize][layer];
                    list.push(i as u32);
                    if list.len() > limit {
                        let base = vectors.row(nb as usize);
                        let mut scored: Vec<Scored> = graph.links[nb as usize][layer]
                            .iter()
                            .map(|&x| Scored::new(x, dot_f32(base, vectors.row(x as usize))))
                            .collect();
                        scored.sort_by(rank_order);
                        graph.links[nb as usize][layer] = graph.select(vectors, &scored, limit);
                    }
                }
                ep = found;
            }
            if level > graph.max_level {
                graph.max_level = level;
                graph.entry = i as u32;
            }
        }
        Ok(graph)
    }

    fn search(&self, vectors: &EmbeddingMatrix, query: &[f32], k: usize, ef: usize) -> Vec<Scored> {
        let mut visited = Visited::new(vectors.len());
        let mut ep = vec![Scored::new(self.entry, dot_f32(query, vectors.row(self.entry as usize)))];
        for layer in (1..=self.max_level).rev() {
            ep = self.search_layer(vectors, query, &ep, 1, layer, &mut visited);
        }
        let mut found = self.search_layer(vectors, query, &ep, ef.max(k), 0, &mut visited);
        found.truncate(k);
        found
    }
}

/// Searchable collection of `(id, vector)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    ids: Vec<u32>,
    vectors: EmbeddingMatrix,
    graph: Option<Hnsw>,
}

const MAGIC: &[u8; 4] = b"PSAN";
const VERSION: u32 = 1;

impl AnnIndex {
    pub fn new(ids: Vec<u32>, vectors: EmbeddingMatrix) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::Shape(format!("{} ids for {} vectors", ids.len(), vectors.len())));
        }
        Ok(AnnIndex { ids, vectors, graph: None })
    }

    /// Adds the approximate search graph.
    pub fn with_graph(mut self, config: HnswConfig) -> Result<Self> {
        if !self.vectors.is_empty() {
            self.graph = Some(Hnsw::build(&self.vectors, config)?);
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn has_graph(&self) -> bool {
        self.graph.is_some()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vectors(&self) -> &EmbeddingMatrix {
        &self.vectors
    }

    /// Position of `id` in the index, by linear scan.
    pub fn position(&self, id: u32) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// Exhaustive scan, descending score with ties by id.
    pub fn search_exact(&self, query: &[f32], k: usize) -> Vec<Scored> {
        self.search_exact_filtered(query, k, |_| true)
    }

    pub fn search_exact_filtered(&self, query: &[f32], k: usize, keep: impl Fn(u32) -> bool) -> Vec<Scored> {
        let mut top = TopK::new(k);
        for (i, &id) in self.ids.iter().enumerate() {
            if keep(id) {
                top.push(id, dot_f32(query, self.vectors.row(i)));
            }
        }
        top.into_sorted()
    }

    pub fn search(&self, query: &[f64], k: usize, mode: SearchMode) -> Result<Vec<Scored>> {
        if query.len() != self.dim() {
            return Err(Error::Shape(format!("query of dim {} against index of dim {}", query.len(), self.dim())));
        }
        let q = to_unit_f32(query);
        self.search_f32(&q, k, mode)
    }

    pub fn search_f32(&self, q: &[f32], k: usize, mode: SearchMode) -> Result<Vec<Scored>> {
        match (mode, &self.graph) {
            (SearchMode::Exact, _) => Ok(self.search_exact(q, k)),
            (SearchMode::Approx, Some(g)) => {
                let mut hits = g.search(&self.vectors, q, k.min(self.len()), g.config.ef_search);
                for h in &mut hits {
                    h.id = self.ids[h.id as usize];
                }
                hits.sort_by(rank_order);
                Ok(hits)
            }
            (SearchMode::Approx, None) if self.is_empty() => Ok(Vec::new()),
            (SearchMode::Approx, None) => Err(Error::Config("approximate search needs an index built with a graph".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC, VERSION);
        w.u32(self.dim() as u32);
        w.u32(self.len() as u32);
        for &id in &self.ids {
            w.u32(id);
        }
        for &x in self.vectors.data() {
            w.f32(x);
        }
        match &self.graph {
            None => w.u8(0),
            Some(g) => {
                w.u8(1);
                w.u32(g.config.m as u32);
                w.u32(g.config.ef_construction as u32);
                w.u32(g.config.ef_search as u32);
                w.u64(g.config.seed);
                w.u32(g.entry);
                w.u32(g.max_level as u32);
                for node in &g.links {
                    w.u8(node.len() as u8);
                    for layer in node {
                        w.u32(layer.len() as u32);
                        for &x in layer {
                            w.u32(x);
                        }
                    }
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::open(bytes, MAGIC, VERSION)?;
        let dim = r.u32()? as usize;
        let n = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::format(r.position(), "index dimension is zero"));
        }
        let ids = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            data.push(r.f32()?);
        }
        let vectors = EmbeddingMatrix { dim, data };
        let graph = match r.u8()? {
            0 => None,
            1 => {
                let config = HnswConfig {
                    m: r.u32()? as usize,
                    ef_construction: r.u32()? as usize,
                    ef_search: r.u32()? as usize,
                    seed: r.u64()?,
                };
                let entry = r.u32()?;
                let max_level = r.u32()? as usize;
                let mut links = Vec::with_capacity(n);
                for _ in 0..n {
                    let levels = r.u8()? as usize;
                    let mut node = Vec::with_capacity(levels);
                    for _ in 0..levels {
                        let count = r.u32()? as usize;
                        let at = r.position();
                        let list = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                        if list.iter().any(|&x| x as usize >= n) {
                            return Err(Error::format(at, "graph link outside the index"));
                        }
                        node.push(list);
                    }
                    links.push(node);
                }
                if entry as usize >= n.max(1) {
                    return Err(Error::format(r.position(), "graph entry point outside the index"));
                }
                Some(Hnsw { config, links, entry, max_level })
            }
            other => return Err(Error::format(r.position(), format!("unknown graph flag {other}"))),
        };
        r.finish()?;
        Ok(AnnIndex { ids, vectors, graph })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rng::stream(seed, 77, 0);
        let mut m = EmbeddingMatrix::new(dim);
        for _ in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            m.push(&v).unwrap();
        }
        m
    }

    #[test]
    fn self_query_ranks_first() {
        let m = random_matrix(200, 8, 1);
        let idx = AnnIndex::new((0..200).collect(), m.clone()).unwrap();
        let hits = idx.search_exact(m.row(17), 5);
        assert_eq!(hits[0].id, 17);
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        let all = idx.search_exact(m.row(3), 1000);
        assert_eq!(all.len(), 200);
        assert!(all.windows(2).all(|w| rank_order(&w[0], &w[1]).is_lt()));
    }

    #[test]
    fn graph_search_recall_and_round_trip() {
        let m = random_matrix(2000, 16, 2);
        let idx = AnnIndex::new((0..2000).map(|i| i * 3).collect(), m)
            .unwrap()
            .with_graph(HnswConfig { seed: 9, ..HnswConfig::default() })
            .unwrap();
        let queries = random_matrix(20, 16, 3);
        let mut hit = 0;
        for qi in 0..20 {
            let exact = idx.search_f32(queries.row(qi), 50, SearchMode::Exact).unwrap();
            let approx = idx.search_f32(queries.row(qi), 50, SearchMode::Approx).unwrap();
            hit += approx.iter().filter(|a| exact.iter().any(|e| e.id == a.id)).count();
        }
        assert!(hit as f64 / 1000.0 >= 0.95, "recall {}", hit as f64 / 1000.0);
        let bytes = idx.to_bytes();
        let back = AnnIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);
        assert!(AnnIndex::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
