//! Query and video embedding spaces used for relevance: a dual encoder over
//! token bags (optionally with a token-topic histogram), or a noisy copy of
//! the ground-truth topic mixtures for debugging.

mod train;

pub use train::{relevance_pairs, train_relevance_encoder, RelevancePair};

use std::rc::Rc;

use rand_distr::{Distribution, Normal};

use crate::ann::{dot_f32, EmbeddingMatrix};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};
use crate::tensor::{Checkpoint, Linear, ParameterStore, SparseRows, Tape, Tensor};
use crate::world::{QueryId, VideoId, World};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub hidden: usize,
    pub tau: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Drop the token-topic histogram and keep only the token bag.
    pub text_only: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 32,
            hidden: 64,
            tau: 0.05,
            lr: 3e-3,
            batch: 256,
            epochs: 4,
            text_only: false,
        }
    }
}

impl EncoderConfig {
    pub const KEYS: &'static [&'static str] = &[
        "encoder.dim",
        "encoder.hidden",
        "encoder.tau",
        "encoder.lr",
        "encoder.batch",
        "encoder.epochs",
    ];

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.take("encoder.dim", &mut self.dim)?;
        kv.take("encoder.hidden", &mut self.hidden)?;
        kv.take("encoder.tau", &mut self.tau)?;
        kv.take("encoder.lr", &mut self.lr)?;
        kv.take("encoder.batch", &mut self.batch)?;
        kv.take("encoder.epochs", &mut self.epochs)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.batch < 2 {
            return Err(Error::Config("encoder dims must be positive and batch >= 2".into()));
        }
        if !(self.tau > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config("encoder tau and lr must be positive".into()));
        }
        Ok(())
    }
}

/// One tower: sparse features → hidden ReLU → linear → unit norm.
#[derive(Debug, Clone, PartialEq)]
struct Tower {
    input: crate::tensor::ParamId,
    input_bias: crate::tensor::ParamId,
    output: Linear,
}

impl Tower {
    fn new(store: &mut ParameterStore, name: &str, width: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        // token rows are mean-pooled, so the effective fan-in is the bag size
        let input = store.add_he_uniform(&format!("{name}.in.w"), &[width, cfg.hidden], 4, rng)?;
        let input_bias = store.add_zeros(&format!("{name}.in.b"), &[1, cfg.hidden])?;
        let output = Linear::new(store, &format!("{name}.out"), cfg.hidden, cfg.dim, rng)?;
        Ok(Tower { input, input_bias, output })
    }

    fn forward(&self, tape: &mut Tape, features: Rc<SparseRows>) -> Result<crate::tensor::Var> {
        let h = tape.sparse_linear(self.input, features)?;
        let b = tape.param(self.input_bias)?;
        let h = tape.add_row(h, b)?;
        let h = tape.relu(h)?;
        let o = self.output.forward(tape, h)?;
        tape.l2_normalize_rows(o)
    }
}

/// Dual encoder mapping queries and videos into one cosine space.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceEncoder {
    pub config: EncoderConfig,
    pub store: ParameterStore,
    vocab: usize,
    topics: usize,
    vocab_per_topic: usize,
    query_tower: Tower,
    video_tower: Tower,
}

impl RelevanceEncoder {
    /// Untrained encoder with seeded initial weights.
    pub fn new(world: &World, config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Self::build(world.vocab_size(), world.topic_count, world.vocab_per_topic, config, seed)
    }

    fn build(vocab: usize, topics: usize, vocab_per_topic: usize, config: &EncoderConfig, seed: u64) -> Result<Self> {
        let width = if config.text_only { vocab } else { vocab + topics };
        let mut store = ParameterStore::new();
        let mut rng = rng::stream(seed, streams::INIT, if config.text_only { 2 } else { 1 });
        let query_tower = Tower::new(&mut store, "query", width, config, &mut rng)?;
        let video_tower = Tower::new(&mut store, "video", width, config, &mut rng)?;
        Ok(RelevanceEncoder {
            config: config.clone(),
            store,
            vocab,
            topics,
            vocab_per_topic,
            query_tower,
            video_tower,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn width(&self) -> usize {
        if self.config.text_only {
            self.vocab
        } else {
            self.vocab + self.topics
        }
    }

    /// Mean-pooled token indicators plus, unless text-only, the share of the
    /// bag's tokens drawn from each topic's vocabulary block.
    pub(crate) fn features(&self, tokens: &[u32]) -> Vec<(usize, f64)> {
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(tokens.len() + 2);
        if tokens.is_empty() {
            return row;
        }
        let w = 1.0 / tokens.len() as f64;
        for &t in tokens {
            let t = t as usize;
            if t >= self.vocab {
                continue;
            }
            match row.iter_mut().find(|(c, _)| *c == t) {
                Some(e) => e.1 += w,
                None => row.push((t, w)),
            }
            if !self.config.text_only {
                let col = self.vocab + t / self.vocab_per_topic;
                match row.iter_mut().find(|(c, _)| *c == col) {
                    Some(e) => e.1 += w,
                    None => row.push((col, w)),
                }
            }
        }
        row
    }

    pub(crate) fn rows<'a>(&self, bags: impl Iterator<Item = &'a [u32]>) -> Rc<SparseRows> {
        Rc::new(SparseRows {
            width: self.width(),
            rows: bags.map(|b| self.features(b)).collect(),
        })
    }

    pub(crate) fn query_tower_var(&self, tape: &mut Tape, rows: Rc<SparseRows>) -> Result<crate::tensor::Var> {
        self.query_tower.forward(tape, rows)
    }

    pub(crate) fn video_tower_var(&self, tape: &mut Tape, rows: Rc<SparseRows>) -> Result<crate::tensor::Var> {
        self.video_tower.forward(tape, rows)
    }

    fn encode_bags<'a>(&self, query_side: bool, bags: impl Iterator<Item = &'a [u32]>) -> Result<Vec<Vec<f64>>> {
        let rows = self.rows(bags);
        let n = rows.rows.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(&self.store);
        let out = if query_side {
            self.query_tower.forward(&mut tape, rows)?
        } else {
            self.video_tower.forward(&mut tape, rows)?
        };
        let value: &Tensor = tape.value(out);
        Ok((0..n).map(|i| value.row(i).to_vec()).collect())
    }

    pub fn encode_query(&self, world: &World, q: QueryId) -> Result<Vec<f64>> {
        let spec = world.query(q)?;
        Ok(self.encode_bags(true, std::iter::once(spec.token_bag.as_slice()))?.remove(0))
    }

    pub fn encode_video(&self, world: &World, v: VideoId) -> Result<Vec<f64>> {
        let video = world.video(v)?;
        Ok(self.encode_bags(false, std::iter::once(video.token_bag.as_slice()))?.remove(0))
    }

    /// Embeds an arbitrary token bag with either tower.
    pub fn encode_tokens(&self, tokens: &[u32], query_side: bool) -> Result<Vec<f64>> {
        Ok(self.encode_bags(query_side, std::iter::once(tokens))?.remove(0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let meta = [
            ("model", "relevance_encoder".to_string()),
            ("dim", c.dim.to_string()),
            ("hidden", c.hidden.to_string()),
            ("tau", c.tau.to_string()),
            ("lr", c.lr.to_string()),
            ("batch", c.batch.to_string()),
            ("epochs", c.epochs.to_string()),
            ("text_only", c.text_only.to_string()),
            ("vocab", self.vocab.to_string()),
            ("topics", self.topics.to_string()),
            ("vocab_per_topic", self.vocab_per_topic.to_string()),
        ];
        Checkpoint {
            meta: meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            store: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("model") != Some("relevance_encoder") {
            return Err(Error::Data("checkpoint does not hold a relevance encoder".into()));
        }
        let get = |k: &str| -> Result<&str> {
            ck.meta(k).ok_or_else(|| Error::Data(format!("encoder checkpoint lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Data(format!("encoder checkpoint `{k}` is not a count")))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Data(format!("encoder checkpoint `{k}` is not a number")))
        };
        let config = EncoderConfig {
            dim: num("dim")?,
            hidden: num("hidden")?,
            tau: real("tau")?,
            lr: real("lr")?,
            batch: num("batch")?,
            epochs: num("epochs")?,
            text_only: get("text_only")? == "true",
        };
        let mut enc = Self::build(num("vocab")?, num("topics")?, num("vocab_per_topic")?, &config, 0)?;
        enc.store.load_values(&ck.store)?;
        Ok(enc)
    }
}

/// Ground-truth embedding: `normalize(topic_mix + ε)`, `ε ~ N(0, σ²I)`.
pub fn oracle_embed(topic_mix: &[f64], noise_sigma: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut v = topic_mix.to_vec();
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        v.iter_mut().for_each(|x| *x += normal.sample(rng));
    }
    if crate::math::normalize_in_place(&mut v) == 0.0 {
        return Err(Error::Numeric("oracle embedding collapsed to zero".into()));
    }
    Ok(v)
}

/// Which embedding space stands in for the relevance encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmbeddingMode {
    Trained,
    Oracle { sigma: f64 },
}

impl std::str::FromStr for EmbeddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trained" => Ok(EmbeddingMode::Trained),
            "oracle" => Ok(EmbeddingMode::Oracle { sigma: 0.0 }),
            other => match other.strip_prefix("oracle:") {
                Some(sigma) => Ok(EmbeddingMode::Oracle {
                    sigma: sigma.parse().map_err(|_| Error::Config(format!("bad oracle sigma `{sigma}`")))?,
                }),
                None => Err(Error::Config(format!("unknown embedding mode `{other}` (trained|oracle[:sigma])"))),
            },
        }
    }
}

/// Precomputed unit-norm embeddings of every query and video in a world.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceSpace {
    pub queries: EmbeddingMatrix,
    pub videos: EmbeddingMatrix,
}

impl RelevanceSpace {
    pub fn from_encoder(enc: &RelevanceEncoder, world: &World) -> Result<Self> {
        let dim = enc.dim();
        let mut queries = EmbeddingMatrix::new(dim);
        for chunk in world.queries.chunks(1024) {
            for row in enc.encode_bags(true, chunk.iter().map(|q| q.token_bag.as_slice()))? {
                queries.push(&row)?;
            }
        }
        let mut videos = EmbeddingMatrix::new(dim);
        for chunk in world.videos.chunks(1024) {
            for row in enc.encode_bags(false, chunk.iter().map(|v| v.token_bag.as_slice()))? {
                videos.push(&row)?;
            }
        }
        Ok(RelevanceSpace { queries, videos })
    }

    /// Every entity draws its noise from its own stream.
    pub fn oracle(world: &World, sigma: f64, seed: u64) -> Result<Self> {
        let mut queries = EmbeddingMatrix::new(world.topic_count);
        for q in &world.queries {
            let mut rng = rng::stream(seed, streams::ORACLE_EMBED, u64::from(q.query_id));
            queries.push(&oracle_embed(&q.topic_mix, sigma, &mut rng)?)?;
        }
        let mut videos = EmbeddingMatrix::new(world.topic_count);
        for v in &world.videos {
            let mut rng = rng::stream(seed, streams::ORACLE_EMBED, (1 << 32) | u64::from(v.video_id));
            videos.push(&oracle_embed(&v.topic_mix, sigma, &mut rng)?)?;
        }
        Ok(RelevanceSpace { queries, videos })
    }

    pub fn dim(&self) -> usize {
        self.videos.dim()
    }

    pub fn query(&self, q: QueryId) -> &[f32] {
        self.queries.row(q as usize)
    }

    pub fn video(&self, v: VideoId) -> &[f32] {
        self.videos.row(v as usize)
    }

    pub fn query_video(&self, q: QueryId, v: VideoId) -> f64 {
        dot_f32(self.query(q), self.video(v))
    }
}

/// Fraction of `(query, video)` pairs whose video ranks in the top `k` by
/// cosine against a pool made of itself and `pool_size − 1` other videos
/// drawn once, uniformly, for the whole evaluation.
pub fn sampled_recall(space: &RelevanceSpace, pairs: &[RelevancePair], pool_size: usize, k: usize, seed: u64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let n = space.videos.len();
    if pool_size < 2 || pool_size > n {
        return Err(Error::Config(format!("pool of {pool_size} from {n} videos")));
    }
    let mut rng = rng::stream(seed, streams::EVAL_SESSIONS, 1);
    let pool = rand::seq::index::sample(&mut rng, n, pool_size).into_vec();
    let mut hits = 0usize;
    for p in pairs {
        let target = space.query_video(p.query_id, p.video_id);
        let mut better = 0usize;
        let mut taken = 0usize;
        for &v in &pool {
            if v as u32 == p.video_id || taken == pool_size - 1 {
                continue;
            }
            taken += 1;
            let s = space.query_video(p.query_id, v as u32);
            if s > target || (s == target && (v as u32) < p.video_id) {
                better += 1;
            }
        }
        if better < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Capped recall against the topical relevant set: for each query, the share
/// of its `min(k, |R|)` reachable relevant videos found in the top `k` of a
/// shared random pool, where `R` holds pool videos whose dominant topic is one
/// of the query's intent topics.
pub fn topic_recall(space: &RelevanceSpace, world: &World, queries: &[QueryId], pool_size: usize, k: usize, seed: u64) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Data("no queries to evaluate".into()));
    }
    let n = space.videos.len();
    if pool_size == 0 || pool_size > n || k == 0 {
        return Err(Error::Config(format!("pool of {pool_size} from {n} videos with k = {k}")));
    }
    let mut rng = rng::stream(seed, streams::EVAL_SESSIONS, 2);
    let pool: Vec<u32> = rand::seq::index::sample(&mut rng, n, pool_size).into_iter().map(|v| v as u32).collect();
    let mut total = 0.0;
    let mut counted = 0usize;
    for &q in queries {
        let intents = world.query(q)?.intent_topics();
        let relevant = |v: u32| intents.contains(&world.videos[v as usize].dominant_topic());
        let reachable = pool.iter().filter(|&&v| relevant(v)).count().min(k);
        if reachable == 0 {
            continue;
        }
        let mut top = crate::topk::TopK::new(k);
        for &v in &pool {
            top.push(v, space.query_video(q, v));
        }
        let hits = top.into_sorted().iter().filter(|s| relevant(s.id)).count();
        total += hits as f64 / reachable as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Data("no query has a relevant video in the pool".into()));
    }
    Ok(total / counted as f64)
}
