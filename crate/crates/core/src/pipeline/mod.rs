//! End-to-end orchestration: training every component from logs, running
//! retrieve → merge → rank for a request, and replaying arms against the
//! engagement oracle.

pub mod abtest;
pub mod metrics;
pub mod persist;

use std::fmt;
use std::str::FromStr;

use crate::ann::{dot_f32, AnnIndex, HnswConfig, SearchMode};
use crate::config::KeyValues;
use crate::encoders::{train_relevance_encoder, EmbeddingMode, EncoderConfig, RelevanceEncoder, RelevanceSpace};
use crate::error::{Error, Result};
use crate::features::VideoFeatures;
use crate::ranking::qin::{QinConfig, QinContext, QinModel, RankRequest};
use crate::ranking::train::train_qin;
use crate::retrieval::bm25::{Bm25Params, InvertedIndex};
use crate::retrieval::pdr::{pdr_retrieve, train_pdr, PdrConfig, PdrModel, SessionInput};
use crate::retrieval::qrcf::{filter_relevant_behaviors, qrcf_retrieve, EmbeddingTable, QrcfConfig, SimilarityTables};
use crate::retrieval::swing::{build_click_graph, build_swing_table};
use crate::retrieval::{merge_candidates, CandidateSet, MergedCandidate, RetrieverKind};
use crate::rng::{self, streams};
use crate::topk::{sort_ranked, Scored};
use crate::world::{engagement_oracle, History, LogConfig, Logs, QueryId, UserId, VideoId, World, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RankerKind {
    /// Cosine between the query and video in the relevance space.
    Relevance,
    Qin,
    /// Sorts by the true first-position click probability; an upper bound.
    Oracle,
}

impl RankerKind {
    pub fn name(self) -> &'static str {
        match self {
            RankerKind::Relevance => "relevance",
            RankerKind::Qin => "qin",
            RankerKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for RankerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RankerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [RankerKind::Relevance, RankerKind::Qin, RankerKind::Oracle]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ranker `{s}`")))
    }
}

/// One arm: which retrievers feed the pool and which ranker orders it.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub name: String,
    pub retrievers: Vec<RetrieverKind>,
    pub ranker: RankerKind,
    pub page_size: usize,
    /// Output size of the lexical and baseline dense retrievers.
    pub baseline_k: usize,
    /// Per-source cap applied to each candidate list before the union.
    pub merge_cap: usize,
    pub mode: SearchMode,
}

impl PipelineConfig {
    fn preset(name: &str, retrievers: &[RetrieverKind], ranker: RankerKind) -> Self {
        PipelineConfig {
            name: name.to_string(),
            retrievers: retrievers.to_vec(),
            ranker,
            page_size: 10,
            baseline_k: 100,
            merge_cap: 100,
            mode: SearchMode::Exact,
        }
    }

    /// Non-personalized lexical and dense retrieval with the relevance ranker.
    pub fn base() -> Self {
        Self::preset("base", &[RetrieverKind::Bm25, RetrieverKind::DrBaseline], RankerKind::Relevance)
    }

    /// The base arm plus collaborative filtering and personalized dense retrieval.
    pub fn qrcf_pdr() -> Self {
        Self::preset("qrcf_pdr", &RetrieverKind::ALL, RankerKind::Relevance)
    }

    /// The base retrievers with the interest network as ranker.
    pub fn qin() -> Self {
        Self::preset("qin", &[RetrieverKind::Bm25, RetrieverKind::DrBaseline], RankerKind::Qin)
    }

    /// Personalized retrieval and ranking together.
    pub fn pr2() -> Self {
        Self::preset("pr2", &RetrieverKind::ALL, RankerKind::Qin)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "qrcf_pdr" => Ok(Self::qrcf_pdr()),
            "qin" => Ok(Self::qin()),
            "pr2" => Ok(Self::pr2()),
            _ => Err(Error::Config(format!("unknown pipeline preset `{name}`"))),
        }
    }

    pub const KEYS: &'static [&'static str] =
        &["pipeline.retrievers", "pipeline.ranker", "pipeline.page_size", "pipeline.baseline_k", "pipeline.merge_cap", "pipeline.mode"];

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.take_list("pipeline.retrievers", &mut self.retrievers)?;
        kv.take("pipeline.ranker", &mut self.ranker)?;
        kv.take("pipeline.page_size", &mut self.page_size)?;
        kv.take("pipeline.baseline_k", &mut self.baseline_k)?;
        kv.take("pipeline.merge_cap", &mut self.merge_cap)?;
        kv.take("pipeline.mode", &mut self.mode)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.page_size == 0 || self.retrievers.is_empty() || self.baseline_k == 0 || self.merge_cap == 0 {
            return Err(Error::Config("pipeline needs a retriever, page_size >= 1 and positive caps".into()));
        }
        Ok(())
    }
}

/// Settings for training every component of a [`System`].
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub world: WorldConfig,
    pub logs: LogConfig,
    pub days: u32,
    pub embedding: EmbeddingMode,
    pub encoder: EncoderConfig,
    pub qrcf: QrcfConfig,
    pub pdr: PdrConfig,
    pub qin: QinConfig,
    pub bm25: Bm25Params,
    pub hnsw: HnswConfig,
    /// Neighbour search used to precompute the embedding similarity table.
    pub table_mode: SearchMode,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            world: WorldConfig::default(),
            logs: LogConfig::default(),
            days: 15,
            embedding: EmbeddingMode::Trained,
            encoder: EncoderConfig::default(),
            qrcf: QrcfConfig::default(),
            pdr: PdrConfig::default(),
            qin: QinConfig::default(),
            bm25: Bm25Params::default(),
            hnsw: HnswConfig::default(),
            table_mode: SearchMode::Approx,
        }
    }
}

impl SystemConfig {
    pub fn known_keys() -> Vec<&'static str> {
        let mut keys = vec!["system.days", "system.embedding", "system.table_mode", "bm25.k1", "bm25.b"];
        for set in [
            WorldConfig::KEYS,
            crate::world::OracleConfig::KEYS,
            LogConfig::KEYS,
            EncoderConfig::KEYS,
            QrcfConfig::KEYS,
            PdrConfig::KEYS,
            QinConfig::KEYS,
            PipelineConfig::KEYS,
        ] {
            keys.extend_from_slice(set);
        }
        keys
    }

    /// Applies every recognised key; unknown keys are an error.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.check_known(&Self::known_keys())?;
        self.world.apply(kv)?;
        self.world.validate()?;
        self.logs.apply(kv)?;
        kv.take("system.days", &mut self.days)?;
        kv.take("system.embedding", &mut self.embedding)?;
        kv.take("system.table_mode", &mut self.table_mode)?;
        kv.take("bm25.k1", &mut self.bm25.k1)?;
        kv.take("bm25.b", &mut self.bm25.b)?;
        self.encoder.apply(kv)?;
        self.qrcf.apply(kv)?;
        self.pdr.apply(kv)?;
        self.qin.apply(kv)?;
        if self.days < 2 {
            return Err(Error::Config("system.days must be >= 2: one day is held out".into()));
        }
        Ok(())
    }
}

/// A search request replayed through an arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchRequest {
    pub session_id: u32,
    pub user_id: UserId,
    pub query_id: QueryId,
    pub timestamp: u64,
}

/// The search sessions of `day`; at most `max` of them, sampled without
/// replacement and returned in session order.
pub fn eval_requests(logs: &Logs, day: u32, max: usize, seed: u64) -> Vec<SearchRequest> {
    let mut all: Vec<SearchRequest> = logs
        .sessions
        .iter()
        .filter(|s| s.day == day)
        .map(|s| SearchRequest { session_id: s.session_id, user_id: s.user_id, query_id: s.query_id, timestamp: s.timestamp })
        .collect();
    if all.len() > max {
        let mut r = rng::stream(seed, streams::EVAL_SESSIONS, u64::from(day));
        let mut picked = rand::seq::index::sample(&mut r, all.len(), max).into_vec();
        picked.sort_unstable();
        all = picked.into_iter().map(|i| all[i]).collect();
    }
    all
}

/// Every trained artifact an arm may use.
#[derive(Debug, Clone)]
pub struct System {
    pub world: World,
    pub logs: Logs,
    /// Days `0..train_end` trained the models; later days are held out.
    pub train_end: u32,
    pub history: History,
    pub space: RelevanceSpace,
    pub dr_space: RelevanceSpace,
    pub dr_index: AnnIndex,
    pub bm25: InvertedIndex,
    pub tables: SimilarityTables,
    pub feats: VideoFeatures,
    pub pdr: PdrModel,
    pub pdr_index: AnnIndex,
    pub qin: QinModel,
    pub qrcf: QrcfConfig,
}

/// A first page with the candidate lists that fed it.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub request: SearchRequest,
    pub page: Vec<Scored>,
    pub candidates: Vec<CandidateSet>,
    pub pool_size: usize,
}

/// Embedding spaces trained from the training logs.
#[derive(Debug, Clone)]
pub struct Spaces {
    /// Used by the relevance ranker, QRCF and the GSU.
    pub space: RelevanceSpace,
    /// A separately trained text-only space for the non-personalized dense
    /// retriever.
    pub dr_space: RelevanceSpace,
    /// Absent when the relevance space is the oracle stand-in.
    pub encoder: Option<RelevanceEncoder>,
    pub dr_encoder: RelevanceEncoder,
}

pub fn train_spaces(world: &World, train: &Logs, cfg: &SystemConfig, seed: u64) -> Result<Spaces> {
    let (space, encoder) = match cfg.embedding {
        EmbeddingMode::Trained => {
            let enc = train_relevance_encoder(world, train, &cfg.encoder, seed)?;
            (RelevanceSpace::from_encoder(&enc, world)?, Some(enc))
        }
        EmbeddingMode::Oracle { sigma } => (RelevanceSpace::oracle(world, sigma, seed)?, None),
    };
    let text = EncoderConfig { text_only: true, ..cfg.encoder.clone() };
    let dr_encoder = train_relevance_encoder(world, train, &text, rng::derive(seed, streams::INIT, 30))?;
    let dr_space = RelevanceSpace::from_encoder(&dr_encoder, world)?;
    Ok(Spaces { space, dr_space, encoder, dr_encoder })
}

pub(crate) fn index_of(vectors: &crate::ann::EmbeddingMatrix) -> Result<AnnIndex> {
    AnnIndex::new((0..vectors.len() as u32).collect(), vectors.clone())
}

/// Trains and indexes everything from `logs`, holding out its last day.
pub fn build_system(world: World, logs: Logs, cfg: &SystemConfig, seed: u64) -> Result<System> {
    if logs.days < 2 {
        return Err(Error::Config("need at least two log days: one is held out".into()));
    }
    let train_end = logs.days - 1;
    let train = logs.until_day(train_end);
    let history = History::build(world.users.len(), &logs);
    let Spaces { space, dr_space, .. } = train_spaces(&world, &train, cfg, seed)?;
    let dr_index = index_of(&dr_space.videos)?;
    let bm25 = InvertedIndex::build(&world, cfg.bm25)?;
    let feats = VideoFeatures::build(&world, &space, &train)?;
    let tables = build_tables(&train, &space, &cfg.qrcf, cfg.hnsw, cfg.table_mode)?;
    let (pdr, _) = train_pdr(&world, &train, &history, &space, &feats, &cfg.pdr, cfg.qrcf.k, cfg.qrcf.epsilon, seed)?;
    let pdr_index = pdr.build_index(&feats, None)?;
    let ctx = QinContext { world: &world, space: &space, feats: &feats, history: &history };
    let (qin, _) = train_qin(&ctx, &logs, train_end, &cfg.qin, seed)?;
    Ok(System {
        world,
        logs,
        train_end,
        history,
        space,
        dr_space,
        dr_index,
        bm25,
        tables,
        feats,
        pdr,
        pdr_index,
        qin,
        qrcf: cfg.qrcf.clone(),
    })
}

/// Swing table from the training clicks and an embedding table for every
/// video some user has watched.
pub fn build_tables(
    train: &Logs,
    space: &RelevanceSpace,
    qrcf: &QrcfConfig,
    hnsw: HnswConfig,
    mode: SearchMode,
) -> Result<SimilarityTables> {
    let graph = build_click_graph(train);
    let swing = build_swing_table(&graph, &qrcf.swing, qrcf.table_n)?;
    let mut index = index_of(&space.videos)?;
    if mode == SearchMode::Approx {
        index = index.with_graph(hnsw)?;
    }
    let mut watched: Vec<VideoId> = train.events.iter().filter(|e| e.clicked).map(|e| e.video_id).collect();
    watched.sort_unstable();
    watched.dedup();
    let embedding = EmbeddingTable::build(&index, watched, qrcf.table_n, mode)?;
    Ok(SimilarityTables { swing, embedding })
}

impl System {
    pub fn qin_context(&self) -> QinContext<'_> {
        QinContext { world: &self.world, space: &self.space, feats: &self.feats, history: &self.history }
    }

    /// Candidate list of one retriever, best first.
    pub fn retrieve(&self, kind: RetrieverKind, req: &SearchRequest, cfg: &PipelineConfig) -> Result<CandidateSet> {
        let q = self.world.query(req.query_id)?;
        self.world.user(req.user_id)?;
        let (u, qid) = (req.user_id, req.query_id);
        let set = match kind {
            RetrieverKind::Bm25 => CandidateSet::from_scored(qid, u, kind, &self.bm25.retrieve(&q.token_bag, cfg.baseline_k)),
            RetrieverKind::DrBaseline => {
                let hits = self.dr_index.search_f32(self.dr_space.query(qid), cfg.baseline_k, cfg.mode)?;
                CandidateSet::from_scored(qid, u, kind, &hits)
            }
            RetrieverKind::QrcfSwing | RetrieverKind::QrcfEmb => {
                let brel = self.relevant_behaviors(req)?;
                let qcfg = QrcfConfig {
                    use_swing: kind == RetrieverKind::QrcfSwing,
                    use_embedding: kind == RetrieverKind::QrcfEmb,
                    ..self.qrcf.clone()
                };
                qrcf_retrieve(&brel, &self.tables, &qcfg)
            }
            RetrieverKind::Pdr => {
                let behaviors = self.relevant_behaviors(req)?.video_ids();
                let input = SessionInput { user_id: u, query_id: qid, behaviors };
                pdr_retrieve(&self.pdr, &self.pdr_index, &self.world, &self.space, &input, cfg.mode)?
            }
        };
        Ok(set)
    }

    fn relevant_behaviors(&self, req: &SearchRequest) -> Result<crate::retrieval::qrcf::RelevantBehaviorSet> {
        filter_relevant_behaviors(
            &self.space,
            req.user_id,
            req.query_id,
            self.history.before(req.user_id, req.timestamp),
            self.qrcf.k,
            self.qrcf.epsilon,
        )
    }

    /// Orders the merged pool; returns `(video, ranker score)` best first.
    pub fn rank(&self, ranker: RankerKind, req: &SearchRequest, pool: &[MergedCandidate]) -> Result<Vec<Scored>> {
        if pool.is_empty() {
            return Ok(Vec::new());
        }
        let mut scored: Vec<Scored> = match ranker {
            RankerKind::Relevance => {
                let q = self.space.query(req.query_id);
                pool.iter().map(|c| Scored::new(c.video_id, dot_f32(q, self.space.video(c.video_id)))).collect()
            }
            RankerKind::Oracle => {
                let user = self.world.user(req.user_id)?;
                let query = self.world.query(req.query_id)?;
                pool.iter()
                    .map(|c| {
                        let v = self.world.video(c.video_id)?;
                        Ok(Scored::new(c.video_id, engagement_oracle(&self.world.oracle, user, Some(query), v, 1).p_click))
                    })
                    .collect::<Result<_>>()?
            }
            RankerKind::Qin => {
                let request = RankRequest {
                    user_id: req.user_id,
                    query_id: req.query_id,
                    timestamp: req.timestamp,
                    candidates: pool.iter().map(|c| c.video_id).collect(),
                };
                let ranked = self.qin.rank_candidates(&self.qin_context(), &request)?;
                return Ok(ranked.items.iter().map(|i| Scored::new(i.video_id, i.fused_score)).collect());
            }
        };
        sort_ranked(&mut scored);
        Ok(scored)
    }

    /// Retrieve from every enabled source, cap and merge, rank, cut the page.
    pub fn run_pipeline(&self, cfg: &PipelineConfig, req: &SearchRequest) -> Result<PipelineOutput> {
        cfg.validate()?;
        let mut candidates = Vec::with_capacity(cfg.retrievers.len());
        for &kind in &cfg.retrievers {
            let mut set = self.retrieve(kind, req, cfg)?;
            set.entries.truncate(cfg.merge_cap);
            candidates.push(set);
        }
        let pool = merge_candidates(&candidates);
        let mut page = self.rank(cfg.ranker, req, &pool)?;
        page.truncate(cfg.page_size);
        Ok(PipelineOutput { request: *req, page, candidates, pool_size: pool.len() })
    }

    pub fn run_all(&self, cfg: &PipelineConfig, requests: &[SearchRequest]) -> Result<Vec<PipelineOutput>> {
        requests.iter().map(|r| self.run_pipeline(cfg, r)).collect()
    }
}
