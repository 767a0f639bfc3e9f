//! Personalized dense retrieval: a query-user tower that attends from the
//! query and profile over the query-relevant history, fused by an MLP into a
//! unit vector, scored by cosine against a video tower.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::{IndexedRandom, SliceRandom};

use super::qrcf::filter_relevant_behaviors;
use super::{CandidateSet, RetrieverKind};
use crate::ann::{AnnIndex, EmbeddingMatrix, SearchMode};
use crate::config::KeyValues;
use crate::encoders::RelevanceSpace;
use crate::error::{Error, Result};
use crate::features::VideoFeatures;
use crate::rng::{self, streams};
use crate::tensor::{
    adam_step, AdamConfig, Checkpoint, Embedding, Mlp, MultiHeadAttention, ParameterStore, Tape, Tensor, Var, XentRow,
};
use crate::world::{History, Logs, QueryId, UserId, VideoId, World, LONG_PLAY_S};

pub const OBJECTIVES: [&str; 4] = ["relevance", "click", "long_play", "like"];

#[derive(Debug, Clone, PartialEq)]
pub struct PdrConfig {
    pub id_dim: usize,
    pub profile_dim: usize,
    pub attention_dim: usize,
    pub heads: usize,
    pub fusion_dims: Vec<usize>,
    pub video_dims: Vec<usize>,
    pub tau: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub hard_negatives: usize,
    /// Objective weights in [`OBJECTIVES`] order.
    pub weights: [f64; 4],
    pub top_k: usize,
}

impl Default for PdrConfig {
    fn default() -> Self {
        PdrConfig {
            id_dim: 16,
            profile_dim: 4,
            attention_dim: 32,
            heads: 2,
            fusion_dims: vec![128, 64, 32],
            video_dims: vec![64, 32],
            tau: 0.05,
            lr: 1e-3,
            batch: 256,
            epochs: 3,
            hard_negatives: 1,
            weights: [1.0; 4],
            top_k: 100,
        }
    }
}

impl PdrConfig {
    pub const KEYS: &'static [&'static str] = &[
        "pdr.id_dim",
        "pdr.profile_dim",
        "pdr.attention_dim",
        "pdr.heads",
        "pdr.fusion_dims",
        "pdr.video_dims",
        "pdr.tau",
        "pdr.lr",
        "pdr.batch",
        "pdr.epochs",
        "pdr.hard_negatives",
        "pdr.weights",
        "pdr.top_k",
    ];

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.take("pdr.id_dim", &mut self.id_dim)?;
        kv.take("pdr.profile_dim", &mut self.profile_dim)?;
        kv.take("pdr.attention_dim", &mut self.attention_dim)?;
        kv.take("pdr.heads", &mut self.heads)?;
        kv.take_list("pdr.fusion_dims", &mut self.fusion_dims)?;
        kv.take_list("pdr.video_dims", &mut self.video_dims)?;
        kv.take("pdr.tau", &mut self.tau)?;
        kv.take("pdr.lr", &mut self.lr)?;
        kv.take("pdr.batch", &mut self.batch)?;
        kv.take("pdr.epochs", &mut self.epochs)?;
        kv.take("pdr.hard_negatives", &mut self.hard_negatives)?;
        let mut w = self.weights.to_vec();
        kv.take_list("pdr.weights", &mut w)?;
        self.weights = w
            .try_into()
            .map_err(|_| Error::Config("pdr.weights needs exactly four values".into()))?;
        kv.take("pdr.top_k", &mut self.top_k)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("pdr temperature must be positive, got {}", self.tau)));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) || self.weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("pdr objective weights must be >= 0 and not all zero".into()));
        }
        if self.fusion_dims.last() != self.video_dims.last() || self.fusion_dims.is_empty() {
            return Err(Error::Config("query-user and video towers must end in the same dimension".into()));
        }
        if self.batch < 2 || self.top_k == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("pdr batch >= 2, top_k >= 1 and lr > 0 required".into()));
        }
        Ok(())
    }
}

/// Query-user tower plus video tower with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PdrModel {
    pub config: PdrConfig,
    pub store: ParameterStore,
    gender: Embedding,
    age: Embedding,
    location: Embedding,
    user: Embedding,
    attention: MultiHeadAttention,
    fusion: Mlp,
    video_tower: Mlp,
    embed_dim: usize,
    video_feature_dim: usize,
}

/// Intermediate vectors of one query-user encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryUserParts {
    pub profile: Vec<f64>,
    pub behavior: Vec<f64>,
    pub query: Vec<f64>,
    pub output: Vec<f64>,
}

/// What the query-user tower consumes for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionInput {
    pub user_id: UserId,
    pub query_id: QueryId,
    pub behaviors: Vec<VideoId>,
}

struct Shape {
    users: usize,
    genders: usize,
    ages: usize,
    locations: usize,
    embed_dim: usize,
    video_feature_dim: usize,
}

impl PdrModel {
    pub fn new(world: &World, embed_dim: usize, video_feature_dim: usize, config: &PdrConfig, seed: u64) -> Result<Self> {
        let shape = Shape {
            users: world.users.len(),
            genders: world.genders as usize,
            ages: world.age_segments as usize,
            locations: world.locations as usize,
            embed_dim,
            video_feature_dim,
        };
        Self::build(&shape, config, seed)
    }

    fn build(s: &Shape, config: &PdrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = rng::stream(seed, streams::INIT, 10);
        let pd = config.profile_dim;
        let gender = Embedding::new(&mut store, "pdr.gender", s.genders, pd, &mut rng)?;
        let age = Embedding::new(&mut store, "pdr.age", s.ages, pd, &mut rng)?;
        let location = Embedding::new(&mut store, "pdr.location", s.locations, pd, &mut rng)?;
        let user = Embedding::new(&mut store, "pdr.user", s.users, config.id_dim, &mut rng)?;
        let profile_dim = 3 * pd + config.id_dim;
        let attention = MultiHeadAttention::new(
            &mut store,
            "pdr.attn",
            s.embed_dim + profile_dim,
            s.embed_dim,
            config.attention_dim,
            config.heads,
            &mut rng,
        )?;
        let fusion_in = profile_dim + config.attention_dim + s.embed_dim;
        let fusion = Mlp::new(&mut store, "pdr.fusion", fusion_in, &config.fusion_dims, false, true, &mut rng)?;
        let video_tower = Mlp::new(&mut store, "pdr.video", s.video_feature_dim, &config.video_dims, false, true, &mut rng)?;
        Ok(PdrModel {
            config: config.clone(),
            store,
            gender,
            age,
            location,
            user,
            attention,
            fusion,
            video_tower,
            embed_dim: s.embed_dim,
            video_feature_dim: s.video_feature_dim,
        })
    }

    pub fn output_dim(&self) -> usize {
        *self.config.fusion_dims.last().expect("validated")
    }

    fn profile(&self, tape: &mut Tape, world: &World, users: &[UserId]) -> Result<Var> {
        let profiles = users.iter().map(|&u| world.user(u)).collect::<Result<Vec<_>>>()?;
        let g = self.gender.forward(tape, &profiles.iter().map(|p| p.gender as usize).collect::<Vec<_>>())?;
        let a = self.age.forward(tape, &profiles.iter().map(|p| p.age_segment as usize).collect::<Vec<_>>())?;
        let l = self.location.forward(tape, &profiles.iter().map(|p| p.location as usize).collect::<Vec<_>>())?;
        let id = self.user.forward(tape, &profiles.iter().map(|p| p.user_id as usize).collect::<Vec<_>>())?;
        tape.concat_cols(&[g, a, l, id])
    }

    /// Encodes many requests at once; returns `(E_p, E_b, E_q, E_qu)`.
    pub(crate) fn encode_sessions(
        &self,
        tape: &mut Tape,
        world: &World,
        space: &RelevanceSpace,
        inputs: &[SessionInput],
    ) -> Result<(Var, Var, Var, Var)> {
        if space.dim() != self.embed_dim {
            return Err(Error::Shape(format!("model expects {}-d relevance space, got {}", self.embed_dim, space.dim())));
        }
        let n = inputs.len();
        let users: Vec<UserId> = inputs.iter().map(|s| s.user_id).collect();
        let e_p = self.profile(tape, world, &users)?;
        let mut q_rows = Vec::with_capacity(n * self.embed_dim);
        for s in inputs {
            world.query(s.query_id)?;
            q_rows.extend(space.query(s.query_id).iter().map(|&x| f64::from(x)));
        }
        let e_q = tape.constant(Tensor::matrix(n, self.embed_dim, q_rows)?)?;

        // each request attends only over its own behaviours
        let active: Vec<usize> = (0..n).filter(|&i| !inputs[i].behaviors.is_empty()).collect();
        let ad = self.config.attention_dim;
        let e_b = if active.is_empty() {
            tape.constant(Tensor::zeros(&[n, ad]))?
        } else {
            let mut keys = Vec::new();
            let mut segments = Vec::with_capacity(active.len());
            let mut offset = 0;
            for &i in &active {
                for &b in &inputs[i].behaviors {
                    world.video(b)?;
                    keys.extend(space.video(b).iter().map(|&x| f64::from(x)));
                }
                segments.push((offset..offset + inputs[i].behaviors.len()).collect());
                offset += inputs[i].behaviors.len();
            }
            let kv = tape.constant(Tensor::matrix(offset, self.embed_dim, keys)?)?;
            let qp = tape.concat_cols(&[e_q, e_p])?;
            let q_active = if active.len() == n { qp } else { tape.select_rows(qp, &active)? };
            let att = self.attention.forward_sparse(tape, q_active, kv, kv, Rc::new(segments))?;
            if active.len() == n {
                att
            } else {
                let zero = tape.constant(Tensor::zeros(&[1, ad]))?;
                let stacked = tape.concat_rows(&[att, zero])?;
                let mut map = vec![active.len(); n];
                for (r, &i) in active.iter().enumerate() {
                    map[i] = r;
                }
                tape.select_rows(stacked, &map)?
            }
        };
        let fused = tape.concat_cols(&[e_p, e_b, e_q])?;
        let e_qu = self.fusion.forward(tape, fused)?;
        Ok((e_p, e_b, e_q, e_qu))
    }

    pub(crate) fn encode_videos_var(&self, tape: &mut Tape, feats: &VideoFeatures, ids: &[VideoId]) -> Result<Var> {
        if feats.dim() != self.video_feature_dim {
            return Err(Error::Shape(format!("model expects {}-d video features, got {}", self.video_feature_dim, feats.dim())));
        }
        let x = tape.constant(Tensor::matrix(ids.len(), feats.dim(), feats.gather(ids))?)?;
        self.video_tower.forward(tape, x)
    }

    pub fn encode_query_user_parts(&self, world: &World, space: &RelevanceSpace, input: &SessionInput) -> Result<QueryUserParts> {
        let mut tape = Tape::new(&self.store);
        let (p, b, q, o) = self.encode_sessions(&mut tape, world, space, std::slice::from_ref(input))?;
        Ok(QueryUserParts {
            profile: tape.value(p).data().to_vec(),
            behavior: tape.value(b).data().to_vec(),
            query: tape.value(q).data().to_vec(),
            output: tape.value(o).data().to_vec(),
        })
    }

    /// `E_qu` for one request.
    pub fn encode_query_user(&self, world: &World, space: &RelevanceSpace, input: &SessionInput) -> Result<Vec<f64>> {
        Ok(self.encode_query_user_parts(world, space, input)?.output)
    }

    /// Video-tower output for every video, in id order.
    pub fn video_embeddings(&self, feats: &VideoFeatures) -> Result<EmbeddingMatrix> {
        let mut out = EmbeddingMatrix::new(self.output_dim());
        let ids: Vec<VideoId> = (0..feats.len() as VideoId).collect();
        for chunk in ids.chunks(2048) {
            let mut tape = Tape::new(&self.store);
            let v = self.encode_videos_var(&mut tape, feats, chunk)?;
            for r in 0..chunk.len() {
                out.push(tape.value(v).row(r))?;
            }
        }
        Ok(out)
    }

    pub fn build_index(&self, feats: &VideoFeatures, graph: Option<crate::ann::HnswConfig>) -> Result<AnnIndex> {
        let vectors = self.video_embeddings(feats)?;
        let index = AnnIndex::new((0..vectors.len() as u32).collect(), vectors)?;
        match graph {
            Some(cfg) => index.with_graph(cfg),
            None => Ok(index),
        }
    }

    pub fn to_checkpoint(&self, world: &World) -> Checkpoint {
        let c = &self.config;
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let meta = vec![
            ("model", "pdr".to_string()),
            ("users", world.users.len().to_string()),
            ("genders", world.genders.to_string()),
            ("ages", world.age_segments.to_string()),
            ("locations", world.locations.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("video_feature_dim", self.video_feature_dim.to_string()),
            ("id_dim", c.id_dim.to_string()),
            ("profile_dim", c.profile_dim.to_string()),
            ("attention_dim", c.attention_dim.to_string()),
            ("heads", c.heads.to_string()),
            ("fusion_dims", join(&c.fusion_dims)),
            ("video_dims", join(&c.video_dims)),
            ("tau", c.tau.to_string()),
            ("lr", c.lr.to_string()),
            ("batch", c.batch.to_string()),
            ("epochs", c.epochs.to_string()),
            ("hard_negatives", c.hard_negatives.to_string()),
            ("weights", c.weights.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
            ("top_k", c.top_k.to_string()),
        ];
        Checkpoint {
            meta: meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            store: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("model") != Some("pdr") {
            return Err(Error::Data("checkpoint does not hold a pdr model".into()));
        }
        let mut kv = KeyValues::default();
        for (k, v) in &ck.meta {
            kv.insert(k, v);
        }
        let num = |k: &str| -> Result<usize> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("pdr checkpoint lacks numeric `{k}`")))
        };
        let mut config = PdrConfig::default();
        let prefixed = KeyValues::parse(
            &PdrConfig::KEYS
                .iter()
                .filter_map(|k| kv.get(&k[4..]).map(|v| format!("{k} = {v}\n")))
                .collect::<String>(),
        )?;
        config.apply(&prefixed)?;
        let shape = Shape {
            users: num("users")?,
            genders: num("genders")?,
            ages: num("ages")?,
            locations: num("locations")?,
            embed_dim: num("embed_dim")?,
            video_feature_dim: num("video_feature_dim")?,
        };
        let mut model = Self::build(&shape, &config, 0)?;
        model.store.load_values(&ck.store)?;
        Ok(model)
    }
}

/// One clicked search impression with its objective labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PdrExample {
    pub session: usize,
    pub video_id: VideoId,
    /// In [`OBJECTIVES`] order.
    pub labels: [bool; 4],
    /// Impressed-but-unclicked videos of the same session.
    pub hard_negatives: Vec<VideoId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdrDataset {
    pub sessions: Vec<SessionInput>,
    pub examples: Vec<PdrExample>,
}

/// Relevance positive: clicked, and the video's dominant topic is one of the
/// query's intent topics.
pub fn relevance_label(world: &World, q: QueryId, v: VideoId) -> Result<bool> {
    Ok(world.query(q)?.intent_topics().contains(&world.video(v)?.dominant_topic()))
}

/// Builds training examples from every search session in `logs` with at least
/// one click. `B_rel` is computed from history strictly before the session.
pub fn build_pdr_dataset(
    world: &World,
    logs: &Logs,
    history: &History,
    space: &RelevanceSpace,
    k: usize,
    epsilon: f64,
    hard_negatives: usize,
    seed: u64,
) -> Result<PdrDataset> {
    let mut sessions = Vec::new();
    let mut examples = Vec::new();
    for s in &logs.sessions {
        let imps = logs.impressions(s);
        if !imps.iter().any(|e| e.clicked) {
            continue;
        }
        let brel = filter_relevant_behaviors(space, s.user_id, s.query_id, history.before(s.user_id, s.timestamp), k, epsilon)?;
        let sid = sessions.len();
        sessions.push(SessionInput { user_id: s.user_id, query_id: s.query_id, behaviors: brel.video_ids() });
        let unclicked: Vec<VideoId> = imps.iter().filter(|e| !e.clicked).map(|e| e.video_id).collect();
        let mut rng = rng::stream(seed, streams::BATCHES, (2 << 40) | u64::from(s.session_id));
        for e in imps.iter().filter(|e| e.clicked) {
            let hard: Vec<VideoId> = unclicked.choose_multiple(&mut rng, hard_negatives).copied().collect();
            examples.push(PdrExample {
                session: sid,
                video_id: e.video_id,
                labels: [relevance_label(world, s.query_id, e.video_id)?, true, e.watch_s >= LONG_PLAY_S, e.liked],
                hard_negatives: hard,
            });
        }
    }
    Ok(PdrDataset { sessions, examples })
}

#[derive(Debug, Clone)]
pub struct PdrLoss {
    pub total: Var,
    /// Per objective, `None` when it had no positive or zero weight.
    pub objectives: [Option<Var>; 4],
}

/// `Σ_o w_o L_o` over the examples at `batch`. Each positive competes with
/// the other examples' videos (excluding its own session and duplicates of
/// itself) and with its own hard negatives. Returns `None` when no weighted
/// objective has a positive.
pub fn pdr_batch_loss(
    model: &PdrModel,
    world: &World,
    space: &RelevanceSpace,
    feats: &VideoFeatures,
    data: &PdrDataset,
    batch: &[usize],
    tape: &mut Tape,
) -> Result<Option<PdrLoss>> {
    let cfg = &model.config;
    let examples: Vec<&PdrExample> = batch.iter().map(|&i| &data.examples[i]).collect();
    let has_positive = (0..4).any(|o| cfg.weights[o] > 0.0 && examples.iter().any(|e| e.labels[o]));
    if !has_positive {
        return Ok(None);
    }
    let mut local: BTreeMap<usize, usize> = BTreeMap::new();
    let mut inputs = Vec::new();
    for e in &examples {
        local.entry(e.session).or_insert_with(|| {
            inputs.push(data.sessions[e.session].clone());
            inputs.len() - 1
        });
    }
    let (_, _, _, e_qu) = model.encode_sessions(tape, world, space, &inputs)?;
    let rows: Vec<usize> = examples.iter().map(|e| local[&e.session]).collect();
    let queries = tape.select_rows(e_qu, &rows)?;
    let b = examples.len();
    let mut video_ids: Vec<VideoId> = examples.iter().map(|e| e.video_id).collect();
    let mut hard_cols: Vec<Vec<usize>> = Vec::with_capacity(b);
    for e in &examples {
        let start = video_ids.len();
        video_ids.extend(&e.hard_negatives);
        hard_cols.push((start..video_ids.len()).collect());
    }
    let videos = model.encode_videos_var(tape, feats, &video_ids)?;
    let logits = tape.matmul_bt(queries, videos)?;
    let logits = tape.scale(logits, 1.0 / cfg.tau)?;
    let mut objectives: [Option<Var>; 4] = [None; 4];
    let mut total: Option<Var> = None;
    for o in 0..4 {
        if cfg.weights[o] == 0.0 {
            continue;
        }
        let positives: Vec<usize> = (0..b).filter(|&i| examples[i].labels[o]).collect();
        if positives.is_empty() {
            continue;
        }
        let w = 1.0 / positives.len() as f64;
        let xent_rows = positives
            .iter()
            .map(|&i| {
                let mut neg_cols: Vec<usize> = (0..b)
                    .filter(|&j| {
                        j != i && examples[j].session != examples[i].session && examples[j].video_id != examples[i].video_id
                    })
                    .collect();
                neg_cols.extend(hard_cols[i].iter().copied());
                XentRow { row: i, pos_col: i, neg_cols, weight: w }
            })
            .collect();
        let l = tape.softmax_xent(logits, xent_rows)?;
        objectives[o] = Some(l);
        let weighted = tape.scale(l, cfg.weights[o])?;
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok(total.map(|total| PdrLoss { total, objectives }))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PdrTrainReport {
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub skipped_batches: usize,
    pub examples: usize,
}

pub fn train_pdr_on(
    model: &mut PdrModel,
    world: &World,
    space: &RelevanceSpace,
    feats: &VideoFeatures,
    data: &PdrDataset,
    seed: u64,
) -> Result<PdrTrainReport> {
    if data.examples.is_empty() {
        return Err(Error::Data("no clicked search impressions to train the personalized retriever".into()));
    }
    let adam = AdamConfig { lr: model.config.lr, ..AdamConfig::default() };
    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    let mut report = PdrTrainReport { examples: data.examples.len(), ..PdrTrainReport::default() };
    for epoch in 0..model.config.epochs {
        let mut rng = rng::stream(seed, streams::BATCHES, (3 << 40) | epoch as u64);
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(model.config.batch) {
            let grads = {
                let mut tape = Tape::new(&model.store);
                match pdr_batch_loss(model, world, space, feats, data, batch, &mut tape)? {
                    Some(loss) => {
                        sum += tape.value(loss.total).item();
                        count += 1;
                        Some(tape.backward(loss.total)?)
                    }
                    None => None,
                }
            };
            match grads {
                Some(g) => {
                    model.store.accumulate(&g);
                    adam_step(&mut model.store, &adam);
                }
                None => report.skipped_batches += 1,
            }
        }
        report.epoch_loss.push(if count == 0 { 0.0 } else { sum / count as f64 });
    }
    Ok(report)
}

/// Builds the dataset from `logs` and trains a fresh model.
#[allow(clippy::too_many_arguments)]
pub fn train_pdr(
    world: &World,
    logs: &Logs,
    history: &History,
    space: &RelevanceSpace,
    feats: &VideoFeatures,
    config: &PdrConfig,
    k: usize,
    epsilon: f64,
    seed: u64,
) -> Result<(PdrModel, PdrTrainReport)> {
    let data = build_pdr_dataset(world, logs, history, space, k, epsilon, config.hard_negatives, seed)?;
    let mut model = PdrModel::new(world, space.dim(), feats.dim(), config, seed)?;
    let report = train_pdr_on(&mut model, world, space, feats, &data, seed)?;
    Ok((model, report))
}

/// Top-`top_k` videos by cosine against the request's `E_qu`.
pub fn pdr_retrieve(
    model: &PdrModel,
    index: &AnnIndex,
    world: &World,
    space: &RelevanceSpace,
    input: &SessionInput,
    mode: SearchMode,
) -> Result<CandidateSet> {
    let e = model.encode_query_user(world, space, input)?;
    let hits = index.search(&e, model.config.top_k, mode)?;
    Ok(CandidateSet::from_scored(input.query_id, input.user_id, RetrieverKind::Pdr, &hits))
}
