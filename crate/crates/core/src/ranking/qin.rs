//! The query-dominant interest network: three search-unit branches over the
//! lifelong history, a real-time branch over the last few watches, and a
//! multi-gate mixture of experts over their concatenation with side features.

use std::rc::Rc;

use super::gsu::{top_by_score, GsuConfig, GsuMode};
use super::{fused_score, sort_ranked_items, FusedRankConfig, RankedItem, RankedList, TASK_COUNT};
use crate::ann::dot_f32;
use crate::config::KeyValues;
use crate::encoders::RelevanceSpace;
use crate::error::{Error, Result};
use crate::features::VideoFeatures;
use crate::rng::{self, streams};
use crate::tensor::{Checkpoint, Embedding, Mmoe, MmoeConfig, MultiHeadAttention, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::world::{History, QueryId, UserId, VideoId, World};

#[derive(Debug, Clone, PartialEq)]
pub struct QinConfig {
    pub gsu: GsuConfig,
    pub branches: Vec<GsuMode>,
    pub realtime: bool,
    pub recent: usize,
    pub attention_dim: usize,
    pub heads: usize,
    pub id_dim: usize,
    pub profile_dim: usize,
    pub experts: usize,
    pub expert_dims: Vec<usize>,
    pub tower_dims: Vec<usize>,
    pub rcr_alpha: f64,
    pub lr: f64,
    pub batch_sessions: usize,
    pub epochs: usize,
    /// Training uses the search sessions of this many most recent log days.
    pub train_days: u32,
    pub fused: FusedRankConfig,
}

impl Default for QinConfig {
    fn default() -> Self {
        QinConfig {
            gsu: GsuConfig::default(),
            branches: GsuMode::ALL.to_vec(),
            realtime: true,
            recent: 10,
            attention_dim: 32,
            heads: 2,
            id_dim: 16,
            profile_dim: 4,
            experts: 4,
            expert_dims: vec![64, 32],
            tower_dims: vec![32, 16],
            rcr_alpha: 1.0,
            lr: 1e-3,
            batch_sessions: 32,
            epochs: 2,
            train_days: 7,
            fused: FusedRankConfig::default(),
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl QinConfig {
    /// The full-size mixture: 8 experts of [512, 256, 128], towers [128, 64].
    pub fn production() -> Self {
        QinConfig {
            experts: 8,
            expert_dims: vec![512, 256, 128],
            tower_dims: vec![128, 64],
            ..QinConfig::default()
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "qin.stage1_k",
        "qin.stage2_k",
        "qin.literal_nesting",
        "qin.branches",
        "qin.realtime",
        "qin.recent",
        "qin.attention_dim",
        "qin.heads",
        "qin.id_dim",
        "qin.profile_dim",
        "qin.experts",
        "qin.expert_dims",
        "qin.tower_dims",
        "qin.rcr_alpha",
        "qin.lr",
        "qin.batch_sessions",
        "qin.epochs",
        "qin.train_days",
        "qin.fused_alpha",
    ];

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.take("qin.stage1_k", &mut self.gsu.stage1_k)?;
        kv.take("qin.stage2_k", &mut self.gsu.stage2_k)?;
        kv.take("qin.literal_nesting", &mut self.gsu.literal_nesting)?;
        kv.take_list("qin.branches", &mut self.branches)?;
        kv.take("qin.realtime", &mut self.realtime)?;
        kv.take("qin.recent", &mut self.recent)?;
        kv.take("qin.attention_dim", &mut self.attention_dim)?;
        kv.take("qin.heads", &mut self.heads)?;
        kv.take("qin.id_dim", &mut self.id_dim)?;
        kv.take("qin.profile_dim", &mut self.profile_dim)?;
        kv.take("qin.experts", &mut self.experts)?;
        kv.take_list("qin.expert_dims", &mut self.expert_dims)?;
        kv.take_list("qin.tower_dims", &mut self.tower_dims)?;
        kv.take("qin.rcr_alpha", &mut self.rcr_alpha)?;
        kv.take("qin.lr", &mut self.lr)?;
        kv.take("qin.batch_sessions", &mut self.batch_sessions)?;
        kv.take("qin.epochs", &mut self.epochs)?;
        kv.take("qin.train_days", &mut self.train_days)?;
        let mut alpha = self.fused.alpha.to_vec();
        kv.take_list("qin.fused_alpha", &mut alpha)?;
        self.fused.alpha = alpha
            .try_into()
            .map_err(|_| Error::Config(format!("qin.fused_alpha needs exactly {TASK_COUNT} values")))?;
        self.validate()
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("qin.stage1_k", self.gsu.stage1_k);
        kv.insert("qin.stage2_k", self.gsu.stage2_k);
        kv.insert("qin.literal_nesting", self.gsu.literal_nesting);
        kv.insert("qin.branches", join(&self.branches));
        kv.insert("qin.realtime", self.realtime);
        kv.insert("qin.recent", self.recent);
        kv.insert("qin.attention_dim", self.attention_dim);
        kv.insert("qin.heads", self.heads);
        kv.insert("qin.id_dim", self.id_dim);
        kv.insert("qin.profile_dim", self.profile_dim);
        kv.insert("qin.experts", self.experts);
        kv.insert("qin.expert_dims", join(&self.expert_dims));
        kv.insert("qin.tower_dims", join(&self.tower_dims));
        kv.insert("qin.rcr_alpha", self.rcr_alpha);
        kv.insert("qin.lr", self.lr);
        kv.insert("qin.batch_sessions", self.batch_sessions);
        kv.insert("qin.epochs", self.epochs);
        kv.insert("qin.train_days", self.train_days);
        kv.insert("qin.fused_alpha", join(&self.fused.alpha));
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.gsu.validate()?;
        self.fused.validate()?;
        if !(self.rcr_alpha >= 0.0) {
            return Err(Error::Config(format!("rcr alpha must be >= 0, got {}", self.rcr_alpha)));
        }
        if self.branches.is_empty() && !self.realtime {
            return Err(Error::Config("qin needs a search-unit branch or the real-time branch".into()));
        }
        let mut seen = self.branches.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.branches.len() {
            return Err(Error::Config("qin branches must be distinct".into()));
        }
        if self.recent == 0 || self.batch_sessions == 0 || !(self.lr > 0.0) || self.train_days == 0 {
            return Err(Error::Config("qin recent, batch_sessions, train_days >= 1 and lr > 0 required".into()));
        }
        Ok(())
    }
}

/// Everything a ranking request reads besides the model.
#[derive(Clone, Copy)]
pub struct QinContext<'a> {
    pub world: &'a World,
    pub space: &'a RelevanceSpace,
    pub feats: &'a VideoFeatures,
    pub history: &'a History,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRequest {
    pub user_id: UserId,
    pub query_id: QueryId,
    pub timestamp: u64,
    pub candidates: Vec<VideoId>,
}

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    mode: GsuMode,
    attention: MultiHeadAttention,
    default: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Realtime {
    context: MultiHeadAttention,
    target: MultiHeadAttention,
    default: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QinModel {
    pub config: QinConfig,
    pub store: ParameterStore,
    gender: Embedding,
    age: Embedding,
    location: Embedding,
    user: Embedding,
    branches: Vec<Branch>,
    realtime: Option<Realtime>,
    mmoe: Mmoe,
    embed_dim: usize,
    video_feature_dim: usize,
}

/// What one search-unit branch selected for each candidate row.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSelection {
    pub mode: GsuMode,
    /// Per candidate row, the chosen history videos in selection order.
    pub selected: Vec<Vec<VideoId>>,
}

#[derive(Debug, Clone)]
pub struct QinForward {
    /// `rows × 5` task probabilities.
    pub probs: Var,
    /// `(request, candidate)` of each row.
    pub rows: Vec<(usize, usize)>,
}

struct Shape {
    users: usize,
    genders: usize,
    ages: usize,
    locations: usize,
    embed_dim: usize,
    video_feature_dim: usize,
}

/// Fills the rows whose key list is empty with a learned default vector.
fn with_defaults(
    tape: &mut Tape,
    n: usize,
    lists: Vec<Vec<usize>>,
    default: ParamId,
    attend: impl FnOnce(&mut Tape, &[usize], Rc<Vec<Vec<usize>>>) -> Result<Var>,
) -> Result<Var> {
    let active: Vec<usize> = (0..n).filter(|&i| !lists[i].is_empty()).collect();
    let d = tape.param(default)?;
    if active.is_empty() {
        return tape.repeat_row(d, n);
    }
    let kept: Vec<Vec<usize>> = active.iter().map(|&i| lists[i].clone()).collect();
    let att = attend(tape, &active, Rc::new(kept))?;
    if active.len() == n {
        return Ok(att);
    }
    let stacked = tape.concat_rows(&[att, d])?;
    let mut map = vec![active.len(); n];
    for (r, &i) in active.iter().enumerate() {
        map[i] = r;
    }
    tape.select_rows(stacked, &map)
}

fn constant_rows(tape: &mut Tape, cols: usize, rows: impl Iterator<Item = Vec<f64>>) -> Result<Var> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend(r);
        n += 1;
    }
    tape.constant(Tensor::matrix(n, cols, data)?)
}

fn space_row(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

impl QinModel {
    pub fn new(world: &World, embed_dim: usize, video_feature_dim: usize, config: &QinConfig, seed: u64) -> Result<Self> {
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

    fn build(s: &Shape, config: &QinConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = rng::stream(seed, streams::INIT, 20);
        let pd = config.profile_dim;
        let ad = config.attention_dim;
        let gender = Embedding::new(&mut store, "qin.gender", s.genders, pd, &mut rng)?;
        let age = Embedding::new(&mut store, "qin.age", s.ages, pd, &mut rng)?;
        let location = Embedding::new(&mut store, "qin.location", s.locations, pd, &mut rng)?;
        let user = Embedding::new(&mut store, "qin.user", s.users, config.id_dim, &mut rng)?;
        let mut branches = Vec::new();
        for &mode in &config.branches {
            let name = format!("qin.esu.{mode}");
            let attention = MultiHeadAttention::new(&mut store, &name, s.embed_dim, s.embed_dim, ad, config.heads, &mut rng)?;
            let default = store.add_uniform(&format!("{name}.default"), &[1, ad], 0.1, &mut rng)?;
            branches.push(Branch { mode, attention, default });
        }
        let realtime = if config.realtime {
            let context = MultiHeadAttention::new(&mut store, "qin.rt.self", s.embed_dim, s.embed_dim, ad, config.heads, &mut rng)?;
            let target = MultiHeadAttention::new(&mut store, "qin.rt.target", s.embed_dim, ad, ad, config.heads, &mut rng)?;
            let default = store.add_uniform("qin.rt.default", &[1, ad], 0.1, &mut rng)?;
            Some(Realtime { context, target, default })
        } else {
            None
        };
        let profile = 3 * pd + config.id_dim;
        let input = ad * (branches.len() + usize::from(config.realtime)) + profile + s.embed_dim + 1 + s.video_feature_dim;
        let mmoe = Mmoe::new(
            &mut store,
            "qin.mmoe",
            &MmoeConfig {
                input,
                experts: config.experts,
                expert_dims: config.expert_dims.clone(),
                tower_dims: config.tower_dims.clone(),
                tasks: TASK_COUNT,
            },
            &mut rng,
        )?;
        Ok(QinModel {
            config: config.clone(),
            store,
            gender,
            age,
            location,
            user,
            branches,
            realtime,
            mmoe,
            embed_dim: s.embed_dim,
            video_feature_dim: s.video_feature_dim,
        })
    }

    pub fn mmoe(&self) -> &Mmoe {
        &self.mmoe
    }

    fn check_context(&self, ctx: &QinContext) -> Result<()> {
        if ctx.space.dim() != self.embed_dim || ctx.feats.dim() != self.video_feature_dim {
            return Err(Error::Shape(format!(
                "model expects {}-d relevance space and {}-d video features, got {} and {}",
                self.embed_dim,
                self.video_feature_dim,
                ctx.space.dim(),
                ctx.feats.dim()
            )));
        }
        Ok(())
    }

    /// Forward pass over every candidate of every request, recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, ctx: &QinContext, requests: &[RankRequest]) -> Result<QinForward> {
        self.forward_inner(tape, ctx, requests, None)
    }

    /// The search-unit selections the forward pass makes, for audits.
    pub fn branch_selections(&self, ctx: &QinContext, requests: &[RankRequest]) -> Result<Vec<BranchSelection>> {
        let mut tape = Tape::new(&self.store);
        let mut out = Vec::new();
        self.forward_inner(&mut tape, ctx, requests, Some(&mut out))?;
        Ok(out)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        ctx: &QinContext,
        requests: &[RankRequest],
        mut audit: Option<&mut Vec<BranchSelection>>,
    ) -> Result<QinForward> {
        self.check_context(ctx)?;
        let (world, space) = (ctx.world, ctx.space);
        let e = self.embed_dim;
        let mut rows = Vec::new();
        for (r, req) in requests.iter().enumerate() {
            world.user(req.user_id)?;
            world.query(req.query_id)?;
            for (c, &v) in req.candidates.iter().enumerate() {
                world.video(v)?;
                rows.push((r, c));
            }
        }
        if rows.is_empty() {
            return Err(Error::Data("nothing to rank".into()));
        }
        let n = rows.len();
        let cand = |&(r, c): &(usize, usize)| requests[r].candidates[c];
        let targets = constant_rows(tape, e, rows.iter().map(|rc| space_row(space.video(cand(rc)))))?;

        // stage 1 per request: lifelong history sorted by query similarity
        let (k1, k2) = if self.config.gsu.literal_nesting {
            (self.config.gsu.stage2_k, self.config.gsu.stage1_k)
        } else {
            (self.config.gsu.stage1_k, self.config.gsu.stage2_k)
        };
        let mut blocks: Vec<(usize, Vec<VideoId>)> = Vec::with_capacity(requests.len());
        let mut keys = Vec::new();
        let mut key_rows = 0;
        for req in requests {
            let history: Vec<VideoId> = ctx.history.before(req.user_id, req.timestamp).iter().map(|w| w.video_id).collect();
            let q = space.query(req.query_id);
            let scores: Vec<f64> = history.iter().map(|&b| dot_f32(space.video(b), q)).collect();
            let all: Vec<usize> = (0..history.len()).collect();
            let order = top_by_score(&all, &scores, self.config.gsu.stage1_k);
            let chosen: Vec<VideoId> = order.iter().map(|&i| history[i]).collect();
            for &b in &chosen {
                keys.extend(space_row(space.video(b)));
            }
            blocks.push((key_rows, chosen));
            key_rows += blocks.last().expect("just pushed").1.len();
        }
        let key_matrix = if key_rows > 0 { Some(tape.constant(Tensor::matrix(key_rows, e, keys)?)?) } else { None };

        let mut parts = Vec::new();
        if let Some(rt) = &self.realtime {
            parts.push(self.realtime_branch(tape, ctx, rt, requests, &rows, targets)?);
        }
        for branch in &self.branches {
            let mut kp_values: Option<(Var, Var)> = None;
            if branch.mode == GsuMode::Cp {
                if let Some(km) = key_matrix {
                    let kp = branch.attention.project_keys(tape, km)?;
                    let tp = branch.attention.project_keys(tape, targets)?;
                    kp_values = Some((kp, tp));
                }
            }
            if let Some(a) = audit.as_deref_mut() {
                a.push(BranchSelection { mode: branch.mode, selected: Vec::with_capacity(n) });
            }
            let mut lists: Vec<Vec<usize>> = Vec::with_capacity(n);
            for (row, rc) in rows.iter().enumerate() {
                let (offset, chosen) = &blocks[rc.0];
                let list: Vec<usize> = match branch.mode {
                    GsuMode::Query => (0..chosen.len().min(self.config.gsu.stage1_k)).collect(),
                    GsuMode::QueryTarget => {
                        let first: Vec<usize> = (0..chosen.len().min(k1)).collect();
                        let t = space.video(cand(rc));
                        let scores: Vec<f64> = chosen.iter().map(|&b| dot_f32(space.video(b), t)).collect();
                        top_by_score(&first, &scores, k2)
                    }
                    GsuMode::Cp => {
                        let first: Vec<usize> = (0..chosen.len().min(k1)).collect();
                        match kp_values {
                            Some((kp, tp)) => {
                                let t = tape.value(tp).row(row).to_vec();
                                let kpv = tape.value(kp);
                                let scores: Vec<f64> =
                                    (0..chosen.len()).map(|i| super::gsu::cosine(kpv.row(offset + i), &t)).collect();
                                top_by_score(&first, &scores, k2)
                            }
                            None => Vec::new(),
                        }
                    }
                };
                if let Some(a) = audit.as_deref_mut() {
                    a.last_mut().expect("pushed per branch").selected.push(list.iter().map(|&i| chosen[i]).collect());
                }
                lists.push(list.into_iter().map(|i| offset + i).collect());
            }
            let att = &branch.attention;
            let out = with_defaults(tape, n, lists, branch.default, |tape, active, lists| {
                let km = key_matrix.expect("active rows imply keys");
                let q_in = if active.len() == n { targets } else { tape.select_rows(targets, active)? };
                let qp = att.project_queries(tape, q_in)?;
                let kp = match kp_values {
                    Some((kp, _)) => kp,
                    None => att.project_keys(tape, km)?,
                };
                let vp = att.value.forward(tape, km)?;
                att.attend_projected(tape, qp, kp, vp, lists)
            })?;
            parts.push(out);
        }

        let users: Vec<usize> = rows.iter().map(|&(r, _)| requests[r].user_id as usize).collect();
        let profiles = users.iter().map(|&u| world.user(u as UserId)).collect::<Result<Vec<_>>>()?;
        let g = self.gender.forward(tape, &profiles.iter().map(|p| p.gender as usize).collect::<Vec<_>>())?;
        let a = self.age.forward(tape, &profiles.iter().map(|p| p.age_segment as usize).collect::<Vec<_>>())?;
        let l = self.location.forward(tape, &profiles.iter().map(|p| p.location as usize).collect::<Vec<_>>())?;
        let id = self.user.forward(tape, &users)?;
        parts.extend([g, a, l, id]);
        let queries = constant_rows(tape, e, rows.iter().map(|&(r, _)| space_row(space.query(requests[r].query_id))))?;
        let rel = constant_rows(
            tape,
            1,
            rows.iter().map(|rc| vec![dot_f32(space.query(requests[rc.0].query_id), space.video(cand(rc)))]),
        )?;
        let ids: Vec<VideoId> = rows.iter().map(cand).collect();
        let feats = tape.constant(Tensor::matrix(n, ctx.feats.dim(), ctx.feats.gather(&ids))?)?;
        parts.extend([queries, rel, feats]);
        let x = tape.concat_cols(&parts)?;
        let probs = self.mmoe.forward(tape, x)?.probs;
        Ok(QinForward { probs, rows })
    }

    fn realtime_branch(
        &self,
        tape: &mut Tape,
        ctx: &QinContext,
        rt: &Realtime,
        requests: &[RankRequest],
        rows: &[(usize, usize)],
        targets: Var,
    ) -> Result<Var> {
        let e = self.embed_dim;
        let mut data = Vec::new();
        let mut ranges = Vec::with_capacity(requests.len());
        let mut total = 0;
        for req in requests {
            let recent = ctx.history.recent(req.user_id, req.timestamp, self.config.recent);
            for w in recent {
                data.extend(space_row(ctx.space.video(w.video_id)));
            }
            ranges.push(total..total + recent.len());
            total += recent.len();
        }
        let lists: Vec<Vec<usize>> = rows.iter().map(|&(r, _)| ranges[r].clone().collect()).collect();
        let n = rows.len();
        with_defaults(tape, n, lists, rt.default, |tape, active, lists| {
            let items = tape.constant(Tensor::matrix(total, e, data)?)?;
            let own: Vec<Vec<usize>> =
                ranges.iter().flat_map(|rg| rg.clone().map(move |_| rg.clone().collect::<Vec<usize>>())).collect();
            let contextual = rt.context.forward_sparse(tape, items, items, items, Rc::new(own))?;
            let q_in = if active.len() == n { targets } else { tape.select_rows(targets, active)? };
            rt.target.forward_sparse(tape, q_in, contextual, contextual, lists)
        })
    }

    /// Task probabilities for every candidate, row-major per request.
    pub fn predict(&self, ctx: &QinContext, requests: &[RankRequest]) -> Result<Vec<Vec<[f64; TASK_COUNT]>>> {
        let mut tape = Tape::new(&self.store);
        let f = self.forward(&mut tape, ctx, requests)?;
        let p = tape.value(f.probs);
        let mut out: Vec<Vec<[f64; TASK_COUNT]>> = requests.iter().map(|r| Vec::with_capacity(r.candidates.len())).collect();
        for (row, &(r, _)) in f.rows.iter().enumerate() {
            let mut s = [0.0; TASK_COUNT];
            s.copy_from_slice(p.row(row));
            out[r].push(s);
        }
        Ok(out)
    }

    /// Scores, fuses and sorts one request's candidates.
    pub fn rank_candidates(&self, ctx: &QinContext, request: &RankRequest) -> Result<RankedList> {
        if request.candidates.is_empty() {
            return Err(Error::Data("rank_candidates needs at least one candidate".into()));
        }
        let mut items = Vec::with_capacity(request.candidates.len());
        // bounded chunks keep the tape small for large candidate sets
        for chunk in request.candidates.chunks(256) {
            let req = RankRequest { candidates: chunk.to_vec(), ..request.clone() };
            let scores = self.predict(ctx, std::slice::from_ref(&req))?.remove(0);
            for (&v, s) in chunk.iter().zip(scores) {
                items.push(RankedItem { video_id: v, fused_score: fused_score(&s, &self.config.fused.alpha)?, scores: s });
            }
        }
        sort_ranked_items(&mut items);
        Ok(RankedList { query_id: request.query_id, user_id: request.user_id, items })
    }

    pub fn to_checkpoint(&self, world: &World) -> Checkpoint {
        let mut meta = vec![
            ("model".to_string(), "qin".to_string()),
            ("users".to_string(), world.users.len().to_string()),
            ("genders".to_string(), world.genders.to_string()),
            ("ages".to_string(), world.age_segments.to_string()),
            ("locations".to_string(), world.locations.to_string()),
            ("embed_dim".to_string(), self.embed_dim.to_string()),
            ("video_feature_dim".to_string(), self.video_feature_dim.to_string()),
        ];
        for line in self.config.to_kv().to_text().lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                meta.push((k.to_string(), v.to_string()));
            }
        }
        Checkpoint { meta, store: self.store.clone() }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("model") != Some("qin") {
            return Err(Error::Data("checkpoint does not hold a qin model".into()));
        }
        let num = |k: &str| -> Result<usize> {
            ck.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("qin checkpoint lacks numeric `{k}`")))
        };
        let mut kv = KeyValues::default();
        for (k, v) in ck.meta.iter().filter(|(k, _)| k.starts_with("qin.")) {
            kv.insert(k, v);
        }
        let mut config = QinConfig::default();
        config.apply(&kv)?;
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
