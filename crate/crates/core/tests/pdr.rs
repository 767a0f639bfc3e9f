use std::collections::HashSet;

use persearch::ann::SearchMode;
use persearch::encoders::RelevanceSpace;
use persearch::error::Error;
use persearch::features::VideoFeatures;
use persearch::retrieval::pdr::*;
use persearch::retrieval::qrcf::filter_relevant_behaviors;
use persearch::retrieval::RetrieverKind;
use persearch::rng::stream;
use persearch::tensor::{grad_check, ParameterStore, Tape};
use persearch::world::*;
use rand::Rng;

struct Fixture {
    world: World,
    logs: Logs,
    history: History,
    space: RelevanceSpace,
    feats: VideoFeatures,
}

fn fixture() -> Fixture {
    let cfg = WorldConfig { users: 80, videos: 1200, queries: 120, topic_count: 8, ..WorldConfig::default() };
    let world = generate_world(&cfg, 31).unwrap();
    let logs = simulate_logs(&world, &LogConfig::default(), 5, 31).unwrap();
    let history = History::build(world.users.len(), &logs);
    let space = RelevanceSpace::oracle(&world, 0.1, 31).unwrap();
    let feats = VideoFeatures::build(&world, &space, &logs).unwrap();
    Fixture { world, logs, history, space, feats }
}

fn small_cfg() -> PdrConfig {
    PdrConfig { epochs: 1, batch: 64, ..PdrConfig::default() }
}

fn param<'a>(store: &'a ParameterStore, name: &str) -> &'a [f64] {
    store.value(store.id(name).unwrap_or_else(|| panic!("no parameter {name}"))).data()
}

fn affine(store: &ParameterStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = param(store, &format!("{name}.w"));
    let b = param(store, &format!("{name}.b"));
    let out = b.len();
    assert_eq!(w.len(), x.len() * out);
    (0..out).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>()).collect()
}

fn row(store: &ParameterStore, name: &str, dim: usize, r: usize) -> Vec<f64> {
    param(store, name)[r * dim..(r + 1) * dim].to_vec()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

fn f64s(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| f64::from(v)).collect()
}

/// Scalar recomputation of the query-user tower from the raw parameters.
fn reference_encode(model: &PdrModel, f: &Fixture, input: &SessionInput) -> QueryUserParts {
    let s = &model.store;
    let c = &model.config;
    let u = f.world.user(input.user_id).unwrap();
    let pd = c.profile_dim;
    let mut profile = row(s, "pdr.gender", pd, u.gender as usize);
    profile.extend(row(s, "pdr.age", pd, u.age_segment as usize));
    profile.extend(row(s, "pdr.location", pd, u.location as usize));
    profile.extend(row(s, "pdr.user", c.id_dim, u.user_id as usize));
    let query = f64s(f.space.query(input.query_id));
    let ad = c.attention_dim;
    let behavior = if input.behaviors.is_empty() {
        vec![0.0; ad]
    } else {
        let qin: Vec<f64> = query.iter().chain(&profile).copied().collect();
        let qp = affine(s, "pdr.attn.q", &qin);
        let keys: Vec<Vec<f64>> =
            input.behaviors.iter().map(|&b| affine(s, "pdr.attn.k", &f64s(f.space.video(b)))).collect();
        let values: Vec<Vec<f64>> =
            input.behaviors.iter().map(|&b| affine(s, "pdr.attn.v", &f64s(f.space.video(b)))).collect();
        let dh = ad / c.heads;
        let mut joined = vec![0.0; ad];
        for h in 0..c.heads {
            let cols = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| cols.clone().map(|i| qp[i] * k[i]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|x| (x - top).exp()).collect();
            let z: f64 = exp.iter().sum();
            for (w, v) in exp.iter().zip(&values) {
                for i in cols.clone() {
                    joined[i] += w / z * v[i];
                }
            }
        }
        affine(s, "pdr.attn.o", &joined)
    };
    let mut h: Vec<f64> = profile.iter().chain(&behavior).chain(&query).copied().collect();
    let layers = c.fusion_dims.len();
    for l in 0..layers {
        h = affine(s, &format!("pdr.fusion.{l}"), &h);
        if l + 1 < layers {
            h.iter_mut().for_each(|x| *x = x.max(0.0));
        }
    }
    let n = norm(&h);
    let output = h.iter().map(|x| x / n).collect();
    QueryUserParts { profile, behavior, query, output }
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

fn brel(f: &Fixture, user: UserId, query: QueryId, timestamp: u64) -> Vec<VideoId> {
    filter_relevant_behaviors(&f.space, user, query, f.history.before(user, timestamp), 50, 0.5).unwrap().video_ids()
}

#[test]
fn forward_matches_scalar_recomputation() {
    let f = fixture();
    let model = PdrModel::new(&f.world, f.space.dim(), f.feats.dim(), &PdrConfig::default(), 4).unwrap();
    let mut r = stream(4, 90, 0);
    for _ in 0..20 {
        let behaviors: Vec<VideoId> =
            (0..r.random_range(0..8)).map(|_| r.random_range(0..f.world.videos.len() as u32)).collect();
        let input = SessionInput {
            user_id: r.random_range(0..f.world.users.len() as u32),
            query_id: r.random_range(0..f.world.queries.len() as u32),
            behaviors,
        };
        let got = model.encode_query_user_parts(&f.world, &f.space, &input).unwrap();
        let want = reference_encode(&model, &f, &input);
        assert_close(&got.profile, &want.profile, 1e-12);
        assert_close(&got.query, &want.query, 1e-12);
        assert_close(&got.behavior, &want.behavior, 1e-9);
        assert_close(&got.output, &want.output, 1e-9);
        assert!((norm(&got.output) - 1.0).abs() < 1e-6);
    }
}

#[test]
fn single_behavior_attends_with_weight_one() {
    let f = fixture();
    let model = PdrModel::new(&f.world, f.space.dim(), f.feats.dim(), &PdrConfig::default(), 5).unwrap();
    let b = 17;
    let input = SessionInput { user_id: 3, query_id: 9, behaviors: vec![b] };
    let got = model.encode_query_user_parts(&f.world, &f.space, &input).unwrap();
    let value = affine(&model.store, "pdr.attn.v", &f64s(f.space.video(b)));
    let projected = affine(&model.store, "pdr.attn.o", &value);
    assert_close(&got.behavior, &projected, 1e-9);
}

#[test]
fn empty_behaviors_give_zero_behavior_vector() {
    let f = fixture();
    let model = PdrModel::new(&f.world, f.space.dim(), f.feats.dim(), &PdrConfig::default(), 6).unwrap();
    let input = SessionInput { user_id: 1, query_id: 2, behaviors: vec![] };
    let got = model.encode_query_user_parts(&f.world, &f.space, &input).unwrap();
    assert_eq!(got.behavior, vec![0.0; PdrConfig::default().attention_dim]);
    assert!((norm(&got.output) - 1.0).abs() < 1e-6);
}

#[test]
fn unknown_user_is_a_lookup_error() {
    let f = fixture();
    let model = PdrModel::new(&f.world, f.space.dim(), f.feats.dim(), &PdrConfig::default(), 6).unwrap();
    let input = SessionInput { user_id: f.world.users.len() as u32, query_id: 0, behaviors: vec![] };
    assert!(matches!(model.encode_query_user(&f.world, &f.space, &input), Err(Error::Lookup(_))));
}

#[test]
fn dataset_labels_follow_the_logs() {
    let f = fixture();
    let data = build_pdr_dataset(&f.world, &f.logs, &f.history, &f.space, 50, 0.5, 1, 3).unwrap();
    assert!(!data.examples.is_empty());
    for e in &data.examples {
        let s = &data.sessions[e.session];
        assert!(e.labels[1], "every example is a click");
        assert_eq!(e.labels[0], relevance_label(&f.world, s.query_id, e.video_id).unwrap());
        assert!(e.hard_negatives.len() <= 1);
        assert!(!e.hard_negatives.contains(&e.video_id));
    }
}

#[test]
fn zero_weight_objectives_do_not_contribute() {
    let f = fixture();
    let cfg = PdrConfig { weights: [1.0, 0.0, 0.0, 0.0], ..small_cfg() };
    let model = PdrModel::new(&f.world, f.space.dim(), f.feats.dim(), &cfg, 7).unwrap();
    let data = build_pdr_dataset(&f.world, &f.logs, &f.history, &f.space, 50, 0.5, 1, 3).unwrap();
    let batch: Vec<usize> = (0..32).collect();
    let mut flipped = data.clone();
    for e in &mut flipped.examples {
        e.labels[3] = !e.labels[3];
    }
    let eval = |d: &PdrDataset| {
        let mut tape = Tape::new(&model.store);
        let loss = pdr_batch_loss(&model, &f.world, &f.space, &f.feats, d, &batch, &mut tape).unwrap().unwrap();
        assert!(loss.objectives[1..].iter().all(Option::is_none));
        let grads = tape.backward(loss.total).unwrap();
        let flat: Vec<f64> =
            model.store.ids().flat_map(|id| grads.get(id).map_or(vec![], |g| g.data().to_vec())).collect();
        (tape.value(loss.total).item(), flat)
    };
    let (la, ga) = eval(&data);
    let (lb, gb) = eval(&flipped);
    assert_eq!(la, lb);
    assert_eq!(ga, gb);
}

#[test]
fn batch_without_weighted_positives_is_skipped() {
    let f = fixture();
    let cfg = PdrConfig { weights: [0.0, 0.0, 0.0, 1.0], ..small_cfg() };
    let model = PdrModel::new(&f.world, f.space.dim(), f.feats.dim(), &cfg, 7).unwrap();
    let mut data = build_pdr_dataset(&f.world, &f.logs, &f.history, &f.space, 50, 0.5, 1, 3).unwrap();
    for e in &mut data.examples {
        e.labels[3] = false;
    }
    let mut tape = Tape::new(&model.store);
    assert!(pdr_batch_loss(&model, &f.world, &f.space, &f.feats, &data, &[0, 1, 2], &mut tape).unwrap().is_none());
    let mut m = model.clone();
    let report = train_pdr_on(&mut m, &f.world, &f.space, &f.feats, &data, 1).unwrap();
    assert_eq!(report.skipped_batches, data.examples.len().div_ceil(cfg.batch));
}

#[test]
fn batch_loss_gradients_match_finite_differences() {
    let f = fixture();
    let cfg = PdrConfig { fusion_dims: vec![16, 8], video_dims: vec![8], attention_dim: 8, ..small_cfg() };
    let model = PdrModel::new(&f.world, f.space.dim(), f.feats.dim(), &cfg, 8).unwrap();
    let data = build_pdr_dataset(&f.world, &f.logs, &f.history, &f.space, 50, 0.5, 1, 3).unwrap();
    // four examples from distinct sessions, at least one with behaviours
    let mut batch = Vec::new();
    let mut seen = HashSet::new();
    for (i, e) in data.examples.iter().enumerate() {
        if batch.len() < 4 && seen.insert(e.session) && (batch.is_empty() == !data.sessions[e.session].behaviors.is_empty()) {
            batch.push(i);
        }
    }
    for (i, e) in data.examples.iter().enumerate() {
        if batch.len() < 4 && seen.insert(e.session) {
            batch.push(i);
        }
    }
    assert_eq!(batch.len(), 4);
    let mut store = model.store.clone();
    let worst = grad_check(&mut store, 1e-5, 400, 2, |tape| {
        Ok(pdr_batch_loss(&model, &f.world, &f.space, &f.feats, &data, &batch, tape)?.expect("click positives").total)
    })
    .unwrap();
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn overfits_a_small_set() {
    let f = fixture();
    let full = build_pdr_dataset(&f.world, &f.logs, &f.history, &f.space, 50, 0.5, 1, 3).unwrap();
    let data = PdrDataset { sessions: full.sessions, examples: full.examples[..64].to_vec() };
    for o in 0..4 {
        assert!(data.examples.iter().any(|e| e.labels[o]), "no positive for {}", OBJECTIVES[o]);
    }
    let cfg = PdrConfig { epochs: 500, batch: 64, lr: 3e-3, ..PdrConfig::default() };
    let mut model = PdrModel::new(&f.world, f.space.dim(), f.feats.dim(), &cfg, 9).unwrap();
    let all: Vec<usize> = (0..64).collect();
    let losses = |m: &PdrModel| {
        let mut tape = Tape::new(&m.store);
        let loss = pdr_batch_loss(m, &f.world, &f.space, &f.feats, &data, &all, &mut tape).unwrap().unwrap();
        loss.objectives.map(|o| tape.value(o.unwrap()).item())
    };
    let before = losses(&model);
    let report = train_pdr_on(&mut model, &f.world, &f.space, &f.feats, &data, 9).unwrap();
    assert_eq!(report.epoch_loss.len(), 500);
    let after = losses(&model);
    for o in 0..4 {
        assert!(after[o] <= 0.5 * before[o], "{}: {} -> {}", OBJECTIVES[o], before[o], after[o]);
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let f = fixture();
    let train = || train_pdr(&f.world, &f.logs, &f.history, &f.space, &f.feats, &small_cfg(), 50, 0.5, 12).unwrap();
    let (a, ra) = train();
    let (b, rb) = train();
    assert_eq!(ra, rb);
    let ck = a.to_checkpoint(&f.world);
    assert_eq!(ck.to_bytes().unwrap(), b.to_checkpoint(&f.world).to_bytes().unwrap());
    let back = PdrModel::from_checkpoint(&persearch::tensor::Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back.config, a.config);
    let index = a.build_index(&f.feats, None).unwrap();
    let index_back = back.build_index(&f.feats, None).unwrap();
    let input = SessionInput { user_id: 5, query_id: 7, behaviors: brel(&f, 5, 7, u64::MAX) };
    let x = pdr_retrieve(&a, &index, &f.world, &f.space, &input, SearchMode::Exact).unwrap();
    let y = pdr_retrieve(&back, &index_back, &f.world, &f.space, &input, SearchMode::Exact).unwrap();
    assert_eq!(x, y);
    assert_eq!(x, pdr_retrieve(&a, &index, &f.world, &f.space, &input, SearchMode::Exact).unwrap());
}

#[test]
fn retrieval_scores_are_cosines_in_order() {
    let f = fixture();
    let (model, _) = train_pdr(&f.world, &f.logs, &f.history, &f.space, &f.feats, &small_cfg(), 50, 0.5, 13).unwrap();
    let index = model.build_index(&f.feats, None).unwrap();
    let videos = model.video_embeddings(&f.feats).unwrap();
    let input = SessionInput { user_id: 2, query_id: 4, behaviors: brel(&f, 2, 4, u64::MAX) };
    let e = model.encode_query_user(&f.world, &f.space, &input).unwrap();
    let set = pdr_retrieve(&model, &index, &f.world, &f.space, &input, SearchMode::Exact).unwrap();
    assert_eq!(set.len(), 100);
    let mut brute: Vec<(f64, u32)> =
        (0..f.world.videos.len() as u32).map(|v| (cosine(&e, &f64s(videos.row(v as usize))), v)).collect();
    brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (c, (s, v)) in set.entries.iter().zip(&brute) {
        assert_eq!(c.source, RetrieverKind::Pdr);
        assert!((-1.0..=1.0).contains(&c.score));
        assert!((c.score - s).abs() < 1e-5, "{} vs {s}", c.score);
        if (c.score - s).abs() > 1e-9 {
            continue;
        }
        assert_eq!(c.video_id, *v);
    }
    for v in 0..50 {
        assert!((norm(&f64s(videos.row(v))) - 1.0).abs() < 1e-6);
    }
}

#[test]
fn changing_only_the_user_changes_the_encoding() {
    let f = fixture();
    let (model, _) = train_pdr(&f.world, &f.logs, &f.history, &f.space, &f.feats, &small_cfg(), 50, 0.5, 14).unwrap();
    let mut r = stream(14, 90, 1);
    let pairs = 200;
    let mut changed = 0;
    for _ in 0..pairs {
        let n = f.world.users.len() as u32;
        let a = r.random_range(0..n);
        let b = (a + r.random_range(1..n)) % n;
        let q = r.random_range(0..f.world.queries.len() as u32);
        let behaviors = brel(&f, a, q, u64::MAX);
        let ea = model.encode_query_user(&f.world, &f.space, &SessionInput { user_id: a, query_id: q, behaviors: behaviors.clone() }).unwrap();
        let eb = model.encode_query_user(&f.world, &f.space, &SessionInput { user_id: b, query_id: q, behaviors }).unwrap();
        changed += usize::from(cosine(&ea, &eb) < 0.999);
    }
    assert!(changed as f64 >= 0.9 * pairs as f64, "{changed} of {pairs} pairs changed");
}

#[test]
fn full_corpus_retrieval_returns_exactly_top_k() {
    let world = generate_world(&WorldConfig { users: 50, queries: 40, ..WorldConfig::default() }, 15).unwrap();
    assert_eq!(world.videos.len(), 20_000);
    let logs = simulate_logs(&world, &LogConfig::default(), 1, 15).unwrap();
    let space = RelevanceSpace::oracle(&world, 0.1, 15).unwrap();
    let feats = VideoFeatures::build(&world, &space, &logs).unwrap();
    let model = PdrModel::new(&world, space.dim(), feats.dim(), &PdrConfig::default(), 15).unwrap();
    let index = model.build_index(&feats, None).unwrap();
    let set = pdr_retrieve(&model, &index, &world, &space, &SessionInput { user_id: 0, query_id: 0, behaviors: vec![] }, SearchMode::Exact)
        .unwrap();
    assert_eq!(set.len(), 100);
    assert_eq!(set.video_ids().into_iter().collect::<HashSet<_>>().len(), 100);

    let tiny = PdrModel::new(&world, space.dim(), feats.dim(), &PdrConfig { top_k: 25_000, ..PdrConfig::default() }, 15).unwrap();
    let tiny_index = tiny.build_index(&feats, None).unwrap();
    let all = pdr_retrieve(&tiny, &tiny_index, &world, &space, &SessionInput { user_id: 0, query_id: 0, behaviors: vec![] }, SearchMode::Exact)
        .unwrap();
    assert_eq!(all.len(), 20_000);
    assert!(all.entries.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn cohorts_with_disjoint_interests_get_different_candidates() {
    let world = two_cohort_world(&TwoCohortConfig::default(), 16).unwrap();
    let logs = simulate_logs(&world, &LogConfig::default(), 6, 16).unwrap();
    let history = History::build(world.users.len(), &logs);
    let space = RelevanceSpace::oracle(&world, 0.0, 16).unwrap();
    let feats = VideoFeatures::build(&world, &space, &logs).unwrap();
    let cfg = PdrConfig { epochs: 3, batch: 64, ..PdrConfig::default() };
    let (model, _) = train_pdr(&world, &logs, &history, &space, &feats, &cfg, 50, 0.5, 16).unwrap();
    let index = model.build_index(&feats, None).unwrap();
    let retrieve = |u: UserId| {
        let behaviors = filter_relevant_behaviors(&space, u, 0, history.before(u, u64::MAX), 50, 0.5).unwrap().video_ids();
        let set = pdr_retrieve(&model, &index, &world, &space, &SessionInput { user_id: u, query_id: 0, behaviors }, SearchMode::Exact)
            .unwrap();
        set.video_ids().into_iter().collect::<HashSet<_>>()
    };
    let mut worst: f64 = 0.0;
    for pair in 0..10u32 {
        let (a, b) = (2 * pair, 2 * pair + 1);
        assert_ne!(cohort_topic(a), cohort_topic(b));
        let (sa, sb) = (retrieve(a), retrieve(b));
        worst = worst.max(sa.intersection(&sb).count() as f64 / sa.len() as f64);
    }
    assert!(worst < 0.5, "overlap {worst}");
}

#[test]
fn hard_negatives_do_not_hurt_click_recall() {
    let f = fixture();
    let last = f.logs.days - 1;
    let train = f.logs.until_day(last);
    let held: Vec<&SearchSession> = f.logs.sessions.iter().filter(|s| s.day == last).collect();
    let history = History::build(f.world.users.len(), &f.logs);
    let feats = VideoFeatures::build(&f.world, &f.space, &train).unwrap();
    let recall = |hard: usize| {
        let cfg = PdrConfig { hard_negatives: hard, epochs: 3, batch: 64, ..PdrConfig::default() };
        let (model, _) = train_pdr(&f.world, &train, &history, &f.space, &feats, &cfg, 50, 0.5, 17).unwrap();
        let index = model.build_index(&feats, None).unwrap();
        let (mut hit, mut total) = (0usize, 0usize);
        for s in &held {
            let clicks: Vec<VideoId> = f.logs.impressions(s).iter().filter(|e| e.clicked).map(|e| e.video_id).collect();
            if clicks.is_empty() {
                continue;
            }
            let behaviors = filter_relevant_behaviors(&f.space, s.user_id, s.query_id, history.before(s.user_id, s.timestamp), 50, 0.5)
                .unwrap()
                .video_ids();
            let input = SessionInput { user_id: s.user_id, query_id: s.query_id, behaviors };
            let got: HashSet<VideoId> =
                pdr_retrieve(&model, &index, &f.world, &f.space, &input, SearchMode::Exact).unwrap().video_ids().into_iter().collect();
            hit += clicks.iter().filter(|v| got.contains(v)).count();
            total += clicks.len();
        }
        hit as f64 / total as f64
    };
    let (with_hard, in_batch) = (recall(1), recall(0));
    assert!(with_hard >= in_batch, "hard negatives {with_hard} vs in-batch only {in_batch}");
}
