use std::collections::{BTreeMap, BTreeSet};

use persearch::ann::{AnnIndex, EmbeddingMatrix, HnswConfig, SearchMode};
use persearch::encoders::RelevanceSpace;
use persearch::retrieval::bm25::{Bm25Params, InvertedIndex};
use persearch::retrieval::qrcf::*;
use persearch::retrieval::swing::*;
use persearch::retrieval::{merge_candidates, CandidateSet, RetrieverKind};
use persearch::rng::stream;
use persearch::topk::Scored;
use persearch::world::*;
use proptest::prelude::*;
use rand::Rng;

// ---------- BM25 ----------

fn toy_corpus() -> Vec<(VideoId, Vec<Token>)> {
    vec![
        (0, vec![1, 2, 3]),
        (1, vec![1, 1, 4, 5]),
        (2, vec![2, 6]),
        (3, vec![7, 8, 9, 10, 1]),
        (4, vec![11]),
    ]
}

#[test]
fn bm25_matches_hand_evaluation() {
    let index = InvertedIndex::from_docs(&toy_corpus(), Bm25Params::default()).unwrap();
    // N = 5, avgdl = 15 / 5 = 3; token 1 has df 3, token 2 has df 2.
    let (k1, b, avg) = (1.2, 0.75, 3.0);
    let idf = |df: f64| (1.0 + (5.0 - df + 0.5) / (df + 0.5)).ln();
    let term = |tf: f64, len: f64| tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avg));
    let expected: BTreeMap<VideoId, f64> = [
        (0, idf(3.0) * term(1.0, 3.0) + idf(2.0) * term(1.0, 3.0)),
        (1, idf(3.0) * term(2.0, 4.0)),
        (2, idf(2.0) * term(1.0, 2.0)),
        (3, idf(3.0) * term(1.0, 5.0)),
    ]
    .into_iter()
    .collect();
    let got = index.scores(&[1, 2]);
    assert_eq!(got.len(), expected.len());
    for (v, s) in &expected {
        assert!((got[v] - s).abs() < 1e-12, "video {v}: {} vs {s}", got[v]);
    }
    let top = index.retrieve(&[1, 2], 10);
    assert_eq!(top[0].id, 0);
}

#[test]
fn bm25_unique_token_ranks_its_video_first_and_misses_are_empty() {
    let index = InvertedIndex::from_docs(&toy_corpus(), Bm25Params::default()).unwrap();
    assert_eq!(index.retrieve(&[11], 3)[0].id, 4);
    assert_eq!(index.retrieve(&[4, 999], 3)[0].id, 1);
    assert!(index.retrieve(&[999], 3).is_empty());
    assert!(index.retrieve(&[], 3).is_empty());
}

// ---------- click graph and Swing ----------

fn key(user: u32, query: u32, day: u32) -> SessionKey {
    SessionKey { user_id: user, query_id: query, day }
}

#[test]
fn empty_and_single_session_graphs() {
    assert!(ClickGraph::from_clicks(std::iter::empty()).is_empty());
    let g = ClickGraph::from_clicks([(key(0, 5, 0), 10), (key(0, 5, 0), 11)]);
    let q = g.query(5).unwrap();
    assert_eq!(q.sessions, vec![vec![10, 11]]);
    assert_eq!(q.clickers[&10], vec![0]);
    assert_eq!(q.clickers[&11], vec![0]);
}

#[test]
fn click_graph_recount_from_raw_sessions() {
    let world = generate_world(&WorldConfig { users: 60, videos: 2000, queries: 120, ..WorldConfig::default() }, 3).unwrap();
    let logs = simulate_logs(&world, &LogConfig::default(), 5, 3).unwrap();
    let graph = build_click_graph(&logs);
    let mut raw: BTreeMap<QueryId, BTreeMap<(UserId, u32), BTreeSet<VideoId>>> = BTreeMap::new();
    for s in &logs.sessions {
        for e in logs.impressions(s).iter().filter(|e| e.clicked) {
            raw.entry(s.query_id).or_default().entry((s.user_id, s.day)).or_default().insert(e.video_id);
        }
    }
    assert_eq!(graph.per_query.len(), raw.len());
    for (q, sessions) in &raw {
        let g = graph.query(*q).unwrap();
        assert_eq!(g.sessions.len(), sessions.len());
        for (local, k) in g.session_keys.iter().enumerate() {
            let items: Vec<VideoId> = sessions[&(k.user_id, k.day)].iter().copied().collect();
            assert_eq!(g.sessions[local], items);
            for v in &items {
                assert!(g.clickers[v].contains(&(local as u32)));
            }
        }
        for (v, who) in &g.clickers {
            assert!(who.iter().all(|&u| g.sessions[u as usize].contains(v)));
        }
    }
}

#[test]
fn swing_two_identical_sessions() {
    let g = ClickGraph::from_clicks([(key(0, 1, 0), 1), (key(0, 1, 0), 2), (key(1, 1, 0), 1), (key(1, 1, 0), 2)]);
    let q = g.query(1).unwrap();
    let cfg = SwingConfig { alpha: 1.0, self_pairs: true };
    assert!((swing_similarity(q, 1, 2, &cfg).unwrap() - 4.0 / 3.0).abs() < 1e-15);
    let no_self = SwingConfig { self_pairs: false, ..cfg };
    assert!((swing_similarity(q, 1, 2, &no_self).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(swing_similarity(q, 1, 99, &cfg).unwrap(), 0.0);
    assert!(swing_similarity(q, 1, 2, &SwingConfig { alpha: 0.0, self_pairs: true }).is_err());

    let extra = ClickGraph::from_clicks([
        (key(0, 1, 0), 1),
        (key(0, 1, 0), 2),
        (key(1, 1, 0), 1),
        (key(1, 1, 0), 2),
        (key(2, 1, 0), 1),
    ]);
    assert_eq!(swing_similarity(extra.query(1).unwrap(), 1, 2, &cfg).unwrap(), 4.0 / 3.0);
}

/// Enumerates session pairs straight from the raw click list.
pub fn brute_swing(clicks: &[(SessionKey, VideoId)], q: QueryId, i: VideoId, j: VideoId, cfg: &SwingConfig) -> f64 {
    let mut sessions: BTreeMap<SessionKey, BTreeSet<VideoId>> = BTreeMap::new();
    for (k, v) in clicks.iter().filter(|(k, _)| k.query_id == q) {
        sessions.entry(*k).or_default().insert(*v);
    }
    let both: Vec<&BTreeSet<VideoId>> = sessions.values().filter(|s| s.contains(&i) && s.contains(&j)).collect();
    let mut total = 0.0;
    for (a, u) in both.iter().enumerate() {
        for (b, v) in both.iter().enumerate() {
            if a == b && !cfg.self_pairs {
                continue;
            }
            total += 1.0 / (cfg.alpha + u.intersection(v).count() as f64);
        }
    }
    total
}

fn random_clicks(seed: u64) -> Vec<(SessionKey, VideoId)> {
    let mut r = stream(seed, 77, 0);
    let sessions = r.random_range(1..12);
    let mut out = Vec::new();
    for s in 0..sessions {
        let k = key(r.random_range(0..5), r.random_range(0..2), s);
        for _ in 0..r.random_range(1..5) {
            out.push((k, r.random_range(0..8)));
        }
    }
    out
}

#[test]
fn swing_matches_brute_force_on_random_graphs() {
    for seed in 0..100 {
        let clicks = random_clicks(seed);
        let graph = ClickGraph::from_clicks(clicks.iter().copied());
        for self_pairs in [true, false] {
            let cfg = SwingConfig { alpha: 0.5 + seed as f64 / 100.0, self_pairs };
            for (&q, g) in &graph.per_query {
                for i in 0..8 {
                    for j in 0..8 {
                        let s = swing_similarity(g, i, j, &cfg).unwrap();
                        assert!((s - brute_swing(&clicks, q, i, j, &cfg)).abs() < 1e-9);
                        assert_eq!(s, swing_similarity(g, j, i, &cfg).unwrap());
                    }
                }
            }
        }
    }
}

#[test]
fn swing_is_query_restricted() {
    let clicks = random_clicks(5);
    let cfg = SwingConfig::default();
    let base = ClickGraph::from_clicks(clicks.iter().copied());
    let mut perturbed = clicks.clone();
    perturbed.extend([(key(9, 1, 99), 0), (key(9, 1, 99), 1), (key(9, 1, 99), 2)]);
    let other = ClickGraph::from_clicks(perturbed);
    if let (Some(a), Some(b)) = (base.query(0), other.query(0)) {
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(swing_similarity(a, i, j, &cfg).unwrap(), swing_similarity(b, i, j, &cfg).unwrap());
            }
        }
    }
}

#[test]
fn swing_table_lists_are_sorted_without_self() {
    let clicks: Vec<_> = (0..30).flat_map(random_clicks).collect();
    let graph = ClickGraph::from_clicks(clicks);
    let table = build_swing_table(&graph, &SwingConfig::default(), 3).unwrap();
    for (&(q, v), list) in &table.lists {
        assert!(list.len() <= 3 && !list.is_empty());
        assert!(list.iter().all(|s| s.id != v && s.score > 0.0));
        assert!(list.windows(2).all(|w| w[0].score >= w[1].score));
        let g = graph.query(q).unwrap();
        for s in list {
            assert_eq!(s.score, swing_similarity(g, v, s.id, &SwingConfig::default()).unwrap());
        }
    }
}

// ---------- relevance filter ----------

fn behavior(video_id: VideoId, timestamp: u64, relevance: f64) -> RelevantBehavior {
    RelevantBehavior { video_id, timestamp, relevance }
}

#[test]
fn relevance_filter_examples() {
    assert!(select_relevant(&[], 5, 0.5).unwrap().is_empty());
    let items = [behavior(1, 10, 0.9), behavior(2, 11, 0.6), behavior(3, 12, 0.4)];
    let out = select_relevant(&items, 2, 0.5).unwrap();
    assert_eq!(out.iter().map(|b| b.video_id).collect::<Vec<_>>(), vec![1, 2]);
    assert!(select_relevant(&items, 0, 0.5).is_err());
}

proptest! {
    #[test]
    fn relevance_filter_matches_sort_oracle(
        rels in proptest::collection::vec(-10i32..=10, 0..40),
        k in 1usize..20,
        eps_hi in -10i32..=10,
        drop in 0i32..=5,
    ) {
        let items: Vec<RelevantBehavior> =
            rels.iter().enumerate().map(|(i, &r)| behavior(i as u32, i as u64, r as f64 / 10.0)).collect();
        let eps = eps_hi as f64 / 10.0;
        let mut oracle: Vec<&RelevantBehavior> = items.iter().filter(|b| b.relevance >= eps).collect();
        oracle.sort_by(|a, b| b.relevance.total_cmp(&a.relevance).then(b.timestamp.cmp(&a.timestamp)));
        oracle.truncate(k);
        let got = select_relevant(&items, k, eps).unwrap();
        prop_assert_eq!(got.iter().map(|b| b.video_id).collect::<Vec<_>>(), oracle.iter().map(|b| b.video_id).collect::<Vec<_>>());
        prop_assert!(got.iter().all(|b| b.relevance >= eps) && got.len() <= k);
        // K large enough that truncation cannot hide the subset relation.
        let lower = (eps - drop as f64 / 10.0).max(-1.0);
        let strict: BTreeSet<u32> = select_relevant(&items, 1000, eps).unwrap().iter().map(|b| b.video_id).collect();
        let loose: BTreeSet<u32> = select_relevant(&items, 1000, lower).unwrap().iter().map(|b| b.video_id).collect();
        prop_assert!(strict.is_subset(&loose));
    }
}

// ---------- QRCF expansion ----------

fn one_behavior(relevance: f64) -> RelevantBehaviorSet {
    RelevantBehaviorSet { user_id: 0, query_id: 0, behaviors: vec![behavior(100, 1, relevance)] }
}

#[test]
fn qrcf_empty_and_hand_merge() {
    let mut tables = SimilarityTables::default();
    let cfg = QrcfConfig::default();
    let empty = RelevantBehaviorSet { user_id: 0, query_id: 0, behaviors: vec![] };
    assert!(qrcf_retrieve(&empty, &tables, &cfg).is_empty());

    let neighbors: Vec<Scored> = [(1, 0.9), (2, 0.5), (3, 0.8), (4, 0.1), (5, 0.3)].iter().map(|&(v, s)| Scored::new(v, s)).collect();
    tables.swing.lists.insert((0, 100), neighbors);
    let out = qrcf_retrieve(&one_behavior(0.5), &tables, &cfg);
    let got: Vec<(u32, f64)> = out.entries.iter().map(|c| (c.video_id, c.score)).collect();
    assert_eq!(got, vec![(1, 0.45), (3, 0.4), (2, 0.25), (5, 0.15), (4, 0.05)]);
    assert!(out.entries.iter().all(|c| c.source == RetrieverKind::QrcfSwing));
    assert_eq!(qrcf_retrieve(&one_behavior(0.5), &tables, &cfg), out);
}

#[test]
fn qrcf_dedupes_with_max_and_respects_caps() {
    let mut tables = SimilarityTables::default();
    let cfg = QrcfConfig::default();
    let brel = RelevantBehaviorSet {
        user_id: 0,
        query_id: 0,
        behaviors: (0..50).map(|b| behavior(1000 + b, b as u64, 0.9 - b as f64 / 100.0)).collect(),
    };
    for b in 0..50u32 {
        let list: Vec<Scored> = (0..20).map(|j| Scored::new(b * 7 + j, 1.0 - j as f64 / 40.0)).collect();
        tables.swing.lists.insert((0, 1000 + b), list.clone());
        tables.embedding.lists.insert(1000 + b, list);
    }
    let out = qrcf_retrieve(&brel, &tables, &cfg);
    assert!(out.len() <= 400);
    let ids: BTreeSet<u32> = out.entries.iter().map(|c| c.video_id).collect();
    assert_eq!(ids.len(), out.len());
    // Video 7 is neighbour 7 of behaviour 0 (0.9 × 0.825) and neighbour 0 of behaviour 1 (0.89 × 1.0).
    let v7 = out.entries.iter().find(|c| c.video_id == 7).unwrap();
    assert!((v7.score - 0.89).abs() < 1e-12);
    assert!(out.entries.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn qrcf_preserves_relevance_on_oracle_embeddings() {
    let world = generate_world(&WorldConfig { users: 100, videos: 3000, queries: 150, ..WorldConfig::default() }, 11).unwrap();
    let logs = simulate_logs(&world, &LogConfig::default(), 6, 11).unwrap();
    let space = RelevanceSpace::oracle(&world, 0.0, 11).unwrap();
    let history = History::build(world.users.len(), &logs);
    let index = AnnIndex::new((0..world.videos.len() as u32).collect(), space.videos.clone()).unwrap();
    let watched: BTreeSet<VideoId> = logs.events.iter().filter(|e| e.clicked).map(|e| e.video_id).collect();
    let cfg = QrcfConfig::default();
    let tables = SimilarityTables {
        swing: build_swing_table(&build_click_graph(&logs), &cfg.swing, cfg.table_n).unwrap(),
        embedding: EmbeddingTable::build(&index, watched, cfg.table_n, SearchMode::Exact).unwrap(),
    };
    let (mut aligned, mut total) = (0usize, 0usize);
    for s in logs.sessions.iter().filter(|s| !world.queries[s.query_id as usize].ambiguous).take(300) {
        let brel = filter_relevant_behaviors(&space, s.user_id, s.query_id, history.before(s.user_id, s.timestamp), cfg.k, cfg.epsilon).unwrap();
        let out = qrcf_retrieve(&brel, &tables, &cfg);
        let topic = world.queries[s.query_id as usize].dominant_topic();
        total += out.len();
        aligned += out.entries.iter().filter(|c| world.videos[c.video_id as usize].dominant_topic() == topic).count();
    }
    assert!(total > 1000);
    assert!(aligned as f64 / total as f64 >= 0.95, "{aligned}/{total}");
}

// ---------- embedding I2I and ANN ----------

fn random_matrix(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut r = stream(seed, 78, 0);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    EmbeddingMatrix::from_rows(dim, &rows).unwrap()
}

#[test]
fn i2i_duplicate_first_and_exhaustive_case() {
    let mut m = random_matrix(50, 8, 1);
    let dup = m.row_f64(7);
    m.push(&dup).unwrap();
    let index = AnnIndex::new((0..51).collect(), m).unwrap();
    let hits = embedding_i2i_topk(&index, 7, 5, SearchMode::Exact).unwrap();
    assert_eq!(hits[0].id, 50);
    assert!((hits[0].score - 1.0).abs() < 1e-6);
    let all = embedding_i2i_topk(&index, 3, 100, SearchMode::Exact).unwrap();
    assert_eq!(all.len(), 50);
    assert!(all.iter().all(|s| s.id != 3));
    assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
    assert_eq!(embedding_i2i_topk(&index, 999, 5, SearchMode::Exact).unwrap_err().kind(), persearch::ErrorKind::Lookup);
}

#[test]
fn approximate_i2i_recall_at_20() {
    let m = random_matrix(10_000, 32, 2);
    let index = AnnIndex::new((0..10_000).collect(), m).unwrap().with_graph(HnswConfig::default()).unwrap();
    let mut hit = 0usize;
    for v in (0..10_000).step_by(100) {
        let exact: BTreeSet<u32> = embedding_i2i_topk(&index, v, 20, SearchMode::Exact).unwrap().iter().map(|s| s.id).collect();
        hit += embedding_i2i_topk(&index, v, 20, SearchMode::Approx).unwrap().iter().filter(|s| exact.contains(&s.id)).count();
    }
    let recall = hit as f64 / (100.0 * 20.0);
    assert!(recall >= 0.95, "recall@20 {recall}");
}

#[test]
fn exact_search_matches_exhaustive_scan() {
    let m = random_matrix(10_000, 32, 3);
    let index = AnnIndex::new((0..10_000).collect(), m.clone()).unwrap();
    let mut r = stream(4, 79, 0);
    for _ in 0..100 {
        let q: Vec<f64> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = index.search(&q, 10, SearchMode::Exact).unwrap();
        let qn = persearch::ann::to_unit_f32(&q);
        let mut all: Vec<(f64, u32)> = (0..10_000).map(|i| (persearch::ann::dot_f32(&qn, m.row(i)), i as u32)).collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        assert_eq!(got.iter().map(|s| s.id).collect::<Vec<_>>(), all[..10].iter().map(|x| x.1).collect::<Vec<_>>());
    }
}

// ---------- merge ----------

#[test]
fn merge_dedupes_and_keeps_per_source_scores() {
    let a = CandidateSet::from_scored(0, 0, RetrieverKind::Bm25, &[Scored::new(5, 2.0), Scored::new(6, 1.0)]);
    let b = CandidateSet::from_scored(0, 0, RetrieverKind::Pdr, &[Scored::new(6, 0.7), Scored::new(9, 0.1)]);
    let merged = merge_candidates(&[a, b]);
    assert_eq!(merged.iter().map(|m| m.video_id).collect::<Vec<_>>(), vec![5, 6, 9]);
    assert_eq!(merged[1].sources, vec![(RetrieverKind::Bm25, 1.0), (RetrieverKind::Pdr, 0.7)]);
}

#[test]
fn tables_text_round_trip() {
    let clicks: Vec<_> = (0..10).flat_map(random_clicks).collect();
    let swing = build_swing_table(&ClickGraph::from_clicks(clicks), &SwingConfig::default(), 4).unwrap();
    let index = AnnIndex::new((0..30).collect(), random_matrix(30, 8, 5)).unwrap();
    let embedding = EmbeddingTable::build(&index, 0..30, 4, SearchMode::Exact).unwrap();
    let tables = SimilarityTables { swing, embedding };
    let text = tables.to_text();
    assert_eq!(SimilarityTables::from_text(&text).unwrap(), tables);
    assert_eq!(SimilarityTables::from_text(&text).unwrap().to_text(), text);
    let cut = &text[..text.len() / 2];
    assert!(SimilarityTables::from_text(cut).is_err());
}
