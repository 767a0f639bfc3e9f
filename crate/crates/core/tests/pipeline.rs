use std::collections::HashSet;

use persearch::encoders::EncoderConfig;
use persearch::error::Error;
use persearch::pipeline::abtest::*;
use persearch::pipeline::metrics::*;
use persearch::pipeline::persist::*;
use persearch::pipeline::*;
use persearch::ranking::qin::QinConfig;
use persearch::retrieval::pdr::PdrConfig;
use persearch::retrieval::RetrieverKind;
use persearch::world::*;

fn small_config() -> SystemConfig {
    SystemConfig {
        world: WorldConfig { users: 150, videos: 2000, queries: 150, ..WorldConfig::default() },
        days: 5,
        encoder: EncoderConfig { epochs: 2, ..EncoderConfig::default() },
        pdr: PdrConfig { epochs: 1, batch: 128, ..PdrConfig::default() },
        qin: QinConfig { epochs: 1, ..QinConfig::default() },
        ..SystemConfig::default()
    }
}

fn small_system(seed: u64) -> System {
    let cfg = small_config();
    let world = generate_world(&cfg.world, seed).unwrap();
    let logs = simulate_logs(&world, &cfg.logs, cfg.days, seed).unwrap();
    build_system(world, logs, &cfg, seed).unwrap()
}

fn held_out(sys: &System, n: usize) -> Vec<SearchRequest> {
    eval_requests(&sys.logs, sys.train_end, n, 3)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

fn page_ids(out: &PipelineOutput) -> Vec<VideoId> {
    out.page.iter().map(|s| s.id).collect()
}

#[test]
fn pipeline_composition_dedupe_and_determinism() {
    let sys = small_system(51);
    let reqs = held_out(&sys, 40);
    assert!(reqs.len() >= 20);

    // one retriever and the relevance ranker: the retrieved set re-sorted by relevance
    let single = PipelineConfig { retrievers: vec![RetrieverKind::Bm25], ..PipelineConfig::base() };
    for req in &reqs {
        let out = sys.run_pipeline(&single, req).unwrap();
        let mut want: Vec<(f64, VideoId)> = out.candidates[0]
            .video_ids()
            .into_iter()
            .map(|v| (dot(sys.space.query(req.query_id), sys.space.video(v)), v))
            .collect();
        want.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        want.truncate(10);
        assert_eq!(page_ids(&out), want.iter().map(|w| w.1).collect::<Vec<_>>());
        for (s, w) in out.page.iter().zip(&want) {
            assert!((s.score - w.0).abs() < 1e-6);
        }
    }

    // every retriever: union of capped lists, each video once
    let all = PipelineConfig::pr2();
    let mut overlaps = 0;
    for req in &reqs {
        let out = sys.run_pipeline(&all, req).unwrap();
        assert_eq!(out.candidates.len(), 5);
        let mut union = HashSet::new();
        let mut total = 0;
        for set in &out.candidates {
            assert!(set.len() <= all.merge_cap);
            total += set.len();
            union.extend(set.video_ids());
        }
        overlaps += total - union.len();
        assert_eq!(out.pool_size, union.len());
        let page = page_ids(&out);
        assert_eq!(page.len(), 10);
        assert_eq!(page.iter().collect::<HashSet<_>>().len(), 10);
        assert!(page.iter().all(|v| union.contains(v)));
    }
    assert!(overlaps > 0, "no video was ever returned by two retrievers");

    // fixed seeds: identical pages, feedback and report
    let cfg = MetricsConfig::default();
    let a = sys.run_all(&all, &reqs).unwrap();
    let b = sys.run_all(&all, &reqs).unwrap();
    assert_eq!(a, b);
    let (ra, fa) = evaluate_metrics(&sys.world, &a, &cfg, 9).unwrap();
    let (rb, fb) = evaluate_metrics(&sys.world, &b, &cfg, 9).unwrap();
    assert_eq!(ra.to_text(), rb.to_text());
    assert_eq!(feedback_to_text(&fa), feedback_to_text(&fb));
    for (_, e) in &ra.recall {
        assert!((0.0..=1.0).contains(&e.value));
    }
    let ndcg = ra.ndcg_at_10.unwrap().value;
    assert!((0.0..=1.0).contains(&ndcg));

    // a request with no history gets nothing from collaborative filtering
    let cold = SearchRequest { timestamp: 0, ..reqs[0] };
    let cf_only = PipelineConfig { retrievers: vec![RetrieverKind::QrcfSwing], ..PipelineConfig::base() };
    let out = sys.run_pipeline(&cf_only, &cold).unwrap();
    assert!(out.page.is_empty());
    assert_eq!(out.pool_size, 0);
}

/// Recomputes the three engagement metrics from the serialized feedback,
/// reading the records directly.
fn recompute(text: &str) -> (f64, f64, f64) {
    let (mut sessions, mut clicked, mut views, mut likes, mut watch) = (0usize, 0usize, 0u64, 0u64, 0.0);
    let mut current_clicked = false;
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split('\t').collect();
        match f[0] {
            "session" => {
                clicked += usize::from(current_clicked);
                current_clicked = false;
                sessions += 1;
            }
            "imp" => {
                if f[3] == "1" {
                    current_clicked = true;
                    views += 1;
                    watch += f[4].parse::<f64>().unwrap();
                }
                likes += u64::from(f[5] == "1");
            }
            other => panic!("unexpected record {other}"),
        }
    }
    clicked += usize::from(current_clicked);
    let like = if views == 0 { 0.0 } else { likes as f64 / views as f64 };
    (clicked as f64 / sessions as f64, watch / sessions as f64, like)
}

#[test]
fn metrics_follow_their_definitions() {
    let fb = |session: u32, clicks: &[(bool, f64, bool)]| SessionFeedback {
        request: SearchRequest { session_id: session, user_id: 0, query_id: 0, timestamp: 0 },
        impressions: clicks
            .iter()
            .enumerate()
            .map(|(i, &(clicked, watch_s, liked))| ImpressionFeedback {
                rank: i + 1,
                video_id: i as u32,
                feedback: Feedback { clicked, watch_s, liked },
            })
            .collect(),
    };
    let mut sessions = Vec::new();
    for s in 0..10 {
        let clicks: Vec<(bool, f64, bool)> = match s {
            0 => vec![(true, 12.5, false), (true, 3.0, false)],
            4 => vec![(false, 0.0, false), (true, 30.0, false)],
            7 => vec![(true, 1.5, false)],
            _ => vec![(false, 0.0, false); 10],
        };
        sessions.push(fb(s, &clicks));
    }
    let report = evaluate_feedback(&sessions, &MetricsConfig::default(), 1).unwrap();
    assert_eq!(report.ctr_at_10.value, 0.3);
    assert_eq!(report.clicked_sessions, 3);
    assert_eq!(report.views, 4);
    assert_eq!(report.like_rate.value, 0.0);
    assert!((report.watch_time_per_query.value - 4.7).abs() < 1e-12);
    assert!(report.ctr_at_10.se > 0.0);

    sessions[4].impressions[1].feedback.liked = true;
    let liked = evaluate_feedback(&sessions, &MetricsConfig::default(), 1).unwrap();
    assert_eq!(liked.like_rate.value, 0.25);

    assert!(matches!(evaluate_feedback(&[], &MetricsConfig::default(), 1), Err(Error::Data(_))));
    let none = vec![fb(0, &[(false, 0.0, false)])];
    assert_eq!(evaluate_feedback(&none, &MetricsConfig::default(), 1).unwrap().like_rate.value, 0.0);
}

#[test]
fn serialized_feedback_reproduces_the_report() {
    let sys = small_system(52);
    let reqs = held_out(&sys, 60);
    let pages = sys.run_all(&PipelineConfig::qin(), &reqs).unwrap();
    let (report, feedback) = evaluate_metrics(&sys.world, &pages, &MetricsConfig::default(), 4).unwrap();
    let text = feedback_to_text(&feedback);
    assert_eq!(feedback_from_text(&text).unwrap(), feedback);
    let (ctr, watch, like) = recompute(&text);
    assert_eq!(report.ctr_at_10.value, ctr);
    assert!((report.watch_time_per_query.value - watch).abs() <= 1e-12 * watch.max(1.0));
    assert_eq!(report.like_rate.value, like);
    assert_eq!(MetricsReport::from_text(&report.to_text()).unwrap(), report);
    let mut bad = text.replacen("imp\t1", "imp\t2", 1);
    bad.push('\n');
    assert!(feedback_from_text(&bad).is_err());
}

#[test]
fn ab_replay_null_and_upper_bound_arms() {
    let sys = small_system(53);
    let reqs = held_out(&sys, 200);
    let ab = AbConfig::default();
    assert_eq!(ab.repeats, 5);

    let null = simulate_abtest(&sys, &PipelineConfig::base(), &PipelineConfig::base(), &reqs, &ab, 5).unwrap();
    for d in &null.deltas {
        assert_eq!(d.relative, 0.0);
        assert!(d.ci_low <= 0.0 && d.ci_high >= 0.0);
        assert!(!d.significant_gain(ab.alpha));
    }

    let oracle = PipelineConfig { name: "oracle".into(), ranker: RankerKind::Oracle, ..PipelineConfig::base() };
    let up = simulate_abtest(&sys, &PipelineConfig::base(), &oracle, &reqs, &ab, 5).unwrap();
    let ctr = up.delta("ctr_at_10").unwrap();
    assert!(ctr.relative > 0.0 && ctr.ci_low > 0.0, "{ctr:?}");
    assert!(ctr.significant_gain(ab.alpha));
    assert!(!up.to_table().is_empty() && up.to_records().lines().count() >= 3);

    let few = AbConfig { repeats: 4, ..ab };
    assert!(simulate_abtest(&sys, &PipelineConfig::base(), &oracle, &reqs, &few, 5).is_err());

    // identical arms replayed under independent seeds: false positives stay rare
    let pages = sys.run_all(&PipelineConfig::base(), &reqs).unwrap();
    let cheap = AbConfig { bootstrap: 200, ..ab };
    let trials = 40u64;
    let mut flagged = 0;
    for t in 0..trials {
        let c = replay(&sys, &pages, cheap.repeats, 1000 + 2 * t).unwrap();
        let tr = replay(&sys, &pages, cheap.repeats, 1001 + 2 * t).unwrap();
        let deltas = compare_feedback(&c, &tr, &cheap, t).unwrap();
        flagged += usize::from(deltas.iter().any(|d| d.p_value < 0.05 && d.sign_p < 0.05));
    }
    assert!(flagged as u64 * 10 <= trials, "{flagged} of {trials} null trials flagged");
}

#[test]
fn sign_test_tail_probabilities() {
    assert_eq!(sign_test_p(5, 5), 1.0 / 32.0);
    assert_eq!(sign_test_p(0, 5), 1.0);
    assert!((sign_test_p(4, 5) - 6.0 / 32.0).abs() < 1e-15);
}

#[test]
fn saved_system_retrieves_identically() {
    let sys = small_system(54);
    let dir = tempfile::tempdir().unwrap();
    save_system(&sys, dir.path()).unwrap();
    let back = load_system(dir.path()).unwrap();
    assert_eq!(write_world(&back.world), write_world(&sys.world));
    assert_eq!(write_logs(&back.logs), write_logs(&sys.logs));
    assert_eq!(back.train_end, sys.train_end);
    let reqs = held_out(&sys, 30);
    for cfg in [PipelineConfig::base(), PipelineConfig::pr2()] {
        assert_eq!(sys.run_all(&cfg, &reqs).unwrap(), back.run_all(&cfg, &reqs).unwrap());
    }

    let ck = dir.path().join(QIN);
    let bytes = std::fs::read(&ck).unwrap();
    std::fs::write(&ck, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_system(dir.path()).is_err());
}

#[test]
fn presets_and_config_validation() {
    assert_eq!(PipelineConfig::base().retrievers, vec![RetrieverKind::Bm25, RetrieverKind::DrBaseline]);
    assert_eq!(PipelineConfig::pr2().retrievers, RetrieverKind::ALL.to_vec());
    assert_eq!(PipelineConfig::qin().ranker, RankerKind::Qin);
    assert_eq!(PipelineConfig::qrcf_pdr().ranker, RankerKind::Relevance);
    for name in ["base", "qrcf_pdr", "qin", "pr2"] {
        let p = PipelineConfig::by_name(name).unwrap();
        assert_eq!(p.name, name);
        assert_eq!(p.page_size, 10);
    }
    assert!(PipelineConfig::by_name("nope").is_err());
    assert!(PipelineConfig { page_size: 0, ..PipelineConfig::base() }.validate().is_err());
    assert!(PipelineConfig { retrievers: vec![], ..PipelineConfig::base() }.validate().is_err());

    let mut cfg = SystemConfig::default();
    let kv = persearch::config::KeyValues::parse("system.days = 4\nqin.stage1_k = 200\n").unwrap();
    cfg.apply(&kv).unwrap();
    assert_eq!((cfg.days, cfg.qin.gsu.stage1_k), (4, 200));
    let unknown = persearch::config::KeyValues::parse("system.dayz = 4\n").unwrap();
    assert!(matches!(SystemConfig::default().apply(&unknown), Err(Error::Config(_))));
    let one_day = persearch::config::KeyValues::parse("system.days = 1\n").unwrap();
    assert!(SystemConfig::default().apply(&one_day).is_err());
}

#[test]
fn eval_requests_sample_one_day_in_session_order() {
    let world = generate_world(&WorldConfig { users: 100, videos: 500, queries: 50, ..WorldConfig::default() }, 55).unwrap();
    let logs = simulate_logs(&world, &LogConfig::default(), 3, 55).unwrap();
    let day2 = logs.sessions.iter().filter(|s| s.day == 2).count();
    assert_eq!(eval_requests(&logs, 2, usize::MAX, 1).len(), day2);
    let some = eval_requests(&logs, 2, day2 / 2, 1);
    assert_eq!(some.len(), day2 / 2);
    assert!(some.windows(2).all(|w| w[0].session_id < w[1].session_id));
    assert_eq!(some, eval_requests(&logs, 2, day2 / 2, 1));
    let ids: HashSet<u32> = logs.sessions.iter().filter(|s| s.day == 2).map(|s| s.session_id).collect();
    assert!(some.iter().all(|r| ids.contains(&r.session_id)));
}

#[test]
fn personalized_arm_changes_ambiguous_pages_in_two_cohort_world() {
    let world = two_cohort_world(&TwoCohortConfig::default(), 56).unwrap();
    let cfg = SystemConfig { days: 6, ..small_config() };
    let logs = simulate_logs(&world, &cfg.logs, cfg.days, 56).unwrap();
    let sys = build_system(world, logs, &cfg, 56).unwrap();
    let end = sys.logs.events.iter().map(|e| e.timestamp).max().unwrap() + 1;
    let reqs: Vec<SearchRequest> = (0..sys.world.users.len() as u32)
        .map(|u| SearchRequest { session_id: 1_000_000 + u, user_id: u, query_id: 0, timestamp: end })
        .collect();
    let base = sys.run_all(&PipelineConfig::base(), &reqs).unwrap();
    let pr2 = sys.run_all(&PipelineConfig::pr2(), &reqs).unwrap();
    let differ = base.iter().zip(&pr2).filter(|(a, b)| page_ids(a) != page_ids(b)).count();
    assert!(differ * 10 >= reqs.len() * 3, "{differ} of {} pages differ", reqs.len());
}
