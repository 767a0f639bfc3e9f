use std::path::Path;
use std::process::{Command, Output};

use persearch::pipeline::metrics::{evaluate_feedback, feedback_from_text, MetricsConfig, MetricsReport};

const SMALL: &str = "\
world.users = 120
world.videos = 1500
world.queries = 100
system.days = 4
encoder.epochs = 1
pdr.epochs = 1
qin.epochs = 1
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_persearch"))
        .current_dir(dir)
        .args(["--config", "small.cfg", "--out", "out", "--seed", "11"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn records<'a>(text: &'a str, kind: &str) -> Vec<Vec<&'a str>> {
    text.lines().map(|l| l.split('\t').collect::<Vec<_>>()).filter(|f| f[0] == kind).collect()
}

#[test]
fn end_to_end_run_on_a_small_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("small.cfg"), SMALL).unwrap();
    for step in ["generate", "simulate-logs", "train-encoder", "train-pdr", "train-qin", "build-index", "build-tables"] {
        ok(dir, &[step]);
    }
    for artifact in ["world.txt", "logs.txt", "encoder.ckpt", "pdr.ckpt", "pdr.ann", "qin.ckpt", "tables.txt", "system.kv"] {
        assert!(dir.join("out").join(artifact).is_file(), "missing {artifact}");
    }

    let retrieved = ok(dir, &["retrieve", "--user", "3", "--query", "5", "--retriever", "pdr"]);
    let hits = records(&retrieved, "cand");
    assert_eq!(hits.len(), 100, "{retrieved}");

    let ranked = ok(dir, &["rank", "--user", "3", "--query", "5", "--preset", "pr2"]);
    let page = records(&ranked, "page");
    assert_eq!(page.len(), 10);
    for (i, f) in page.iter().enumerate() {
        assert_eq!((f[1], f[2]), ("5", "3"));
        assert_eq!(f[3], (i + 1).to_string());
    }
    let scores: Vec<f64> = page.iter().map(|f| f[5].parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    ok(dir, &["evaluate", "--preset", "qin", "--sessions", "60"]);
    let report = MetricsReport::from_text(&std::fs::read_to_string(dir.join("out/report.qin.txt")).unwrap()).unwrap();
    let feedback = feedback_from_text(&std::fs::read_to_string(dir.join("out/feedback.qin.txt")).unwrap()).unwrap();
    assert_eq!(report.sessions, feedback.len());
    let again = evaluate_feedback(&feedback, &MetricsConfig::default(), 0).unwrap();
    assert_eq!(again.ctr_at_10.value, report.ctr_at_10.value);
    assert_eq!(again.like_rate.value, report.like_rate.value);
    assert!((again.watch_time_per_query.value - report.watch_time_per_query.value).abs() < 1e-12);

    let ab = ok(dir, &["abtest", "--control", "base", "--treatment", "qin", "--sessions", "60"]);
    let deltas = records(&ab, "delta");
    assert_eq!(deltas.len(), 3);
    assert_eq!(deltas.iter().map(|f| f[3]).collect::<Vec<_>>(), ["ctr_at_10", "watch_time_per_query", "like_rate"]);
    assert_eq!(ab, ok(dir, &["abtest", "--control", "base", "--treatment", "qin", "--sessions", "60"]));

    // failures map to their category's exit code
    assert_eq!(run(dir, &["retrieve", "--user", "99999", "--query", "1"]).status.code(), Some(6));
    assert_eq!(run(dir, &["rank", "--user", "1", "--query", "1", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(run(dir, &["abtest", "--sessions", "60", "--repeats", "3"]).status.code(), Some(2));
}

#[test]
fn generation_is_reproducible_and_errors_are_categorized() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("small.cfg"), SMALL).unwrap();
    ok(dir, &["generate"]);
    let first = std::fs::read(dir.join("out/world.txt")).unwrap();
    ok(dir, &["generate"]);
    assert_eq!(first, std::fs::read(dir.join("out/world.txt")).unwrap());

    std::fs::write(dir.join("bad.cfg"), "bogus.key = 1\n").unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_persearch"))
        .current_dir(dir)
        .args(["--config", "bad.cfg", "--out", "other", "generate"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bogus.key"));

    // later stages without their inputs fail with a data error naming the missing artifact
    let missing = Command::new(env!("CARGO_BIN_EXE_persearch"))
        .current_dir(dir)
        .args(["--out", "empty", "train-qin"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("world.txt"));

    std::fs::write(dir.join("out/world.txt"), &first[..first.len() / 2]).unwrap();
    let corrupt = run(dir, &["simulate-logs"]);
    assert!(!corrupt.status.success());
    assert_ne!(corrupt.status.code(), Some(0));
}
