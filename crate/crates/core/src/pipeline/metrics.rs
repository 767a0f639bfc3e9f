//! Engagement metrics over simulated first-page feedback.
//!
//! ```text
//! ctr_at_10             = #sessions with a first-page click / #sessions
//! watch_time_per_query  = Σ watch_s / #sessions
//! like_rate             = #likes / #video views (clicks)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng as _;

use super::{PipelineOutput, SearchRequest};
use crate::error::{Error, Result};
use crate::io::{field, TextArtifact, TextWriter};
use crate::math::KahanSum;
use crate::retrieval::RetrieverKind;
use crate::rng::{self, streams};
use crate::topk::TopK;
use crate::world::{engagement_oracle, sample_feedback, Feedback, VideoId, World};

/// Outcome of one impression on a replayed page, 1-based `rank`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpressionFeedback {
    pub rank: usize,
    pub video_id: VideoId,
    pub feedback: Feedback,
}

/// Feedback on one replayed first page.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionFeedback {
    pub request: SearchRequest,
    pub impressions: Vec<ImpressionFeedback>,
}

/// Per-session sufficient statistics; every metric is a ratio of their sums.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SessionStats {
    pub clicked: bool,
    pub watch_s: f64,
    pub views: u32,
    pub likes: u32,
}

impl SessionFeedback {
    pub fn stats(&self) -> SessionStats {
        let mut s = SessionStats::default();
        let mut watch = KahanSum::default();
        for imp in &self.impressions {
            if imp.feedback.clicked {
                s.clicked = true;
                s.views += 1;
                watch.add(imp.feedback.watch_s);
            }
            if imp.feedback.liked {
                s.likes += 1;
            }
        }
        s.watch_s = watch.value();
        s
    }
}

/// Draws feedback for every page position from the engagement oracle.
///
/// The random stream is keyed by `(seed, session, video)` rather than by
/// position, so two arms showing the same video to the same session share
/// its uniforms: paired replays compare arms under common random numbers.
pub fn simulate_feedback(world: &World, outputs: &[PipelineOutput], seed: u64) -> Result<Vec<SessionFeedback>> {
    outputs
        .iter()
        .map(|out| {
            let req = out.request;
            let user = world.user(req.user_id)?;
            let query = world.query(req.query_id)?;
            let impressions = out
                .page
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let video = world.video(s.id)?;
                    let e = engagement_oracle(&world.oracle, user, Some(query), video, i + 1);
                    let key = (u64::from(req.session_id) << 32) | u64::from(s.id);
                    let mut r = rng::stream(seed, streams::FEEDBACK, key);
                    Ok(ImpressionFeedback { rank: i + 1, video_id: s.id, feedback: sample_feedback(&e, &mut r) })
                })
                .collect::<Result<_>>()?;
            Ok(SessionFeedback { request: req, impressions })
        })
        .collect()
}

const FEEDBACK_KIND: &str = "feedback";
const FEEDBACK_VERSION: u32 = 1;

/// Records `session user query rank video clicked watch_s liked`; watch time
/// is written in shortest round-trip form so recomputation is exact.
pub fn feedback_to_text(feedback: &[SessionFeedback]) -> String {
    let mut w = TextWriter::new(FEEDBACK_KIND, FEEDBACK_VERSION);
    for s in feedback {
        let r = s.request;
        w.record([
            "session".to_string(),
            r.session_id.to_string(),
            r.user_id.to_string(),
            r.query_id.to_string(),
            r.timestamp.to_string(),
        ]);
        for imp in &s.impressions {
            w.record([
                "imp".to_string(),
                imp.rank.to_string(),
                imp.video_id.to_string(),
                u8::from(imp.feedback.clicked).to_string(),
                imp.feedback.watch_s.to_string(),
                u8::from(imp.feedback.liked).to_string(),
            ]);
        }
    }
    w.finish()
}

pub fn feedback_from_text(text: &str) -> Result<Vec<SessionFeedback>> {
    let art = TextArtifact::open(text, FEEDBACK_KIND, FEEDBACK_VERSION)?;
    let mut out: Vec<SessionFeedback> = Vec::new();
    for (line, f) in art.records() {
        match f.first().copied() {
            Some("session") => out.push(SessionFeedback {
                request: SearchRequest {
                    session_id: field(&f, 1, line, "session id")?,
                    user_id: field(&f, 2, line, "user id")?,
                    query_id: field(&f, 3, line, "query id")?,
                    timestamp: field(&f, 4, line, "timestamp")?,
                },
                impressions: Vec::new(),
            }),
            Some("imp") => {
                let s = out.last_mut().ok_or_else(|| Error::format(line, "impression before any session"))?;
                let flag = |i: usize, what: &str| -> Result<bool> {
                    match field::<u8>(&f, i, line, what)? {
                        0 => Ok(false),
                        1 => Ok(true),
                        other => Err(Error::format(line, format!("{what} flag must be 0 or 1, got {other}"))),
                    }
                };
                s.impressions.push(ImpressionFeedback {
                    rank: field(&f, 1, line, "rank")?,
                    video_id: field(&f, 2, line, "video id")?,
                    feedback: Feedback {
                        clicked: flag(3, "clicked")?,
                        watch_s: field(&f, 4, line, "watch seconds")?,
                        liked: flag(5, "liked")?,
                    },
                });
            }
            other => return Err(Error::format(line, format!("unknown feedback record {other:?}"))),
        }
    }
    Ok(out)
}

/// A metric with its bootstrap standard error over sessions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub sessions: usize,
    pub clicked_sessions: usize,
    pub views: u64,
    pub likes: u64,
    pub ctr_at_10: Estimate,
    pub watch_time_per_query: Estimate,
    pub like_rate: Estimate,
    /// Present when the report was built with ground-truth relevance.
    pub ndcg_at_10: Option<Estimate>,
    /// Mean share of the oracle-relevant set each retriever returned.
    pub recall: Vec<(RetrieverKind, Estimate)>,
}

/// Sums a session subset into `(ctr, watch per query, like rate)`.
pub fn ratios(stats: &[SessionStats], pick: impl Iterator<Item = usize>) -> (f64, f64, f64) {
    let (mut n, mut clicked, mut views, mut likes) = (0usize, 0usize, 0u64, 0u64);
    let mut watch = KahanSum::default();
    for i in pick {
        let s = &stats[i];
        n += 1;
        clicked += usize::from(s.clicked);
        views += u64::from(s.views);
        likes += u64::from(s.likes);
        watch.add(s.watch_s);
    }
    let n = n.max(1) as f64;
    let like_rate = if views == 0 { 0.0 } else { likes as f64 / views as f64 };
    (clicked as f64 / n, watch.value() / n, like_rate)
}

fn bootstrap_se(samples: &[f64]) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn mean_estimate(values: &[f64], resamples: usize, seed: u64, salt: u64) -> Estimate {
    let n = values.len();
    let value = values.iter().sum::<f64>() / n.max(1) as f64;
    let mut r = rng::stream(seed, streams::BOOTSTRAP, salt);
    let draws: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[r.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    Estimate { value, se: bootstrap_se(&draws) }
}

/// Settings for [`evaluate_metrics`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsConfig {
    pub bootstrap: usize,
    /// Size of the oracle-relevant set used for recall and the NDCG ideal.
    pub relevant_top: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { bootstrap: 200, relevant_top: 50 }
    }
}

/// Engagement metrics with bootstrap standard errors; pure arithmetic over
/// the feedback log.
pub fn evaluate_feedback(feedback: &[SessionFeedback], cfg: &MetricsConfig, seed: u64) -> Result<MetricsReport> {
    if feedback.is_empty() {
        return Err(Error::Data("no sessions to evaluate".into()));
    }
    let stats: Vec<SessionStats> = feedback.iter().map(SessionFeedback::stats).collect();
    let n = stats.len();
    let (ctr, watch, like) = ratios(&stats, 0..n);
    let mut r = rng::stream(seed, streams::BOOTSTRAP, 0);
    let mut draws = [Vec::new(), Vec::new(), Vec::new()];
    let mut pick = vec![0usize; n];
    for _ in 0..cfg.bootstrap {
        for p in pick.iter_mut() {
            *p = r.random_range(0..n);
        }
        let (c, w, l) = ratios(&stats, pick.iter().copied());
        draws[0].push(c);
        draws[1].push(w);
        draws[2].push(l);
    }
    Ok(MetricsReport {
        sessions: n,
        clicked_sessions: stats.iter().filter(|s| s.clicked).count(),
        views: stats.iter().map(|s| u64::from(s.views)).sum(),
        likes: stats.iter().map(|s| u64::from(s.likes)).sum(),
        ctr_at_10: Estimate { value: ctr, se: bootstrap_se(&draws[0]) },
        watch_time_per_query: Estimate { value: watch, se: bootstrap_se(&draws[1]) },
        like_rate: Estimate { value: like, se: bootstrap_se(&draws[2]) },
        ndcg_at_10: None,
        recall: Vec::new(),
    })
}

/// Ground-truth top-`n` videos for a request by first-position click
/// probability, best first, ties to the lower id.
pub fn oracle_relevant(world: &World, req: &SearchRequest, n: usize) -> Result<Vec<(VideoId, f64)>> {
    let user = world.user(req.user_id)?;
    let query = world.query(req.query_id)?;
    let mut top = TopK::new(n);
    for v in &world.videos {
        top.push(v.video_id, engagement_oracle(&world.oracle, user, Some(query), v, 1).p_click);
    }
    Ok(top.into_sorted().into_iter().map(|s| (s.id, s.score)).collect())
}

/// NDCG@10 with the oracle click probability as gain, against the ideal
/// ordering of the oracle-relevant set.
pub fn ndcg_at_10(world: &World, out: &PipelineOutput, relevant: &[(VideoId, f64)]) -> Result<f64> {
    let user = world.user(out.request.user_id)?;
    let query = world.query(out.request.query_id)?;
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let mut dcg = 0.0;
    for (i, s) in out.page.iter().take(10).enumerate() {
        let gain = engagement_oracle(&world.oracle, user, Some(query), world.video(s.id)?, 1).p_click;
        dcg += gain * discount(i);
    }
    let ideal: f64 = relevant.iter().take(10).enumerate().map(|(i, &(_, g))| g * discount(i)).sum();
    Ok(if ideal > 0.0 { dcg / ideal } else { 0.0 })
}

/// Simulates feedback on the pages, then computes every metric including
/// NDCG@10 and per-retriever recall against the oracle-relevant sets.
pub fn evaluate_metrics(
    world: &World,
    outputs: &[PipelineOutput],
    cfg: &MetricsConfig,
    seed: u64,
) -> Result<(MetricsReport, Vec<SessionFeedback>)> {
    let feedback = simulate_feedback(world, outputs, seed)?;
    let mut report = evaluate_feedback(&feedback, cfg, seed)?;
    let mut ndcg = Vec::with_capacity(outputs.len());
    let mut recall: BTreeMap<RetrieverKind, Vec<f64>> = BTreeMap::new();
    for out in outputs {
        let relevant = oracle_relevant(world, &out.request, cfg.relevant_top)?;
        ndcg.push(ndcg_at_10(world, out, &relevant)?);
        let ids: std::collections::HashSet<VideoId> = relevant.iter().map(|&(v, _)| v).collect();
        for set in &out.candidates {
            let source = match set.entries.first() {
                Some(c) => c.source,
                None => continue,
            };
            let hit = set.entries.iter().filter(|c| ids.contains(&c.video_id)).count();
            recall.entry(source).or_default().push(hit as f64 / ids.len().max(1) as f64);
        }
    }
    report.ndcg_at_10 = Some(mean_estimate(&ndcg, cfg.bootstrap, seed, 1));
    report.recall = recall
        .into_iter()
        .map(|(k, v)| (k, mean_estimate(&v, cfg.bootstrap, seed, 2 + k as u64)))
        .collect();
    Ok((report, feedback))
}

const REPORT_KIND: &str = "metrics";
const REPORT_VERSION: u32 = 1;

impl MetricsReport {
    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>12} {:>10}", "metric", "value", "se");
        let mut row = |name: &str, e: Estimate| {
            let _ = writeln!(s, "{name:<24} {:>12.6} {:>10.6}", e.value, e.se);
        };
        row("ctr_at_10", self.ctr_at_10);
        row("watch_time_per_query", self.watch_time_per_query);
        row("like_rate", self.like_rate);
        if let Some(n) = self.ndcg_at_10 {
            row("ndcg_at_10", n);
        }
        for &(k, e) in &self.recall {
            row(&format!("recall@{}", k.name()), e);
        }
        let _ = writeln!(
            s,
            "sessions {}  clicked {}  views {}  likes {}",
            self.sessions, self.clicked_sessions, self.views, self.likes
        );
        s
    }

    /// Line records `metric name value se`, floats in round-trip form.
    pub fn to_text(&self) -> String {
        let mut w = TextWriter::new(REPORT_KIND, REPORT_VERSION);
        for (name, v) in [
            ("sessions", self.sessions as u64),
            ("clicked_sessions", self.clicked_sessions as u64),
            ("views", self.views),
            ("likes", self.likes),
        ] {
            w.record(["count".to_string(), name.to_string(), v.to_string()]);
        }
        let mut metric = |name: String, e: Estimate| {
            w.record(["metric".to_string(), name, e.value.to_string(), e.se.to_string()]);
        };
        metric("ctr_at_10".into(), self.ctr_at_10);
        metric("watch_time_per_query".into(), self.watch_time_per_query);
        metric("like_rate".into(), self.like_rate);
        if let Some(n) = self.ndcg_at_10 {
            metric("ndcg_at_10".into(), n);
        }
        for &(k, e) in &self.recall {
            metric(format!("recall@{}", k.name()), e);
        }
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let art = TextArtifact::open(text, REPORT_KIND, REPORT_VERSION)?;
        let mut r = MetricsReport {
            sessions: 0,
            clicked_sessions: 0,
            views: 0,
            likes: 0,
            ctr_at_10: Estimate::default(),
            watch_time_per_query: Estimate::default(),
            like_rate: Estimate::default(),
            ndcg_at_10: None,
            recall: Vec::new(),
        };
        for (line, f) in art.records() {
            match (f.first().copied(), f.get(1).copied()) {
                (Some("count"), Some(name)) => {
                    let v: u64 = field(&f, 2, line, "count")?;
                    match name {
                        "sessions" => r.sessions = v as usize,
                        "clicked_sessions" => r.clicked_sessions = v as usize,
                        "views" => r.views = v,
                        "likes" => r.likes = v,
                        _ => return Err(Error::format(line, format!("unknown count `{name}`"))),
                    }
                }
                (Some("metric"), Some(name)) => {
                    let e = Estimate { value: field(&f, 2, line, "value")?, se: field(&f, 3, line, "se")? };
                    match name {
                        "ctr_at_10" => r.ctr_at_10 = e,
                        "watch_time_per_query" => r.watch_time_per_query = e,
                        "like_rate" => r.like_rate = e,
                        "ndcg_at_10" => r.ndcg_at_10 = Some(e),
                        other => match other.strip_prefix("recall@") {
                            Some(k) => r.recall.push((k.parse().map_err(|_| Error::format(line, "bad retriever"))?, e)),
                            None => return Err(Error::format(line, format!("unknown metric `{other}`"))),
                        },
                    }
                }
                _ => return Err(Error::format(line, "malformed metrics record")),
            }
        }
        Ok(r)
    }
}
