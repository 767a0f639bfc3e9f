//! Paired counterfactual replay of two arms over one session set.
//!
//! Both arms see the same sessions and, for each replay seed, the same
//! feedback uniforms per `(session, video)`. Per metric the report gives the
//! relative delta of the seed-averaged per-session sums, a bootstrap interval
//! and two-sided p-value over sessions, and a one-sided sign test across
//! seeds.

use std::fmt::Write as _;

use rand::Rng as _;

use super::metrics::{ratios, simulate_feedback, SessionFeedback, SessionStats};
use super::{PipelineConfig, PipelineOutput, SearchRequest, System};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

pub const METRICS: [&str; 3] = ["ctr_at_10", "watch_time_per_query", "like_rate"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbConfig {
    pub repeats: usize,
    pub bootstrap: usize,
    pub alpha: f64,
}

impl Default for AbConfig {
    fn default() -> Self {
        AbConfig { repeats: 5, bootstrap: 1000, alpha: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricDelta {
    pub control: f64,
    pub treatment: f64,
    /// `(treatment - control) / control`.
    pub relative: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    /// Seeds whose own relative delta was positive.
    pub positive_seeds: usize,
    pub sign_p: f64,
}

impl MetricDelta {
    /// Positive delta, bootstrap p below `alpha` and a sign test below `alpha`.
    pub fn significant_gain(&self, alpha: f64) -> bool {
        self.relative > 0.0 && self.p_value < alpha && self.sign_p < alpha
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbReport {
    pub control: String,
    pub treatment: String,
    pub sessions: usize,
    pub repeats: usize,
    /// Ordered as [`METRICS`].
    pub deltas: [MetricDelta; 3],
}

fn relative(c: f64, t: f64) -> f64 {
    if c == 0.0 {
        if t == 0.0 { 0.0 } else { f64::INFINITY.copysign(t) }
    } else {
        (t - c) / c
    }
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    let mut p = 0.0;
    let mut c = 1.0f64;
    for i in 0..=n {
        if i >= k {
            p += c;
        }
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    p / 2f64.powi(n as i32)
}

/// Each session's watch, view and like sums over all seeds. The click flag
/// is left unset: CTR is pooled separately by [`ctr_share`].
fn pooled(per_seed: &[Vec<SessionStats>]) -> Vec<SessionStats> {
    let n = per_seed[0].len();
    (0..n)
        .map(|i| {
            let mut s = SessionStats::default();
            for seed in per_seed {
                let x = seed[i];
                s.watch_s += x.watch_s;
                s.views += x.views;
                s.likes += x.likes;
            }
            s
        })
        .collect()
}

fn metric_of(stats: &[SessionStats], pick: impl Iterator<Item = usize>) -> [f64; 3] {
    let (c, w, l) = ratios(stats, pick);
    [c, w, l]
}

/// Share of seeds in which each session had a first-page click.
fn ctr_share(per_seed: &[Vec<SessionStats>]) -> Vec<f64> {
    let n = per_seed[0].len();
    (0..n)
        .map(|i| per_seed.iter().filter(|s| s[i].clicked).count() as f64 / per_seed.len() as f64)
        .collect()
}

/// Compares feedback already simulated for both arms; the outer index is the
/// replay seed, the inner index the session.
pub fn compare_feedback(
    control: &[Vec<SessionFeedback>],
    treatment: &[Vec<SessionFeedback>],
    cfg: &AbConfig,
    seed: u64,
) -> Result<[MetricDelta; 3]> {
    if control.is_empty() || control.len() != treatment.len() {
        return Err(Error::Config("both arms need the same nonzero number of replays".into()));
    }
    let to_stats = |arm: &[Vec<SessionFeedback>]| -> Vec<Vec<SessionStats>> {
        arm.iter().map(|fb| fb.iter().map(SessionFeedback::stats).collect()).collect()
    };
    let (cs, ts) = (to_stats(control), to_stats(treatment));
    let n = cs[0].len();
    if n == 0 || cs.iter().chain(&ts).any(|s| s.len() != n) {
        return Err(Error::Data("arms must replay the same nonempty session set".into()));
    }
    let per_seed_pos: Vec<[bool; 3]> = cs
        .iter()
        .zip(&ts)
        .map(|(c, t)| {
            let (mc, mt) = (metric_of(c, 0..n), metric_of(t, 0..n));
            std::array::from_fn(|m| relative(mc[m], mt[m]) > 0.0)
        })
        .collect();
    let (pc, pt) = (pooled(&cs), pooled(&ts));
    let (sc, st) = (ctr_share(&cs), ctr_share(&ts));
    let seeds = cs.len();
    let point = |pick: &[usize]| -> ([f64; 3], [f64; 3]) {
        let mut c = metric_of(&pc, pick.iter().copied());
        let mut t = metric_of(&pt, pick.iter().copied());
        let m = pick.len() as f64;
        c[0] = pick.iter().map(|&i| sc[i]).sum::<f64>() / m;
        t[0] = pick.iter().map(|&i| st[i]).sum::<f64>() / m;
        c[1] /= seeds as f64;
        t[1] /= seeds as f64;
        (c, t)
    };
    let all: Vec<usize> = (0..n).collect();
    let (c0, t0) = point(&all);
    let mut r = rng::stream(seed, streams::BOOTSTRAP, 1 << 32);
    let mut draws: [Vec<f64>; 3] = Default::default();
    let mut pick = vec![0usize; n];
    for _ in 0..cfg.bootstrap {
        for p in pick.iter_mut() {
            *p = r.random_range(0..n);
        }
        let (c, t) = point(&pick);
        for m in 0..3 {
            draws[m].push(relative(c[m], t[m]));
        }
    }
    Ok(std::array::from_fn(|m| {
        let d = &mut draws[m];
        d.sort_by(f64::total_cmp);
        let b = d.len();
        let (lo, hi, p) = if b == 0 {
            (f64::NAN, f64::NAN, 1.0)
        } else {
            let q = |f: f64| d[((f * (b - 1) as f64).round() as usize).min(b - 1)];
            let below = d.iter().filter(|&&x| x <= 0.0).count();
            let above = d.iter().filter(|&&x| x >= 0.0).count();
            let tail = (below.min(above) + 1) as f64 / (b + 1) as f64;
            (q(cfg.alpha / 2.0), q(1.0 - cfg.alpha / 2.0), (2.0 * tail).min(1.0))
        };
        let positive = per_seed_pos.iter().filter(|s| s[m]).count();
        MetricDelta {
            control: c0[m],
            treatment: t0[m],
            relative: relative(c0[m], t0[m]),
            ci_low: lo,
            ci_high: hi,
            p_value: p,
            positive_seeds: positive,
            sign_p: sign_test_p(positive, seeds),
        }
    }))
}

/// Replay seed `i` of an experiment.
pub fn replay_seed(seed: u64, i: usize) -> u64 {
    rng::derive(seed, streams::FEEDBACK, i as u64)
}

/// Feedback of one arm's pages under every replay seed.
pub fn replay(system: &System, pages: &[PipelineOutput], repeats: usize, seed: u64) -> Result<Vec<Vec<SessionFeedback>>> {
    (0..repeats).map(|i| simulate_feedback(&system.world, pages, replay_seed(seed, i))).collect()
}

pub fn simulate_abtest(
    system: &System,
    control: &PipelineConfig,
    treatment: &PipelineConfig,
    sessions: &[SearchRequest],
    cfg: &AbConfig,
    seed: u64,
) -> Result<AbReport> {
    if cfg.repeats < 5 {
        return Err(Error::Config("an A/B replay needs at least 5 seeds".into()));
    }
    let c_pages = system.run_all(control, sessions)?;
    let t_pages = system.run_all(treatment, sessions)?;
    abtest_pages(system, &control.name, &c_pages, &treatment.name, &t_pages, cfg, seed)
}

/// A/B over pages that were already produced, so one arm's pages can be
/// reused across several comparisons.
pub fn abtest_pages(
    system: &System,
    control: &str,
    c_pages: &[PipelineOutput],
    treatment: &str,
    t_pages: &[PipelineOutput],
    cfg: &AbConfig,
    seed: u64,
) -> Result<AbReport> {
    let c = replay(system, c_pages, cfg.repeats, seed)?;
    let t = replay(system, t_pages, cfg.repeats, seed)?;
    Ok(AbReport {
        control: control.to_string(),
        treatment: treatment.to_string(),
        sessions: c_pages.len(),
        repeats: cfg.repeats,
        deltas: compare_feedback(&c, &t, cfg, seed)?,
    })
}

impl AbReport {
    pub fn delta(&self, metric: &str) -> Option<&MetricDelta> {
        METRICS.iter().position(|m| *m == metric).map(|i| &self.deltas[i])
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{} vs {} ({} sessions, {} seeds)\n{:<22} {:>10} {:>10} {:>9} {:>20} {:>8} {:>7}\n",
            self.treatment, self.control, self.sessions, self.repeats, "metric", "control", "treatment", "delta", "ci", "p", "seeds+"
        );
        for (name, d) in METRICS.iter().zip(&self.deltas) {
            let _ = writeln!(
                s,
                "{name:<22} {:>10.5} {:>10.5} {:>+8.2}% [{:>+7.2}%, {:>+7.2}%] {:>8.4} {:>4}/{}",
                d.control,
                d.treatment,
                100.0 * d.relative,
                100.0 * d.ci_low,
                100.0 * d.ci_high,
                d.p_value,
                d.positive_seeds,
                self.repeats
            );
        }
        s
    }

    /// Line records `delta metric control treatment relative ci_low ci_high p seeds+ sign_p`.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for (name, d) in METRICS.iter().zip(&self.deltas) {
            let _ = writeln!(
                s,
                "delta\t{}\t{}\t{name}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.control,
                self.treatment,
                d.control,
                d.treatment,
                d.relative,
                d.ci_low,
                d.ci_high,
                d.p_value,
                d.positive_seeds,
                d.sign_p
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_tail() {
        assert!((sign_test_p(5, 5) - 1.0 / 32.0).abs() < 1e-15);
        assert!((sign_test_p(0, 5) - 1.0).abs() < 1e-15);
        assert!((sign_test_p(4, 5) - 6.0 / 32.0).abs() < 1e-15);
    }
}
