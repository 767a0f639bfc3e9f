//! Ground-truth engagement model.
//!
//! Click probability couples query-video relevance with user-video interest:
//!
//! ```text
//! p_click = decay(rank) * sigmoid(a*rel + b*interest + c*quality + d)
//! p_like  = p_click * sigmoid(e*interest + f*quality + g)
//! watch   = min(duration, LogNormal(ln(base) + wi*interest + wq*quality, sigma))
//! ```
//!
//! `rel = <query mix, video mix>` and is dropped for feed impressions;
//! `interest = <user mix, video mix>`; `decay(rank) = 1 / log2(rank + 1)`.

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal};

use super::{QuerySpec, UserProfile, Video};
use crate::config::KeyValues;
use crate::error::Result;
use crate::math::{dot, normal_cdf, sigmoid};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub click_relevance: f64,
    pub click_interest: f64,
    pub click_quality: f64,
    pub click_bias: f64,
    pub like_interest: f64,
    pub like_quality: f64,
    pub like_bias: f64,
    pub watch_base_s: f64,
    pub watch_interest: f64,
    pub watch_quality: f64,
    pub watch_sigma: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            click_relevance: 2.0,
            click_interest: 2.0,
            click_quality: 1.0,
            click_bias: -3.0,
            like_interest: 3.0,
            like_quality: 1.0,
            like_bias: -3.5,
            watch_base_s: 6.0,
            watch_interest: 2.0,
            watch_quality: 0.5,
            watch_sigma: 0.8,
        }
    }
}

impl OracleConfig {
    pub const KEYS: &'static [&'static str] = &[
        "oracle.click_relevance",
        "oracle.click_interest",
        "oracle.click_quality",
        "oracle.click_bias",
        "oracle.like_interest",
        "oracle.like_quality",
        "oracle.like_bias",
        "oracle.watch_base_s",
        "oracle.watch_interest",
        "oracle.watch_quality",
        "oracle.watch_sigma",
    ];

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (key, slot) in self.fields_mut() {
            kv.take(key, slot)?;
        }
        Ok(())
    }

    pub(crate) fn fields(&self) -> [(&'static str, f64); 11] {
        [
            (Self::KEYS[0], self.click_relevance),
            (Self::KEYS[1], self.click_interest),
            (Self::KEYS[2], self.click_quality),
            (Self::KEYS[3], self.click_bias),
            (Self::KEYS[4], self.like_interest),
            (Self::KEYS[5], self.like_quality),
            (Self::KEYS[6], self.like_bias),
            (Self::KEYS[7], self.watch_base_s),
            (Self::KEYS[8], self.watch_interest),
            (Self::KEYS[9], self.watch_quality),
            (Self::KEYS[10], self.watch_sigma),
        ]
    }

    pub(crate) fn fields_mut(&mut self) -> [(&'static str, &mut f64); 11] {
        [
            (Self::KEYS[0], &mut self.click_relevance),
            (Self::KEYS[1], &mut self.click_interest),
            (Self::KEYS[2], &mut self.click_quality),
            (Self::KEYS[3], &mut self.click_bias),
            (Self::KEYS[4], &mut self.like_interest),
            (Self::KEYS[5], &mut self.like_quality),
            (Self::KEYS[6], &mut self.like_bias),
            (Self::KEYS[7], &mut self.watch_base_s),
            (Self::KEYS[8], &mut self.watch_interest),
            (Self::KEYS[9], &mut self.watch_quality),
            (Self::KEYS[10], &mut self.watch_sigma),
        ]
    }
}

pub fn position_decay(rank: usize) -> f64 {
    1.0 / ((rank as f64) + 1.0).log2()
}

/// Watch time given a click: a log-normal truncated at the video duration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WatchTimeDistribution {
    pub mu: f64,
    pub sigma: f64,
    pub duration_s: f64,
}

impl WatchTimeDistribution {
    /// `E[min(X, D)]` for `X ~ LogNormal(mu, sigma)`.
    pub fn mean(&self) -> f64 {
        let (mu, s, d) = (self.mu, self.sigma, self.duration_s);
        if s == 0.0 {
            return mu.exp().min(d);
        }
        let ln_d = d.ln();
        (mu + 0.5 * s * s).exp() * normal_cdf((ln_d - mu - s * s) / s) + d * (1.0 - normal_cdf((ln_d - mu) / s))
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let x = if self.sigma == 0.0 {
            self.mu.exp()
        } else {
            LogNormal::new(self.mu, self.sigma).expect("valid sigma").sample(rng)
        };
        x.min(self.duration_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Engagement {
    pub p_click: f64,
    pub watch: WatchTimeDistribution,
    pub p_like: f64,
}

pub fn engagement_oracle(
    cfg: &OracleConfig,
    user: &UserProfile,
    query: Option<&QuerySpec>,
    video: &Video,
    rank_position: usize,
) -> Engagement {
    assert!(rank_position >= 1, "rank positions are 1-based");
    let rel = query.map_or(0.0, |q| dot(&q.topic_mix, &video.topic_mix));
    let interest = dot(&user.interest_mix, &video.topic_mix);
    engagement_from_parts(cfg, rel, interest, video.quality, video.duration_s, rank_position)
}

pub(crate) fn engagement_from_parts(
    cfg: &OracleConfig,
    rel: f64,
    interest: f64,
    quality: f64,
    duration_s: f64,
    rank_position: usize,
) -> Engagement {
    let logit = cfg.click_relevance * rel + cfg.click_interest * interest + cfg.click_quality * quality + cfg.click_bias;
    let p_click = position_decay(rank_position) * sigmoid(logit);
    let p_like = p_click * sigmoid(cfg.like_interest * interest + cfg.like_quality * quality + cfg.like_bias);
    let watch = WatchTimeDistribution {
        mu: cfg.watch_base_s.ln() + cfg.watch_interest * interest + cfg.watch_quality * quality,
        sigma: cfg.watch_sigma,
        duration_s,
    };
    Engagement { p_click, watch, p_like }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    pub clicked: bool,
    pub watch_s: f64,
    pub liked: bool,
}

/// Draws one impression outcome. Always consumes the same number of random
/// values so that paired replays stay aligned across arms.
pub fn sample_feedback(e: &Engagement, rng: &mut Rng) -> Feedback {
    let u_click: f64 = rng.random();
    let u_like: f64 = rng.random();
    let watch = e.watch.sample(rng);
    let clicked = u_click < e.p_click;
    if !clicked {
        return Feedback { clicked: false, watch_s: 0.0, liked: false };
    }
    let like_given_click = if e.p_click > 0.0 { e.p_like / e.p_click } else { 0.0 };
    Feedback {
        clicked: true,
        watch_s: watch,
        liked: u_like < like_given_click,
    }
}
