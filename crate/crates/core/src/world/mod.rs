//! Seeded synthetic short-video world: users with latent interests, videos
//! and queries over the same topic simplex, behaviour logs, and the
//! ground-truth engagement model that every experiment replays against.

mod format;
mod generate;
mod labels;
mod logs;
mod oracle;

pub use format::{read_logs, read_world, write_logs, write_world};
pub use generate::{cohort_topic, generate_world, two_cohort_world, TwoCohortConfig};
pub use labels::{derive_labels, EngagementLabels, EFFECTIVE_PLAY_S, LONG_PLAY_S};
pub use logs::{simulate_logs, History, LogConfig, Logs, SearchSession, WatchedItem};
pub use oracle::{engagement_oracle, position_decay, sample_feedback, Engagement, Feedback, OracleConfig, WatchTimeDistribution};

use crate::config::KeyValues;
use crate::error::{Error, Result};

pub type UserId = u32;
pub type VideoId = u32;
pub type QueryId = u32;
pub type Token = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub user_id: UserId,
    pub gender: u8,
    pub age_segment: u8,
    pub location: u16,
    pub interest_mix: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub video_id: VideoId,
    pub topic_mix: Vec<f64>,
    pub duration_s: f64,
    pub quality: f64,
    /// Sorted multiset of token ids.
    pub token_bag: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub query_id: QueryId,
    pub topic_mix: Vec<f64>,
    pub ambiguous: bool,
    pub token_bag: Vec<Token>,
}

impl Video {
    pub fn dominant_topic(&self) -> usize {
        crate::math::argmax(&self.topic_mix)
    }
}

impl QuerySpec {
    pub fn dominant_topic(&self) -> usize {
        crate::math::argmax(&self.topic_mix)
    }

    /// Topics carrying at least 0.3 of the query's mass; the ambiguous
    /// queries have two of them.
    pub fn intent_topics(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.topic_mix.len())
            .filter(|&t| self.topic_mix[t] >= 0.3)
            .collect();
        if out.is_empty() {
            out.push(self.dominant_topic());
        }
        out
    }
}

impl UserProfile {
    pub fn dominant_topic(&self) -> usize {
        crate::math::argmax(&self.interest_mix)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub topic_count: usize,
    pub vocab_per_topic: usize,
    pub seed: u64,
    pub oracle: OracleConfig,
    pub genders: u8,
    pub age_segments: u8,
    pub locations: u16,
    pub users: Vec<UserProfile>,
    pub videos: Vec<Video>,
    pub queries: Vec<QuerySpec>,
}

impl World {
    pub fn vocab_size(&self) -> usize {
        self.topic_count * self.vocab_per_topic
    }

    pub fn user(&self, id: UserId) -> Result<&UserProfile> {
        self.users
            .get(id as usize)
            .ok_or_else(|| Error::Lookup(format!("unknown user {id}")))
    }

    pub fn video(&self, id: VideoId) -> Result<&Video> {
        self.videos
            .get(id as usize)
            .ok_or_else(|| Error::Lookup(format!("unknown video {id}")))
    }

    pub fn query(&self, id: QueryId) -> Result<&QuerySpec> {
        self.queries
            .get(id as usize)
            .ok_or_else(|| Error::Lookup(format!("unknown query {id}")))
    }

    /// Video ids grouped by dominant topic.
    pub fn videos_by_topic(&self) -> Vec<Vec<VideoId>> {
        let mut out = vec![Vec::new(); self.topic_count];
        for v in &self.videos {
            out[v.dominant_topic()].push(v.video_id);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Search,
    Feed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorEvent {
    pub user_id: UserId,
    pub video_id: VideoId,
    pub timestamp: u64,
    pub source: Source,
    pub query_id: Option<QueryId>,
    pub impressed: bool,
    pub clicked: bool,
    pub watch_s: f64,
    pub liked: bool,
}

/// Generator settings. `user_concentration` is the target mean mass of each
/// user's top topic.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub topic_count: usize,
    pub users: usize,
    pub videos: usize,
    pub queries: usize,
    pub user_concentration: f64,
    pub user_concentration_jitter: f64,
    pub video_primary_min: f64,
    pub video_primary_max: f64,
    pub ambiguous_fraction: f64,
    pub vocab_per_topic: usize,
    pub zipf_exponent: f64,
    pub video_tokens: usize,
    pub query_tokens: usize,
    pub genders: u8,
    pub age_segments: u8,
    pub locations: u16,
    /// Probability that a user's top topic follows their (gender, age) segment.
    pub profile_signal: f64,
    pub duration_extra_mean_s: f64,
    pub oracle: OracleConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            topic_count: 16,
            users: 1000,
            videos: 20_000,
            queries: 800,
            user_concentration: 0.6,
            user_concentration_jitter: 0.1,
            video_primary_min: 0.5,
            video_primary_max: 0.95,
            ambiguous_fraction: 0.25,
            vocab_per_topic: 50,
            zipf_exponent: 1.1,
            video_tokens: 12,
            query_tokens: 3,
            genders: 2,
            age_segments: 6,
            locations: 20,
            profile_signal: 0.5,
            duration_extra_mean_s: 40.0,
            oracle: OracleConfig::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topic_count < 2 {
            return Err(Error::Config("topic_count must be >= 2".into()));
        }
        if self.users == 0 || self.videos == 0 || self.queries == 0 {
            return Err(Error::Config("user/video/query counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return Err(Error::Config("ambiguous_fraction must lie in [0,1]".into()));
        }
        if !(self.user_concentration > 0.0 && self.user_concentration <= 1.0) {
            return Err(Error::Config("user_concentration must lie in (0,1]".into()));
        }
        if !(0.0 < self.video_primary_min && self.video_primary_min <= self.video_primary_max && self.video_primary_max <= 1.0) {
            return Err(Error::Config("video primary mass range invalid".into()));
        }
        if self.vocab_per_topic == 0 || self.video_tokens == 0 || self.query_tokens == 0 {
            return Err(Error::Config("token settings must be >= 1".into()));
        }
        if self.genders == 0 || self.age_segments == 0 || self.locations == 0 {
            return Err(Error::Config("profile cardinalities must be >= 1".into()));
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "world.topic_count",
        "world.users",
        "world.videos",
        "world.queries",
        "world.user_concentration",
        "world.user_concentration_jitter",
        "world.video_primary_min",
        "world.video_primary_max",
        "world.ambiguous_fraction",
        "world.vocab_per_topic",
        "world.zipf_exponent",
        "world.video_tokens",
        "world.query_tokens",
        "world.genders",
        "world.age_segments",
        "world.locations",
        "world.profile_signal",
        "world.duration_extra_mean_s",
    ];

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.take("world.topic_count", &mut self.topic_count)?;
        kv.take("world.users", &mut self.users)?;
        kv.take("world.videos", &mut self.videos)?;
        kv.take("world.queries", &mut self.queries)?;
        kv.take("world.user_concentration", &mut self.user_concentration)?;
        kv.take("world.user_concentration_jitter", &mut self.user_concentration_jitter)?;
        kv.take("world.video_primary_min", &mut self.video_primary_min)?;
        kv.take("world.video_primary_max", &mut self.video_primary_max)?;
        kv.take("world.ambiguous_fraction", &mut self.ambiguous_fraction)?;
        kv.take("world.vocab_per_topic", &mut self.vocab_per_topic)?;
        kv.take("world.zipf_exponent", &mut self.zipf_exponent)?;
        kv.take("world.video_tokens", &mut self.video_tokens)?;
        kv.take("world.query_tokens", &mut self.query_tokens)?;
        kv.take("world.genders", &mut self.genders)?;
        kv.take("world.age_segments", &mut self.age_segments)?;
        kv.take("world.locations", &mut self.locations)?;
        kv.take("world.profile_signal", &mut self.profile_signal)?;
        kv.take("world.duration_extra_mean_s", &mut self.duration_extra_mean_s)?;
        self.oracle.apply(kv)
    }
}
