//! Behaviour log simulation.
//!
//! Each user-day yields a feed stream sampled from the user's interests and a
//! Poisson number of search sessions. A configurable fraction of sessions is
//! issued mid-feed; their query topic follows the last watched feed video.
//! Search pages come from a logging policy that mixes the query's most
//! relevant videos with a few uniformly random exploration slots, shown in
//! random order. All feedback is drawn from the engagement oracle.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};

use super::oracle::{engagement_oracle, sample_feedback};
use super::{BehaviorEvent, QueryId, Source, UserId, VideoId, World};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::math::dot;
use crate::rng::{self, streams, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct LogConfig {
    pub feed_per_day: usize,
    pub searches_per_day: f64,
    pub in_feed_fraction: f64,
    pub page_size: usize,
    pub logging_pool: usize,
    pub explore_per_page: usize,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig {
            feed_per_day: 30,
            searches_per_day: 2.0,
            in_feed_fraction: 0.25,
            page_size: 10,
            logging_pool: 200,
            explore_per_page: 2,
        }
    }
}

impl LogConfig {
    pub const KEYS: &'static [&'static str] = &[
        "logs.feed_per_day",
        "logs.searches_per_day",
        "logs.in_feed_fraction",
        "logs.page_size",
        "logs.logging_pool",
        "logs.explore_per_page",
    ];

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.take("logs.feed_per_day", &mut self.feed_per_day)?;
        kv.take("logs.searches_per_day", &mut self.searches_per_day)?;
        kv.take("logs.in_feed_fraction", &mut self.in_feed_fraction)?;
        kv.take("logs.page_size", &mut self.page_size)?;
        kv.take("logs.logging_pool", &mut self.logging_pool)?;
        kv.take("logs.explore_per_page", &mut self.explore_per_page)?;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.page_size == 0 || self.explore_per_page > self.page_size {
            return Err(Error::Config("page_size must be >= 1 and >= explore_per_page".into()));
        }
        if !(0.0..=1.0).contains(&self.in_feed_fraction) || self.searches_per_day < 0.0 {
            return Err(Error::Config("invalid search mix".into()));
        }
        Ok(())
    }
}

/// One search request: a contiguous run of impression events in [`Logs::events`].
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSession {
    pub session_id: u32,
    pub user_id: UserId,
    pub query_id: QueryId,
    pub day: u32,
    pub timestamp: u64,
    pub in_feed: bool,
    pub context_video: Option<VideoId>,
    pub first_event: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logs {
    pub days: u32,
    pub events: Vec<BehaviorEvent>,
    pub sessions: Vec<SearchSession>,
}

impl Logs {
    pub fn impressions(&self, s: &SearchSession) -> &[BehaviorEvent] {
        &self.events[s.first_event..s.first_event + s.len]
    }

    pub fn day_of(timestamp: u64) -> u32 {
        (timestamp / 86_400) as u32
    }

    /// The prefix of the logs strictly before `day`.
    pub fn until_day(&self, day: u32) -> Logs {
        let cut = self.events.partition_point(|e| Logs::day_of(e.timestamp) < day);
        Logs {
            days: self.days.min(day),
            events: self.events[..cut].to_vec(),
            sessions: self.sessions.iter().filter(|s| s.day < day).cloned().collect(),
        }
    }
}

pub const DAY_START_S: u64 = 36_000;
pub const FEED_GAP_S: u64 = 60;

enum Block {
    Feed(BehaviorEvent),
    Session {
        in_feed: bool,
        context: Option<VideoId>,
        query: QueryId,
        events: Vec<BehaviorEvent>,
    },
}

impl Block {
    fn key(&self) -> (u64, UserId) {
        match self {
            Block::Feed(e) => (e.timestamp, e.user_id),
            Block::Session { events, .. } => (events[0].timestamp, events[0].user_id),
        }
    }
}

/// Top `n` videos by `<query mix, video mix>`, ties broken by video id.
pub(crate) fn relevance_pool(world: &World, query: QueryId, n: usize) -> Vec<VideoId> {
    let q = &world.queries[query as usize];
    let mut scored: Vec<(f64, VideoId)> = world
        .videos
        .iter()
        .map(|v| (dot(&q.topic_mix, &v.topic_mix), v.video_id))
        .collect();
    let n = n.min(scored.len());
    let cmp = |a: &(f64, VideoId), b: &(f64, VideoId)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if n < scored.len() && n > 0 {
        scored.select_nth_unstable_by(n - 1, cmp);
    }
    scored.truncate(n);
    scored.sort_by(cmp);
    scored.into_iter().map(|(_, v)| v).collect()
}

struct QuerySampler {
    cumulative: Vec<Vec<f64>>,
}

impl QuerySampler {
    fn new(world: &World) -> Self {
        let cumulative = (0..world.topic_count)
            .map(|z| {
                let mut acc = 0.0;
                world
                    .queries
                    .iter()
                    .map(|q| {
                        acc += q.topic_mix[z] * q.topic_mix[z];
                        acc
                    })
                    .collect()
            })
            .collect();
        QuerySampler { cumulative }
    }

    fn sample(&self, topic: usize, r: &mut Rng) -> QueryId {
        let cum = &self.cumulative[topic];
        let total = *cum.last().unwrap();
        let u = r.random::<f64>() * total;
        cum.partition_point(|&c| c <= u).min(cum.len() - 1) as QueryId
    }
}

fn sample_topic(mix: &[f64], r: &mut Rng) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (i, &m) in mix.iter().enumerate() {
        acc += m;
        if u < acc {
            return i;
        }
    }
    mix.len() - 1
}

pub fn simulate_logs(world: &World, cfg: &LogConfig, days: u32, seed: u64) -> Result<Logs> {
    if days == 0 {
        return Err(Error::Config("days must be >= 1".into()));
    }
    cfg.validate()?;
    let by_topic = world.videos_by_topic();
    let pools: Vec<Vec<VideoId>> = (0..world.queries.len())
        .map(|q| relevance_pool(world, q as QueryId, cfg.logging_pool))
        .collect();
    let sampler = QuerySampler::new(world);
    let all_videos: Vec<VideoId> = world.videos.iter().map(|v| v.video_id).collect();
    let poisson = if cfg.searches_per_day > 0.0 {
        Some(Poisson::new(cfg.searches_per_day).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    let mut blocks = Vec::new();
    for user in &world.users {
        for day in 0..days {
            let mut r = rng::stream(seed, streams::LOGS, ((user.user_id as u64) << 20) | day as u64);
            let base = day as u64 * 86_400 + DAY_START_S;

            let mut feed: Vec<BehaviorEvent> = Vec::with_capacity(cfg.feed_per_day);
            for k in 0..cfg.feed_per_day {
                let topic = sample_topic(&user.interest_mix, &mut r);
                let pick = by_topic[topic].choose(&mut r).or_else(|| all_videos.choose(&mut r));
                let video = &world.videos[*pick.expect("world has videos") as usize];
                let e = engagement_oracle(&world.oracle, user, None, video, 1);
                let fb = sample_feedback(&e, &mut r);
                feed.push(BehaviorEvent {
                    user_id: user.user_id,
                    video_id: video.video_id,
                    timestamp: base + FEED_GAP_S * k as u64,
                    source: Source::Feed,
                    query_id: None,
                    impressed: true,
                    clicked: fb.clicked,
                    watch_s: fb.watch_s,
                    liked: fb.liked,
                });
            }

            let searches = poisson.as_ref().map_or(0, |p| p.sample(&mut r) as usize);
            for j in 0..searches {
                let in_feed = r.random::<f64>() < cfg.in_feed_fraction && !feed.is_empty();
                let (timestamp, context, topic) = if in_feed {
                    let k = r.random_range(1..=feed.len());
                    let context = feed[..k]
                        .iter()
                        .rev()
                        .find(|e| e.clicked)
                        .unwrap_or(&feed[k - 1])
                        .video_id;
                    let ts = feed[k - 1].timestamp + 30 + (j as u64 % 29);
                    (ts, Some(context), world.videos[context as usize].dominant_topic())
                } else {
                    let ts = day as u64 * 86_400 + 1_000 + 60 * j as u64;
                    (ts, None, sample_topic(&user.interest_mix, &mut r))
                };
                let query_id = sampler.sample(topic, &mut r);
                let query = &world.queries[query_id as usize];

                let pool = &pools[query_id as usize];
                let relevant = (cfg.page_size - cfg.explore_per_page).min(pool.len());
                let mut page: Vec<VideoId> = pool.choose_multiple(&mut r, relevant).copied().collect();
                while page.len() < cfg.page_size.min(all_videos.len()) {
                    let v = *all_videos.choose(&mut r).unwrap();
                    if !page.contains(&v) {
                        page.push(v);
                    }
                }
                page.shuffle(&mut r);

                let events = page
                    .iter()
                    .enumerate()
                    .map(|(pos, &vid)| {
                        let video = &world.videos[vid as usize];
                        let e = engagement_oracle(&world.oracle, user, Some(query), video, pos + 1);
                        let fb = sample_feedback(&e, &mut r);
                        BehaviorEvent {
                            user_id: user.user_id,
                            video_id: vid,
                            timestamp,
                            source: Source::Search,
                            query_id: Some(query_id),
                            impressed: true,
                            clicked: fb.clicked,
                            watch_s: fb.watch_s,
                            liked: fb.liked,
                        }
                    })
                    .collect();
                blocks.push(Block::Session {
                    in_feed,
                    context,
                    query: query_id,
                    events,
                });
            }
            blocks.extend(feed.into_iter().map(Block::Feed));
        }
    }

    blocks.sort_by_key(|b| b.key());
    let mut events = Vec::new();
    let mut sessions = Vec::new();
    for block in blocks {
        match block {
            Block::Feed(e) => events.push(e),
            Block::Session {
                in_feed,
                context,
                query,
                events: evs,
            } => {
                let first = &evs[0];
                sessions.push(SearchSession {
                    session_id: sessions.len() as u32,
                    user_id: first.user_id,
                    query_id: query,
                    day: Logs::day_of(first.timestamp),
                    timestamp: first.timestamp,
                    in_feed,
                    context_video: context,
                    first_event: events.len(),
                    len: evs.len(),
                });
                events.extend(evs);
            }
        }
    }
    Ok(Logs { days, events, sessions })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WatchedItem {
    pub timestamp: u64,
    pub video_id: VideoId,
    pub source: Source,
}

/// Per-user watched (clicked) videos in time order.
#[derive(Debug, Clone, Default)]
pub struct History {
    per_user: Vec<Vec<WatchedItem>>,
}

impl History {
    pub fn build(users: usize, logs: &Logs) -> Self {
        let mut per_user = vec![Vec::new(); users];
        for e in logs.events.iter().filter(|e| e.clicked) {
            if let Some(list) = per_user.get_mut(e.user_id as usize) {
                list.push(WatchedItem {
                    timestamp: e.timestamp,
                    video_id: e.video_id,
                    source: e.source,
                });
            }
        }
        for list in &mut per_user {
            list.sort_by_key(|w| (w.timestamp, w.video_id));
        }
        History { per_user }
    }

    /// Everything the user watched strictly before `timestamp`.
    pub fn before(&self, user: UserId, timestamp: u64) -> &[WatchedItem] {
        match self.per_user.get(user as usize) {
            Some(list) => &list[..list.partition_point(|w| w.timestamp < timestamp)],
            None => &[],
        }
    }

    /// The last `n` watched videos before `timestamp`, oldest first.
    pub fn recent(&self, user: UserId, timestamp: u64, n: usize) -> &[WatchedItem] {
        let all = self.before(user, timestamp);
        &all[all.len().saturating_sub(n)..]
    }
}
