//! Line-delimited world and log files.
//!
//! World (`#persearch world v1`), one record per line, tab separated:
//!
//! ```text
//! world   topic_count vocab_per_topic seed genders age_segments locations
//! oracle  key value
//! user    id gender age_segment location mix
//! video   id duration_s quality mix tokens
//! query   id ambiguous(0|1) mix tokens
//! ```
//!
//! Logs (`#persearch logs v1`):
//!
//! ```text
//! logs    days
//! event   user video timestamp source(search|feed) query|- impressed clicked watch_s liked
//! session id user query day timestamp in_feed context|- first_event len
//! ```
//!
//! `mix` and `tokens` are comma separated. Reals use the shortest decimal
//! form that parses back to the identical `f64`.

use super::{BehaviorEvent, Logs, OracleConfig, QuerySpec, SearchSession, Source, UserProfile, Video, World};
use crate::error::{Error, Result};
use crate::io::{field, join, split_list, TextArtifact, TextWriter};

const WORLD_KIND: &str = "world";
const LOGS_KIND: &str = "logs";
const VERSION: u32 = 1;

fn b(v: bool) -> &'static str {
    if v {
        "1"
    } else {
        "0"
    }
}

fn parse_bool(raw: &str, line: usize) -> Result<bool> {
    match raw {
        "1" => Ok(true),
        "0" => Ok(false),
        _ => Err(Error::format(line, format!("expected 0 or 1, got `{raw}`"))),
    }
}

pub fn write_world(world: &World) -> String {
    let mut w = TextWriter::new(WORLD_KIND, VERSION);
    w.record([
        "world".to_string(),
        world.topic_count.to_string(),
        world.vocab_per_topic.to_string(),
        world.seed.to_string(),
        world.genders.to_string(),
        world.age_segments.to_string(),
        world.locations.to_string(),
    ]);
    for (key, value) in world.oracle.fields() {
        w.record(["oracle".to_string(), key.to_string(), value.to_string()]);
    }
    for u in &world.users {
        w.record([
            "user".to_string(),
            u.user_id.to_string(),
            u.gender.to_string(),
            u.age_segment.to_string(),
            u.location.to_string(),
            join(&u.interest_mix, ","),
        ]);
    }
    for v in &world.videos {
        w.record([
            "video".to_string(),
            v.video_id.to_string(),
            v.duration_s.to_string(),
            v.quality.to_string(),
            join(&v.topic_mix, ","),
            join(&v.token_bag, ","),
        ]);
    }
    for q in &world.queries {
        w.record([
            "query".to_string(),
            q.query_id.to_string(),
            b(q.ambiguous).to_string(),
            join(&q.topic_mix, ","),
            join(&q.token_bag, ","),
        ]);
    }
    w.finish()
}

pub fn read_world(text: &str) -> Result<World> {
    let art = TextArtifact::open(text, WORLD_KIND, VERSION)?;
    let mut world: Option<World> = None;
    let mut oracle = OracleConfig::default();
    for (line, f) in art.records() {
        let tag = f[0];
        if tag == "world" {
            world = Some(World {
                topic_count: field(&f, 1, line, "topic_count")?,
                vocab_per_topic: field(&f, 2, line, "vocab_per_topic")?,
                seed: field(&f, 3, line, "seed")?,
                genders: field(&f, 4, line, "genders")?,
                age_segments: field(&f, 5, line, "age_segments")?,
                locations: field(&f, 6, line, "locations")?,
                oracle: OracleConfig::default(),
                users: Vec::new(),
                videos: Vec::new(),
                queries: Vec::new(),
            });
            continue;
        }
        let w = world
            .as_mut()
            .ok_or_else(|| Error::format(line, "record before `world` header record"))?;
        let t = w.topic_count;
        let mix = |idx: usize| -> Result<Vec<f64>> {
            let m: Vec<f64> = split_list(f.get(idx).copied().unwrap_or(""), ',', line, "mix")?;
            if m.len() != t {
                return Err(Error::format(line, format!("mix has {} entries, expected {t}", m.len())));
            }
            Ok(m)
        };
        match tag {
            "oracle" => {
                let key: String = field(&f, 1, line, "oracle key")?;
                let value: f64 = field(&f, 2, line, "oracle value")?;
                let slot = oracle
                    .fields_mut()
                    .into_iter()
                    .find(|(k, _)| *k == key)
                    .ok_or_else(|| Error::format(line, format!("unknown oracle key `{key}`")))?;
                *slot.1 = value;
            }
            "user" => {
                let id: u32 = field(&f, 1, line, "user id")?;
                if id as usize != w.users.len() {
                    return Err(Error::format(line, "user ids must be dense and ordered"));
                }
                w.users.push(UserProfile {
                    user_id: id,
                    gender: field(&f, 2, line, "gender")?,
                    age_segment: field(&f, 3, line, "age_segment")?,
                    location: field(&f, 4, line, "location")?,
                    interest_mix: mix(5)?,
                });
            }
            "video" => {
                let id: u32 = field(&f, 1, line, "video id")?;
                if id as usize != w.videos.len() {
                    return Err(Error::format(line, "video ids must be dense and ordered"));
                }
                w.videos.push(Video {
                    video_id: id,
                    duration_s: field(&f, 2, line, "duration_s")?,
                    quality: field(&f, 3, line, "quality")?,
                    topic_mix: mix(4)?,
                    token_bag: split_list(f.get(5).copied().unwrap_or(""), ',', line, "tokens")?,
                });
            }
            "query" => {
                let id: u32 = field(&f, 1, line, "query id")?;
                if id as usize != w.queries.len() {
                    return Err(Error::format(line, "query ids must be dense and ordered"));
                }
                w.queries.push(QuerySpec {
                    query_id: id,
                    ambiguous: parse_bool(f.get(2).copied().unwrap_or(""), line)?,
                    topic_mix: mix(3)?,
                    token_bag: split_list(f.get(4).copied().unwrap_or(""), ',', line, "tokens")?,
                });
            }
            other => return Err(Error::format(line, format!("unknown record `{other}`"))),
        }
    }
    let mut world = world.ok_or_else(|| Error::format(1, "missing `world` record"))?;
    world.oracle = oracle;
    Ok(world)
}

pub fn write_logs(logs: &Logs) -> String {
    let mut w = TextWriter::new(LOGS_KIND, VERSION);
    w.record(["logs".to_string(), logs.days.to_string()]);
    for e in &logs.events {
        w.record([
            "event".to_string(),
            e.user_id.to_string(),
            e.video_id.to_string(),
            e.timestamp.to_string(),
            match e.source {
                Source::Search => "search".to_string(),
                Source::Feed => "feed".to_string(),
            },
            e.query_id.map_or("-".to_string(), |q| q.to_string()),
            b(e.impressed).to_string(),
            b(e.clicked).to_string(),
            e.watch_s.to_string(),
            b(e.liked).to_string(),
        ]);
    }
    for s in &logs.sessions {
        w.record([
            "session".to_string(),
            s.session_id.to_string(),
            s.user_id.to_string(),
            s.query_id.to_string(),
            s.day.to_string(),
            s.timestamp.to_string(),
            b(s.in_feed).to_string(),
            s.context_video.map_or("-".to_string(), |v| v.to_string()),
            s.first_event.to_string(),
            s.len.to_string(),
        ]);
    }
    w.finish()
}

pub fn read_logs(text: &str) -> Result<Logs> {
    let art = TextArtifact::open(text, LOGS_KIND, VERSION)?;
    let mut logs = Logs {
        days: 0,
        events: Vec::new(),
        sessions: Vec::new(),
    };
    for (line, f) in art.records() {
        match f[0] {
            "logs" => logs.days = field(&f, 1, line, "days")?,
            "event" => {
                let source = match f.get(4).copied() {
                    Some("search") => Source::Search,
                    Some("feed") => Source::Feed,
                    _ => return Err(Error::format(line, "bad source")),
                };
                let query_id = match f.get(5).copied() {
                    Some("-") => None,
                    _ => Some(field(&f, 5, line, "query id")?),
                };
                logs.events.push(BehaviorEvent {
                    user_id: field(&f, 1, line, "user")?,
                    video_id: field(&f, 2, line, "video")?,
                    timestamp: field(&f, 3, line, "timestamp")?,
                    source,
                    query_id,
                    impressed: parse_bool(f.get(6).copied().unwrap_or(""), line)?,
                    clicked: parse_bool(f.get(7).copied().unwrap_or(""), line)?,
                    watch_s: field(&f, 8, line, "watch_s")?,
                    liked: parse_bool(f.get(9).copied().unwrap_or(""), line)?,
                });
            }
            "session" => {
                let context_video = match f.get(7).copied() {
                    Some("-") => None,
                    _ => Some(field(&f, 7, line, "context video")?),
                };
                let s = SearchSession {
                    session_id: field(&f, 1, line, "session id")?,
                    user_id: field(&f, 2, line, "user")?,
                    query_id: field(&f, 3, line, "query")?,
                    day: field(&f, 4, line, "day")?,
                    timestamp: field(&f, 5, line, "timestamp")?,
                    in_feed: parse_bool(f.get(6).copied().unwrap_or(""), line)?,
                    context_video,
                    first_event: field(&f, 8, line, "first_event")?,
                    len: field(&f, 9, line, "len")?,
                };
                if s.first_event + s.len > logs.events.len() {
                    return Err(Error::format(line, "session refers past the event list"));
                }
                logs.sessions.push(s);
            }
            other => return Err(Error::format(line, format!("unknown record `{other}`"))),
        }
    }
    Ok(logs)
}
