use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, Exp, Gamma, Zipf};

use super::{QuerySpec, Token, UserProfile, Video, World, WorldConfig};
use crate::error::Result;
use crate::rng::{self, streams, Rng};

/// Builds a world whose every entity is drawn from its own seeded stream, so
/// identical `(config, seed)` pairs always produce identical worlds.
pub fn generate_world(cfg: &WorldConfig, seed: u64) -> Result<World> {
    cfg.validate()?;
    let t = cfg.topic_count;

    let users = (0..cfg.users)
        .map(|u| {
            let mut r = rng::stream(seed, streams::USERS, u as u64);
            let gender = r.random_range(0..cfg.genders);
            let age_segment = r.random_range(0..cfg.age_segments);
            let location = r.random_range(0..cfg.locations);
            let segment_topic = segment_topic(gender, age_segment, t);
            let primary = if r.random::<f64>() < cfg.profile_signal {
                segment_topic
            } else {
                r.random_range(0..t)
            };
            let jitter = cfg.user_concentration_jitter;
            let mass = (cfg.user_concentration + r.random_range(-jitter..=jitter)).clamp(1.0 / t as f64, 1.0);
            UserProfile {
                user_id: u as u32,
                gender,
                age_segment,
                location,
                interest_mix: mixture(&mut r, t, &[(primary, mass)], 0.3),
            }
        })
        .collect();

    let videos = (0..cfg.videos)
        .map(|v| generate_video(cfg, seed, v as u32, None))
        .collect();

    let queries = (0..cfg.queries)
        .map(|q| {
            let mut r = rng::stream(seed, streams::QUERIES, q as u64);
            let ambiguous = r.random::<f64>() < cfg.ambiguous_fraction;
            let topic_mix = if ambiguous {
                let a = r.random_range(0..t);
                let mut b = r.random_range(0..t - 1);
                if b >= a {
                    b += 1;
                }
                let ma = r.random_range(0.35..0.5);
                let mb = r.random_range(0.35..0.5);
                mixture(&mut r, t, &[(a, ma), (b, mb)], 0.5)
            } else {
                let p = r.random_range(0..t);
                let m = r.random_range(0.7..0.95);
                mixture(&mut r, t, &[(p, m)], 0.5)
            };
            let token_bag = tokens(cfg, seed, 1 << 40 | q as u64, &topic_mix, cfg.query_tokens);
            QuerySpec {
                query_id: q as u32,
                topic_mix,
                ambiguous,
                token_bag,
            }
        })
        .collect();

    Ok(World {
        topic_count: t,
        vocab_per_topic: cfg.vocab_per_topic,
        seed,
        oracle: cfg.oracle.clone(),
        genders: cfg.genders,
        age_segments: cfg.age_segments,
        locations: cfg.locations,
        users,
        videos,
        queries,
    })
}

fn segment_topic(gender: u8, age: u8, topics: usize) -> usize {
    ((gender as usize) * 7 + (age as usize) * 3) % topics
}

fn generate_video(cfg: &WorldConfig, seed: u64, id: u32, primary: Option<usize>) -> Video {
    let t = cfg.topic_count;
    let mut r = rng::stream(seed, streams::VIDEOS, id as u64);
    let primary = primary.unwrap_or_else(|| r.random_range(0..t));
    let mass = r.random_range(cfg.video_primary_min..=cfg.video_primary_max);
    let topic_mix = mixture(&mut r, t, &[(primary, mass)], 0.5);
    let extra = Exp::new(1.0 / cfg.duration_extra_mean_s).expect("positive mean").sample(&mut r);
    let duration_s = (20.0 + extra.min(280.0)).round();
    let quality = Beta::new(2.0, 2.0).expect("valid beta").sample(&mut r);
    let token_bag = tokens(cfg, seed, id as u64, &topic_mix, cfg.video_tokens);
    Video {
        video_id: id,
        topic_mix,
        duration_s,
        quality,
        token_bag,
    }
}

/// A topic mixture with fixed masses on `fixed` topics and the remainder
/// spread over the other topics with a symmetric Dirichlet(alpha).
fn mixture(r: &mut Rng, topics: usize, fixed: &[(usize, f64)], alpha: f64) -> Vec<f64> {
    let mut mix = vec![0.0; topics];
    let fixed_mass: f64 = fixed.iter().map(|&(_, m)| m).sum();
    let rest: Vec<usize> = (0..topics).filter(|i| !fixed.iter().any(|&(f, _)| f == *i)).collect();
    let gamma = Gamma::new(alpha, 1.0).expect("positive alpha");
    let draws: Vec<f64> = rest.iter().map(|_| gamma.sample(r)).collect();
    let total: f64 = draws.iter().sum();
    let remaining = (1.0 - fixed_mass).max(0.0);
    for (&i, &d) in rest.iter().zip(&draws) {
        mix[i] = if total > 0.0 { remaining * d / total } else { remaining / rest.len() as f64 };
    }
    for &(i, m) in fixed {
        mix[i] = m;
    }
    if rest.is_empty() {
        // all mass is fixed; renormalise below
    }
    let s: f64 = mix.iter().sum();
    for x in &mut mix {
        *x /= s;
    }
    mix
}

/// Tokens come from per-topic vocabularies with Zipf-distributed ranks; the
/// bag is a pure function of `(seed, key, topic_mix)`.
fn tokens(cfg: &WorldConfig, seed: u64, key: u64, mix: &[f64], count: usize) -> Vec<Token> {
    let mut r = rng::stream(seed, streams::TOKENS, key);
    let zipf = Zipf::new(cfg.vocab_per_topic as f64, cfg.zipf_exponent).expect("valid zipf");
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut topic = mix.len() - 1;
        for (i, &m) in mix.iter().enumerate() {
            acc += m;
            if u < acc {
                topic = i;
                break;
            }
        }
        let rank = (zipf.sample(&mut r) as usize).clamp(1, cfg.vocab_per_topic) - 1;
        out.push((topic * cfg.vocab_per_topic + rank) as Token);
    }
    out.sort_unstable();
    out
}

/// Two equal user cohorts with opposite interests and one shared ambiguous
/// query that spans both cohorts' topics.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoCohortConfig {
    pub users: usize,
    pub videos: usize,
    pub topic_count: usize,
    pub queries_per_topic: usize,
    pub cohort_concentration: f64,
    pub base: WorldConfig,
}

impl Default for TwoCohortConfig {
    fn default() -> Self {
        TwoCohortConfig {
            users: 200,
            videos: 2000,
            topic_count: 4,
            queries_per_topic: 3,
            cohort_concentration: 0.85,
            base: WorldConfig::default(),
        }
    }
}

/// Cohort of a user in a two-cohort world: even ids prefer topic 0, odd ids topic 1.
pub fn cohort_topic(user_id: u32) -> usize {
    (user_id % 2) as usize
}

pub fn two_cohort_world(cfg: &TwoCohortConfig, seed: u64) -> Result<World> {
    let mut base = cfg.base.clone();
    base.topic_count = cfg.topic_count;
    base.users = cfg.users;
    base.videos = cfg.videos;
    base.queries = 1 + cfg.queries_per_topic * cfg.topic_count;
    base.validate()?;
    let t = cfg.topic_count;

    let users = (0..cfg.users)
        .map(|u| {
            let mut r = rng::stream(seed, streams::USERS, u as u64);
            let primary = cohort_topic(u as u32);
            UserProfile {
                user_id: u as u32,
                gender: r.random_range(0..base.genders),
                age_segment: r.random_range(0..base.age_segments),
                location: r.random_range(0..base.locations),
                interest_mix: mixture(&mut r, t, &[(primary, cfg.cohort_concentration)], 0.5),
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..cfg.videos).map(|v| v % t).collect();
    order.shuffle(&mut rng::stream(seed, streams::VIDEOS, u64::MAX));
    let videos = (0..cfg.videos)
        .map(|v| generate_video(&base, seed, v as u32, Some(order[v])))
        .collect();

    let mut queries = Vec::with_capacity(base.queries);
    let shared = {
        let mut mix = vec![0.0; t];
        mix[0] = 0.5;
        mix[1] = 0.5;
        mix
    };
    queries.push(QuerySpec {
        query_id: 0,
        token_bag: tokens(&base, seed, 1 << 40, &shared, base.query_tokens),
        topic_mix: shared,
        ambiguous: true,
    });
    for topic in 0..t {
        for k in 0..cfg.queries_per_topic {
            let id = queries.len() as u32;
            let mut r = rng::stream(seed, streams::QUERIES, id as u64);
            let m = 0.8 + 0.05 * k as f64;
            let topic_mix = mixture(&mut r, t, &[(topic, m)], 0.5);
            queries.push(QuerySpec {
                query_id: id,
                token_bag: tokens(&base, seed, 1 << 40 | id as u64, &topic_mix, base.query_tokens),
                topic_mix,
                ambiguous: false,
            });
        }
    }

    Ok(World {
        topic_count: t,
        vocab_per_topic: base.vocab_per_topic,
        seed,
        oracle: base.oracle.clone(),
        genders: base.genders,
        age_segments: base.age_segments,
        locations: base.locations,
        users,
        videos,
        queries,
    })
}
