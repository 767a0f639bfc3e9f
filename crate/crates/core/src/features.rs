//! Observable per-video side features shared by the learned models:
//! relevance-space embedding, a bucketed historical click-through rate from
//! the training logs, and a bucketed duration.

use crate::encoders::RelevanceSpace;
use crate::error::{Error, Result};
use crate::world::{Logs, VideoId, World};

pub const CTR_BUCKETS: usize = 5;
pub const DURATION_BUCKETS: usize = 4;
const DURATION_EDGES_S: [f64; DURATION_BUCKETS - 1] = [30.0, 60.0, 120.0];
/// Pseudo-impressions of the prior in the smoothed click-through rate.
const PRIOR_STRENGTH: f64 = 20.0;

pub fn duration_bucket(duration_s: f64) -> usize {
    DURATION_EDGES_S.iter().take_while(|&&e| duration_s >= e).count()
}

/// Per-video click statistics over impressed events.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoStats {
    pub impressions: Vec<u32>,
    pub clicks: Vec<u32>,
}

impl VideoStats {
    pub fn from_logs(videos: usize, logs: &Logs) -> Self {
        let mut impressions = vec![0u32; videos];
        let mut clicks = vec![0u32; videos];
        for e in logs.events.iter().filter(|e| e.impressed) {
            if let Some(slot) = impressions.get_mut(e.video_id as usize) {
                *slot += 1;
                if e.clicked {
                    clicks[e.video_id as usize] += 1;
                }
            }
        }
        VideoStats { impressions, clicks }
    }

    pub fn global_ctr(&self) -> f64 {
        let i: u64 = self.impressions.iter().map(|&x| u64::from(x)).sum();
        let c: u64 = self.clicks.iter().map(|&x| u64::from(x)).sum();
        if i == 0 {
            0.0
        } else {
            c as f64 / i as f64
        }
    }

    /// Beta-smoothed rate shrunk toward the global rate.
    pub fn smoothed_ctr(&self) -> Vec<f64> {
        let g = self.global_ctr();
        self.impressions
            .iter()
            .zip(&self.clicks)
            .map(|(&i, &c)| (c as f64 + PRIOR_STRENGTH * g) / (i as f64 + PRIOR_STRENGTH))
            .collect()
    }
}

/// Dense feature rows: `[embedding | ctr one-hot | duration one-hot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    dim: usize,
    embed_dim: usize,
    rows: Vec<f64>,
}

impl VideoFeatures {
    pub fn build(world: &World, space: &RelevanceSpace, logs: &Logs) -> Result<Self> {
        if space.videos.len() != world.videos.len() {
            return Err(Error::Shape("relevance space does not cover the world's videos".into()));
        }
        let stats = VideoStats::from_logs(world.videos.len(), logs);
        let ctr = stats.smoothed_ctr();
        let mut sorted = ctr.clone();
        sorted.sort_by(f64::total_cmp);
        let edges: Vec<f64> = (1..CTR_BUCKETS).map(|b| sorted[b * sorted.len() / CTR_BUCKETS]).collect();
        let embed_dim = space.dim();
        let dim = embed_dim + CTR_BUCKETS + DURATION_BUCKETS;
        let mut rows = Vec::with_capacity(dim * world.videos.len());
        for v in &world.videos {
            rows.extend(space.video(v.video_id).iter().map(|&x| f64::from(x)));
            let cb = edges.iter().take_while(|&&e| ctr[v.video_id as usize] >= e).count();
            let db = duration_bucket(v.duration_s);
            rows.extend((0..CTR_BUCKETS).map(|b| if b == cb { 1.0 } else { 0.0 }));
            rows.extend((0..DURATION_BUCKETS).map(|b| if b == db { 1.0 } else { 0.0 }));
        }
        Ok(VideoFeatures { dim, embed_dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, v: VideoId) -> &[f64] {
        &self.rows[v as usize * self.dim..(v as usize + 1) * self.dim]
    }

    /// Row-major stack of the requested videos' rows.
    pub fn gather(&self, ids: &[VideoId]) -> Vec<f64> {
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &v in ids {
            out.extend_from_slice(self.row(v));
        }
        out
    }
}
