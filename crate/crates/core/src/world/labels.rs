use super::BehaviorEvent;
use crate::error::{Error, Result};

pub const EFFECTIVE_PLAY_S: f64 = 7.0;
pub const LONG_PLAY_S: f64 = 18.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EngagementLabels {
    pub click: u8,
    pub effective_play: u8,
    pub long_play: u8,
    pub full_play: u8,
    pub like: u8,
}

impl EngagementLabels {
    /// Labels in task order: click, effective-play, long-play, full-play, like.
    pub fn as_array(&self) -> [u8; 5] {
        [self.click, self.effective_play, self.long_play, self.full_play, self.like]
    }
}

/// Play labels use fixed thresholds of 7 s, 18 s and the full duration.
pub fn derive_labels(event: &BehaviorEvent, duration_s: f64) -> Result<EngagementLabels> {
    if event.watch_s > duration_s {
        return Err(Error::Data(format!(
            "watch time {} exceeds duration {} for video {}",
            event.watch_s, duration_s, event.video_id
        )));
    }
    if !event.impressed {
        return Ok(EngagementLabels::default());
    }
    Ok(EngagementLabels {
        click: event.clicked as u8,
        effective_play: (event.watch_s >= EFFECTIVE_PLAY_S) as u8,
        long_play: (event.watch_s >= LONG_PLAY_S) as u8,
        full_play: (event.watch_s >= duration_s) as u8,
        like: event.liked as u8,
    })
}
