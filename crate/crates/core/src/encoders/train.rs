use rand::seq::SliceRandom;

use super::{EncoderConfig, RelevanceEncoder};
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::{adam_step, AdamConfig, Tape, XentRow};
use crate::world::{Logs, QueryId, VideoId, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelevancePair {
    pub query_id: QueryId,
    pub video_id: VideoId,
}

/// `(query, clicked video)` pairs from search sessions, in log order.
pub fn relevance_pairs(logs: &Logs) -> Vec<RelevancePair> {
    let mut out = Vec::new();
    for s in &logs.sessions {
        for e in logs.impressions(s).iter().filter(|e| e.clicked) {
            out.push(RelevancePair { query_id: s.query_id, video_id: e.video_id });
        }
    }
    out
}

/// Trains both towers with in-batch sampled softmax. Batch members sharing
/// the positive's query or video are not used as its negatives.
pub fn train_relevance_encoder(world: &World, logs: &Logs, config: &EncoderConfig, seed: u64) -> Result<RelevanceEncoder> {
    let mut pairs = relevance_pairs(logs);
    if pairs.is_empty() {
        return Err(Error::Data("no clicked search impressions to train the encoder".into()));
    }
    let mut enc = RelevanceEncoder::new(world, config, seed)?;
    let adam = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let stream_base = if config.text_only { 1 << 20 } else { 0 };
    for epoch in 0..config.epochs {
        let mut rng = rng::stream(seed, streams::BATCHES, stream_base + epoch as u64);
        pairs.shuffle(&mut rng);
        for batch in pairs.chunks(config.batch) {
            if batch.len() < 2 {
                continue;
            }
            let grads = {
                let mut tape = Tape::new(&enc.store);
                let loss = batch_loss(&enc, world, batch, &mut tape)?;
                tape.backward(loss)?
            };
            enc.store.accumulate(&grads);
            adam_step(&mut enc.store, &adam);
        }
    }
    Ok(enc)
}

pub(crate) fn batch_loss(enc: &RelevanceEncoder, world: &World, batch: &[RelevancePair], tape: &mut Tape) -> Result<crate::tensor::Var> {
    let q_rows = enc.rows(batch.iter().map(|p| world.queries[p.query_id as usize].token_bag.as_slice()));
    let v_rows = enc.rows(batch.iter().map(|p| world.videos[p.video_id as usize].token_bag.as_slice()));
    let q = enc.query_tower_var(tape, q_rows)?;
    let v = enc.video_tower_var(tape, v_rows)?;
    let logits = tape.matmul_bt(q, v)?;
    let logits = tape.scale(logits, 1.0 / enc.config.tau)?;
    let w = 1.0 / batch.len() as f64;
    let rows = batch
        .iter()
        .enumerate()
        .map(|(i, p)| XentRow {
            row: i,
            pos_col: i,
            neg_cols: batch
                .iter()
                .enumerate()
                .filter(|(j, o)| *j != i && o.query_id != p.query_id && o.video_id != p.video_id)
                .map(|(j, _)| j)
                .collect(),
            weight: w,
        })
        .collect();
    tape.softmax_xent(logits, rows)
}
