//! Training data and the multi-task ranking objective for the interest network.

use rand::seq::SliceRandom;

use super::qin::{QinContext, QinModel, RankRequest};
use super::TASK_COUNT;
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::{adam_step, AdamConfig, ListSpec, Tape, Var};
use crate::world::{derive_labels, Logs, World};

/// One logged search page: the request and the five labels per impression.
#[derive(Debug, Clone, PartialEq)]
pub struct QinList {
    pub request: RankRequest,
    pub labels: Vec<[f64; TASK_COUNT]>,
}

/// Every search session of `logs` whose day lies in `days`.
pub fn build_qin_lists(world: &World, logs: &Logs, days: std::ops::Range<u32>) -> Result<Vec<QinList>> {
    let mut out = Vec::new();
    for s in logs.sessions.iter().filter(|s| days.contains(&s.day)) {
        let imps = logs.impressions(s);
        let mut labels = Vec::with_capacity(imps.len());
        for e in imps {
            let l = derive_labels(e, world.video(e.video_id)?.duration_s)?;
            labels.push(l.as_array().map(f64::from));
        }
        out.push(QinList {
            request: RankRequest {
                user_id: s.user_id,
                query_id: s.query_id,
                timestamp: s.timestamp,
                candidates: imps.iter().map(|e| e.video_id).collect(),
            },
            labels,
        });
    }
    Ok(out)
}

/// Records the ranking objective for `probs` (`rows × 5`) on the tape: per
/// task, mean BCE over rows plus `alpha` times the mean list cross entropy
/// over lists with a positive. `lists[l]` holds the row indices of list `l`.
pub fn rcr_loss_on_tape(
    tape: &mut Tape,
    probs: Var,
    labels: &[[f64; TASK_COUNT]],
    lists: &[Vec<usize>],
    alpha: f64,
) -> Result<Var> {
    let n = labels.len();
    if tape.value(probs).rows() != n || tape.value(probs).cols() != TASK_COUNT {
        return Err(Error::Shape(format!("{} label rows for probabilities of shape {:?}", n, tape.value(probs).shape())));
    }
    let targets: Vec<f64> = labels.iter().flatten().copied().collect();
    let mut total = tape.bce(probs, targets, vec![1.0 / n as f64; n * TASK_COUNT])?;
    if alpha > 0.0 {
        for t in 0..TASK_COUNT {
            let with_pos: Vec<&Vec<usize>> = lists.iter().filter(|l| l.iter().any(|&i| labels[i][t] > 0.0)).collect();
            if with_pos.is_empty() {
                continue;
            }
            let w = alpha / with_pos.len() as f64;
            let specs = with_pos
                .iter()
                .map(|l| ListSpec { items: l.to_vec(), labels: l.iter().map(|&i| labels[i][t]).collect(), weight: w })
                .collect();
            let lce = tape.list_ce(probs, t, specs)?;
            total = tape.add(total, lce)?;
        }
    }
    Ok(total)
}

/// The objective over the lists at `batch`.
pub fn qin_batch_loss(model: &QinModel, ctx: &QinContext, lists: &[QinList], batch: &[usize], tape: &mut Tape) -> Result<Var> {
    let requests: Vec<RankRequest> = batch.iter().map(|&i| lists[i].request.clone()).collect();
    let f = model.forward(tape, ctx, &requests)?;
    let mut labels = Vec::with_capacity(f.rows.len());
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); batch.len()];
    for (row, &(r, c)) in f.rows.iter().enumerate() {
        labels.push(lists[batch[r]].labels[c]);
        groups[r].push(row);
    }
    rcr_loss_on_tape(tape, f.probs, &labels, &groups, model.config.rcr_alpha)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QinTrainReport {
    pub epoch_loss: Vec<f64>,
    pub lists: usize,
    pub impressions: usize,
}

pub fn train_qin_on(model: &mut QinModel, ctx: &QinContext, lists: &[QinList], seed: u64) -> Result<QinTrainReport> {
    if lists.is_empty() {
        return Err(Error::Data("no search sessions to train the ranker".into()));
    }
    let adam = AdamConfig { lr: model.config.lr, ..AdamConfig::default() };
    let mut order: Vec<usize> = (0..lists.len()).collect();
    let mut report = QinTrainReport {
        lists: lists.len(),
        impressions: lists.iter().map(|l| l.labels.len()).sum(),
        ..QinTrainReport::default()
    };
    for epoch in 0..model.config.epochs {
        let mut rng = rng::stream(seed, streams::BATCHES, (4 << 40) | epoch as u64);
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(model.config.batch_sessions) {
            let grads = {
                let mut tape = Tape::new(&model.store);
                let loss = qin_batch_loss(model, ctx, lists, batch, &mut tape)?;
                sum += tape.value(loss).item();
                count += 1;
                tape.backward(loss)?
            };
            model.store.accumulate(&grads);
            adam_step(&mut model.store, &adam);
        }
        report.epoch_loss.push(sum / count as f64);
    }
    Ok(report)
}

/// Trains a fresh model on the last `train_days` days before `end_day`.
pub fn train_qin(
    ctx: &QinContext,
    logs: &Logs,
    end_day: u32,
    config: &super::qin::QinConfig,
    seed: u64,
) -> Result<(QinModel, QinTrainReport)> {
    let start = end_day.saturating_sub(config.train_days);
    let lists = build_qin_lists(ctx.world, logs, start..end_day)?;
    let mut model = QinModel::new(ctx.world, ctx.space.dim(), ctx.feats.dim(), config, seed)?;
    let report = train_qin_on(&mut model, ctx, &lists, seed)?;
    Ok((model, report))
}

/// Mean predicted probability and empirical rate per task over `lists`.
pub fn calibration(model: &QinModel, ctx: &QinContext, lists: &[QinList]) -> Result<[(f64, f64); TASK_COUNT]> {
    let mut pred = [0.0; TASK_COUNT];
    let mut emp = [0.0; TASK_COUNT];
    let mut n = 0usize;
    for chunk in lists.chunks(64) {
        let requests: Vec<RankRequest> = chunk.iter().map(|l| l.request.clone()).collect();
        let scores = model.predict(ctx, &requests)?;
        for (l, s) in chunk.iter().zip(scores) {
            for (y, p) in l.labels.iter().zip(s) {
                for t in 0..TASK_COUNT {
                    pred[t] += p[t];
                    emp[t] += y[t];
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Data("calibration needs at least one impression".into()));
    }
    let mut out = [(0.0, 0.0); TASK_COUNT];
    for t in 0..TASK_COUNT {
        out[t] = (pred[t] / n as f64, emp[t] / n as f64);
    }
    Ok(out)
}
