//! Saving and loading a trained [`System`] as a directory of artifacts.
//!
//! ```text
//! system.kv      train_end, BM25 and QRCF settings
//! world.txt      logs.txt       tables.txt
//! space.q.ann    space.v.ann    relevance space (queries, videos)
//! dr.q.ann       dr.v.ann       baseline dense space
//! pdr.ckpt       pdr.ann        qin.ckpt
//! ```
//!
//! The BM25 index, video features and the baseline dense index are rebuilt
//! deterministically from the saved pieces.

use std::path::Path;

use super::System;
use crate::ann::AnnIndex;
use crate::config::KeyValues;
use crate::encoders::RelevanceSpace;
use crate::error::{Error, Result};
use crate::features::VideoFeatures;
use crate::io::write_file;
use crate::ranking::qin::QinModel;
use crate::retrieval::bm25::{Bm25Params, InvertedIndex};
use crate::retrieval::pdr::PdrModel;
use crate::retrieval::qrcf::{QrcfConfig, SimilarityTables};
use crate::tensor::{load_checkpoint, save_checkpoint};
use crate::world::{read_logs, read_world, write_logs, write_world, History};

pub const SYSTEM_KV: &str = "system.kv";
pub const WORLD: &str = "world.txt";
pub const LOGS: &str = "logs.txt";
pub const TABLES: &str = "tables.txt";
pub const SPACE: &str = "space";
pub const DR_SPACE: &str = "dr";
pub const ENCODER: &str = "encoder.ckpt";
pub const DR_ENCODER: &str = "dr_encoder.ckpt";
pub const PDR: &str = "pdr.ckpt";
pub const PDR_INDEX: &str = "pdr.ann";
pub const QIN: &str = "qin.ckpt";

/// Writes a space as two exact indexes, `<prefix>.q.ann` and `<prefix>.v.ann`.
pub fn save_space(space: &RelevanceSpace, dir: &Path, prefix: &str) -> Result<()> {
    for (part, m) in [("q", &space.queries), ("v", &space.videos)] {
        let index = AnnIndex::new((0..m.len() as u32).collect(), m.clone())?;
        index.save(&dir.join(format!("{prefix}.{part}.ann")))?;
    }
    Ok(())
}

pub fn load_space(dir: &Path, prefix: &str) -> Result<RelevanceSpace> {
    let queries = AnnIndex::load(&dir.join(format!("{prefix}.q.ann")))?.vectors().clone();
    let videos = AnnIndex::load(&dir.join(format!("{prefix}.v.ann")))?.vectors().clone();
    Ok(RelevanceSpace { queries, videos })
}

/// The settings a loaded system needs beyond its model artifacts.
pub fn system_kv(train_end: u32, bm25: Bm25Params, q: &QrcfConfig) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.insert("system.train_end", train_end);
    kv.insert("bm25.k1", bm25.k1);
    kv.insert("bm25.b", bm25.b);
    kv.insert("qrcf.k", q.k);
    kv.insert("qrcf.epsilon", q.epsilon);
    kv.insert("qrcf.per_behavior", q.per_behavior);
    kv.insert("qrcf.max_expansions", q.max_expansions);
    kv.insert("qrcf.top", q.top);
    kv.insert("qrcf.swing_alpha", q.swing.alpha);
    kv.insert("qrcf.swing_self_pairs", q.swing.self_pairs);
    kv.insert("qrcf.table_n", q.table_n);
    kv
}

pub fn save_system(sys: &System, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_file(&dir.join(SYSTEM_KV), system_kv(sys.train_end, sys.bm25.params, &sys.qrcf).to_text())?;
    write_file(&dir.join(WORLD), write_world(&sys.world))?;
    write_file(&dir.join(LOGS), write_logs(&sys.logs))?;
    write_file(&dir.join(TABLES), sys.tables.to_text())?;
    save_space(&sys.space, dir, SPACE)?;
    save_space(&sys.dr_space, dir, DR_SPACE)?;
    save_checkpoint(&dir.join(PDR), &sys.pdr.to_checkpoint(&sys.world))?;
    sys.pdr_index.save(&dir.join(PDR_INDEX))?;
    save_checkpoint(&dir.join(QIN), &sys.qin.to_checkpoint(&sys.world))?;
    Ok(())
}

pub fn load_system(dir: &Path) -> Result<System> {
    let read = |name: &str| std::fs::read_to_string(dir.join(name)).map_err(Error::from);
    let kv = KeyValues::load(&dir.join(SYSTEM_KV))?;
    let mut train_end = 0u32;
    kv.take("system.train_end", &mut train_end)?;
    let mut bm25 = Bm25Params::default();
    kv.take("bm25.k1", &mut bm25.k1)?;
    kv.take("bm25.b", &mut bm25.b)?;
    let mut qrcf = QrcfConfig::default();
    qrcf.apply(&kv)?;
    let world = read_world(&read(WORLD)?)?;
    let logs = read_logs(&read(LOGS)?)?;
    if train_end == 0 || train_end >= logs.days {
        return Err(Error::Data(format!("train_end {train_end} outside the {} logged days", logs.days)));
    }
    let tables = SimilarityTables::from_text(&read(TABLES)?)?;
    let space = load_space(dir, SPACE)?;
    let dr_space = load_space(dir, DR_SPACE)?;
    if space.videos.len() != world.videos.len() || dr_space.videos.len() != world.videos.len() {
        return Err(Error::Shape("saved embedding spaces do not match the world".into()));
    }
    let dr_index = AnnIndex::new((0..dr_space.videos.len() as u32).collect(), dr_space.videos.clone())?;
    let history = History::build(world.users.len(), &logs);
    let feats = VideoFeatures::build(&world, &space, &logs.until_day(train_end))?;
    let pdr = PdrModel::from_checkpoint(&load_checkpoint(&dir.join(PDR))?)?;
    let pdr_index = AnnIndex::load(&dir.join(PDR_INDEX))?;
    let qin = QinModel::from_checkpoint(&load_checkpoint(&dir.join(QIN))?)?;
    let bm25 = InvertedIndex::build(&world, bm25)?;
    Ok(System { world, logs, train_end, history, space, dr_space, dr_index, bm25, tables, feats, pdr, pdr_index, qin, qrcf })
}
