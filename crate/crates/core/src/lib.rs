//! Personalized retrieve-then-rank search over a synthetic short-video world.
//!
//! * [`world`]: seeded users, videos, queries, behaviour logs and the
//!   ground-truth engagement model.
//! * [`tensor`]: a small reverse-mode autodiff kernel with the layers and
//!   losses the models need.
//! * [`encoders`]: query/video relevance embedding spaces.
//! * [`qrcf`]: query-relevant collaborative filtering (relevance-filtered
//!   history expanded through Swing and embedding item-to-item tables).
//! * [`pdr`]: personalized dense retrieval and the ANN index in [`ann`].
//! * [`qin`]: the multi-task engagement ranker.
//! * [`pipeline`]: baselines, end-to-end execution, metrics and A/B replay.

pub mod ann;
pub mod config;
pub mod encoders;
pub mod error;
pub mod features;
pub mod io;
pub mod math;
pub mod pipeline;
pub mod ranking;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod topk;
pub mod world;

pub use error::{Error, ErrorKind, Result};
