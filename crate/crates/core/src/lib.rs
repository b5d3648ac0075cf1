//! Text-guided segmentation stack: frozen toy CLIP-style encoders, three
//! lightweight adapters (SSE, DATE, VLCM), a cost-aggregating decoder, a
//! deterministic synthetic referring-segmentation benchmark, and the
//! training/evaluation harness.

pub mod ablate;
pub mod config;
pub mod date;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod grammar;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pgm;
pub mod pretrain;
pub mod rng;
pub mod simmap;
pub mod sse;
pub mod synth;
pub mod train;
pub mod vlcm;
pub mod vocab;

pub use error::{CoreError, Result};
