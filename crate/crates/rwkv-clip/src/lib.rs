//! IO, file formats and command drivers around `rwkv-clip-core`.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod images;
pub mod jsonl;
pub mod llm;
pub mod plot;
pub mod train;

pub use error::{Error, Result};
pub use rwkv_clip_core as core;
