//! Multimodal rumor detection by intrinsic–social modality alignment and fusion.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode engine with its gradient checker.
//! - [`encoders`]: per-modality encoders plus the social graph and its signed GAT.
//! - [`bridging`]: token-lifted self/co-attention and the alignment losses.
//! - [`fusion`]: encoder–decoder fusion with the classifier head.
//! - [`training`]: data handling and the training loop.

pub mod autodiff;
pub mod bridging;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod training;

pub use error::{Error, Result};
