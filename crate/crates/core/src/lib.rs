//! Desk-scale flow-matching video world model.
//!
//! The crate covers the whole stack: an exact 4×8×8 tokenizer stand-in, a
//! miniature diffusion transformer with its own reverse-mode autodiff, the
//! training loop, checkpoint merging, GRPO-style post-training against an
//! asynchronous reward service, clip curation and evaluation metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod conditioning;
pub mod datakit;
pub mod error;
pub mod evalkit;
pub mod flowmatch;
pub mod grpo;
pub mod merge;
pub mod rewardsvc;
pub mod tensor;
pub mod trainer;
pub mod worldmodel;

pub use error::{Error, Result};
pub use tensor::{LatentTensor, Tensor, VideoTensor};
