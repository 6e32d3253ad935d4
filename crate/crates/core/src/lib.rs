//! Attention-head ablation for small ViT-style image encoders.
//!
//! Heads are suppressed by shrinking the attention paid to image tokens and
//! renormalizing each row, so that the class token's share grows. Which heads
//! to suppress is found either by a genetic search over binary masks
//! ([`ga`]) or by training one sigmoid gate per head against a contrastive
//! objective ([`bp`]). [`bench`] builds toy encoders with planted detrimental
//! heads so both searches can be checked against a known answer.

pub mod bench;
pub mod bp;
pub mod container;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod ga;
pub mod numerics;
pub mod rng;
pub mod sweep;

pub use error::{AatError, Result};
