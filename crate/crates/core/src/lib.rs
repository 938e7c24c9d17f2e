//! Dyadformer: a multi-modal, multi-subject Transformer that regresses
//! Big-Five (OCEAN) trait scores for both participants of a dyadic
//! interaction from precomputed per-chunk video and audio features.
//!
//! The crate is self-contained: a small reverse-mode tensor engine
//! ([`tensor`]), the attention building blocks ([`transformer`]), the
//! architecture and its ablation variants ([`model`]), feature-file and
//! manifest I/O plus a synthetic dyad generator ([`data`]), the training
//! protocol ([`training`]) and the sequence/participant metrics
//! ([`evaluation`]).

pub mod data;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use params::ParamStore;
pub use rng::RngStream;
pub use tensor::{Mode, Tensor, TensorError};
