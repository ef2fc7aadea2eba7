//! Conformer-MoE speech recognition: a Conformer encoder whose second
//! Macaron feed-forward module is a top-1 mixture of experts routed on a
//! shared embedding, trained with a joint CTC / attention objective plus
//! auxiliary attention decoders on intermediate encoder depths, and decoded
//! by CTC prefix beam search followed by attention rescoring.

pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod features;
pub mod inference;
pub mod model;
pub mod moe;
pub mod nn;
pub mod tensor;
pub mod training;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::Model;
pub use training::TrainConfig;
