//! Subspace-anchored multi-bit watermarking for small decoder language models.

pub mod attacks;
pub mod bitspace;
pub mod corpus;
pub mod ecc;
pub mod error;
pub mod injection;
pub mod key;
pub mod metrics;
pub mod pipeline;
pub mod verify_black;
pub mod verify_white;
pub mod substrate;

pub use nalgebra;

pub use bitspace::{BitSpace, BitVectorPair, WatermarkPayload};
pub use corpus::{FactTriplet, FactWorld};
pub use error::{Error, Result, StageExt};
pub use key::{KeyDraft, WatermarkKey};
pub use pipeline::{PipelineConfig, PipelineReport, VerifyReport};
pub use verify_white::{Mode, RecoveredSequence};
pub use substrate::{ForwardTrace, ModelConfig, ModelState};
