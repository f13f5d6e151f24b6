//! Desk-scale cross-subject visual decoding laboratory.
//!
//! The crate simulates multi-subject neural recordings with planted
//! subject-specific non-linear structure, pretrains a shared decoding
//! backbone over synthetic subjects, adapts it to held-out subjects with
//! LoRA and Skip-LoRA blocks, aligns decoded embeddings to a text space
//! through an image pivot, and evaluates the whole pipeline with
//! retrieval, identification, correlation, and importance metrics.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod tape;
pub mod optim;
pub mod gradcheck;
pub mod stats;
pub mod alignment;
pub mod adapters;
pub mod backbone;
pub mod losses;
pub mod config;
pub mod container;
pub mod cohort;
pub mod training;
pub mod evaluation;
pub mod categories;
pub mod checkpoint;

pub use error::{CoreError, Result};
pub use rng::Rng;
pub use tensor::Tensor;
pub use tape::{Gradients, Tape, Var};
