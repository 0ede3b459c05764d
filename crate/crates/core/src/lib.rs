//! Multi-view attention matching for two-stream retrieval.
//!
//! Token-level features from an image encoder and a text encoder are pooled
//! into `m` attention views each, driven by learnable view codes. The views
//! are concatenated into one embedding per instance and scored with cosine
//! similarity. Training combines an in-batch contrastive objective with a
//! Frobenius diversity penalty on the per-instance attention matrices.
//!
//! Crate layout:
//!
//! | module | contents |
//! |---|---|
//! | [`numerics`] | dense matrices, softmax, cosine, the pinned PRNG |
//! | [`head`] | projection, view-code attention, view pooling, `[CLS]` pooling |
//! | [`losses`] | contrastive loss, both diversity penalties, the combined objective |
//! | [`grad`] | parameter sets, closed-form backward pass, finite-difference checks |
//! | [`optim`], [`trainer`], [`checkpoint`] | optimizers, the two-stage loop, persistence |
//! | [`data`] | datasets, the `MVF1` feature format, synthetic data, toy encoder |
//! | [`retrieval`] | corpus scoring, Recall@K, ablation harnesses, attention export |

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod grad;
pub mod head;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
