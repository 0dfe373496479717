//! Training core for a toy dual-encoder contrastive learner.
//!
//! The crate is organized as a small stack of independent layers:
//!
//! - [`numkit`]: dense `f64` matrix kernels, row normalization, stable
//!   softplus, and per-channel feature statistics. No external math crates.
//! - [`toyworld`]: a seeded generator for a discrete compositional domain
//!   (subject, object, attribute, relation) rendered into feature vectors,
//!   including controlled corruption of synthetic samples.
//! - [`batching`]: fixed-layout batches of real, synthetic-negative, and
//!   synthetic-positive pairs, their ground-truth alignment labels, and the
//!   stratified index sets the margin loss ranks against.
//! - [`losses`]: sigmoid contrastive loss, stratified margin loss with
//!   fixed/adaptive/inverse margin schedules, and their exact gradients.
//! - [`geninject`]: embedding-sequence surgery (repeating an image embedding
//!   over post-EOS padding slots) and adaptive instance normalization, with a
//!   checksummed file format for hand-off to external pipelines.
//! - [`trainer`]: a deterministic AdamW training loop over the toy world with
//!   cosine learning-rate decay, evaluation, and ablation sweeps.
//!
//! All randomness is derived from explicit 64-bit seeds through named counter
//! streams, so every artifact the crate produces is reproducible byte for
//! byte.

pub mod batching;
pub mod geninject;
pub mod losses;
pub mod numkit;
pub mod toyworld;
pub mod trainer;
