//! Feature alignment between an old and a new embedding model, uncertainty
//! driven partial backfilling, and retrieval evaluation along the whole
//! backfilling trajectory.
//!
//! The crate is organised bottom-up:
//!
//! - [`features`] and [`store`]: labeled feature sets and the `FFS1` file format.
//! - [`world`]: a seeded synthetic old/new embedder pair with a controllable
//!   quality gap.
//! - [`tensornet`]: a small dense network kernel with exact backprop and Adam.
//! - [`losses`]: pairwise, discriminative and uncertainty-weighted objectives.
//! - [`alignment`]: classifier head fitting and joint training of the
//!   old-to-new map with its log-variance head.
//! - [`retrieval`]: exact blocked nearest-neighbor ranking, CMC and mAP.
//! - [`backfill`]: ordering policies, partially backfilled galleries,
//!   backfilling curves, flips, Kendall-Tau and subgroup gaps.
//! - [`experiment`]: config-driven gen/train/backfill/analyze pipeline.

pub mod alignment;
pub mod backfill;
pub mod error;
pub mod experiment;
pub mod features;
pub mod losses;
pub mod retrieval;
pub mod store;
pub mod tensornet;
pub mod world;

pub use error::{Error, Result};
pub use features::{FeatureRecord, FeatureSet, PairedFeatureSet, SetRole};
