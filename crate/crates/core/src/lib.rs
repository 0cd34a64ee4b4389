// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept-direction geometry across the layers of a language model.
//!
//! Given cached last-token activations for contrastive pairs, the crate
//! traces how the concept direction rotates with depth, finds the layer
//! where it settles (the handoff layer), and checks by directional ablation
//! whether the settled direction is a better probe than the one at the
//! separation peak.
//!
//! Pipeline: [`store`] loads activation directories, [`geometry`] builds
//! the per-layer trajectory, [`detector`] locates the handoff, [`ablation`]
//! scores probes and controls, [`stats`] aggregates, [`pipeline`] runs a
//! whole corpus and [`report`] emits figure data.

pub mod ablation;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod pipeline;
pub mod registry;
pub mod report;
pub mod stats;
pub mod store;
pub mod synthetic;

pub use ablation::{AblationError, AblationRecord, ComparisonRecord, Outcome, Propagator};
pub use detector::{Gem, GemNode, WidthRule};
pub use error::Error;
pub use geometry::{Trajectory, UnitVector};
pub use registry::{Cohort, ModelMeta, ScaleBucket};
pub use stats::StudySummary;
pub use store::{ActivationSet, Manifest};
