//! Multi-view geo-localization embedding toolkit.
//!
//! A landmark photographed by a drone yields many views (three height levels,
//! eighteen azimuths each); a satellite yields one. This crate scores drone
//! views by how much class information they carry, selects a small diverse
//! subset, fuses the subset into one descriptor per landmark, and measures the
//! retrieval quality and cost of the result. It also provides the loss
//! functions used to train such embeddings, each with an analytic gradient
//! that is validated against central finite differences.
//!
//! Modules:
//!
//! - [`store`]: binary embedding databases (`MGEO` format), poses, validation
//! - [`score`]: per-slot information measures and combined scores
//! - [`select`]: greedy diverse subset selection over scored slots
//! - [`aggregate`]: score-weighted fusion of selected views
//! - [`retrieval`]: similarity ranking, recall@K, average precision, cost counters
//! - [`losses`]: training losses with analytic gradients and a gradient checker
//! - [`synth`]: synthetic data generators and Monte-Carlo verification suites
//!
//! All internal arithmetic is `f64`; stored vectors are `f32`. Every random
//! draw goes through a seeded ChaCha8 stream (see [`rng`]), so any two runs
//! with the same seeds produce identical bytes.

pub mod aggregate;
pub mod numeric;
pub mod retrieval;
pub mod rng;
pub mod score;
pub mod select;
pub mod store;
pub mod synth;

pub mod losses;

pub use store::{EmbeddingDatabase, Role, ViewDescriptor, ViewPose};
