//! Patch-based active annotation toolkit for adapting vessel segmentation
//! models to a new imaging domain without access to the source data.
//!
//! The pipeline runs in three stages:
//!
//! 1. a frozen source model produces per-pixel class probabilities on the
//!    target images ([`maps`]); these become a binary prediction mask and an
//!    entropy map;
//! 2. both are tiled into patches ([`patching`]) and a small budget of patches
//!    is chosen for annotation ([`selection`]), first by aggregate uncertainty
//!    and then by predicted vessel area;
//! 3. annotated patches are spliced into the prediction masks to form
//!    enhanced pseudo-labels ([`pseudolabel`]) for fine-tuning, and results
//!    are scored with [`metrics`].
//!
//! [`synth`] generates curvilinear phantoms with ground truth so the whole
//! loop can be exercised without clinical data, and [`commands`] wires
//! everything to files for the command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod maps;
pub mod metrics;
pub mod patching;
pub mod pseudolabel;
pub mod selection;
pub mod synth;

pub use error::{Error, Result};
pub use maps::{BinaryMask, GrayImage, LogitMap, ProbabilityMap, UncertaintyMap};
pub use patching::{EdgePolicy, PatchGrid, PatchStat, Rect};
pub use selection::{Scope, SelectionBudget, SelectionManifest, Strategy};
