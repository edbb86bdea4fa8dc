//! Reproducible benchmark harness for binary classification of
//! neurodegenerative-disease status from registered brain volumes.
//!
//! The crate covers the whole pipeline: cohort selection from a BIDS-lite
//! dataset ([`dataset`]), NIfTI I/O and volume preprocessing ([`volume`]),
//! voxel and regional feature extraction ([`features`]), three classifiers
//! written from scratch ([`classifiers`]), nested cross-validation with
//! metric distributions ([`evaluation`]) and experiment orchestration with
//! reports ([`report`]).

pub mod classifiers;
pub mod dataset;
pub mod evaluation;
pub mod features;
pub mod hash;
pub mod label;
pub mod report;
pub mod seed;
pub mod volume;

pub use features::{FeatureDescriptor, FeatureMatrix, GramMatrix};
pub use label::Label;
pub use volume::{BinaryMask, Grid, LabelVolume, Volume3D};
