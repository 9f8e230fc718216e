//! Deformable 2-D image registration driven by fixed local features.
//!
//! The crate covers the whole experimental loop: random diffeomorphisms from
//! stationary velocity fields ([`svf`]), synthetic label-map training pairs and
//! their multi-modal variants ([`synth`], [`dataset`]), a frozen filter-bank
//! feature extractor ([`features`]), an instance-wise variational registration
//! engine ([`registration`]) and the validation metrics ([`metrics`]).

pub mod dataset;
pub mod error;
pub mod features;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod registration;
pub mod svf;
pub mod synth;

pub use error::{Error, Result};
pub use features::{default_bank, extract, load_bank, FeatureMap, FilterBank};
pub use grid::{DisplacementField, Image, ScalarField};
pub use metrics::MetricsReport;
pub use registration::{
    register, register_with_bank, Parametrization, RegConfig, RegResult, Similarity,
};
pub use svf::{SvfParams, VelocityField};
pub use synth::{LabelMap, LabelMapParams, Modality, PairSample};
