//! Dense-to-sparse label generation from point annotations.
//!
//! Dense detector boxes are turned into per-category heat grids, a square
//! mask is laid around each annotated point, and the masked marginals are
//! trimmed into one box per point. Points whose mask catches no box fall back
//! to a size model fitted against image height.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datamodel;
pub mod error;
pub mod evaluate;
pub mod heat;
pub mod ingest;
pub mod mapping;
pub mod matching;
pub mod optimize;
pub mod pipeline;
pub mod regression;
pub mod synth;

pub use datamodel::{
    BoxLabel, CategoryId, GridMap, ImageId, ImageRecord, InstanceId, Label, LabelSet, LabelSource,
    MarginalProfile, Params, PointAnnotation,
};
pub use error::{Error, Result};
pub use ingest::DatasetBundle;
pub use matching::MatchMode;
pub use optimize::{fit, FitResult, SearchSpace};
pub use pipeline::{refine_bundle, ExtentMode, RefineOptions, RefineOutput};
