//! Multi-dataset semantic segmentation pipeline.

pub mod error;
pub mod eval;
pub mod fsutil;
pub mod label_space;
pub mod augment;
pub mod catalog;
pub mod logits;
pub mod mask;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod tta;

pub use error::{Error, Result};
pub use label_space::{
    parse_label_space, parse_mapping, project_mask, ClassDef, InversionPolicy, LabelSpace,
    MappingTable, ProjectionLut,
};
pub use mask::MaskImage;
pub use par::Execution;
