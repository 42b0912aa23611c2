//! Viewpoint-conditioned re-identification.
//!
//! Backbone feature vectors are projected by four parallel linear heads into
//! global, front, side and rear latent spaces. Gallery candidates are ranked
//! by a fused distance that weights each side space by how much of that side
//! the query shows (its area ratio, measured from side masks). A side that is
//! not visible gets weight zero.
//!
//! - [`mask`]: mask files and area ratios.
//! - [`heads`]: projection heads and ArcFace classifiers.
//! - [`training`]: identity + triplet objective, gradients, training loop.
//! - [`retrieval`]: fused distance, gallery index, ranking.
//! - [`evaluation`]: Top-k, CMC, mAP and the view-ablation comparison.
//! - [`synthetic`]: deterministic datasets with controllable viewpoints.
//! - [`dataset`]: manifest and embedding file formats.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod heads;
pub mod linalg;
pub mod mask;
pub mod retrieval;
pub mod space;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use heads::{arcface_logits, init_heads, project, ArcFaceHead, HeadParameters, ModelShape, ReidModel};
pub use mask::{area_ratios, clamp_to_foreground, load_mask, AreaRatios, BinaryMask, MaskSet};
pub use retrieval::{
    build_index, fused_distance, load_index, query_topk, save_index, space_distance, Combine, DistanceBreakdown,
    GalleryEntry, GalleryIndex, RankedResult, ViewWeighting,
};
pub use space::{PerSpaceEmbeddings, Space, View};
pub use training::{fit, LossReport, TrainConfig, TrainingSample};
