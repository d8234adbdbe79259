//! Infiltration-risk mapping for glioma MRI.
//!
//! The crate covers the full desk-scale pipeline: three-zone risk labels
//! derived from tumor segmentations with an exact Euclidean distance
//! transform, a deterministic forward reference of the dual-branch
//! cross-attention segmentation network, the training objective with
//! analytic gradients, per-zone evaluation metrics, and the inference
//! pipeline (sliding window, flip TTA, post-processing, occlusion maps).
//! Synthetic phantoms with analytic ground truth drive the tests.

pub mod ablation;
pub mod error;
pub mod grid;
pub mod io;
pub mod labelgen;
pub mod losses;
pub mod metrics;
pub mod netref;
pub mod par;
pub mod phantom;
pub mod pipeline;

pub use error::{Error, Result};
pub use grid::{Axis, Dims, FlipSet, Mask, MultiModalVolume, Plane, Spacing, VoxelGrid, Zone, ZoneGrid};
