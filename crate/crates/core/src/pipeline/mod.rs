//! Pre-processing, patch sampling, sliding-window inference with flip TTA,
//! post-processing and occlusion sensitivity.

mod components;
mod evaluate;
mod normalize;
mod occlusion;
mod patches;
mod postprocess;
mod sliding;

pub use components::{label_components, Components};
pub use evaluate::{argmax_zones, evaluate_patient, EvalFlags, PatientResult};
pub use normalize::{zscore_normalize, STD_GUARD};
pub use occlusion::{occlusion_map, occlusion_scale_map, OcclusionConfig};
pub use patches::{apply_augmentation, augment_patch, invert_augmentation, sample_patches, Augmentation, PatchConfig, PatchSample, Polarity};
pub use postprocess::{postprocess, PostProcConfig};
pub use sliding::{infer_volume, sliding_window_infer, tta_predict, window_positions, InferConfig};

use crate::error::{Error, Result};
use crate::grid::FlipSet;
use crate::netref::{FeatureMap, InfiltrNet};

/// Where a patch handed to a [`Predictor`] sits: the window
/// `[origin, origin + size)` of the volume after `flips` were applied to
/// its unpadded extent `volume` and zero padding was added at the high end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub origin: [usize; 3],
    pub size: [usize; 3],
    pub flips: FlipSet,
    pub volume: [usize; 3],
}

impl Region {
    pub fn whole(volume: [usize; 3]) -> Self {
        Region {
            origin: [0; 3],
            size: volume,
            flips: FlipSet::NONE,
            volume,
        }
    }

    /// Coordinate in the original, unflipped volume of local voxel `l`, or
    /// `None` if it falls in the padding.
    pub fn source_coord(&self, l: [usize; 3]) -> Option<[usize; 3]> {
        let g = [self.origin[0] + l[0], self.origin[1] + l[1], self.origin[2] + l[2]];
        if (0..3).any(|a| g[a] >= self.volume[a]) {
            return None;
        }
        Some(self.flips.apply(g, self.volume))
    }
}

/// Maps a normalized (1, 4, d, h, w) patch to (1, 4, d, h, w) class
/// probabilities.
pub trait Predictor: Sync {
    fn predict(&self, patch: &FeatureMap, region: &Region) -> Result<FeatureMap>;
}

/// Tolerance on per-voxel probability sums accepted from predictors.
pub const PROBABILITY_TOLERANCE: f64 = 1e-5;

/// Check the output contract of a predictor.
pub fn check_prediction(input: &FeatureMap, output: &FeatureMap) -> Result<()> {
    if output.shape() != [1, 4, input.shape()[2], input.shape()[3], input.shape()[4]] {
        return Err(Error::shape(
            "predictor",
            format!("returned {:?} for input {:?}", output.shape(), input.shape()),
        ));
    }
    let s = output.spatial_len();
    let d = output.data();
    for v in 0..s {
        let sum: f64 = (0..4).map(|k| d[k * s + v]).sum();
        if !sum.is_finite() || (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(Error::shape("predictor", format!("probabilities at voxel {v} sum to {sum}")));
        }
    }
    Ok(())
}

/// The reference network as a predictor.
impl Predictor for InfiltrNet {
    fn predict(&self, patch: &FeatureMap, _region: &Region) -> Result<FeatureMap> {
        self.forward(patch)
    }
}
