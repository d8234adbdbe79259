use serde::{Deserialize, Serialize};

use super::normalize::zscore_normalize;
use super::postprocess::{postprocess, PostProcConfig};
use super::sliding::{infer_volume, InferConfig};
use super::Predictor;
use crate::error::{Error, Result};
use crate::grid::{MultiModalVolume, Spacing, ZoneGrid};
use crate::metrics::{evaluate_zones, MetricsReport};
use crate::netref::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFlags {
    pub tta: bool,
    pub postproc: bool,
}

impl Default for EvalFlags {
    fn default() -> Self {
        EvalFlags { tta: true, postproc: true }
    }
}

/// Highest-probability class per voxel; ties go to the lower class.
pub fn argmax_zones(probs: &FeatureMap, spacing: Spacing) -> Result<ZoneGrid> {
    if probs.batch() != 1 || probs.channels() != 4 {
        return Err(Error::shape("argmax", format!("{:?}", probs.shape())));
    }
    let s = probs.spatial_len();
    let d = probs.data();
    let data = (0..s)
        .map(|v| {
            let mut best = 0;
            for k in 1..4 {
                if d[k * s + v] > d[best * s + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    ZoneGrid::new(probs.spatial_dims(), spacing, data)
}

#[derive(Clone, Debug)]
pub struct PatientResult {
    pub probabilities: FeatureMap,
    /// Argmax before post-processing.
    pub raw_zones: ZoneGrid,
    pub zones: ZoneGrid,
    pub report: MetricsReport,
}

/// z-score normalize, infer (optionally with TTA), take the argmax,
/// optionally post-process, then score against `truth`.
pub fn evaluate_patient(
    volume: &MultiModalVolume,
    truth: &ZoneGrid,
    predictor: &dyn Predictor,
    infer: &InferConfig,
    post: &PostProcConfig,
    flags: EvalFlags,
) -> Result<PatientResult> {
    if truth.dims() != volume.dims() {
        return Err(Error::Size(format!("truth {} vs volume {}", truth.dims(), volume.dims())));
    }
    let input = FeatureMap::from_volume(&zscore_normalize(volume));
    let cfg = InferConfig {
        tta: flags.tta,
        ..infer.clone()
    };
    let probabilities = infer_volume(&input, predictor, &cfg)?;
    let raw_zones = argmax_zones(&probabilities, volume.spacing())?;
    let zones = if flags.postproc {
        postprocess(&raw_zones, post)
    } else {
        raw_zones.clone()
    };
    let report = evaluate_zones(&zones, truth)?;
    Ok(PatientResult {
        probabilities,
        raw_zones,
        zones,
        report,
    })
}
