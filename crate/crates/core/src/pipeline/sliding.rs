use serde::{Deserialize, Serialize};

use super::{check_prediction, Predictor, Region};
use crate::error::{Error, Result};
use crate::grid::FlipSet;
use crate::netref::FeatureMap;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    /// Cubic window edge in voxels.
    pub window: usize,
    pub overlap: f64,
    pub tta: bool,
    /// Windows evaluated concurrently before being merged.
    pub batch: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            window: 96,
            overlap: 0.5,
            tta: true,
            batch: 4,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Invalid {
                key: "inference.window".into(),
                value: "0".into(),
                expected: "an integer >= 1".into(),
            });
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Invalid {
                key: "inference.overlap".into(),
                value: self.overlap.to_string(),
                expected: "a value in [0, 1)".into(),
            });
        }
        if self.batch == 0 {
            return Err(Error::Invalid {
                key: "inference.batch".into(),
                value: "0".into(),
                expected: "an integer >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Window origins along one axis of (padded) length `extent`: multiples of
/// the stride, with the last window clamped to end at `extent`.
pub fn window_positions(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    if extent <= window {
        return vec![0];
    }
    let stride = stride.max(1);
    let last = extent - window;
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&p| p < last).collect();
    out.push(last);
    out
}

fn stride_of(window: usize, overlap: f64) -> usize {
    ((window as f64 * (1.0 - overlap)).floor() as usize).max(1)
}

/// Running per-voxel mean: `m += (x - m) / k`. Keeps a constant input
/// exactly constant.
fn accumulate_mean(mean: &mut [f64], x: &[f64], k: &mut [u32]) {
    for ((m, &v), c) in mean.iter_mut().zip(x).zip(k.iter_mut()) {
        *c += 1;
        *m += (v - *m) / *c as f64;
    }
}

/// Tile `volume` (1, 4, D, H, W) with overlapping cubic windows, average the
/// predicted probabilities uniformly and crop back to (D, H, W). `flips`
/// describes how `volume` was flipped relative to the original.
pub fn sliding_window_infer(
    volume: &FeatureMap,
    predictor: &dyn Predictor,
    cfg: &InferConfig,
    flips: FlipSet,
) -> Result<FeatureMap> {
    cfg.validate()?;
    let sp = volume.spatial();
    let w = cfg.window;
    let padded = volume.pad_spatial([w, w, w]);
    let ext = padded.spatial();
    let stride = stride_of(w, cfg.overlap);
    let pos: Vec<Vec<usize>> = ext.iter().map(|&e| window_positions(e, w.min(e), stride)).collect();
    let size = [w.min(ext[0]), w.min(ext[1]), w.min(ext[2])];
    let mut origins = Vec::new();
    for &z in &pos[0] {
        for &y in &pos[1] {
            for &x in &pos[2] {
                origins.push([z, y, x]);
            }
        }
    }
    let plane = ext[0] * ext[1] * ext[2];
    let mut mean = vec![0.0; 4 * plane];
    let mut count = vec![0u32; 4 * plane];
    for chunk in origins.chunks(cfg.batch) {
        let preds = par::try_map_range(chunk.len(), |i| {
            let o = chunk[i];
            let patch = padded.crop_spatial(o, size)?;
            let region = Region {
                origin: o,
                size,
                flips,
                volume: sp,
            };
            let out = predictor.predict(&patch, &region)?;
            check_prediction(&patch, &out)?;
            Ok::<_, Error>(out)
        })?;
        for (o, p) in chunk.iter().zip(preds) {
            for c in 0..4 {
                let src = p.channel(0, c);
                for z in 0..size[0] {
                    for y in 0..size[1] {
                        let g = ((c * ext[0] + o[0] + z) * ext[1] + o[1] + y) * ext[2] + o[2];
                        let l = (z * size[1] + y) * size[2];
                        accumulate_mean(&mut mean[g..g + size[2]], &src[l..l + size[2]], &mut count[g..g + size[2]]);
                    }
                }
            }
        }
    }
    FeatureMap::from_vec([1, 4, ext[0], ext[1], ext[2]], mean)?.crop_spatial([0; 3], sp)
}

/// Average of `base(flip(x), f)` unflipped, over all eight flip subsets.
pub fn tta_predict(volume: &FeatureMap, base: &(dyn Fn(&FeatureMap, FlipSet) -> Result<FeatureMap> + Sync)) -> Result<FeatureMap> {
    let mut mean: Option<FeatureMap> = None;
    let mut count = vec![0u32; 4 * volume.spatial_len()];
    for (k, flips) in FlipSet::all_subsets().into_iter().enumerate() {
        let out = base(&volume.flip_spatial(flips), flips)?.flip_spatial(flips);
        match &mut mean {
            None => {
                mean = Some(out);
                count.fill(1);
            }
            Some(m) => {
                if m.shape() != out.shape() {
                    return Err(Error::shape("tta", format!("flip {k} returned {:?}", out.shape())));
                }
                accumulate_mean(m.data_mut(), out.data(), &mut count);
            }
        }
    }
    Ok(mean.expect("eight subsets"))
}

/// Sliding-window inference with optional flip TTA.
pub fn infer_volume(volume: &FeatureMap, predictor: &dyn Predictor, cfg: &InferConfig) -> Result<FeatureMap> {
    if cfg.tta {
        tta_predict(volume, &|v, f| sliding_window_infer(v, predictor, cfg, f))
    } else {
        sliding_window_infer(volume, predictor, cfg, FlipSet::NONE)
    }
}
