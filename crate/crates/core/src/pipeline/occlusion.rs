use serde::{Deserialize, Serialize};

use super::sliding::window_positions;
use crate::error::{Error, Result};
use crate::grid::{Mask, VoxelGrid};
use crate::netref::FeatureMap;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionConfig {
    /// Occluder cube edges in voxels.
    pub scales: Vec<usize>,
    pub stride: usize,
    /// Value written into occluded voxels of every modality.
    pub fill: f64,
    /// Class whose probability drop is measured.
    pub target_class: u8,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            scales: vec![8, 16, 32],
            stride: 8,
            fill: 0.0,
            target_class: 3,
        }
    }
}

type Infer<'a> = &'a (dyn Fn(&FeatureMap) -> Result<FeatureMap> + Sync);

fn mean_target(probs: &FeatureMap, target: &Mask, class: usize) -> f64 {
    let ch = probs.channel(0, class);
    let (mut s, mut n) = (0.0, 0usize);
    for (p, &t) in ch.iter().zip(target.data()) {
        if t {
            s += p;
            n += 1;
        }
    }
    s / n as f64
}

/// Per-voxel mean probability drop over all occluder cubes of edge `scale`
/// that cover the voxel (unnormalized, may be negative).
pub fn occlusion_scale_map(
    volume: &FeatureMap,
    infer: Infer<'_>,
    target: &Mask,
    cfg: &OcclusionConfig,
    scale: usize,
    baseline: f64,
) -> Result<Vec<f64>> {
    let sp = volume.spatial();
    let class = cfg.target_class as usize;
    let pos: Vec<Vec<usize>> = sp.iter().map(|&e| window_positions(e, scale, cfg.stride)).collect();
    let mut cubes = Vec::new();
    for &z in &pos[0] {
        for &y in &pos[1] {
            for &x in &pos[2] {
                cubes.push([z, y, x]);
            }
        }
    }
    let drops = par::try_map_range(cubes.len(), |i| {
        let o = cubes[i];
        let mut occluded = volume.clone();
        for c in 0..volume.channels() {
            for z in o[0]..o[0] + scale {
                for y in o[1]..o[1] + scale {
                    let start = occluded.offset([0, c, z, y, o[2]]);
                    occluded.data_mut()[start..start + scale].fill(cfg.fill);
                }
            }
        }
        Ok::<_, Error>(baseline - mean_target(&infer(&occluded)?, target, class))
    })?;
    let n = sp[0] * sp[1] * sp[2];
    let mut sum = vec![0.0; n];
    let mut count = vec![0u32; n];
    for (o, d) in cubes.iter().zip(drops) {
        for z in o[0]..o[0] + scale {
            for y in o[1]..o[1] + scale {
                let row = (z * sp[1] + y) * sp[2];
                for x in o[2]..o[2] + scale {
                    sum[row + x] += d;
                    count[row + x] += 1;
                }
            }
        }
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect())
}

/// Multi-scale occlusion sensitivity: mean over scales of the per-voxel
/// mean drop, negatives clamped to 0, scaled so the maximum is 1.
pub fn occlusion_map(volume: &FeatureMap, infer: Infer<'_>, target: &Mask, cfg: &OcclusionConfig) -> Result<VoxelGrid<f64>> {
    let sp = volume.spatial();
    if target.dims().to_array() != sp {
        return Err(Error::shape("occlusion", format!("target {} vs volume {sp:?}", target.dims())));
    }
    if target.count_true() == 0 {
        return Err(Error::Invalid {
            key: "occlusion.target".into(),
            value: "empty region".into(),
            expected: "at least one target voxel".into(),
        });
    }
    if cfg.target_class > 3 {
        return Err(Error::Invalid {
            key: "occlusion.target_class".into(),
            value: cfg.target_class.to_string(),
            expected: "0..=3".into(),
        });
    }
    if cfg.stride == 0 {
        return Err(Error::Invalid {
            key: "occlusion.stride".into(),
            value: "0".into(),
            expected: "an integer >= 1".into(),
        });
    }
    if cfg.scales.is_empty() {
        return Err(Error::Invalid {
            key: "occlusion.scales".into(),
            value: "[]".into(),
            expected: "at least one scale".into(),
        });
    }
    for &s in &cfg.scales {
        if s == 0 || sp.iter().any(|&d| s > d) {
            return Err(Error::Invalid {
                key: "occlusion.scales".into(),
                value: s.to_string(),
                expected: format!("1..=min extent of {sp:?}"),
            });
        }
    }
    let baseline = mean_target(&infer(volume)?, target, cfg.target_class as usize);
    let n = sp[0] * sp[1] * sp[2];
    let mut acc = vec![0.0; n];
    for &s in &cfg.scales {
        let m = occlusion_scale_map(volume, infer, target, cfg, s, baseline)?;
        for (a, v) in acc.iter_mut().zip(m) {
            *a += v;
        }
    }
    let k = cfg.scales.len() as f64;
    acc.iter_mut().for_each(|v| *v = (*v / k).max(0.0));
    let max = acc.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        acc.iter_mut().for_each(|v| *v /= max);
    }
    VoxelGrid::new(target.dims(), target.spacing(), acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, Spacing};

    fn probs_from(f: impl Fn(usize) -> f64, sp: [usize; 3]) -> FeatureMap {
        let n = sp[0] * sp[1] * sp[2];
        let mut d = vec![0.0; 4 * n];
        for v in 0..n {
            let p = f(v);
            d[3 * n + v] = p;
            d[v] = 1.0 - p;
        }
        FeatureMap::from_vec([1, 4, sp[0], sp[1], sp[2]], d).unwrap()
    }

    fn volume(sp: [usize; 3]) -> FeatureMap {
        FeatureMap::from_fn([1, 4, sp[0], sp[1], sp[2]], |_| 1.0)
    }

    #[test]
    fn constant_predictor_gives_zero_map() {
        let sp = [8, 8, 8];
        let infer = |x: &FeatureMap| Ok(probs_from(|_| 0.7, x.spatial()));
        let target = Mask::filled(Dims::cube(8), Spacing::default(), true);
        let cfg = OcclusionConfig { scales: vec![4], stride: 2, ..Default::default() };
        let m = occlusion_map(&volume(sp), &infer, &target, &cfg).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_voxel_reader() {
        let sp = [8, 8, 8];
        let p = [5usize, 2, 6];
        let pi = (p[0] * 8 + p[1]) * 8 + p[2];
        // target probability equals the value at voxel p, everywhere
        let infer = move |x: &FeatureMap| {
            let v = x.channel(0, 0)[pi];
            Ok(probs_from(|_| v * 0.5, x.spatial()))
        };
        let target = Mask::filled(Dims::cube(8), Spacing::default(), true);
        let cfg = OcclusionConfig { scales: vec![2], stride: 2, ..Default::default() };
        let m = occlusion_map(&volume(sp), &infer, &target, &cfg).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let inside = z / 2 == p[0] / 2 && y / 2 == p[1] / 2 && x / 2 == p[2] / 2;
                    assert_eq!(m.get(z, y, x), if inside { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn matches_direct_recomputation() {
        let sp = [6, 6, 6];
        let vol = FeatureMap::from_fn([1, 4, 6, 6, 6], |i| ((i[2] * 7 + i[3] * 3 + i[4]) % 5) as f64 * 0.2);
        let infer = |x: &FeatureMap| {
            let n = x.spatial_len();
            let s: f64 = x.channel(0, 1).iter().sum::<f64>() / n as f64;
            Ok(probs_from(|v| (s + x.channel(0, 2)[v]).tanh().abs() * 0.9, x.spatial()))
        };
        let target = Mask::from_fn(Dims::cube(6), Spacing::default(), |z, _, x| z < 3 && x > 1);
        let cfg = OcclusionConfig { scales: vec![3], stride: 2, ..Default::default() };
        let base = mean_target(&infer(&vol).unwrap(), &target, 3);
        let fast = occlusion_scale_map(&vol, &infer, &target, &cfg, 3, base).unwrap();
        // naive: for every voxel, re-predict for every cube that covers it
        let pos = window_positions(6, 3, 2);
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let mut drops = vec![];
                    for &a in &pos {
                        for &b in &pos {
                            for &c in &pos {
                                if (a..a + 3).contains(&z) && (b..b + 3).contains(&y) && (c..c + 3).contains(&x) {
                                    let occ = FeatureMap::from_fn([1, 4, 6, 6, 6], |i| {
                                        if (a..a + 3).contains(&i[2]) && (b..b + 3).contains(&i[3]) && (c..c + 3).contains(&i[4]) {
                                            0.0
                                        } else {
                                            vol.get(i)
                                        }
                                    });
                                    drops.push(base - mean_target(&infer(&occ).unwrap(), &target, 3));
                                }
                            }
                        }
                    }
                    let want = drops.iter().sum::<f64>() / drops.len() as f64;
                    assert!((fast[(z * 6 + y) * 6 + x] - want).abs() < 1e-12);
                }
            }
        }
        let _ = sp;
    }

    #[test]
    fn rejects_bad_config() {
        let infer = |x: &FeatureMap| Ok(probs_from(|_| 0.5, x.spatial()));
        let t = Mask::filled(Dims::cube(4), Spacing::default(), true);
        let v = volume([4, 4, 4]);
        assert!(occlusion_map(&v, &infer, &t, &OcclusionConfig { scales: vec![8], ..Default::default() }).is_err());
        let empty = Mask::filled(Dims::cube(4), Spacing::default(), false);
        assert!(occlusion_map(&v, &infer, &empty, &OcclusionConfig { scales: vec![2], ..Default::default() }).is_err());
    }
}
