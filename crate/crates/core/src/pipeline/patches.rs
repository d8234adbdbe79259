use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, FlipSet, MultiModalVolume, Plane, ZoneGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Centered on zone 2 or 3.
    Positive,
    /// Centered on zone 0 or 1.
    Negative,
}

/// Training patch sampling settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    /// Cubic patch edge in voxels.
    pub size: usize,
    pub per_volume: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { size: 96, per_volume: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// Origin in the zero-padded volume.
    pub origin: [usize; 3],
    pub size: [usize; 3],
    pub polarity: Polarity,
    /// Whether the center came from the requested polarity class.
    pub center_in_class: bool,
    pub center: [usize; 3],
    pub image: MultiModalVolume,
    pub labels: ZoneGrid,
}

/// Draw `count` patches of edge `size`, alternating positive and negative
/// (positive first). Volumes smaller than the patch are zero-padded at the
/// high end first. A polarity with no candidate voxels falls back to any
/// voxel of the unpadded volume.
pub fn sample_patches(volume: &MultiModalVolume, labels: &ZoneGrid, count: usize, size: usize, seed: u64) -> Result<Vec<PatchSample>> {
    let dims = volume.dims();
    if labels.dims() != dims {
        return Err(Error::Size(format!("labels {} vs volume {dims}", labels.dims())));
    }
    if size == 0 {
        return Err(Error::Invalid {
            key: "patch_size".into(),
            value: "0".into(),
            expected: "an integer >= 1".into(),
        });
    }
    let target = Dims::new(dims.depth.max(size), dims.height.max(size), dims.width.max(size));
    let padded = volume.map(|g| g.pad_to(target, 0.0));
    let padded_labels = labels.pad_to(target, 0);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, &l) in labels.data().iter().enumerate() {
        if l >= 2 {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let polarity = if k % 2 == 0 { Polarity::Positive } else { Polarity::Negative };
        let pool = if polarity == Polarity::Positive { &pos } else { &neg };
        let (idx, in_class) = if pool.is_empty() {
            (rng.gen_range(0..dims.len()), false)
        } else {
            (pool[rng.gen_range(0..pool.len())], true)
        };
        let center = dims.coords(idx);
        let ext = target.to_array();
        let origin: [usize; 3] = std::array::from_fn(|a| center[a].saturating_sub(size / 2).min(ext[a] - size));
        let sz = [size; 3];
        let image = padded.map(|g| g.crop(origin, Dims::from_array(sz)).expect("inside padded volume"));
        out.push(PatchSample {
            origin,
            size: sz,
            polarity,
            center_in_class: in_class,
            center,
            image,
            labels: padded_labels.crop(origin, Dims::from_array(sz)).expect("inside padded volume"),
        });
    }
    Ok(out)
}

/// A recorded flip + quarter-turn rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentation {
    pub flips: FlipSet,
    pub plane: Plane,
    pub turns: u8,
}

const PLANES: [Plane; 3] = [Plane::DepthHeight, Plane::DepthWidth, Plane::HeightWidth];

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flips: FlipSet::NONE,
        plane: Plane::HeightWidth,
        turns: 0,
    };

    /// 50% flip per axis, then one of 12 (plane, turns) pairs uniformly.
    pub fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bits = 0u8;
        for a in 0..3 {
            if rng.gen_bool(0.5) {
                bits |= 1 << a;
            }
        }
        let r = rng.gen_range(0..12usize);
        Augmentation {
            flips: FlipSet::from_bits(bits),
            plane: PLANES[r / 4],
            turns: (r % 4) as u8,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flips.is_empty() && self.turns == 0
    }

    pub fn apply<T: Copy>(&self, g: &crate::grid::VoxelGrid<T>) -> crate::grid::VoxelGrid<T> {
        g.flip_axes(self.flips).rot90(self.plane, self.turns as i32)
    }

    pub fn invert<T: Copy>(&self, g: &crate::grid::VoxelGrid<T>) -> crate::grid::VoxelGrid<T> {
        g.rot90(self.plane, -(self.turns as i32)).flip_axes(self.flips)
    }
}

/// Apply the augmentation drawn from `seed` to image and labels alike.
pub fn augment_patch(patch: &PatchSample, seed: u64) -> (PatchSample, Augmentation) {
    let aug = Augmentation::draw(seed);
    (apply_augmentation(patch, &aug), aug)
}

pub fn apply_augmentation(patch: &PatchSample, aug: &Augmentation) -> PatchSample {
    let image = patch.image.map(|g| aug.apply(g));
    let labels = aug.apply(&patch.labels);
    PatchSample {
        size: labels.dims().to_array(),
        image,
        labels,
        ..patch.clone()
    }
}

pub fn invert_augmentation(patch: &PatchSample, aug: &Augmentation) -> PatchSample {
    let image = patch.image.map(|g| aug.invert(g));
    let labels = aug.invert(&patch.labels);
    PatchSample {
        size: labels.dims().to_array(),
        image,
        labels,
        ..patch.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Spacing, VoxelGrid};
    use proptest::prelude::*;

    fn fixture(n: usize) -> (MultiModalVolume, ZoneGrid) {
        let d = Dims::cube(n);
        let labels = ZoneGrid::from_fn(d, Spacing::default(), |z, y, x| {
            let r2 = [z, y, x].iter().map(|&c| (c as i64 - n as i64 / 2).pow(2)).sum::<i64>();
            match r2 {
                0..=9 => 3,
                10..=36 => 2,
                _ => 1,
            }
        });
        let m = |k: f32| VoxelGrid::from_fn(d, Spacing::default(), move |z, y, x| k + (z * 100 + y * 10 + x) as f32);
        (MultiModalVolume::new([m(1.0), m(2.0), m(3.0), m(4.0)]).unwrap(), labels)
    }

    #[test]
    fn balanced_and_padded() {
        let (v, l) = fixture(16);
        let p = sample_patches(&v, &l, 2, 24, 5).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].polarity, p[1].polarity), (Polarity::Positive, Polarity::Negative));
        assert!(p.iter().all(|s| s.origin == [0, 0, 0] && s.image.dims() == Dims::cube(24)));
        assert_eq!(p[0].image.modality(0).get(20, 20, 20), 0.0);
        assert_eq!(sample_patches(&v, &l, 2, 24, 5).unwrap(), p);
    }

    #[test]
    fn positive_centers_are_near_tumor() {
        let (v, l) = fixture(20);
        for seed in 0..200 {
            for s in sample_patches(&v, &l, 2, 8, seed).unwrap() {
                let c = s.center;
                let lab = l.get(c[0], c[1], c[2]);
                match s.polarity {
                    Polarity::Positive => assert!(lab >= 2),
                    Polarity::Negative => assert!(lab <= 1),
                }
                let o = s.origin;
                assert!((0..3).all(|a| o[a] + 8 <= 20));
            }
        }
    }

    #[test]
    fn empty_class_falls_back() {
        let (v, _) = fixture(8);
        let l = ZoneGrid::filled(Dims::cube(8), Spacing::default(), 1);
        let p = sample_patches(&v, &l, 4, 4, 1).unwrap();
        assert!(!p[0].center_in_class && p[1].center_in_class);
    }

    #[test]
    fn identity_draw_leaves_patch_unchanged() {
        let (v, l) = fixture(8);
        let p = sample_patches(&v, &l, 1, 8, 0).unwrap().remove(0);
        let seed = (0..10_000u64).find(|&s| Augmentation::draw(s).is_identity()).expect("identity is drawable");
        let (out, aug) = augment_patch(&p, seed);
        assert!(aug.is_identity());
        assert_eq!(out, p);
    }

    proptest! {
        #[test]
        fn augmentation_is_invertible_bijection(seed in any::<u64>()) {
            let (v, l) = fixture(8);
            let v = v.map(|g| g.crop([0, 0, 0], Dims::new(8, 6, 5)).unwrap());
            let l = l.crop([0, 0, 0], Dims::new(8, 6, 5)).unwrap();
            let p = PatchSample {
                origin: [0; 3],
                size: [8, 6, 5],
                polarity: Polarity::Positive,
                center_in_class: true,
                center: [0; 3],
                image: v,
                labels: l,
            };
            let (a, aug) = augment_patch(&p, seed);
            let sorted = |g: &VoxelGrid<f32>| { let mut d = g.data().to_vec(); d.sort_by(f32::total_cmp); d };
            for m in 0..4 {
                prop_assert_eq!(sorted(a.image.modality(m)), sorted(p.image.modality(m)));
            }
            for z in 0..4u8 {
                prop_assert_eq!(a.labels.count(z), p.labels.count(z));
            }
            prop_assert_eq!(invert_augmentation(&a, &aug), p);
        }
    }
}
