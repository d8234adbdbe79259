//! Synthetic patients with analytic tumor geometry.
//!
//! A phantom is three nested axis-aligned ellipsoids (brain, edema, core)
//! sampled on the voxel grid. Voxel `(z, y, x)` sits at `(z·sz, y·sy, x·sx)`
//! mm. The core splits into a necrotic center (normalized radius ≤ 0.6) and
//! an enhancing shell.
//!
//! Noise is reproducible everywhere: a ChaCha8 stream seeded with
//! `ChaCha8Rng::seed_from_u64(seed)`, one stream per modality in canonical
//! order (stream id = modality index), a uniform value `u = (next_u64 >> 11)
//! · 2⁻⁵³` and an Irwin-Hall normal approximation `Σ₁₂ u − 6` per voxel in
//! memory order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Mask, MultiModalVolume, Spacing, VoxelGrid, ZoneGrid};
use crate::labelgen::{Dataset, HIGH_RISK_MM, MEDIUM_RISK_MM};
use crate::netref::FeatureMap;
use crate::par;
use crate::pipeline::{Predictor, Region};

/// Normalized core radius below which core voxels are necrotic.
pub const NECROTIC_FRACTION: f64 = 0.6;
/// Smallest intensity written inside the brain, keeping the FLAIR support
/// equal to the brain ellipsoid under any noise.
pub const MIN_BRAIN_INTENSITY: f32 = 0.05;

/// Mean intensity of each tissue class for one modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueIntensity {
    pub brain: f32,
    pub edema: f32,
    pub enhancing: f32,
    pub necrotic: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// (depth, height, width) in voxels.
    pub dims: [usize; 3],
    /// (z, y, x) in mm.
    pub spacing: [f64; 3],
    pub brain_center_mm: [f64; 3],
    pub brain_semi_axes_mm: [f64; 3],
    pub tumor_center_mm: [f64; 3],
    pub core_semi_axes_mm: [f64; 3],
    pub edema_semi_axes_mm: [f64; 3],
    /// In canonical modality order (t1, t1ce, t2, flair).
    pub intensities: [TissueIntensity; 4],
    pub noise_sigma: f64,
    pub seed: u64,
    pub dataset: Dataset,
}

pub const DEFAULT_INTENSITIES: [TissueIntensity; 4] = [
    TissueIntensity { brain: 1.0, edema: 0.85, enhancing: 1.1, necrotic: 0.6 },
    TissueIntensity { brain: 1.0, edema: 0.9, enhancing: 2.2, necrotic: 0.5 },
    TissueIntensity { brain: 1.0, edema: 1.7, enhancing: 1.4, necrotic: 2.0 },
    TissueIntensity { brain: 1.0, edema: 1.9, enhancing: 1.5, necrotic: 1.2 },
];

impl PhantomSpec {
    /// Centered brain filling 90% of the field of view with a tumor at
    /// `tumor_center_mm`.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3], tumor_center_mm: [f64; 3], core: [f64; 3], edema: [f64; 3], seed: u64) -> Self {
        let ext: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1) as f64 * spacing[a]);
        PhantomSpec {
            dims,
            spacing,
            brain_center_mm: ext.map(|e| e / 2.0),
            brain_semi_axes_mm: ext.map(|e| e * 0.45),
            tumor_center_mm,
            core_semi_axes_mm: core,
            edema_semi_axes_mm: edema,
            intensities: DEFAULT_INTENSITIES,
            noise_sigma: 0.05,
            seed,
            dataset: Dataset::Brats2020,
        }
    }

    /// Spherical tumor of core radius `r` mm and edema radius `r_edema` mm
    /// at the center of the field of view.
    pub fn spherical(dims: [usize; 3], spacing: [f64; 3], r: f64, r_edema: f64, seed: u64) -> Self {
        let c: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1) as f64 * spacing[a] / 2.0);
        Self::centered(dims, spacing, c, [r; 3], [r_edema; 3], seed)
    }

    /// A varied spec for seed `seed`: extent, spacing and tumor placement
    /// all drawn from the seed. Extents stay within `max_extent`.
    pub fn random(seed: u64, max_extent: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7068_616e_746f_6d21);
        let mut uniform = || unit(&mut rng);
        let spacings = [[1.0, 1.0, 1.0], [2.0, 1.0, 1.0], [1.5, 1.0, 0.75], [1.0, 1.25, 1.25]];
        let spacing = spacings[(uniform() * 4.0) as usize % 4];
        let lo = (max_extent * 2 / 3).max(16);
        let dims: [usize; 3] = std::array::from_fn(|_| lo + ((uniform() * (max_extent - lo + 1) as f64) as usize).min(max_extent - lo));
        let ext: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1) as f64 * spacing[a]);
        let brain_semi: [f64; 3] = ext.map(|e| e * 0.45);
        let min_semi = brain_semi.iter().copied().fold(f64::INFINITY, f64::min);
        let floor = spacing.iter().copied().fold(0.0, f64::max);
        let edema: [f64; 3] = std::array::from_fn(|_| (min_semi * (0.25 + 0.15 * uniform())).max(floor));
        let core: [f64; 3] = std::array::from_fn(|a| (edema[a] * (0.4 + 0.4 * uniform())).max(floor));
        let center: [f64; 3] = std::array::from_fn(|a| {
            let room = (brain_semi[a] - edema[a]).max(0.0) * 0.4;
            ext[a] / 2.0 + (2.0 * uniform() - 1.0) * room
        });
        let mut spec = Self::centered(dims, spacing, center, core, edema, seed);
        spec.dataset = if seed % 2 == 0 { Dataset::Brats2020 } else { Dataset::Brats2025 };
        spec
    }

    pub fn dims(&self) -> Dims {
        Dims::from_array(self.dims)
    }

    pub fn grid_spacing(&self) -> Spacing {
        Spacing::from_array(self.spacing)
    }

    fn invalid(key: &str, value: impl std::fmt::Debug, expected: &str) -> Error {
        Error::Invalid {
            key: format!("phantom.{key}"),
            value: format!("{value:?}"),
            expected: expected.into(),
        }
    }

    /// Check the geometric invariants: positive sizes, core inside edema,
    /// brain inside the field of view, edema inside the brain.
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Self::invalid("dims", self.dims, "all extents >= 1"));
        }
        if !self.grid_spacing().is_valid() {
            return Err(Self::invalid("spacing", self.spacing, "finite and > 0"));
        }
        let positive = |v: &[f64; 3]| v.iter().all(|x| x.is_finite() && *x > 0.0);
        for (key, v) in [
            ("brain_semi_axes_mm", &self.brain_semi_axes_mm),
            ("core_semi_axes_mm", &self.core_semi_axes_mm),
            ("edema_semi_axes_mm", &self.edema_semi_axes_mm),
        ] {
            if !positive(v) {
                return Err(Self::invalid(key, v, "finite and > 0"));
            }
        }
        if (0..3).any(|a| self.core_semi_axes_mm[a] > self.edema_semi_axes_mm[a]) {
            return Err(Self::invalid(
                "core_semi_axes_mm",
                self.core_semi_axes_mm,
                "each axis <= the edema semi-axis (core inside edema)",
            ));
        }
        for a in 0..3 {
            let ext = (self.dims[a] - 1) as f64 * self.spacing[a];
            let (c, r) = (self.brain_center_mm[a], self.brain_semi_axes_mm[a]);
            if c - r < 0.0 || c + r > ext {
                return Err(Self::invalid(
                    "brain_semi_axes_mm",
                    self.brain_semi_axes_mm,
                    &format!("brain ellipsoid inside the field of view [0, {ext}] mm on every axis"),
                ));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Self::invalid("noise_sigma", self.noise_sigma, "finite and >= 0"));
        }
        let geo = Geometry::new(self);
        let mut core = 0usize;
        for i in 0..self.dims().len() {
            let p = geo.point(i);
            if geo.in_edema_ellipsoid(p) && !geo.in_brain(p) {
                return Err(Self::invalid(
                    "edema_semi_axes_mm",
                    self.edema_semi_axes_mm,
                    "edema ellipsoid inside the brain ellipsoid",
                ));
            }
            core += geo.in_core(p) as usize;
        }
        if core == 0 {
            return Err(Self::invalid("core_semi_axes_mm", self.core_semi_axes_mm, "a core covering at least one voxel"));
        }
        Ok(())
    }
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tissue {
    Background,
    Brain,
    Edema,
    Enhancing,
    Necrotic,
}

struct Geometry {
    dims: Dims,
    spacing: [f64; 3],
    brain_c: [f64; 3],
    brain_r: [f64; 3],
    tumor_c: [f64; 3],
    core_r: [f64; 3],
    edema_r: [f64; 3],
}

fn radius_sq(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum()
}

impl Geometry {
    fn new(s: &PhantomSpec) -> Self {
        Geometry {
            dims: s.dims(),
            spacing: s.spacing,
            brain_c: s.brain_center_mm,
            brain_r: s.brain_semi_axes_mm,
            tumor_c: s.tumor_center_mm,
            core_r: s.core_semi_axes_mm,
            edema_r: s.edema_semi_axes_mm,
        }
    }

    fn point(&self, i: usize) -> [f64; 3] {
        let c = self.dims.coords(i);
        std::array::from_fn(|a| c[a] as f64 * self.spacing[a])
    }

    fn in_brain(&self, p: [f64; 3]) -> bool {
        radius_sq(p, self.brain_c, self.brain_r) <= 1.0
    }

    fn in_edema_ellipsoid(&self, p: [f64; 3]) -> bool {
        radius_sq(p, self.tumor_c, self.edema_r) <= 1.0
    }

    fn in_core(&self, p: [f64; 3]) -> bool {
        radius_sq(p, self.tumor_c, self.core_r) <= 1.0
    }

    fn tissue(&self, i: usize) -> Tissue {
        let p = self.point(i);
        let rc = radius_sq(p, self.tumor_c, self.core_r);
        if rc <= NECROTIC_FRACTION * NECROTIC_FRACTION {
            Tissue::Necrotic
        } else if rc <= 1.0 {
            Tissue::Enhancing
        } else if self.in_edema_ellipsoid(p) {
            Tissue::Edema
        } else if self.in_brain(p) {
            Tissue::Brain
        } else {
            Tissue::Background
        }
    }
}

/// A generated patient.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub volume: MultiModalVolume,
    /// Segmentation in the phantom's dataset vocabulary.
    pub seg: ZoneGrid,
    /// The brain ellipsoid support.
    pub brain: Mask,
    /// Zones from a direct scan of the tumor geometry.
    pub zones: ZoneGrid,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let geo = Geometry::new(spec);
    let dims = spec.dims();
    let spacing = spec.grid_spacing();
    let tissue: Vec<Tissue> = par::map_range(dims.len(), |i| geo.tissue(i));
    let vocab = spec.dataset.vocabulary();
    let seg = VoxelGrid::new(
        dims,
        spacing,
        tissue
            .iter()
            .map(|t| match t {
                Tissue::Necrotic => vocab.necrotic,
                Tissue::Enhancing => vocab.enhancing,
                Tissue::Edema => vocab.edema,
                _ => 0,
            })
            .collect(),
    )?;
    let brain = VoxelGrid::new(dims, spacing, tissue.iter().map(|&t| t != Tissue::Background).collect())?;
    let modalities: Vec<VoxelGrid<f32>> = par::map_range(4, |m| {
        let profile = spec.intensities[m];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(m as u64);
        let data = tissue
            .iter()
            .map(|&t| {
                let noise = if spec.noise_sigma > 0.0 {
                    let s: f64 = (0..12).map(|_| unit(&mut rng)).sum();
                    (s - 6.0) * spec.noise_sigma
                } else {
                    0.0
                };
                let base = match t {
                    Tissue::Background => return 0.0,
                    Tissue::Brain => profile.brain,
                    Tissue::Edema => profile.edema,
                    Tissue::Enhancing => profile.enhancing,
                    Tissue::Necrotic => profile.necrotic,
                };
                ((base as f64 + noise) as f32).max(MIN_BRAIN_INTENSITY)
            })
            .collect();
        VoxelGrid::new(dims, spacing, data).expect("length matches dims")
    });
    let volume = MultiModalVolume::new(modalities.try_into().expect("four modalities"))?;
    let zones = analytic_zones(&geo, &tissue, &brain);
    Ok(Phantom {
        spec: spec.clone(),
        volume,
        seg,
        brain,
        zones,
    })
}

/// Zones by scanning every tumor surface voxel for every grid voxel.
/// The nearest tumor voxel to an outside point always has a 6-neighbor
/// outside the tumor, so interior tumor voxels can be skipped.
fn analytic_zones(geo: &Geometry, tissue: &[Tissue], brain: &Mask) -> ZoneGrid {
    let dims = geo.dims;
    let is_tumor = |t: Tissue| matches!(t, Tissue::Edema | Tissue::Enhancing | Tissue::Necrotic);
    let surface: Vec<[f64; 3]> = (0..dims.len())
        .filter(|&i| is_tumor(tissue[i]))
        .filter(|&i| {
            let c = dims.coords(i);
            (0..3).any(|a| {
                [false, true].iter().any(|&f| match dims.step(c, a, f) {
                    Some(n) => !is_tumor(tissue[dims.index(n[0], n[1], n[2])]),
                    None => false,
                })
            })
        })
        .map(|i| geo.point(i))
        .collect();
    let data = par::map_range(dims.len(), |i| {
        let t = tissue[i];
        if t == Tissue::Edema {
            return 3;
        }
        if is_tumor(t) {
            return 0;
        }
        let p = geo.point(i);
        let best = surface
            .iter()
            .map(|s| (p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2) + (p[2] - s[2]).powi(2))
            .fold(f64::INFINITY, f64::min);
        let d = best.sqrt();
        if d <= HIGH_RISK_MM {
            3
        } else if d <= MEDIUM_RISK_MM {
            2
        } else if brain.data()[i] {
            1
        } else {
            0
        }
    });
    VoxelGrid::new(dims, Spacing::from_array(geo.spacing), data).expect("length matches dims")
}

/// Smoothing mass given to each non-truth class.
pub const ORACLE_EPSILON: f64 = 1e-6;

/// Predicts the ground truth, ε-smoothed, for whatever window it is asked
/// about. Padding voxels are predicted as zone 0.
#[derive(Clone, Debug)]
pub struct OraclePredictor {
    truth: ZoneGrid,
}

impl OraclePredictor {
    pub fn new(truth: ZoneGrid) -> Self {
        OraclePredictor { truth }
    }
}

impl Predictor for OraclePredictor {
    fn predict(&self, patch: &FeatureMap, region: &Region) -> Result<FeatureMap> {
        let dims = self.truth.dims();
        if region.volume != dims.to_array() {
            return Err(Error::OutOfBounds {
                detail: format!("oracle holds {dims}, request is for a {:?} volume", region.volume),
            });
        }
        let sp = patch.spatial();
        if sp != region.size {
            return Err(Error::shape("oracle", format!("patch {sp:?} vs region size {:?}", region.size)));
        }
        let n = sp[0] * sp[1] * sp[2];
        let local = Dims::from_array(sp);
        let mut out = vec![ORACLE_EPSILON; 4 * n];
        for v in 0..n {
            let label = match region.source_coord(local.coords(v)) {
                Some(c) => *self.truth.at(c),
                None => 0,
            };
            out[label as usize * n + v] = 1.0 - 3.0 * ORACLE_EPSILON;
        }
        FeatureMap::from_vec([1, 4, sp[0], sp[1], sp[2]], out)
    }
}
