//! Three-zone infiltration-risk labels from a tumor segmentation.
//!
//! Zone 3 covers edema and every voxel within 10 mm of the whole tumor,
//! zone 2 the 10-20 mm shell, zone 1 brain tissue beyond 20 mm, and 0 the
//! tumor core plus non-brain voxels beyond 20 mm. Upper bounds are
//! inclusive.

mod edt;

pub use edt::{exact_edt, squared_edt, DistanceField};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Mask, MultiModalVolume, Spacing, VoxelGrid, Zone, ZoneGrid};

pub const HIGH_RISK_MM: f64 = 10.0;
pub const MEDIUM_RISK_MM: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Brats2020,
    Brats2025,
}

impl Dataset {
    pub fn vocabulary(self) -> LabelVocabulary {
        match self {
            Dataset::Brats2020 => LabelVocabulary {
                dataset: self,
                necrotic: 1,
                edema: 2,
                enhancing: 4,
            },
            Dataset::Brats2025 => LabelVocabulary {
                dataset: self,
                necrotic: 1,
                edema: 2,
                enhancing: 3,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Brats2020 => "brats2020",
            Dataset::Brats2025 => "brats2025",
        }
    }
}

impl std::str::FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "brats2020" => Ok(Dataset::Brats2020),
            "brats2025" => Ok(Dataset::Brats2025),
            _ => Err(Error::Invalid {
                key: "dataset".into(),
                value: s.into(),
                expected: "brats2020 | brats2025".into(),
            }),
        }
    }
}

/// Raw segmentation label values for one dataset release.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelVocabulary {
    pub dataset: Dataset,
    pub necrotic: u8,
    pub edema: u8,
    pub enhancing: u8,
}

/// Tumor core (necrotic ∪ enhancing), edema, and their union.
#[derive(Clone, Debug, PartialEq)]
pub struct TumorRegions {
    pub core: Mask,
    pub edema: Mask,
    pub whole: Mask,
}

impl TumorRegions {
    pub fn spacing(&self) -> Spacing {
        self.whole.spacing()
    }

    pub fn is_empty(&self) -> bool {
        !self.whole.data().iter().any(|&b| b)
    }
}

pub fn parse_brats_mask(mask: &ZoneGrid, vocab: LabelVocabulary) -> Result<TumorRegions> {
    let mut unknown = [0usize; 256];
    for &v in mask.data() {
        if v != 0 && v != vocab.necrotic && v != vocab.edema && v != vocab.enhancing {
            unknown[v as usize] += 1;
        }
    }
    if let Some((value, &count)) = unknown.iter().enumerate().find(|(_, &c)| c > 0) {
        return Err(Error::Vocabulary {
            vocabulary: vocab.dataset.name(),
            value: value as i64,
            count,
        });
    }
    let core = mask.map(|&v| v == vocab.necrotic || v == vocab.enhancing);
    let edema = mask.map(|&v| v == vocab.edema);
    let whole = mask.map(|&v| v != 0);
    Ok(TumorRegions { core, edema, whole })
}

/// Non-zero FLAIR support, with no morphological cleanup.
pub fn brain_mask_from_flair(volume: &MultiModalVolume) -> Mask {
    volume.flair().map(|&v| v != 0.0)
}

/// Apply the zone rule to a distance field measured from `regions.whole`.
pub fn assign_zones(regions: &TumorRegions, dist: &DistanceField, brain: &Mask) -> Result<ZoneGrid> {
    regions.whole.ensure_same_dims(dist, "assign_zones distance field")?;
    regions.whole.ensure_same_dims(brain, "assign_zones brain mask")?;
    regions.whole.ensure_same_dims(&regions.core, "assign_zones core")?;
    regions.whole.ensure_same_dims(&regions.edema, "assign_zones edema")?;

    let mut stray_edema = 0usize;
    let data = (0..dist.len())
        .map(|i| {
            let d = dist.data()[i];
            let in_brain = brain.data()[i];
            if regions.edema.data()[i] {
                if !in_brain {
                    stray_edema += 1;
                }
                Zone::HighRisk
            } else if d > 0.0 && d <= HIGH_RISK_MM {
                Zone::HighRisk
            } else if d > HIGH_RISK_MM && d <= MEDIUM_RISK_MM {
                Zone::MediumRisk
            } else if d > MEDIUM_RISK_MM && in_brain {
                Zone::LowRisk
            } else {
                Zone::Outside
            }
            .label()
        })
        .collect();
    if stray_edema > 0 {
        log::warn!("{stray_edema} edema voxels lie outside the FLAIR brain mask; labelled zone 3");
    }
    VoxelGrid::new(dist.dims(), dist.spacing(), data)
}

/// EDT + zone assignment. Fails with [`Error::NoTumor`] on an empty tumor.
pub fn generate_zones(regions: &TumorRegions, brain: &Mask) -> Result<ZoneGrid> {
    let dist = exact_edt(&regions.whole)?;
    assign_zones(regions, &dist, brain)
}

/// Parse, build the brain mask, and label in one call.
pub fn zones_from_segmentation(
    seg: &ZoneGrid,
    volume: &MultiModalVolume,
    dataset: Dataset,
) -> Result<ZoneGrid> {
    seg.ensure_same_dims(volume.flair(), "segmentation vs FLAIR")?;
    let regions = parse_brats_mask(seg, dataset.vocabulary())?;
    let brain = brain_mask_from_flair(volume);
    generate_zones(&regions, &brain)
}

/// Largest grid the brute-force oracle accepts.
pub const ORACLE_MAX_VOXELS: usize = 64 * 64 * 64;

/// Zone labels by scanning every tumor voxel for every grid voxel. Test
/// oracle for [`generate_zones`]; an empty tumor labels all brain voxels 1.
pub fn brute_force_zone_oracle(regions: &TumorRegions, brain: &Mask, spacing: Spacing) -> Result<ZoneGrid> {
    let dims = regions.whole.dims();
    if dims.len() > ORACLE_MAX_VOXELS {
        return Err(Error::Size(format!(
            "oracle limited to {ORACLE_MAX_VOXELS} voxels, grid {dims} has {}",
            dims.len()
        )));
    }
    regions.whole.ensure_same_dims(brain, "oracle brain mask")?;
    let tumor: Vec<[f64; 3]> = (0..dims.len())
        .filter(|&i| regions.whole.data()[i])
        .map(|i| dims.coords(i).map(|c| c as f64))
        .collect();
    let data = (0..dims.len())
        .map(|i| {
            let c = dims.coords(i).map(|c| c as f64);
            let mut best = f64::INFINITY;
            for t in &tumor {
                let dx = (c[2] - t[2]) * spacing.x;
                let dy = (c[1] - t[1]) * spacing.y;
                let dz = (c[0] - t[0]) * spacing.z;
                let sq = dx * dx + dy * dy + dz * dz;
                if sq < best {
                    best = sq;
                }
            }
            let d = best.sqrt();
            let label = if regions.edema.data()[i] || (d > 0.0 && d <= 10.0) {
                3
            } else if d > 10.0 && d <= 20.0 {
                2
            } else if d > 20.0 && brain.data()[i] {
                1
            } else {
                0
            };
            label
        })
        .collect();
    VoxelGrid::new(dims, spacing, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoneSummary {
    pub voxel_counts: [usize; 4],
    pub volumes_ml: [f64; 4],
}

pub fn zone_summary(zones: &ZoneGrid) -> ZoneSummary {
    let mut voxel_counts = [0usize; 4];
    for &z in zones.data() {
        if let Some(c) = voxel_counts.get_mut(z as usize) {
            *c += 1;
        }
    }
    let ml = zones.spacing().voxel_volume() / 1000.0;
    ZoneSummary {
        voxel_counts,
        volumes_ml: voxel_counts.map(|c| c as f64 * ml),
    }
}
