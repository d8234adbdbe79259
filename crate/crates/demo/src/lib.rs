//! Browser bindings over a spherical phantom. Every operation returns an
//! RGBA slice ready for `ImageData`.

use infilmap_core::grid::{Mask, ZoneGrid};
use infilmap_core::labelgen::{exact_edt, zones_from_segmentation, HIGH_RISK_MM, MEDIUM_RISK_MM};
use infilmap_core::netref::splitmix64;
use infilmap_core::phantom::{generate_phantom, PhantomSpec};
use infilmap_core::pipeline::{postprocess, PostProcConfig};
use wasm_bindgen::prelude::*;

const ZONE_RGBA: [[u8; 4]; 4] = [[16, 16, 24, 255], [60, 140, 220, 255], [245, 190, 40, 255], [220, 50, 50, 255]];

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    size: usize,
    tumor: Mask,
    zones: ZoneGrid,
    distance: Vec<f64>,
}

#[wasm_bindgen]
impl Demo {
    /// Phantom of `size`³ voxels at 2 mm with the given core and edema radii.
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, core_mm: f64, edema_mm: f64, seed: u64) -> Result<Demo, JsError> {
        let spec = PhantomSpec::spherical([size; 3], [2.0; 3], core_mm, edema_mm, seed);
        let p = generate_phantom(&spec).map_err(err)?;
        let zones = zones_from_segmentation(&p.seg, &p.volume, spec.dataset).map_err(err)?;
        let tumor = p.seg.map(|&v| v != 0);
        let distance = exact_edt(&tumor).map_err(err)?.into_data();
        Ok(Demo {
            size,
            tumor,
            zones,
            distance,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Voxels per zone, 0 through 3.
    pub fn zone_counts(&self) -> Vec<u32> {
        (0..4).map(|z| self.zones.count(z) as u32).collect()
    }

    /// Axial zone slice.
    pub fn zone_slice(&self, z: usize) -> Vec<u8> {
        paint(&self.zones, z)
    }

    /// Axial distance-to-tumor heatmap, saturating at the medium-risk
    /// bound; the 10 mm and 20 mm isolines are drawn white.
    pub fn distance_slice(&self, z: usize) -> Vec<u8> {
        let n = self.size;
        let z = z.min(n - 1);
        let mut out = Vec::with_capacity(n * n * 4);
        for y in 0..n {
            for x in 0..n {
                let i = (z * n + y) * n + x;
                let d = self.distance[i];
                let near_line = [HIGH_RISK_MM, MEDIUM_RISK_MM].iter().any(|t| (d - t).abs() < 1.0);
                if self.tumor.data()[i] {
                    out.extend([255, 255, 255, 255]);
                } else if near_line {
                    out.extend([235, 235, 235, 255]);
                } else {
                    let t = (d / (MEDIUM_RISK_MM * 1.5)).min(1.0);
                    out.extend([(255.0 * (1.0 - t)) as u8, (90.0 * (1.0 - t)) as u8, (255.0 * t) as u8, 255]);
                }
            }
        }
        out
    }

    /// Flip a `noise` fraction of voxels to random zones, then clean up with
    /// `min_component`. Returns the noisy slice followed by the cleaned one.
    pub fn postprocess_slices(&self, z: usize, noise: f64, min_component: usize, seed: u64) -> Result<Vec<u8>, JsError> {
        let noisy = corrupt(&self.zones, noise, seed);
        let cfg = PostProcConfig {
            min_component_voxels: min_component,
            ..Default::default()
        };
        cfg.validate().map_err(err)?;
        let clean = postprocess(&noisy, &cfg);
        let mut out = paint(&noisy, z);
        out.extend(paint(&clean, z));
        Ok(out)
    }
}

fn paint(zones: &ZoneGrid, z: usize) -> Vec<u8> {
    let d = zones.dims();
    let z = z.min(d.depth - 1);
    let plane = &zones.data()[z * d.height * d.width..(z + 1) * d.height * d.width];
    plane.iter().flat_map(|&v| ZONE_RGBA[v.min(3) as usize]).collect()
}

/// Deterministic salt noise.
pub fn corrupt(zones: &ZoneGrid, fraction: f64, seed: u64) -> ZoneGrid {
    let mut out = zones.clone();
    let mut state = seed;
    for v in out.data_mut() {
        state = splitmix64(state);
        if (state >> 11) as f64 / (1u64 << 53) as f64 >= fraction {
            continue;
        }
        state = splitmix64(state);
        *v = (state % 4) as u8;
    }
    out
}
