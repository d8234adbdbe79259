use serde::{Deserialize, Serialize};

use super::components::label_components;
use crate::error::{Error, Result};
use crate::grid::ZoneGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostProcConfig {
    /// Components with fewer voxels are relabelled.
    pub min_component_voxels: usize,
    pub fill_holes: bool,
    /// Largest hole that is filled. `None` uses `min_component_voxels`.
    #[serde(default)]
    pub max_hole_voxels: Option<usize>,
    pub connectivity: u8,
}

impl Default for PostProcConfig {
    fn default() -> Self {
        PostProcConfig {
            min_component_voxels: 500,
            fill_holes: true,
            max_hole_voxels: None,
            connectivity: 6,
        }
    }
}

impl PostProcConfig {
    pub fn max_hole(&self) -> usize {
        self.max_hole_voxels.unwrap_or(self.min_component_voxels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.connectivity != 6 {
            return Err(Error::Invalid {
                key: "postprocess.connectivity".into(),
                value: self.connectivity.to_string(),
                expected: "6".into(),
            });
        }
        Ok(())
    }
}

const ZONE_ORDER: [u8; 3] = [3, 2, 1];
const MAX_PASSES: usize = 64;

/// Relabel small components of `zone` to the majority label on their outer
/// 6-neighborhood (ties to the lower label). Returns whether anything changed.
fn remove_small(grid: &mut ZoneGrid, zone: u8, min: usize) -> bool {
    let dims = grid.dims();
    let inside: Vec<bool> = grid.data().iter().map(|&v| v == zone).collect();
    let comps = label_components(dims, &inside);
    let small: Vec<bool> = comps.sizes.iter().map(|&s| s < min).collect();
    if !small.iter().any(|&s| s) {
        return false;
    }
    let mut votes = vec![[0usize; 256]; comps.sizes.len()];
    let data = grid.data();
    for i in 0..dims.len() {
        let id = comps.labels[i];
        if id == u32::MAX || !small[id as usize] {
            continue;
        }
        let c = dims.coords(i);
        for axis in 0..3 {
            for fwd in [false, true] {
                if let Some(n) = dims.step(c, axis, fwd) {
                    let j = dims.index(n[0], n[1], n[2]);
                    if comps.labels[j] != id {
                        votes[id as usize][data[j] as usize] += 1;
                    }
                }
            }
        }
    }
    let target: Vec<Option<u8>> = votes
        .iter()
        .map(|v| {
            let best = v.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
            (*best.1 > 0).then_some(best.0 as u8)
        })
        .collect();
    let mut changed = false;
    for (i, v) in grid.data_mut().iter_mut().enumerate() {
        let id = comps.labels[i];
        if id != u32::MAX && small[id as usize] {
            if let Some(t) = target[id as usize] {
                *v = t;
                changed = true;
            }
        }
    }
    changed
}

/// Fill complement components of `zone` that do not touch the border, have
/// at most `max_hole` voxels and hold only lower labels, skipping voxels in
/// `locked`.
fn fill_holes(grid: &mut ZoneGrid, zone: u8, max_hole: usize, locked: &mut [bool]) -> bool {
    let dims = grid.dims();
    let outside: Vec<bool> = grid.data().iter().map(|&v| v != zone).collect();
    let comps = label_components(dims, &outside);
    let mut top = vec![0u8; comps.sizes.len()];
    for (i, &v) in grid.data().iter().enumerate() {
        let id = comps.labels[i];
        if id != u32::MAX {
            top[id as usize] = top[id as usize].max(v);
        }
    }
    let fill: Vec<bool> = comps
        .sizes
        .iter()
        .zip(&comps.touches_border)
        .zip(&top)
        .map(|((&s, &b), &t)| !b && s <= max_hole && t < zone)
        .collect();
    let mut changed = false;
    for (i, v) in grid.data_mut().iter_mut().enumerate() {
        let id = comps.labels[i];
        if id != u32::MAX && fill[id as usize] && !locked[i] {
            *v = zone;
            locked[i] = true;
            changed = true;
        }
    }
    changed
}

fn one_pass(grid: &mut ZoneGrid, cfg: &PostProcConfig) -> bool {
    let mut changed = false;
    let mut locked = vec![false; grid.len()];
    for zone in ZONE_ORDER {
        changed |= remove_small(grid, zone, cfg.min_component_voxels);
        if cfg.fill_holes {
            changed |= fill_holes(grid, zone, cfg.max_hole(), &mut locked);
        }
    }
    changed
}

/// Remove small components and fill holes per zone (3, then 2, then 1),
/// repeated until nothing changes so the result is idempotent.
pub fn postprocess(zones: &ZoneGrid, cfg: &PostProcConfig) -> ZoneGrid {
    let mut grid = zones.clone();
    for _ in 0..MAX_PASSES {
        if !one_pass(&mut grid, cfg) {
            break;
        }
    }
    grid
}
