//! Exact Euclidean distance transform on anisotropic voxel grids.
//!
//! Squared distances are computed with three separable 1-D passes of the
//! lower-envelope-of-parabolas algorithm (Felzenszwalb & Huttenlocher),
//! width first, then height, then depth. Each pass works line by line, so
//! the result does not depend on how lines are scheduled across threads.

use crate::error::{Error, Result};
use crate::grid::{Mask, VoxelGrid};
use crate::par;

/// Distances in millimetres to the nearest voxel of a reference set.
pub type DistanceField = VoxelGrid<f64>;

/// Scratch buffers for one 1-D pass.
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    /// `out[q] = min_p (w (q - p))^2 + f[p]` over finite `f[p]`.
    fn transform(&mut self, f: &[f64], out: &mut [f64], w: f64) {
        let n = f.len();
        let w2 = w * w;
        self.sites.clear();
        self.bounds.clear();
        for q in 0..n {
            let fq = f[q];
            if !fq.is_finite() {
                continue;
            }
            if self.sites.is_empty() {
                self.sites.push(q);
                self.bounds.push(f64::NEG_INFINITY);
                continue;
            }
            let anchor_q = fq + w2 * (q * q) as f64;
            let mut s;
            loop {
                let p = *self.sites.last().unwrap();
                let anchor_p = f[p] + w2 * (p * p) as f64;
                s = (anchor_q - anchor_p) / (2.0 * w2 * (q - p) as f64);
                if s <= *self.bounds.last().unwrap() {
                    self.sites.pop();
                    self.bounds.pop();
                    if self.sites.is_empty() {
                        break;
                    }
                } else {
                    break;
                }
            }
            if self.sites.is_empty() {
                self.sites.push(q);
                self.bounds.push(f64::NEG_INFINITY);
            } else {
                self.sites.push(q);
                self.bounds.push(s);
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while k + 1 < self.sites.len() && self.bounds[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.sites[k];
            let d = w * (q as f64 - p as f64);
            *o = d * d + f[p];
        }
    }
}

/// Squared distance in mm² from every voxel to the nearest `true` voxel.
/// Voxels are `+inf` when the reference set is empty.
pub fn squared_edt(reference: &Mask) -> VoxelGrid<f64> {
    let dims = reference.dims();
    let [nz, ny, nx] = dims.to_array();
    let sp = reference.spacing();
    let mut buf: Vec<f64> = reference
        .data()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let slab = ny * nx;

    // width: contiguous rows
    par::for_each_chunk_mut(&mut buf, slab, |_, s| {
        let mut env = Envelope::with_capacity(nx);
        let mut line = vec![0.0; nx];
        for row in s.chunks_mut(nx) {
            line.copy_from_slice(row);
            env.transform(&line, row, sp.x);
        }
    });

    // height: columns inside each depth slab
    par::for_each_chunk_mut(&mut buf, slab, |_, s| {
        let mut env = Envelope::with_capacity(ny);
        let mut line = vec![0.0; ny];
        let mut out = vec![0.0; ny];
        for x in 0..nx {
            for y in 0..ny {
                line[y] = s[y * nx + x];
            }
            env.transform(&line, &mut out, sp.y);
            for y in 0..ny {
                s[y * nx + x] = out[y];
            }
        }
    });

    // depth: one task per height row, results scattered back in order
    let src = &buf;
    let rows = par::map_range(ny, |y| {
        let mut env = Envelope::with_capacity(nz);
        let mut line = vec![0.0; nz];
        let mut out = vec![0.0; nz];
        let mut res = vec![0.0; nz * nx];
        for x in 0..nx {
            for z in 0..nz {
                line[z] = src[z * slab + y * nx + x];
            }
            env.transform(&line, &mut out, sp.z);
            for z in 0..nz {
                res[z * nx + x] = out[z];
            }
        }
        res
    });
    for (y, res) in rows.into_iter().enumerate() {
        for z in 0..nz {
            let o = z * slab + y * nx;
            buf[o..o + nx].copy_from_slice(&res[z * nx..(z + 1) * nx]);
        }
    }

    VoxelGrid::new(dims, sp, buf).expect("dims preserved")
}

/// Exact spacing-aware Euclidean distance (mm) to the nearest reference
/// voxel; zero on the reference set itself.
pub fn exact_edt(reference: &Mask) -> Result<DistanceField> {
    if !reference.data().iter().any(|&b| b) {
        return Err(Error::NoTumor);
    }
    Ok(squared_edt(reference).map(|&d| d.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, Spacing};
    use proptest::prelude::*;

    /// All-pairs nearest reference voxel, accumulated x, y, z like the fast path.
    fn brute(mask: &Mask) -> Vec<f64> {
        let d = mask.dims();
        let s = mask.spacing();
        let refs: Vec<[usize; 3]> = (0..mask.len())
            .filter(|&i| mask.data()[i])
            .map(|i| d.coords(i))
            .collect();
        (0..mask.len())
            .map(|i| {
                let c = d.coords(i);
                refs.iter()
                    .map(|r| {
                        let dz = (c[0] as f64 - r[0] as f64) * s.z;
                        let dy = (c[1] as f64 - r[1] as f64) * s.y;
                        let dx = (c[2] as f64 - r[2] as f64) * s.x;
                        dx * dx + dy * dy + dz * dz
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    }

    #[test]
    fn full_reference_is_zero() {
        let m = Mask::filled(Dims::new(3, 4, 5), Spacing::default(), true);
        assert!(exact_edt(&m).unwrap().data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_voxel_corner() {
        let mut m = Mask::filled(Dims::cube(3), Spacing::default(), false);
        m.set(0, 0, 0, true);
        let d = exact_edt(&m).unwrap();
        assert!((d.get(2, 2, 2) - 12f64.sqrt()).abs() < 1e-12);
        assert!((d.get(2, 2, 2) - 3.464101).abs() < 1e-6);
    }

    #[test]
    fn empty_reference_errors() {
        let m = Mask::filled(Dims::cube(3), Spacing::default(), false);
        assert!(matches!(exact_edt(&m), Err(Error::NoTumor)));
        assert!(squared_edt(&m).data().iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn anisotropic_axis_distances() {
        let mut m = Mask::filled(Dims::new(5, 5, 5), Spacing::new(3.0, 2.0, 0.5), false);
        m.set(0, 0, 0, true);
        let d = exact_edt(&m).unwrap();
        assert_eq!(d.get(4, 0, 0), 12.0);
        assert_eq!(d.get(0, 4, 0), 8.0);
        assert_eq!(d.get(0, 0, 4), 2.0);
    }

    #[test]
    fn random_16_cube_matches_brute_force() {
        let mut s = 0x2545F4914F6CDD1Du64;
        let m = Mask::from_fn(Dims::cube(16), Spacing::new(1.0, 1.0, 2.0), |_, _, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            s % 97 == 0
        });
        let fast = exact_edt(&m).unwrap();
        let slow = brute(&m);
        let max = fast
            .data()
            .iter()
            .zip(&slow)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-6, "max deviation {max}");
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_is_lipschitz(
            d in 1usize..7, h in 1usize..7, w in 1usize..7,
            sz in prop::sample::select(vec![0.5, 1.0, 1.5, 2.0, 0.7]),
            sy in prop::sample::select(vec![0.5, 1.0, 1.25, 3.0]),
            bits in prop::collection::vec(any::<bool>(), 216),
        ) {
            let dims = Dims::new(d, h, w);
            let mut m = Mask::from_fn(dims, Spacing::new(sz, sy, 1.0), |z, y, x| bits[(z * 36 + y * 6 + x) % 216] && bits[(x * 7 + y * 3 + z) % 216]);
            m.data_mut()[0] = true;
            let fast = exact_edt(&m).unwrap();
            let slow = brute(&m);
            for (a, b) in fast.data().iter().zip(&slow) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let sp = m.spacing().to_array();
            for i in 0..fast.len() {
                let c = dims.coords(i);
                for axis in 0..3 {
                    if let Some(n) = dims.step(c, axis, true) {
                        let diff = (fast.at(c) - fast.at(n)).abs();
                        prop_assert!(diff <= sp[axis] + 1e-12);
                    }
                }
            }
        }
    }
}
