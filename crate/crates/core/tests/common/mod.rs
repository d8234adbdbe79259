//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use infilmap_core::grid::{Dims, Mask, Spacing, ZoneGrid};
use infilmap_core::netref::{FeatureMap, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(dims: Dims, spacing: Spacing, density: f64, rng: &mut ChaCha8Rng) -> Mask {
    Mask::from_fn(dims, spacing, |_, _, _| rng.gen_bool(density))
}

pub fn random_zones(dims: Dims, rng: &mut ChaCha8Rng) -> ZoneGrid {
    ZoneGrid::from_fn(dims, Spacing::default(), |_, _, _| rng.gen_range(0..4u8))
}

fn mm(a: [usize; 3], b: [usize; 3], s: Spacing) -> f64 {
    let d = |i: usize, w: f64| (a[i] as f64 - b[i] as f64) * w;
    (d(0, s.z).powi(2) + d(1, s.y).powi(2) + d(2, s.x).powi(2)).sqrt()
}

fn points(mask: &Mask) -> Vec<[usize; 3]> {
    let d = mask.dims();
    let mut out = vec![];
    for z in 0..d.depth {
        for y in 0..d.height {
            for x in 0..d.width {
                if mask.get(z, y, x) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Distance from every voxel to the nearest true voxel, by scanning them all.
pub fn all_pairs_edt(mask: &Mask) -> Vec<f64> {
    let d = mask.dims();
    let refs = points(mask);
    let mut out = vec![];
    for z in 0..d.depth {
        for y in 0..d.height {
            for x in 0..d.width {
                out.push(refs.iter().map(|&r| mm([z, y, x], r, mask.spacing())).fold(f64::INFINITY, f64::min));
            }
        }
    }
    out
}

/// Voxels of `mask` with a face neighbor that is off the grid or false.
pub fn surface_points(mask: &Mask) -> Vec<[usize; 3]> {
    let d = mask.dims().to_array();
    points(mask)
        .into_iter()
        .filter(|p| {
            let mut exposed = false;
            for a in 0..3 {
                for delta in [-1i64, 1] {
                    let q = p[a] as i64 + delta;
                    if q < 0 || q >= d[a] as i64 {
                        exposed = true;
                    } else {
                        let mut n = *p;
                        n[a] = q as usize;
                        exposed |= !mask.get(n[0], n[1], n[2]);
                    }
                }
            }
            exposed
        })
        .collect()
}

pub fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// HD95 over pooled all-pairs surface distances.
pub fn hd95_all_pairs(pred: &Mask, truth: &Mask) -> Option<f64> {
    let (a, b) = (surface_points(pred), surface_points(truth));
    if a.is_empty() && b.is_empty() {
        return Some(0.0);
    }
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let s = truth.spacing();
    let near = |p: &[usize; 3], set: &[[usize; 3]]| set.iter().map(|q| mm(*p, *q, s)).fold(f64::INFINITY, f64::min);
    let mut pool: Vec<f64> = a.iter().map(|p| near(p, &b)).collect();
    pool.extend(b.iter().map(|p| near(p, &a)));
    Some(percentile(pool, 95.0))
}

/// (dsc, hd95, iou, vs, sensitivity, precision) of one zone by direct counting.
pub fn zone_metrics_oracle(pred: &ZoneGrid, truth: &ZoneGrid, zone: u8) -> [Option<f64>; 6] {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == zone, t == zone) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    let (vp, vt) = (tp + fp, tp + fn_);
    let empty = vp == 0.0 && vt == 0.0;
    let div = |a: f64, b: f64| if b > 0.0 { Some(a / b) } else { None };
    let pm = pred.map(|&v| v == zone);
    let tm = truth.map(|&v| v == zone);
    [
        if empty { Some(1.0) } else { div(2.0 * tp, vp + vt) },
        hd95_all_pairs(&pm, &tm),
        if empty { Some(1.0) } else { div(tp, tp + fp + fn_) },
        if empty { Some(1.0) } else { div(1.0 * (vp + vt) - (vp - vt).abs(), vp + vt) },
        div(tp, vt),
        div(tp, vp),
    ]
}

fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap().data.clone()
}

/// 1x1x1 projection `out[t][o] = b[o] + Σ_i w[o][i] · x[i][t]`, tokens first.
fn project(x: &FeatureMap, store: &ParamStore, layer: &str) -> Vec<Vec<f64>> {
    let w = param(store, &format!("{layer}.weight"));
    let b = param(store, &format!("{layer}.bias"));
    let cin = x.channels();
    let cout = b.len();
    let n = x.spatial_len();
    (0..n)
        .map(|t| {
            (0..cout)
                .map(|o| b[o] + (0..cin).map(|i| w[o * cin + i] * x.channel(0, i)[t]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Softmax(Q Kᵀ / √d) V, one query row at a time.
pub fn attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|c| (0..v.len()).map(|j| e[j] / z * v[j][c]).sum()).collect()
        })
        .collect()
}

/// Fusion step by step: six projections, the two attention terms, channel
/// concatenation, output projection, instance norm, LeakyReLU. Returns the
/// pre-projection terms (tokens x 2d) and the output (channels x tokens).
pub fn fusion_oracle(c: &FeatureMap, s: &FeatureMap, store: &ParamStore, prefix: &str, d: usize, slope: f64, eps: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let p = |x: &FeatureMap, n: &str| project(x, store, &format!("{prefix}.{n}"));
    let (qc, kc, vc) = (p(c, "q_c"), p(c, "k_c"), p(c, "v_c"));
    let (qs, ks, vs) = (p(s, "q_s"), p(s, "k_s"), p(s, "v_s"));
    let a = attend(&qc, &ks, &vs, d);
    let b = attend(&qs, &kc, &vc, d);
    let terms: Vec<Vec<f64>> = a.iter().zip(&b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect();
    let w = param(store, &format!("{prefix}.proj.weight"));
    let bias = param(store, &format!("{prefix}.proj.bias"));
    let n = terms.len();
    let mut out = vec![];
    for o in 0..d {
        let ch: Vec<f64> = (0..n).map(|t| bias[o] + (0..2 * d).map(|i| w[o * 2 * d + i] * terms[t][i]).sum::<f64>()).collect();
        let mean = ch.iter().sum::<f64>() / n as f64;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        out.push(
            ch.iter()
                .map(|v| {
                    let y = (v - mean) / (var + eps).sqrt();
                    if y < 0.0 { y * slope } else { y }
                })
                .collect(),
        );
    }
    (terms, out)
}
