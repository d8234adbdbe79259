//! Scaled dot-product attention and bidirectional cross-attention fusion.

use super::ops::{conv3d, instance_norm, leaky_relu_inplace};
use super::params::ParamStore;
use super::tensor::{FeatureMap, Matrix};
use crate::error::{Error, Result};
use crate::par;

fn softmax_row(scores: &mut [f64]) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - m).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols != k.cols {
        return Err(Error::shape("attention", format!("query width {} != key width {}", q.cols, k.cols)));
    }
    if k.rows != v.rows {
        return Err(Error::shape("attention", format!("{} keys but {} values", k.rows, v.rows)));
    }
    if k.rows == 0 {
        return Err(Error::shape("attention", "no key tokens"));
    }
    Ok(())
}

/// Row-wise `softmax(Q Kᵀ / sqrt(d))`.
pub fn attention_weights(q: &Matrix, k: &Matrix, d: usize) -> Result<Matrix> {
    if q.cols != k.cols {
        return Err(Error::shape("attention", format!("query width {} != key width {}", q.cols, k.cols)));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let rows = par::map_range(q.rows, |i| {
        let qi = q.row(i);
        let mut s: Vec<f64> = (0..k.rows).map(|j| dot(qi, k.row(j)) * scale).collect();
        softmax_row(&mut s);
        s
    });
    Matrix::new(q.rows, k.rows, rows.concat())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `softmax(Q Kᵀ / sqrt(d)) V`, one query row at a time.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix, d: usize) -> Result<Matrix> {
    check_qkv(q, k, v)?;
    let scale = 1.0 / (d as f64).sqrt();
    const BLOCK: usize = 64;
    let blocks = par::map_range(q.rows.div_ceil(BLOCK), |b| {
        let lo = b * BLOCK;
        let hi = (lo + BLOCK).min(q.rows);
        let mut scores = vec![0.0; k.rows];
        let mut out = vec![0.0; (hi - lo) * v.cols];
        for i in lo..hi {
            let qi = q.row(i);
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qi, k.row(j)) * scale;
            }
            softmax_row(&mut scores);
            let o = &mut out[(i - lo) * v.cols..(i - lo + 1) * v.cols];
            for (j, &p) in scores.iter().enumerate() {
                for (oc, &vc) in o.iter_mut().zip(v.row(j)) {
                    *oc += p * vc;
                }
            }
        }
        out
    });
    Matrix::new(q.rows, v.cols, blocks.concat())
}

/// Parameter names of a fusion module under `prefix`.
pub const FUSION_PROJECTIONS: [&str; 6] = ["q_c", "k_c", "v_c", "q_s", "k_s", "v_s"];

pub fn register_fusion(store: &mut ParamStore, prefix: &str, c_in: usize, s_in: usize, d: usize) {
    for name in FUSION_PROJECTIONS {
        let cin = if name.ends_with('c') { c_in } else { s_in };
        store.init_uniform(&format!("{prefix}.{name}.weight"), &[d, cin, 1, 1, 1], cin);
        store.init_uniform(&format!("{prefix}.{name}.bias"), &[d], cin);
    }
    store.init_uniform(&format!("{prefix}.proj.weight"), &[d, 2 * d, 1, 1, 1], 2 * d);
    store.init_uniform(&format!("{prefix}.proj.bias"), &[d], 2 * d);
}

fn project(x: &FeatureMap, store: &ParamStore, prefix: &str, name: &str, d: usize) -> Result<FeatureMap> {
    let layer = format!("{prefix}.{name}");
    let w = store.expect(&format!("{layer}.weight"), &[d, x.channels(), 1, 1, 1])?;
    let b = store.expect(&format!("{layer}.bias"), &[d])?;
    conv3d(x, w, b, 1, 0, &layer)
}

/// `[Attn(Q_C, K_S, V_S) ‖ Attn(Q_S, K_C, V_C)]` as a 2d-channel map,
/// before the output projection.
pub fn fusion_terms(c: &FeatureMap, s: &FeatureMap, store: &ParamStore, prefix: &str, d: usize) -> Result<FeatureMap> {
    if c.batch() != s.batch() || c.spatial() != s.spatial() {
        return Err(Error::shape(
            prefix,
            format!("CNN features {:?} and global features {:?} differ in batch or spatial extent", c.shape(), s.shape()),
        ));
    }
    let p: Vec<FeatureMap> = FUSION_PROJECTIONS
        .iter()
        .map(|n| {
            let src = if n.ends_with('c') { c } else { s };
            project(src, store, prefix, n, d)
        })
        .collect::<Result<_>>()?;
    let [q_c, k_c, v_c, q_s, k_s, v_s] = &p[..] else { unreachable!() };
    let sp = c.spatial();
    let mut out = Vec::with_capacity(c.batch() * 2 * d * c.spatial_len());
    for n in 0..c.batch() {
        let tok = |fm: &FeatureMap| Matrix::from_tokens(fm, n);
        let a = scaled_dot_attention(&tok(q_c), &tok(k_s), &tok(v_s), d)?;
        let b = scaled_dot_attention(&tok(q_s), &tok(k_c), &tok(v_c), d)?;
        let a = a.to_feature_map(sp)?;
        let b = b.to_feature_map(sp)?;
        out.extend(a.concat_channels(&b)?.into_data());
    }
    FeatureMap::from_vec([c.batch(), 2 * d, sp[0], sp[1], sp[2]], out)
}

/// Fused map: `LeakyReLU(IN(Proj(fusion_terms)))` with `d` channels.
pub fn cross_attention_fuse(
    c: &FeatureMap,
    s: &FeatureMap,
    store: &ParamStore,
    prefix: &str,
    d: usize,
    slope: f64,
    epsilon: f64,
) -> Result<FeatureMap> {
    let terms = fusion_terms(c, s, store, prefix, d)?;
    let layer = format!("{prefix}.proj");
    let w = store.expect(&format!("{layer}.weight"), &[d, 2 * d, 1, 1, 1])?;
    let b = store.expect(&format!("{layer}.bias"), &[d])?;
    let mut out = instance_norm(&conv3d(&terms, w, b, 1, 0, &layer)?, epsilon);
    leaky_relu_inplace(&mut out, slope);
    Ok(out)
}
