//! Self-check of the cross-attention fusion against a loop-by-loop
//! re-derivation.

use infilmap_core::netref::{attention_weights, cross_attention_fuse, fusion_terms, register_fusion, FeatureMap, Matrix, ParamStore};
use infilmap_core::Result;
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionReport {
    pub seed: u64,
    pub fixtures: usize,
    pub fusion_dim: usize,
    /// Largest |fast - reference| over all fused outputs.
    pub max_abs_deviation: f64,
    /// Largest |row sum - 1| of the attention matrices.
    pub max_row_sum_error: f64,
    /// Largest deviation of the single-token terms from `[V_S ‖ V_C]`.
    pub single_token_deviation: f64,
}

impl FusionReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_abs_deviation < tol && self.max_row_sum_error < tol && self.single_token_deviation < tol
    }
}

fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*state >> 11) as f64 / (1u64 << 53) as f64) * 3.0 - 1.5
}

fn random_map(shape: [usize; 5], state: &mut u64) -> FeatureMap {
    FeatureMap::from_fn(shape, |_| lcg(state))
}

fn weights(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).map(|t| t.data.clone()).unwrap_or_default()
}

/// tokens x d projection of `x` through layer `name`.
fn project(x: &FeatureMap, store: &ParamStore, name: &str) -> Vec<Vec<f64>> {
    let w = weights(store, &format!("{name}.weight"));
    let b = weights(store, &format!("{name}.bias"));
    let cin = x.channels();
    (0..x.spatial_len())
        .map(|t| {
            (0..b.len())
                .map(|o| {
                    let mut s = b[o];
                    for i in 0..cin {
                        s += w[o * cin + i] * x.channel(0, i)[t];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for qi in q {
        let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        out.push((0..v[0].len()).map(|c| (0..v.len()).map(|j| e[j] / z * v[j][c]).sum()).collect());
    }
    out
}

/// Fused output as (channel, token) computed one step at a time.
pub fn reference_fuse(c: &FeatureMap, s: &FeatureMap, store: &ParamStore, prefix: &str, d: usize, slope: f64, eps: f64) -> Vec<Vec<f64>> {
    let p = |x: &FeatureMap, n: &str| project(x, store, &format!("{prefix}.{n}"));
    let a = attend(&p(c, "q_c"), &p(s, "k_s"), &p(s, "v_s"), d);
    let b = attend(&p(s, "q_s"), &p(c, "k_c"), &p(c, "v_c"), d);
    let terms: Vec<Vec<f64>> = a.into_iter().zip(b).map(|(x, y)| x.into_iter().chain(y).collect()).collect();
    let w = weights(store, &format!("{prefix}.proj.weight"));
    let bias = weights(store, &format!("{prefix}.proj.bias"));
    let n = terms.len();
    (0..d)
        .map(|o| {
            let ch: Vec<f64> = (0..n).map(|t| bias[o] + (0..2 * d).map(|i| w[o * 2 * d + i] * terms[t][i]).sum::<f64>()).collect();
            let mean = ch.iter().sum::<f64>() / n as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            ch.iter()
                .map(|v| {
                    let y = (v - mean) / (var + eps).sqrt();
                    if y < 0.0 {
                        slope * y
                    } else {
                        y
                    }
                })
                .collect()
        })
        .collect()
}

pub fn check_fusion(seed: u64, fixtures: usize) -> Result<FusionReport> {
    const D: usize = 4;
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut max_dev: f64 = 0.0;
    let mut row_err: f64 = 0.0;
    for f in 0..fixtures {
        let (ci, si) = (2 + f % 4, 3 + f % 3);
        let c = random_map([1, ci, 2, 2, 2], &mut state);
        let s = random_map([1, si, 2, 2, 2], &mut state);
        let mut store = ParamStore::new(seed.wrapping_add(f as u64));
        register_fusion(&mut store, "fuse", ci, si, D);
        let fast = cross_attention_fuse(&c, &s, &store, "fuse", D, 0.01, 1e-5)?;
        for (o, ch) in reference_fuse(&c, &s, &store, "fuse", D, 0.01, 1e-5).iter().enumerate() {
            for (t, v) in ch.iter().enumerate() {
                max_dev = max_dev.max((fast.channel(0, o)[t] - v).abs());
            }
        }
        let tok = |x: &Vec<Vec<f64>>| Matrix::new(x.len(), D, x.concat()).expect("rectangular");
        let q = project(&c, &store, "fuse.q_c");
        let k = project(&s, &store, "fuse.k_s");
        let a = attention_weights(&tok(&q), &tok(&k), D)?;
        for r in 0..a.rows {
            row_err = row_err.max((a.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let c = random_map([1, 3, 1, 1, 1], &mut state);
    let s = random_map([1, 2, 1, 1, 1], &mut state);
    let mut store = ParamStore::new(seed);
    register_fusion(&mut store, "fuse", 3, 2, D);
    let terms = fusion_terms(&c, &s, &store, "fuse", D)?;
    let want: Vec<f64> = project(&s, &store, "fuse.v_s")[0].iter().chain(&project(&c, &store, "fuse.v_c")[0]).copied().collect();
    let single = terms.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(FusionReport {
        seed,
        fixtures,
        fusion_dim: D,
        max_abs_deviation: max_dev,
        max_row_sum_error: row_err,
        single_token_deviation: single,
    })
}
