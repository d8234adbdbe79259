//! Training objective with analytic gradients with respect to logits:
//! weighted Dice + cross-entropy, a boundary-restricted cross-entropy, and
//! deep supervision on three auxiliary heads.
//!
//! All reductions run sequentially in voxel order so values are
//! reproducible bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Mask, VoxelGrid, ZoneGrid};
use crate::netref::{softmax_channels, FeatureMap, AUX_FACTORS, NUM_CLASSES};

const K: usize = NUM_CLASSES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Per-class weights for zones 0..3.
    pub class_weights: [f64; 4],
    pub lambda_boundary: f64,
    pub lambda_aux: f64,
    /// Multiplier of the boundary cross-entropy.
    pub boundary_extra: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class_weights: [0.1, 1.0, 1.5, 2.0],
            lambda_boundary: 0.3,
            lambda_aux: 0.3,
            boundary_extra: 0.5,
            dice_smooth: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, v: String| Error::Invalid {
            key: key.into(),
            value: v,
            expected: "finite, non-negative".into(),
        };
        if self.class_weights.iter().any(|w| !w.is_finite() || *w < 0.0) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return Err(bad("loss.class_weights", format!("{:?}", self.class_weights)));
        }
        for (k, v) in [
            ("loss.lambda_boundary", self.lambda_boundary),
            ("loss.lambda_aux", self.lambda_aux),
            ("loss.boundary_extra", self.boundary_extra),
            ("loss.dice_smooth", self.dice_smooth),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(bad(k, v.to_string()));
            }
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: FeatureMap,
}

fn check_pair(logits: &FeatureMap, labels: &ZoneGrid, what: &str) -> Result<()> {
    if logits.batch() != 1 || logits.channels() != K {
        return Err(Error::shape(what, format!("logits {:?}, expected (1, {K}, D, H, W)", logits.shape())));
    }
    if logits.spatial() != labels.dims().to_array() {
        return Err(Error::shape(
            what,
            format!("logits spatial {:?} vs labels {}", logits.spatial(), labels.dims()),
        ));
    }
    if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= K) {
        return Err(Error::shape(what, format!("label {bad} outside 0..{K}")));
    }
    Ok(())
}

/// Class-weighted cross-entropy normalized by the total weight of the
/// targets: `sum_v w[y_v] * CE_v / sum_v w[y_v]`.
pub fn cross_entropy(logits: &FeatureMap, labels: &ZoneGrid, class_weights: [f64; 4]) -> Result<LossValue> {
    check_pair(logits, labels, "cross-entropy")?;
    let p = softmax_channels(logits);
    let s = logits.spatial_len();
    let lab = labels.data();
    let norm: f64 = lab.iter().map(|&y| class_weights[y as usize]).sum();
    let mut grad = FeatureMap::zeros(logits.shape());
    if norm <= 0.0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let log_p = log_softmax(logits);
    let mut value = 0.0;
    for (v, &y) in lab.iter().enumerate() {
        let w = class_weights[y as usize];
        value -= w * log_p[y as usize * s + v];
    }
    let g = grad.data_mut();
    for (v, &y) in lab.iter().enumerate() {
        let w = class_weights[y as usize] / norm;
        for k in 0..K {
            let t = if k == y as usize { 1.0 } else { 0.0 };
            g[k * s + v] = w * (p.data()[k * s + v] - t);
        }
    }
    Ok(LossValue { value: value / norm, grad })
}

fn log_softmax(logits: &FeatureMap) -> Vec<f64> {
    let s = logits.spatial_len();
    let d = logits.data();
    let mut out = vec![0.0; K * s];
    for v in 0..s {
        let m = (0..K).map(|k| d[k * s + v]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..K).map(|k| (d[k * s + v] - m).exp()).sum::<f64>().ln();
        for k in 0..K {
            out[k * s + v] = d[k * s + v] - lse;
        }
    }
    out
}

/// Class-weighted mean of `1 - (2 I_k + s) / (P_k + G_k + s)` over the
/// four classes, on softmax probabilities.
pub fn soft_dice(logits: &FeatureMap, labels: &ZoneGrid, class_weights: [f64; 4], smooth: f64) -> Result<LossValue> {
    check_pair(logits, labels, "soft dice")?;
    let p = softmax_channels(logits);
    let s = logits.spatial_len();
    let pd = p.data();
    let lab = labels.data();
    let wsum: f64 = class_weights.iter().sum();
    let mut inter = [0.0; K];
    let mut psum = [0.0; K];
    let mut gsum = [0.0; K];
    for k in 0..K {
        for v in 0..s {
            let pk = pd[k * s + v];
            psum[k] += pk;
            if lab[v] as usize == k {
                inter[k] += pk;
                gsum[k] += 1.0;
            }
        }
    }
    let mut value = 0.0;
    let mut coef_g = [0.0; K];
    let mut coef_c = [0.0; K];
    for k in 0..K {
        let den = psum[k] + gsum[k] + smooth;
        let num = 2.0 * inter[k] + smooth;
        value += class_weights[k] * (1.0 - num / den);
        // dL/dp_vk = coef_c[k] + coef_g[k] * g_vk
        coef_g[k] = -class_weights[k] / wsum * 2.0 / den;
        coef_c[k] = class_weights[k] / wsum * num / (den * den);
    }
    value /= wsum;
    let mut grad = FeatureMap::zeros(logits.shape());
    let g = grad.data_mut();
    let mut a = [0.0; K];
    for v in 0..s {
        let y = lab[v] as usize;
        let mut dot = 0.0;
        for k in 0..K {
            a[k] = coef_c[k] + if k == y { coef_g[k] } else { 0.0 };
            dot += a[k] * pd[k * s + v];
        }
        for k in 0..K {
            g[k * s + v] = pd[k * s + v] * (a[k] - dot);
        }
    }
    Ok(LossValue { value, grad })
}

/// Weighted cross-entropy plus weighted soft Dice.
pub fn dice_ce_loss(logits: &FeatureMap, labels: &ZoneGrid, weights: &LossWeights) -> Result<LossValue> {
    let ce = cross_entropy(logits, labels, weights.class_weights)?;
    let dice = soft_dice(logits, labels, weights.class_weights, weights.dice_smooth)?;
    let data = ce.grad.data().iter().zip(dice.grad.data()).map(|(a, b)| a + b).collect();
    Ok(LossValue {
        value: ce.value + dice.value,
        grad: FeatureMap::from_vec(logits.shape(), data)?,
    })
}

/// Voxels with at least one in-bounds 6-neighbor of a different label.
pub fn boundary_mask_6n(labels: &ZoneGrid) -> Mask {
    let dims = labels.dims();
    let d = labels.data();
    let data = (0..dims.len())
        .map(|i| {
            let c = dims.coords(i);
            (0..3).any(|axis| {
                [false, true].into_iter().any(|fwd| {
                    dims.step(c, axis, fwd)
                        .is_some_and(|n| d[dims.index(n[0], n[1], n[2])] != d[i])
                })
            })
        })
        .collect();
    VoxelGrid::new(dims, labels.spacing(), data).expect("same geometry")
}

/// `boundary_extra * sum_v b_v CE_v / max(sum_v b_v, 1)` with unweighted CE.
pub fn boundary_loss(logits: &FeatureMap, labels: &ZoneGrid, weights: &LossWeights) -> Result<LossValue> {
    check_pair(logits, labels, "boundary loss")?;
    let b = boundary_mask_6n(labels);
    let count = b.count_true();
    let norm = count.max(1) as f64;
    let s = logits.spatial_len();
    let p = softmax_channels(logits);
    let log_p = log_softmax(logits);
    let mut grad = FeatureMap::zeros(logits.shape());
    let mut value = 0.0;
    let scale = weights.boundary_extra / norm;
    let g = grad.data_mut();
    for (v, (&on, &y)) in b.data().iter().zip(labels.data()).enumerate() {
        if !on {
            continue;
        }
        let y = y as usize;
        value -= log_p[y * s + v];
        for k in 0..K {
            let t = if k == y { 1.0 } else { 0.0 };
            g[k * s + v] = scale * (p.data()[k * s + v] - t);
        }
    }
    Ok(LossValue {
        value: value * scale,
        grad,
    })
}

/// Nearest-neighbor downsampling: each output voxel takes the label at the
/// lowest-index corner of its `factor`³ block.
pub fn downsample_labels(labels: &ZoneGrid, factor: usize) -> Result<ZoneGrid> {
    let dims = labels.dims();
    if factor == 0 || !dims.is_divisible_by(factor) {
        return Err(Error::shape(
            "downsample labels",
            format!("{dims} is not divisible by factor {factor}"),
        ));
    }
    let out = Dims::new(dims.depth / factor, dims.height / factor, dims.width / factor);
    let sp = labels.spacing();
    let spacing = crate::grid::Spacing::new(sp.z * factor as f64, sp.y * factor as f64, sp.x * factor as f64);
    Ok(VoxelGrid::from_fn(out, spacing, |z, y, x| labels.get(z * factor, y * factor, x * factor)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxLoss {
    /// Mean of the per-head DiceCE values.
    pub value: f64,
    pub per_head: [f64; 3],
    /// Gradients of `value` with respect to each head's logits.
    pub grads: [FeatureMap; 3],
}

/// Mean DiceCE over heads at factors 2, 4, 8 against downsampled labels.
pub fn aux_loss(aux_logits: &[FeatureMap; 3], labels: &ZoneGrid, weights: &LossWeights) -> Result<AuxLoss> {
    let mut per_head = [0.0; 3];
    let mut grads = Vec::with_capacity(3);
    for (i, (head, &f)) in aux_logits.iter().zip(&AUX_FACTORS).enumerate() {
        let target = downsample_labels(labels, f)?;
        if head.spatial() != target.dims().to_array() {
            return Err(Error::shape(
                format!("aux head {i}"),
                format!("logits spatial {:?}, expected {} (factor {f})", head.spatial(), target.dims()),
            ));
        }
        let l = dice_ce_loss(head, &target, weights)?;
        per_head[i] = l.value;
        grads.push(l.grad.map(|g| g / 3.0));
    }
    let [a, b, c]: [FeatureMap; 3] = grads.try_into().expect("three heads");
    Ok(AuxLoss {
        value: (per_head[0] + per_head[1] + per_head[2]) / 3.0,
        per_head,
        grads: [a, b, c],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub dice_ce: f64,
    pub boundary: f64,
    pub aux: f64,
    pub total: f64,
    /// d total / d logits of the main head.
    pub grad_logits: FeatureMap,
    /// d total / d logits of each auxiliary head (includes lambda_aux).
    pub aux_grads: [FeatureMap; 3],
}

pub fn total_loss(logits: &FeatureMap, aux_logits: &[FeatureMap; 3], labels: &ZoneGrid, weights: &LossWeights) -> Result<LossBreakdown> {
    let dc = dice_ce_loss(logits, labels, weights)?;
    let bd = boundary_loss(logits, labels, weights)?;
    let ax = aux_loss(aux_logits, labels, weights)?;
    let (lb, la) = (weights.lambda_boundary, weights.lambda_aux);
    let total = dc.value + lb * bd.value + la * ax.value;
    let data = dc.grad.data().iter().zip(bd.grad.data()).map(|(a, b)| a + lb * b).collect();
    Ok(LossBreakdown {
        dice_ce: dc.value,
        boundary: bd.value,
        aux: ax.value,
        total,
        grad_logits: FeatureMap::from_vec(logits.shape(), data)?,
        aux_grads: ax.grads.map(|g| g.map(|v| la * v)),
    })
}

/// Finite-difference verification of the analytic gradients.
pub mod gradcheck {
    use super::*;

    /// `|a - n| / max(|a|, |n|, 1e-6)`.
    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
    }

    /// Central difference of `f` at flat index `idx` of `x`.
    pub fn central_difference(f: &dyn Fn(&FeatureMap) -> Result<f64>, x: &FeatureMap, idx: usize, h: f64) -> Result<f64> {
        let mut xp = x.clone();
        xp.data_mut()[idx] += h;
        let mut xm = x.clone();
        xm.data_mut()[idx] -= h;
        Ok((f(&xp)? - f(&xm)?) / (2.0 * h))
    }

    #[derive(Clone, Debug, PartialEq, Serialize)]
    pub struct ComponentCheck {
        pub component: String,
        pub checked: usize,
        pub max_relative_error: f64,
        pub mean_relative_error: f64,
    }

    #[derive(Clone, Debug, PartialEq, Serialize)]
    pub struct GradReport {
        pub seed: u64,
        pub size: usize,
        pub fixtures: usize,
        pub coordinates_per_fixture: usize,
        pub step: f64,
        pub components: Vec<ComponentCheck>,
        /// Largest `|total - (dice_ce + lb*boundary + la*aux)|` seen.
        pub composition_residual: f64,
    }

    impl GradReport {
        pub fn max_relative_error(&self) -> f64 {
            self.components.iter().map(|c| c.max_relative_error).fold(0.0, f64::max)
        }
    }

    /// Random fixture: logits in N(0, 1.5²)-like range and labels with
    /// every class present.
    pub struct Fixture {
        pub logits: FeatureMap,
        pub aux: [FeatureMap; 3],
        pub labels: ZoneGrid,
    }

    pub fn random_fixture(size: usize, rng: &mut ChaCha8Rng) -> Fixture {
        let mut logit = |s: usize| FeatureMap::from_fn([1, K, s, s, s], |_| rng.gen_range(-3.0..3.0));
        let logits = logit(size);
        let aux = [logit(size / 2), logit(size / 4), logit(size / 8)];
        let mut labels = ZoneGrid::from_fn(Dims::cube(size), Default::default(), |_, _, _| rng.gen_range(0..K as u8));
        for k in 0..K {
            labels.data_mut()[k] = k as u8;
        }
        Fixture { logits, aux, labels }
    }

    struct Acc {
        errors: Vec<f64>,
    }

    impl Acc {
        fn finish(self, name: &str) -> ComponentCheck {
            let n = self.errors.len();
            ComponentCheck {
                component: name.into(),
                checked: n,
                max_relative_error: self.errors.iter().copied().fold(0.0, f64::max),
                mean_relative_error: if n == 0 { 0.0 } else { self.errors.iter().sum::<f64>() / n as f64 },
            }
        }
    }

    /// Check every loss component on `fixtures` random fixtures of extent
    /// `size` (a multiple of 8), `coords` coordinates each.
    pub fn check_gradients(seed: u64, size: usize, fixtures: usize, coords: usize, weights: &LossWeights) -> Result<GradReport> {
        if size == 0 || size % 8 != 0 {
            return Err(Error::Invalid {
                key: "size".into(),
                value: size.to_string(),
                expected: "a positive multiple of 8".into(),
            });
        }
        const H: f64 = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut dc, mut bd, mut ax, mut tot) = (Acc { errors: vec![] }, Acc { errors: vec![] }, Acc { errors: vec![] }, Acc { errors: vec![] });
        let mut residual: f64 = 0.0;
        for _ in 0..fixtures {
            let fx = random_fixture(size, &mut rng);
            let lab = &fx.labels;
            let n = fx.logits.data().len();
            let dcl = dice_ce_loss(&fx.logits, lab, weights)?;
            let bdl = boundary_loss(&fx.logits, lab, weights)?;
            let axl = aux_loss(&fx.aux, lab, weights)?;
            let tl = total_loss(&fx.logits, &fx.aux, lab, weights)?;
            residual = residual.max(
                (tl.total - (tl.dice_ce + weights.lambda_boundary * tl.boundary + weights.lambda_aux * tl.aux)).abs(),
            );
            for _ in 0..coords {
                let idx = rng.gen_range(0..n);
                let f_dc = |x: &FeatureMap| Ok(dice_ce_loss(x, lab, weights)?.value);
                dc.errors.push(relative_error(dcl.grad.data()[idx], central_difference(&f_dc, &fx.logits, idx, H)?));
                let f_bd = |x: &FeatureMap| Ok(boundary_loss(x, lab, weights)?.value);
                bd.errors.push(relative_error(bdl.grad.data()[idx], central_difference(&f_bd, &fx.logits, idx, H)?));

                let head = rng.gen_range(0..3);
                let hidx = rng.gen_range(0..fx.aux[head].data().len());
                let f_ax = |x: &FeatureMap| {
                    let mut a = fx.aux.clone();
                    a[head] = x.clone();
                    Ok(aux_loss(&a, lab, weights)?.value)
                };
                ax.errors.push(relative_error(axl.grads[head].data()[hidx], central_difference(&f_ax, &fx.aux[head], hidx, H)?));

                let f_tot = |x: &FeatureMap| Ok(total_loss(x, &fx.aux, lab, weights)?.total);
                tot.errors.push(relative_error(tl.grad_logits.data()[idx], central_difference(&f_tot, &fx.logits, idx, H)?));
                let f_tot_aux = |x: &FeatureMap| {
                    let mut a = fx.aux.clone();
                    a[head] = x.clone();
                    Ok(total_loss(&fx.logits, &a, lab, weights)?.total)
                };
                tot.errors.push(relative_error(
                    tl.aux_grads[head].data()[hidx],
                    central_difference(&f_tot_aux, &fx.aux[head], hidx, H)?,
                ));
            }
        }
        Ok(GradReport {
            seed,
            size,
            fixtures,
            coordinates_per_fixture: coords,
            step: H,
            components: vec![dc.finish("dice_ce"), bd.finish("boundary"), ax.finish("aux"), tot.finish("total")],
            composition_residual: residual,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FlipSet, Plane, Spacing};
    use proptest::prelude::{prop_assert, proptest};

    fn labels_from(size: usize, f: impl FnMut(usize, usize, usize) -> u8) -> ZoneGrid {
        ZoneGrid::from_fn(Dims::cube(size), Spacing::default(), f)
    }

    fn one_hot_logits(labels: &ZoneGrid, scale: f64) -> FeatureMap {
        let d = labels.dims();
        FeatureMap::from_fn([1, K, d.depth, d.height, d.width], |[_, k, z, y, x]| {
            if labels.get(z, y, x) as usize == k {
                scale
            } else {
                0.0
            }
        })
    }

    fn mixed_labels(size: usize) -> ZoneGrid {
        labels_from(size, |z, y, x| ((z * 7 + y * 3 + x) % 4) as u8)
    }

    /// Scalar DiceCE by direct summation over explicit probabilities.
    fn oracle_dice_ce(logits: &FeatureMap, labels: &ZoneGrid, w: &LossWeights) -> f64 {
        let s = logits.spatial_len();
        let mut probs = vec![[0.0; 4]; s];
        for (v, p) in probs.iter_mut().enumerate() {
            let z: Vec<f64> = (0..4).map(|k| logits.data()[k * s + v]).collect();
            let e: Vec<f64> = z.iter().map(|a| a.exp()).collect();
            let t: f64 = e.iter().sum();
            for k in 0..4 {
                p[k] = e[k] / t;
            }
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (v, &y) in labels.data().iter().enumerate() {
            num += w.class_weights[y as usize] * -probs[v][y as usize].ln();
            den += w.class_weights[y as usize];
        }
        let ce = num / den;
        let mut dice = 0.0;
        for k in 0..4 {
            let mut i = 0.0;
            let mut ps = 0.0;
            let mut gs = 0.0;
            for (v, &y) in labels.data().iter().enumerate() {
                let g = if y as usize == k { 1.0 } else { 0.0 };
                i += probs[v][k] * g;
                ps += probs[v][k];
                gs += g;
            }
            dice += w.class_weights[k] * (1.0 - (2.0 * i + w.dice_smooth) / (ps + gs + w.dice_smooth));
        }
        ce + dice / w.class_weights.iter().sum::<f64>()
    }

    fn random_logits(size: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn([1, 4, size, size, size], |_| rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn defaults() {
        let w = LossWeights::default();
        assert_eq!(w.class_weights, [0.1, 1.0, 1.5, 2.0]);
        assert_eq!((w.lambda_boundary, w.lambda_aux, w.boundary_extra), (0.3, 0.3, 0.5));
    }

    #[test]
    fn perfect_prediction() {
        let labels = mixed_labels(4);
        let logits = one_hot_logits(&labels, 20.0);
        let w = LossWeights::default();
        assert!(cross_entropy(&logits, &labels, w.class_weights).unwrap().value < 1e-6);
        assert!(soft_dice(&logits, &labels, w.class_weights, w.dice_smooth).unwrap().value < 1e-3);
        assert!(boundary_loss(&logits, &labels, &w).unwrap().value < 1e-6);
    }

    #[test]
    fn uniform_logits_give_ln4() {
        let labels = mixed_labels(4);
        let logits = FeatureMap::zeros([1, 4, 4, 4, 4]);
        let ce = cross_entropy(&logits, &labels, [1.0; 4]).unwrap();
        assert!((ce.value - 4f64.ln()).abs() < 1e-12);
        assert!((ce.value - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn unit_class_weights_give_plain_mean() {
        let labels = mixed_labels(4);
        let logits = random_logits(4, 3);
        let ce = cross_entropy(&logits, &labels, [1.0; 4]).unwrap();
        let lp = log_softmax(&logits);
        let mean = labels.data().iter().enumerate().map(|(v, &y)| -lp[y as usize * 64 + v]).sum::<f64>() / 64.0;
        assert!((ce.value - mean).abs() < 1e-12);
    }

    #[test]
    fn dice_ce_matches_direct_oracle() {
        let w = LossWeights::default();
        for seed in 0..5 {
            let labels = labels_from(4, |z, y, x| ((z * 31 + y * 17 + x * 5 + seed as usize) % 9 % 4) as u8);
            let logits = random_logits(4, seed);
            let fast = dice_ce_loss(&logits, &labels, &w).unwrap().value;
            assert!((fast - oracle_dice_ce(&logits, &labels, &w)).abs() < 1e-10);
        }
    }

    #[test]
    fn boundary_mask_cases() {
        assert_eq!(boundary_mask_6n(&labels_from(4, |_, _, _| 2)).count_true(), 0);
        let split = ZoneGrid::from_fn(Dims::new(2, 3, 3), Spacing::default(), |z, _, _| z as u8);
        assert_eq!(boundary_mask_6n(&split).count_true(), 18);
    }

    #[test]
    fn boundary_mask_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels = labels_from(8, |_, _, _| rng.gen_range(0..3));
        let b = boundary_mask_6n(&labels);
        let n = 8isize;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let me = labels.get(z as usize, y as usize, x as usize);
                    let mut diff = false;
                    for (dz, dy, dx) in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                        let (a, bb, c) = (z + dz, y + dy, x + dx);
                        if a >= 0 && bb >= 0 && c >= 0 && a < n && bb < n && c < n && labels.get(a as usize, bb as usize, c as usize) != me {
                            diff = true;
                        }
                    }
                    assert_eq!(b.get(z as usize, y as usize, x as usize), diff);
                }
            }
        }
    }

    #[test]
    fn boundary_loss_empty_mask_is_zero() {
        let labels = labels_from(4, |_, _, _| 1);
        let l = boundary_loss(&random_logits(4, 1), &labels, &LossWeights::default()).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn boundary_loss_matches_oracle() {
        let labels = mixed_labels(4);
        let logits = random_logits(4, 5);
        let w = LossWeights::default();
        let b = boundary_mask_6n(&labels);
        let s = 64;
        let mut sum = 0.0;
        for v in 0..s {
            if b.data()[v] {
                let y = labels.data()[v] as usize;
                let z: Vec<f64> = (0..4).map(|k| logits.data()[k * s + v]).collect();
                let t: f64 = z.iter().map(|a| a.exp()).sum();
                sum += -(z[y].exp() / t).ln();
            }
        }
        let expected = 0.5 * sum / b.count_true() as f64;
        assert!((boundary_loss(&logits, &labels, &w).unwrap().value - expected).abs() < 1e-10);
    }

    #[test]
    fn downsample_cases() {
        let c = labels_from(8, |_, _, _| 3);
        assert!(downsample_labels(&c, 4).unwrap().data().iter().all(|&v| v == 3));
        let g = labels_from(4, |z, y, x| (z * 16 + y * 4 + x) as u8);
        let d = downsample_labels(&g, 2).unwrap();
        assert_eq!(d.dims(), Dims::cube(2));
        assert_eq!(d.get(1, 0, 1), (2 * 16 + 2) as u8);
        assert_eq!(d.spacing(), Spacing::isotropic(2.0));
        assert!(downsample_labels(&labels_from(6, |_, _, _| 0), 4).is_err());
    }

    #[test]
    fn aux_composition() {
        let labels = mixed_labels(8);
        let w = LossWeights::default();
        let heads: Vec<FeatureMap> = AUX_FACTORS
            .iter()
            .map(|&f| one_hot_logits(&downsample_labels(&labels, f).unwrap(), 30.0))
            .collect();
        let perfect: [FeatureMap; 3] = heads.clone().try_into().unwrap();
        assert!(aux_loss(&perfect, &labels, &w).unwrap().value < 1e-3);
        let mut mixed = perfect.clone();
        mixed[1] = FeatureMap::zeros(mixed[1].shape());
        let l_uniform = oracle_dice_ce(&mixed[1], &downsample_labels(&labels, 4).unwrap(), &w);
        let a = aux_loss(&mixed, &labels, &w).unwrap();
        let expected = (a.per_head[0] + l_uniform + a.per_head[2]) / 3.0;
        assert!((a.value - expected).abs() < 1e-12);
        assert!(a.per_head[0] < 1e-3 && a.per_head[2] < 1e-3);
    }

    #[test]
    fn aux_factor_mismatch() {
        let labels = mixed_labels(8);
        let bad = [FeatureMap::zeros([1, 4, 4, 4, 4]), FeatureMap::zeros([1, 4, 4, 4, 4]), FeatureMap::zeros([1, 4, 1, 1, 1])];
        assert!(aux_loss(&bad, &labels, &LossWeights::default()).is_err());
    }

    #[test]
    fn total_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fx = gradcheck::random_fixture(8, &mut rng);
        let w = LossWeights::default();
        let t = total_loss(&fx.logits, &fx.aux, &fx.labels, &w).unwrap();
        assert!((t.total - (t.dice_ce + 0.3 * t.boundary + 0.3 * t.aux)).abs() < 1e-12);
        let zero = LossWeights {
            lambda_aux: 0.0,
            lambda_boundary: 0.0,
            ..w
        };
        let t0 = total_loss(&fx.logits, &fx.aux, &fx.labels, &zero).unwrap();
        assert_eq!(t0.total, t0.dice_ce);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let r = gradcheck::check_gradients(17, 8, 2, 10, &LossWeights::default()).unwrap();
        assert!(r.max_relative_error() < 1e-4, "{r:?}");
        assert!(r.composition_residual <= 1e-12);
    }

    #[test]
    fn shape_errors() {
        let labels = mixed_labels(4);
        assert!(dice_ce_loss(&FeatureMap::zeros([1, 3, 4, 4, 4]), &labels, &LossWeights::default()).is_err());
        assert!(dice_ce_loss(&FeatureMap::zeros([1, 4, 4, 4, 2]), &labels, &LossWeights::default()).is_err());
    }

    fn rotate_map(fm: &FeatureMap, plane: Plane, k: i32) -> FeatureMap {
        let sp = fm.spatial();
        let mut data = Vec::new();
        for c in 0..fm.channels() {
            let g = VoxelGrid::new(Dims::from_array(sp), Spacing::default(), fm.channel(0, c).to_vec()).unwrap();
            data.extend_from_slice(g.rot90(plane, k).data());
        }
        FeatureMap::from_vec(fm.shape(), data).unwrap()
    }

    /// Labels constant on 8³ blocks, so corner downsampling commutes with
    /// flips and rotations.
    fn block_labels(size: usize, rng: &mut ChaCha8Rng) -> ZoneGrid {
        let b = size / 8;
        let blocks: Vec<u8> = (0..b * b * b).map(|_| rng.gen_range(0..4)).collect();
        labels_from(size, |z, y, x| blocks[((z / 8) * b + y / 8) * b + x / 8])
    }

    proptest! {
        #[test]
        fn nonnegative_and_flip_invariant(seed in 0u64..1000, bits in 0u8..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fx = gradcheck::random_fixture(8, &mut rng);
            let w = LossWeights::default();
            let t = total_loss(&fx.logits, &fx.aux, &fx.labels, &w).unwrap();
            prop_assert!(t.dice_ce >= 0.0 && t.boundary >= 0.0 && t.aux >= 0.0 && t.total.is_finite());
            let flips = FlipSet::from_bits(bits);
            let (fl, flab) = (fx.logits.flip_spatial(flips), fx.labels.flip_axes(flips));
            let d1 = dice_ce_loss(&fx.logits, &fx.labels, &w).unwrap().value;
            let d2 = dice_ce_loss(&fl, &flab, &w).unwrap().value;
            prop_assert!((d1 - d2).abs() < 1e-12);
            let b2 = boundary_loss(&fl, &flab, &w).unwrap().value;
            prop_assert!((t.boundary - b2).abs() < 1e-12);

            let fx16 = gradcheck::random_fixture(16, &mut rng);
            let labels = block_labels(16, &mut rng);
            let t = total_loss(&fx16.logits, &fx16.aux, &labels, &w).unwrap();
            let aux = fx16.aux.clone().map(|a| a.flip_spatial(flips));
            let t2 = total_loss(&fx16.logits.flip_spatial(flips), &aux, &labels.flip_axes(flips), &w).unwrap();
            prop_assert!((t.total - t2.total).abs() < 1e-12);
        }

        #[test]
        fn rotation_invariant(seed in 0u64..1000, plane_idx in 0usize..3, k in 1i32..4) {
            let plane = [Plane::DepthHeight, Plane::DepthWidth, Plane::HeightWidth][plane_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fx = gradcheck::random_fixture(16, &mut rng);
            let labels = block_labels(16, &mut rng);
            let w = LossWeights::default();
            let t = total_loss(&fx.logits, &fx.aux, &labels, &w).unwrap();
            let aux = fx.aux.clone().map(|a| rotate_map(&a, plane, k));
            let t2 = total_loss(&rotate_map(&fx.logits, plane, k), &aux, &labels.rot90(plane, k), &w).unwrap();
            prop_assert!((t.total - t2.total).abs() < 1e-12);
        }
    }
}
