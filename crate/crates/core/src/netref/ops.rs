//! Forward primitives: convolution, transposed convolution, instance
//! normalization, LeakyReLU and channel softmax. All accumulate in a fixed
//! order per output element, so results do not depend on thread count.

use super::params::Tensor;
use super::tensor::FeatureMap;
use crate::error::{Error, Result};
use crate::par;

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = input + 2 * padding;
    if span < kernel || stride == 0 {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

/// 3-D cross-correlation with a cubic kernel. `weight` is
/// (out, in, k, k, k), `bias` is (out).
pub fn conv3d(
    input: &FeatureMap,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    layer: &str,
) -> Result<FeatureMap> {
    let [nb, cin, id, ih, iw] = input.shape();
    let ws = &weight.shape;
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::shape(layer, format!("weight shape {ws:?} is not (out, in, k, k, k)")));
    }
    let (cout, k) = (ws[0], ws[2]);
    if ws[1] != cin {
        return Err(Error::shape(layer, format!("input has {cin} channels, weight expects {}", ws[1])));
    }
    if bias.shape != [cout] {
        return Err(Error::shape(layer, format!("bias shape {:?}, expected [{cout}]", bias.shape)));
    }
    let dims_out = [id, ih, iw].map(|d| conv_out_len(d, k, stride, padding));
    let [Some(od), Some(oh), Some(ow)] = dims_out else {
        return Err(Error::shape(
            layer,
            format!("input {:?} too small for kernel {k} padding {padding}", input.spatial()),
        ));
    };
    let out_len = od * oh * ow;
    let p = padding as isize;

    let chans = par::map_range(nb * cout, |nc| {
        let (n, oc) = (nc / cout, nc % cout);
        let mut out = vec![bias.data[oc]; out_len];
        for oz in 0..od {
            for oy in 0..oh {
                let row = &mut out[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                for ic in 0..cin {
                    let plane = input.channel(n, ic);
                    let wbase = (oc * cin + ic) * k * k * k;
                    for kz in 0..k {
                        let iz = (oz * stride + kz) as isize - p;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - p;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let in_row = &plane[(iz as usize * ih + iy as usize) * iw..][..iw];
                            for kx in 0..k {
                                let wv = weight.data[wbase + (kz * k + ky) * k + kx];
                                let shift = kx as isize - p;
                                // ox with 0 <= ox*stride + shift < iw
                                let lo = if shift < 0 {
                                    ((-shift) as usize).div_ceil(stride)
                                } else {
                                    0
                                };
                                let top = iw as isize - 1 - shift;
                                if top < 0 {
                                    continue;
                                }
                                let hi = ow.min(top as usize / stride + 1);
                                if lo >= hi {
                                    continue;
                                }
                                if stride == 1 {
                                    let src = &in_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                                    for (o, &v) in row[lo..hi].iter_mut().zip(src) {
                                        *o += wv * v;
                                    }
                                } else {
                                    for ox in lo..hi {
                                        row[ox] += wv * in_row[(ox as isize * stride as isize + shift) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    });
    FeatureMap::from_vec([nb, cout, od, oh, ow], chans.concat())
}

/// Transposed convolution with kernel 2 and stride 2 (exact x2 upsampling).
/// `weight` is (in, out, 2, 2, 2), `bias` is (out).
pub fn conv_transpose3d_k2s2(input: &FeatureMap, weight: &Tensor, bias: &Tensor, layer: &str) -> Result<FeatureMap> {
    let [nb, cin, id, ih, iw] = input.shape();
    let ws = &weight.shape;
    if ws.len() != 5 || ws[0] != cin || ws[2..] != [2, 2, 2] {
        return Err(Error::shape(
            layer,
            format!("weight {ws:?} incompatible with {cin} input channels (expected ({cin}, out, 2, 2, 2))"),
        ));
    }
    let cout = ws[1];
    if bias.shape != [cout] {
        return Err(Error::shape(layer, format!("bias shape {:?}, expected [{cout}]", bias.shape)));
    }
    let (od, oh, ow) = (2 * id, 2 * ih, 2 * iw);
    let chans = par::map_range(nb * cout, |nc| {
        let (n, oc) = (nc / cout, nc % cout);
        let mut out = vec![bias.data[oc]; od * oh * ow];
        for ic in 0..cin {
            let plane = input.channel(n, ic);
            let wb = (ic * cout + oc) * 8;
            for z in 0..id {
                for y in 0..ih {
                    for a in 0..2 {
                        for b in 0..2 {
                            let orow = ((2 * z + a) * oh + 2 * y + b) * ow;
                            let w0 = weight.data[wb + (a * 2 + b) * 2];
                            let w1 = weight.data[wb + (a * 2 + b) * 2 + 1];
                            let irow = &plane[(z * ih + y) * iw..][..iw];
                            for (x, &v) in irow.iter().enumerate() {
                                out[orow + 2 * x] += w0 * v;
                                out[orow + 2 * x + 1] += w1 * v;
                            }
                        }
                    }
                }
            }
        }
        out
    });
    FeatureMap::from_vec([nb, cout, od, oh, ow], chans.concat())
}

/// Per-sample, per-channel normalization over spatial positions. Channels
/// with zero variance (and `epsilon == 0`) map to zeros.
pub fn instance_norm(input: &FeatureMap, epsilon: f64) -> FeatureMap {
    let mut out = input.clone();
    let s = input.spatial_len() as f64;
    for n in 0..input.batch() {
        for c in 0..input.channels() {
            let ch = out.channel_mut(n, c);
            if ch.iter().all(|&v| v == ch[0]) {
                ch.fill(0.0);
                continue;
            }
            let mean = ch.iter().sum::<f64>() / s;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s;
            let denom = (var + epsilon).sqrt();
            if denom > 0.0 {
                ch.iter_mut().for_each(|v| *v = (*v - mean) / denom);
            } else {
                ch.fill(0.0);
            }
        }
    }
    out
}

pub fn leaky_relu_inplace(fm: &mut FeatureMap, slope: f64) {
    for v in fm.data_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

pub fn leaky_relu(fm: &FeatureMap, slope: f64) -> FeatureMap {
    let mut out = fm.clone();
    leaky_relu_inplace(&mut out, slope);
    out
}

/// Softmax over channels at every voxel, stabilized by the channel max.
pub fn softmax_channels(logits: &FeatureMap) -> FeatureMap {
    let mut out = logits.clone();
    let c = logits.channels();
    let s = logits.spatial_len();
    for n in 0..logits.batch() {
        let base = n * c * s;
        let data = out.data_mut();
        for v in 0..s {
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(data[base + k * s + v]);
            }
            let mut sum = 0.0;
            for k in 0..c {
                let e = (data[base + k * s + v] - m).exp();
                data[base + k * s + v] = e;
                sum += e;
            }
            for k in 0..c {
                data[base + k * s + v] /= sum;
            }
        }
    }
    out
}

pub fn add(a: &FeatureMap, b: &FeatureMap, layer: &str) -> Result<FeatureMap> {
    if a.shape() != b.shape() {
        return Err(Error::shape(layer, format!("{:?} + {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    FeatureMap::from_vec(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn random_map(shape: [usize; 5], rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
    }

    /// Direct 7-loop convolution.
    fn naive_conv(input: &FeatureMap, w: &Tensor, b: &Tensor, s: usize, p: usize) -> FeatureMap {
        let [nb, cin, id, ih, iw] = input.shape();
        let (cout, k) = (w.shape[0], w.shape[2]);
        let o = |d: usize| (d + 2 * p - k) / s + 1;
        let shape = [nb, cout, o(id), o(ih), o(iw)];
        FeatureMap::from_fn(shape, |[n, oc, z, y, x]| {
            let mut acc = b.data[oc];
            for ic in 0..cin {
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iz = (z * s + kz) as isize - p as isize;
                            let iy = (y * s + ky) as isize - p as isize;
                            let ix = (x * s + kx) as isize - p as isize;
                            if iz < 0 || iy < 0 || ix < 0 || iz >= id as isize || iy >= ih as isize || ix >= iw as isize {
                                continue;
                            }
                            acc += w.data[(((oc * cin + ic) * k + kz) * k + ky) * k + kx]
                                * input.get([n, ic, iz as usize, iy as usize, ix as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    fn max_abs_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_map([1, 3, 2, 3, 4], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1, 1]);
        for c in 0..3 {
            w.data[c * 3 + c] = 1.0;
        }
        let y = conv3d(&x, &w, &Tensor::zeros(&[3]), 1, 0, "id").unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_interior_is_27() {
        let x = FeatureMap::from_fn([1, 1, 5, 5, 5], |_| 1.0);
        let w = Tensor {
            shape: vec![1, 1, 3, 3, 3],
            data: vec![1.0; 27],
        };
        let y = conv3d(&x, &w, &Tensor::zeros(&[1]), 1, 1, "ones").unwrap();
        assert_eq!(y.spatial(), [5, 5, 5]);
        assert_eq!(y.get([0, 0, 2, 2, 2]), 27.0);
        assert_eq!(y.get([0, 0, 0, 0, 0]), 8.0);
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (s, p, k, dims) in [(1, 1, 3, [4, 4, 4]), (2, 1, 3, [4, 4, 4]), (2, 1, 3, [5, 3, 6]), (1, 0, 1, [3, 2, 5]), (1, 0, 3, [4, 5, 3])] {
            let x = random_map([2, 2, dims[0], dims[1], dims[2]], &mut rng);
            let w = random_tensor(&[3, 2, k, k, k], &mut rng);
            let b = random_tensor(&[3], &mut rng);
            let fast = conv3d(&x, &w, &b, s, p, "t").unwrap();
            let slow = naive_conv(&x, &w, &b, s, p);
            assert!(max_abs_diff(&fast, &slow) < 1e-12, "s={s} p={p} k={k}");
        }
    }

    #[test]
    fn output_length_formula() {
        assert_eq!(conv_out_len(32, 3, 2, 1), Some(16));
        assert_eq!(conv_out_len(5, 3, 1, 1), Some(5));
        assert_eq!(conv_out_len(7, 3, 2, 0), Some(3));
        assert_eq!(conv_out_len(1, 3, 1, 0), None);
    }

    #[test]
    fn channel_mismatch_names_layer() {
        let x = FeatureMap::zeros([1, 2, 2, 2, 2]);
        let w = Tensor::zeros(&[1, 3, 1, 1, 1]);
        match conv3d(&x, &w, &Tensor::zeros(&[1]), 1, 0, "enc.conv1") {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "enc.conv1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn transposed_conv_matches_scatter_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_map([1, 2, 2, 3, 2], &mut rng);
        let w = random_tensor(&[2, 3, 2, 2, 2], &mut rng);
        let b = random_tensor(&[3], &mut rng);
        let y = conv_transpose3d_k2s2(&x, &w, &b, "up").unwrap();
        assert_eq!(y.shape(), [1, 3, 4, 6, 4]);
        let expected = FeatureMap::from_fn([1, 3, 4, 6, 4], |[_, oc, z, yy, xx]| {
            let mut acc = b.data[oc];
            for ic in 0..2 {
                let widx = (((ic * 3 + oc) * 2 + z % 2) * 2 + yy % 2) * 2 + xx % 2;
                acc += w.data[widx] * x.get([0, ic, z / 2, yy / 2, xx / 2]);
            }
            acc
        });
        assert!(max_abs_diff(&y, &expected) < 1e-12);
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let x = FeatureMap::from_fn([1, 1, 3, 3, 3], |_| 4.2);
        assert!(instance_norm(&x, 1e-5).data().iter().all(|&v| v == 0.0));
        assert!(instance_norm(&x, 0.0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_map([2, 3, 4, 4, 4], &mut rng).map(|v| 5.0 * v + 3.0);
        let y = instance_norm(&x, 1e-5);
        for n in 0..2 {
            for c in 0..3 {
                let ch = y.channel(n, c);
                let m = ch.iter().sum::<f64>() / ch.len() as f64;
                let v = ch.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / ch.len() as f64;
                assert!(m.abs() < 1e-6);
                assert!((v - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn instance_norm_idempotent_on_normalized_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = instance_norm(&random_map([1, 2, 3, 3, 3], &mut rng), 1e-12);
        let y = instance_norm(&x, 1e-12);
        assert!(max_abs_diff(&x, &y) < 1e-6);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_map([1, 4, 3, 3, 3], &mut rng).map(|v| 300.0 * v);
        let p = softmax_channels(&x);
        for v in 0..27 {
            let s: f64 = (0..4).map(|c| p.channel(0, c)[v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
