use crate::error::{Error, Result};
use crate::grid::{Dims, FlipSet, MultiModalVolume};

/// Rank-5 activation tensor laid out as (batch, channels, depth, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    shape: [usize; 5],
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(shape: [usize; 5]) -> Self {
        FeatureMap {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("feature map", format!("zero extent in {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(
                "feature map",
                format!("{shape:?} needs {} values, got {}", shape.iter().product::<usize>(), data.len()),
            ));
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn from_fn(shape: [usize; 5], mut f: impl FnMut([usize; 5]) -> f64) -> Self {
        let mut out = FeatureMap::zeros(shape);
        let mut i = 0;
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for z in 0..shape[2] {
                    for y in 0..shape[3] {
                        for x in 0..shape[4] {
                            out.data[i] = f([n, c, z, y, x]);
                            i += 1;
                        }
                    }
                }
            }
        }
        out
    }

    /// Stack the four modalities as channels of a single-sample map.
    pub fn from_volume(volume: &MultiModalVolume) -> Self {
        let d = volume.dims();
        let mut data = Vec::with_capacity(4 * d.len());
        for m in volume.modalities() {
            data.extend(m.data().iter().map(|&v| v as f64));
        }
        FeatureMap {
            shape: [1, 4, d.depth, d.height, d.width],
            data,
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial_dims(&self) -> Dims {
        Dims::from_array(self.spatial())
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let s = self.spatial_len();
        let o = (n * self.shape[1] + c) * s;
        &self.data[o..o + s]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let s = self.spatial_len();
        let o = (n * self.shape[1] + c) * s;
        &mut self.data[o..o + s]
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 5]) -> usize {
        let [_, c, d, h, w] = self.shape;
        (((idx[0] * c + idx[1]) * d + idx[2]) * h + idx[3]) * w + idx[4]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 5]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 5], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along channels; batch and spatial extents must agree.
    pub fn concat_channels(&self, other: &FeatureMap) -> Result<FeatureMap> {
        if self.batch() != other.batch() || self.spatial() != other.spatial() {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let (ca, cb) = (self.channels(), other.channels());
        let s = self.spatial_len();
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for n in 0..self.batch() {
            data.extend_from_slice(&self.data[n * ca * s..(n + 1) * ca * s]);
            data.extend_from_slice(&other.data[n * cb * s..(n + 1) * cb * s]);
        }
        let mut shape = self.shape;
        shape[1] = ca + cb;
        Ok(FeatureMap { shape, data })
    }

    pub fn flip_spatial(&self, flips: FlipSet) -> FeatureMap {
        if flips.is_empty() {
            return self.clone();
        }
        let sp = self.spatial();
        let dims = Dims::from_array(sp);
        let s = self.spatial_len();
        let mut out = FeatureMap::zeros(self.shape);
        for nc in 0..self.batch() * self.channels() {
            let src = &self.data[nc * s..(nc + 1) * s];
            let dst = &mut out.data[nc * s..(nc + 1) * s];
            for (i, d) in dst.iter_mut().enumerate() {
                let c = flips.apply(dims.coords(i), sp);
                *d = src[dims.index(c[0], c[1], c[2])];
            }
        }
        out
    }

    /// Spatial sub-block starting at `origin` with extent `size`.
    pub fn crop_spatial(&self, origin: [usize; 3], size: [usize; 3]) -> Result<FeatureMap> {
        let sp = self.spatial();
        if (0..3).any(|a| origin[a] + size[a] > sp[a]) {
            return Err(Error::OutOfBounds {
                detail: format!("crop {origin:?}+{size:?} of {sp:?}"),
            });
        }
        let shape = [self.shape[0], self.shape[1], size[0], size[1], size[2]];
        let mut out = FeatureMap::zeros(shape);
        let mut o = 0;
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for z in 0..size[0] {
                    for y in 0..size[1] {
                        let start = self.offset([n, c, origin[0] + z, origin[1] + y, origin[2]]);
                        out.data[o..o + size[2]].copy_from_slice(&self.data[start..start + size[2]]);
                        o += size[2];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Zero-pad at the high end of every spatial axis up to `target`.
    pub fn pad_spatial(&self, target: [usize; 3]) -> FeatureMap {
        let sp = self.spatial();
        let new = [sp[0].max(target[0]), sp[1].max(target[1]), sp[2].max(target[2])];
        if new == sp {
            return self.clone();
        }
        let shape = [self.shape[0], self.shape[1], new[0], new[1], new[2]];
        let mut out = FeatureMap::zeros(shape);
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for z in 0..sp[0] {
                    for y in 0..sp[1] {
                        let s = self.offset([n, c, z, y, 0]);
                        let d = out.offset([n, c, z, y, 0]);
                        out.data[d..d + sp[2]].copy_from_slice(&self.data[s..s + sp[2]]);
                    }
                }
            }
        }
        out
    }
}

/// Row-major 2-D matrix used for attention tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix", format!("{rows}x{cols} vs {} values", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Flatten sample `n` into (voxels x channels) tokens.
    pub fn from_tokens(fm: &FeatureMap, n: usize) -> Matrix {
        let (c, s) = (fm.channels(), fm.spatial_len());
        let mut data = vec![0.0; s * c];
        for ch in 0..c {
            for (t, &v) in fm.channel(n, ch).iter().enumerate() {
                data[t * c + ch] = v;
            }
        }
        Matrix { rows: s, cols: c, data }
    }

    /// Inverse of [`Matrix::from_tokens`] for one sample.
    pub fn to_feature_map(&self, spatial: [usize; 3]) -> Result<FeatureMap> {
        let s: usize = spatial.iter().product();
        if s != self.rows {
            return Err(Error::shape("tokens", format!("{} tokens for spatial {spatial:?}", self.rows)));
        }
        let mut fm = FeatureMap::zeros([1, self.cols, spatial[0], spatial[1], spatial[2]]);
        for ch in 0..self.cols {
            let dst = fm.channel_mut(0, ch);
            for (t, d) in dst.iter_mut().enumerate() {
                *d = self.data[t * self.cols + ch];
            }
        }
        Ok(fm)
    }
}
