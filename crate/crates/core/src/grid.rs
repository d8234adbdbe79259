//! Voxel grids and the axis primitives shared by every other module.
//!
//! Axis order is always (depth, height, width) with width varying fastest
//! in memory, which is also the NIfTI on-disk order (x fastest).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(depth: usize, height: usize, width: usize) -> Self {
        Dims { depth, height, width }
    }

    pub const fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn len(self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn get(self, axis: Axis) -> usize {
        self.to_array()[axis.index()]
    }

    #[inline]
    pub fn index(self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    #[inline]
    pub fn coords(self, i: usize) -> [usize; 3] {
        let x = i % self.width;
        let y = (i / self.width) % self.height;
        let z = i / (self.width * self.height);
        [z, y, x]
    }

    /// Neighbour one step along `axis`, or `None` past the grid bounds.
    #[inline]
    pub fn step(self, c: [usize; 3], axis: usize, forward: bool) -> Option<[usize; 3]> {
        let mut out = c;
        if forward {
            if c[axis] + 1 >= self.to_array()[axis] {
                return None;
            }
            out[axis] += 1;
        } else {
            if c[axis] == 0 {
                return None;
            }
            out[axis] -= 1;
        }
        Some(out)
    }

    pub fn is_border(self, c: [usize; 3]) -> bool {
        let d = self.to_array();
        (0..3).any(|a| c[a] == 0 || c[a] + 1 == d[a])
    }

    pub fn max(self, other: Dims) -> Dims {
        Dims::new(
            self.depth.max(other.depth),
            self.height.max(other.height),
            self.width.max(other.width),
        )
    }

    pub fn is_divisible_by(self, f: usize) -> bool {
        self.to_array().iter().all(|&d| d % f == 0)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.depth, self.height, self.width)
    }
}

/// Physical voxel size in millimetres, (z, y, x) to match [`Dims`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub z: f64,
    pub y: f64,
    pub x: f64,
}

impl Spacing {
    pub const fn new(z: f64, y: f64, x: f64) -> Self {
        Spacing { z, y, x }
    }

    pub const fn isotropic(s: f64) -> Self {
        Spacing::new(s, s, s)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.z, self.y, self.x]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Spacing::new(a[0], a[1], a[2])
    }

    pub fn is_valid(self) -> bool {
        self.to_array().iter().all(|s| s.is_finite() && *s > 0.0)
    }

    pub fn voxel_volume(self) -> f64 {
        self.z * self.y * self.x
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::isotropic(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Depth,
    Height,
    Width,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Depth, Axis::Height, Axis::Width];

    pub fn index(self) -> usize {
        match self {
            Axis::Depth => 0,
            Axis::Height => 1,
            Axis::Width => 2,
        }
    }
}

/// A subset of the three spatial axes, used for flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlipSet(u8);

impl FlipSet {
    pub const NONE: FlipSet = FlipSet(0);
    pub const ALL: FlipSet = FlipSet(0b111);

    pub fn from_axes(axes: &[Axis]) -> Self {
        FlipSet(axes.iter().fold(0, |m, a| m | (1 << a.index())))
    }

    pub fn from_bits(bits: u8) -> Self {
        FlipSet(bits & 0b111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, axis: Axis) -> bool {
        self.0 & (1 << axis.index()) != 0
    }

    pub fn has_index(self, axis: usize) -> bool {
        self.0 & (1 << axis) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// All eight subsets in a fixed order, starting with the empty set.
    pub fn all_subsets() -> [FlipSet; 8] {
        std::array::from_fn(|i| FlipSet(i as u8))
    }

    /// Maps a coordinate through this flip for a grid of `dims`.
    #[inline]
    pub fn apply(self, c: [usize; 3], dims: [usize; 3]) -> [usize; 3] {
        let mut out = c;
        for a in 0..3 {
            if self.has_index(a) {
                out[a] = dims[a] - 1 - c[a];
            }
        }
        out
    }
}

/// One of the three orthogonal planes, named by its two in-plane axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    DepthHeight,
    DepthWidth,
    HeightWidth,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::DepthHeight, Plane::DepthWidth, Plane::HeightWidth];

    pub fn axes(self) -> (usize, usize) {
        match self {
            Plane::DepthHeight => (0, 1),
            Plane::DepthWidth => (0, 2),
            Plane::HeightWidth => (1, 2),
        }
    }
}

/// Risk-zone label vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Zone {
    /// Tumor core and non-brain.
    Outside = 0,
    LowRisk = 1,
    MediumRisk = 2,
    HighRisk = 3,
}

impl Zone {
    pub const ALL: [Zone; 4] = [Zone::Outside, Zone::LowRisk, Zone::MediumRisk, Zone::HighRisk];
    pub const SCORED: [Zone; 3] = [Zone::LowRisk, Zone::MediumRisk, Zone::HighRisk];
    pub const COUNT: usize = 4;

    pub fn from_u8(v: u8) -> Option<Zone> {
        Zone::ALL.get(v as usize).copied()
    }

    pub fn label(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid<T> {
    dims: Dims,
    spacing: Spacing,
    data: Vec<T>,
}

pub type Mask = VoxelGrid<bool>;
pub type ZoneGrid = VoxelGrid<u8>;

impl<T> VoxelGrid<T> {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Size(format!(
                "grid {dims} needs {} voxels, got {}",
                dims.len(),
                data.len()
            )));
        }
        if !spacing.is_valid() {
            return Err(Error::Invalid {
                key: "spacing".into(),
                value: format!("{:?}", spacing.to_array()),
                expected: "finite components > 0".into(),
            });
        }
        Ok(VoxelGrid { dims, spacing, data })
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.depth {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    data.push(f(z, y, x));
                }
            }
        }
        VoxelGrid { dims, spacing, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, c: [usize; 3]) -> &T {
        &self.data[self.dims.index(c[0], c[1], c[2])]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> VoxelGrid<U> {
        VoxelGrid {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_same_dims<U>(&self, other: &VoxelGrid<U>, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Size(format!(
                "{what}: dims {} vs {}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

impl<T: Copy> VoxelGrid<T> {
    pub fn filled(dims: Dims, spacing: Spacing, value: T) -> Self {
        VoxelGrid {
            dims,
            spacing,
            data: vec![value; dims.len()],
        }
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.dims.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.dims.index(z, y, x);
        self.data[i] = v;
    }

    /// Mirror the grid along every axis in `axes`. Applying the same flip
    /// twice is the identity.
    pub fn flip_axes(&self, axes: FlipSet) -> Self {
        if axes.is_empty() {
            return self.clone();
        }
        let d = self.dims.to_array();
        let data = (0..self.data.len())
            .map(|i| {
                let src = axes.apply(self.dims.coords(i), d);
                self.data[self.dims.index(src[0], src[1], src[2])]
            })
            .collect();
        VoxelGrid {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }

    /// Rotate by `quarter_turns` x 90 degrees in `plane`, following the
    /// `numpy.rot90(m, k, axes)` convention. Negative turns rotate the other
    /// way. Spacing components of the plane swap on odd turns.
    pub fn rot90(&self, plane: Plane, quarter_turns: i32) -> Self {
        let k = quarter_turns.rem_euclid(4);
        let mut out = self.clone();
        for _ in 0..k {
            out = out.rot90_once(plane);
        }
        out
    }

    fn rot90_once(&self, plane: Plane) -> Self {
        let (a, b) = plane.axes();
        let src_dims = self.dims.to_array();
        let mut dst = src_dims;
        dst.swap(a, b);
        let dst_dims = Dims::from_array(dst);
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.data.len() {
            let c = dst_dims.coords(i);
            let mut s = c;
            s[a] = c[b];
            s[b] = src_dims[b] - 1 - c[a];
            data.push(self.data[self.dims.index(s[0], s[1], s[2])]);
        }
        let mut sp = self.spacing.to_array();
        sp.swap(a, b);
        VoxelGrid {
            dims: dst_dims,
            spacing: Spacing::from_array(sp),
            data,
        }
    }

    /// Zero-pad (with `fill`) at the high end of each axis up to `target`.
    /// Axes already at least as large are kept.
    pub fn pad_to(&self, target: Dims, fill: T) -> Self {
        let out_dims = self.dims.max(target);
        if out_dims == self.dims {
            return self.clone();
        }
        let mut out = VoxelGrid::filled(out_dims, self.spacing, fill);
        for z in 0..self.dims.depth {
            for y in 0..self.dims.height {
                let s = self.dims.index(z, y, 0);
                let d = out_dims.index(z, y, 0);
                out.data[d..d + self.dims.width].copy_from_slice(&self.data[s..s + self.dims.width]);
            }
        }
        out
    }

    pub fn crop(&self, origin: [usize; 3], size: Dims) -> Result<Self> {
        let d = self.dims.to_array();
        let s = size.to_array();
        if (0..3).any(|a| origin[a] + s[a] > d[a]) {
            return Err(Error::OutOfBounds {
                detail: format!("crop {:?}+{} of {}", origin, size, self.dims),
            });
        }
        Ok(VoxelGrid::from_fn(size, self.spacing, |z, y, x| {
            self.get(origin[0] + z, origin[1] + y, origin[2] + x)
        }))
    }
}

impl<T: Copy + PartialEq> VoxelGrid<T> {
    pub fn count(&self, v: T) -> usize {
        self.data.iter().filter(|&&d| d == v).count()
    }
}

impl Mask {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Four co-registered modalities in canonical order
/// (T1/t1n, T1ce/t1c, T2/t2w, FLAIR/t2f).
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    modalities: [VoxelGrid<f32>; 4],
}

impl MultiModalVolume {
    pub const FLAIR: usize = 3;
    pub const NAMES: [&'static str; 4] = ["t1", "t1ce", "t2", "flair"];

    pub fn new(modalities: [VoxelGrid<f32>; 4]) -> Result<Self> {
        let first = &modalities[0];
        for (i, m) in modalities.iter().enumerate().skip(1) {
            if m.dims() != first.dims() || m.spacing() != first.spacing() {
                return Err(Error::Size(format!(
                    "modality {} has geometry {} {:?}, expected {} {:?}",
                    Self::NAMES[i],
                    m.dims(),
                    m.spacing().to_array(),
                    first.dims(),
                    first.spacing().to_array()
                )));
            }
        }
        Ok(MultiModalVolume { modalities })
    }

    pub fn dims(&self) -> Dims {
        self.modalities[0].dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.modalities[0].spacing()
    }

    pub fn modality(&self, i: usize) -> &VoxelGrid<f32> {
        &self.modalities[i]
    }

    pub fn modalities(&self) -> &[VoxelGrid<f32>; 4] {
        &self.modalities
    }

    pub fn flair(&self) -> &VoxelGrid<f32> {
        &self.modalities[Self::FLAIR]
    }

    pub fn map(&self, mut f: impl FnMut(&VoxelGrid<f32>) -> VoxelGrid<f32>) -> Self {
        MultiModalVolume {
            modalities: std::array::from_fn(|i| f(&self.modalities[i])),
        }
    }
}
