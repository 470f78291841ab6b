//! Core 3D grid types and the primitives that operate on them.
//!
//! All grids use the `(H, W, D)` axis convention with `D` the through-plane
//! axis, stored row-major so that `D` is the fastest-varying index.

mod nifti;
mod ops;
mod phantom;

use crate::{Error, Result};

pub use nifti::{decode_nifti, encode_nifti, load_nifti, save_nifti};
pub use ops::{
    avg_pool, avg_pool_label, max_pool, pad_replicate, resize_linear, upsample_trilinear,
};
pub use phantom::{generate_phantom, Phantom, PhantomSpec, RegionIntensities};

pub type Shape3 = [usize; 3];

/// Dense scalar grid of shape `(H, W, D)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid3<T> {
    shape: Shape3,
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(shape: Shape3, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!("grid dimensions must be >= 1, got {shape:?}")));
        }
        let n = shape[0] * shape[1] * shape[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "grid {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape3, value: T) -> Self {
        assert!(shape.iter().all(|&n| n > 0), "empty grid shape {shape:?}");
        Self {
            shape,
            data: vec![value; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        assert!(shape.iter().all(|&n| n > 0), "empty grid shape {shape:?}");
        let mut data = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let z = idx % self.shape[2];
        let xy = idx / self.shape[2];
        [xy / self.shape[1], xy % self.shape[1], z]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    /// Reads with replicate (edge) padding for out-of-range coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, z: isize) -> T {
        let cx = x.clamp(0, self.shape[0] as isize - 1) as usize;
        let cy = y.clamp(0, self.shape[1] as isize - 1) as usize;
        let cz = z.clamp(0, self.shape[2] as isize - 1) as usize;
        self.get(cx, cy, cz)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
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

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid3<U> {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Copies the box `[start, start + size)` out of the grid.
    pub fn crop(&self, start: [usize; 3], size: Shape3) -> Result<Self> {
        for a in 0..3 {
            if size[a] == 0 || start[a] + size[a] > self.shape[a] {
                return Err(Error::Shape(format!(
                    "crop box start {start:?} size {size:?} exceeds grid {:?}",
                    self.shape
                )));
            }
        }
        Ok(Self::from_fn(size, |x, y, z| {
            self.get(start[0] + x, start[1] + y, start[2] + z)
        }))
    }
}

impl Grid3<f64> {
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Image volume with physical voxel spacing (mm) and origin (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    pub grid: Grid3<f32>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Volume3D {
    pub fn new(grid: Grid3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Invalid(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        if let Some(i) = grid.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite voxel value at {:?}",
                grid.coords(i)
            )));
        }
        Ok(Self { grid, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn from_grid(grid: Grid3<f32>) -> Result<Self> {
        Self::new(grid, [1.0; 3], [0.0; 3])
    }

    pub fn shape(&self) -> Shape3 {
        self.grid.shape()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.grid
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Per-voxel probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Grid3<f64>);

impl ProbMap {
    pub fn new(grid: Grid3<f64>) -> Result<Self> {
        if let Some(i) = grid.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!(
                "probability {} at {:?} outside [0, 1]",
                grid.data()[i],
                grid.coords(i)
            )));
        }
        Ok(Self(grid))
    }

    /// Clamps every value into `[0, 1]`; NaN becomes 0.
    pub fn from_clamped(mut grid: Grid3<f64>) -> Self {
        for v in grid.data_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self(grid)
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self(Grid3::filled(shape, 0.0))
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self(mask.grid().map(f64::from))
    }

    pub fn grid(&self) -> &Grid3<f64> {
        &self.0
    }

    pub fn into_grid(self) -> Grid3<f64> {
        self.0
    }

    pub fn shape(&self) -> Shape3 {
        self.0.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

/// Voxel mask with values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask(Grid3<u8>);

impl BinaryMask {
    pub fn new(grid: Grid3<u8>) -> Result<Self> {
        if let Some(i) = grid.data().iter().position(|&v| v > 1) {
            return Err(Error::Invalid(format!(
                "mask value {} at {:?} is not 0/1",
                grid.data()[i],
                grid.coords(i)
            )));
        }
        Ok(Self(grid))
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self(Grid3::filled(shape, 0))
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        Self(Grid3::from_fn(shape, |x, y, z| u8::from(f(x, y, z))))
    }

    /// Reads a mask from a volume, requiring every value to be exactly 0 or 1.
    pub fn from_volume(vol: &Volume3D) -> Result<Self> {
        if let Some(i) = vol.grid.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid(format!(
                "mask value {} at {:?} is not 0/1",
                vol.grid.data()[i],
                vol.grid.coords(i)
            )));
        }
        Ok(Self(vol.grid.map(|v| u8::from(v == 1.0))))
    }

    pub fn to_volume(&self, spacing: [f64; 3], origin: [f64; 3]) -> Result<Volume3D> {
        Volume3D::new(self.0.map(f32::from), spacing, origin)
    }

    pub fn grid(&self) -> &Grid3<u8> {
        &self.0
    }

    pub fn shape(&self) -> Shape3 {
        self.0.shape()
    }

    pub fn data(&self) -> &[u8] {
        self.0.data()
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1).count()
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        self.0.get(x, y, z) == 1
    }

    /// Mean voxel coordinate of the foreground, `None` when empty.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        for (i, &v) in self.0.data().iter().enumerate() {
            if v == 1 {
                let c = self.0.coords(i);
                for a in 0..3 {
                    sum[a] += c[a] as f64;
                }
                n += 1;
            }
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }
}

/// Per-voxel feature vectors on one encoder level grid, voxel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    shape: Shape3,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(shape: Shape3, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || shape.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!(
                "feature tensor needs non-empty grid and channels, got {shape:?} x {channels}"
            )));
        }
        let n = shape[0] * shape[1] * shape[2] * channels;
        if data.len() != n {
            return Err(Error::Shape(format!(
                "feature tensor {shape:?} x {channels} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, channels, data })
    }

    pub fn from_volume(vol: &Volume3D) -> Self {
        Self {
            shape: vol.shape(),
            channels: 1,
            data: vol.grid.data().to_vec(),
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn voxel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Feature vector at possibly out-of-range coordinates (replicate padding).
    #[inline]
    pub fn voxel_clamped(&self, x: isize, y: isize, z: isize) -> &[f32] {
        let cx = x.clamp(0, self.shape[0] as isize - 1) as usize;
        let cy = y.clamp(0, self.shape[1] as isize - 1) as usize;
        let cz = z.clamp(0, self.shape[2] as isize - 1) as usize;
        self.voxel(self.voxel_index(cx, cy, cz))
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let z = idx % self.shape[2];
        let xy = idx / self.shape[2];
        [xy / self.shape[1], xy % self.shape[1], z]
    }

    /// One channel as a scalar grid.
    pub fn channel(&self, c: usize) -> Grid3<f32> {
        let data = (0..self.voxels()).map(|v| self.data[v * self.channels + c]).collect();
        Grid3 { shape: self.shape, data }
    }
}

/// Number of voxels of a shape.
pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}
