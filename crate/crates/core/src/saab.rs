//! Unsupervised representation learning with the Saab transform.
//!
//! A [`SaabKernel`] is an affine transform `y_m = a_m·x + b_m` whose first
//! anchor is the fixed DC vector `(1/√N)(1, …, 1)` and whose remaining anchors
//! are principal components of the DC-removed inputs. The channel-wise variant
//! fits one kernel per parent channel on its own `3×3×3` neighbourhood, which
//! gives every output channel a path back to the input image.
//!
//! The encoder cascades four such levels with `(2×2)×1` max-pooling in
//! between; the level-`i` grid is `(H/2^(i-1), W/2^(i-1), D)`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::volume::{max_pool, FeatureTensor, Shape3, Volume3D};
use crate::{derive_seed, Error, Result};

/// Number of voxels in a `3×3×3` neighbourhood.
pub const WINDOW: usize = 27;

/// Offsets of the `3×3×3` neighbourhood in lexicographic `(dx, dy, dz)` order.
pub fn window_offsets() -> [[isize; 3]; WINDOW] {
    std::array::from_fn(|i| [i as isize / 9 - 1, (i as isize / 3) % 3 - 1, i as isize % 3 - 1])
}

/// In-plane `3×3` offsets: the eight neighbours in lexicographic order, then
/// the centre.
pub fn plane_offsets() -> [[isize; 2]; 9] {
    let mut out = [[0; 2]; 9];
    let mut k = 0;
    for dx in -1..=1 {
        for dy in -1..=1 {
            if (dx, dy) != (0, 0) {
                out[k] = [dx, dy];
                k += 1;
            }
        }
    }
    out
}

#[inline]
fn dot(a: &[f32], x: &[f32]) -> f64 {
    a.iter().zip(x).map(|(&p, &q)| f64::from(p) * f64::from(q)).sum()
}

/// Learned anchors, biases and energies of one Saab transform.
#[derive(Clone, Debug, PartialEq)]
pub struct SaabKernel {
    dim: usize,
    /// `M × N`, row 0 is the DC anchor.
    anchors: Vec<f32>,
    bias: Vec<f32>,
    /// Explained-energy fraction per retained channel.
    energy: Vec<f64>,
}

impl SaabKernel {
    pub fn from_parts(dim: usize, anchors: Vec<f32>, bias: Vec<f32>, energy: Vec<f64>) -> Result<Self> {
        let m = bias.len();
        if dim == 0 || m == 0 || anchors.len() != m * dim || energy.len() != m {
            return Err(Error::Shape(format!(
                "saab kernel with N={dim}: {} anchor values, {m} biases, {} energies",
                anchors.len(),
                energy.len()
            )));
        }
        Ok(Self { dim, anchors, bias, energy })
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn anchor(&self, m: usize) -> &[f32] {
        &self.anchors[m * self.dim..(m + 1) * self.dim]
    }

    pub fn dc_anchor(&self) -> &[f32] {
        self.anchor(0)
    }

    pub fn ac_anchors(&self) -> impl Iterator<Item = &[f32]> {
        (1..self.channels()).map(|m| self.anchor(m))
    }

    pub fn anchors(&self) -> &[f32] {
        &self.anchors
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn energy(&self) -> &[f64] {
        &self.energy
    }

    /// `y_m = a_m·x + b_m` for every retained channel.
    pub fn apply(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "saab input has {} values, kernel expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok((0..self.channels()).map(|m| self.response(m, x)).collect())
    }

    #[inline]
    pub fn response(&self, m: usize, x: &[f32]) -> f32 {
        (dot(self.anchor(m), x) + f64::from(self.bias[m])) as f32
    }
}

/// Orthonormal basis of the complement of `(1, …, 1)`, as `N × (N-1)`.
fn helmert_basis(n: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n, n - 1);
    for k in 1..n {
        let norm = ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            q[(i, k - 1)] = 1.0 / norm;
        }
        q[(k, k - 1)] = -(k as f64) / norm;
    }
    q
}

/// Fits a Saab kernel on `windows`, a row-major `samples × dim` matrix.
///
/// Channels are retained (DC first, then AC by decreasing energy) until the
/// cumulative energy reaches `energy_threshold`.
pub fn fit_saab(windows: &[f32], dim: usize, energy_threshold: f64) -> Result<SaabKernel> {
    if dim < 2 || windows.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "{} window values do not form rows of dimension {dim}",
            windows.len()
        )));
    }
    let n = windows.len() / dim;
    if n < dim {
        return Err(Error::InsufficientData(format!(
            "saab fit needs at least {dim} samples, got {n}"
        )));
    }
    if let Some(i) = windows.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite window value in sample {}", i / dim)));
    }
    let rows = || windows.chunks_exact(dim);
    let inv_sqrt_n = 1.0 / (dim as f64).sqrt();

    // pass 1: means of the DC coefficient and of the AC part
    let mut dc_mean = 0.0;
    let mut ac_mean = vec![0.0f64; dim];
    for x in rows() {
        let s: f64 = x.iter().map(|&v| f64::from(v)).sum();
        let m = s / dim as f64;
        dc_mean += s * inv_sqrt_n;
        for (acc, &v) in ac_mean.iter_mut().zip(x) {
            *acc += f64::from(v) - m;
        }
    }
    dc_mean /= n as f64;
    ac_mean.iter_mut().for_each(|v| *v /= n as f64);

    // pass 2: centred second moments
    let mut dc_var = 0.0;
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centred = vec![0.0f64; dim];
    for x in rows() {
        let s: f64 = x.iter().map(|&v| f64::from(v)).sum();
        let m = s / dim as f64;
        dc_var += (s * inv_sqrt_n - dc_mean).powi(2);
        for i in 0..dim {
            centred[i] = f64::from(x[i]) - m - ac_mean[i];
        }
        for i in 0..dim {
            let ci = centred[i];
            for j in i..dim {
                cov[(i, j)] += ci * centred[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    dc_var /= n as f64;

    let q = helmert_basis(dim);
    let reduced = q.transpose() * &cov * &q;
    let eig = SymmetricEigen::new(reduced);
    let mut order: Vec<usize> = (0..dim - 1).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let lambdas: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let ac_energy: f64 = lambdas.iter().sum();
    let total = dc_var + ac_energy;

    let dc: Vec<f64> = vec![inv_sqrt_n; dim];
    let mut anchors64: Vec<Vec<f64>> = vec![dc];
    let mut energy = Vec::new();

    let ac_negligible = !(ac_energy > 1e-12 * total.max(f64::MIN_POSITIVE)) || ac_energy <= 1e-30;
    if ac_negligible {
        energy.push(1.0);
    } else {
        energy.push(dc_var / total);
        let mut cum = energy[0];
        for (r, &k) in order.iter().enumerate() {
            if cum >= energy_threshold {
                break;
            }
            let v = eig.eigenvectors.column(k);
            let mut a: Vec<f64> = (0..dim).map(|i| (0..dim - 1).map(|j| q[(i, j)] * v[j]).sum()).collect();
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            a.iter_mut().for_each(|v| *v /= norm);
            let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if let Some(first) = a.iter().find(|v| v.abs() > 1e-9 * peak) {
                if *first < 0.0 {
                    a.iter_mut().for_each(|v| *v = -*v);
                }
            }
            anchors64.push(a);
            let e = lambdas[r] / total;
            energy.push(e);
            cum += e;
        }
    }

    let anchors: Vec<f32> = anchors64.iter().flatten().map(|&v| v as f32).collect();
    let m = anchors64.len();
    let mut bias = vec![0.0f64; m];
    for x in rows() {
        for (k, b) in bias.iter_mut().enumerate() {
            let y = dot(&anchors[k * dim..(k + 1) * dim], x).abs();
            if y > *b {
                *b = y;
            }
        }
    }
    let bias = bias
        .into_iter()
        .map(|b| {
            let f = b as f32;
            if f64::from(f) < b {
                f.next_up()
            } else {
                f
            }
        })
        .collect();
    SaabKernel::from_parts(dim, anchors, bias, energy)
}

/// Concatenates the `3×3×3` neighbourhood of every voxel (replicate padded)
/// into a `27·F` feature vector.
pub fn neighborhood_3d(t: &FeatureTensor) -> FeatureTensor {
    let f = t.channels();
    let offsets = window_offsets();
    let mut data = Vec::with_capacity(t.voxels() * WINDOW * f);
    for v in 0..t.voxels() {
        let [x, y, z] = t.coords(v);
        for o in offsets {
            data.extend_from_slice(t.voxel_clamped(
                x as isize + o[0],
                y as isize + o[1],
                z as isize + o[2],
            ));
        }
    }
    FeatureTensor::new(t.shape(), WINDOW * f, data).expect("window tensor shape")
}

/// Gathers the 27-voxel neighbourhood of channel `c` around voxel `v`.
#[inline]
fn gather_channel(t: &FeatureTensor, v: usize, c: usize, out: &mut [f32; WINDOW]) {
    let [x, y, z] = t.coords(v);
    let s = t.shape();
    let interior = x > 0 && y > 0 && z > 0 && x + 1 < s[0] && y + 1 < s[1] && z + 1 < s[2];
    let ch = t.channels();
    if interior {
        let data = t.data();
        let mut k = 0;
        for dx in 0..3 {
            for dy in 0..3 {
                let base = t.voxel_index(x + dx - 1, y + dy - 1, z - 1);
                for dz in 0..3 {
                    out[k] = data[(base + dz) * ch + c];
                    k += 1;
                }
            }
        }
    } else {
        for (k, o) in window_offsets().iter().enumerate() {
            out[k] = t.voxel_clamped(x as isize + o[0], y as isize + o[1], z as isize + o[2])[c];
        }
    }
}

/// Concatenates the in-plane `3×3` neighbourhood (centre last), `F → 9F`.
pub fn expand_receptive_field(t: &FeatureTensor) -> FeatureTensor {
    let f = t.channels();
    let mut data = vec![0.0f32; t.voxels() * 9 * f];
    for v in 0..t.voxels() {
        expand_voxel(t, v, &mut data[v * 9 * f..(v + 1) * 9 * f]);
    }
    FeatureTensor::new(t.shape(), 9 * f, data).expect("expanded tensor shape")
}

/// Writes the `9F` expanded feature vector of voxel `v` into `out`.
#[inline]
pub fn expand_voxel(t: &FeatureTensor, v: usize, out: &mut [f32]) {
    let f = t.channels();
    let [x, y, z] = t.coords(v);
    for (k, o) in plane_offsets().iter().enumerate() {
        out[k * f..(k + 1) * f]
            .copy_from_slice(t.voxel_clamped(x as isize + o[0], y as isize + o[1], z as isize));
    }
}

/// Kernel fitted on one parent channel plus the children it keeps.
#[derive(Clone, Debug, PartialEq)]
pub struct ParentKernel {
    pub parent: usize,
    pub kernel: SaabKernel,
    /// Kernel channel indices retained as level outputs, ascending.
    pub keep: Vec<usize>,
    /// Energy of each kept child relative to the input image (root = 1).
    pub energies: Vec<f64>,
}

/// One channel-wise Saab level.
#[derive(Clone, Debug, PartialEq)]
pub struct CwSaabLevel {
    pub input_channels: usize,
    pub parents: Vec<ParentKernel>,
}

impl CwSaabLevel {
    pub fn output_channels(&self) -> usize {
        self.parents.iter().map(|p| p.keep.len()).sum()
    }

    /// `(parent channel, kernel channel)` for every output channel.
    pub fn channel_tree(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .flat_map(|p| p.keep.iter().map(move |&k| (p.parent, k)))
            .collect()
    }

    pub fn output_energies(&self) -> Vec<f64> {
        self.parents.iter().flat_map(|p| p.energies.iter().copied()).collect()
    }

    /// Neighbourhood construction followed by the per-parent Saab transforms.
    pub fn apply(&self, t: &FeatureTensor) -> Result<FeatureTensor> {
        if t.channels() != self.input_channels {
            return Err(Error::Shape(format!(
                "level expects {} input channels, got {}",
                self.input_channels,
                t.channels()
            )));
        }
        let out_c = self.output_channels();
        let mut data = vec![0.0f32; t.voxels() * out_c];
        let mut win = [0.0f32; WINDOW];
        for v in 0..t.voxels() {
            let out = &mut data[v * out_c..(v + 1) * out_c];
            let mut k = 0;
            for p in &self.parents {
                gather_channel(t, v, p.parent, &mut win);
                for &m in &p.keep {
                    out[k] = p.kernel.response(m, &win);
                    k += 1;
                }
            }
        }
        FeatureTensor::new(t.shape(), out_c, data)
    }

    pub fn param_count(&self) -> usize {
        self.parents.iter().map(|p| p.keep.len() * (p.kernel.input_dim() + 1)).sum()
    }

    /// Multiply-accumulates per voxel.
    pub fn macs_per_voxel(&self) -> usize {
        self.parents.iter().map(|p| p.keep.len() * p.kernel.input_dim()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub levels: usize,
    pub energy_threshold: f64,
    /// Children below this (root-relative) energy are dropped.
    pub discard_energy: f64,
    /// Upper bound on channels per level; the highest-energy children win.
    pub max_channels: usize,
    /// Windows sampled per parent channel and level for covariance estimation.
    pub max_windows: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            energy_threshold: 0.98,
            discard_energy: 1e-4,
            max_channels: 64,
            max_windows: 2_000_000,
        }
    }
}

/// Four cascaded channel-wise Saab levels.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub input_shape: Shape3,
    pub levels: Vec<CwSaabLevel>,
}

impl EncoderModel {
    /// Grid of every level for the training input shape.
    pub fn level_shapes(&self) -> Vec<Shape3> {
        level_shapes(self.input_shape, self.levels.len())
    }

    pub fn param_count(&self) -> usize {
        self.levels.iter().map(CwSaabLevel::param_count).sum()
    }
}

pub fn level_shapes(input: Shape3, levels: usize) -> Vec<Shape3> {
    let mut out = vec![input];
    for _ in 1..levels {
        let s = *out.last().unwrap();
        out.push([s[0].div_ceil(2), s[1].div_ceil(2), s[2]]);
    }
    out
}

/// Fits the encoder on unlabelled volumes of one common shape.
pub fn fit_encoder(volumes: &[Volume3D], cfg: &EncoderConfig, seed: u64) -> Result<EncoderModel> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::InsufficientData("encoder needs at least one volume".into()))?;
    let shape = first.shape();
    if let Some(v) = volumes.iter().find(|v| v.shape() != shape) {
        return Err(Error::Shape(format!(
            "encoder volumes must share one shape: {shape:?} vs {:?}",
            v.shape()
        )));
    }
    if cfg.levels == 0 {
        return Err(Error::Invalid("encoder needs at least one level".into()));
    }

    let mut current: Vec<FeatureTensor> = volumes.iter().map(FeatureTensor::from_volume).collect();
    let mut parent_energy = vec![1.0f64];
    let mut levels = Vec::with_capacity(cfg.levels);
    for li in 0..cfg.levels {
        if li > 0 {
            current = current.iter().map(max_pool).collect();
        }
        let per_vol = current[0].voxels();
        let total = per_vol * current.len();
        let k = cfg.max_windows.min(total);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "encoder-windows", li as u64));
        let mut picks = rand::seq::index::sample(&mut rng, total, k).into_vec();
        picks.sort_unstable();

        let in_c = current[0].channels();
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        let mut kernels: Vec<Option<SaabKernel>> = Vec::with_capacity(in_c);
        let mut windows = vec![0.0f32; picks.len() * WINDOW];
        let mut win = [0.0f32; WINDOW];
        for c in 0..in_c {
            for (row, &p) in picks.iter().enumerate() {
                gather_channel(&current[p / per_vol], p % per_vol, c, &mut win);
                windows[row * WINDOW..(row + 1) * WINDOW].copy_from_slice(&win);
            }
            match fit_saab(&windows, WINDOW, cfg.energy_threshold) {
                Ok(kern) => {
                    for (m, &e) in kern.energy().iter().enumerate() {
                        let abs = parent_energy[c] * e;
                        if abs >= cfg.discard_energy {
                            candidates.push((c, m, abs));
                        }
                    }
                    kernels.push(Some(kern));
                }
                Err(Error::InsufficientData(msg)) => {
                    log::warn!("level {}: dropping channel {c}: {msg}", li + 1);
                    kernels.push(None);
                }
                Err(e) => return Err(e),
            }
        }

        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
        candidates.truncate(cfg.max_channels.max(1));
        candidates.sort_by_key(|&(c, m, _)| (c, m));
        if candidates.is_empty() {
            return Err(Error::InsufficientData(format!("level {} retained no channels", li + 1)));
        }

        let mut parents: Vec<ParentKernel> = Vec::new();
        for (c, m, e) in candidates {
            match parents.last_mut() {
                Some(p) if p.parent == c => {
                    p.keep.push(m);
                    p.energies.push(e);
                }
                _ => parents.push(ParentKernel {
                    parent: c,
                    kernel: kernels[c].clone().expect("candidate from fitted kernel"),
                    keep: vec![m],
                    energies: vec![e],
                }),
            }
        }
        let level = CwSaabLevel {
            input_channels: in_c,
            parents,
        };
        parent_energy = level.output_energies();
        current = current.iter().map(|t| level.apply(t)).collect::<Result<_>>()?;
        log::debug!("encoder level {}: {} channels", li + 1, level.output_channels());
        levels.push(level);
    }
    Ok(EncoderModel {
        input_shape: shape,
        levels,
    })
}

/// Runs the encoder: per level, neighbourhood + c/w Saab, then max-pool into
/// the next level.
pub fn encode(model: &EncoderModel, vol: &Volume3D) -> Result<Vec<FeatureTensor>> {
    if vol.shape() != model.input_shape {
        return Err(Error::Shape(format!(
            "encoder trained on {:?}, got volume {:?}",
            model.input_shape,
            vol.shape()
        )));
    }
    let mut out = Vec::with_capacity(model.levels.len());
    let mut cur = FeatureTensor::from_volume(vol);
    for (i, level) in model.levels.iter().enumerate() {
        if i > 0 {
            cur = max_pool(out.last().unwrap());
        }
        out.push(level.apply(&cur)?);
    }
    Ok(out)
}
