//! Synthetic parameter volumes with spatial smoothness and the multi-shell
//! DWI volumes they produce.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::noddi::{add_rician_noise, NoddiParams, SignalModel, TissueConstants};
use crate::sphere::{GradientScheme, UnitDirection};

pub const MIN_PHANTOM_DIM: usize = 8;
pub const VIC_RANGE: (f64, f64) = (0.1, 0.9);
pub const OD_RANGE: (f64, f64) = (0.04, 0.9);
pub const VISO_RANGE: (f64, f64) = (0.0, 0.9);
/// Fraction of voxels whose viso lands in `[0, VISO_LOW_CAP]`.
pub const VISO_LOW_FRACTION: f64 = 0.8;
pub const VISO_LOW_CAP: f64 = 0.2;
const SMOOTHING_PASSES: usize = 3;

pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Linear index with x fastest.
#[inline]
pub fn voxel_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// Ground-truth (or estimated) NODDI maps over a 3D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVolume {
    pub dims: Dims,
    pub vic: Vec<f64>,
    pub viso: Vec<f64>,
    pub od: Vec<f64>,
    pub mu: Vec<UnitDirection>,
    pub mask: Vec<bool>,
}

impl ParameterVolume {
    /// A volume of constant parameters, fully foreground.
    pub fn uniform(dims: Dims, p: NoddiParams) -> Self {
        let n = voxel_count(dims);
        Self {
            dims,
            vic: vec![p.vic; n],
            viso: vec![p.viso; n],
            od: vec![p.od; n],
            mu: vec![p.mu; n],
            mask: vec![true; n],
        }
    }

    pub fn n_voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn params_at(&self, i: usize) -> NoddiParams {
        NoddiParams { vic: self.vic[i], viso: self.viso[i], od: self.od[i], mu: self.mu[i] }
    }

    /// The scalar map for target channel `k` (0 = vic, 1 = viso, 2 = od).
    pub fn channel(&self, k: usize) -> &[f64] {
        match k {
            0 => &self.vic,
            1 => &self.viso,
            2 => &self.od,
            _ => panic!("parameter channel {k} out of range"),
        }
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut Vec<f64> {
        match k {
            0 => &mut self.vic,
            1 => &mut self.viso,
            2 => &mut self.od,
            _ => panic!("parameter channel {k} out of range"),
        }
    }

    /// Drops `border` voxels from every face.
    pub fn crop(&self, border: usize) -> Result<ParameterVolume> {
        if self.dims.iter().any(|&d| d <= 2 * border) {
            return Err(Error::Dimension(format!("cannot crop {border} from {:?}", self.dims)));
        }
        let nd = [self.dims[0] - 2 * border, self.dims[1] - 2 * border, self.dims[2] - 2 * border];
        let n = voxel_count(nd);
        let mut out = ParameterVolume {
            dims: nd,
            vic: Vec::with_capacity(n),
            viso: Vec::with_capacity(n),
            od: Vec::with_capacity(n),
            mu: Vec::with_capacity(n),
            mask: Vec::with_capacity(n),
        };
        for z in 0..nd[2] {
            for y in 0..nd[1] {
                for x in 0..nd[0] {
                    let i = voxel_index(self.dims, x + border, y + border, z + border);
                    out.vic.push(self.vic[i]);
                    out.viso.push(self.viso[i]);
                    out.od.push(self.od[i]);
                    out.mu.push(self.mu[i]);
                    out.mask.push(self.mask[i]);
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_voxels();
        if [self.vic.len(), self.viso.len(), self.od.len(), self.mu.len(), self.mask.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Dimension("parameter field length does not match dims".into()));
        }
        for i in 0..n {
            if !(self.vic[i].is_finite() && self.viso[i].is_finite() && self.od[i].is_finite()) {
                return Err(Error::Domain(format!("non-finite parameter at voxel {i}")));
            }
            if self.mask[i] {
                self.params_at(i).validate()?;
            }
        }
        Ok(())
    }
}

fn white_noise(n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// One pass of a 3×3×3 box filter with replicated edges, done separably.
fn box_filter(field: &[f64], dims: Dims) -> Vec<f64> {
    let mut cur = field.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x, y, z];
                    let mut s = 0.0;
                    for off in [-1i64, 0, 1] {
                        let mut q = p;
                        q[axis] = (p[axis] as i64 + off).clamp(0, dims[axis] as i64 - 1) as usize;
                        s += cur[voxel_index(dims, q[0], q[1], q[2])];
                    }
                    next[voxel_index(dims, x, y, z)] = s / 3.0;
                }
            }
        }
        cur = next;
    }
    cur
}

fn smoothed_noise(dims: Dims, seed: u64, stream: u64) -> Vec<f64> {
    let mut f = white_noise(voxel_count(dims), seed, stream);
    for _ in 0..SMOOTHING_PASSES {
        f = box_filter(&f, dims);
    }
    f
}

fn min_max(f: &[f64]) -> (f64, f64) {
    f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn affine_map(f: &[f64], range: (f64, f64)) -> Vec<f64> {
    let (lo, hi) = min_max(f);
    let span = (hi - lo).max(1e-300);
    f.iter().map(|v| (range.0 + (v - lo) / span * (range.1 - range.0)).clamp(range.0, range.1)).collect()
}

/// Piecewise-affine map sending the lowest `VISO_LOW_FRACTION` of voxels into
/// `[0, VISO_LOW_CAP]` and the rest into `[VISO_LOW_CAP, 0.9]`.
fn skewed_map(f: &[f64]) -> Vec<f64> {
    let mut sorted = f.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let k = ((sorted.len() as f64 * VISO_LOW_FRACTION).ceil() as usize).clamp(1, sorted.len()) - 1;
    let pivot = sorted[k];
    f.iter()
        .map(|&v| {
            let out = if v <= pivot {
                VISO_RANGE.0 + (v - lo) / (pivot - lo).max(1e-300) * (VISO_LOW_CAP - VISO_RANGE.0)
            } else {
                VISO_LOW_CAP + (v - pivot) / (hi - pivot).max(1e-300) * (VISO_RANGE.1 - VISO_LOW_CAP)
            };
            out.clamp(VISO_RANGE.0, VISO_RANGE.1)
        })
        .collect()
}

/// Rounded-box foreground: `|u|^4 + |v|^4 + |w|^4 <= 1.5` in normalized
/// coordinates, which trims the edges and corners of the grid.
fn rounded_box_mask(dims: Dims) -> Vec<bool> {
    let mut mask = Vec::with_capacity(voxel_count(dims));
    let c = |i: usize, n: usize| (2.0 * (i as f64 + 0.5) / n as f64 - 1.0).powi(4);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                mask.push(c(x, dims[0]) + c(y, dims[1]) + c(z, dims[2]) <= 1.5);
            }
        }
    }
    mask
}

pub fn generate_parameter_volume(dims: Dims, seed: u64) -> Result<ParameterVolume> {
    if dims.iter().any(|&d| d < MIN_PHANTOM_DIM) {
        return Err(Error::Domain(format!(
            "phantom dims {dims:?} too small; each must be >= {MIN_PHANTOM_DIM}"
        )));
    }
    let vic = affine_map(&smoothed_noise(dims, seed, 0), VIC_RANGE);
    let viso = skewed_map(&smoothed_noise(dims, seed, 1));
    let od = affine_map(&smoothed_noise(dims, seed, 2), OD_RANGE);
    let mx = smoothed_noise(dims, seed, 3);
    let my = smoothed_noise(dims, seed, 4);
    let mz = smoothed_noise(dims, seed, 5);
    let mu = (0..voxel_count(dims))
        .map(|i| UnitDirection::from_vector([mx[i], my[i], mz[i]]).unwrap_or(UnitDirection::Z))
        .collect();
    let pv = ParameterVolume { dims, vic, viso, od, mu, mask: rounded_box_mask(dims) };
    pv.validate()?;
    Ok(pv)
}

/// Multi-shell DWI data, voxel-major: each voxel holds `scheme.channel_count()`
/// values laid out as b0 channels first, then shells in order.
#[derive(Clone, Debug, PartialEq)]
pub struct DwiVolume {
    pub dims: Dims,
    pub scheme: GradientScheme,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
    pub normalized: bool,
}

impl DwiVolume {
    pub fn n_voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn n_channels(&self) -> usize {
        self.scheme.channel_count()
    }

    pub fn voxel(&self, i: usize) -> &[f64] {
        let c = self.n_channels();
        &self.data[i * c..(i + 1) * c]
    }

    /// Diffusion-weighted channels of voxel `i` (b0 channels skipped).
    pub fn diffusion(&self, i: usize) -> &[f64] {
        &self.voxel(i)[self.scheme.b0_count()..]
    }
}

/// Synthesizes every foreground voxel on `scheme`, sets b0 channels to 1 and
/// applies Rician noise at `snr` (infinite = noiseless). Background voxels
/// are zero. Noise streams are keyed per voxel, so the result does not depend
/// on the execution strategy.
pub fn generate_dwi(
    pv: &ParameterVolume,
    scheme: &GradientScheme,
    consts: &TissueConstants,
    snr: f64,
    seed: u64,
    exec: Exec,
) -> Result<DwiVolume> {
    pv.validate()?;
    if scheme.shells().is_empty() {
        return Err(Error::EmptyScheme);
    }
    if !(snr > 0.0) {
        return Err(Error::Domain(format!("snr {snr} must be > 0")));
    }
    let model = SignalModel::new(*consts);
    let stick: Vec<Vec<f64>> =
        scheme.shells().iter().map(|s| model.stick_coefficients(s.bvalue)).collect();
    let nc = scheme.channel_count();
    let b0 = scheme.b0_count();
    let voxels = exec.try_map(pv.n_voxels(), |i| -> Result<Vec<f64>> {
        if !pv.mask[i] {
            return Ok(vec![0.0; nc]);
        }
        let mut dw = Vec::with_capacity(nc - b0);
        model.scheme_signals(&pv.params_at(i), scheme, &stick, &mut dw)?;
        let mut out = vec![1.0; b0];
        out.extend_from_slice(&dw);
        if snr.is_finite() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            for v in out.iter_mut() {
                *v = add_rician_noise(*v, snr, &mut rng)?;
            }
        }
        Ok(out)
    })?;
    Ok(DwiVolume {
        dims: pv.dims,
        scheme: scheme.clone(),
        data: voxels.concat(),
        mask: pv.mask.clone(),
        normalized: false,
    })
}
