//! Masked MSE, PSNR and windowed SSIM between parameter volumes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::phantom::{Dims, ParameterVolume};

/// PSNR reported for a perfect prediction.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PARAMETER_NAMES: [&str; 3] = ["vic", "viso", "od"];
pub const CSV_HEADER: &str = "method,sampling_mode,n_dirs_shell1,n_dirs_shell2,mse,psnr,ssim";

fn check_pair(pred: &ParameterVolume, truth: &ParameterVolume, mask: &[bool]) -> Result<()> {
    if pred.dims != truth.dims || mask.len() != truth.n_voxels() {
        return Err(Error::Dimension(format!("prediction {:?} vs truth {:?}", pred.dims, truth.dims)));
    }
    Ok(())
}

/// MSE of one scalar channel over masked voxels.
pub fn mse_channel(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, t), &m) in pred.iter().zip(truth).zip(mask) {
        if m {
            sum += (p - t) * (p - t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(sum / n as f64)
}

/// Mean squared difference over masked voxels and the three parameters.
pub fn mse(pred: &ParameterVolume, truth: &ParameterVolume, mask: &[bool]) -> Result<f64> {
    check_pair(pred, truth, mask)?;
    let mut total = 0.0;
    for k in 0..3 {
        total += mse_channel(pred.channel(k), truth.channel(k), mask)?;
    }
    Ok(total / 3.0)
}

/// `10 log10(peak^2 / mse)`; infinite for a zero error.
pub fn psnr(mse: f64, peak: f64) -> Result<f64> {
    if !(mse >= 0.0) {
        return Err(Error::Domain(format!("mse {mse} must be >= 0")));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR as written to reports: capped at [`PSNR_CAP`].
pub fn reported_psnr(mse: f64) -> Result<f64> {
    Ok(psnr(mse, 1.0)?.min(PSNR_CAP))
}

/// Inclusive-prefix sums over a 3D grid, padded by one on each axis.
struct SummedTable {
    nx: usize,
    ny: usize,
    table: Vec<f64>,
}

impl SummedTable {
    fn new(dims: Dims, f: impl Fn(usize) -> f64) -> Self {
        let (nx, ny, nz) = (dims[0] + 1, dims[1] + 1, dims[2] + 1);
        let mut table = vec![0.0; nx * ny * nz];
        let at = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
        for z in 1..nz {
            for y in 1..ny {
                for x in 1..nx {
                    let v = f((x - 1) + dims[0] * ((y - 1) + dims[1] * (z - 1)));
                    table[at(x, y, z)] = v + table[at(x - 1, y, z)] + table[at(x, y - 1, z)] + table[at(x, y, z - 1)]
                        - table[at(x - 1, y - 1, z)]
                        - table[at(x - 1, y, z - 1)]
                        - table[at(x, y - 1, z - 1)]
                        + table[at(x - 1, y - 1, z - 1)];
                }
            }
        }
        Self { nx, ny, table }
    }

    /// Sum over the half-open box `lo..hi`.
    fn sum(&self, lo: [usize; 3], hi: [usize; 3]) -> f64 {
        let at = |x: usize, y: usize, z: usize| self.table[x + self.nx * (y + self.ny * z)];
        at(hi[0], hi[1], hi[2]) - at(lo[0], hi[1], hi[2]) - at(hi[0], lo[1], hi[2]) - at(hi[0], hi[1], lo[2])
            + at(lo[0], lo[1], hi[2])
            + at(lo[0], hi[1], lo[2])
            + at(hi[0], lo[1], lo[2])
            - at(lo[0], lo[1], lo[2])
    }
}

/// Mean local SSIM of one scalar channel. Each masked voxel's statistics
/// come from the masked voxels of the 7^3 window centered on it (clipped at
/// the volume boundary).
pub fn ssim_channel(pred: &[f64], truth: &[f64], mask: &[bool], dims: Dims) -> Result<f64> {
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::Window { dims, window: SSIM_WINDOW });
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let m = |i: usize| if mask[i] { 1.0 } else { 0.0 };
    let count = SummedTable::new(dims, m);
    let sx = SummedTable::new(dims, |i| m(i) * pred[i]);
    let sy = SummedTable::new(dims, |i| m(i) * truth[i]);
    let sxx = SummedTable::new(dims, |i| m(i) * pred[i] * pred[i]);
    let syy = SummedTable::new(dims, |i| m(i) * truth[i] * truth[i]);
    let sxy = SummedTable::new(dims, |i| m(i) * pred[i] * truth[i]);
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut n = 0usize;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = x + dims[0] * (y + dims[1] * z);
                if !mask[i] {
                    continue;
                }
                let c = [x, y, z];
                let lo = [0, 1, 2].map(|a| c[a].saturating_sub(r));
                let hi = [0, 1, 2].map(|a| (c[a] + r + 1).min(dims[a]));
                let k = count.sum(lo, hi);
                let mx = sx.sum(lo, hi) / k;
                let my = sy.sum(lo, hi) / k;
                let vx = sxx.sum(lo, hi) / k - mx * mx;
                let vy = syy.sum(lo, hi) / k - my * my;
                let cxy = sxy.sum(lo, hi) / k - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(total / n as f64)
}

/// SSIM averaged over the three parameter channels.
pub fn ssim(pred: &ParameterVolume, truth: &ParameterVolume, mask: &[bool]) -> Result<f64> {
    check_pair(pred, truth, mask)?;
    let mut total = 0.0;
    for k in 0..3 {
        total += ssim_channel(pred.channel(k), truth.channel(k), mask, truth.dims)?;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ParamMetrics {
    pub mse: f64,
    /// Capped at [`PSNR_CAP`].
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// vic, viso, od.
    pub per_parameter: [ParamMetrics; 3],
    pub mean: ParamMetrics,
    pub voxels: usize,
}

pub fn evaluate(pred: &ParameterVolume, truth: &ParameterVolume, mask: &[bool]) -> Result<MetricsReport> {
    check_pair(pred, truth, mask)?;
    let mut per = [ParamMetrics::default(); 3];
    for (k, pm) in per.iter_mut().enumerate() {
        let m = mse_channel(pred.channel(k), truth.channel(k), mask)?;
        *pm = ParamMetrics {
            mse: m,
            psnr: reported_psnr(m)?,
            ssim: ssim_channel(pred.channel(k), truth.channel(k), mask, truth.dims)?,
        };
    }
    let mean_mse = per.iter().map(|p| p.mse).sum::<f64>() / 3.0;
    let mean = ParamMetrics {
        mse: mean_mse,
        psnr: reported_psnr(mean_mse)?,
        ssim: per.iter().map(|p| p.ssim).sum::<f64>() / 3.0,
    };
    Ok(MetricsReport { per_parameter: per, mean, voxels: mask.iter().filter(|&&m| m).count() })
}

/// Metrics over several test volumes: per-volume values averaged, plus the
/// MSE pooled over all evaluated voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateMetrics {
    pub averaged: ParamMetrics,
    pub pooled_mse: f64,
    pub pooled_psnr: f64,
    pub volumes: usize,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateMetrics> {
    if reports.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let n = reports.len() as f64;
    let averaged = ParamMetrics {
        mse: reports.iter().map(|r| r.mean.mse).sum::<f64>() / n,
        psnr: reports.iter().map(|r| r.mean.psnr).sum::<f64>() / n,
        ssim: reports.iter().map(|r| r.mean.ssim).sum::<f64>() / n,
    };
    let voxels: usize = reports.iter().map(|r| r.voxels).sum();
    let pooled_mse = reports.iter().map(|r| r.mean.mse * r.voxels as f64).sum::<f64>() / voxels as f64;
    Ok(AggregateMetrics { averaged, pooled_mse, pooled_psnr: reported_psnr(pooled_mse)?, volumes: reports.len() })
}

/// One CSV line of an evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub method: String,
    pub sampling_mode: String,
    pub n_dirs_shell1: usize,
    pub n_dirs_shell2: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl CsvRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{:.9e},{:.6},{:.9}",
            self.method, self.sampling_mode, self.n_dirs_shell1, self.n_dirs_shell2, self.mse, self.psnr, self.ssim
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::CorruptFile(format!("CSV row needs 7 fields: {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::CorruptFile(format!("bad number {s:?}")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::CorruptFile(format!("bad count {s:?}")));
        Ok(Self {
            method: f[0].to_string(),
            sampling_mode: f[1].to_string(),
            n_dirs_shell1: int(f[2])?,
            n_dirs_shell2: int(f[3])?,
            mse: num(f[4])?,
            psnr: num(f[5])?,
            ssim: num(f[6])?,
        })
    }
}

pub fn rows_to_csv(rows: &[CsvRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.to_line());
    }
    s
}

/// Parses a CSV table, skipping the header line.
pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && l.trim() != CSV_HEADER)
        .map(CsvRow::parse)
        .collect()
}
