//! File formats and dataset mechanics: FSL-style gradient tables, the RVOL
//! binary container, key=value manifests, b0 normalization and 4D patch
//! extraction.
//!
//! RVOL layout: one ASCII header line
//! `RVOL1 <nx> <ny> <nz> <nc> dtype=f32 order=xyzc\n` followed by exactly
//! `nx*ny*nz*nc` little-endian f32 values with x varying fastest and the
//! channel slowest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::phantom::{voxel_count, voxel_index, Dims, DwiVolume, ParameterVolume};
use crate::sphere::{GradientScheme, Shell, UnitDirection};

pub const DEFAULT_B0_THRESHOLD: f64 = 50.0;
pub const DEFAULT_SHELL_TOLERANCE: f64 = 50.0;
pub const DEFAULT_MIN_SHELL_SIZE: usize = 6;
const BVEC_NORM_TOLERANCE: f64 = 1e-3;

/// How raw b-values are grouped into b0 channels and shells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShellGrouping {
    pub b0_threshold: f64,
    pub shell_tolerance: f64,
    /// Clusters smaller than this are reported as ungrouped channels.
    pub min_shell_size: usize,
}

impl Default for ShellGrouping {
    fn default() -> Self {
        Self {
            b0_threshold: DEFAULT_B0_THRESHOLD,
            shell_tolerance: DEFAULT_SHELL_TOLERANCE,
            min_shell_size: DEFAULT_MIN_SHELL_SIZE,
        }
    }
}

/// Original channel index of every b0 channel and of every (shell, direction).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMap {
    pub b0: Vec<usize>,
    pub shells: Vec<Vec<usize>>,
}

impl ChannelMap {
    /// Original channel indices in canonical order: b0 channels, then shells.
    pub fn canonical_order(&self) -> Vec<usize> {
        self.b0.iter().chain(self.shells.iter().flatten()).copied().collect()
    }
}

fn parse_reals(text: &str, what: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::MalformedTable(format!("bad {what} token {t:?}")))
                })
                .collect()
        })
        .collect()
}

pub fn parse_gradient_table(
    bvals_text: &str,
    bvecs_text: &str,
    grouping: &ShellGrouping,
) -> Result<(GradientScheme, ChannelMap)> {
    let bvals_rows = parse_reals(bvals_text, "bvals")?;
    if bvals_rows.len() != 1 {
        return Err(Error::MalformedTable(format!("bvals must have 1 row, found {}", bvals_rows.len())));
    }
    let bvals = &bvals_rows[0];
    let bvecs = parse_reals(bvecs_text, "bvecs")?;
    if bvecs.len() != 3 {
        return Err(Error::MalformedTable(format!("bvecs must have 3 rows, found {}", bvecs.len())));
    }
    if bvecs.iter().any(|r| r.len() != bvals.len()) {
        return Err(Error::MalformedTable(format!(
            "{} b-values but bvecs rows have {}/{}/{} columns",
            bvals.len(),
            bvecs[0].len(),
            bvecs[1].len(),
            bvecs[2].len()
        )));
    }
    if bvals.iter().any(|&b| b < 0.0) {
        return Err(Error::MalformedTable("negative b-value".into()));
    }

    let b0: Vec<usize> = (0..bvals.len()).filter(|&i| bvals[i] < grouping.b0_threshold).collect();
    let mut dw: Vec<usize> = (0..bvals.len()).filter(|&i| bvals[i] >= grouping.b0_threshold).collect();
    dw.sort_by(|&a, &b| bvals[a].total_cmp(&bvals[b]).then(a.cmp(&b)));

    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for &c in &dw {
        match clusters.last_mut() {
            Some(cl) if bvals[c] - bvals[cl[0]] <= 2.0 * grouping.shell_tolerance => cl.push(c),
            _ => clusters.push(vec![c]),
        }
    }

    let mut shells = Vec::with_capacity(clusters.len());
    let mut map = Vec::with_capacity(clusters.len());
    for mut cl in clusters {
        let mut bs: Vec<f64> = cl.iter().map(|&c| bvals[c]).collect();
        bs.sort_by(|a, b| a.total_cmp(b));
        let median = bs[bs.len() / 2];
        let nominal = (median / 10.0).round() * 10.0;
        if let Some(&bad) = cl.iter().find(|&&c| (bvals[c] - nominal).abs() > grouping.shell_tolerance) {
            return Err(Error::UngroupedChannel { channel: bad, bvalue: bvals[bad] });
        }
        if cl.len() < grouping.min_shell_size {
            let first = *cl.iter().min().unwrap();
            return Err(Error::UngroupedChannel { channel: first, bvalue: bvals[first] });
        }
        cl.sort_unstable();
        let directions = cl
            .iter()
            .map(|&c| {
                let v = [bvecs[0][c], bvecs[1][c], bvecs[2][c]];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if (norm - 1.0).abs() > BVEC_NORM_TOLERANCE {
                    return Err(Error::MalformedTable(format!("bvec {c} has norm {norm}")));
                }
                UnitDirection::from_vector(v)
            })
            .collect::<Result<Vec<_>>>()?;
        shells.push(Shell { bvalue: nominal, directions });
        map.push(cl);
    }
    let scheme = GradientScheme::new(shells, b0.len())?;
    Ok((scheme, ChannelMap { b0, shells: map }))
}

/// Writes a scheme as FSL text in canonical channel order (b0 first, b0
/// directions written as zero vectors).
pub fn format_gradient_table(scheme: &GradientScheme) -> (String, String) {
    let mut bvals = Vec::new();
    let mut rows = [Vec::new(), Vec::new(), Vec::new()];
    for _ in 0..scheme.b0_count() {
        bvals.push("0".to_string());
        rows.iter_mut().for_each(|r| r.push("0".to_string()));
    }
    for shell in scheme.shells() {
        for d in &shell.directions {
            bvals.push(format!("{}", shell.bvalue));
            for (r, v) in rows.iter_mut().zip(d.to_array()) {
                r.push(format!("{v:.17e}"));
            }
        }
    }
    let bvecs = rows.iter().map(|r| r.join(" ")).collect::<Vec<_>>().join("\n") + "\n";
    (bvals.join(" ") + "\n", bvecs)
}

/// Reorders a volume's channels from file order into canonical order.
pub fn reorder_channels(data: &[f64], n_voxels: usize, order: &[usize]) -> Result<Vec<f64>> {
    let nc_in = data.len() / n_voxels.max(1);
    if order.iter().any(|&c| c >= nc_in) || data.len() != nc_in * n_voxels {
        return Err(Error::Dimension("channel map does not fit the volume".into()));
    }
    let mut out = Vec::with_capacity(n_voxels * order.len());
    for v in 0..n_voxels {
        let vox = &data[v * nc_in..(v + 1) * nc_in];
        out.extend(order.iter().map(|&c| vox[c]));
    }
    Ok(out)
}

pub const NORMALIZED_MAX: f64 = 2.0;
pub const MIN_B0_MEAN: f64 = 1e-6;

/// Divides each voxel by the mean of its b0 channels, masking voxels whose
/// mean b0 is below [`MIN_B0_MEAN`] and clamping to `[0, 2]`.
pub fn normalize_by_b0(vol: &DwiVolume) -> Result<DwiVolume> {
    let b0 = vol.scheme.b0_count();
    if b0 == 0 {
        return Err(Error::MissingB0);
    }
    let nc = vol.n_channels();
    let mut out = vol.clone();
    for i in 0..vol.n_voxels() {
        let vox = &mut out.data[i * nc..(i + 1) * nc];
        let mean = vox[..b0].iter().sum::<f64>() / b0 as f64;
        if !(mean >= MIN_B0_MEAN) {
            out.mask[i] = false;
            vox.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        vox.iter_mut().for_each(|v| *v = (*v / mean).clamp(0.0, NORMALIZED_MAX));
    }
    out.normalized = true;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub volume_id: usize,
    pub corner: [usize; 3],
}

/// One training or testing unit. `input` is `w^3 × channels` voxel-major
/// (x fastest, channels contiguous per voxel); `target` is
/// `(w-2)^3 × 3` holding (vic, viso, od) per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchExample {
    pub w: usize,
    pub channels: usize,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub provenance: Provenance,
}

impl PatchExample {
    pub fn input_voxels(&self) -> usize {
        self.w * self.w * self.w
    }
}

pub fn check_patch_width(w: usize, dims: Dims) -> Result<()> {
    if w < 3 || w.is_multiple_of(2) {
        return Err(Error::Domain(format!("patch width {w} must be odd and >= 3")));
    }
    if let Some(&dim) = dims.iter().find(|&&d| d < w) {
        return Err(Error::PatchTooLarge { w, dim });
    }
    Ok(())
}

/// Corners on the stride grid with the patch fully inside the volume, in
/// (z, y, x) ascending order. When the grid does not end flush with the far
/// face, a final corner at `dim - w` is added on that axis so the center
/// blocks reach every interior voxel.
pub fn patch_corners(dims: Dims, w: usize, stride: usize) -> Vec<[usize; 3]> {
    let axis = |d: usize| {
        let mut v: Vec<usize> = (0..=d - w).step_by(stride).collect();
        if *v.last().unwrap() != d - w {
            v.push(d - w);
        }
        v
    };
    let (xs, ys, zs) = (axis(dims[0]), axis(dims[1]), axis(dims[2]));
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Corners used to tile a whole volume at stride `w - 2`.
pub fn tiling_corners(dims: Dims, w: usize) -> Vec<[usize; 3]> {
    patch_corners(dims, w, w - 2)
}

/// Diffusion channels of the `w^3` block at `corner`, voxel-major.
pub fn gather_input(vol: &DwiVolume, corner: [usize; 3], w: usize) -> Vec<f64> {
    let b0 = vol.scheme.b0_count();
    let d = vol.scheme.total_directions();
    let mut input = Vec::with_capacity(w * w * w * d);
    for z in 0..w {
        for y in 0..w {
            for x in 0..w {
                let i = voxel_index(vol.dims, corner[0] + x, corner[1] + y, corner[2] + z);
                input.extend_from_slice(&vol.voxel(i)[b0..]);
            }
        }
    }
    input
}

fn center_block(dims: Dims, corner: [usize; 3], w: usize) -> impl Iterator<Item = usize> {
    let inner = w - 2;
    (0..inner).flat_map(move |z| {
        (0..inner).flat_map(move |y| {
            (0..inner).map(move |x| voxel_index(dims, corner[0] + 1 + x, corner[1] + 1 + y, corner[2] + 1 + z))
        })
    })
}

pub fn extract_patches(
    vol: &DwiVolume,
    params: &ParameterVolume,
    w: usize,
    stride: usize,
    volume_id: usize,
) -> Result<Vec<PatchExample>> {
    if vol.dims != params.dims {
        return Err(Error::Dimension(format!("DWI dims {:?} vs parameter dims {:?}", vol.dims, params.dims)));
    }
    check_patch_width(w, vol.dims)?;
    if stride == 0 {
        return Err(Error::Domain("stride must be >= 1".into()));
    }
    let channels = vol.scheme.total_directions();
    let mut out = Vec::new();
    for corner in patch_corners(vol.dims, w, stride) {
        if !center_block(vol.dims, corner, w).all(|i| vol.mask[i] && params.mask[i]) {
            continue;
        }
        let target = center_block(vol.dims, corner, w)
            .flat_map(|i| [params.vic[i], params.viso[i], params.od[i]])
            .collect();
        out.push(PatchExample {
            w,
            channels,
            input: gather_input(vol, corner, w),
            target,
            provenance: Provenance { volume_id, corner },
        });
    }
    Ok(out)
}

/// A dense 4D f32 tensor as stored in an RVOL file, `data` in xyzc order.
#[derive(Clone, Debug, PartialEq)]
pub struct RvolTensor {
    pub dims: [usize; 4],
    pub data: Vec<f32>,
}

impl RvolTensor {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!("{} values for RVOL dims {dims:?}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn header(&self) -> String {
        let [nx, ny, nz, nc] = self.dims;
        format!("RVOL1 {nx} {ny} {nz} {nc} dtype=f32 order=xyzc\n")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::with_capacity(header.len() + 4 * self.data.len());
        out.extend_from_slice(header.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = bytes
            .iter()
            .take(256)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CorruptFile("missing RVOL header line".into()))?;
        let header = std::str::from_utf8(&bytes[..end])
            .map_err(|_| Error::CorruptFile("RVOL header is not ASCII".into()))?;
        let tokens: Vec<&str> = header.split_whitespace().collect();
        if tokens.first() != Some(&"RVOL1") {
            return Err(Error::Version(format!("unknown magic {:?}", tokens.first())));
        }
        if tokens.len() != 7 {
            return Err(Error::Version(format!("expected 7 header tokens, found {}", tokens.len())));
        }
        if tokens[5] != "dtype=f32" || tokens[6] != "order=xyzc" {
            return Err(Error::Version(format!("unsupported header tokens {} {}", tokens[5], tokens[6])));
        }
        let mut dims = [0usize; 4];
        for (d, t) in dims.iter_mut().zip(&tokens[1..5]) {
            *d = t.parse().map_err(|_| Error::CorruptFile(format!("bad dimension {t:?}")))?;
        }
        let n: usize = dims.iter().product();
        let payload = &bytes[end + 1..];
        if payload.len() != 4 * n {
            return Err(Error::CorruptFile(format!(
                "payload has {} bytes, header requires {}",
                payload.len(),
                4 * n
            )));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { dims, data })
    }
}

pub fn write_rvol(path: &Path, tensor: &RvolTensor) -> Result<()> {
    fs::write(path, tensor.to_bytes())?;
    Ok(())
}

pub fn read_rvol(path: &Path) -> Result<RvolTensor> {
    RvolTensor::from_bytes(&fs::read(path)?)
}

/// Voxel-major f64 channels → xyzc f32 tensor.
pub fn channels_to_rvol(dims: Dims, channels: usize, voxel_major: &[f64]) -> Result<RvolTensor> {
    let n = voxel_count(dims);
    if voxel_major.len() != n * channels {
        return Err(Error::Dimension("channel data does not match dims".into()));
    }
    let mut data = vec![0f32; n * channels];
    for v in 0..n {
        for c in 0..channels {
            data[c * n + v] = voxel_major[v * channels + c] as f32;
        }
    }
    RvolTensor::new([dims[0], dims[1], dims[2], channels], data)
}

/// xyzc f32 tensor → voxel-major f64 channels.
pub fn rvol_to_channels(t: &RvolTensor) -> (Dims, usize, Vec<f64>) {
    let [nx, ny, nz, nc] = t.dims;
    let n = nx * ny * nz;
    let mut out = vec![0.0; n * nc];
    for c in 0..nc {
        for v in 0..n {
            out[v * nc + c] = t.data[c * n + v] as f64;
        }
    }
    ([nx, ny, nz], nc, out)
}

/// Channels: b0 channels then shells, per `vol.scheme`. The mask is not
/// stored; background voxels are all-zero.
pub fn dwi_to_rvol(vol: &DwiVolume) -> Result<RvolTensor> {
    channels_to_rvol(vol.dims, vol.n_channels(), &vol.data)
}

/// Rebuilds a DWI volume from a tensor in canonical channel order; voxels
/// whose channels are all zero are background.
pub fn dwi_from_rvol(t: &RvolTensor, scheme: &GradientScheme) -> Result<DwiVolume> {
    let (dims, nc, data) = rvol_to_channels(t);
    if nc != scheme.channel_count() {
        return Err(Error::Dimension(format!("{nc} channels, scheme has {}", scheme.channel_count())));
    }
    let mask = data.chunks(nc).map(|v| v.iter().any(|&x| x != 0.0)).collect();
    Ok(DwiVolume { dims, scheme: scheme.clone(), data, mask, normalized: false })
}

/// Parameter maps as 7 channels: vic, viso, od, mu_x, mu_y, mu_z, mask.
pub fn params_to_rvol(pv: &ParameterVolume) -> Result<RvolTensor> {
    let data: Vec<f64> = (0..pv.n_voxels())
        .flat_map(|i| {
            let m = pv.mu[i].to_array();
            [pv.vic[i], pv.viso[i], pv.od[i], m[0], m[1], m[2], if pv.mask[i] { 1.0 } else { 0.0 }]
        })
        .collect();
    channels_to_rvol(pv.dims, 7, &data)
}

pub fn params_from_rvol(t: &RvolTensor) -> Result<ParameterVolume> {
    let (dims, nc, data) = rvol_to_channels(t);
    if nc != 7 {
        return Err(Error::Dimension(format!("parameter volume needs 7 channels, found {nc}")));
    }
    let mut pv = ParameterVolume {
        dims,
        vic: Vec::new(),
        viso: Vec::new(),
        od: Vec::new(),
        mu: Vec::new(),
        mask: Vec::new(),
    };
    for v in data.chunks(7) {
        pv.vic.push(v[0]);
        pv.viso.push(v[1]);
        pv.od.push(v[2]);
        pv.mu.push(UnitDirection::from_vector([v[3], v[4], v[5]]).unwrap_or(UnitDirection::Z));
        pv.mask.push(v[6] != 0.0);
    }
    pv.validate()?;
    Ok(pv)
}

/// Ordered `key=value` lines; `#` starts a comment line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    /// Replaces an existing key in place or appends a new one.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing key {key}")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|_| Error::Config(format!("invalid value {v:?} for {key}"))))
            .transpose()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VolumeEntry {
    pub name: String,
    pub split: String,
    pub seed: u64,
    pub dwi: String,
    pub params: String,
}

/// Dataset manifest: gradient table paths plus one entry per volume. Paths
/// are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub bvals: String,
    pub bvecs: String,
    pub volumes: Vec<VolumeEntry>,
}

impl DatasetManifest {
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("scheme.bvals", &self.bvals);
        kv.set("scheme.bvecs", &self.bvecs);
        kv.set("volumes", self.volumes.len());
        for (i, v) in self.volumes.iter().enumerate() {
            kv.set(&format!("volume.{i}.name"), &v.name);
            kv.set(&format!("volume.{i}.split"), &v.split);
            kv.set(&format!("volume.{i}.seed"), v.seed);
            kv.set(&format!("volume.{i}.dwi"), &v.dwi);
            kv.set(&format!("volume.{i}.params"), &v.params);
        }
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let n: usize = kv.parse_value("volumes")?.ok_or_else(|| Error::Config("missing key volumes".into()))?;
        let volumes = (0..n)
            .map(|i| {
                Ok(VolumeEntry {
                    name: kv.require(&format!("volume.{i}.name"))?.to_string(),
                    split: kv.require(&format!("volume.{i}.split"))?.to_string(),
                    seed: kv
                        .parse_value(&format!("volume.{i}.seed"))?
                        .ok_or_else(|| Error::Config(format!("missing key volume.{i}.seed")))?,
                    dwi: kv.require(&format!("volume.{i}.dwi"))?.to_string(),
                    params: kv.require(&format!("volume.{i}.params"))?.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bvals: kv.require("scheme.bvals")?.to_string(),
            bvecs: kv.require("scheme.bvecs")?.to_string(),
            volumes,
        })
    }

    pub fn split(&self, name: &str) -> impl Iterator<Item = &VolumeEntry> {
        let name = name.to_string();
        self.volumes.iter().filter(move |v| v.split == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noddi::{NoddiParams, TissueConstants};
    use crate::phantom::{generate_dwi, generate_parameter_volume};
    use crate::sphere::generate_uniform_directions;
    use crate::Exec;

    fn table(counts: &[(f64, usize)], b0: usize) -> (String, String) {
        let mut b = Vec::new();
        let mut v = [Vec::new(), Vec::new(), Vec::new()];
        for i in 0..b0 {
            b.push(if i % 2 == 0 { "0".to_string() } else { "5".to_string() });
            v.iter_mut().for_each(|r| r.push("0".to_string()));
        }
        for (k, &(bv, n)) in counts.iter().enumerate() {
            for (j, d) in generate_uniform_directions(n, k as u64).unwrap().iter().enumerate() {
                b.push(format!("{}", bv + (j % 3) as f64 * 5.0 - 5.0));
                for (r, x) in v.iter_mut().zip(d.to_array()) {
                    r.push(format!("{x}"));
                }
            }
        }
        (b.join(" "), v.iter().map(|r| r.join(" ")).collect::<Vec<_>>().join("\n"))
    }

    #[test]
    fn hcp_like_table_groups_into_two_shells() {
        let (b, v) = table(&[(1000.0, 90), (2000.0, 90)], 18);
        let (scheme, map) = parse_gradient_table(&b, &v, &ShellGrouping::default()).unwrap();
        assert_eq!(scheme.b0_count(), 18);
        assert_eq!(scheme.shells().len(), 2);
        assert_eq!(scheme.shells()[0].bvalue, 1000.0);
        assert_eq!(scheme.shells()[1].bvalue, 2000.0);
        assert_eq!(scheme.shells()[0].directions.len(), 90);
        let mut all = map.canonical_order();
        all.sort_unstable();
        assert_eq!(all, (0..198).collect::<Vec<_>>());
    }

    #[test]
    fn all_zero_bvals_are_b0() {
        let (scheme, map) = parse_gradient_table("0 0 0\n", "0 0 0\n0 0 0\n0 0 0\n", &ShellGrouping::default()).unwrap();
        assert_eq!(scheme.shells().len(), 0);
        assert_eq!(scheme.b0_count(), 3);
        assert_eq!(map.b0, vec![0, 1, 2]);
    }

    #[test]
    fn stray_bvalue_is_ungrouped() {
        let (mut b, v) = table(&[(1000.0, 10), (2000.0, 10)], 0);
        // Replace one channel's b-value with 1500.
        let mut tokens: Vec<String> = b.split_whitespace().map(String::from).collect();
        tokens[4] = "1500".into();
        b = tokens.join(" ");
        assert!(matches!(
            parse_gradient_table(&b, &v, &ShellGrouping::default()),
            Err(Error::UngroupedChannel { channel: 4, .. })
        ));
    }

    #[test]
    fn malformed_tables() {
        let g = ShellGrouping::default();
        assert!(matches!(parse_gradient_table("0 0", "0 0 0\n0 0 0\n0 0 0", &g), Err(Error::MalformedTable(_))));
        assert!(matches!(parse_gradient_table("0 0", "0 0\n0 0", &g), Err(Error::MalformedTable(_))));
        assert!(matches!(parse_gradient_table("0 x", "0 0\n0 0\n0 0", &g), Err(Error::MalformedTable(_))));
        let bvals = "1000 ".repeat(6);
        let bvecs = "2 2 2 2 2 2\n0 0 0 0 0 0\n0 0 0 0 0 0";
        assert!(matches!(parse_gradient_table(&bvals, bvecs, &g), Err(Error::MalformedTable(_))));
    }

    #[test]
    fn format_parse_fixed_point() {
        let (b, v) = table(&[(1000.0, 12), (3000.0, 8)], 3);
        let g = ShellGrouping::default();
        let (s1, _) = parse_gradient_table(&b, &v, &g).unwrap();
        let (b2, v2) = format_gradient_table(&s1);
        let (s2, map2) = parse_gradient_table(&b2, &v2, &g).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(map2.canonical_order(), (0..23).collect::<Vec<_>>());
        assert_eq!(format_gradient_table(&s2), (b2, v2));
    }

    fn small_volume(snr: f64) -> (ParameterVolume, DwiVolume) {
        let pv = generate_parameter_volume([8, 8, 8], 3).unwrap();
        let scheme = GradientScheme::new(
            vec![
                Shell { bvalue: 1000.0, directions: generate_uniform_directions(6, 1).unwrap() },
                Shell { bvalue: 2000.0, directions: generate_uniform_directions(7, 2).unwrap() },
            ],
            2,
        )
        .unwrap();
        let dwi = generate_dwi(&pv, &scheme, &TissueConstants::default(), snr, 1, Exec::default()).unwrap();
        (pv, dwi)
    }

    #[test]
    fn normalization_cases() {
        let (_, dwi) = small_volume(f64::INFINITY);
        let n = normalize_by_b0(&dwi).unwrap();
        assert_eq!(n.data, dwi.data);
        assert!(n.normalized);

        let mut scaled = dwi.clone();
        scaled.data.iter_mut().for_each(|v| *v *= 7.0);
        let back = normalize_by_b0(&scaled).unwrap();
        for (a, b) in back.data.iter().zip(&dwi.data) {
            assert!((a - b).abs() < 1e-14);
        }

        let fg = dwi.mask.iter().position(|&m| m).unwrap();
        let mut zero_b0 = dwi.clone();
        let nc = dwi.n_channels();
        zero_b0.data[fg * nc] = 0.0;
        zero_b0.data[fg * nc + 1] = 0.0;
        assert!(!normalize_by_b0(&zero_b0).unwrap().mask[fg]);

        let no_b0 = DwiVolume {
            scheme: GradientScheme::new(dwi.scheme.shells().to_vec(), 0).unwrap(),
            data: vec![],
            ..dwi.clone()
        };
        assert!(matches!(normalize_by_b0(&no_b0), Err(Error::MissingB0)));
    }

    #[test]
    fn patch_grid_and_shapes() {
        let (pv, dwi) = small_volume(30.0);
        assert_eq!(patch_corners([8, 8, 8], 5, 3).len(), 8);
        let mut full = pv.clone();
        full.mask.iter_mut().for_each(|m| *m = true);
        let mut dwi_full = dwi.clone();
        dwi_full.mask.iter_mut().for_each(|m| *m = true);
        let patches = extract_patches(&dwi_full, &full, 5, 3, 0).unwrap();
        assert_eq!(patches.len(), 8);
        assert_eq!(patches[1].provenance.corner, [3, 0, 0]);
        assert_eq!(patches[0].input.len(), 125 * 13);
        assert_eq!(patches[0].target.len(), 27 * 3);
        assert!(patches[0].target.iter().all(|v| (0.0..=1.0).contains(v)));
        let centre = voxel_index(full.dims, 2, 2, 2);
        assert_eq!(&patches[0].target[13 * 3..14 * 3], &[full.vic[centre], full.viso[centre], full.od[centre]]);

        let mut empty = full.clone();
        empty.mask.iter_mut().for_each(|m| *m = false);
        assert!(extract_patches(&dwi_full, &empty, 5, 3, 0).unwrap().is_empty());
        assert!(matches!(extract_patches(&dwi_full, &full, 9, 3, 0), Err(Error::PatchTooLarge { w: 9, dim: 8 })));
    }

    #[test]
    fn stride_up_to_inner_width_covers_every_interior_voxel() {
        let pv = ParameterVolume::uniform([9, 8, 10], NoddiParams::new(0.5, 0.1, 0.3, UnitDirection::Z).unwrap());
        let (_, mut dwi) = small_volume(f64::INFINITY);
        dwi.dims = pv.dims;
        dwi.mask = pv.mask.clone();
        dwi.data = vec![0.5; pv.n_voxels() * dwi.n_channels()];
        let mut covered = vec![false; pv.n_voxels()];
        for stride in 1..=3 {
            covered.iter_mut().for_each(|c| *c = false);
            for p in extract_patches(&dwi, &pv, 5, stride, 0).unwrap() {
                for i in center_block(pv.dims, p.provenance.corner, 5) {
                    covered[i] = true;
                }
            }
            assert!((0..pv.n_voxels()).all(|i| {
                let [x, y, z] = [i % 9, (i / 9) % 8, i / 72];
                covered[i] || x == 0 || y == 0 || z == 0 || x == 8 || y == 7 || z == 9
            }), "stride {stride}");
        }
    }

    #[test]
    fn rvol_roundtrip_and_errors() {
        let t = RvolTensor::new([2, 2, 2, 3], (0..24).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(t.header(), "RVOL1 2 2 2 3 dtype=f32 order=xyzc\n");
        assert_eq!(bytes.len() - t.header().len(), 96);
        assert_eq!(RvolTensor::from_bytes(&bytes).unwrap(), t);
        assert!(matches!(RvolTensor::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::CorruptFile(_))));
        let bad = String::from_utf8_lossy(&bytes).replace("RVOL1", "RVOL2");
        assert!(matches!(RvolTensor::from_bytes(bad.as_bytes()), Err(Error::Version(_))));
        let mut extra = b"RVOL1 1 1 1 1 dtype=f64 order=xyzc\n".to_vec();
        extra.extend_from_slice(&[0; 4]);
        assert!(matches!(RvolTensor::from_bytes(&extra), Err(Error::Version(_))));

        let dir = std::env::temp_dir().join(format!("rvol-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.rvol");
        write_rvol(&p, &t).unwrap();
        assert_eq!(read_rvol(&p).unwrap(), t);
        assert_eq!(fs::read(&p).unwrap(), bytes);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn volume_conversions_roundtrip() {
        let (pv, dwi) = small_volume(30.0);
        let back = dwi_from_rvol(&dwi_to_rvol(&dwi).unwrap(), &dwi.scheme).unwrap();
        assert_eq!(back.mask, dwi.mask);
        for (a, b) in back.data.iter().zip(&dwi.data) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let p2 = params_from_rvol(&params_to_rvol(&pv).unwrap()).unwrap();
        assert_eq!(p2.mask, pv.mask);
        assert!((p2.vic[10] - pv.vic[10]).abs() < 1e-6);
    }

    #[test]
    fn manifest_roundtrip() {
        let m = DatasetManifest {
            bvals: "scheme.bval".into(),
            bvecs: "scheme.bvec".into(),
            volumes: vec![VolumeEntry {
                name: "train_0".into(),
                split: "train".into(),
                seed: 17,
                dwi: "volumes/train_0_dwi.rvol".into(),
                params: "volumes/train_0_params.rvol".into(),
            }],
        };
        let text = m.to_key_values().to_text();
        let back = DatasetManifest::from_key_values(&KeyValues::parse(&text).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.split("train").count(), 1);
        assert!(KeyValues::parse("novalue").is_err());
    }
}
