//! Training and test example assembly: per-shell direction subsampling,
//! per-shell SH fitting and channel-axis concatenation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::PatchExample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::phantom::DwiVolume;
use crate::shbasis::{eval_basis, num_coefficients, FitSettings, ShFitter};
use crate::sphere::{random_subsample, GradientScheme, SubsampleSelection, UnitDirection};

pub const MIN_ADAPTIVE_DIRECTIONS: usize = 20;
const SHUFFLE_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    Fixed,
    Adaptive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPolicy {
    pub mode: SamplingMode,
    pub n_min: usize,
    pub n_max: usize,
    /// One selection per shell, in shell order (fixed mode only).
    pub fixed_selection: Option<Vec<SubsampleSelection>>,
}

impl SamplingPolicy {
    pub fn adaptive(n_min: usize, n_max: usize, scheme: &GradientScheme) -> Result<Self> {
        let p = Self { mode: SamplingMode::Adaptive, n_min, n_max, fixed_selection: None };
        p.validate(scheme)?;
        Ok(p)
    }

    pub fn fixed(selections: Vec<SubsampleSelection>, scheme: &GradientScheme) -> Result<Self> {
        let n_min = selections.iter().map(|s| s.len()).min().unwrap_or(0);
        let n_max = selections.iter().map(|s| s.len()).max().unwrap_or(0);
        let p = Self { mode: SamplingMode::Fixed, n_min, n_max, fixed_selection: Some(selections) };
        p.validate(scheme)?;
        Ok(p)
    }

    pub fn validate(&self, scheme: &GradientScheme) -> Result<()> {
        match self.mode {
            SamplingMode::Adaptive => {
                let smallest = scheme.shells().iter().map(|s| s.directions.len()).min().unwrap_or(0);
                if self.n_min < MIN_ADAPTIVE_DIRECTIONS || self.n_min > self.n_max || self.n_max > smallest {
                    return Err(Error::Domain(format!(
                        "adaptive range {}..={} must satisfy {MIN_ADAPTIVE_DIRECTIONS} <= n_min <= n_max <= {smallest}",
                        self.n_min, self.n_max
                    )));
                }
            }
            SamplingMode::Fixed => {
                let sel = self
                    .fixed_selection
                    .as_ref()
                    .ok_or_else(|| Error::Domain("fixed policy without a selection".into()))?;
                if sel.len() != scheme.shells().len() {
                    return Err(Error::Domain(format!(
                        "fixed policy has {} selections for {} shells",
                        sel.len(),
                        scheme.shells().len()
                    )));
                }
                for (k, (s, shell)) in sel.iter().zip(scheme.shells()).enumerate() {
                    SubsampleSelection::new(k, s.indices.clone(), shell.directions.len())?;
                    if s.shell_index != k {
                        return Err(Error::Domain(format!("selection {k} refers to shell {}", s.shell_index)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Selections for one example: the fixed ones, or per shell a fresh draw
    /// of `n ~ Uniform{n_min..=n_max}` directions.
    pub fn draw<R: Rng + ?Sized>(&self, scheme: &GradientScheme, rng: &mut R) -> Result<Vec<SubsampleSelection>> {
        match self.mode {
            SamplingMode::Fixed => Ok(self.fixed_selection.clone().unwrap_or_default()),
            SamplingMode::Adaptive => (0..scheme.shells().len())
                .map(|k| {
                    let n = rng.gen_range(self.n_min..=self.n_max);
                    random_subsample(scheme, k, n, rng)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    RawDwi,
    ShCoeffs,
}

impl Representation {
    pub fn name(self) -> &'static str {
        match self {
            Representation::RawDwi => "raw_dwi",
            Representation::ShCoeffs => "sh_coeffs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw_dwi" => Ok(Representation::RawDwi),
            "sh_coeffs" => Ok(Representation::ShCoeffs),
            _ => Err(Error::Config(format!("unknown representation {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSpec {
    pub representation: Representation,
    pub sh_order: usize,
    pub shells_used: Vec<usize>,
    /// Feature channels per voxel.
    pub channels: usize,
}

impl FeatureSpec {
    pub fn sh_coeffs(order: usize, shells_used: Vec<usize>) -> Result<Self> {
        let channels = num_coefficients(order)? * shells_used.len();
        Ok(Self { representation: Representation::ShCoeffs, sh_order: order, shells_used, channels })
    }

    /// Raw signal features; `counts[k]` is the direction count of shell
    /// `shells_used[k]`.
    pub fn raw_dwi(shells_used: Vec<usize>, counts: &[usize]) -> Self {
        Self {
            representation: Representation::RawDwi,
            sh_order: 0,
            channels: counts.iter().sum(),
            shells_used,
        }
    }
}

/// Computes `w^3 × spec.channels` features from a raw `w^3 × D` patch
/// acquired with `scheme`, using only the selected directions per shell.
pub fn compute_features(
    input: &[f64],
    w: usize,
    scheme: &GradientScheme,
    selections: &[SubsampleSelection],
    spec: &FeatureSpec,
    settings: &FitSettings,
) -> Result<Vec<f64>> {
    let n_vox = w * w * w;
    let d = scheme.total_directions();
    if input.len() != n_vox * d {
        return Err(Error::Dimension(format!("patch has {} values, expected {n_vox}×{d}", input.len())));
    }
    if selections.len() != scheme.shells().len() {
        return Err(Error::Dimension(format!("{} selections for {} shells", selections.len(), scheme.shells().len())));
    }
    if let Some(&s) = spec.shells_used.iter().find(|&&s| s >= scheme.shells().len()) {
        return Err(Error::Dimension(format!("feature spec uses shell {s}, scheme has {}", scheme.shells().len())));
    }
    let offsets = scheme.shell_offsets();
    let c = spec.channels;
    let mut out = vec![0.0; n_vox * c];
    match spec.representation {
        Representation::RawDwi => {
            let got: usize = spec.shells_used.iter().map(|&s| selections[s].len()).sum();
            if got != c {
                return Err(Error::Dimension(format!(
                    "raw_dwi features need exactly {c} directions (the training selection size), got {got}; \
                     a fixed-sampling model cannot accept a different direction count"
                )));
            }
            for v in 0..n_vox {
                let vox = &input[v * d..(v + 1) * d];
                let mut dst = out[v * c..(v + 1) * c].iter_mut();
                for &s in &spec.shells_used {
                    for &i in &selections[s].indices {
                        *dst.next().unwrap() = vox[offsets[s] + i];
                    }
                }
            }
        }
        Representation::ShCoeffs => {
            if settings.order != spec.sh_order {
                return Err(Error::Dimension(format!(
                    "fit order {} differs from feature order {}",
                    settings.order, spec.sh_order
                )));
            }
            let nc = num_coefficients(spec.sh_order)?;
            let mut signals = Vec::new();
            for (k, &s) in spec.shells_used.iter().enumerate() {
                let dirs = &scheme.shells()[s].directions;
                let idx = &selections[s].indices;
                let sel_dirs: Vec<UnitDirection> = idx.iter().map(|&i| dirs[i]).collect();
                let fitter = ShFitter::new(eval_basis(&sel_dirs, spec.sh_order)?, settings)?;
                for v in 0..n_vox {
                    let vox = &input[v * d..(v + 1) * d];
                    signals.clear();
                    signals.extend(idx.iter().map(|&i| vox[offsets[s] + i]));
                    let start = v * c + k * nc;
                    fitter.fit_into(&signals, &mut out[start..start + nc])?;
                }
            }
        }
    }
    Ok(out)
}

fn with_features(patch: &PatchExample, features: Vec<f64>, channels: usize) -> PatchExample {
    PatchExample {
        w: patch.w,
        channels,
        input: features,
        target: patch.target.clone(),
        provenance: patch.provenance,
    }
}

fn check_policy(policy: &SamplingPolicy, spec: &FeatureSpec) -> Result<()> {
    if spec.representation == Representation::RawDwi && policy.mode == SamplingMode::Adaptive {
        return Err(Error::PolicyMismatch(
            "raw_dwi features have a fixed channel count and need a fixed sampling policy".into(),
        ));
    }
    Ok(())
}

/// Feature example for training: directions drawn by `policy`, then fitted
/// (or gathered) per shell.
pub fn make_training_example<R: Rng + ?Sized>(
    patch: &PatchExample,
    scheme: &GradientScheme,
    policy: &SamplingPolicy,
    spec: &FeatureSpec,
    settings: &FitSettings,
    rng: &mut R,
) -> Result<PatchExample> {
    check_policy(policy, spec)?;
    let selections = policy.draw(scheme, rng)?;
    let f = compute_features(&patch.input, patch.w, scheme, &selections, spec, settings)?;
    Ok(with_features(patch, f, spec.channels))
}

/// Feature example for testing: every direction of `scheme` is used.
pub fn make_test_example(
    patch: &PatchExample,
    scheme: &GradientScheme,
    spec: &FeatureSpec,
    settings: &FitSettings,
) -> Result<PatchExample> {
    let f = test_features(&patch.input, patch.w, scheme, spec, settings)?;
    Ok(with_features(patch, f, spec.channels))
}

pub fn test_features(
    input: &[f64],
    w: usize,
    scheme: &GradientScheme,
    spec: &FeatureSpec,
    settings: &FitSettings,
) -> Result<Vec<f64>> {
    let all: Vec<SubsampleSelection> = scheme
        .shells()
        .iter()
        .enumerate()
        .map(|(k, s)| SubsampleSelection::full(k, s.directions.len()))
        .collect();
    compute_features(input, w, scheme, &all, spec, settings)
}

/// Builds one epoch. Patch `i` draws from the ChaCha stream `i` of
/// `epoch_seed`; the result is then shuffled from a separate stream.
pub fn build_epoch(
    dataset: &[PatchExample],
    scheme: &GradientScheme,
    policy: &SamplingPolicy,
    spec: &FeatureSpec,
    settings: &FitSettings,
    epoch_seed: u64,
    exec: Exec,
) -> Result<Vec<PatchExample>> {
    if dataset.is_empty() {
        return Err(Error::InsufficientInput { needed: 1, got: 0 });
    }
    check_policy(policy, spec)?;
    let mut examples = exec.try_map(dataset.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        rng.set_stream(i as u64);
        make_training_example(&dataset[i], scheme, policy, spec, settings, &mut rng)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    rng.set_stream(SHUFFLE_STREAM);
    examples.shuffle(&mut rng);
    Ok(examples)
}

/// Restricts a volume to the selected directions of each shell, keeping all
/// b0 channels.
pub fn select_volume(vol: &DwiVolume, selections: &[SubsampleSelection]) -> Result<DwiVolume> {
    let scheme = vol.scheme.select(selections)?;
    let b0 = vol.scheme.b0_count();
    let offsets = vol.scheme.shell_offsets();
    let mut keep: Vec<usize> = (0..b0).collect();
    for (k, s) in selections.iter().enumerate() {
        keep.extend(s.indices.iter().map(|&i| b0 + offsets[k] + i));
    }
    let nc = vol.n_channels();
    let mut data = Vec::with_capacity(vol.n_voxels() * keep.len());
    for v in 0..vol.n_voxels() {
        let vox = &vol.data[v * nc..(v + 1) * nc];
        data.extend(keep.iter().map(|&c| vox[c]));
    }
    Ok(DwiVolume { dims: vol.dims, scheme, data, mask: vol.mask.clone(), normalized: vol.normalized })
}
