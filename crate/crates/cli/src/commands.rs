//! The experiment commands. Each one reads and writes files below the
//! configured output directory:
//!
//! ```text
//! data/manifest.txt, data/scheme.bval, data/scheme.bvec, data/volumes/*.rvol
//! models/<method>.ckpt, models/<method>_log.csv
//! results/eval/<method>_<mode>_<s1>x<s2>[_seed<k>].csv
//! results/pred/<same stem>.rvol      (prediction for the first test volume)
//! results/ablation_<method>.csv
//! report.md, figures/*.pgm
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use robnoddi_core::dataio::{
    self, extract_patches, format_gradient_table, normalize_by_b0, parse_gradient_table, DatasetManifest,
    KeyValues, PatchExample, RvolTensor, ShellGrouping, VolumeEntry,
};
use robnoddi_core::estimator::{
    predict_examples, predict_volume, train, Checkpoint, Estimator, FeatureScaler, GatedIterativeModel, MlpModel,
    TrainLog,
};
use robnoddi_core::metrics::{aggregate, evaluate, rows_to_csv, CsvRow, MetricsReport};
use robnoddi_core::noddi::TissueConstants;
use robnoddi_core::phantom::{generate_dwi, generate_parameter_volume, DwiVolume, ParameterVolume};
use robnoddi_core::pipeline::{
    build_epoch, make_test_example, select_volume, FeatureSpec, Representation, SamplingPolicy,
};
use robnoddi_core::sphere::{
    generate_uniform_directions, random_subsample, spread_subsample, GradientScheme, Shell, SubsampleSelection,
};
use robnoddi_core::{Error, Exec, Result};

use crate::config::{Architecture, ExperimentConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    RawFixed,
    ShFixed,
    RobNoddi,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::RawFixed, Method::ShFixed, Method::RobNoddi];

    pub fn name(self) -> &'static str {
        match self {
            Method::RawFixed => "raw_fixed",
            Method::ShFixed => "sh_fixed",
            Method::RobNoddi => "robnoddi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (raw_fixed | sh_fixed | robnoddi)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Ss,
    Rs,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Ss => "ss",
            Mode::Rs => "rs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ss" => Ok(Mode::Ss),
            "rs" => Ok(Mode::Rs),
            _ => Err(Error::Config(format!("unknown mode {s:?} (ss | rs)"))),
        }
    }
}

/// File locations below an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.txt")
    }

    pub fn checkpoint(&self, m: Method) -> PathBuf {
        self.root.join("models").join(format!("{}.ckpt", m.name()))
    }

    pub fn train_log(&self, m: Method) -> PathBuf {
        self.root.join("models").join(format!("{}_log.csv", m.name()))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("results").join("eval")
    }

    pub fn pred_dir(&self) -> PathBuf {
        self.root.join("results").join("pred")
    }

    pub fn ablation(&self, m: Method) -> PathBuf {
        self.root.join("results").join(format!("ablation_{}.csv", m.name()))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// The acquisition shared by every phantom volume.
pub fn acquisition_scheme(cfg: &ExperimentConfig) -> Result<GradientScheme> {
    let p = &cfg.phantom;
    let shells = p
        .shell_bvalues
        .iter()
        .zip(&p.shell_dirs)
        .enumerate()
        .map(|(k, (&b, &n))| {
            Ok(Shell { bvalue: b, directions: generate_uniform_directions(n, p.scheme_seed.wrapping_add(k as u64))? })
        })
        .collect::<Result<Vec<_>>>()?;
    GradientScheme::new(shells, p.b0_count)
}

/// Well-spread per-shell subset used by the fixed-sampling methods and SS.
pub fn fixed_selection(scheme: &GradientScheme, n: usize) -> Result<Vec<SubsampleSelection>> {
    scheme
        .shells()
        .iter()
        .enumerate()
        .map(|(k, s)| SubsampleSelection::new(k, spread_subsample(&s.directions, n)?, s.directions.len()))
        .collect()
}

/// Seeded random per-shell subset of the acquired directions.
pub fn rs_selection(scheme: &GradientScheme, s1: usize, s2: usize, seed: u64) -> Result<Vec<SubsampleSelection>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![random_subsample(scheme, 0, s1, &mut rng)?, random_subsample(scheme, 1, s2, &mut rng)?])
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn cmd_phantom(cfg: &ExperimentConfig, exec: Exec) -> Result<DatasetManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let scheme = acquisition_scheme(cfg)?;
    let (bvals, bvecs) = format_gradient_table(&scheme);
    write_file(&layout.data().join("scheme.bval"), bvals)?;
    write_file(&layout.data().join("scheme.bvec"), bvecs)?;
    let p = &cfg.phantom;
    let counts = [p.train, p.val, p.test];
    let mut volumes = Vec::new();
    let mut index = 0u64;
    for (split, &count) in SPLITS.iter().zip(&counts) {
        for i in 0..count {
            let name = format!("{split}_{i}");
            let seed = p.seed.wrapping_add(index);
            index += 1;
            let pv = generate_parameter_volume(p.dims, seed)?;
            let dwi = generate_dwi(&pv, &scheme, &TissueConstants::default(), p.snr, seed, exec)?;
            let entry = VolumeEntry {
                name: name.clone(),
                split: split.to_string(),
                seed,
                dwi: format!("volumes/{name}_dwi.rvol"),
                params: format!("volumes/{name}_params.rvol"),
            };
            write_file(&layout.data().join(&entry.dwi), dataio::dwi_to_rvol(&dwi)?.to_bytes())?;
            write_file(&layout.data().join(&entry.params), dataio::params_to_rvol(&pv)?.to_bytes())?;
            volumes.push(entry);
        }
    }
    let manifest = DatasetManifest { bvals: "scheme.bval".into(), bvecs: "scheme.bvec".into(), volumes };
    write_file(&layout.manifest(), manifest.to_key_values().to_text())?;
    Ok(manifest)
}

/// A dataset on disk with its gradient scheme (channels in canonical order).
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub scheme: GradientScheme,
    order: Vec<usize>,
}

impl Dataset {
    pub fn open(layout: &Layout) -> Result<Self> {
        let dir = layout.data();
        let text = fs::read_to_string(layout.manifest())
            .map_err(|e| Error::Config(format!("no dataset manifest at {}: {e}", layout.manifest().display())))?;
        let manifest = DatasetManifest::from_key_values(&KeyValues::parse(&text)?)?;
        let bvals = fs::read_to_string(dir.join(&manifest.bvals))?;
        let bvecs = fs::read_to_string(dir.join(&manifest.bvecs))?;
        let (scheme, map) = parse_gradient_table(&bvals, &bvecs, &ShellGrouping::default())?;
        Ok(Self { dir, manifest, scheme, order: map.canonical_order() })
    }

    /// b0-normalized DWI and ground-truth parameters of one volume.
    pub fn load(&self, entry: &VolumeEntry) -> Result<(DwiVolume, ParameterVolume)> {
        let t = RvolTensor::from_bytes(&fs::read(self.dir.join(&entry.dwi))?)?;
        let (dims, nc, data) = dataio::rvol_to_channels(&t);
        if nc != self.order.len() {
            return Err(Error::Dimension(format!("{} has {nc} channels, gradient table lists {}", entry.dwi, self.order.len())));
        }
        let n = dims.iter().product();
        let data = dataio::reorder_channels(&data, n, &self.order)?;
        let mask = data.chunks(nc).map(|v| v.iter().any(|&x| x != 0.0)).collect();
        let raw = DwiVolume { dims, scheme: self.scheme.clone(), data, mask, normalized: false };
        let pv = dataio::params_from_rvol(&RvolTensor::from_bytes(&fs::read(self.dir.join(&entry.params))?)?)?;
        if pv.dims != dims {
            return Err(Error::Dimension(format!("{} and {} differ in size", entry.dwi, entry.params)));
        }
        Ok((normalize_by_b0(&raw)?, pv))
    }

    pub fn split(&self, name: &str) -> Vec<VolumeEntry> {
        self.manifest.split(name).cloned().collect()
    }

    /// Raw patches of every volume in a split.
    pub fn patches(&self, split: &str, w: usize, stride: usize) -> Result<Vec<PatchExample>> {
        let mut out = Vec::new();
        for (i, e) in self.split(split).iter().enumerate() {
            let (dwi, pv) = self.load(e)?;
            out.extend(extract_patches(&dwi, &pv, w, stride, i)?);
        }
        Ok(out)
    }
}

/// Features and sampling for one method.
pub fn method_setup(
    cfg: &ExperimentConfig,
    method: Method,
    scheme: &GradientScheme,
) -> Result<(FeatureSpec, SamplingPolicy, Vec<SubsampleSelection>)> {
    let q = &cfg.pipeline;
    let fixed = fixed_selection(scheme, q.fixed_dirs)?;
    let shells: Vec<usize> = (0..scheme.shells().len()).collect();
    let (spec, policy) = match method {
        Method::RawFixed => {
            let counts: Vec<usize> = fixed.iter().map(|s| s.len()).collect();
            (FeatureSpec::raw_dwi(shells, &counts), SamplingPolicy::fixed(fixed.clone(), scheme)?)
        }
        Method::ShFixed => (FeatureSpec::sh_coeffs(q.sh_order, shells)?, SamplingPolicy::fixed(fixed.clone(), scheme)?),
        Method::RobNoddi => (
            FeatureSpec::sh_coeffs(q.sh_order, shells)?,
            SamplingPolicy::adaptive(q.n_min, q.n_max, scheme)?,
        ),
    };
    Ok((spec, policy, fixed))
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1))
}

fn new_model(cfg: &ExperimentConfig, input: usize, output: usize) -> Result<Estimator> {
    let e = &cfg.estimator;
    Ok(match e.architecture {
        Architecture::Mlp => {
            let mut sizes = vec![input];
            sizes.extend_from_slice(&e.hidden);
            sizes.push(output);
            Estimator::Mlp(MlpModel::new(sizes, e.train.seed)?)
        }
        Architecture::Gated => Estimator::Gated(GatedIterativeModel::new(
            input,
            e.gated_hidden,
            output,
            e.gated_iterations,
            e.train.seed,
        )?),
    })
}

fn selection_text(s: &SubsampleSelection) -> String {
    s.indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_selection(text: &str, shell: usize, size: usize) -> Result<SubsampleSelection> {
    let idx = text
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| Error::CorruptFile(format!("bad selection index {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    SubsampleSelection::new(shell, idx, size)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub val_loss: Option<f64>,
    pub train_examples: usize,
}

pub fn cmd_train(cfg: &ExperimentConfig, method: Method, exec: Exec) -> Result<TrainOutcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let data = Dataset::open(&layout)?;
    let q = &cfg.pipeline;
    let settings = cfg.fit_settings();
    let (spec, policy, fixed) = method_setup(cfg, method, &data.scheme)?;
    let raw = data.patches("train", q.w, q.stride)?;
    if raw.is_empty() {
        return Err(Error::InsufficientInput { needed: 1, got: 0 });
    }
    let tc = cfg.estimator.train;
    let first = Arc::new(build_epoch(&raw, &data.scheme, &policy, &spec, &settings, epoch_seed(tc.seed, 0), exec)?);
    let scaler = FeatureScaler::fit(&first)?;
    let inner = q.w - 2;
    let mut model = new_model(cfg, q.w.pow(3) * spec.channels, inner.pow(3) * 3)?;
    let train_examples = first.len();
    let adaptive = method == Method::RobNoddi;
    // Raw patches are only needed to redraw adaptive epochs.
    let raw = if adaptive { raw } else { Vec::new() };
    let mut first = Some(first);
    let mut fixed_epoch = None;
    let log = train(&mut model, &scaler, &tc, exec, |e| {
        if let Some(f) = first.take() {
            if !adaptive {
                fixed_epoch = Some(f.clone());
            }
            return Ok(f);
        }
        match &fixed_epoch {
            Some(f) => Ok(f.clone()),
            None => Ok(Arc::new(build_epoch(&raw, &data.scheme, &policy, &spec, &settings, epoch_seed(tc.seed, e), exec)?)),
        }
    })?;
    drop(raw);
    drop(fixed_epoch);

    // Validation loss on the fixed selection (the SS protocol).
    let val_raw = data.patches("val", q.w, q.stride)?;
    let val_scheme = data.scheme.select(&fixed)?;
    let val_loss = if val_raw.is_empty() {
        None
    } else {
        let val: Vec<PatchExample> = val_raw
            .iter()
            .map(|p| {
                let sub = dataio::PatchExample { input: select_patch(p, &data.scheme, &fixed), ..p.clone() };
                make_test_example(&sub, &val_scheme, &spec, &settings)
            })
            .collect::<Result<_>>()?;
        let preds = predict_examples(&model, &scaler, &val, exec)?;
        let mut sse = 0.0;
        let mut n = 0usize;
        for (p, e) in preds.iter().zip(&val) {
            sse += p.iter().zip(&e.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            n += p.len();
        }
        Some(sse / n as f64)
    };

    let mut meta = KeyValues::new();
    meta.set("method", method.name());
    meta.set("representation", spec.representation.name());
    meta.set("sh_order", q.sh_order);
    meta.set("lambda", q.lambda);
    meta.set("w", q.w);
    meta.set("channels", spec.channels);
    meta.set("n_min", q.n_min);
    meta.set("n_max", q.n_max);
    for s in &fixed {
        meta.set(&format!("fixed_selection.{}", s.shell_index), selection_text(s));
    }
    meta.set("train_examples", train_examples);
    meta.set("epochs", tc.epochs);
    let checkpoint = Checkpoint { model, scaler, meta };
    write_file(&layout.checkpoint(method), checkpoint.to_bytes())?;
    let mut csv = String::from("epoch,learning_rate,train_loss\n");
    for (e, l) in log.epoch_loss.iter().enumerate() {
        csv.push_str(&format!("{e},{:e},{:.9e}\n", tc.learning_rate_at(e), l));
    }
    if let Some(v) = val_loss {
        csv.push_str(&format!("# validation_loss_ss={v:.9e}\n"));
    }
    write_file(&layout.train_log(method), csv)?;
    Ok(TrainOutcome { train_examples, checkpoint, log, val_loss })
}

/// The selected diffusion channels of a raw patch, voxel-major.
fn select_patch(p: &PatchExample, scheme: &GradientScheme, sel: &[SubsampleSelection]) -> Vec<f64> {
    let d = scheme.total_directions();
    let offsets = scheme.shell_offsets();
    let mut out = Vec::new();
    for vox in p.input.chunks(d) {
        for (k, s) in sel.iter().enumerate() {
            out.extend(s.indices.iter().map(|&i| vox[offsets[k] + i]));
        }
    }
    out
}

/// A loaded checkpoint plus the test split, ready to score selections.
pub struct Evaluator {
    pub method: Method,
    pub checkpoint: Checkpoint,
    pub spec: FeatureSpec,
    pub fixed: Vec<SubsampleSelection>,
    pub scheme: GradientScheme,
    pub w: usize,
    tests: Vec<(DwiVolume, ParameterVolume)>,
    settings: robnoddi_core::shbasis::FitSettings,
}

pub struct Evaluation {
    pub row: CsvRow,
    pub reports: Vec<MetricsReport>,
    /// Prediction and cropped truth for each test volume.
    pub volumes: Vec<(ParameterVolume, ParameterVolume)>,
}

impl Evaluator {
    pub fn open(cfg: &ExperimentConfig, method: Method) -> Result<Self> {
        let layout = Layout::new(&cfg.output_dir);
        let data = Dataset::open(&layout)?;
        let path = layout.checkpoint(method);
        let bytes = fs::read(&path).map_err(|e| Error::Config(format!("no checkpoint at {}: {e}", path.display())))?;
        let checkpoint = Checkpoint::from_bytes(&bytes)?;
        let meta = &checkpoint.meta;
        if meta.get("method") != Some(method.name()) {
            return Err(Error::CorruptFile(format!("{} does not hold a {} model", path.display(), method.name())));
        }
        let get = |k: &str| meta.require(k).map_err(|_| Error::CorruptFile(format!("checkpoint lacks {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::CorruptFile(format!("bad checkpoint value for {k}")))
        };
        let representation = Representation::parse(get("representation")?)?;
        let sh_order = num("sh_order")?;
        let lambda: f64 = get("lambda")?.parse().map_err(|_| Error::CorruptFile("bad lambda".into()))?;
        let w = num("w")?;
        let fixed = (0..data.scheme.shells().len())
            .map(|k| parse_selection(get(&format!("fixed_selection.{k}"))?, k, data.scheme.shells()[k].directions.len()))
            .collect::<Result<Vec<_>>>()?;
        let shells: Vec<usize> = (0..data.scheme.shells().len()).collect();
        let spec = match representation {
            Representation::RawDwi => FeatureSpec::raw_dwi(shells, &fixed.iter().map(|s| s.len()).collect::<Vec<_>>()),
            Representation::ShCoeffs => FeatureSpec::sh_coeffs(sh_order, shells)?,
        };
        if spec.channels != num("channels")? {
            return Err(Error::CorruptFile("checkpoint channel count disagrees with its feature spec".into()));
        }
        let tests = data.split("test").iter().map(|e| data.load(e)).collect::<Result<Vec<_>>>()?;
        if tests.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        let settings = robnoddi_core::shbasis::FitSettings::new(sh_order.max(2), lambda)?;
        Ok(Self { method, checkpoint, spec, fixed, scheme: data.scheme, w, tests, settings })
    }

    pub fn selection(&self, mode: Mode, s1: usize, s2: usize, seed: u64) -> Result<Vec<SubsampleSelection>> {
        match mode {
            Mode::Ss => Ok(self.fixed.clone()),
            Mode::Rs => rs_selection(&self.scheme, s1, s2, seed),
        }
    }

    /// Scores the model on the test split restricted to `selection`.
    pub fn run(&self, mode: Mode, selection: &[SubsampleSelection], exec: Exec) -> Result<Evaluation> {
        if self.spec.representation == Representation::RawDwi {
            let got: usize = selection.iter().map(|s| s.len()).sum();
            if got != self.spec.channels {
                return Err(Error::Dimension(format!(
                    "{} was trained on {} raw channels ({}+{} directions) and cannot take {} ({}+{}); \
                     raw-input models need the training direction count",
                    self.method.name(),
                    self.spec.channels,
                    self.fixed[0].len(),
                    self.fixed[1].len(),
                    got,
                    selection[0].len(),
                    selection[1].len()
                )));
            }
        }
        let ck = &self.checkpoint;
        let mut reports = Vec::new();
        let mut volumes = Vec::new();
        for (dwi, truth) in &self.tests {
            let sub = select_volume(dwi, selection)?;
            let pred = predict_volume(&ck.model, &ck.scaler, &sub, &self.spec, &self.settings, self.w, exec)?;
            let truth = truth.crop(1)?;
            let mask: Vec<bool> = pred.mask.iter().zip(&truth.mask).map(|(a, b)| *a && *b).collect();
            reports.push(evaluate(&pred, &truth, &mask)?);
            volumes.push((pred, truth));
        }
        let agg = aggregate(&reports)?;
        let row = CsvRow {
            method: self.method.name().to_string(),
            sampling_mode: mode.name().to_string(),
            n_dirs_shell1: selection[0].len(),
            n_dirs_shell2: selection[1].len(),
            mse: agg.averaged.mse,
            psnr: agg.averaged.psnr,
            ssim: agg.averaged.ssim,
        };
        Ok(Evaluation { row, reports, volumes })
    }
}

fn eval_stem(method: Method, mode: Mode, s1: usize, s2: usize, seed: u64) -> String {
    match mode {
        Mode::Ss => format!("{}_ss_{s1}x{s2}", method.name()),
        Mode::Rs => format!("{}_rs_{s1}x{s2}_seed{seed}", method.name()),
    }
}

pub fn cmd_eval(cfg: &ExperimentConfig, method: Method, mode: Mode, s1: usize, s2: usize, seed: u64, exec: Exec) -> Result<Evaluation> {
    let ev = Evaluator::open(cfg, method)?;
    let sel = ev.selection(mode, s1, s2, seed)?;
    let out = ev.run(mode, &sel, exec)?;
    let layout = Layout::new(&cfg.output_dir);
    let stem = eval_stem(method, mode, sel[0].len(), sel[1].len(), seed);
    write_file(&layout.eval_dir().join(format!("{stem}.csv")), rows_to_csv(std::slice::from_ref(&out.row)))?;
    let (pred, _) = &out.volumes[0];
    write_file(&layout.pred_dir().join(format!("{stem}.rvol")), dataio::params_to_rvol(pred)?.to_bytes())?;
    Ok(out)
}

pub struct Ablation {
    pub rows: Vec<CsvRow>,
    /// MSE over the equal-count rows, in increasing count, never rises by
    /// more than 5% from one row to the next.
    pub monotone: bool,
}

pub const MONOTONE_TOLERANCE: f64 = 0.05;

pub fn monotone_flag(rows: &[CsvRow]) -> bool {
    let mut equal: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.n_dirs_shell1 == r.n_dirs_shell2) {
        match equal.iter_mut().find(|e| e.0 == r.n_dirs_shell1) {
            Some(e) => {
                e.1 += r.mse;
                e.2 += 1;
            }
            None => equal.push((r.n_dirs_shell1, r.mse, 1)),
        }
    }
    equal.sort_by_key(|e| e.0);
    let mse: Vec<f64> = equal.iter().map(|e| e.1 / e.2 as f64).collect();
    mse.windows(2).all(|w| w[1] <= w[0] * (1.0 + MONOTONE_TOLERANCE))
}

pub fn cmd_ablate(cfg: &ExperimentConfig, method: Method, grid: &[(usize, usize)], seeds: &[u64], exec: Exec) -> Result<Ablation> {
    let ev = Evaluator::open(cfg, method)?;
    let mut rows = Vec::new();
    for &(s1, s2) in grid {
        for &seed in seeds {
            let sel = ev.selection(Mode::Rs, s1, s2, seed)?;
            rows.push(ev.run(Mode::Rs, &sel, exec)?.row);
        }
    }
    write_file(&Layout::new(&cfg.output_dir).ablation(method), rows_to_csv(&rows))?;
    Ok(Ablation { monotone: monotone_flag(&rows), rows })
}
