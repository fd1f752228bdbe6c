//! Experiment configuration: a flat key=value file with section prefixes.
//! Every key is optional; missing keys take the defaults below.

use std::path::{Path, PathBuf};

use robnoddi_core::dataio::KeyValues;
use robnoddi_core::estimator::{LrSchedule, TrainConfig, DEFAULT_GATED_HIDDEN, DEFAULT_GATED_ITERATIONS, DEFAULT_HIDDEN};
use robnoddi_core::phantom::{Dims, MIN_PHANTOM_DIM};
use robnoddi_core::pipeline::MIN_ADAPTIVE_DIRECTIONS;
use robnoddi_core::shbasis::{FitSettings, DEFAULT_LAMBDA, DEFAULT_ORDER};
use robnoddi_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Mlp,
    Gated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSettings {
    pub dims: Dims,
    pub seed: u64,
    pub snr: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub b0_count: usize,
    pub shell_bvalues: Vec<f64>,
    pub shell_dirs: Vec<usize>,
    pub scheme_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSettings {
    pub w: usize,
    pub stride: usize,
    pub sh_order: usize,
    pub lambda: f64,
    pub n_min: usize,
    pub n_max: usize,
    /// Directions per shell in the fixed selection (raw_fixed, sh_fixed, SS).
    pub fixed_dirs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorSettings {
    pub architecture: Architecture,
    pub hidden: Vec<usize>,
    pub gated_hidden: usize,
    pub gated_iterations: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub s1: usize,
    pub s2: usize,
    pub rs_seeds: Vec<u64>,
    pub grid: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub phantom: PhantomSettings,
    pub pipeline: PipelineSettings,
    pub estimator: EstimatorSettings,
    pub eval: EvalSettings,
    pub output_dir: PathBuf,
}

pub const DEFAULT_GRID: [(usize, usize); 8] =
    [(20, 20), (25, 25), (30, 30), (35, 35), (40, 40), (16, 29), (21, 28), (26, 23)];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSettings {
                dims: [24, 24, 24],
                seed: 1000,
                snr: 30.0,
                train: 6,
                val: 2,
                test: 2,
                b0_count: 18,
                shell_bvalues: vec![1000.0, 2000.0],
                shell_dirs: vec![90, 90],
                scheme_seed: 7,
            },
            pipeline: PipelineSettings {
                w: 5,
                stride: 3,
                sh_order: DEFAULT_ORDER,
                lambda: DEFAULT_LAMBDA,
                n_min: 20,
                n_max: 60,
                fixed_dirs: 30,
            },
            estimator: EstimatorSettings {
                architecture: Architecture::Mlp,
                hidden: DEFAULT_HIDDEN.to_vec(),
                gated_hidden: DEFAULT_GATED_HIDDEN,
                gated_iterations: DEFAULT_GATED_ITERATIONS,
                train: TrainConfig { seed: 42, ..TrainConfig::default() },
            },
            eval: EvalSettings { s1: 30, s2: 30, rs_seeds: vec![1], grid: DEFAULT_GRID.to_vec() },
            output_dir: PathBuf::from("out"),
        }
    }
}

fn list<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<Option<Vec<T>>> {
    kv.get(key)
        .map(|v| {
            v.split(',')
                .map(|t| t.trim().parse::<T>().map_err(|_| Error::Config(format!("invalid entry {t:?} in {key}"))))
                .collect()
        })
        .transpose()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

const KNOWN_KEYS: &[&str] = &[
    "phantom.dims",
    "phantom.seed",
    "phantom.snr",
    "phantom.train",
    "phantom.val",
    "phantom.test",
    "phantom.b0",
    "phantom.shell_bvalues",
    "phantom.shell_dirs",
    "phantom.scheme_seed",
    "pipeline.w",
    "pipeline.stride",
    "pipeline.sh_order",
    "pipeline.lambda",
    "pipeline.n_min",
    "pipeline.n_max",
    "pipeline.fixed_dirs",
    "train.architecture",
    "train.hidden",
    "train.gated_hidden",
    "train.gated_iterations",
    "train.lr",
    "train.schedule",
    "train.decay_every",
    "train.decay_factor",
    "train.batch_size",
    "train.epochs",
    "train.seed",
    "eval.s1",
    "eval.s2",
    "eval.rs_seeds",
    "eval.grid",
    "output.dir",
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        if let Some((k, _)) = kv.entries().iter().find(|(k, _)| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key {k}")));
        }
        let mut c = Self::default();
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = kv.parse_value($key)? {
                    $field = v;
                }
            };
        }
        let p = &mut c.phantom;
        if let Some(d) = list::<usize>(&kv, "phantom.dims")? {
            if d.len() != 3 {
                return Err(Error::Config("phantom.dims needs three values".into()));
            }
            p.dims = [d[0], d[1], d[2]];
        }
        set!(p.seed, "phantom.seed");
        set!(p.snr, "phantom.snr");
        set!(p.train, "phantom.train");
        set!(p.val, "phantom.val");
        set!(p.test, "phantom.test");
        set!(p.b0_count, "phantom.b0");
        set!(p.scheme_seed, "phantom.scheme_seed");
        if let Some(v) = list(&kv, "phantom.shell_bvalues")? {
            p.shell_bvalues = v;
        }
        if let Some(v) = list(&kv, "phantom.shell_dirs")? {
            p.shell_dirs = v;
        }
        let q = &mut c.pipeline;
        set!(q.w, "pipeline.w");
        set!(q.stride, "pipeline.stride");
        set!(q.sh_order, "pipeline.sh_order");
        set!(q.lambda, "pipeline.lambda");
        set!(q.n_min, "pipeline.n_min");
        set!(q.n_max, "pipeline.n_max");
        set!(q.fixed_dirs, "pipeline.fixed_dirs");
        let e = &mut c.estimator;
        match kv.get("train.architecture") {
            None | Some("mlp") => e.architecture = Architecture::Mlp,
            Some("gated") => e.architecture = Architecture::Gated,
            Some(a) => return Err(Error::Config(format!("unknown architecture {a:?}"))),
        }
        if let Some(v) = list(&kv, "train.hidden")? {
            e.hidden = v;
        }
        set!(e.gated_hidden, "train.gated_hidden");
        set!(e.gated_iterations, "train.gated_iterations");
        let t = &mut e.train;
        set!(t.learning_rate, "train.lr");
        set!(t.batch_size, "train.batch_size");
        set!(t.epochs, "train.epochs");
        set!(t.seed, "train.seed");
        let (mut every, mut factor) = (10usize, 0.5f64);
        set!(every, "train.decay_every");
        set!(factor, "train.decay_factor");
        t.schedule = match kv.get("train.schedule").unwrap_or("step") {
            "step" => LrSchedule::StepDecay { every, factor },
            "fixed" => LrSchedule::Fixed,
            s => return Err(Error::Config(format!("unknown schedule {s:?}"))),
        };
        let v = &mut c.eval;
        set!(v.s1, "eval.s1");
        set!(v.s2, "eval.s2");
        if let Some(s) = list(&kv, "eval.rs_seeds")? {
            v.rs_seeds = s;
        }
        if let Some(g) = kv.get("eval.grid") {
            v.grid = parse_grid(g)?;
        }
        if let Some(d) = kv.get("output.dir") {
            c.output_dir = PathBuf::from(d);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.phantom;
        let bad = |m: String| Err(Error::Config(m));
        if p.dims.iter().any(|&d| d < MIN_PHANTOM_DIM) {
            return Err(Error::Domain(format!(
                "phantom.dims {:?}: every dimension must be >= {MIN_PHANTOM_DIM}",
                p.dims
            )));
        }
        if p.shell_bvalues.len() != 2 || p.shell_dirs.len() != 2 {
            return bad("exactly two shells are required".into());
        }
        if p.b0_count == 0 {
            return bad("phantom.b0 must be >= 1".into());
        }
        if p.train == 0 || p.test == 0 {
            return bad("at least one training and one test volume are required".into());
        }
        if !(p.snr > 0.0) {
            return bad(format!("phantom.snr {} must be > 0", p.snr));
        }
        let q = &self.pipeline;
        if q.w < 3 || q.w.is_multiple_of(2) || q.stride == 0 {
            return bad(format!("pipeline.w {} must be odd >= 3 and stride >= 1", q.w));
        }
        if q.w > p.dims.iter().copied().min().unwrap() {
            return bad(format!("pipeline.w {} exceeds phantom dims", q.w));
        }
        FitSettings::new(q.sh_order, q.lambda)?;
        let smallest = *p.shell_dirs.iter().min().unwrap();
        if q.n_min < MIN_ADAPTIVE_DIRECTIONS || q.n_min > q.n_max || q.n_max > smallest {
            return bad(format!("pipeline.n_min/n_max {}..{} outside {MIN_ADAPTIVE_DIRECTIONS}..{smallest}", q.n_min, q.n_max));
        }
        if q.fixed_dirs == 0 || q.fixed_dirs > smallest {
            return bad(format!("pipeline.fixed_dirs {} outside 1..={smallest}", q.fixed_dirs));
        }
        let e = &self.estimator;
        e.train.validate().map_err(|err| Error::Config(err.to_string()))?;
        if e.hidden.contains(&0) || e.gated_hidden == 0 {
            return bad("hidden sizes must be positive".into());
        }
        let v = &self.eval;
        for &(s1, s2) in v.grid.iter().chain(std::iter::once(&(v.s1, v.s2))) {
            if s1 == 0 || s2 == 0 || s1 > p.shell_dirs[0] || s2 > p.shell_dirs[1] {
                return bad(format!("direction counts {s1}/{s2} exceed the acquired shells"));
            }
        }
        if v.rs_seeds.is_empty() {
            return bad("eval.rs_seeds must not be empty".into());
        }
        Ok(())
    }

    pub fn fit_settings(&self) -> FitSettings {
        FitSettings { order: self.pipeline.sh_order, lambda: self.pipeline.lambda }
    }

    /// Canonical key=value rendering of every setting.
    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::new();
        let p = &self.phantom;
        kv.set("phantom.dims", join(&p.dims));
        kv.set("phantom.seed", p.seed);
        kv.set("phantom.snr", p.snr);
        kv.set("phantom.train", p.train);
        kv.set("phantom.val", p.val);
        kv.set("phantom.test", p.test);
        kv.set("phantom.b0", p.b0_count);
        kv.set("phantom.shell_bvalues", join(&p.shell_bvalues));
        kv.set("phantom.shell_dirs", join(&p.shell_dirs));
        kv.set("phantom.scheme_seed", p.scheme_seed);
        let q = &self.pipeline;
        kv.set("pipeline.w", q.w);
        kv.set("pipeline.stride", q.stride);
        kv.set("pipeline.sh_order", q.sh_order);
        kv.set("pipeline.lambda", q.lambda);
        kv.set("pipeline.n_min", q.n_min);
        kv.set("pipeline.n_max", q.n_max);
        kv.set("pipeline.fixed_dirs", q.fixed_dirs);
        let e = &self.estimator;
        kv.set("train.architecture", match e.architecture {
            Architecture::Mlp => "mlp",
            Architecture::Gated => "gated",
        });
        kv.set("train.hidden", join(&e.hidden));
        kv.set("train.gated_hidden", e.gated_hidden);
        kv.set("train.gated_iterations", e.gated_iterations);
        let t = &e.train;
        kv.set("train.lr", t.learning_rate);
        match t.schedule {
            LrSchedule::Fixed => kv.set("train.schedule", "fixed"),
            LrSchedule::StepDecay { every, factor } => {
                kv.set("train.schedule", "step");
                kv.set("train.decay_every", every);
                kv.set("train.decay_factor", factor);
            }
        }
        kv.set("train.batch_size", t.batch_size);
        kv.set("train.epochs", t.epochs);
        kv.set("train.seed", t.seed);
        let v = &self.eval;
        kv.set("eval.s1", v.s1);
        kv.set("eval.s2", v.s2);
        kv.set("eval.rs_seeds", join(&v.rs_seeds));
        kv.set("eval.grid", v.grid.iter().map(|(a, b)| format!("{a}/{b}")).collect::<Vec<_>>().join(","));
        kv.set("output.dir", self.output_dir.display());
        kv.to_text()
    }
}

pub fn parse_grid(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|pair| {
            let (a, b) = pair
                .trim()
                .split_once('/')
                .ok_or_else(|| Error::Config(format!("grid entry {pair:?} is not s1/s2")))?;
            let n = |s: &str| s.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad count {s:?}")));
            Ok((n(a)?, n(b)?))
        })
        .collect()
}
