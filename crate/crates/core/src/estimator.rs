//! Patch regressors from flattened features to (w-2)^3 × 3 parameter
//! patches: a ReLU MLP and a gated iterative model, both with logistic
//! outputs, trained on MSE with hand-written backpropagation and Adam.
//!
//! Parameters live in one flat vector per model. Each dense layer stores its
//! weight matrix row-major (`out × in`) followed by its bias.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{tiling_corners, gather_input, KeyValues, PatchExample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::gemm;
use crate::phantom::{voxel_index, DwiVolume, ParameterVolume};
use crate::pipeline::{test_features, FeatureSpec};
use crate::shbasis::FitSettings;
use crate::sphere::UnitDirection;

pub const DEFAULT_HIDDEN: [usize; 3] = [512, 512, 512];
pub const DEFAULT_GATED_HIDDEN: usize = 256;
pub const DEFAULT_GATED_ITERATIONS: usize = 8;
/// Examples per gradient chunk. Chunk gradients are summed in chunk order,
/// so the result does not depend on how chunks are scheduled.
pub const GRAD_CHUNK: usize = 32;
const PREDICT_BATCH: usize = 64;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_bias(z: &mut [f64], b: &[f64]) {
    for row in z.chunks_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
    }
}

fn sum_rows_into(delta: &[f64], width: usize, out: &mut [f64]) {
    for row in delta.chunks(width) {
        out.iter_mut().zip(row).for_each(|(o, d)| *o += d);
    }
}

/// Dense layer forward: `z = x W^T + b`, `x` is batch × n_in.
fn dense(x: &[f64], batch: usize, w: &[f64], b: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let mut z = vec![0.0; batch * n_out];
    gemm(batch, n_in, n_out, 1.0, x, false, w, true, 0.0, &mut z);
    add_bias(&mut z, b);
    z
}

fn uniform_fill(rng: &mut ChaCha8Rng, out: &mut [f64], limit: f64) {
    out.iter_mut().for_each(|v| *v = rng.gen_range(-limit..limit));
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl MlpModel {
    /// Zero-initialized network with layer widths `sizes` (input first).
    pub fn zeros(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Dimension(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        Ok(Self { sizes, params: vec![0.0; n] })
    }

    /// He-uniform hidden layers, Glorot-uniform output layer, zero biases.
    pub fn new(sizes: Vec<usize>, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = m.sizes.len() - 2;
        for l in 0..=last {
            let (n_in, n_out) = (m.sizes[l], m.sizes[l + 1]);
            let limit = if l == last { (6.0 / (n_in + n_out) as f64).sqrt() } else { (6.0 / n_in as f64).sqrt() };
            let (wo, _) = m.offsets()[l];
            uniform_fill(&mut rng, &mut m.params[wo..wo + n_in * n_out], limit);
        }
        Ok(m)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// (weight offset, bias offset) per layer.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut acc = 0;
        self.sizes
            .windows(2)
            .map(|p| {
                let w = acc;
                acc += p[0] * p[1] + p[1];
                (w, w + p[0] * p[1])
            })
            .collect()
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (wo, bo) = self.offsets()[l];
        let n_out = self.sizes[l + 1];
        (&self.params[wo..bo], &self.params[bo..bo + n_out])
    }

    /// Post-activation outputs of every layer.
    fn activations(&self, x: &[f64], batch: usize) -> Vec<Vec<f64>> {
        let layers = self.sizes.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let input = if l == 0 { x } else { &acts[l - 1] };
            let mut z = dense(input, batch, w, b, self.sizes[l], self.sizes[l + 1]);
            if l + 1 == layers {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            } else {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    fn accumulate_gradient(&self, x: &[f64], y: &[f64], batch: usize, scale: f64, grad: &mut [f64]) -> f64 {
        let acts = self.activations(x, batch);
        let offsets = self.offsets();
        let p = acts.last().unwrap();
        let mut sse = 0.0;
        let mut delta: Vec<f64> = p
            .iter()
            .zip(y)
            .map(|(&p, &t)| {
                sse += (p - t) * (p - t);
                scale * (p - t) * p * (1.0 - p)
            })
            .collect();
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = offsets[l];
            let input = if l == 0 { x } else { &acts[l - 1] };
            gemm(n_out, batch, n_in, 1.0, &delta, true, input, false, 1.0, &mut grad[wo..bo]);
            sum_rows_into(&delta, n_out, &mut grad[bo..bo + n_out]);
            if l > 0 {
                let mut prev = vec![0.0; batch * n_in];
                gemm(batch, n_out, n_in, 1.0, &delta, false, &self.params[wo..bo], false, 0.0, &mut prev);
                prev.iter_mut().zip(input).for_each(|(d, &a)| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
        }
        sse
    }
}

/// `h0 = relu(c)` with `c = W_in x + b_in`, then `T` shared steps
/// `g = σ(W_g h + b_g)`, `u = relu(c + W_u h + b_u)`, `h ← g⊙h + (1-g)⊙u`,
/// and a logistic head on the final code.
///
/// Parameter order: W_in, b_in, W_g, b_g, W_u, b_u, W_o, b_o.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedIterativeModel {
    input: usize,
    hidden: usize,
    output: usize,
    iterations: usize,
    params: Vec<f64>,
}

struct GatedOffsets {
    w_in: usize,
    b_in: usize,
    w_g: usize,
    b_g: usize,
    w_u: usize,
    b_u: usize,
    w_o: usize,
    b_o: usize,
    end: usize,
}

struct GatedTrace {
    c: Vec<f64>,
    /// h_0..=h_T.
    h: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    p: Vec<f64>,
}

impl GatedIterativeModel {
    pub fn zeros(input: usize, hidden: usize, output: usize, iterations: usize) -> Result<Self> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(Error::Dimension("gated model sizes must be positive".into()));
        }
        let mut m = Self { input, hidden, output, iterations, params: Vec::new() };
        m.params = vec![0.0; m.offsets().end];
        Ok(m)
    }

    pub fn new(input: usize, hidden: usize, output: usize, iterations: usize, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(input, hidden, output, iterations)?;
        let o = m.offsets();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = hidden as f64;
        uniform_fill(&mut rng, &mut m.params[o.w_in..o.b_in], (6.0 / input as f64).sqrt());
        uniform_fill(&mut rng, &mut m.params[o.w_g..o.b_g], (1.0 / h).sqrt());
        uniform_fill(&mut rng, &mut m.params[o.w_u..o.b_u], (1.0 / h).sqrt());
        uniform_fill(&mut rng, &mut m.params[o.w_o..o.b_o], (6.0 / (h + output as f64)).sqrt());
        Ok(m)
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn offsets(&self) -> GatedOffsets {
        let (i, h, o) = (self.input, self.hidden, self.output);
        let w_in = 0;
        let b_in = w_in + h * i;
        let w_g = b_in + h;
        let b_g = w_g + h * h;
        let w_u = b_g + h;
        let b_u = w_u + h * h;
        let w_o = b_u + h;
        let b_o = w_o + o * h;
        GatedOffsets { w_in, b_in, w_g, b_g, w_u, b_u, w_o, b_o, end: b_o + o }
    }

    fn trace(&self, x: &[f64], batch: usize) -> GatedTrace {
        let o = self.offsets();
        let (hd, pr) = (self.hidden, &self.params);
        let c = dense(x, batch, &pr[o.w_in..o.b_in], &pr[o.b_in..o.w_g], self.input, hd);
        let mut h = vec![c.iter().map(|v| v.max(0.0)).collect::<Vec<_>>()];
        let (mut gs, mut us) = (Vec::new(), Vec::new());
        for _ in 0..self.iterations {
            let prev = h.last().unwrap();
            let mut g = dense(prev, batch, &pr[o.w_g..o.b_g], &pr[o.b_g..o.w_u], hd, hd);
            g.iter_mut().for_each(|v| *v = sigmoid(*v));
            let mut u = dense(prev, batch, &pr[o.w_u..o.b_u], &pr[o.b_u..o.w_o], hd, hd);
            u.iter_mut().zip(&c).for_each(|(v, c)| *v = (*v + c).max(0.0));
            let next = prev.iter().zip(&g).zip(&u).map(|((h, g), u)| g * h + (1.0 - g) * u).collect();
            h.push(next);
            gs.push(g);
            us.push(u);
        }
        let mut p = dense(h.last().unwrap(), batch, &pr[o.w_o..o.b_o], &pr[o.b_o..o.end], hd, self.output);
        p.iter_mut().for_each(|v| *v = sigmoid(*v));
        GatedTrace { c, h, g: gs, u: us, p }
    }

    fn accumulate_gradient(&self, x: &[f64], y: &[f64], batch: usize, scale: f64, grad: &mut [f64]) -> f64 {
        let o = self.offsets();
        let (hd, out) = (self.hidden, self.output);
        let tr = self.trace(x, batch);
        let mut sse = 0.0;
        let dzo: Vec<f64> = tr
            .p
            .iter()
            .zip(y)
            .map(|(&p, &t)| {
                sse += (p - t) * (p - t);
                scale * (p - t) * p * (1.0 - p)
            })
            .collect();
        let h_last = tr.h.last().unwrap();
        gemm(out, batch, hd, 1.0, &dzo, true, h_last, false, 1.0, &mut grad[o.w_o..o.b_o]);
        sum_rows_into(&dzo, out, &mut grad[o.b_o..o.end]);
        let mut dh = vec![0.0; batch * hd];
        gemm(batch, out, hd, 1.0, &dzo, false, &self.params[o.w_o..o.b_o], false, 0.0, &mut dh);
        let mut dc = vec![0.0; batch * hd];
        for t in (0..self.iterations).rev() {
            let (h_prev, g, u) = (&tr.h[t], &tr.g[t], &tr.u[t]);
            let mut dzg = vec![0.0; batch * hd];
            let mut dzu = vec![0.0; batch * hd];
            for i in 0..batch * hd {
                dzg[i] = dh[i] * (h_prev[i] - u[i]) * g[i] * (1.0 - g[i]);
                dzu[i] = if u[i] > 0.0 { dh[i] * (1.0 - g[i]) } else { 0.0 };
            }
            gemm(hd, batch, hd, 1.0, &dzg, true, h_prev, false, 1.0, &mut grad[o.w_g..o.b_g]);
            sum_rows_into(&dzg, hd, &mut grad[o.b_g..o.w_u]);
            gemm(hd, batch, hd, 1.0, &dzu, true, h_prev, false, 1.0, &mut grad[o.w_u..o.b_u]);
            sum_rows_into(&dzu, hd, &mut grad[o.b_u..o.w_o]);
            dc.iter_mut().zip(&dzu).for_each(|(a, b)| *a += b);
            let mut next: Vec<f64> = dh.iter().zip(g).map(|(d, g)| d * g).collect();
            gemm(batch, hd, hd, 1.0, &dzg, false, &self.params[o.w_g..o.b_g], false, 1.0, &mut next);
            gemm(batch, hd, hd, 1.0, &dzu, false, &self.params[o.w_u..o.b_u], false, 1.0, &mut next);
            dh = next;
        }
        for ((d, dh), c) in dc.iter_mut().zip(&dh).zip(&tr.c) {
            if *c > 0.0 {
                *d += dh;
            }
        }
        gemm(hd, batch, self.input, 1.0, &dc, true, x, false, 1.0, &mut grad[o.w_in..o.b_in]);
        sum_rows_into(&dc, hd, &mut grad[o.b_in..o.w_g]);
        sse
    }
}

/// Either architecture behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum Estimator {
    Mlp(MlpModel),
    Gated(GatedIterativeModel),
}

impl Estimator {
    pub fn input_dim(&self) -> usize {
        match self {
            Estimator::Mlp(m) => m.sizes[0],
            Estimator::Gated(m) => m.input,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Estimator::Mlp(m) => *m.sizes.last().unwrap(),
            Estimator::Gated(m) => m.output,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Estimator::Mlp(m) => &m.params,
            Estimator::Gated(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Estimator::Mlp(m) => &mut m.params,
            Estimator::Gated(m) => &mut m.params,
        }
    }

    fn check(&self, x: &[f64], batch: usize) -> Result<()> {
        if batch == 0 || x.len() != batch * self.input_dim() {
            return Err(Error::Dimension(format!(
                "{} feature values for batch {batch} × input {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Predictions for `batch` row-major feature vectors.
    pub fn forward(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check(x, batch)?;
        Ok(match self {
            Estimator::Mlp(m) => m.activations(x, batch).pop().unwrap(),
            Estimator::Gated(m) => m.trace(x, batch).p,
        })
    }

    /// Adds `scale * d(sum of squared errors)/2` into `grad`, i.e. with
    /// `scale = 2 / n_elements` the gradient of the batch MSE. Returns the
    /// sum of squared errors.
    pub fn accumulate_gradient(&self, x: &[f64], y: &[f64], batch: usize, scale: f64, grad: &mut [f64]) -> Result<f64> {
        self.check(x, batch)?;
        if y.len() != batch * self.output_dim() || grad.len() != self.params().len() {
            return Err(Error::Dimension("target or gradient buffer has the wrong size".into()));
        }
        Ok(match self {
            Estimator::Mlp(m) => m.accumulate_gradient(x, y, batch, scale, grad),
            Estimator::Gated(m) => m.accumulate_gradient(x, y, batch, scale, grad),
        })
    }

    /// MSE and its exact gradient with respect to every parameter.
    pub fn backward(&self, x: &[f64], y: &[f64], batch: usize) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params().len()];
        let n = (batch * self.output_dim()) as f64;
        let sse = self.accumulate_gradient(x, y, batch, 2.0 / n, &mut grad)?;
        Ok((sse / n, grad))
    }

    fn descriptor(&self, kv: &mut KeyValues) {
        match self {
            Estimator::Mlp(m) => {
                kv.set("architecture", "mlp");
                kv.set("layers", m.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
            }
            Estimator::Gated(m) => {
                kv.set("architecture", "gated");
                kv.set("input", m.input);
                kv.set("hidden", m.hidden);
                kv.set("output", m.output);
                kv.set("iterations", m.iterations);
            }
        }
    }

    fn from_descriptor(kv: &KeyValues) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            kv.parse_value(k)?.ok_or_else(|| Error::CorruptFile(format!("checkpoint header lacks {k}")))
        };
        match kv.get("architecture") {
            Some("mlp") => {
                let sizes = kv
                    .require("layers")?
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| Error::CorruptFile(format!("bad layer size {s:?}"))))
                    .collect::<Result<Vec<usize>>>()?;
                Ok(Estimator::Mlp(MlpModel::zeros(sizes)?))
            }
            Some("gated") => Ok(Estimator::Gated(GatedIterativeModel::zeros(
                num("input")?,
                num("hidden")?,
                num("output")?,
                num("iterations")?,
            )?)),
            other => Err(Error::Version(format!("unknown architecture {other:?}"))),
        }
    }
}

pub fn loss_mse(prediction: &[f64], target: &[f64]) -> Result<f64> {
    if prediction.len() != target.len() || prediction.is_empty() {
        return Err(Error::Dimension(format!("{} predictions vs {} targets", prediction.len(), target.len())));
    }
    Ok(prediction.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / prediction.len() as f64)
}

/// Batch MSE gradient computed in fixed [`GRAD_CHUNK`]-example chunks and
/// reduced in chunk order. `scratch` is reused across calls.
pub fn batch_gradient(
    model: &Estimator,
    x: &[f64],
    y: &[f64],
    batch: usize,
    exec: Exec,
    scratch: &mut Vec<f64>,
    grad: &mut [f64],
) -> Result<f64> {
    let np = model.params().len();
    let (ni, no) = (model.input_dim(), model.output_dim());
    let chunks = batch.div_ceil(GRAD_CHUNK);
    scratch.resize(chunks * np, 0.0);
    scratch.iter_mut().for_each(|v| *v = 0.0);
    let scale = 2.0 / (batch * no) as f64;
    let sse = std::sync::Mutex::new(vec![0.0; chunks]);
    let failed = std::sync::Mutex::new(None);
    exec.for_each_chunk_mut(scratch, np, |c, g| {
        let lo = c * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(batch);
        match model.accumulate_gradient(&x[lo * ni..hi * ni], &y[lo * no..hi * no], hi - lo, scale, g) {
            Ok(s) => sse.lock().unwrap()[c] = s,
            Err(e) => *failed.lock().unwrap() = Some(e),
        }
    });
    if let Some(e) = failed.into_inner().unwrap() {
        return Err(e);
    }
    grad.copy_from_slice(&scratch[..np]);
    for c in 1..chunks {
        grad.iter_mut().zip(&scratch[c * np..(c + 1) * np]).for_each(|(a, b)| *a += b);
    }
    Ok(sse.into_inner().unwrap().iter().sum::<f64>() / (batch * no) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Fixed,
    /// Multiply by `factor` every `every` epochs.
    StepDecay { every: usize, factor: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            schedule: LrSchedule::StepDecay { every: 10, factor: 0.5 },
            batch_size: 128,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Domain("learning rate must be > 0 and batch size >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Domain("invalid Adam constants".into()));
        }
        if let LrSchedule::StepDecay { every: 0, .. } = self.schedule {
            return Err(Error::Domain("step decay interval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Fixed => self.learning_rate,
            LrSchedule::StepDecay { every, factor } => self.learning_rate * factor.powi((epoch / every) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step(weights: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, config: &TrainConfig) -> Result<()> {
    if weights.len() != grads.len() || state.m.len() != weights.len() || state.v.len() != weights.len() {
        return Err(Error::Dimension("Adam buffers differ in length".into()));
    }
    state.step += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..weights.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        weights[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// Per-channel feature standardization shared by every voxel of a patch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn fit(examples: &[PatchExample]) -> Result<Self> {
        let first = examples.first().ok_or(Error::InsufficientInput { needed: 1, got: 0 })?;
        let c = first.channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for e in examples {
            if e.channels != c {
                return Err(Error::Dimension("examples disagree on channel count".into()));
            }
            for vox in e.input.chunks(c) {
                for k in 0..c {
                    sum[k] += vox[k];
                    sq[k] += vox[k] * vox[k];
                }
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / n as f64 - m * m).max(0.0).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_into(&self, features: &[f64], out: &mut [f64]) {
        let c = self.channels();
        for (src, dst) in features.chunks(c).zip(out.chunks_mut(c)) {
            for k in 0..c {
                dst[k] = (src[k] - self.mean[k]) / self.std[k];
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Mini-batch Adam training. `next_epoch(e)` supplies the examples of epoch
/// `e`; batches are drawn in an order shuffled from `config.seed`.
pub fn train<F>(
    model: &mut Estimator,
    scaler: &FeatureScaler,
    config: &TrainConfig,
    exec: Exec,
    mut next_epoch: F,
) -> Result<TrainLog>
where
    F: FnMut(usize) -> Result<Arc<Vec<PatchExample>>>,
{
    config.validate()?;
    let (ni, no) = (model.input_dim(), model.output_dim());
    let mut state = AdamState::new(model.params().len());
    let mut grad = vec![0.0; model.params().len()];
    let mut scratch = Vec::new();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let examples = next_epoch(epoch)?;
        if examples.is_empty() {
            return Err(Error::InsufficientInput { needed: 1, got: 0 });
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let lr = config.learning_rate_at(epoch);
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let b = idx.len();
            let mut x = vec![0.0; b * ni];
            let mut y = Vec::with_capacity(b * no);
            for (row, &i) in x.chunks_mut(ni).zip(idx) {
                let e = &examples[i];
                if e.input.len() != ni || e.target.len() != no {
                    return Err(Error::Dimension(format!(
                        "example has {}/{} values, model expects {ni}/{no}",
                        e.input.len(),
                        e.target.len()
                    )));
                }
                scaler.apply_into(&e.input, row);
                y.extend_from_slice(&e.target);
            }
            let loss = batch_gradient(model, &x, &y, b, exec, &mut scratch, &mut grad)?;
            adam_step(model.params_mut(), &grad, &mut state, lr, config)?;
            total += loss * b as f64;
        }
        log.epoch_loss.push(total / examples.len() as f64);
    }
    Ok(log)
}

/// Predictions for feature examples, in order (targets ignored).
pub fn predict_examples(model: &Estimator, scaler: &FeatureScaler, examples: &[PatchExample], exec: Exec) -> Result<Vec<Vec<f64>>> {
    let ni = model.input_dim();
    let batches = exec.try_map(examples.len().div_ceil(PREDICT_BATCH), |k| {
        let chunk = &examples[k * PREDICT_BATCH..((k + 1) * PREDICT_BATCH).min(examples.len())];
        let mut x = vec![0.0; chunk.len() * ni];
        for (row, e) in x.chunks_mut(ni).zip(chunk) {
            if e.input.len() != ni {
                return Err(Error::Dimension(format!("example has {} features, model expects {ni}", e.input.len())));
            }
            scaler.apply_into(&e.input, row);
        }
        model.forward(&x, chunk.len())
    })?;
    let no = model.output_dim();
    Ok(batches.into_iter().flat_map(|b| b.chunks(no).map(|c| c.to_vec()).collect::<Vec<_>>()).collect())
}

/// Tiles a normalized volume with `w`-patches at stride `w-2` (plus a final
/// corner per axis), predicts every center block and returns the estimate
/// cropped by one voxel per face. Voxels outside the input mask are zero.
pub fn predict_volume(
    model: &Estimator,
    scaler: &FeatureScaler,
    vol: &DwiVolume,
    spec: &FeatureSpec,
    settings: &FitSettings,
    w: usize,
    exec: Exec,
) -> Result<ParameterVolume> {
    if !vol.normalized {
        return Err(Error::NormalizationRequired);
    }
    crate::dataio::check_patch_width(w, vol.dims)?;
    let inner = w - 2;
    if model.output_dim() != inner * inner * inner * 3 || model.input_dim() != w * w * w * spec.channels {
        return Err(Error::Dimension("model shape does not match the patch width and feature spec".into()));
    }
    let corners = tiling_corners(vol.dims, w);
    let examples = exec.try_map(corners.len(), |k| -> Result<PatchExample> {
        let raw = gather_input(vol, corners[k], w);
        let f = test_features(&raw, w, &vol.scheme, spec, settings)?;
        Ok(PatchExample {
            w,
            channels: spec.channels,
            input: f,
            target: Vec::new(),
            provenance: crate::dataio::Provenance { volume_id: 0, corner: corners[k] },
        })
    })?;
    let preds = predict_examples(model, scaler, &examples, exec)?;
    let mut full = ParameterVolume {
        dims: vol.dims,
        vic: vec![0.0; vol.n_voxels()],
        viso: vec![0.0; vol.n_voxels()],
        od: vec![0.0; vol.n_voxels()],
        mu: vec![UnitDirection::Z; vol.n_voxels()],
        mask: vol.mask.clone(),
    };
    for (corner, p) in corners.iter().zip(&preds) {
        let mut k = 0;
        for z in 0..inner {
            for y in 0..inner {
                for x in 0..inner {
                    let i = voxel_index(vol.dims, corner[0] + 1 + x, corner[1] + 1 + y, corner[2] + 1 + z);
                    if vol.mask[i] {
                        full.vic[i] = p[3 * k];
                        full.viso[i] = p[3 * k + 1];
                        full.od[i] = p[3 * k + 2];
                    }
                    k += 1;
                }
            }
        }
    }
    full.crop(1)
}

const CHECKPOINT_MAGIC: &str = "ROBNODDI-CHECKPOINT 1";
const END_HEADER: &str = "end-header";

/// A trained model with its feature scaler and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Estimator,
    pub scaler: FeatureScaler,
    pub meta: KeyValues,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut kv = KeyValues::new();
        self.model.descriptor(&mut kv);
        kv.set("param_count", self.model.params().len());
        kv.set("scaler_channels", self.scaler.channels());
        for (k, v) in self.meta.entries() {
            kv.set(&format!("meta.{k}"), v);
        }
        let mut out = format!(
            "{CHECKPOINT_MAGIC}\n\
             # Text header of key=value lines up to '{END_HEADER}', then little-endian f64 values:\n\
             # param_count model parameters (per layer: weights row-major out x in, then biases),\n\
             # then scaler_channels feature means, then scaler_channels feature standard deviations.\n"
        )
        .into_bytes();
        out.extend_from_slice(kv.to_text().as_bytes());
        out.extend_from_slice(format!("{END_HEADER}\n").as_bytes());
        for v in self.model.params().iter().chain(&self.scaler.mean).chain(&self.scaler.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let marker = format!("\n{END_HEADER}\n");
        let pos = bytes
            .windows(marker.len())
            .position(|w| w == marker.as_bytes())
            .ok_or_else(|| Error::CorruptFile("checkpoint header is not terminated".into()))?;
        let header = std::str::from_utf8(&bytes[..pos])
            .map_err(|_| Error::CorruptFile("checkpoint header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Version("not a version-1 checkpoint".into()));
        }
        let kv = KeyValues::parse(&lines.collect::<Vec<_>>().join("\n"))
            .map_err(|e| Error::CorruptFile(e.to_string()))?;
        let mut model = Estimator::from_descriptor(&kv)?;
        let count = |k: &str| -> Result<usize> {
            kv.parse_value(k)
                .map_err(|e| Error::CorruptFile(e.to_string()))?
                .ok_or_else(|| Error::CorruptFile(format!("checkpoint header lacks {k}")))
        };
        let np = count("param_count")?;
        let nc = count("scaler_channels")?;
        if np != model.params().len() {
            return Err(Error::CorruptFile(format!("param_count {np} does not match the architecture")));
        }
        let payload = &bytes[pos + marker.len()..];
        if payload.len() != 8 * (np + 2 * nc) {
            return Err(Error::CorruptFile(format!("payload has {} bytes, expected {}", payload.len(), 8 * (np + 2 * nc))));
        }
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        model.params_mut().copy_from_slice(&values[..np]);
        let scaler = FeatureScaler { mean: values[np..np + nc].to_vec(), std: values[np + nc..].to_vec() };
        let mut meta = KeyValues::new();
        for (k, v) in kv.entries() {
            if let Some(k) = k.strip_prefix("meta.") {
                meta.set(k, v);
            }
        }
        Ok(Self { model, scaler, meta })
    }
}
