//! NODDI forward model: Watson-dispersed sticks, a tortuosity-constrained
//! extracellular tensor, and a free-water ball, plus Rician noise.
//!
//! Two routes evaluate the intracellular compartment:
//! [`synthesize_signal`] sums over an explicit spherical quadrature grid, and
//! [`SignalModel`] uses the Legendre expansion of the stick kernel and of the
//! Watson density (Funk-Hecke), which is what phantom generation runs on.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::quadrature::{gauss_legendre, legendre_all, SphereQuadrature};
use crate::sphere::{GradientScheme, UnitDirection};

pub const DEFAULT_D_PAR: f64 = 1.7e-3;
pub const DEFAULT_D_ISO: f64 = 3.0e-3;
pub const MIN_QUADRATURE_POINTS: usize = 100;

/// Above this concentration the scaled Kummer function switches from the
/// power series to its asymptotic expansion.
const KAPPA_SERIES_LIMIT: f64 = 600.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoddiParams {
    pub vic: f64,
    pub viso: f64,
    pub od: f64,
    pub mu: UnitDirection,
}

impl NoddiParams {
    pub fn new(vic: f64, viso: f64, od: f64, mu: UnitDirection) -> Result<Self> {
        let p = Self { vic, viso, od, mu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.vic) {
            return Err(Error::Domain(format!("vic {} outside [0, 1]", self.vic)));
        }
        if !(0.0..=1.0).contains(&self.viso) {
            return Err(Error::Domain(format!("viso {} outside [0, 1]", self.viso)));
        }
        if !(self.od > 0.0 && self.od <= 1.0) {
            return Err(Error::Domain(format!("od {} outside (0, 1]", self.od)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WatsonDistribution {
    pub mu: UnitDirection,
    pub kappa: f64,
}

impl WatsonDistribution {
    pub fn new(mu: UnitDirection, kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0) {
            return Err(Error::Domain(format!("Watson concentration {kappa} must be >= 0")));
        }
        Ok(Self { mu, kappa })
    }
}

/// Diffusivities in mm^2/s.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TissueConstants {
    pub d_par: f64,
    pub d_iso: f64,
}

impl TissueConstants {
    pub fn new(d_par: f64, d_iso: f64) -> Result<Self> {
        if !(d_par > 0.0 && d_iso > 0.0 && d_par.is_finite() && d_iso.is_finite()) {
            return Err(Error::Domain("diffusivities must be positive".into()));
        }
        Ok(Self { d_par, d_iso })
    }
}

impl Default for TissueConstants {
    fn default() -> Self {
        Self { d_par: DEFAULT_D_PAR, d_iso: DEFAULT_D_ISO }
    }
}

pub fn od_to_kappa(od: f64) -> Result<f64> {
    if !(od > 0.0 && od <= 1.0) {
        return Err(Error::Domain(format!("od {od} outside (0, 1]")));
    }
    if od == 1.0 {
        return Ok(0.0);
    }
    Ok(1.0 / (od * PI / 2.0).tan())
}

pub fn kappa_to_od(kappa: f64) -> Result<f64> {
    if !(kappa >= 0.0) {
        return Err(Error::Domain(format!("kappa {kappa} must be >= 0")));
    }
    Ok(2.0 / PI * (1.0 / kappa).atan())
}

/// Partial sums of `sum_k kappa^k/k! / (2k+1)` and `sum_k kappa^k/k! / (2k+3)`,
/// i.e. the integrals of `e^{kappa t^2}` and `t^2 e^{kappa t^2}` over [0, 1].
fn kummer_series(kappa: f64) -> (f64, f64) {
    let mut term = 1.0;
    let mut m = 1.0;
    let mut m2 = 1.0 / 3.0;
    let mut k = 0usize;
    loop {
        k += 1;
        term *= kappa / k as f64;
        let a = term / (2 * k + 1) as f64;
        let b = term / (2 * k + 3) as f64;
        m += a;
        m2 += b;
        if k as f64 > kappa && a < 1e-14 * m && b < 1e-14 * m2 {
            break;
        }
        if k > 5000 {
            break;
        }
    }
    (m, m2)
}

/// Confluent hypergeometric `M(1/2, 3/2, kappa)`.
pub fn kummer_m_half(kappa: f64) -> Result<f64> {
    if !(kappa >= 0.0) {
        return Err(Error::Domain(format!("kappa {kappa} must be >= 0")));
    }
    if kappa > KAPPA_SERIES_LIMIT {
        return Ok(kummer_m_half_scaled(kappa)? * kappa.exp());
    }
    Ok(kummer_series(kappa).0)
}

/// `M(1/2, 3/2, kappa) * exp(-kappa)`, finite for every kappa.
pub fn kummer_m_half_scaled(kappa: f64) -> Result<f64> {
    if !(kappa >= 0.0) {
        return Err(Error::Domain(format!("kappa {kappa} must be >= 0")));
    }
    if kappa <= KAPPA_SERIES_LIMIT {
        return Ok(kummer_series(kappa).0 * (-kappa).exp());
    }
    let inv = 1.0 / kappa;
    Ok(0.5 * inv * (1.0 + 0.5 * inv + 0.75 * inv * inv + 1.875 * inv * inv * inv))
}

pub fn watson_pdf(n: &UnitDirection, w: &WatsonDistribution) -> Result<f64> {
    let norm = n.dot(n).sqrt();
    if (norm - 1.0).abs() > crate::sphere::NORM_TOLERANCE {
        return Err(Error::InvalidDirection { norm });
    }
    let c = w.mu.dot(n);
    let scaled = kummer_m_half_scaled(w.kappa)?;
    Ok((w.kappa * (c * c - 1.0)).exp() / (4.0 * PI * scaled))
}

/// Mean squared alignment `<(mu . n)^2>` under a Watson distribution.
pub fn watson_tau(kappa: f64) -> Result<f64> {
    if !(kappa >= 0.0) {
        return Err(Error::Domain(format!("kappa {kappa} must be >= 0")));
    }
    if kappa == 0.0 {
        return Ok(1.0 / 3.0);
    }
    if kappa <= KAPPA_SERIES_LIMIT {
        let (m, m2) = kummer_series(kappa);
        return Ok(m2 / m);
    }
    // Integration by parts: tau = (e^kappa / M - 1) / (2 kappa).
    let ratio = 1.0 / kummer_m_half_scaled(kappa)?;
    Ok((ratio - 1.0) / (2.0 * kappa))
}

/// Extracellular diffusivity along `g` for the given parameters.
fn extracellular_adc(p: &NoddiParams, consts: &TissueConstants, tau: f64, g: &UnitDirection) -> f64 {
    let d_perp = consts.d_par * (1.0 - p.vic);
    let axial = d_perp + (consts.d_par - d_perp) * tau;
    let radial = d_perp + (consts.d_par - d_perp) * (1.0 - tau) / 2.0;
    let c = g.dot(&p.mu);
    radial + (axial - radial) * c * c
}

fn check_inputs(p: &NoddiParams, bvalue: f64, g: &UnitDirection) -> Result<()> {
    p.validate()?;
    if !(bvalue > 0.0 && bvalue.is_finite()) {
        return Err(Error::Domain(format!("b-value {bvalue} must be positive")));
    }
    let norm = g.dot(g).sqrt();
    if (norm - 1.0).abs() > crate::sphere::NORM_TOLERANCE {
        return Err(Error::InvalidDirection { norm });
    }
    Ok(())
}

fn combine(p: &NoddiParams, consts: &TissueConstants, bvalue: f64, a_ic: f64, a_ec: f64) -> f64 {
    (1.0 - p.viso) * (p.vic * a_ic + (1.0 - p.vic) * a_ec) + p.viso * (-bvalue * consts.d_iso).exp()
}

/// Normalized signal for one gradient direction, with the Watson-dispersed
/// stick integrated over `quad` (density weights renormalized on the grid).
pub fn synthesize_signal(
    p: &NoddiParams,
    consts: &TissueConstants,
    bvalue: f64,
    g: &UnitDirection,
    quad: &SphereQuadrature,
) -> Result<f64> {
    check_inputs(p, bvalue, g)?;
    if quad.len() < MIN_QUADRATURE_POINTS {
        return Err(Error::InsufficientQuadrature(quad.len()));
    }
    let kappa = od_to_kappa(p.od)?;
    let watson = WatsonDistribution::new(p.mu, kappa)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (n, w) in quad.points.iter().zip(&quad.weights) {
        let density = watson_pdf(n, &watson)? * w;
        let c = g.dot(n);
        num += density * (-bvalue * consts.d_par * c * c).exp();
        den += density;
    }
    let a_ic = num / den;
    let tau = watson_tau(kappa)?;
    let a_ec = (-bvalue * extracellular_adc(p, consts, tau, g)).exp();
    Ok(combine(p, consts, bvalue, a_ic, a_ec))
}

/// Rician magnitude noise with `sigma = 1/snr` relative to a unit b0.
/// An infinite `snr` returns the signal unchanged.
pub fn add_rician_noise<R: Rng + ?Sized>(signal: f64, snr: f64, rng: &mut R) -> Result<f64> {
    if !(snr > 0.0) {
        return Err(Error::Domain(format!("snr {snr} must be > 0")));
    }
    if !(signal >= 0.0) {
        return Err(Error::Domain(format!("signal {signal} must be >= 0")));
    }
    if snr.is_infinite() {
        return Ok(signal);
    }
    let normal = Normal::new(0.0, 1.0 / snr).map_err(|e| Error::Domain(e.to_string()))?;
    let e1: f64 = normal.sample(rng);
    let e2: f64 = normal.sample(rng);
    Ok(((signal + e1).powi(2) + e2 * e2).sqrt())
}

/// Fast forward model: the stick kernel `exp(-b d t^2)` and the Watson
/// density are both expanded in Legendre polynomials of `t`, so by
/// Funk-Hecke the dispersed-stick signal is `sum_l k_l w_l P_l(g . mu)`.
#[derive(Clone, Debug)]
pub struct SignalModel {
    consts: TissueConstants,
    lmax: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// `legendre[i * (lmax+1) + l] = P_l(nodes[i])`.
    legendre: Vec<f64>,
}

pub const DEFAULT_LEGENDRE_ORDER: usize = 40;
const LEGENDRE_NODES: usize = 128;

impl SignalModel {
    pub fn new(consts: TissueConstants) -> Self {
        Self::with_order(consts, DEFAULT_LEGENDRE_ORDER)
    }

    pub fn with_order(consts: TissueConstants, lmax: usize) -> Self {
        // Nodes on [0, 1]; the integrands below are even in t.
        let (x, w) = gauss_legendre(2 * LEGENDRE_NODES);
        let mut nodes = Vec::with_capacity(LEGENDRE_NODES);
        let mut weights = Vec::with_capacity(LEGENDRE_NODES);
        for (xi, wi) in x.iter().zip(&w) {
            if *xi > 0.0 {
                nodes.push(*xi);
                weights.push(*wi);
            }
        }
        let mut legendre = vec![0.0; nodes.len() * (lmax + 1)];
        for (i, &t) in nodes.iter().enumerate() {
            legendre_all(lmax, t, &mut legendre[i * (lmax + 1)..(i + 1) * (lmax + 1)]);
        }
        Self { consts, lmax, nodes, weights, legendre }
    }

    pub fn constants(&self) -> &TissueConstants {
        &self.consts
    }

    /// `k_l = (2l+1) int_0^1 exp(-b d_par t^2) P_l(t) dt` for even l.
    pub fn stick_coefficients(&self, bvalue: f64) -> Vec<f64> {
        let bd = bvalue * self.consts.d_par;
        let stride = self.lmax + 1;
        let mut k = vec![0.0; stride];
        for (i, (&t, &w)) in self.nodes.iter().zip(&self.weights).enumerate() {
            let f = w * (-bd * t * t).exp();
            for l in (0..=self.lmax).step_by(2) {
                k[l] += f * self.legendre[i * stride + l];
            }
        }
        for (l, v) in k.iter_mut().enumerate() {
            *v *= (2 * l + 1) as f64;
        }
        k
    }

    /// Funk-Hecke eigenvalues `w_l = int_0^1 e^{kappa t^2} P_l(t) dt / M`.
    pub fn watson_coefficients(&self, kappa: f64) -> Result<Vec<f64>> {
        let scaled = kummer_m_half_scaled(kappa)?;
        let stride = self.lmax + 1;
        let mut c = vec![0.0; stride];
        for (i, (&t, &w)) in self.nodes.iter().zip(&self.weights).enumerate() {
            let f = w * (kappa * (t * t - 1.0)).exp();
            for l in (0..=self.lmax).step_by(2) {
                c[l] += f * self.legendre[i * stride + l];
            }
        }
        c.iter_mut().for_each(|v| *v /= scaled);
        Ok(c)
    }

    fn dispersed_stick(&self, product: &[f64], cos_angle: f64, scratch: &mut [f64]) -> f64 {
        legendre_all(self.lmax, cos_angle, scratch);
        (0..=self.lmax).step_by(2).map(|l| product[l] * scratch[l]).sum()
    }

    pub fn signal(&self, p: &NoddiParams, bvalue: f64, g: &UnitDirection) -> Result<f64> {
        check_inputs(p, bvalue, g)?;
        let kappa = od_to_kappa(p.od)?;
        let k = self.stick_coefficients(bvalue);
        let w = self.watson_coefficients(kappa)?;
        let product: Vec<f64> = k.iter().zip(&w).map(|(a, b)| a * b).collect();
        let mut scratch = vec![0.0; self.lmax + 1];
        let a_ic = self.dispersed_stick(&product, g.dot(&p.mu), &mut scratch);
        let tau = watson_tau(kappa)?;
        let a_ec = (-bvalue * extracellular_adc(p, &self.consts, tau, g)).exp();
        Ok(combine(p, &self.consts, bvalue, a_ic, a_ec))
    }

    /// Noiseless diffusion-weighted signals for every shell direction, in
    /// scheme order (b0 channels excluded). `stick` holds precomputed
    /// [`SignalModel::stick_coefficients`] per shell.
    pub fn scheme_signals(
        &self,
        p: &NoddiParams,
        scheme: &GradientScheme,
        stick: &[Vec<f64>],
        out: &mut Vec<f64>,
    ) -> Result<()> {
        p.validate()?;
        let kappa = od_to_kappa(p.od)?;
        let w = self.watson_coefficients(kappa)?;
        let tau = watson_tau(kappa)?;
        let mut scratch = vec![0.0; self.lmax + 1];
        out.clear();
        for (shell, k) in scheme.shells().iter().zip(stick) {
            let product: Vec<f64> = k.iter().zip(&w).map(|(a, b)| a * b).collect();
            for g in &shell.directions {
                let a_ic = self.dispersed_stick(&product, g.dot(&p.mu), &mut scratch);
                let a_ec = (-shell.bvalue * extracellular_adc(p, &self.consts, tau, g)).exp();
                out.push(combine(p, &self.consts, shell.bvalue, a_ic, a_ec));
            }
        }
        Ok(())
    }
}
