//! Independent oracles for the Watson/NODDI forward model, shared with the
//! CLI acceptance target.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robnoddi_core::noddi::{od_to_kappa, NoddiParams, TissueConstants};
use robnoddi_core::sphere::UnitDirection;

/// Adaptive Simpson with a tolerance relative to the first coarse estimate.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, rel * whole.abs(), 40)
}

/// M(1/2, 3/2, k) = int_0^1 exp(k t^2) dt.
pub fn kummer_oracle(k: f64) -> f64 {
    simpson(&|t| (k * t * t).exp(), 0.0, 1.0, 1e-13)
}

/// tau(k) as a ratio of two integrals over the polar cosine.
pub fn tau_oracle(k: f64) -> f64 {
    let num = simpson(&|t| t * t * (k * (t * t - 1.0)).exp(), 0.0, 1.0, 1e-13);
    let den = simpson(&|t| (k * (t * t - 1.0)).exp(), 0.0, 1.0, 1e-13);
    num / den
}


/// Sampler for the polar cosine |t| of a Watson distribution about +z,
/// by inverse-CDF lookup on a fine trapezoid table.
pub struct CosineSampler {
    t: Vec<f64>,
    cdf: Vec<f64>,
}

impl CosineSampler {
    pub fn new(kappa: f64) -> Self {
        let n = 200_000;
        let t: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let f: Vec<f64> = t.iter().map(|t| (kappa * (t * t - 1.0)).exp()).collect();
        let mut cdf = vec![0.0; n + 1];
        for i in 1..=n {
            cdf[i] = cdf[i - 1] + 0.5 * (f[i] + f[i - 1]) / n as f64;
        }
        let total = cdf[n];
        cdf.iter_mut().for_each(|c| *c /= total);
        Self { t, cdf }
    }

    pub fn sample(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.t[i - 1] + frac * (self.t[i] - self.t[i - 1])
    }
}

fn frame(mu: &UnitDirection) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let m = mu.to_array();
    let a = if m[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let cross = |u: [f64; 3], v: [f64; 3]| [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let e1 = cross(m, a);
    let n1 = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    let e1 = [e1[0] / n1, e1[1] / n1, e1[2] / n1];
    (e1, cross(m, e1), m)
}

/// Stratified Monte Carlo of the full NODDI signal with 2e5 fibre samples.
pub fn signal_mc(p: &NoddiParams, c: &TissueConstants, b: f64, g: &UnitDirection, seed: u64) -> f64 {
    let kappa = od_to_kappa(p.od).unwrap();
    let sampler = CosineSampler::new(kappa);
    let (e1, e2, e3) = frame(&p.mu);
    let g = g.to_array();
    let (nt, nphi) = (500, 400);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ic, mut tau) = (0.0, 0.0);
    for i in 0..nt {
        for j in 0..nphi {
            let t = sampler.sample((i as f64 + rng.gen::<f64>()) / nt as f64);
            let phi = 2.0 * PI * (j as f64 + rng.gen::<f64>()) / nphi as f64;
            let s = (1.0 - t * t).sqrt();
            let (a, bb) = (s * phi.cos(), s * phi.sin());
            let n = [0, 1, 2].map(|k| a * e1[k] + bb * e2[k] + t * e3[k]);
            let gn = g[0] * n[0] + g[1] * n[1] + g[2] * n[2];
            ic += (-b * c.d_par * gn * gn).exp();
            tau += t * t;
        }
    }
    let count = (nt * nphi) as f64;
    let (ic, tau) = (ic / count, tau / count);
    let d_perp = c.d_par * (1.0 - p.vic);
    let axial = d_perp + (c.d_par - d_perp) * tau;
    let radial = d_perp + (c.d_par - d_perp) * (1.0 - tau) / 2.0;
    let gm = g[0] * e3[0] + g[1] * e3[1] + g[2] * e3[2];
    let ec = (-b * (radial + (axial - radial) * gm * gm)).exp();
    let iso = (-b * c.d_iso).exp();
    (1.0 - p.viso) * (p.vic * ic + (1.0 - p.vic) * ec) + p.viso * iso
}
