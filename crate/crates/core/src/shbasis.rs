//! Real, even-order spherical-harmonic basis and regularized least-squares
//! fitting of per-shell diffusion signals.
//!
//! Column order is fixed: even `l` ascending, then `m` from `-l` to `l`.
//! Column `j` of the basis is
//!
//! * `sqrt(2) * K(l,|m|) * P_l^|m|(cos theta) * sin(|m| phi)` for `m < 0`,
//! * `K(l,0) * P_l^0(cos theta)` for `m = 0`,
//! * `sqrt(2) * K(l,m) * P_l^m(cos theta) * cos(m phi)` for `m > 0`,
//!
//! with `K(l,m) = sqrt((2l+1)/(4 pi) * (l-m)!/(l+m)!)` and associated Legendre
//! functions without the Condon-Shortley phase. The basis is orthonormal on
//! the sphere.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::sphere::UnitDirection;

/// Largest order accepted by [`FitSettings`].
pub const MAX_FIT_ORDER: usize = 8;
pub const DEFAULT_ORDER: usize = 6;
pub const DEFAULT_LAMBDA: f64 = 6e-3;

/// Relative pivot threshold below which the normal matrix counts as singular.
const PIVOT_TOLERANCE: f64 = 1e-12;

pub fn num_coefficients(order: usize) -> Result<usize> {
    if !order.is_multiple_of(2) {
        return Err(Error::UnsupportedOrder(order));
    }
    Ok((order + 1) * (order + 2) / 2)
}

/// Column index of `(l, m)`; `l` must be even and `|m| <= l`.
pub fn coefficient_index(l: usize, m: i64) -> usize {
    debug_assert!(l.is_multiple_of(2) && m.unsigned_abs() as usize <= l);
    (l * (l.saturating_sub(1))) / 2 + (l as i64 + m) as usize
}

/// The `(l, m)` label of every column, in column order.
pub fn coefficient_degrees(order: usize) -> Result<Vec<(usize, i64)>> {
    num_coefficients(order)?;
    Ok((0..=order)
        .step_by(2)
        .flat_map(|l| (-(l as i64)..=l as i64).map(move |m| (l, m)))
        .collect())
}

/// Laplace-Beltrami eigenvalue `l(l+1)` for every column.
pub fn laplace_beltrami_diagonal(order: usize) -> Result<Vec<f64>> {
    Ok(coefficient_degrees(order)?.iter().map(|&(l, _)| (l * (l + 1)) as f64).collect())
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Writes one basis row for `d` into `out` (length `num_coefficients(order)`).
pub fn eval_basis_row(d: &UnitDirection, order: usize, out: &mut [f64]) {
    let (x, y, z) = (d.x(), d.y(), d.z());
    let n_m = order + 1;
    // (x + iy)^m = sin^m(theta) * e^{i m phi}
    let mut cos_m = vec![1.0; n_m];
    let mut sin_m = vec![0.0; n_m];
    for m in 1..n_m {
        cos_m[m] = cos_m[m - 1] * x - sin_m[m - 1] * y;
        sin_m[m] = sin_m[m - 1] * x + cos_m[m - 1] * y;
    }
    // q[l][m] = P_l^m(z) / sin^m(theta), a polynomial in z.
    let mut q = vec![vec![0.0f64; n_m]; n_m];
    for m in 0..n_m {
        let mut qmm = 1.0;
        for k in 1..=m {
            qmm *= (2 * k - 1) as f64;
        }
        q[m][m] = qmm;
        if m < order {
            q[m + 1][m] = z * (2 * m + 1) as f64 * qmm;
        }
        for l in m + 2..n_m {
            q[l][m] = ((2 * l - 1) as f64 * z * q[l - 1][m] - (l + m - 1) as f64 * q[l - 2][m])
                / (l - m) as f64;
        }
    }
    for l in (0..=order).step_by(2) {
        for m in 0..=l {
            let k = ((2 * l + 1) as f64 / (4.0 * PI) * factorial(l - m) / factorial(l + m)).sqrt();
            let base = k * q[l][m];
            if m == 0 {
                out[coefficient_index(l, 0)] = base;
            } else {
                out[coefficient_index(l, m as i64)] = SQRT_2 * base * cos_m[m];
                out[coefficient_index(l, -(m as i64))] = SQRT_2 * base * sin_m[m];
            }
        }
    }
}

/// Basis evaluated at a direction set: `n_dirs × n_coeffs`, row-major.
#[derive(Clone, Debug)]
pub struct ShBasisMatrix {
    order: usize,
    n_coeffs: usize,
    dirs: Vec<UnitDirection>,
    entries: Vec<f64>,
}

impl ShBasisMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_dirs(&self) -> usize {
        self.dirs.len()
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    pub fn dirs(&self) -> &[UnitDirection] {
        &self.dirs
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n_coeffs..(i + 1) * self.n_coeffs]
    }

    /// `B c` for a coefficient vector.
    pub fn apply(&self, coeffs: &[f64]) -> Vec<f64> {
        (0..self.n_dirs())
            .map(|i| self.row(i).iter().zip(coeffs).map(|(b, c)| b * c).sum())
            .collect()
    }
}

pub fn eval_basis(dirs: &[UnitDirection], order: usize) -> Result<ShBasisMatrix> {
    let n_coeffs = num_coefficients(order)?;
    if dirs.is_empty() {
        return Err(Error::InsufficientInput { needed: 1, got: 0 });
    }
    let mut entries = vec![0.0; dirs.len() * n_coeffs];
    for (d, row) in dirs.iter().zip(entries.chunks_mut(n_coeffs)) {
        eval_basis_row(d, order, row);
    }
    Ok(ShBasisMatrix { order, n_coeffs, dirs: dirs.to_vec(), entries })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitSettings {
    pub order: usize,
    /// Laplace-Beltrami regularization weight.
    pub lambda: f64,
}

impl FitSettings {
    pub fn new(order: usize, lambda: f64) -> Result<Self> {
        if !order.is_multiple_of(2) || order > MAX_FIT_ORDER {
            return Err(Error::UnsupportedOrder(order));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!("regularization weight {lambda} must be >= 0")));
        }
        Ok(Self { order, lambda })
    }
}

impl Default for FitSettings {
    fn default() -> Self {
        Self { order: DEFAULT_ORDER, lambda: DEFAULT_LAMBDA }
    }
}

/// The continuous representation of one shell's signal.
#[derive(Clone, Debug, PartialEq)]
pub struct ShCoefficients {
    pub values: Vec<f64>,
    pub order: usize,
    /// Nominal b-value of the shell the coefficients were fitted on, when known.
    pub shell_bvalue: Option<f64>,
}

impl ShCoefficients {
    pub fn new(values: Vec<f64>, order: usize, shell_bvalue: Option<f64>) -> Result<Self> {
        let n = num_coefficients(order)?;
        if values.len() != n {
            return Err(Error::Dimension(format!("{} coefficients for order {order}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSignal("non-finite SH coefficient".into()));
        }
        Ok(Self { values, order, shell_bvalue })
    }
}

/// A factorized regularized normal system for one direction set; fits any
/// number of signal vectors acquired on those directions.
#[derive(Clone, Debug)]
pub struct ShFitter {
    basis: ShBasisMatrix,
    chol: Cholesky,
}

impl ShFitter {
    pub fn new(basis: ShBasisMatrix, settings: &FitSettings) -> Result<Self> {
        if basis.order != settings.order {
            return Err(Error::Dimension(format!(
                "basis order {} differs from fit order {}",
                basis.order, settings.order
            )));
        }
        let nc = basis.n_coeffs;
        let nd = basis.n_dirs();
        if settings.lambda == 0.0 && nd < nc {
            return Err(Error::RankDeficient { n_dirs: nd, n_coeffs: nc });
        }
        let mut normal = vec![0.0; nc * nc];
        crate::linalg::gemm(nc, nd, nc, 1.0, &basis.entries, true, &basis.entries, false, 0.0, &mut normal);
        for (j, r) in laplace_beltrami_diagonal(basis.order)?.iter().enumerate() {
            normal[j * nc + j] += settings.lambda * r * r;
        }
        let chol = Cholesky::factor(&normal, nc, PIVOT_TOLERANCE)
            .ok_or(Error::RankDeficient { n_dirs: nd, n_coeffs: nc })?;
        Ok(Self { basis, chol })
    }

    pub fn basis(&self) -> &ShBasisMatrix {
        &self.basis
    }

    pub fn n_coeffs(&self) -> usize {
        self.basis.n_coeffs
    }

    /// Fits one signal vector, writing coefficients into `out`.
    pub fn fit_into(&self, signals: &[f64], out: &mut [f64]) -> Result<()> {
        let nd = self.basis.n_dirs();
        if signals.len() != nd {
            return Err(Error::Dimension(format!("{} signals for {nd} directions", signals.len())));
        }
        if signals.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidSignal("non-finite signal value".into()));
        }
        let nc = self.basis.n_coeffs;
        out[..nc].iter_mut().for_each(|v| *v = 0.0);
        for (row, &s) in self.basis.entries.chunks(nc).zip(signals) {
            for (o, b) in out.iter_mut().zip(row) {
                *o += b * s;
            }
        }
        self.chol.solve_in_place(&mut out[..nc]);
        Ok(())
    }

    pub fn fit(&self, signals: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_coeffs()];
        self.fit_into(signals, &mut out)?;
        Ok(out)
    }
}

/// Minimizes `|B c - s|^2 + lambda |R c|^2` with `R = diag(l(l+1))`.
pub fn fit_sh(signals: &[f64], basis: &ShBasisMatrix, settings: &FitSettings) -> Result<ShCoefficients> {
    let fitter = ShFitter::new(basis.clone(), settings)?;
    let values = fitter.fit(signals)?;
    Ok(ShCoefficients { values, order: basis.order, shell_bvalue: None })
}

/// Evaluates the continuous representation at arbitrary directions.
pub fn resample(coeffs: &ShCoefficients, new_dirs: &[UnitDirection]) -> Result<Vec<f64>> {
    if coeffs.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSignal("non-finite SH coefficient".into()));
    }
    let basis = eval_basis(new_dirs, coeffs.order)?;
    if basis.n_coeffs != coeffs.values.len() {
        return Err(Error::Dimension("coefficient count does not match order".into()));
    }
    Ok(basis.apply(&coeffs.values))
}
