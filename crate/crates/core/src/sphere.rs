//! Unit-sphere directions: coordinate conversion, well-spread antipodal
//! schemes, and random subsampling of direction sets.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Tolerance on the input norm accepted by the checked constructors.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// A direction on the unit sphere, stored in Cartesian form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitDirection {
    x: f64,
    y: f64,
    z: f64,
}

impl UnitDirection {
    pub const Z: UnitDirection = UnitDirection { x: 0.0, y: 0.0, z: 1.0 };

    /// Accepts a vector whose norm is within [`NORM_TOLERANCE`] of one and
    /// renormalizes it exactly.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let norm = (x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidDirection { norm });
        }
        Ok(Self::scaled(x, y, z, norm))
    }

    /// Normalizes any finite nonzero vector.
    pub fn from_vector(v: [f64; 3]) -> Result<Self> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !norm.is_finite() || norm < 1e-300 {
            return Err(Error::InvalidDirection { norm });
        }
        Ok(Self::scaled(v[0], v[1], v[2], norm))
    }

    fn scaled(x: f64, y: f64, z: f64, norm: f64) -> Self {
        // Vectors already unit to rounding are kept, so renormalizing is idempotent.
        if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Self { x, y, z };
        }
        Self { x: x / norm, y: y / norm, z: z / norm }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &UnitDirection) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn negated(self) -> Self {
        Self { x: -self.x, y: -self.y, z: -self.z }
    }

    /// Uniformly distributed direction.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let v: [f64; 3] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            if let Ok(d) = Self::from_vector(v) {
                return d;
            }
        }
    }
}

/// Polar angle `theta` in [0, pi] and azimuth `phi` in [0, 2pi).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalAngles {
    pub theta: f64,
    pub phi: f64,
}

pub fn cart_to_sph(d: &UnitDirection) -> Result<SphericalAngles> {
    let norm = d.dot(d).sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::InvalidDirection { norm });
    }
    let theta = d.z.clamp(-1.0, 1.0).acos();
    let mut phi = d.y.atan2(d.x);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    if phi >= 2.0 * PI {
        phi = 0.0;
    }
    Ok(SphericalAngles { theta, phi })
}

pub fn sph_to_cart(a: SphericalAngles) -> UnitDirection {
    let (st, ct) = a.theta.sin_cos();
    let (sp, cp) = a.phi.sin_cos();
    UnitDirection::scaled(st * cp, st * sp, ct, 1.0)
}

/// A proper rotation matrix, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(pub [[f64; 3]; 3]);

impl Rotation {
    pub fn identity() -> Self {
        Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Uniform random rotation from a random unit quaternion.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut q = [0.0f64; 4];
        loop {
            for v in q.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                q.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
        let [w, x, y, z] = q;
        Rotation([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ])
    }

    /// Rotation taking the +z axis onto `d`.
    pub fn z_to(d: &UnitDirection) -> Self {
        // Orthonormal frame (e1, e2, d) as matrix columns.
        let helper = if d.x.abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let v = d.to_array();
        let e1 = normalize(cross(helper, v));
        let e2 = cross(v, e1);
        Rotation([[e1[0], e2[0], v[0]], [e1[1], e2[1], v[1]], [e1[2], e2[2], v[2]]])
    }

    pub fn apply(&self, d: &UnitDirection) -> UnitDirection {
        let v = self.apply_vec(d.to_array());
        UnitDirection::from_vector(v).expect("rotation preserves the norm")
    }

    pub fn apply_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// One acquisition shell: a nominal b-value (s/mm^2) and its directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Shell {
    pub bvalue: f64,
    pub directions: Vec<UnitDirection>,
}

/// The q-space acquisition: diffusion shells plus a number of b0 volumes.
///
/// Channels of a volume acquired with this scheme are laid out as all b0
/// channels first, then each shell's directions in shell order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientScheme {
    shells: Vec<Shell>,
    b0_count: usize,
}

impl GradientScheme {
    pub fn new(shells: Vec<Shell>, b0_count: usize) -> Result<Self> {
        for (i, s) in shells.iter().enumerate() {
            if s.directions.is_empty() {
                return Err(Error::EmptyScheme);
            }
            if !(s.bvalue > 0.0 && s.bvalue.is_finite()) {
                return Err(Error::Domain(format!("shell b-value {} must be positive", s.bvalue)));
            }
            if shells[..i].iter().any(|o| o.bvalue == s.bvalue) {
                return Err(Error::Domain(format!("duplicate shell b-value {}", s.bvalue)));
            }
        }
        Ok(Self { shells, b0_count })
    }

    pub fn shells(&self) -> &[Shell] {
        &self.shells
    }

    pub fn b0_count(&self) -> usize {
        self.b0_count
    }

    /// Number of diffusion-weighted channels.
    pub fn total_directions(&self) -> usize {
        self.shells.iter().map(|s| s.directions.len()).sum()
    }

    pub fn channel_count(&self) -> usize {
        self.b0_count + self.total_directions()
    }

    /// Offset of each shell inside the diffusion-only channel block.
    pub fn shell_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.shells
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.directions.len();
                o
            })
            .collect()
    }

    /// Restricts every shell to the given selections (one per shell).
    pub fn select(&self, selections: &[SubsampleSelection]) -> Result<GradientScheme> {
        if selections.len() != self.shells.len() {
            return Err(Error::Dimension(format!(
                "{} selections for {} shells",
                selections.len(),
                self.shells.len()
            )));
        }
        let shells = self
            .shells
            .iter()
            .zip(selections)
            .map(|(s, sel)| Shell {
                bvalue: s.bvalue,
                directions: sel.indices.iter().map(|&i| s.directions[i]).collect(),
            })
            .collect();
        GradientScheme::new(shells, self.b0_count)
    }
}

/// A sorted set of distinct direction indices into one shell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsampleSelection {
    pub shell_index: usize,
    pub indices: Vec<usize>,
}

impl SubsampleSelection {
    pub fn new(shell_index: usize, mut indices: Vec<usize>, shell_size: usize) -> Result<Self> {
        indices.sort_unstable();
        let distinct = indices.windows(2).all(|w| w[0] < w[1]);
        if indices.is_empty() || !distinct || indices.last().is_some_and(|&i| i >= shell_size) {
            return Err(Error::SelectionSize { requested: indices.len(), available: shell_size });
        }
        Ok(Self { shell_index, indices })
    }

    pub fn full(shell_index: usize, shell_size: usize) -> Self {
        Self { shell_index, indices: (0..shell_size).collect() }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn random_subsample<R: Rng + ?Sized>(
    scheme: &GradientScheme,
    shell_index: usize,
    n: usize,
    rng: &mut R,
) -> Result<SubsampleSelection> {
    let shell = scheme.shells.get(shell_index).ok_or_else(|| {
        Error::Domain(format!("shell index {shell_index} out of range"))
    })?;
    let size = shell.directions.len();
    if n == 0 || n > size {
        return Err(Error::SelectionSize { requested: n, available: size });
    }
    let mut indices = rand::seq::index::sample(rng, size, n).into_vec();
    indices.sort_unstable();
    Ok(SubsampleSelection { shell_index, indices })
}

/// Greedy farthest-point subset of `n` directions, starting from index 0 and
/// maximizing the antipodal angular separation to the chosen set. Ties go to
/// the lowest index.
pub fn spread_subsample(dirs: &[UnitDirection], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > dirs.len() {
        return Err(Error::SelectionSize { requested: n, available: dirs.len() });
    }
    let mut chosen = vec![0usize];
    // Largest |cos| to any chosen direction; smaller means farther away.
    let mut closeness: Vec<f64> = dirs.iter().map(|d| d.dot(&dirs[0]).abs()).collect();
    closeness[0] = f64::INFINITY;
    while chosen.len() < n {
        let (next, _) = closeness
            .iter()
            .enumerate()
            .fold((usize::MAX, f64::INFINITY), |best, (i, &c)| if c < best.1 { (i, c) } else { best });
        chosen.push(next);
        for (i, c) in closeness.iter_mut().enumerate() {
            if c.is_finite() {
                *c = c.max(dirs[i].dot(&dirs[next]).abs());
            }
        }
        closeness[next] = f64::INFINITY;
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Minimum antipodally-identified angle between any two directions.
pub fn min_angular_separation(dirs: &[UnitDirection]) -> Result<f64> {
    if dirs.len() < 2 {
        return Err(Error::InsufficientInput { needed: 2, got: dirs.len() });
    }
    let mut max_cos = 0.0f64;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            max_cos = max_cos.max(dirs[i].dot(&dirs[j]).abs());
        }
    }
    Ok(max_cos.min(1.0).acos())
}

/// Antipodal electrostatic energy: sum over pairs of 1/|a-b| + 1/|a+b|.
pub fn antipodal_energy(dirs: &[UnitDirection]) -> f64 {
    let mut e = 0.0;
    for i in 0..dirs.len() {
        let a = dirs[i].to_array();
        for b in &dirs[i + 1..] {
            let b = b.to_array();
            let dm = dist([a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
            let dp = dist([a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
            e += 1.0 / dm + 1.0 / dp;
        }
    }
    e
}

fn dist(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12)
}

/// Hemispherical Fibonacci lattice of `n` points (before any rotation).
pub fn fibonacci_hemisphere(n: usize) -> Vec<UnitDirection> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            UnitDirection::scaled(r * phi.cos(), r * phi.sin(), z, 1.0)
        })
        .collect()
}

pub const REFINE_MAX_ITERS: usize = 500;
pub const REFINE_REL_TOL: f64 = 1e-9;

/// Fibonacci initialization (randomly rotated by `seed`) followed by
/// projected gradient descent on the antipodal electrostatic energy.
pub fn generate_uniform_directions(n: usize, seed: u64) -> Result<Vec<UnitDirection>> {
    if n == 0 {
        return Err(Error::EmptyScheme);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = Rotation::random(&mut rng);
    let init: Vec<UnitDirection> = fibonacci_hemisphere(n).iter().map(|d| rot.apply(d)).collect();
    Ok(refine_directions(init))
}

/// Descent with step backtracking; the returned set never has higher energy
/// than the input.
pub fn refine_directions(mut dirs: Vec<UnitDirection>) -> Vec<UnitDirection> {
    let n = dirs.len();
    if n < 2 {
        return dirs;
    }
    let mut energy = antipodal_energy(&dirs);
    // Maximum per-iteration displacement, in radians.
    let mut step = 0.05;
    let mut grad = vec![[0.0f64; 3]; n];
    for _ in 0..REFINE_MAX_ITERS {
        tangent_gradient(&dirs, &mut grad);
        let gmax = grad.iter().map(|g| dist(*g)).fold(0.0, f64::max);
        if gmax < 1e-15 {
            break;
        }
        let scale = step / gmax;
        let trial: Vec<UnitDirection> = dirs
            .iter()
            .zip(&grad)
            .map(|(d, g)| {
                let a = d.to_array();
                UnitDirection::from_vector([a[0] - scale * g[0], a[1] - scale * g[1], a[2] - scale * g[2]])
                    .unwrap_or(*d)
            })
            .collect();
        let e = antipodal_energy(&trial);
        if e < energy {
            let rel = (energy - e) / energy;
            dirs = trial;
            energy = e;
            step *= 1.2;
            if rel < REFINE_REL_TOL {
                break;
            }
        } else {
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
    }
    dirs
}

fn tangent_gradient(dirs: &[UnitDirection], grad: &mut [[f64; 3]]) {
    grad.iter_mut().for_each(|g| *g = [0.0; 3]);
    for i in 0..dirs.len() {
        let a = dirs[i].to_array();
        for j in i + 1..dirs.len() {
            let b = dirs[j].to_array();
            for sign in [-1.0, 1.0] {
                // Pair term 1/|a + sign*b|; gradient wrt a is -(a + sign*b)/|.|^3.
                let v = [a[0] + sign * b[0], a[1] + sign * b[1], a[2] + sign * b[2]];
                let r = dist(v);
                let k = 1.0 / (r * r * r);
                for c in 0..3 {
                    grad[i][c] -= k * v[c];
                    grad[j][c] -= sign * k * v[c];
                }
            }
        }
    }
    for (g, d) in grad.iter_mut().zip(dirs) {
        let a = d.to_array();
        let radial = g[0] * a[0] + g[1] * a[1] + g[2] * a[2];
        for c in 0..3 {
            g[c] -= radial * a[c];
        }
    }
}
