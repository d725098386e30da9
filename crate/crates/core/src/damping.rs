//! Damping profiles `b >= 0`, their Galerkin multiplication matrices, moduli
//! of continuity and the zero-set preserving mollifier.

use ndarray::Array2;
use rand::Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::geometry::{periodic_diff, ManifoldKind, ManifoldModel, TWO_PI};
use crate::linalg::{self, CMat, C64};

/// Declared modulus of continuity `omega`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Modulus {
    Zero,
    /// `min(c * r^exponent, cap)`
    Power {
        c: f64,
        exponent: f64,
        cap: f64,
    },
    /// `amplitude` for every `r > 0`: the profile may jump.
    Jump {
        amplitude: f64,
    },
    /// Piecewise-linear through `(0,0)` and the given knots, constant after.
    Table {
        r: Vec<f64>,
        omega: Vec<f64>,
    },
}

impl Modulus {
    pub fn eval(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        match self {
            Modulus::Zero => 0.0,
            Modulus::Power { c, exponent, cap } => (c * r.powf(*exponent)).min(*cap),
            Modulus::Jump { amplitude } => *amplitude,
            Modulus::Table { r: rs, omega } => {
                let mut r0 = 0.0;
                let mut w0 = 0.0;
                for (ri, wi) in rs.iter().zip(omega) {
                    if r <= *ri {
                        return w0 + (wi - w0) * (r - r0) / (ri - r0);
                    }
                    r0 = *ri;
                    w0 = *wi;
                }
                w0
            }
        }
    }
}

/// Closed geodesic used by distance-power profiles: a point on the circle,
/// the vertical line `x = x0` on the torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ProfileFamily {
    Constant {
        value: f64,
    },
    /// `amplitude * exp(-rho^2 / (1 - rho^2))`, `rho = dist(x, center) / radius`.
    Bump {
        center: [f64; 2],
        radius: f64,
        amplitude: f64,
    },
    /// `amplitude` on the open band `lo < x < hi` (first coordinate), else 0.
    Strip {
        lo: f64,
        hi: f64,
        amplitude: f64,
    },
    /// `amplitude * dist(x, gamma)^(2 alpha)`.
    HoelderDistance {
        alpha: f64,
        amplitude: f64,
        x0: f64,
    },
    /// `offset + amplitude * cos(k . x)`.
    Cosine {
        offset: f64,
        amplitude: f64,
        wave: [i64; 2],
    },
    /// Samples on a uniform periodic grid, `shape[1] == 1` meaning no
    /// dependence on the second coordinate.
    Table {
        shape: [usize; 2],
        values: Vec<f64>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DampingProfile {
    pub family: ProfileFamily,
    pub kind: ManifoldKind,
    pub modulus: Modulus,
    pub sup: f64,
}

fn bump_shape(rho2: f64) -> f64 {
    if rho2 >= 1.0 {
        0.0
    } else {
        (-rho2 / (1.0 - rho2)).exp()
    }
}

fn bump_lipschitz() -> f64 {
    // max over rho of |d/drho exp(-rho^2/(1-rho^2))|
    static L: OnceLock<f64> = OnceLock::new();
    *L.get_or_init(|| {
        let n = 200_000;
        (1..n)
            .map(|j| {
                let r = j as f64 / n as f64;
                let q = 1.0 - r * r;
                bump_shape(r * r) * 2.0 * r / (q * q)
            })
            .fold(0.0, f64::max)
    })
}

impl DampingProfile {
    pub fn new(kind: ManifoldKind, family: ProfileFamily) -> Result<Self> {
        let diam_line = PI;
        let (modulus, sup) = match &family {
            ProfileFamily::Constant { value } => {
                if *value < 0.0 {
                    return Err(Error::Invalid("negative constant damping".into()));
                }
                (Modulus::Zero, *value)
            }
            ProfileFamily::Bump { radius, amplitude, .. } => {
                if *amplitude < 0.0 || !(*radius > 0.0) {
                    return Err(Error::Invalid("bump needs amplitude >= 0 and radius > 0".into()));
                }
                let c = amplitude * bump_lipschitz() / radius;
                (Modulus::Power { c, exponent: 1.0, cap: *amplitude }, *amplitude)
            }
            ProfileFamily::Strip { lo, hi, amplitude } => {
                if *amplitude < 0.0 || !(hi > lo) {
                    return Err(Error::Invalid("strip needs amplitude >= 0 and lo < hi".into()));
                }
                (Modulus::Jump { amplitude: *amplitude }, *amplitude)
            }
            ProfileFamily::HoelderDistance { alpha, amplitude, .. } => {
                if !(*alpha > 0.0) || *amplitude < 0.0 {
                    return Err(Error::Invalid("distance power needs alpha > 0, amplitude >= 0".into()));
                }
                let p = 2.0 * alpha;
                let sup = amplitude * diam_line.powf(p);
                let m = if p <= 1.0 {
                    Modulus::Power { c: *amplitude, exponent: p, cap: sup }
                } else {
                    Modulus::Power { c: amplitude * p * diam_line.powf(p - 1.0), exponent: 1.0, cap: sup }
                };
                (m, sup)
            }
            ProfileFamily::Cosine { offset, amplitude, wave } => {
                if *offset < amplitude.abs() {
                    return Err(Error::Invalid("cosine profile must satisfy offset >= |amplitude|".into()));
                }
                if kind == ManifoldKind::Circle && wave[1] != 0 {
                    return Err(Error::Invalid("circle cosine profile has a second wave number".into()));
                }
                let kn = ((wave[0] * wave[0] + wave[1] * wave[1]) as f64).sqrt();
                let m = Modulus::Power { c: amplitude.abs() * kn, exponent: 1.0, cap: 2.0 * amplitude.abs() };
                (m, offset + amplitude.abs())
            }
            ProfileFamily::Table { shape, values } => {
                if shape[0] * shape[1] != values.len() || shape[0] < 2 {
                    return Err(Error::Invalid("table shape does not match its values".into()));
                }
                if kind == ManifoldKind::Circle && shape[1] != 1 {
                    return Err(Error::Invalid("circle table must have shape [n, 1]".into()));
                }
                if values.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::Invalid("damping table has negative or NaN samples".into()));
                }
                let sup = values.iter().cloned().fold(0.0, f64::max);
                (table_lipschitz(shape, values), sup)
            }
        };
        Ok(DampingProfile { family, kind, modulus, sup })
    }

    pub fn constant(kind: ManifoldKind, value: f64) -> Result<Self> {
        Self::new(kind, ProfileFamily::Constant { value })
    }

    pub fn zero(kind: ManifoldKind) -> Self {
        Self::constant(kind, 0.0).expect("zero profile is valid")
    }

    pub fn is_zero(&self) -> bool {
        self.sup == 0.0
    }

    /// True when `b` does not depend on the second coordinate (always on the
    /// circle). Such profiles give multiplication matrices that do not mix `k_y`.
    pub fn x_only(&self) -> bool {
        if self.kind == ManifoldKind::Circle {
            return true;
        }
        match &self.family {
            ProfileFamily::Constant { .. } => true,
            ProfileFamily::Bump { .. } => false,
            ProfileFamily::Strip { .. } => true,
            ProfileFamily::HoelderDistance { .. } => true,
            ProfileFamily::Cosine { wave, .. } => wave[1] == 0,
            ProfileFamily::Table { shape, .. } => shape[1] == 1,
        }
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        let two_d = self.kind == ManifoldKind::Torus2;
        match &self.family {
            ProfileFamily::Constant { value } => *value,
            ProfileFamily::Bump { center, radius, amplitude } => {
                let dx = periodic_diff(x[0], center[0]);
                let dy = if two_d { periodic_diff(x[1], center[1]) } else { 0.0 };
                amplitude * bump_shape((dx * dx + dy * dy) / (radius * radius))
            }
            ProfileFamily::Strip { lo, hi, amplitude } => {
                let u = x[0].rem_euclid(TWO_PI);
                let inside = (u > *lo && u < *hi) || (u + TWO_PI > *lo && u + TWO_PI < *hi);
                if inside {
                    *amplitude
                } else {
                    0.0
                }
            }
            ProfileFamily::HoelderDistance { alpha, amplitude, x0 } => amplitude * periodic_diff(x[0], *x0).abs().powf(2.0 * alpha),
            ProfileFamily::Cosine { offset, amplitude, wave } => {
                let ph = wave[0] as f64 * x[0] + if two_d { wave[1] as f64 * x[1] } else { 0.0 };
                (offset + amplitude * ph.cos()).max(0.0)
            }
            ProfileFamily::Table { shape, values } => table_eval(shape, values, x),
        }
    }

    /// Samples on the `n`-per-dimension uniform grid (x fastest).
    pub fn samples(&self, n: usize) -> Vec<f64> {
        let h = TWO_PI / n as f64;
        match self.kind {
            ManifoldKind::Circle => (0..n).map(|i| self.eval([i as f64 * h, 0.0])).collect(),
            ManifoldKind::Torus2 => {
                let mut out = Vec::with_capacity(n * n);
                for j in 0..n {
                    for i in 0..n {
                        out.push(self.eval([i as f64 * h, j as f64 * h]));
                    }
                }
                out
            }
        }
    }
}

fn table_lipschitz(shape: &[usize; 2], values: &[f64]) -> Modulus {
    let (nx, ny) = (shape[0], shape[1]);
    let hx = TWO_PI / nx as f64;
    let hy = TWO_PI / ny as f64;
    let mut slope: f64 = 0.0;
    for j in 0..ny {
        for i in 0..nx {
            let v = values[j * nx + i];
            slope = slope.max((values[j * nx + (i + 1) % nx] - v).abs() / hx);
            if ny > 1 {
                slope = slope.max((values[((j + 1) % ny) * nx + i] - v).abs() / hy);
            }
        }
    }
    let sup = values.iter().cloned().fold(0.0, f64::max);
    let c = if ny > 1 { slope * 2f64.sqrt() } else { slope };
    Modulus::Power { c, exponent: 1.0, cap: sup }
}

fn table_eval(shape: &[usize; 2], values: &[f64], x: [f64; 2]) -> f64 {
    let (nx, ny) = (shape[0], shape[1]);
    let u = x[0].rem_euclid(TWO_PI) / TWO_PI * nx as f64;
    let i0 = (u.floor() as usize) % nx;
    let fx = u - u.floor();
    let i1 = (i0 + 1) % nx;
    if ny == 1 {
        return values[i0] * (1.0 - fx) + values[i1] * fx;
    }
    let v = x[1].rem_euclid(TWO_PI) / TWO_PI * ny as f64;
    let j0 = (v.floor() as usize) % ny;
    let fy = v - v.floor();
    let j1 = (j0 + 1) % ny;
    let a = values[j0 * nx + i0] * (1.0 - fx) + values[j0 * nx + i1] * fx;
    let b = values[j1 * nx + i0] * (1.0 - fx) + values[j1 * nx + i1] * fx;
    a * (1.0 - fy) + b * fy
}

/// Discrete Fourier coefficients `b^(n) = (1/Vol) int b e^{-i n.x}` for
/// `|n|_inf <= max_freq`, from samples on an `n_grid` uniform grid.
#[derive(Clone, Debug)]
pub struct FourierCoefficients {
    pub max_freq: i64,
    pub two_d: bool,
    data: Vec<C64>,
}

impl FourierCoefficients {
    fn side(&self) -> usize {
        (2 * self.max_freq + 1) as usize
    }

    pub fn get(&self, n: [i64; 2]) -> C64 {
        let f = self.max_freq;
        if n[0].abs() > f || n[1].abs() > f || (!self.two_d && n[1] != 0) {
            return C64::new(0.0, 0.0);
        }
        let s = self.side() as i64;
        let idx = if self.two_d { (n[1] + f) * s + n[0] + f } else { n[0] + f };
        self.data[idx as usize]
    }

    fn compute(b: &DampingProfile, max_freq: i64, n_grid: usize) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n_grid);
        let two_d = b.kind == ManifoldKind::Torus2 && !b.x_only();
        let h = TWO_PI / n_grid as f64;
        let side = (2 * max_freq + 1) as usize;
        let wrap_idx = |k: i64| k.rem_euclid(n_grid as i64) as usize;
        let mut data = vec![C64::new(0.0, 0.0); if two_d { side * side } else { side }];
        if !two_d {
            let mut buf: Vec<C64> = (0..n_grid).map(|i| C64::new(b.eval([i as f64 * h, 0.0]), 0.0)).collect();
            fft.process(&mut buf);
            for k in -max_freq..=max_freq {
                data[(k + max_freq) as usize] = buf[wrap_idx(k)] / n_grid as f64;
            }
        } else {
            let mut grid: Vec<C64> = b.samples(n_grid).into_iter().map(|v| C64::new(v, 0.0)).collect();
            for row in grid.chunks_mut(n_grid) {
                fft.process(row);
            }
            let mut col = vec![C64::new(0.0, 0.0); n_grid];
            for i in 0..n_grid {
                for j in 0..n_grid {
                    col[j] = grid[j * n_grid + i];
                }
                fft.process(&mut col);
                for j in 0..n_grid {
                    grid[j * n_grid + i] = col[j];
                }
            }
            let norm = (n_grid * n_grid) as f64;
            for ky in -max_freq..=max_freq {
                for kx in -max_freq..=max_freq {
                    let v = grid[wrap_idx(ky) * n_grid + wrap_idx(kx)] / norm;
                    data[((ky + max_freq) as usize) * side + (kx + max_freq) as usize] = v;
                }
            }
        }
        // FFT round-off is flushed so that trigonometric polynomials give
        // exactly sparse coefficient tables
        let floor = 16.0 * f64::EPSILON * data.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for z in data.iter_mut() {
            if z.norm() <= floor {
                *z = C64::new(0.0, 0.0);
            }
        }
        let mut out = FourierCoefficients { max_freq, two_d, data };
        out.symmetrize();
        out
    }

    /// Enforces `b^(-n) = conj(b^(n))` exactly (b is real).
    fn symmetrize(&mut self) {
        let f = self.max_freq;
        let ys: Vec<i64> = if self.two_d { (-f..=f).collect() } else { vec![0] };
        for &ky in &ys {
            for kx in -f..=f {
                let n = [kx, ky];
                let m = [-kx, -ky];
                if (ky, kx) < (-ky, -kx) {
                    continue;
                }
                let v = 0.5 * (self.get(n) + self.get(m).conj());
                self.set(n, v);
                self.set(m, v.conj());
            }
        }
    }

    fn set(&mut self, n: [i64; 2], v: C64) {
        let f = self.max_freq;
        let s = self.side() as i64;
        let idx = if self.two_d { (n[1] + f) * s + n[0] + f } else { n[0] + f };
        self.data[idx as usize] = v;
    }
}

/// Galerkin image of multiplication by `b` on the retained modes.
#[derive(Clone, Debug)]
pub struct MultiplicationOperator {
    pub coefficients: FourierCoefficients,
    pub x_only: bool,
    /// Max coefficient change when the quadrature grid is doubled.
    pub aliasing_residual: f64,
    /// `l2` mass of `b^(n)` with `K < |n|_inf <= 2K`.
    pub tail_mass: f64,
    pub sup: f64,
}

impl MultiplicationOperator {
    /// Full `n_modes x n_modes` matrix `B[k,l] = b^(k - l)`.
    pub fn full(&self, model: &ManifoldModel) -> CMat {
        let n = model.n_modes();
        let mut out = CMat::zeros((n, n));
        for (i, k) in model.modes.iter().enumerate() {
            for (j, l) in model.modes.iter().enumerate() {
                out[[i, j]] = self.coefficients.get([k.0[0] - l.0[0], k.0[1] - l.0[1]]);
            }
        }
        out
    }

    /// The `(2K+1)`-square block acting on modes `(k_x, ky)`; exact only for
    /// profiles independent of the second coordinate.
    pub fn block(&self, model: &ManifoldModel) -> CMat {
        let k = model.cutoff as i64;
        let n = (2 * k + 1) as usize;
        let mut out = CMat::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] = self.coefficients.get([i as i64 - j as i64, 0]);
            }
        }
        out
    }
}

pub fn multiplication_matrix(model: &ManifoldModel, b: &DampingProfile) -> Result<MultiplicationOperator> {
    if b.kind != model.kind {
        return Err(Error::Invalid("profile and model live on different manifolds".into()));
    }
    let samples = b.samples(model.n_quad);
    if let Some(v) = samples.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Invalid(format!("negative sampled damping value {v}")));
    }
    let k = model.cutoff as i64;
    let coefficients = FourierCoefficients::compute(b, 2 * k, model.n_quad);
    let finer = FourierCoefficients::compute(b, 2 * k, 2 * model.n_quad);
    let mut aliasing_residual: f64 = 0.0;
    let mut tail = 0.0;
    let ys: Vec<i64> = if coefficients.two_d { (-2 * k..=2 * k).collect() } else { vec![0] };
    for &ny in &ys {
        for nx in -2 * k..=2 * k {
            let a = coefficients.get([nx, ny]);
            aliasing_residual = aliasing_residual.max((a - finer.get([nx, ny])).norm());
            if nx.abs() > k || ny.abs() > k {
                tail += a.norm_sqr();
            }
        }
    }
    Ok(MultiplicationOperator { coefficients, x_only: b.x_only(), aliasing_residual, tail_mass: tail.sqrt(), sup: b.sup })
}

// ---------------------------------------------------------------- mollifier

/// Normalized bump `exp(-1/(1-|x|^2))` (unnormalized value).
fn raw_bump(r2: f64) -> f64 {
    if r2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r2)).exp()
    }
}

/// Smooth cutoff: 1 on `[-1,1]`, 0 outside `(-2,2)`, built by integrating the bump.
pub fn level_cutoff(s: f64) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    const N: usize = 4096;
    let table = TABLE.get_or_init(|| {
        // cumulative Simpson of beta(u) = exp(-1/(u(1-u))) on [0,1]
        let beta = |u: f64| if u <= 0.0 || u >= 1.0 { 0.0 } else { (-1.0 / (u * (1.0 - u))).exp() };
        let h = 1.0 / N as f64;
        let mut cum = vec![0.0; N + 1];
        for i in 0..N {
            let a = i as f64 * h;
            cum[i + 1] = cum[i] + h / 6.0 * (beta(a) + 4.0 * beta(a + 0.5 * h) + beta(a + h));
        }
        let total = cum[N];
        cum.iter().map(|v| v / total).collect()
    });
    let a = s.abs();
    if a <= 1.0 {
        return 1.0;
    }
    if a >= 2.0 {
        return 0.0;
    }
    let u = (a - 1.0) * N as f64;
    let i = (u.floor() as usize).min(N - 1);
    let f = u - i as f64;
    1.0 - (table[i] * (1.0 - f) + table[i + 1] * f)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub eps: f64,
}

/// Diagnostics of one mollification, all on the mollifier's sample grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MollifierReport {
    pub eps: f64,
    pub grid_points: usize,
    pub sup_error: f64,
    pub max_gradient: f64,
    pub sup_mollified: f64,
    /// Grid points with `dist(x, {b=0}) <= eps`.
    pub dilated_zero_points: usize,
    /// Of those, how many have `b_eps(x) != 0`.
    pub dilation_violations: usize,
}

pub struct Mollified {
    pub profile: DampingProfile,
    pub report: MollifierReport,
}

/// Zero-set preserving regularization `N_eps * (b (1 - chi(b / level)))` as
/// a periodic convolution on a fine grid, with `level = omega(2 eps)`.
///
/// The kernel has radius `eps`, so the convolution at `x` reads `b` within
/// `2 eps` of the zero set; cutting at `omega(2 eps)` is what makes the result
/// vanish on the whole `eps`-neighbourhood.
pub fn mollify(b: &DampingProfile, spec: MollifierSpec) -> Result<Mollified> {
    let eps = spec.eps;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Invalid("mollifier width must lie in (0,1)".into()));
    }
    let two_d = b.kind == ManifoldKind::Torus2 && !b.x_only();
    let per_eps = if two_d { 8.0 } else { 32.0 };
    let needed = (per_eps * TWO_PI / eps).ceil() as usize;
    let n = if two_d {
        let n = needed.next_power_of_two().max(64);
        if n > 512 {
            return Err(Error::Infeasible(format!(
                "2-d mollification at eps={eps} needs a {n}^2 grid; use eps >= {:.3}",
                per_eps * TWO_PI / 512.0
            )));
        }
        n
    } else {
        needed.next_power_of_two().max(1024)
    };
    let h = TWO_PI / n as f64;
    let raw = b.samples(n);
    let zero_tol = 1e-12 * b.sup;
    let level = b.modulus.eval(2.0 * eps) + zero_tol;
    let cut: Vec<f64> = raw.iter().map(|v| if level > 0.0 { v * (1.0 - level_cutoff(v / level)) } else { *v }).collect();
    // kernel weights on grid offsets strictly inside the eps-ball
    let rad = (eps / h).ceil() as i64;
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    let ys: Vec<i64> = if two_d { (-rad..=rad).collect() } else { vec![0] };
    for &dy in &ys {
        for dx in -rad..=rad {
            let r2 = ((dx * dx + dy * dy) as f64) * h * h / (eps * eps);
            let w = raw_bump(r2);
            if w > 0.0 {
                offsets.push((dx, dy));
                weights.push(w);
            }
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let ni = n as i64;
    let rows = if two_d { n } else { 1 };
    let mut out = vec![0.0; n * rows];
    for j in 0..rows as i64 {
        for i in 0..ni {
            let mut acc = 0.0;
            for ((dx, dy), w) in offsets.iter().zip(&weights) {
                let ii = (i - dx).rem_euclid(ni) as usize;
                let jj = (j - dy).rem_euclid(rows as i64) as usize;
                let v = cut[jj * n + ii];
                if v != 0.0 {
                    acc += w * v;
                }
            }
            out[j as usize * n + i as usize] = acc;
        }
    }
    let raw_grid: Vec<f64> = if two_d { raw.clone() } else { raw[..n].to_vec() };
    let sup_error = out.iter().zip(&raw_grid).map(|(a, r)| (a - r).abs()).fold(0.0, f64::max);
    let mut max_gradient: f64 = 0.0;
    for j in 0..rows {
        for i in 0..n {
            let gx = (out[j * n + (i + 1) % n] - out[j * n + (i + n - 1) % n]) / (2.0 * h);
            let mut g2 = gx * gx;
            if two_d {
                let gy = (out[((j + 1) % n) * n + i] - out[((j + n - 1) % n) * n + i]) / (2.0 * h);
                g2 += gy * gy;
            }
            max_gradient = max_gradient.max(g2.sqrt());
        }
    }
    let (dilated, violations) = dilation_check(&raw_grid, &out, n, rows, h, eps, zero_tol);
    let shape = [n, rows];
    let profile = DampingProfile::new(b.kind, ProfileFamily::Table { shape, values: out })?;
    let report = MollifierReport {
        eps,
        grid_points: n * rows,
        sup_error,
        max_gradient,
        sup_mollified: profile.sup,
        dilated_zero_points: dilated,
        dilation_violations: violations,
    };
    Ok(Mollified { profile, report })
}

/// Counts grid points within `eps` of the sampled zero set and how many of
/// them carry a nonzero mollified value.
fn dilation_check(raw: &[f64], out: &[f64], n: usize, rows: usize, h: f64, eps: f64, tol: f64) -> (usize, usize) {
    let rad = (eps / h).floor() as i64;
    let ni = n as i64;
    let mut near = vec![false; n * rows];
    for j in 0..rows as i64 {
        for i in 0..ni {
            if raw[j as usize * n + i as usize] > tol {
                continue;
            }
            let ys: Vec<i64> = if rows > 1 { (-rad..=rad).collect() } else { vec![0] };
            for &dy in &ys {
                for dx in -rad..=rad {
                    if ((dx * dx + dy * dy) as f64) * h * h <= eps * eps {
                        let ii = (i + dx).rem_euclid(ni) as usize;
                        let jj = (j + dy).rem_euclid(rows as i64) as usize;
                        near[jj * n + ii] = true;
                    }
                }
            }
        }
    }
    let dilated = near.iter().filter(|x| **x).count();
    let violations = near.iter().zip(out).filter(|(n, v)| **n && **v != 0.0).count();
    (dilated, violations)
}

/// Empirical modulus: per-bin maxima of `|b(x) - b(y)|` over random pairs with
/// log-uniform separations, followed by a running max.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModulusTable {
    /// Upper edge of each distance bin.
    pub r: Vec<f64>,
    pub omega: Vec<f64>,
}

impl ModulusTable {
    pub fn to_modulus(&self) -> Modulus {
        Modulus::Table { r: self.r.clone(), omega: self.omega.clone() }
    }

    /// Least-squares slope of `log omega` against `log r` over nonzero bins.
    pub fn loglog_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self.r.iter().zip(&self.omega).filter(|(_, w)| **w > 0.0).map(|(r, w)| (r.ln(), w.ln())).collect();
        fit_slope(&pts)
    }
}

pub fn fit_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

pub fn modulus_fit(b: &DampingProfile, pairs: usize, seed: u64) -> ModulusTable {
    const BINS: usize = 24;
    let r_min: f64 = 1e-4;
    let r_max: f64 = PI;
    let edges: Vec<f64> = (1..=BINS).map(|i| r_min * (r_max / r_min).powf(i as f64 / BINS as f64)).collect();
    let mut omega = vec![0.0f64; BINS];
    let mut rng = linalg::rng(seed);
    let two_d = b.kind == ManifoldKind::Torus2;
    for _ in 0..pairs {
        let x = [rng.random::<f64>() * TWO_PI, if two_d { rng.random::<f64>() * TWO_PI } else { 0.0 }];
        let u: f64 = rng.random();
        let r = r_min * (r_max / r_min).powf(u);
        let dir = if two_d {
            let th = rng.random::<f64>() * TWO_PI;
            [th.cos(), th.sin()]
        } else if rng.random::<bool>() {
            [1.0, 0.0]
        } else {
            [-1.0, 0.0]
        };
        let y = [x[0] + r * dir[0], x[1] + r * dir[1]];
        let d = (b.eval(x) - b.eval(y)).abs();
        let bin = edges.iter().position(|e| r <= *e).unwrap_or(BINS - 1);
        omega[bin] = omega[bin].max(d);
    }
    for i in 1..BINS {
        omega[i] = omega[i].max(omega[i - 1]);
    }
    ModulusTable { r: edges, omega }
}

/// Spot check of the declared modulus on random pairs; returns the worst
/// excess `|b(x)-b(y)| - omega(dist)` (non-positive when it holds).
pub fn modulus_spot_check(b: &DampingProfile, pairs: usize, seed: u64) -> f64 {
    let mut rng = linalg::rng(seed);
    let two_d = b.kind == ManifoldKind::Torus2;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let x = [rng.random::<f64>() * TWO_PI, if two_d { rng.random::<f64>() * TWO_PI } else { 0.0 }];
        let y = [rng.random::<f64>() * TWO_PI, if two_d { rng.random::<f64>() * TWO_PI } else { 0.0 }];
        let dx = periodic_diff(x[0], y[0]);
        let dy = if two_d { periodic_diff(x[1], y[1]) } else { 0.0 };
        let dist = (dx * dx + dy * dy).sqrt();
        worst = worst.max((b.eval(x) - b.eval(y)).abs() - b.modulus.eval(dist));
    }
    worst
}

/// Sup norm of a profile sampled on the quadrature grid of `model`.
pub fn sampled_sup(model: &ManifoldModel, b: &DampingProfile) -> f64 {
    b.samples(model.n_quad).into_iter().fold(0.0, f64::max)
}

pub fn samples_matrix(b: &DampingProfile, n: usize) -> Array2<f64> {
    let v = b.samples(n);
    let rows = if b.kind == ManifoldKind::Torus2 { n } else { 1 };
    Array2::from_shape_vec((rows, n), v).expect("sample count matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ManifoldModel;
    use proptest::prelude::*;

    fn circle_bump() -> DampingProfile {
        DampingProfile::new(ManifoldKind::Circle, ProfileFamily::Bump { center: [1.0, 0.0], radius: 1.2, amplitude: 2.0 }).unwrap()
    }

    #[test]
    fn constant_profile_gives_scaled_identity() {
        let m = ManifoldModel::circle(6).unwrap();
        let b = DampingProfile::constant(ManifoldKind::Circle, 0.7).unwrap();
        let bm = multiplication_matrix(&m, &b).unwrap().full(&m);
        let n = m.n_modes();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 0.7 } else { 0.0 };
                assert!((bm[[i, j]] - C64::new(want, 0.0)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn one_plus_cos_is_tridiagonal() {
        let m = ManifoldModel::circle(5).unwrap();
        let b = DampingProfile::new(ManifoldKind::Circle, ProfileFamily::Cosine { offset: 1.0, amplitude: 1.0, wave: [1, 0] }).unwrap();
        let op = multiplication_matrix(&m, &b).unwrap();
        let bm = op.full(&m);
        for i in 0..m.n_modes() {
            for j in 0..m.n_modes() {
                let want = match (i as i64 - j as i64).abs() {
                    0 => 1.0,
                    1 => 0.5,
                    _ => 0.0,
                };
                assert!((bm[[i, j]] - C64::new(want, 0.0)).norm() < 1e-15, "{i} {j}");
            }
        }
        assert!(op.tail_mass < 1e-15);
        assert!(op.aliasing_residual < 1e-15);
    }

    #[test]
    fn strip_on_torus_does_not_mix_ky() {
        let m = ManifoldModel::torus(3).unwrap();
        let b = DampingProfile::new(ManifoldKind::Torus2, ProfileFamily::Strip { lo: PI / 2.0, hi: 1.5 * PI, amplitude: 1.0 }).unwrap();
        assert!(b.x_only());
        let bm = multiplication_matrix(&m, &b).unwrap().full(&m);
        for (i, k) in m.modes.iter().enumerate() {
            for (j, l) in m.modes.iter().enumerate() {
                if k.0[1] != l.0[1] {
                    assert_eq!(bm[[i, j]], C64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn multiplication_matrix_is_hermitian_psd() {
        let m = ManifoldModel::torus(4).unwrap();
        let b = DampingProfile::new(ManifoldKind::Torus2, ProfileFamily::Bump { center: [1.0, 2.0], radius: 1.5, amplitude: 1.0 }).unwrap();
        let bm = multiplication_matrix(&m, &b).unwrap().full(&m);
        assert!(linalg::is_hermitian(&bm, 1e-13));
        assert!(linalg::hermitian_min_eig(&bm).unwrap() >= -1e-10 * b.sup);
    }

    #[test]
    fn negative_samples_are_rejected() {
        let bad = DampingProfile {
            family: ProfileFamily::Constant { value: -1.0 },
            kind: ManifoldKind::Circle,
            modulus: Modulus::Zero,
            sup: 0.0,
        };
        let m = ManifoldModel::circle(2).unwrap();
        assert!(multiplication_matrix(&m, &bad).is_err());
    }

    #[test]
    fn cutoff_shape() {
        assert_eq!(level_cutoff(0.3), 1.0);
        assert_eq!(level_cutoff(-1.0), 1.0);
        assert_eq!(level_cutoff(2.0), 0.0);
        assert!((level_cutoff(1.5) - 0.5).abs() < 1e-12);
        let mut prev = 1.0;
        for i in 0..=100 {
            let v = level_cutoff(1.0 + i as f64 / 100.0);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn mollify_zero_is_zero() {
        let z = DampingProfile::zero(ManifoldKind::Circle);
        let out = mollify(&z, MollifierSpec { eps: 0.1 }).unwrap();
        assert_eq!(out.report.sup_mollified, 0.0);
    }

    #[test]
    fn mollify_distance_square_vanishes_near_zero() {
        let b = DampingProfile::new(ManifoldKind::Circle, ProfileFamily::HoelderDistance { alpha: 1.0, amplitude: 1.0, x0: 0.0 }).unwrap();
        let out = mollify(&b, MollifierSpec { eps: 0.05 }).unwrap();
        assert_eq!(out.report.dilation_violations, 0);
        assert!(out.report.dilated_zero_points > 0);
        for i in 0..=50 {
            let x = -0.05 + 0.1 * i as f64 / 50.0;
            assert_eq!(out.profile.eval([x, 0.0]), 0.0, "x = {x}");
        }
        assert!(out.report.sup_error < b.modulus.eval(0.1) * 3.0);
    }

    #[test]
    fn mollify_preserves_constants() {
        let b = DampingProfile::constant(ManifoldKind::Circle, 2.5).unwrap();
        let out = mollify(&b, MollifierSpec { eps: 0.2 }).unwrap();
        assert!(out.report.sup_error < 1e-13);
    }

    #[test]
    fn modulus_fit_examples() {
        let c = DampingProfile::constant(ManifoldKind::Circle, 1.0).unwrap();
        assert!(modulus_fit(&c, 2000, 1).omega.iter().all(|w| *w == 0.0));
        let s = DampingProfile::new(ManifoldKind::Circle, ProfileFamily::Cosine { offset: 1.0, amplitude: 1.0, wave: [1, 0] }).unwrap();
        let t = modulus_fit(&s, 20000, 2);
        for (r, w) in t.r.iter().zip(&t.omega) {
            assert!(*w <= r.min(2.0) + 1e-12);
        }
        let h = DampingProfile::new(ManifoldKind::Circle, ProfileFamily::HoelderDistance { alpha: 0.25, amplitude: 1.0, x0: 0.0 }).unwrap();
        let t = modulus_fit(&h, 200_000, 3);
        // bins below r = 1, where the square-root behaviour dominates
        let pts: Vec<(f64, f64)> =
            t.r.iter().zip(&t.omega).filter(|(r, w)| **r < 1.0 && **w > 0.0).map(|(r, w)| (r.ln(), w.ln())).collect();
        let slope = fit_slope(&pts).unwrap();
        assert!((slope - 0.5).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn declared_moduli_hold_on_random_pairs() {
        let profiles = vec![
            circle_bump(),
            DampingProfile::new(ManifoldKind::Circle, ProfileFamily::HoelderDistance { alpha: 0.25, amplitude: 1.0, x0: 0.5 }).unwrap(),
            DampingProfile::new(ManifoldKind::Torus2, ProfileFamily::HoelderDistance { alpha: 1.0, amplitude: 0.3, x0: 0.0 }).unwrap(),
            DampingProfile::new(ManifoldKind::Torus2, ProfileFamily::Strip { lo: 1.0, hi: 2.0, amplitude: 0.5 }).unwrap(),
        ];
        for p in profiles {
            assert!(modulus_spot_check(&p, 20000, 9) <= 1e-12, "{:?}", p.family);
        }
    }

    proptest! {
        #[test]
        fn bump_samples_nonnegative_and_bounded(cx in 0.0..TWO_PI, r in 0.1..3.0f64, a in 0.0..5.0f64) {
            let b = DampingProfile::new(ManifoldKind::Circle,
                ProfileFamily::Bump { center: [cx, 0.0], radius: r, amplitude: a }).unwrap();
            for v in b.samples(257) {
                prop_assert!(v >= 0.0 && v <= a + 1e-15);
            }
        }
    }
}
