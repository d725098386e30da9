//! Weight functions and evaluators for the long-time inequalities: the
//! resolvent-to-average estimate and its pointwise forms, the filtered
//! average bound with its modified resolvent constant, dyadic frequency
//! mixing norms and the diagonalization error functionals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::damping::{fit_slope, level_cutoff, MultiplicationOperator};
use crate::error::{Error, Result};
use crate::evolution::{apply_filter, ComponentRule, Propagator, SpectralFilter};
use crate::geometry::{ManifoldKind, ManifoldModel};
use crate::linalg::{self, CMat, C64, I};
use crate::operators::{DiagonalizationSuite, Formulation, OperatorBundle, StateVector};
use crate::spectra::{self, GReport, ResolventScan};

// ---------------------------------------------------------------- weights

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightKind {
    /// `min(t, 1)` on `t >= 0`.
    Ramp,
    /// Smooth bump supported on `(0, length)` with peak 1.
    Bump { length: f64 },
    /// `sqrt 2 * t` on `[0,1]`, `sqrt 2 * (L-t)/(L-1)` on `[1,L]`.
    PsiMin { l: f64 },
    /// Piecewise-linear through `(t_i, v_i)`, zero outside.
    Table { t: Vec<f64>, v: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WeightFunction {
    pub kind: WeightKind,
}

impl WeightFunction {
    pub fn ramp() -> Self {
        WeightFunction { kind: WeightKind::Ramp }
    }

    pub fn bump(length: f64) -> Result<Self> {
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::Invalid(format!("bump length must be positive, got {length}")));
        }
        Ok(WeightFunction { kind: WeightKind::Bump { length } })
    }

    pub fn psi_min(l: f64) -> Result<Self> {
        if !(l > 1.0 && l.is_finite()) {
            return Err(Error::Domain(format!("psi_min needs L > 1, got {l}")));
        }
        Ok(WeightFunction { kind: WeightKind::PsiMin { l } })
    }

    /// `psi_min` with `L = 1 + 1/delta + sqrt(1/delta^2 + 2/delta)`, the
    /// parameter for which `2L/(L-1)^2 = delta`.
    pub fn psi_min_for_delta(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Domain(format!("delta must lie in (0,1), got {delta}")));
        }
        Self::psi_min(1.0 + 1.0 / delta + (1.0 / (delta * delta) + 2.0 / delta).sqrt())
    }

    pub fn table(t: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if t.len() != v.len() || t.len() < 2 {
            return Err(Error::Invalid("weight table needs matching t and v with at least two knots".into()));
        }
        if t[0] < 0.0 || t.windows(2).any(|w| w[1] <= w[0]) || t.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::Invalid("weight table knots must be finite, nonnegative and increasing".into()));
        }
        if v[0] != 0.0 || v[v.len() - 1] != 0.0 {
            return Err(Error::Invalid("weight table must start and end at 0".into()));
        }
        Ok(WeightFunction { kind: WeightKind::Table { t, v } })
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        match &self.kind {
            WeightKind::Ramp => t.min(1.0),
            WeightKind::Bump { length } => {
                let u = 2.0 * t / length - 1.0;
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / (1.0 - u * u)).exp()
                }
            }
            WeightKind::PsiMin { l } => {
                let r = std::f64::consts::SQRT_2;
                if t <= 1.0 {
                    r * t
                } else if t < *l {
                    r * (l - t) / (l - 1.0)
                } else {
                    0.0
                }
            }
            WeightKind::Table { t: ts, v } => {
                if t >= ts[ts.len() - 1] || t <= ts[0] {
                    return 0.0;
                }
                let j = ts.partition_point(|x| *x <= t) - 1;
                let f = (t - ts[j]) / (ts[j + 1] - ts[j]);
                v[j] * (1.0 - f) + v[j + 1] * f
            }
        }
    }

    /// Derivative away from the breakpoints.
    pub fn derivative(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        match &self.kind {
            WeightKind::Ramp => {
                if t < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            WeightKind::Bump { length } => {
                let u = 2.0 * t / length - 1.0;
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    let q = 1.0 - u * u;
                    self.eval(t) * (-2.0 * u / (q * q)) * (2.0 / length)
                }
            }
            WeightKind::PsiMin { l } => {
                let r = std::f64::consts::SQRT_2;
                if t < 1.0 {
                    r
                } else if t < *l {
                    -r / (l - 1.0)
                } else {
                    0.0
                }
            }
            WeightKind::Table { t: ts, v } => {
                if t >= ts[ts.len() - 1] || t <= ts[0] {
                    return 0.0;
                }
                let j = ts.partition_point(|x| *x <= t) - 1;
                (v[j + 1] - v[j]) / (ts[j + 1] - ts[j])
            }
        }
    }

    /// Right end of the support, `None` when unbounded.
    pub fn support_end(&self) -> Option<f64> {
        match &self.kind {
            WeightKind::Ramp => None,
            WeightKind::Bump { length } => Some(*length),
            WeightKind::PsiMin { l } => Some(*l),
            WeightKind::Table { t, .. } => Some(t[t.len() - 1]),
        }
    }

    /// Points where the weight or its derivative may fail to be smooth.
    fn breakpoints(&self) -> Vec<f64> {
        match &self.kind {
            WeightKind::Ramp => vec![0.0, 1.0],
            WeightKind::Bump { length } => vec![0.0, *length],
            WeightKind::PsiMin { l } => vec![0.0, 1.0, *l],
            WeightKind::Table { t, v } => {
                let mut b = vec![0.0];
                for j in 0..t.len() {
                    b.push(t[j]);
                    // sign changes matter for the L1 norms
                    if j + 1 < t.len() && v[j] * v[j + 1] < 0.0 {
                        b.push(t[j] + (t[j + 1] - t[j]) * v[j] / (v[j] - v[j + 1]));
                    }
                }
                b
            }
        }
    }

    fn smooth(&self) -> bool {
        matches!(self.kind, WeightKind::Bump { .. })
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Composite Gauss-Legendre integral over `[a, b]` split at `breaks`, with
/// panels no wider than `width`; returns the 16-point and 8-point values.
fn panel_integral(f: &mut dyn FnMut(f64) -> Result<f64>, a: f64, b: f64, breaks: &[f64], width: f64) -> Result<(f64, f64)> {
    let (x16, w16) = gauss_legendre(16);
    let (x8, w8) = gauss_legendre(8);
    let mut cuts: Vec<f64> = breaks.iter().cloned().filter(|x| *x > a && *x < b).collect();
    cuts.push(a);
    cuts.push(b);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let (mut fine, mut coarse) = (0.0, 0.0);
    for seg in cuts.windows(2) {
        let n = ((seg[1] - seg[0]) / width).ceil().max(1.0) as usize;
        let step = (seg[1] - seg[0]) / n as f64;
        for p in 0..n {
            let lo = seg[0] + p as f64 * step;
            let mid = lo + 0.5 * step;
            for (x, w) in x16.iter().zip(&w16) {
                fine += 0.5 * step * w * f(mid + 0.5 * step * x)?;
            }
            for (x, w) in x8.iter().zip(&w8) {
                coarse += 0.5 * step * w * f(mid + 0.5 * step * x)?;
            }
        }
    }
    Ok((fine, coarse))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PsiNorms {
    pub l2: f64,
    /// `||psi'||_{L^2}` (not squared).
    pub d_l2: f64,
    pub l1: f64,
    pub d_l1: f64,
    pub theta: f64,
    /// `||psi||_{L^2(0, theta)}`.
    pub l2_theta: f64,
}

/// Norms by piecewise Gauss-Legendre quadrature (exact for piecewise-linear
/// weights). Unbounded supports give infinite `L^1`/`L^2` norms of `psi`.
pub fn psi_norms(w: &WeightFunction, theta: f64) -> Result<PsiNorms> {
    if !(theta > 0.0) {
        return Err(Error::Invalid(format!("theta must be positive, got {theta}")));
    }
    let mut br = w.breakpoints();
    br.push(theta);
    let width = if w.smooth() { w.support_end().unwrap_or(1.0) / 400.0 } else { f64::INFINITY };
    let end = w.support_end();
    let quad = |f: &dyn Fn(f64) -> f64, b: f64| -> Result<f64> { Ok(panel_integral(&mut |t| Ok(f(t)), 0.0, b, &br, width)?.0) };
    let reach = end.unwrap_or(1.0).max(theta);
    let d_l2 = quad(&|t| w.derivative(t).powi(2), reach)?.sqrt();
    let d_l1 = quad(&|t| w.derivative(t).abs(), reach)?;
    let (l2, l1) = match end {
        Some(e) => (quad(&|t| w.eval(t).powi(2), e)?.sqrt(), quad(&|t| w.eval(t).abs(), e)?),
        None => (f64::INFINITY, f64::INFINITY),
    };
    let l2_theta = quad(&|t| w.eval(t).powi(2), theta)?.sqrt();
    Ok(PsiNorms { l2, d_l2, l1, d_l1, theta, l2_theta })
}

/// Closed forms attached to `psi_min,L`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PsiMinForms {
    pub l: f64,
    /// `||psi'||_{L^2}^2`.
    pub d_l2_sq: f64,
    pub l1: f64,
    pub d_l1: f64,
    /// `||psi||_{L^2(0,1)}`.
    pub l2_unit: f64,
}

/// The closed forms as published with the optimal-weight construction.
pub fn psi_min_published(l: f64) -> Result<PsiMinForms> {
    if !(l > 1.0) {
        return Err(Error::Domain(format!("psi_min needs L > 1, got {l}")));
    }
    Ok(PsiMinForms {
        l,
        d_l2_sq: 2.0 * (1.0 + l / (l - 1.0).powi(2)),
        l1: l / std::f64::consts::SQRT_2,
        d_l1: std::f64::consts::SQRT_2 * (1.0 + l / (l - 1.0)),
        l2_unit: 1.0,
    })
}

/// Exact values for the piecewise-linear `psi_min,L` as defined above.
pub fn psi_min_exact(l: f64) -> Result<PsiMinForms> {
    if !(l > 1.0) {
        return Err(Error::Domain(format!("psi_min needs L > 1, got {l}")));
    }
    Ok(PsiMinForms {
        l,
        d_l2_sq: 2.0 * l / (l - 1.0),
        l1: l / std::f64::consts::SQRT_2,
        d_l1: 2.0 * std::f64::consts::SQRT_2,
        l2_unit: (2.0f64 / 3.0).sqrt(),
    })
}

// ---------------------------------------------------------------- reports

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InequalityReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub error_bar: f64,
    pub params: BTreeMap<String, f64>,
    pub verdict: Verdict,
}

impl InequalityReport {
    pub fn new(name: &str, lhs: f64, rhs: f64, error_bar: f64, params: BTreeMap<String, f64>) -> Self {
        let slack = rhs - lhs;
        let verdict = if slack >= -error_bar { Verdict::Pass } else { Verdict::Fail };
        InequalityReport { name: name.to_string(), lhs, rhs, slack, error_bar, params, verdict }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
    kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Squared bundle norm `2 E`.
fn norm_sq(bundle: &OperatorBundle, u: &StateVector) -> f64 {
    2.0 * bundle.energy(u)
}

/// `(1/T) int psi(t/T)^2 ||e^{tG} u||^2 dt` over the support of `psi(./T)`,
/// cut at `horizon` when the support is unbounded. Returns the value and a
/// quadrature error bar.
fn weighted_time_average(
    bundle: &OperatorBundle,
    prop: &Propagator,
    u: &StateVector,
    psi: &WeightFunction,
    t_scale: f64,
    horizon: Option<f64>,
    observe: &dyn Fn(&StateVector) -> f64,
) -> Result<(f64, f64)> {
    let end = match (psi.support_end(), horizon) {
        (Some(e), None) => e * t_scale,
        (Some(e), Some(hz)) => (e * t_scale).min(hz),
        (None, Some(hz)) => hz,
        (None, None) => return Err(Error::Invalid("an unbounded weight needs an integration horizon".into())),
    };
    // ||e^{tG}u||^2 oscillates at differences of eigenfrequencies
    let omega = 2.0 * bundle.max_lambda() + bundle.b_norm + 1.0;
    let width = 2.0 / omega;
    let breaks: Vec<f64> = psi.breakpoints().iter().map(|b| b * t_scale).collect();
    let mut f = |t: f64| -> Result<f64> {
        let w = psi.eval(t / t_scale);
        if w == 0.0 {
            return Ok(0.0);
        }
        Ok(w * w * observe(&prop.apply(u, t)?))
    };
    let (fine, coarse) = panel_integral(&mut f, 0.0, end, &breaks, width)?;
    Ok((fine / t_scale, (fine - coarse).abs() / t_scale + 1e-13 * fine.abs() / t_scale))
}

// ------------------------------------------------ resolvent-to-average bound

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Theorem31Variant {
    Averaged,
    Pointwise { theta: f64 },
    PointwiseOpt { delta: f64 },
}

impl Theorem31Variant {
    pub fn tag(&self) -> &'static str {
        match self {
            Theorem31Variant::Averaged => "averaged",
            Theorem31Variant::Pointwise { .. } => "pointwise",
            Theorem31Variant::PointwiseOpt { .. } => "pointwise_opt",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Theorem31Params {
    pub h: f64,
    pub eps: f64,
    pub t_h: f64,
    pub weight: WeightFunction,
    pub variant: Theorem31Variant,
    pub rule: ComponentRule,
    /// Grid points per unit of `tau / h` in the `G(h)` search.
    pub density: f64,
    /// Constant used for the right-hand side; the fitted one when `None`.
    pub c0: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Theorem31Report {
    pub report: InequalityReport,
    pub g: GReport,
    pub norms: PsiNorms,
    /// `G^2/T^2`-term coefficient times `||Pi u||^2`.
    pub main_term: f64,
    /// The remainder with the constant set to 1, times `||Pi u||^2`.
    pub remainder_factor: f64,
    /// Smallest constant for which the inequality holds.
    pub fitted_c0: f64,
    pub filtered_norm_sq: f64,
}

/// The resolvent-to-average estimate for `P_h = h P_m` on the window
/// `[1-eps, 1+eps]`, evaluated on the filtered state `Pi u0`. Time is measured
/// in units where `e^{(it/h) P_h} = e^{it P_m}`.
pub fn theorem31_check(model: &ManifoldModel, bundle: &OperatorBundle, u0: &StateVector, p: &Theorem31Params) -> Result<Theorem31Report> {
    if bundle.formulation != Formulation::PM {
        return Err(Error::Invalid("the resolvent-to-average check runs on a P_m bundle".into()));
    }
    if !(p.t_h >= 1.0) {
        return Err(Error::Invalid(format!("T_h must be at least 1, got {}", p.t_h)));
    }
    let g = spectra::g_of_h(bundle, p.h, p.eps, p.density)?;
    if !g.value.is_finite() || g.near_singular {
        return Err(Error::Infeasible(format!("window [1-{0}, 1+{0}] at h = {1} is not resolvent-free", p.eps, p.h)));
    }
    let theta = match p.variant {
        Theorem31Variant::Pointwise { theta } => theta,
        _ => 1.0,
    };
    let norms = psi_norms(&p.weight, theta)?;
    let filter = SpectralFilter::window(model, bundle.m, p.h, p.eps, p.rule);
    let pu = apply_filter(&filter, bundle, u0)?;
    let n0 = norm_sq(bundle, &pu);
    let prop = Propagator::new(bundle)?;
    let q = bundle.b_norm;
    let remainder_unit = (1.0 + q * q) * p.h * p.t_h / (p.eps * p.eps);
    let g2 = g.value * g.value / (p.t_h * p.t_h);
    let psi_const = norms.l1.powi(2).max(norms.d_l1.powi(2));
    let (lhs, err, main, rem) = match p.variant {
        Theorem31Variant::Averaged => {
            let (lhs, err) = weighted_time_average(bundle, &prop, &pu, &p.weight, p.t_h, None, &|v| norm_sq(bundle, v))?;
            (lhs, err, g2 * norms.d_l2.powi(2), psi_const * remainder_unit)
        }
        Theorem31Variant::Pointwise { theta } => {
            let lhs = norm_sq(bundle, &prop.apply(&pu, theta * p.t_h)?);
            let d = norms.l2_theta.powi(2);
            if d == 0.0 {
                return Err(Error::Domain("psi vanishes on (0, theta)".into()));
            }
            (lhs, 1e-12 * n0, g2 * norms.d_l2.powi(2) / d, psi_const * remainder_unit / d)
        }
        Theorem31Variant::PointwiseOpt { delta } => {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(Error::Domain(format!("delta must lie in (0,1), got {delta}")));
            }
            let lhs = norm_sq(bundle, &prop.apply(&pu, p.t_h)?);
            (lhs, 1e-12 * n0, (2.0 + delta) * g2, remainder_unit / (delta * delta))
        }
    };
    let main_term = main * n0;
    let remainder_factor = rem * n0;
    let fitted_c0 = if remainder_factor > 0.0 { ((lhs - main_term) / remainder_factor).max(0.0) } else { 0.0 };
    let c0 = p.c0.unwrap_or(fitted_c0);
    let rhs = main_term + c0 * remainder_factor;
    let mut kv = params(&[("h", p.h), ("T_h", p.t_h), ("eps", p.eps), ("G", g.value), ("C0", c0), ("norm_Q", q), ("filtered_norm_sq", n0)]);
    match p.variant {
        Theorem31Variant::Pointwise { theta } => {
            kv.insert("theta".into(), theta);
        }
        Theorem31Variant::PointwiseOpt { delta } => {
            kv.insert("delta".into(), delta);
        }
        Theorem31Variant::Averaged => {}
    }
    let name = format!("resolvent_to_average/{}", p.variant.tag());
    let report = InequalityReport::new(&name, lhs, rhs, err, kv);
    Ok(Theorem31Report { report, g, norms, main_term, remainder_factor, fitted_c0, filtered_norm_sq: n0 })
}

// ------------------------------------------------ growth envelopes

/// Even function nondecreasing on `[0, inf)`, used as a resolvent growth bound.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Envelope {
    Constant {
        value: f64,
    },
    /// Linear interpolation in `|s|`, constant beyond the last knot.
    Table {
        s: Vec<f64>,
        values: Vec<f64>,
    },
}

impl Envelope {
    pub fn constant(value: f64) -> Result<Self> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::Invalid(format!("envelope value must be positive and finite, got {value}")));
        }
        Ok(Envelope::Constant { value })
    }

    pub fn table(s: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if s.len() != values.len() || s.is_empty() {
            return Err(Error::Invalid("envelope table needs matching, nonempty s and values".into()));
        }
        if s[0] < 0.0 || s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("envelope knots must be nonnegative and increasing".into()));
        }
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) || values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid("envelope values must be positive, finite and nondecreasing".into()));
        }
        Ok(Envelope::Table { s, values })
    }

    /// The running maximum of a scan on `s >= 0`.
    pub fn from_scan(scan: &ResolventScan) -> Result<Self> {
        let mut pts: Vec<(f64, f64)> =
            scan.s.iter().zip(&scan.values).chain(scan.refined.iter().map(|(a, b)| (a, b))).map(|(a, b)| (a.abs(), *b)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut s = Vec::new();
        let mut v: Vec<f64> = Vec::new();
        let mut run: f64 = 0.0;
        for (x, y) in pts {
            run = run.max(y);
            if s.last() == Some(&x) {
                *v.last_mut().expect("paired") = run;
            } else {
                s.push(x);
                v.push(run);
            }
        }
        Self::table(s, v)
    }

    pub fn eval(&self, s: f64) -> f64 {
        let a = s.abs();
        match self {
            Envelope::Constant { value } => *value,
            Envelope::Table { s, values } => {
                if a <= s[0] {
                    return values[0];
                }
                if a >= s[s.len() - 1] {
                    return values[values.len() - 1];
                }
                let j = s.partition_point(|x| *x <= a) - 1;
                let f = (a - s[j]) / (s[j + 1] - s[j]);
                values[j] * (1.0 - f) + values[j + 1] * f
            }
        }
    }

    /// `M_eps(s) = M(s / (1 - eps))`.
    pub fn eval_eps(&self, s: f64, eps: f64) -> f64 {
        self.eval(s / (1.0 - eps))
    }

    /// Whether the envelope dominates every value of a scan.
    pub fn dominates(&self, scan: &ResolventScan) -> bool {
        scan.s.iter().zip(&scan.values).all(|(s, v)| self.eval(*s) >= *v * (1.0 - 1e-12))
    }
}

// ------------------------------------------------ modified resolvent constant

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModifiedResolventReport {
    /// `max ||M_eps(Lambda)^{-1} (P + i alpha - tau)^{-1}||` over the grid.
    pub c0: f64,
    pub argmax_tau: f64,
    pub argmax_alpha: f64,
    pub alphas: Vec<f64>,
    pub taus: Vec<f64>,
    /// Row per alpha, column per tau.
    pub values: Vec<Vec<f64>>,
    pub refined_points: usize,
}

fn modified_value(blocks: &[(CMat, Vec<f64>)], alpha: f64, tau: f64) -> Result<f64> {
    let mut best: f64 = 0.0;
    for (p, m) in blocks {
        // ||D^{-1} R|| = 1 / sigma_min(R^{-1} D)
        let n = p.nrows();
        let mut a = CMat::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut z = p[[i, j]];
                if i == j {
                    z += C64::new(-tau, alpha);
                }
                a[[i, j]] = z * m[j];
            }
        }
        let smin = linalg::sigma_min(&a)?;
        if smin == 0.0 {
            return Err(Error::Singular(format!("P + i{alpha} - {tau} is singular")));
        }
        best = best.max(1.0 / smin);
    }
    Ok(best)
}

/// The constant of the modified resolvent estimate on a `P_m` bundle:
/// maximum over `alphas` and `taus` (with bisection around local maxima).
pub fn modified_resolvent_check(
    bundle: &OperatorBundle,
    envelope: &Envelope,
    eps: f64,
    alphas: &[f64],
    taus: &[f64],
) -> Result<ModifiedResolventReport> {
    if bundle.formulation != Formulation::PM {
        return Err(Error::Invalid("the modified resolvent check runs on a P_m bundle".into()));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Invalid(format!("eps must lie in [0,1), got {eps}")));
    }
    let blocks: Vec<(CMat, Vec<f64>)> = bundle
        .blocks
        .iter()
        .map(|b| {
            let m: Vec<f64> = b.lambda.iter().chain(b.lambda.iter()).map(|l| envelope.eval_eps(*l, eps)).collect();
            (b.matrix.clone(), m)
        })
        .collect();
    let mut rep = ModifiedResolventReport {
        c0: 0.0,
        argmax_tau: f64::NAN,
        argmax_alpha: f64::NAN,
        alphas: alphas.to_vec(),
        taus: taus.to_vec(),
        values: Vec::new(),
        refined_points: 0,
    };
    for &alpha in alphas {
        let row = taus.iter().map(|&t| modified_value(&blocks, alpha, t)).collect::<Result<Vec<_>>>()?;
        for (j, v) in row.iter().enumerate() {
            if *v > rep.c0 {
                rep.c0 = *v;
                rep.argmax_tau = taus[j];
                rep.argmax_alpha = alpha;
            }
        }
        let n = row.len();
        for j in 1..n.saturating_sub(1) {
            if row[j] >= row[j - 1] && row[j] >= row[j + 1] {
                let f = |t: f64| modified_value(&blocks, alpha, t);
                let (c, fc, pts) = spectra::refine_peak(&f, taus[j - 1], taus[j], taus[j + 1], row[j])?;
                rep.refined_points += pts.len();
                if fc > rep.c0 {
                    rep.c0 = fc;
                    rep.argmax_tau = c;
                    rep.argmax_alpha = alpha;
                }
            }
        }
        rep.values.push(row);
    }
    Ok(rep)
}

/// Default grids: 200 points on `[-2 max lambda, 2 max lambda]` and
/// `alpha in {0, 1/4, 1/2, 1}`.
pub fn default_modified_grids(bundle: &OperatorBundle) -> (Vec<f64>, Vec<f64>) {
    let r = 2.0 * bundle.max_lambda();
    let taus = (0..200).map(|j| -r + 2.0 * r * j as f64 / 199.0).collect();
    (vec![0.0, 0.25, 0.5, 1.0], taus)
}

// ------------------------------------------------ filtered average bound

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilteredAverageReport {
    pub report: InequalityReport,
    pub c0: f64,
    pub horizon: f64,
}

/// `(1/T) int Psi(t/T)^2 E(M_eps(Lambda)^{-1} u(t)) dt <= (C0^2/T^2)
/// ||Psi'||^2 E(u(0))` for any bundle whose weighted norm is the energy norm.
/// An unbounded `Psi` is integrated up to `horizon`.
#[allow(clippy::too_many_arguments)]
pub fn filtered_average_check(
    model: &ManifoldModel,
    bundle: &OperatorBundle,
    envelope: &Envelope,
    eps: f64,
    psi: &WeightFunction,
    t: f64,
    u0: &StateVector,
    c0: f64,
    horizon: Option<f64>,
) -> Result<FilteredAverageReport> {
    if !(t > 0.0) {
        return Err(Error::Invalid(format!("T must be positive, got {t}")));
    }
    let filter = SpectralFilter::new(model, bundle.m, &|s| 1.0 / envelope.eval_eps(s, eps), ComponentRule::Both);
    let prop = Propagator::new(bundle)?;
    let observe = |v: &StateVector| -> f64 { apply_filter(&filter, bundle, v).map(|w| bundle.energy(&w)).unwrap_or(f64::NAN) };
    let (lhs, err) = weighted_time_average(bundle, &prop, u0, psi, t, horizon, &observe)?;
    if lhs.is_nan() {
        return Err(Error::Invalid("state layout does not match the bundle".into()));
    }
    let norms = psi_norms(psi, 1.0)?;
    let rhs = c0 * c0 / (t * t) * norms.d_l2.powi(2) * bundle.energy(u0);
    let end = psi.support_end().map(|e| e * t).unwrap_or(f64::INFINITY).min(horizon.unwrap_or(f64::INFINITY));
    let report = InequalityReport::new("filtered_average", lhs, rhs, err, params(&[("T", t), ("eps", eps), ("C0", c0), ("horizon", end)]));
    Ok(FilteredAverageReport { report, c0, horizon: end })
}

// ------------------------------------------------ dyadic frequency mixing

/// Dyadic shell `phi(s) = chi(s/2) - chi(s)`, where `chi` is 1 on
/// `|s| <= chi_lo` and 0 on `|s| >= chi_hi`, and a wider `phi_tilde` equal to
/// 1 on `[flat_lo, flat_hi]` and supported in `(flat_lo - ramp, flat_hi + ramp)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DyadicPair {
    pub chi_lo: f64,
    pub chi_hi: f64,
    pub flat_lo: f64,
    pub flat_hi: f64,
    pub ramp: f64,
}

impl Default for DyadicPair {
    fn default() -> Self {
        DyadicPair { chi_lo: 0.82, chi_hi: 0.84, flat_lo: 0.52, flat_hi: 1.98, ramp: 0.01 }
    }
}

impl DyadicPair {
    pub fn validate(&self) -> Result<()> {
        let ok = self.chi_lo >= 0.5
            && self.chi_hi <= 1.0
            && self.chi_lo < self.chi_hi
            && self.ramp > 0.0
            && self.flat_lo <= self.chi_lo
            && self.flat_hi >= 2.0 * self.chi_hi
            && self.flat_lo - self.ramp >= 0.5
            && self.flat_hi + self.ramp <= 2.0;
        if !ok {
            return Err(Error::Invalid(format!(
                "need 1/2 <= chi_lo < chi_hi <= 1 and phi_tilde = 1 on [chi_lo, 2 chi_hi] vanishing outside (1/2, 2); got {self:?}"
            )));
        }
        Ok(())
    }

    /// Low-frequency cutoff of the partition.
    pub fn chi(&self, s: f64) -> f64 {
        level_cutoff(1.0 + (s.abs() - self.chi_lo).max(0.0) / (self.chi_hi - self.chi_lo))
    }

    pub fn phi(&self, s: f64) -> f64 {
        self.chi(s / 2.0) - self.chi(s)
    }

    pub fn phi_tilde(&self, s: f64) -> f64 {
        let a = s.abs();
        let out = (self.flat_lo - a).max(a - self.flat_hi).max(0.0);
        level_cutoff(1.0 + out / self.ramp)
    }

    /// Smallest distance, at level `k`, between `supp phi(2^-k .)` and
    /// `supp (1 - phi_tilde(2^-k .))`.
    pub fn separation(&self, k: u32) -> f64 {
        2f64.powi(k as i32) * (self.chi_lo - self.flat_lo).min(self.flat_hi - 2.0 * self.chi_hi)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixingLevel {
    pub k: u32,
    /// `||(1 - phi_tilde(2^-k Lambda)) B phi(2^-k Lambda)||`.
    pub off_shell: f64,
    /// `||phi_tilde(2^-k Lambda) B phi(2^-k Lambda)||`.
    pub on_shell: f64,
    pub separation: f64,
    /// Largest `|k - l|` with `b_hat(k - l)` nonzero (tail below 1e-15 of the peak ignored).
    pub bandwidth: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixingScan {
    pub levels: Vec<MixingLevel>,
    /// `-slope` of `log off_shell` against `log 2^k` over levels with a
    /// positive value; infinite when fewer than two are positive.
    pub decay_exponent: f64,
    pub envelope_growth: Option<f64>,
    /// `M(lambda) <= C lambda^{N - eta}` with `N` the measured decay.
    pub growth_condition: Option<bool>,
    /// `sup log(M(4 lambda)/M(lambda)) / log lambda` over the levels.
    pub doubling_exponent: Option<f64>,
    pub doubling_condition: Option<bool>,
}

fn masked_norm(b: &CMat, lambda: &[f64], rows: &dyn Fn(f64) -> f64, cols: &dyn Fn(f64) -> f64) -> Result<f64> {
    let r: Vec<f64> = lambda.iter().map(|l| rows(*l)).collect();
    let c: Vec<f64> = lambda.iter().map(|l| cols(*l)).collect();
    if r.iter().all(|x| *x == 0.0) || c.iter().all(|x| *x == 0.0) {
        return Ok(0.0);
    }
    let m = linalg::scale_rows_cols(b, &r, &c);
    if m.iter().all(|z| *z == C64::new(0.0, 0.0)) {
        return Ok(0.0);
    }
    linalg::spectral_norm(&m)
}

fn bandwidth(b: &CMat, modes: &[crate::geometry::Mode]) -> f64 {
    let peak = b.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut w: f64 = 0.0;
    for i in 0..b.nrows() {
        for j in 0..b.ncols() {
            if b[[i, j]].norm() > 1e-15 * peak {
                let d = [modes[i].0[0] - modes[j].0[0], modes[i].0[1] - modes[j].0[1]];
                w = w.max(((d[0] * d[0] + d[1] * d[1]) as f64).sqrt());
            }
        }
    }
    w
}

/// Norms of the dyadic off-shell and on-shell parts of `B` for each level.
/// Torus profiles of `x` alone run per `k_y` block.
pub fn frequency_mixing_scan(
    model: &ManifoldModel,
    mult: &MultiplicationOperator,
    m: f64,
    levels: &[u32],
    pair: &DyadicPair,
    envelope: Option<&Envelope>,
) -> Result<MixingScan> {
    pair.validate()?;
    for &k in levels {
        if 2usize.pow(k + 1) > model.cutoff {
            return Err(Error::Infeasible(format!("level {k} needs K >= {}, the model has K = {}", 2usize.pow(k + 1), model.cutoff)));
        }
    }
    let blocked = model.kind == ManifoldKind::Torus2 && mult.x_only;
    let parts: Vec<(CMat, Vec<f64>, Vec<crate::geometry::Mode>)> = if blocked {
        let bb = mult.block(model);
        let k = model.cutoff as i64;
        let side = (2 * k + 1) as usize;
        (0..=k)
            .map(|ky| {
                let start = ((ky + k) as usize) * side;
                let idx = start..start + side;
                let lam = idx.clone().map(|i| (model.eigenvalues[i].powi(2) + m).sqrt()).collect();
                let modes = idx.map(|i| model.modes[i]).collect();
                (bb.clone(), lam, modes)
            })
            .collect()
    } else {
        if model.n_modes() > 4000 {
            return Err(Error::Infeasible("dense mixing scan limited to 4000 modes".into()));
        }
        vec![(mult.full(model), model.shifted_eigenvalues(m), model.modes.clone())]
    };
    let bw = parts.iter().map(|(b, _, modes)| bandwidth(b, modes)).fold(0.0, f64::max);
    let mut out = Vec::new();
    for &k in levels {
        let sc = 2f64.powi(-(k as i32));
        let (mut off, mut on): (f64, f64) = (0.0, 0.0);
        for (b, lam, _) in &parts {
            off = off.max(masked_norm(b, lam, &|l| 1.0 - pair.phi_tilde(sc * l), &|l| pair.phi(sc * l))?);
            on = on.max(masked_norm(b, lam, &|l| pair.phi_tilde(sc * l), &|l| pair.phi(sc * l))?);
        }
        out.push(MixingLevel { k, off_shell: off, on_shell: on, separation: pair.separation(k), bandwidth: bw });
    }
    let pts: Vec<(f64, f64)> = out.iter().filter(|l| l.off_shell > 0.0).map(|l| ((l.k as f64) * 2f64.ln(), l.off_shell.ln())).collect();
    let decay_exponent = if pts.len() < 2 { f64::INFINITY } else { -fit_slope(&pts).unwrap_or(f64::NAN) };
    let (mut envelope_growth, mut growth_condition, mut doubling_exponent, mut doubling_condition) = (None, None, None, None);
    if let Some(env) = envelope {
        let g: Vec<(f64, f64)> = levels.iter().map(|&k| ((k as f64) * 2f64.ln(), env.eval(2f64.powi(k as i32)).ln())).collect();
        let growth = fit_slope(&g);
        envelope_growth = growth;
        growth_condition = growth.map(|s| s < decay_exponent);
        let d = levels
            .iter()
            .filter(|&&k| k >= 1)
            .map(|&k| {
                let l = 2f64.powi(k as i32);
                (env.eval(4.0 * l) / env.eval(l)).ln() / l.ln()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        if d.is_finite() {
            doubling_exponent = Some(d);
            doubling_condition = Some(d < 1.0);
        }
    }
    Ok(MixingScan { levels: out, decay_exponent, envelope_growth, growth_condition, doubling_exponent, doubling_condition })
}

// ------------------------------------------------ diagonalization errors

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DiagErrors {
    pub h: f64,
    pub t: f64,
    /// `||(e^{itP} - e^{itP_cut}) chi_0(h Lambda)||`.
    pub e1: f64,
    /// `||e^{itP_cut} - e^{itP_diag}||`.
    pub e2: f64,
}

/// Rows (both components) where the wide cutoff is nonzero.
fn window_rows(lambda: &[f64], h: f64) -> Vec<usize> {
    let n = lambda.len();
    let first: Vec<usize> = (0..n).filter(|&i| crate::operators::chi0_wide(h * lambda[i]) > 0.0).collect();
    first.iter().cloned().chain(first.iter().map(|i| i + n)).collect()
}

fn sub(a: &CMat, idx: &[usize]) -> CMat {
    CMat::from_shape_fn((idx.len(), idx.len()), |(i, j)| a[[idx[i], idx[j]]])
}

/// Both error functionals at time `t`. Outside the wide window `P_cut` and
/// `P_diag` vanish, so their propagators are computed on the window rows.
pub fn diagonalization_errors(suite: &DiagonalizationSuite, t: f64) -> Result<DiagErrors> {
    let h = suite.h;
    let (mut e1, mut e2): (f64, f64) = (0.0, 0.0);
    for (bi, ((bp, bc), bd)) in suite.p.blocks.iter().zip(&suite.p_cut.blocks).zip(&suite.p_diag.blocks).enumerate() {
        let rows = window_rows(&bp.lambda, h);
        if rows.is_empty() {
            continue;
        }
        let it = I * t;
        let ec = linalg::expm(&sub(&bc.matrix, &rows).mapv(|z| z * it))?;
        let ed = linalg::expm(&sub(&bd.matrix, &rows).mapv(|z| z * it))?;
        e2 = e2.max(linalg::spectral_norm(&(&ec - &ed))?);

        let chi = &suite.chi0[bi];
        let cols: Vec<usize> = (0..chi.len()).filter(|&j| chi[j] > 0.0).collect();
        if cols.is_empty() {
            continue;
        }
        let ep = linalg::expm(&bp.matrix.mapv(|z| z * it))?;
        let n = bp.dim();
        let pos: Vec<Option<usize>> = {
            let mut p = vec![None; n];
            for (r, &i) in rows.iter().enumerate() {
                p[i] = Some(r);
            }
            p
        };
        let mut d = CMat::zeros((n, cols.len()));
        for (cj, &j) in cols.iter().enumerate() {
            let rj = pos[j].expect("chi_0 support lies inside the wide window");
            for i in 0..n {
                let cut = match pos[i] {
                    Some(ri) => ec[[ri, rj]],
                    None => C64::new(0.0, 0.0),
                };
                d[[i, cj]] = (ep[[i, j]] - cut) * chi[j];
            }
        }
        e1 = e1.max(linalg::spectral_norm(&d)?);
    }
    Ok(DiagErrors { h, t, e1, e2 })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagScaling {
    pub points: Vec<DiagErrors>,
    /// Log-log slope of `e2` against `h`.
    pub e2_exponent: Option<f64>,
    pub e1_exponent: Option<f64>,
}

pub fn diagonalization_scaling(
    model: &ManifoldModel,
    b: &crate::damping::DampingProfile,
    m: f64,
    nu: f64,
    hs: &[f64],
    t: f64,
) -> Result<DiagScaling> {
    let mut points = Vec::new();
    for &h in hs {
        let suite = crate::operators::diagonalization_suite(model, b, m, h, nu)?;
        points.push(diagonalization_errors(&suite, t)?);
    }
    let slope = |f: &dyn Fn(&DiagErrors) -> f64| {
        let pts: Vec<(f64, f64)> = points.iter().filter(|p| f(p) > 0.0).map(|p| (p.h.ln(), f(p).ln())).collect();
        fit_slope(&pts)
    };
    let e2_exponent = slope(&|p| p.e2);
    let e1_exponent = slope(&|p| p.e1);
    Ok(DiagScaling { points, e2_exponent, e1_exponent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::damping::{multiplication_matrix, DampingProfile, ProfileFamily};
    use crate::operators::assemble;
    use proptest::prelude::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        for p in 0..16 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum();
            let want = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
            assert!((q - want).abs() < 1e-14, "degree {p}: {q} vs {want}");
        }
    }

    #[test]
    fn ramp_derivative_norm_is_one() {
        let n = psi_norms(&WeightFunction::ramp(), 1.0).unwrap();
        assert!((n.d_l2 - 1.0).abs() < 1e-14);
        assert!((n.d_l1 - 1.0).abs() < 1e-14);
        assert!(n.l1.is_infinite());
    }

    #[test]
    fn psi_min_quadrature_matches_exact_forms() {
        for l in [1.5, 2.0, 4.0, 32.0] {
            let n = psi_norms(&WeightFunction::psi_min(l).unwrap(), 1.0).unwrap();
            let e = psi_min_exact(l).unwrap();
            assert!((n.d_l2.powi(2) - e.d_l2_sq).abs() < 1e-12 * e.d_l2_sq);
            assert!((n.l1 - e.l1).abs() < 1e-12 * e.l1);
            assert!((n.d_l1 - e.d_l1).abs() < 1e-12);
            assert!((n.l2_theta - e.l2_unit).abs() < 1e-13);
        }
    }

    #[test]
    fn published_forms_at_two() {
        let p = psi_min_published(2.0).unwrap();
        assert!((p.d_l2_sq - 6.0).abs() < 1e-15);
        assert!((p.l1 - 2f64.sqrt()).abs() < 1e-15);
        assert!((p.d_l1 - 3.0 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn delta_parameter_solves_its_equation() {
        for d in [0.1, 0.5, 0.9] {
            let w = WeightFunction::psi_min_for_delta(d).unwrap();
            let WeightKind::PsiMin { l } = w.kind else { unreachable!() };
            assert!((2.0 * l / (l - 1.0).powi(2) - d).abs() < 1e-12);
        }
    }

    #[test]
    fn bump_norms_converge() {
        // independent oracle: trapezoid on a very fine grid
        let w = WeightFunction::bump(3.0).unwrap();
        let n = psi_norms(&w, 1.0).unwrap();
        let m = 200_000;
        let h = 3.0 / m as f64;
        let tr: f64 = (1..m).map(|i| w.eval(i as f64 * h).powi(2)).sum::<f64>() * h;
        assert!((n.l2.powi(2) - tr).abs() < 1e-9);
    }

    #[test]
    fn table_weight_matches_psi_min() {
        let l = 3.0;
        let r = 2f64.sqrt();
        let t = WeightFunction::table(vec![0.0, 1.0, l], vec![0.0, r, 0.0]).unwrap();
        let a = psi_norms(&t, 0.7).unwrap();
        let b = psi_norms(&WeightFunction::psi_min(l).unwrap(), 0.7).unwrap();
        for (x, y) in [(a.l2, b.l2), (a.d_l2, b.d_l2), (a.l1, b.l1), (a.d_l1, b.d_l1), (a.l2_theta, b.l2_theta)] {
            assert!((x - y).abs() < 1e-13);
        }
    }

    fn circle_p(k: usize, b: &DampingProfile) -> (ManifoldModel, OperatorBundle) {
        let model = ManifoldModel::circle(k).unwrap();
        let p = assemble(&model, b, 1.0, Formulation::PM).unwrap();
        (model, p)
    }

    fn random_state(model: &ManifoldModel, bundle: &OperatorBundle, seed: u64) -> StateVector {
        let mut r = linalg::rng(seed);
        let u = linalg::random_cvec(&mut r, model.n_modes()).to_vec();
        let v = linalg::random_cvec(&mut r, model.n_modes()).to_vec();
        bundle.state_from_components(&u, &v).unwrap()
    }

    #[test]
    fn undamped_average_needs_no_remainder() {
        let b = DampingProfile::zero(ManifoldKind::Circle);
        let (model, p) = circle_p(24, &b);
        let u = random_state(&model, &p, 1);
        // [8.075, 8.925] holds no sqrt(j^2 + 1), so the window filter kills u
        let params = Theorem31Params {
            h: 1.0 / 8.5,
            eps: 0.05,
            t_h: 4.0,
            weight: WeightFunction::psi_min(2.0).unwrap(),
            variant: Theorem31Variant::Averaged,
            rule: ComponentRule::FirstOnly,
            density: 8.0,
            c0: None,
        };
        let r = theorem31_check(&model, &p, &u, &params).unwrap();
        assert!(r.report.passed());
        assert_eq!(r.fitted_c0, 0.0);
        assert_eq!(r.report.lhs, 0.0);
        assert!(r.g.value.is_finite());
    }

    #[test]
    fn undamped_average_is_conserved_mass() {
        let b = DampingProfile::zero(ManifoldKind::Circle);
        let model = ManifoldModel::circle(24).unwrap();
        let p = assemble(&model, &b, 1.0, Formulation::PM).unwrap();
        let u = random_state(&model, &p, 5);
        let prop = Propagator::new(&p).unwrap();
        let w = WeightFunction::psi_min(3.0).unwrap();
        let (lhs, err) = weighted_time_average(&p, &prop, &u, &w, 2.5, None, &|v| norm_sq(&p, v)).unwrap();
        let want = psi_norms(&w, 1.0).unwrap().l2.powi(2) * norm_sq(&p, &u);
        assert!((lhs - want).abs() < 1e-10 * want && err < 1e-8 * want, "{lhs} vs {want}");
    }

    #[test]
    fn pointwise_rhs_is_average_rhs_over_theta_mass() {
        let b = DampingProfile::new(ManifoldKind::Circle, ProfileFamily::Bump { center: [1.0, 0.0], radius: 1.0, amplitude: 1.0 }).unwrap();
        let (model, p) = circle_p(24, &b);
        let u = random_state(&model, &p, 2);
        let base = Theorem31Params {
            h: 1.0 / 8.0,
            eps: 0.2,
            t_h: 3.0,
            weight: WeightFunction::psi_min(2.5).unwrap(),
            variant: Theorem31Variant::Averaged,
            rule: ComponentRule::FirstOnly,
            density: 8.0,
            c0: Some(0.7),
        };
        let avg = theorem31_check(&model, &p, &u, &base).unwrap();
        let theta = 0.6;
        let pw =
            theorem31_check(&model, &p, &u, &Theorem31Params { variant: Theorem31Variant::Pointwise { theta }, ..base.clone() }).unwrap();
        let ratio = avg.report.rhs / pw.norms.l2_theta.powi(2);
        assert!((pw.report.rhs - ratio).abs() < 1e-12 * ratio);
    }

    #[test]
    fn pointwise_opt_has_published_shape() {
        let b = DampingProfile::constant(ManifoldKind::Circle, 1.0).unwrap();
        let (model, p) = circle_p(40, &b);
        let u = random_state(&model, &p, 3);
        let prm = Theorem31Params {
            h: 1.0 / 16.0,
            eps: 0.25,
            t_h: 4.0,
            weight: WeightFunction::psi_min_for_delta(0.5).unwrap(),
            variant: Theorem31Variant::PointwiseOpt { delta: 0.5 },
            rule: ComponentRule::FirstOnly,
            density: 4.0,
            c0: Some(2.0),
        };
        let r = theorem31_check(&model, &p, &u, &prm).unwrap();
        let g = r.g.value;
        let want = (2.5 * g * g / 16.0 + 2.0 * (1.0 + p.b_norm.powi(2)) / 0.25 * (1.0 / 16.0) * 4.0 / 0.0625) * r.filtered_norm_sq;
        assert!((r.report.rhs - want).abs() < 1e-12 * want);
    }

    #[test]
    fn window_must_be_resolvent_free() {
        let b = DampingProfile::zero(ManifoldKind::Circle);
        let (model, p) = circle_p(24, &b);
        let u = random_state(&model, &p, 4);
        let prm = Theorem31Params {
            h: 1.0 / 8.0,
            eps: 0.1,
            t_h: 2.0,
            weight: WeightFunction::psi_min(2.0).unwrap(),
            variant: Theorem31Variant::Averaged,
            rule: ComponentRule::FirstOnly,
            density: 4.0,
            c0: None,
        };
        // sqrt(64 + 1) lies in the window and is an undamped eigenvalue
        assert!(theorem31_check(&model, &p, &u, &prm).is_err());
    }

    #[test]
    fn modified_resolvent_undamped_closed_form() {
        let b = DampingProfile::zero(ManifoldKind::Circle);
        let (_, p) = circle_p(6, &b);
        let env = Envelope::constant(2.0).unwrap();
        let taus = vec![0.3, 1.7, 2.9];
        let r = modified_resolvent_check(&p, &env, 0.1, &[0.0, 0.5], &taus).unwrap();
        let lam: Vec<f64> = p.blocks[0].lambda.clone();
        for (ai, alpha) in [0.0, 0.5].iter().enumerate() {
            for (ti, tau) in taus.iter().enumerate() {
                let want = lam.iter().flat_map(|l| [*l, -*l]).map(|e| 1.0 / (2.0 * C64::new(e - tau, *alpha).norm())).fold(0.0, f64::max);
                assert!((r.values[ai][ti] - want).abs() < 1e-12 * want);
            }
        }
    }

    #[test]
    fn modified_resolvent_far_from_spectrum_is_contractive() {
        let b = DampingProfile::new(ManifoldKind::Circle, ProfileFamily::Bump { center: [2.0, 0.0], radius: 1.0, amplitude: 2.0 }).unwrap();
        let (_, p) = circle_p(8, &b);
        let env = Envelope::constant(1.5).unwrap();
        let r = modified_resolvent_check(&p, &env, 0.2, &[1.0], &[-40.0, 0.0, 0.5, 40.0]).unwrap();
        assert!(r.values[0].iter().all(|v| *v <= 1.0 / 1.5 + 1e-12));
    }

    #[test]
    fn envelope_from_scan_is_monotone_and_dominates() {
        let b = DampingProfile::constant(ManifoldKind::Circle, 1.0).unwrap();
        let (_, p) = circle_p(6, &b);
        let grid: Vec<f64> = (0..81).map(|j| -8.0 + 0.2 * j as f64).collect();
        let scan = spectra::scan_imaginary_axis(&p, &grid, false).unwrap();
        let env = Envelope::from_scan(&scan).unwrap();
        assert!(env.dominates(&scan));
        assert_eq!(env.eval(-3.0), env.eval(3.0));
    }

    #[test]
    fn filtered_average_vanishes_for_zero_data() {
        let b = DampingProfile::constant(ManifoldKind::Circle, 1.0).unwrap();
        let model = ManifoldModel::circle(6).unwrap();
        let a = assemble(&model, &b, 1.0, Formulation::AM).unwrap();
        let env = Envelope::constant(2.0).unwrap();
        let r =
            filtered_average_check(&model, &a, &env, 0.1, &WeightFunction::psi_min(2.0).unwrap(), 4.0, &a.zero_state(), 1.0, None).unwrap();
        assert_eq!(r.report.lhs, 0.0);
        assert_eq!(r.report.rhs, 0.0);
        assert!(r.report.passed());
    }

    #[test]
    fn dyadic_pair_shapes() {
        let p = DyadicPair::default();
        p.validate().unwrap();
        for j in 0..400 {
            let s = 0.4 + 1.8 * j as f64 / 400.0;
            if p.phi(s) > 0.0 {
                assert_eq!(p.phi_tilde(s), 1.0, "s = {s}");
            }
            if s <= 0.5 || s >= 2.0 {
                assert_eq!(p.phi_tilde(s), 0.0);
            }
        }
        // partition of unity: chi + sum phi(2^-j s) = 1
        for s in [0.3, 1.1, 5.5, 37.0] {
            let tot: f64 = p.chi(s) + (0..12).map(|j| p.phi(s / 2f64.powi(j))).sum::<f64>();
            assert!((tot - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_damping_does_not_mix_shells() {
        let model = ManifoldModel::circle(64).unwrap();
        let b = DampingProfile::constant(ManifoldKind::Circle, 1.3).unwrap();
        let mult = multiplication_matrix(&model, &b).unwrap();
        let s = frequency_mixing_scan(&model, &mult, 1.0, &[1, 2, 3, 4, 5], &DyadicPair::default(), None).unwrap();
        assert!(s.levels.iter().all(|l| l.off_shell == 0.0));
        assert!(s.levels.iter().all(|l| l.on_shell > 0.0));
    }

    #[test]
    fn band_limited_damping_vanishes_once_shells_separate() {
        let model = ManifoldModel::circle(128).unwrap();
        let b = DampingProfile::new(ManifoldKind::Circle, ProfileFamily::Cosine { offset: 1.0, amplitude: 1.0, wave: [1, 0] }).unwrap();
        let mult = multiplication_matrix(&model, &b).unwrap();
        let s = frequency_mixing_scan(&model, &mult, 1.0, &[2, 3, 4, 5, 6], &DyadicPair::default(), None).unwrap();
        for l in &s.levels {
            if l.separation > l.bandwidth {
                assert_eq!(l.off_shell, 0.0, "level {}", l.k);
            }
        }
        assert!(s.levels.iter().any(|l| l.separation > l.bandwidth));
    }

    #[test]
    fn undamped_diagonalization_is_exact() {
        let model = ManifoldModel::circle(32).unwrap();
        let b = DampingProfile::zero(ManifoldKind::Circle);
        let suite = crate::operators::diagonalization_suite(&model, &b, 1.0, 1.0 / 8.0, 0.0).unwrap();
        let e = diagonalization_errors(&suite, 1.0).unwrap();
        assert!(e.e1 < 1e-12 && e.e2 < 1e-12, "{e:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn widening_phi_tilde_never_increases_off_shell(w in 0.0f64..0.01, k in 2u32..5) {
            let model = ManifoldModel::circle(32).unwrap();
            let b = DampingProfile::new(ManifoldKind::Circle, ProfileFamily::Bump { center: [1.0, 0.0], radius: 1.2, amplitude: 1.0 }).unwrap();
            let mult = multiplication_matrix(&model, &b).unwrap();
            let narrow = DyadicPair::default();
            let wide = DyadicPair { flat_lo: narrow.flat_lo - w, flat_hi: narrow.flat_hi + w, ..narrow };
            let a = frequency_mixing_scan(&model, &mult, 1.0, &[k], &narrow, None).unwrap();
            let c = frequency_mixing_scan(&model, &mult, 1.0, &[k], &wide, None).unwrap();
            prop_assert!(c.levels[0].off_shell <= a.levels[0].off_shell * (1.0 + 1e-12) + 1e-15);
        }

        #[test]
        fn psi_min_energy_decreases_toward_two(l in 1.1f64..40.0, dl in 0.1f64..10.0) {
            let a = psi_min_exact(l).unwrap().d_l2_sq;
            let b = psi_min_exact(l + dl).unwrap().d_l2_sq;
            prop_assert!(b < a && b > 2.0);
        }
    }
}
