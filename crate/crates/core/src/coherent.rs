//! Gaussian coherent states on the mode lattice, classical damping integrals
//! along geodesics, and the long-time energy experiment that turns a
//! non-decaying wave packet into a lower bound for `G(h)`.

use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::damping::{mollify, multiplication_matrix, DampingProfile, MollifierSpec};
use crate::error::{Error, Result};
use crate::evolution::{ComponentRule, SpectralFilter};
use crate::geometry::{geodesic_flow, periodic_diff, ManifoldKind, ManifoldModel, PhasePoint};
use crate::linalg::{self, CMat, CVec, C64};
use crate::operators::{self, assemble, Block, Formulation};
use crate::pool::par_map;
use crate::spectra::{self, block_eigen, BlockEigen, GReport};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoherentState {
    pub center: PhasePoint,
    pub h: f64,
    /// Normalized coefficients over the model's modes.
    pub coefficients: Vec<C64>,
    /// `l2` norm of the projected Gaussian before renormalization.
    pub norm_before: f64,
    pub normalization_residual: f64,
}

fn covector_norm(model: &ManifoldModel, xi: [f64; 2]) -> f64 {
    match model.kind {
        ManifoldKind::Circle => xi[0].abs(),
        ManifoldKind::Torus2 => xi[0].hypot(xi[1]),
    }
}

fn check_center(model: &ManifoldModel, center: &PhasePoint) -> Result<()> {
    let n = covector_norm(model, center.xi);
    if (n - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!("coherent state center needs |xi| = 1, got {n}")));
    }
    Ok(())
}

/// Coefficients `c_k`, `|k| <= cutoff`, of the one-dimensional factor
/// `(pi h)^{-1/4} exp(-w^2 / 2h + i w xi / h)`, `w = x - x0` wrapped to
/// `(-pi, pi]`, sampled on `n` points and transformed.
fn gaussian_factor(x0: f64, xi: f64, h: f64, n: usize, cutoff: usize) -> Vec<C64> {
    let step = 2.0 * PI / n as f64;
    let amp = (PI * h).powf(-0.25);
    let mut data: Vec<C64> = (0..n)
        .map(|j| {
            let w = periodic_diff(j as f64 * step, x0);
            C64::from_polar(amp * (-w * w / (2.0 * h)).exp(), w * xi / h)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut data);
    let scale = step / (2.0 * PI).sqrt();
    let k = cutoff as i64;
    (-k..=k).map(|kk| data[kk.rem_euclid(n as i64) as usize] * scale).collect()
}

/// Periodized Gaussian wave packet centred at `center`, projected to the
/// retained modes and renormalized. Needs `1/h <= K/2`.
pub fn build_coherent(model: &ManifoldModel, center: PhasePoint, h: f64) -> Result<CoherentState> {
    check_center(model, &center)?;
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::Invalid(format!("coherent state scale must lie in (0,1), got {h}")));
    }
    if 1.0 / h > model.cutoff as f64 / 2.0 {
        return Err(Error::Infeasible(format!(
            "coherent state at h = {h} needs K >= {}, model has K = {}",
            (2.0 / h).ceil(),
            model.cutoff
        )));
    }
    let n = model.n_quad;
    let fx = gaussian_factor(center.x[0], center.xi[0], h, n, model.cutoff);
    let k = model.cutoff as i64;
    let mut coefficients: Vec<C64> = match model.kind {
        ManifoldKind::Circle => model.modes.iter().map(|m| fx[(m.0[0] + k) as usize]).collect(),
        ManifoldKind::Torus2 => {
            let fy = gaussian_factor(center.x[1], center.xi[1], h, n, model.cutoff);
            model.modes.iter().map(|m| fx[(m.0[0] + k) as usize] * fy[(m.0[1] + k) as usize]).collect()
        }
    };
    let norm_before = coefficients.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if !(norm_before > 0.0) {
        return Err(Error::Singular("projected coherent state vanishes".into()));
    }
    coefficients.iter_mut().for_each(|z| *z /= norm_before);
    Ok(CoherentState { center, h, coefficients, norm_before, normalization_residual: (norm_before - 1.0).abs() })
}

impl CoherentState {
    /// `<a(h |D|) v, v>` for a diagonal observable.
    pub fn expectation(&self, model: &ManifoldModel, a: &dyn Fn(f64) -> f64) -> f64 {
        self.coefficients.iter().zip(&model.eigenvalues).map(|(z, l)| a(self.h * l) * z.norm_sqr()).sum()
    }

    /// Mass-weighted mean lattice point.
    pub fn mean_mode(&self, model: &ManifoldModel) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (z, m) in self.coefficients.iter().zip(&model.modes) {
            let w = z.norm_sqr();
            out[0] += w * m.0[0] as f64;
            out[1] += w * m.0[1] as f64;
        }
        out
    }
}

/// `int_0^t b(pi(phi^{-s}(center))) ds` by composite Simpson with step at most 0.01.
pub fn classical_damping_integral(model: &ManifoldModel, b: &DampingProfile, center: PhasePoint, t: f64) -> Result<f64> {
    check_center(model, &center)?;
    if !(t >= 0.0) {
        return Err(Error::Invalid("integration time must be nonnegative".into()));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let mut n = (t / 0.01).ceil() as usize;
    n += n % 2;
    let ds = t / n as f64;
    let mut acc = 0.0;
    for j in 0..=n {
        let w = if j == 0 || j == n {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let p = geodesic_flow(model, center, -(j as f64) * ds)?;
        acc += w * b.eval(p.x);
    }
    Ok(acc * ds / 3.0)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum WindowLaw {
    /// `[1 - eps, 1 + eps]` for every `h`.
    Fixed { eps: f64 },
    /// `[1 - h^rho, 1 + h^rho]`.
    Power { rho: f64 },
}

impl WindowLaw {
    pub fn eps(&self, h: f64) -> f64 {
        match self {
            WindowLaw::Fixed { eps } => *eps,
            WindowLaw::Power { rho } => h.powf(*rho),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            WindowLaw::Fixed { eps } if *eps > 0.0 && *eps < 1.0 => Ok(()),
            WindowLaw::Fixed { eps } => Err(Error::Invalid(format!("window half-width {eps} outside (0,1)"))),
            // flat geometry: the expansion rate vanishes, so the constraint is rho < 1/2
            WindowLaw::Power { rho } if *rho > 0.0 && *rho <= 0.4 => Ok(()),
            WindowLaw::Power { rho } => Err(Error::Invalid(format!("window exponent {rho} outside (0, 0.4]"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EhrenfestParams {
    pub m: f64,
    pub center: PhasePoint,
    pub mu: f64,
    pub hs: Vec<f64>,
    pub window: WindowLaw,
    /// Mollify `b` at width `h^nu`; `None` evolves the raw profile.
    pub nu: Option<f64>,
    /// Grid points per unit of `tau / h` in the `G(h)` scan.
    pub density: f64,
    pub delta: f64,
    /// Remainder constant used for the slack in the implied bound.
    pub c0: f64,
    /// Blocks carrying less than this fraction of the data energy are not
    /// propagated.
    pub mass_floor: f64,
    /// Repeat the evolution in the `A_m` picture.
    pub check_a_picture: bool,
    pub workers: usize,
}

impl EhrenfestParams {
    pub fn new(center: PhasePoint, hs: Vec<f64>) -> Self {
        EhrenfestParams {
            m: 1.0,
            center,
            mu: 1.0,
            hs,
            window: WindowLaw::Fixed { eps: 0.25 },
            nu: None,
            density: 8.0,
            delta: 0.5,
            c0: 0.0,
            mass_floor: 1e-20,
            check_a_picture: false,
            workers: 1,
        }
    }

    fn validate(&self, model: &ManifoldModel) -> Result<()> {
        check_center(model, &self.center)?;
        self.window.validate()?;
        if !(self.m > 0.0) {
            return Err(Error::Invalid("the energy experiment needs m > 0".into()));
        }
        if !(self.mu > 0.0) || !(self.delta > 0.0) || !(self.density > 0.0) || !(self.c0 >= 0.0) {
            return Err(Error::Invalid("mu, delta, density must be positive and c0 nonnegative".into()));
        }
        if !(self.mass_floor >= 0.0 && self.mass_floor < 1e-6) {
            return Err(Error::Invalid("mass floor must lie in [0, 1e-6)".into()));
        }
        if let Some(nu) = self.nu {
            if !(nu > 0.0) {
                return Err(Error::Invalid("mollification exponent must be positive".into()));
            }
        }
        if self.hs.is_empty() || self.hs.iter().any(|h| !(*h > 0.0 && *h < 1.0)) {
            return Err(Error::Invalid("h grid must be nonempty with entries in (0,1)".into()));
        }
        let h_min = self.hs.iter().cloned().fold(1.0, f64::min);
        let needed = (2.0 / h_min).ceil() as usize;
        if model.cutoff < needed {
            return Err(Error::Infeasible(format!("smallest h = {h_min} needs K >= {needed}, model has K = {}", model.cutoff)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationCheck {
    /// `||b_h - b||_inf` on the mollifier grid.
    pub sup_error: f64,
    /// `|| e^{iTP(b_h)} U - e^{iTP(b)} U ||` over the propagated blocks.
    pub gap: f64,
    /// `T ||B_h - B|| ||U||`.
    pub bound: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EhrenfestRow {
    pub h: f64,
    pub eps: f64,
    pub t_h: f64,
    /// `E(u(T_h)) / E(u(0))`.
    pub r: f64,
    pub r_a_picture: Option<f64>,
    pub damping_integral: f64,
    /// `exp(-2 int b)`.
    pub classical: f64,
    /// `exp(-int b)`, the energy transport factor of a single ray.
    pub classical_energy: f64,
    pub g: GReport,
    pub slack: f64,
    pub g_lower_implied: f64,
    pub b_norm: f64,
    pub coherent_residual: f64,
    /// `||Pi v||^2` of the windowed data.
    pub window_mass: f64,
    pub blocks_propagated: usize,
    /// Energy fraction of the windowed data left out of the propagation.
    pub dropped_mass: f64,
    pub perturbation: Option<PerturbationCheck>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EhrenfestReport {
    pub mu: f64,
    pub delta: f64,
    pub c0: f64,
    pub center: PhasePoint,
    pub rows: Vec<EhrenfestRow>,
}

impl EhrenfestReport {
    pub fn csv_header() -> &'static [&'static str] {
        &["h", "T_h", "r", "classical", "G_measured", "G_lower_implied"]
    }

    pub fn csv_rows(&self) -> Vec<[f64; 6]> {
        self.rows.iter().map(|r| [r.h, r.t_h, r.r, r.classical, r.g.value, r.g_lower_implied]).collect()
    }
}

/// `e^{tG} x` for a block generator with known eigendecomposition.
fn propagate(e: &BlockEigen, x: &CVec, t: f64) -> Result<CVec> {
    match &e.inverse {
        Some(w) => {
            let y = w.dot(x);
            let y = CVec::from_shape_fn(y.len(), |j| y[j] * (e.values[j] * t).exp());
            Ok(e.vectors.dot(&y))
        }
        None => Ok(linalg::expm(&e.generator.mapv(|z| z * t))?.dot(x)),
    }
}

fn block_data(block: &Block, data: &[C64]) -> CVec {
    let rows = block.row_map();
    CVec::from_shape_fn(rows.len(), |r| match rows[r] {
        (p, 0) => data[block.model_index[p]],
        _ => C64::new(0.0, 0.0),
    })
}

fn mass(x: &CVec) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum()
}

/// Sigma^{-1}: P picture to the plain coordinates of the A_m picture.
fn to_a_plain(x: &CVec) -> CVec {
    let n = x.len() / 2;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CVec::from_shape_fn(x.len(), |r| if r < n { (x[r] - x[n + r]) * s } else { (x[r - n] + x[r]) * C64::new(0.0, s) })
}

struct Accum {
    before: f64,
    after: f64,
    a_before: f64,
    a_after: f64,
    gap_sq: f64,
    blocks: usize,
}

struct Setup<'a> {
    t: f64,
    data: &'a [C64],
    check_a: bool,
    /// Raw-profile blocks for the perturbation check, by block index.
    raw: Option<&'a dyn Fn(usize) -> Result<Block>>,
    a_block: &'a dyn Fn(usize) -> Result<Block>,
}

impl Setup<'_> {
    fn run_block(&self, block: &Block, e: &BlockEigen, idx: usize, acc: &mut Accum) -> Result<()> {
        let x0 = block_data(block, self.data);
        let xt = propagate(e, &x0, self.t)?;
        acc.before += mass(&x0);
        acc.after += mass(&xt);
        acc.blocks += 1;
        if self.check_a {
            let ab = (self.a_block)(idx)?;
            let ea = block_eigen(&ab, false)?;
            let y0 = to_a_plain(&x0);
            let yt = propagate(&ea, &y0, self.t)?;
            acc.a_before += mass(&y0);
            acc.a_after += mass(&yt);
        }
        if let Some(raw) = self.raw {
            let rb = raw(idx)?;
            let er = block_eigen(&rb, true)?;
            let zt = propagate(&er, &x0, self.t)?;
            acc.gap_sq += mass(&(&xt - &zt));
        }
        Ok(())
    }
}

/// Energy ratio of the windowed coherent state after time `T_h = mu log(1/h)`
/// in the `P_m` picture, the classical prediction along the backward flow,
/// the measured `G(h)` and the lower bound `T_h sqrt((r - slack) / (2 + delta))`
/// that the averaged inequality forces on it.
///
/// Tori with profiles independent of `y` are processed one `k_y` block at a
/// time; the blocks evaluated by the `G(h)` scan are reused for propagation.
pub fn ehrenfest_experiment(model: &ManifoldModel, b: &DampingProfile, params: &EhrenfestParams) -> Result<EhrenfestReport> {
    params.validate(model)?;
    let rows: Vec<Result<EhrenfestRow>> = par_map(&params.hs, params.workers, |h| ehrenfest_row(model, b, params, *h));
    let mut rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.h.total_cmp(&a.h));
    Ok(EhrenfestReport { mu: params.mu, delta: params.delta, c0: params.c0, center: params.center, rows })
}

fn ehrenfest_row(model: &ManifoldModel, b: &DampingProfile, params: &EhrenfestParams, h: f64) -> Result<EhrenfestRow> {
    let eps = params.window.eps(h);
    let t_h = params.mu * (1.0 / h).ln();
    let (profile, sup_error) = match params.nu {
        Some(nu) => {
            let out = mollify(b, MollifierSpec { eps: h.powf(nu) })?;
            (out.profile, Some(out.report.sup_error))
        }
        None => (b.clone(), None),
    };
    let state = build_coherent(model, params.center, h)?;
    let filter = SpectralFilter::window(model, params.m, h, eps, ComponentRule::FirstOnly);
    let data: Vec<C64> = state.coefficients.iter().zip(&filter.values).map(|(z, w)| z * *w).collect();
    let window_mass: f64 = data.iter().map(|z| z.norm_sqr()).sum();
    if !(window_mass > 0.0) {
        return Err(Error::Infeasible(format!("the window at h = {h} misses the coherent state")));
    }
    let mult = multiplication_matrix(model, &profile)?;
    let streaming = model.kind == ManifoldKind::Torus2 && mult.x_only;

    let mut acc = Accum { before: 0.0, after: 0.0, a_before: 0.0, a_after: 0.0, gap_sq: 0.0, blocks: 0 };
    let (g, b_norm, db_norm) = if streaming {
        let bb = mult.block(model);
        let b_norm = linalg::spectral_norm(&bb)?;
        let raw_bb = match sup_error {
            Some(_) => Some(multiplication_matrix(model, b)?.block(model)),
            None => None,
        };
        let db_norm = match &raw_bb {
            Some(r) => linalg::spectral_norm(&(&bb - r))?,
            None => 0.0,
        };
        let k = model.cutoff as i64;
        let side = (2 * k + 1) as usize;
        // block masses of the data, indexed by k_y + K
        let block_mass: Vec<f64> = (0..side).map(|j| data[j * side..(j + 1) * side].iter().map(|z| z.norm_sqr()).sum()).collect();
        let needed: Vec<bool> = block_mass.iter().map(|w| *w > params.mass_floor * window_mass).collect();
        let ky_of = |idx: usize| idx as i64 - k;
        let a_build =
            |idx: usize| -> Result<Block> { Ok(operators::x_only_block(model, &bb, params.m, Formulation::AM, None, ky_of(idx))) };
        let raw_build = |idx: usize| -> Result<Block> {
            let r = raw_bb.as_ref().expect("raw block only requested with mollification");
            Ok(operators::x_only_block(model, r, params.m, Formulation::PM, None, ky_of(idx)))
        };
        let setup = Setup {
            t: t_h,
            data: &data,
            check_a: params.check_a_picture,
            raw: raw_bb.as_ref().map(|_| &raw_build as &dyn Fn(usize) -> Result<Block>),
            a_block: &a_build,
        };
        let mut done = vec![false; side];
        let g = spectra::g_of_h_streaming_visit(model, &mult, params.m, Formulation::PM, h, eps, params.density, &mut |blk, e| {
            let idx = (blk.ky + k) as usize;
            if needed[idx] && !done[idx] {
                setup.run_block(blk, e, idx, &mut acc)?;
                done[idx] = true;
            }
            Ok(())
        })?;
        for idx in 0..side {
            if needed[idx] && !done[idx] {
                let blk = operators::x_only_block(model, &bb, params.m, Formulation::PM, None, ky_of(idx));
                let e = block_eigen(&blk, true)?;
                setup.run_block(&blk, &e, idx, &mut acc)?;
            }
        }
        (g, b_norm, db_norm)
    } else {
        let pm = assemble(model, &profile, params.m, Formulation::PM)?;
        let am = if params.check_a_picture { Some(assemble(model, &profile, params.m, Formulation::AM)?) } else { None };
        let raw = match sup_error {
            Some(_) => Some(assemble(model, b, params.m, Formulation::PM)?),
            None => None,
        };
        let db_norm = if raw.is_some() {
            let d: CMat = mult.full(model) - multiplication_matrix(model, b)?.full(model);
            linalg::spectral_norm(&d)?
        } else {
            0.0
        };
        let g = spectra::g_of_h(&pm, h, eps, params.density)?;
        let a_build = |idx: usize| -> Result<Block> { Ok(am.as_ref().expect("A bundle built").blocks[idx].clone()) };
        let raw_build = |idx: usize| -> Result<Block> { Ok(raw.as_ref().expect("raw bundle built").blocks[idx].clone()) };
        let setup = Setup {
            t: t_h,
            data: &data,
            check_a: params.check_a_picture,
            raw: raw.as_ref().map(|_| &raw_build as &dyn Fn(usize) -> Result<Block>),
            a_block: &a_build,
        };
        for (idx, blk) in pm.blocks.iter().enumerate() {
            let e = block_eigen(blk, true)?;
            setup.run_block(blk, &e, idx, &mut acc)?;
        }
        (g, pm.b_norm, db_norm)
    };

    let dropped_mass = ((window_mass - acc.before) / window_mass).max(0.0);
    let r = acc.after / acc.before;
    let r_a_picture = params.check_a_picture.then(|| acc.a_after / acc.a_before);
    let damping_integral = classical_damping_integral(model, &profile, params.center, t_h)?;
    let slack = params.c0 * (1.0 + b_norm * b_norm) / (params.delta * params.delta) * h * t_h / (eps * eps);
    let g_lower_implied = t_h * ((r - slack).max(0.0) / (2.0 + params.delta)).sqrt();
    let perturbation = sup_error.map(|sup_error| {
        let gap = acc.gap_sq.sqrt();
        let bound = t_h * db_norm * acc.before.sqrt();
        PerturbationCheck { sup_error, gap, bound, holds: gap <= bound * (1.0 + 1e-9) + 1e-13 }
    });
    Ok(EhrenfestRow {
        h,
        eps,
        t_h,
        r,
        r_a_picture,
        damping_integral,
        classical: (-2.0 * damping_integral).exp(),
        classical_energy: (-damping_integral).exp(),
        g,
        slack,
        g_lower_implied,
        b_norm,
        coherent_residual: state.normalization_residual,
        window_mass,
        blocks_propagated: acc.blocks,
        dropped_mass,
        perturbation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::damping::ProfileFamily;
    use crate::evolution::window_profile;

    fn strip() -> DampingProfile {
        DampingProfile::new(ManifoldKind::Torus2, ProfileFamily::Strip { lo: PI / 2.0, hi: 1.5 * PI, amplitude: 1.0 }).unwrap()
    }

    #[test]
    fn projected_gaussian_matches_continuous_transform() {
        // |c_k|^2 = sqrt(h/pi) exp(-h (k - xi/h)^2) up to image terms below 1e-20
        let model = ManifoldModel::circle(64).unwrap();
        let h = 1.0 / 8.0;
        let s = build_coherent(&model, PhasePoint::circle(0.7, 1.0), h).unwrap();
        for (z, m) in s.coefficients.iter().zip(&model.modes) {
            let k = m.0[0] as f64;
            let exact = (h / PI).sqrt() * (-h * (k - 1.0 / h).powi(2)).exp();
            assert!(((z * s.norm_before).norm_sqr() - exact).abs() < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn normalization_deviation_is_the_tail_mass() {
        let model = ManifoldModel::torus(64).unwrap();
        let h = 1.0 / 8.0;
        let s = build_coherent(&model, PhasePoint::new([1.0, 2.0], [0.0, 1.0]), h).unwrap();
        let line = |k: i64, c: f64| (h / PI).sqrt() * (-h * (k as f64 - c).powi(2)).exp();
        let kept = |c: f64| (-64..=64).map(|k| line(k, c)).sum::<f64>();
        let predicted = (kept(0.0) * kept(1.0 / h)).sqrt();
        assert!((s.norm_before - predicted).abs() < 1e-12);
        assert!(s.normalization_residual <= 1e-6);
        let total: f64 = s.coefficients.iter().map(|z| z.norm_sqr()).sum();
        assert!((total - 1.0).abs() < 1e-13);
    }

    #[test]
    fn mass_sits_at_the_scaled_covector() {
        let model = ManifoldModel::torus(64).unwrap();
        for h in [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0] {
            let s = build_coherent(&model, PhasePoint::new([0.0, 0.0], [0.0, 1.0]), h).unwrap();
            let c = s.mean_mode(&model);
            assert!(c[0].abs() < 1e-9 && (c[1] - 1.0 / h).abs() < 1e-6, "{c:?}");
        }
    }

    #[test]
    fn window_expectation_approaches_one() {
        let model = ManifoldModel::torus(64).unwrap();
        let mut defects = Vec::new();
        for h in [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0] {
            let s = build_coherent(&model, PhasePoint::new([0.3, 0.0], [0.6, 0.8]), h).unwrap();
            let v = s.expectation(&model, &|x| window_profile((x - 1.0) / 0.25));
            defects.push(1.0 - v);
            assert!(1.0 - v <= 1.5 * h.sqrt(), "h = {h}: {v}");
        }
        assert!(defects[0] > defects[1] && defects[1] > defects[2]);
    }

    #[test]
    fn too_small_h_is_refused_with_hint() {
        let model = ManifoldModel::torus(16).unwrap();
        match build_coherent(&model, PhasePoint::new([0.0, 0.0], [0.0, 1.0]), 1.0 / 16.0) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("K >= 32")),
            other => panic!("expected refusal, got {other:?}"),
        }
        assert!(build_coherent(&model, PhasePoint::new([0.0, 0.0], [0.0, 2.0]), 0.125).is_err());
    }

    #[test]
    fn classical_integrals() {
        let torus = ManifoldModel::torus(8).unwrap();
        let vertical = PhasePoint::new([0.0, 0.0], [0.0, 1.0]);
        for t in [0.5, 3.0, 17.0] {
            assert_eq!(classical_damping_integral(&torus, &strip(), vertical, t).unwrap(), 0.0);
        }
        let c = DampingProfile::constant(ManifoldKind::Torus2, 0.7).unwrap();
        assert!((classical_damping_integral(&torus, &c, vertical, 3.3).unwrap() - 0.7 * 3.3).abs() < 1e-12);
        // bump crossed horizontally through its centre: 1-D trapezoid at 10x resolution
        let bump =
            DampingProfile::new(ManifoldKind::Torus2, ProfileFamily::Bump { center: [3.0, 2.0], radius: 1.2, amplitude: 1.0 }).unwrap();
        let across = PhasePoint::new([5.0, 2.0], [1.0, 0.0]);
        let got = classical_damping_integral(&torus, &bump, across, 4.0).unwrap();
        let n = 4000;
        let ds = 4.0 / n as f64;
        let f = |s: f64| bump.eval([5.0 - s, 2.0]);
        let oracle = ds * ((1..n).map(|j| f(j as f64 * ds)).sum::<f64>() + 0.5 * (f(0.0) + f(4.0)));
        assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
    }

    #[test]
    fn undamped_ratio_is_one() {
        let model = ManifoldModel::torus(16).unwrap();
        let mut p = EhrenfestParams::new(PhasePoint::new([0.0, 0.0], [0.0, 1.0]), vec![0.125]);
        p.check_a_picture = true;
        let rep = ehrenfest_experiment(&model, &DampingProfile::zero(ManifoldKind::Torus2), &p).unwrap();
        let row = &rep.rows[0];
        assert!((row.r - 1.0).abs() < 1e-12);
        assert!((row.r_a_picture.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(row.classical, 1.0);
    }

    #[test]
    fn ratio_agrees_across_pictures_and_stays_contractive() {
        let model = ManifoldModel::torus(16).unwrap();
        let mut p = EhrenfestParams::new(PhasePoint::new([2.5, 0.0], [0.6, 0.8]), vec![0.125]);
        p.check_a_picture = true;
        p.mass_floor = 0.0;
        let rep = ehrenfest_experiment(&model, &strip(), &p).unwrap();
        let row = &rep.rows[0];
        assert!(row.r >= 0.0 && row.r <= 1.0 + 1e-9);
        assert!(row.r < 0.999, "packet crossing the strip should lose energy: {}", row.r);
        assert!((row.r - row.r_a_picture.unwrap()).abs() < 1e-10);
        assert!(row.dropped_mass < 1e-14);
    }

    #[test]
    fn dense_path_on_the_circle() {
        let model = ManifoldModel::circle(32).unwrap();
        let b = DampingProfile::new(ManifoldKind::Circle, ProfileFamily::Bump { center: [3.0, 0.0], radius: 1.0, amplitude: 1.0 }).unwrap();
        let mut p = EhrenfestParams::new(PhasePoint::circle(0.0, 1.0), vec![0.125, 1.0 / 16.0]);
        p.check_a_picture = true;
        let rep = ehrenfest_experiment(&model, &b, &p).unwrap();
        assert!(rep.rows[0].h > rep.rows[1].h);
        for row in &rep.rows {
            assert!(row.r >= 0.0 && row.r <= 1.0 + 1e-9);
            assert!((row.r - row.r_a_picture.unwrap()).abs() < 1e-10);
            assert!(row.g.value >= row.g_lower_implied * (1.0 - 1e-9));
        }
    }

    #[test]
    fn mollified_run_respects_the_perturbation_bound() {
        let model = ManifoldModel::torus(16).unwrap();
        let mut p = EhrenfestParams::new(PhasePoint::new([1.2, 0.0], [0.0, 1.0]), vec![0.125]);
        p.nu = Some(0.5);
        let rep = ehrenfest_experiment(&model, &strip(), &p).unwrap();
        let pc = rep.rows[0].perturbation.as_ref().unwrap();
        assert!(pc.holds, "{pc:?}");
        assert!(pc.gap > 0.0);
    }

    #[test]
    fn insufficient_cutoff_is_infeasible() {
        let model = ManifoldModel::torus(16).unwrap();
        let p = EhrenfestParams::new(PhasePoint::new([0.0, 0.0], [0.0, 1.0]), vec![0.125, 1.0 / 16.0]);
        assert!(matches!(ehrenfest_experiment(&model, &strip(), &p), Err(Error::Infeasible(_))));
    }
}
