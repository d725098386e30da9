//! Eigenvalues, weighted resolvent norms, imaginary-axis scans and the
//! semiclassical window supremum `G(h)`.

use serde::{Deserialize, Serialize};

use crate::damping::MultiplicationOperator;
use crate::error::{Error, Result};
use crate::geometry::{ManifoldKind, ManifoldModel};
use crate::linalg::{self, CMat, C64, I};
use crate::operators::{self, Block, Formulation, OperatorBundle};
use crate::pool::par_map;

/// Points with `sigma_min(z - G) < NEAR_SINGULAR * ||G||` are flagged.
pub const NEAR_SINGULAR: f64 = 1e-12;
/// Eigenbases with condition number above this are treated as unusable.
pub const ILL_CONDITIONED: f64 = 1e8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockSpectrum {
    pub ky: i64,
    pub eigenvalues: Vec<C64>,
    pub condition: f64,
}

/// Spectrum of the semigroup generator (`i P` for the P family).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Spectrum {
    pub formulation: Formulation,
    pub blocks: Vec<BlockSpectrum>,
    pub ill_conditioned: bool,
}

impl Spectrum {
    pub fn eigenvalues(&self) -> Vec<C64> {
        self.blocks.iter().flat_map(|b| b.eigenvalues.iter().cloned()).collect()
    }

    pub fn max_real(&self) -> f64 {
        self.eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_real(&self) -> f64 {
        self.eigenvalues().iter().map(|z| z.re).fold(f64::INFINITY, f64::min)
    }

    pub fn max_condition(&self) -> f64 {
        self.blocks.iter().map(|b| b.condition).fold(0.0, f64::max)
    }
}

pub fn spectrum(bundle: &OperatorBundle) -> Result<Spectrum> {
    let mut blocks = Vec::with_capacity(bundle.blocks.len());
    for b in &bundle.blocks {
        let g = b.generator_hat(bundle.is_p_type());
        let e = linalg::eig(&g)?;
        blocks.push(BlockSpectrum { ky: b.ky, eigenvalues: e.values.to_vec(), condition: e.condition });
    }
    let ill = blocks.iter().any(|b| b.condition > ILL_CONDITIONED);
    Ok(Spectrum { formulation: bundle.formulation, blocks, ill_conditioned: ill })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ResolventValue {
    /// `+inf` when flagged.
    pub value: f64,
    pub near_singular: bool,
    /// Block attaining the maximum.
    pub block: usize,
}

/// Weighted generators of a bundle, ready for repeated resolvent evaluation.
pub struct ResolventEvaluator {
    generators: Vec<CMat>,
    norms: Vec<f64>,
}

impl ResolventEvaluator {
    pub fn new(bundle: &OperatorBundle) -> Result<Self> {
        let generators: Vec<CMat> = bundle.blocks.iter().map(|b| b.generator_hat(bundle.is_p_type())).collect();
        let norms = generators.iter().map(linalg::spectral_norm).collect::<Result<Vec<_>>>()?;
        Ok(ResolventEvaluator { generators, norms })
    }

    /// `||(z - G)^{-1}||` in the bundle norm.
    pub fn eval(&self, z: C64) -> Result<ResolventValue> {
        let mut best = ResolventValue { value: 0.0, near_singular: false, block: 0 };
        for (i, (g, gn)) in self.generators.iter().zip(&self.norms).enumerate() {
            let mut m = g.mapv(|x| -x);
            for d in 0..m.nrows() {
                m[[d, d]] += z;
            }
            let smin = linalg::sigma_min(&m)?;
            if smin < NEAR_SINGULAR * gn.max(1.0) {
                return Ok(ResolventValue { value: f64::INFINITY, near_singular: true, block: i });
            }
            if 1.0 / smin > best.value {
                best = ResolventValue { value: 1.0 / smin, near_singular: false, block: i };
            }
        }
        Ok(best)
    }
}

pub fn resolvent_norm(bundle: &OperatorBundle, z: C64) -> Result<ResolventValue> {
    ResolventEvaluator::new(bundle)?.eval(z)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolventScan {
    pub formulation: Formulation,
    pub s: Vec<f64>,
    pub values: Vec<f64>,
    pub flagged: Vec<bool>,
    /// Extra evaluation points added by refinement, as `(s, value)`.
    pub refined: Vec<(f64, f64)>,
    /// Local maxima after refinement, as `(s, value)`.
    pub peaks: Vec<(f64, f64)>,
    pub grid_max: f64,
    /// Largest evaluated value: a certified lower bound for the supremum.
    pub certified_lower: f64,
    /// Upper bound for the supremum between grid points from the Neumann
    /// series; `inf` when the grid is too coarse to bound it.
    pub upper_bound: f64,
    /// `sup_{|r| <= |s|}` of all evaluated values, on the grid.
    pub envelope: Vec<f64>,
}

impl ResolventScan {
    /// Envelope value at an arbitrary `s` (linear scan over the grid).
    pub fn envelope_at(&self, s: f64) -> f64 {
        let a = s.abs();
        let mut best: f64 = 0.0;
        for (x, v) in self.s.iter().zip(&self.values).chain(self.refined.iter().map(|(x, v)| (x, v))) {
            if x.abs() <= a {
                best = best.max(*v);
            }
        }
        best
    }
}

/// Peak refinement by interval bisection around `(c, fc)` inside `[a, b]`.
pub(crate) fn refine_peak(
    eval: &dyn Fn(f64) -> Result<f64>,
    mut a: f64,
    mut c: f64,
    mut b: f64,
    mut fc: f64,
) -> Result<(f64, f64, Vec<(f64, f64)>)> {
    let mut pts = Vec::new();
    let mut calm = 0;
    for _ in 0..60 {
        let m1 = 0.5 * (a + c);
        let m2 = 0.5 * (c + b);
        let f1 = eval(m1)?;
        let f2 = eval(m2)?;
        pts.push((m1, f1));
        pts.push((m2, f2));
        let old = fc;
        if f1 > fc && f1 >= f2 {
            b = c;
            c = m1;
            fc = f1;
        } else if f2 > fc {
            a = c;
            c = m2;
            fc = f2;
        } else {
            a = m1;
            b = m2;
        }
        // stop after two consecutive sub-1e-3 relative changes
        calm = if (fc - old) <= 1e-3 * old { calm + 1 } else { 0 };
        if !fc.is_finite() || calm >= 2 || (b - a) < 1e-12 * (1.0 + c.abs()) {
            break;
        }
    }
    Ok((c, fc, pts))
}

/// Indices of local maxima among finite values.
fn local_maxima(v: &[f64]) -> Vec<usize> {
    let n = v.len();
    (0..n)
        .filter(|&i| {
            v[i].is_finite()
                && (i == 0 || v[i] >= v[i - 1] || !v[i - 1].is_finite())
                && (i + 1 == n || v[i] >= v[i + 1] || !v[i + 1].is_finite())
        })
        .collect()
}

pub fn scan_imaginary_axis(bundle: &OperatorBundle, grid: &[f64], refine: bool) -> Result<ResolventScan> {
    scan_imaginary_axis_with(bundle, grid, refine, 1)
}

pub fn scan_imaginary_axis_with(bundle: &OperatorBundle, grid: &[f64], refine: bool, workers: usize) -> Result<ResolventScan> {
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Invalid("scan grid must be strictly increasing".into()));
    }
    let ev = ResolventEvaluator::new(bundle)?;
    let raw = par_map(grid, workers, |s| ev.eval(C64::new(0.0, *s)));
    let raw = raw.into_iter().collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = raw.iter().map(|r| r.value).collect();
    let flagged: Vec<bool> = raw.iter().map(|r| r.near_singular).collect();
    let grid_max = values.iter().cloned().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let eval = |s: f64| -> Result<f64> { Ok(ev.eval(C64::new(0.0, s))?.value) };
    let mut refined = Vec::new();
    let mut peaks = Vec::new();
    for i in local_maxima(&values) {
        if refine && grid.len() > 1 {
            let a = grid[i.saturating_sub(1)];
            let b = grid[(i + 1).min(grid.len() - 1)];
            let (c, fc, pts) = refine_peak(&eval, a, grid[i], b, values[i])?;
            refined.extend(pts);
            peaks.push((c, fc));
        } else {
            peaks.push((grid[i], values[i]));
        }
    }
    let certified_lower = refined.iter().map(|p| p.1).chain(values.iter().cloned()).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let mut upper_bound: f64 = grid_max;
    for j in 0..grid.len().saturating_sub(1) {
        let d = 0.5 * (grid[j + 1] - grid[j]);
        let r = values[j].max(values[j + 1]);
        let ub = if d * r < 1.0 { r / (1.0 - d * r) } else { f64::INFINITY };
        upper_bound = upper_bound.max(ub);
    }
    let mut scan = ResolventScan {
        formulation: bundle.formulation,
        s: grid.to_vec(),
        values,
        flagged,
        refined,
        peaks,
        grid_max,
        certified_lower,
        upper_bound,
        envelope: Vec::new(),
    };
    scan.envelope = envelope(&scan);
    Ok(scan)
}

/// Monotone envelope `sup_{|r| <= |s|}` over every evaluated point.
fn envelope(scan: &ResolventScan) -> Vec<f64> {
    let mut pts: Vec<(f64, f64)> = scan.s.iter().cloned().zip(scan.values.iter().cloned()).chain(scan.refined.iter().cloned()).collect();
    pts.sort_by(|a, b| a.0.abs().total_cmp(&b.0.abs()));
    let mut running: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    let mut m: f64 = 0.0;
    for (x, v) in pts {
        m = m.max(v);
        running.push((x.abs(), m));
    }
    scan.s
        .iter()
        .map(|s| {
            let a = s.abs();
            let k = running.partition_point(|(x, _)| *x <= a);
            if k == 0 {
                0.0
            } else {
                running[k - 1].1
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GReport {
    pub h: f64,
    pub eps: f64,
    /// Supremum over the evaluated window points; a lower bound for `G(h)`.
    pub value: f64,
    pub argmax_tau: f64,
    pub near_singular: bool,
    pub grid_points: usize,
    pub evaluations: usize,
    pub blocks_total: usize,
    pub blocks_evaluated: usize,
    /// Blocks whose Neumann bound lies below `value`.
    pub blocks_skipped: usize,
    /// Largest Neumann bound among skipped blocks.
    pub skipped_bound: f64,
}

fn check_window(h: f64, eps: f64, max_lambda: f64) -> Result<()> {
    if !(h > 0.0 && h < 1.0) || !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Invalid(format!("need h, eps in (0,1); got h = {h}, eps = {eps}")));
    }
    if (1.0 + eps) / h > max_lambda {
        return Err(Error::Infeasible(format!(
            "window (1+eps)/h = {} exceeds the largest retained frequency {max_lambda}; increase K to at least {}",
            (1.0 + eps) / h,
            ((1.0 + eps) / h).ceil()
        )));
    }
    Ok(())
}

/// Distance from the interval `[lo, hi]` to the nearest of `lambda`.
fn interval_gap(lo: f64, hi: f64, lambda: &[f64]) -> f64 {
    lambda
        .iter()
        .map(|l| {
            if *l < lo {
                lo - l
            } else if *l > hi {
                l - hi
            } else {
                0.0
            }
        })
        .fold(f64::INFINITY, f64::min)
}

struct BlockOutcome {
    value: f64,
    tau: f64,
    near_singular: bool,
    evaluations: usize,
    grid_points: usize,
}

/// Eigendecomposition of one weighted block generator.
pub struct BlockEigen {
    pub generator: CMat,
    pub values: Vec<C64>,
    pub vectors: CMat,
    /// `V^{-1}`; `None` when the eigenbasis is ill-conditioned.
    pub inverse: Option<CMat>,
    pub condition: f64,
    /// `|v_j| |w_j|` for right/left eigenvector pairs, empty without `inverse`.
    pub kappa: Vec<f64>,
    pub generator_norm: f64,
}

pub fn block_eigen(block: &Block, p_type: bool) -> Result<BlockEigen> {
    let generator = block.generator_hat(p_type);
    let generator_norm = linalg::spectral_norm(&generator)?;
    let e = linalg::eig(&generator)?;
    let usable = e.condition.is_finite() && e.condition < ILL_CONDITIONED;
    let inverse = if usable { Some(linalg::inverse(&e.vectors)?) } else { None };
    let kappa = match &inverse {
        Some(w) => (0..e.values.len())
            .map(|j| {
                let v = e.vectors.column(j).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                let l = w.row(j).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                v * l
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(BlockEigen {
        generator,
        values: e.values.to_vec(),
        vectors: e.vectors,
        inverse,
        condition: if usable { e.condition } else { f64::INFINITY },
        kappa,
        generator_norm,
    })
}

impl BlockEigen {
    /// Upper bound for `||(z - G)^{-1}||` from the eigenbasis: the smaller of
    /// `cond(V) / dist(z, Sp)` and `sum_j kappa_j / |z - lambda_j|`.
    pub fn resolvent_bound(&self, z: C64) -> f64 {
        if self.inverse.is_none() {
            return f64::INFINITY;
        }
        let mut d = f64::INFINITY;
        let mut sum = 0.0;
        for (l, k) in self.values.iter().zip(&self.kappa) {
            let r = (z - l).norm();
            d = d.min(r);
            sum += k / r;
        }
        (self.condition / d).min(sum)
    }

    /// Exact `||(z - G)^{-1}||` by the smallest singular value.
    pub fn resolvent(&self, z: C64) -> Result<ResolventValue> {
        let mut m = self.generator.mapv(|x| -x);
        for d in 0..m.nrows() {
            m[[d, d]] += z;
        }
        let smin = linalg::sigma_min(&m)?;
        if smin < NEAR_SINGULAR * self.generator_norm.max(1.0) {
            return Ok(ResolventValue { value: f64::INFINITY, near_singular: true, block: 0 });
        }
        Ok(ResolventValue { value: 1.0 / smin, near_singular: false, block: 0 })
    }
}

/// Window supremum for one block, skipping points whose eigenbasis bound
/// cannot beat the running maximum (initially `floor`).
fn block_window_sup(e: &BlockEigen, h: f64, eps: f64, density: f64, floor: f64) -> Result<BlockOutcome> {
    let (lo, hi) = ((1.0 - eps) / h, (1.0 + eps) / h);
    let n_grid = ((hi - lo) * density).ceil().max(1.0) as usize + 1;
    let grid: Vec<f64> = (0..n_grid).map(|j| lo + (hi - lo) * j as f64 / (n_grid - 1) as f64).collect();
    let mut seeds: Vec<(f64, f64)> = e.values.iter().filter(|z| z.im >= lo && z.im <= hi).map(|z| (z.im, z.re.abs())).collect();
    seeds.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut best = floor;
    let mut out = BlockOutcome { value: 0.0, tau: lo * h, near_singular: false, evaluations: 0, grid_points: n_grid };
    let evaluate = |s: f64, best: &mut f64, out: &mut BlockOutcome| -> Result<f64> {
        let ub = e.resolvent_bound(C64::new(0.0, s));
        if ub <= *best {
            return Ok(ub);
        }
        out.evaluations += 1;
        let r = e.resolvent(C64::new(0.0, s))?;
        if r.near_singular {
            out.near_singular = true;
        }
        if r.value > out.value {
            out.value = r.value;
            out.tau = s * h;
        }
        *best = best.max(r.value);
        Ok(r.value)
    };
    for (s, _) in &seeds {
        evaluate(*s, &mut best, &mut out)?;
    }
    for s in &grid {
        evaluate(*s, &mut best, &mut out)?;
    }
    if out.value > 0.0 && out.value.is_finite() && out.value >= floor {
        let c = out.tau / h;
        let step = (hi - lo) / (n_grid - 1) as f64;
        let (a, b) = ((c - step).max(lo), (c + step).min(hi));
        let fc = out.value;
        let flags = std::cell::Cell::new(false);
        let f = |s: f64| -> Result<f64> {
            let r = e.resolvent(C64::new(0.0, s))?;
            if r.near_singular {
                flags.set(true);
            }
            Ok(r.value)
        };
        let (_, _, pts) = refine_peak(&f, a, c, b, fc)?;
        out.evaluations += pts.len();
        out.near_singular |= flags.get();
        for (s, v) in pts {
            if v > out.value {
                out.value = v;
                out.tau = s * h;
            }
        }
    }
    if out.near_singular {
        out.value = f64::INFINITY;
    }
    Ok(out)
}

struct Candidate {
    ky: i64,
    gap: f64,
}

#[allow(clippy::too_many_arguments)]
fn g_core(
    candidates: Vec<Candidate>,
    build: &dyn Fn(i64) -> Block,
    p_type: bool,
    neumann: Option<f64>,
    h: f64,
    eps: f64,
    density: f64,
    visit: &mut dyn FnMut(&Block, &BlockEigen) -> Result<()>,
) -> Result<GReport> {
    let total = candidates.len();
    let mut order = candidates;
    // Blocks with large |k_y| carry the directions closest to the y axis; for
    // profiles of x alone those are the least damped, so they go first.
    order.sort_by(|a, b| a.gap.total_cmp(&b.gap).then(b.ky.abs().cmp(&a.ky.abs())));
    let mut rep = GReport {
        h,
        eps,
        value: 0.0,
        argmax_tau: f64::NAN,
        near_singular: false,
        grid_points: 0,
        evaluations: 0,
        blocks_total: total,
        blocks_evaluated: 0,
        blocks_skipped: 0,
        skipped_bound: 0.0,
    };
    for c in order {
        if let Some(bn) = neumann {
            if c.gap > bn {
                let bound = 1.0 / (c.gap - bn);
                if bound <= rep.value {
                    rep.blocks_skipped += 1;
                    rep.skipped_bound = rep.skipped_bound.max(bound);
                    continue;
                }
            }
        }
        let block = build(c.ky);
        let e = block_eigen(&block, p_type)?;
        let o = block_window_sup(&e, h, eps, density, rep.value)?;
        visit(&block, &e)?;
        rep.blocks_evaluated += 1;
        rep.evaluations += o.evaluations;
        rep.grid_points = rep.grid_points.max(o.grid_points);
        if o.near_singular {
            rep.near_singular = true;
        }
        if o.value > rep.value {
            rep.value = o.value;
            rep.argmax_tau = o.tau;
        }
    }
    Ok(rep)
}

fn neumann_applies(f: Formulation) -> bool {
    matches!(f, Formulation::AM | Formulation::AtildeM | Formulation::PM)
}

/// `sup_{tau in [1-eps, 1+eps]} ||(i tau / h - G)^{-1}||` for a bundle, with
/// `density` grid points per unit of `tau / h` plus every eigenvalue
/// ordinate in the window and one refinement around the maximum.
pub fn g_of_h(bundle: &OperatorBundle, h: f64, eps: f64, density: f64) -> Result<GReport> {
    check_window(h, eps, bundle.max_lambda())?;
    let (lo, hi) = ((1.0 - eps) / h, (1.0 + eps) / h);
    let candidates =
        bundle.blocks.iter().enumerate().map(|(i, b)| Candidate { ky: i as i64, gap: interval_gap(lo, hi, &b.lambda) }).collect();
    let build = |i: i64| bundle.blocks[i as usize].clone();
    let neumann = neumann_applies(bundle.formulation).then_some(bundle.b_norm);
    g_core(candidates, &build, bundle.is_p_type(), neumann, h, eps, density, &mut |_, _| Ok(()))
}

/// `G(h)` on a torus for a profile independent of the second coordinate,
/// building one `k_y` block at a time. Blocks `k_y` and `-k_y` coincide, so
/// only `k_y >= 0` is evaluated.
pub fn g_of_h_streaming(
    model: &ManifoldModel,
    mult: &MultiplicationOperator,
    m: f64,
    f: Formulation,
    h: f64,
    eps: f64,
    density: f64,
) -> Result<GReport> {
    g_of_h_streaming_visit(model, mult, m, f, h, eps, density, &mut |_, _| Ok(()))
}

/// As [`g_of_h_streaming`], handing every evaluated block and its
/// eigendecomposition to `visit`.
#[allow(clippy::too_many_arguments)]
pub fn g_of_h_streaming_visit(
    model: &ManifoldModel,
    mult: &MultiplicationOperator,
    m: f64,
    f: Formulation,
    h: f64,
    eps: f64,
    density: f64,
    visit: &mut dyn FnMut(&Block, &BlockEigen) -> Result<()>,
) -> Result<GReport> {
    if model.kind != ManifoldKind::Torus2 || !mult.x_only {
        return Err(Error::Invalid("streaming G(h) needs a torus profile independent of y".into()));
    }
    check_window(h, eps, model.max_eigenvalue())?;
    let bb = mult.block(model);
    let b_norm = linalg::spectral_norm(&bb)?;
    let k = model.cutoff as i64;
    let (lo, hi) = ((1.0 - eps) / h, (1.0 + eps) / h);
    let candidates = (0..=k)
        .map(|ky| {
            let lam: Vec<f64> = (-k..=k).map(|kx| ((kx * kx + ky * ky) as f64 + m).sqrt()).collect();
            Candidate { ky, gap: interval_gap(lo, hi, &lam) }
        })
        .collect();
    let build = |ky: i64| operators::x_only_block(model, &bb, m, f, None, ky);
    let neumann = neumann_applies(f).then_some(b_norm);
    let mut rep = g_core(candidates, &build, f.is_p_type(), neumann, h, eps, density, visit)?;
    rep.blocks_total = (2 * k + 1) as usize;
    Ok(rep)
}

/// Dense resolvent matrix `(z - G)^{-1}` in plain coordinates (small bundles).
pub fn resolvent_matrix(bundle: &OperatorBundle, z: C64) -> Result<CMat> {
    let g = OperatorBundle::dense_generator_hat(bundle);
    let mut m = g.mapv(|x| -x);
    for d in 0..m.nrows() {
        m[[d, d]] += z;
    }
    linalg::inverse(&m)
}

impl OperatorBundle {
    /// Block-diagonal weighted generator.
    pub fn dense_generator_hat(&self) -> CMat {
        let n = self.dim();
        let mut out = CMat::zeros((n, n));
        let mut off = 0;
        for b in &self.blocks {
            let g = b.generator_hat(self.is_p_type());
            linalg::put_block(&mut out, off, off, g.view());
            off += b.dim();
        }
        out
    }
}

/// `i` times the real-axis parameter, for readability at call sites.
pub fn on_axis(s: f64) -> C64 {
    I * s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::damping::{multiplication_matrix, DampingProfile, ProfileFamily};
    use crate::operators::assemble;

    fn circle_bundle(k: usize, b: &DampingProfile, f: Formulation) -> OperatorBundle {
        let m = ManifoldModel::circle(k).unwrap();
        assemble(&m, b, 1.0, f).unwrap()
    }

    #[test]
    fn undamped_circle_spectrum() {
        let b = DampingProfile::zero(ManifoldKind::Circle);
        let sp = spectrum(&circle_bundle(1, &b, Formulation::AM)).unwrap();
        let mut im: Vec<f64> = sp.eigenvalues().iter().map(|z| z.im).collect();
        im.sort_by(f64::total_cmp);
        let r2 = 2f64.sqrt();
        let want = [-r2, -r2, -1.0, 1.0, r2, r2];
        for (a, b) in im.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(sp.max_real().abs() < 1e-12);
    }

    #[test]
    fn constant_damping_matches_mode_quadratics() {
        let c = 0.7;
        let b = DampingProfile::constant(ManifoldKind::Circle, c).unwrap();
        let sp = spectrum(&circle_bundle(3, &b, Formulation::AM)).unwrap();
        let mut got = sp.eigenvalues();
        let mut want = Vec::new();
        for k in -3i64..=3 {
            let q = (k * k) as f64 + 1.0;
            let disc = C64::new(c * c - 4.0 * q, 0.0).sqrt();
            want.push((-c + disc) / 2.0);
            want.push((-c - disc) / 2.0);
        }
        let key = |z: &C64| (z.im * 1e6).round() as i64;
        got.sort_by_key(key);
        want.sort_by_key(key);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).norm() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn undamped_resolvent_is_inverse_distance() {
        let b = DampingProfile::zero(ManifoldKind::Circle);
        let bundle = circle_bundle(1, &b, Formulation::AM);
        let r = resolvent_norm(&bundle, C64::new(0.0, 0.0)).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
        let r = resolvent_norm(&bundle, C64::new(0.0, 1.0)).unwrap();
        assert!(r.near_singular);
    }

    #[test]
    fn constant_damping_resolvent_matches_two_by_two_blocks() {
        let b = DampingProfile::constant(ManifoldKind::Circle, 1.0).unwrap();
        let bundle = circle_bundle(4, &b, Formulation::AM);
        let z = C64::new(0.0, 1.2);
        let got = resolvent_norm(&bundle, z).unwrap().value;
        let mut want: f64 = 0.0;
        for k in -4i64..=4 {
            let l = ((k * k) as f64 + 1.0).sqrt();
            // weighted 2x2 generator [[0, l], [-l, -1]]
            let mut m = CMat::zeros((2, 2));
            m[[0, 0]] = z;
            m[[0, 1]] = C64::new(-l, 0.0);
            m[[1, 0]] = C64::new(l, 0.0);
            m[[1, 1]] = z + 1.0;
            let s = linalg::singular_values(&m).unwrap();
            want = want.max(1.0 / s[1]);
        }
        assert!((got - want).abs() < 1e-12 * want);
    }

    #[test]
    fn scan_is_symmetric_and_refinement_does_not_lower_peaks() {
        let b = DampingProfile::new(ManifoldKind::Circle, ProfileFamily::Bump { center: [1.0, 0.0], radius: 1.0, amplitude: 2.0 }).unwrap();
        let bundle = circle_bundle(6, &b, Formulation::AM);
        let grid: Vec<f64> = (0..=80).map(|j| -8.0 + 0.2 * j as f64).collect();
        let scan = scan_imaginary_axis(&bundle, &grid, true).unwrap();
        let n = grid.len();
        for j in 0..n {
            let (a, b) = (scan.values[j], scan.values[n - 1 - j]);
            assert!((a - b).abs() <= 1e-8 * a.max(b));
        }
        assert!(scan.certified_lower >= scan.grid_max);
        for w in scan.envelope.windows(2).skip(n / 2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn streaming_g_matches_dense_on_small_torus() {
        let model = ManifoldModel::torus(8).unwrap();
        let b = DampingProfile::new(ManifoldKind::Torus2, ProfileFamily::Strip { lo: 2.0, hi: 4.0, amplitude: 1.0 }).unwrap();
        let mult = multiplication_matrix(&model, &b).unwrap();
        let bundle = assemble(&model, &b, 1.0, Formulation::AM).unwrap();
        let dense = g_of_h(&bundle, 0.25, 0.2, 8.0).unwrap();
        let stream = g_of_h_streaming(&model, &mult, 1.0, Formulation::AM, 0.25, 0.2, 8.0).unwrap();
        assert!(dense.value.is_finite());
        assert!((dense.value - stream.value).abs() <= 1e-6 * dense.value, "{} {}", dense.value, stream.value);
    }

    #[test]
    fn window_beyond_truncation_is_refused() {
        let b = DampingProfile::constant(ManifoldKind::Circle, 1.0).unwrap();
        let bundle = circle_bundle(4, &b, Formulation::AM);
        assert!(matches!(g_of_h(&bundle, 0.1, 0.2, 4.0), Err(Error::Infeasible(_))));
    }
}
