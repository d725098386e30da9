//! Circle and flat 2-torus: Fourier mode lattice, Laplace eigenvalues,
//! homogeneous geodesic flow, sampled geometric control check and the
//! expansion-rate estimator.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const TWO_PI: f64 = 2.0 * PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifoldKind {
    Circle,
    Torus2,
}

impl ManifoldKind {
    pub fn dim(self) -> usize {
        match self {
            ManifoldKind::Circle => 1,
            ManifoldKind::Torus2 => 2,
        }
    }
}

/// Lattice point `k`. On the circle only `k[0]` is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Mode(pub [i64; 2]);

impl Mode {
    pub fn is_zero(&self) -> bool {
        self.0 == [0, 0]
    }

    pub fn norm(&self) -> f64 {
        ((self.0[0] * self.0[0] + self.0[1] * self.0[1]) as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct ManifoldModel {
    pub kind: ManifoldKind,
    pub cutoff: usize,
    /// Retained modes in lattice order: `k_y` major, then `k_x`.
    pub modes: Vec<Mode>,
    /// `|k|` for each entry of `modes`.
    pub eigenvalues: Vec<f64>,
    /// Quadrature points per dimension.
    pub n_quad: usize,
    pub volume: f64,
}

impl ManifoldModel {
    pub fn new(kind: ManifoldKind, cutoff: usize) -> Result<Self> {
        if cutoff < 1 {
            return Err(Error::Invalid("cutoff K must be at least 1".into()));
        }
        let k = cutoff as i64;
        let mut modes = Vec::new();
        match kind {
            ManifoldKind::Circle => {
                for kx in -k..=k {
                    modes.push(Mode([kx, 0]));
                }
            }
            ManifoldKind::Torus2 => {
                for ky in -k..=k {
                    for kx in -k..=k {
                        modes.push(Mode([kx, ky]));
                    }
                }
            }
        }
        let eigenvalues = modes.iter().map(Mode::norm).collect();
        let volume = TWO_PI.powi(kind.dim() as i32);
        Ok(ManifoldModel { kind, cutoff, modes, eigenvalues, n_quad: 4 * cutoff + 1, volume })
    }

    pub fn circle(cutoff: usize) -> Result<Self> {
        Self::new(ManifoldKind::Circle, cutoff)
    }

    pub fn torus(cutoff: usize) -> Result<Self> {
        Self::new(ManifoldKind::Torus2, cutoff)
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn index_of(&self, m: Mode) -> Option<usize> {
        let k = self.cutoff as i64;
        let [kx, ky] = m.0;
        if kx.abs() > k || ky.abs() > k {
            return None;
        }
        match self.kind {
            ManifoldKind::Circle => (ky == 0).then(|| (kx + k) as usize),
            ManifoldKind::Torus2 => Some(((ky + k) * (2 * k + 1) + kx + k) as usize),
        }
    }

    pub fn zero_index(&self) -> usize {
        self.index_of(Mode([0, 0])).expect("zero mode is always retained")
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().cloned().fold(0.0, f64::max)
    }

    /// `sqrt(lambda^2 + m)` in lattice order.
    pub fn shifted_eigenvalues(&self, m: f64) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| (l * l + m).sqrt()).collect()
    }

    /// Quadrature nodes along one axis.
    pub fn quad_nodes(&self) -> Vec<f64> {
        (0..self.n_quad).map(|j| TWO_PI * j as f64 / self.n_quad as f64).collect()
    }

    /// Orthonormal basis function `e_k(x)`.
    pub fn basis(&self, m: Mode, x: [f64; 2]) -> num_complex::Complex<f64> {
        let phase = m.0[0] as f64 * x[0] + if self.dim() == 2 { m.0[1] as f64 * x[1] } else { 0.0 };
        num_complex::Complex::from_polar(1.0 / self.volume.sqrt(), phase)
    }
}

/// Retained spectrum of `sqrt(-Laplacian)`, sorted by eigenvalue with ties in
/// lexicographic mode order.
pub fn eigendata(model: &ManifoldModel) -> Vec<(Mode, f64)> {
    let mut out: Vec<(Mode, f64)> = model.modes.iter().cloned().zip(model.eigenvalues.iter().cloned()).collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

pub fn wrap(x: f64) -> f64 {
    let r = x.rem_euclid(TWO_PI);
    if r >= TWO_PI {
        0.0
    } else {
        r
    }
}

/// Signed periodic difference `a - b` folded into `(-pi, pi]`.
pub fn periodic_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TWO_PI);
    if d > PI {
        d - TWO_PI
    } else {
        d
    }
}

pub fn periodic_dist(model: &ManifoldModel, x: [f64; 2], y: [f64; 2]) -> f64 {
    let dx = periodic_diff(x[0], y[0]);
    if model.dim() == 1 {
        dx.abs()
    } else {
        let dy = periodic_diff(x[1], y[1]);
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: [f64; 2],
    pub xi: [f64; 2],
}

impl PhasePoint {
    pub fn new(x: [f64; 2], xi: [f64; 2]) -> Self {
        PhasePoint { x, xi }
    }

    pub fn circle(x: f64, xi: f64) -> Self {
        PhasePoint { x: [x, 0.0], xi: [xi, 0.0] }
    }
}

fn xi_norm(model: &ManifoldModel, xi: [f64; 2]) -> f64 {
    if model.dim() == 1 {
        xi[0].abs()
    } else {
        (xi[0] * xi[0] + xi[1] * xi[1]).sqrt()
    }
}

fn flow_unwrapped(model: &ManifoldModel, p: &PhasePoint, t: f64) -> [f64; 2] {
    let n = xi_norm(model, p.xi);
    let mut x = [p.x[0] + t * p.xi[0] / n, p.x[1]];
    if model.dim() == 2 {
        x[1] += t * p.xi[1] / n;
    }
    x
}

/// Unit-speed homogeneous geodesic flow.
pub fn geodesic_flow(model: &ManifoldModel, p: PhasePoint, t: f64) -> Result<PhasePoint> {
    if !(xi_norm(model, p.xi) > 0.0) {
        return Err(Error::Domain("geodesic flow needs a nonzero covector".into()));
    }
    let x = flow_unwrapped(model, &p, t);
    let x = if model.dim() == 1 { [wrap(x[0]), 0.0] } else { [wrap(x[0]), wrap(x[1])] };
    Ok(PhasePoint { x, xi: p.xi })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GccSampling {
    pub n_x: usize,
    pub n_theta: usize,
    /// Time step used when walking each sampled orbit.
    pub step: f64,
}

impl Default for GccSampling {
    fn default() -> Self {
        GccSampling { n_x: 64, n_theta: 256, step: TWO_PI / 256.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GccVerdict {
    pub pass: bool,
    pub witness: Option<PhasePoint>,
    pub horizon: f64,
    pub orbits_sampled: usize,
    pub orbits_missed: usize,
    pub note: String,
}

/// First time in `[0, horizon]` at which the sampled orbit meets the set.
fn first_hit(model: &ManifoldModel, p: &PhasePoint, horizon: f64, step: f64, inside: &dyn Fn([f64; 2]) -> bool) -> Option<f64> {
    let n_steps = (horizon / step).ceil().max(1.0) as usize;
    for j in 0..=n_steps {
        let t = (j as f64 * step).min(horizon);
        let q = geodesic_flow(model, *p, t).ok()?;
        if inside(q.x) {
            return Some(t);
        }
    }
    None
}

/// Sampled geometric control check over the unit cosphere bundle.
///
/// Orbits are walked with a fixed time step, so this can miss thin sets and
/// grazing orbits. The witness is the missed orbit that stays out of the set
/// longest on a four times longer horizon, ties going to sampling order.
pub fn gcc_check(model: &ManifoldModel, inside: &dyn Fn([f64; 2]) -> bool, horizon: f64, sampling: GccSampling) -> Result<GccVerdict> {
    if !(horizon > 0.0) {
        return Err(Error::Invalid("GCC horizon must be positive".into()));
    }
    let nodes: Vec<f64> = (0..sampling.n_x).map(|j| TWO_PI * j as f64 / sampling.n_x as f64).collect();
    let mut starts = Vec::new();
    match model.kind {
        ManifoldKind::Circle => {
            for &x in &nodes {
                for xi in [1.0, -1.0] {
                    starts.push(PhasePoint::circle(x, xi));
                }
            }
        }
        ManifoldKind::Torus2 => {
            for &y in &nodes {
                for &x in &nodes {
                    for j in 0..sampling.n_theta {
                        let th = TWO_PI * j as f64 / sampling.n_theta as f64;
                        starts.push(PhasePoint::new([x, y], [th.cos(), th.sin()]));
                    }
                }
            }
        }
    }
    let mut missed = 0;
    let mut best: Option<(f64, PhasePoint)> = None;
    for p in &starts {
        if first_hit(model, p, horizon, sampling.step, inside).is_some() {
            continue;
        }
        missed += 1;
        let longer = first_hit(model, p, 4.0 * horizon, sampling.step, inside).unwrap_or(f64::INFINITY);
        if best.map_or(true, |(t, _)| longer > t) {
            best = Some((longer, *p));
        }
    }
    Ok(GccVerdict {
        pass: missed == 0,
        witness: best.map(|(_, p)| p),
        horizon,
        orbits_sampled: starts.len(),
        orbits_missed: missed,
        note: "sampled check on a finite horizon, not a proof".into(),
    })
}

fn largest_singular_value_real(j: &[Vec<f64>]) -> f64 {
    // power iteration on J^T J; J is at most 4x4
    let n = j.len();
    let mut v = vec![1.0; n];
    let mut s = 0.0;
    for _ in 0..200 {
        let jv: Vec<f64> = (0..n).map(|r| (0..n).map(|c| j[r][c] * v[c]).sum()).collect();
        let w: Vec<f64> = (0..n).map(|c| (0..n).map(|r| j[r][c] * jv[r]).sum()).collect();
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nw == 0.0 {
            return 0.0;
        }
        s = nw.sqrt();
        v = w.iter().map(|x| x / nw).collect();
    }
    s
}

/// Max over probes of `log ||d phi^t||` divided by `t_max`, with a central
/// difference Jacobian in `(x, xi)`.
pub fn expansion_rate(model: &ManifoldModel, t_max: f64, probes: &[PhasePoint]) -> Result<f64> {
    if !(t_max > 0.0) {
        return Err(Error::Invalid("t_max must be positive".into()));
    }
    const STEP: f64 = 1e-6;
    let d = model.dim();
    let mut best = f64::NEG_INFINITY;
    for p in probes {
        if !(xi_norm(model, p.xi) > 0.0) {
            return Err(Error::Domain("probe with zero covector".into()));
        }
        let n = 2 * d;
        let mut jac = vec![vec![0.0; n]; n];
        for c in 0..n {
            let mut plus = *p;
            let mut minus = *p;
            if c < d {
                plus.x[c] += STEP;
                minus.x[c] -= STEP;
            } else {
                plus.xi[c - d] += STEP;
                minus.xi[c - d] -= STEP;
            }
            let xp = flow_unwrapped(model, &plus, t_max);
            let xm = flow_unwrapped(model, &minus, t_max);
            for r in 0..d {
                jac[r][c] = (xp[r] - xm[r]) / (2.0 * STEP);
                jac[d + r][c] = (plus.xi[r] - minus.xi[r]) / (2.0 * STEP);
            }
        }
        let s = largest_singular_value_real(&jac);
        best = best.max(s.ln() / t_max);
    }
    Ok(best)
}

/// Probe set used by default: a few positions times a few directions.
pub fn default_probes(model: &ManifoldModel) -> Vec<PhasePoint> {
    match model.kind {
        ManifoldKind::Circle => vec![PhasePoint::circle(0.3, 1.0), PhasePoint::circle(2.0, -2.5)],
        ManifoldKind::Torus2 => (0..8)
            .map(|j| {
                let th = 0.37 + TWO_PI * j as f64 / 8.0;
                PhasePoint::new([0.5 * j as f64, 1.0], [th.cos(), th.sin()])
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sorted_lambdas(model: &ManifoldModel) -> Vec<f64> {
        eigendata(model).into_iter().map(|(_, l)| l).collect()
    }

    #[test]
    fn circle_k2_spectrum() {
        let m = ManifoldModel::circle(2).unwrap();
        assert_eq!(sorted_lambdas(&m), vec![0.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn torus_k1_spectrum() {
        let m = ManifoldModel::torus(1).unwrap();
        let s2 = 2f64.sqrt();
        assert_eq!(sorted_lambdas(&m), vec![0.0, 1.0, 1.0, 1.0, 1.0, s2, s2, s2, s2]);
    }

    #[test]
    fn circle_k1_shifted_by_mass_four() {
        let m = ManifoldModel::circle(1).unwrap();
        let mut v = m.shifted_eigenvalues(4.0);
        v.sort_by(f64::total_cmp);
        assert_eq!(v, vec![2.0, 5f64.sqrt(), 5f64.sqrt()]);
    }

    #[test]
    fn ties_are_lexicographic() {
        let m = ManifoldModel::torus(1).unwrap();
        let d = eigendata(&m);
        assert_eq!(d[1].0, Mode([-1, 0]));
        assert_eq!(d[2].0, Mode([0, -1]));
    }

    #[test]
    fn zero_mode_simple_and_counts() {
        for m in [ManifoldModel::circle(5).unwrap(), ManifoldModel::torus(4).unwrap()] {
            assert_eq!(m.eigenvalues.iter().filter(|l| **l == 0.0).count(), 1);
            let k = 2 * m.cutoff + 1;
            assert_eq!(m.n_modes(), k.pow(m.dim() as u32));
            assert!(m.n_quad >= 4 * m.cutoff + 1);
            for (i, md) in m.modes.iter().enumerate() {
                assert_eq!(m.index_of(*md), Some(i));
            }
        }
    }

    #[test]
    fn torus_multiplicities_match_lattice_counts() {
        let m = ManifoldModel::torus(6).unwrap();
        let k = 6i64;
        for r2 in 0..=(k * k) {
            let count = m.modes.iter().filter(|md| md.0[0].pow(2) + md.0[1].pow(2) == r2).count();
            let mut expected = 0;
            for a in -k..=k {
                for b in -k..=k {
                    if a * a + b * b == r2 {
                        expected += 1;
                    }
                }
            }
            assert_eq!(count, expected);
        }
    }

    #[test]
    fn flow_examples() {
        let t = ManifoldModel::torus(1).unwrap();
        let q = geodesic_flow(&t, PhasePoint::new([0.0, 0.0], [0.0, 1.0]), PI).unwrap();
        assert!((q.x[0]).abs() < 1e-15 && (q.x[1] - PI).abs() < 1e-15);
        let c = ManifoldModel::circle(1).unwrap();
        let q = geodesic_flow(&c, PhasePoint::circle(0.0, -3.0), 1.0).unwrap();
        assert!((q.x[0] - (TWO_PI - 1.0)).abs() < 1e-14);
        assert_eq!(q.xi[0], -3.0);
        let q = geodesic_flow(&t, PhasePoint::new([1.0, 1.0], [3.0, 4.0]), 5.0).unwrap();
        assert!((q.x[0] - wrap(4.0)).abs() < 1e-14 && (q.x[1] - wrap(5.0)).abs() < 1e-14);
    }

    #[test]
    fn zero_covector_is_rejected() {
        let t = ManifoldModel::torus(1).unwrap();
        assert!(matches!(geodesic_flow(&t, PhasePoint::new([0.0, 0.0], [0.0, 0.0]), 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn gcc_strip_fails_with_vertical_witness() {
        let t = ManifoldModel::torus(1).unwrap();
        let strip = |x: [f64; 2]| x[0] > PI / 2.0 && x[0] < 1.5 * PI;
        let s = GccSampling { n_x: 8, n_theta: 16, step: 0.05 };
        let v = gcc_check(&t, &strip, 10.0, s).unwrap();
        assert!(!v.pass);
        let w = v.witness.unwrap();
        assert_eq!(w.x, [0.0, 0.0]);
        assert!(w.xi[0].abs() < 1e-12 && (w.xi[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gcc_whole_manifold_and_circle_arc_pass() {
        let t = ManifoldModel::torus(1).unwrap();
        let s = GccSampling { n_x: 8, n_theta: 16, step: 0.05 };
        assert!(gcc_check(&t, &|_| true, 1.0, s).unwrap().pass);
        let c = ManifoldModel::circle(1).unwrap();
        let arc = |x: [f64; 2]| x[0] > 0.0 && x[0] < PI;
        assert!(gcc_check(&c, &arc, TWO_PI, GccSampling::default()).unwrap().pass);
    }

    #[test]
    fn expansion_rate_flat() {
        let t = ManifoldModel::torus(1).unwrap();
        let probes = default_probes(&t);
        let r100 = expansion_rate(&t, 100.0, &probes).unwrap();
        let r1000 = expansion_rate(&t, 1000.0, &probes).unwrap();
        assert!(r100 <= 0.1);
        assert!(r1000 < r100);
        let c = ManifoldModel::circle(1).unwrap();
        let r = expansion_rate(&c, 50.0, &default_probes(&c)).unwrap();
        assert!(r.abs() < 1e-9, "{r}");
    }

    proptest! {
        #[test]
        fn flow_group_law(x in 0.0..TWO_PI, y in 0.0..TWO_PI, th in 0.0..TWO_PI,
                          s in -20.0..20.0f64, t in -20.0..20.0f64) {
            let m = ManifoldModel::torus(1).unwrap();
            let p = PhasePoint::new([x, y], [th.cos(), th.sin()]);
            let a = geodesic_flow(&m, geodesic_flow(&m, p, s).unwrap(), t).unwrap();
            let b = geodesic_flow(&m, p, s + t).unwrap();
            prop_assert!(periodic_dist(&m, a.x, b.x) < 1e-12);
        }

        #[test]
        fn flow_is_zero_homogeneous(x in 0.0..TWO_PI, th in 0.0..TWO_PI,
                                    c in 0.01..100.0f64, t in -10.0..10.0f64) {
            let m = ManifoldModel::torus(1).unwrap();
            let p = PhasePoint::new([x, 1.0], [th.cos(), th.sin()]);
            let q = PhasePoint::new([x, 1.0], [c * th.cos(), c * th.sin()]);
            let a = geodesic_flow(&m, p, t).unwrap();
            let b = geodesic_flow(&m, q, t).unwrap();
            prop_assert!(periodic_dist(&m, a.x, b.x) < 1e-12);
        }
    }
}
