//! Semigroup propagation on the truncation, energy traces with dissipation
//! accounting, diagonal spectral filters and the perturbation / commutator
//! bounds for the propagator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ManifoldModel;
use crate::linalg::{self, CMat, CVec, C64};
use crate::operators::{Block, OperatorBundle, StateVector};
use crate::spectra::ILL_CONDITIONED;

/// Snapshots kept per trace.
pub const MAX_SNAPSHOTS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropagatorKind {
    Eigen,
    Expm,
}

enum BlockPropagator {
    /// `G = V diag(d) V^{-1}` in weighted coordinates.
    Eigen {
        vectors: CMat,
        inverse: CMat,
        values: Vec<C64>,
    },
    Expm {
        generator: CMat,
    },
}

/// `e^{t G}` for every block of a bundle, in weighted coordinates.
pub struct Propagator {
    blocks: Vec<BlockPropagator>,
    weights: Vec<Vec<f64>>,
    generators: Vec<CMat>,
    pub kind: PropagatorKind,
    pub max_condition: f64,
}

impl Propagator {
    pub fn new(bundle: &OperatorBundle) -> Result<Self> {
        Self::with_threshold(bundle, ILL_CONDITIONED)
    }

    /// `threshold = 0` forces the matrix-exponential fallback.
    pub fn with_threshold(bundle: &OperatorBundle, threshold: f64) -> Result<Self> {
        let mut blocks = Vec::with_capacity(bundle.blocks.len());
        let mut generators = Vec::with_capacity(bundle.blocks.len());
        let mut kind = PropagatorKind::Eigen;
        let mut max_condition: f64 = 0.0;
        for b in &bundle.blocks {
            let g = b.generator_hat(bundle.is_p_type());
            let prop = if threshold > 0.0 {
                let e = linalg::eig(&g)?;
                max_condition = max_condition.max(e.condition);
                if e.condition <= threshold {
                    let inverse = linalg::inverse(&e.vectors)?;
                    Some(BlockPropagator::Eigen { vectors: e.vectors, inverse, values: e.values.to_vec() })
                } else {
                    None
                }
            } else {
                None
            };
            let prop = prop.unwrap_or_else(|| {
                kind = PropagatorKind::Expm;
                BlockPropagator::Expm { generator: g.clone() }
            });
            blocks.push(prop);
            generators.push(g);
        }
        Ok(Propagator { blocks, weights: bundle.blocks.iter().map(|b| b.weight.clone()).collect(), generators, kind, max_condition })
    }

    fn to_hat(&self, state: &StateVector) -> Vec<CVec> {
        state.parts.iter().zip(&self.weights).map(|(x, w)| CVec::from_shape_fn(x.len(), |i| x[i] * w[i])).collect()
    }

    fn from_hat(&self, formulation: crate::operators::Formulation, hat: Vec<CVec>) -> StateVector {
        let parts = hat.into_iter().zip(&self.weights).map(|(x, w)| CVec::from_shape_fn(x.len(), |i| x[i] / w[i])).collect();
        StateVector { formulation, parts }
    }

    /// `e^{t G} U`.
    pub fn apply(&self, state: &StateVector, t: f64) -> Result<StateVector> {
        let hat = self.to_hat(state);
        let mut out = Vec::with_capacity(hat.len());
        for (p, x) in self.blocks.iter().zip(&hat) {
            out.push(match p {
                BlockPropagator::Eigen { vectors, inverse, values } => {
                    let c = inverse.dot(x);
                    let e = CVec::from_shape_fn(c.len(), |i| c[i] * (values[i] * t).exp());
                    vectors.dot(&e)
                }
                BlockPropagator::Expm { generator } => linalg::expm(&generator.mapv(|z| z * t))?.dot(x),
            });
        }
        Ok(self.from_hat(state.formulation, out))
    }

    /// Dense `e^{t G}` per block, weighted coordinates.
    pub fn matrices(&self, t: f64) -> Result<Vec<CMat>> {
        self.blocks
            .iter()
            .map(|p| match p {
                BlockPropagator::Eigen { vectors, inverse, values } => {
                    let d: Vec<C64> = values.iter().map(|z| (z * t).exp()).collect();
                    let mut vd = vectors.clone();
                    for ((_, j), z) in vd.indexed_iter_mut() {
                        *z *= d[j];
                    }
                    Ok(vd.dot(inverse))
                }
                BlockPropagator::Expm { generator } => linalg::expm(&generator.mapv(|z| z * t)),
            })
            .collect()
    }

    /// Operator norm of `e^{t G}` in the bundle norm.
    pub fn norm(&self, t: f64) -> Result<f64> {
        let mut n: f64 = 0.0;
        for m in self.matrices(t)? {
            n = n.max(linalg::spectral_norm(&m)?);
        }
        Ok(n)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    /// `-Re <G U, U>`, equal to `int b |d_t u|^2` in the A picture.
    pub dissipation_rate: Vec<f64>,
    /// Composite-Simpson integral of the rate from 0.
    pub cumulative_dissipation: Vec<f64>,
    #[serde(skip)]
    pub snapshots: Vec<(f64, StateVector)>,
    pub propagator: PropagatorKind,
    pub max_condition: f64,
    pub dt: f64,
}

impl EnergyTrace {
    pub fn final_energy(&self) -> f64 {
        *self.energy.last().expect("trace has a node")
    }

    /// `|E(T) - E(0) + int_0^T rate|`.
    pub fn dissipation_residual(&self) -> f64 {
        let n = self.energy.len() - 1;
        (self.energy[n] - self.energy[0] + self.cumulative_dissipation[n]).abs()
    }

    /// Largest `E(t_{j+1}) - E(t_j)`; nonpositive for a contraction.
    pub fn max_energy_increase(&self) -> f64 {
        self.energy.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Linear interpolation of the recorded energy.
    pub fn energy_at(&self, t: f64) -> f64 {
        let j = ((t / self.dt).floor().max(0.0) as usize).min(self.times.len() - 2);
        let s = (t - self.times[j]) / self.dt;
        self.energy[j] * (1.0 - s) + self.energy[j + 1] * s
    }
}

/// Quadrature step: `min(0.1/(1+sup b), T/1000, 0.01/omega)` with `omega` the
/// largest generator frequency, rounded so that an even number of steps
/// covers `[0, T]`.
pub fn quadrature_steps(bundle: &OperatorBundle, t_end: f64) -> (usize, f64) {
    let omega = bundle.max_lambda() + bundle.b_norm + 1.0;
    let dt = (0.1 / (1.0 + bundle.b_sup)).min(t_end / 1000.0).min(0.01 / omega);
    let mut n = (t_end / dt).ceil() as usize;
    n += n % 2;
    (n, t_end / n as f64)
}

/// Cumulative Simpson integral of samples on a uniform grid with an even
/// number of intervals; odd nodes use the three-point half-interval rule.
pub fn cumulative_simpson(f: &[f64], dt: f64) -> Vec<f64> {
    let n = f.len();
    let mut c = vec![0.0; n];
    if n < 3 {
        if n == 2 {
            c[1] = 0.5 * dt * (f[0] + f[1]);
        }
        return c;
    }
    for i in 1..n {
        if i % 2 == 0 {
            c[i] = c[i - 2] + dt / 3.0 * (f[i - 2] + 4.0 * f[i - 1] + f[i]);
        } else if i + 1 < n {
            c[i] = c[i - 1] + dt / 12.0 * (5.0 * f[i - 1] + 8.0 * f[i] - f[i + 1]);
        } else {
            c[i] = c[i - 1] + dt / 12.0 * (-f[i - 2] + 8.0 * f[i - 1] + 5.0 * f[i]);
        }
    }
    c
}

pub fn evolve(bundle: &OperatorBundle, u0: &StateVector, t_end: f64) -> Result<EnergyTrace> {
    let (n, dt) = quadrature_steps(bundle, t_end);
    let prop = Propagator::new(bundle)?;
    evolve_with(bundle, &prop, u0, n, dt)
}

/// Trace on the uniform grid `j * dt`, `j = 0..=n`.
pub fn evolve_with(bundle: &OperatorBundle, prop: &Propagator, u0: &StateVector, n: usize, dt: f64) -> Result<EnergyTrace> {
    if !(t_ok(dt)) || n == 0 {
        return Err(Error::Invalid("time grid needs dt > 0 and at least one step".into()));
    }
    if u0.parts.len() != bundle.blocks.len() {
        return Err(Error::Invalid("state layout does not match the bundle".into()));
    }
    let stride = (n + 1).div_ceil(MAX_SNAPSHOTS).max(1);
    let mut times = Vec::with_capacity(n + 1);
    let mut energy = Vec::with_capacity(n + 1);
    let mut rate = Vec::with_capacity(n + 1);
    let mut snapshots = Vec::new();
    let hat0 = prop.to_hat(u0);
    // per-block stepping: eigen coefficients or one-step exponential
    enum Stepper {
        Eigen { coeff: CVec, vectors: CMat, step: CVec },
        Expm { step: CMat, x: CVec },
    }
    let mut steppers = Vec::with_capacity(hat0.len());
    for (p, x) in prop.blocks.iter().zip(&hat0) {
        steppers.push(match p {
            BlockPropagator::Eigen { vectors, inverse, values } => Stepper::Eigen {
                coeff: inverse.dot(x),
                vectors: vectors.clone(),
                step: CVec::from_shape_fn(values.len(), |i| (values[i] * dt).exp()),
            },
            BlockPropagator::Expm { generator } => Stepper::Expm { step: linalg::expm(&generator.mapv(|z| z * dt))?, x: x.clone() },
        });
    }
    for j in 0..=n {
        let t = j as f64 * dt;
        let hat: Vec<CVec> = steppers
            .iter()
            .map(|s| match s {
                Stepper::Eigen { coeff, vectors, .. } => vectors.dot(coeff),
                Stepper::Expm { x, .. } => x.clone(),
            })
            .collect();
        let mut e = 0.0;
        let mut r = 0.0;
        for (x, g) in hat.iter().zip(&prop.generators) {
            e += x.iter().map(|z| z.norm_sqr()).sum::<f64>();
            let gx = g.dot(x);
            r -= gx.iter().zip(x).map(|(a, b)| (a * b.conj()).re).sum::<f64>();
        }
        times.push(t);
        energy.push(0.5 * e);
        rate.push(r);
        if j % stride == 0 || j == n {
            snapshots.push((t, prop.from_hat(u0.formulation, hat)));
        }
        for s in steppers.iter_mut() {
            match s {
                Stepper::Eigen { coeff, step, .. } => coeff.iter_mut().zip(step.iter()).for_each(|(c, e)| *c *= e),
                Stepper::Expm { step, x } => *x = step.dot(x),
            }
        }
    }
    let cumulative_dissipation = cumulative_simpson(&rate, dt);
    Ok(EnergyTrace {
        times,
        energy,
        dissipation_rate: rate,
        cumulative_dissipation,
        snapshots,
        propagator: prop.kind,
        max_condition: prop.max_condition,
        dt,
    })
}

fn t_ok(dt: f64) -> bool {
    dt > 0.0 && dt.is_finite()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentRule {
    /// `f(Lambda)` on both components (even profiles).
    Both,
    /// `f(Lambda)` on the first component, zero on the second: the
    /// one-sided window in the P picture.
    FirstOnly,
}

/// Diagonal multiplier `f(sqrt(lambda^2 + m))` over the model's modes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectralFilter {
    pub m: f64,
    pub values: Vec<f64>,
    pub rule: ComponentRule,
}

impl SpectralFilter {
    pub fn new(model: &ManifoldModel, m: f64, f: &dyn Fn(f64) -> f64, rule: ComponentRule) -> Self {
        SpectralFilter { m, values: model.shifted_eigenvalues(m).into_iter().map(f).collect(), rule }
    }

    pub fn identity(model: &ManifoldModel, m: f64) -> Self {
        Self::new(model, m, &|_| 1.0, ComponentRule::Both)
    }

    /// Energy window `chi((h s - 1) / eps)` with `chi` the unit cutoff below.
    pub fn window(model: &ManifoldModel, m: f64, h: f64, eps: f64, rule: ComponentRule) -> Self {
        Self::new(model, m, &|s| window_profile((h * s - 1.0) / eps), rule)
    }
}

/// Smooth `chi` with `chi(0) = 1`, `chi = 1` on `[-1/2, 1/2]` and support
/// in `[-0.8, 0.8]`.
pub fn window_profile(s: f64) -> f64 {
    let a = s.abs();
    if a <= 0.5 {
        1.0
    } else {
        crate::damping::level_cutoff(1.0 + (a - 0.5) / 0.3)
    }
}

pub fn apply_filter(filter: &SpectralFilter, bundle: &OperatorBundle, state: &StateVector) -> Result<StateVector> {
    if state.parts.len() != bundle.blocks.len() {
        return Err(Error::Invalid("state layout does not match the bundle".into()));
    }
    let mut parts = Vec::with_capacity(state.parts.len());
    for (b, x) in bundle.blocks.iter().zip(&state.parts) {
        let d = block_multiplier(filter, b)?;
        parts.push(CVec::from_shape_fn(x.len(), |i| x[i] * d[i]));
    }
    Ok(StateVector { formulation: state.formulation, parts })
}

/// Diagonal of the filter on one block's rows.
pub fn block_multiplier(filter: &SpectralFilter, b: &Block) -> Result<Vec<f64>> {
    b.row_map()
        .into_iter()
        .map(|(p, comp)| {
            let v = filter.values[b.model_index[p]];
            match (comp, filter.rule) {
                (0, _) | (1, ComponentRule::Both) | (2, ComponentRule::Both) => Ok(v),
                (1, ComponentRule::FirstOnly) => Ok(0.0),
                _ => Err(Error::Invalid("one-sided filters are not defined on the symmetric zero mode".into())),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundCheck {
    pub measured: f64,
    pub bound: f64,
    pub holds: bool,
}

/// `||e^{itP_2} - e^{itP_1}||` against `t ||B_2 - B_1||` (P picture, same
/// model and mass).
pub fn semigroup_perturbation_gap(p1: &OperatorBundle, p2: &OperatorBundle, t: f64) -> Result<BoundCheck> {
    if !p1.is_p_type() || !p2.is_p_type() || p1.blocks.len() != p2.blocks.len() || p1.m != p2.m {
        return Err(Error::Invalid("perturbation gap needs two P bundles on the same model and mass".into()));
    }
    let e1 = Propagator::new(p1)?.matrices(t)?;
    let e2 = Propagator::new(p2)?.matrices(t)?;
    let mut gap: f64 = 0.0;
    let mut db: f64 = 0.0;
    for ((a, b), (x, y)) in e1.iter().zip(&e2).zip(p1.blocks.iter().zip(&p2.blocks)) {
        gap = gap.max(linalg::spectral_norm(&(a - b))?);
        // Q = (B/2)[[1,1],[1,1]] has norm ||B||; read B off the upper-right block
        let n = x.n_modes();
        let d = (&y.matrix - &x.matrix).slice(ndarray::s![..n, n..]).mapv(|z| z * C64::new(0.0, -2.0));
        db = db.max(linalg::spectral_norm(&d)?);
    }
    let bound = t * db;
    Ok(BoundCheck { measured: gap, bound, holds: gap <= bound * (1.0 + 1e-9) + 1e-13 })
}

/// `||e^{tG} A - A e^{tG}||` against `t ||[G, A]||` (contraction case),
/// with `A` given per block in weighted coordinates.
pub fn commutator_growth(bundle: &OperatorBundle, a: &[CMat], t: f64) -> Result<BoundCheck> {
    if a.len() != bundle.blocks.len() {
        return Err(Error::Invalid("one matrix per block expected".into()));
    }
    let prop = Propagator::new(bundle)?;
    let e = prop.matrices(t)?;
    let mut lhs: f64 = 0.0;
    let mut comm: f64 = 0.0;
    for ((et, am), g) in e.iter().zip(a).zip(&prop.generators) {
        lhs = lhs.max(linalg::spectral_norm(&(et.dot(am) - am.dot(et)))?);
        comm = comm.max(linalg::spectral_norm(&(g.dot(am) - am.dot(g)))?);
    }
    let bound = t * comm;
    Ok(BoundCheck { measured: lhs, bound, holds: lhs <= bound * (1.0 + 1e-9) + 1e-12 })
}
