//! Truncated operator formulations of the damped Klein-Gordon / wave system,
//! the conjugation maps between them, the `m = 0` kernel projector and the
//! energy-cutoff / diagonalization operators.
//!
//! Row layout of a block with `n` modes: first component over the modes, then
//! the second component. The `+` spaces drop the zero mode from the first
//! component; `P_plus` stores the zero-mode pair as the single symmetric
//! direction `(e_0, e_0)/sqrt 2` in its last row.

use ndarray::s;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_1_SQRT_2;

use crate::damping::{level_cutoff, multiplication_matrix, DampingProfile, MultiplicationOperator};
use crate::error::{Error, Result};
use crate::geometry::{ManifoldKind, ManifoldModel, Mode};
use crate::linalg::{self, c, CMat, CVec, C64, I};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Formulation {
    #[serde(rename = "A_m")]
    AM,
    #[serde(rename = "Atilde_m")]
    AtildeM,
    #[serde(rename = "P_m")]
    PM,
    #[serde(rename = "A_plus")]
    APlus,
    #[serde(rename = "Atilde_plus")]
    AtildePlus,
    #[serde(rename = "P_plus")]
    PPlus,
    #[serde(rename = "bold_A")]
    BoldA,
    #[serde(rename = "P_cut")]
    PCut,
    #[serde(rename = "P_diag")]
    PDiag,
}

impl Formulation {
    /// The semigroup generator is `i * matrix` for the P family and the
    /// matrix itself otherwise.
    pub fn is_p_type(self) -> bool {
        matches!(self, Formulation::PM | Formulation::PPlus | Formulation::PCut | Formulation::PDiag)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Formulation::AM => "A_m",
            Formulation::AtildeM => "Atilde_m",
            Formulation::PM => "P_m",
            Formulation::APlus => "A_plus",
            Formulation::AtildePlus => "Atilde_plus",
            Formulation::PPlus => "P_plus",
            Formulation::BoldA => "bold_A",
            Formulation::PCut => "P_cut",
            Formulation::PDiag => "P_diag",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let all = [
            Formulation::AM,
            Formulation::AtildeM,
            Formulation::PM,
            Formulation::APlus,
            Formulation::AtildePlus,
            Formulation::PPlus,
            Formulation::BoldA,
            Formulation::PCut,
            Formulation::PDiag,
        ];
        all.into_iter().find(|f| f.tag() == s).ok_or_else(|| Error::Invalid(format!("unknown formulation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    Full,
    DropZeroFirst,
    PlusSymmetric,
}

#[derive(Clone, Debug)]
pub struct Block {
    /// Common `k_y` of the block (0 for unblocked bundles).
    pub ky: i64,
    pub modes: Vec<Mode>,
    /// Position of each block mode in the model's mode list.
    pub model_index: Vec<usize>,
    /// `sqrt(lambda^2 + m)` per mode.
    pub lambda: Vec<f64>,
    pub zero_pos: Option<usize>,
    pub layout: Layout,
    pub matrix: CMat,
    /// Square root of the diagonal inner-product weight, per row.
    pub weight: Vec<f64>,
}

impl Block {
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Generator in plain coordinates: `S G S^{-1}` with `G` the semigroup generator.
    pub fn generator_hat(&self, p_type: bool) -> CMat {
        let inv: Vec<f64> = self.weight.iter().map(|w| 1.0 / w).collect();
        let g = linalg::scale_rows_cols(&self.matrix, &self.weight, &inv);
        if p_type {
            g.mapv(|z| z * I)
        } else {
            g
        }
    }

    /// For each row: the mode position in the block and the component
    /// (0 first, 1 second, 2 the symmetric zero-mode direction of `P_plus`).
    pub fn row_map(&self) -> Vec<(usize, u8)> {
        let first = self.first_rows();
        let mut out = vec![(0, 0); self.dim()];
        for (p, r) in &first {
            out[*r] = (*p, 0);
        }
        let off = first.len();
        match (self.layout, self.zero_pos) {
            (Layout::PlusSymmetric, Some(z)) => {
                for (k, (p, _)) in first.iter().enumerate() {
                    out[off + k] = (*p, 1);
                }
                out[2 * off] = (z, 2);
            }
            _ => {
                for p in 0..self.n_modes() {
                    out[off + p] = (p, 1);
                }
            }
        }
        out
    }

    /// Indices of first-component rows for nonzero modes, in mode order.
    fn first_rows(&self) -> Vec<(usize, usize)> {
        // (mode position, row)
        let n = self.n_modes();
        match (self.layout, self.zero_pos) {
            (Layout::Full, _) | (_, None) => (0..n).map(|p| (p, p)).collect(),
            (_, Some(z)) => (0..n).filter(|p| *p != z).enumerate().map(|(r, p)| (p, r)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OperatorBundle {
    pub formulation: Formulation,
    pub m: f64,
    pub kind: ManifoldKind,
    pub cutoff: usize,
    pub blocked: bool,
    /// `k_y` blocks omitted on request (blocked bundles only).
    pub omitted_blocks: Vec<i64>,
    pub blocks: Vec<Block>,
    /// Spectral norm of the truncated multiplication matrix.
    pub b_norm: f64,
    pub b_sup: f64,
    pub b_tail_mass: f64,
    pub b_aliasing: f64,
    /// Semiclassical parameter of `P_cut` / `P_diag`.
    pub h: Option<f64>,
}

impl OperatorBundle {
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(Block::dim).sum()
    }

    pub fn is_p_type(&self) -> bool {
        self.formulation.is_p_type()
    }

    /// Largest rescaled eigenvalue `sqrt(lambda^2+m)` kept in the bundle.
    pub fn max_lambda(&self) -> f64 {
        self.blocks.iter().flat_map(|b| b.lambda.iter().cloned()).fold(0.0, f64::max)
    }

    /// Block-diagonal assembly of the full matrix (small bundles only).
    pub fn dense_matrix(&self) -> CMat {
        let n = self.dim();
        let mut out = CMat::zeros((n, n));
        let mut off = 0;
        for b in &self.blocks {
            linalg::put_block(&mut out, off, off, b.matrix.view());
            off += b.dim();
        }
        out
    }

    pub fn dense_weight(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.weight.iter().cloned()).collect()
    }

    pub fn zero_state(&self) -> StateVector {
        StateVector { formulation: self.formulation, parts: self.blocks.iter().map(|b| CVec::zeros(b.dim())).collect() }
    }

    /// State with first component `u` and second `v`, given as coefficient
    /// vectors over the model's modes. Entries of omitted blocks are dropped.
    pub fn state_from_components(&self, u: &[C64], v: &[C64]) -> Result<StateVector> {
        if self.formulation == Formulation::PPlus {
            return Err(Error::Invalid("use conjugate() to build P_plus states".into()));
        }
        let mut parts = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut x = CVec::zeros(b.dim());
            for (p, r) in b.first_rows() {
                x[r] = u[b.model_index[p]];
            }
            if let Some(z) = b.zero_pos {
                if b.layout != Layout::Full && u[b.model_index[z]].norm() > 0.0 {
                    return Err(Error::Domain("zero-mode component must vanish in a `+` space".into()));
                }
            }
            let off = b.first_rows().len();
            for p in 0..b.n_modes() {
                x[off + p] = v[b.model_index[p]];
            }
            parts.push(x);
        }
        Ok(StateVector { formulation: self.formulation, parts })
    }

    /// Inverse of `state_from_components` (first and second components over
    /// all model modes; omitted blocks read as zero).
    pub fn components(&self, state: &StateVector, n_modes: usize) -> (Vec<C64>, Vec<C64>) {
        let mut u = vec![C64::new(0.0, 0.0); n_modes];
        let mut v = vec![C64::new(0.0, 0.0); n_modes];
        for (b, x) in self.blocks.iter().zip(&state.parts) {
            match b.layout {
                Layout::PlusSymmetric if b.zero_pos.is_some() => {
                    let z = b.zero_pos.unwrap();
                    let rows = b.first_rows();
                    let nf = rows.len();
                    for (k, (p, r)) in rows.iter().enumerate() {
                        u[b.model_index[*p]] = x[*r];
                        v[b.model_index[*p]] = x[nf + k];
                    }
                    let sym = x[2 * nf] * FRAC_1_SQRT_2;
                    u[b.model_index[z]] = sym;
                    v[b.model_index[z]] = sym;
                }
                _ => {
                    let rows = b.first_rows();
                    for (p, r) in &rows {
                        u[b.model_index[*p]] = x[*r];
                    }
                    let off = rows.len();
                    for p in 0..b.n_modes() {
                        v[b.model_index[p]] = x[off + p];
                    }
                }
            }
        }
        (u, v)
    }

    /// Energy `||S U||^2 / 2`.
    pub fn energy(&self, state: &StateVector) -> f64 {
        0.5 * self
            .blocks
            .iter()
            .zip(&state.parts)
            .map(|(b, x)| x.iter().zip(&b.weight).map(|(z, w)| z.norm_sqr() * w * w).sum::<f64>())
            .sum::<f64>()
    }

    pub fn apply(&self, state: &StateVector) -> StateVector {
        StateVector { formulation: self.formulation, parts: self.blocks.iter().zip(&state.parts).map(|(b, x)| b.matrix.dot(x)).collect() }
    }

    /// `Re <G U, U>` in the bundle inner product (G the semigroup generator).
    pub fn dissipation_form(&self, state: &StateVector) -> f64 {
        let mut acc = 0.0;
        for (b, x) in self.blocks.iter().zip(&state.parts) {
            let gx = b.matrix.dot(x);
            let mut s = C64::new(0.0, 0.0);
            for i in 0..x.len() {
                s += gx[i] * x[i].conj() * b.weight[i] * b.weight[i];
            }
            if self.is_p_type() {
                s *= I;
            }
            acc += s.re;
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub formulation: Formulation,
    pub parts: Vec<CVec>,
}

impl StateVector {
    pub fn scale(&self, a: C64) -> StateVector {
        StateVector { formulation: self.formulation, parts: self.parts.iter().map(|x| x.mapv(|z| z * a)).collect() }
    }

    pub fn sub(&self, other: &StateVector) -> StateVector {
        StateVector { formulation: self.formulation, parts: self.parts.iter().zip(&other.parts).map(|(a, b)| a - b).collect() }
    }

    /// Plain (unweighted) Euclidean norm of the coefficients.
    pub fn plain_norm(&self) -> f64 {
        self.parts.iter().map(|x| x.iter().map(|z| z.norm_sqr()).sum::<f64>()).sum::<f64>().sqrt()
    }
}

fn check_mass(m: f64, f: Formulation) -> Result<()> {
    if !(m >= 0.0) || !m.is_finite() {
        return Err(Error::Invalid(format!("mass must be finite and >= 0, got {m}")));
    }
    match f {
        Formulation::AM if m <= 0.0 => Err(Error::Invalid("A_m needs m > 0".into())),
        Formulation::APlus | Formulation::AtildePlus | Formulation::PPlus | Formulation::BoldA if m != 0.0 => {
            Err(Error::Invalid(format!("{} is the m = 0 operator; got m = {m}", f.tag())))
        }
        _ => Ok(()),
    }
}

/// Energy cutoff shapes: `chi_0` is 1 on `|s-1| <= 1/8` and vanishes for
/// `|s-1| >= 1/4`; `chi~_0` is 1 on `|s-1| <= 1/4` and vanishes for `|s-1| >= 1/2`.
pub fn chi0(s: f64) -> f64 {
    level_cutoff((s - 1.0) / 0.125)
}

pub fn chi0_wide(s: f64) -> f64 {
    level_cutoff((s - 1.0) / 0.25)
}

#[derive(Clone)]
struct BlockInput<'a> {
    ky: i64,
    modes: Vec<Mode>,
    model_index: Vec<usize>,
    lambda: Vec<f64>,
    zero_pos: Option<usize>,
    b: &'a CMat,
}

fn build_block(inp: BlockInput, f: Formulation, h: Option<f64>) -> Block {
    let n = inp.modes.len();
    let lam = &inp.lambda;
    let b = inp.b;
    let mut layout = Layout::Full;
    let (matrix, weight) = match f {
        Formulation::AM | Formulation::BoldA => {
            let mut a = CMat::zeros((2 * n, 2 * n));
            for i in 0..n {
                a[[i, n + i]] = c(1.0);
                a[[n + i, i]] = c(-lam[i] * lam[i]);
            }
            a.slice_mut(s![n.., n..]).assign(&b.mapv(|z| -z));
            let w: Vec<f64> = if f == Formulation::BoldA {
                inp.modes.iter().map(|k| (k.norm().powi(2) + 1.0).sqrt()).chain((0..n).map(|_| 1.0)).collect()
            } else {
                lam.iter().cloned().chain((0..n).map(|_| 1.0)).collect()
            };
            (a, w)
        }
        Formulation::AtildeM => {
            let mut a = CMat::zeros((2 * n, 2 * n));
            for i in 0..n {
                a[[i, n + i]] = c(lam[i]);
                a[[n + i, i]] = c(-lam[i]);
            }
            a.slice_mut(s![n.., n..]).assign(&b.mapv(|z| -z));
            (a, vec![1.0; 2 * n])
        }
        Formulation::PM | Formulation::PCut | Formulation::PDiag => {
            let cut: Vec<f64> = match (f, h) {
                (Formulation::PM, _) => vec![1.0; n],
                (_, Some(h)) => lam.iter().map(|l| chi0_wide(h * l)).collect(),
                _ => unreachable!("P_cut/P_diag are built with h"),
            };
            let q = CMat::from_shape_fn((n, n), |(i, j)| b[[i, j]] * 0.5 * cut[i] * cut[j] * I);
            let mut p = CMat::zeros((2 * n, 2 * n));
            p.slice_mut(s![..n, ..n]).assign(&q);
            p.slice_mut(s![n.., n..]).assign(&q);
            if f != Formulation::PDiag {
                p.slice_mut(s![..n, n..]).assign(&q);
                p.slice_mut(s![n.., ..n]).assign(&q);
            }
            for i in 0..n {
                p[[i, i]] += c(lam[i] * cut[i]);
                p[[n + i, n + i]] -= c(lam[i] * cut[i]);
            }
            (p, vec![1.0; 2 * n])
        }
        Formulation::APlus | Formulation::AtildePlus => match inp.zero_pos {
            None => {
                let inner = if f == Formulation::APlus { Formulation::AM } else { Formulation::AtildeM };
                let blk = build_block(inp.clone(), inner, h);
                (blk.matrix, blk.weight)
            }
            Some(z) => {
                layout = Layout::DropZeroFirst;
                let first: Vec<usize> = (0..n).filter(|p| *p != z).collect();
                let nf = first.len();
                let mut a = CMat::zeros((nf + n, nf + n));
                for (r, &p) in first.iter().enumerate() {
                    if f == Formulation::APlus {
                        a[[r, nf + p]] = c(1.0);
                        a[[nf + p, r]] = c(-lam[p] * lam[p]);
                    } else {
                        a[[r, nf + p]] = c(lam[p]);
                        a[[nf + p, r]] = c(-lam[p]);
                    }
                }
                a.slice_mut(s![nf.., nf..]).assign(&b.mapv(|z| -z));
                let w: Vec<f64> = if f == Formulation::APlus {
                    first.iter().map(|p| lam[*p]).chain((0..n).map(|_| 1.0)).collect()
                } else {
                    vec![1.0; nf + n]
                };
                (a, w)
            }
        },
        Formulation::PPlus => match inp.zero_pos {
            None => {
                let blk = build_block(inp.clone(), Formulation::PM, h);
                (blk.matrix, blk.weight)
            }
            Some(z) => {
                layout = Layout::PlusSymmetric;
                let full = build_block(
                    BlockInput {
                        ky: inp.ky,
                        modes: inp.modes.clone(),
                        model_index: inp.model_index.clone(),
                        lambda: lam.clone(),
                        zero_pos: Some(z),
                        b,
                    },
                    Formulation::PM,
                    h,
                );
                let q = plus_isometry(n, z);
                let p = linalg::adjoint(&q).dot(&full.matrix).dot(&q);
                let d = p.nrows();
                (p, vec![1.0; d])
            }
        },
    };
    Block { ky: inp.ky, modes: inp.modes, model_index: inp.model_index, lambda: inp.lambda, zero_pos: inp.zero_pos, layout, matrix, weight }
}

/// Columns: `(e_f, 0)` and `(0, e_f)` for nonzero modes `f`, then `(e_0, e_0)/sqrt 2`.
fn plus_isometry(n: usize, z: usize) -> CMat {
    let first: Vec<usize> = (0..n).filter(|p| *p != z).collect();
    let nf = first.len();
    let mut q = CMat::zeros((2 * n, 2 * nf + 1));
    for (k, &p) in first.iter().enumerate() {
        q[[p, k]] = c(1.0);
        q[[n + p, nf + k]] = c(1.0);
    }
    q[[z, 2 * nf]] = c(FRAC_1_SQRT_2);
    q[[n + z, 2 * nf]] = c(FRAC_1_SQRT_2);
    q
}

/// Assembly options beyond the formulation tag.
#[derive(Clone, Copy, Debug, Default)]
pub struct AssembleOptions {
    /// Semiclassical parameter for `P_cut` / `P_diag`.
    pub h: Option<f64>,
}

pub fn assemble(model: &ManifoldModel, b: &DampingProfile, m: f64, f: Formulation) -> Result<OperatorBundle> {
    let mult = multiplication_matrix(model, b)?;
    assemble_with(model, &mult, m, f, AssembleOptions::default(), &|_| true)
}

pub fn assemble_h(model: &ManifoldModel, b: &DampingProfile, m: f64, f: Formulation, h: f64) -> Result<OperatorBundle> {
    let mult = multiplication_matrix(model, b)?;
    assemble_with(model, &mult, m, f, AssembleOptions { h: Some(h) }, &|_| true)
}

/// Assembly from a precomputed multiplication operator. Profiles independent
/// of the second coordinate on the torus give one block per `k_y`; `keep`
/// selects which of those blocks are built.
pub fn assemble_with(
    model: &ManifoldModel,
    mult: &MultiplicationOperator,
    m: f64,
    f: Formulation,
    opts: AssembleOptions,
    keep: &dyn Fn(i64) -> bool,
) -> Result<OperatorBundle> {
    check_mass(m, f)?;
    if matches!(f, Formulation::PCut | Formulation::PDiag) && !opts.h.map_or(false, |h| h > 0.0 && h < 1.0) {
        return Err(Error::Invalid("P_cut / P_diag need h in (0,1)".into()));
    }
    let lam_all = model.shifted_eigenvalues(m);
    let zero = model.zero_index();
    let blocked = model.kind == ManifoldKind::Torus2 && mult.x_only;
    let mut blocks = Vec::new();
    let mut omitted = Vec::new();
    let b_norm;
    if blocked {
        let bb = mult.block(model);
        b_norm = linalg::spectral_norm(&bb)?;
        let k = model.cutoff as i64;
        for ky in -k..=k {
            if !keep(ky) {
                omitted.push(ky);
                continue;
            }
            blocks.push(x_only_block(model, &bb, m, f, opts.h, ky));
        }
    } else {
        let bf = mult.full(model);
        b_norm = linalg::spectral_norm(&bf)?;
        let idx: Vec<usize> = (0..model.n_modes()).collect();
        let inp = BlockInput { ky: 0, modes: model.modes.clone(), lambda: lam_all, model_index: idx, zero_pos: Some(zero), b: &bf };
        blocks.push(build_block(inp, f, opts.h));
    }
    Ok(OperatorBundle {
        formulation: f,
        m,
        kind: model.kind,
        cutoff: model.cutoff,
        blocked,
        omitted_blocks: omitted,
        blocks,
        b_norm,
        b_sup: mult.sup,
        b_tail_mass: mult.tail_mass,
        b_aliasing: mult.aliasing_residual,
        h: opts.h,
    })
}

/// One `k_y` block of a torus bundle for a profile independent of the second
/// coordinate; `bb` is `MultiplicationOperator::block`. Lets callers stream
/// over blocks without holding the whole bundle.
pub fn x_only_block(model: &ManifoldModel, bb: &CMat, m: f64, f: Formulation, h: Option<f64>, ky: i64) -> Block {
    let k = model.cutoff as i64;
    let side = (2 * k + 1) as usize;
    let start = ((ky + k) as usize) * side;
    let idx: Vec<usize> = (start..start + side).collect();
    let zero = model.zero_index();
    let zero_pos = idx.iter().position(|i| *i == zero);
    let inp = BlockInput {
        ky,
        modes: idx.iter().map(|i| model.modes[*i]).collect(),
        lambda: idx.iter().map(|i| (model.eigenvalues[*i].powi(2) + m).sqrt()).collect(),
        model_index: idx,
        zero_pos,
        b: bb,
    };
    build_block(inp, f, h)
}

// ------------------------------------------------------------ conjugations

fn sigma_apply(u: &[C64], v: &[C64]) -> (Vec<C64>, Vec<C64>) {
    // Sigma (u, v) = (u - i v, -u - i v) / sqrt 2
    let p = u.iter().zip(v).map(|(a, b)| (a - I * b) * FRAC_1_SQRT_2).collect();
    let q = u.iter().zip(v).map(|(a, b)| (-a - I * b) * FRAC_1_SQRT_2).collect();
    (p, q)
}

fn sigma_inverse_apply(p: &[C64], q: &[C64]) -> (Vec<C64>, Vec<C64>) {
    // Sigma^{-1} (p, q) = (p - q, i (p + q)) / sqrt 2
    let u = p.iter().zip(q).map(|(a, b)| (a - b) * FRAC_1_SQRT_2).collect();
    let v = p.iter().zip(q).map(|(a, b)| I * (a + b) * FRAC_1_SQRT_2).collect();
    (u, v)
}

/// Moves a state between pictures. Supported moves are the `L_m` and `Sigma`
/// steps (and their compositions) within the `m > 0` family and within the
/// `+` family, plus the inclusions of the `m = 0` full spaces into `+` spaces.
pub fn conjugate(state: &StateVector, from: &OperatorBundle, to: &OperatorBundle, model: &ManifoldModel) -> Result<StateVector> {
    use Formulation::*;
    if state.formulation != from.formulation {
        return Err(Error::Invalid("state does not live in the source bundle".into()));
    }
    if (from.m - to.m).abs() > 0.0 || from.blocks.len() != to.blocks.len() {
        return Err(Error::Invalid("source and target bundles differ in mass or block structure".into()));
    }
    let n = model.n_modes();
    let lam = model.shifted_eigenvalues(from.m);
    let (mut u, mut v) = from.components(state, n);
    // bring everything to the (u, v) picture of the Atilde family
    match from.formulation {
        AM | BoldA | APlus => u.iter_mut().zip(&lam).for_each(|(z, l)| *z *= *l),
        AtildeM | AtildePlus => {}
        PM | PPlus => {
            let (a, b) = sigma_inverse_apply(&u, &v);
            u = a;
            v = b;
        }
        PCut | PDiag => return Err(Error::Invalid("no conjugation defined for cutoff operators".into())),
    }
    let compatible = match (from.formulation, to.formulation) {
        (AM | AtildeM | PM, AM | AtildeM | PM) => true,
        (APlus | AtildePlus | PPlus, APlus | AtildePlus | PPlus) => true,
        (BoldA | AtildeM | PM, APlus | AtildePlus | PPlus) => from.m == 0.0,
        _ => false,
    };
    if !compatible {
        return Err(Error::Invalid(format!("no conjugation from {} to {}", from.formulation.tag(), to.formulation.tag())));
    }
    if from.formulation == BoldA {
        // L = diag(|D|, I) fails to be invertible on constants
        let z = model.zero_index();
        let (u0, _) = from.components(state, n);
        if u0[z].norm() > 0.0 {
            return Err(Error::Domain("zero-mode component must vanish in a `+` space".into()));
        }
    }
    match to.formulation {
        AM | APlus => {
            u.iter_mut().zip(&lam).for_each(|(z, l)| {
                if *l > 0.0 {
                    *z /= *l
                }
            });
            to.state_from_components(&u, &v)
        }
        AtildeM | AtildePlus => to.state_from_components(&u, &v),
        PM => {
            let (p, q) = sigma_apply(&u, &v);
            to.state_from_components(&p, &q)
        }
        PPlus => {
            let z = model.zero_index();
            if u[z].norm() > 1e-14 * (1.0 + u.iter().map(|a| a.norm()).fold(0.0, f64::max)) {
                return Err(Error::Domain("zero-mode component must vanish in a `+` space".into()));
            }
            u[z] = C64::new(0.0, 0.0);
            let (p, q) = sigma_apply(&u, &v);
            plus_state(to, &p, &q)
        }
        _ => unreachable!(),
    }
}

fn plus_state(to: &OperatorBundle, p: &[C64], q: &[C64]) -> Result<StateVector> {
    let mut parts = Vec::new();
    for b in &to.blocks {
        let mut x = CVec::zeros(b.dim());
        match (b.layout, b.zero_pos) {
            (Layout::PlusSymmetric, Some(z)) => {
                let rows = b.first_rows();
                let nf = rows.len();
                for (k, (pp, r)) in rows.iter().enumerate() {
                    x[*r] = p[b.model_index[*pp]];
                    x[nf + k] = q[b.model_index[*pp]];
                }
                let a = p[b.model_index[z]];
                let bq = q[b.model_index[z]];
                if (a - bq).norm() > 1e-12 * (1.0 + a.norm()) {
                    return Err(Error::Domain("state is not in the symmetric `+` subspace".into()));
                }
                x[2 * nf] = (a + bq) * FRAC_1_SQRT_2;
            }
            _ => {
                let n = b.n_modes();
                for pp in 0..n {
                    x[pp] = p[b.model_index[pp]];
                    x[n + pp] = q[b.model_index[pp]];
                }
            }
        }
        parts.push(x);
    }
    Ok(StateVector { formulation: to.formulation, parts })
}

/// `L A L^{-1}` with `L = diag(lambda, 1)`, entrywise.
pub fn l_conjugate(a: &CMat, lambda: &[f64]) -> CMat {
    let n = lambda.len();
    let s: Vec<f64> = lambda.iter().cloned().chain((0..n).map(|_| 1.0)).collect();
    let inv: Vec<f64> = s.iter().map(|x| 1.0 / x).collect();
    linalg::scale_rows_cols(a, &s, &inv)
}

/// `Sigma X Sigma^{-1}` for a 2x2 block matrix `X`, in `O(n^2)`.
pub fn sigma_conjugate(x: &CMat) -> CMat {
    let n = x.nrows() / 2;
    let x11 = x.slice(s![..n, ..n]);
    let x12 = x.slice(s![..n, n..]);
    let x21 = x.slice(s![n.., ..n]);
    let x22 = x.slice(s![n.., n..]);
    // Y = X Sigma^{-1} * sqrt 2
    let y11 = &x11 + &x12.mapv(|z| z * I);
    let y12 = &x12.mapv(|z| z * I) - &x11;
    let y21 = &x21 + &x22.mapv(|z| z * I);
    let y22 = &x22.mapv(|z| z * I) - &x21;
    // Sigma Y * sqrt 2
    let mut out = CMat::zeros((2 * n, 2 * n));
    out.slice_mut(s![..n, ..n]).assign(&((&y11 - &y21.mapv(|z| z * I)) * c(0.5)));
    out.slice_mut(s![..n, n..]).assign(&((&y12 - &y22.mapv(|z| z * I)) * c(0.5)));
    out.slice_mut(s![n.., ..n]).assign(&((-&y11 - &y21.mapv(|z| z * I)) * c(0.5)));
    out.slice_mut(s![n.., n..]).assign(&((-&y12 - &y22.mapv(|z| z * I)) * c(0.5)));
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConjugationResiduals {
    /// `||Atilde - L A L^{-1}||_F / n(Atilde)`
    pub l_residual: f64,
    /// `||i P - Sigma Atilde Sigma^{-1}||_F / n(P)`
    pub sigma_residual: f64,
}

/// Matrix residuals of the two conjugation identities, block by block.
/// `n(X)` is the largest row or column norm, which never exceeds `||X||_2`,
/// so both ratios bound the spectral-norm relative residuals from above.
pub fn conjugation_residuals(model: &ManifoldModel, b: &DampingProfile, m: f64) -> Result<ConjugationResiduals> {
    let mult = multiplication_matrix(model, b)?;
    let opts = AssembleOptions::default();
    let a = assemble_with(model, &mult, m, Formulation::AM, opts, &|_| true)?;
    let at = assemble_with(model, &mult, m, Formulation::AtildeM, opts, &|_| true)?;
    let p = assemble_with(model, &mult, m, Formulation::PM, opts, &|_| true)?;
    let mut l_num = 0.0;
    let mut s_num = 0.0;
    let mut at_norm: f64 = 0.0;
    let mut p_norm: f64 = 0.0;
    for ((ba, bt), bp) in a.blocks.iter().zip(&at.blocks).zip(&p.blocks) {
        let lal = l_conjugate(&ba.matrix, &ba.lambda);
        l_num += (&bt.matrix - &lal).iter().map(|z| z.norm_sqr()).sum::<f64>();
        let sas = sigma_conjugate(&bt.matrix);
        let ip = bp.matrix.mapv(|z| z * I);
        s_num += (&ip - &sas).iter().map(|z| z.norm_sqr()).sum::<f64>();
        at_norm = at_norm.max(linalg::norm_lower_bound(&bt.matrix));
        p_norm = p_norm.max(linalg::norm_lower_bound(&bp.matrix));
    }
    Ok(ConjugationResiduals { l_residual: l_num.sqrt() / at_norm, sigma_residual: s_num.sqrt() / p_norm })
}

// --------------------------------------------------------- m = 0 structure

/// Rank-one projector onto `ker bold_A` in the `bold_A` layout (single block
/// or the `k_y = 0` block of a blocked bundle).
pub fn kernel_projector_bold_a(model: &ManifoldModel, b: &DampingProfile) -> Result<(CMat, f64)> {
    let mult = multiplication_matrix(model, b)?;
    let b0 = mult.coefficients.get([0, 0]).re;
    if !(b0 > 0.0) {
        return Err(Error::Invalid("kernel projector needs a damping with nonzero mean".into()));
    }
    let bundle = assemble_with(model, &mult, 0.0, Formulation::BoldA, AssembleOptions::default(), &|ky| ky == 0)?;
    let blk = &bundle.blocks[0];
    let n = blk.n_modes();
    let z = blk.zero_pos.expect("zero mode block");
    let bm = if bundle.blocked { mult.block(model) } else { mult.full(model) };
    let mut pi = CMat::zeros((2 * n, 2 * n));
    for j in 0..n {
        pi[[z, j]] = bm[[z, j]] / b0;
    }
    pi[[z, n + z]] = c(1.0 / b0);
    Ok((pi, mult.aliasing_residual))
}

/// For random states `U`: ratios `||U - Pi U||^2 / (2 E(U))` in the `bold_A`
/// norm. Returns (min ratio, max ratio); the lower one must be >= 1.
pub fn poincare_wirtinger_ratios(model: &ManifoldModel, b: &DampingProfile, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let (pi, _) = kernel_projector_bold_a(model, b)?;
    let bundle = assemble(model, b, 0.0, Formulation::BoldA)?;
    let blk = bundle.blocks.iter().find(|bl| bl.zero_pos.is_some()).expect("zero block");
    let n = blk.n_modes();
    let mut rng = linalg::rng(seed);
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for _ in 0..samples {
        let x = linalg::random_cvec(&mut rng, 2 * n);
        let e: f64 = 0.5
            * ((0..n).map(|i| x[i].norm_sqr() * blk.modes[i].norm().powi(2)).sum::<f64>()
                + (0..n).map(|i| x[n + i].norm_sqr()).sum::<f64>());
        let r = &x - &pi.dot(&x);
        let nr: f64 = r.iter().zip(&blk.weight).map(|(z, w)| z.norm_sqr() * w * w).sum();
        let ratio = nr / (2.0 * e);
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    Ok((lo, hi))
}

/// Max entry of `e^{itP} - e^{itP_+} Pi_{L2+} - (Pi_0/2)[[1,-1],[-1,1]]` for
/// the `m = 0` operators (block holding the zero mode).
pub fn splitting_residual(model: &ManifoldModel, b: &DampingProfile, t: f64) -> Result<f64> {
    let mult = multiplication_matrix(model, b)?;
    let opts = AssembleOptions::default();
    let only_zero = |ky: i64| ky == 0;
    let p = assemble_with(model, &mult, 0.0, Formulation::PM, opts, &only_zero)?;
    let pp = assemble_with(model, &mult, 0.0, Formulation::PPlus, opts, &only_zero)?;
    let bp = &p.blocks[0];
    let bpp = &pp.blocks[0];
    let n = bp.n_modes();
    let z = bp.zero_pos.expect("zero block");
    let e = linalg::expm(&bp.matrix.mapv(|x| x * I * t))?;
    let ep = linalg::expm(&bpp.matrix.mapv(|x| x * I * t))?;
    let q = plus_isometry(n, z);
    let mut rhs = q.dot(&ep).dot(&linalg::adjoint(&q));
    rhs[[z, z]] += c(0.5);
    rhs[[z, n + z]] -= c(0.5);
    rhs[[n + z, z]] -= c(0.5);
    rhs[[n + z, n + z]] += c(0.5);
    Ok((&e - &rhs).iter().map(|x| x.norm()).fold(0.0, f64::max))
}

// ------------------------------------------------- energy cutoff operators

pub struct DiagonalizationSuite {
    pub h: f64,
    pub nu: f64,
    pub p: OperatorBundle,
    pub p_cut: OperatorBundle,
    pub p_diag: OperatorBundle,
    /// Corrector per block.
    pub corrector: Vec<CMat>,
    /// `chi_0(h Lambda)` per block, repeated on both components.
    pub chi0: Vec<Vec<f64>>,
}

pub fn diagonalization_suite(model: &ManifoldModel, b: &DampingProfile, m: f64, h: f64, nu: f64) -> Result<DiagonalizationSuite> {
    if !(0.0..0.5).contains(&nu) {
        return Err(Error::Invalid(format!("nu must lie in [0, 1/2), got {nu}")));
    }
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::Invalid("h must lie in (0,1)".into()));
    }
    if (model.cutoff as f64) < 2.0 / h {
        return Err(Error::Infeasible(format!("energy window at h = {h} needs K >= {}", (2.0 / h).ceil())));
    }
    let smooth = if nu > 0.0 { crate::damping::mollify(b, crate::damping::MollifierSpec { eps: h.powf(nu) })?.profile } else { b.clone() };
    let mult = multiplication_matrix(model, &smooth)?;
    let all = |_: i64| true;
    let opts = AssembleOptions { h: Some(h) };
    let p = assemble_with(model, &mult, m, Formulation::PM, opts, &all)?;
    let p_cut = assemble_with(model, &mult, m, Formulation::PCut, opts, &all)?;
    let p_diag = assemble_with(model, &mult, m, Formulation::PDiag, opts, &all)?;
    let mut corrector = Vec::new();
    let mut chi = Vec::new();
    for blk in &p.blocks {
        let n = blk.n_modes();
        let bq = blk.matrix.slice(s![..n, n..]).mapv(|z| z * (-I)); // B/2
        let w: Vec<f64> = blk.lambda.iter().map(|l| chi0_wide(h * l) / l).collect();
        let mut k = CMat::zeros((2 * n, 2 * n));
        for i in 0..n {
            for j in 0..n {
                let v = bq[[i, j]] * w[i] * 0.5 * I;
                k[[i, n + j]] = -v;
                k[[n + i, j]] = v;
            }
        }
        corrector.push(k);
        let c0: Vec<f64> = blk.lambda.iter().map(|l| chi0(h * l)).collect();
        chi.push(c0.iter().chain(c0.iter()).cloned().collect());
    }
    Ok(DiagonalizationSuite { h, nu, p, p_cut, p_diag, corrector, chi0: chi })
}
