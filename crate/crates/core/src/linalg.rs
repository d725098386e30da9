//! Dense complex linear algebra helpers on top of LAPACK.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::{Eig, Eigh, Factorize, Inverse, Norm, Solve, SVD, UPLO};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;
pub type CMat = Array2<C64>;
pub type CVec = Array1<C64>;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Above this size dense SVD is replaced by iterative schemes.
pub const DENSE_SVD_LIMIT: usize = 1500;

/// Above this size `spectral_norm` iterates instead of taking a full SVD.
pub const NORM_DENSE_LIMIT: usize = 400;

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cvec(rng: &mut ChaCha8Rng, n: usize) -> CVec {
    CVec::from_shape_fn(n, |_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
}

pub fn identity(n: usize) -> CMat {
    CMat::eye(n)
}

pub fn diag(d: &[C64]) -> CMat {
    let mut m = CMat::zeros((d.len(), d.len()));
    for (i, v) in d.iter().enumerate() {
        m[[i, i]] = *v;
    }
    m
}

pub fn adjoint(a: &CMat) -> CMat {
    a.t().mapv(|z| z.conj())
}

pub fn vec_norm(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn frobenius(a: &CMat) -> f64 {
    a.norm_l2()
}

/// `diag(l) * a * diag(r)` without forming the diagonals.
pub fn scale_rows_cols(a: &CMat, l: &[f64], r: &[f64]) -> CMat {
    let mut out = a.clone();
    for ((i, j), z) in out.indexed_iter_mut() {
        *z *= l[i] * r[j];
    }
    out
}

pub fn singular_values(a: &CMat) -> Result<Array1<f64>> {
    let (_, s, _) = a.svd(false, false)?;
    Ok(s)
}

/// Largest singular value. Golub-Kahan-Lanczos bidiagonalization with full
/// reorthogonalization above `NORM_DENSE_LIMIT`.
pub fn spectral_norm(a: &CMat) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    if a.nrows().max(a.ncols()) <= NORM_DENSE_LIMIT {
        let s = singular_values(a)?;
        return Ok(s.iter().cloned().fold(0.0, f64::max));
    }
    lanczos_norm(a)
}

fn lanczos_norm(a: &CMat) -> Result<f64> {
    let adj = adjoint(a).as_standard_layout().into_owned();
    let max_steps = a.nrows().min(a.ncols()).min(400);
    let mut r = rng(0x5eed);
    let mut v = random_cvec(&mut r, a.ncols());
    let nv = vec_norm(&v);
    v.mapv_inplace(|z| z / nv);
    let (mut us, mut vs): (Vec<CVec>, Vec<CVec>) = (Vec::new(), Vec::new());
    let (mut alpha, mut beta): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    let mut est = 0.0;
    let orth = |x: &mut CVec, basis: &[CVec]| {
        for _ in 0..2 {
            for q in basis {
                let d: C64 = q.iter().zip(x.iter()).map(|(a, b)| a.conj() * b).sum();
                x.zip_mut_with(q, |xi, qi| *xi -= d * qi);
            }
        }
    };
    for _ in 0..max_steps {
        let mut u = a.dot(&v);
        orth(&mut u, &us);
        let al = vec_norm(&u);
        alpha.push(al);
        vs.push(v.clone());
        if al == 0.0 {
            break;
        }
        u.mapv_inplace(|z| z / al);
        let mut w = adj.dot(&u);
        us.push(u);
        orth(&mut w, &vs);
        let be = vec_norm(&w);
        let k = alpha.len();
        let bidiag = CMat::from_shape_fn((k, k), |(i, j)| {
            if i == j {
                c(alpha[i])
            } else if j == i + 1 {
                c(beta[i])
            } else {
                c(0.0)
            }
        });
        let (x, sv, _) = bidiag.svd(true, false)?;
        let next = sv[0];
        let x = x.expect("left vectors requested");
        // ||A^* u - sigma v|| for the top Ritz pair bounds the error in sigma
        let residual = be * x[[k - 1, 0]].norm();
        let done = residual <= 1e-12 * next || (next - est).abs() <= 1e-15 * next;
        est = next;
        if done {
            break;
        }
        beta.push(be);
        v = w.mapv(|z| z / be);
    }
    Ok(est)
}

/// Largest row or column 2-norm, a lower bound for the spectral norm within
/// a factor `sqrt(n)`, in `O(n^2)`.
pub fn norm_lower_bound(a: &CMat) -> f64 {
    let rows = a.rows().into_iter().map(|r| r.iter().map(|z| z.norm_sqr()).sum::<f64>()).fold(0.0, f64::max);
    let cols = a.columns().into_iter().map(|r| r.iter().map(|z| z.norm_sqr()).sum::<f64>()).fold(0.0, f64::max);
    rows.max(cols).sqrt()
}

/// Smallest singular value; shifted inverse iteration on `a^* a` for large `a`.
pub fn sigma_min(a: &CMat) -> Result<f64> {
    let n = a.nrows();
    if n <= DENSE_SVD_LIMIT {
        let s = singular_values(a)?;
        return Ok(s.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    sigma_min_iterative(a)
}

pub(crate) fn sigma_min_iterative(a: &CMat) -> Result<f64> {
    let n = a.nrows();
    let lu = a.factorize()?;
    let mut r = rng(0x51a);
    let mut v = random_cvec(&mut r, n);
    let mut prev = 0.0;
    let mut est = f64::INFINITY;
    for _ in 0..200 {
        let nv = vec_norm(&v);
        v.mapv_inplace(|z| z / nv);
        // (a^* a)^{-1} v = a^{-1} a^{-*} v
        let y = lu.solve_h(&v)?;
        let x = lu.solve(&y)?;
        let growth = vec_norm(&x);
        est = 1.0 / growth.sqrt();
        v = x;
        if (est - prev).abs() <= 1e-10 * est {
            break;
        }
        prev = est;
    }
    Ok(est)
}

/// Minimum eigenvalue of a Hermitian matrix.
pub fn hermitian_min_eig(a: &CMat) -> Result<f64> {
    let (w, _) = a.eigh(UPLO::Lower)?;
    Ok(w.iter().cloned().fold(f64::INFINITY, f64::min))
}

pub struct EigenDecomposition {
    pub values: CVec,
    pub vectors: CMat,
    /// 2-norm condition number of the (unit-column) eigenvector matrix.
    pub condition: f64,
}

pub fn eig(a: &CMat) -> Result<EigenDecomposition> {
    let (values, vectors) = a.eig()?;
    let s = singular_values(&vectors)?;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    Ok(EigenDecomposition { values, vectors, condition })
}

pub fn eigenvalues(a: &CMat) -> Result<CVec> {
    let (values, _) = a.eig()?;
    Ok(values)
}

pub fn inverse(a: &CMat) -> Result<CMat> {
    Ok(a.inv()?)
}

pub fn solve(a: &CMat, b: &CVec) -> Result<CVec> {
    Ok(a.solve(b)?)
}

fn one_norm(a: &CMat) -> f64 {
    a.axis_iter(Axis(1)).map(|col| col.iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max)
}

/// Matrix exponential by Pade(13) scaling and squaring.
pub fn expm(a: &CMat) -> Result<CMat> {
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    const THETA13: f64 = 5.371920351148152;
    let n = a.nrows();
    if n == 0 {
        return Ok(a.clone());
    }
    let norm = one_norm(a);
    let squarings = if norm > THETA13 { (norm / THETA13).log2().ceil() as i32 } else { 0 };
    let scale = 0.5f64.powi(squarings);
    let a1 = a.mapv(|z| z * scale);
    let id = identity(n);
    let a2 = a1.dot(&a1);
    let a4 = a2.dot(&a2);
    let a6 = a4.dot(&a2);
    let lin = |c6: f64, c4: f64, c2: f64, c0: f64| -> CMat {
        let mut m = a6.mapv(|z| z * c6) + &a4.mapv(|z| z * c4) + &a2.mapv(|z| z * c2);
        if c0 != 0.0 {
            m = m + &id.mapv(|z| z * c0);
        }
        m
    };
    let u_inner = a6.dot(&lin(B[13], B[11], B[9], 0.0)) + &lin(B[7], B[5], B[3], B[1]);
    let u = a1.dot(&u_inner);
    let v = a6.dot(&lin(B[12], B[10], B[8], 0.0)) + &lin(B[6], B[4], B[2], B[0]);
    let p = &v + &u;
    let q = &v - &u;
    let lu = q.factorize()?;
    let mut r = CMat::zeros((n, n));
    for j in 0..n {
        let col = lu.solve(&p.column(j).to_owned())?;
        r.column_mut(j).assign(&col);
    }
    for _ in 0..squarings {
        r = r.dot(&r);
    }
    Ok(r)
}

/// Copies `src` into the block of `dst` starting at `(r0, c0)`.
pub fn put_block(dst: &mut CMat, r0: usize, c0: usize, src: ArrayView2<C64>) {
    let (nr, nc) = src.dim();
    dst.slice_mut(s![r0..r0 + nr, c0..c0 + nc]).assign(&src);
}

pub fn is_hermitian(a: &CMat, tol: f64) -> bool {
    let n = a.nrows();
    let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1.0);
    for i in 0..n {
        for j in 0..n {
            if (a[[i, j]] - a[[j, i]].conj()).norm() > tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn check_finite(a: &CMat, what: &str) -> Result<()> {
    if a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::Linalg(format!("non-finite entries in {what}")))
    }
}
