//! Dense matrix helpers shared by the solvers: block placement, spectral
//! tests, matrix sign iterations and Lyapunov solves.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{MfgError, Result};
use crate::scalar::{lit, to_f64, Real};

pub type Mat<T> = DMatrix<T>;
pub type Vector<T> = DVector<T>;

pub fn zeros<T: Real>(rows: usize, cols: usize) -> Mat<T> {
    Mat::zeros(rows, cols)
}

pub fn eye<T: Real>(n: usize) -> Mat<T> {
    Mat::identity(n, n)
}

/// Copies `src` into `dst` with its top-left corner at `(row, col)`.
pub fn set_block<T: Real>(dst: &mut Mat<T>, row: usize, col: usize, src: &Mat<T>) {
    dst.view_mut((row, col), src.shape()).copy_from(src);
}

pub fn block<T: Real>(src: &Mat<T>, row: usize, col: usize, rows: usize, cols: usize) -> Mat<T> {
    src.view((row, col), (rows, cols)).into_owned()
}

/// Block-diagonal matrix of the given blocks.
pub fn block_diag<T: Real>(blocks: &[&Mat<T>]) -> Mat<T> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        set_block(&mut out, r, c, b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn hstack<T: Real>(blocks: &[&Mat<T>]) -> Mat<T> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack row mismatch");
        set_block(&mut out, 0, c, b);
        c += b.ncols();
    }
    out
}

pub fn vstack<T: Real>(blocks: &[&Mat<T>]) -> Mat<T> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        set_block(&mut out, r, 0, b);
        r += b.nrows();
    }
    out
}

pub fn symmetrize<T: Real>(m: &Mat<T>) -> Mat<T> {
    (m + m.transpose()) * lit::<T>(0.5)
}

pub fn max_abs<T: Real>(m: &Mat<T>) -> T {
    m.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

pub fn asymmetry<T: Real>(m: &Mat<T>) -> T {
    max_abs(&(m - m.transpose()))
}

pub fn check_square<T: Real>(m: &Mat<T>, field: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(MfgError::dims(
            field,
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(m.nrows())
}

pub fn check_shape<T: Real>(m: &Mat<T>, rows: usize, cols: usize, field: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(MfgError::dims(
            field,
            format!("{rows}x{cols}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

pub fn inverse<T: Real>(m: &Mat<T>) -> Result<Mat<T>> {
    m.clone().try_inverse().ok_or(MfgError::SingularSystem {
        condition: f64::INFINITY,
    })
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse<T: Real>(m: &Mat<T>, field: &str) -> Result<Mat<T>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| MfgError::invalid(field, "not positive definite"))?;
    Ok(chol.inverse())
}

/// Pseudo-inverse of a symmetric PSD matrix; singular directions map to zero.
pub fn psd_pseudo_inverse<T: Real>(m: &Mat<T>) -> Mat<T> {
    let scale = max_abs(m);
    if scale == T::zero() {
        return zeros(m.ncols(), m.nrows());
    }
    let eps = scale * lit::<T>(1e-13);
    m.clone()
        .pseudo_inverse(eps)
        .unwrap_or_else(|_| zeros(m.ncols(), m.nrows()))
}

pub fn min_sym_eigenvalue<T: Real>(m: &Mat<T>) -> T {
    if m.nrows() == 0 {
        return T::zero();
    }
    let e = nalgebra::SymmetricEigen::new(symmetrize(m));
    e.eigenvalues.iter().fold(T::max_value().unwrap(), |a, &b| a.min(b))
}

/// QR sweeps allowed per unit of dimension before a Schur attempt is
/// abandoned.
const SCHUR_SWEEPS_PER_DIM: usize = 200;

/// Spectrum through a real Schur decomposition.
///
/// The unshifted-restart QR iteration can cycle on some matrices, so each
/// attempt is capped and retried on a similar matrix (transpose, rescaled,
/// shifted) before falling back to a looser deflation threshold. If every
/// attempt fails the spectrum is reported as NaN.
pub fn eigenvalues<T: Real>(m: &Mat<T>) -> Vec<Complex<T>> {
    let n = m.nrows();
    if n == 0 {
        return Vec::new();
    }
    let cap = SCHUR_SWEEPS_PER_DIM * n.max(4);
    let eps = T::default_epsilon();
    let attempt = |a: Mat<T>, e: T| nalgebra::Schur::try_new(a, e, cap).map(|s| s.complex_eigenvalues());
    if let Some(ev) = attempt(m.clone(), eps) {
        return ev.iter().copied().collect();
    }
    if let Some(ev) = attempt(m.transpose(), eps) {
        return ev.iter().copied().collect();
    }
    let scale = m.amax();
    if scale > T::zero() {
        if let Some(ev) = attempt(m / scale, eps) {
            return ev.iter().map(|z| z * scale).collect();
        }
        let shift = scale * lit::<T>(0.37);
        if let Some(ev) = attempt(m + eye::<T>(n) * shift, eps) {
            return ev.iter().map(|z| z - Complex::new(shift, T::zero())).collect();
        }
    }
    match nalgebra::Schur::try_new(m.clone(), eps.sqrt(), 10 * cap) {
        Some(s) => s.complex_eigenvalues().iter().copied().collect(),
        None => vec![Complex::new(lit::<T>(f64::NAN), lit::<T>(f64::NAN)); n],
    }
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa<T: Real>(m: &Mat<T>) -> T {
    eigenvalues(m).iter().fold(T::min_value().unwrap(), |a, z| {
        #[allow(clippy::eq_op)]
        if a != a || z.re != z.re {
            lit(f64::NAN)
        } else {
            a.max(z.re)
        }
    })
}

pub fn is_hurwitz<T: Real>(m: &Mat<T>) -> bool {
    m.nrows() == 0 || spectral_abscissa(m) < T::zero()
}

pub fn singular_values<T: Real>(m: &Mat<T>) -> Vec<T> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    m.clone().svd(false, false).singular_values.iter().copied().collect()
}

pub fn condition_number<T: Real>(m: &Mat<T>) -> T {
    let sv = singular_values(m);
    let max = sv.iter().fold(T::zero(), |a, &b| a.max(b));
    let min = sv.iter().fold(T::max_value().unwrap(), |a, &b| a.min(b));
    if min == T::zero() {
        T::max_value().unwrap()
    } else {
        max / min
    }
}

/// Numerical rank of a complex matrix, relative to its largest singular value.
pub fn complex_rank<T: Real>(m: &DMatrix<Complex<T>>, tol: T) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(T::zero(), |a, &b| a.max(b));
    let thresh = tol * max.max(T::one());
    sv.iter().filter(|&&s| s > thresh).count()
}

pub fn complexify<T: Real>(m: &Mat<T>) -> DMatrix<Complex<T>> {
    m.map(|x| Complex::new(x, T::zero()))
}

fn log_abs_det<T: Real>(m: &Mat<T>) -> T {
    let lu = m.clone().lu();
    let u = lu.u();
    (0..u.nrows()).fold(T::zero(), |acc, i| acc + u[(i, i)].abs().ln())
}

const SIGN_MAX_ITER: usize = 200;

/// Matrix sign function by determinant-scaled Newton iteration.
///
/// Fails with `NonStabilizable` when an iterate is singular or the iteration
/// stalls, which happens when the spectrum touches the imaginary axis.
pub fn sign_function<T: Real>(h: &Mat<T>) -> Result<Mat<T>> {
    let dim = check_square(h, "sign_function")?;
    let half = lit::<T>(0.5);
    let tol = lit::<T>(1e2) * T::default_epsilon();
    let mut z = h.clone();
    let mut scaling = true;
    for it in 0..SIGN_MAX_ITER {
        let zinv = z.clone().try_inverse().ok_or_else(|| {
            MfgError::NonStabilizable(format!(
                "sign iteration hit a singular iterate at step {it}"
            ))
        })?;
        let c = if scaling {
            (-log_abs_det(&z) / lit::<T>(dim as f64)).exp()
        } else {
            T::one()
        };
        let next = (&z * c + zinv * (T::one() / c)) * half;
        let change = (&next - &z).norm();
        let size = next.norm();
        z = next;
        if !size.is_finite() {
            break;
        }
        if change <= lit::<T>(1e-2) * size {
            scaling = false;
        }
        if change <= tol.sqrt() * size {
            // one more unscaled step lands at working precision
            let zinv = inverse(&z)?;
            z = (&z + zinv) * half;
            return Ok(z);
        }
    }
    Err(MfgError::NonStabilizable(
        "matrix sign iteration did not converge (eigenvalues near the imaginary axis)".into(),
    ))
}

/// Solves `a x + x aᵀ + c = 0` for Hurwitz `a`.
pub fn solve_lyapunov<T: Real>(a: &Mat<T>, c: &Mat<T>) -> Result<Mat<T>> {
    let n = check_square(a, "lyapunov drift")?;
    check_shape(c, n, n, "lyapunov forcing")?;
    if n == 0 {
        return Ok(zeros(0, 0));
    }
    if !is_hurwitz(a) {
        return Err(MfgError::NonStabilizable(format!(
            "lyapunov drift not Hurwitz (spectral abscissa {:e})",
            to_f64(spectral_abscissa(a))
        )));
    }
    if n <= KRONECKER_MAX_DIM {
        return lyapunov_kronecker(a, c);
    }
    if let Some(x) = lyapunov_bartels_stewart(a, c) {
        return Ok(x);
    }
    let half = lit::<T>(0.5);
    let tol = lit::<T>(1e2) * T::default_epsilon();
    let mut ak = a.clone();
    let mut ck = c.clone();
    let mut scaling = true;
    for _ in 0..SIGN_MAX_ITER {
        let ainv = inverse(&ak)?;
        let s = if scaling {
            (-log_abs_det(&ak) / lit::<T>(n as f64)).exp()
        } else {
            T::one()
        };
        let next_c = (&ck * s + &ainv * &ck * ainv.transpose() * (T::one() / s)) * half;
        let next_a = (&ak * s + ainv * (T::one() / s)) * half;
        let change = (&next_a - &ak).norm();
        ak = next_a;
        ck = next_c;
        if change <= lit::<T>(1e-2) * ak.norm() {
            scaling = false;
        }
        let dist = (&ak + eye::<T>(n)).norm();
        if dist <= tol.sqrt() {
            let ainv = inverse(&ak)?;
            ck = (&ck + &ainv * &ck * ainv.transpose()) * half;
            return Ok(&ck * half);
        }
    }
    Err(MfgError::NotConverged {
        what: "lyapunov sign iteration".into(),
        iterations: SIGN_MAX_ITER,
        residual: f64::NAN,
    })
}

const KRONECKER_MAX_DIM: usize = 8;

/// Bartels–Stewart: reduce `a` to real Schur form `QTQᵀ` and solve
/// `TY + YTᵀ = −QᵀcQ` one diagonal block column at a time, last to first,
/// followed by one refinement sweep. `None` if the Schur iteration fails or
/// a block system is singular.
fn lyapunov_bartels_stewart<T: Real>(a: &Mat<T>, c: &Mat<T>) -> Option<Mat<T>> {
    let n = a.nrows();
    let (q, t) = nalgebra::Schur::try_new(a.clone(), T::default_epsilon(), SCHUR_SWEEPS_PER_DIM * n)?.unpack();
    let mut starts = Vec::new();
    let mut i = 0;
    while i < n {
        starts.push(i);
        i += if i + 1 < n && t[(i + 1, i)] != T::zero() { 2 } else { 1 };
    }
    let solve = |rhs_c: &Mat<T>| -> Option<Mat<T>> {
        let ct = q.transpose() * rhs_c * &q;
        let mut y = zeros::<T>(n, n);
        for (bi, &j) in starts.iter().enumerate().rev() {
            let b = starts.get(bi + 1).copied().unwrap_or(n) - j;
            // T Y_j + Y_j T_jjᵀ = −C_j − Σ_{k>j} Y_k T_jkᵀ
            let mut rhs = -ct.columns(j, b).into_owned();
            if j + b < n {
                let tail = y.columns(j + b, n - j - b) * t.view((j, j + b), (b, n - j - b)).transpose();
                rhs -= tail;
            }
            let tjj = t.view((j, j), (b, b));
            let mut big = zeros::<T>(n * b, n * b);
            for col in 0..b {
                set_block(&mut big, col * n, col * n, &t);
                for other in 0..b {
                    let w = tjj[(col, other)];
                    for r in 0..n {
                        big[(col * n + r, other * n + r)] += w;
                    }
                }
            }
            let v = big.lu().solve(&Vector::from_iterator(n * b, rhs.iter().cloned()))?;
            y.columns_mut(j, b).copy_from(&Mat::from_column_slice(n, b, v.as_slice()));
        }
        Some(&q * y * q.transpose())
    };
    let c = symmetrize(c);
    let mut x = symmetrize(&solve(&c)?);
    let residual = a * &x + &x * a.transpose() + &c;
    x += symmetrize(&solve(&residual)?);
    Some(x)
}

/// Column-stacked form `(I ⊗ a + a ⊗ I) vec(x) = −vec(c)` solved by LU with
/// one step of iterative refinement.
fn lyapunov_kronecker<T: Real>(a: &Mat<T>, c: &Mat<T>) -> Result<Mat<T>> {
    let n = a.nrows();
    let mut big = zeros::<T>(n * n, n * n);
    for j in 0..n {
        for i in 0..n {
            let row = j * n + i;
            for k in 0..n {
                big[(row, j * n + k)] += a[(i, k)];
                big[(row, k * n + i)] += a[(j, k)];
            }
        }
    }
    let lu = big.clone().lu();
    let rhs = -Vector::from_iterator(n * n, c.iter().cloned());
    let singular = || MfgError::SingularSystem {
        condition: f64::INFINITY,
    };
    let mut v = lu.solve(&rhs).ok_or_else(singular)?;
    let correction = lu.solve(&(&rhs - &big * &v)).ok_or_else(singular)?;
    v += correction;
    Ok(Mat::from_column_slice(n, n, v.as_slice()))
}

pub fn lyapunov_residual<T: Real>(a: &Mat<T>, x: &Mat<T>, c: &Mat<T>) -> T {
    (a * x + x * a.transpose() + c).norm()
}
