//! Small dense helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

/// Minimum-norm least-squares solution of `a x = b`.
///
/// Singular values below `rel_tol * sigma_max` are treated as zero.
pub(crate) fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (rel_tol * smax).max(f64::MIN_POSITIVE);
    svd.solve(b, eps).expect("both singular vector sets were computed")
}

/// Ratio of largest to smallest singular value (`inf` when rank deficient).
pub(crate) fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Orthonormal basis (as columns) of the null space of `a`.
///
/// Returns `None` when a singular value falls within two decades of the
/// threshold, i.e. when the numerical rank is ambiguous.
pub(crate) fn null_space(a: &DMatrix<f64>, rel_tol: f64) -> Option<DMatrix<f64>> {
    let cols = a.ncols();
    if a.nrows() == 0 {
        return Some(DMatrix::identity(cols, cols));
    }
    // Pad to at least square so that V is complete.
    let rows = a.nrows().max(cols);
    let mut padded = DMatrix::zeros(rows, cols);
    padded.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Some(DMatrix::identity(cols, cols));
    }
    let mut basis = Vec::new();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let r = s / smax;
        if r > rel_tol * 1e-2 && r < rel_tol * 1e2 {
            return None;
        }
        if r <= rel_tol {
            basis.push(v_t.row(k).transpose());
        }
    }
    if basis.is_empty() {
        return Some(DMatrix::zeros(cols, 0));
    }
    Some(DMatrix::from_columns(&basis))
}

pub(crate) fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Damped Gauss–Newton with minimum-norm steps.
///
/// `f` returns the residual and its Jacobian. Steps are halved until the
/// residual norm drops. Returns the final point and residual max-norm.
pub(crate) fn gauss_newton<F>(mut u: DVector<f64>, max_iter: usize, tol: f64, mut f: F) -> (DVector<f64>, f64)
where
    F: FnMut(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let (mut r, mut j) = f(&u);
    for _ in 0..max_iter {
        if max_abs(&r) <= tol {
            break;
        }
        let step = lstsq(&j, &(-&r), 1e-12);
        let norm0 = r.norm();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &u + &step * t;
            let (rt, jt) = f(&trial);
            if rt.iter().all(|v| v.is_finite()) && rt.norm() < norm0 {
                u = trial;
                r = rt;
                j = jt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let res = max_abs(&r);
    (u, res)
}

/// Solves a block-tridiagonal system in place of its right-hand side.
///
/// `lower[k]` couples row block `k` to column block `k-1` (unused for
/// `k = 0`), `upper[k]` couples to `k+1` (unused for the last block).
/// Returns `None` if a pivot block is singular.
pub(crate) fn solve_block_tridiagonal(
    lower: &[DMatrix<f64>],
    diag: &[DMatrix<f64>],
    upper: &[DMatrix<f64>],
    rhs: &[DVector<f64>],
) -> Option<Vec<DVector<f64>>> {
    let k = diag.len();
    let mut c_prime: Vec<DMatrix<f64>> = Vec::with_capacity(k);
    let mut d_prime: Vec<DVector<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let (m, r) = if i == 0 {
            (diag[0].clone(), rhs[0].clone())
        } else {
            (
                &diag[i] - &lower[i] * &c_prime[i - 1],
                &rhs[i] - &lower[i] * &d_prime[i - 1],
            )
        };
        let lu = m.lu();
        let ci = if i + 1 < k {
            lu.solve(&upper[i])?
        } else {
            DMatrix::zeros(0, 0)
        };
        let di = lu.solve(&r)?;
        c_prime.push(ci);
        d_prime.push(di);
    }
    let mut x = d_prime;
    for i in (0..k.saturating_sub(1)).rev() {
        let corr = &c_prime[i] * &x[i + 1];
        x[i] -= corr;
    }
    Some(x)
}
