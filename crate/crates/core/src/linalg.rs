//! Small dense kernels and Householder QR.

use nalgebra::DMatrix;

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Relative tolerance below which a Householder pivot counts as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Thin QR factorization `A[:, columns] = Q R`.
#[derive(Debug, Clone)]
pub struct ThinQr {
    /// Orthonormal columns, `m x rank`.
    pub q: DMatrix<f64>,
    /// Upper triangular factor, `rank x rank`, for the selected columns in
    /// their original order.
    pub r: DMatrix<f64>,
    /// Indices of the columns of `A` that were kept.
    pub columns: Vec<usize>,
}

impl ThinQr {
    pub fn rank(&self) -> usize {
        self.columns.len()
    }
}

struct Reflectors {
    /// Householder vectors stored below (and on) the diagonal of `work`.
    work: DMatrix<f64>,
    tau: Vec<f64>,
    diag: Vec<f64>,
    perm: Vec<usize>,
    steps: usize,
}

fn factor(a: &DMatrix<f64>, pivot: bool) -> Reflectors {
    let (m, n) = a.shape();
    let mut work = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let kmax = m.min(n);
    let mut tau = Vec::with_capacity(kmax);
    let mut diag = Vec::with_capacity(kmax);
    let mut col_norms: Vec<f64> = (0..n).map(|j| work.column(j).norm()).collect();
    let scale = col_norms.iter().cloned().fold(0.0, f64::max);
    let mut steps = 0;

    for k in 0..kmax {
        if pivot {
            // Recompute trailing norms exactly; n is small here.
            for j in k..n {
                col_norms[j] = work.view((k, j), (m - k, 1)).norm();
            }
            let (best, &best_norm) = col_norms[k..]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, v)| (i + k, v))
                .unwrap();
            if best_norm <= RANK_TOL * scale || scale == 0.0 {
                break;
            }
            if best != k {
                work.swap_columns(k, best);
                perm.swap(k, best);
                col_norms.swap(k, best);
            }
        }
        let alpha = work.view((k, k), (m - k, 1)).norm();
        let x0 = work[(k, k)];
        if alpha == 0.0 {
            tau.push(0.0);
            diag.push(0.0);
            steps += 1;
            continue;
        }
        let beta = if x0 >= 0.0 { -alpha } else { alpha };
        let v0 = x0 - beta;
        for i in k + 1..m {
            work[(i, k)] /= v0;
        }
        work[(k, k)] = 1.0;
        let t = (beta - x0) / beta;
        // Apply H = I - t v v^T to the trailing columns.
        for j in k + 1..n {
            let mut s = 0.0;
            for i in k..m {
                s += work[(i, k)] * work[(i, j)];
            }
            s *= t;
            for i in k..m {
                let vi = work[(i, k)];
                work[(i, j)] -= s * vi;
            }
        }
        tau.push(t);
        diag.push(beta);
        steps += 1;
    }
    Reflectors {
        work,
        tau,
        diag,
        perm,
        steps,
    }
}

/// Form the first `cols` columns of `H_1 ... H_steps`.
fn form_q(f: &Reflectors, m: usize, cols: usize) -> DMatrix<f64> {
    let mut q = DMatrix::<f64>::zeros(m, cols);
    for j in 0..cols {
        q[(j, j)] = 1.0;
    }
    for k in (0..f.steps).rev() {
        let t = f.tau[k];
        if t == 0.0 {
            continue;
        }
        for j in 0..cols {
            let mut s = q[(k, j)];
            for i in k + 1..m {
                s += f.work[(i, k)] * q[(i, j)];
            }
            s *= t;
            q[(k, j)] -= s;
            for i in k + 1..m {
                let vi = f.work[(i, k)];
                q[(i, j)] -= s * vi;
            }
        }
    }
    q
}

fn extract_r(f: &Reflectors, rows: usize, n: usize) -> DMatrix<f64> {
    let mut r = DMatrix::<f64>::zeros(rows, n);
    for i in 0..rows {
        r[(i, i)] = f.diag[i];
        for j in i + 1..n {
            r[(i, j)] = f.work[(i, j)];
        }
    }
    r
}

/// Plain Householder thin QR of an `m x n` matrix with `n <= m`.
///
/// Returns `(Q, R)` with `Q` `m x n` and `R` `n x n`; no rank detection.
pub fn householder_qr(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    assert!(n <= m, "thin QR needs at least as many rows as columns");
    let f = factor(a, false);
    (form_q(&f, m, n), extract_r(&f, n, n))
}

/// Orthonormal basis for the range of `a`, dropping dependent columns.
///
/// Uses column-pivoted Householder QR and stops once the largest remaining
/// column norm falls below [`RANK_TOL`] relative to the largest input column.
/// The returned `columns` are the original indices of the independent set,
/// sorted ascending.
pub fn range_basis(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let (m, _) = a.shape();
    let f = factor(a, true);
    let rank = f.steps;
    let mut columns: Vec<usize> = f.perm[..rank].to_vec();
    columns.sort_unstable();
    (form_q(&f, m, rank), columns)
}

/// Thin QR of the maximal independent column subset of `a`, in original
/// column order.
pub fn independent_qr(a: &DMatrix<f64>) -> ThinQr {
    let (_, columns) = range_basis(a);
    let sub = a.select_columns(columns.iter());
    let (q, r) = householder_qr(&sub);
    ThinQr { q, r, columns }
}

/// `max |Q^T Q - I|`
pub fn orthonormality_error(q: &DMatrix<f64>) -> f64 {
    let g = q.transpose() * q;
    let mut worst: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Solve `L L^T x = b` given a lower Cholesky factor.
pub fn chol_solve(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let v = rng::gaussian(&mut rng::stream(seed, &[]), m * n);
        DMatrix::from_vec(m, n, v)
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..13).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..13).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn qr_reconstructs_and_is_orthonormal() {
        let a = random(9, 5, 3);
        let (q, r) = householder_qr(&a);
        assert!(orthonormality_error(&q) < 1e-12);
        assert!((&q * &r - &a).abs().max() < 1e-12);
        for i in 0..5 {
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn range_basis_drops_dependent_and_zero_columns() {
        let mut a = random(6, 4, 5);
        let c0 = a.column(0).clone_owned();
        let c1 = a.column(1).clone_owned();
        a.set_column(2, &(c0 * 2.0 - c1));
        a.set_column(3, &nalgebra::DVector::zeros(6));
        let (q, cols) = range_basis(&a);
        assert_eq!(q.ncols(), 2);
        assert_eq!(cols.len(), 2);
        assert!(orthonormality_error(&q) < 1e-10);
        // Every column of A lies in span(Q).
        let resid = &a - &q * (q.transpose() * &a);
        assert!(resid.abs().max() < 1e-10);
    }

    #[test]
    fn independent_qr_keeps_original_order() {
        let mut a = random(7, 3, 11);
        let c = a.column(0).clone_owned();
        a.set_column(1, &(c * -3.0));
        let f = independent_qr(&a);
        // Either copy of the repeated direction may be kept.
        assert_eq!(f.columns.len(), 2);
        assert!(f.columns.windows(2).all(|w| w[0] < w[1]) && f.columns.contains(&2));
        let sub = a.select_columns(f.columns.iter());
        assert!((&f.q * &f.r - sub).abs().max() < 1e-12);
    }
}
