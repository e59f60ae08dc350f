//! Exact and randomized trace estimation over matrix-vector products.
//!
//! Operators are only ever touched through [`MatVecOperator::apply`], which
//! counts calls so every estimate can report the exact number of products it
//! consumed: `D` for the exact trace, `n` for Hutchinson, `3n` for Hutch++
//! (`2n` when a cached basis is reused) and `2n` for XTrace.

use std::cell::Cell;
use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, dot};
use crate::par;
use crate::rng::{self, tag};

/// A square linear map exposed only through matrix-vector products.
///
/// The counter lives in the operator value, so create one operator per call
/// context (per trial, per ODE evaluation) rather than sharing it.
pub struct MatVecOperator<'a> {
    dim: usize,
    apply_fn: Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>,
    count: Cell<usize>,
}

impl<'a> MatVecOperator<'a> {
    pub fn new(dim: usize, apply: impl Fn(&[f64]) -> Vec<f64> + 'a) -> Self {
        assert!(dim >= 1, "operator dimension must be positive");
        Self {
            dim,
            apply_fn: Box::new(apply),
            count: Cell::new(0),
        }
    }

    pub fn from_matrix(a: &'a DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "operator must be square");
        Self::new(a.nrows(), move |v| {
            let mut out = vec![0.0; a.nrows()];
            for (j, &vj) in v.iter().enumerate() {
                if vj != 0.0 {
                    linalg::axpy(vj, a.column(j).as_slice(), &mut out);
                }
            }
            out
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of products computed so far.
    pub fn matvecs(&self) -> usize {
        self.count.get()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, v.len())?;
        self.count.set(self.count.get() + 1);
        let out = (self.apply_fn)(v);
        check_dim(self.dim, out.len())?;
        if !linalg::all_finite(&out) {
            return Err(Error::NonFiniteOperator);
        }
        Ok(out)
    }

    /// Apply to every column of `m`.
    pub fn apply_columns(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim, m.nrows())?;
        let mut out = DMatrix::zeros(self.dim, m.ncols());
        for j in 0..m.ncols() {
            let y = self.apply(m.column(j).as_slice())?;
            out.set_column(j, &DVector::from_vec(y));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Rademacher,
    Gaussian,
}

/// How to draw probe vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub count: usize,
    pub seed: u64,
}

impl ProbeSpec {
    pub fn rademacher(count: usize, seed: u64) -> Self {
        Self {
            kind: ProbeKind::Rademacher,
            count,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("probe count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draw a `dim x count` probe matrix from the stream `(seed, tags...)`.
pub fn draw_probes(kind: ProbeKind, dim: usize, count: usize, seed: u64, tags: &[u64]) -> DMatrix<f64> {
    let mut s = rng::stream(seed, tags);
    let v = match kind {
        ProbeKind::Rademacher => rng::rademacher(&mut s, dim * count),
        ProbeKind::Gaussian => rng::gaussian(&mut s, dim * count),
    };
    DMatrix::from_vec(dim, count, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Exact,
    Hutchinson,
    Hutchpp,
    Xtrace,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Exact => "exact",
            Estimator::Hutchinson => "hutchinson",
            Estimator::Hutchpp => "hutchpp",
            Estimator::Xtrace => "xtrace",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEstimate {
    pub value: f64,
    pub matvecs_used: usize,
    pub estimator: Estimator,
    /// Rank of the sketch actually used (Hutch++ and XTrace only).
    pub effective_rank: Option<usize>,
}

/// `sum_i e_i^T A e_i` using `D` products.
pub fn exact_trace(op: &MatVecOperator) -> Result<TraceEstimate> {
    let start = op.matvecs();
    let d = op.dim();
    let mut e = vec![0.0; d];
    let mut value = 0.0;
    for i in 0..d {
        e[i] = 1.0;
        value += op.apply(&e)?[i];
        e[i] = 0.0;
    }
    Ok(TraceEstimate {
        value,
        matvecs_used: op.matvecs() - start,
        estimator: Estimator::Exact,
        effective_rank: None,
    })
}

/// Hutchinson estimate with the given probe columns.
pub fn hutchinson_with(op: &MatVecOperator, probes: &DMatrix<f64>) -> Result<TraceEstimate> {
    check_dim(op.dim(), probes.nrows())?;
    if probes.ncols() == 0 {
        return Err(Error::Config("probe count must be at least 1".into()));
    }
    let start = op.matvecs();
    let mut sum = 0.0;
    for j in 0..probes.ncols() {
        let n = probes.column(j);
        let an = op.apply(n.as_slice())?;
        sum += dot(n.as_slice(), &an);
    }
    Ok(TraceEstimate {
        value: sum / probes.ncols() as f64,
        matvecs_used: op.matvecs() - start,
        estimator: Estimator::Hutchinson,
        effective_rank: None,
    })
}

/// `(1/n) sum_k n_k^T A n_k`
pub fn hutchinson_trace(op: &MatVecOperator, probes: &ProbeSpec) -> Result<TraceEstimate> {
    probes.validate()?;
    let p = draw_probes(probes.kind, op.dim(), probes.count, probes.seed, &[tag::HUTCHINSON]);
    hutchinson_with(op, &p)
}

/// Orthonormal basis for the Hutch++ deflation, built from `A S`.
pub fn hutchpp_basis(op: &MatVecOperator, sketch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let y = op.apply_columns(sketch)?;
    Ok(linalg::range_basis(&y).0)
}

/// Hutch++ with explicit sketch `S` and residual probes `G`.
///
/// With `cached_basis` the sketch is skipped and the supplied orthonormal
/// basis is used for deflation. Returns the estimate and the basis used.
pub fn hutchpp_with(
    op: &MatVecOperator,
    sketch: &DMatrix<f64>,
    residual_probes: &DMatrix<f64>,
    cached_basis: Option<&DMatrix<f64>>,
) -> Result<(TraceEstimate, DMatrix<f64>)> {
    check_dim(op.dim(), residual_probes.nrows())?;
    let n = residual_probes.ncols();
    if n == 0 {
        return Err(Error::Config("probe count must be at least 1".into()));
    }
    let start = op.matvecs();
    let q = match cached_basis {
        Some(q) => {
            check_dim(op.dim(), q.nrows())?;
            q.clone()
        }
        None => hutchpp_basis(op, sketch)?,
    };

    // Tr(Q^T A Q)
    let aq = op.apply_columns(&q)?;
    let mut low_rank = 0.0;
    for j in 0..q.ncols() {
        low_rank += q.column(j).dot(&aq.column(j));
    }

    // (1/n) Tr(G^T (I - QQ^T) A (I - QQ^T) G)
    let g_perp = residual_probes - &q * (q.transpose() * residual_probes);
    let mut resid = 0.0;
    for j in 0..n {
        let col = g_perp.column(j);
        let a_col = op.apply(col.as_slice())?;
        resid += dot(col.as_slice(), &a_col);
    }
    let rank = q.ncols();
    Ok((
        TraceEstimate {
            value: low_rank + resid / n as f64,
            matvecs_used: op.matvecs() - start,
            estimator: Estimator::Hutchpp,
            effective_rank: Some(rank),
        },
        q,
    ))
}

/// Hutch++ with `n` Rademacher sketch and residual probes each.
///
/// Consumes `3n` products, or `2n` when `cached_basis` is supplied. A rank
/// deficient sketch is orthonormalized over its independent columns and the
/// rank is reported in `effective_rank`.
pub fn hutchpp_trace(
    op: &MatVecOperator,
    probes: &ProbeSpec,
    cached_basis: Option<&DMatrix<f64>>,
) -> Result<(TraceEstimate, DMatrix<f64>)> {
    probes.validate()?;
    let d = op.dim();
    if probes.count > d {
        return Err(Error::Config(format!(
            "Hutch++ needs n <= D (n = {}, D = {d})",
            probes.count
        )));
    }
    if let Some(q) = cached_basis {
        let err = linalg::orthonormality_error(q);
        if err > 1e-8 {
            return Err(Error::Config(format!("cached basis is not orthonormal (error {err:e})")));
        }
    }
    let s = draw_probes(probes.kind, d, probes.count, probes.seed, &[tag::HUTCHPP, 0]);
    let g = draw_probes(probes.kind, d, probes.count, probes.seed, &[tag::HUTCHPP, 1]);
    hutchpp_with(op, &s, &g, cached_basis)
}

/// XTrace with explicit test matrix `omega` (`D x n`).
pub fn xtrace_with(op: &MatVecOperator, omega: &DMatrix<f64>) -> Result<TraceEstimate> {
    check_dim(op.dim(), omega.nrows())?;
    let n = omega.ncols();
    if n == 0 || n > op.dim() {
        return Err(Error::Config(format!("XTrace needs 1 <= n <= D (n = {n})")));
    }
    let start = op.matvecs();
    let y = op.apply_columns(omega)?;
    let (basis, independent) = linalg::range_basis(&y);
    let value = if independent.len() == n {
        let (q, r) = linalg::householder_qr(&y);
        let z = op.apply_columns(&q)?;
        xtrace_full_rank(&q, &r, &z, omega)
    } else {
        let z = op.apply_columns(&basis)?;
        xtrace_leave_one_out(&basis, &z, &y, omega)
    };
    Ok(TraceEstimate {
        value,
        matvecs_used: op.matvecs() - start,
        estimator: Estimator::Xtrace,
        effective_rank: Some(independent.len()),
    })
}

/// Leave-one-out XTrace from `Q R = A Omega` and `Z = A Q`.
///
/// For each probe `i`, the basis of the remaining `n - 1` sketch columns is
/// `range(Q)` minus the direction `Q s_i`, where `s_i` is the normalized
/// `i`-th column of `R^{-T}`. All terms reduce to small `n x n` products of
/// `H = Q^T A Q`, `W = Q^T Omega`, `T = Z^T Omega` and `R`.
fn xtrace_full_rank(q: &DMatrix<f64>, r: &DMatrix<f64>, z: &DMatrix<f64>, omega: &DMatrix<f64>) -> f64 {
    let n = omega.ncols();
    let h = q.transpose() * z;
    let w = q.transpose() * omega;
    let t = z.transpose() * omega;
    let r_inv_t = match r.clone().try_inverse() {
        Some(inv) => inv.transpose(),
        None => return xtrace_leave_one_out(q, z, &(q * r), omega),
    };
    let trace_h = h.trace();
    let mut total = 0.0;
    for i in 0..n {
        let mut s = r_inv_t.column(i).clone_owned();
        let sn = s.norm();
        s /= sn;
        let w_i = w.column(i);
        let t_i = t.column(i);
        let r_i = r.column(i);
        let hs = &h * &s;
        let hw = &h * w_i;
        let c = s.dot(&w_i);
        let s_h_s = s.dot(&hs);
        let term = -t_i.dot(&w_i) + w_i.dot(&hw)
            + c * (t_i.dot(&s) - w_i.dot(&hs))
            + c * (s.dot(&r_i) - s.dot(&hw))
            + c * c * s_h_s;
        // |(I - P_i) w|^2
        let perp2 = omega.column(i).norm_squared() - w_i.norm_squared() + c * c;
        total += trace_h - s_h_s + residual_scale(omega.nrows() - (n - 1), perp2) * term;
    }
    total / n as f64
}

/// Direct leave-one-out evaluation, valid for rank-deficient sketches.
///
/// `q` spans `range(A Omega)` and `z = A q`. Each held-out basis `Q_i` is
/// a subspace of `range(q)`, so `A Q_i = z (q^T Q_i)` needs no extra products.
pub(crate) fn xtrace_leave_one_out(q: &DMatrix<f64>, z: &DMatrix<f64>, y: &DMatrix<f64>, omega: &DMatrix<f64>) -> f64 {
    let n = omega.ncols();
    let mut total = 0.0;
    for i in 0..n {
        let rest: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let y_rest = y.select_columns(rest.iter());
        let qi = if y_rest.ncols() == 0 {
            DMatrix::zeros(q.nrows(), 0)
        } else {
            linalg::range_basis(&y_rest).0
        };
        let coeff = q.transpose() * &qi;
        let aqi = z * &coeff;
        let mut low_rank = 0.0;
        for j in 0..qi.ncols() {
            low_rank += qi.column(j).dot(&aqi.column(j));
        }
        let w = omega.column(i);
        let proj = qi.transpose() * w;
        let w_perp = w - &qi * &proj;
        // A (I - Q_i Q_i^T) w = y_i - A Q_i (Q_i^T w)
        let a_w_perp = y.column(i) - &aqi * &proj;
        let scale = residual_scale(q.nrows() - qi.ncols(), w_perp.norm_squared());
        total += low_rank + scale * w_perp.dot(&a_w_perp);
    }
    total / n as f64
}

/// Rescales a held-out probe to length `sqrt(k)` inside its `k`-dimensional
/// complement, which makes the residual term exact when `k = 1`.
fn residual_scale(k: usize, perp2: f64) -> f64 {
    if perp2 > 1e-300 {
        k as f64 / perp2
    } else {
        0.0
    }
}

/// XTrace with `n` Rademacher test vectors (`2n` products).
///
/// If the sketch `A Omega` is rank deficient the held-out bases are formed
/// from the independent columns directly; `effective_rank` reports the rank.
pub fn xtrace(op: &MatVecOperator, probes: &ProbeSpec) -> Result<TraceEstimate> {
    probes.validate()?;
    let omega = draw_probes(probes.kind, op.dim(), probes.count, probes.seed, &[tag::XTRACE]);
    xtrace_with(op, &omega)
}

/// One row of the random-matrix benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub estimator: Estimator,
    pub dim: usize,
    pub m: usize,
    pub psd: bool,
    pub trials: usize,
    pub mae: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub dims: Vec<usize>,
    /// Matrix-vector budgets `m`.
    pub budgets: Vec<usize>,
    /// Number of random matrices per dimension, aligned with `dims`.
    pub trials: Vec<usize>,
    pub psd: bool,
    pub seed: u64,
}

impl BenchConfig {
    /// Dimensions and batch sizes of the reference experiment.
    pub fn reference(psd: bool) -> Self {
        Self {
            dims: vec![4, 16, 64, 256],
            budgets: vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512],
            trials: vec![65536, 16384, 4096, 1024],
            psd,
            seed: 0,
        }
    }
}

/// Random `D x D` matrix with `N(0,1)` entries, or `|N(0,1)|` when `psd`.
pub fn random_test_matrix(dim: usize, psd: bool, seed: u64, trial: usize) -> DMatrix<f64> {
    let mut s = rng::stream(seed, &[tag::MATRIX, dim as u64, psd as u64, trial as u64]);
    let mut v = rng::gaussian(&mut s, dim * dim);
    if psd {
        v.iter_mut().for_each(|x| *x = x.abs());
    }
    DMatrix::from_vec(dim, dim, v)
}

/// Probe count each estimator affords under budget `m`, if any.
pub fn probes_for_budget(estimator: Estimator, m: usize, dim: usize) -> Option<usize> {
    let n = match estimator {
        Estimator::Hutchinson => m,
        Estimator::Hutchpp => m / 3,
        Estimator::Xtrace => m / 2,
        Estimator::Exact => return (m >= dim).then_some(dim),
    };
    let ok = n >= 1 && (estimator == Estimator::Hutchinson || n <= dim);
    ok.then_some(n)
}

/// Absolute errors of one estimator over `trials` random matrices.
pub fn benchmark_errors(estimator: Estimator, dim: usize, n: usize, psd: bool, trials: usize, seed: u64) -> Result<Vec<f64>> {
    par::try_map_range(trials, |trial| {
        let a = random_test_matrix(dim, psd, seed, trial);
        let exact = a.trace();
        let op = MatVecOperator::from_matrix(&a);
        let probe_seed = rng::derive_key(seed, &[dim as u64, n as u64, trial as u64]);
        let spec = ProbeSpec::rademacher(n, probe_seed);
        let est = match estimator {
            Estimator::Exact => exact_trace(&op)?,
            Estimator::Hutchinson => hutchinson_trace(&op, &spec)?,
            Estimator::Hutchpp => hutchpp_trace(&op, &spec, None)?.0,
            Estimator::Xtrace => xtrace(&op, &spec)?,
        };
        Ok((est.value - exact).abs())
    })
}

/// MAE relative to the exact trace for every feasible (estimator, D, m).
pub fn random_matrix_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.dims.len() != cfg.trials.len() {
        return Err(Error::Config("bench.trials must align with bench.dims".into()));
    }
    let mut rows = Vec::new();
    for (&dim, &trials) in cfg.dims.iter().zip(&cfg.trials) {
        for &m in &cfg.budgets {
            for est in [Estimator::Hutchinson, Estimator::Hutchpp, Estimator::Xtrace] {
                let Some(n) = probes_for_budget(est, m, dim) else {
                    continue;
                };
                let errs = benchmark_errors(est, dim, n, cfg.psd, trials, cfg.seed)?;
                rows.push(BenchRow {
                    estimator: est,
                    dim,
                    m,
                    psd: cfg.psd,
                    trials,
                    mae: errs.iter().sum::<f64>() / trials as f64,
                    seed: cfg.seed,
                });
            }
        }
    }
    Ok(rows)
}

pub const BENCH_CSV_HEADER: &str = "estimator,D,m,psd,trials,mae,seed";

pub fn write_bench_csv(rows: &[BenchRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{BENCH_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{:.12e},{}", r.estimator, r.dim, r.m, r.psd, r.trials, r.mae, r.seed)?;
    }
    Ok(())
}
