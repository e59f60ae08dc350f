//! Likelihood integration of the coupled state / log-density ODE.
//!
//! `log p_eps(x_eps) = log p_T(x_T) + int_eps^T div v_t(x_t) dt`, integrated
//! forward with an adaptive Dormand-Prince 5(4) pair. The divergence comes
//! from a pluggable backend. Stochastic backends draw their probes once per
//! trajectory so the right-hand side stays continuous in `t`.

use std::cell::Cell;
use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::VelocityField;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, tag};
use crate::stad::LearnedHead;
use crate::targets::Dataset;
use crate::trace::{self, draw_probes, MatVecOperator, ProbeKind};

/// How the embedded error is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorNorm {
    /// RMS over all components.
    Rms,
    /// Max of the RMS over `y[..k]` and over `y[k..]`.
    SplitMax(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen automatically when absent.
    pub h0: Option<f64>,
    pub max_steps: usize,
    pub norm: ErrorNorm,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-5,
            atol: 1e-5,
            h0: None,
            max_steps: 100_000,
            norm: ErrorNorm::Rms,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Accepted states kept for the stiffness dump.
const DUMP_LEN: usize = 64;

fn combine(y: &[f64], h: f64, terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = y.to_vec();
    for &(a, k) in terms {
        if a != 0.0 {
            let ha = h * a;
            for (o, ki) in out.iter_mut().zip(k) {
                *o += ha * ki;
            }
        }
    }
    out
}

fn scaled_norm(norm: ErrorNorm, err: &[f64], y0: &[f64], y1: &[f64], rtol: f64, atol: f64) -> f64 {
    let block = |lo: usize, hi: usize| -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in lo..hi {
            let sc = atol + rtol * y0[i].abs().max(y1[i].abs());
            acc += (err[i] / sc).powi(2);
        }
        (acc / (hi - lo) as f64).sqrt()
    };
    match norm {
        ErrorNorm::Rms => block(0, err.len()),
        ErrorNorm::SplitMax(k) => block(0, k.min(err.len())).max(block(k.min(err.len()), err.len())),
    }
}

/// Dormand-Prince 5(4) with FSAL, PI step control and Hairer's initial step
/// heuristic. Integrates `y' = rhs(t, y)` from `t_span.0` to `t_span.1`.
pub fn dopri5<F>(mut rhs: F, y0: &[f64], t_span: (f64, f64), cfg: &SolverConfig) -> Result<(Vec<f64>, SolverStats)>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if !(cfg.rtol > 0.0 && cfg.atol > 0.0) {
        return Err(Error::Config("rtol and atol must be positive".into()));
    }
    let (t0, t1) = t_span;
    let span = t1 - t0;
    let mut stats = SolverStats::default();
    if span == 0.0 {
        return Ok((y0.to_vec(), stats));
    }
    let dir = span.signum();
    let mut call = |t: f64, y: &[f64], stats: &mut SolverStats| {
        stats.nfe += 1;
        let f = rhs(t, y)?;
        if f.iter().all(|v| v.is_finite()) {
            Ok(f)
        } else {
            Err(Error::NonFiniteField { x: y.to_vec(), t })
        }
    };

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = call(t, &y, &mut stats)?;
    let n = y.len();
    let sc_norm = |v: &[f64], y: &[f64]| scaled_norm(cfg.norm, v, y, y, cfg.rtol, cfg.atol);

    let mut h = match cfg.h0 {
        Some(h) => h.abs().min(span.abs()) * dir,
        None => {
            let d0 = sc_norm(&y, &y);
            let d1 = sc_norm(&k1, &y);
            let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
            let y1 = combine(&y, h0 * dir, &[(1.0, &k1)]);
            let f1 = call(t + h0 * dir, &y1, &mut stats)?;
            let diff: Vec<f64> = f1.iter().zip(&k1).map(|(a, b)| a - b).collect();
            let d2 = sc_norm(&diff, &y) / h0;
            let dm = d1.max(d2);
            if dm <= 1e-15 {
                // No derivative information at all; let the error estimate
                // of the first step decide.
                span
            } else {
                (100.0 * h0).min((0.01 / dm).powf(0.2)).min(span.abs()) * dir
            }
        }
    };

    let safe = 0.9;
    let beta = 0.04;
    let expo1 = 0.2 - beta * 0.75;
    let (fac_min, fac_max) = (0.2, 10.0);
    let mut facold: f64 = 1e-4;
    let mut last_rejected = false;
    let mut dump: VecDeque<(f64, Vec<f64>)> = VecDeque::with_capacity(DUMP_LEN);
    dump.push_back((t, y.clone()));

    loop {
        if (t1 - t) * dir <= 0.0 {
            break;
        }
        if stats.accepted + stats.rejected >= cfg.max_steps || h.abs() <= 10.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(Error::Stiffness {
                t,
                h: h.abs(),
                steps: stats.accepted,
                trajectory: dump.into_iter().collect(),
            });
        }
        let last = (t + h - t1) * dir >= 0.0;
        if last {
            h = t1 - t;
        }
        let k2 = call(t + C2 * h, &combine(&y, h, &[(A21, &k1)]), &mut stats)?;
        let k3 = call(t + C3 * h, &combine(&y, h, &[(A31, &k1), (A32, &k2)]), &mut stats)?;
        let k4 = call(t + C4 * h, &combine(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]), &mut stats)?;
        let k5 = call(
            t + C5 * h,
            &combine(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
            &mut stats,
        )?;
        let k6 = call(
            t + h,
            &combine(&y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
            &mut stats,
        )?;
        let y_new = combine(&y, h, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
        let t_new = if last { t1 } else { t + h };
        let k7 = call(t_new, &y_new, &mut stats)?;
        let err: Vec<f64> = (0..n)
            .map(|i| h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]))
            .collect();
        let e = scaled_norm(cfg.norm, &err, &y, &y_new, cfg.rtol, cfg.atol);
        let fac11 = e.powf(expo1);
        if e <= 1.0 {
            let mut fac = fac11 / facold.powf(beta);
            fac = (fac / safe).clamp(1.0 / fac_max, 1.0 / fac_min);
            let mut h_new = h / fac;
            facold = e.max(1e-4);
            if last_rejected {
                h_new = h_new.abs().min(h.abs()) * dir;
            }
            stats.accepted += 1;
            t = t_new;
            y = y_new;
            k1 = k7;
            if dump.len() == DUMP_LEN {
                dump.pop_front();
            }
            dump.push_back((t, y.clone()));
            last_rejected = false;
            h = h_new;
        } else {
            let h_new = h / (1.0 / fac_min).min(fac11 / safe);
            stats.rejected += 1;
            last_rejected = true;
            h = h_new;
        }
    }
    Ok((y, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Exact,
    Hutchinson,
    Hutchpp,
    Xtrace,
    Stad,
    /// Direct regression onto single-probe divergence estimates.
    DirectH1,
    /// Direct regression onto single-probe estimate plus baseline.
    DirectH1b,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Exact => "exact",
            BackendKind::Hutchinson => "hutchinson",
            BackendKind::Hutchpp => "hutchpp",
            BackendKind::Xtrace => "xtrace",
            BackendKind::Stad => "stad",
            BackendKind::DirectH1 => "direct_h1",
            BackendKind::DirectH1b => "direct_h1b",
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, BackendKind::Hutchinson | BackendKind::Hutchpp | BackendKind::Xtrace)
    }

    pub fn is_learned(self) -> bool {
        matches!(self, BackendKind::Stad | BackendKind::DirectH1 | BackendKind::DirectH1b)
    }
}

/// Divergence source for the log-density ODE.
#[derive(Debug, Clone)]
pub struct DivergenceBackend {
    pub kind: BackendKind,
    pub probe_kind: ProbeKind,
    pub n_probes: usize,
    /// Hutch++ basis refresh period in function evaluations.
    pub hutchpp_refresh: usize,
    /// Redraw probes at every evaluation instead of once per trajectory.
    pub redraw_probes: bool,
    pub head: Option<Arc<LearnedHead>>,
}

impl DivergenceBackend {
    pub fn exact() -> Self {
        Self {
            kind: BackendKind::Exact,
            probe_kind: ProbeKind::Rademacher,
            n_probes: 0,
            hutchpp_refresh: 6,
            redraw_probes: false,
            head: None,
        }
    }

    pub fn stochastic(kind: BackendKind, n_probes: usize) -> Self {
        Self {
            kind,
            n_probes,
            ..Self::exact()
        }
    }

    pub fn learned(head: Arc<LearnedHead>) -> Self {
        let kind = match head.kind {
            crate::stad::HeadKind::SteinResidual => BackendKind::Stad,
            crate::stad::HeadKind::DirectDivergence => BackendKind::DirectH1,
            crate::stad::HeadKind::DirectResidual => BackendKind::DirectH1b,
        };
        Self {
            kind,
            head: Some(head),
            ..Self::exact()
        }
    }

    pub fn label(&self) -> String {
        if self.kind.is_stochastic() {
            format!("{}({})", self.kind.name(), self.n_probes)
        } else {
            self.kind.name().to_string()
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.kind.is_stochastic() {
            if self.n_probes == 0 {
                return Err(Error::Config(format!("{} needs at least one probe", self.kind.name())));
            }
            if matches!(self.kind, BackendKind::Hutchpp | BackendKind::Xtrace) && self.n_probes > dim {
                return Err(Error::Config(format!("{} needs n <= D", self.kind.name())));
            }
            if self.kind == BackendKind::Hutchpp && self.hutchpp_refresh == 0 {
                return Err(Error::Config("hutchpp refresh period must be positive".into()));
            }
        }
        if self.kind.is_learned() && self.head.is_none() {
            return Err(Error::Config(format!("{} backend needs a trained head", self.kind.name())));
        }
        Ok(())
    }
}

/// Result of one likelihood evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodReport {
    pub log_prob: f64,
    pub bpd: Option<f64>,
    pub nfe: usize,
    pub wall_time: f64,
    pub backend: String,
    pub accepted: usize,
    pub rejected: usize,
    /// Jacobian-vector products spent on the divergence.
    pub matvecs: usize,
    /// Integrated divergence `l_T`.
    pub delta_logp: f64,
}

/// Per-trajectory divergence evaluator holding fixed probes and the Hutch++
/// basis cache.
struct DivergenceState<'a> {
    backend: &'a DivergenceBackend,
    seed: u64,
    probes: Option<DMatrix<f64>>,
    residual_probes: Option<DMatrix<f64>>,
    basis: Option<DMatrix<f64>>,
    evals: usize,
    matvecs: usize,
}

impl<'a> DivergenceState<'a> {
    fn new(backend: &'a DivergenceBackend, dim: usize, seed: u64) -> Self {
        let mut st = Self {
            backend,
            seed,
            probes: None,
            residual_probes: None,
            basis: None,
            evals: 0,
            matvecs: 0,
        };
        if backend.kind.is_stochastic() && !backend.redraw_probes {
            st.draw(dim, 0);
        }
        st
    }

    fn draw(&mut self, dim: usize, round: u64) {
        let n = self.backend.n_probes;
        let k = self.backend.probe_kind;
        self.probes = Some(draw_probes(k, dim, n, self.seed, &[tag::PROBE, round, 0]));
        if self.backend.kind == BackendKind::Hutchpp {
            self.residual_probes = Some(draw_probes(k, dim, n, self.seed, &[tag::PROBE, round, 1]));
        }
    }

    fn divergence(&mut self, field: &dyn VelocityField, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<(Vec<f64>, f64)> {
        let d = field.dim();
        let eval = self.evals;
        self.evals += 1;
        match self.backend.kind {
            BackendKind::Exact => {
                let v = field.drift(x, t, c)?;
                let jac = field.jacobian(x, t, c)?;
                self.matvecs += d;
                Ok((v, jac.trace()))
            }
            BackendKind::Stad | BackendKind::DirectH1 | BackendKind::DirectH1b => {
                let head = self.backend.head.as_ref().expect("validated");
                if head.kind.uses_baseline() {
                    let (v, s) = field.drift_and_score(x, t, c)?;
                    let div = head.divergence(x, t, c, &v, Some(&s))?;
                    Ok((v, div))
                } else {
                    let v = field.drift(x, t, c)?;
                    let div = head.divergence(x, t, c, &v, None)?;
                    Ok((v, div))
                }
            }
            kind => {
                if self.backend.redraw_probes {
                    self.draw(d, eval as u64 + 1);
                }
                let v = field.drift(x, t, c)?;
                let err = Cell::new(None);
                let op = MatVecOperator::new(d, |u| match field.jvp(x, t, c, u) {
                    Ok(j) => j,
                    Err(e) => {
                        err.set(Some(e));
                        vec![f64::NAN; d]
                    }
                });
                let probes = self.probes.as_ref().expect("drawn");
                let res = match kind {
                    BackendKind::Hutchinson => trace::hutchinson_with(&op, probes).map(|e| e.value),
                    BackendKind::Xtrace => trace::xtrace_with(&op, probes).map(|e| e.value),
                    BackendKind::Hutchpp => {
                        let refresh = self.basis.is_none() || eval % self.backend.hutchpp_refresh == 0;
                        let cached = if refresh { None } else { self.basis.as_ref() };
                        let g = self.residual_probes.as_ref().expect("drawn");
                        trace::hutchpp_with(&op, probes, g, cached).map(|(e, q)| {
                            self.basis = Some(q);
                            e.value
                        })
                    }
                    _ => unreachable!(),
                };
                self.matvecs += op.matvecs();
                if let Some(e) = err.take() {
                    return Err(e);
                }
                Ok((v, res?))
            }
        }
    }
}

/// Integrate from `eps` to `T` and assemble `log p_T(x_T) + l_T`.
pub fn log_likelihood(
    field: &dyn VelocityField,
    backend: &DivergenceBackend,
    x: &[f64],
    c: Option<&[f64]>,
    solver: &SolverConfig,
    seed: u64,
) -> Result<LikelihoodReport> {
    let d = field.dim();
    crate::error::check_dim(d, x.len())?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteField { x: x.to_vec(), t: field.schedule().eps });
    }
    backend.validate(d)?;
    let sched = field.schedule();
    let start = Instant::now();
    let mut state = DivergenceState::new(backend, d, seed);
    let mut y0 = x.to_vec();
    y0.push(0.0);
    let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let (mut v, div) = state.divergence(field, &y[..d], t, c)?;
        v.push(div);
        Ok(v)
    };
    let (y, stats) = dopri5(rhs, &y0, (sched.eps, sched.t_end), solver)?;
    let base = field.terminal_log_density(&y[..d], c)?;
    let delta_logp = y[d];
    Ok(LikelihoodReport {
        log_prob: base + delta_logp,
        bpd: None,
        nfe: stats.nfe,
        wall_time: start.elapsed().as_secs_f64(),
        backend: backend.label(),
        accepted: stats.accepted,
        rejected: stats.rejected,
        matvecs: state.matvecs,
        delta_logp,
    })
}

/// Solver settings for likelihoods: tolerances on the state and on the
/// log-density component are controlled separately.
pub fn likelihood_solver(dim: usize, rtol: f64, atol: f64) -> SolverConfig {
    SolverConfig {
        rtol,
        atol,
        norm: ErrorNorm::SplitMax(dim),
        ..SolverConfig::default()
    }
}

/// Likelihood of every row of `data`; sample `i` uses the probe stream
/// `(seed, i)`.
pub fn log_likelihood_batch(
    field: &dyn VelocityField,
    backend: &DivergenceBackend,
    data: &Dataset,
    solver: &SolverConfig,
    seed: u64,
) -> Result<Vec<LikelihoodReport>> {
    par::try_map_range(data.len(), |i| {
        log_likelihood(field, backend, data.row(i), data.context(i), solver, rng::derive_key(seed, &[i as u64]))
    })
}

/// `-log p / (D ln 2) + offset`
pub fn bits_per_dimension(log_prob: f64, dim: usize, offset: f64) -> f64 {
    -log_prob / (dim as f64 * std::f64::consts::LN_2) + offset
}

/// Inverse of [`bits_per_dimension`].
pub fn log_prob_from_bpd(bpd: f64, dim: usize, offset: f64) -> f64 {
    -(bpd - offset) * dim as f64 * std::f64::consts::LN_2
}

/// Map integer levels `0..levels` to `[-1, 1]` with uniform jitter inside
/// each level's cell.
pub fn dequantize(x: &[u32], levels: u32, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if levels < 2 {
        return Err(Error::Config("dequantization needs at least 2 levels".into()));
    }
    x.iter()
        .map(|&v| {
            if v >= levels {
                return Err(Error::Config(format!("value {v} outside {levels} levels")));
            }
            let u: f64 = rng.random();
            Ok(2.0 * (v as f64 + u) / levels as f64 - 1.0)
        })
        .collect()
}

/// Inverse cell lookup of [`dequantize`].
pub fn quantize(y: &[f64], levels: u32) -> Vec<u32> {
    y.iter()
        .map(|v| (((v + 1.0) / 2.0 * levels as f64).floor().max(0.0) as u32).min(levels - 1))
        .collect()
}

/// One row of the backend comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub backend: String,
    pub n_probes: usize,
    /// Mean of `exact - estimate`.
    pub mean_resid: f64,
    pub std_resid: f64,
    pub mae: f64,
    /// Exact wall time over this backend's wall time.
    pub speedup: f64,
    /// This backend's NFE over the exact backend's NFE.
    pub rnfe: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<MetricsRow>,
    /// Per-backend residuals `exact - estimate`, aligned with `rows`.
    pub residuals: Vec<Vec<f64>>,
    pub reports: Vec<Vec<LikelihoodReport>>,
}

pub const METRICS_CSV_HEADER: &str = "backend,n_probes,mean_resid,std_resid,mae,speedup,rnfe,wall_s";

/// Run every backend on the same points and summarize against `exact`.
pub fn compare_backends(
    field: &dyn VelocityField,
    data: &Dataset,
    backends: &[DivergenceBackend],
    solver: &SolverConfig,
    seed: u64,
) -> Result<Comparison> {
    let Some(exact_idx) = backends.iter().position(|b| b.kind == BackendKind::Exact) else {
        return Err(Error::Config("backend comparison needs the exact backend".into()));
    };
    let mut reports = Vec::with_capacity(backends.len());
    let mut walls = Vec::with_capacity(backends.len());
    for b in backends {
        let start = Instant::now();
        reports.push(log_likelihood_batch(field, b, data, solver, seed)?);
        walls.push(start.elapsed().as_secs_f64());
    }
    let exact = &reports[exact_idx];
    let mut rows = Vec::new();
    let mut residuals = Vec::new();
    for (b, (rep, wall)) in backends.iter().zip(reports.iter().zip(&walls)) {
        let (row, resid) = summarize(&b.label(), b.n_probes, exact, rep, *wall)?;
        rows.push(row);
        residuals.push(resid);
    }
    Ok(Comparison { rows, residuals, reports })
}

/// Metrics row and residuals `exact - estimate` for one backend's reports,
/// aligned point by point with the exact run.
pub fn summarize(
    label: &str,
    n_probes: usize,
    exact: &[LikelihoodReport],
    reports: &[LikelihoodReport],
    wall_s: f64,
) -> Result<(MetricsRow, Vec<f64>)> {
    if exact.is_empty() || exact.len() != reports.len() {
        return Err(Error::ShapeError(format!(
            "{label} has {} reports, exact has {}",
            reports.len(),
            exact.len()
        )));
    }
    let exact_nfe: usize = exact.iter().map(|r| r.nfe).sum();
    let exact_wall: f64 = exact.iter().map(|r| r.wall_time).sum();
    let resid: Vec<f64> = exact.iter().zip(reports).map(|(e, r)| e.log_prob - r.log_prob).collect();
    let n = resid.len() as f64;
    let mean = resid.iter().sum::<f64>() / n;
    let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mae = resid.iter().map(|r| r.abs()).sum::<f64>() / n;
    let nfe: usize = reports.iter().map(|r| r.nfe).sum();
    let per_sample_wall: f64 = reports.iter().map(|r| r.wall_time).sum();
    let row = MetricsRow {
        backend: label.to_string(),
        n_probes,
        mean_resid: mean,
        std_resid: std,
        mae,
        speedup: exact_wall / per_sample_wall,
        rnfe: nfe as f64 / exact_nfe as f64,
        wall_s,
    };
    Ok((row, resid))
}

pub fn write_metrics_csv(rows: &[MetricsRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.9e},{:.9e},{:.9e},{:.6},{:.6},{:.6}",
            r.backend, r.n_probes, r.mean_resid, r.std_resid, r.mae, r.speedup, r.rnfe, r.wall_s
        )?;
    }
    Ok(())
}

/// `(bin_left, bin_right, count)` over `[lo, hi)`; values outside are
/// clamped into the edge bins. The range defaults to the data extent.
pub fn residual_histogram(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Vec<(f64, f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let (lo, hi) = range.unwrap_or_else(|| {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    });
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let k = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| (lo + k as f64 * width, lo + (k + 1) as f64 * width, c))
        .collect()
}

pub fn write_histogram_csv(hist: &[(f64, f64, usize)], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "bin_left,bin_right,count")?;
    for (l, r, c) in hist {
        writeln!(w, "{l:.9e},{r:.9e},{c}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{analytic_gaussian_field, LinearField, ScheduleSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn exponential_growth() {
        let cfg = SolverConfig {
            rtol: 1e-10,
            atol: 1e-10,
            ..Default::default()
        };
        let (y, st) = dopri5(|_, y| Ok(vec![y[0]]), &[1.0], (0.0, 1.0), &cfg).unwrap();
        assert!((y[0] - std::f64::consts::E).abs() < 1e-6);
        assert!(st.accepted > 0);
    }

    #[test]
    fn zero_rhs_takes_one_step() {
        let (y, st) = dopri5(|_, _| Ok(vec![0.0, 0.0]), &[3.0, -1.0], (0.0, 1.0), &SolverConfig::default()).unwrap();
        assert_eq!(y, vec![3.0, -1.0]);
        assert_eq!((st.accepted, st.rejected), (1, 0));
    }

    #[test]
    fn linear_system_matches_matrix_exponential() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 2.0, 0.0, -2.0, -1.0, 0.5, 0.0, 0.3, -0.2]);
        let y0 = nalgebra::DVector::from_row_slice(&[1.0, 0.5, -1.0]);
        let cfg = SolverConfig {
            rtol: 1e-9,
            atol: 1e-9,
            ..Default::default()
        };
        let rhs = |_: f64, y: &[f64]| Ok((&a * nalgebra::DVector::from_row_slice(y)).as_slice().to_vec());
        let (y, _) = dopri5(rhs, y0.as_slice(), (0.0, 2.0), &cfg).unwrap();
        let expect = (a.clone() * 2.0).exp() * y0;
        for i in 0..3 {
            assert!((y[i] - expect[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn stiffness_reports_trajectory() {
        let cfg = SolverConfig {
            max_steps: 50,
            ..Default::default()
        };
        // Finite-time blow-up at t = 1.
        let res = dopri5(|_, y| Ok(vec![y[0] * y[0]]), &[1.0], (0.0, 2.0), &cfg);
        match res {
            Err(Error::Stiffness { trajectory, .. }) => assert!(!trajectory.is_empty()),
            Err(Error::NonFiniteField { .. }) => {}
            other => panic!("expected a solver failure, got {other:?}"),
        }
    }

    #[test]
    fn standard_normal_under_vp_is_static() {
        let f = analytic_gaussian_field(vec![0.0; 2], DMatrix::identity(2, 2), ScheduleSpec::vp()).unwrap();
        let x = [0.7, -1.3];
        let r = log_likelihood(&f, &DivergenceBackend::exact(), &x, None, &likelihood_solver(2, 1e-5, 1e-5), 0).unwrap();
        assert_eq!(r.delta_logp, 0.0);
        let expect = -(2.0 * std::f64::consts::PI).ln() - 0.5 * (0.49 + 1.69);
        assert_abs_diff_eq!(r.log_prob, expect, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_exact_backend_matches_closed_form() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 0.6]);
        let f = analytic_gaussian_field(vec![1.0, -0.5], cov, ScheduleSpec::vp()).unwrap();
        let solver = likelihood_solver(2, 1e-5, 1e-5);
        for x in [[0.0, 0.0], [2.0, -1.0], [1.0, 0.5]] {
            let r = log_likelihood(&f, &DivergenceBackend::exact(), &x, None, &solver, 0).unwrap();
            let exact = f.target.log_density(&x, None).unwrap();
            assert!((r.log_prob - exact).abs() < 1e-3, "{} vs {exact}", r.log_prob);
        }
    }

    #[test]
    fn backends_on_linear_field() {
        let a = DMatrix::from_row_slice(3, 3, &[-0.5, 0.2, 0.0, 0.1, -0.3, 0.4, 0.0, -0.2, -0.1]);
        let tr = a.trace();
        let f = LinearField {
            a,
            sched: ScheduleSpec::vp(),
        };
        let solver = likelihood_solver(3, 1e-8, 1e-8);
        let x = [0.3, 0.1, -0.4];
        let span = 1.0 - 1e-3;
        let exact = log_likelihood(&f, &DivergenceBackend::exact(), &x, None, &solver, 1).unwrap();
        assert_abs_diff_eq!(exact.delta_logp, tr * span, epsilon = 1e-8);
        for kind in [BackendKind::Hutchpp, BackendKind::Xtrace] {
            // Gaussian sketches are full rank almost surely, so n = D is exact.
            let mut b = DivergenceBackend::stochastic(kind, 3);
            b.probe_kind = ProbeKind::Gaussian;
            let r = log_likelihood(&f, &b, &x, None, &solver, 1).unwrap();
            assert_abs_diff_eq!(r.delta_logp, tr * span, epsilon = 1e-8);
        }
        // Hutchinson is unbiased over probe seeds.
        let n = 400;
        let mean: f64 = (0..n)
            .map(|s| {
                log_likelihood(&f, &DivergenceBackend::stochastic(BackendKind::Hutchinson, 1), &x, None, &solver, s)
                    .unwrap()
                    .delta_logp
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - tr * span).abs() < 0.05);
    }

    #[test]
    fn hutchpp_refresh_budget() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 0.2, 0.1, -0.3]);
        let f = LinearField {
            a,
            sched: ScheduleSpec::vp(),
        };
        let mut b = DivergenceBackend::stochastic(BackendKind::Hutchpp, 1);
        b.hutchpp_refresh = 6;
        let r = log_likelihood(&f, &b, &[0.2, 0.1], None, &likelihood_solver(2, 1e-5, 1e-5), 3).unwrap();
        let refreshes = r.nfe.div_ceil(6);
        assert_eq!(r.matvecs, 2 * r.nfe + refreshes);
    }

    #[test]
    fn bpd_arithmetic() {
        assert_eq!(bits_per_dimension(0.0, 3072, 7.0), 7.0);
        assert_abs_diff_eq!(bits_per_dimension(-std::f64::consts::LN_2, 1, 0.0), 1.0, epsilon = 1e-15);
        let lp = log_prob_from_bpd(3.403, 3072, 7.0);
        assert_abs_diff_eq!(lp, 3.597 * 3072.0 * std::f64::consts::LN_2, epsilon = 1e-9);
        assert_abs_diff_eq!(bits_per_dimension(lp, 3072, 7.0), 3.403, epsilon = 1e-9);
    }

    #[test]
    fn dequantize_round_trip() {
        let mut s = rng::stream(1, &[]);
        let x: Vec<u32> = (0..256).collect();
        let y = dequantize(&x, 256, &mut s).unwrap();
        assert!(y[0] >= -1.0 && y[0] < -1.0 + 2.0 / 256.0);
        assert_eq!(quantize(&y, 256), x);
        let draws = dequantize(&vec![10u32; 100_000], 256, &mut s).unwrap();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let cell = 2.0 / 256.0;
        let expect = 2.0 * 10.0 / 256.0 - 1.0 + 0.5 * cell;
        assert!((mean - expect).abs() < 3.0 * cell / (12.0f64.sqrt() * (draws.len() as f64).sqrt()) * 1.5);
        assert!(dequantize(&[0], 1, &mut s).is_err());
    }

    #[test]
    fn self_comparison_is_trivial() {
        let f = analytic_gaussian_field(vec![0.5, 0.0], DMatrix::identity(2, 2) * 0.5, ScheduleSpec::vp()).unwrap();
        let data = f.target.sample(8, 2);
        let cmp = compare_backends(&f, &data, &[DivergenceBackend::exact()], &likelihood_solver(2, 1e-5, 1e-5), 0).unwrap();
        let r = &cmp.rows[0];
        assert_eq!((r.mean_resid, r.std_resid, r.mae, r.speedup, r.rnfe), (0.0, 0.0, 0.0, 1.0, 1.0));
        assert!(compare_backends(&f, &data, &[DivergenceBackend::stochastic(BackendKind::Hutchinson, 1)], &SolverConfig::default(), 0).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let v: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let h = residual_histogram(&v, 7, None);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 100);
        assert_eq!(h[0].0, 0.0);
        assert!((h[6].1 - 9.9).abs() < 1e-12);
    }
}
