//! Stein amortized divergence.
//!
//! The divergence of a field is split into a cheap baseline and a learned
//! residual: `div v = -<v, s> + r` with `r = div v + <v, s>` the
//! Langevin-Stein operator applied to `v`. A scalar head `delta(x, t, c)` is
//! trained to approximate `r` with the Stein loss
//! `E[delta^2 + 2 <grad delta, v>]`, which by integration by parts equals
//! `E[(delta - r)^2] - E[r^2]` and never needs a Jacobian of `v`. A smooth
//! cutoff `kappa_R` makes the head compactly supported so the boundary term
//! of the integration by parts vanishes.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{marginal_sample, AnalyticMixtureField, VelocityField};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::net::{FieldNet, Optimizer, OptimizerConfig};
use crate::par;
use crate::rng::{self, tag};
use crate::targets::Dataset;

/// `b = -<v, s>`
pub fn stein_baseline(v: &[f64], s: &[f64]) -> f64 {
    -dot(v, s)
}

/// `r = div v + <v, s>` using the field's exact Jacobian. Test-scale only.
pub fn residual_target_oracle(field: &dyn VelocityField, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<f64> {
    let (v, s) = field.drift_and_score(x, t, c)?;
    Ok(field.divergence(x, t, c)? + dot(&v, &s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffMode {
    /// `(1 + cos(pi |x| / R - pi)) / 2` on the shell `R < |x| < 2R`.
    Cosine,
    /// C-infinity transition built from `exp(-1/s)`.
    Bump,
}

/// Compactly supported multiplier: 1 inside radius `R`, 0 beyond `2R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub radius: f64,
    pub mode: CutoffMode,
    /// Percentile of cache norms the radius was set from.
    pub percentile: f64,
}

fn psi(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp()
    } else {
        0.0
    }
}

fn dpsi(s: f64) -> f64 {
    if s > 0.0 {
        psi(s) / (s * s)
    } else {
        0.0
    }
}

impl CutoffSpec {
    pub fn cosine(radius: f64) -> Self {
        Self {
            radius,
            mode: CutoffMode::Cosine,
            percentile: 99.5,
        }
    }

    /// `(kappa, d kappa / d|x|)` at radius `r`.
    fn radial(&self, r: f64) -> (f64, f64) {
        let big_r = self.radius;
        if r <= big_r {
            return (1.0, 0.0);
        }
        if r >= 2.0 * big_r {
            return (0.0, 0.0);
        }
        match self.mode {
            CutoffMode::Cosine => {
                let phase = std::f64::consts::PI * r / big_r - std::f64::consts::PI;
                (0.5 * (1.0 + phase.cos()), -0.5 * std::f64::consts::PI / big_r * phase.sin())
            }
            CutoffMode::Bump => {
                let u = r / big_r - 1.0;
                let (a, b) = (psi(1.0 - u), psi(u));
                let den = a + b;
                let dk = (-dpsi(1.0 - u) * b - a * dpsi(u)) / (den * den);
                (a / den, dk / big_r)
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.radial(norm(x)).0
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.value_and_gradient(x).1
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let r = norm(x);
        let (k, dk) = self.radial(r);
        if dk == 0.0 || r == 0.0 {
            return (k, vec![0.0; x.len()]);
        }
        (k, x.iter().map(|xi| dk * xi / r).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeProposal {
    Uniform,
    InverseSquare,
}

/// Draw `t` from the proposal by inverse CDF of `u` and return the weight
/// `w = p(t) / q(t)` relative to the uniform density on `[eps, T]`.
///
/// For `q(t) = t^-2 / (1/eps - 1/T)` this gives
/// `t = 1 / (1/eps - u (1/eps - 1/T))` and `w = t^2 (1/eps - 1/T) / (T - eps)`.
pub fn sample_time_importance(proposal: TimeProposal, eps: f64, t_end: f64, u: f64) -> (f64, f64) {
    match proposal {
        TimeProposal::Uniform => (eps + u * (t_end - eps), 1.0),
        TimeProposal::InverseSquare => {
            let span = 1.0 / eps - 1.0 / t_end;
            let t = 1.0 / (1.0 / eps - u * span);
            (t, t * t * span / (t_end - eps))
        }
    }
}

/// Density of the time proposal on `[eps, T]`.
pub fn proposal_density(proposal: TimeProposal, eps: f64, t_end: f64, t: f64) -> f64 {
    if t < eps || t > t_end {
        return 0.0;
    }
    match proposal {
        TimeProposal::Uniform => 1.0 / (t_end - eps),
        TimeProposal::InverseSquare => 1.0 / (t * t * (1.0 / eps - 1.0 / t_end)),
    }
}

/// One teacher evaluation `(x_t, t, v_t, c)` with its importance weight.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub x: Vec<f64>,
    pub t: f64,
    pub v: Vec<f64>,
    pub c: Option<Vec<f64>>,
    pub w: f64,
}

#[derive(Debug, Clone)]
pub struct DistillCache {
    pub entries: Vec<CacheEntry>,
    pub proposal: TimeProposal,
    pub rebuild_period: usize,
    /// Build round, used to key the random streams of each rebuild.
    pub round: u64,
}

impl DistillCache {
    /// Sample `size` data points, times and noises and evaluate the teacher
    /// drift at each noised point. Only drift evaluations, no Jacobians.
    pub fn build(
        field: &dyn VelocityField,
        data: &Dataset,
        size: usize,
        proposal: TimeProposal,
        rebuild_period: usize,
        seed: u64,
        round: u64,
    ) -> Result<Self> {
        if size == 0 || data.is_empty() {
            return Err(Error::Config("distillation cache needs data and a positive size".into()));
        }
        check_dim(field.dim(), data.dim)?;
        let sched = *field.schedule();
        let entries = par::try_map_range(size, |m| {
            let mut s = rng::stream(seed, &[tag::CACHE, round, m as u64]);
            let i = s.random_range(0..data.len());
            let (t, w) = sample_time_importance(proposal, sched.eps, sched.t_end, s.random::<f64>());
            let z = rng::gaussian(&mut s, data.dim);
            let c = data.context(i).map(<[f64]>::to_vec);
            let x = marginal_sample(&sched, data.row(i), t, &z)?;
            let v = field.drift(&x, t, c.as_deref())?;
            Ok::<_, Error>(CacheEntry { x, t, v, c, w })
        })?;
        Ok(Self {
            entries,
            proposal,
            rebuild_period,
            round,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `p`-th percentile (0..=100) of `|x_t|` over the cache.
    pub fn norm_percentile(&self, p: f64) -> f64 {
        let mut norms: Vec<f64> = self.entries.iter().map(|e| norm(&e.x)).collect();
        norms.sort_by(f64::total_cmp);
        let pos = (p / 100.0).clamp(0.0, 1.0) * (norms.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        norms[lo] + (pos - lo as f64) * (norms[hi] - norms[lo])
    }

    /// Fraction of entries with `|x_t| >= r`.
    pub fn fraction_outside(&self, r: f64) -> f64 {
        self.entries.iter().filter(|e| norm(&e.x) >= r).count() as f64 / self.len() as f64
    }
}

/// Samples per parallel work unit in batch losses. Fixed so reductions do
/// not depend on the thread count.
const LOSS_CHUNK: usize = 16;

/// Per-sample Stein loss terms and the adjoints they induce on the head.
struct SampleLoss {
    loss: f64,
    /// `dL/d delta`
    a: f64,
    /// `dL/d grad_x delta`
    u: Vec<f64>,
}

fn sample_loss(head: &FieldNet, e: &CacheEntry, cutoff: Option<&CutoffSpec>, l: f64) -> Result<SampleLoss> {
    let (delta, grad) = head.value_and_input_gradient(&e.x, e.t, e.c.as_deref())?;
    let (kappa, dkappa) = match cutoff {
        Some(cut) => cut.value_and_gradient(&e.x),
        None => (1.0, vec![0.0; e.x.len()]),
    };
    let dhat = kappa * delta;
    let g: Vec<f64> = grad.iter().zip(&dkappa).map(|(gd, dk)| kappa * gd + delta * dk).collect();
    let gv = dot(&g, &e.v);
    let gg = dot(&g, &g);
    let loss = e.w * (dhat * dhat + 2.0 * gv + l * gg);
    let a = e.w * (2.0 * kappa * kappa * delta + 2.0 * dot(&dkappa, &e.v) + 2.0 * l * dot(&g, &dkappa));
    let u = e.v.iter().zip(&g).map(|(v, g)| e.w * (2.0 * kappa * v + 2.0 * l * kappa * g)).collect();
    Ok(SampleLoss { loss, a, u })
}

/// Regularized Stein loss over a batch and its parameter gradient:
/// `(1/B) sum_i w_i (dhat_i^2 + 2 <g_i, v_i> + l |g_i|^2)` with
/// `dhat = kappa delta` and `g = kappa grad delta + delta grad kappa`.
/// `cutoff = None` means `kappa = 1`.
pub fn stein_loss_batch(head: &FieldNet, batch: &[&CacheEntry], cutoff: Option<&CutoffSpec>, l: f64) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let n = head.n_params();
    let chunks = par::try_map_range(batch.len().div_ceil(LOSS_CHUNK), |k| -> Result<(Vec<f64>, Vec<f64>)> {
        let lo = k * LOSS_CHUNK;
        let hi = (lo + LOSS_CHUNK).min(batch.len());
        let mut grad = vec![0.0; n];
        let mut losses = Vec::with_capacity(hi - lo);
        for e in &batch[lo..hi] {
            let s = sample_loss(head, e, cutoff, l)?;
            head.backward_tangent(&e.x, e.t, e.c.as_deref(), &s.u, &[s.a], &[1.0], &mut grad)?;
            losses.push(s.loss);
        }
        Ok((losses, grad))
    })?;
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for (ls, g) in chunks {
        for v in ls {
            loss += v;
        }
        axpy(1.0, &g, &mut grad);
    }
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// A trained scalar head and how it enters the divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Stein-distilled residual: `div = -<v, s> + kappa delta`.
    SteinResidual,
    /// Direct regression onto single-probe divergence estimates: `div = delta`.
    DirectDivergence,
    /// Direct regression onto estimate-plus-baseline: `div = -<v, s> + delta`.
    DirectResidual,
}

impl HeadKind {
    pub fn uses_baseline(self) -> bool {
        !matches!(self, HeadKind::DirectDivergence)
    }
}

#[derive(Debug, Clone)]
pub struct LearnedHead {
    pub net: Arc<FieldNet>,
    pub cutoff: Option<CutoffSpec>,
    pub kind: HeadKind,
}

impl LearnedHead {
    /// `kappa(x) delta(x, t, c)`
    pub fn value(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<f64> {
        let k = self.cutoff.map_or(1.0, |cut| cut.value(x));
        if k == 0.0 {
            return Ok(0.0);
        }
        Ok(k * self.net.forward(x, t, c)?[0])
    }

    /// Divergence estimate given the drift `v` and score `s` at `x`.
    pub fn divergence(&self, x: &[f64], t: f64, c: Option<&[f64]>, v: &[f64], s: Option<&[f64]>) -> Result<f64> {
        let base = if self.kind.uses_baseline() {
            let s = s.ok_or_else(|| Error::Config("baseline needs a score".into()))?;
            stein_baseline(v, s)
        } else {
            0.0
        };
        Ok(base + self.value(x, t, c)?)
    }

    pub fn extras(&self) -> serde_json::Value {
        serde_json::json!({ "head_kind": self.kind, "cutoff": self.cutoff })
    }

    pub fn from_extras(net: FieldNet, extras: &serde_json::Value) -> Result<Self> {
        let kind = serde_json::from_value(extras.get("head_kind").cloned().unwrap_or(serde_json::Value::Null))
            .map_err(|_| Error::Checkpoint("head checkpoint lacks head_kind".into()))?;
        let cutoff = match extras.get("cutoff") {
            Some(v) if !v.is_null() => Some(serde_json::from_value(v.clone())?),
            _ => None,
        };
        if net.output_dim() != 1 {
            return Err(Error::ShapeError("head must have a scalar output".into()));
        }
        Ok(Self {
            net: Arc::new(net),
            cutoff,
            kind,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteinHyper {
    /// Gradient penalty weight `l`.
    pub l: f64,
    pub steps: usize,
    pub batch: usize,
    /// Rebuild the cache every this many steps; 0 never rebuilds.
    pub rebuild_period: usize,
    pub cache_size: usize,
    pub proposal: TimeProposal,
    pub cutoff_mode: CutoffMode,
    /// Percentile of initial-cache norms that sets `R`; ignored with `radius`.
    pub percentile: f64,
    /// Fixed radius instead of the percentile rule.
    pub radius: Option<f64>,
    /// Disable the cutoff entirely.
    pub no_cutoff: bool,
    pub optimizer: OptimizerConfig,
    /// Stop once this much wall time (cache builds included) has been spent.
    pub time_budget_s: Option<f64>,
}

impl Default for SteinHyper {
    fn default() -> Self {
        Self {
            l: 0.0,
            steps: 10_000,
            batch: 256,
            rebuild_period: 2000,
            cache_size: 100_000,
            proposal: TimeProposal::InverseSquare,
            cutoff_mode: CutoffMode::Cosine,
            percentile: 99.5,
            radius: None,
            no_cutoff: false,
            optimizer: OptimizerConfig {
                schedule: crate::net::LrSchedule::Cosine {
                    lr_max: 1e-4,
                    lr_min: 1e-8,
                    total_steps: 10_000,
                },
                ..OptimizerConfig::default()
            },
            time_budget_s: None,
        }
    }
}

/// Summary of a distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub steps: usize,
    pub final_loss: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(rename = "fraction_outside_2R")]
    pub fraction_outside_2r: f64,
    pub wall_time_cache_s: f64,
    pub wall_time_train_s: f64,
    /// Step at which a non-finite loss stopped training.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aborted_at: Option<usize>,
    #[serde(skip)]
    pub loss_curve: Vec<f64>,
}

/// Window of trailing steps averaged into `final_loss`.
const FINAL_LOSS_WINDOW: usize = 50;

pub(crate) fn tail_mean(v: &[f64], window: usize) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let tail = &v[v.len().saturating_sub(window)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Cached Stein distillation of a residual head.
///
/// Builds the cache from teacher drifts at noised data points, sets `R` from
/// the norm percentile of the initial cache, then takes `steps` optimizer
/// steps on importance-weighted batches, rebuilding the cache every
/// `rebuild_period` steps. On a non-finite loss training stops and the head
/// from the last good step is returned with `aborted_at` set.
pub fn distill(field: &dyn VelocityField, data: &Dataset, head: FieldNet, hyper: &SteinHyper, seed: u64) -> Result<(LearnedHead, DistillReport)> {
    if head.output_dim() != 1 || head.input_dim() != field.dim() {
        return Err(Error::ShapeError(format!(
            "head maps R^{} to R^{}, field lives in R^{}",
            head.input_dim(),
            head.output_dim(),
            field.dim()
        )));
    }
    if hyper.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let t0 = Instant::now();
    let mut cache = DistillCache::build(field, data, hyper.cache_size, hyper.proposal, hyper.rebuild_period, seed, 0)?;
    let mut cache_time = t0.elapsed().as_secs_f64();

    let cutoff = if hyper.no_cutoff {
        None
    } else {
        let radius = hyper.radius.unwrap_or_else(|| cache.norm_percentile(hyper.percentile));
        if !(radius > 0.0) {
            return Err(Error::Config(format!("cutoff radius {radius} must be positive")));
        }
        Some(CutoffSpec {
            radius,
            mode: hyper.cutoff_mode,
            percentile: hyper.percentile,
        })
    };
    let radius = cutoff.map_or(f64::INFINITY, |c| c.radius);
    let fraction_outside = cache.fraction_outside(2.0 * radius);

    let mut net = head;
    let mut opt = Optimizer::new(hyper.optimizer.clone(), net.n_params());
    let mut losses = Vec::with_capacity(hyper.steps);
    let mut aborted_at = None;
    let train_start = Instant::now();
    let mut rebuild_time = 0.0;
    let mut steps_done = 0;
    for step in 0..hyper.steps {
        if let Some(budget) = hyper.time_budget_s {
            if t0.elapsed().as_secs_f64() >= budget {
                break;
            }
        }
        if hyper.rebuild_period > 0 && step > 0 && step % hyper.rebuild_period == 0 {
            let tc = Instant::now();
            cache = DistillCache::build(field, data, hyper.cache_size, hyper.proposal, hyper.rebuild_period, seed, cache.round + 1)?;
            rebuild_time += tc.elapsed().as_secs_f64();
        }
        let mut s = rng::stream(seed, &[tag::BATCH, step as u64]);
        let batch: Vec<&CacheEntry> = (0..hyper.batch).map(|_| &cache.entries[s.random_range(0..cache.len())]).collect();
        let (loss, grad) = match stein_loss_batch(&net, &batch, cutoff.as_ref(), hyper.l) {
            Ok(v) if v.0.is_finite() => v,
            Ok(_) | Err(Error::NonFiniteField { .. }) | Err(Error::CorruptModel) => {
                aborted_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let mut trial = net.params().to_vec();
        if opt.step(&mut trial, &grad).is_err() || !trial.iter().all(|p| p.is_finite()) {
            aborted_at = Some(step);
            break;
        }
        net.params_mut().copy_from_slice(&trial);
        losses.push(loss);
        steps_done = step + 1;
    }
    let train_time = train_start.elapsed().as_secs_f64() - rebuild_time;
    cache_time += rebuild_time;
    let report = DistillReport {
        steps: steps_done,
        final_loss: tail_mean(&losses, FINAL_LOSS_WINDOW),
        radius,
        fraction_outside_2r: fraction_outside,
        wall_time_cache_s: cache_time,
        wall_time_train_s: train_time.max(0.0),
        aborted_at,
        loss_curve: losses,
    };
    Ok((
        LearnedHead {
            net: Arc::new(net),
            cutoff,
            kind: HeadKind::SteinResidual,
        },
        report,
    ))
}

/// Monte Carlo sides of the mixed-term identity
/// `E[dhat r] = -E[<grad dhat, v>]` under the time-`t` marginal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixedTermReport {
    pub n: usize,
    pub lhs_mean: f64,
    pub lhs_se: f64,
    pub rhs_mean: f64,
    pub rhs_se: f64,
    /// `sqrt(lhs_se^2 + rhs_se^2)`
    pub combined_se: f64,
}

impl MixedTermReport {
    /// `|lhs - rhs|` in combined standard errors.
    pub fn z_score(&self) -> f64 {
        if self.combined_se == 0.0 {
            if self.lhs_mean == self.rhs_mean {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.lhs_mean - self.rhs_mean).abs() / self.combined_se
        }
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Estimate both sides of the integration-by-parts identity from `n` exact
/// samples of the field's time-`t` marginal.
pub fn mixed_term_identity_check(
    head: &FieldNet,
    cutoff: Option<&CutoffSpec>,
    field: &AnalyticMixtureField,
    t: f64,
    n: usize,
    seed: u64,
) -> Result<MixedTermReport> {
    let sched = field.sched;
    sched.check_time(t)?;
    let data = field.target.sample(n, rng::derive_key(seed, &[tag::DATA]));
    let pairs = par::try_map_range(n, |i| -> Result<(f64, f64)> {
        let mut s = rng::stream(seed, &[tag::PROBE, i as u64]);
        let z = rng::gaussian(&mut s, data.dim);
        let c = data.context(i);
        let x = marginal_sample(&sched, data.row(i), t, &z)?;
        let (delta, grad) = head.value_and_input_gradient(&x, t, c)?;
        let (k, dk) = match cutoff {
            Some(cut) => cut.value_and_gradient(&x),
            None => (1.0, vec![0.0; x.len()]),
        };
        let dhat = k * delta;
        let g: Vec<f64> = grad.iter().zip(&dk).map(|(gd, d)| k * gd + delta * d).collect();
        let (v, sc) = field.drift_and_score(&x, t, c)?;
        let r = field.divergence(&x, t, c)? + dot(&v, &sc);
        Ok((dhat * r, -dot(&g, &v)))
    })?;
    let (lhs, rhs): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let (lhs_mean, lhs_se) = mean_se(&lhs);
    let (rhs_mean, rhs_se) = mean_se(&rhs);
    Ok(MixedTermReport {
        n,
        lhs_mean,
        lhs_se,
        rhs_mean,
        rhs_se,
        combined_se: (lhs_se * lhs_se + rhs_se * rhs_se).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{analytic_gaussian_field, LinearField, ScheduleSpec};
    use crate::net::{Activation, TimeEmbedding};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    #[test]
    fn baseline_cases() {
        let x = [1.0, 1.0];
        let v: Vec<f64> = x.iter().map(|a| -a).collect();
        assert_eq!(stein_baseline(&v, &v), -2.0);
        assert_eq!(stein_baseline(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        let sched = ScheduleSpec::flow_linear();
        let s = crate::dynamics::score_from_velocity(&sched, &[-1.0, 0.0], &[1.0, 0.0], 0.5).unwrap();
        assert_eq!(stein_baseline(&[-1.0, 0.0], &s), -1.0);
    }

    #[test]
    fn residual_of_contraction_field() {
        let f = LinearField {
            a: -DMatrix::identity(2, 2),
            sched: ScheduleSpec::vp(),
        };
        assert_abs_diff_eq!(residual_target_oracle(&f, &[1.0, 1.0], 0.5, None).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(residual_target_oracle(&f, &[2.0, 0.0], 0.5, None).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn cutoff_regions() {
        let c = CutoffSpec::cosine(2.0);
        let (k, g) = c.value_and_gradient(&[1.0, 0.0]);
        assert_eq!((k, g), (1.0, vec![0.0, 0.0]));
        let (k, g) = c.value_and_gradient(&[0.0, 3.0]);
        assert_abs_diff_eq!(k, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(norm(&g), std::f64::consts::PI / 4.0, epsilon = 1e-15);
        assert!(g[1] < 0.0);
        let (k, g) = c.value_and_gradient(&[5.0, 0.0]);
        assert_eq!((k, g), (0.0, vec![0.0, 0.0]));
        assert_eq!(c.gradient(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn cutoff_gradients_match_fd_and_are_continuous() {
        for mode in [CutoffMode::Cosine, CutoffMode::Bump] {
            let c = CutoffSpec {
                radius: 1.5,
                mode,
                percentile: 99.5,
            };
            let dir = [0.6, -0.8];
            let mut prev = None;
            for i in 0..400 {
                let r = 1.2 + 2.0 * i as f64 / 400.0;
                let x = [r * dir[0], r * dir[1]];
                let g = c.gradient(&x);
                let h = 1e-6;
                for j in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (c.value(&xp) - c.value(&xm)) / (2.0 * h);
                    assert!((fd - g[j]).abs() < 1e-6, "{mode:?} r={r}");
                }
                let k = c.value(&x);
                assert!((0.0..=1.0).contains(&k));
                if let Some(p) = prev {
                    assert!(k <= p, "not monotone");
                    assert!((k - p).abs() < 0.05);
                }
                prev = Some(k);
            }
        }
    }

    #[test]
    fn importance_sampler_values() {
        let q = proposal_density(TimeProposal::InverseSquare, 0.1, 1.0, 0.5);
        assert_abs_diff_eq!(q, 4.0 / 9.0, epsilon = 1e-14);
        // u such that t = 0.5: 1/0.5 = 10 - 9u.
        let (t, w) = sample_time_importance(TimeProposal::InverseSquare, 0.1, 1.0, 8.0 / 9.0);
        assert_abs_diff_eq!(t, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(w, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w, (1.0 / 0.9) / q, epsilon = 1e-12);
    }

    fn entry(x: &[f64], v: &[f64], w: f64) -> CacheEntry {
        CacheEntry {
            x: x.to_vec(),
            t: 0.5,
            v: v.to_vec(),
            c: None,
            w,
        }
    }

    #[test]
    fn zero_and_constant_heads() {
        let zero = FieldNet::zeros(&[2, 8, 1], Activation::Tanh, TimeEmbedding::AppendLogT, 0).unwrap();
        let es = [entry(&[0.1, 0.2], &[3.0, -1.0], 1.0), entry(&[-0.5, 0.3], &[0.0, 2.0], 1.0)];
        let b: Vec<&CacheEntry> = es.iter().collect();
        let cut = CutoffSpec::cosine(2.0);
        assert_eq!(stein_loss_batch(&zero, &b, Some(&cut), 0.0).unwrap().0, 0.0);

        let mut constant = zero.clone();
        let n = constant.n_params();
        constant.params_mut()[n - 1] = 0.7;
        let (loss, _) = stein_loss_batch(&constant, &b, Some(&cut), 0.0).unwrap();
        assert_abs_diff_eq!(loss, 0.49, epsilon = 1e-15);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut head = FieldNet::new(&[2, 6, 6, 1], Activation::Silu, TimeEmbedding::AppendLogT, 0, 3).unwrap();
        head.params_mut().iter_mut().for_each(|p| *p *= 1.5);
        let es: Vec<CacheEntry> = (0..5)
            .map(|i| {
                let x = [1.5 * (i as f64 * 0.7).sin(), 1.5 * (i as f64 * 1.3).cos()];
                let v = [0.4 - x[1], x[0] * 0.3];
                CacheEntry {
                    x: x.to_vec(),
                    t: 0.1 + 0.15 * i as f64,
                    v: v.to_vec(),
                    c: None,
                    w: 0.5 + 0.2 * i as f64,
                }
            })
            .collect();
        let b: Vec<&CacheEntry> = es.iter().collect();
        let cut = CutoffSpec::cosine(1.0);
        let (_, g) = stein_loss_batch(&head, &b, Some(&cut), 0.3).unwrap();
        let h = 1e-6;
        for p in 0..head.n_params() {
            let mut hp = head.clone();
            hp.params_mut()[p] += h;
            let mut hm = head.clone();
            hm.params_mut()[p] -= h;
            let fd = (stein_loss_batch(&hp, &b, Some(&cut), 0.3).unwrap().0 - stein_loss_batch(&hm, &b, Some(&cut), 0.3).unwrap().0) / (2.0 * h);
            assert!((fd - g[p]).abs() <= 1e-4 * fd.abs().max(1e-2), "param {p}: {fd} vs {}", g[p]);
        }
    }

    #[test]
    fn loss_without_cutoff_equals_direct_objective() {
        let head = FieldNet::new(&[3, 8, 1], Activation::Tanh, TimeEmbedding::AppendRawT, 0, 9).unwrap();
        let es: Vec<CacheEntry> = (0..40)
            .map(|i| {
                let f = i as f64;
                entry(&[f.sin(), f.cos(), 0.1 * f], &[0.3 * f.cos(), -f.sin(), 1.0], 1.0 + 0.01 * f)
            })
            .collect();
        let b: Vec<&CacheEntry> = es.iter().collect();
        let (loss, _) = stein_loss_batch(&head, &b, None, 0.0).unwrap();
        let mut direct = 0.0;
        for e in &es {
            let (d, g) = head.value_and_input_gradient(&e.x, e.t, None).unwrap();
            direct += e.w * (d * d + 2.0 * dot(&g, &e.v));
        }
        assert!((loss - direct / es.len() as f64).abs() <= 1e-14 * loss.abs().max(1.0));
    }

    #[test]
    fn cache_entries_carry_teacher_drift() {
        let f = analytic_gaussian_field(vec![0.5, -0.5], DMatrix::identity(2, 2) * 0.5, ScheduleSpec::vp()).unwrap();
        let data = f.target.sample(50, 1);
        let cache = DistillCache::build(&f, &data, 64, TimeProposal::InverseSquare, 0, 4, 0).unwrap();
        assert_eq!(cache.len(), 64);
        for e in &cache.entries {
            assert_eq!(e.v, f.drift(&e.x, e.t, None).unwrap());
            assert!(e.t >= 1e-3 && e.t <= 1.0);
            let (_, w) = sample_time_importance(TimeProposal::InverseSquare, 1e-3, 1.0, 0.0);
            assert!(e.w > 0.0 && w > 0.0);
        }
        let again = DistillCache::build(&f, &data, 64, TimeProposal::InverseSquare, 0, 4, 0).unwrap();
        assert_eq!(again.entries, cache.entries);
        assert!(DistillCache::build(&f, &data, 0, TimeProposal::Uniform, 0, 4, 0).is_err());
    }
}
