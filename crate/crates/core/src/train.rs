//! Teacher training and the direct-regression divergence baselines.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{marginal_sample, ScheduleSpec, VelocityField};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::net::{FieldNet, LrSchedule, Optimizer, OptimizerConfig};
use crate::par;
use crate::rng::{self, tag};
use crate::stad::{sample_time_importance, tail_mean, DistillReport, HeadKind, LearnedHead, SteinHyper};
use crate::targets::Dataset;

/// Samples per parallel work item in batch gradients.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub steps: usize,
    /// Batch size at the start of training.
    pub batch: usize,
    /// Doubling cap for the heating schedule; equal to `batch` disables it.
    pub batch_max: usize,
    pub optimizer: OptimizerConfig,
    pub time_budget_s: Option<f64>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 64,
            batch_max: 512,
            optimizer: OptimizerConfig {
                schedule: LrSchedule::Cosine {
                    lr_max: 2e-3,
                    lr_min: 1e-5,
                    total_steps: 5000,
                },
                ..OptimizerConfig::default()
            },
            time_budget_s: None,
        }
    }
}

impl TrainHyper {
    /// Batch size at `step`: doubles at equally spaced points from `batch`
    /// up to `batch_max`.
    pub fn batch_at(&self, step: usize) -> usize {
        let start = self.batch.max(1);
        if self.batch_max <= start {
            return start;
        }
        let mut doublings = 0;
        while start << (doublings + 1) <= self.batch_max {
            doublings += 1;
        }
        let phase = (self.steps / (doublings + 1)).max(1);
        let k = (step / phase).min(doublings);
        (start << k).min(self.batch_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aborted_at: Option<usize>,
    pub loss_curve: Vec<f64>,
}

fn check_data(net: &FieldNet, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidTarget("empty dataset".into()));
    }
    if net.input_dim() != data.dim || net.output_dim() != data.dim {
        return Err(Error::ShapeError(format!(
            "network maps R^{} to R^{}, data lives in R^{}",
            net.input_dim(),
            net.output_dim(),
            data.dim
        )));
    }
    if net.context_dim() != data.context_dim {
        return Err(Error::DimensionMismatch {
            expected: net.context_dim(),
            got: data.context_dim,
        });
    }
    Ok(())
}

/// Per-sample squared-error regression: returns the loss and `dL/d output`.
type SampleFn<'a> = dyn Fn(&FieldNet, usize, u64) -> Result<(Vec<f64>, f64, Option<Vec<f64>>, Vec<f64>, Vec<f64>)> + Sync + 'a;

/// Shared optimization loop. `sample(net, step, k)` returns
/// `(x, t, c, target, weights)` and the loss is `|w * (net(x) - target)|^2`.
fn regress(net: FieldNet, hyper: &TrainHyper, sample: &SampleFn) -> Result<(FieldNet, TrainReport)> {
    if hyper.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let start = Instant::now();
    let mut net = net;
    let mut opt = Optimizer::new(hyper.optimizer.clone(), net.n_params());
    let mut losses = Vec::with_capacity(hyper.steps);
    let mut aborted_at = None;
    let n = net.n_params();
    for step in 0..hyper.steps {
        if hyper.time_budget_s.is_some_and(|b| start.elapsed().as_secs_f64() >= b) {
            break;
        }
        let batch = hyper.batch_at(step);
        let net_ref = &net;
        let chunks = par::try_map_range(batch.div_ceil(CHUNK), |k| -> Result<(Vec<f64>, Vec<f64>)> {
            let lo = k * CHUNK;
            let hi = (lo + CHUNK).min(batch);
            let mut grad = vec![0.0; n];
            let mut ls = Vec::with_capacity(hi - lo);
            for j in lo..hi {
                let (x, t, c, target, w) = sample(net_ref, step, j as u64)?;
                let mut ybar = vec![0.0; target.len()];
                let out = net_ref.forward(&x, t, c.as_deref())?;
                let mut loss = 0.0;
                for i in 0..target.len() {
                    let r = out[i] - target[i];
                    loss += w[i] * r * r;
                    ybar[i] = 2.0 * w[i] * r;
                }
                net_ref.backward_output(&x, t, c.as_deref(), &ybar, &mut grad)?;
                ls.push(loss);
            }
            Ok((ls, grad))
        });
        let chunks = match chunks {
            Ok(c) => c,
            Err(Error::NonFiniteField { .. }) | Err(Error::CorruptModel) => {
                aborted_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let inv = 1.0 / batch as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; n];
        for (ls, g) in chunks {
            loss += ls.iter().sum::<f64>();
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        loss *= inv;
        grad.iter_mut().for_each(|g| *g *= inv);
        if !loss.is_finite() {
            aborted_at = Some(step);
            break;
        }
        let mut trial = net.params().to_vec();
        if opt.step(&mut trial, &grad).is_err() || !trial.iter().all(|p| p.is_finite()) {
            aborted_at = Some(step);
            break;
        }
        net.params_mut().copy_from_slice(&trial);
        losses.push(loss);
    }
    let report = TrainReport {
        steps: losses.len(),
        final_loss: tail_mean(&losses, 100),
        wall_time_s: start.elapsed().as_secs_f64(),
        aborted_at,
        loss_curve: losses,
    };
    Ok((net, report))
}

/// Denoising score matching with `eta(t)^2` weighting and uniform `t`:
/// minimizes `E |eta s_theta(x_t, t, c) + z|^2`.
pub fn train_score_dsm(net: FieldNet, data: &Dataset, sched: &ScheduleSpec, hyper: &TrainHyper, seed: u64) -> Result<(FieldNet, TrainReport)> {
    if !sched.family.is_diffusion() {
        return Err(Error::Config("score matching needs a vp, subvp or ve schedule".into()));
    }
    sched.validate()?;
    check_data(&net, data)?;
    // A point mass has no density to score.
    let (mean, std) = data.moments();
    if std.iter().zip(&mean).all(|(s, m)| *s <= 1e-12 * (1.0 + m.abs())) {
        return Err(Error::InvalidTarget("data has zero variance".into()));
    }
    let d = data.dim;
    let sched = *sched;
    let sample = move |_: &FieldNet, step: usize, k: u64| {
        let mut s = rng::stream(seed, &[tag::BATCH, step as u64, k]);
        let i = s.random_range(0..data.len());
        let t = sched.eps + (sched.t_end - sched.eps) * s.random::<f64>();
        let z = rng::gaussian(&mut s, d);
        let x = marginal_sample(&sched, data.row(i), t, &z)?;
        let eta = sched.eta(t);
        // |eta s + z|^2 = eta^2 |s - (-z / eta)|^2
        let target: Vec<f64> = z.iter().map(|z| -z / eta).collect();
        Ok((x, t, data.context(i).map(<[f64]>::to_vec), target, vec![eta * eta; d]))
    };
    regress(net, hyper, &sample)
}

/// Conditional flow matching: regress `v_theta(x_t, t)` onto
/// `d/dt [alpha_t x + sigma_t z]`, which is `z - x` on the linear path.
pub fn train_flow_cfm(net: FieldNet, data: &Dataset, sched: &ScheduleSpec, hyper: &TrainHyper, seed: u64) -> Result<(FieldNet, TrainReport)> {
    if sched.family.is_diffusion() {
        return Err(Error::Config("flow matching needs a flow_linear or trigflow schedule".into()));
    }
    sched.validate()?;
    check_data(&net, data)?;
    let d = data.dim;
    let sched = *sched;
    let sample = move |_: &FieldNet, step: usize, k: u64| {
        let mut s = rng::stream(seed, &[tag::BATCH, step as u64, k]);
        let i = s.random_range(0..data.len());
        let t = sched.eps + (sched.t_end - sched.eps) * s.random::<f64>();
        let z = rng::gaussian(&mut s, d);
        let x0 = data.row(i);
        let x = marginal_sample(&sched, x0, t, &z)?;
        let m = sched.moments(t);
        let deta = 0.5 * m.deta2 / m.eta2.sqrt();
        let target: Vec<f64> = x0.iter().zip(&z).map(|(x0, z)| m.dnu * x0 + deta * z).collect();
        Ok((x, t, data.context(i).map(<[f64]>::to_vec), target, vec![1.0; d]))
    };
    regress(net, hyper, &sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectMode {
    /// Regress onto single-probe Hutchinson divergence estimates.
    H1,
    /// Regress onto the single-probe estimate minus the Stein baseline.
    H1PlusB,
}

/// Cached regression target for the direct baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectEntry {
    pub x: Vec<f64>,
    pub t: f64,
    pub c: Option<Vec<f64>>,
    pub w: f64,
    pub y: f64,
}

/// Build `size` regression targets; each costs one drift JVP (and a score
/// for `H1PlusB`).
pub fn build_direct_cache(
    field: &dyn VelocityField,
    data: &Dataset,
    mode: DirectMode,
    hyper: &SteinHyper,
    seed: u64,
    round: u64,
) -> Result<Vec<DirectEntry>> {
    if hyper.cache_size == 0 || data.is_empty() {
        return Err(Error::Config("direct cache needs data and a positive size".into()));
    }
    crate::error::check_dim(field.dim(), data.dim)?;
    let sched = *field.schedule();
    par::try_map_range(hyper.cache_size, |m| {
        let mut s = rng::stream(seed, &[tag::CACHE, round, m as u64]);
        let i = s.random_range(0..data.len());
        let (t, w) = sample_time_importance(hyper.proposal, sched.eps, sched.t_end, s.random::<f64>());
        let z = rng::gaussian(&mut s, data.dim);
        let c = data.context(i).map(<[f64]>::to_vec);
        let x = marginal_sample(&sched, data.row(i), t, &z)?;
        let eps = rng::rademacher(&mut s, data.dim);
        let (v, jv) = field.drift_jvp(&x, t, c.as_deref(), &eps)?;
        let mut y = dot(&eps, &jv);
        if mode == DirectMode::H1PlusB {
            let sc = field.score(&x, t, c.as_deref())?;
            y += dot(&v, &sc);
        }
        Ok::<_, Error>(DirectEntry { x, t, c, w, y })
    })
}

/// Direct regression baseline sharing the head architecture, cache schedule,
/// optimizer and budget with Stein distillation. Cutoff fields of `hyper`
/// are ignored.
pub fn train_direct_divergence(
    field: &dyn VelocityField,
    data: &Dataset,
    head: FieldNet,
    mode: DirectMode,
    hyper: &SteinHyper,
    seed: u64,
) -> Result<(LearnedHead, DistillReport)> {
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
    let mut cache = build_direct_cache(field, data, mode, hyper, seed, 0)?;
    let mut round = 0;
    let mut cache_time = t0.elapsed().as_secs_f64();
    let mut net = head;
    let n = net.n_params();
    let mut opt = Optimizer::new(hyper.optimizer.clone(), n);
    let mut losses = Vec::with_capacity(hyper.steps);
    let mut aborted_at = None;
    let train_start = Instant::now();
    let mut rebuild_time = 0.0;
    for step in 0..hyper.steps {
        if hyper.time_budget_s.is_some_and(|b| t0.elapsed().as_secs_f64() >= b) {
            break;
        }
        if hyper.rebuild_period > 0 && step > 0 && step % hyper.rebuild_period == 0 {
            let tc = Instant::now();
            round += 1;
            cache = build_direct_cache(field, data, mode, hyper, seed, round)?;
            rebuild_time += tc.elapsed().as_secs_f64();
        }
        let mut s = rng::stream(seed, &[tag::BATCH, step as u64]);
        let idx: Vec<usize> = (0..hyper.batch).map(|_| s.random_range(0..cache.len())).collect();
        let net_ref = &net;
        let cache_ref = &cache;
        let chunks = par::try_map_range(idx.len().div_ceil(CHUNK), |k| -> Result<(f64, Vec<f64>)> {
            let mut grad = vec![0.0; n];
            let mut loss = 0.0;
            for &j in &idx[k * CHUNK..((k + 1) * CHUNK).min(idx.len())] {
                let e = &cache_ref[j];
                let out = net_ref.forward(&e.x, e.t, e.c.as_deref())?[0];
                let r = out - e.y;
                loss += e.w * r * r;
                net_ref.backward_output(&e.x, e.t, e.c.as_deref(), &[2.0 * e.w * r], &mut grad)?;
            }
            Ok((loss, grad))
        });
        let chunks = match chunks {
            Ok(c) => c,
            Err(Error::NonFiniteField { .. }) | Err(Error::CorruptModel) => {
                aborted_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let inv = 1.0 / idx.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; n];
        for (l, g) in chunks {
            loss += l;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        loss *= inv;
        grad.iter_mut().for_each(|g| *g *= inv);
        if !loss.is_finite() {
            aborted_at = Some(step);
            break;
        }
        let mut trial = net.params().to_vec();
        if opt.step(&mut trial, &grad).is_err() || !trial.iter().all(|p| p.is_finite()) {
            aborted_at = Some(step);
            break;
        }
        net.params_mut().copy_from_slice(&trial);
        losses.push(loss);
    }
    let train_time = train_start.elapsed().as_secs_f64() - rebuild_time;
    cache_time += rebuild_time;
    let kind = match mode {
        DirectMode::H1 => HeadKind::DirectDivergence,
        DirectMode::H1PlusB => HeadKind::DirectResidual,
    };
    let report = DistillReport {
        steps: losses.len(),
        final_loss: tail_mean(&losses, 50),
        radius: f64::INFINITY,
        fraction_outside_2r: 0.0,
        wall_time_cache_s: cache_time,
        wall_time_train_s: train_time.max(0.0),
        aborted_at,
        loss_curve: losses,
    };
    Ok((
        LearnedHead {
            net: Arc::new(net),
            cutoff: None,
            kind,
        },
        report,
    ))
}
