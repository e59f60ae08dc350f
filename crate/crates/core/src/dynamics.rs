//! Noising schedules and probability-flow drifts.
//!
//! Every schedule is described by its transition `x_t = nu(t) x_eps +
//! eta(t) z`. The drift coefficients follow from the moments:
//! `f(t) = nu'/nu` and `g(t)^2 = (eta^2)' - 2 f eta^2`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{axpy, dot};
use crate::net::FieldNet;
use crate::targets::TargetDensity;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Vp,
    Subvp,
    Ve,
    FlowLinear,
    Trigflow,
}

impl Family {
    pub fn is_diffusion(self) -> bool {
        matches!(self, Family::Vp | Family::Subvp | Family::Ve)
    }
}

fn default_sigma_min() -> f64 {
    0.01
}
fn default_sigma_max() -> f64 {
    50.0
}
fn default_sigma_d() -> f64 {
    1.0
}
fn default_beta_min() -> f64 {
    0.1
}
fn default_beta_max() -> f64 {
    20.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub family: Family,
    pub eps: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    #[serde(default = "default_sigma_d")]
    pub sigma_d: f64,
    /// Variance-exploding noise range.
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_sigma_max")]
    pub sigma_max: f64,
}

/// `(nu, nu', eta^2, (eta^2)')` at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub nu: f64,
    pub dnu: f64,
    pub eta2: f64,
    pub deta2: f64,
}

impl ScheduleSpec {
    pub fn new(family: Family) -> Self {
        let t_end = match family {
            Family::Trigflow => std::f64::consts::FRAC_PI_2,
            _ => 1.0,
        };
        Self {
            family,
            eps: 1e-3,
            t_end,
            beta_min: default_beta_min(),
            beta_max: default_beta_max(),
            sigma_d: default_sigma_d(),
            sigma_min: default_sigma_min(),
            sigma_max: default_sigma_max(),
        }
    }

    pub fn vp() -> Self {
        Self::new(Family::Vp)
    }

    pub fn flow_linear() -> Self {
        Self::new(Family::FlowLinear)
    }

    pub fn trigflow(sigma_d: f64) -> Self {
        Self {
            sigma_d,
            ..Self::new(Family::Trigflow)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("schedule: {m}")));
        if !(self.eps > 0.0 && self.eps < self.t_end) {
            return bad("need 0 < eps < T");
        }
        match self.family {
            Family::Vp | Family::Subvp if !(self.beta_min >= 0.0 && self.beta_max >= self.beta_min) => {
                bad("need 0 <= beta_min <= beta_max")
            }
            Family::Ve if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) => bad("need 0 < sigma_min < sigma_max"),
            Family::FlowLinear if self.t_end > 1.0 => bad("flow_linear needs T <= 1"),
            Family::Trigflow if self.t_end > std::f64::consts::FRAC_PI_2 + 1e-12 || !(self.sigma_d > 0.0) => {
                bad("trigflow needs T <= pi/2 and sigma_d > 0")
            }
            _ => Ok(()),
        }
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        let tol = 1e-12 * self.t_end.abs().max(1.0);
        if t.is_finite() && t >= self.eps - tol && t <= self.t_end + tol {
            Ok(())
        } else {
            Err(Error::TimeRange {
                t,
                eps: self.eps,
                t_end: self.t_end,
            })
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    fn int_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    fn ve_sigma(&self, t: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    pub fn moments(&self, t: f64) -> Moments {
        match self.family {
            Family::Vp => {
                let nu = (-0.5 * self.int_beta(t)).exp();
                let b = self.beta(t);
                Moments {
                    nu,
                    dnu: -0.5 * b * nu,
                    eta2: -(-self.int_beta(t)).exp_m1(),
                    deta2: b * nu * nu,
                }
            }
            Family::Subvp => {
                let nu = (-0.5 * self.int_beta(t)).exp();
                let b = self.beta(t);
                let one_minus = -(-self.int_beta(t)).exp_m1();
                Moments {
                    nu,
                    dnu: -0.5 * b * nu,
                    eta2: one_minus * one_minus,
                    deta2: 2.0 * one_minus * b * nu * nu,
                }
            }
            Family::Ve => {
                let s = self.ve_sigma(t);
                let lr = (self.sigma_max / self.sigma_min).ln();
                Moments {
                    nu: 1.0,
                    dnu: 0.0,
                    eta2: self.sigma_min * self.sigma_min * (2.0 * lr * t).exp_m1(),
                    deta2: 2.0 * s * s * lr,
                }
            }
            Family::FlowLinear => Moments {
                nu: 1.0 - t,
                dnu: -1.0,
                eta2: t * t,
                deta2: 2.0 * t,
            },
            Family::Trigflow => {
                let (s, c) = t.sin_cos();
                let sd2 = self.sigma_d * self.sigma_d;
                Moments {
                    nu: c,
                    dnu: -s,
                    eta2: sd2 * s * s,
                    deta2: 2.0 * sd2 * s * c,
                }
            }
        }
    }

    /// Conditional mean scale `nu(t)` (`alpha_t` for flows).
    pub fn nu(&self, t: f64) -> f64 {
        self.moments(t).nu
    }

    /// Conditional standard deviation `eta(t)` (`sigma_t` for flows).
    pub fn eta(&self, t: f64) -> f64 {
        self.moments(t).eta2.sqrt()
    }

    /// Linear drift coefficient `f(t)` with `f(x, t) = f(t) x`.
    pub fn drift_coef(&self, t: f64) -> f64 {
        let m = self.moments(t);
        m.dnu / m.nu
    }

    /// Squared diffusion coefficient `g(t)^2`.
    pub fn g2(&self, t: f64) -> f64 {
        match self.family {
            Family::Vp => self.beta(t),
            Family::Subvp => self.beta(t) * (1.0 - (-2.0 * self.int_beta(t)).exp()),
            _ => {
                let m = self.moments(t);
                m.deta2 - 2.0 * (m.dnu / m.nu) * m.eta2
            }
        }
    }

    /// Variance of the isotropic base density at `T`.
    pub fn base_variance(&self) -> f64 {
        match self.family {
            Family::Ve => self.sigma_max * self.sigma_max,
            Family::Trigflow => self.sigma_d * self.sigma_d,
            _ => 1.0,
        }
    }

    /// `log N(x; 0, base_variance I)`
    pub fn base_log_density(&self, x: &[f64]) -> f64 {
        let v = self.base_variance();
        -0.5 * (dot(x, x) / v + x.len() as f64 * (LN_2PI + v.ln()))
    }
}

/// `x_t = nu(t) x_eps + eta(t) z`.
pub fn marginal_sample(sched: &ScheduleSpec, x_eps: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>> {
    sched.check_time(t)?;
    check_dim(x_eps.len(), z.len())?;
    let m = sched.moments(t);
    let eta = m.eta2.sqrt();
    Ok(x_eps.iter().zip(z).map(|(x, z)| m.nu * x + eta * z).collect())
}

/// Score of a linear-path flow from its velocity:
/// `s = -(x + alpha v) / (sigma (alpha + sigma))`.
pub fn score_from_velocity(sched: &ScheduleSpec, v: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(x.len(), v.len())?;
    let alpha = 1.0 - t;
    let sigma = t;
    let denom = sigma * (alpha + sigma);
    if sigma <= 0.0 || denom == 0.0 || sched.family != Family::FlowLinear {
        return Err(Error::SingularTime(t));
    }
    Ok(x.iter().zip(v).map(|(x, v)| -(x + alpha * v) / denom).collect())
}

/// TrigFlow score from velocity: `s = -(x + cot(t) v) / sigma_d^2`.
pub fn score_from_velocity_trig(sched: &ScheduleSpec, v: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(x.len(), v.len())?;
    let (s, c) = t.sin_cos();
    if s.abs() < 1e-300 || sched.family != Family::Trigflow {
        return Err(Error::SingularTime(t));
    }
    let cot = c / s;
    let sd2 = sched.sigma_d * sched.sigma_d;
    Ok(x.iter().zip(v).map(|(x, v)| -(x + cot * v) / sd2).collect())
}

/// A time-dependent vector field driving the probability-flow ODE.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    fn context_dim(&self) -> usize {
        0
    }

    fn schedule(&self) -> &ScheduleSpec;

    /// `v_t(x)`
    fn drift(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<Vec<f64>>;

    /// `(v_t(x), J u)`
    fn drift_jvp(&self, x: &[f64], t: f64, c: Option<&[f64]>, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    fn jvp(&self, x: &[f64], t: f64, c: Option<&[f64]>, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.drift_jvp(x, t, c, u)?.1)
    }

    /// Full `D x D` Jacobian from `D` products.
    fn jacobian(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut jac = DMatrix::zeros(d, d);
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            jac.set_column(j, &DVector::from_vec(self.jvp(x, t, c, &e)?));
            e[j] = 0.0;
        }
        Ok(jac)
    }

    fn divergence(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<f64> {
        Ok(self.jacobian(x, t, c)?.trace())
    }

    /// Score paired with this field for the Stein baseline.
    fn score(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<Vec<f64>>;

    /// `v` and `s` together; overridden where they share work.
    fn drift_and_score(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.drift(x, t, c)?, self.score(x, t, c)?))
    }

    /// Log density of the terminal distribution at `x_T`.
    fn terminal_log_density(&self, x: &[f64], _c: Option<&[f64]>) -> Result<f64> {
        Ok(self.schedule().base_log_density(x))
    }
}

fn check_finite(v: Vec<f64>, x: &[f64], t: f64) -> Result<Vec<f64>> {
    if v.iter().all(|a| a.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFiniteField { x: x.to_vec(), t })
    }
}

/// Diffusion drift `f x - g^2/2 s_theta` from a score network.
#[derive(Debug, Clone)]
pub struct ScoreNetField {
    pub net: Arc<FieldNet>,
    pub sched: ScheduleSpec,
}

impl ScoreNetField {
    pub fn new(net: Arc<FieldNet>, sched: ScheduleSpec) -> Result<Self> {
        if !sched.family.is_diffusion() {
            return Err(Error::Config("score-backed fields need a diffusion schedule".into()));
        }
        if net.output_dim() != net.input_dim() {
            return Err(Error::ShapeError("score network must map R^D to R^D".into()));
        }
        Ok(Self { net, sched })
    }
}

impl VelocityField for ScoreNetField {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }
    fn context_dim(&self) -> usize {
        self.net.context_dim()
    }
    fn schedule(&self) -> &ScheduleSpec {
        &self.sched
    }

    fn drift(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<Vec<f64>> {
        let s = self.net.forward(x, t, c)?;
        let (f, h) = (self.sched.drift_coef(t), 0.5 * self.sched.g2(t));
        check_finite(x.iter().zip(&s).map(|(x, s)| f * x - h * s).collect(), x, t)
    }

    fn drift_jvp(&self, x: &[f64], t: f64, c: Option<&[f64]>, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (s, js) = self.net.forward_jvp(x, t, c, u)?;
        let (f, h) = (self.sched.drift_coef(t), 0.5 * self.sched.g2(t));
        let v = x.iter().zip(&s).map(|(x, s)| f * x - h * s).collect();
        let jv = u.iter().zip(&js).map(|(u, j)| f * u - h * j).collect();
        Ok((check_finite(v, x, t)?, check_finite(jv, x, t)?))
    }

    fn jacobian(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<DMatrix<f64>> {
        let js = self.net.jacobian(x, t, c)?;
        let (f, h) = (self.sched.drift_coef(t), 0.5 * self.sched.g2(t));
        Ok(DMatrix::identity(js.nrows(), js.ncols()) * f - js * h)
    }

    fn score(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<Vec<f64>> {
        self.net.forward(x, t, c)
    }

    fn drift_and_score(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self.net.forward(x, t, c)?;
        let (f, h) = (self.sched.drift_coef(t), 0.5 * self.sched.g2(t));
        let v = check_finite(x.iter().zip(&s).map(|(x, s)| f * x - h * s).collect(), x, t)?;
        Ok((v, s))
    }
}

/// Flow-matching or TrigFlow velocity network; the score comes from the
/// velocity identity of the schedule.
#[derive(Debug, Clone)]
pub struct VelocityNetField {
    pub net: Arc<FieldNet>,
    pub sched: ScheduleSpec,
}

impl VelocityNetField {
    pub fn new(net: Arc<FieldNet>, sched: ScheduleSpec) -> Result<Self> {
        if sched.family.is_diffusion() {
            return Err(Error::Config("velocity-backed fields need a flow or trigflow schedule".into()));
        }
        if net.output_dim() != net.input_dim() {
            return Err(Error::ShapeError("velocity network must map R^D to R^D".into()));
        }
        Ok(Self { net, sched })
    }
}

/// Score implied by a velocity under the schedule's identity.
pub fn velocity_to_score(sched: &ScheduleSpec, v: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    match sched.family {
        Family::FlowLinear => score_from_velocity(sched, v, x, t),
        Family::Trigflow => score_from_velocity_trig(sched, v, x, t),
        _ => Err(Error::Config("velocity identity only exists for flow schedules".into())),
    }
}

impl VelocityField for VelocityNetField {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }
    fn context_dim(&self) -> usize {
        self.net.context_dim()
    }
    fn schedule(&self) -> &ScheduleSpec {
        &self.sched
    }
    fn drift(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<Vec<f64>> {
        self.net.forward(x, t, c)
    }
    fn drift_jvp(&self, x: &[f64], t: f64, c: Option<&[f64]>, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.net.forward_jvp(x, t, c, u)
    }
    fn jacobian(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<DMatrix<f64>> {
        self.net.jacobian(x, t, c)
    }
    fn score(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<Vec<f64>> {
        let v = self.net.forward(x, t, c)?;
        velocity_to_score(&self.sched, &v, x, t)
    }
    fn drift_and_score(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        let v = self.net.forward(x, t, c)?;
        let s = velocity_to_score(&self.sched, &v, x, t)?;
        Ok((v, s))
    }
}

/// Exact marginal velocity of a Gaussian-mixture target under a schedule.
///
/// Each component's marginal is `N(nu m_k, C_k)` with
/// `C_k = nu^2 Sigma_k + eta^2 I`, transported by the affine field
/// `v_k = nu' m_k + (1/2) C_k' C_k^{-1} (x - nu m_k)`. The mixture velocity is
/// the responsibility-weighted sum, which is finite everywhere on the
/// schedule including `nu = 0`.
#[derive(Debug, Clone)]
pub struct AnalyticMixtureField {
    pub target: Arc<TargetDensity>,
    pub sched: ScheduleSpec,
}

struct AnalyticEval {
    v: Vec<f64>,
    s: Vec<f64>,
    resp: Vec<f64>,
    comp_v: Vec<Vec<f64>>,
    comp_s: Vec<Vec<f64>>,
    /// Eigenvalues of `(1/2) C_k' C_k^{-1}` per component.
    rates: Vec<Vec<f64>>,
}

impl AnalyticMixtureField {
    pub fn new(target: Arc<TargetDensity>, sched: ScheduleSpec) -> Self {
        Self { target, sched }
    }

    fn eval(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<AnalyticEval> {
        let m = self.sched.moments(t);
        let me = self.target.eval_marginal(x, c, m.nu, m.eta2)?;
        let d = self.target.dim;
        let mut v = vec![0.0; d];
        let mut comp_v = Vec::with_capacity(self.target.n_components());
        let mut rates = Vec::with_capacity(self.target.n_components());
        for (k, comp) in self.target.components.iter().enumerate() {
            let mean = comp.mean(c);
            let rate: Vec<f64> = comp
                .evals
                .iter()
                .map(|l| 0.5 * (2.0 * m.nu * m.dnu * l + m.deta2) / (m.nu * m.nu * l + m.eta2))
                .collect();
            let diff: Vec<f64> = x.iter().zip(&mean).map(|(x, mu)| x - m.nu * mu).collect();
            let y: Vec<f64> = comp.rotate(&diff).iter().zip(&rate).map(|(y, r)| y * r).collect();
            let mut vk = comp.unrotate(&y);
            axpy(m.dnu, &mean, &mut vk);
            axpy(me.resp[k], &vk, &mut v);
            comp_v.push(vk);
            rates.push(rate);
        }
        Ok(AnalyticEval {
            v,
            s: me.score,
            resp: me.resp,
            comp_v,
            comp_s: me.comp_scores,
            rates,
        })
    }

    /// `J u = sum_k w_k A_k u + sum_k w_k v_k <s_k - s, u>`.
    fn apply_jacobian(&self, e: &AnalyticEval, u: &[f64]) -> Vec<f64> {
        let d = u.len();
        let mut out = vec![0.0; d];
        for (k, comp) in self.target.components.iter().enumerate() {
            let w = e.resp[k];
            if w == 0.0 {
                continue;
            }
            let y: Vec<f64> = comp.rotate(u).iter().zip(&e.rates[k]).map(|(y, r)| y * r).collect();
            axpy(w, &comp.unrotate(&y), &mut out);
            let proj = dot(&e.comp_s[k], u) - dot(&e.s, u);
            axpy(w * proj, &e.comp_v[k], &mut out);
        }
        out
    }

    /// Exact log density of the time-`t` marginal.
    pub fn log_density(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<f64> {
        let m = self.sched.moments(t);
        Ok(self.target.eval_marginal(x, c, m.nu, m.eta2)?.log_density)
    }
}

impl VelocityField for AnalyticMixtureField {
    fn dim(&self) -> usize {
        self.target.dim
    }
    fn context_dim(&self) -> usize {
        self.target.context_dim
    }
    fn schedule(&self) -> &ScheduleSpec {
        &self.sched
    }
    fn drift(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<Vec<f64>> {
        check_finite(self.eval(x, t, c)?.v, x, t)
    }
    fn drift_jvp(&self, x: &[f64], t: f64, c: Option<&[f64]>, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.dim(), u.len())?;
        let e = self.eval(x, t, c)?;
        let jv = self.apply_jacobian(&e, u);
        Ok((check_finite(e.v, x, t)?, check_finite(jv, x, t)?))
    }
    fn divergence(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<f64> {
        let e = self.eval(x, t, c)?;
        let mut div = 0.0;
        for k in 0..e.resp.len() {
            let tr: f64 = e.rates[k].iter().sum();
            div += e.resp[k] * (tr + dot(&e.comp_v[k], &e.comp_s[k]) - dot(&e.comp_v[k], &e.s));
        }
        Ok(div)
    }
    fn score(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(self.eval(x, t, c)?.s)
    }
    fn drift_and_score(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        let e = self.eval(x, t, c)?;
        Ok((check_finite(e.v, x, t)?, e.s))
    }
    /// The exact marginal at `T` rather than the nominal base density.
    fn terminal_log_density(&self, x: &[f64], c: Option<&[f64]>) -> Result<f64> {
        self.log_density(x, self.sched.t_end, c)
    }
}

/// Closed-form field of a Gaussian target.
pub fn analytic_gaussian_field(mean: Vec<f64>, cov: DMatrix<f64>, sched: ScheduleSpec) -> Result<AnalyticMixtureField> {
    if mean.len() != cov.nrows() || cov.nrows() != cov.ncols() {
        return Err(Error::InvalidCovariance);
    }
    if cov.clone().cholesky().is_none() || (&cov - cov.transpose()).abs().max() > 1e-12 * cov.abs().max() {
        return Err(Error::InvalidCovariance);
    }
    let target = TargetDensity::gaussian(mean, cov).map_err(|_| Error::InvalidCovariance)?;
    Ok(AnalyticMixtureField::new(Arc::new(target), sched))
}

/// Time-independent linear field `v = A x` paired with the standard normal
/// score `-x`, so the residual is `Tr(A) - x^T A x`.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub a: DMatrix<f64>,
    pub sched: ScheduleSpec,
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn schedule(&self) -> &ScheduleSpec {
        &self.sched
    }
    fn drift(&self, x: &[f64], _t: f64, _c: Option<&[f64]>) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok((&self.a * DVector::from_row_slice(x)).as_slice().to_vec())
    }
    fn drift_jvp(&self, x: &[f64], t: f64, c: Option<&[f64]>, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.drift(x, t, c)?, self.drift(u, t, c)?))
    }
    fn jacobian(&self, _x: &[f64], _t: f64, _c: Option<&[f64]>) -> Result<DMatrix<f64>> {
        Ok(self.a.clone())
    }
    fn score(&self, x: &[f64], _t: f64, _c: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(x.iter().map(|v| -v).collect())
    }
}

/// `R^(D-1) |p_t(R u) v_t(R u)|` along the unit direction `u` for each
/// radius, the boundary flux that must vanish for the Stein identity.
pub fn boundary_flux(field: &AnalyticMixtureField, t: f64, direction: &[f64], radii: &[f64], c: Option<&[f64]>) -> Result<Vec<f64>> {
    let d = field.dim();
    check_dim(d, direction.len())?;
    let n = crate::linalg::norm(direction);
    radii
        .iter()
        .map(|&r| {
            let x: Vec<f64> = direction.iter().map(|u| r * u / n).collect();
            let logp = field.log_density(&x, t, c)?;
            let v = field.drift(&x, t, c)?;
            let lognorm = crate::linalg::norm(&v).ln();
            Ok(((d as f64 - 1.0) * r.ln() + logp + lognorm).exp())
        })
        .collect()
}
