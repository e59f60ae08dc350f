//! Analytic target densities and datasets.
//!
//! Every target is a (possibly conditional) Gaussian mixture
//! `sum_k pi_k N(b_k + W_k c, Sigma_k)`, which keeps exact densities, scores
//! and noised marginals available for every schedule.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::dot;
use crate::rng::{self, tag};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Gaussian,
    GaussianMixture,
    TwoMoons,
    ConditionalGaussian,
}

/// One mixture component with its covariance eigendecomposition.
#[derive(Debug, Clone)]
pub struct Component {
    pub weight: f64,
    pub bias: Vec<f64>,
    /// `D x C` context map; `None` for unconditional components.
    pub map: Option<DMatrix<f64>>,
    pub cov: DMatrix<f64>,
    pub(crate) evecs: DMatrix<f64>,
    pub(crate) evals: Vec<f64>,
}

impl Component {
    fn new(weight: f64, bias: Vec<f64>, map: Option<DMatrix<f64>>, cov: DMatrix<f64>) -> Result<Self> {
        let d = bias.len();
        if cov.shape() != (d, d) {
            return Err(Error::InvalidTarget(format!("covariance is {:?}, expected {d}x{d}", cov.shape())));
        }
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::InvalidTarget(format!("component weight {weight} must be positive")));
        }
        if !bias.iter().chain(cov.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTarget("non-finite component parameters".into()));
        }
        let scale = cov.abs().max().max(1e-300);
        if (&cov - cov.transpose()).abs().max() > 1e-10 * scale {
            return Err(Error::InvalidTarget("covariance is not symmetric".into()));
        }
        let eig = SymmetricEigen::new(cov.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 1e-12 * max.max(1e-300)) || !(max > 0.0) {
            return Err(Error::InvalidTarget(format!("degenerate covariance (eigenvalues in [{min:e}, {max:e}])")));
        }
        Ok(Self {
            weight,
            bias,
            map,
            cov,
            evecs: eig.eigenvectors,
            evals: eig.eigenvalues.as_slice().to_vec(),
        })
    }

    pub fn mean(&self, c: Option<&[f64]>) -> Vec<f64> {
        let mut m = self.bias.clone();
        if let (Some(w), Some(c)) = (&self.map, c) {
            for (i, mi) in m.iter_mut().enumerate() {
                *mi += (0..c.len()).map(|j| w[(i, j)] * c[j]).sum::<f64>();
            }
        }
        m
    }

    /// `U^T y`
    pub(crate) fn rotate(&self, y: &[f64]) -> Vec<f64> {
        let d = y.len();
        (0..d).map(|j| dot(self.evecs.column(j).as_slice(), y)).collect()
    }

    /// `U y`
    pub(crate) fn unrotate(&self, y: &[f64]) -> Vec<f64> {
        let d = y.len();
        let mut out = vec![0.0; d];
        for (j, &yj) in y.iter().enumerate() {
            crate::linalg::axpy(yj, self.evecs.column(j).as_slice(), &mut out);
        }
        out
    }
}

/// Per-coordinate affine normalization `x -> (x - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.shift).zip(&self.scale).map(|((v, s), k)| (v - s) / k).collect()
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.shift).zip(&self.scale).map(|((v, s), k)| v * k + s).collect()
    }

    /// `log |det d(normalized)/dx|`, added to normalized-space log densities
    /// to obtain raw-space ones.
    pub fn log_jacobian(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }
}

/// A Gaussian-mixture target, optionally conditional on a context vector.
#[derive(Debug, Clone)]
pub struct TargetDensity {
    pub kind: TargetKind,
    pub dim: usize,
    pub context_dim: usize,
    pub components: Vec<Component>,
    /// Set when the target is expressed in normalized coordinates.
    pub normalization: Option<Normalization>,
}

/// Responsibilities, component scores and totals at one point.
pub(crate) struct MixtureEval {
    pub log_density: f64,
    pub score: Vec<f64>,
    pub resp: Vec<f64>,
    pub comp_scores: Vec<Vec<f64>>,
}

impl TargetDensity {
    pub fn gaussian(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        Ok(Self {
            kind: TargetKind::Gaussian,
            dim,
            context_dim: 0,
            components: vec![Component::new(1.0, mean, None, cov)?],
            normalization: None,
        })
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], DMatrix::identity(dim, dim)).expect("identity covariance")
    }

    pub fn mixture(weights: &[f64], means: Vec<Vec<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || means.len() != covs.len() {
            return Err(Error::InvalidTarget("weights, means and covariances must align".into()));
        }
        let dim = means[0].len();
        let total: f64 = weights.iter().sum();
        let components = weights
            .iter()
            .zip(means)
            .zip(covs)
            .map(|((&w, m), c)| {
                check_dim(dim, m.len())?;
                Component::new(w / total, m, None, c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: TargetKind::GaussianMixture,
            dim,
            context_dim: 0,
            components,
            normalization: None,
        })
    }

    /// Conditional mixture with component means `b_k + W_k c`.
    pub fn conditional(weights: &[f64], biases: Vec<Vec<f64>>, maps: Vec<DMatrix<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() || biases.len() != maps.len() || maps.len() != covs.len() {
            return Err(Error::InvalidTarget("weights, biases, maps and covariances must align".into()));
        }
        let dim = biases[0].len();
        let context_dim = maps[0].ncols();
        let total: f64 = weights.iter().sum();
        let components = weights
            .iter()
            .zip(biases)
            .zip(maps)
            .zip(covs)
            .map(|(((&w, b), m), c)| {
                if m.shape() != (dim, context_dim) {
                    return Err(Error::InvalidTarget(format!("context map is {:?}", m.shape())));
                }
                Component::new(w / total, b, Some(m), c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: TargetKind::ConditionalGaussian,
            dim,
            context_dim,
            components,
            normalization: None,
        })
    }

    /// Two interleaved half-circle arcs, each a chain of `per_arc` isotropic
    /// Gaussians with standard deviation `noise`.
    pub fn two_moons(per_arc: usize, noise: f64) -> Result<Self> {
        if per_arc == 0 || !(noise > 0.0) {
            return Err(Error::InvalidTarget("two moons needs per_arc >= 1 and noise > 0".into()));
        }
        let mut means = Vec::new();
        for k in 0..per_arc {
            let th = std::f64::consts::PI * (k as f64 + 0.5) / per_arc as f64;
            means.push(vec![th.cos() - 0.5, th.sin() - 0.25]);
            means.push(vec![0.5 - th.cos(), 0.25 - th.sin()]);
        }
        let n = means.len();
        let cov = DMatrix::identity(2, 2) * (noise * noise);
        let mut t = Self::mixture(&vec![1.0; n], means, vec![cov; n])?;
        t.kind = TargetKind::TwoMoons;
        Ok(t)
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    fn check_inputs(&self, x: &[f64], c: Option<&[f64]>) -> Result<()> {
        check_dim(self.dim, x.len())?;
        if self.context_dim > 0 {
            match c {
                Some(c) => check_dim(self.context_dim, c.len())?,
                None => return Err(Error::DimensionMismatch { expected: self.context_dim, got: 0 }),
            }
        }
        Ok(())
    }

    /// Mixture of `N(nu m_k, nu^2 Sigma_k + eta2 I)` evaluated at `x`.
    pub(crate) fn eval_marginal(&self, x: &[f64], c: Option<&[f64]>, nu: f64, eta2: f64) -> Result<MixtureEval> {
        self.check_inputs(x, c)?;
        let d = self.dim;
        let k = self.components.len();
        let mut logs = Vec::with_capacity(k);
        let mut comp_scores = Vec::with_capacity(k);
        for comp in &self.components {
            let m = comp.mean(c);
            let diff: Vec<f64> = x.iter().zip(&m).map(|(xi, mi)| xi - nu * mi).collect();
            let y = comp.rotate(&diff);
            let mut quad = 0.0;
            let mut logdet = 0.0;
            let mut w = vec![0.0; d];
            for i in 0..d {
                let var = nu * nu * comp.evals[i] + eta2;
                quad += y[i] * y[i] / var;
                logdet += var.ln();
                w[i] = -y[i] / var;
            }
            logs.push(comp.weight.ln() - 0.5 * (quad + logdet + d as f64 * LN_2PI));
            comp_scores.push(comp.unrotate(&w));
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let log_density = max + sum.ln();
        let resp: Vec<f64> = logs.iter().map(|l| (l - log_density).exp()).collect();
        let mut score = vec![0.0; d];
        for (r, s) in resp.iter().zip(&comp_scores) {
            crate::linalg::axpy(*r, s, &mut score);
        }
        Ok(MixtureEval {
            log_density,
            score,
            resp,
            comp_scores,
        })
    }

    pub fn log_density(&self, x: &[f64], c: Option<&[f64]>) -> Result<f64> {
        Ok(self.eval_marginal(x, c, 1.0, 0.0)?.log_density)
    }

    pub fn score(&self, x: &[f64], c: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(self.eval_marginal(x, c, 1.0, 0.0)?.score)
    }

    /// Draw `n` points. Conditional targets draw contexts from `N(0, I_C)`.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let d = self.dim;
        let cdim = self.context_dim;
        let rows: Vec<(Vec<f64>, Vec<f64>)> = crate::par::map_range(n, |i| {
            let mut s = rng::stream(seed, &[tag::TARGET, i as u64]);
            let c = rng::gaussian(&mut s, cdim);
            let u: f64 = s.random();
            let mut acc = 0.0;
            let mut k = self.components.len() - 1;
            for (j, comp) in self.components.iter().enumerate() {
                acc += comp.weight;
                if u < acc {
                    k = j;
                    break;
                }
            }
            let comp = &self.components[k];
            let z = rng::gaussian(&mut s, d);
            let scaled: Vec<f64> = z.iter().zip(&comp.evals).map(|(zi, l)| zi * l.sqrt()).collect();
            let mut x = comp.unrotate(&scaled);
            let m = comp.mean(if cdim > 0 { Some(&c) } else { None });
            x.iter_mut().zip(&m).for_each(|(xi, mi)| *xi += mi);
            (x, c)
        });
        let mut samples = Vec::with_capacity(n * d);
        let mut contexts = Vec::with_capacity(n * cdim);
        for (x, c) in rows {
            samples.extend(x);
            contexts.extend(c);
        }
        Dataset {
            dim: d,
            context_dim: cdim,
            samples,
            contexts: (cdim > 0).then_some(contexts),
            normalization: None,
            seed,
        }
    }

    /// Exact per-coordinate mean and variance of the data marginal (contexts
    /// integrated out under `N(0, I)`).
    pub fn marginal_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        let mut second = vec![0.0; d];
        for comp in &self.components {
            for i in 0..d {
                let ctx_var = comp.map.as_ref().map_or(0.0, |w| w.row(i).norm_squared());
                mean[i] += comp.weight * comp.bias[i];
                second[i] += comp.weight * (comp.cov[(i, i)] + ctx_var + comp.bias[i] * comp.bias[i]);
            }
        }
        let var = (0..d).map(|i| second[i] - mean[i] * mean[i]).collect();
        (mean, var)
    }

    /// The same distribution expressed in coordinates `(x - shift) / scale`.
    pub fn normalized(&self, norm: &Normalization) -> Result<Self> {
        check_dim(self.dim, norm.shift.len())?;
        check_dim(self.dim, norm.scale.len())?;
        let inv: Vec<f64> = norm.scale.iter().map(|s| 1.0 / s).collect();
        let comps = self
            .components
            .iter()
            .map(|comp| {
                let bias: Vec<f64> = (0..self.dim).map(|i| (comp.bias[i] - norm.shift[i]) * inv[i]).collect();
                let map = comp.map.as_ref().map(|w| {
                    let mut w = w.clone();
                    for i in 0..self.dim {
                        w.row_mut(i).scale_mut(inv[i]);
                    }
                    w
                });
                let mut cov = comp.cov.clone();
                for i in 0..self.dim {
                    for j in 0..self.dim {
                        cov[(i, j)] *= inv[i] * inv[j];
                    }
                }
                Component::new(comp.weight, bias, map, cov)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: self.kind,
            dim: self.dim,
            context_dim: self.context_dim,
            components: comps,
            normalization: Some(norm.clone()),
        })
    }
}

/// Samples (`N x D`, row-major) with optional contexts (`N x C`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub context_dim: usize,
    pub samples: Vec<f64>,
    pub contexts: Option<Vec<f64>>,
    pub normalization: Option<Normalization>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    n: usize,
    dim: usize,
    context_dim: usize,
    #[serde(default)]
    normalization: Option<Normalization>,
    #[serde(default)]
    seed: u64,
}

impl Dataset {
    pub fn from_rows(dim: usize, samples: Vec<f64>, context_dim: usize, contexts: Option<Vec<f64>>) -> Result<Self> {
        if dim == 0 || samples.len() % dim != 0 {
            return Err(Error::ShapeError(format!("{} values do not form rows of width {dim}", samples.len())));
        }
        let n = samples.len() / dim;
        if let Some(c) = &contexts {
            check_dim(n * context_dim, c.len())?;
        } else if context_dim != 0 {
            return Err(Error::ShapeError("context_dim set without contexts".into()));
        }
        Ok(Self {
            dim,
            context_dim,
            samples,
            contexts,
            normalization: None,
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn context(&self, i: usize) -> Option<&[f64]> {
        self.contexts.as_ref().map(|c| &c[i * self.context_dim..(i + 1) * self.context_dim])
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            samples: self.samples[..n * self.dim].to_vec(),
            contexts: self.contexts.as_ref().map(|c| c[..n * self.context_dim].to_vec()),
            ..self.clone()
        }
    }

    /// Per-coordinate sample mean and standard deviation.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.len() {
            crate::linalg::axpy(1.0 / n, self.row(i), &mut mean);
        }
        let mut var = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (j, v) in self.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2) / n;
            }
        }
        (mean, var.into_iter().map(f64::sqrt).collect())
    }

    /// Standardize each coordinate by the sample mean and std.
    pub fn normalize(&self) -> Result<(Self, Normalization)> {
        let (shift, scale) = self.moments();
        if scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidTarget("a data coordinate has zero variance".into()));
        }
        let norm = Normalization { shift, scale };
        Ok((self.with_normalization(&norm), norm))
    }

    pub fn with_normalization(&self, norm: &Normalization) -> Self {
        let mut samples = Vec::with_capacity(self.samples.len());
        for i in 0..self.len() {
            samples.extend(norm.apply(self.row(i)));
        }
        Self {
            samples,
            normalization: Some(norm.clone()),
            ..self.clone()
        }
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        let mut cols: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        cols.extend((0..self.context_dim).map(|j| format!("c{j}")));
        writeln!(w, "{}", cols.join(","))?;
        for i in 0..self.len() {
            let mut fields: Vec<String> = self.row(i).iter().map(|v| format!("{v:e}")).collect();
            if let Some(c) = self.context(i) {
                fields.extend(c.iter().map(|v| format!("{v:e}")));
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV with a header row; columns named `c*` are contexts.
    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines.next().ok_or_else(|| Error::ShapeError("empty dataset file".into()))??;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let is_ctx: Vec<bool> = cols.iter().map(|c| c.starts_with('c')).collect();
        let context_dim = is_ctx.iter().filter(|&&b| b).count();
        let dim = cols.len() - context_dim;
        let mut samples = Vec::new();
        let mut contexts = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != cols.len() {
                return Err(Error::ShapeError(format!(
                    "row {} has {} fields, header has {}",
                    ln + 2,
                    vals.len(),
                    cols.len()
                )));
            }
            for (v, &ctx) in vals.iter().zip(&is_ctx) {
                let x: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::ShapeError(format!("row {}: cannot parse {v:?}", ln + 2)))?;
                if ctx {
                    contexts.push(x);
                } else {
                    samples.push(x);
                }
            }
        }
        Self::from_rows(dim, samples, context_dim, (context_dim > 0).then_some(contexts))
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// Raw little-endian f64 rows (`x` then context) plus a `<path>.json`
    /// sidecar describing the shape.
    pub fn write_bin(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for i in 0..self.len() {
            for v in self.row(i).iter().chain(self.context(i).unwrap_or(&[])) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        let side = Sidecar {
            n: self.len(),
            dim: self.dim,
            context_dim: self.context_dim,
            normalization: self.normalization.clone(),
            seed: self.seed,
        };
        std::fs::write(Self::sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn read_bin(path: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_slice(&std::fs::read(Self::sidecar_path(path))?)?;
        let bytes = std::fs::read(path)?;
        let width = side.dim + side.context_dim;
        if bytes.len() != 8 * side.n * width {
            return Err(Error::ShapeError(format!(
                "binary has {} bytes, sidecar declares {} rows of width {width}",
                bytes.len(),
                side.n
            )));
        }
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let mut samples = Vec::with_capacity(side.n * side.dim);
        let mut contexts = Vec::with_capacity(side.n * side.context_dim);
        for row in vals.chunks_exact(width.max(1)) {
            samples.extend_from_slice(&row[..side.dim]);
            contexts.extend_from_slice(&row[side.dim..]);
        }
        let mut ds = Self::from_rows(side.dim, samples, side.context_dim, (side.context_dim > 0).then_some(contexts))?;
        ds.normalization = side.normalization;
        ds.seed = side.seed;
        Ok(ds)
    }

    /// Load by extension: `.csv` or raw binary with sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Self::read_csv(std::fs::File::open(path)?)
        } else {
            Self::read_bin(path)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            self.write_csv(std::fs::File::create(path)?)
        } else {
            self.write_bin(path)
        }
    }
}

pub const COSMOS_DIM: usize = 26;
/// Default sample count of the conditional stand-in task.
pub const COSMOS_DEFAULT_N: usize = 420_000;

/// 26-dim, 3-component conditional mixture with 26-dim contexts.
///
/// Component means are `b_k + W_k c` with fixed random `W_k`. Covariances are
/// heteroscedastic diagonal plus a shared rank-2 factor, so coordinates are
/// correlated and field Jacobians are not diagonal.
pub fn cosmos_like_target(seed: u64) -> TargetDensity {
    let d = COSMOS_DIM;
    let mut s = rng::stream(seed, &[tag::TARGET, 26]);
    let weights = [0.5, 0.3, 0.2];
    let shared: Vec<f64> = rng::gaussian(&mut s, d * 2).iter().map(|v| 0.35 * v).collect();
    let factor = DMatrix::from_vec(d, 2, shared);
    let mut biases = Vec::new();
    let mut maps = Vec::new();
    let mut covs = Vec::new();
    for _ in 0..3 {
        biases.push(rng::gaussian(&mut s, d).iter().map(|v| 1.2 * v).collect());
        let w: Vec<f64> = rng::gaussian(&mut s, d * d).iter().map(|v| 0.5 * v / (d as f64).sqrt()).collect();
        maps.push(DMatrix::from_vec(d, d, w));
        let diag: Vec<f64> = (0..d).map(|_| s.random_range(0.15f64..0.6).powi(2)).collect();
        let cov = DMatrix::from_diagonal(&DVector::from_vec(diag)) + &factor * factor.transpose();
        covs.push(cov);
    }
    TargetDensity::conditional(&weights, biases, maps, covs).expect("well-formed construction")
}

/// The conditional stand-in task and `n` samples from it.
pub fn make_cosmos_like(seed: u64, n: usize) -> (TargetDensity, Dataset) {
    let target = cosmos_like_target(seed);
    let data = target.sample(n, rng::derive_key(seed, &[tag::DATA]));
    (target, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn standard_normal_at_origin() {
        let t = TargetDensity::standard_normal(2);
        assert_abs_diff_eq!(t.log_density(&[0.0, 0.0], None).unwrap(), -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn symmetric_mixture_at_zero() {
        let one = DMatrix::identity(1, 1);
        let t = TargetDensity::mixture(&[1.0, 1.0], vec![vec![-2.0], vec![2.0]], vec![one.clone(), one]).unwrap();
        let expect = ((-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert_abs_diff_eq!(t.log_density(&[0.0], None).unwrap(), expect, epsilon = 1e-14);
        assert_abs_diff_eq!(expect, -2.9189, epsilon = 1e-4);
    }

    #[test]
    fn conditional_mode_has_zero_score() {
        let w = DMatrix::from_row_slice(2, 1, &[1.0, -2.0]);
        let t = TargetDensity::conditional(&[1.0], vec![vec![0.0, 0.0]], vec![w], vec![DMatrix::identity(2, 2)]).unwrap();
        let c = [0.7];
        let s = t.score(&[0.7, -1.4], Some(&c)).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(TargetDensity::gaussian(vec![0.0, 0.0], cov), Err(Error::InvalidTarget(_))));
        let zero = DMatrix::zeros(1, 1);
        assert!(matches!(TargetDensity::gaussian(vec![0.0], zero), Err(Error::InvalidTarget(_))));
    }

    #[test]
    fn score_matches_finite_differences() {
        let targets = [
            TargetDensity::two_moons(4, 0.2).unwrap(),
            cosmos_like_target(3),
            TargetDensity::mixture(
                &[0.3, 0.7],
                vec![vec![1.0, 0.0, -1.0], vec![-1.0, 0.5, 0.0]],
                vec![DMatrix::identity(3, 3) * 0.5, DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 2.0, 0.1, 0.0, 0.1, 0.7])],
            )
            .unwrap(),
        ];
        for (ti, t) in targets.iter().enumerate() {
            let data = t.sample(200, 10 + ti as u64);
            for i in 0..200 {
                let x = data.row(i);
                let c = data.context(i);
                let s = t.score(x, c).unwrap();
                let h = 1e-5;
                for j in 0..t.dim {
                    let mut xp = x.to_vec();
                    let mut xm = x.to_vec();
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (t.log_density(&xp, c).unwrap() - t.log_density(&xm, c).unwrap()) / (2.0 * h);
                    let tol = 1e-6 * s[j].abs().max(1.0);
                    assert!((fd - s[j]).abs() <= tol, "target {ti}, point {i}, coord {j}: {fd} vs {}", s[j]);
                }
            }
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        let one = DMatrix::identity(1, 1) * 0.5;
        let t1 = TargetDensity::mixture(&[1.0, 2.0], vec![vec![-1.5], vec![1.0]], vec![one.clone(), one]).unwrap();
        let h = 0.01;
        let mass: f64 = (-1000..=1000).map(|i| t1.log_density(&[i as f64 * h], None).unwrap().exp() * h).sum();
        assert!((mass - 1.0).abs() < 1e-3);

        let t2 = TargetDensity::two_moons(6, 0.15).unwrap();
        let h = 0.02;
        let mut mass = 0.0;
        for i in -150..=150 {
            for j in -150..=150 {
                mass += t2.log_density(&[i as f64 * h, j as f64 * h], None).unwrap().exp() * h * h;
            }
        }
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    }

    #[test]
    fn cosmos_like_moments_and_determinism() {
        let (t, d) = make_cosmos_like(5, 20_000);
        assert_eq!((d.dim, d.context_dim, d.len()), (26, 26, 20_000));
        let (_, var) = t.marginal_moments();
        let (_, std) = d.moments();
        for j in 0..26 {
            let rel = (std[j] - var[j].sqrt()).abs() / var[j].sqrt();
            assert!(rel < 0.05, "coord {j}: {rel}");
        }
        let (_, again) = make_cosmos_like(5, 20_000);
        assert_eq!(d, again);
    }

    #[test]
    fn cosmos_like_component_mode_dominates_shell() {
        let t = cosmos_like_target(1);
        let c = vec![0.2; 26];
        let comp = &t.components[0];
        let m = comp.mean(Some(&c));
        let at_mean = t.log_density(&m, Some(&c)).unwrap();
        let sd = comp.cov.diagonal().map(f64::sqrt);
        let shell: Vec<f64> = m.iter().zip(sd.iter()).map(|(mi, s)| mi + 3.0 * s).collect();
        assert!(at_mean > t.log_density(&shell, Some(&c)).unwrap());
    }

    #[test]
    fn normalization_preserves_density_up_to_jacobian() {
        let t = TargetDensity::two_moons(3, 0.3).unwrap();
        let (nd, norm) = t.sample(2000, 2).normalize().unwrap();
        let nt = t.normalized(&norm).unwrap();
        let (m, s) = nd.moments();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let x = [0.3, -0.4];
        let y = norm.apply(&x);
        let lhs = t.log_density(&x, None).unwrap();
        let rhs = nt.log_density(&y, None).unwrap() + norm.log_jacobian();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let (_, d) = make_cosmos_like(2, 17);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back.samples, d.samples);
        assert_eq!(back.contexts, d.contexts);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.f64");
        d.write_bin(&p).unwrap();
        let back = Dataset::load(&p).unwrap();
        assert_eq!(back, d);
    }
}
