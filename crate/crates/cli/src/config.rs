//! Experiment configuration: one JSON document with sections
//! `{target, schedule, teacher, head, distill, likelihood, bench}`.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use stad_core::dynamics::ScheduleSpec;
use stad_core::net::{Activation, FieldNet, TimeEmbedding};
use stad_core::odelik::BackendKind;
use stad_core::stad::SteinHyper;
use stad_core::targets::{cosmos_like_target, TargetDensity};
use stad_core::trace::{BenchConfig, ProbeKind};
use stad_core::train::TrainHyper;

use crate::exit::{CliError, ExitKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetChoice {
    StandardNormal,
    Gaussian,
    GaussianMixture,
    TwoMoons,
    CosmosLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub kind: TargetChoice,
    /// Dimension of `standard_normal`.
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major covariance matrices, one per component.
    pub covs: Vec<Vec<Vec<f64>>>,
    pub per_arc: usize,
    pub noise: f64,
    /// Training-set size drawn from the target.
    pub n_train: usize,
    /// Standardize the data and express the target in those coordinates.
    pub normalize: bool,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            kind: TargetChoice::GaussianMixture,
            dim: 2,
            weights: vec![0.4, 0.35, 0.25],
            means: vec![vec![-1.5, 0.5], vec![1.5, 1.0], vec![0.0, -1.5]],
            covs: vec![
                vec![vec![0.3, 0.05], vec![0.05, 0.2]],
                vec![vec![0.25, -0.1], vec![-0.1, 0.4]],
                vec![vec![0.5, 0.0], vec![0.0, 0.15]],
            ],
            per_arc: 8,
            noise: 0.1,
            n_train: 20_000,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Closed-form field of the target itself.
    Analytic,
    ScoreNet,
    VelocityNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embedding: TimeEmbedding,
    /// Existing checkpoint; defaults to the command's output file in `--out`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::with_hidden(vec![64, 64])
    }
}

impl NetConfig {
    fn with_hidden(hidden: Vec<usize>) -> Self {
        Self {
            hidden,
            activation: Activation::Silu,
            time_embedding: TimeEmbedding::AppendLogT,
            checkpoint: None,
        }
    }

    pub fn build(&self, dim: usize, out: usize, context_dim: usize, seed: u64) -> Result<FieldNet, CliError> {
        let mut dims = vec![dim];
        dims.extend(&self.hidden);
        dims.push(out);
        FieldNet::new(&dims, self.activation, self.time_embedding, context_dim, seed).map_err(CliError::from)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub net: NetConfig,
    pub train: TrainHyper,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            kind: TeacherKind::ScoreNet,
            net: NetConfig::with_hidden(vec![64, 64]),
            train: TrainHyper {
                steps: 4000,
                ..TrainHyper::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LikelihoodConfig {
    pub backend: BackendKind,
    pub n_probes: usize,
    pub probe_kind: ProbeKind,
    pub redraw_probes: bool,
    pub hutchpp_refresh: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Test points drawn from the target.
    pub n_test: usize,
    /// Report bits per dimension with this offset.
    pub bpd_offset: Option<f64>,
    pub histogram_bins: usize,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Exact,
            n_probes: 1,
            probe_kind: ProbeKind::Rademacher,
            redraw_probes: false,
            hutchpp_refresh: 6,
            rtol: 1e-5,
            atol: 1e-5,
            n_test: 100,
            bpd_offset: None,
            histogram_bins: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub dims: Vec<usize>,
    pub budgets: Vec<usize>,
    pub trials: Vec<usize>,
    pub psd: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        let r = BenchConfig::reference(true);
        Self {
            dims: r.dims,
            budgets: r.budgets,
            trials: r.trials,
            psd: r.psd,
        }
    }
}

impl BenchSection {
    pub fn to_bench(&self, seed: u64) -> Result<BenchConfig, CliError> {
        if self.dims.len() != self.trials.len() {
            return Err(CliError::new(ExitKind::Config, "bench.trials must align with bench.dims"));
        }
        Ok(BenchConfig {
            dims: self.dims.clone(),
            budgets: self.budgets.clone(),
            trials: self.trials.clone(),
            psd: self.psd,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root seed; `--seed` takes precedence.
    pub seed: Option<u64>,
    pub target: TargetConfig,
    pub schedule: ScheduleSpec,
    pub teacher: TeacherConfig,
    pub head: NetConfig,
    pub distill: SteinHyper,
    pub likelihood: LikelihoodConfig,
    pub bench: BenchSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: None,
            target: TargetConfig::default(),
            schedule: ScheduleSpec::vp(),
            teacher: TeacherConfig::default(),
            head: NetConfig::with_hidden(vec![64, 64]),
            distill: SteinHyper {
                steps: 4000,
                cache_size: 50_000,
                rebuild_period: 1000,
                ..SteinHyper::default()
            },
            likelihood: LikelihoodConfig::default(),
            bench: BenchSection::default(),
        }
    }
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(CliError::new(ExitKind::Config, "covariance rows must form a square matrix"));
    }
    Ok(DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied()))
}

impl TargetConfig {
    pub fn build(&self, seed: u64) -> Result<TargetDensity, CliError> {
        let t = match self.kind {
            TargetChoice::StandardNormal => TargetDensity::standard_normal(self.dim),
            TargetChoice::Gaussian => {
                let (Some(mean), Some(cov)) = (self.means.first(), self.covs.first()) else {
                    return Err(CliError::new(ExitKind::Config, "gaussian target needs means[0] and covs[0]"));
                };
                TargetDensity::gaussian(mean.clone(), matrix(cov)?)?
            }
            TargetChoice::GaussianMixture => {
                let covs = self.covs.iter().map(|c| matrix(c)).collect::<Result<Vec<_>, _>>()?;
                TargetDensity::mixture(&self.weights, self.means.clone(), covs)?
            }
            TargetChoice::TwoMoons => TargetDensity::two_moons(self.per_arc, self.noise)?,
            TargetChoice::CosmosLike => cosmos_like_target(seed),
        };
        Ok(t)
    }
}

/// Apply `path.to.key=value` overrides to a config document. Values parse
/// as JSON when they can and fall back to plain strings.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<(), CliError> {
    for item in overrides {
        let Some((path, raw)) = item.split_once('=') else {
            return Err(CliError::new(ExitKind::Config, format!("override `{item}` is not key=value")));
        };
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut *doc;
        let keys: Vec<&str> = path.split('.').collect();
        for (i, key) in keys.iter().enumerate() {
            if !node.is_object() {
                *node = Value::Object(Default::default());
            }
            let map = node.as_object_mut().expect("object");
            if i + 1 == keys.len() {
                map.insert(key.to_string(), value.clone());
                break;
            }
            node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Read the config file (if any), apply overrides and deserialize.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::new(ExitKind::MissingInput, format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::new(ExitKind::Config, format!("config {}: {e}", p.display())))?
        }
        None => serde_json::to_value(Config::default()).expect("default config serializes"),
    };
    apply_overrides(&mut doc, overrides)?;
    serde_json::from_value(doc).map_err(|e| CliError::new(ExitKind::Config, format!("config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        let back: Config = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dotted_overrides_reach_nested_keys() {
        let cfg = load(None, &["distill.steps=7".into(), "likelihood.backend=hutchpp".into(), "head.hidden=[8]".into()]).unwrap();
        assert_eq!(cfg.distill.steps, 7);
        assert_eq!(cfg.likelihood.backend, BackendKind::Hutchpp);
        assert_eq!(cfg.head.hidden, vec![8]);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = load(None, &["likelihood.rtoll=1".into()]).unwrap_err();
        assert_eq!(err.kind, ExitKind::Config);
    }

    #[test]
    fn malformed_overrides_are_rejected() {
        assert_eq!(load(None, &["steps".into()]).unwrap_err().kind, ExitKind::Config);
    }

    #[test]
    fn default_target_is_the_three_component_mixture() {
        let t = Config::default().target.build(0).unwrap();
        assert_eq!((t.dim, t.n_components()), (2, 3));
    }
}
