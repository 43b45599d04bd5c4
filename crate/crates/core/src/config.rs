//! Run configuration in its TOML file form.
//!
//! ```toml
//! method = "koh"
//! model = "pedagogical"
//! output_dir = "out"
//! dataset = { generate = { seed = 7 } }
//!
//! [[priors]]
//! name = "theta"
//! normal = [2.5, 1.5]
//!
//! [bias]
//! kernel = { product = [
//!     { constant = { value = 1.0, free = true, bounds = [1e-4, 100.0] } },
//!     { matern32 = { amplitude = 1.0, lengthscale = 0.288675 } },
//! ] }
//!
//! [mcmc]
//! steps = 1100
//! burn_in = 100
//! seed = 7
//! ```
//!
//! Unknown keys are rejected and relative paths are resolved against the
//! directory of the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{BiasSettings, CalibrationConfig, ChainInit, McmcSettings, Method, NoiseSpec};
use crate::error::{Error, Result};
use crate::inference::{Prior, PriorKind};
use crate::kernels::{AnchorsExpr, KernelExpr, ParamExpr};
use crate::models::{builtin_model, generate, Dataset, ForwardModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub model: String,
    pub dataset: DatasetSource,
    pub priors: Vec<PriorExpr>,
    /// No-bias likelihood noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseExpr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasExpr>,
    #[serde(default)]
    pub mcmc: McmcExpr,
    #[serde(default)]
    pub scaling: ScalingExpr,
    /// Query grid over `x` for the output bands; defaults to the data inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bands: Option<AnchorsExpr>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateExpr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateExpr {
    /// Generator name; defaults to the model name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub seed: u64,
}

/// A prior with exactly one distribution key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorExpr {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<[f64; 2]>,
    /// `[mu, sigma]` of `ln(theta)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_normal: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform: Option<[f64; 2]>,
}

impl PriorExpr {
    pub fn normal(name: &str, mean: f64, sd: f64) -> Self {
        PriorExpr {
            name: name.into(),
            normal: Some([mean, sd]),
            log_normal: None,
            uniform: None,
        }
    }

    pub fn log_normal(name: &str, mu: f64, sigma: f64) -> Self {
        PriorExpr {
            name: name.into(),
            normal: None,
            log_normal: Some([mu, sigma]),
            uniform: None,
        }
    }

    pub fn uniform(name: &str, lo: f64, hi: f64) -> Self {
        PriorExpr {
            name: name.into(),
            normal: None,
            log_normal: None,
            uniform: Some([lo, hi]),
        }
    }

    pub fn to_prior(&self) -> Result<Prior> {
        let kind = match (self.normal, self.log_normal, self.uniform) {
            (Some([mean, sd]), None, None) => PriorKind::Normal { mean, sd },
            (None, Some([mu, sigma]), None) => PriorKind::LogNormal { mu, sigma },
            (None, None, Some([lo, hi])) => PriorKind::Uniform { lo, hi },
            _ => {
                return Err(Error::InvalidPrior {
                    name: self.name.clone(),
                    reason: "give exactly one of normal, log_normal, uniform".into(),
                })
            }
        };
        Prior::new(&self.name, kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseExpr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<PriorExpr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasExpr {
    pub kernel: KernelExpr,
    #[serde(default = "zero_mean")]
    pub mean: ParamExpr,
    #[serde(default)]
    pub anchors: AnchorsExpr,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fd_steps: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sd: Option<f64>,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Append `eta` to the bias inputs.
    #[serde(default)]
    pub extended: bool,
}

fn zero_mean() -> ParamExpr {
    ParamExpr::Fixed(0.0)
}

fn default_restarts() -> usize {
    4
}

impl BiasExpr {
    pub fn new(kernel: KernelExpr) -> Self {
        BiasExpr {
            kernel,
            mean: zero_mean(),
            anchors: AnchorsExpr::default(),
            fd_steps: Vec::new(),
            noise_sd: None,
            jitter: 0.0,
            restarts: default_restarts(),
            extended: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcExpr {
    pub steps: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_sd: Option<Vec<f64>>,
    pub init: ChainInit,
}

impl Default for McmcExpr {
    fn default() -> Self {
        let d = McmcSettings::default();
        McmcExpr {
            steps: d.steps,
            burn_in: d.burn_in,
            chains: d.chains,
            seed: d.seed,
            seeds: Vec::new(),
            proposal_sd: None,
            init: d.init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingExpr {
    #[serde(default)]
    pub unit_box: bool,
    #[serde(default = "unit_factor")]
    pub residual_factor: f64,
}

fn unit_factor() -> f64 {
    1.0
}

impl Default for ScalingExpr {
    fn default() -> Self {
        ScalingExpr {
            unit_box: false,
            residual_factor: unit_factor(),
        }
    }
}

/// A configuration tied to its model, data and output location.
pub struct Run {
    pub file: RunConfig,
    pub config: CalibrationConfig,
    pub model: Box<dyn ForwardModel>,
    pub data: Dataset,
    pub output_dir: PathBuf,
    /// Band query points over `x`.
    pub grid: Vec<Vec<f64>>,
    /// Matching `eta` per query point when the bias inputs are extended.
    pub eta_grid: Option<Vec<Vec<f64>>>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Run> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let file = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        file.resolve(base)
    }

    /// Builds the model, dataset and calibration settings; relative paths
    /// are taken from `base`.
    pub fn resolve(self, base: &Path) -> Result<Run> {
        let model = builtin_model(&self.model)?;
        let data = match (&self.dataset.path, &self.dataset.generate) {
            (Some(p), None) => Dataset::read_csv(&base.join(p))?,
            (None, Some(g)) => generate(g.name.as_deref().unwrap_or(&self.model), g.seed)?,
            _ => return Err(Error::Config("dataset needs exactly one of path or generate".into())),
        };
        let priors = self.priors.iter().map(PriorExpr::to_prior).collect::<Result<Vec<_>>>()?;
        let mut config = CalibrationConfig::new(self.method, priors);
        config.noise = match &self.noise {
            None => NoiseSpec::Fixed(data.sigma_meas),
            Some(NoiseExpr {
                fixed: Some(s),
                latent: None,
            }) => NoiseSpec::Fixed(*s),
            Some(NoiseExpr {
                fixed: None,
                latent: Some(p),
            }) => NoiseSpec::Latent(p.to_prior()?),
            Some(_) => return Err(Error::Config("noise needs exactly one of fixed or latent".into())),
        };
        if let Some(b) = &self.bias {
            config.bias = Some(BiasSettings {
                kernel: b.kernel.clone(),
                mean: b.mean.clone(),
                anchors: b.anchors.clone(),
                fd_steps: b.fd_steps.clone(),
                noise_sd: b.noise_sd,
                jitter: b.jitter,
                restarts: b.restarts,
            });
            config.extended = b.extended;
        }
        config.mcmc = McmcSettings {
            steps: self.mcmc.steps,
            burn_in: self.mcmc.burn_in,
            chains: self.mcmc.chains,
            seeds: self.mcmc.seeds.clone(),
            seed: self.mcmc.seed,
            proposal_sd: self.mcmc.proposal_sd.clone(),
            init: self.mcmc.init,
        };
        config.unit_box = self.scaling.unit_box;
        config.residual_scale = self.scaling.residual_factor;
        config.validate(model.as_ref(), &data)?;

        let xs: Vec<Vec<f64>> = match self.bands.as_ref().map(AnchorsExpr::explicit).transpose()?.flatten() {
            Some(g) => g,
            None => unique(data.rows.iter().map(|r| r.x.clone())),
        };
        if xs.is_empty() || xs.iter().any(|x| x.len() != data.x_dim()) {
            return Err(Error::Config(format!(
                "band grid must be non-empty with {}-dimensional points",
                data.x_dim()
            )));
        }
        let (grid, eta_grid) = if config.extended {
            let etas = unique(data.rows.iter().filter_map(|r| r.eta.clone()));
            let mut g = Vec::with_capacity(xs.len() * etas.len());
            let mut e = Vec::with_capacity(g.capacity());
            for eta in &etas {
                for x in &xs {
                    g.push(x.clone());
                    e.push(eta.clone());
                }
            }
            (g, Some(e))
        } else {
            (xs, None)
        };
        Ok(Run {
            output_dir: base.join(&self.output_dir),
            file: self,
            config,
            model,
            data,
            grid,
            eta_grid,
        })
    }
}

/// Distinct rows in first-seen order.
fn unique(rows: impl Iterator<Item = Vec<f64>>) -> Vec<Vec<f64>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in rows {
        let key: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            out.push(r);
        }
    }
    out
}
