//! The three calibration pipelines and their predictive bands.
//!
//! [`calibrate`] runs the configured Metropolis–Hastings chains against
//! `log prior + likelihood`, where the likelihood is either the plain
//! Gaussian one (no bias) or the MAP marginal likelihood of a bias GP fitted
//! to the residuals (KOH, OGP). For the bias methods the GP is refitted at
//! the MAP sample and kept for [`bias_corrected_response`].

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{summarize, PosteriorSummary};
use crate::error::{Error, Result};
use crate::gp::{predict, BiasModel, FittedGP};
use crate::inference::{
    log_likelihood_nobias, log_prior, map_estimate, run_chain, BiasedTarget, Chain, Prior, SamplerSettings,
};
use crate::kernels::{AnchorsExpr, Inputs, KernelExpr, ParamExpr, ResolveContext};
use crate::models::{Dataset, ForwardModel};
use crate::optimize::NelderMead;

/// Cap on the number of posterior samples swept by [`fitted_response`].
pub const FITTED_SAMPLE_CAP: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nobias,
    Koh,
    Ogp,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Nobias => "nobias",
            Method::Koh => "koh",
            Method::Ogp => "ogp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nobias" => Ok(Method::Nobias),
            "koh" => Ok(Method::Koh),
            "ogp" => Ok(Method::Ogp),
            other => Err(Error::Config(format!("unknown method {other:?} (expected nobias, koh or ogp)"))),
        }
    }
}

/// Observation noise of the no-bias likelihood.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSpec {
    /// Prescribed standard deviation.
    Fixed(f64),
    /// Sampled as an extra trailing parameter with this prior.
    Latent(Prior),
}

/// How chain starting points are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainInit {
    /// Every chain starts at the prior mean.
    PriorMean,
    /// Simplex search for the posterior mode from the prior mean; chain `k`
    /// starts one proposal step away from the mode in a seeded direction.
    MapSearch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McmcSettings {
    /// Total iterations per chain, burn-in included.
    pub steps: usize,
    pub burn_in: usize,
    pub chains: usize,
    /// Explicit per-chain seeds; missing entries are derived from `seed`.
    pub seeds: Vec<u64>,
    pub seed: u64,
    /// Defaults to 10% of each prior's SD (or range).
    pub proposal_sd: Option<Vec<f64>>,
    pub init: ChainInit,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            steps: 1100,
            burn_in: 100,
            chains: 2,
            seeds: Vec::new(),
            seed: 0,
            proposal_sd: None,
            init: ChainInit::MapSearch,
        }
    }
}

impl McmcSettings {
    pub fn chain_seeds(&self) -> Vec<u64> {
        (0..self.chains)
            .map(|k| {
                self.seeds
                    .get(k)
                    .copied()
                    .unwrap_or_else(|| splitmix64(self.seed.wrapping_add(k as u64)))
            })
            .collect()
    }
}

/// Bias GP settings before they are tied to a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasSettings {
    pub kernel: KernelExpr,
    pub mean: ParamExpr,
    /// Orthogonality anchors in raw bias-input coordinates.
    pub anchors: AnchorsExpr,
    pub fd_steps: Vec<f64>,
    /// Prescribed noise SD in output units; defaults to the dataset's.
    pub noise_sd: Option<f64>,
    /// Diagonal stabilizer in scaled residual units.
    pub jitter: f64,
    pub restarts: usize,
}

impl BiasSettings {
    pub fn new(kernel: KernelExpr) -> Self {
        BiasSettings {
            kernel,
            mean: ParamExpr::Fixed(0.0),
            anchors: AnchorsExpr::default(),
            fd_steps: Vec::new(),
            noise_sd: None,
            jitter: 0.0,
            restarts: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub method: Method,
    /// One prior per model parameter, in model order.
    pub priors: Vec<Prior>,
    /// Only used by the no-bias likelihood.
    pub noise: NoiseSpec,
    pub bias: Option<BiasSettings>,
    pub mcmc: McmcSettings,
    /// Append each row's `eta` to the bias inputs.
    pub extended: bool,
    /// Map every bias input dimension affinely onto [0, 1].
    pub unit_box: bool,
    /// Factor applied to residuals before the bias fit.
    pub residual_scale: f64,
}

impl CalibrationConfig {
    pub fn new(method: Method, priors: Vec<Prior>) -> Self {
        CalibrationConfig {
            method,
            priors,
            noise: NoiseSpec::Fixed(1.0),
            bias: None,
            mcmc: McmcSettings::default(),
            extended: false,
            unit_box: false,
            residual_scale: 1.0,
        }
    }

    /// Checks everything that can be checked without running a chain.
    pub fn validate(&self, model: &dyn ForwardModel, data: &Dataset) -> Result<()> {
        data.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyInputs("dataset"));
        }
        if self.priors.len() != model.n_params() {
            return Err(Error::Config(format!(
                "model {} has {} parameters but {} priors were given",
                model.name(),
                model.n_params(),
                self.priors.len()
            )));
        }
        for p in &self.priors {
            p.validate()?;
        }
        if data.x_dim() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                node: "dataset x",
                expected: model.input_dim(),
                found: data.x_dim(),
            });
        }
        if self.mcmc.chains == 0 {
            return Err(Error::Config("mcmc.chains must be at least 1".into()));
        }
        if self.mcmc.steps <= self.mcmc.burn_in {
            return Err(Error::Config(format!(
                "mcmc.steps ({}) must exceed mcmc.burn_in ({})",
                self.mcmc.steps, self.mcmc.burn_in
            )));
        }
        if let Some(sd) = &self.mcmc.proposal_sd {
            if sd.len() != self.param_names(model).len() {
                return Err(Error::Config(format!(
                    "expected {} proposal scales, got {}",
                    self.param_names(model).len(),
                    sd.len()
                )));
            }
        }
        if !(self.residual_scale > 0.0 && self.residual_scale.is_finite()) {
            return Err(Error::Config("residual scale must be a positive number".into()));
        }
        if self.extended && !data.has_eta() {
            return Err(Error::Config("extended calibration needs eta on every dataset row".into()));
        }
        match self.method {
            Method::Nobias => match &self.noise {
                NoiseSpec::Fixed(s) if !(*s > 0.0) => {
                    Err(Error::Config(format!("no-bias noise sd must be > 0, got {s}")))
                }
                NoiseSpec::Latent(p) => p.validate(),
                _ => Ok(()),
            },
            Method::Koh | Method::Ogp => {
                let bias = self
                    .bias
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("method {} needs a bias section", self.method)))?;
                if self.method == Method::Ogp {
                    if let Some(a) = bias.anchors.explicit()? {
                        if a.is_empty() {
                            return Err(Error::Config("ogp needs at least one anchor".into()));
                        }
                    }
                    if !bias.fd_steps.is_empty() && bias.fd_steps.len() != model.n_params() {
                        return Err(Error::Config(format!(
                            "expected {} finite-difference steps, got {}",
                            model.n_params(),
                            bias.fd_steps.len()
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Sampled parameter names: the model's, plus the latent noise if any.
    pub fn param_names(&self, model: &dyn ForwardModel) -> Vec<String> {
        let mut names = model.param_names();
        if let (Method::Nobias, NoiseSpec::Latent(p)) = (self.method, &self.noise) {
            names.push(p.name.clone());
        }
        names
    }

    fn all_priors(&self) -> Vec<Prior> {
        let mut p = self.priors.clone();
        if let (Method::Nobias, NoiseSpec::Latent(n)) = (self.method, &self.noise) {
            p.push(n.clone());
        }
        p
    }
}

/// Per-dimension affine map of bias inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub lo: Vec<f64>,
    pub width: Vec<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        InputScaling {
            lo: vec![0.0; dim],
            width: vec![1.0; dim],
        }
    }

    /// Maps the bounding box of `rows` onto [0, 1]; constant columns keep width 1.
    pub fn unit_box(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for r in rows {
            for (d, v) in r.iter().enumerate() {
                lo[d] = lo[d].min(*v);
                hi[d] = hi[d].max(*v);
            }
        }
        let width = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| if h > l { h - l } else { 1.0 })
            .collect();
        InputScaling { lo, width }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn scale(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lo.iter().zip(&self.width))
            .map(|(v, (l, w))| (v - l) / w)
            .collect()
    }

    pub fn unscale(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lo.iter().zip(&self.width))
            .map(|(v, (l, w))| v * w + l)
            .collect()
    }
}

/// Raw bias inputs of each row: `x`, or `(x, eta)` when extended.
pub fn bias_rows(data: &Dataset, extended: bool) -> Result<Vec<Vec<f64>>> {
    data.rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.x.clone();
            if extended {
                let eta = r
                    .eta
                    .as_ref()
                    .ok_or_else(|| Error::Dataset(format!("row {i} has no eta but calibration is extended")))?;
                row.extend_from_slice(eta);
            }
            Ok(row)
        })
        .collect()
}

/// Bias inputs and scaled residuals `s (y - f(x, theta))` for one parameter point.
pub fn residuals(
    model: &dyn ForwardModel,
    theta: &[f64],
    data: &Dataset,
    extended: bool,
    scaling: &InputScaling,
    residual_scale: f64,
) -> Result<(Inputs, Vec<f64>)> {
    let rows = bias_rows(data, extended)?;
    if scaling.dim() != rows[0].len() {
        return Err(Error::DimensionMismatch {
            node: "input scaling",
            expected: rows[0].len(),
            found: scaling.dim(),
        });
    }
    let scaled: Vec<Vec<f64>> = rows.iter().map(|r| scaling.scale(r)).collect();
    let r = data
        .rows
        .iter()
        .map(|o| Ok(residual_scale * (o.y - model.eval(theta, &o.x)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok((Inputs::from_rows(&scaled, true)?, r))
}

#[derive(Clone, Debug)]
pub struct CalibrationResult {
    pub config: CalibrationConfig,
    pub names: Vec<String>,
    pub chains: Vec<Chain>,
    pub summary: PosteriorSummary,
    /// Highest-posterior visited sample.
    pub theta_star: Vec<f64>,
    /// Bias GP refitted at `theta_star`; `None` for the no-bias method.
    pub fit: Option<FittedGP>,
    pub scaling: InputScaling,
    pub sigma_meas: f64,
    /// Bias GP fits performed, including the final one.
    pub bias_fits: usize,
    /// Fits scored `-inf` after a numerical failure.
    pub failed_fits: usize,
    pub wall_seconds: f64,
}

impl CalibrationResult {
    pub fn method(&self) -> Method {
        self.config.method
    }

    /// Model parameters of `theta_star` (without a latent noise entry).
    pub fn model_theta_star(&self, model: &dyn ForwardModel) -> Vec<f64> {
        self.theta_star[..model.n_params()].to_vec()
    }

    /// Every pooled post-burn-in sample.
    pub fn pooled(&self) -> Vec<&Vec<f64>> {
        self.chains.iter().flat_map(|c| c.samples.iter()).collect()
    }
}

enum Likelihood<'a> {
    NoBias {
        model: &'a dyn ForwardModel,
        data: &'a Dataset,
        sigma: Option<f64>,
    },
    Biased(BiasedTarget<'a>),
}

impl Likelihood<'_> {
    fn eval(&self, theta: &[f64]) -> Result<f64> {
        match self {
            Likelihood::NoBias { model, data, sigma } => {
                let t = model.n_params();
                let s = match sigma {
                    Some(s) => *s,
                    None => theta[t],
                };
                if !(s > 0.0) {
                    return Ok(f64::NEG_INFINITY);
                }
                log_likelihood_nobias(*model, &theta[..t], data, s)
            }
            Likelihood::Biased(target) => target.log_likelihood(theta),
        }
    }
}

struct Posterior<'a> {
    priors: Vec<Prior>,
    likelihood: Likelihood<'a>,
}

impl Posterior<'_> {
    fn log_density(&self, theta: &[f64]) -> Result<f64> {
        let lp = log_prior(&self.priors, theta);
        if lp == f64::NEG_INFINITY {
            return Ok(lp);
        }
        Ok(lp + self.likelihood.eval(theta)?)
    }
}

/// Bias model in kernel coordinates plus the model-space anchors.
fn build_bias(
    settings: &BiasSettings,
    method: Method,
    data: &Dataset,
    scaling: &InputScaling,
    extended: bool,
    residual_scale: f64,
    x_dim: usize,
) -> Result<(BiasModel, Vec<Vec<f64>>)> {
    let rows = bias_rows(data, extended)?;
    let scaled: Vec<Vec<f64>> = rows.iter().map(|r| scaling.scale(r)).collect();
    let training = Inputs::from_rows(&scaled, false)?.unique_rows();
    let scale = |x: &[f64]| scaling.scale(x);
    let ctx = ResolveContext {
        training_anchors: &training,
        scale: &scale,
    };
    let kernel = settings.kernel.resolve(&ctx)?;
    let mut bias = BiasModel::new(kernel);
    bias.mean = settings.mean.to_hyper();
    bias.noise_sd = settings.noise_sd.unwrap_or(data.sigma_meas) * residual_scale;
    bias.jitter = settings.jitter;
    bias.restarts = settings.restarts;
    bias.fd_steps = settings.fd_steps.clone();
    let mut model_anchors = Vec::new();
    if method == Method::Ogp {
        let raw = match settings.anchors.explicit()? {
            Some(a) => a,
            None => Inputs::from_rows(&rows, false)?.unique_rows(),
        };
        if let Some(a) = raw.iter().find(|a| a.len() != scaling.dim()) {
            return Err(Error::DimensionMismatch {
                node: "anchors",
                expected: scaling.dim(),
                found: a.len(),
            });
        }
        model_anchors = raw.iter().map(|a| a[..x_dim].to_vec()).collect();
        bias = bias.with_anchors(raw.iter().map(|a| scaling.scale(a)).collect());
    }
    bias.validate()?;
    Ok((bias, model_anchors))
}

/// Runs the configured calibration of `model` against `data`.
pub fn calibrate(config: &CalibrationConfig, model: &dyn ForwardModel, data: &Dataset) -> Result<CalibrationResult> {
    let started = Instant::now();
    config.validate(model, data)?;
    let names = config.param_names(model);
    let priors = config.all_priors();
    let rows = bias_rows(data, config.extended)?;
    let scaling = if config.unit_box {
        InputScaling::unit_box(&rows)
    } else {
        InputScaling::identity(rows[0].len())
    };

    let likelihood = match config.method {
        Method::Nobias => Likelihood::NoBias {
            model,
            data,
            sigma: match &config.noise {
                NoiseSpec::Fixed(s) => Some(*s),
                NoiseSpec::Latent(_) => None,
            },
        },
        Method::Koh | Method::Ogp => {
            let settings = config.bias.as_ref().expect("validated");
            let (bias, model_anchors) = build_bias(
                settings,
                config.method,
                data,
                &scaling,
                config.extended,
                config.residual_scale,
                model.input_dim(),
            )?;
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| scaling.scale(r)).collect();
            let inputs = Inputs::from_rows(&scaled, true)?;
            Likelihood::Biased(BiasedTarget::new(
                model,
                data,
                bias,
                inputs,
                config.residual_scale,
                model_anchors,
            )?)
        }
    };
    let posterior = Posterior { priors, likelihood };

    let proposal_sd = config
        .mcmc
        .proposal_sd
        .clone()
        .unwrap_or_else(|| posterior.priors.iter().map(Prior::default_proposal_sd).collect());
    let seeds = config.mcmc.chain_seeds();
    let inits = chain_inits(&posterior, &proposal_sd, &seeds, config.mcmc.init)?;

    let outcomes: Vec<std::result::Result<Chain, (Chain, Error)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .zip(&inits)
            .map(|(&seed, init)| {
                let settings = SamplerSettings {
                    names: names.clone(),
                    proposal_sd: proposal_sd.clone(),
                    steps: config.mcmc.steps,
                    burn_in: config.mcmc.burn_in,
                    seed,
                };
                let posterior = &posterior;
                scope.spawn(move || run_chain(&mut |t: &[f64]| posterior.log_density(t), init, &settings))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    });

    let mut chains = Vec::with_capacity(outcomes.len());
    let mut failure = None;
    for (k, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(c) => chains.push(c),
            Err((c, e)) => {
                chains.push(c);
                if failure.is_none() {
                    failure = Some((k, e));
                }
            }
        }
    }
    if let Some((chain, e)) = failure {
        return Err(match e {
            Error::InitOutsideSupport(_) | Error::Sampler(_) => e,
            other => Error::ChainAborted {
                chain,
                partial: chains,
                source: Box::new(other),
            },
        });
    }

    let summary = summarize(&chains)?;
    let theta_star = map_estimate(&chains).ok_or(Error::TooFewSamples { needed: 1, got: 0 })?;
    let (fit, bias_fits, failed_fits) = match &posterior.likelihood {
        Likelihood::NoBias { .. } => (None, 0, 0),
        Likelihood::Biased(target) => {
            let fit = target.fit(&theta_star[..model.n_params()])?;
            (Some(fit), target.fit_count(), target.failure_count())
        }
    };
    Ok(CalibrationResult {
        config: config.clone(),
        names,
        chains,
        summary,
        theta_star,
        fit,
        scaling,
        sigma_meas: data.sigma_meas,
        bias_fits,
        failed_fits,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn chain_inits(posterior: &Posterior<'_>, proposal_sd: &[f64], seeds: &[u64], init: ChainInit) -> Result<Vec<Vec<f64>>> {
    let start: Vec<f64> = posterior.priors.iter().map(Prior::mean).collect();
    match init {
        ChainInit::PriorMean => Ok(vec![start; seeds.len()]),
        ChainInit::MapSearch => {
            let mut failure = None;
            let mut objective = |t: &[f64]| match posterior.log_density(t) {
                Ok(v) if v.is_finite() => -v,
                Ok(_) => f64::INFINITY,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::INFINITY
                }
            };
            let step: Vec<f64> = proposal_sd.iter().map(|s| 5.0 * s).collect();
            let nm = NelderMead {
                max_evaluations: 400,
                ..NelderMead::default()
            };
            let m = nm.minimize(&mut objective, &start, &step, None);
            let mode = if m.value.is_finite() { m.x } else { start };
            if let Some(e) = failure {
                if !m.value.is_finite() {
                    return Err(e);
                }
            }
            seeds
                .iter()
                .map(|&seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
                    let p: Vec<f64> = mode
                        .iter()
                        .zip(proposal_sd)
                        .map(|(m, s)| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + s * z
                        })
                        .collect();
                    match posterior.log_density(&p) {
                        Ok(v) if v.is_finite() => Ok(p),
                        Ok(_) | Err(_) => Ok(mode.clone()),
                    }
                })
                .collect()
        }
    }
}

/// SplitMix64 output for `x`; used to derive independent seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandKind {
    Fitted,
    BiasCorrected,
}

/// Predictive mean and SD over a query grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveBand {
    pub kind: BandKind,
    pub x: Vec<Vec<f64>>,
    pub eta: Option<Vec<Vec<f64>>>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl PredictiveBand {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Evenly spaced indices, at most `cap` of them.
fn thinned(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * n / cap).collect()
}

/// Moments of `f(x, theta_s)` over posterior samples, plus `sigma_meas^2`.
pub fn fitted_response(result: &CalibrationResult, model: &dyn ForwardModel, grid: &[Vec<f64>]) -> Result<PredictiveBand> {
    if grid.is_empty() {
        return Err(Error::EmptyInputs("fitted_response grid"));
    }
    let pooled = result.pooled();
    if pooled.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let t = model.n_params();
    let picks = thinned(pooled.len(), FITTED_SAMPLE_CAP);
    let noise = result.sigma_meas * result.sigma_meas;
    let mut mean = Vec::with_capacity(grid.len());
    let mut sd = Vec::with_capacity(grid.len());
    for x in grid {
        let vals = picks
            .iter()
            .map(|&i| model.eval(&pooled[i][..t], x))
            .collect::<Result<Vec<f64>>>()?;
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.push(m);
        sd.push((v + noise).sqrt());
    }
    Ok(PredictiveBand {
        kind: BandKind::Fitted,
        x: grid.to_vec(),
        eta: None,
        mean,
        sd,
    })
}

/// `f(x, theta*)` plus the refitted bias GP, in output units.
pub fn bias_corrected_response(
    result: &CalibrationResult,
    model: &dyn ForwardModel,
    grid: &[Vec<f64>],
    eta: Option<&[Vec<f64>]>,
) -> Result<PredictiveBand> {
    let fit = result
        .fit
        .as_ref()
        .ok_or_else(|| Error::Config("bias-corrected response needs a koh or ogp result".into()))?;
    if grid.is_empty() {
        return Err(Error::EmptyInputs("bias_corrected_response grid"));
    }
    let rows: Vec<Vec<f64>> = match (result.config.extended, eta) {
        (true, Some(eta)) => {
            if eta.len() != grid.len() {
                return Err(Error::DimensionMismatch {
                    node: "eta grid",
                    expected: grid.len(),
                    found: eta.len(),
                });
            }
            grid.iter()
                .zip(eta)
                .map(|(x, e)| x.iter().chain(e).copied().collect())
                .collect()
        }
        (true, None) => return Err(Error::Config("extended calibration needs eta for every query point".into())),
        (false, Some(_)) => return Err(Error::Config("eta given but calibration was not extended".into())),
        (false, None) => grid.to_vec(),
    };
    let scaled: Vec<Vec<f64>> = rows.iter().map(|r| result.scaling.scale(r)).collect();
    let xq = Inputs::from_rows(&scaled, false)?;
    let (mb, cov) = predict(fit, &xq)?;
    let theta = result.model_theta_star(model);
    let s = result.config.residual_scale;
    let noise = result.sigma_meas * result.sigma_meas;
    let mut mean = Vec::with_capacity(grid.len());
    let mut sd = Vec::with_capacity(grid.len());
    for (i, x) in grid.iter().enumerate() {
        mean.push(model.eval(&theta, x)? + mb[i] / s);
        sd.push((cov[(i, i)] / (s * s) + noise).sqrt());
    }
    Ok(PredictiveBand {
        kind: BandKind::BiasCorrected,
        x: grid.to_vec(),
        eta: eta.map(<[Vec<f64>]>::to_vec),
        mean,
        sd,
    })
}
