//! Priors, likelihoods and the Metropolis–Hastings sampler.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp::{fit_map_with, map_log_likelihood, BiasModel, FitContext, FittedGP, SpectralBasis};
use crate::kernels::Inputs;
use crate::models::{Dataset, ForwardModel};
use crate::ogp::model_gradient_fd;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PriorKind {
    Normal { mean: f64, sd: f64 },
    /// Parameters of the underlying normal of `ln(theta)`.
    LogNormal { mu: f64, sigma: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prior {
    pub name: String,
    pub kind: PriorKind,
}

impl Prior {
    pub fn new(name: &str, kind: PriorKind) -> Result<Self> {
        let p = Prior {
            name: name.to_string(),
            kind,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidPrior {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        match self.kind {
            PriorKind::Normal { mean, sd } if !(sd > 0.0) || !mean.is_finite() => bad("normal needs sd > 0"),
            PriorKind::LogNormal { mu, sigma } if !(sigma > 0.0) || !mu.is_finite() => {
                bad("log-normal needs sigma > 0")
            }
            PriorKind::Uniform { lo, hi } if !(lo < hi) => bad("uniform needs lo < hi"),
            _ => Ok(()),
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        match self.kind {
            PriorKind::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * z * z - sd.ln() - 0.5 * LN_2PI
            }
            PriorKind::LogNormal { mu, sigma } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let z = (x.ln() - mu) / sigma;
                -0.5 * z * z - x.ln() - sigma.ln() - 0.5 * LN_2PI
            }
            PriorKind::Uniform { lo, hi } => {
                if (lo..=hi).contains(&x) {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self.kind {
            PriorKind::Normal { mean, .. } => mean,
            PriorKind::LogNormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
            PriorKind::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    /// Default random-walk scale: 10% of the prior SD, or of the range for
    /// a uniform prior.
    pub fn default_proposal_sd(&self) -> f64 {
        match self.kind {
            PriorKind::Normal { sd, .. } => 0.1 * sd,
            PriorKind::LogNormal { sigma, .. } => {
                let s2 = sigma * sigma;
                0.1 * self.mean() * (s2.exp() - 1.0).sqrt()
            }
            PriorKind::Uniform { lo, hi } => 0.1 * (hi - lo),
        }
    }
}

/// Sum of per-parameter prior log densities; `-inf` outside the support.
pub fn log_prior(priors: &[Prior], theta: &[f64]) -> f64 {
    assert_eq!(priors.len(), theta.len(), "prior/parameter dimension mismatch");
    let mut lp = 0.0;
    for (p, &t) in priors.iter().zip(theta) {
        lp += p.log_density(t);
        if lp == f64::NEG_INFINITY {
            break;
        }
    }
    lp
}

/// Gaussian log likelihood of the model residuals with a common `sigma`.
pub fn log_likelihood_nobias(model: &dyn ForwardModel, theta: &[f64], data: &Dataset, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    let mut ll = 0.0;
    for r in &data.rows {
        let z = (r.y - model.eval(theta, &r.x)?) / sigma;
        ll += -0.5 * z * z;
    }
    Ok(ll - data.len() as f64 * (sigma.ln() + 0.5 * LN_2PI))
}

/// Everything the modular bias likelihood needs besides `theta`.
pub struct BiasedTarget<'a> {
    model: &'a dyn ForwardModel,
    x_model: Vec<Vec<f64>>,
    y: Vec<f64>,
    inputs: Inputs,
    residual_scale: f64,
    bias: BiasModel,
    model_anchors: Vec<Vec<f64>>,
    spectral: Option<SpectralBasis>,
    fits: AtomicUsize,
    failures: AtomicUsize,
}

impl<'a> BiasedTarget<'a> {
    /// `inputs` are the kernel coordinates of each row, `model_anchors` the
    /// model coordinates of each anchor in `bias.anchors`.
    pub fn new(
        model: &'a dyn ForwardModel,
        data: &Dataset,
        bias: BiasModel,
        inputs: Inputs,
        residual_scale: f64,
        model_anchors: Vec<Vec<f64>>,
    ) -> Result<Self> {
        bias.validate()?;
        if inputs.len() != data.len() {
            return Err(Error::DimensionMismatch {
                node: "bias inputs",
                expected: data.len(),
                found: inputs.len(),
            });
        }
        if bias.orthogonal && model_anchors.len() != bias.anchors.len() {
            return Err(Error::DimensionMismatch {
                node: "anchors",
                expected: bias.anchors.len(),
                found: model_anchors.len(),
            });
        }
        let spectral = SpectralBasis::unprojected(&bias, &inputs)?;
        Ok(BiasedTarget {
            model,
            x_model: data.rows.iter().map(|r| r.x.clone()).collect(),
            y: data.y(),
            inputs,
            residual_scale,
            bias,
            model_anchors,
            spectral,
            fits: AtomicUsize::new(0),
            failures: AtomicUsize::new(0),
        })
    }

    pub fn inputs(&self) -> &Inputs {
        &self.inputs
    }

    pub fn bias(&self) -> &BiasModel {
        &self.bias
    }

    /// Scaled residuals `s (y - f(x, theta))`.
    pub fn residuals(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.x_model
            .iter()
            .zip(&self.y)
            .map(|(x, y)| Ok(self.residual_scale * (y - self.model.eval(theta, x)?)))
            .collect()
    }

    fn bias_at(&self, theta: &[f64]) -> Result<BiasModel> {
        let mut b = self.bias.clone();
        if b.orthogonal {
            let steps = b.steps_at(theta);
            b.sensitivity = Some(model_gradient_fd(self.model, theta, &self.model_anchors, &steps)?);
        }
        Ok(b)
    }

    fn spectral_for(&self, bias: &BiasModel) -> Option<SpectralBasis> {
        match (&bias.sensitivity, &self.spectral) {
            (Some(sens), Some(basis)) if bias.orthogonal => basis.orthogonalized(sens),
            (_, basis) if !bias.orthogonal => basis.clone(),
            _ => None,
        }
    }

    /// MAP log marginal likelihood; numerical failures give `-inf`.
    pub fn log_likelihood(&self, theta: &[f64]) -> Result<f64> {
        self.fits.fetch_add(1, Ordering::Relaxed);
        let r = self.residuals(theta)?;
        let bias = self.bias_at(theta)?;
        let owned;
        let basis = if bias.orthogonal {
            owned = self.spectral_for(&bias);
            owned.as_ref()
        } else {
            self.spectral.as_ref()
        };
        match map_log_likelihood(&bias, &self.inputs, &r, &FitContext { spectral: basis }) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) | Err(Error::Factorization { .. }) | Err(Error::FitFailed) => {
                self.failures.fetch_add(1, Ordering::Relaxed);
                Ok(f64::NEG_INFINITY)
            }
            Err(e) => Err(e),
        }
    }

    /// Fitted bias GP at `theta`.
    pub fn fit(&self, theta: &[f64]) -> Result<FittedGP> {
        self.fits.fetch_add(1, Ordering::Relaxed);
        let r = self.residuals(theta)?;
        let bias = self.bias_at(theta)?;
        let basis = self.spectral_for(&bias);
        fit_map_with(&bias, &self.inputs, &r, &FitContext { spectral: basis.as_ref() })
    }

    /// Number of bias fits attempted so far.
    pub fn fit_count(&self) -> usize {
        self.fits.load(Ordering::Relaxed)
    }

    /// Number of fits that failed numerically and were scored `-inf`.
    pub fn failure_count(&self) -> usize {
        self.failures.load(Ordering::Relaxed)
    }
}

/// Modular bias likelihood on unscaled inputs: residuals `y - f(x, theta)`
/// are fitted by the bias GP and the achieved log marginal likelihood is
/// returned with the fit.
pub fn log_likelihood_biased(
    model: &dyn ForwardModel,
    theta: &[f64],
    data: &Dataset,
    bias: &BiasModel,
) -> Result<(f64, FittedGP)> {
    let rows: Vec<Vec<f64>> = data.rows.iter().map(|r| r.x.clone()).collect();
    let inputs = Inputs::from_rows(&rows, true)?;
    let target = BiasedTarget::new(model, data, bias.clone(), inputs, 1.0, bias.anchors.clone())?;
    let fit = target.fit(theta)?;
    Ok((fit.log_marginal_likelihood, fit))
}

/// Post-burn-in MCMC samples of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub names: Vec<String>,
    pub samples: Vec<Vec<f64>>,
    pub log_posterior: Vec<f64>,
    pub acceptance_rate: f64,
    pub proposal_sd: Vec<f64>,
    pub seed: u64,
    pub burn_in: usize,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Trace of parameter `k`.
    pub fn param(&self, k: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[k]).collect()
    }
}

/// Settings of one random-walk run.
#[derive(Clone, Debug)]
pub struct SamplerSettings {
    pub names: Vec<String>,
    pub proposal_sd: Vec<f64>,
    /// Total iterations including burn-in.
    pub steps: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl SamplerSettings {
    fn validate(&self, dim: usize) -> Result<()> {
        if self.steps <= self.burn_in {
            return Err(Error::Sampler(format!(
                "steps ({}) must exceed burn_in ({})",
                self.steps, self.burn_in
            )));
        }
        if self.proposal_sd.len() != dim || self.names.len() != dim {
            return Err(Error::Sampler(format!(
                "expected {dim} proposal scales and names, got {} and {}",
                self.proposal_sd.len(),
                self.names.len()
            )));
        }
        if let Some(s) = self.proposal_sd.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Sampler(format!("proposal sd must be > 0, got {s}")));
        }
        Ok(())
    }
}

/// Runs one chain; on error the samples collected so far are returned too.
pub(crate) fn run_chain(
    log_target: &mut dyn FnMut(&[f64]) -> Result<f64>,
    init: &[f64],
    s: &SamplerSettings,
) -> std::result::Result<Chain, (Chain, Error)> {
    let mut chain = Chain {
        names: s.names.clone(),
        samples: Vec::with_capacity(s.steps - s.burn_in.min(s.steps)),
        log_posterior: Vec::new(),
        acceptance_rate: 0.0,
        proposal_sd: s.proposal_sd.clone(),
        seed: s.seed,
        burn_in: s.burn_in,
    };
    if let Err(e) = s.validate(init.len()) {
        return Err((chain, e));
    }
    let mut current = init.to_vec();
    let mut current_lp = match log_target(&current) {
        Ok(v) if v.is_finite() => v,
        Ok(_) => return Err((chain, Error::InitOutsideSupport(current))),
        Err(e) => return Err((chain, e)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut accepted = 0usize;
    let mut proposal = vec![0.0; init.len()];
    for step in 0..s.steps {
        for (k, p) in proposal.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *p = current[k] + s.proposal_sd[k] * z;
        }
        let u: f64 = rng.random();
        let lp = match log_target(&proposal) {
            Ok(v) => v,
            Err(e) => {
                chain.acceptance_rate = accepted as f64 / step.max(1) as f64;
                return Err((chain, e));
            }
        };
        if lp > f64::NEG_INFINITY && u.ln() < lp - current_lp {
            current.copy_from_slice(&proposal);
            current_lp = lp;
            accepted += 1;
        }
        if step >= s.burn_in {
            chain.samples.push(current.clone());
            chain.log_posterior.push(current_lp);
        }
    }
    chain.acceptance_rate = accepted as f64 / s.steps as f64;
    Ok(chain)
}

/// Gaussian random-walk Metropolis–Hastings.
pub fn metropolis_hastings(
    log_target: &mut dyn FnMut(&[f64]) -> Result<f64>,
    init: &[f64],
    settings: &SamplerSettings,
) -> Result<Chain> {
    run_chain(log_target, init, settings).map_err(|(partial, e)| match e {
        Error::InitOutsideSupport(_) | Error::Sampler(_) => e,
        other => Error::ChainAborted {
            chain: 0,
            partial: vec![partial],
            source: Box::new(other),
        },
    })
}

/// Visited sample with the largest stored log posterior across all chains.
pub fn map_estimate(chains: &[Chain]) -> Option<Vec<f64>> {
    chains
        .iter()
        .flat_map(|c| c.samples.iter().zip(&c.log_posterior))
        .fold(None::<(&Vec<f64>, f64)>, |best, (s, &lp)| match best {
            Some((_, b)) if b >= lp => best,
            _ => Some((s, lp)),
        })
        .map(|(s, _)| s.clone())
}
