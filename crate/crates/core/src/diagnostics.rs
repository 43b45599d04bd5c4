//! Posterior summaries: HDI, Gelman–Rubin, effective sample size, MCSE.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Chain;

/// Narrowest interval holding `ceil(prob * n)` of the sorted samples.
pub fn hdi(samples: &[f64], prob: f64) -> Result<(f64, f64)> {
    if samples.len() < 10 {
        return Err(Error::TooFewSamples {
            needed: 10,
            got: samples.len(),
        });
    }
    assert!(prob > 0.0 && prob < 1.0, "hdi probability must lie in (0, 1)");
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((prob * s.len() as f64).ceil() as usize).clamp(1, s.len());
    let (lo, _) = (0..=s.len() - k)
        .map(|i| (i, s[i + k - 1] - s[i]))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    Ok((s[lo], s[lo + k - 1]))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Classical potential scale reduction factor. A single chain is split in half.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    let split;
    let chains = if chains.len() == 1 {
        let c = &chains[0];
        let h = c.len() / 2;
        split = vec![c[..h].to_vec(), c[c.len() - h..].to_vec()];
        &split[..]
    } else {
        chains
    };
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if chains.is_empty() || n < 4 {
        return Err(Error::TooFewSamples { needed: 4, got: n });
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Sampler("gelman_rubin needs chains of equal length".into()));
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| variance(c)).sum::<f64>() / chains.len() as f64;
    let b = nf * variance(&means);
    if w == 0.0 {
        return Ok(if b == 0.0 { ((nf - 1.0) / nf).sqrt() } else { f64::INFINITY });
    }
    Ok((((nf - 1.0) / nf * w + b / nf) / w).sqrt())
}

/// Effective sample size from Geyer's initial positive sequence, using the
/// autocovariance averaged over mean-centred chains.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let total = (n * chains.len()) as f64;
    if n < 2 {
        return total.max(1.0);
    }
    let centred: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| {
            let m = mean(&c[..n]);
            c[..n].iter().map(|x| x - m).collect()
        })
        .collect();
    let acov = |lag: usize| -> f64 {
        centred
            .iter()
            .map(|c| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
            .sum::<f64>()
            / centred.len() as f64
    };
    let g0 = acov(0);
    let cap = total * total.log10().max(1.0);
    if !(g0 > 0.0) {
        return 1.0;
    }
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = (acov(lag) + acov(lag + 1)) / g0;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    (total / tau.max(f64::MIN_POSITIVE)).clamp(1.0, cap)
}

/// Monte Carlo standard errors of the mean and of the SD.
pub fn mcse(samples: &[f64]) -> (f64, f64) {
    mcse_chains(&[samples.to_vec()])
}

fn mcse_chains(chains: &[Vec<f64>]) -> (f64, f64) {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let sd = if pooled.len() > 1 { variance(&pooled).sqrt() } else { 0.0 };
    let ess = effective_sample_size(chains);
    (sd / ess.sqrt(), sd / (2.0 * ess).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub mean: f64,
    pub sd: f64,
    pub hdi_3: f64,
    pub hdi_97: f64,
    pub mcse_mean: f64,
    pub mcse_sd: f64,
    pub r_hat: f64,
}

/// Per-parameter summary keyed by parameter name.
pub type PosteriorSummary = BTreeMap<String, ParameterSummary>;

/// Pooled statistics over every chain.
pub fn summarize(chains: &[Chain]) -> Result<PosteriorSummary> {
    let first = chains.first().ok_or(Error::TooFewSamples { needed: 1, got: 0 })?;
    let mut out = BTreeMap::new();
    for (k, name) in first.names.iter().enumerate() {
        let traces: Vec<Vec<f64>> = chains.iter().map(|c| c.param(k)).collect();
        let pooled: Vec<f64> = traces.iter().flatten().copied().collect();
        if pooled.len() < 20 {
            return Err(Error::TooFewSamples {
                needed: 20,
                got: pooled.len(),
            });
        }
        let m = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let sd = variance(&pooled).sqrt();
        let (lo, hi) = hdi(&pooled, 0.94)?;
        let (mcse_mean, mcse_sd) = mcse_chains(&traces);
        let r_hat = gelman_rubin(&traces)?;
        out.insert(
            name.clone(),
            ParameterSummary {
                mean: m,
                sd,
                hdi_3: lo,
                hdi_97: hi,
                mcse_mean,
                mcse_sd,
                r_hat,
            },
        );
    }
    Ok(out)
}
