//! Preset run configurations for the three synthetic benchmarks.

use std::path::PathBuf;

use crate::calibration::{ChainInit, Method};
use crate::config::{BiasExpr, DatasetSource, GenerateExpr, McmcExpr, NoiseExpr, PriorExpr, RunConfig, ScalingExpr};
use crate::error::{Error, Result};
use crate::kernels::{AnchorsExpr, CoordExpr, KernelExpr, ParamExpr};
use crate::models::{Beam, InfluenceLine};

pub const BENCHMARKS: [&str; 3] = ["pedagogical", "beam", "influence"];

/// Options beyond method and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct PresetOptions {
    /// Influence line only: feed the end temperature difference to the bias.
    pub with_temperature: bool,
    pub output_dir: PathBuf,
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            with_temperature: true,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn mcmc(steps: usize, burn_in: usize, seed: u64) -> McmcExpr {
    McmcExpr {
        steps,
        burn_in,
        chains: 2,
        seed,
        seeds: Vec::new(),
        proposal_sd: None,
        init: ChainInit::MapSearch,
    }
}

fn scaled_matern(amplitude: ParamExpr, lengthscale: f64) -> KernelExpr {
    KernelExpr::Product(vec![
        KernelExpr::Constant(amplitude),
        KernelExpr::Matern32 {
            amplitude: ParamExpr::Fixed(1.0),
            lengthscale: ParamExpr::Fixed(lengthscale),
        },
    ])
}

fn base(method: Method, model: &str, seed: u64, priors: Vec<PriorExpr>, opts: &PresetOptions) -> RunConfig {
    RunConfig {
        method,
        model: model.into(),
        dataset: DatasetSource {
            path: None,
            generate: Some(GenerateExpr { name: None, seed }),
        },
        priors,
        noise: None,
        bias: None,
        mcmc: McmcExpr::default(),
        scaling: ScalingExpr::default(),
        bands: None,
        output_dir: opts.output_dir.clone(),
    }
}

pub fn pedagogical(method: Method, seed: u64, opts: &PresetOptions) -> RunConfig {
    let mut c = base(method, "pedagogical", seed, vec![PriorExpr::normal("theta", 2.5, 1.5)], opts);
    c.mcmc = mcmc(1100, 100, seed);
    c.bands = Some(AnchorsExpr::Linspace {
        linspace: (0.0, 1.0, 101),
    });
    match method {
        Method::Nobias => {
            c.noise = Some(NoiseExpr {
                fixed: Some(0.02),
                latent: None,
            })
        }
        Method::Koh | Method::Ogp => {
            let mut b = BiasExpr::new(scaled_matern(ParamExpr::free(1.0, 1e-4, 1e2), 0.5 / 3f64.sqrt()));
            if method == Method::Ogp {
                b.anchors = AnchorsExpr::Linspace {
                    linspace: (0.0, 1.0, 21),
                };
                b.fd_steps = vec![1e-3];
            } else {
                c.mcmc.proposal_sd = Some(vec![0.8]);
            }
            c.bias = Some(b);
        }
    }
    c
}

pub fn beam(method: Method, seed: u64, opts: &PresetOptions) -> RunConfig {
    let mut c = base(method, "beam", seed, vec![PriorExpr::normal("E", 35e9, 5e9)], opts);
    c.mcmc = mcmc(600, 100, seed);
    c.bands = Some(AnchorsExpr::Linspace {
        linspace: (10.0, 50.0, 41),
    });
    match method {
        Method::Nobias => {
            c.noise = Some(NoiseExpr {
                fixed: None,
                latent: Some(PriorExpr::uniform("sigma_eps", 0.0, 0.8)),
            })
        }
        Method::Koh | Method::Ogp => {
            let kernel = KernelExpr::Sum(vec![
                scaled_matern(ParamExpr::free(1e-2, 1e-8, 10.0), 25.0 / 3f64.sqrt()),
                KernelExpr::WhiteNoise {
                    variance: ParamExpr::Fixed(1e-24),
                },
                KernelExpr::Heteroscedastic {
                    anchors: AnchorsExpr::Points(Beam::SENSORS.iter().map(|&x| CoordExpr::Scalar(x)).collect()),
                    log_variance: ParamExpr::free((1e-6f64).ln(), (1e-14f64).ln(), (1e-2f64).ln()),
                    bandwidth: None,
                },
            ]);
            let mut b = BiasExpr::new(kernel);
            if method == Method::Ogp {
                b.fd_steps = vec![1e9];
            }
            c.bias = Some(b);
        }
    }
    c
}

pub fn influence(method: Method, seed: u64, opts: &PresetOptions) -> RunConfig {
    let mut c = base(method, "influence", seed, vec![PriorExpr::log_normal("E", 24.3, 0.2)], opts);
    c.mcmc = mcmc(1200, 200, seed);
    match method {
        Method::Nobias => {}
        Method::Koh | Method::Ogp => {
            let mut b = BiasExpr::new(scaled_matern(ParamExpr::free(1.0, 1e-8, 1e4), 5.0 / 3f64.sqrt()));
            b.noise_sd = Some(0.0);
            b.jitter = 1e-10;
            b.extended = opts.with_temperature;
            if method == Method::Ogp {
                let mid = 0.5 * (InfluenceLine::END_DELTA_T[0] + InfluenceLine::END_DELTA_T[5]);
                b.anchors = AnchorsExpr::Points(
                    (0..=26)
                        .map(|k| {
                            let a = 4.0 * k as f64;
                            if opts.with_temperature {
                                CoordExpr::Vector(vec![a, mid])
                            } else {
                                CoordExpr::Scalar(a)
                            }
                        })
                        .collect(),
                );
                b.fd_steps = vec![1e8];
            }
            c.bias = Some(b);
            c.scaling = ScalingExpr {
                unit_box: true,
                residual_factor: 100.0,
            };
            c.mcmc.proposal_sd = Some(vec![2e7]);
        }
    }
    c
}

pub fn preset(name: &str, method: Method, seed: u64, opts: &PresetOptions) -> Result<RunConfig> {
    match name {
        "pedagogical" => Ok(pedagogical(method, seed, opts)),
        "beam" => Ok(beam(method, seed, opts)),
        "influence" => Ok(influence(method, seed, opts)),
        other => Err(Error::Config(format!(
            "unknown benchmark {other:?} (expected one of {})",
            BENCHMARKS.join(", ")
        ))),
    }
}
