//! Command-line front end.
//!
//! ```text
//! biascal calibrate run.toml [--out DIR]
//! biascal benchmark pedagogical|beam|influence [--method nobias|koh|ogp] [--seed S] [--out DIR] [--no-eta]
//! biascal generate pedagogical|beam|influence --seed S --out data.csv
//! biascal summarize chain_0.csv [chain_1.csv ...] [--out summary.json]
//! ```
//!
//! A calibration run writes, once every chain has finished:
//!
//! | file              | content                                                  |
//! |-------------------|----------------------------------------------------------|
//! | `chain_<k>.csv`   | `step`, one column per parameter, `log_posterior`        |
//! | `summary.json`    | mean, sd, hdi_3, hdi_97, mcse_mean, mcse_sd, r_hat       |
//! | `fitted_band.csv` | grid coordinates, `mean`, `sd` of `f(x, θ)` over samples |
//! | `bias_band.csv`   | grid coordinates, `mean`, `sd` of the bias-corrected response (koh and ogp only) |
//! | `run_meta.json`   | config echo, seeds, library version, wall time, fit counters |
//!
//! Chain files hold post-burn-in samples only, so `summarize` on them
//! reproduces `summary.json`. Numbers are written with 17 significant digits.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
//! The configuration file format is documented in [`crate::config`].

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::benchmarks::{preset, PresetOptions};
use crate::calibration::{bias_corrected_response, calibrate, fitted_response, CalibrationResult, Method, PredictiveBand};
use crate::config::{Run, RunConfig};
use crate::diagnostics::{summarize, PosteriorSummary};
use crate::error::{Error, Result};
use crate::inference::Chain;
use crate::models::generate;

#[derive(Debug, Parser)]
#[command(name = "biascal", version, about = "Bayesian calibration with model-bias terms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the calibration described by a TOML file.
    Calibrate {
        config: PathBuf,
        /// Overrides `output_dir` from the file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one of the built-in benchmark problems.
    Benchmark {
        name: String,
        #[arg(long, default_value = "ogp")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Influence line only: leave the temperature out of the bias inputs.
        #[arg(long)]
        no_eta: bool,
    },
    /// Write a synthetic benchmark dataset.
    Generate {
        name: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize chain files written by an earlier run.
    Summarize {
        #[arg(required = true)]
        chains: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        2
    } else {
        3
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Calibrate { config, out } => {
            let mut run = RunConfig::load(&config)?;
            if let Some(out) = out {
                run.output_dir = out;
            }
            run_calibration(&run)
        }
        Command::Benchmark {
            name,
            method,
            seed,
            out,
            no_eta,
        } => {
            let method: Method = method.parse()?;
            let opts = PresetOptions {
                with_temperature: !no_eta,
                output_dir: out.clone(),
            };
            let mut run = preset(&name, method, seed, &opts)?.resolve(Path::new("."))?;
            run.output_dir = out;
            run_calibration(&run)
        }
        Command::Generate { name, seed, out } => generate(&name, seed)?.write_csv(&out),
        Command::Summarize { chains, out } => {
            let chains = chains.iter().map(|p| read_chain_csv(p)).collect::<Result<Vec<_>>>()?;
            let summary = summarize(&chains)?;
            let text = summary_json(&summary)?;
            match out {
                Some(path) => fs::write(path, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

/// Everything a run writes, rendered in memory first.
#[derive(Debug)]
pub struct RunOutputs {
    pub files: Vec<(String, String)>,
}

fn run_calibration(run: &Run) -> Result<()> {
    let result = calibrate(&run.config, run.model.as_ref(), &run.data)?;
    let outputs = render_outputs(run, &result)?;
    fs::create_dir_all(&run.output_dir)?;
    for (name, text) in &outputs.files {
        fs::write(run.output_dir.join(name), text)?;
    }
    for (name, s) in &result.summary {
        println!(
            "{name}: mean {:.6e} sd {:.6e} hdi [{:.6e}, {:.6e}] r_hat {:.4}",
            s.mean, s.sd, s.hdi_3, s.hdi_97, s.r_hat
        );
    }
    eprintln!("wrote {}", run.output_dir.display());
    Ok(())
}

pub fn render_outputs(run: &Run, result: &CalibrationResult) -> Result<RunOutputs> {
    let mut files = Vec::new();
    for (k, chain) in result.chains.iter().enumerate() {
        files.push((format!("chain_{k}.csv"), chain_csv(chain)?));
    }
    files.push(("summary.json".into(), summary_json(&result.summary)?));

    let x_grid = unique_rows(&run.grid);
    let fitted = fitted_response(result, run.model.as_ref(), &x_grid)?;
    files.push(("fitted_band.csv".into(), band_csv(&fitted)?));
    if result.fit.is_some() {
        let band = bias_corrected_response(result, run.model.as_ref(), &run.grid, run.eta_grid.as_deref())?;
        files.push(("bias_band.csv".into(), band_csv(&band)?));
    }
    files.push(("run_meta.json".into(), run_meta(run, result)?));
    Ok(RunOutputs { files })
}

fn unique_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut seen = BTreeSet::new();
    rows.iter()
        .filter(|r| seen.insert(r.iter().map(|v| v.to_bits()).collect::<Vec<u64>>()))
        .cloned()
        .collect()
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_text(header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn chain_csv(chain: &Chain) -> Result<String> {
    let mut header = vec!["step".to_string()];
    header.extend(chain.names.iter().cloned());
    header.push("log_posterior".into());
    let rows = chain.samples.iter().zip(&chain.log_posterior).enumerate().map(|(i, (s, lp))| {
        let mut r = vec![(chain.burn_in + i).to_string()];
        r.extend(s.iter().map(|&v| num(v)));
        r.push(num(*lp));
        r
    });
    csv_text(header, rows)
}

pub fn read_chain_csv(path: &Path) -> Result<Chain> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header.len() < 3 || header[0] != "step" || header[header.len() - 1] != "log_posterior" {
        return Err(Error::Dataset(format!(
            "{}: expected columns step, <parameters>, log_posterior",
            path.display()
        )));
    }
    let names = header[1..header.len() - 1].to_vec();
    let mut samples = Vec::new();
    let mut log_posterior = Vec::new();
    let mut burn_in = None;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| {
                Error::Dataset(format!("{} row {}: {s:?}: {e}", path.display(), line + 2))
            })
        };
        let vals = rec.iter().map(parse).collect::<Result<Vec<f64>>>()?;
        if vals.len() != header.len() {
            return Err(Error::Dataset(format!("{} row {}: wrong column count", path.display(), line + 2)));
        }
        burn_in.get_or_insert(vals[0] as usize);
        samples.push(vals[1..vals.len() - 1].to_vec());
        log_posterior.push(vals[vals.len() - 1]);
    }
    let accepted = samples.windows(2).filter(|w| w[0] != w[1]).count();
    let acceptance_rate = if samples.len() > 1 {
        accepted as f64 / (samples.len() - 1) as f64
    } else {
        0.0
    };
    Ok(Chain {
        names,
        samples,
        log_posterior,
        acceptance_rate,
        proposal_sd: Vec::new(),
        seed: 0,
        burn_in: burn_in.unwrap_or(0),
    })
}

pub fn summary_json(summary: &PosteriorSummary) -> Result<String> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    Ok(text)
}

pub fn band_csv(band: &PredictiveBand) -> Result<String> {
    let columns = |prefix: &str, dim: usize| -> Vec<String> {
        if dim == 1 {
            vec![prefix.to_string()]
        } else {
            (0..dim).map(|k| format!("{prefix}_{k}")).collect()
        }
    };
    let mut header = columns("x", band.x.first().map_or(1, Vec::len));
    if let Some(eta) = &band.eta {
        header.extend(columns("eta", eta.first().map_or(1, Vec::len)));
    }
    header.push("mean".into());
    header.push("sd".into());
    let rows = (0..band.len()).map(|i| {
        let mut r: Vec<String> = band.x[i].iter().map(|&v| num(v)).collect();
        if let Some(eta) = &band.eta {
            r.extend(eta[i].iter().map(|&v| num(v)));
        }
        r.push(num(band.mean[i]));
        r.push(num(band.sd[i]));
        r
    });
    csv_text(header, rows)
}

#[derive(Serialize)]
struct RunMeta<'a> {
    version: &'static str,
    method: Method,
    seed: u64,
    chain_seeds: Vec<u64>,
    theta_star: BTreeMap<&'a str, f64>,
    acceptance_rates: Vec<f64>,
    bias_hyperparameters: Option<BTreeMap<String, f64>>,
    bias_fits: usize,
    failed_fits: usize,
    wall_seconds: f64,
    config: &'a RunConfig,
}

fn run_meta(run: &Run, result: &CalibrationResult) -> Result<String> {
    let meta = RunMeta {
        version: env!("CARGO_PKG_VERSION"),
        method: result.method(),
        seed: run.config.mcmc.seed,
        chain_seeds: result.chains.iter().map(|c| c.seed).collect(),
        theta_star: result.names.iter().map(String::as_str).zip(result.theta_star.iter().copied()).collect(),
        acceptance_rates: result.chains.iter().map(|c| c.acceptance_rate).collect(),
        bias_hyperparameters: result.fit.as_ref().map(|f| {
            f.bias
                .kernel
                .hypers()
                .into_iter()
                .map(|(name, h, _)| (name, h.value))
                .collect()
        }),
        bias_fits: result.bias_fits,
        failed_fits: result.failed_fits,
        wall_seconds: result.wall_seconds,
        config: &run.file,
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    Ok(text)
}
