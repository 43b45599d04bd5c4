//! Forward models, datasets and the synthetic benchmark generators.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::scan_then_golden;

/// A deterministic computational model `f(x, theta)`.
pub trait ForwardModel: Send + Sync {
    fn name(&self) -> &str;
    fn param_names(&self) -> Vec<String>;
    fn input_dim(&self) -> usize;
    fn eval(&self, theta: &[f64], x: &[f64]) -> Result<f64>;

    fn n_params(&self) -> usize {
        self.param_names().len()
    }
}

/// Wraps a closure as a [`ForwardModel`].
pub struct FnModel {
    name: String,
    n_params: usize,
    input_dim: usize,
    f: Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>,
}

impl FnModel {
    pub fn new(
        name: &str,
        n_params: usize,
        input_dim: usize,
        f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnModel {
            name: name.to_string(),
            n_params,
            input_dim,
            f: Box::new(f),
        }
    }
}

impl fmt::Debug for FnModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnModel").field("name", &self.name).finish()
    }
}

impl ForwardModel for FnModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.n_params).map(|i| format!("theta_{i}")).collect()
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn eval(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        Ok((self.f)(theta, x))
    }
}

fn positive_modulus(model: &str, theta: &[f64], x: &[f64]) -> Result<f64> {
    match theta.first() {
        Some(&e) if e > 0.0 && e.is_finite() => Ok(e),
        _ => Err(Error::Model {
            model: model.to_string(),
            theta: theta.to_vec(),
            x: x.to_vec(),
            reason: "Young's modulus must be positive".into(),
        }),
    }
}

/// Linear model `f(x, theta) = theta * x`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Pedagogical;

impl Pedagogical {
    /// Noise-free generating curve `4x + x sin 5x`.
    pub fn truth(x: f64) -> f64 {
        4.0 * x + x * (5.0 * x).sin()
    }
}

impl ForwardModel for Pedagogical {
    fn name(&self) -> &str {
        "pedagogical"
    }

    fn param_names(&self) -> Vec<String> {
        vec!["theta".into()]
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn eval(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        Ok(theta[0] * x[0])
    }
}

/// Tip-loaded Euler–Bernoulli cantilever; output is the deflection at `x`.
#[derive(Clone, Copy, Debug)]
pub struct Beam {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub load: f64,
}

impl Default for Beam {
    fn default() -> Self {
        Beam {
            length: 50.0,
            width: 3.0,
            height: 3.0,
            load: 100e3,
        }
    }
}

impl Beam {
    pub fn inertia(&self) -> f64 {
        self.width * self.height.powi(3) / 12.0
    }

    /// `u(x) = -P x^2 (3L - x) / (6 E I)`.
    pub fn deflection(&self, x: f64, e: f64, load: f64) -> f64 {
        -load * x * x * (3.0 * self.length - x) / (6.0 * e * self.inertia())
    }

    pub const SENSORS: [f64; 5] = [10.0, 20.0, 30.0, 40.0, 50.0];
}

impl ForwardModel for Beam {
    fn name(&self) -> &str {
        "beam"
    }

    fn param_names(&self) -> Vec<String> {
        vec!["E".into()]
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn eval(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        let e = positive_modulus("beam", theta, x)?;
        Ok(self.deflection(x[0], e, self.load))
    }
}

/// Midspan deflection of a simply supported span under a moving point load.
#[derive(Clone, Copy, Debug)]
pub struct InfluenceLine {
    pub span: f64,
    pub width: f64,
    pub depth: f64,
    pub load: f64,
}

impl Default for InfluenceLine {
    fn default() -> Self {
        InfluenceLine {
            span: 95.185,
            width: 14.0,
            depth: 2.5,
            load: 98.1e3,
        }
    }
}

impl InfluenceLine {
    pub const ALPHA: f64 = 1e-5;
    pub const LAST_POSITION: f64 = 104.0;
    pub const END_DELTA_T: [f64; 6] = [0.01, 0.028, 0.046, 0.064, 0.082, 0.1];

    pub fn inertia(&self) -> f64 {
        self.width * self.depth.powi(3) / 12.0
    }

    /// `delta(a) = P a (3L^2 - 4a^2) / (48 E I)` for `a <= L/2`, mirrored beyond.
    pub fn deflection(&self, a: f64, e: f64) -> f64 {
        let l = self.span;
        if !(0.0..=l).contains(&a) {
            return 0.0;
        }
        let a = if a > l / 2.0 { l - a } else { a };
        self.load * a * (3.0 * l * l - 4.0 * a * a) / (48.0 * e * self.inertia())
    }

    /// Thermal midspan term `kappa L^2 / 8` with a gradient growing linearly
    /// from 0 at the first load position to `dt_end` at the last.
    pub fn thermal(&self, a: f64, dt_end: f64) -> f64 {
        let dt = dt_end * a / Self::LAST_POSITION;
        let kappa = Self::ALPHA * dt / self.depth;
        kappa * self.span * self.span / 8.0
    }

    pub fn positions() -> Vec<f64> {
        (0..=104).map(f64::from).collect()
    }
}

impl ForwardModel for InfluenceLine {
    fn name(&self) -> &str {
        "influence"
    }

    fn param_names(&self) -> Vec<String> {
        vec!["E".into()]
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn eval(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        let e = positive_modulus("influence", theta, x)?;
        Ok(self.deflection(x[0], e))
    }
}

/// Looks up a built-in model by name.
pub fn builtin_model(name: &str) -> Result<Box<dyn ForwardModel>> {
    match name {
        "pedagogical" => Ok(Box::new(Pedagogical)),
        "beam" => Ok(Box::new(Beam::default())),
        "influence" => Ok(Box::new(InfluenceLine::default())),
        other => Err(Error::Config(format!(
            "unknown model {other:?} (expected pedagogical, beam or influence)"
        ))),
    }
}

/// One measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub series_id: i64,
    pub x: Vec<f64>,
    pub eta: Option<Vec<f64>>,
    pub y: f64,
}

/// Provenance of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub generator: String,
    pub seed: u64,
    pub true_parameters: BTreeMap<String, f64>,
    pub sigma_meas: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rows: Vec<Observation>,
    /// Prescribed measurement-noise standard deviation.
    pub sigma_meas: f64,
    pub meta: Option<GeneratorMeta>,
}

fn header_dims(headers: &csv::StringRecord, prefix: &str) -> Vec<usize> {
    headers
        .iter()
        .enumerate()
        .filter(|(_, h)| {
            *h == prefix
                || h.strip_prefix(prefix)
                    .and_then(|s| s.strip_prefix('_'))
                    .is_some_and(|s| s.parse::<usize>().is_ok())
        })
        .map(|(i, _)| i)
        .collect()
}

fn column_names(prefix: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![prefix.to_string()]
    } else {
        (0..n).map(|i| format!("{prefix}_{i}")).collect()
    }
}

impl Dataset {
    pub fn new(rows: Vec<Observation>, sigma_meas: f64) -> Result<Self> {
        let d = Dataset {
            rows,
            sigma_meas,
            meta: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.rows.first() else {
            return Err(Error::Dataset("dataset has no rows".into()));
        };
        if !(self.sigma_meas >= 0.0) {
            return Err(Error::Dataset(format!("sigma_meas {} must be >= 0", self.sigma_meas)));
        }
        let dx = first.x.len();
        let de = first.eta.as_ref().map(Vec::len);
        for (i, r) in self.rows.iter().enumerate() {
            if r.x.len() != dx || r.eta.as_ref().map(Vec::len) != de {
                return Err(Error::Dataset(format!("row {i} has inconsistent dimensions")));
            }
            if !r.y.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Dataset(format!("row {i} has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.x.len())
    }

    pub fn eta_dim(&self) -> usize {
        self.rows.first().and_then(|r| r.eta.as_ref()).map_or(0, Vec::len)
    }

    pub fn has_eta(&self) -> bool {
        self.eta_dim() > 0
    }

    pub fn y(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.y).collect()
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        let stem = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        csv_path.with_file_name(format!("{stem}.meta.json"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["series_id".to_string()];
        header.extend(column_names("x", self.x_dim()));
        if self.has_eta() {
            header.extend(column_names("eta", self.eta_dim()));
        }
        header.push("y".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.series_id.to_string()];
            rec.extend(r.x.iter().map(|v| format!("{v:.16e}")));
            if let Some(eta) = &r.eta {
                rec.extend(eta.iter().map(|v| format!("{v:.16e}")));
            }
            rec.push(format!("{:.16e}", r.y));
            w.write_record(&rec)?;
        }
        w.flush()?;
        if let Some(meta) = &self.meta {
            let json = serde_json::to_string_pretty(meta)?;
            std::fs::write(Self::sidecar_path(path), json + "\n")?;
        }
        Ok(())
    }

    /// Reads a dataset CSV and, if present, its `.meta.json` sidecar.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let headers = rd.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Dataset(format!("{}: missing column {name:?}", path.display())))
        };
        let sid = col("series_id")?;
        let ycol = col("y")?;
        let xcols = header_dims(&headers, "x");
        let ecols = header_dims(&headers, "eta");
        if xcols.is_empty() {
            return Err(Error::Dataset(format!("{}: no x column", path.display())));
        }
        let parse = |s: &str, line: usize| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Dataset(format!("{}: line {line}: cannot parse {s:?}", path.display())))
        };
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let series_id = rec[sid]
                .trim()
                .parse::<i64>()
                .map_err(|_| Error::Dataset(format!("{}: line {line}: bad series_id", path.display())))?;
            let x = xcols.iter().map(|&c| parse(&rec[c], line)).collect::<Result<Vec<_>>>()?;
            let eta = if ecols.is_empty() {
                None
            } else {
                Some(ecols.iter().map(|&c| parse(&rec[c], line)).collect::<Result<Vec<_>>>()?)
            };
            rows.push(Observation {
                series_id,
                x,
                eta,
                y: parse(&rec[ycol], line)?,
            });
        }
        let sidecar = Self::sidecar_path(path);
        let meta: Option<GeneratorMeta> = if sidecar.exists() {
            Some(serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?)
        } else {
            None
        };
        let d = Dataset {
            rows,
            sigma_meas: meta.as_ref().map_or(0.0, |m| m.sigma_meas),
            meta,
        };
        d.validate()?;
        Ok(d)
    }
}

fn meta(name: &str, seed: u64, params: &[(&str, f64)], sigma: f64) -> GeneratorMeta {
    GeneratorMeta {
        generator: name.into(),
        seed,
        true_parameters: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        sigma_meas: sigma,
    }
}

/// Pedagogical observation locations: 0.05 grid on [0, 0.25] ∪ [0.4, 0.5] ∪ [0.8, 1].
pub fn pedagogical_inputs() -> Vec<f64> {
    [0..=5, 8..=10, 16..=20]
        .into_iter()
        .flatten()
        .map(|k| k as f64 * 0.05)
        .collect()
}

pub fn generate_pedagogical(seed: u64) -> Dataset {
    let sigma = 0.02f64.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("valid normal");
    let rows = pedagogical_inputs()
        .into_iter()
        .map(|x| Observation {
            series_id: 0,
            x: vec![x],
            eta: None,
            y: Pedagogical::truth(x) + noise.sample(&mut rng),
        })
        .collect();
    Dataset {
        rows,
        sigma_meas: sigma,
        meta: Some(meta("pedagogical", seed, &[], sigma)),
    }
}

/// Log-normal with the given mean and standard deviation.
pub fn moment_matched_lognormal(mean: f64, sd: f64) -> (f64, f64) {
    let s2 = (1.0 + sd * sd / (mean * mean)).ln();
    (mean.ln() - s2 / 2.0, s2.sqrt())
}

pub const BEAM_TRUE_E: f64 = 30e9;
pub const BEAM_OFFSET: f64 = -0.1;
pub const BEAM_SERIES: usize = 20;

pub fn generate_beam(seed: u64) -> Dataset {
    let beam = Beam::default();
    let sigma = 2e-8f64.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mu, s) = moment_matched_lognormal(20e3, 6e3);
    let extra = LogNormal::new(mu, s).expect("valid log-normal");
    let noise = Normal::new(0.0, sigma).expect("valid normal");
    let mut rows = Vec::with_capacity(BEAM_SERIES * Beam::SENSORS.len());
    for series in 0..BEAM_SERIES {
        let load = beam.load + extra.sample(&mut rng);
        for &x in &Beam::SENSORS {
            let y = beam.deflection(x, BEAM_TRUE_E, load) + BEAM_OFFSET + noise.sample(&mut rng);
            rows.push(Observation {
                series_id: series as i64,
                x: vec![x],
                eta: None,
                y,
            });
        }
    }
    Dataset {
        rows,
        sigma_meas: sigma,
        meta: Some(meta("beam", seed, &[("E", BEAM_TRUE_E)], sigma)),
    }
}

pub const INFLUENCE_TRUE_E: f64 = 40e9;

pub fn generate_influence(seed: u64) -> Dataset {
    let bridge = InfluenceLine::default();
    let sigma = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("valid normal");
    let mut rows = Vec::new();
    for (series, &dt) in InfluenceLine::END_DELTA_T.iter().enumerate() {
        for a in InfluenceLine::positions() {
            let y = bridge.deflection(a, INFLUENCE_TRUE_E) + bridge.thermal(a, dt) + noise.sample(&mut rng);
            rows.push(Observation {
                series_id: series as i64,
                x: vec![a],
                eta: Some(vec![dt]),
                y,
            });
        }
    }
    Dataset {
        rows,
        sigma_meas: sigma,
        meta: Some(meta("influence", seed, &[("E", INFLUENCE_TRUE_E)], sigma)),
    }
}

pub fn generate(name: &str, seed: u64) -> Result<Dataset> {
    match name {
        "pedagogical" => Ok(generate_pedagogical(seed)),
        "beam" => Ok(generate_beam(seed)),
        "influence" => Ok(generate_influence(seed)),
        other => Err(Error::Config(format!("unknown generator {other:?}"))),
    }
}

/// Scalar parameter minimizing the trapezoid L² distance between `truth`
/// and the model over `domain`, searched inside `bracket`.
pub fn l2_optimum(
    model: &dyn ForwardModel,
    truth: &dyn Fn(f64) -> f64,
    domain: (f64, f64),
    grid: usize,
    bracket: (f64, f64),
) -> f64 {
    let grid = grid.max(2);
    let h = (domain.1 - domain.0) / (grid - 1) as f64;
    let xs: Vec<f64> = (0..grid).map(|i| domain.0 + h * i as f64).collect();
    let ts: Vec<f64> = xs.iter().map(|&x| truth(x)).collect();
    let mut loss = |theta: f64| {
        let mut acc = 0.0;
        for (i, (&x, &t)) in xs.iter().zip(&ts).enumerate() {
            let Ok(f) = model.eval(&[theta], &[x]) else {
                return f64::INFINITY;
            };
            let w = if i == 0 || i == grid - 1 { 0.5 } else { 1.0 };
            acc += w * (t - f).powi(2);
        }
        acc * h
    };
    scan_then_golden(&mut loss, bracket.0, bracket.1, 201, 1e-12 * (bracket.1 - bracket.0)).0
}

/// Scalar parameter minimizing the mean squared residual over all rows.
pub fn mse_optimum(model: &dyn ForwardModel, data: &Dataset, bracket: (f64, f64)) -> f64 {
    let mut loss = |theta: f64| {
        let mut acc = 0.0;
        for r in &data.rows {
            let Ok(f) = model.eval(&[theta], &r.x) else {
                return f64::INFINITY;
            };
            acc += (r.y - f).powi(2);
        }
        acc / data.len() as f64
    };
    scan_then_golden(&mut loss, bracket.0, bracket.1, 401, 1e-12 * (bracket.1 - bracket.0)).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pedagogical_model_and_truth() {
        assert_eq!(Pedagogical.eval(&[2.0], &[0.5]).unwrap(), 1.0);
        assert!((Pedagogical::truth(1.0) - 3.04108).abs() < 1e-5);
    }

    #[test]
    fn pedagogical_dataset_layout() {
        let d = generate_pedagogical(1);
        assert_eq!(d.len(), 14);
        let xs: Vec<f64> = d.rows.iter().map(|r| r.x[0]).collect();
        assert!((xs[5] - 0.25).abs() < 1e-12);
        assert!((xs[6] - 0.4).abs() < 1e-12);
        assert!((xs[13] - 1.0).abs() < 1e-12);
        assert_eq!(d.sigma_meas, 0.02f64.sqrt());
    }

    #[test]
    fn noiseless_residual_at_four_is_discrepancy() {
        for x in pedagogical_inputs() {
            let r = Pedagogical::truth(x) - Pedagogical.eval(&[4.0], &[x]).unwrap();
            assert!((r - x * (5.0 * x).sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_shape() {
        let b = Beam::default();
        assert_eq!(b.eval(&[30e9], &[0.0]).unwrap(), 0.0);
        let ratio = b.eval(&[30e9], &[50.0]).unwrap() / b.eval(&[30e9], &[25.0]).unwrap();
        assert!((ratio - 3.2).abs() < 1e-12);
        assert!(matches!(b.eval(&[0.0], &[10.0]), Err(Error::Model { .. })));
        assert!(b.eval(&[-1.0], &[10.0]).is_err());
    }

    #[test]
    fn beam_dataset_layout_and_spread() {
        let d = generate_beam(3);
        assert_eq!(d.len(), 100);
        assert_eq!(d.rows.iter().filter(|r| r.x[0] == 50.0).count(), 20);
        // spread of tip deflection across many load draws
        let b = Beam::default();
        let (mu, s) = moment_matched_lognormal(20e3, 6e3);
        let ln = LogNormal::new(mu, s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tips: Vec<f64> = (0..10_000)
            .map(|_| b.deflection(50.0, BEAM_TRUE_E, b.load + ln.sample(&mut rng)))
            .collect();
        let m = tips.iter().sum::<f64>() / tips.len() as f64;
        let sd = (tips.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (tips.len() - 1) as f64).sqrt();
        let want = 6.0 / 120.0 * b.deflection(50.0, BEAM_TRUE_E, 120e3).abs();
        assert!((sd / want - 1.0).abs() < 0.15, "sd {sd} want {want}");
    }

    #[test]
    fn moment_matching() {
        let (mu, s) = moment_matched_lognormal(20e3, 6e3);
        let mean = (mu + s * s / 2.0).exp();
        let sd = mean * ((s * s).exp() - 1.0).sqrt();
        assert!((mean - 20e3).abs() < 1e-6);
        assert!((sd - 6e3).abs() < 1e-6);
    }

    #[test]
    fn influence_shape() {
        let b = InfluenceLine::default();
        let e = 40e9;
        assert_eq!(b.deflection(0.0, e), 0.0);
        assert!(b.deflection(b.span, e).abs() < 1e-18);
        let ratio = b.deflection(b.span / 2.0, e) / b.deflection(b.span / 4.0, e);
        assert!((ratio - 16.0 / 11.0).abs() < 1e-12);
        assert_eq!(b.deflection(104.0, e), 0.0);
        // symmetry
        assert!((b.deflection(20.0, e) - b.deflection(b.span - 20.0, e)).abs() < 1e-15);
    }

    #[test]
    fn influence_end_of_run_is_thermal_only() {
        let d = generate_influence(2);
        assert_eq!(d.len(), 630);
        let b = InfluenceLine::default();
        let ends: Vec<f64> = d.rows.iter().filter(|r| r.x[0] == 104.0).map(|r| r.y).collect();
        assert_eq!(ends.len(), 6);
        for (y, dt) in ends.iter().zip(InfluenceLine::END_DELTA_T) {
            assert!((y - b.thermal(104.0, dt)).abs() < 1e-5);
        }
        assert!(ends.windows(2).all(|w| w[1] > w[0]));
        // thermal term linear in the end temperature difference
        let t: Vec<f64> = InfluenceLine::END_DELTA_T.iter().map(|&dt| b.thermal(104.0, dt)).collect();
        let steps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(steps.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-15));
    }

    #[test]
    fn structural_models_linear_in_compliance() {
        let beam = Beam::default();
        let bridge = InfluenceLine::default();
        for x in [10.0, 20.0, 35.0, 50.0] {
            let a = beam.eval(&[30e9], &[x]).unwrap();
            let b = beam.eval(&[60e9], &[x]).unwrap();
            assert!((a / b - 2.0).abs() < 1e-12);
            let a = bridge.eval(&[30e9], &[x]).unwrap();
            let b = bridge.eval(&[60e9], &[x]).unwrap();
            assert!((a / b - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        for name in ["pedagogical", "beam", "influence"] {
            assert_eq!(generate(name, 9).unwrap(), generate(name, 9).unwrap());
            assert_ne!(generate(name, 9).unwrap(), generate(name, 10).unwrap());
        }
    }

    #[test]
    fn l2_optimum_closed_form() {
        // 4 + 3 * int_0^1 x^2 sin 5x dx
        let n = 200_000;
        let h = 1.0 / n as f64;
        let integral: f64 = (0..=n)
            .map(|i| {
                let x = i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * x * x * (5.0 * x).sin()
            })
            .sum::<f64>()
            * h;
        let closed = 4.0 + 3.0 * integral;
        let got = l2_optimum(&Pedagogical, &Pedagogical::truth, (0.0, 1.0), 2001, (0.0, 8.0));
        assert!((got - closed).abs() < 1e-4, "{got} vs {closed}");
        assert!((got - 3.565).abs() < 0.005);
    }

    #[test]
    fn mse_optimum_on_noiseless_grid() {
        let xs = pedagogical_inputs();
        let d = Dataset::new(
            xs.iter()
                .map(|&x| Observation {
                    series_id: 0,
                    x: vec![x],
                    eta: None,
                    y: Pedagogical::truth(x),
                })
                .collect(),
            0.0,
        )
        .unwrap();
        let got = mse_optimum(&Pedagogical, &d, (0.0, 8.0));
        // closed form for a linear model: sum x y / sum x^2
        let num: f64 = xs.iter().map(|x| x * Pedagogical::truth(*x)).sum();
        let den: f64 = xs.iter().map(|x| x * x).sum();
        assert!((got - num / den).abs() < 1e-8);
        assert!((got - 3.34).abs() < 0.03);
    }

    #[test]
    fn model_equal_to_truth_recovers_parameter() {
        let truth = |x: f64| 2.75 * x;
        let got = l2_optimum(&Pedagogical, &truth, (0.0, 1.0), 101, (0.0, 8.0));
        assert!((got - 2.75).abs() < 1e-8);
    }

    #[test]
    fn csv_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        for d in [generate_beam(4), generate_influence(4)] {
            let p = dir.path().join("d.csv");
            d.write_csv(&p).unwrap();
            let back = Dataset::read_csv(&p).unwrap();
            assert_eq!(back, d);
        }
    }

    #[test]
    fn csv_requires_header_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "series_id,x\n0,1.0\n").unwrap();
        assert!(matches!(Dataset::read_csv(&p), Err(Error::Dataset(_))));
    }

    proptest! {
        #[test]
        fn influence_nonnegative_and_bounded(a in -10.0f64..110.0) {
            let b = InfluenceLine::default();
            let d = b.deflection(a, 40e9);
            let peak = b.deflection(b.span / 2.0, 40e9);
            prop_assert!(d >= 0.0 && d <= peak * (1.0 + 1e-12));
        }
    }
}
