//! Covariance functions for the bias Gaussian process.
//!
//! A [`KernelSpec`] is an immutable expression tree of elementary kernels.
//! Regression kernels (constant, Matérn 3/2, RBF) depend on coordinates only.
//! Noise kernels (white noise, heteroscedastic) are non-zero only between a
//! point and *itself*: two [`Point`]s are the same when both the coordinates
//! and the record id agree, so repeated measurements at one location each get
//! their own diagonal entry without leaking into the off-diagonal.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a hyperparameter is exposed to the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    /// Optimized as `ln(value)`; value must stay positive.
    Log,
    /// Optimized in natural units.
    Identity,
}

impl Transform {
    pub fn forward(self, v: f64) -> f64 {
        match self {
            Transform::Log => v.ln(),
            Transform::Identity => v,
        }
    }

    pub fn inverse(self, z: f64) -> f64 {
        match self {
            Transform::Log => z.exp(),
            Transform::Identity => z,
        }
    }
}

/// Log-normal hyperprior on a positive hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogNormalHyperprior {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormalHyperprior {
    pub fn log_density(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let z = (v.ln() - self.mu) / self.sigma;
        -v.ln() - self.sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z
    }
}

/// A scalar hyperparameter with an optional free flag and search box.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyper {
    pub value: f64,
    pub free: bool,
    /// Natural-unit search box; required when `free`.
    pub bounds: Option<(f64, f64)>,
    pub prior: Option<LogNormalHyperprior>,
}

impl Hyper {
    pub fn fixed(value: f64) -> Self {
        Hyper {
            value,
            free: false,
            bounds: None,
            prior: None,
        }
    }

    pub fn free(value: f64, lo: f64, hi: f64) -> Self {
        Hyper {
            value,
            free: true,
            bounds: Some((lo, hi)),
            prior: None,
        }
    }

    pub fn with_prior(mut self, prior: LogNormalHyperprior) -> Self {
        self.prior = Some(prior);
        self
    }

    fn validate(&self, name: &str, transform: Transform, strictly_positive: bool) -> Result<()> {
        let bad = |reason: String| {
            Err(Error::InvalidHyperparameter {
                name: name.to_string(),
                reason,
            })
        };
        if !self.value.is_finite() {
            return bad(format!("value {} is not finite", self.value));
        }
        if strictly_positive && self.value <= 0.0 {
            return bad(format!("value {} must be > 0", self.value));
        }
        if !strictly_positive && transform == Transform::Log && self.value < 0.0 {
            return bad(format!("value {} must be >= 0", self.value));
        }
        if self.free {
            let Some((lo, hi)) = self.bounds else {
                return bad("free hyperparameter without bounds".into());
            };
            if !(lo < hi) {
                return bad(format!("bounds ({lo}, {hi}) need lo < hi"));
            }
            if !(lo <= self.value && self.value <= hi) {
                return bad(format!("value {} outside bounds ({lo}, {hi})", self.value));
            }
            if transform == Transform::Log && lo <= 0.0 {
                return bad(format!("log-scaled bounds must be positive, got ({lo}, {hi})"));
            }
        }
        Ok(())
    }
}

/// One coordinate record: coordinates plus the dataset row it came from.
///
/// Query points carry `record: None`.
#[derive(Clone, Copy, Debug)]
pub struct Point<'a> {
    pub coords: &'a [f64],
    pub record: Option<usize>,
}

impl<'a> Point<'a> {
    pub fn new(coords: &'a [f64]) -> Self {
        Point {
            coords,
            record: None,
        }
    }

    fn same_record(&self, other: &Point<'_>) -> bool {
        self.record == other.record && self.coords == other.coords
    }
}

/// A list of coordinate records of equal dimension, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    dim: usize,
    coords: Vec<f64>,
    records: Vec<Option<usize>>,
}

impl Inputs {
    /// Training inputs: record id `i` is attached to row `i`.
    pub fn records(dim: usize, coords: Vec<f64>) -> Self {
        assert!(dim > 0 && coords.len() % dim == 0, "ragged coordinate buffer");
        let n = coords.len() / dim;
        Inputs {
            dim,
            coords,
            records: (0..n).map(Some).collect(),
        }
    }

    /// Query inputs without record identity.
    pub fn query(dim: usize, coords: Vec<f64>) -> Self {
        assert!(dim > 0 && coords.len() % dim == 0, "ragged coordinate buffer");
        let n = coords.len() / dim;
        Inputs {
            dim,
            coords,
            records: vec![None; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], as_records: bool) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptyInputs("Inputs"))?;
        let mut coords = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    node: "Inputs",
                    expected: dim,
                    found: r.len(),
                });
            }
            coords.extend_from_slice(r);
        }
        Ok(if as_records {
            Inputs::records(dim, coords)
        } else {
            Inputs::query(dim, coords)
        })
    }

    pub fn scalars(xs: &[f64], as_records: bool) -> Self {
        if as_records {
            Inputs::records(1, xs.to_vec())
        } else {
            Inputs::query(1, xs.to_vec())
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point(&self, i: usize) -> Point<'_> {
        Point {
            coords: self.row(i),
            record: self.records[i],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks(self.dim)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// Reorders rows (and their record ids).
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut coords = Vec::with_capacity(self.coords.len());
        let mut records = Vec::with_capacity(order.len());
        for &i in order {
            coords.extend_from_slice(self.row(i));
            records.push(self.records[i]);
        }
        Inputs {
            dim: self.dim,
            coords,
            records,
        }
    }

    /// Distinct coordinate rows in first-seen order.
    pub fn unique_rows(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for r in self.rows() {
            if !out.iter().any(|u| u.as_slice() == r) {
                out.push(r.to_vec());
            }
        }
        out
    }
}

/// Heteroscedastic noise: per-anchor log-variances, kernel-regressed in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Heteroscedastic {
    pub anchors: Vec<Vec<f64>>,
    pub log_variances: Vec<Hyper>,
    pub bandwidth: Hyper,
}

impl Heteroscedastic {
    /// Noise variance at `x`: the anchor's variance on an anchor, otherwise a
    /// Nadaraya–Watson average with squared-exponential weights.
    pub fn variance_at(&self, x: &[f64]) -> f64 {
        if let Some(i) = self.anchors.iter().position(|a| a.as_slice() == x) {
            return self.log_variances[i].value.exp();
        }
        let d2: Vec<f64> = self.anchors.iter().map(|a| sq_dist(a, x)).collect();
        let d2_min = d2.iter().cloned().fold(f64::INFINITY, f64::min);
        let h2 = 2.0 * self.bandwidth.value * self.bandwidth.value;
        let (mut num, mut den) = (0.0, 0.0);
        for (lv, d) in self.log_variances.iter().zip(&d2) {
            let w = (-(d - d2_min) / h2).exp();
            num += w * lv.value.exp();
            den += w;
        }
        num / den
    }

    /// Mean nearest-neighbour distance between anchors.
    pub fn default_bandwidth(anchors: &[Vec<f64>]) -> f64 {
        if anchors.len() < 2 {
            return 1.0;
        }
        let total: f64 = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| {
                anchors
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, b)| sq_dist(a, b).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / anchors.len() as f64
    }
}

/// Covariance function expression tree.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    Constant(Hyper),
    Matern32 { amplitude: Hyper, lengthscale: Hyper },
    Rbf { amplitude: Hyper, lengthscale: Hyper },
    WhiteNoise(Hyper),
    Heteroscedastic(Heteroscedastic),
    Sum(Box<KernelSpec>, Box<KernelSpec>),
    Product(Box<KernelSpec>, Box<KernelSpec>),
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KernelSpec {
    pub fn matern32(amplitude: Hyper, lengthscale: Hyper) -> Self {
        KernelSpec::Matern32 {
            amplitude,
            lengthscale,
        }
    }

    pub fn rbf(amplitude: Hyper, lengthscale: Hyper) -> Self {
        KernelSpec::Rbf {
            amplitude,
            lengthscale,
        }
    }

    pub fn sum(a: KernelSpec, b: KernelSpec) -> Self {
        KernelSpec::Sum(Box::new(a), Box::new(b))
    }

    pub fn product(a: KernelSpec, b: KernelSpec) -> Self {
        KernelSpec::Product(Box::new(a), Box::new(b))
    }

    pub fn node_name(&self) -> &'static str {
        match self {
            KernelSpec::Constant(_) => "Constant",
            KernelSpec::Matern32 { .. } => "Matern32",
            KernelSpec::Rbf { .. } => "Rbf",
            KernelSpec::WhiteNoise(_) => "WhiteNoise",
            KernelSpec::Heteroscedastic(_) => "Heteroscedastic",
            KernelSpec::Sum(..) => "Sum",
            KernelSpec::Product(..) => "Product",
        }
    }

    /// Input dimension required by the spec, if any node pins one.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::Heteroscedastic(h) => h.anchors.first().map(Vec::len),
            KernelSpec::Sum(a, b) | KernelSpec::Product(a, b) => a.input_dim().or(b.input_dim()),
            _ => None,
        }
    }

    /// True when the tree contains a noise kernel anywhere.
    pub fn contains_noise(&self) -> bool {
        match self {
            KernelSpec::WhiteNoise(_) | KernelSpec::Heteroscedastic(_) => true,
            KernelSpec::Sum(a, b) | KernelSpec::Product(a, b) => {
                a.contains_noise() || b.contains_noise()
            }
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Constant(c) => c.validate("constant", Transform::Log, true),
            KernelSpec::Matern32 {
                amplitude,
                lengthscale,
            } => {
                amplitude.validate("matern32.amplitude", Transform::Log, true)?;
                lengthscale.validate("matern32.lengthscale", Transform::Log, true)
            }
            KernelSpec::Rbf {
                amplitude,
                lengthscale,
            } => {
                amplitude.validate("rbf.amplitude", Transform::Log, true)?;
                lengthscale.validate("rbf.lengthscale", Transform::Log, true)
            }
            KernelSpec::WhiteNoise(v) => v.validate("white_noise.variance", Transform::Log, false),
            KernelSpec::Heteroscedastic(h) => {
                h.bandwidth
                    .validate("heteroscedastic.bandwidth", Transform::Log, true)?;
                if h.anchors.is_empty() {
                    return Err(Error::EmptyInputs("Heteroscedastic anchors"));
                }
                if h.anchors.len() != h.log_variances.len() {
                    return Err(Error::InvalidHyperparameter {
                        name: "heteroscedastic.log_variances".into(),
                        reason: format!(
                            "{} anchors but {} log-variances",
                            h.anchors.len(),
                            h.log_variances.len()
                        ),
                    });
                }
                let dim = h.anchors[0].len();
                for (i, a) in h.anchors.iter().enumerate() {
                    if a.len() != dim {
                        return Err(Error::DimensionMismatch {
                            node: "Heteroscedastic",
                            expected: dim,
                            found: a.len(),
                        });
                    }
                    if h.anchors[..i].iter().any(|b| b == a) {
                        return Err(Error::InvalidHyperparameter {
                            name: "heteroscedastic.anchors".into(),
                            reason: format!("duplicate anchor {a:?}"),
                        });
                    }
                }
                for lv in &h.log_variances {
                    lv.validate("heteroscedastic.log_variance", Transform::Identity, false)?;
                }
                Ok(())
            }
            KernelSpec::Sum(a, b) | KernelSpec::Product(a, b) => {
                a.validate()?;
                b.validate()
            }
        }
    }

    fn eval_unchecked(&self, a: &Point<'_>, b: &Point<'_>) -> f64 {
        match self {
            KernelSpec::Constant(c) => c.value,
            KernelSpec::Matern32 {
                amplitude,
                lengthscale,
            } => {
                let s = 3f64.sqrt() * sq_dist(a.coords, b.coords).sqrt() / lengthscale.value;
                amplitude.value * amplitude.value * (1.0 + s) * (-s).exp()
            }
            KernelSpec::Rbf {
                amplitude,
                lengthscale,
            } => {
                let l = lengthscale.value;
                amplitude.value
                    * amplitude.value
                    * (-0.5 * sq_dist(a.coords, b.coords) / (l * l)).exp()
            }
            KernelSpec::WhiteNoise(v) => {
                if a.same_record(b) {
                    v.value
                } else {
                    0.0
                }
            }
            KernelSpec::Heteroscedastic(h) => {
                if a.same_record(b) {
                    h.variance_at(a.coords)
                } else {
                    0.0
                }
            }
            KernelSpec::Sum(l, r) => l.eval_unchecked(a, b) + r.eval_unchecked(a, b),
            KernelSpec::Product(l, r) => l.eval_unchecked(a, b) * r.eval_unchecked(a, b),
        }
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        match self {
            KernelSpec::Heteroscedastic(h) => match h.anchors.first() {
                Some(a) if a.len() != found => Err(Error::DimensionMismatch {
                    node: "Heteroscedastic",
                    expected: a.len(),
                    found,
                }),
                _ => Ok(()),
            },
            KernelSpec::Sum(a, b) | KernelSpec::Product(a, b) => {
                a.check_dim(found)?;
                b.check_dim(found)
            }
            _ => Ok(()),
        }
    }

    /// Collects every hyperparameter in a fixed depth-first order.
    pub fn hypers(&self) -> Vec<(String, &Hyper, Transform)> {
        let mut out = Vec::new();
        self.collect(&mut out, "");
        out
    }

    fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Hyper, Transform)>, prefix: &str) {
        match self {
            KernelSpec::Constant(c) => out.push((format!("{prefix}constant"), c, Transform::Log)),
            KernelSpec::Matern32 {
                amplitude,
                lengthscale,
            } => {
                out.push((format!("{prefix}matern32.amplitude"), amplitude, Transform::Log));
                out.push((format!("{prefix}matern32.lengthscale"), lengthscale, Transform::Log));
            }
            KernelSpec::Rbf {
                amplitude,
                lengthscale,
            } => {
                out.push((format!("{prefix}rbf.amplitude"), amplitude, Transform::Log));
                out.push((format!("{prefix}rbf.lengthscale"), lengthscale, Transform::Log));
            }
            KernelSpec::WhiteNoise(v) => {
                out.push((format!("{prefix}white_noise.variance"), v, Transform::Log))
            }
            KernelSpec::Heteroscedastic(h) => {
                for (i, lv) in h.log_variances.iter().enumerate() {
                    out.push((
                        format!("{prefix}heteroscedastic.log_variance[{i}]"),
                        lv,
                        Transform::Identity,
                    ));
                }
                out.push((
                    format!("{prefix}heteroscedastic.bandwidth"),
                    &h.bandwidth,
                    Transform::Log,
                ));
            }
            KernelSpec::Sum(a, b) | KernelSpec::Product(a, b) => {
                a.collect(out, prefix);
                b.collect(out, prefix);
            }
        }
    }

    /// Visits every hyperparameter mutably, in the same order as [`hypers`](Self::hypers).
    pub fn for_each_hyper_mut(&mut self, f: &mut dyn FnMut(&mut Hyper, Transform)) {
        match self {
            KernelSpec::Constant(c) => f(c, Transform::Log),
            KernelSpec::Matern32 {
                amplitude,
                lengthscale,
            }
            | KernelSpec::Rbf {
                amplitude,
                lengthscale,
            } => {
                f(amplitude, Transform::Log);
                f(lengthscale, Transform::Log);
            }
            KernelSpec::WhiteNoise(v) => f(v, Transform::Log),
            KernelSpec::Heteroscedastic(h) => {
                for lv in &mut h.log_variances {
                    f(lv, Transform::Identity);
                }
                f(&mut h.bandwidth, Transform::Log);
            }
            KernelSpec::Sum(a, b) | KernelSpec::Product(a, b) => {
                a.for_each_hyper_mut(f);
                b.for_each_hyper_mut(f);
            }
        }
    }

    fn has_free(&self) -> bool {
        self.hypers().iter().any(|(_, h, _)| h.free)
    }

    /// Splits the top-level sum into the regression part and the noise part.
    ///
    /// Any summand that contains a noise kernel is diagonal-only and goes to
    /// the noise side.
    pub fn split_noise(&self) -> (Option<KernelSpec>, Option<KernelSpec>) {
        let mut terms = Vec::new();
        flatten_sum(self, &mut terms);
        let (noise, base): (Vec<_>, Vec<_>) = terms.into_iter().partition(|t| t.contains_noise());
        (rebuild_sum(base), rebuild_sum(noise))
    }

    /// If the spec is `a * unit` with `a` its only free hyperparameter,
    /// returns the unit-scale kernel and how `a` relates to the free value.
    pub(crate) fn amplitude_split(&self) -> Option<(AmplitudeKind, KernelSpec)> {
        match self {
            KernelSpec::Constant(c) if c.free => {
                Some((AmplitudeKind::Linear, KernelSpec::Constant(Hyper::fixed(1.0))))
            }
            KernelSpec::Matern32 {
                amplitude,
                lengthscale,
            } if amplitude.free && !lengthscale.free => Some((
                AmplitudeKind::Squared,
                KernelSpec::matern32(Hyper::fixed(1.0), lengthscale.clone()),
            )),
            KernelSpec::Rbf {
                amplitude,
                lengthscale,
            } if amplitude.free && !lengthscale.free => Some((
                AmplitudeKind::Squared,
                KernelSpec::rbf(Hyper::fixed(1.0), lengthscale.clone()),
            )),
            KernelSpec::Product(a, b) => {
                if !b.has_free() {
                    a.amplitude_split()
                        .map(|(k, ua)| (k, KernelSpec::product(ua, (**b).clone())))
                } else if !a.has_free() {
                    b.amplitude_split()
                        .map(|(k, ub)| (k, KernelSpec::product((**a).clone(), ub)))
                } else {
                    None
                }
            }
            _ => None,
        }
    }
}

/// How a single free scale hyperparameter enters the covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum AmplitudeKind {
    /// covariance = value * unit
    Linear,
    /// covariance = value^2 * unit
    Squared,
}

fn flatten_sum<'a>(k: &'a KernelSpec, out: &mut Vec<&'a KernelSpec>) {
    match k {
        KernelSpec::Sum(a, b) => {
            flatten_sum(a, out);
            flatten_sum(b, out);
        }
        other => out.push(other),
    }
}

fn rebuild_sum(terms: Vec<&KernelSpec>) -> Option<KernelSpec> {
    terms
        .into_iter()
        .cloned()
        .reduce(KernelSpec::sum)
}

/// Evaluates `k(x, x')`.
pub fn eval_kernel(spec: &KernelSpec, x: Point<'_>, x_prime: Point<'_>) -> Result<f64> {
    if x.coords.len() != x_prime.coords.len() {
        return Err(Error::DimensionMismatch {
            node: spec.node_name(),
            expected: x.coords.len(),
            found: x_prime.coords.len(),
        });
    }
    spec.check_dim(x.coords.len())?;
    Ok(spec.eval_unchecked(&x, &x_prime))
}

/// Dense covariance between two coordinate lists.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    pub rows: Inputs,
    pub cols: Inputs,
    /// Non-fatal numerical warnings raised while assembling the matrix.
    pub warnings: Vec<String>,
}

impl GramMatrix {
    pub fn is_square_on_same_inputs(&self) -> bool {
        self.rows == self.cols
    }
}

pub(crate) fn gram_entries(spec: &KernelSpec, xs: &Inputs, ys: &Inputs) -> Result<DMatrix<f64>> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::EmptyInputs("gram"));
    }
    if xs.dim() != ys.dim() {
        return Err(Error::DimensionMismatch {
            node: spec.node_name(),
            expected: xs.dim(),
            found: ys.dim(),
        });
    }
    spec.check_dim(xs.dim())?;
    let same = xs == ys;
    let mut m = DMatrix::zeros(xs.len(), ys.len());
    for i in 0..xs.len() {
        let a = xs.point(i);
        let start = if same { i } else { 0 };
        for j in start..ys.len() {
            let v = spec.eval_unchecked(&a, &ys.point(j));
            m[(i, j)] = v;
            if same {
                m[(j, i)] = v;
            }
        }
    }
    Ok(m)
}

/// Gram matrix `K[i][j] = k(X[i], X'[j])`.
pub fn gram(spec: &KernelSpec, xs: &Inputs, ys: &Inputs) -> Result<GramMatrix> {
    let entries = gram_entries(spec, xs, ys)?;
    Ok(GramMatrix {
        entries,
        rows: xs.clone(),
        cols: ys.clone(),
        warnings: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Configuration-file form
// ---------------------------------------------------------------------------

/// Hyperparameter as written in a config file: a bare number is fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamExpr {
    Fixed(f64),
    Spec {
        value: f64,
        #[serde(default)]
        free: bool,
        #[serde(default)]
        bounds: Option<[f64; 2]>,
        #[serde(default)]
        prior: Option<HyperpriorExpr>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HyperpriorExpr {
    LogNormal([f64; 2]),
}

impl ParamExpr {
    pub fn free(value: f64, lo: f64, hi: f64) -> Self {
        ParamExpr::Spec {
            value,
            free: true,
            bounds: Some([lo, hi]),
            prior: None,
        }
    }

    pub fn to_hyper(&self) -> Hyper {
        match self {
            ParamExpr::Fixed(v) => Hyper::fixed(*v),
            ParamExpr::Spec {
                value,
                free,
                bounds,
                prior,
            } => Hyper {
                value: *value,
                free: *free,
                bounds: bounds.map(|[lo, hi]| (lo, hi)),
                prior: prior.as_ref().map(|HyperpriorExpr::LogNormal([mu, sigma])| {
                    LogNormalHyperprior {
                        mu: *mu,
                        sigma: *sigma,
                    }
                }),
            },
        }
    }
}

/// A single coordinate: scalar shorthand for 1-D inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoordExpr {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl CoordExpr {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            CoordExpr::Scalar(v) => vec![*v],
            CoordExpr::Vector(v) => v.clone(),
        }
    }
}

/// Anchor locations in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnchorsExpr {
    /// `"training"`: the distinct training inputs.
    Named(String),
    /// `{ linspace = [lo, hi, n] }` over a 1-D input.
    Linspace { linspace: (f64, f64, usize) },
    Points(Vec<CoordExpr>),
}

impl Default for AnchorsExpr {
    fn default() -> Self {
        AnchorsExpr::Named("training".into())
    }
}

impl AnchorsExpr {
    /// Anchors in raw (unscaled) units, or `None` for "training".
    pub fn explicit(&self) -> Result<Option<Vec<Vec<f64>>>> {
        match self {
            AnchorsExpr::Named(n) if n == "training" => Ok(None),
            AnchorsExpr::Named(n) => Err(Error::Config(format!("unknown anchor set {n:?}"))),
            AnchorsExpr::Linspace {
                linspace: (lo, hi, n),
            } => {
                if *n < 2 {
                    return Err(Error::Config("linspace needs at least 2 points".into()));
                }
                let step = (hi - lo) / (*n as f64 - 1.0);
                Ok(Some((0..*n).map(|i| vec![lo + step * i as f64]).collect()))
            }
            AnchorsExpr::Points(p) => Ok(Some(p.iter().map(CoordExpr::to_vec).collect())),
        }
    }
}

/// Kernel expression tree as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelExpr {
    Constant(ParamExpr),
    Matern32 {
        amplitude: ParamExpr,
        lengthscale: ParamExpr,
    },
    Rbf {
        amplitude: ParamExpr,
        lengthscale: ParamExpr,
    },
    WhiteNoise {
        variance: ParamExpr,
    },
    Heteroscedastic {
        #[serde(default)]
        anchors: AnchorsExpr,
        /// Initial log-variance and bounds, shared by every anchor.
        log_variance: ParamExpr,
        #[serde(default)]
        bandwidth: Option<ParamExpr>,
    },
    Sum(Vec<KernelExpr>),
    Product(Vec<KernelExpr>),
}

/// What a [`KernelExpr`] needs to become a concrete [`KernelSpec`].
pub struct ResolveContext<'a> {
    /// Distinct training inputs, already in kernel (scaled) coordinates.
    pub training_anchors: &'a [Vec<f64>],
    /// Maps a raw coordinate into kernel coordinates.
    pub scale: &'a dyn Fn(&[f64]) -> Vec<f64>,
}

impl KernelExpr {
    pub fn resolve(&self, ctx: &ResolveContext<'_>) -> Result<KernelSpec> {
        let spec = match self {
            KernelExpr::Constant(c) => KernelSpec::Constant(c.to_hyper()),
            KernelExpr::Matern32 {
                amplitude,
                lengthscale,
            } => KernelSpec::matern32(amplitude.to_hyper(), lengthscale.to_hyper()),
            KernelExpr::Rbf {
                amplitude,
                lengthscale,
            } => KernelSpec::rbf(amplitude.to_hyper(), lengthscale.to_hyper()),
            KernelExpr::WhiteNoise { variance } => KernelSpec::WhiteNoise(variance.to_hyper()),
            KernelExpr::Heteroscedastic {
                anchors,
                log_variance,
                bandwidth,
            } => {
                let anchors = match anchors.explicit()? {
                    None => ctx.training_anchors.to_vec(),
                    Some(raw) => raw.iter().map(|a| (ctx.scale)(a)).collect(),
                };
                let bandwidth = bandwidth
                    .as_ref()
                    .map(ParamExpr::to_hyper)
                    .unwrap_or_else(|| Hyper::fixed(Heteroscedastic::default_bandwidth(&anchors)));
                let lv = log_variance.to_hyper();
                KernelSpec::Heteroscedastic(Heteroscedastic {
                    log_variances: vec![lv; anchors.len()],
                    anchors,
                    bandwidth,
                })
            }
            KernelExpr::Sum(terms) => fold(terms, ctx, KernelSpec::sum)?,
            KernelExpr::Product(terms) => fold(terms, ctx, KernelSpec::product)?,
        };
        Ok(spec)
    }
}

fn fold(
    terms: &[KernelExpr],
    ctx: &ResolveContext<'_>,
    join: fn(KernelSpec, KernelSpec) -> KernelSpec,
) -> Result<KernelSpec> {
    let mut it = terms.iter();
    let first = it
        .next()
        .ok_or_else(|| Error::Config("empty sum/product in kernel expression".into()))?
        .resolve(ctx)?;
    it.try_fold(first, |acc, t| Ok(join(acc, t.resolve(ctx)?)))
}
