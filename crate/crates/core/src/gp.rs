//! Gaussian-process bias model: marginal likelihood, MAP fit and prediction.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernels::{eval_kernel, gram_entries, AmplitudeKind, Hyper, Inputs, KernelSpec, Transform};
use crate::ogp::{orthogonal_entries, SensitivityMatrix, PINV_CUTOFF};
use crate::optimize::{halton, scan_then_golden, NelderMead};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Specification of the bias GP `b ~ GP(mu_b, C_b)`.
#[derive(Clone, Debug)]
pub struct BiasModel {
    /// Constant prior mean; optimized in natural units when free.
    pub mean: Hyper,
    pub kernel: KernelSpec,
    /// Use the orthogonal covariance; requires `anchors` and `sensitivity`.
    pub orthogonal: bool,
    /// Anchor coordinates in kernel input space.
    pub anchors: Vec<Vec<f64>>,
    /// Central-difference steps per model parameter; empty uses a relative default.
    pub fd_steps: Vec<f64>,
    /// Model sensitivities at the anchors for the current parameter point.
    pub sensitivity: Option<SensitivityMatrix>,
    /// Diagonal stabilizer tried before the jitter ladder.
    pub jitter: f64,
    /// Prescribed measurement-noise standard deviation.
    pub noise_sd: f64,
    /// Quasi-random optimizer restarts in addition to the initial point.
    pub restarts: usize,
}

impl BiasModel {
    pub fn new(kernel: KernelSpec) -> Self {
        BiasModel {
            mean: Hyper::fixed(0.0),
            kernel,
            orthogonal: false,
            anchors: Vec::new(),
            fd_steps: Vec::new(),
            sensitivity: None,
            jitter: 0.0,
            noise_sd: 0.0,
            restarts: 4,
        }
    }

    pub fn with_noise_sd(mut self, noise_sd: f64) -> Self {
        self.noise_sd = noise_sd;
        self
    }

    pub fn with_anchors(mut self, anchors: Vec<Vec<f64>>) -> Self {
        self.orthogonal = true;
        self.anchors = anchors;
        self
    }

    /// Finite-difference steps at `theta`.
    pub fn steps_at(&self, theta: &[f64]) -> Vec<f64> {
        if self.fd_steps.is_empty() {
            theta.iter().map(|t| 1e-4 * t.abs().max(1.0)).collect()
        } else {
            self.fd_steps.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !self.mean.value.is_finite() {
            return Err(Error::InvalidHyperparameter {
                name: "mean".into(),
                reason: "not finite".into(),
            });
        }
        if self.mean.free {
            match self.mean.bounds {
                Some((lo, hi)) if lo < hi && (lo..=hi).contains(&self.mean.value) => {}
                _ => {
                    return Err(Error::InvalidHyperparameter {
                        name: "mean".into(),
                        reason: "free mean needs bounds lo < value < hi".into(),
                    })
                }
            }
        }
        if !(self.jitter >= 0.0) || !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidHyperparameter {
                name: "jitter/noise_sd".into(),
                reason: format!("need jitter >= 0 and noise_sd >= 0, got {} and {}", self.jitter, self.noise_sd),
            });
        }
        if self.orthogonal && self.anchors.is_empty() {
            return Err(Error::Config("orthogonal bias requires non-empty anchors".into()));
        }
        Ok(())
    }

    /// All hyperparameter values, mean first, for error reports.
    pub fn hyper_values(&self) -> Vec<f64> {
        std::iter::once(self.mean.value)
            .chain(self.kernel.hypers().into_iter().map(|(_, h, _)| h.value))
            .collect()
    }

    /// Free hyperparameters as `(transform, box)` in optimizer space, plus
    /// the current point.
    fn free_space(&self) -> (Vec<Transform>, Vec<(f64, f64)>, Vec<f64>) {
        let mut t = Vec::new();
        let mut b = Vec::new();
        let mut z = Vec::new();
        let mut push = |h: &Hyper, tr: Transform| {
            if h.free {
                let (lo, hi) = h.bounds.expect("validated");
                t.push(tr);
                b.push((tr.forward(lo), tr.forward(hi)));
                z.push(tr.forward(h.value));
            }
        };
        push(&self.mean, Transform::Identity);
        for (_, h, tr) in self.kernel.hypers() {
            push(h, tr);
        }
        (t, b, z)
    }

    fn set_free(&mut self, z: &[f64]) {
        let mut it = z.iter();
        if self.mean.free {
            self.mean.value = *it.next().expect("free vector length");
        }
        self.kernel.for_each_hyper_mut(&mut |h, tr| {
            if h.free {
                h.value = tr.inverse(*it.next().expect("free vector length"));
            }
        });
    }

    fn log_hyperprior(&self) -> f64 {
        let mut lp = 0.0;
        if let Some(p) = &self.mean.prior {
            lp += p.log_density(self.mean.value);
        }
        for (_, h, _) in self.kernel.hypers() {
            if let Some(p) = &h.prior {
                lp += p.log_density(h.value);
            }
        }
        lp
    }

    fn sensitivity(&self) -> Result<Option<&SensitivityMatrix>> {
        if !self.orthogonal {
            return Ok(None);
        }
        self.sensitivity
            .as_ref()
            .map(Some)
            .ok_or_else(|| Error::Config("orthogonal bias evaluated without sensitivities".into()))
    }

    /// Noise-free covariance between two input sets, orthogonalized if requested.
    fn signal_cov(&self, base: &KernelSpec, xs: &Inputs, ys: &Inputs) -> Result<(DMatrix<f64>, Option<String>)> {
        match self.sensitivity()? {
            Some(sens) => {
                let anchors = Inputs::from_rows(&self.anchors, false)?;
                orthogonal_entries(base, sens, &anchors, xs, ys)
            }
            None => Ok((gram_entries(base, xs, ys)?, None)),
        }
    }

    /// Full covariance `k(X, X')` including noise kernels but not `noise_sd`.
    fn cov(&self, xs: &Inputs, ys: &Inputs) -> Result<(DMatrix<f64>, Option<String>)> {
        let (base, noise) = self.kernel.split_noise();
        let (mut k, warning) = match &base {
            Some(b) => self.signal_cov(b, xs, ys)?,
            None => (DMatrix::zeros(xs.len(), ys.len()), None),
        };
        if let Some(n) = &noise {
            k += gram_entries(n, xs, ys)?;
        }
        Ok((k, warning))
    }

    /// Training covariance `C_b + sigma_n^2 I` (without jitter).
    fn train_cov(&self, x: &Inputs) -> Result<(DMatrix<f64>, Option<String>)> {
        let (mut k, w) = self.cov(x, x)?;
        let s2 = self.noise_sd * self.noise_sd;
        for i in 0..x.len() {
            k[(i, i)] += s2;
        }
        Ok((k, w))
    }
}

/// Cholesky factorization, retrying with a growing diagonal jitter.
fn factorize(k: &DMatrix<f64>, jitter: f64, bias: &BiasModel) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let try_with = |j: f64| {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += j;
        }
        Cholesky::new(m)
    };
    if let Some(c) = try_with(jitter) {
        return Ok((c, jitter));
    }
    let scale = (k.trace() / n as f64).abs();
    let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
    let mut extra = 1e-10 * scale;
    while extra <= 1e-4 * scale * (1.0 + 1e-9) {
        if let Some(c) = try_with(jitter + extra) {
            return Ok((c, jitter + extra));
        }
        extra *= 10.0;
    }
    Err(Error::Factorization {
        hyperparameters: bias.hyper_values(),
        jitter: jitter + extra / 10.0,
    })
}

fn lml_from_cholesky(chol: &Cholesky<f64, Dyn>, rt: &DVector<f64>) -> f64 {
    let l = chol.l_dirty();
    let v = l
        .solve_lower_triangular(rt)
        .expect("Cholesky factor has a positive diagonal");
    let log_det_half: f64 = (0..rt.len()).map(|i| l[(i, i)].ln()).sum();
    -0.5 * v.dot(&v) - log_det_half - 0.5 * rt.len() as f64 * LN_2PI
}

fn centered(bias: &BiasModel, r: &[f64]) -> DVector<f64> {
    DVector::from_iterator(r.len(), r.iter().map(|v| v - bias.mean.value))
}

fn check_lengths(x: &Inputs, r: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptyInputs("log_marginal_likelihood"));
    }
    if x.len() != r.len() {
        return Err(Error::DimensionMismatch {
            node: "residuals",
            expected: x.len(),
            found: r.len(),
        });
    }
    Ok(())
}

/// `log N(r | mu_b 1, C_b + sigma_n^2 I)` via a Cholesky factorization.
pub fn log_marginal_likelihood(bias: &BiasModel, x: &Inputs, r: &[f64]) -> Result<f64> {
    check_lengths(x, r)?;
    let (k, _) = bias.train_cov(x)?;
    let (chol, _) = factorize(&k, bias.jitter, bias)?;
    Ok(lml_from_cholesky(&chol, &centered(bias, r)))
}

/// Training rows sharing coordinates, for covariances `U S Uᵀ + D` where `S`
/// lives on the distinct coordinates and `D` is diagonal.
struct Grouped {
    unique: Inputs,
    index: Vec<usize>,
}

impl Grouped {
    /// Applies when at most half of the rows have distinct coordinates.
    fn new(x: &Inputs) -> Option<Self> {
        let mut seen: std::collections::BTreeMap<Vec<u64>, usize> = Default::default();
        let mut rows = Vec::new();
        let index = x
            .rows()
            .map(|r| {
                let key = r.iter().map(|v| v.to_bits()).collect();
                *seen.entry(key).or_insert_with(|| {
                    rows.push(r.to_vec());
                    rows.len() - 1
                })
            })
            .collect();
        if 2 * rows.len() > x.len() {
            return None;
        }
        let unique = Inputs::from_rows(&rows, false).ok()?;
        Some(Grouped { unique, index })
    }

    /// Log marginal likelihood through the Woodbury identity; `None` when the
    /// diagonal part is not positive.
    fn lml(&self, bias: &BiasModel, x: &Inputs, rt: &DVector<f64>) -> Option<f64> {
        let (base, noise) = bias.kernel.split_noise();
        let n = x.len();
        let m = self.unique.len();
        let mut d = DVector::from_element(n, bias.noise_sd * bias.noise_sd + bias.jitter);
        if let Some(nk) = &noise {
            for i in 0..n {
                d[i] += eval_kernel(nk, x.point(i), x.point(i)).ok()?;
            }
        }
        if d.iter().any(|v| !(*v > 0.0)) {
            return None;
        }
        let mut quad: f64 = rt.iter().zip(d.iter()).map(|(r, d)| r * r / d).sum();
        let mut logdet: f64 = d.iter().map(|v| v.ln()).sum();
        if let Some(b) = &base {
            let (s, _) = bias.signal_cov(b, &self.unique, &self.unique).ok()?;
            let eig = SymmetricEigen::new(s);
            let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
            // Uᵀ D⁻¹ U is diagonal; Uᵀ D⁻¹ r is a per-group sum.
            let mut w = DVector::zeros(m);
            let mut g = DVector::zeros(m);
            for (i, &k) in self.index.iter().enumerate() {
                w[k] += 1.0 / d[i];
                g[k] += rt[i] / d[i];
            }
            let mut inner = root.tr_mul(&DMatrix::from_diagonal(&w)) * &root;
            for k in 0..m {
                inner[(k, k)] += 1.0;
            }
            let chol = Cholesky::new(inner)?;
            let v = chol.l_dirty().solve_lower_triangular(&root.tr_mul(&g))?;
            quad -= v.dot(&v);
            logdet += 2.0 * (0..m).map(|k| chol.l_dirty()[(k, k)].ln()).sum::<f64>();
        }
        Some(-0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * LN_2PI)
    }
}

/// Eigenbasis for covariances of the form `a * M + c I`, or
/// `a * (M - U Uᵀ) + c I` for an orthogonal bias.
///
/// Applies when the only free hyperparameter is one multiplicative amplitude
/// and every noise term has the same fixed value at every training point.
/// `M` does not depend on the model parameters; an orthogonal bias only adds
/// the low-rank term `U`, built from the sensitivities in [`Self::orthogonalized`].
#[derive(Clone, Debug)]
pub struct SpectralBasis {
    q: Arc<DMatrix<f64>>,
    lambda: Arc<DVector<f64>>,
    kind: AmplitudeKind,
    diag: f64,
    /// Unit-amplitude grams over anchors and between anchors and inputs.
    anchor_grams: Option<Arc<(DMatrix<f64>, DMatrix<f64>)>>,
    /// Rotated correction `Qᵀ U`.
    correction: Option<DMatrix<f64>>,
}

impl SpectralBasis {
    pub fn new(bias: &BiasModel, x: &Inputs) -> Result<Option<Self>> {
        let plain = Self::unprojected(bias, x)?;
        match bias.sensitivity()? {
            Some(sens) => Ok(plain.and_then(|p| p.orthogonalized(sens))),
            None => Ok(plain),
        }
    }

    /// Basis of `a * M + c I` ignoring orthogonality; for an orthogonal bias
    /// it also caches what [`Self::orthogonalized`] needs.
    pub(crate) fn unprojected(bias: &BiasModel, x: &Inputs) -> Result<Option<Self>> {
        if bias.mean.free {
            return Ok(None);
        }
        let free = bias.kernel.hypers().iter().filter(|(_, h, _)| h.free).count();
        if free != 1 {
            return Ok(None);
        }
        let (base, noise) = bias.kernel.split_noise();
        let Some(base) = base else { return Ok(None) };
        let Some((kind, unit)) = base.amplitude_split() else {
            return Ok(None);
        };
        let mut diag = bias.noise_sd * bias.noise_sd + bias.jitter;
        if let Some(n) = &noise {
            let d = gram_entries(n, x, x)?.diagonal();
            let first = d[0];
            if d.iter().any(|v| *v != first) {
                return Ok(None);
            }
            diag += first;
        }
        if !(diag > 0.0) {
            return Ok(None);
        }
        let eig = SymmetricEigen::new(gram_entries(&unit, x, x)?);
        let anchor_grams = if bias.orthogonal {
            let anchors = Inputs::from_rows(&bias.anchors, false)?;
            Some(Arc::new((
                gram_entries(&unit, &anchors, &anchors)?,
                gram_entries(&unit, &anchors, x)?,
            )))
        } else {
            None
        };
        Ok(Some(SpectralBasis {
            q: Arc::new(eig.eigenvectors),
            lambda: Arc::new(eig.eigenvalues.map(|l| l.max(0.0))),
            kind,
            diag,
            anchor_grams,
            correction: None,
        }))
    }

    /// Basis for the orthogonal covariance at the given sensitivities; `None`
    /// when the correction nearly cancels a direction of `M` and the dense
    /// path is safer.
    pub(crate) fn orthogonalized(&self, sens: &SensitivityMatrix) -> Option<Self> {
        let grams = self.anchor_grams.as_ref()?;
        let (w, wx) = (&grams.0, &grams.1);
        if sens.f.nrows() != w.nrows() {
            return None;
        }
        let a = sens.f.transpose() * w * &sens.f;
        let a = (&a + a.transpose()) * 0.5;
        let eig = SymmetricEigen::new(a);
        let s_max = eig.eigenvalues.amax();
        let g = wx.transpose() * &sens.f;
        let mut u = DMatrix::zeros(g.nrows(), 0);
        if s_max > 0.0 {
            let keep: Vec<usize> = (0..eig.eigenvalues.len())
                .filter(|&k| eig.eigenvalues[k] > PINV_CUTOFF * s_max)
                .collect();
            u = DMatrix::from_fn(g.nrows(), keep.len(), |i, j| {
                let k = keep[j];
                g.row(i).dot(&eig.eigenvectors.column(k).transpose()) / eig.eigenvalues[k].sqrt()
            });
        }
        let ut = self.q.tr_mul(&u);
        // Largest a * Ũᵀ D⁻¹ Ũ over all amplitudes.
        let ceiling = DMatrix::from_fn(ut.ncols(), ut.ncols(), |i, j| {
            (0..ut.nrows())
                .filter(|&k| self.lambda[k] > 1e-12 * self.lambda.amax())
                .map(|k| ut[(k, i)] * ut[(k, j)] / self.lambda[k])
                .sum::<f64>()
        });
        if ut.ncols() > 0 && SymmetricEigen::new(ceiling).eigenvalues.amax() > 1.0 - 1e-6 {
            return None;
        }
        Some(SpectralBasis {
            correction: Some(ut),
            ..self.clone()
        })
    }

    fn project(&self, rt: &DVector<f64>) -> DVector<f64> {
        self.q.tr_mul(rt)
    }

    fn lml(&self, z: f64, rho: &DVector<f64>) -> f64 {
        let a = match self.kind {
            AmplitudeKind::Linear => z.exp(),
            AmplitudeKind::Squared => (2.0 * z).exp(),
        };
        let d = self.lambda.map(|l| a * l + self.diag);
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for (dk, p) in d.iter().zip(rho.iter()) {
            quad += p * p / dk;
            logdet += dk.ln();
        }
        if let Some(ut) = &self.correction {
            let r = ut.ncols();
            let dinv_rho = rho.component_div(&d);
            let mut c: DMatrix<f64> = DMatrix::identity(r, r);
            let mut v: DVector<f64> = DVector::zeros(r);
            for i in 0..r {
                let ui = ut.column(i);
                v[i] = ui.dot(&dinv_rho);
                for j in 0..=i {
                    let s = a * ui.component_mul(&ut.column(j)).component_div(&d).sum();
                    c[(i, j)] -= s;
                    c[(j, i)] = c[(i, j)];
                }
            }
            let Some(chol) = Cholesky::new(c) else {
                return f64::NAN;
            };
            let l = chol.l_dirty();
            logdet += 2.0 * (0..r).map(|k| l[(k, k)].ln()).sum::<f64>();
            quad += a * v.dot(&chol.solve(&v));
        }
        -0.5 * quad - 0.5 * logdet - 0.5 * rho.len() as f64 * LN_2PI
    }
}

/// Bias GP after MAP fitting, with its cached factorization.
#[derive(Clone, Debug)]
pub struct FittedGP {
    pub bias: BiasModel,
    pub inputs: Inputs,
    pub residuals: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    pub log_marginal_likelihood: f64,
    /// Jitter actually added to the diagonal.
    pub jitter: f64,
    pub warnings: Vec<String>,
}

impl FittedGP {
    fn build(bias: BiasModel, x: &Inputs, r: &[f64]) -> Result<Self> {
        let (k, warning) = bias.train_cov(x)?;
        let (chol, jitter) = factorize(&k, bias.jitter, &bias)?;
        let rt = centered(&bias, r);
        let lml = lml_from_cholesky(&chol, &rt);
        if !lml.is_finite() {
            return Err(Error::Factorization {
                hyperparameters: bias.hyper_values(),
                jitter,
            });
        }
        let alpha = chol.solve(&rt);
        Ok(FittedGP {
            bias,
            inputs: x.clone(),
            residuals: r.to_vec(),
            chol,
            alpha,
            log_marginal_likelihood: lml,
            jitter,
            warnings: warning.into_iter().collect(),
        })
    }
}

/// Options controlling one MAP fit.
pub(crate) struct FitContext<'a> {
    pub spectral: Option<&'a SpectralBasis>,
}

/// MAP estimate of the free bias hyperparameters.
pub fn fit_map(bias: &BiasModel, x: &Inputs, r: &[f64]) -> Result<FittedGP> {
    check_lengths(x, r)?;
    bias.validate()?;
    let basis = SpectralBasis::new(bias, x)?;
    let z = optimize_hypers(bias, x, r, &FitContext { spectral: basis.as_ref() })?;
    let mut fitted = bias.clone();
    fitted.set_free(&z);
    FittedGP::build(fitted, x, r)
}

/// Achieved log marginal likelihood at the MAP hyperparameters, without
/// building the predictive cache when the spectral path applies.
pub(crate) fn map_log_likelihood(bias: &BiasModel, x: &Inputs, r: &[f64], ctx: &FitContext<'_>) -> Result<f64> {
    let z = optimize_hypers(bias, x, r, ctx)?;
    let mut fitted = bias.clone();
    fitted.set_free(&z);
    match ctx.spectral {
        Some(basis) => {
            let rho = basis.project(&centered(&fitted, r));
            let v = if z.is_empty() { f64::NAN } else { basis.lml(z[0], &rho) };
            if v.is_finite() {
                Ok(v)
            } else {
                log_marginal_likelihood(&fitted, x, r)
            }
        }
        None => log_marginal_likelihood(&fitted, x, r),
    }
}

pub(crate) fn fit_map_with(bias: &BiasModel, x: &Inputs, r: &[f64], ctx: &FitContext<'_>) -> Result<FittedGP> {
    let z = optimize_hypers(bias, x, r, ctx)?;
    let mut fitted = bias.clone();
    fitted.set_free(&z);
    FittedGP::build(fitted, x, r)
}

/// Maximizes log marginal likelihood + log hyperprior over the free box.
fn optimize_hypers(bias: &BiasModel, x: &Inputs, r: &[f64], ctx: &FitContext<'_>) -> Result<Vec<f64>> {
    let (_, bounds, z0) = bias.free_space();
    if z0.is_empty() {
        return Ok(z0);
    }
    let mut trial = bias.clone();
    let mut objective: Box<dyn FnMut(&[f64]) -> f64 + '_> = match ctx.spectral {
        Some(basis) if z0.len() == 1 => {
            let rho = basis.project(&centered(bias, r));
            Box::new(move |z: &[f64]| {
                trial.set_free(z);
                let v = basis.lml(z[0], &rho) + trial.log_hyperprior();
                if v.is_finite() {
                    -v
                } else {
                    f64::INFINITY
                }
            })
        }
        _ => {
            let rt = centered(bias, r);
            let mean_free = bias.mean.free;
            let grouped = Grouped::new(x);
            Box::new(move |z: &[f64]| {
                trial.set_free(z);
                let rt_owned;
                let rt = if mean_free {
                    rt_owned = centered(&trial, r);
                    &rt_owned
                } else {
                    &rt
                };
                let fast = grouped.as_ref().and_then(|g| g.lml(&trial, x, rt));
                let v = match fast {
                    Some(v) => Ok(v + trial.log_hyperprior()),
                    None => trial
                        .train_cov(x)
                        .and_then(|(k, _)| factorize(&k, trial.jitter, &trial))
                        .map(|(c, _)| lml_from_cholesky(&c, rt) + trial.log_hyperprior()),
                };
                match v {
                    Ok(v) if v.is_finite() => -v,
                    _ => f64::INFINITY,
                }
            })
        }
    };

    let start_value = objective(&z0);
    let mut best = (z0.clone(), start_value);
    if z0.len() == 1 {
        let (lo, hi) = bounds[0];
        let (z, v) = scan_then_golden(&mut |t| objective(&[t]), lo, hi, 41, 1e-9 * (hi - lo).max(1.0));
        if v < best.1 {
            best = (vec![z], v);
        }
    } else {
        let nm = NelderMead::default();
        let step: Vec<f64> = bounds.iter().map(|(lo, hi)| 0.1 * (hi - lo)).collect();
        let starts = std::iter::once(z0.clone()).chain((1..=bias.restarts as u64).map(|k| {
            halton(k, z0.len())
                .iter()
                .zip(&bounds)
                .map(|(u, (lo, hi))| lo + u * (hi - lo))
                .collect()
        }));
        for s in starts {
            let m = nm.minimize(&mut *objective, &s, &step, Some(&bounds));
            if m.value < best.1 {
                best = (m.x, m.value);
            }
        }
    }
    if !best.1.is_finite() {
        return Err(Error::FitFailed);
    }
    Ok(best.0)
}

/// Posterior mean and covariance of the bias at query inputs.
pub fn predict(fit: &FittedGP, xq: &Inputs) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if xq.is_empty() {
        return Err(Error::EmptyInputs("predict"));
    }
    if xq.dim() != fit.inputs.dim() {
        return Err(Error::DimensionMismatch {
            node: "predict",
            expected: fit.inputs.dim(),
            found: xq.dim(),
        });
    }
    let (kqx, _) = fit.bias.cov(xq, &fit.inputs)?;
    let (kqq, _) = fit.bias.cov(xq, xq)?;
    let mean = kqx.clone() * &fit.alpha;
    let mean = mean.add_scalar(fit.bias.mean.value);
    let v = fit
        .chol
        .l_dirty()
        .solve_lower_triangular(&kqx.transpose())
        .expect("Cholesky factor has a positive diagonal");
    let mut cov = kqq - v.tr_mul(&v);
    let scale = cov.diagonal().amax().max(f64::MIN_POSITIVE);
    for i in 0..cov.nrows() {
        let d = cov[(i, i)];
        debug_assert!(d >= -1e-10 * scale.max(1.0), "predictive variance {d} below tolerance");
        if d < 0.0 {
            cov[(i, i)] = 0.0;
        }
    }
    Ok((mean, cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::gram;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn fixed_m32(s: f64, l: f64) -> KernelSpec {
        KernelSpec::matern32(Hyper::fixed(s), Hyper::fixed(l))
    }

    /// Kernel that is exactly `value * I` on record-distinct training inputs.
    fn white(v: f64) -> KernelSpec {
        KernelSpec::WhiteNoise(Hyper::fixed(v))
    }

    #[test]
    fn zero_residual_identity_covariance() {
        let bias = BiasModel::new(white(1.0));
        let x = Inputs::records(1, vec![0.0, 1.0]);
        let v = log_marginal_likelihood(&bias, &x, &[0.0, 0.0]).unwrap();
        assert!((v + LN_2PI).abs() < 1e-12);
        assert!((v + 1.83788).abs() < 1e-5);
    }

    #[test]
    fn scalar_gaussian_density() {
        let bias = BiasModel::new(white(2.0));
        let x = Inputs::records(1, vec![0.0]);
        let v = log_marginal_likelihood(&bias, &x, &[1.0]).unwrap();
        let want = -0.25 - 0.5 * 2f64.ln() - 0.5 * LN_2PI;
        assert!((v - want).abs() < 1e-14);
        assert!((v + 1.51551).abs() < 1e-5);
    }

    #[test]
    fn noise_sd_enters_diagonal() {
        let bias = BiasModel::new(white(1.0)).with_noise_sd(1.0);
        let x = Inputs::records(1, vec![0.0]);
        let v = log_marginal_likelihood(&bias, &x, &[1.0]).unwrap();
        let want = -0.25 - 0.5 * 2f64.ln() - 0.5 * LN_2PI;
        assert!((v - want).abs() < 1e-14);
    }

    /// Naive oracle: explicit inverse and determinant.
    fn naive_lml(k: &DMatrix<f64>, r: &DVector<f64>) -> f64 {
        let inv = k.clone().try_inverse().unwrap();
        let det = k.determinant();
        -0.5 * (r.transpose() * inv * r)[(0, 0)] - 0.5 * det.ln() - 0.5 * r.len() as f64 * LN_2PI
    }

    #[test]
    fn matches_naive_oracle_on_matern_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let xs: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let r: Vec<f64> = (0..5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let k = KernelSpec::sum(fixed_m32(1.3, 0.4), white(0.1));
            let bias = BiasModel::new(k.clone());
            let x = Inputs::records(1, xs);
            let got = log_marginal_likelihood(&bias, &x, &r).unwrap();
            let g = gram(&k, &x, &x).unwrap().entries;
            let want = naive_lml(&g, &DVector::from_vec(r));
            assert!((got - want).abs() <= 1e-10 * want.abs());
        }
    }

    #[test]
    fn permutation_invariance() {
        let k = KernelSpec::sum(fixed_m32(1.0, 0.3), white(0.05));
        let bias = BiasModel::new(k);
        let xs = vec![0.1, 0.4, 0.45, 0.9, 0.2];
        let r = vec![0.3, -0.1, 0.2, 1.0, -0.5];
        let x = Inputs::records(1, xs);
        let a = log_marginal_likelihood(&bias, &x, &r).unwrap();
        let order = [3, 0, 4, 2, 1];
        let xp = x.permuted(&order);
        let rp: Vec<f64> = order.iter().map(|&i| r[i]).collect();
        let b = log_marginal_likelihood(&bias, &xp, &rp).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn jitter_sensitivity_is_small() {
        let bias = BiasModel::new(fixed_m32(1.0, 0.2)).with_noise_sd(0.1);
        let x = Inputs::records(1, (0..10).map(|i| i as f64 / 9.0).collect());
        let r: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let mut a = bias.clone();
        a.jitter = 1e-10;
        let mut b = bias;
        b.jitter = 1e-8;
        let la = log_marginal_likelihood(&a, &x, &r).unwrap();
        let lb = log_marginal_likelihood(&b, &x, &r).unwrap();
        assert!((la - lb).abs() < 1e-4);
    }

    #[test]
    fn jitter_ladder_rescues_duplicate_inputs() {
        let bias = BiasModel::new(fixed_m32(1.0, 0.3));
        let x = Inputs::records(1, vec![0.5, 0.5, 0.7]);
        assert!(log_marginal_likelihood(&bias, &x, &[0.1, 0.1, 0.2]).is_ok());
    }

    #[test]
    fn factorization_failure_reports_hyperparameters() {
        let bias = BiasModel::new(KernelSpec::Constant(Hyper::fixed(f64::MAX)));
        let x = Inputs::records(1, vec![0.0, 1.0]);
        match log_marginal_likelihood(&bias, &x, &[0.0, 1.0]) {
            Err(Error::Factorization { hyperparameters, .. }) => {
                assert_eq!(hyperparameters.len(), 2)
            }
            other => panic!("{other:?}"),
        }
    }

    fn free_amp_kernel(lo: f64) -> KernelSpec {
        KernelSpec::product(
            KernelSpec::Constant(Hyper::free(1.0, lo, 100.0)),
            fixed_m32(1.0, 0.3),
        )
    }

    #[test]
    fn zero_residuals_push_amplitude_to_lower_bound() {
        let bias = BiasModel::new(free_amp_kernel(1e-6)).with_noise_sd(0.1);
        let x = Inputs::records(1, (0..8).map(|i| i as f64 / 7.0).collect());
        let fit = fit_map(&bias, &x, &[0.0; 8]).unwrap();
        let amp = fit.bias.kernel.hypers()[0].1.value;
        assert!((amp / 1e-6 - 1.0).abs() < 1e-3, "amp {amp}");
    }

    #[test]
    fn spectral_path_matches_cholesky() {
        let x = Inputs::records(1, vec![0.0, 0.1, 0.3, 0.35, 0.8, 1.0]);
        let r = vec![0.2, 0.1, -0.3, -0.2, 0.5, 0.4];
        for k in [
            free_amp_kernel(1e-6),
            KernelSpec::sum(
                KernelSpec::matern32(Hyper::free(1.0, 1e-3, 10.0), Hyper::fixed(0.2)),
                white(0.01),
            ),
        ] {
            let bias = BiasModel::new(k).with_noise_sd(0.05);
            let basis = SpectralBasis::new(&bias, &x).unwrap().expect("applicable");
            let rho = basis.project(&centered(&bias, &r));
            for z in [-3.0, -0.5, 0.0, 1.2] {
                let mut b = bias.clone();
                b.set_free(&[z]);
                let chol = log_marginal_likelihood(&b, &x, &r).unwrap();
                let spec = basis.lml(z, &rho);
                assert!((chol - spec).abs() < 1e-9 * chol.abs().max(1.0), "{chol} vs {spec}");
            }
        }
    }

    #[test]
    fn orthogonal_spectral_path_matches_cholesky() {
        let x = Inputs::records(1, vec![0.0, 0.1, 0.15, 0.3, 0.45, 0.5, 0.8, 0.9, 1.0]);
        let r = vec![0.2, 0.1, 0.0, -0.3, -0.2, -0.25, 0.5, 0.45, 0.4];
        let anchors: Vec<Vec<f64>> = (0..=10).map(|i| vec![0.1 * i as f64]).collect();
        let sens = SensitivityMatrix {
            f: DMatrix::from_fn(anchors.len(), 2, |i, k| if k == 0 { anchors[i][0] } else { (3.0 * anchors[i][0]).sin() }),
            anchors: anchors.clone(),
            theta: vec![1.0, 1.0],
            steps: vec![1e-4, 1e-4],
        };
        let mut bias = BiasModel::new(free_amp_kernel(1e-6)).with_noise_sd(0.1).with_anchors(anchors);
        let plain = SpectralBasis::unprojected(&bias, &x).unwrap().expect("applicable");
        bias.sensitivity = Some(sens.clone());
        let basis = plain.orthogonalized(&sens).expect("well separated");
        let rho = basis.project(&centered(&bias, &r));
        for z in [-4.0, -1.0, 0.0, 2.0, 4.0] {
            let mut b = bias.clone();
            b.set_free(&[z]);
            let dense = log_marginal_likelihood(&b, &x, &r).unwrap();
            let fast = basis.lml(z, &rho);
            assert!((dense - fast).abs() < 1e-8 * dense.abs().max(1.0), "{dense} vs {fast}");
        }
    }

    #[test]
    fn spectral_not_used_for_heteroscedastic_noise() {
        use crate::kernels::Heteroscedastic;
        let hn = KernelSpec::Heteroscedastic(Heteroscedastic {
            anchors: vec![vec![0.0], vec![1.0]],
            log_variances: vec![Hyper::fixed(-4.0), Hyper::fixed(-2.0)],
            bandwidth: Hyper::fixed(0.5),
        });
        let bias = BiasModel::new(KernelSpec::sum(free_amp_kernel(1e-6), hn));
        let x = Inputs::records(1, vec![0.0, 1.0]);
        assert!(SpectralBasis::new(&bias, &x).unwrap().is_none());
    }

    #[test]
    fn grouped_path_matches_dense_on_repeated_inputs() {
        use crate::kernels::Heteroscedastic;
        let hn = KernelSpec::Heteroscedastic(Heteroscedastic {
            anchors: vec![vec![0.0], vec![0.5], vec![1.0]],
            log_variances: vec![Hyper::fixed(-4.0), Hyper::fixed(-3.0), Hyper::fixed(-2.0)],
            bandwidth: Hyper::fixed(0.3),
        });
        let bias = BiasModel::new(KernelSpec::sum(fixed_m32(0.7, 0.4), hn)).with_noise_sd(0.05);
        let coords: Vec<f64> = (0..12).map(|i| [0.0, 0.5, 1.0][i % 3]).collect();
        let x = Inputs::records(1, coords);
        let r: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let g = Grouped::new(&x).expect("three distinct inputs");
        let fast = g.lml(&bias, &x, &centered(&bias, &r)).unwrap();
        let dense = log_marginal_likelihood(&bias, &x, &r).unwrap();
        assert!((fast - dense).abs() < 1e-10 * dense.abs().max(1.0), "{fast} vs {dense}");
        assert!(Grouped::new(&Inputs::records(1, vec![0.0, 1.0, 2.0])).is_none());
    }

    fn draw_gp(rng: &mut ChaCha8Rng, k: &KernelSpec, x: &Inputs) -> Vec<f64> {
        let mut g = gram(k, x, x).unwrap().entries;
        for i in 0..x.len() {
            g[(i, i)] += 1e-10;
        }
        let l = Cholesky::new(g).unwrap().l();
        let z = DVector::from_fn(x.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (l * z).iter().copied().collect()
    }

    #[test]
    fn recovers_amplitude_from_gp_draws() {
        let x = Inputs::records(1, (0..40).map(|i| i as f64 / 39.0).collect());
        let truth = fixed_m32(2.0, 0.3);
        let mut covered = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = draw_gp(&mut rng, &truth, &x);
            let k = KernelSpec::matern32(Hyper::free(1.0, 1e-3, 100.0), Hyper::fixed(0.3));
            let mut bias = BiasModel::new(k);
            bias.jitter = 1e-10;
            let fit = fit_map(&bias, &x, &r).unwrap();
            let s = fit.bias.kernel.hypers()[0].1.value;
            if (1.2..=3.0).contains(&s) {
                covered += 1;
            }
        }
        assert!(covered >= 19, "covered {covered}/20");
    }

    #[test]
    fn two_parameter_fit_beats_grid() {
        let x = Inputs::records(1, (0..15).map(|i| i as f64 / 14.0).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = draw_gp(&mut rng, &fixed_m32(1.5, 0.25), &x);
        let k = KernelSpec::sum(
            KernelSpec::matern32(Hyper::free(1.0, 0.1, 10.0), Hyper::free(0.5, 0.05, 2.0)),
            white(1e-4),
        );
        let bias = BiasModel::new(k);
        let fit = fit_map(&bias, &x, &r).unwrap();
        let mut probe = bias.clone();
        for i in 0..20 {
            for j in 0..20 {
                let s = (0.1f64.ln() + (100f64.ln()) * i as f64 / 19.0).exp();
                let l = (0.05f64.ln() + (40f64.ln()) * j as f64 / 19.0).exp();
                probe.set_free(&[s.ln(), l.ln()]);
                let v = log_marginal_likelihood(&probe, &x, &r).unwrap();
                assert!(fit.log_marginal_likelihood >= v - 1e-9, "grid ({s}, {l}) {v} > {}", fit.log_marginal_likelihood);
            }
        }
    }

    #[test]
    fn fit_not_worse_than_start() {
        let x = Inputs::records(1, vec![0.0, 0.2, 0.5, 0.9]);
        let r = vec![1.0, 0.5, -0.2, 0.3];
        let bias = BiasModel::new(free_amp_kernel(1e-6)).with_noise_sd(0.1);
        let start = log_marginal_likelihood(&bias, &x, &r).unwrap();
        let fit = fit_map(&bias, &x, &r).unwrap();
        assert!(fit.log_marginal_likelihood >= start);
    }

    #[test]
    fn free_mean_is_fitted() {
        let x = Inputs::records(1, (0..6).map(|i| i as f64).collect());
        let r = vec![5.0; 6];
        let mut bias = BiasModel::new(white(0.01));
        bias.mean = Hyper::free(0.0, -10.0, 10.0);
        let fit = fit_map(&bias, &x, &r).unwrap();
        assert!((fit.bias.mean.value - 5.0).abs() < 1e-4);
    }

    #[test]
    fn interpolates_without_noise() {
        let x = Inputs::records(1, vec![0.0, 0.3, 0.6, 1.0]);
        let r = vec![0.5, -0.2, 0.1, 0.4];
        let fit = fit_map(&BiasModel::new(fixed_m32(1.0, 0.3)), &x, &r).unwrap();
        let q = Inputs::query(1, vec![0.0, 0.3, 0.6, 1.0]);
        let (m, c) = predict(&fit, &q).unwrap();
        for i in 0..4 {
            assert!((m[i] - r[i]).abs() < 1e-8);
            assert!(c[(i, i)] < 1e-8);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let x = Inputs::records(1, vec![0.0, 0.3]);
        let mut bias = BiasModel::new(fixed_m32(2.0, 0.1));
        bias.mean = Hyper::fixed(0.7);
        let fit = fit_map(&bias, &x, &[1.0, -1.0]).unwrap();
        let (m, c) = predict(&fit, &Inputs::query(1, vec![100.0])).unwrap();
        assert!((m[0] - 0.7).abs() < 1e-10);
        assert!((c[(0, 0)] - 4.0).abs() < 1e-10);
    }

    #[test]
    fn gap_variance_exceeds_observed() {
        let xs: [f64; 14] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.4, 0.45, 0.5, 0.8, 0.85, 0.9, 0.95, 1.0];
        let r: Vec<f64> = xs.iter().map(|x| 4.0 * x + x * (5.0 * x).sin() - 3.33 * x).collect();
        let k = KernelSpec::product(
            KernelSpec::Constant(Hyper::free(1.0, 1e-6, 1e3)),
            fixed_m32(1.0, 0.5 / 3f64.sqrt()),
        );
        let bias = BiasModel::new(k).with_noise_sd(0.02f64.sqrt());
        let x = Inputs::records(1, xs.to_vec());
        let fit = fit_map(&bias, &x, &r).unwrap();
        let (_, c_obs) = predict(&fit, &Inputs::query(1, xs.to_vec())).unwrap();
        let (_, c_gap) = predict(&fit, &Inputs::query(1, vec![0.6, 0.65, 0.7])).unwrap();
        let max_obs = c_obs.diagonal().max();
        assert!(c_gap.diagonal().min() > max_obs);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn predictive_variance_nonnegative(
            xs in proptest::collection::vec(0.0f64..1.0, 2..10),
            qs in proptest::collection::vec(-0.5f64..1.5, 1..10),
            l in 0.05f64..1.0,
        ) {
            let r: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin()).collect();
            let mut bias = BiasModel::new(fixed_m32(1.0, l));
            bias.jitter = 1e-9;
            let x = Inputs::records(1, xs);
            let fit = fit_map(&bias, &x, &r).unwrap();
            let (_, c) = predict(&fit, &Inputs::query(1, qs)).unwrap();
            prop_assert!(c.diagonal().iter().all(|v| *v >= 0.0));
        }
    }
}
