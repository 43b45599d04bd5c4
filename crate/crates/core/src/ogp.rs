//! Orthogonal bias covariance.
//!
//! The corrected kernel removes from the bias prior every direction the
//! forward model can reach by moving its parameters:
//! `C(x, x') = k(x, x') - w(x)^T F (F^T W F)^+ F^T w(x')`
//! with `W[i][j] = k(xi_i, xi_j)` and `w(x)_i = k(x, xi_i)` over the anchors.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernels::{gram_entries, GramMatrix, Inputs, KernelSpec};
use crate::models::ForwardModel;

/// Condition number of `F^T W F` above which a warning is attached.
pub const CONDITION_WARNING: f64 = 1e12;

/// Relative singular-value cutoff of the pseudo-inverse.
pub(crate) const PINV_CUTOFF: f64 = 1e-12;

/// Model sensitivities `dF/dtheta` at the anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMatrix {
    /// N x t matrix.
    pub f: DMatrix<f64>,
    pub anchors: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub steps: Vec<f64>,
}

/// Central finite differences of `model` at every anchor.
pub fn model_gradient_fd(
    model: &dyn ForwardModel,
    theta: &[f64],
    anchors: &[Vec<f64>],
    steps: &[f64],
) -> Result<SensitivityMatrix> {
    if steps.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            node: "SensitivityMatrix",
            expected: theta.len(),
            found: steps.len(),
        });
    }
    if let Some(h) = steps.iter().find(|h| !(**h > 0.0)) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    if anchors.is_empty() {
        return Err(Error::EmptyInputs("model_gradient_fd"));
    }
    let mut f = DMatrix::zeros(anchors.len(), theta.len());
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    for (k, &h) in steps.iter().enumerate() {
        plus[k] = theta[k] + h;
        minus[k] = theta[k] - h;
        for (i, xi) in anchors.iter().enumerate() {
            let up = model.eval(&plus, xi)?;
            let down = model.eval(&minus, xi)?;
            let d = (up - down) / (2.0 * h);
            if !d.is_finite() {
                return Err(Error::Model {
                    model: model.name().to_string(),
                    theta: theta.to_vec(),
                    x: xi.clone(),
                    reason: "non-finite sensitivity".into(),
                });
            }
            f[(i, k)] = d;
        }
        plus[k] = theta[k];
        minus[k] = theta[k];
    }
    Ok(SensitivityMatrix {
        f,
        anchors: anchors.to_vec(),
        theta: theta.to_vec(),
        steps: steps.to_vec(),
    })
}

/// Factor `G` with `G G^T = F (F^T W F)^+ F^T`, plus an optional
/// conditioning warning.
///
/// `F` is first reduced to an orthonormal basis of its column space, which
/// keeps the correction free of the column scaling of `F`.
fn projector_factor(kernel: &KernelSpec, f: &DMatrix<f64>, anchors: &Inputs) -> Result<(DMatrix<f64>, Option<String>)> {
    let w = gram_entries(kernel, anchors, anchors)?;
    let a = f.transpose() * &w * f;
    let a = (&a + a.transpose()) * 0.5;
    let sv = a.singular_values();
    let s_max = sv.max();
    let mut warning = None;
    if s_max > 0.0 {
        let s_min = sv.min();
        let cond = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
        if cond > CONDITION_WARNING {
            warning = Some(format!(
                "F^T W F is ill-conditioned (condition number {cond:.3e}); using pseudo-inverse"
            ));
        }
    }
    let n = f.nrows();
    if s_max <= 0.0 {
        return Ok((DMatrix::zeros(n, 0), warning));
    }
    let svd = f.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let f_max = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > PINV_CUTOFF.sqrt() * f_max)
        .collect();
    let q = u.select_columns(&keep);
    let m = q.transpose() * &w * &q;
    let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
    let l_max = eig.eigenvalues.max();
    let cols: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&k| eig.eigenvalues[k] > PINV_CUTOFF * l_max)
        .collect();
    let mut g = q * eig.eigenvectors.select_columns(&cols);
    for (j, &k) in cols.iter().enumerate() {
        g.column_mut(j).scale_mut(eig.eigenvalues[k].sqrt().recip());
    }
    Ok((g, warning))
}

pub(crate) fn orthogonal_entries(
    kernel: &KernelSpec,
    sens: &SensitivityMatrix,
    anchors: &Inputs,
    xs: &Inputs,
    ys: &Inputs,
) -> Result<(DMatrix<f64>, Option<String>)> {
    if anchors.len() != sens.f.nrows() {
        return Err(Error::DimensionMismatch {
            node: "orthogonal_gram",
            expected: sens.f.nrows(),
            found: anchors.len(),
        });
    }
    let (g, warning) = projector_factor(kernel, &sens.f, anchors)?;
    let same = xs == ys;
    let px = gram_entries(kernel, anchors, xs)?.transpose() * &g;
    let base = gram_entries(kernel, xs, ys)?;
    let mut out = if same {
        base - &px * px.transpose()
    } else {
        let py = gram_entries(kernel, anchors, ys)?.transpose() * &g;
        base - px * py.transpose()
    };
    if same {
        let sym = (&out + out.transpose()) * 0.5;
        out = sym;
    }
    Ok((out, warning))
}

/// Orthogonal gram over `(X, X')` for a noise-free base kernel.
///
/// `anchors` are in the same coordinates as `X` and line up with the rows of
/// `sens.f`.
pub fn orthogonal_gram(
    kernel: &KernelSpec,
    sens: &SensitivityMatrix,
    anchors: &Inputs,
    xs: &Inputs,
    ys: &Inputs,
) -> Result<GramMatrix> {
    if kernel.contains_noise() {
        return Err(Error::Config(
            "orthogonal_gram expects the noise-free part of the kernel".into(),
        ));
    }
    let (entries, warning) = orthogonal_entries(kernel, sens, anchors, xs, ys)?;
    Ok(GramMatrix {
        entries,
        rows: xs.clone(),
        cols: ys.clone(),
        warnings: warning.into_iter().collect(),
    })
}
