//! Small derivative-free minimizers used by the GP fit and chain initialization.

/// Result of a minimization.
#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

#[derive(Clone, Debug)]
pub struct NelderMead {
    pub max_evaluations: usize,
    /// Stop when the spread of simplex values drops below this.
    pub f_tol: f64,
    /// Stop when every vertex is within this distance of the best one.
    pub x_tol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead {
            max_evaluations: 2000,
            f_tol: 1e-10,
            x_tol: 1e-8,
        }
    }
}

impl NelderMead {
    /// Minimizes `f` starting from `x0` with initial simplex edge `step[i]`.
    ///
    /// With `bounds`, every trial point is clamped into the box. Non-finite
    /// values are treated as `+inf`.
    pub fn minimize(
        &self,
        f: &mut dyn FnMut(&[f64]) -> f64,
        x0: &[f64],
        step: &[f64],
        bounds: Option<&[(f64, f64)]>,
    ) -> Minimum {
        let n = x0.len();
        let clamp = |x: &mut Vec<f64>| {
            if let Some(b) = bounds {
                for (xi, (lo, hi)) in x.iter_mut().zip(b) {
                    *xi = xi.clamp(*lo, *hi);
                }
            }
        };
        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };

        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        let mut start = x0.to_vec();
        clamp(&mut start);
        simplex.push(start.clone());
        for i in 0..n {
            let mut v = start.clone();
            v[i] += step[i];
            clamp(&mut v);
            if v[i] == start[i] {
                v[i] -= step[i];
                clamp(&mut v);
            }
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

        let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
        while evals < self.max_evaluations {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let spread = values[n] - values[0];
            let size = simplex[1..]
                .iter()
                .map(|v| {
                    v.iter()
                        .zip(&simplex[0])
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if (spread.is_finite() && spread <= self.f_tol && size <= self.x_tol.sqrt())
                || size <= self.x_tol
            {
                break;
            }

            let mut centroid = vec![0.0; n];
            for v in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / n as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n])
                    .map(|(c, w)| c + t * (c - w))
                    .collect()
            };

            let mut xr = along(alpha);
            clamp(&mut xr);
            let fr = eval(&xr, &mut evals);
            if fr < values[0] {
                let mut xe = along(gamma);
                clamp(&mut xe);
                let fe = eval(&xe, &mut evals);
                if fe < fr {
                    simplex[n] = xe;
                    values[n] = fe;
                } else {
                    simplex[n] = xr;
                    values[n] = fr;
                }
                continue;
            }
            if fr < values[n - 1] {
                simplex[n] = xr;
                values[n] = fr;
                continue;
            }
            let (mut xc, outside) = if fr < values[n] {
                (along(rho), true)
            } else {
                (along(-rho), false)
            };
            clamp(&mut xc);
            let fc = eval(&xc, &mut evals);
            if (outside && fc <= fr) || (!outside && fc < values[n]) {
                simplex[n] = xc;
                values[n] = fc;
                continue;
            }
            for i in 1..=n {
                let shrunk: Vec<f64> = simplex[0]
                    .iter()
                    .zip(&simplex[i])
                    .map(|(b, x)| b + sigma * (x - b))
                    .collect();
                values[i] = eval(&shrunk, &mut evals);
                simplex[i] = shrunk;
            }
        }

        let best = (0..=n)
            .min_by(|&a, &b| values[a].total_cmp(&values[b]))
            .unwrap_or(0);
        Minimum {
            x: simplex[best].clone(),
            value: values[best],
            evaluations: evals,
        }
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section minimization of a unimodal function on `[a, b]`.
pub fn golden_section(f: &mut dyn FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Coarse scan of `[lo, hi]` on `points` nodes, then golden refinement
/// around the best node. Endpoints are candidates too.
pub fn scan_then_golden(
    f: &mut dyn FnMut(f64) -> f64,
    lo: f64,
    hi: f64,
    points: usize,
    tol: f64,
) -> (f64, f64) {
    let points = points.max(3);
    let h = (hi - lo) / (points - 1) as f64;
    let mut best = (lo, f64::INFINITY, 0usize);
    for i in 0..points {
        let x = if i == points - 1 { hi } else { lo + h * i as f64 };
        let v = f(x);
        if v < best.1 {
            best = (x, v, i);
        }
    }
    if !best.1.is_finite() {
        return (best.0, best.1);
    }
    let i = best.2;
    let a = lo + h * i.saturating_sub(1) as f64;
    let b = (lo + h * (i + 1) as f64).min(hi);
    let (x, v) = golden_section(f, a, b, tol);
    if v < best.1 {
        (x, v)
    } else {
        (best.0, best.1)
    }
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Point `index` (1-based works best) of the Halton sequence in `[0,1)^dim`.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| {
            let base = PRIMES[d % PRIMES.len()] as u64;
            let mut f = 1.0;
            let mut r = 0.0;
            let mut i = index;
            while i > 0 {
                f /= base as f64;
                r += f * (i % base) as f64;
                i /= base;
            }
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nelder_mead_rosenbrock() {
        let mut f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = NelderMead {
            max_evaluations: 10_000,
            ..Default::default()
        }
        .minimize(&mut f, &[-1.2, 1.0], &[0.5, 0.5], None);
        assert!((m.x[0] - 1.0).abs() < 1e-3 && (m.x[1] - 1.0).abs() < 1e-3, "{:?}", m.x);
    }

    #[test]
    fn nelder_mead_respects_bounds() {
        let mut f = |x: &[f64]| (x[0] - 5.0).powi(2) + (x[1] + 5.0).powi(2);
        let b = [(-1.0, 1.0), (-1.0, 1.0)];
        let m = NelderMead::default().minimize(&mut f, &[0.0, 0.0], &[0.3, 0.3], Some(&b));
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] + 1.0).abs() < 1e-6, "{:?}", m.x);
    }

    #[test]
    fn golden_finds_parabola_minimum() {
        let (x, v) = golden_section(&mut |x| (x - 0.3).powi(2) + 1.0, -2.0, 2.0, 1e-10);
        assert!((x - 0.3).abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scan_handles_boundary_minimum() {
        let (x, _) = scan_then_golden(&mut |x| x, 2.0, 5.0, 10, 1e-10);
        assert!((x - 2.0).abs() < 1e-9);
    }

    #[test]
    fn halton_first_points() {
        assert_eq!(halton(1, 2), vec![0.5, 1.0 / 3.0]);
        assert_eq!(halton(2, 2), vec![0.25, 2.0 / 3.0]);
        assert_eq!(halton(3, 1), vec![0.75]);
    }
}
