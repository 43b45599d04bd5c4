//! Acceptance criteria 1-11. Every test prints one `PASS`/`FAIL` line to
//! stderr (uncaptured) before asserting.
//!
//! Benchmark runs use seed 7 and are shared between criteria.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use biascal::benchmarks::{preset, PresetOptions};
use biascal::calibration::{bias_corrected_response, calibrate, CalibrationResult, Method};
use biascal::cli::render_outputs;
use biascal::config::Run;
use biascal::diagnostics::{effective_sample_size, gelman_rubin, hdi};
use biascal::gp::{log_marginal_likelihood, BiasModel};
use biascal::inference::{metropolis_hastings, SamplerSettings};
use biascal::kernels::{eval_kernel, gram, Hyper, Inputs, KernelSpec, Point};
use biascal::models::{l2_optimum, mse_optimum, FnModel, ForwardModel, InfluenceLine, Pedagogical};
use biascal::ogp::{model_gradient_fd, orthogonal_gram};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEED: u64 = 7;

fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{verdict} criterion {criterion}: {detail}");
}

struct Bench {
    run: Run,
    result: CalibrationResult,
    seconds: f64,
    files: BTreeMap<String, String>,
}

fn execute(name: &str, method: Method, with_temperature: bool) -> Bench {
    let opts = PresetOptions {
        with_temperature,
        ..PresetOptions::default()
    };
    let run = preset(name, method, SEED, &opts)
        .unwrap()
        .resolve(Path::new("."))
        .unwrap();
    let start = Instant::now();
    let result = calibrate(&run.config, run.model.as_ref(), &run.data).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let files = render_outputs(&run, &result).unwrap().files.into_iter().collect();
    Bench {
        run,
        result,
        seconds,
        files,
    }
}

macro_rules! cached {
    ($fn_name:ident, $name:expr, $method:expr, $temp:expr) => {
        fn $fn_name() -> &'static Bench {
            static CELL: OnceLock<Bench> = OnceLock::new();
            CELL.get_or_init(|| execute($name, $method, $temp))
        }
    };
}

cached!(ped_nobias, "pedagogical", Method::Nobias, true);
cached!(ped_koh, "pedagogical", Method::Koh, true);
cached!(ped_ogp, "pedagogical", Method::Ogp, true);
cached!(beam_nobias, "beam", Method::Nobias, true);
cached!(beam_koh, "beam", Method::Koh, true);
cached!(beam_ogp, "beam", Method::Ogp, true);
cached!(inf_nobias, "influence", Method::Nobias, true);
cached!(inf_koh_eta, "influence", Method::Koh, true);
cached!(inf_koh_plain, "influence", Method::Koh, false);
cached!(inf_ogp, "influence", Method::Ogp, true);

fn stats(b: &Bench, name: &str) -> (f64, f64, f64, f64, f64) {
    let s = &b.result.summary[name];
    (s.mean, s.sd, s.hdi_3, s.hdi_97, s.r_hat)
}

#[test]
fn criterion_01_pedagogical_nobias() {
    let b = ped_nobias();
    let (mean, sd, ..) = stats(b, "theta");
    let steps = b.result.chains.iter().all(|c| c.len() == 1000 && c.burn_in == 100);
    let pass = (3.28..=3.38).contains(&mean) && sd <= 0.05 && steps && b.result.chains.len() == 2 && b.seconds < 30.0;
    report(
        1,
        pass,
        &format!("mean {mean:.4} (3.28..3.38), sd {sd:.4} (<= 0.05), {:.2} s (< 30)", b.seconds),
    );
    assert!(pass);
}

#[test]
fn criterion_02_pedagogical_koh() {
    let b = ped_koh();
    let (mean, sd, _, _, r_hat) = stats(b, "theta");
    let pass = (3.1..=3.65).contains(&mean) && (0.2..=0.5).contains(&sd) && r_hat <= 1.15 && b.seconds < 600.0;
    report(
        2,
        pass,
        &format!(
            "mean {mean:.4} (3.1..3.65), sd {sd:.4} (0.2..0.5), r_hat {r_hat:.4} (<= 1.15), {:.1} s (< 600)",
            b.seconds
        ),
    );
    assert!(pass);
}

/// `argmin_theta ∫_0^1 (4x + x sin 5x - theta x)^2 dx = 3 ∫_0^1 x y(x) dx`.
fn pedagogical_l2_closed_form() -> f64 {
    let s5 = 5f64.sin();
    let c5 = 5f64.cos();
    // ∫_0^1 x^2 sin 5x dx by parts
    let x2sin = -c5 / 5.0 + 2.0 * s5 / 25.0 + 2.0 * c5 / 125.0 - 2.0 / 125.0;
    3.0 * (4.0 / 3.0 + x2sin)
}

#[test]
fn criterion_03_pedagogical_ogp() {
    let b = ped_ogp();
    let (mean, _, lo, hi, _) = stats(b, "theta");
    let oracle = pedagogical_l2_closed_form();
    let lib = l2_optimum(&Pedagogical, &Pedagogical::truth, (0.0, 1.0), 2001, (0.0, 8.0));
    let oracle_ok = (oracle - 3.565).abs() <= 0.005 && (lib - oracle).abs() <= 0.005;
    let pass = (3.42..=3.62).contains(&mean) && lo >= 3.35 && hi <= 3.70 && oracle_ok && b.seconds < 900.0;
    report(
        3,
        pass,
        &format!(
            "mean {mean:.4} (3.42..3.62), hdi [{lo:.4}, {hi:.4}] (within [3.35, 3.70]), \
             L2 optimum {oracle:.4} / library {lib:.4} (3.565 ± 0.005), {:.1} s (< 900)",
            b.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_mse_oracle() {
    let b = ped_nobias();
    let (mean, ..) = stats(b, "theta");
    let data = &b.run.data;
    let lib = mse_optimum(b.run.model.as_ref(), data, (0.0, 8.0));
    // least squares for f = theta x
    let sxy: f64 = data.rows.iter().map(|r| r.x[0] * r.y).sum();
    let sxx: f64 = data.rows.iter().map(|r| r.x[0] * r.x[0]).sum();
    let closed = sxy / sxx;
    let pass = (lib - mean).abs() <= 0.05 && (lib - closed).abs() <= 1e-6;
    report(
        4,
        pass,
        &format!("mse optimum {lib:.4} (least squares {closed:.4}) vs no-bias mean {mean:.4} (within 0.05)"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_gp_lml_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let xs: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..2.0)).collect();
        let amp = rng.random_range(0.3..2.0);
        let len = rng.random_range(0.1..1.5);
        let base = if rng.random_bool(0.5) {
            KernelSpec::matern32(Hyper::fixed(amp), Hyper::fixed(len))
        } else {
            KernelSpec::rbf(Hyper::fixed(amp), Hyper::fixed(len))
        };
        let noise = rng.random_range(0.05..0.5);
        let kernel = KernelSpec::sum(base, KernelSpec::WhiteNoise(Hyper::fixed(noise * noise)));
        let sd = rng.random_range(0.05..0.5);
        let bias = BiasModel::new(kernel.clone()).with_noise_sd(sd);
        let r: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Inputs::scalars(&xs, true);
        let got = log_marginal_likelihood(&bias, &x, &r).unwrap();

        let mut k = gram(&kernel, &x, &x).unwrap().entries;
        for i in 0..5 {
            k[(i, i)] += sd * sd;
        }
        let inv = k.clone().try_inverse().unwrap();
        let rv = DVector::from_vec(r);
        let quad = (rv.transpose() * inv * &rv)[(0, 0)];
        let naive = -0.5 * quad - 0.5 * k.determinant().ln() - 2.5 * (2.0 * std::f64::consts::PI).ln();
        worst = worst.max((got - naive).abs() / naive.abs());
    }
    let pass = worst <= 1e-10;
    report(5, pass, &format!("worst relative error {worst:.3e} over 50 instances (<= 1e-10)"));
    assert!(pass);
}

#[test]
fn criterion_06_ogp_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let models = [
        FnModel::new("linear", 1, 1, |t, x| t[0] * x[0]),
        FnModel::new("quad", 2, 1, |t, x| t[0] * x[0] + t[1] * x[0] * x[0]),
        FnModel::new("wave", 2, 1, |t, x| (t[0] * x[0]).sin() + t[1] * (-x[0]).exp()),
    ];
    let mut worst_identity: f64 = 0.0;
    let mut worst_draw: f64 = 0.0;
    for inst in 0..20 {
        let model = &models[inst % models.len()];
        let theta: Vec<f64> = (0..model.n_params()).map(|_| rng.random_range(0.5..2.5)).collect();
        let n = rng.random_range(6..16);
        let pts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let anchors = Inputs::scalars(&pts, false);
        let steps = vec![1e-5; theta.len()];
        let sens = model_gradient_fd(model, &theta, &anchors.to_rows(), &steps).unwrap();
        let kernel = KernelSpec::matern32(Hyper::fixed(rng.random_range(0.5..2.0)), Hyper::fixed(rng.random_range(0.1..0.6)));
        let k = orthogonal_gram(&kernel, &sens, &anchors, &anchors, &anchors).unwrap().entries;
        let f = &sens.f;
        let w = gram(&kernel, &anchors, &anchors).unwrap().entries;
        let ftkf = f.transpose() * &k * f;
        let scale = (f.transpose() * &w * f).amax();
        worst_identity = worst_identity.max(ftkf.amax() / scale);

        let eig = SymmetricEigen::new(k.clone());
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        for _ in 0..5 {
            let z = DVector::from_fn(n, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
            let b = &root * z;
            let ftb = f.transpose() * &b;
            worst_draw = worst_draw.max(ftb.amax() / (f.norm() * b.norm()));
        }
    }
    let pass = worst_identity <= 1e-8 && worst_draw <= 1e-6;
    report(
        6,
        pass,
        &format!(
            "max |F^T K F| / |F^T W F| {worst_identity:.3e} (<= 1e-8) over 20 instances; \
             max |F^T b| / (|F| |b|) {worst_draw:.3e} (<= 1e-6) over 100 draws"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_mh_conjugate_normal() {
    // prior N(0, 1), one observation y = 1 with unit noise: posterior N(0.5, 0.5)
    let settings = SamplerSettings {
        names: vec!["mu".into()],
        proposal_sd: vec![1.7],
        steps: 21_000,
        burn_in: 1_000,
        seed: 2024,
    };
    let start = Instant::now();
    let chain = metropolis_hastings(
        &mut |t: &[f64]| Ok(-0.5 * t[0] * t[0] - 0.5 * (1.0 - t[0]).powi(2)),
        &[0.0],
        &settings,
    )
    .unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let s = chain.param(0);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let pass = (mean - 0.5).abs() <= 0.05 && (var - 0.5).abs() <= 0.1 && seconds < 5.0 && s.len() == 20_000;
    report(
        7,
        pass,
        &format!("mean {mean:.4} (0.5 ± 0.05), variance {var:.4} (0.5 ± 0.1), {seconds:.3} s (< 5)"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_beam() {
    let nob = beam_nobias();
    let koh = beam_koh();
    let model = nob.run.model.as_ref();
    let data = &nob.run.data;

    // (a) grid-search MSE optimum over E
    let mut best = (f64::INFINITY, 0.0);
    let mut e = 1.0e9;
    while e <= 60.0e9 {
        let sse: f64 = data
            .rows
            .iter()
            .map(|r| (r.y - model.eval(&[e], &r.x).unwrap()).powi(2))
            .sum();
        if sse < best.0 {
            best = (sse, e);
        }
        e += 1.0e6;
    }
    let e_mse = best.1;
    let (e_mean, ..) = stats(nob, "E");
    let a_rel = (e_mean - e_mse).abs() / e_mse;
    let a = a_rel <= 0.05;

    // (b) heteroscedastic noise SD at the outer sensors
    let fit = koh.result.fit.as_ref().unwrap();
    let (_, noise) = fit.bias.kernel.split_noise();
    let noise = noise.unwrap();
    let sd_at = |x: f64| eval_kernel(&noise, Point::new(&[x]), Point::new(&[x])).unwrap().sqrt();
    let ratio = sd_at(50.0) / sd_at(10.0);
    let shape = |x: f64| x * x * (3.0 * 50.0 - x);
    let target = shape(50.0) / shape(10.0);
    let b = ratio > 1.0 && (ratio / target - 1.0).abs() <= 0.3;

    // (c) bias-corrected 2-SD coverage
    let xs: Vec<Vec<f64>> = data.rows.iter().map(|r| r.x.clone()).collect();
    let band = bias_corrected_response(&koh.result, model, &xs, None).unwrap();
    let covered = data
        .rows
        .iter()
        .enumerate()
        .filter(|(i, r)| (r.y - band.mean[*i]).abs() <= 2.0 * band.sd[*i])
        .count();
    let c = covered >= 90;

    let seconds = nob.seconds + koh.seconds;
    let pass = a && b && c && seconds < 1800.0;
    report(
        8,
        pass,
        &format!(
            "(a) E mean {e_mean:.4e} vs MSE optimum {e_mse:.4e}: {:.2}% (<= 5%) {}; \
             (b) noise SD ratio 50/10 m {ratio:.3} vs shape ratio {target:.3} (± 30%) {}; \
             (c) coverage {covered}/100 (>= 90) {}; {seconds:.1} s (< 1800)",
            100.0 * a_rel,
            if a { "ok" } else { "fail" },
            if b { "ok" } else { "fail" },
            if c { "ok" } else { "fail" },
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_influence_line() {
    let with = inf_koh_eta();
    let without = inf_koh_plain();
    let model = with.run.model.as_ref();
    let data = &with.run.data;
    let xs: Vec<Vec<f64>> = data.rows.iter().map(|r| r.x.clone()).collect();
    let etas: Vec<Vec<f64>> = data.rows.iter().map(|r| r.eta.clone().unwrap()).collect();

    let band_with = bias_corrected_response(&with.result, model, &xs, Some(&etas)).unwrap();
    let band_without = bias_corrected_response(&without.result, model, &xs, None).unwrap();
    let distance = |mean: &[f64]| {
        data.rows
            .iter()
            .zip(mean)
            .map(|(r, m)| (r.y - m).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let d_with = distance(&band_with.mean);
    let d_without = distance(&band_without.mean);
    let ratio = d_with / d_without;

    // without temperature: one response line shared by every series
    let mut by_position: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for (r, m) in data.rows.iter().zip(&band_without.mean) {
        by_position.entry(r.x[0].to_bits()).or_default().push(*m);
    }
    let coincide = by_position.values().all(|v| v.iter().all(|m| *m == v[0]) && v.len() == 6);

    // with temperature: ordered by end temperature wherever the thermal
    // increment between consecutive series exceeds 5 sigma_meas
    let bridge = InfluenceLine::default();
    let step = InfluenceLine::END_DELTA_T[1] - InfluenceLine::END_DELTA_T[0];
    let mut checked = 0;
    let mut ordered = 0;
    let positions = InfluenceLine::positions();
    for &a in &positions {
        let increment = InfluenceLine::ALPHA * step * (a / InfluenceLine::LAST_POSITION) / bridge.depth
            * bridge.span
            * bridge.span
            / 8.0;
        if increment <= 5.0 * data.sigma_meas {
            continue;
        }
        checked += 1;
        let mut series: Vec<(f64, f64)> = data
            .rows
            .iter()
            .zip(&band_with.mean)
            .filter(|(r, _)| r.x[0] == a)
            .map(|(r, m)| (r.eta.as_ref().unwrap()[0], *m))
            .collect();
        series.sort_by(|p, q| p.0.total_cmp(&q.0));
        if series.windows(2).all(|w| w[1].1 > w[0].1) {
            ordered += 1;
        }
    }
    let monotone = checked > 0 && ordered == checked;

    let seconds = with.seconds + without.seconds;
    let pass = ratio <= 0.01 && coincide && monotone && seconds < 2700.0;
    report(
        9,
        pass,
        &format!(
            "distance with/without temperature {d_with:.3e}/{d_without:.3e} = {ratio:.3e} (<= 0.01); \
             without-temperature lines coincide: {coincide}; with-temperature ordered by end dT at \
             {ordered}/{checked} positions (of {}); {seconds:.1} s (< 2700)",
            positions.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_diagnostics() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 1000;
    let chain: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let r_hat = gelman_rubin(&[chain.clone(), chain.clone()]).unwrap();
    let expected = ((n as f64 - 1.0) / n as f64).sqrt();
    let r_ok = r_hat == expected;

    let iid: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let total = 4.0 * n as f64;
    let ess = effective_sample_size(&iid);
    let ess_ok = (0.8 * total..=1.2 * total).contains(&ess);

    let big: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (lo, hi) = hdi(&big, 0.94).unwrap();
    let hdi_ok = (lo + 1.88).abs() <= 0.05 && (hi - 1.88).abs() <= 0.05;

    let pass = r_ok && ess_ok && hdi_ok;
    report(
        10,
        pass,
        &format!(
            "identical-chain r_hat {r_hat:.15} vs {expected:.15}; iid ESS {ess:.0} of {total:.0}; \
             HDI ({lo:.4}, {hi:.4}) vs (-1.88, 1.88) ± 0.05"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_11_determinism() {
    let runs: [(&str, Method, bool, fn() -> &'static Bench); 10] = [
        ("pedagogical", Method::Nobias, true, ped_nobias),
        ("pedagogical", Method::Koh, true, ped_koh),
        ("pedagogical", Method::Ogp, true, ped_ogp),
        ("beam", Method::Nobias, true, beam_nobias),
        ("beam", Method::Koh, true, beam_koh),
        ("beam", Method::Ogp, true, beam_ogp),
        ("influence", Method::Nobias, true, inf_nobias),
        ("influence", Method::Koh, true, inf_koh_eta),
        ("influence", Method::Koh, false, inf_koh_plain),
        ("influence", Method::Ogp, true, inf_ogp),
    ];
    let mut mismatches = Vec::new();
    let mut compared = 0;
    for (name, method, temp, first) in runs {
        let a = first();
        let b = execute(name, method, temp);
        for (file, text) in &a.files {
            if !(file.starts_with("chain_") || file == "summary.json") {
                continue;
            }
            compared += 1;
            if b.files.get(file) != Some(text) {
                mismatches.push(format!("{name}/{method}/{file}"));
            }
        }
    }
    let pass = mismatches.is_empty() && compared == 30;
    report(
        11,
        pass,
        &format!("{compared} chain/summary files compared across 10 benchmark runs, mismatches: {mismatches:?}"),
    );
    assert!(pass);
}
