//! Acceptance gate: every criterion runs in sequence on one thread, so the wall-clock
//! measurements of the tilting runs are not disturbed by concurrent tests. Prints one
//! `[PASS]`/`[FAIL]` line per criterion and exits non-zero if any fails.

use std::cell::Cell;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use itilt::config::RunConfig;
use itilt::diffusion::ddim_sample;
use itilt::experiment::{evaluate_base, linear_fit, run_tilting, train_base_model, TiltingRun};
use itilt::gmm::{posterior_tilt_covariance_oracle, ExactDenoiser, GaussianMixture, QuadraticReward};
use itilt::metrics::{rmse_score_error, MetricsRecord, RmseSampling};
use itilt::model::{Denoiser, ModelConfig, ScoreModel};
use itilt::schedules::{EtaSchedule, NoiseSchedule, TimeGrid, DEFAULT_T_MIN};
use itilt::tilting::tilt_target;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn base() -> GaussianMixture {
    GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![-2.0, 0.0], vec![2.0, 0.0]], 0.5).unwrap()
}

fn linear_reward() -> QuadraticReward {
    QuadraticReward::linear(vec![0.0, 4.0])
}

fn max_param_gap(a: &GaussianMixture, b: &GaussianMixture) -> f64 {
    let mut gap: f64 = 0.0;
    for (x, y) in a.weights().iter().zip(b.weights()) {
        gap = gap.max((x - y).abs());
    }
    for (x, y) in a.means().iter().zip(b.means()) {
        gap = gap.max((*x - y).amax());
    }
    for (x, y) in a.covariances().iter().zip(b.covariances()) {
        gap = gap.max((*x - y).amax());
    }
    gap
}

fn c1_closed_form_tilt() -> Verdict {
    let tilted = base().tilt_quadratic(&linear_reward(), 1.0).unwrap();
    let expected = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![-2.0, 2.0], vec![2.0, 2.0]], 0.5).unwrap();
    let gap = max_param_gap(&tilted, &expected);
    verdict(gap <= 1e-10, format!("max parameter error {gap:.2e} (tol 1e-10)"))
}

fn c2_path_compositionality() -> Verdict {
    let gm = base();
    let reward = linear_reward();
    let once = gm.tilt_quadratic(&reward, 1.0).unwrap();
    // A curved reward exercises the covariance and weight updates as well.
    let curved = QuadraticReward::new(
        DMatrix::from_row_slice(2, 2, &[-0.6, 0.2, 0.2, -0.3]),
        DVector::from_vec(vec![1.0, 4.0]),
        0.5,
    )
    .unwrap();
    let once_curved = gm.tilt_quadratic(&curved, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for n in [2usize, 5, 20] {
        let (mut a, mut b) = (gm.clone(), gm.clone());
        for _ in 0..n {
            a = a.tilt_quadratic(&reward, 1.0 / n as f64).unwrap();
            b = b.tilt_quadratic(&curved, 1.0 / n as f64).unwrap();
        }
        worst = worst.max(max_param_gap(&a, &once)).max(max_param_gap(&b, &once_curved));
    }
    verdict(
        worst <= 1e-9,
        format!("N in {{2,5,20}}: max parameter error {worst:.2e} (tol 1e-9)"),
    )
}

fn c3_first_order_remainder() -> Verdict {
    // The linear reward only shifts both components in y, which leaves the noised score exactly
    // linear in delta; a curved reward with an x-component gives a genuine second-order term.
    let gm = base();
    let schedule = NoiseSchedule::cosine();
    let reward = QuadraticReward::new(
        DMatrix::from_diagonal_element(2, 2, -0.5),
        DVector::from_vec(vec![1.0, 4.0]),
        0.0,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut probes = Vec::new();
    for _ in 0..20 {
        let t: f64 = rng.random_range(0.1..0.9);
        let (alpha, sigma) = schedule.eval(t).unwrap();
        let x0 = gm.sample(1, &mut rng);
        let xt: Vec<f64> = x0
            .row(0)
            .iter()
            .map(|&x| alpha * x + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let score = gm.exact_score(&schedule, t, &xt).unwrap();
        let cov = posterior_tilt_covariance_oracle(&gm, &reward, &schedule, t, &xt).unwrap();
        probes.push((t, xt, score, cov));
    }
    let deltas: Vec<f64> = (0..5).map(|j| 0.02 / f64::powi(2.0, j)).collect();
    let residuals: Vec<f64> = deltas
        .iter()
        .map(|&delta| {
            let tilted = gm.tilt_quadratic(&reward, delta).unwrap();
            probes
                .iter()
                .map(|(t, xt, score, cov)| {
                    let exact = tilted.exact_score(&schedule, *t, xt).unwrap();
                    exact
                        .iter()
                        .zip(score)
                        .zip(cov)
                        .map(|((e, s), c)| (e - s - delta * c).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum()
        })
        .collect();
    let ratios: Vec<f64> = residuals.windows(2).map(|w| w[0] / w[1]).collect();
    let pass = ratios.iter().all(|r| (3.5..=4.5).contains(r));
    verdict(
        pass,
        format!(
            "residual ratios per halving {:?} (want [3.5, 4.5]); residuals {:.3e}..{:.3e}",
            round(&ratios),
            residuals[0],
            residuals[4]
        ),
    )
}

fn round(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn c4_estimator_unbiased() -> Verdict {
    let gm = base();
    let schedule = NoiseSchedule::cosine();
    let teacher = ExactDenoiser::new(gm.clone(), schedule);
    let reward = linear_reward();
    let delta = 0.05;
    let n = 100_000;
    let mut details = Vec::new();
    let mut pass = true;
    for (k, (t, xt)) in [(0.5, [0.7, 0.3]), (0.2, [-1.5, 0.4]), (0.8, [0.1, -0.6])]
        .into_iter()
        .enumerate()
    {
        let posterior = gm.posterior(&schedule, t, &xt).unwrap();
        let x0 = posterior.sample(n, &mut ChaCha8Rng::seed_from_u64(40 + k as u64));
        let s_old = teacher.score(&xt, t).unwrap();
        let mut est = Array2::zeros((n, 2));
        for (i, row) in x0.rows().into_iter().enumerate() {
            let target = tilt_target(&teacher, &row.to_vec(), &xt, t, delta, &reward).unwrap();
            for j in 0..2 {
                est[[i, j]] = (target[j] - s_old[j]) / delta;
            }
        }
        let mean = est.mean_axis(Axis(0)).unwrap();
        let se = est.std_axis(Axis(0), 1.0) / (n as f64).sqrt();
        let oracle = posterior_tilt_covariance_oracle(&gm, &reward, &schedule, t, &xt).unwrap();
        let z: Vec<f64> = (0..2).map(|j| (mean[j] - oracle[j]).abs() / se[j]).collect();
        pass &= z.iter().all(|&z| z <= 3.0);
        details.push(format!("t={t}: |z|={:?}", round(&z)));
    }
    verdict(pass, format!("{} (want <= 3 SE, 1e5 draws)", details.join(", ")))
}

fn c5_gradients() -> Verdict {
    let config = ModelConfig {
        data_dim: 2,
        hidden_width: 8,
        hidden_layers: 2,
        fourier_features: 3,
        fourier_scale: 2.0,
    };
    let mut model = ScoreModel::new(config, NoiseSchedule::cosine(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    model
        .params_mut()
        .iter_mut()
        .for_each(|p| *p += rng.random_range(-0.3..0.3));
    let xs = Array2::from_shape_fn((6, 2), |(i, j)| (i as f64 * 0.7 - j as f64 * 1.3).sin() * 2.0);
    let ts = [0.05, 0.2, 0.35, 0.5, 0.75, 0.95];
    let weights = Array2::from_shape_fn((6, 2), |(i, j)| 1.0 + 0.1 * (i + 3 * j) as f64);
    let loss_of = |out: ndarray::ArrayView2<f64>| (&out * &out * &weights).sum();
    let (_, grad) = model
        .gradient(xs.view(), &ts, |out| Ok((loss_of(out), 2.0 * &out * &weights)))
        .unwrap();
    let h = 1e-5;
    let mut worst_excess: f64 = 0.0;
    for i in 0..model.num_params() {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let up = loss_of(model.predict_eps_batch(xs.view(), &ts).unwrap().view());
        model.params_mut()[i] = orig - h;
        let down = loss_of(model.predict_eps_batch(xs.view(), &ts).unwrap().view());
        model.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let tol = f64::max(1e-4, 1e-2 * fd.abs());
        worst_excess = worst_excess.max((fd - grad[i]).abs() / tol);
    }
    let grad_ok = worst_excess <= 1.0;

    let schedule = NoiseSchedule::cosine();
    let tilted = base().tilt_quadratic(&linear_reward(), 1.0).unwrap();
    let mut worst_score: f64 = 0.0;
    for gm in [base(), tilted] {
        for _ in 0..100 {
            let t: f64 = rng.random_range(0.02..1.0);
            let x = [rng.random_range(-4.0..4.0), rng.random_range(-3.0..5.0)];
            let noised = gm.noised(&schedule, t).unwrap();
            let score = gm.exact_score(&schedule, t, &x).unwrap();
            for j in 0..2 {
                let mut up = x;
                up[j] += 1e-5;
                let mut down = x;
                down[j] -= 1e-5;
                let fd = (noised.log_density(&up).unwrap() - noised.log_density(&down).unwrap()) / 2e-5;
                worst_score = worst_score.max((fd - score[j]).abs());
            }
        }
    }
    let score_ok = worst_score <= 1e-5;
    verdict(
        grad_ok && score_ok,
        format!(
            "network gradient: worst error / tolerance {worst_excess:.3} over {} params; exact score vs finite differences: max error {worst_score:.2e} at 200 points (tol 1e-5)",
            model.num_params()
        ),
    )
}

fn c6_sampler_fidelity() -> Verdict {
    let schedule = NoiseSchedule::cosine();
    let gm = base();
    let oracle = ExactDenoiser::new(gm.clone(), schedule);
    let grid = TimeGrid::uniform(200, DEFAULT_T_MIN).unwrap();
    let mut pass = true;
    let mut details = Vec::new();
    for eta_hat in [0.0, 1.0] {
        let etas = EtaSchedule::new(&schedule, &grid, eta_hat).unwrap();
        let xs = ddim_sample(&oracle, &grid, &etas, 10_000, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut mean_err: f64 = 0.0;
        let mut cov_err: f64 = 0.0;
        for (c, sign) in [(0usize, -1.0), (1, 1.0)] {
            let idx: Vec<usize> = (0..xs.nrows()).filter(|&i| xs[[i, 0]] * sign > 0.0).collect();
            let part = xs.select(Axis(0), &idx);
            let mean = part.mean_axis(Axis(0)).unwrap();
            let centred = &part - &mean;
            let cov = centred.t().dot(&centred) / (part.nrows() - 1) as f64;
            let mu = gm.means()[c];
            let sigma = gm.covariances()[c];
            for i in 0..2 {
                mean_err = mean_err.max((mean[i] - mu[i]).abs());
                for j in 0..2 {
                    cov_err = cov_err.max((cov[[i, j]] - sigma[(i, j)]).abs() / sigma[(i, i)].max(sigma[(j, j)]));
                }
            }
        }
        pass &= mean_err <= 0.05 && cov_err <= 0.10;
        details.push(format!(
            "eta_hat={eta_hat}: mean err {mean_err:.4}, cov rel err {:.1}%",
            100.0 * cov_err
        ));
    }
    verdict(
        pass,
        format!("{} (tol 0.05, 10%; K=200, 1e4 samples)", details.join("; ")),
    )
}

/// Shared state of the model-based criteria.
struct Trained {
    base: ScoreModel,
    base_metrics: MetricsRecord,
    base_seconds: f64,
    runs: Vec<(usize, TiltingRun, usize)>,
}

fn train_everything() -> Trained {
    let config = RunConfig::default();
    let clock = Instant::now();
    let (base, _) = train_base_model(&config).expect("base training");
    let base_seconds = clock.elapsed().as_secs_f64();
    let base_metrics = evaluate_base(&base, &config).expect("base evaluation");
    let mut runs = Vec::new();
    for n in [20usize, 50] {
        // Opaque closure: forward evaluation only, counted.
        let calls = Cell::new(0usize);
        let reward = |x: &[f64]| {
            calls.set(calls.get() + 1);
            4.0 * x[1]
        };
        let run = run_tilting(&base, &config, &reward, n, None).expect("tilting run");
        runs.push((n, run, calls.get()));
    }
    Trained {
        base,
        base_metrics,
        base_seconds,
        runs,
    }
}

fn c7_base_quality(t: &Trained) -> Verdict {
    let m = &t.base_metrics;
    let pass = m.mean_mse < 1e-2 && (2.8..=3.6).contains(&m.nll);
    verdict(
        pass,
        format!(
            "mean_mse {:.3e} (want < 1e-2), nll {:.4} nats (want [2.8, 3.6]), score rmse {:.4}; trained in {:.0} s",
            m.mean_mse, m.nll, m.rmse, t.base_seconds
        ),
    )
}

fn c8_end_to_end(t: &Trained) -> Verdict {
    let (_, run, _) = &t.runs[0];
    let mean = run.final_samples.mean_axis(Axis(0)).unwrap();
    let final_rmse = run.records.last().unwrap().rmse;
    let mut trace: Vec<f64> = run.records.iter().map(|r| r.rmse).collect();
    let peak = trace.iter().cloned().fold(0.0, f64::max);
    trace.sort_by(f64::total_cmp);
    let median = 0.5 * (trace[(trace.len() - 1) / 2] + trace[trace.len() / 2]);
    let mean_ok = mean[0].abs() <= 0.2 && (mean[1] - 2.0).abs() <= 0.2;
    let pass = mean_ok && final_rmse < 0.5 && peak <= 2.0 * median;
    // Informational only: the same error with the smallest noise levels left out.
    let config = RunConfig::default();
    let target = config.target().unwrap();
    let coarse = TimeGrid::uniform(50, 0.01).unwrap();
    let away_from_zero = rmse_score_error(
        &run.final_model,
        &target,
        &coarse,
        5000,
        RmseSampling::Exact,
        &mut ChaCha8Rng::seed_from_u64(8),
    )
    .unwrap();
    verdict(
        pass,
        format!(
            "N=20: final sample mean ({:.3}, {:.3}) (want (0, 2) +- 0.2), final rmse {final_rmse:.4} (want < 0.5; {away_from_zero:.4} over t in [0.01, 1]), trace max {peak:.4} vs 2 x median {:.4}",
            mean[0],
            mean[1],
            2.0 * median
        ),
    )
}

fn c9_runtime_linearity(t: &Trained) -> Verdict {
    let mut details = Vec::new();
    let mut pass = true;
    let totals = |f: fn(&MetricsRecord) -> f64| -> Vec<f64> {
        t.runs
            .iter()
            .map(|(_, run, _)| run.records.iter().map(f).sum())
            .collect()
    };
    for (name, f) in [
        (
            "sampling",
            (|r: &MetricsRecord| r.sampling_seconds) as fn(&MetricsRecord) -> f64,
        ),
        ("training", |r: &MetricsRecord| r.training_seconds),
    ] {
        // Cumulative time after k tilts, pooled over both runs, as a function of k.
        let (mut ks, mut ys) = (Vec::new(), Vec::new());
        for (_, run, _) in &t.runs {
            let mut acc = 0.0;
            for r in &run.records {
                acc += f(r);
                ks.push(r.tilt_index as f64);
                ys.push(acc);
            }
        }
        let (_, _, r2) = linear_fit(&ks, &ys);
        let tot = totals(f);
        let ratio = tot[1] / tot[0];
        pass &= r2 > 0.95 && (2.0..=3.1).contains(&ratio);
        details.push(format!(
            "{name}: N=20 {:.1} s, N=50 {:.1} s, ratio {ratio:.3}, R^2 {r2:.4}",
            tot[0], tot[1]
        ));
    }
    verdict(
        pass,
        format!("{} (want ratio [2, 3.1], R^2 > 0.95)", details.join("; ")),
    )
}

fn c10_gradient_free(t: &Trained) -> Verdict {
    let config = RunConfig::default();
    let mut pass = true;
    let mut details = Vec::new();
    for (n, _, calls) in &t.runs {
        let expected = n * config.tilt.samples_per_tilt;
        pass &= *calls == expected;
        details.push(format!("N={n}: {calls} reward calls (want {expected})"));
    }
    verdict(
        pass,
        format!(
            "{}; reward supplied as an opaque closure with no derivative access",
            details.join(", ")
        ),
    )
}

fn report(id: usize, name: &str, outcome: std::thread::Result<Verdict>, failures: &mut usize) {
    let (pass, detail) = match outcome {
        Ok(v) => (v.pass, v.detail),
        Err(panic) => (
            false,
            format!(
                "panicked: {}",
                panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
        ),
    };
    if !pass {
        *failures += 1;
    }
    // Written straight to the handle so the line shows even under captured output.
    let mut err = std::io::stderr();
    let _ = writeln!(
        err,
        "[{}] criterion {id:>2} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = err.flush();
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // Positional numbers select criteria; anything else (libtest flags) is ignored.
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| selected.is_empty() || selected.contains(&id);
    let mut failures = 0;
    let cheap: [(usize, &str, fn() -> Verdict); 6] = [
        (1, "closed-form tilt", c1_closed_form_tilt),
        (2, "path compositionality", c2_path_compositionality),
        (3, "first-order remainder", c3_first_order_remainder),
        (4, "single-sample estimator", c4_estimator_unbiased),
        (5, "gradients", c5_gradients),
        (6, "sampler fidelity", c6_sampler_fidelity),
    ];
    for (id, name, f) in cheap.into_iter().filter(|c| wanted(c.0)) {
        report(id, name, catch_unwind(f), &mut failures);
    }
    let heavy: [(usize, &str, fn(&Trained) -> Verdict); 4] = [
        (7, "base training quality", c7_base_quality),
        (8, "end-to-end tilting", c8_end_to_end),
        (9, "runtime linearity", c9_runtime_linearity),
        (10, "gradient-freedom", c10_gradient_free),
    ];
    let heavy: Vec<_> = heavy.into_iter().filter(|c| wanted(c.0)).collect();
    let trained = if heavy.is_empty() {
        Err(Box::new(()) as Box<dyn std::any::Any + Send>)
    } else {
        catch_unwind(train_everything)
    };
    for (id, name, f) in heavy {
        let outcome = match &trained {
            Ok(t) => catch_unwind(AssertUnwindSafe(|| f(t))),
            Err(_) => Ok(verdict(false, "shared training phase panicked".into())),
        };
        report(id, name, outcome, &mut failures);
    }
    if let Ok(t) = &trained {
        let _ = writeln!(std::io::stderr(), "base model: {} parameters", t.base.num_params());
    }
    let total = (1..=10).filter(|&id| wanted(id)).count();
    if failures > 0 {
        let _ = writeln!(std::io::stderr(), "acceptance: {failures} of {total} criteria failed");
        std::process::exit(1);
    }
    let _ = writeln!(std::io::stderr(), "acceptance: all {total} criteria passed");
}
