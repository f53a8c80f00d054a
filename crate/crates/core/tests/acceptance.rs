//! Acceptance criteria, one PASS/FAIL line each. Criterion 9 needs a Boston
//! housing CSV in `DWP_BOSTON_CSV` and is informational only.

use std::time::{Duration, Instant};

use dwp::harness::verify::{factor_invariance_z, prior_equivalence_z, run_check, VerifyOptions};
use dwp::harness::{run_experiment, DatasetSpec, ExperimentSpec};
use dwp::inference::{elbo_and_grad, elbo_batch, train, TrainOptions, TrainSchedule};
use dwp::kernel::KernelConfig;
use dwp::model::{dwp_prior_sample, DwpModel, ModelConfig, StlFlags};
use dwp::{Matrix, RngStream};

const DRAWS: usize = 100_000;

struct Verdict {
    id: u8,
    name: &'static str,
    /// `None` when skipped.
    passed: Option<bool>,
    gate: bool,
    detail: String,
}

fn verdict(id: u8, name: &'static str, passed: bool, detail: String) -> Verdict {
    Verdict {
        id,
        name,
        passed: Some(passed),
        gate: true,
        detail,
    }
}

fn opts() -> VerifyOptions {
    VerifyOptions {
        seed: 20_240_101,
        draws: DRAWS,
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn singular_density() -> Verdict {
    let t = Instant::now();
    let r = run_check("singular-wishart-equivalence", &opts()).unwrap();
    let el = t.elapsed();
    verdict(
        1,
        "generalized Wishart matches closed-form singular/full-rank density",
        r.passed && el < Duration::from_secs(1),
        format!("max |delta| {:.2e} (< 1e-8), {:.3}s (< 1s)", r.measured, secs(el)),
    )
}

fn jacobians() -> Verdict {
    let t = Instant::now();
    let a = run_check("logjac-chol-product", &opts()).unwrap();
    let b = run_check("logjac-left-mult", &opts()).unwrap();
    let el = t.elapsed();
    verdict(
        2,
        "log-Jacobians match finite-difference determinants",
        a.passed && b.passed && el < Duration::from_secs(10),
        format!(
            "chol-product {:.2e}, left-mult {:.2e} (< 1e-5), {:.2}s (< 10s)",
            a.measured,
            b.measured,
            secs(el)
        ),
    )
}

fn prior_equivalence() -> Verdict {
    let t = Instant::now();
    let mut rng = RngStream::new(opts().seed, 3);
    let (zm, zv) = prior_equivalence_z(DRAWS, &mut rng).unwrap();
    let el = t.elapsed();
    verdict(
        3,
        "Wishart-process and feature-space priors agree in moments",
        zm <= 4.0 && zv <= 4.0 && el < Duration::from_secs(120),
        format!("max z mean {zm:.2}, var {zv:.2} (<= 4), {DRAWS} draws, {:.1}s (< 120s)", secs(el)),
    )
}

fn factor_invariance() -> Verdict {
    let mut rng = RngStream::new(opts().seed, 4);
    let (zm, zv) = factor_invariance_z(DRAWS, &mut rng).unwrap();
    verdict(
        4,
        "conditional test-point moments do not depend on the inducing factor",
        zm <= 5.0 && zv <= 5.0,
        format!("max z mean {zm:.2}, var {zv:.2} (<= 5), {DRAWS} draws per factor"),
    )
}

fn wishart_moments() -> Verdict {
    let m = run_check("wishart-mean", &opts()).unwrap();
    let v = run_check("wishart-variance", &opts()).unwrap();
    verdict(
        5,
        "sampled Wishart mean and variance match closed forms",
        m.passed && v.passed,
        format!("max z mean {:.2}, var {:.2} (<= 4), {DRAWS} draws", m.measured, v.measured),
    )
}

fn gradients() -> Verdict {
    let r = run_check("elbo-gradcheck", &opts()).unwrap();
    verdict(
        6,
        "single-layer ELBO passes finite-difference gradcheck",
        r.passed,
        format!("worst rel err {:.2e} (< 1e-3); {}", r.measured, r.detail),
    )
}

fn layer_fixture(p: usize) -> (DwpModel, Matrix, Matrix) {
    let mut rng = RngStream::new(7, p as u64);
    let x = Matrix::from_fn(8, 3, |_, _| rng.normal());
    let y = Matrix::from_fn(8, 1, |i, _| x[(i, 0)].sin());
    let mut cfg = ModelConfig::new(1, p, 3);
    cfg.widths = vec![p];
    (DwpModel::init(cfg, &x, &mut rng).unwrap(), x, y)
}

/// Fastest per-call time over several timing windows.
fn time_per_call(mut f: impl FnMut()) -> f64 {
    for _ in 0..3 {
        f();
    }
    let mut best = f64::INFINITY;
    for _ in 0..7 {
        let t = Instant::now();
        let mut n = 0u32;
        while t.elapsed() < Duration::from_millis(60) {
            f();
            n += 1;
        }
        best = best.min(secs(t.elapsed()) / n as f64);
    }
    best
}

fn complexity() -> Verdict {
    let sizes = [8usize, 16, 32, 64];
    let times: Vec<f64> = sizes
        .iter()
        .map(|&p| {
            let (m, x, y) = layer_fixture(p);
            let rng = RngStream::new(1, 0);
            time_per_call(|| {
                elbo_and_grad(&m, &x, &y, 8, 1, 1.0, StlFlags::ALL, &rng).unwrap();
            })
        })
        .collect();
    let (coef, worst) = fit_cost_model(&sizes, &times, true);
    let (_, worst_quadratic) = fit_cost_model(&sizes, &times, false);
    let [a, c, b] = coef;
    let shown: Vec<String> = sizes.iter().zip(&times).map(|(p, t)| format!("{p}:{:.1}us", t * 1e6)).collect();
    verdict(
        7,
        "per-layer ELBO time is cubic in the inducing count",
        b > 0.0 && worst <= 0.2,
        format!(
            "{} | fit a={:.1}us c={:.2e}s b={:.2e}s, worst dev {:.1}% (<= 20%); best fit without the cubic term {:.1}%",
            shown.join(" "),
            a * 1e6,
            c,
            b,
            worst * 100.0,
            worst_quadratic * 100.0
        ),
    )
}

/// Nonnegative relative least squares for `t = a + c P^2 + b P^3` (the
/// `P_t P^2` conditional term at fixed batch size plus fixed overhead).
/// Returns `[a, c, b]` and the worst relative deviation; `cubic = false`
/// pins `b` to zero.
fn fit_cost_model(sizes: &[usize], times: &[f64], cubic: bool) -> ([f64; 3], f64) {
    let basis = |p: f64| [1.0, p * p, p * p * p];
    let mut best = ([0.0; 3], f64::INFINITY);
    let supports: &[u8] = if cubic { &[0b111, 0b101, 0b110, 0b100] } else { &[0b110, 0b010] };
    for &mask in supports {
        let idx: Vec<usize> = (0..3).filter(|k| mask & (1 << (2 - k)) != 0).collect();
        let rows: Vec<(Vec<f64>, f64)> = sizes
            .iter()
            .zip(times)
            .map(|(&p, &t)| {
                let f = basis(p as f64);
                (idx.iter().map(|&k| f[k] / t).collect(), 1.0)
            })
            .collect();
        let m = idx.len();
        let mut ata = nalgebra::DMatrix::<f64>::zeros(m, m);
        let mut atb = nalgebra::DVector::<f64>::zeros(m);
        for (r, rhs) in &rows {
            for i in 0..m {
                atb[i] += r[i] * rhs;
                for j in 0..m {
                    ata[(i, j)] += r[i] * r[j];
                }
            }
        }
        let Some(sol) = ata.lu().solve(&atb) else { continue };
        if sol.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut coef = [0.0; 3];
        for (i, &k) in idx.iter().enumerate() {
            coef[k] = sol[i];
        }
        let worst = sizes
            .iter()
            .zip(times)
            .map(|(&p, &t)| {
                let f = basis(p as f64);
                let fit: f64 = (0..3).map(|k| coef[k] * f[k]).sum();
                (t - fit).abs() / fit
            })
            .fold(0.0f64, f64::max);
        if worst < best.1 {
            best = (coef, worst);
        }
    }
    best
}

fn training_sanity() -> Verdict {
    let t0 = Instant::now();
    let n = 256;
    let mut rng = RngStream::new(8, 0);
    let x = Matrix::from_fn(n, 2, |_, _| rng.normal());
    let kernels = vec![
        KernelConfig::with_ard(1.0, vec![2f64.sqrt(); 2]).unwrap(),
        KernelConfig::new(1.0, 1.0).unwrap(),
        KernelConfig::new(1.0, 1.0).unwrap(),
    ];
    let prior = dwp_prior_sample(&x, &[2, 2], &kernels, 1e-6, 1, &mut rng).unwrap();
    let y = Matrix::from_fn(n, 1, |i, _| prior.f[(i, 0)] + 0.1 * rng.normal());

    let cfg = ModelConfig::new(2, 20, 2);
    let init = DwpModel::init(cfg.clone(), &x, &mut RngStream::new(9, 0)).unwrap();
    // independent replicates of the reported initial estimate
    let probe = RngStream::new(10, 0);
    let initial: Vec<f64> = (0..20)
        .map(|k| elbo_batch(&init, &x, &y, n, cfg.eval_samples, &probe.split(k)).unwrap().total)
        .collect();
    let mean0 = initial.iter().sum::<f64>() / initial.len() as f64;
    let sd0 = (initial.iter().map(|v| (v - mean0).powi(2)).sum::<f64>() / (initial.len() - 1) as f64).sqrt();

    let sched = TrainSchedule {
        steps: 2000,
        lr_drop_step: 1000,
        ..TrainSchedule::default()
    };
    let opts = TrainOptions {
        seed: 11,
        batch_size: cfg.batch_size,
        samples: cfg.train_samples,
    };
    let run = || {
        let mut m = init.clone();
        let trace = train(&mut m, &x, &y, &sched, &opts, |_| Ok(())).unwrap();
        let lines: Vec<String> = trace.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        (trace, lines.join("\n"))
    };
    let (trace, text_a) = run();
    let (_, text_b) = run();
    let tail = &trace[trace.len() - 100..];
    let smoothed = tail.iter().map(|r| r.elbo).sum::<f64>() / tail.len() as f64;
    let gain = smoothed - mean0;
    let reproducible = text_a == text_b;
    let el = t0.elapsed();
    verdict(
        8,
        "training raises the ELBO well beyond noise and is reproducible",
        gain > 5.0 * sd0 && reproducible && el < Duration::from_secs(900),
        format!(
            "ELBO {mean0:.1} -> {smoothed:.1} (gain {gain:.1} > 5 x sd {sd0:.1} of the {}-sample estimate), trace identical: {reproducible}, {:.0}s",
            cfg.eval_samples,
            secs(el)
        ),
    )
}

const REFERENCE_ELBO: f64 = -0.33;
const REFERENCE_LL: f64 = -2.40;

fn boston_reference() -> Verdict {
    let Ok(path) = std::env::var("DWP_BOSTON_CSV") else {
        return Verdict {
            id: 9,
            name: "boston depth-2 ELBO/N near reference (informational)",
            passed: None,
            gate: false,
            detail: "set DWP_BOSTON_CSV to a numeric CSV with the target in the last column".into(),
        };
    };
    let mut config = ModelConfig::new(2, 100, 1);
    config.widths = vec![];
    let spec = ExperimentSpec {
        data: DatasetSpec::new(path),
        config,
        schedule: TrainSchedule::default(),
        seed: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    match run_experiment(&spec, dir.path(), |_| {}) {
        Ok(r) => {
            let elbo = r.final_elbo_per_n.unwrap_or(f64::NAN);
            Verdict {
                id: 9,
                name: "boston depth-2 ELBO/N near reference (informational)",
                passed: Some((elbo - REFERENCE_ELBO).abs() <= 0.15),
                gate: false,
                detail: format!(
                    "ELBO/N {elbo:.3} vs {REFERENCE_ELBO} (+-0.15); test LL {:.3} vs {REFERENCE_LL}; one split",
                    r.test_ll.unwrap_or(f64::NAN)
                ),
            }
        }
        Err(e) => Verdict {
            id: 9,
            name: "boston depth-2 ELBO/N near reference (informational)",
            passed: Some(false),
            gate: false,
            detail: format!("run failed: {e}"),
        },
    }
}

fn main() {
    // `cargo test -- --list` and friends probe test binaries
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [fn() -> Verdict; 9] = [
        singular_density,
        jacobians,
        prior_equivalence,
        factor_invariance,
        wishart_moments,
        gradients,
        complexity,
        training_sanity,
        boston_reference,
    ];
    let mut failed = 0;
    for c in criteria {
        let v = c();
        let tag = match v.passed {
            None => "SKIP",
            Some(true) => "PASS",
            Some(false) => "FAIL",
        };
        println!("{tag} [{}] {} :: {}", v.id, v.name, v.detail);
        if v.gate && v.passed == Some(false) {
            failed += 1;
        }
    }
    println!("acceptance: {} gating criteria failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
