//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every criterion runs and prints, even
//! after a failure. Exit status is non-zero if any criterion fails.
//!
//! MNIST is read from `MNIST_DIR`, or `<workspace>/data/mnist` by default.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use otafl::channel::ChannelConfig;
use otafl::cli::{cmd_run, rate_passes, Overrides, TRACE_FILE};
use otafl::config::{Config, TaskConfig, TrainerConfig};
use otafl::data::{partition_equal, synth_dataset, MnistFiles};
use otafl::estimators::Variant;
use otafl::model::{eval_grad, finite_diff_grad, LossModel, ModelParams, Sample};
use otafl::rng::{keyed_rng, Stream};
use otafl::schedules::{
    theorem2_beta, theorem2_iterations, theorem4_beta, theorem4_iterations, FirstOrderInputs, Schedule, ZeroOrderInputs,
};
use otafl::trainer::{
    mean_grad_norm_curve, rate_sweep, run_replicates, run_training, trace_to_csv, Algorithm, RateSweepConfig, RunConfig,
    Task,
};
use otafl::verify::{
    calculator_ordering, dominance_checks, lemma1_quadratic, lemma1_scaling, lemma3_unbiasedness, Check, VerifySettings,
};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = otafl::Result<(bool, String)>;

fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR").map_or_else(|| workspace().join("data/mnist"), PathBuf::from)
}

fn summarize(checks: &[Check]) -> (bool, String) {
    let failed: Vec<&Check> = checks.iter().filter(|c| !c.passed).collect();
    let detail = match failed.first() {
        None => format!("{}/{} checks pass", checks.len(), checks.len()),
        Some(c) => format!("{}/{} checks pass; first failure: {}", checks.len() - failed.len(), checks.len(), c.line()),
    };
    (failed.is_empty(), detail)
}

fn criterion_1() -> Outcome {
    let mut rng = keyed_rng(2024, Stream::Aux, &[1]);
    let mut worst: f64 = 0.0;
    for t in 0..100 {
        let d = rng.random_range(1..=50);
        let loss = if t % 2 == 0 {
            LossModel::Quadratic
        } else {
            LossModel::NonconvexLogistic { lambda: 0.1 }
        };
        let mut n = || rng.sample::<f64, _>(StandardNormal);
        let theta = ModelParams::new((0..d).map(|_| n()).collect());
        let sample = Sample::new((0..d).map(|_| n()).collect(), if n() > 0.0 { 1.0 } else { -1.0 });
        let g = eval_grad(&loss, &theta, &sample)?;
        let fd = finite_diff_grad(&loss, &theta, &sample, 1e-5)?;
        let err = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        worst = worst.max(err / scale);
    }
    Ok((worst <= 1e-5, format!("worst relative error {worst:.2e} over 100 triples (tol 1e-5)")))
}

fn criterion_2() -> Outcome {
    let s = VerifySettings::default();
    Ok(summarize(&lemma3_unbiasedness(Variant::Efofl, &s, &mut Vec::new())?))
}

fn criterion_3a() -> Outcome {
    let c = lemma1_quadratic(&VerifySettings::default(), &mut Vec::new())?;
    Ok((c.passed, c.detail))
}

fn criterion_3b() -> Outcome {
    let c = lemma1_scaling(&VerifySettings::default(), &mut Vec::new())?;
    Ok((c.passed, c.detail))
}

fn criterion_4() -> Outcome {
    let s = VerifySettings::default();
    let mut checks = Vec::new();
    for v in Variant::ALL {
        checks.extend(dominance_checks(v, &s, &mut Vec::new())?);
    }
    checks.extend(calculator_ordering(&s)?);
    Ok(summarize(&checks))
}

fn criterion_5() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["quadratic-rate-ezofl.toml", "quadratic-rate-efofl.toml"] {
        let cfg = Config::from_file(workspace().join("configs").join(name))?;
        let rate = cfg.rate.clone().expect("rate table");
        let task = cfg.build_task()?;
        let sweep = rate_sweep(
            &RateSweepConfig {
                base: cfg.run_config(),
                horizons: rate.horizons,
                replicates: 20,
                eta0: rate.eta0,
                gamma0: rate.gamma0,
            },
            &task,
        )?;
        let pass = rate_passes(sweep.fit.slope, sweep.divergence_fraction());
        ok &= pass;
        parts.push(format!(
            "{} slope {:.3} +/- {:.3}",
            cfg.trainer.algorithm.name(),
            sweep.fit.slope,
            sweep.fit.slope_se
        ));
    }
    Ok((ok, format!("{} (range [-0.8, -0.3], K up to 2000, R = 20)", parts.join(", "))))
}

fn criterion_6() -> Outcome {
    let unit_zo = ZeroOrderInputs {
        delta_hat: 1.0,
        c1: 1.0,
        c3: 0.0,
        mu: 1.0,
        moment_bound: 0.0,
        eta0: 1.0,
        gamma0: 1.0,
    };
    let unit_fo = FirstOrderInputs {
        delta_hat: 1.0,
        b1: 1.0,
        mu: 1.0,
        moment_bound: 0.0,
        eta0: 1.0,
    };
    let k2 = theorem2_iterations(0.1, 0.1, &unit_zo)?.rounds;
    let k4 = theorem4_iterations(0.1, 0.1, &unit_fo)?.rounds;
    // 0.5 / 0.25 + 0.25 · 3 · 4 / 2 = 3.5, so K = (3.5 / 0.02)² = 30625.
    let k4b = theorem4_iterations(
        0.2,
        0.1,
        &FirstOrderInputs {
            delta_hat: 0.5,
            b1: 1.0,
            mu: 3.0,
            moment_bound: 4.0,
            eta0: 0.25,
        },
    )?
    .rounds;
    let mut ok = k2 == 40_000 && k4 == 10_000 && k4b == 30_625;
    let mut rng = keyed_rng(6, Stream::Aux, &[]);
    let mut roundtrips = 0;
    for _ in 0..200 {
        let zo = ZeroOrderInputs {
            delta_hat: rng.random_range(0.1..10.0),
            c1: 2.0,
            c3: rng.random_range(0.0..5.0),
            mu: rng.random_range(0.1..10.0),
            moment_bound: rng.random_range(0.0..100.0),
            eta0: rng.random_range(0.01..1.0),
            gamma0: rng.random_range(0.01..1.0),
        };
        let fo = FirstOrderInputs {
            delta_hat: zo.delta_hat,
            b1: 1.0,
            mu: zo.mu,
            moment_bound: zo.moment_bound,
            eta0: zo.eta0,
        };
        let (eps, beta) = (rng.random_range(0.05..0.9), rng.random_range(0.05..0.9));
        let a = theorem2_iterations(eps, beta, &zo)?.rounds;
        let b = theorem4_iterations(eps, beta, &fo)?.rounds;
        let good = |bk: f64, bk1: f64| bk <= beta * (1.0 + 1e-9) && bk1 > beta * (1.0 - 1e-9);
        if (a <= 1 || good(theorem2_beta(eps, a, &zo)?, theorem2_beta(eps, a - 1, &zo)?))
            && (b <= 1 || good(theorem4_beta(eps, b, &fo)?, theorem4_beta(eps, b - 1, &fo)?))
        {
            roundtrips += 1;
        }
    }
    ok &= roundtrips == 200;
    Ok((
        ok,
        format!("unit K = {k2} (zero-order), {k4} (first-order), plug-in {k4b} (want 30625); beta<->K round trips {roundtrips}/200"),
    ))
}

fn synthetic(algorithm: Algorithm, async_fraction: f64, d: usize, rounds: u64) -> Config {
    Config {
        task: TaskConfig::Synthetic {
            n: 500,
            d,
            test_n: 0,
            lambda: 0.1,
            bias: false,
            theta0: 0.0,
        },
        trainer: TrainerConfig {
            rounds,
            batch: 10,
            async_fraction,
            ..TrainerConfig::new(algorithm)
        },
        schedule: Schedule::default(),
        channel: ChannelConfig::new(1.0, 0.1),
        rate: None,
        bound: None,
        verify: None,
        manifest: None,
    }
}

fn criterion_7() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (sync, asy) in [(Algorithm::Ezofl, Algorithm::EzoflAsync), (Algorithm::Efofl, Algorithm::EfoflAsync)] {
        let c = synthetic(sync, 0.0, 10, 300);
        let task = c.build_task()?;
        let a = trace_to_csv(&run_training(&c.run_config(), &task)?.trace);
        let b = trace_to_csv(&run_training(&synthetic(asy, 0.0, 10, 300).run_config(), &task)?.trace);
        ok &= a == b;
        parts.push(format!("{} N2 empty identical: {}", asy.name(), a == b));
    }
    for asy in [Algorithm::EzoflAsync, Algorithm::EfoflAsync] {
        let c = synthetic(asy, 0.3, 10, 1000);
        let task = c.build_task()?;
        let runs = run_replicates(&c.run_config(), &task, 20).into_iter().collect::<Result<Vec<_>, _>>()?;
        let curve = mean_grad_norm_curve(&runs);
        let early = curve.iter().find(|p| p.0 == 100).map_or(f64::NAN, |p| p.1);
        let last = runs.iter().map(|r| r.final_grad_norm_sq).sum::<f64>() / runs.len() as f64;
        ok &= last < early;
        parts.push(format!("{} mean |grad F|^2 K/10 {early:.3e} -> K {last:.3e}", asy.name()));
    }
    Ok((ok, parts.join("; ")))
}

fn criterion_8() -> Outcome {
    let dir = mnist_dir();
    if !MnistFiles::in_dir(&dir).exist() {
        return Ok((false, format!("MNIST IDX files not found in {} (set MNIST_DIR)", dir.display())));
    }
    let base = Config::mnist_default(&dir, Algorithm::Ezofl);
    let task = base.build_task()?;
    let mut acc = Vec::new();
    for a in [Algorithm::Ezofl, Algorithm::Efofl, Algorithm::Fedavg] {
        let mut c = base.clone();
        c.trainer.algorithm = a;
        let out = run_training(&c.run_config(), &task)?;
        acc.push(out.final_accuracy.unwrap_or(f64::NAN));
    }
    let (z, f, avg) = (acc[0], acc[1], acc[2]);
    let ok = z > 0.9 && f > 0.9 && avg - z <= 0.10 && avg - f <= 0.10;
    Ok((
        ok,
        format!("test accuracy at K = 3000: ezofl {z:.4}, efofl {f:.4}, fedavg {avg:.4} (need > 0.90 and fedavg within +0.10)"),
    ))
}

fn criterion_9() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for d in [10, 784, 5000] {
        let ds = synth_dataset(40, d, 9)?;
        let task = Task::new(
            LossModel::default(),
            partition_equal(&ds, 4, 9)?,
            None,
            ModelParams::zeros(d),
        )?;
        for a in Algorithm::ALL {
            let cfg = RunConfig {
                algorithm: a,
                devices: 4,
                rounds: 3,
                async_fraction: if a.is_async() { 0.5 } else { 0.0 },
                schedule: Schedule::Constant { eta: 0.01, gamma: 0.01 },
                ..RunConfig::default()
            };
            let out = run_training(&cfg, &task)?;
            let t = &out.trace[0];
            let want = match a {
                Algorithm::Fedavg => (0, d, d),
                _ if a.is_async() => (3, 2, 1),
                _ => (2, 2, 1),
            };
            let got = (t.uplink_slots, t.uplink_scalars_per_device, t.downlink_scalars);
            let slot3_traced = t.slot3.is_some() == (want.0 == 3);
            ok &= got == want && slot3_traced && out.trace.iter().all(|r| (r.uplink_slots, r.uplink_scalars_per_device, r.downlink_scalars) == got);
            if d == 784 {
                parts.push(format!("{} {:?}", a.name(), got));
            }
        }
    }
    Ok((ok, format!("(slots, uplink scalars/device, downlink scalars) at d = 784: {}; same for d = 10, 5000", parts.join(", "))))
}

fn criterion_10() -> Outcome {
    let config = workspace().join("configs/quadratic-run.toml");
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    let mut traces = Vec::new();
    for d in &dirs {
        let o = Overrides {
            seed: Some(7),
            out: Some(d.path().to_path_buf()),
            ..Overrides::default()
        };
        let res = cmd_run(&config, &o);
        if res.code != 0 {
            return Ok((false, res.report));
        }
        traces.push(std::fs::read(d.path().join(TRACE_FILE))?);
    }
    Ok((traces[0] == traces[1], format!("two invocations, {} bytes each, identical = {}", traces[0].len(), traces[0] == traces[1])))
}

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome, Duration); 11] = [
        ("1", "gradient correctness", criterion_1, Duration::from_secs(5)),
        ("2", "EFOFL unbiasedness", criterion_2, Duration::from_secs(60)),
        ("3a", "EZOFL bias vanishes on quadratic", criterion_3a, Duration::from_secs(60)),
        ("3b", "EZOFL bias halves with gamma", criterion_3b, Duration::from_secs(60)),
        ("4", "second-moment bound dominance", criterion_4, Duration::from_secs(180)),
        ("5", "rate slope", criterion_5, Duration::from_secs(300)),
        ("6", "iteration-count calculators", criterion_6, Duration::from_secs(5)),
        ("7", "async degeneracy and convergence", criterion_7, Duration::from_secs(300)),
        ("8", "MNIST end-to-end accuracy", criterion_8, Duration::from_secs(600)),
        ("9", "communication accounting", criterion_9, Duration::from_secs(60)),
        ("10", "determinism", criterion_10, Duration::from_secs(60)),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, f, limit) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let res = f();
        let took = start.elapsed();
        let (pass, detail) = match res {
            Ok((p, d)) => (p && took <= limit, d),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {id} ({name}): {detail} [{:.1}s, limit {}s]",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("acceptance: {failed} criteria failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
