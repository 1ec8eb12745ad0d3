//! Late devices: with no late device the async protocol reproduces the sync
//! trace bit for bit; with 30% late devices both async algorithms still reduce
//! `‖∇F‖²` under the diminishing step sizes.
//!
//!     cargo run --release --example async_devices

use otafl::config::{Config, TaskConfig, TrainerConfig};
use otafl::trainer::{mean_grad_norm_curve, run_replicates, run_training, trace_to_csv, Algorithm};
use otafl::channel::ChannelConfig;
use otafl::schedules::Schedule;

fn config(algorithm: Algorithm, async_fraction: f64) -> Config {
    Config {
        task: TaskConfig::Synthetic {
            n: 500,
            d: 10,
            test_n: 0,
            lambda: 0.1,
            bias: false,
            theta0: 0.0,
        },
        trainer: TrainerConfig {
            rounds: 1000,
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

fn main() -> otafl::Result<()> {
    for (sync, asy) in [(Algorithm::Ezofl, Algorithm::EzoflAsync), (Algorithm::Efofl, Algorithm::EfoflAsync)] {
        let c = config(sync, 0.0);
        let task = c.build_task()?;
        let a = trace_to_csv(&run_training(&c.run_config(), &task)?.trace);
        let b = trace_to_csv(&run_training(&config(asy, 0.0).run_config(), &task)?.trace);
        println!("{} with no late device: traces identical = {}", asy.name(), a == b);
    }

    for asy in [Algorithm::EzoflAsync, Algorithm::EfoflAsync] {
        let c = config(asy, 0.3);
        let task = c.build_task()?;
        let runs: Vec<_> = run_replicates(&c.run_config(), &task, 20).into_iter().collect::<Result<_, _>>()?;
        let curve = mean_grad_norm_curve(&runs);
        let k = c.trainer.rounds;
        let at = |round: u64| curve.iter().find(|p| p.0 == round).map(|p| p.1);
        let early = at(k / 10).unwrap_or(f64::NAN);
        let last = runs.iter().map(|r| r.final_grad_norm_sq).sum::<f64>() / runs.len() as f64;
        println!(
            "{}: mean |grad F|^2 at k=0 {:.4e}, k=K/10 {:.4e}, k=K {:.4e} -> decreased = {}",
            asy.name(),
            at(0).unwrap_or(f64::NAN),
            early,
            last,
            last < early
        );
        let slots: Vec<usize> = runs[0].trace.iter().take(8).map(|t| t.uplink_slots).collect();
        println!("  minislots used in the first rounds: {slots:?}");
    }
    Ok(())
}
