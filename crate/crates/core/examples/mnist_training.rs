//! EZOFL and EFOFL against FedAvg on MNIST 0 vs 1 with N = 10 devices,
//! `ηₖ = 0.5(1+k)^(−1/2)`, `γₖ = 2.5(1+k)^(−1/4)`, σ_h = 1, σ_n = 0.1.
//!
//!     cargo run --release --example mnist_training -- data/mnist 3000
//!
//! Prints test accuracy every 300 rounds and the communication totals.

use otafl::config::Config;
use otafl::data::MnistFiles;
use otafl::trainer::{run_training, Algorithm};

fn main() -> otafl::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args
        .next()
        .or_else(|| std::env::var("MNIST_DIR").ok())
        .unwrap_or_else(|| "data/mnist".into());
    let rounds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3000);
    if !MnistFiles::in_dir(&dir).exist() {
        eprintln!("no MNIST IDX files in {dir}");
        std::process::exit(1);
    }

    let mut task = None;
    for algorithm in [Algorithm::Ezofl, Algorithm::Efofl, Algorithm::Fedavg] {
        let mut cfg = Config::mnist_default(&dir, algorithm);
        cfg.trainer.rounds = rounds;
        let task = match &task {
            Some(t) => t,
            None => task.insert(cfg.build_task()?),
        };
        let out = run_training(&cfg.run_config(), task)?;
        let curve: Vec<String> = out
            .trace
            .iter()
            .filter(|t| t.k % 300 == 0)
            .filter_map(|t| t.test_acc.map(|a| format!("{a:.3}")))
            .collect();
        println!("{:<7} acc every 300 rounds: {}", algorithm.name(), curve.join(" "));
        println!(
            "        final acc {:.4}, uplink scalars {}, downlink scalars {}",
            out.final_accuracy.unwrap_or(f64::NAN),
            out.comm.uplink_scalars,
            out.comm.downlink_scalars
        );
    }
    Ok(())
}
