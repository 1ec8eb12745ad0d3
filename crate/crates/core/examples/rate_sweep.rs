//! Empirical convergence rate on the quadratic task. For each horizon `K` the
//! 20 replicates run with the constant steps prescribed for `K`, and the fitted
//! slope of `min_k E‖∇F(θₖ)‖²` against `K` is compared with −1/2.
//!
//!     cargo run --release --example rate_sweep

use otafl::config::Config;
use otafl::trainer::{rate_sweep, RateSweepConfig};

fn main() -> otafl::Result<()> {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    for name in ["quadratic-rate-ezofl.toml", "quadratic-rate-efofl.toml"] {
        let cfg = Config::from_file(format!("{root}/{name}"))?;
        let rate = cfg.rate.clone().expect("config has a [rate] table");
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
        println!("{}:", cfg.trainer.algorithm.name());
        for p in &sweep.points {
            println!("  K = {:>5}  min_k E|grad F|^2 = {:.4e}", p.horizon, p.min_mean_grad_norm_sq);
        }
        println!("  slope {:.3} +/- {:.3}", sweep.fit.slope, sweep.fit.slope_se);
    }
    Ok(())
}
