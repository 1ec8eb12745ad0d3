//! Iteration counts `K(ε, β)` and rate bounds for the four algorithms, first with
//! unit constants, then with constants derived from a quadratic task.
//!
//!     cargo run --release --example theorem_bounds

use otafl::cli::bound_table;
use otafl::config::{BoundConfig, Config};
use otafl::schedules::{rate_bound_thm2, theorem2_beta, theorem2_iterations, ZeroOrderInputs};

fn main() -> otafl::Result<()> {
    let unit = ZeroOrderInputs {
        delta_hat: 1.0,
        c1: 1.0,
        c3: 0.0,
        mu: 1.0,
        moment_bound: 0.0,
        eta0: 1.0,
        gamma0: 1.0,
    };
    let k = theorem2_iterations(0.1, 0.1, &unit)?;
    println!("unit constants, eps = beta = 0.1: K = {} (real {:.3})", k.rounds, k.real);
    println!("beta back from K: {:.6}", theorem2_beta(0.1, k.rounds, &unit)?);
    for kk in [100, 10_000, 1_000_000] {
        println!("  rate bound after K = {kk:>7}: {:.4e}", rate_bound_thm2(kk, &unit)?);
    }

    let explicit = BoundConfig {
        delta_hat: Some(1.0),
        mu: Some(1.0),
        c1: Some(1.0),
        c3: Some(0.0),
        b1: Some(1.0),
        eta0: Some(1.0),
        gamma0: Some(1.0),
        gamma: None,
        c: Some(1.0),
        c2: Some(1.0),
        c_prime: Some(2.0),
        c2_prime: Some(2.0),
    };
    println!("\nexplicit constants:");
    for r in bound_table(0.1, 0.1, &explicit.explicit_inputs()?)? {
        println!("  {:<12} {:<3} = {:<4} K = {}", r.algorithm, r.moment_name, r.moment_bound, r.iterations.rounds);
    }

    let text = r#"
[task]
kind = "quadratic"
n = 60
d = 5
[trainer]
algorithm = "ezofl-async"
devices = 6
async_fraction = 0.5
[schedule]
kind = "constant-thm2"
eta0 = 0.1
gamma0 = 0.25
horizon = 2000
"#;
    let cfg = Config::from_toml_str(text, std::path::Path::new("."))?;
    let task = cfg.build_task()?;
    let k = cfg.constants(&task)?;
    println!("\nquadratic task: L = {:.3}, c1 = {}, c3 = {:.3}, delta_hat = {:.3}", k.mu(), k.c1(), k.c3(), k.delta_hat);
    for r in bound_table(0.5, 0.5, &cfg.bound_inputs()?)? {
        println!(
            "  {:<12} {:<3} = {:.3e}  K = {:.3e}",
            r.algorithm, r.moment_name, r.moment_bound, r.iterations.real
        );
    }
    Ok(())
}
