//! The `run` command through the library: same config, same trace bytes as
//! `otafl run --config configs/quadratic-run.toml`.
//!
//!     cargo run --release --example run_from_config

use otafl::cli::{cmd_run, Overrides, TRACE_FILE};
use otafl::config::Config;
use otafl::trainer::{run_training, trace_to_csv};

fn main() -> otafl::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/quadratic-run.toml");
    let cfg = Config::from_file(path)?;
    let task = cfg.build_task()?;
    let out = run_training(&cfg.run_config(), &task)?;
    let lib_csv = trace_to_csv(&out.trace);
    println!("{} rounds, final |grad F|^2 = {:.4e}", out.trace.len(), out.final_grad_norm_sq);

    let dir = std::env::temp_dir().join(format!("otafl-example-{}", std::process::id()));
    let o = Overrides {
        out: Some(dir.clone()),
        overwrite: true,
        ..Overrides::default()
    };
    let res = cmd_run(path.as_ref(), &o);
    print!("{}", res.report);
    let cli_csv = std::fs::read_to_string(dir.join(TRACE_FILE))?;
    println!("library and command traces identical: {}", lib_csv == cli_csv);
    println!("manifest:\n{}", std::fs::read_to_string(dir.join("manifest.toml"))?);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
