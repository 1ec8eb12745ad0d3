//! Command implementations behind the `otafl` binary.
//!
//! Each `cmd_*` function is callable from library code and returns the exit code,
//! the text report and the files it wrote. The binary only parses arguments and
//! prints.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 divergence, 3 verification failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{BoundConfig, BoundInputs, Config, RateConfig, RateMode};
use crate::estimators::moments_to_csv;
use crate::schedules::{theorem2_beta, theorem2_iterations, theorem4_beta, theorem4_iterations, IterationCount};
use crate::trainer::{measure_rate, rate_sweep, run_replicates, run_training, trace_to_csv, RateSweepConfig};
use crate::verify::{run_suite, Suite, VerifySettings};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_FAILED: i32 = 3;

/// Accepted range of the fitted log-log slope.
pub const SLOPE_RANGE: (f64, f64) = (-0.8, -0.3);
/// Largest tolerated fraction of diverged replicates.
pub const MAX_DIVERGED_FRACTION: f64 = 0.2;

pub const DEFAULT_OUT: &str = "otafl-out";
pub const TRACE_FILE: &str = "trace.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const RATE_FILE: &str = "rate.csv";
pub const BOUND_FILE: &str = "bound.csv";

#[derive(Debug, Parser)]
#[command(name = "otafl", version, about = "Scalar over-the-air federated learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for replicates and Monte-Carlo trials.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, default_value_t = 20)]
    pub replicates: usize,
    /// Replace existing output files.
    #[arg(long, global = true)]
    pub overwrite: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train once and write the trace and manifest.
    Run,
    /// Run a Monte-Carlo verification suite.
    Verify {
        #[arg(value_parser = parse_suite)]
        suite: Suite,
        /// Monte-Carlo trials per estimate.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Measure the convergence slope over replicates.
    Rate,
    /// Iteration counts for a target accuracy and confidence.
    Bound {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        beta: f64,
    },
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Options shared by the commands.
#[derive(Debug, Clone, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub replicates: usize,
    pub overwrite: bool,
}

impl Default for Overrides {
    fn default() -> Self {
        Overrides {
            seed: None,
            out: None,
            replicates: 20,
            overwrite: false,
        }
    }
}

impl Overrides {
    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmdOutcome {
    pub code: i32,
    pub report: String,
    pub files: Vec<PathBuf>,
}

impl CmdOutcome {
    fn error(e: &Error) -> Self {
        CmdOutcome {
            code: EXIT_USAGE,
            report: format!("error: {e}\n"),
            files: Vec::new(),
        }
    }
}

fn outcome(r: Result<CmdOutcome>) -> CmdOutcome {
    r.unwrap_or_else(|e| CmdOutcome::error(&e))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &str, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::Config(format!(
            "{} exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn refuse_existing(paths: &[&Path], overwrite: bool) -> Result<()> {
    if overwrite {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::Config(format!("{} exists; pass --overwrite to replace it", p.display()))),
        None => Ok(()),
    }
}

fn load_config(path: &Path, o: &Overrides) -> Result<Config> {
    let mut cfg = Config::from_file(path)?;
    if let Some(seed) = o.seed {
        cfg.trainer.seed = seed;
    }
    cfg.manifest = None;
    Ok(cfg)
}

/// Trains once; writes `trace.csv` and `manifest.toml` to the output directory.
/// A divergent run still writes its partial trace and exits with 2.
pub fn cmd_run(config: &Path, o: &Overrides) -> CmdOutcome {
    outcome(load_config(config, o).and_then(|cfg| run_with_config(&cfg, o)))
}

pub fn run_with_config(cfg: &Config, o: &Overrides) -> Result<CmdOutcome> {
    let dir = o.out_dir();
    let trace_path = dir.join(TRACE_FILE);
    let manifest_path = dir.join(MANIFEST_FILE);
    refuse_existing(&[&trace_path, &manifest_path], o.overwrite)?;
    let task = cfg.build_task()?;
    let run = cfg.run_config();
    let mut report = format!(
        "{} on {} ({} devices, d = {}, {} rounds, seed {})\n",
        run.algorithm.name(),
        task.loss.name(),
        run.devices,
        task.dim(),
        run.rounds,
        run.seed
    );
    let (trace, code) = match run_training(&run, &task) {
        Ok(out) => {
            let _ = writeln!(report, "final ||grad F||^2 = {:.6e}", out.final_grad_norm_sq);
            let _ = writeln!(report, "final training loss = {:.6}", out.final_loss);
            if let Some(a) = out.final_accuracy {
                let _ = writeln!(report, "final test accuracy = {a:.4}");
            }
            let _ = writeln!(
                report,
                "uplink scalars = {}, downlink scalars = {}, uplink minislots = {}",
                out.comm.uplink_scalars, out.comm.downlink_scalars, out.comm.uplink_slots
            );
            (out.trace, EXIT_OK)
        }
        Err(Error::Diverged { round, reason, trace }) => {
            let _ = writeln!(report, "diverged at round {round}: {reason}");
            (trace, EXIT_DIVERGED)
        }
        Err(e) => return Err(e),
    };
    write_atomic(&trace_path, &trace_to_csv(&trace), o.overwrite)?;
    write_atomic(&manifest_path, &cfg.manifest("run")?, o.overwrite)?;
    let _ = writeln!(report, "wrote {} and {}", trace_path.display(), manifest_path.display());
    Ok(CmdOutcome {
        code,
        report,
        files: vec![trace_path, manifest_path],
    })
}

/// Verification settings: `[verify]` of the config when given, `--seed` and
/// `--trials` on top.
pub fn verify_settings(config: Option<&Path>, seed: Option<u64>, trials: Option<usize>) -> Result<VerifySettings> {
    let mut s = match config {
        Some(p) => {
            let cfg = Config::from_file(p)?;
            cfg.verify.clone().unwrap_or_default().settings(cfg.trainer.seed)
        }
        None => VerifySettings::default(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(t) = trials {
        s.trials = t;
    }
    Ok(s)
}

/// Runs `suite`; exits 0 iff every check passes. With `--out`, the moment
/// estimates go to `verify-<suite>.csv`.
pub fn cmd_verify(suite: Suite, settings: &VerifySettings, o: &Overrides) -> CmdOutcome {
    outcome((|| {
        let path = o.out.as_ref().map(|d| d.join(format!("verify-{suite}.csv")));
        if let Some(p) = &path {
            refuse_existing(&[p], o.overwrite)?;
        }
        let rep = run_suite(suite, settings)?;
        let mut report = format!("suite {suite}, M = {}, seed {}\n", settings.trials, settings.seed);
        report.push_str(&rep.render());
        let mut files = Vec::new();
        if let Some(p) = path {
            if !rep.moments.is_empty() {
                write_atomic(&p, &moments_to_csv(&rep.moments)?, o.overwrite)?;
                files.push(p);
            }
        }
        Ok(CmdOutcome {
            code: if rep.passed() { EXIT_OK } else { EXIT_FAILED },
            report,
            files,
        })
    })())
}

/// Slope verdict of a rate measurement.
pub fn rate_passes(slope: f64, diverged_fraction: f64) -> bool {
    (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&slope) && diverged_fraction <= MAX_DIVERGED_FRACTION
}

fn rate_settings(cfg: &Config) -> RateConfig {
    cfg.rate.clone().unwrap_or_else(|| {
        let (eta0, gamma0) = crate::config::schedule_scales(&cfg.schedule);
        RateConfig {
            mode: RateMode::Sweep,
            horizons: vec![250, 500, 1000, 2000],
            eta0,
            gamma0,
            burn_in: 10,
        }
    })
}

/// Runs `--replicates` seeded replicates and fits the log-log slope of the
/// gradient norm. Passes iff the slope lies in [`SLOPE_RANGE`] and at most
/// [`MAX_DIVERGED_FRACTION`] of the replicates diverged.
pub fn cmd_rate(config: &Path, o: &Overrides) -> CmdOutcome {
    outcome(load_config(config, o).and_then(|cfg| rate_with_config(&cfg, o)))
}

pub fn rate_with_config(cfg: &Config, o: &Overrides) -> Result<CmdOutcome> {
    if o.replicates < 10 {
        return Err(Error::Config(format!("rate needs --replicates >= 10, got {}", o.replicates)));
    }
    let dir = o.out_dir();
    let rate_path = dir.join(RATE_FILE);
    let manifest_path = dir.join(MANIFEST_FILE);
    refuse_existing(&[&rate_path, &manifest_path], o.overwrite)?;
    let rs = rate_settings(cfg);
    let task = cfg.build_task()?;
    let base = cfg.run_config();
    let mut report = format!("{} rate over {} replicates ({:?} mode)\n", base.algorithm.name(), o.replicates, rs.mode);
    let (fit, diverged_fraction, csv) = match rs.mode {
        RateMode::Sweep => {
            let sweep = rate_sweep(
                &RateSweepConfig {
                    base,
                    horizons: rs.horizons.clone(),
                    replicates: o.replicates,
                    eta0: rs.eta0,
                    gamma0: rs.gamma0,
                },
                &task,
            )?;
            let mut csv = String::from("horizon,min_mean_grad_norm_sq,diverged\n");
            for p in &sweep.points {
                let _ = writeln!(csv, "{},{},{}", p.horizon, p.min_mean_grad_norm_sq, p.diverged);
                let _ = writeln!(
                    report,
                    "K = {:>6}: min_k mean ||grad F||^2 = {:.6e} ({} diverged)",
                    p.horizon, p.min_mean_grad_norm_sq, p.diverged
                );
            }
            let frac = sweep.divergence_fraction();
            (sweep.fit, frac, csv)
        }
        RateMode::RunningMin => {
            let results = run_replicates(&base, &task, o.replicates);
            let mut traces = Vec::new();
            let mut diverged = 0usize;
            for r in results {
                match r {
                    Ok(out) => traces.push(out.trace),
                    Err(Error::Diverged { .. }) => diverged += 1,
                    Err(e) => return Err(e),
                }
            }
            let frac = diverged as f64 / o.replicates as f64;
            let _ = writeln!(report, "{diverged} of {} replicates diverged", o.replicates);
            if frac > MAX_DIVERGED_FRACTION {
                let _ = writeln!(report, "FAIL: more than {:.0}% of replicates diverged", 100.0 * MAX_DIVERGED_FRACTION);
                return Ok(CmdOutcome {
                    code: EXIT_FAILED,
                    report,
                    files: Vec::new(),
                });
            }
            let fit = measure_rate(&traces, rs.burn_in)?;
            let mut csv = String::from("k,mean_running_min_grad_norm_sq\n");
            for (k, v) in &fit.points {
                let _ = writeln!(csv, "{k},{v}");
            }
            (fit, frac, csv)
        }
    };
    let pass = rate_passes(fit.slope, diverged_fraction);
    let _ = writeln!(
        report,
        "{} slope = {:.4} +/- {:.4} (accepted range [{}, {}]), diverged fraction {:.2}",
        if pass { "PASS" } else { "FAIL" },
        fit.slope,
        fit.slope_se,
        SLOPE_RANGE.0,
        SLOPE_RANGE.1,
        diverged_fraction
    );
    write_atomic(&rate_path, &csv, o.overwrite)?;
    write_atomic(&manifest_path, &cfg.manifest("rate")?, o.overwrite)?;
    Ok(CmdOutcome {
        code: if pass { EXIT_OK } else { EXIT_FAILED },
        report,
        files: vec![rate_path, manifest_path],
    })
}

/// One row of the iteration-count table.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub algorithm: &'static str,
    pub moment_name: &'static str,
    pub moment_bound: f64,
    pub rate_constant: f64,
    pub iterations: IterationCount,
    /// Confidence recovered from the rounded-up `K`.
    pub beta_at_k: f64,
}

/// Iteration counts of the four algorithms, sync rows first.
pub fn bound_table(eps: f64, beta: f64, inputs: &BoundInputs) -> Result<Vec<BoundRow>> {
    let zo = [("ezofl", "C", inputs.zero_order), ("ezofl-async", "C'", inputs.zero_order_async())];
    let fo = [("efofl", "C2", inputs.first_order), ("efofl-async", "C2'", inputs.first_order_async())];
    let mut rows = Vec::with_capacity(4);
    for (i, (algorithm, moment_name, z)) in zo.into_iter().enumerate() {
        let it = theorem2_iterations(eps, beta, &z)?;
        rows.push(BoundRow {
            algorithm,
            moment_name,
            moment_bound: z.moment_bound,
            rate_constant: z.rate_constant()?,
            beta_at_k: theorem2_beta(eps, it.rounds.max(1), &z)?,
            iterations: it,
        });
        let (algorithm, moment_name, f) = fo[i];
        let it = theorem4_iterations(eps, beta, &f)?;
        rows.push(BoundRow {
            algorithm,
            moment_name,
            moment_bound: f.moment_bound,
            rate_constant: f.rate_constant()?,
            beta_at_k: theorem4_beta(eps, it.rounds.max(1), &f)?,
            iterations: it,
        });
    }
    rows.sort_by_key(|r| r.algorithm.ends_with("async"));
    Ok(rows)
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstantsFile {
    bound: BoundConfig,
}

/// Calculator inputs from a run config, or from a file holding only a `[bound]`
/// table with every constant given explicitly.
pub fn bound_inputs_from_file(path: &Path, seed: Option<u64>) -> Result<BoundInputs> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    if value.contains_key("task") {
        let mut cfg = Config::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))?;
        if let Some(s) = seed {
            cfg.trainer.seed = s;
        }
        return cfg.bound_inputs();
    }
    let f: ConstantsFile = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    f.bound.explicit_inputs()
}

/// Prints `K` for all four algorithms side by side.
pub fn cmd_bound(eps: f64, beta: f64, config: &Path, o: &Overrides) -> CmdOutcome {
    outcome(bound_inputs_from_file(config, o.seed).and_then(|inputs| bound_with_inputs(eps, beta, &inputs, o)))
}

pub fn bound_with_inputs(eps: f64, beta: f64, inputs: &BoundInputs, o: &Overrides) -> Result<CmdOutcome> {
    let path = o.out.as_ref().map(|d| d.join(BOUND_FILE));
    if let Some(p) = &path {
        refuse_existing(&[p], o.overwrite)?;
    }
    let rows = bound_table(eps, beta, inputs)?;
    let mut report = format!("epsilon = {eps}, beta = {beta}\n");
    let _ = writeln!(
        report,
        "{:<12} {:>4} {:>14} {:>14} {:>16} {:>12}",
        "algorithm", "", "moment bound", "rate const", "K (real)", "K"
    );
    let mut csv = String::from("algorithm,moment,moment_bound,rate_constant,k_real,k,beta_at_k\n");
    for r in &rows {
        let _ = writeln!(
            report,
            "{:<12} {:>4} {:>14.6e} {:>14.6e} {:>16.6e} {:>12}",
            r.algorithm,
            r.moment_name,
            r.moment_bound,
            r.rate_constant,
            r.iterations.real,
            if r.iterations.rounds == u64::MAX {
                "overflow".to_string()
            } else {
                r.iterations.rounds.to_string()
            }
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.algorithm, r.moment_name, r.moment_bound, r.rate_constant, r.iterations.real, r.iterations.rounds, r.beta_at_k
        );
    }
    let k_of = |name: &str| rows.iter().find(|r| r.algorithm == name).map_or(0, |r| r.iterations.rounds);
    let ordered = k_of("ezofl-async") >= k_of("ezofl") && k_of("efofl-async") >= k_of("efofl");
    let _ = writeln!(report, "{} async K >= sync K", if ordered { "PASS" } else { "FAIL" });
    let mut files = Vec::new();
    if let Some(p) = path {
        write_atomic(&p, &csv, o.overwrite)?;
        files.push(p);
    }
    Ok(CmdOutcome {
        code: if ordered { EXIT_OK } else { EXIT_FAILED },
        report,
        files,
    })
}

fn dispatch(cli: &Cli) -> CmdOutcome {
    let o = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        replicates: cli.replicates,
        overwrite: cli.overwrite,
    };
    let need_config = || {
        cli.config
            .as_deref()
            .ok_or_else(|| Error::Config("this command needs --config".into()))
    };
    match &cli.command {
        Command::Run => match need_config() {
            Ok(p) => cmd_run(p, &o),
            Err(e) => CmdOutcome::error(&e),
        },
        Command::Rate => match need_config() {
            Ok(p) => cmd_rate(p, &o),
            Err(e) => CmdOutcome::error(&e),
        },
        Command::Bound { epsilon, beta } => match need_config() {
            Ok(p) => cmd_bound(*epsilon, *beta, p, &o),
            Err(e) => CmdOutcome::error(&e),
        },
        Command::Verify { suite, trials } => match verify_settings(cli.config.as_deref(), cli.seed, *trials) {
            Ok(s) => cmd_verify(*suite, &s, &o),
            Err(e) => CmdOutcome::error(&e),
        },
    }
}

/// Parses `args` (program name first), runs the command and prints its report.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let out = match cli.jobs {
        Some(0) => CmdOutcome::error(&Error::Config("--jobs must be >= 1".into())),
        Some(j) => match rayon::ThreadPoolBuilder::new().num_threads(j).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => CmdOutcome::error(&Error::Config(e.to_string())),
        },
        None => dispatch(&cli),
    };
    if out.code == EXIT_USAGE {
        eprint!("{}", out.report);
    } else {
        print!("{}", out.report);
    }
    out.code
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_inputs() -> BoundInputs {
        BoundConfig {
            delta_hat: Some(1.0),
            mu: Some(1.0),
            c1: Some(1.0),
            c3: Some(0.0),
            b1: Some(1.0),
            eta0: Some(1.0),
            gamma0: Some(1.0),
            gamma: None,
            c: Some(0.0),
            c2: Some(0.0),
            c_prime: Some(0.0),
            c2_prime: Some(0.0),
        }
        .explicit_inputs()
        .unwrap()
    }

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from(["otafl", "verify", "lemma3", "--trials", "20000", "--seed", "4"]).unwrap();
        assert_eq!(cli.seed, Some(4));
        assert!(matches!(cli.command, Command::Verify { suite: Suite::Lemma3, trials: Some(20000) }));
        assert!(Cli::try_parse_from(["otafl", "verify", "lemma9"]).is_err());
        let cli = Cli::try_parse_from(["otafl", "bound", "--epsilon", "0.1", "--beta", "0.1", "--config", "c.toml"]).unwrap();
        assert_eq!(cli.replicates, 20);
        assert_eq!(cli.config, Some(PathBuf::from("c.toml")));
    }

    #[test]
    fn unit_bound_table() {
        let rows = bound_table(0.1, 0.1, &unit_inputs()).unwrap();
        let names: Vec<_> = rows.iter().map(|r| r.algorithm).collect();
        assert_eq!(names, ["ezofl", "efofl", "ezofl-async", "efofl-async"]);
        // 2Δ̂/(η₀γ₀c₁) = 2 and Δ̂/(b₁η₀) = 1.
        assert_eq!(rows[0].iterations.rounds, 40_000);
        assert_eq!(rows[1].iterations.rounds, 10_000);
        assert!(bound_table(0.0, 0.1, &unit_inputs()).is_err());
    }

    #[test]
    fn rate_verdicts() {
        assert!(rate_passes(-0.5, 0.0));
        assert!(rate_passes(-0.3, 0.2));
        assert!(!rate_passes(-0.29, 0.0));
        assert!(!rate_passes(-0.5, 0.25));
        assert!(!rate_passes(f64::NAN, 0.0));
    }

    #[test]
    fn atomic_write_refuses_existing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.csv");
        write_atomic(&p, "x\n", false).unwrap();
        assert!(write_atomic(&p, "y\n", false).is_err());
        write_atomic(&p, "y\n", true).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "y\n");
        let leftovers = std::fs::read_dir(p.parent().unwrap()).unwrap().count();
        assert_eq!(leftovers, 1);
    }
}
