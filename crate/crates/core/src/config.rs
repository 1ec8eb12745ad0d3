//! TOML run configuration.
//!
//! ```toml
//! [task]
//! kind = "quadratic"
//! n = 200
//! d = 10
//!
//! [trainer]
//! algorithm = "ezofl"
//! devices = 10
//! rounds = 2000
//! seed = 1
//!
//! [schedule]
//! kind = "constant-thm2"
//! eta0 = 0.5
//! gamma0 = 0.2
//! horizon = 2000
//!
//! [channel]
//! sigma_h = 1.0
//! sigma_n = 0.05
//! ```
//!
//! Unknown keys are rejected everywhere. A written manifest is the resolved
//! configuration plus a `[manifest]` table and parses back as a configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::data::{load_mnist_binary, partition_equal, synth_dataset, Dataset, MnistFiles};
use crate::estimators::{second_moment_bound, DeviceSplit, PerturbationKind, TheoryConstants, Variant};
use crate::model::{self, LossModel, ModelParams, Sample};
use crate::schedules::{FirstOrderInputs, Schedule, ZeroOrderInputs};
use crate::trainer::{Algorithm, RunConfig, Task};
use crate::verify::VerifySettings;
use crate::{Error, Result};

/// Version string recorded in manifests.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub task: TaskConfig,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<RateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<ManifestInfo>,
}

fn default_classes() -> [u8; 2] {
    [0, 1]
}
fn default_true() -> bool {
    true
}
fn default_lambda() -> f64 {
    0.1
}
fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Two MNIST digits, `classes[0]` labelled `+1`. `dir` holds the four IDX files
    /// and is resolved relative to the config file.
    Mnist {
        dir: PathBuf,
        #[serde(default = "default_classes")]
        classes: [u8; 2],
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default)]
        theta0: f64,
    },
    /// Teacher-labelled Gaussian points, nonconvex logistic loss.
    Synthetic {
        n: usize,
        d: usize,
        #[serde(default)]
        test_n: usize,
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default)]
        bias: bool,
        #[serde(default)]
        theta0: f64,
    },
    /// `½‖θ − x‖²` around Gaussian centres scaled by `spread`.
    Quadratic {
        n: usize,
        d: usize,
        #[serde(default = "default_one")]
        spread: f64,
        #[serde(default = "default_one")]
        theta0: f64,
    },
}

impl TaskConfig {
    pub fn loss(&self) -> LossModel {
        match *self {
            TaskConfig::Mnist { lambda, .. } | TaskConfig::Synthetic { lambda, .. } => {
                LossModel::NonconvexLogistic { lambda }
            }
            TaskConfig::Quadratic { .. } => LossModel::Quadratic,
        }
    }
}

fn d_devices() -> usize {
    10
}
fn d_rounds() -> u64 {
    3000
}
fn d_eval() -> u64 {
    10
}
fn d_one_usize() -> usize {
    1
}
fn d_a_factor() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    #[serde(default = "d_devices")]
    pub devices: usize,
    #[serde(default = "d_rounds")]
    pub rounds: u64,
    /// Master seed: data generation, partitioning and every draw of the run.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_eval")]
    pub eval_every: u64,
    #[serde(default = "d_one_usize")]
    pub batch: usize,
    #[serde(default)]
    pub async_fraction: f64,
    #[serde(default)]
    pub perturbation: PerturbationKind,
    #[serde(default = "d_one_usize")]
    pub local_steps: usize,
    /// Gradient bound `A` is this factor times the largest per-sample gradient norm at `θ₀`.
    #[serde(default = "d_a_factor")]
    pub a_factor: f64,
}

impl TrainerConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        TrainerConfig {
            algorithm,
            devices: d_devices(),
            rounds: d_rounds(),
            seed: 0,
            eval_every: d_eval(),
            batch: 1,
            async_fraction: 0.0,
            perturbation: PerturbationKind::Rademacher,
            local_steps: 1,
            a_factor: d_a_factor(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMode {
    /// One run per horizon with the constant steps prescribed for that horizon.
    #[default]
    Sweep,
    /// Running minimum along a single horizon.
    RunningMin,
}

fn d_horizons() -> Vec<u64> {
    vec![250, 500, 1000, 2000]
}
fn d_burn_in() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    #[serde(default)]
    pub mode: RateMode,
    #[serde(default = "d_horizons")]
    pub horizons: Vec<u64>,
    pub eta0: f64,
    #[serde(default)]
    pub gamma0: f64,
    #[serde(default = "d_burn_in")]
    pub burn_in: u64,
}

/// Explicit calculator inputs. Missing entries are derived from the task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub delta_hat: Option<f64>,
    pub mu: Option<f64>,
    pub c1: Option<f64>,
    pub c3: Option<f64>,
    pub b1: Option<f64>,
    pub eta0: Option<f64>,
    pub gamma0: Option<f64>,
    /// Smoothing radius used in the moment bounds. Defaults to the largest `γₖ`.
    pub gamma: Option<f64>,
    pub c: Option<f64>,
    pub c2: Option<f64>,
    pub c_prime: Option<f64>,
    pub c2_prime: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub trials: Option<usize>,
    pub sigma_h: Option<f64>,
    pub sigma_n: Option<f64>,
    pub random_configs: Option<usize>,
    pub thetas: Option<usize>,
}

impl VerifyConfig {
    pub fn settings(&self, seed: u64) -> VerifySettings {
        let d = VerifySettings::default();
        VerifySettings {
            trials: self.trials.unwrap_or(d.trials),
            seed,
            sigma_h: self.sigma_h.unwrap_or(d.sigma_h),
            sigma_n: self.sigma_n.unwrap_or(d.sigma_n),
            random_configs: self.random_configs.unwrap_or(d.random_configs),
            thetas: self.thetas.unwrap_or(d.thetas),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestInfo {
    pub version: String,
    pub command: String,
}

/// Calculator inputs for the four algorithms.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub zero_order: ZeroOrderInputs,
    pub first_order: FirstOrderInputs,
    /// `C'` and `C₂'`.
    pub c_prime: f64,
    pub c2_prime: f64,
}

impl BoundInputs {
    pub fn zero_order_async(&self) -> ZeroOrderInputs {
        ZeroOrderInputs {
            moment_bound: self.c_prime,
            ..self.zero_order
        }
    }

    pub fn first_order_async(&self) -> FirstOrderInputs {
        FirstOrderInputs {
            moment_bound: self.c2_prime,
            ..self.first_order
        }
    }
}

impl Config {
    /// The experimental setup on MNIST 0 vs 1 for `algorithm`, with 10 local
    /// samples per device per round.
    pub fn mnist_default(dir: impl Into<PathBuf>, algorithm: Algorithm) -> Self {
        Config {
            task: TaskConfig::Mnist {
                dir: dir.into(),
                classes: default_classes(),
                bias: true,
                lambda: default_lambda(),
                theta0: 0.0,
            },
            trainer: TrainerConfig {
                batch: 10,
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

    /// Parses TOML text. Relative data paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let TaskConfig::Mnist { dir, .. } = &mut cfg.task {
            if dir.is_relative() {
                *dir = base_dir.join(&*dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Config::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolved configuration with a `[manifest]` table.
    pub fn manifest(&self, command: &str) -> Result<String> {
        let mut m = self.clone();
        if let TaskConfig::Mnist { dir, .. } = &mut m.task {
            if let Ok(abs) = std::path::absolute(&*dir) {
                *dir = abs;
            }
        }
        m.manifest = Some(ManifestInfo {
            version: CODE_VERSION.to_string(),
            command: command.to_string(),
        });
        m.to_toml()
    }

    pub fn validate(&self) -> Result<()> {
        match &self.task {
            TaskConfig::Mnist { classes, .. } if classes[0] == classes[1] || classes.iter().any(|&c| c > 9) => {
                return Err(Error::Config(format!("task.classes must be two distinct digits, got {classes:?}")));
            }
            TaskConfig::Quadratic { spread, .. } if !(*spread > 0.0 && spread.is_finite()) => {
                return Err(Error::Config(format!("task.spread must be > 0, got {spread}")));
            }
            _ => {}
        }
        self.task.loss().validate()?;
        if !(self.trainer.a_factor >= 1.0 && self.trainer.a_factor.is_finite()) {
            return Err(Error::Config(format!("trainer.a_factor must be >= 1, got {}", self.trainer.a_factor)));
        }
        if let Some(r) = &self.rate {
            if !(r.eta0 > 0.0 && r.eta0.is_finite()) || !(r.gamma0 >= 0.0 && r.gamma0.is_finite()) {
                return Err(Error::Config("rate.eta0 must be > 0 and rate.gamma0 >= 0".into()));
            }
            if r.horizons.iter().any(|&k| k == 0) {
                return Err(Error::Config("rate.horizons must be >= 1".into()));
            }
        }
        self.run_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn run_config(&self) -> RunConfig {
        let t = &self.trainer;
        RunConfig {
            algorithm: t.algorithm,
            devices: t.devices,
            rounds: t.rounds,
            schedule: self.schedule,
            channel: self.channel.clone(),
            async_fraction: t.async_fraction,
            seed: t.seed,
            eval_every: t.eval_every,
            batch: t.batch,
            perturbation: t.perturbation,
            local_steps: t.local_steps,
        }
    }

    /// Loads or generates the data, partitions it across the devices with the master seed.
    pub fn build_task(&self) -> Result<Task> {
        let seed = self.trainer.seed;
        let n_dev = self.trainer.devices;
        let loss = self.task.loss();
        match &self.task {
            TaskConfig::Mnist {
                dir,
                classes,
                bias,
                theta0,
                ..
            } => {
                if !MnistFiles::in_dir(dir).exist() {
                    return Err(Error::Config(format!("MNIST IDX files not found in {}", dir.display())));
                }
                let (train, test) = load_mnist_binary(dir, classes[0], classes[1], *bias)?;
                let d = train.dim();
                let part = partition_equal(&train, n_dev, seed)?;
                Task::new(loss, part, Some(test), ModelParams::new(vec![*theta0; d]))
            }
            TaskConfig::Synthetic {
                n,
                d,
                test_n,
                bias,
                theta0,
                ..
            } => {
                let all = synth_dataset(n + test_n, *d, seed)?;
                let mut samples = all.samples;
                let test_samples = samples.split_off(*n);
                let mut train = Dataset::new("synthetic-train", samples)?;
                let mut test = (!test_samples.is_empty())
                    .then(|| Dataset::new("synthetic-test", test_samples))
                    .transpose()?;
                if *bias {
                    train = train.with_bias();
                    test = test.map(Dataset::with_bias);
                }
                let dim = train.dim();
                let part = partition_equal(&train, n_dev, seed)?;
                Task::new(loss, part, test, ModelParams::new(vec![*theta0; dim]))
            }
            TaskConfig::Quadratic { n, d, spread, theta0 } => {
                let raw = synth_dataset(*n, *d, seed)?;
                let samples = raw
                    .samples
                    .into_iter()
                    .map(|s| Sample::new(s.features.iter().map(|x| x * spread).collect(), 0.0))
                    .collect();
                let ds = Dataset::new(format!("quadratic-n{n}-d{d}"), samples)?;
                let part = partition_equal(&ds, n_dev, seed)?;
                Task::new(loss, part, None, ModelParams::new(vec![*theta0; *d]))
            }
        }
    }

    /// `F(θ₀) − F(θ*)`: exact for the quadratic loss, `F(θ₀)` otherwise (the
    /// logistic objective is nonnegative).
    pub fn delta_hat(&self, task: &Task) -> Result<f64> {
        match task.loss {
            LossModel::Quadratic => task.quadratic_delta_hat(),
            LossModel::NonconvexLogistic { .. } => model::global_loss(&task.loss, &task.theta0, &task.partition.shards),
        }
    }

    pub fn constants(&self, task: &Task) -> Result<TheoryConstants> {
        let delta = self.delta_hat(task)?;
        task.constants(&self.run_config(), self.trainer.a_factor, delta)
    }

    /// Split used for the async bounds: the last `round(fraction · N)` devices are late.
    pub fn bound_split(&self) -> DeviceSplit {
        let n = self.trainer.devices;
        let late = ((self.trainer.async_fraction * n as f64).round() as usize).min(n);
        let late_idx: Vec<usize> = (n - late..n).collect();
        DeviceSplit::from_late(n, &late_idx).unwrap_or_else(|_| DeviceSplit::all_on_time(n))
    }

    /// Calculator inputs from `[bound]`, with missing entries derived from the task.
    pub fn bound_inputs(&self) -> Result<BoundInputs> {
        let b = self.bound.clone().unwrap_or_default();
        let (eta0, gamma0) = schedule_scales(&self.schedule);
        let eta0 = b.eta0.unwrap_or(eta0);
        let gamma0 = b.gamma0.unwrap_or(gamma0);
        let explicit = BoundConfig {
            eta0: Some(eta0),
            gamma0: Some(gamma0),
            ..b.clone()
        }
        .explicit_unchecked();
        let inputs = if let Some(inputs) = explicit {
            inputs
        } else {
            let task = self.build_task()?;
            let mut k = self.constants(&task)?;
            if let Some(v) = b.delta_hat {
                k.delta_hat = v;
            }
            if let Some(v) = b.b1 {
                k.b1 = v;
            }
            let gamma = b.gamma.unwrap_or_else(|| self.schedule.gamma_max());
            let split = self.bound_split();
            let all = DeviceSplit::all_on_time(self.trainer.devices);
            let ch = &self.channel;
            let c = b.c.map_or_else(|| second_moment_bound(Variant::Ezofl, &k, ch, gamma, &all), Ok)?;
            let c2 = b.c2.map_or_else(|| second_moment_bound(Variant::Efofl, &k, ch, gamma, &all), Ok)?;
            let cp = b
                .c_prime
                .map_or_else(|| second_moment_bound(Variant::EzoflAsync, &k, ch, gamma, &split), Ok)?;
            let c2p = b
                .c2_prime
                .map_or_else(|| second_moment_bound(Variant::EfoflAsync, &k, ch, gamma, &split), Ok)?;
            let mut zo = ZeroOrderInputs::from_constants(&k, c, eta0, gamma0);
            let mut fo = FirstOrderInputs::from_constants(&k, c2, eta0);
            if let Some(v) = b.mu {
                zo.mu = v;
                fo.mu = v;
            }
            if let Some(v) = b.c1 {
                zo.c1 = v;
            }
            if let Some(v) = b.c3 {
                zo.c3 = v;
            }
            BoundInputs {
                zero_order: zo,
                first_order: fo,
                c_prime: cp,
                c2_prime: c2p,
            }
        };
        check_ordering(inputs)
    }
}

fn check_ordering(inputs: BoundInputs) -> Result<BoundInputs> {
    if inputs.c_prime < inputs.zero_order.moment_bound {
        return Err(Error::Config(format!(
            "C' = {} is below C = {}",
            inputs.c_prime, inputs.zero_order.moment_bound
        )));
    }
    if inputs.c2_prime < inputs.first_order.moment_bound {
        return Err(Error::Config(format!(
            "C2' = {} is below C2 = {}",
            inputs.c2_prime, inputs.first_order.moment_bound
        )));
    }
    Ok(inputs)
}

impl BoundConfig {
    /// Inputs when every constant and both step scales are given.
    pub fn explicit_inputs(&self) -> Result<BoundInputs> {
        let inputs = self.explicit_unchecked().ok_or_else(|| {
            Error::Config(
                "[bound] needs delta_hat, mu, c1, c3, b1, eta0, gamma0, c, c2, c_prime and c2_prime".into(),
            )
        })?;
        check_ordering(inputs)
    }

    fn explicit_unchecked(&self) -> Option<BoundInputs> {
        let zo = ZeroOrderInputs {
            delta_hat: self.delta_hat?,
            c1: self.c1?,
            c3: self.c3?,
            mu: self.mu?,
            moment_bound: self.c?,
            eta0: self.eta0?,
            gamma0: self.gamma0?,
        };
        let fo = FirstOrderInputs {
            delta_hat: zo.delta_hat,
            b1: self.b1?,
            mu: zo.mu,
            moment_bound: self.c2?,
            eta0: zo.eta0,
        };
        Some(BoundInputs {
            zero_order: zo,
            first_order: fo,
            c_prime: self.c_prime?,
            c2_prime: self.c2_prime?,
        })
    }
}

/// `(η₀, γ₀)` of a schedule.
pub fn schedule_scales(s: &Schedule) -> (f64, f64) {
    match *s {
        Schedule::Diminishing { eta0, gamma0, .. } | Schedule::ConstantThm2 { eta0, gamma0, .. } => (eta0, gamma0),
        Schedule::ConstantThm4 { eta0, gamma, .. } => (eta0, gamma),
        Schedule::Constant { eta, gamma } => (eta, gamma),
    }
}
