//! The federated round loop, the FedAvg baseline and convergence-rate measurement.
//!
//! A round of the over-the-air algorithms:
//!
//! 1. every device and the server derive the shared direction `Φₖ` from the seed;
//! 2. each device computes its scalar payload on a fresh local mini-batch;
//! 3. the server receives the minislot superpositions and broadcasts their product;
//! 4. every device forms `gₖ = Φₖ · scalar` and applies `θ ← θ − ηₖ gₖ` to its
//!    own copy of the model.

use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{precoder_constants, sample_noise, sample_round, ChannelConfig};
use crate::data::{sign_label, Dataset, Partition};
use crate::estimators::{
    draw_batch, round_estimate, round_perturbation, DeviceSplit, PerturbationKind, RoundMedium, TheoryConstants, Variant,
};
use crate::model::{self, dot, norm_sq, LossModel, ModelParams, Sample};
use crate::rng::{keyed_rng, replicate_seed, Stream};
use crate::schedules::Schedule;
use crate::{Error, Result};

/// `‖θ‖` above which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;

pub const TRACE_HEADER: &str = "k,eta,gamma,slot1,slot2,slot3,grad_norm_sq,train_loss,test_acc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Ezofl,
    Efofl,
    EzoflAsync,
    EfoflAsync,
    Fedavg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Ezofl,
        Algorithm::Efofl,
        Algorithm::EzoflAsync,
        Algorithm::EfoflAsync,
        Algorithm::Fedavg,
    ];

    /// The over-the-air estimator, or `None` for FedAvg.
    pub fn variant(self) -> Option<Variant> {
        match self {
            Algorithm::Ezofl => Some(Variant::Ezofl),
            Algorithm::Efofl => Some(Variant::Efofl),
            Algorithm::EzoflAsync => Some(Variant::EzoflAsync),
            Algorithm::EfoflAsync => Some(Variant::EfoflAsync),
            Algorithm::Fedavg => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fedavg => "fedavg",
            other => other.variant().map(Variant::name).unwrap_or_default(),
        }
    }

    pub fn is_async(self) -> bool {
        self.variant().is_some_and(Variant::is_async)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub devices: usize,
    pub rounds: u64,
    pub schedule: Schedule,
    pub channel: ChannelConfig,
    /// Fraction of devices that are late in each round (async variants only).
    #[serde(default)]
    pub async_fraction: f64,
    pub seed: u64,
    /// Metrics are computed on rounds with `k % eval_every == 0`.
    pub eval_every: u64,
    /// Local samples per device per round.
    pub batch: usize,
    #[serde(default)]
    pub perturbation: PerturbationKind,
    /// FedAvg local gradient steps per round.
    pub local_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algorithm: Algorithm::Ezofl,
            devices: 10,
            rounds: 3000,
            schedule: Schedule::default(),
            channel: ChannelConfig::new(1.0, 0.1),
            async_fraction: 0.0,
            seed: 0,
            eval_every: 10,
            batch: 1,
            perturbation: PerturbationKind::Rademacher,
            local_steps: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(Error::invalid("devices must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.async_fraction) {
            return Err(Error::invalid(format!(
                "async_fraction must lie in [0, 1), got {}",
                self.async_fraction
            )));
        }
        if !self.algorithm.is_async() && self.async_fraction != 0.0 {
            return Err(Error::invalid(format!(
                "async_fraction must be 0 for {}",
                self.algorithm.name()
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be >= 1"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        if self.local_steps == 0 {
            return Err(Error::invalid("local_steps must be >= 1"));
        }
        self.schedule.validate()?;
        self.channel.validate(self.devices)
    }
}

/// Partitioned training data, optional test set and starting point.
#[derive(Debug, Clone)]
pub struct Task {
    pub loss: LossModel,
    pub partition: Partition,
    pub test: Option<Dataset>,
    pub theta0: ModelParams,
}

impl Task {
    pub fn new(loss: LossModel, partition: Partition, test: Option<Dataset>, theta0: ModelParams) -> Result<Self> {
        loss.validate()?;
        model::check_dim(partition.dim(), theta0.dim())?;
        if let Some(t) = &test {
            model::check_dim(partition.dim(), t.dim())?;
        }
        Ok(Task { loss, partition, test, theta0 })
    }

    pub fn dim(&self) -> usize {
        self.partition.dim()
    }

    pub fn devices(&self) -> usize {
        self.partition.num_devices()
    }

    /// Global metrics at `θ`.
    pub fn metrics(&self, theta: &ModelParams) -> Result<(f64, f64, Option<f64>)> {
        let gns = model::global_grad_norm_sq(&self.loss, theta, &self.partition.shards)?;
        let loss = model::global_loss(&self.loss, theta, &self.partition.shards)?;
        let acc = match &self.test {
            Some(t) => Some(evaluate_accuracy(theta, &t.samples)?),
            None => None,
        };
        Ok((gns, loss, acc))
    }

    /// Exact `F(θ₀) − F(θ*)` for the quadratic loss, whose minimiser is the mean
    /// of the per-device sample means.
    pub fn quadratic_delta_hat(&self) -> Result<f64> {
        if self.loss != LossModel::Quadratic {
            return Err(Error::invalid("exact optimality gap is only available for the quadratic loss"));
        }
        let d = self.dim();
        let n = self.devices() as f64;
        let mut opt = vec![0.0; d];
        for shard in &self.partition.shards {
            let inv = 1.0 / (shard.len() as f64 * n);
            for s in &shard.samples {
                opt.iter_mut().zip(&s.features).for_each(|(o, x)| *o += x * inv);
            }
        }
        let opt = ModelParams::new(opt);
        let f0 = model::global_loss(&self.loss, &self.theta0, &self.partition.shards)?;
        let fstar = model::global_loss(&self.loss, &opt, &self.partition.shards)?;
        Ok((f0 - fstar).max(0.0))
    }

    /// Constants of the task for a run with schedule `schedule`.
    pub fn constants(&self, cfg: &RunConfig, a_factor: f64, delta_hat: f64) -> Result<TheoryConstants> {
        TheoryConstants::for_task(
            &self.loss,
            &self.partition,
            &self.theta0,
            &cfg.channel,
            cfg.perturbation,
            cfg.schedule.gamma_max(),
            a_factor,
            delta_hat,
        )
    }
}

/// One round of a run. Metric fields are filled on evaluation rounds only.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub k: u64,
    pub eta: f64,
    pub gamma: f64,
    pub slot1: Option<f64>,
    pub slot2: Option<f64>,
    pub slot3: Option<f64>,
    pub grad_norm_sq: Option<f64>,
    pub train_loss: Option<f64>,
    pub test_acc: Option<f64>,
    /// Uplink minislots used in this round (0 for FedAvg).
    pub uplink_slots: usize,
    /// Scalars each device sent on the uplink.
    pub uplink_scalars_per_device: usize,
    /// Scalars broadcast on the downlink.
    pub downlink_scalars: usize,
}

/// Totals over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CommAccounting {
    pub rounds: u64,
    pub uplink_scalars: u64,
    pub downlink_scalars: u64,
    pub uplink_slots: u64,
}

impl CommAccounting {
    fn add(&mut self, t: &RoundTrace, devices: usize) {
        self.rounds += 1;
        self.uplink_scalars += (t.uplink_scalars_per_device * devices) as u64;
        self.downlink_scalars += t.downlink_scalars as u64;
        self.uplink_slots += t.uplink_slots as u64;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trace: Vec<RoundTrace>,
    /// `θ_K`.
    pub final_params: ModelParams,
    pub final_grad_norm_sq: f64,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub comm: CommAccounting,
}

/// Fraction of samples whose label equals `sign(θᵀx)`, with `0` counted as `+1`.
pub fn evaluate_accuracy(theta: &ModelParams, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test set".into()));
    }
    let mut hits = 0usize;
    for s in test {
        model::check_dim(theta.dim(), s.dim())?;
        if sign_label(dot(theta.as_slice(), &s.features)) == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Late set of round `k`: `round(fraction · N)` devices chosen uniformly at random.
pub fn async_partition(devices: usize, fraction: f64, seed: u64, k: u64) -> Result<DeviceSplit> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("async fraction must lie in [0, 1), got {fraction}")));
    }
    let late = (fraction * devices as f64).round() as usize;
    if late == 0 {
        return Ok(DeviceSplit::all_on_time(devices));
    }
    DeviceSplit::random(devices, late, &mut keyed_rng(seed, Stream::Async, &[k]))
}

fn check_divergence(theta: &ModelParams, k: u64, trace: &[RoundTrace]) -> Result<()> {
    let reason = if !theta.is_finite() {
        Some("non-finite parameter".to_string())
    } else {
        let n = theta.norm();
        (n > DIVERGENCE_NORM).then(|| format!("parameter norm {n:.3e} exceeds {DIVERGENCE_NORM:e}"))
    };
    match reason {
        Some(reason) => Err(Error::Diverged {
            round: k,
            reason,
            trace: trace.to_vec(),
        }),
        None => Ok(()),
    }
}

fn finish(task: &Task, trace: Vec<RoundTrace>, theta: ModelParams, comm: CommAccounting) -> Result<RunOutput> {
    let (g, l, a) = task.metrics(&theta)?;
    Ok(RunOutput {
        trace,
        final_params: theta,
        final_grad_norm_sq: g,
        final_loss: l,
        final_accuracy: a,
        comm,
    })
}

fn check_task(cfg: &RunConfig, task: &Task) -> Result<()> {
    cfg.validate()?;
    if task.devices() != cfg.devices {
        return Err(Error::invalid(format!(
            "config has {} devices but the task is split across {}",
            cfg.devices,
            task.devices()
        )));
    }
    Ok(())
}

/// Runs `cfg.rounds` rounds of the configured algorithm.
pub fn run_training(cfg: &RunConfig, task: &Task) -> Result<RunOutput> {
    let Some(variant) = cfg.algorithm.variant() else {
        return fedavg_baseline(cfg, task);
    };
    check_task(cfg, task)?;
    let n = cfg.devices;
    let d = task.dim();
    let precoder = precoder_constants(&cfg.channel, n)?;
    let shards: Vec<&[Sample]> = task.partition.shards.iter().map(|s| s.samples.as_slice()).collect();

    // One model copy per device; they only ever see the same broadcast.
    let mut local: Vec<ModelParams> = vec![task.theta0.clone(); n];
    let mut trace = Vec::with_capacity(cfg.rounds as usize);
    let mut comm = CommAccounting::default();

    for k in 0..cfg.rounds {
        let (eta, gamma) = (cfg.schedule.eta(k), cfg.schedule.gamma(k));
        let (grad_norm_sq, train_loss, test_acc) = if k % cfg.eval_every == 0 {
            let (g, l, a) = task.metrics(&local[0])?;
            (Some(g), Some(l), a)
        } else {
            (None, None, None)
        };

        let phi = round_perturbation(cfg.seed, k, d, cfg.perturbation);
        let draws = sample_round(cfg.seed, k, n, &cfg.channel);
        let noise: [Complex64; 3] = [1, 2, 3].map(|slot| sample_noise(cfg.seed, k, slot, &cfg.channel));
        let split = if variant.is_async() {
            async_partition(n, cfg.async_fraction, cfg.seed, k)?
        } else {
            DeviceSplit::all_on_time(n)
        };
        let batches: Vec<Vec<&Sample>> = shards
            .iter()
            .enumerate()
            .map(|(i, s)| draw_batch(s, cfg.batch, &mut keyed_rng(cfg.seed, Stream::Sample, &[i as u64, k])))
            .collect();
        let medium = RoundMedium {
            phi: &phi,
            draws: &draws,
            noise,
            precoder: &precoder,
        };
        let est = round_estimate(variant, &task.loss, &batches, local[0].as_slice(), gamma, &split, &medium)?;

        let row = RoundTrace {
            k,
            eta,
            gamma,
            slot1: Some(est.slots.s1),
            slot2: Some(est.slots.s2),
            slot3: est.slots.s3,
            grad_norm_sq,
            train_loss,
            test_acc,
            uplink_slots: est.uplink_slots(),
            uplink_scalars_per_device: 2,
            downlink_scalars: 1,
        };
        for theta in &mut local {
            let g = phi.scaled(est.scalar);
            theta.step(eta, &g)?;
        }
        if let Some(i) = local.iter().position(|t| t != &local[0]) {
            return Err(Error::invalid(format!("device {i} model drifted from device 0 at round {k}")));
        }
        comm.add(&row, n);
        trace.push(row);
        check_divergence(&local[0], k, &trace[..trace.len() - 1])?;
    }
    let theta = local.swap_remove(0);
    finish(task, trace, theta, comm)
}

/// Noiseless FedAvg: each device takes `local_steps` full-gradient steps from the
/// current global model, then the server averages the resulting models.
pub fn fedavg_baseline(cfg: &RunConfig, task: &Task) -> Result<RunOutput> {
    if cfg.algorithm != Algorithm::Fedavg {
        return Err(Error::invalid(format!(
            "fedavg baseline called with algorithm {}",
            cfg.algorithm.name()
        )));
    }
    check_task(cfg, task)?;
    let d = task.dim();
    let n = cfg.devices;
    let mut theta = task.theta0.clone();
    let mut trace = Vec::with_capacity(cfg.rounds as usize);
    let mut comm = CommAccounting::default();

    for k in 0..cfg.rounds {
        let (eta, gamma) = (cfg.schedule.eta(k), cfg.schedule.gamma(k));
        let (grad_norm_sq, train_loss, test_acc) = if k % cfg.eval_every == 0 {
            let (g, l, a) = task.metrics(&theta)?;
            (Some(g), Some(l), a)
        } else {
            (None, None, None)
        };
        let mut avg = vec![0.0; d];
        for shard in &task.partition.shards {
            let mut w = theta.clone();
            for _ in 0..cfg.local_steps {
                let g = model::local_grad(&task.loss, &w, &shard.samples)?;
                w.step(eta, &g)?;
            }
            avg.iter_mut().zip(w.as_slice()).for_each(|(a, v)| *a += v / n as f64);
        }
        theta = ModelParams::new(avg);
        let row = RoundTrace {
            k,
            eta,
            gamma,
            slot1: None,
            slot2: None,
            slot3: None,
            grad_norm_sq,
            train_loss,
            test_acc,
            uplink_slots: 0,
            uplink_scalars_per_device: d,
            downlink_scalars: d,
        };
        comm.add(&row, n);
        trace.push(row);
        check_divergence(&theta, k, &trace[..trace.len() - 1])?;
    }
    finish(task, trace, theta, comm)
}

fn fmt_opt(out: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        let _ = write!(out, "{v}");
    }
}

/// Trace CSV. Floats use shortest round-trip formatting; absent values are empty.
pub fn trace_to_csv(trace: &[RoundTrace]) -> String {
    let mut out = String::with_capacity(64 * (trace.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for t in trace {
        let _ = write!(out, "{},{},{},", t.k, t.eta, t.gamma);
        for (i, v) in [t.slot1, t.slot2, t.slot3, t.grad_norm_sq, t.train_loss, t.test_acc].into_iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            fmt_opt(&mut out, v);
        }
        out.push('\n');
    }
    out
}

/// Result of a least-squares fit of `log y` against `log x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub slope_se: f64,
    pub intercept: f64,
    /// The `(x, y)` points that entered the fit.
    pub points: Vec<(f64, f64)>,
}

/// Ordinary least squares on `(ln x, ln y)`.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 2 {
        return Err(Error::invalid("a slope needs at least two points"));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(Error::invalid("degenerate trace: log-log fit needs positive finite values"));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("log-log fit needs at least two distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if points.len() > 2 {
        let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(RateFit {
        slope,
        slope_se,
        intercept,
        points: points.to_vec(),
    })
}

/// Slope of `log E[min_{j≤k} ‖∇F(θⱼ)‖²]` against `log k` over rounds after `burn_in`.
///
/// Only rounds carrying a gradient-norm value are used; every replicate must
/// carry values on the same rounds.
pub fn measure_rate(runs: &[Vec<RoundTrace>], burn_in: u64) -> Result<RateFit> {
    if runs.len() < 10 {
        return Err(Error::invalid(format!("rate measurement needs >= 10 replicates, got {}", runs.len())));
    }
    let horizon = runs[0].len() as u64;
    if horizon < 10 * burn_in.max(1) {
        return Err(Error::invalid(format!(
            "horizon {horizon} is shorter than 10 x burn-in {burn_in}"
        )));
    }
    let evals: Vec<u64> = runs[0].iter().filter(|t| t.grad_norm_sq.is_some()).map(|t| t.k).collect();
    let mut mean_min = vec![0.0; evals.len()];
    for run in runs {
        let vals: Vec<(u64, f64)> = run.iter().filter_map(|t| t.grad_norm_sq.map(|g| (t.k, g))).collect();
        if vals.len() != evals.len() || vals.iter().zip(&evals).any(|(v, k)| v.0 != *k) {
            return Err(Error::invalid("replicates are evaluated on different rounds"));
        }
        let mut running = f64::INFINITY;
        for (m, (_, g)) in mean_min.iter_mut().zip(&vals) {
            running = running.min(*g);
            *m += running / runs.len() as f64;
        }
    }
    let points: Vec<(f64, f64)> = evals
        .iter()
        .zip(&mean_min)
        .filter(|(k, _)| **k >= burn_in.max(1))
        .map(|(k, m)| (*k as f64, *m))
        .collect();
    fit_loglog(&points)
}

/// Runs `replicates` copies of `cfg` with derived seeds, in parallel.
/// Each entry is the run output or the divergence error of that replicate.
pub fn run_replicates(cfg: &RunConfig, task: &Task, replicates: usize) -> Vec<Result<RunOutput>> {
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let c = RunConfig {
                seed: replicate_seed(cfg.seed, r as u64),
                ..cfg.clone()
            };
            run_training(&c, task)
        })
        .collect()
}

/// Rate measured across horizons: for each `K`, every replicate runs with the
/// constant steps prescribed for that horizon, and the point is
/// `min_k` of the replicate-mean `‖∇F(θₖ)‖²`.
#[derive(Debug, Clone)]
pub struct RateSweepConfig {
    pub base: RunConfig,
    pub horizons: Vec<u64>,
    pub replicates: usize,
    pub eta0: f64,
    /// Smoothing radius scale for zero-order runs.
    pub gamma0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonPoint {
    pub horizon: u64,
    pub min_mean_grad_norm_sq: f64,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSweep {
    pub points: Vec<HorizonPoint>,
    pub fit: RateFit,
    pub replicates: usize,
}

impl RateSweep {
    pub fn divergence_fraction(&self) -> f64 {
        let total: usize = self.points.iter().map(|p| p.diverged).sum();
        total as f64 / (self.replicates * self.points.len()).max(1) as f64
    }
}

/// Constant-step schedule for horizon `k`.
pub fn prescribed_schedule(algorithm: Algorithm, eta0: f64, gamma0: f64, horizon: u64) -> Schedule {
    match algorithm.variant() {
        Some(v) if v.is_zero_order() => Schedule::ConstantThm2 { eta0, gamma0, horizon },
        _ => Schedule::ConstantThm4 { eta0, horizon, gamma: 0.0 },
    }
}

pub fn rate_sweep(cfg: &RateSweepConfig, task: &Task) -> Result<RateSweep> {
    if cfg.replicates < 10 {
        return Err(Error::invalid(format!("rate measurement needs >= 10 replicates, got {}", cfg.replicates)));
    }
    if cfg.horizons.len() < 2 {
        return Err(Error::invalid("rate sweep needs at least two horizons"));
    }
    let mut points = Vec::with_capacity(cfg.horizons.len());
    for &horizon in &cfg.horizons {
        let run = RunConfig {
            rounds: horizon,
            eval_every: 1,
            schedule: prescribed_schedule(cfg.base.algorithm, cfg.eta0, cfg.gamma0, horizon),
            ..cfg.base.clone()
        };
        let results = run_replicates(&run, task, cfg.replicates);
        let mut sums = vec![0.0; horizon as usize + 1];
        let mut ok = 0usize;
        let mut diverged = 0usize;
        for r in results {
            match r {
                Ok(out) => {
                    for (s, t) in sums.iter_mut().zip(&out.trace) {
                        *s += t.grad_norm_sq.unwrap_or(f64::NAN);
                    }
                    sums[horizon as usize] += out.final_grad_norm_sq;
                    ok += 1;
                }
                Err(Error::Diverged { .. }) => diverged += 1,
                Err(e) => return Err(e),
            }
        }
        let value = if ok == 0 {
            f64::NAN
        } else {
            sums.iter().map(|s| s / ok as f64).fold(f64::INFINITY, f64::min)
        };
        points.push(HorizonPoint {
            horizon,
            min_mean_grad_norm_sq: value,
            diverged,
        });
    }
    let fit = fit_loglog(
        &points
            .iter()
            .map(|p| (p.horizon as f64, p.min_mean_grad_norm_sq))
            .collect::<Vec<_>>(),
    )?;
    Ok(RateSweep {
        points,
        fit,
        replicates: cfg.replicates,
    })
}

/// `‖∇F(θ)‖²` averaged over replicate traces at each evaluated round.
pub fn mean_grad_norm_curve(runs: &[RunOutput]) -> Vec<(u64, f64)> {
    let Some(first) = runs.first() else { return Vec::new() };
    first
        .trace
        .iter()
        .enumerate()
        .filter(|(_, t)| t.grad_norm_sq.is_some())
        .map(|(i, t)| {
            let m = runs.iter().map(|r| r.trace[i].grad_norm_sq.unwrap_or(f64::NAN)).sum::<f64>() / runs.len() as f64;
            (t.k, m)
        })
        .collect()
}

/// Norm of the parameter change a full-gradient step would make, used by the
/// examples to pick step sizes.
pub fn full_gradient_norm(task: &Task, theta: &ModelParams) -> Result<f64> {
    Ok(norm_sq(&model::global_grad(&task.loss, theta, &task.partition.shards)?).sqrt())
}
