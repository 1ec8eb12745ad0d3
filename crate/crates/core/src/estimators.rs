//! The four scalar over-the-air gradient estimators, their Monte-Carlo moments,
//! and the closed-form second-moment bounds.
//!
//! Every estimate has the form `Φₖ · s` for one broadcast scalar `s`:
//!
//! * sync: `s = slot1 · slot2`, with `slot1 = Σ aᵢhᵢ + n₁` and
//!   `slot2 = Σ pᵢhᵢ + n₂`;
//! * async: `s = slot1 · slot2 + slot3 · slot2`, where on-time devices `N₁` send
//!   `(aᵢ, pᵢ)` in slots 1–2 and late devices `N₂` send `(aⱼ, pⱼ)` in slots 2–3.
//!
//! The payload `pᵢ` is the two-point difference `f(θ+γΦ) − f(θ−γΦ)` for EZOFL and
//! the projection `∇fᵢ(θ)ᵀΦ` for EFOFL.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use num_complex::Complex64;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ota_minislot, precoder_constants, ChannelConfig, ChannelDraw, Precoder};
use crate::data::Partition;
use crate::model::{self, dot, norm_sq, LossModel, ModelParams, Sample};
use crate::rng::{keyed_rng, SimRng, Stream};
use crate::{Error, Result};

/// Distribution of the shared perturbation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    /// I.i.d. ±1 entries.
    #[default]
    Rademacher,
    /// Uniform on the sphere of radius `√d`.
    Sphere,
}

impl PerturbationKind {
    /// `(b₁, b₂)` with `E[ΦΦᵀ] = b₁I` and `‖Φ‖ ≤ b₂`. Both kinds give `(1, √d)`.
    pub fn moments(self, d: usize) -> (f64, f64) {
        (1.0, (d as f64).sqrt())
    }
}

/// Perturbation direction `Φₖ`, common to every device in a round.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationVec {
    pub phi: Vec<f64>,
}

impl PerturbationVec {
    pub fn new(phi: Vec<f64>) -> Self {
        PerturbationVec { phi }
    }

    pub fn draw<R: Rng>(kind: PerturbationKind, d: usize, rng: &mut R) -> Self {
        let phi = match kind {
            PerturbationKind::Rademacher => (0..d)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect(),
            PerturbationKind::Sphere => loop {
                let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let n = norm_sq(&v).sqrt();
                if n > 0.0 {
                    let scale = (d as f64).sqrt() / n;
                    break v.into_iter().map(|x| x * scale).collect();
                }
            },
        };
        PerturbationVec { phi }
    }

    pub fn dim(&self) -> usize {
        self.phi.len()
    }

    pub fn scaled(&self, s: f64) -> Vec<f64> {
        self.phi.iter().map(|p| p * s).collect()
    }
}

/// Shared direction of `round`, identical on every device and at the server.
pub fn round_perturbation(seed: u64, round: u64, d: usize, kind: PerturbationKind) -> PerturbationVec {
    PerturbationVec::draw(kind, d, &mut keyed_rng(seed, Stream::Perturbation, &[round]))
}

/// Which estimator a round uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Ezofl,
    Efofl,
    EzoflAsync,
    EfoflAsync,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ezofl, Variant::Efofl, Variant::EzoflAsync, Variant::EfoflAsync];

    pub fn is_async(self) -> bool {
        matches!(self, Variant::EzoflAsync | Variant::EfoflAsync)
    }

    pub fn is_zero_order(self) -> bool {
        matches!(self, Variant::Ezofl | Variant::EzoflAsync)
    }

    pub fn sync_form(self) -> Variant {
        if self.is_zero_order() {
            Variant::Ezofl
        } else {
            Variant::Efofl
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ezofl => "ezofl",
            Variant::Efofl => "efofl",
            Variant::EzoflAsync => "ezofl-async",
            Variant::EfoflAsync => "efofl-async",
        }
    }

    /// Name of the matching closed-form bound.
    pub fn bound_name(self) -> &'static str {
        match self {
            Variant::Ezofl => "C",
            Variant::Efofl => "C2",
            Variant::EzoflAsync => "C'",
            Variant::EfoflAsync => "C2'",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown estimator variant `{s}`")))
    }
}

/// Which devices transmit on time (`N₁`) and which are one slot late (`N₂`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSplit {
    late: Vec<bool>,
}

impl DeviceSplit {
    pub fn all_on_time(devices: usize) -> Self {
        DeviceSplit { late: vec![false; devices] }
    }

    pub fn from_late(devices: usize, late: &[usize]) -> Result<Self> {
        let mut mask = vec![false; devices];
        for &j in late {
            match mask.get_mut(j) {
                Some(m) if !*m => *m = true,
                Some(_) => return Err(Error::invalid(format!("device {j} listed twice in the late set"))),
                None => return Err(Error::invalid(format!("late device {j} out of range for {devices} devices"))),
            }
        }
        Ok(DeviceSplit { late: mask })
    }

    /// Checks that `n1` and `n2` are disjoint and together cover `0..devices`.
    pub fn from_sets(devices: usize, n1: &[usize], n2: &[usize]) -> Result<Self> {
        let split = DeviceSplit::from_late(devices, n2)?;
        let mut seen = split.late.clone();
        for &i in n1 {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::invalid(format!("device {i} appears in both sets or twice"))),
                None => return Err(Error::invalid(format!("device {i} out of range for {devices} devices"))),
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("device {missing} is in neither set")));
        }
        Ok(split)
    }

    /// Uniformly random late set of the given size.
    pub fn random<R: Rng>(devices: usize, late_count: usize, rng: &mut R) -> Result<Self> {
        if late_count > devices {
            return Err(Error::invalid(format!("{late_count} late devices out of {devices}")));
        }
        let idx = sample_indices(rng, devices, late_count).into_vec();
        DeviceSplit::from_late(devices, &idx)
    }

    pub fn devices(&self) -> usize {
        self.late.len()
    }

    pub fn is_late(&self, i: usize) -> bool {
        self.late[i]
    }

    pub fn n1(&self) -> Vec<usize> {
        (0..self.late.len()).filter(|&i| !self.late[i]).collect()
    }

    pub fn n2(&self) -> Vec<usize> {
        (0..self.late.len()).filter(|&i| self.late[i]).collect()
    }

    pub fn late_count(&self) -> usize {
        self.late.iter().filter(|&&l| l).count()
    }
}

/// Received minislot values of one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slots {
    pub s1: f64,
    pub s2: f64,
    /// Only present when at least one device is late.
    pub s3: Option<f64>,
}

/// `Φₖ · scalar` together with the minislots that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub g: Vec<f64>,
    pub scalar: f64,
    pub slots: Slots,
}

impl GradEstimate {
    fn from_slots(phi: &PerturbationVec, slots: Slots) -> Self {
        let scalar = match slots.s3 {
            None => slots.s1 * slots.s2,
            Some(s3) => slots.s1 * slots.s2 + s3 * slots.s2,
        };
        GradEstimate {
            g: phi.scaled(scalar),
            scalar,
            slots,
        }
    }

    /// Number of minislots used on the uplink.
    pub fn uplink_slots(&self) -> usize {
        if self.slots.s3.is_some() {
            3
        } else {
            2
        }
    }
}

/// Everything a round shares across devices apart from the payloads.
#[derive(Debug, Clone, Copy)]
pub struct RoundMedium<'a> {
    pub phi: &'a PerturbationVec,
    pub draws: &'a [ChannelDraw],
    /// Complex noise of slots 1, 2, 3.
    pub noise: [Complex64; 3],
    pub precoder: &'a Precoder,
}

impl RoundMedium<'_> {
    fn check(&self, payloads: usize) -> Result<()> {
        let n = self.draws.len();
        if self.precoder.a.len() != n || payloads != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: if payloads != n { payloads } else { self.precoder.a.len() },
            });
        }
        Ok(())
    }
}

/// Two-slot estimate from precomputed payloads.
pub fn sync_estimate(payloads: &[f64], medium: &RoundMedium<'_>) -> Result<GradEstimate> {
    medium.check(payloads.len())?;
    let s1 = ota_minislot(&medium.precoder.a, medium.draws, medium.noise[0])?;
    let s2 = ota_minislot(payloads, medium.draws, medium.noise[1])?;
    Ok(GradEstimate::from_slots(medium.phi, Slots { s1, s2, s3: None }))
}

/// Three-slot estimate from precomputed payloads. With no late device slot 3
/// is never transmitted and the result equals [`sync_estimate`] bit for bit.
pub fn async_estimate(payloads: &[f64], split: &DeviceSplit, medium: &RoundMedium<'_>) -> Result<GradEstimate> {
    medium.check(payloads.len())?;
    if split.devices() != payloads.len() {
        return Err(Error::DimensionMismatch {
            expected: payloads.len(),
            got: split.devices(),
        });
    }
    let a = &medium.precoder.a;
    let pick = |set: &[usize], src: &[f64]| -> (Vec<f64>, Vec<ChannelDraw>) {
        set.iter().map(|&i| (src[i], medium.draws[i])).unzip()
    };
    let (n1, n2) = (split.n1(), split.n2());

    let (x1, h1) = pick(&n1, a);
    let s1 = ota_minislot(&x1, &h1, medium.noise[0])?;
    let mixed: Vec<f64> = (0..payloads.len())
        .map(|i| if split.is_late(i) { a[i] } else { payloads[i] })
        .collect();
    let s2 = ota_minislot(&mixed, medium.draws, medium.noise[1])?;
    let s3 = if n2.is_empty() {
        None
    } else {
        let (x3, h3) = pick(&n2, payloads);
        Some(ota_minislot(&x3, &h3, medium.noise[2])?)
    };
    Ok(GradEstimate::from_slots(medium.phi, Slots { s1, s2, s3 }))
}

/// `f(θ+γΦ, ξ) − f(θ−γΦ, ξ)` averaged over a batch, with the same `ξ` in both
/// evaluations.
pub fn two_point_delta(loss: &LossModel, batch: &[&Sample], theta: &[f64], gamma: f64, phi: &PerturbationVec) -> Result<f64> {
    let (plus, minus) = shifted(theta, gamma, phi)?;
    delta_at(loss, batch, &plus, &minus)
}

fn shifted(theta: &[f64], gamma: f64, phi: &PerturbationVec) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("smoothing radius must be >= 0, got {gamma}")));
    }
    model::check_dim(theta.len(), phi.dim())?;
    let plus = theta.iter().zip(&phi.phi).map(|(t, p)| t + gamma * p).collect();
    let minus = theta.iter().zip(&phi.phi).map(|(t, p)| t - gamma * p).collect();
    Ok((plus, minus))
}

fn delta_at(loss: &LossModel, batch: &[&Sample], plus: &[f64], minus: &[f64]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        total += loss.loss(plus, s)? - loss.loss(minus, s)?;
    }
    Ok(total / batch.len() as f64)
}

/// Per-device two-point payloads.
pub fn ezofl_payloads(loss: &LossModel, batches: &[Vec<&Sample>], theta: &[f64], gamma: f64, phi: &PerturbationVec) -> Result<Vec<f64>> {
    let (plus, minus) = shifted(theta, gamma, phi)?;
    batches.iter().map(|b| delta_at(loss, b, &plus, &minus)).collect()
}

/// Per-device projections `∇fᵢ(θ)ᵀΦ`.
pub fn efofl_payloads(loss: &LossModel, batches: &[Vec<&Sample>], theta: &[f64], phi: &PerturbationVec) -> Result<Vec<f64>> {
    model::check_dim(theta.len(), phi.dim())?;
    let mut buf = vec![0.0; theta.len()];
    batches
        .iter()
        .map(|b| {
            if b.is_empty() {
                return Err(Error::EmptyDataset("empty batch".into()));
            }
            buf.iter_mut().for_each(|v| *v = 0.0);
            let w = 1.0 / b.len() as f64;
            for s in b {
                loss.grad_into(theta, s, w, &mut buf)?;
            }
            Ok(dot(&buf, &phi.phi))
        })
        .collect()
}

pub fn ezofl_round(loss: &LossModel, batches: &[Vec<&Sample>], theta: &[f64], gamma: f64, medium: &RoundMedium<'_>) -> Result<GradEstimate> {
    sync_estimate(&ezofl_payloads(loss, batches, theta, gamma, medium.phi)?, medium)
}

pub fn efofl_round(loss: &LossModel, batches: &[Vec<&Sample>], theta: &[f64], medium: &RoundMedium<'_>) -> Result<GradEstimate> {
    sync_estimate(&efofl_payloads(loss, batches, theta, medium.phi)?, medium)
}

pub fn ezofl_async_round(
    loss: &LossModel,
    batches: &[Vec<&Sample>],
    theta: &[f64],
    gamma: f64,
    split: &DeviceSplit,
    medium: &RoundMedium<'_>,
) -> Result<GradEstimate> {
    async_estimate(&ezofl_payloads(loss, batches, theta, gamma, medium.phi)?, split, medium)
}

pub fn efofl_async_round(
    loss: &LossModel,
    batches: &[Vec<&Sample>],
    theta: &[f64],
    split: &DeviceSplit,
    medium: &RoundMedium<'_>,
) -> Result<GradEstimate> {
    async_estimate(&efofl_payloads(loss, batches, theta, medium.phi)?, split, medium)
}

/// Dispatches to the round function of `variant`. Sync variants ignore `split`.
#[allow(clippy::too_many_arguments)]
pub fn round_estimate(
    variant: Variant,
    loss: &LossModel,
    batches: &[Vec<&Sample>],
    theta: &[f64],
    gamma: f64,
    split: &DeviceSplit,
    medium: &RoundMedium<'_>,
) -> Result<GradEstimate> {
    match variant {
        Variant::Ezofl => ezofl_round(loss, batches, theta, gamma, medium),
        Variant::Efofl => efofl_round(loss, batches, theta, medium),
        Variant::EzoflAsync => ezofl_async_round(loss, batches, theta, gamma, split, medium),
        Variant::EfoflAsync => efofl_async_round(loss, batches, theta, split, medium),
    }
}

/// Draws `batch` local samples uniformly with replacement.
pub fn draw_batch<'a, R: Rng>(shard: &'a [Sample], batch: usize, rng: &mut R) -> Vec<&'a Sample> {
    (0..batch).map(|_| &shard[rng.random_range(0..shard.len())]).collect()
}

/// Constants entering the bias, moment and iteration-count results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConstants {
    /// Smoothness of `F`; the same constant is called `μ` in the descent step.
    pub l_smooth: f64,
    /// Bound on the Hessian norm of each `Fᵢ`.
    pub b_hess: f64,
    /// Lipschitz constant of each per-sample loss.
    pub l_xi: f64,
    /// Bound on per-sample gradient norms.
    pub a_grad: f64,
    pub b1: f64,
    pub b2: f64,
    pub devices: usize,
    /// Noise standard deviations of slots 1, 2, 3.
    pub sigma: [f64; 3],
    /// `F(θ₀) − F(θ*)`.
    pub delta_hat: f64,
}

impl TheoryConstants {
    pub fn mu(&self) -> f64 {
        self.l_smooth
    }

    pub fn c1(&self) -> f64 {
        2.0 * self.b1
    }

    pub fn c3(&self) -> f64 {
        self.b_hess * self.b2.powi(3) * self.devices as f64 / (2.0 * self.b1)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [("l_smooth", self.l_smooth), ("b1", self.b1), ("b2", self.b2)];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        let nonneg = [
            ("b_hess", self.b_hess),
            ("l_xi", self.l_xi),
            ("a_grad", self.a_grad),
            ("delta_hat", self.delta_hat),
            ("sigma1", self.sigma[0]),
            ("sigma2", self.sigma[1]),
            ("sigma3", self.sigma[2]),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.devices == 0 {
            return Err(Error::invalid("devices must be >= 1"));
        }
        Ok(())
    }

    /// Constants of a task at `θ₀`.
    ///
    /// `gamma_max` is the largest smoothing radius used, so that `L_ξ` covers the
    /// ball the two-point queries reach. `a_factor` multiplies the measured
    /// largest per-sample gradient norm.
    pub fn for_task(
        loss: &LossModel,
        partition: &Partition,
        theta0: &ModelParams,
        channel: &ChannelConfig,
        kind: PerturbationKind,
        gamma_max: f64,
        a_factor: f64,
        delta_hat: f64,
    ) -> Result<Self> {
        let d = partition.dim();
        model::check_dim(d, theta0.dim())?;
        let (b1, b2) = kind.moments(d);
        let per_device: Vec<f64> = partition
            .shards
            .iter()
            .map(|s| loss.hessian_bound(&s.samples))
            .collect();
        let all: Vec<Sample> = partition.all_samples().cloned().collect();
        let k = TheoryConstants {
            l_smooth: per_device.iter().sum(),
            b_hess: per_device.iter().copied().fold(0.0, f64::max),
            l_xi: loss.lipschitz_bound(&all, theta0.as_slice(), gamma_max * b2),
            a_grad: a_factor * model::max_sample_grad_norm(loss, theta0, &partition.shards)?,
            b1,
            b2,
            devices: partition.num_devices(),
            sigma: [channel.slot_sigma(1), channel.slot_sigma(2), channel.slot_sigma(3)],
            delta_hat,
        };
        k.validate()?;
        Ok(k)
    }
}

#[derive(Default, Clone, Copy)]
struct SetSums {
    /// `Σ E h²`
    e: f64,
    /// `Σ a² E h²`
    a2e: f64,
    /// `Σ a E h²`
    ae: f64,
}

fn set_sums(set: &[usize], a: &[f64], eh2: &[f64]) -> SetSums {
    set.iter().fold(SetSums::default(), |acc, &i| SetSums {
        e: acc.e + eh2[i],
        a2e: acc.a2e + a[i] * a[i] * eh2[i],
        ae: acc.ae + a[i] * eh2[i],
    })
}

/// Closed-form bound on `E[‖g‖²]` for `variant`.
///
/// The coefficient `t` is `4b₂²L_ξ²γ²` for the zero-order variants and `b₂²A²`
/// for the first-order ones. Sync variants ignore `split`.
pub fn second_moment_bound(
    variant: Variant,
    k: &TheoryConstants,
    channel: &ChannelConfig,
    gamma: f64,
    split: &DeviceSplit,
) -> Result<f64> {
    k.validate()?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("smoothing radius must be >= 0, got {gamma}")));
    }
    if split.devices() != k.devices {
        return Err(Error::DimensionMismatch {
            expected: k.devices,
            got: split.devices(),
        });
    }
    let a = precoder_constants(channel, k.devices)?.a;
    let eh2: Vec<f64> = (0..k.devices).map(|i| channel.second_moment(i)).collect();
    let b2sq = k.b2 * k.b2;
    let t = if variant.is_zero_order() {
        4.0 * b2sq * k.l_xi * k.l_xi * gamma * gamma
    } else {
        b2sq * k.a_grad * k.a_grad
    };
    let [s1, s2, s3] = k.sigma.map(|s| s * s);

    let inner = if !variant.is_async() {
        let all: Vec<usize> = (0..k.devices).collect();
        let n = set_sums(&all, &a, &eh2);
        s1 * s2 + t * s1 * n.e + s2 * n.a2e + t * n.a2e * n.e + t * n.ae * n.ae
    } else {
        let p = set_sums(&split.n1(), &a, &eh2);
        let q = set_sums(&split.n2(), &a, &eh2);
        let on_time = s1 * s2 + t * s1 * p.e + s2 * p.a2e + t * p.a2e * p.e + t * p.ae * p.ae;
        let late = (p.a2e + s1) * q.a2e + s2 * t * q.e + s3 * q.a2e + s3 * s2 + t * q.a2e * q.e + t * q.ae * q.ae;
        // The two variants differ in which set carries the σ₃² cross term.
        let cross_noise = if variant.is_zero_order() { t * s3 * p.e } else { t * s3 * q.e };
        let cross = t * t * p.e * q.e + 4.0 * t * p.ae * q.ae;
        on_time + late + cross_noise + cross
    };
    Ok(b2sq * inner)
}

/// Settings of a Monte-Carlo moment run.
#[derive(Debug, Clone)]
pub struct MomentConfig {
    pub variant: Variant,
    pub loss: LossModel,
    pub channel: ChannelConfig,
    pub perturbation: PerturbationKind,
    pub gamma: f64,
    /// Late set for async variants, fixed across trials.
    pub split: DeviceSplit,
    pub batch: usize,
    pub trials: usize,
    pub seed: u64,
}

/// Empirical moments of an estimator at a fixed `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub variant: Variant,
    pub trials: usize,
    pub mean: Vec<f64>,
    /// Standard error of each mean coordinate.
    pub se: Vec<f64>,
    /// `E[‖g‖²]`.
    pub sqnorm: f64,
    pub sqnorm_se: f64,
    /// `E[‖g‖]`, for the variance of the norm.
    pub norm_mean: f64,
    pub bound: Option<f64>,
}

impl MomentEstimate {
    /// Aggregated standard error of the mean vector, `√Σ seⱼ²`.
    pub fn se_norm(&self) -> f64 {
        norm_sq(&self.se).sqrt()
    }

    pub fn norm_variance(&self) -> f64 {
        (self.sqnorm - self.norm_mean * self.norm_mean).max(0.0)
    }

    /// `‖mean − target‖`.
    pub fn distance_to(&self, target: &[f64]) -> f64 {
        model::dist_sq(&self.mean, target).sqrt()
    }
}

#[derive(Clone)]
struct Accum {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    norm: f64,
    norm2: f64,
    norm4: f64,
}

impl Accum {
    fn new(d: usize) -> Self {
        Accum {
            sum: vec![0.0; d],
            sum_sq: vec![0.0; d],
            norm: 0.0,
            norm2: 0.0,
            norm4: 0.0,
        }
    }

    fn push(&mut self, g: &[f64]) {
        let n2 = norm_sq(g);
        for ((s, q), v) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(g) {
            *s += v;
            *q += v * v;
        }
        self.norm += n2.sqrt();
        self.norm2 += n2;
        self.norm4 += n2 * n2;
    }

    fn merge(mut self, other: &Accum) -> Self {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self.norm += other.norm;
        self.norm2 += other.norm2;
        self.norm4 += other.norm4;
        self
    }
}

const MC_CHUNK: usize = 2048;

/// Draws everything one Monte-Carlo trial needs from a single keyed stream.
fn trial_estimate(
    cfg: &MomentConfig,
    shards: &[&[Sample]],
    theta: &[f64],
    precoder: &Precoder,
    trial: u64,
) -> Result<GradEstimate> {
    let mut rng: SimRng = keyed_rng(cfg.seed, Stream::Trial, &[trial]);
    let d = theta.len();
    let phi = PerturbationVec::draw(cfg.perturbation, d, &mut rng);
    let draws: Vec<ChannelDraw> = (0..shards.len())
        .map(|i| {
            let s = cfg.channel.sigma_h_of(i);
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            ChannelDraw::new(Complex64::new(s * re, s * im))
        })
        .collect();
    let mut noise = [Complex64::default(); 3];
    for (slot, n) in noise.iter_mut().enumerate() {
        let s = cfg.channel.slot_sigma(slot + 1);
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *n = Complex64::new(s * re, s * im);
    }
    let batches: Vec<Vec<&Sample>> = shards.iter().map(|s| draw_batch(s, cfg.batch, &mut rng)).collect();
    let medium = RoundMedium {
        phi: &phi,
        draws: &draws,
        noise,
        precoder,
    };
    round_estimate(cfg.variant, &cfg.loss, &batches, theta, cfg.gamma, &cfg.split, &medium)
}

/// Empirical `E[g | θ]` and `E[‖g‖² | θ]` over `trials` independent rounds.
///
/// Trials run in parallel in fixed-size chunks whose partial sums are combined in
/// chunk order, so the result does not depend on the thread count.
pub fn estimator_moments_mc<S: AsRef<[Sample]> + Sync>(
    cfg: &MomentConfig,
    theta: &ModelParams,
    shards: &[S],
) -> Result<MomentEstimate> {
    if cfg.trials < 2 {
        return Err(Error::invalid("at least two trials are needed for a standard error"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    if shards.is_empty() || shards.iter().any(|s| s.as_ref().is_empty()) {
        return Err(Error::EmptyDataset("device shard".into()));
    }
    cfg.channel.validate(shards.len())?;
    if cfg.split.devices() != shards.len() {
        return Err(Error::DimensionMismatch {
            expected: shards.len(),
            got: cfg.split.devices(),
        });
    }
    let shard_refs: Vec<&[Sample]> = shards.iter().map(|s| s.as_ref()).collect();
    let precoder = precoder_constants(&cfg.channel, shards.len())?;
    let d = theta.dim();
    let theta = theta.as_slice();
    let chunks = cfg.trials.div_ceil(MC_CHUNK);

    let partials: Vec<Result<Accum>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Accum::new(d);
            let end = ((c + 1) * MC_CHUNK).min(cfg.trials);
            for t in c * MC_CHUNK..end {
                let est = trial_estimate(cfg, &shard_refs, theta, &precoder, t as u64)?;
                acc.push(&est.g);
            }
            Ok(acc)
        })
        .collect();
    let mut total = Accum::new(d);
    for p in partials {
        total = total.merge(&p?);
    }

    let m = cfg.trials as f64;
    let mean: Vec<f64> = total.sum.iter().map(|s| s / m).collect();
    let se = total
        .sum_sq
        .iter()
        .zip(&mean)
        .map(|(q, mu)| ((q / m - mu * mu).max(0.0) * m / (m - 1.0) / m).sqrt())
        .collect();
    let sqnorm = total.norm2 / m;
    let sqnorm_se = ((total.norm4 / m - sqnorm * sqnorm).max(0.0) * m / (m - 1.0) / m).sqrt();
    Ok(MomentEstimate {
        variant: cfg.variant,
        trials: cfg.trials,
        mean,
        se,
        sqnorm,
        sqnorm_se,
        norm_mean: total.norm / m,
        bound: None,
    })
}

/// Paired comparison of `Var(‖g‖)` between two variants on identical draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedVariance {
    pub var_first: f64,
    pub var_second: f64,
    /// Mean over chunks of `Var₂ − Var₁`.
    pub diff: f64,
    /// Batch-means standard error of `diff`.
    pub diff_se: f64,
}

/// Runs `first` and `second` on the same trial streams (they must share seed,
/// channel, batch and trial count) and compares the variance of `‖g‖`.
pub fn paired_norm_variance<S: AsRef<[Sample]> + Sync>(
    first: &MomentConfig,
    second: &MomentConfig,
    theta: &ModelParams,
    shards: &[S],
) -> Result<PairedVariance> {
    if first.seed != second.seed || first.trials != second.trials || first.channel != second.channel || first.batch != second.batch {
        return Err(Error::invalid("paired comparison needs matching seed, trials, channel and batch"));
    }
    let chunks = first.trials / MC_CHUNK;
    if chunks < 2 {
        return Err(Error::invalid(format!("paired comparison needs at least {} trials", 2 * MC_CHUNK)));
    }
    let shard_refs: Vec<&[Sample]> = shards.iter().map(|s| s.as_ref()).collect();
    let precoder = precoder_constants(&first.channel, shards.len())?;
    let theta = theta.as_slice();
    let per_chunk: Vec<Result<[f64; 4]>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut s = [0.0; 4];
            for t in c * MC_CHUNK..(c + 1) * MC_CHUNK {
                let a = norm_sq(&trial_estimate(first, &shard_refs, theta, &precoder, t as u64)?.g).sqrt();
                let b = norm_sq(&trial_estimate(second, &shard_refs, theta, &precoder, t as u64)?.g).sqrt();
                s[0] += a;
                s[1] += a * a;
                s[2] += b;
                s[3] += b * b;
            }
            Ok(s)
        })
        .collect();
    let m = MC_CHUNK as f64;
    let mut diffs = Vec::with_capacity(chunks);
    let mut tot = [0.0; 4];
    for s in per_chunk {
        let s = s?;
        let v1 = s[1] / m - (s[0] / m).powi(2);
        let v2 = s[3] / m - (s[2] / m).powi(2);
        diffs.push(v2 - v1);
        for (t, v) in tot.iter_mut().zip(s) {
            *t += v;
        }
    }
    let n = (chunks * MC_CHUNK) as f64;
    let c = chunks as f64;
    let diff = diffs.iter().sum::<f64>() / c;
    let var = diffs.iter().map(|x| (x - diff).powi(2)).sum::<f64>() / (c - 1.0);
    Ok(PairedVariance {
        var_first: tot[1] / n - (tot[0] / n).powi(2),
        var_second: tot[3] / n - (tot[2] / n).powi(2),
        diff,
        diff_se: (var / c).sqrt(),
    })
}

/// Exact `E[g | θ]` of sync EZOFL with Rademacher directions.
///
/// With `aᵢ = 1/E[hᵢ²]` and zero-mean noise the channel averages out, leaving
/// `Σᵢ E_{Φ,ξ}[Φ Δfᵢ]`. The `2ᵈ` sign patterns and every local sample are
/// enumerated, so this is only usable for small `d`.
pub fn ezofl_mean_exact<S: AsRef<[Sample]>>(loss: &LossModel, shards: &[S], theta: &ModelParams, gamma: f64) -> Result<Vec<f64>> {
    let d = theta.dim();
    if d > 20 {
        return Err(Error::invalid(format!("exact enumeration over 2^{d} directions is too large")));
    }
    let mut mean = vec![0.0; d];
    let patterns = 1u64 << d;
    for bits in 0..patterns {
        let phi = PerturbationVec::new((0..d).map(|j| if bits >> j & 1 == 1 { 1.0 } else { -1.0 }).collect());
        let (plus, minus) = shifted(theta.as_slice(), gamma, &phi)?;
        let mut total = 0.0;
        for shard in shards {
            let shard = shard.as_ref();
            let batch: Vec<&Sample> = shard.iter().collect();
            total += delta_at(loss, &batch, &plus, &minus)?;
        }
        for (m, p) in mean.iter_mut().zip(&phi.phi) {
            *m += p * total / patterns as f64;
        }
    }
    Ok(mean)
}

/// CSV with header `variant,M,mean_0..,se_0..,sqnorm,bound`.
pub fn moments_to_csv(rows: &[MomentEstimate]) -> Result<String> {
    let d = rows.first().map_or(0, |r| r.mean.len());
    let mut out = String::from("variant,M");
    for j in 0..d {
        let _ = write!(out, ",mean_{j}");
    }
    for j in 0..d {
        let _ = write!(out, ",se_{j}");
    }
    out.push_str(",sqnorm,bound\n");
    for r in rows {
        if r.mean.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: r.mean.len() });
        }
        let _ = write!(out, "{},{}", r.variant, r.trials);
        for v in r.mean.iter().chain(&r.se) {
            let _ = write!(out, ",{v}");
        }
        let _ = write!(out, ",{},", r.sqnorm);
        if let Some(b) = r.bound {
            let _ = write!(out, "{b}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sample_round;
    use crate::data::{partition_equal, synth_dataset};

    fn unit_medium<'a>(phi: &'a PerturbationVec, draws: &'a [ChannelDraw], pre: &'a Precoder) -> RoundMedium<'a> {
        RoundMedium {
            phi,
            draws,
            noise: [Complex64::default(); 3],
            precoder: pre,
        }
    }

    fn one() -> (Vec<ChannelDraw>, Precoder) {
        (vec![ChannelDraw::new(Complex64::new(1.0, 0.0))], Precoder { a: vec![1.0] })
    }

    #[test]
    fn two_point_fixtures() {
        let q = LossModel::Quadratic;
        let s = Sample::new(vec![0.0, 0.0], 0.0);
        let phi = PerturbationVec::new(vec![1.0, 1.0]);
        let v = two_point_delta(&q, &[&s], &[1.0, 0.0], 0.1, &phi).unwrap();
        assert!((v - 0.2).abs() < 1e-12);
        assert_eq!(two_point_delta(&q, &[&s], &[1.0, 0.0], 0.0, &phi).unwrap(), 0.0);
        assert!(two_point_delta(&q, &[&s], &[1.0, 0.0], -0.1, &phi).is_err());
    }

    #[test]
    fn two_point_respects_lipschitz_bound() {
        let ds = synth_dataset(50, 6, 2).unwrap();
        let loss = LossModel::NonconvexLogistic { lambda: 0.1 };
        let mut rng = keyed_rng(1, Stream::Aux, &[]);
        let gamma = 0.3;
        let theta = vec![0.0; 6];
        let l_xi = loss.lipschitz_bound(&ds.samples, &theta, gamma * 6f64.sqrt());
        for _ in 0..1000 {
            let phi = PerturbationVec::draw(PerturbationKind::Rademacher, 6, &mut rng);
            let s = &ds.samples[rng.random_range(0..ds.len())];
            let v = two_point_delta(&loss, &[s], &theta, gamma, &phi).unwrap();
            assert!(v.abs() <= 2.0 * l_xi * gamma * 6f64.sqrt());
        }
    }

    #[test]
    fn sync_fixtures() {
        let (draws, pre) = one();
        let phi = PerturbationVec::new(vec![1.0, -1.0]);
        let g = sync_estimate(&[0.4], &unit_medium(&phi, &draws, &pre)).unwrap();
        assert_eq!(g.g, vec![0.4, -0.4]);

        let phi = PerturbationVec::new(vec![1.0, 1.0]);
        let p = efofl_payloads(&LossModel::Quadratic, &[vec![&Sample::new(vec![-2.0, 0.0], 0.0)]], &[0.0, 0.0], &phi).unwrap();
        assert_eq!(p, vec![2.0]);
        let g = sync_estimate(&p, &unit_medium(&phi, &draws, &pre)).unwrap();
        assert_eq!(g.g, vec![2.0, 2.0]);

        let g = sync_estimate(&[0.0], &unit_medium(&phi, &draws, &pre)).unwrap();
        assert!(g.g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_radius_gives_zero_estimate() {
        let cfg = ChannelConfig::new(1.0, 0.0);
        let draws = sample_round(3, 0, 3, &cfg);
        let pre = precoder_constants(&cfg, 3).unwrap();
        let s = Sample::new(vec![0.5, 1.0], 1.0);
        let batches = vec![vec![&s]; 3];
        let phi = PerturbationVec::new(vec![1.0, -1.0]);
        let g = ezofl_round(&LossModel::default(), &batches, &[0.3, 0.2], 0.0, &unit_medium(&phi, &draws, &pre)).unwrap();
        assert!(g.g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn async_without_late_devices_is_sync() {
        let cfg = ChannelConfig::new(0.8, 0.5);
        let draws = sample_round(4, 1, 5, &cfg);
        let pre = precoder_constants(&cfg, 5).unwrap();
        let phi = round_perturbation(4, 1, 3, PerturbationKind::Rademacher);
        let medium = RoundMedium {
            phi: &phi,
            draws: &draws,
            noise: [Complex64::new(0.3, 1.0), Complex64::new(-0.7, 0.2), Complex64::new(5.0, 5.0)],
            precoder: &pre,
        };
        let payloads = [0.1, -2.0, 0.5, 3.0, -0.25];
        let sync = sync_estimate(&payloads, &medium).unwrap();
        let asy = async_estimate(&payloads, &DeviceSplit::all_on_time(5), &medium).unwrap();
        assert_eq!(sync, asy);
        assert_eq!(asy.uplink_slots(), 2);
    }

    #[test]
    fn all_late_uses_slots_two_and_three() {
        let (draws, pre) = one();
        let phi = PerturbationVec::new(vec![1.0]);
        let mut medium = unit_medium(&phi, &draws, &pre);
        medium.noise[0] = Complex64::new(0.5, 0.0);
        let split = DeviceSplit::from_late(1, &[0]).unwrap();
        let g = async_estimate(&[3.0], &split, &medium).unwrap();
        // slot1 = n₁ = 0.5, slot2 = a·h = 1, slot3 = 3.
        assert_eq!(g.slots, Slots { s1: 0.5, s2: 1.0, s3: Some(3.0) });
        assert_eq!(g.scalar, 0.5 + 3.0);
        medium.noise[0] = Complex64::default();
        let g = async_estimate(&[3.0], &split, &medium).unwrap();
        let sync_shape = sync_estimate(&[3.0], &medium).unwrap();
        assert_eq!(g.scalar, sync_shape.scalar);
    }

    #[test]
    fn split_validation() {
        assert!(DeviceSplit::from_sets(3, &[0, 1], &[2]).is_ok());
        assert!(DeviceSplit::from_sets(3, &[0, 1], &[1, 2]).is_err());
        assert!(DeviceSplit::from_sets(3, &[0], &[2]).is_err());
        assert!(DeviceSplit::from_late(3, &[3]).is_err());
        let s = DeviceSplit::from_late(4, &[1, 3]).unwrap();
        assert_eq!((s.n1(), s.n2()), (vec![0, 2], vec![1, 3]));
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("sgd".parse::<Variant>().is_err());
    }

    #[test]
    fn rademacher_and_sphere_shapes() {
        let mut rng = keyed_rng(0, Stream::Aux, &[]);
        for kind in [PerturbationKind::Rademacher, PerturbationKind::Sphere] {
            let p = PerturbationVec::draw(kind, 9, &mut rng);
            assert!((norm_sq(&p.phi) - 9.0).abs() < 1e-9);
        }
        let p = PerturbationVec::draw(PerturbationKind::Rademacher, 100, &mut rng);
        assert!(p.phi.iter().all(|v| v.abs() == 1.0));
    }

    fn unit_constants(devices: usize, d: usize, l: f64) -> TheoryConstants {
        TheoryConstants {
            l_smooth: 1.0,
            b_hess: 1.0,
            l_xi: l,
            a_grad: 1.0,
            b1: 1.0,
            b2: (d as f64).sqrt(),
            devices,
            sigma: [0.0; 3],
            delta_hat: 1.0,
        }
    }

    #[test]
    fn noiseless_single_device_bound() {
        for d in [1usize, 3, 10] {
            let (l, gamma) = (1.7, 0.3);
            let k = unit_constants(1, d, l);
            let c = second_moment_bound(Variant::Ezofl, &k, &ChannelConfig::new(1.0, 0.0), gamma, &DeviceSplit::all_on_time(1)).unwrap();
            let want = 8.0 * (d * d) as f64 * l * l * gamma * gamma;
            assert!((c - want).abs() < 1e-12 * want);
        }
    }

    #[test]
    fn zero_radius_noiseless_bound_is_zero() {
        let k = unit_constants(4, 5, 2.0);
        let c = second_moment_bound(Variant::Ezofl, &k, &ChannelConfig::new(1.0, 0.0), 0.0, &DeviceSplit::all_on_time(4)).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn constants_from_task() {
        let ds = synth_dataset(40, 3, 0).unwrap();
        let p = partition_equal(&ds, 4, 0).unwrap();
        let k = TheoryConstants::for_task(
            &LossModel::Quadratic,
            &p,
            &ModelParams::zeros(3),
            &ChannelConfig::new(1.0, 0.2),
            PerturbationKind::Rademacher,
            0.1,
            1.0,
            0.0,
        )
        .unwrap();
        assert_eq!((k.l_smooth, k.b_hess, k.devices), (4.0, 1.0, 4));
        assert_eq!(k.c1(), 2.0);
        assert!((k.c3() - 3f64.powf(1.5) * 4.0 / 2.0).abs() < 1e-12);
        assert_eq!(k.sigma, [0.2; 3]);
    }

    #[test]
    fn moments_are_thread_count_independent() {
        let ds = synth_dataset(30, 3, 1).unwrap();
        let p = partition_equal(&ds, 3, 1).unwrap();
        let cfg = MomentConfig {
            variant: Variant::EzoflAsync,
            loss: LossModel::default(),
            channel: ChannelConfig::new(1.0, 0.3),
            perturbation: PerturbationKind::Rademacher,
            gamma: 0.1,
            split: DeviceSplit::from_late(3, &[2]).unwrap(),
            batch: 1,
            trials: 5000,
            seed: 8,
        };
        let theta = ModelParams::new(vec![0.1, 0.2, -0.3]);
        let a = estimator_moments_mc(&cfg, &theta, &p.shards).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| estimator_moments_mc(&cfg, &theta, &p.shards).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn exact_mean_on_quadratic_is_c1_gamma_grad() {
        // Constant Hessian: the two-point difference is exactly 2γΦᵀ∇f.
        let ds = synth_dataset(9, 3, 4).unwrap();
        let p = partition_equal(&ds, 3, 0).unwrap();
        let theta = ModelParams::new(vec![0.4, -1.0, 2.0]);
        let gamma = 0.1;
        let exact = ezofl_mean_exact(&LossModel::Quadratic, &p.shards, &theta, gamma).unwrap();
        let grad = model::global_grad(&LossModel::Quadratic, &theta, &p.shards).unwrap();
        for (e, g) in exact.iter().zip(&grad) {
            assert!((e - 2.0 * gamma * g).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_layout() {
        let r = MomentEstimate {
            variant: Variant::Efofl,
            trials: 10,
            mean: vec![1.0, 2.0],
            se: vec![0.5, 0.25],
            sqnorm: 3.0,
            sqnorm_se: 0.1,
            norm_mean: 1.0,
            bound: Some(4.0),
        };
        let csv = moments_to_csv(&[r]).unwrap();
        assert_eq!(csv, "variant,M,mean_0,mean_1,se_0,se_1,sqnorm,bound\nefofl,10,1,2,0.5,0.25,3,4\n");
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn estimates_are_rank_one(
            payloads in prop::collection::vec(-4.0f64..4.0, 1..8),
            d in 1usize..20,
            seed in any::<u64>(),
            late_mask in any::<u8>(),
        ) {
            let n = payloads.len();
            let cfg = ChannelConfig::new(1.0, 0.5);
            let draws = crate::channel::sample_round(seed, 0, n, &cfg);
            let pre = precoder_constants(&cfg, n).unwrap();
            let phi = round_perturbation(seed, 0, d, PerturbationKind::Rademacher);
            let medium = RoundMedium {
                phi: &phi,
                draws: &draws,
                noise: [0, 1, 2].map(|s| crate::channel::sample_noise(seed, 0, s + 1, &cfg)),
                precoder: &pre,
            };
            let late: Vec<usize> = (0..n).filter(|i| late_mask >> i & 1 == 1).collect();
            let split = DeviceSplit::from_late(n, &late).unwrap();
            for g in [sync_estimate(&payloads, &medium).unwrap(), async_estimate(&payloads, &split, &medium).unwrap()] {
                let m = g.g[0].abs();
                prop_assert!(g.g.iter().all(|v| v.abs() == m));
            }
        }

        #[test]
        fn async_bounds_dominate_sync_bounds(
            devices in 2usize..12,
            late_frac in 0.05f64..0.95,
            d in 1usize..50,
            sigma_h in 0.2f64..3.0,
            sigma_n in 0.0f64..2.0,
            l_xi in 0.01f64..10.0,
            a_grad in 0.01f64..10.0,
            gamma in 0.0f64..2.0,
            seed in any::<u64>(),
        ) {
            let late = ((late_frac * devices as f64).round() as usize).clamp(1, devices);
            let split = DeviceSplit::random(devices, late, &mut keyed_rng(seed, Stream::Aux, &[])).unwrap();
            let k = TheoryConstants {
                l_smooth: 1.0,
                b_hess: 1.0,
                l_xi,
                a_grad,
                b1: 1.0,
                b2: (d as f64).sqrt(),
                devices,
                sigma: [sigma_n; 3],
                delta_hat: 1.0,
            };
            let ch = ChannelConfig::new(sigma_h, sigma_n);
            let sync = DeviceSplit::all_on_time(devices);
            for v in [Variant::EzoflAsync, Variant::EfoflAsync] {
                let b_async = second_moment_bound(v, &k, &ch, gamma, &split).unwrap();
                let b_sync = second_moment_bound(v.sync_form(), &k, &ch, gamma, &sync).unwrap();
                prop_assert!(b_async >= b_sync, "{v}: {b_async} < {b_sync}");
            }
        }
    }
}
