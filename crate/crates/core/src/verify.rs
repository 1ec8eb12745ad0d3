//! Monte-Carlo verification suites for the estimator moment results.
//!
//! | suite | checks |
//! |---|---|
//! | `lemma1` | EZOFL bias: zero on a quadratic task, and its scaling with `γ` on the logistic task |
//! | `lemma2` | `E‖g‖² ≤ C` for sync EZOFL over randomized configurations |
//! | `lemma3` | EFOFL unbiasedness `E[g′] = b₁∇F` at random `θ` |
//! | `lemma4` | `E‖g′‖² ≤ C₂` for sync EFOFL |
//! | `async-moments` | async bounds `C'`, `C₂'`, their dominance over the sync bounds, async means, and the paired norm-variance comparison |

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel::ChannelConfig;
use crate::data::{partition_equal, synth_dataset, Dataset, Partition};
use crate::estimators::{
    estimator_moments_mc, ezofl_mean_exact, paired_norm_variance, second_moment_bound, DeviceSplit, MomentConfig,
    MomentEstimate, PerturbationKind, TheoryConstants, Variant,
};
use crate::model::{self, norm_sq, LossModel, ModelParams, Sample};
use crate::rng::{keyed_rng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Lemma1,
    Lemma2,
    Lemma3,
    Lemma4,
    AsyncMoments,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Lemma1, Suite::Lemma2, Suite::Lemma3, Suite::Lemma4, Suite::AsyncMoments];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lemma1 => "lemma1",
            Suite::Lemma2 => "lemma2",
            Suite::Lemma3 => "lemma3",
            Suite::Lemma4 => "lemma4",
            Suite::AsyncMoments => "async-moments",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown verification suite `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySettings {
    /// Monte-Carlo trials per estimate.
    pub trials: usize,
    pub seed: u64,
    /// Channel of the fixed fixtures.
    pub sigma_h: f64,
    pub sigma_n: f64,
    /// Randomized configurations in the bound-dominance checks.
    pub random_configs: usize,
    /// Random `θ` in the unbiasedness checks.
    pub thetas: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            trials: 100_000,
            seed: 0,
            sigma_h: 1.0,
            sigma_n: 0.5,
            random_configs: 20,
            thetas: 10,
        }
    }
}

/// One pass/fail line.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    /// Moment estimates behind the checks, with their bound when one applies.
    pub moments: Vec<MomentEstimate>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{}", c.line());
        }
        let n_pass = self.checks.iter().filter(|c| c.passed).count();
        let _ = writeln!(
            out,
            "{}: {}/{} checks passed -> {}",
            self.suite,
            n_pass,
            self.checks.len(),
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }
}

pub fn run_suite(suite: Suite, s: &VerifySettings) -> Result<SuiteReport> {
    if s.trials < 10_000 {
        return Err(Error::invalid(format!("verification needs >= 10000 trials, got {}", s.trials)));
    }
    let mut report = SuiteReport {
        suite,
        checks: Vec::new(),
        moments: Vec::new(),
    };
    match suite {
        Suite::Lemma1 => {
            report.checks.push(lemma1_quadratic(s, &mut report.moments)?);
            report.checks.push(lemma1_scaling(s, &mut report.moments)?);
        }
        Suite::Lemma2 => {
            report.checks.push(degenerate_bound(s)?);
            report.checks.extend(dominance_checks(Variant::Ezofl, s, &mut report.moments)?);
        }
        Suite::Lemma3 => report.checks.extend(lemma3_unbiasedness(Variant::Efofl, s, &mut report.moments)?),
        Suite::Lemma4 => report.checks.extend(dominance_checks(Variant::Efofl, s, &mut report.moments)?),
        Suite::AsyncMoments => {
            report.checks.extend(dominance_checks(Variant::EzoflAsync, s, &mut report.moments)?);
            report.checks.extend(dominance_checks(Variant::EfoflAsync, s, &mut report.moments)?);
            report.checks.extend(calculator_ordering(s)?);
            report.checks.extend(lemma3_unbiasedness(Variant::EfoflAsync, s, &mut report.moments)?);
            report.checks.push(async_zero_order_mean(s, &mut report.moments)?);
            for v in [Variant::EzoflAsync, Variant::EfoflAsync] {
                report.checks.push(paired_variance(v, s)?);
            }
        }
    }
    Ok(report)
}

/// Quadratic task with `devices × per_device` standard-normal centres in `ℝᵈ`.
pub fn quadratic_fixture(d: usize, devices: usize, per_device: usize, seed: u64) -> Result<Partition> {
    let ds = synth_dataset(devices * per_device, d, seed)?;
    partition_equal(&ds, devices, seed)
}

/// Logistic task with teacher-labelled synthetic data.
pub fn logistic_fixture(d: usize, devices: usize, per_device: usize, seed: u64) -> Result<Partition> {
    quadratic_fixture(d, devices, per_device, seed)
}

fn random_theta(d: usize, scale: f64, seed: u64, idx: u64) -> ModelParams {
    let mut rng = keyed_rng(seed, Stream::Aux, &[0x7e7a, idx]);
    ModelParams::new((0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

fn moment_config(variant: Variant, loss: LossModel, channel: ChannelConfig, gamma: f64, split: DeviceSplit, s: &VerifySettings, salt: u64) -> MomentConfig {
    MomentConfig {
        variant,
        loss,
        channel,
        perturbation: PerturbationKind::Rademacher,
        gamma,
        split,
        batch: 1,
        trials: s.trials,
        seed: crate::rng::derive_key(s.seed, Stream::Trial, &[salt]),
    }
}

const FIXTURE_D: usize = 4;
const FIXTURE_N: usize = 3;
const FIXTURE_PER_DEVICE: usize = 5;

/// `‖mean − b₁∇F‖ ≤ 3·SE` at `s.thetas` random points of the quadratic task.
pub fn lemma3_unbiasedness(variant: Variant, s: &VerifySettings, moments: &mut Vec<MomentEstimate>) -> Result<Vec<Check>> {
    let p = quadratic_fixture(FIXTURE_D, FIXTURE_N, FIXTURE_PER_DEVICE, s.seed)?;
    let loss = LossModel::Quadratic;
    let split = if variant.is_async() {
        DeviceSplit::from_late(FIXTURE_N, &[FIXTURE_N - 1])?
    } else {
        DeviceSplit::all_on_time(FIXTURE_N)
    };
    let channel = ChannelConfig::new(s.sigma_h, s.sigma_n);
    let mut checks = Vec::new();
    for t in 0..s.thetas {
        let theta = random_theta(FIXTURE_D, 1.0, s.seed, t as u64);
        let cfg = moment_config(variant, loss, channel.clone(), 0.0, split.clone(), s, 300 + t as u64);
        let est = estimator_moments_mc(&cfg, &theta, &p.shards)?;
        let grad = model::global_grad(&loss, &theta, &p.shards)?;
        let (b1, _) = PerturbationKind::Rademacher.moments(FIXTURE_D);
        let target: Vec<f64> = grad.iter().map(|g| b1 * g).collect();
        let dist = est.distance_to(&target);
        let se = est.se_norm();
        checks.push(Check::new(
            format!("{variant} unbiased [theta {t}]"),
            dist <= 3.0 * se,
            format!("|mean - b1 grad F| = {dist:.4e} <= 3 SE = {:.4e} (|grad F| = {:.4}, M = {})", 3.0 * se, norm_sq(&grad).sqrt(), s.trials),
        ));
        moments.push(est);
    }
    Ok(checks)
}

/// Bias of EZOFL on the quadratic task, where it vanishes identically.
pub fn lemma1_quadratic(s: &VerifySettings, moments: &mut Vec<MomentEstimate>) -> Result<Check> {
    let p = quadratic_fixture(FIXTURE_D, FIXTURE_N, FIXTURE_PER_DEVICE, s.seed)?;
    let loss = LossModel::Quadratic;
    let theta = random_theta(FIXTURE_D, 1.0, s.seed, 1000);
    let gamma = 0.1;
    let cfg = moment_config(Variant::Ezofl, loss, ChannelConfig::new(s.sigma_h, s.sigma_n), gamma, DeviceSplit::all_on_time(FIXTURE_N), s, 100);
    let est = estimator_moments_mc(&cfg, &theta, &p.shards)?;
    let grad = model::global_grad(&loss, &theta, &p.shards)?;
    let scale = 2.0 * gamma;
    let bias: Vec<f64> = est.mean.iter().zip(&grad).map(|(m, g)| m / scale - g).collect();
    let bias_norm = norm_sq(&bias).sqrt();
    let se = est.se_norm() / scale;
    moments.push(est);
    Ok(Check::new(
        "ezofl bias on quadratic",
        bias_norm <= 3.0 * se,
        format!("|mean/(c1 gamma) - grad F| = {bias_norm:.4e} <= 3 SE = {:.4e}", 3.0 * se),
    ))
}

/// Measured bias norms at `γ = 0.1` and `γ = 0.05` on the logistic task, which
/// should differ by a factor 2 within ±25%.
pub fn lemma1_scaling(s: &VerifySettings, moments: &mut Vec<MomentEstimate>) -> Result<Check> {
    let p = logistic_fixture(FIXTURE_D, FIXTURE_N, 10, s.seed)?;
    let loss = LossModel::default();
    let theta = random_theta(FIXTURE_D, 1.5, s.seed, 2000);
    let grad = model::global_grad(&loss, &theta, &p.shards)?;
    let channel = ChannelConfig::new(s.sigma_h, s.sigma_n);
    let mut measured = Vec::new();
    let mut exact = Vec::new();
    for gamma in [0.1, 0.05] {
        // Same trial streams for both radii.
        let cfg = moment_config(Variant::Ezofl, loss, channel.clone(), gamma, DeviceSplit::all_on_time(FIXTURE_N), s, 200);
        let est = estimator_moments_mc(&cfg, &theta, &p.shards)?;
        let scale = 2.0 * gamma;
        let bias: Vec<f64> = est.mean.iter().zip(&grad).map(|(m, g)| m / scale - g).collect();
        measured.push((norm_sq(&bias).sqrt(), est.se_norm() / scale));
        moments.push(est);
        let ex = ezofl_mean_exact(&loss, &p.shards, &theta, gamma)?;
        let ebias: Vec<f64> = ex.iter().zip(&grad).map(|(m, g)| m / scale - g).collect();
        exact.push(norm_sq(&ebias).sqrt());
    }
    let ratio = measured[1].0 / measured[0].0;
    Ok(Check::new(
        "ezofl bias ratio gamma 0.05 / 0.1 on logistic",
        (0.375..=0.625).contains(&ratio),
        format!(
            "measured ratio {ratio:.4} (target 0.5 +/- 25%); bias {:.4e} (SE {:.2e}) at 0.1, {:.4e} (SE {:.2e}) at 0.05; exact enumeration gives {:.4e} and {:.4e}, ratio {:.4}",
            measured[0].0, measured[0].1, measured[1].0, measured[1].1, exact[0], exact[1], exact[1] / exact[0]
        ),
    ))
}

/// `σ_n = 0`, `γ = 0`: both the estimate and the bound vanish.
pub fn degenerate_bound(s: &VerifySettings) -> Result<Check> {
    let p = quadratic_fixture(FIXTURE_D, FIXTURE_N, FIXTURE_PER_DEVICE, s.seed)?;
    let loss = LossModel::Quadratic;
    let theta = random_theta(FIXTURE_D, 1.0, s.seed, 3000);
    let channel = ChannelConfig::new(s.sigma_h, 0.0);
    let split = DeviceSplit::all_on_time(FIXTURE_N);
    let cfg = moment_config(Variant::Ezofl, loss, channel.clone(), 0.0, split.clone(), s, 400);
    let est = estimator_moments_mc(&cfg, &theta, &p.shards)?;
    let k = TheoryConstants::for_task(&loss, &p, &theta, &channel, PerturbationKind::Rademacher, 0.0, 1.0, 0.0)?;
    let bound = second_moment_bound(Variant::Ezofl, &k, &channel, 0.0, &split)?;
    Ok(Check::new(
        "ezofl noiseless zero-radius",
        est.sqnorm <= bound,
        format!("E|g|^2 = {:.3e} <= C = {bound:.3e}", est.sqnorm),
    ))
}

/// A randomized estimator configuration.
#[derive(Debug, Clone)]
pub struct DominanceCase {
    pub loss: LossModel,
    pub partition: Partition,
    pub theta: ModelParams,
    pub channel: ChannelConfig,
    pub gamma: f64,
    /// Non-empty late set, used by the async variants.
    pub split: DeviceSplit,
}

impl DominanceCase {
    pub fn constants(&self) -> Result<TheoryConstants> {
        TheoryConstants::for_task(
            &self.loss,
            &self.partition,
            &self.theta,
            &self.channel,
            PerturbationKind::Rademacher,
            self.gamma,
            1.0,
            0.0,
        )
    }

    pub fn split_for(&self, variant: Variant) -> DeviceSplit {
        if variant.is_async() {
            self.split.clone()
        } else {
            DeviceSplit::all_on_time(self.split.devices())
        }
    }

    pub fn bound(&self, variant: Variant) -> Result<f64> {
        second_moment_bound(variant, &self.constants()?, &self.channel, self.gamma, &self.split_for(variant))
    }

    pub fn describe(&self) -> String {
        format!(
            "{} d={} N={} late={} sigma_h={:.2} sigma_n={:.2} gamma={:.3}",
            self.loss.name(),
            self.theta.dim(),
            self.partition.num_devices(),
            self.split.late_count(),
            self.channel.sigma_h,
            self.channel.sigma_n,
            self.gamma
        )
    }
}

/// Randomized configuration `idx`: `d ∈ [4, 12]`, `N ∈ [2, 6]`, both losses,
/// common channel variance and equal slot noise.
pub fn dominance_case(seed: u64, idx: u64) -> Result<DominanceCase> {
    let mut rng = keyed_rng(seed, Stream::Aux, &[0xd0, idx]);
    let d = rng.random_range(4..=12);
    let n = rng.random_range(2..=6);
    let per = rng.random_range(3..=8);
    let scale: f64 = rng.random_range(0.5..2.0);
    let ds = synth_dataset(n * per, d, rng.random())?;
    let ds = Dataset::new(
        ds.name.clone(),
        ds.samples
            .iter()
            .map(|s| Sample::new(s.features.iter().map(|x| x * scale).collect(), s.label))
            .collect(),
    )?;
    let partition = partition_equal(&ds, n, rng.random())?;
    let loss = if idx % 2 == 0 { LossModel::default() } else { LossModel::Quadratic };
    let theta = ModelParams::new((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
    let channel = ChannelConfig::new(rng.random_range(0.5..2.0), rng.random_range(0.0..1.0));
    let gamma = rng.random_range(0.01..0.5);
    let late = rng.random_range(1..=n);
    let split = DeviceSplit::random(n, late, &mut rng)?;
    Ok(DominanceCase {
        loss,
        partition,
        theta,
        channel,
        gamma,
        split,
    })
}

/// `E‖g‖² ≤ bound` for `variant` over the randomized configurations.
pub fn dominance_checks(variant: Variant, s: &VerifySettings, moments: &mut Vec<MomentEstimate>) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for idx in 0..s.random_configs as u64 {
        let case = dominance_case(s.seed, idx)?;
        let cfg = moment_config(variant, case.loss, case.channel.clone(), case.gamma, case.split_for(variant), s, 500 + idx);
        let mut est = estimator_moments_mc(&cfg, &case.theta, &case.partition.shards)?;
        let bound = case.bound(variant)?;
        est.bound = Some(bound);
        checks.push(Check::new(
            format!("{variant} second moment <= {} [config {idx}]", variant.bound_name()),
            est.sqnorm <= bound,
            format!("E|g|^2 = {:.4e} (SE {:.1e}) <= {:.4e}; {}", est.sqnorm, est.sqnorm_se, bound, case.describe()),
        ));
        moments.push(est);
    }
    Ok(checks)
}

/// `C' ≥ C` and `C₂' ≥ C₂` on the calculators for every randomized configuration.
pub fn calculator_ordering(s: &VerifySettings) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for idx in 0..s.random_configs as u64 {
        let case = dominance_case(s.seed, idx)?;
        for v in [Variant::EzoflAsync, Variant::EfoflAsync] {
            let a = case.bound(v)?;
            let b = case.bound(v.sync_form())?;
            checks.push(Check::new(
                format!("{} >= {} [config {idx}]", v.bound_name(), v.sync_form().bound_name()),
                a >= b,
                format!("{a:.6e} >= {b:.6e}"),
            ));
        }
    }
    Ok(checks)
}

/// Async EZOFL mean equals `c₁γ∇F` on the quadratic task.
pub fn async_zero_order_mean(s: &VerifySettings, moments: &mut Vec<MomentEstimate>) -> Result<Check> {
    let p = quadratic_fixture(FIXTURE_D, FIXTURE_N, FIXTURE_PER_DEVICE, s.seed)?;
    let loss = LossModel::Quadratic;
    let theta = random_theta(FIXTURE_D, 1.0, s.seed, 4000);
    let gamma = 0.1;
    let split = DeviceSplit::from_late(FIXTURE_N, &[0])?;
    let cfg = moment_config(Variant::EzoflAsync, loss, ChannelConfig::new(s.sigma_h, s.sigma_n), gamma, split, s, 600);
    let est = estimator_moments_mc(&cfg, &theta, &p.shards)?;
    let grad = model::global_grad(&loss, &theta, &p.shards)?;
    let target: Vec<f64> = grad.iter().map(|g| 2.0 * gamma * g).collect();
    let dist = est.distance_to(&target);
    let se = est.se_norm();
    moments.push(est);
    Ok(Check::new(
        "ezofl-async mean = c1 gamma grad F",
        dist <= 3.0 * se,
        format!("|mean - c1 gamma grad F| = {dist:.4e} <= 3 SE = {:.4e}", 3.0 * se),
    ))
}

/// One-sided paired test that late devices do not reduce `Var(‖g‖)`.
pub fn paired_variance(variant: Variant, s: &VerifySettings) -> Result<Check> {
    let p = quadratic_fixture(FIXTURE_D, FIXTURE_N, FIXTURE_PER_DEVICE, s.seed)?;
    let loss = LossModel::Quadratic;
    let theta = random_theta(FIXTURE_D, 1.0, s.seed, 5000);
    let channel = ChannelConfig::new(s.sigma_h, s.sigma_n);
    let gamma = 0.1;
    let sync = moment_config(variant.sync_form(), loss, channel.clone(), gamma, DeviceSplit::all_on_time(FIXTURE_N), s, 700);
    let asy = MomentConfig {
        variant,
        split: DeviceSplit::from_late(FIXTURE_N, &[FIXTURE_N - 1])?,
        ..sync.clone()
    };
    let r = paired_norm_variance(&sync, &asy, &theta, &p.shards)?;
    Ok(Check::new(
        format!("Var|g| {variant} >= {}", variant.sync_form()),
        r.diff >= -3.0 * r.diff_se,
        format!(
            "Var async {:.4e} vs sync {:.4e}; paired difference {:.4e} (SE {:.2e})",
            r.var_second, r.var_first, r.diff, r.diff_se
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_roundtrip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("lemma9".parse::<Suite>().is_err());
    }

    #[test]
    fn too_few_trials_is_an_error() {
        let s = VerifySettings { trials: 100, ..VerifySettings::default() };
        assert!(run_suite(Suite::Lemma3, &s).is_err());
    }

    #[test]
    fn dominance_cases_are_deterministic_and_in_range() {
        for idx in 0..20 {
            let a = dominance_case(3, idx).unwrap();
            let b = dominance_case(3, idx).unwrap();
            assert_eq!(a.theta, b.theta);
            assert!((4..=12).contains(&a.theta.dim()));
            assert!(a.split.late_count() >= 1);
        }
    }

    #[test]
    fn lemma3_small_run_passes() {
        let s = VerifySettings {
            trials: 20_000,
            thetas: 2,
            ..VerifySettings::default()
        };
        let r = run_suite(Suite::Lemma3, &s).unwrap();
        assert!(r.passed(), "{}", r.render());
    }
}
