//! Parameter vectors, per-sample losses and their gradients.
//!
//! The global objective is `F(θ) = Σᵢ Fᵢ(θ)` where `Fᵢ` is the mean per-sample
//! loss over device `i`'s shard.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default weight of the nonconvex regulariser `λ Σⱼ θⱼ²/(1+θⱼ²)`.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Largest value of `|d/dt t²/(1+t²)|`, attained at `t = 1/√3`.
const REG_SLOPE_MAX: f64 = 0.649_519_052_838_329;

/// Largest value of `|d²/dt² t²/(1+t²)|`, attained at `t = 0`.
const REG_CURVATURE_MAX: f64 = 2.0;

/// Global model vector shared by all devices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams(Vec<f64>);

impl ModelParams {
    pub fn new(theta: Vec<f64>) -> Self {
        ModelParams(theta)
    }

    pub fn zeros(d: usize) -> Self {
        ModelParams(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.0).sqrt()
    }

    /// `θ ← θ − step · direction`.
    pub fn step(&mut self, step: f64, direction: &[f64]) -> Result<()> {
        check_dim(self.dim(), direction.len())?;
        for (t, g) in self.0.iter_mut().zip(direction) {
            *t -= step * g;
        }
        Ok(())
    }
}

impl From<Vec<f64>> for ModelParams {
    fn from(v: Vec<f64>) -> Self {
        ModelParams(v)
    }
}

/// One local data point.
///
/// For classification the label is ±1. The quadratic loss ignores the label and
/// treats the features as the point the loss pulls `θ` towards.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        Sample { features, label }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// Per-sample loss `f(θ, ξ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossModel {
    /// `½‖θ − x‖²` with `x` the sample features. Constant Hessian `I`.
    Quadratic,
    /// `ln(1 + exp(−y xᵀθ)) + λ Σⱼ θⱼ²/(1+θⱼ²)`.
    NonconvexLogistic { lambda: f64 },
}

impl Default for LossModel {
    fn default() -> Self {
        LossModel::NonconvexLogistic {
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl LossModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossModel::Quadratic => Ok(()),
            LossModel::NonconvexLogistic { lambda } if lambda >= 0.0 && lambda.is_finite() => {
                Ok(())
            }
            LossModel::NonconvexLogistic { lambda } => {
                Err(Error::invalid(format!("regulariser weight must be >= 0, got {lambda}")))
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossModel::Quadratic => "quadratic",
            LossModel::NonconvexLogistic { .. } => "nonconvex-logistic",
        }
    }

    /// `f(θ, ξ)`.
    pub fn loss(&self, theta: &[f64], sample: &Sample) -> Result<f64> {
        check_dim(theta.len(), sample.dim())?;
        Ok(match *self {
            LossModel::Quadratic => 0.5 * dist_sq(theta, &sample.features),
            LossModel::NonconvexLogistic { lambda } => {
                let z = dot(theta, &sample.features);
                softplus(-sample.label * z) + lambda * regulariser(theta)
            }
        })
    }

    /// Analytic `∇_θ f(θ, ξ)`.
    pub fn grad(&self, theta: &[f64], sample: &Sample) -> Result<Vec<f64>> {
        let mut out = vec![0.0; theta.len()];
        self.grad_into(theta, sample, 1.0, &mut out)?;
        Ok(out)
    }

    /// `out += weight · ∇f(θ, ξ)`.
    pub fn grad_into(&self, theta: &[f64], sample: &Sample, weight: f64, out: &mut [f64]) -> Result<()> {
        check_dim(theta.len(), sample.dim())?;
        check_dim(theta.len(), out.len())?;
        match *self {
            LossModel::Quadratic => {
                for ((o, t), x) in out.iter_mut().zip(theta).zip(&sample.features) {
                    *o += weight * (t - x);
                }
            }
            LossModel::NonconvexLogistic { lambda } => {
                let y = sample.label;
                let z = dot(theta, &sample.features);
                let coef = -y * sigmoid(-y * z) * weight;
                for ((o, t), x) in out.iter_mut().zip(theta).zip(&sample.features) {
                    let r = 1.0 + t * t;
                    *o += coef * x + weight * lambda * 2.0 * t / (r * r);
                }
            }
        }
        Ok(())
    }

    /// Mean loss over a batch.
    pub fn batch_loss<'a, I>(&self, theta: &[f64], batch: I) -> Result<f64>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let mut total = 0.0;
        let mut n = 0usize;
        for s in batch {
            total += self.loss(theta, s)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        Ok(total / n as f64)
    }

    /// Mean gradient over a batch.
    pub fn batch_grad<'a, I>(&self, theta: &[f64], batch: I) -> Result<Vec<f64>>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let mut out = vec![0.0; theta.len()];
        let mut n = 0usize;
        for s in batch {
            self.grad_into(theta, s, 1.0, &mut out)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(out)
    }

    /// Upper bound on `‖∇²Fᵢ‖₂` for a shard.
    pub fn hessian_bound(&self, shard: &[Sample]) -> f64 {
        match *self {
            LossModel::Quadratic => 1.0,
            LossModel::NonconvexLogistic { lambda } => {
                // σ(1−σ) ≤ ¼ and λ_max(mean xxᵀ) ≤ mean ‖x‖².
                let mean_sq = shard.iter().map(|s| norm_sq(&s.features)).sum::<f64>()
                    / shard.len().max(1) as f64;
                0.25 * mean_sq + lambda * REG_CURVATURE_MAX
            }
        }
    }

    /// Lipschitz constant of `θ ↦ f(θ, ξ)` over the ball of radius `radius`
    /// around `center`, maximised over the given samples.
    pub fn lipschitz_bound(&self, samples: &[Sample], center: &[f64], radius: f64) -> f64 {
        match *self {
            LossModel::Quadratic => {
                samples
                    .iter()
                    .map(|s| dist_sq(center, &s.features).sqrt())
                    .fold(0.0, f64::max)
                    + radius
            }
            LossModel::NonconvexLogistic { lambda } => {
                let max_x = samples
                    .iter()
                    .map(|s| norm_sq(&s.features).sqrt())
                    .fold(0.0, f64::max);
                max_x + lambda * REG_SLOPE_MAX * (center.len() as f64).sqrt()
            }
        }
    }
}

/// `f(θ, ξ)` for a parameter vector.
pub fn eval_loss(model: &LossModel, params: &ModelParams, sample: &Sample) -> Result<f64> {
    model.loss(params.as_slice(), sample)
}

/// Exact `∇f(θ, ξ)`.
pub fn eval_grad(model: &LossModel, params: &ModelParams, sample: &Sample) -> Result<Vec<f64>> {
    model.grad(params.as_slice(), sample)
}

/// Central-difference gradient, component-wise `(f(θ+h eⱼ) − f(θ−h eⱼ)) / 2h`.
pub fn finite_diff_grad(
    model: &LossModel,
    params: &ModelParams,
    sample: &Sample,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    check_dim(params.dim(), sample.dim())?;
    let mut theta = params.as_slice().to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let orig = theta[j];
        theta[j] = orig + h;
        let up = model.loss(&theta, sample)?;
        theta[j] = orig - h;
        let down = model.loss(&theta, sample)?;
        theta[j] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `∇Fᵢ(θ)`: mean gradient over one device's data.
pub fn local_grad(model: &LossModel, params: &ModelParams, shard: &[Sample]) -> Result<Vec<f64>> {
    if shard.is_empty() {
        return Err(Error::EmptyDataset("device shard".into()));
    }
    model.batch_grad(params.as_slice(), shard)
}

/// `∇F(θ) = Σᵢ ∇Fᵢ(θ)`.
pub fn global_grad<S: AsRef<[Sample]>>(
    model: &LossModel,
    params: &ModelParams,
    shards: &[S],
) -> Result<Vec<f64>> {
    if shards.is_empty() {
        return Err(Error::EmptyDataset("no devices".into()));
    }
    let mut total = vec![0.0; params.dim()];
    for shard in shards {
        let g = local_grad(model, params, shard.as_ref())?;
        total.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
    }
    Ok(total)
}

/// `‖∇F(θ)‖²` with exact per-device means.
pub fn global_grad_norm_sq<S: AsRef<[Sample]>>(
    model: &LossModel,
    params: &ModelParams,
    shards: &[S],
) -> Result<f64> {
    Ok(norm_sq(&global_grad(model, params, shards)?))
}

/// `F(θ) = Σᵢ Fᵢ(θ)`.
pub fn global_loss<S: AsRef<[Sample]>>(
    model: &LossModel,
    params: &ModelParams,
    shards: &[S],
) -> Result<f64> {
    if shards.is_empty() {
        return Err(Error::EmptyDataset("no devices".into()));
    }
    shards.iter().try_fold(0.0, |acc, shard| {
        let shard = shard.as_ref();
        if shard.is_empty() {
            return Err(Error::EmptyDataset("device shard".into()));
        }
        Ok(acc + model.batch_loss(params.as_slice(), shard)?)
    })
}

/// Largest per-sample gradient norm at `θ`, over every device.
pub fn max_sample_grad_norm<S: AsRef<[Sample]>>(
    model: &LossModel,
    params: &ModelParams,
    shards: &[S],
) -> Result<f64> {
    let mut best: f64 = 0.0;
    for shard in shards {
        for s in shard.as_ref() {
            best = best.max(norm_sq(&model.grad(params.as_slice(), s)?).sqrt());
        }
    }
    Ok(best)
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `ln(1 + eᵘ)` without overflow.
#[inline]
pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn regulariser(theta: &[f64]) -> f64 {
    theta.iter().map(|t| t * t / (1.0 + t * t)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{keyed_rng, Stream};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn logistic() -> LossModel {
        LossModel::NonconvexLogistic { lambda: 0.1 }
    }

    #[test]
    fn quadratic_loss_values() {
        let q = LossModel::Quadratic;
        let origin = Sample::new(vec![0.0, 0.0], 0.0);
        assert_eq!(eval_loss(&q, &ModelParams::zeros(2), &origin).unwrap(), 0.0);
        let p = ModelParams::new(vec![1.0, 0.0]);
        assert_eq!(eval_loss(&q, &p, &origin).unwrap(), 0.5);
        assert_eq!(eval_grad(&q, &p, &origin).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn logistic_at_zero_is_ln2() {
        let m = LossModel::NonconvexLogistic { lambda: 0.0 };
        let s = Sample::new(vec![0.3, -1.2, 2.0], 1.0);
        let l = eval_loss(&m, &ModelParams::zeros(3), &s).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let g = eval_grad(&m, &ModelParams::zeros(3), &s).unwrap();
        for (gj, xj) in g.iter().zip(&s.features) {
            assert!((gj + xj / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let s = Sample::new(vec![1.0, 2.0, 3.0], 1.0);
        let p = ModelParams::zeros(2);
        assert!(matches!(
            eval_loss(&logistic(), &p, &s),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
        assert!(eval_grad(&LossModel::Quadratic, &p, &s).is_err());
    }

    #[test]
    fn finite_diff_quadratic_is_exact() {
        let p = ModelParams::new(vec![1.0, 0.0]);
        let s = Sample::new(vec![0.0, 0.0], 0.0);
        let g = finite_diff_grad(&LossModel::Quadratic, &p, &s, 1e-6).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9 && g[1].abs() < 1e-9);
    }

    #[test]
    fn finite_diff_of_constant_loss_is_zero() {
        // λ = 0 and zero features: the logistic loss is ln 2 everywhere.
        let m = LossModel::NonconvexLogistic { lambda: 0.0 };
        let s = Sample::new(vec![0.0; 4], 1.0);
        let g = finite_diff_grad(&m, &ModelParams::new(vec![0.5, -1.0, 2.0, 0.1]), &s, 1e-4).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn finite_diff_rejects_nonpositive_step() {
        let s = Sample::new(vec![1.0], 1.0);
        let p = ModelParams::zeros(1);
        assert!(finite_diff_grad(&logistic(), &p, &s, 0.0).is_err());
        assert!(finite_diff_grad(&logistic(), &p, &s, -1e-3).is_err());
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut rng = keyed_rng(11, Stream::Aux, &[]);
        for trial in 0..100 {
            let d = rng.random_range(1..=50);
            let model = if trial % 2 == 0 { logistic() } else { LossModel::Quadratic };
            let theta: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 1.5).collect();
            let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let p = ModelParams::new(theta);
            let s = Sample::new(x, y);
            let g = eval_grad(&model, &p, &s).unwrap();
            let fd = finite_diff_grad(&model, &p, &s, 1e-6).unwrap();
            let err = dist_sq(&g, &fd).sqrt() / (1.0 + norm_sq(&g).sqrt());
            assert!(err <= 1e-5, "trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn global_grad_norm_quadratic_fixtures() {
        let origin = vec![Sample::new(vec![0.0, 0.0], 0.0)];
        let shards = vec![origin.clone(), origin.clone(), origin.clone()];
        let q = LossModel::Quadratic;
        assert_eq!(global_grad_norm_sq(&q, &ModelParams::zeros(2), &shards).unwrap(), 0.0);
        assert_eq!(
            global_grad_norm_sq(&q, &ModelParams::new(vec![1.0, 0.0]), &shards[..1]).unwrap(),
            1.0
        );
        // F = ½N‖θ‖², so F(θ) − F(0) = ½N‖θ‖².
        let p = ModelParams::new(vec![0.6, -0.8]);
        let f = global_loss(&q, &p, &shards).unwrap();
        assert!((f - 0.5 * 3.0 * 1.0).abs() < 1e-12);
    }

    #[test]
    fn global_grad_norm_matches_brute_force_summation() {
        let mut rng = keyed_rng(5, Stream::Aux, &[1]);
        let d = 4;
        let samples: Vec<Sample> = (0..10)
            .map(|i| {
                let x = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                Sample::new(x, if i % 3 == 0 { 1.0 } else { -1.0 })
            })
            .collect();
        let shards: Vec<Vec<Sample>> = vec![samples[..4].to_vec(), samples[4..].to_vec()];
        let p = ModelParams::new(vec![0.2, -0.4, 1.0, 0.3]);
        let m = logistic();

        let mut brute = vec![0.0; d];
        for shard in &shards {
            let mut sum = vec![0.0; d];
            for s in shard {
                let g = eval_grad(&m, &p, s).unwrap();
                for j in 0..d {
                    sum[j] += g[j];
                }
            }
            for j in 0..d {
                brute[j] += sum[j] / shard.len() as f64;
            }
        }
        let expected: f64 = brute.iter().map(|v| v * v).sum();
        let got = global_grad_norm_sq(&m, &p, &shards).unwrap();
        assert!((got - expected).abs() < 1e-12 * (1.0 + expected));
    }

    #[test]
    fn empty_shard_is_an_error() {
        let shards: Vec<Vec<Sample>> = vec![vec![]];
        assert!(matches!(
            global_grad_norm_sq(&LossModel::Quadratic, &ModelParams::zeros(1), &shards),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn lipschitz_bound_dominates_gradient_norms() {
        let mut rng = keyed_rng(9, Stream::Aux, &[2]);
        let d = 6;
        let samples: Vec<Sample> = (0..20)
            .map(|_| Sample::new((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(), 1.0))
            .collect();
        let m = logistic();
        let bound = m.lipschitz_bound(&samples, &vec![0.0; d], 0.0);
        for _ in 0..200 {
            let theta: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
            for s in &samples {
                assert!(norm_sq(&m.grad(&theta, s).unwrap()).sqrt() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn global_grad_norm_is_permutation_invariant(
            xs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 6..12),
            theta in prop::collection::vec(-2.0f64..2.0, 3),
            rot in 1usize..5,
        ) {
            let samples: Vec<Sample> = xs.iter().enumerate()
                .map(|(i, x)| Sample::new(x.clone(), if i % 2 == 0 { 1.0 } else { -1.0 }))
                .collect();
            let m = LossModel::NonconvexLogistic { lambda: 0.1 };
            let p = ModelParams::new(theta);
            let shards = vec![samples[..3].to_vec(), samples[3..].to_vec()];
            let base = global_grad_norm_sq(&m, &p, &shards).unwrap();

            let swapped = vec![shards[1].clone(), shards[0].clone()];
            let mut inner = shards[1].clone();
            let len = inner.len();
            inner.rotate_left(rot % len);
            let rotated = vec![shards[0].clone(), inner];
            for other in [swapped, rotated] {
                let v = global_grad_norm_sq(&m, &p, &other).unwrap();
                prop_assert!((v - base).abs() <= 1e-12 * (1.0 + base));
            }
        }
    }
}
