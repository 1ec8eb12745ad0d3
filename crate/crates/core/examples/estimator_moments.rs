//! Monte-Carlo moments of the four estimators at a fixed point, next to the
//! target mean and the closed-form second-moment bounds.
//!
//!     cargo run --release --example estimator_moments

use otafl::channel::ChannelConfig;
use otafl::estimators::{
    estimator_moments_mc, second_moment_bound, DeviceSplit, MomentConfig, PerturbationKind, TheoryConstants, Variant,
};
use otafl::model::{global_grad, LossModel, ModelParams};
use otafl::verify::quadratic_fixture;

fn main() -> otafl::Result<()> {
    let (d, n) = (4, 3);
    let part = quadratic_fixture(d, n, 5, 0)?;
    let loss = LossModel::Quadratic;
    let theta = ModelParams::new(vec![0.5, -1.0, 0.0, 2.0]);
    let grad = global_grad(&loss, &theta, &part.shards)?;
    let gamma = 0.1;
    let channel = ChannelConfig::new(1.0, 0.5);
    let k = TheoryConstants::for_task(&loss, &part, &theta, &channel, PerturbationKind::Rademacher, gamma, 2.0, 0.0)?;
    println!("grad F = {grad:.4?}");
    for variant in Variant::ALL {
        let split = if variant.is_async() {
            DeviceSplit::from_late(n, &[2])?
        } else {
            DeviceSplit::all_on_time(n)
        };
        let bound = second_moment_bound(variant, &k, &channel, gamma, &split)?;
        let cfg = MomentConfig {
            variant,
            loss,
            channel: channel.clone(),
            perturbation: PerturbationKind::Rademacher,
            gamma,
            split,
            batch: 1,
            trials: 100_000,
            seed: 11,
        };
        let est = estimator_moments_mc(&cfg, &theta, &part.shards)?;
        // Zero-order estimates are scaled by c1 * gamma = 2 gamma.
        let scale = if variant.is_zero_order() { 2.0 * gamma } else { 1.0 };
        let mean: Vec<f64> = est.mean.iter().map(|m| m / scale).collect();
        println!(
            "{:<12} mean/scale = {mean:.3?}  (SE {:.3})  E|g|^2 = {:.3e} <= {} = {:.3e}",
            variant.name(),
            est.se_norm() / scale,
            est.sqnorm,
            variant.bound_name(),
            bound
        );
    }
    Ok(())
}
