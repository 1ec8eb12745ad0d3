//! Analytic gradients of both losses against central finite differences.
//!
//!     cargo run --release --example gradient_check

use otafl::model::{eval_grad, finite_diff_grad, LossModel, ModelParams, Sample};
use otafl::rng::{keyed_rng, Stream};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> otafl::Result<()> {
    let mut rng = keyed_rng(7, Stream::Aux, &[]);
    let mut worst: f64 = 0.0;
    for t in 0..100 {
        let d = rng.random_range(1..=50);
        let loss = if t % 2 == 0 {
            LossModel::Quadratic
        } else {
            LossModel::NonconvexLogistic { lambda: 0.1 }
        };
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let theta = ModelParams::new((0..d).map(|_| normal()).collect());
        let x: Vec<f64> = (0..d).map(|_| normal()).collect();
        let y = if normal() > 0.0 { 1.0 } else { -1.0 };
        let sample = Sample::new(x, y);

        let g = eval_grad(&loss, &theta, &sample)?;
        let fd = finite_diff_grad(&loss, &theta, &sample, 1e-5)?;
        let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(num / den);
        if t < 4 {
            println!("{:<20} d={d:<3} |g|={den:.4}  rel err {:.2e}", loss.name(), num / den);
        }
    }
    println!("worst relative error over 100 triples: {worst:.2e}");
    Ok(())
}
