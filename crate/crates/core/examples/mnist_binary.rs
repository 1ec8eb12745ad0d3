//! Loads MNIST, keeps digits 0 and 1 and splits the training set across devices.
//!
//!     cargo run --release --example mnist_binary -- data/mnist
//!
//! The directory must hold the four standard IDX files
//! (`train-images-idx3-ubyte` etc.). `MNIST_DIR` works too.

use otafl::data::{load_mnist_binary, partition_equal, MnistFiles};

fn main() -> otafl::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .or_else(|| std::env::var("MNIST_DIR").ok())
        .unwrap_or_else(|| "data/mnist".into());
    if !MnistFiles::in_dir(&dir).exist() {
        eprintln!("no MNIST IDX files in {dir}");
        std::process::exit(1);
    }
    let (train, test) = load_mnist_binary(&dir, 0, 1, true)?;
    println!(
        "train: {} samples, d = {} (784 pixels + bias), {:.1}% labelled +1 (digit 0)",
        train.len(),
        train.dim(),
        100.0 * train.positive_fraction()
    );
    println!("test:  {} samples", test.len());

    let part = partition_equal(&train, 10, 0)?;
    for (i, shard) in part.shards.iter().enumerate() {
        println!("device {i}: {} samples, {:.1}% positive", shard.len(), 100.0 * shard.positive_fraction());
    }
    let px = &train.samples[0].features;
    let lit = px.iter().filter(|&&v| v > 0.0).count();
    println!("first image: {lit} non-zero features, max {:.3}", px.iter().cloned().fold(0.0, f64::max));
    Ok(())
}
