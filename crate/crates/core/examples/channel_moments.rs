//! Fading draws, precoder symbols and one over-the-air minislot.
//!
//!     cargo run --release --example channel_moments

use num_complex::Complex64;
use otafl::channel::{ota_minislot, precoder_constants, sample_channel, sample_noise, sample_round, ChannelConfig};

fn main() -> otafl::Result<()> {
    let cfg = ChannelConfig::new(0.8, 0.1);
    let draws = 200_000u64;
    let (mut m1, mut m2, mut m4) = (0.0, 0.0, 0.0);
    for k in 0..draws {
        let h = sample_channel(1, 0, k, &cfg).h_real;
        m1 += h;
        m2 += h * h;
        m4 += h.powi(4);
    }
    let n = draws as f64;
    println!("Re h: mean {:.4}, E[h^2] {:.4} (want {:.4}), E[h^4] {:.4} (want {:.4})",
        m1 / n, m2 / n, cfg.second_moment(0), m4 / n, 3.0 * cfg.second_moment(0).powi(2));

    let pre = precoder_constants(&cfg, 4)?;
    println!("precoder a_i = 1/E[h^2] = {:?}", pre.a);

    // Slot 1 carries the precoder symbols: E[s1 * h_i] = a_i E[h_i^2] = 1.
    let round = 3;
    let h = sample_round(1, round, 4, &cfg);
    let s1 = ota_minislot(&pre.a, &h, sample_noise(1, round, 1, &cfg))?;
    let payload = [0.5, -1.0, 2.0, 0.25];
    let s2 = ota_minislot(&payload, &h, sample_noise(1, round, 2, &cfg))?;
    let clean = ota_minislot(&payload, &h, Complex64::default())?;
    println!("round {round}: s1 = {s1:.4}, s2 = {s2:.4} (noise-free {clean:.4}), product {:.4}", s1 * s2);
    Ok(())
}
