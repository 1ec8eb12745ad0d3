//! Simulated fading channel and over-the-air minislot sums.
//!
//! Each device sees one complex coefficient `h̃ᵢₖ` per round, held across every
//! minislot of that round (block fading). The receiver adds fresh complex noise
//! in each minislot and keeps only the real part of the superposition.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{keyed_rng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Standard deviation of `Re h̃` (and of `Im h̃`), common to all devices.
    pub sigma_h: f64,
    /// Standard deviation of `Re ñ` (and of `Im ñ`) in every minislot.
    pub sigma_n: f64,
    /// Per-device override of `sigma_h`. Empty means common.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub device_sigma_h: Vec<f64>,
    /// Per-slot override of `sigma_n` for slots 1, 2, 3.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_sigma_n: Option<[f64; 3]>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig::new(1.0, 0.1)
    }
}

impl ChannelConfig {
    pub fn new(sigma_h: f64, sigma_n: f64) -> Self {
        ChannelConfig {
            sigma_h,
            sigma_n,
            device_sigma_h: Vec::new(),
            slot_sigma_n: None,
        }
    }

    pub fn noiseless(sigma_h: f64) -> Self {
        ChannelConfig::new(sigma_h, 0.0)
    }

    pub fn validate(&self, devices: usize) -> Result<()> {
        let ok_h = |s: f64| s > 0.0 && s.is_finite();
        let ok_n = |s: f64| s >= 0.0 && s.is_finite();
        if !ok_h(self.sigma_h) {
            return Err(Error::invalid(format!("sigma_h must be > 0, got {}", self.sigma_h)));
        }
        if !ok_n(self.sigma_n) {
            return Err(Error::invalid(format!("sigma_n must be >= 0, got {}", self.sigma_n)));
        }
        if !self.device_sigma_h.is_empty() {
            if self.device_sigma_h.len() != devices {
                return Err(Error::invalid(format!(
                    "device_sigma_h has {} entries for {devices} devices",
                    self.device_sigma_h.len()
                )));
            }
            if let Some(bad) = self.device_sigma_h.iter().find(|&&s| !ok_h(s)) {
                return Err(Error::invalid(format!("device sigma_h must be > 0, got {bad}")));
            }
        }
        if let Some(slots) = self.slot_sigma_n {
            if let Some(bad) = slots.iter().find(|&&s| !ok_n(s)) {
                return Err(Error::invalid(format!("slot sigma_n must be >= 0, got {bad}")));
            }
        }
        Ok(())
    }

    pub fn sigma_h_of(&self, device: usize) -> f64 {
        self.device_sigma_h.get(device).copied().unwrap_or(self.sigma_h)
    }

    /// Noise level of minislot `slot` (1-based).
    pub fn slot_sigma(&self, slot: usize) -> f64 {
        assert!((1..=3).contains(&slot), "minislot index {slot} out of range");
        self.slot_sigma_n.map_or(self.sigma_n, |s| s[slot - 1])
    }

    /// `E[h²ᵢ] = σ²_{h,i}` for the real part.
    pub fn second_moment(&self, device: usize) -> f64 {
        let s = self.sigma_h_of(device);
        s * s
    }
}

/// One complex channel coefficient and its real part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelDraw {
    pub h_complex: Complex64,
    pub h_real: f64,
}

impl ChannelDraw {
    pub fn new(h_complex: Complex64) -> Self {
        ChannelDraw {
            h_complex,
            h_real: h_complex.re,
        }
    }
}

fn complex_normal<R: Rng>(rng: &mut R, sigma: f64) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(sigma * re, sigma * im)
}

/// Coefficient of `device` in `round`, keyed by `(seed, device, round)`.
pub fn sample_channel(seed: u64, device: usize, round: u64, cfg: &ChannelConfig) -> ChannelDraw {
    let mut rng = keyed_rng(seed, Stream::Channel, &[device as u64, round]);
    ChannelDraw::new(complex_normal(&mut rng, cfg.sigma_h_of(device)))
}

/// Receiver noise of minislot `slot` (1-based) in `round`.
pub fn sample_noise(seed: u64, round: u64, slot: usize, cfg: &ChannelConfig) -> Complex64 {
    let mut rng = keyed_rng(seed, Stream::Noise, &[round, slot as u64]);
    complex_normal(&mut rng, cfg.slot_sigma(slot))
}

/// Channel coefficients for every device in one round.
pub fn sample_round(seed: u64, round: u64, devices: usize, cfg: &ChannelConfig) -> Vec<ChannelDraw> {
    (0..devices).map(|i| sample_channel(seed, i, round, cfg)).collect()
}

/// Precoder symbols `aᵢ = 1 / E[h²ᵢ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Precoder {
    pub a: Vec<f64>,
}

pub fn precoder_constants(cfg: &ChannelConfig, devices: usize) -> Result<Precoder> {
    let a = (0..devices)
        .map(|i| {
            let m = cfg.second_moment(i);
            if m > 0.0 && m.is_finite() {
                Ok(1.0 / m)
            } else {
                Err(Error::invalid(format!("device {i}: channel variance must be > 0, got {m}")))
            }
        })
        .collect::<Result<_>>()?;
    Ok(Precoder { a })
}

/// Full complex superposition `Σᵢ xᵢ h̃ᵢ + ñ`.
pub fn ota_superpose(payloads: &[f64], draws: &[ChannelDraw], noise: Complex64) -> Result<Complex64> {
    if payloads.len() != draws.len() {
        return Err(Error::DimensionMismatch {
            expected: draws.len(),
            got: payloads.len(),
        });
    }
    Ok(payloads
        .iter()
        .zip(draws)
        .fold(noise, |acc, (x, h)| acc + h.h_complex * *x))
}

/// Real part of the superposition, as taken by the server.
pub fn ota_minislot(payloads: &[f64], draws: &[ChannelDraw], noise: Complex64) -> Result<f64> {
    Ok(ota_superpose(payloads, draws, noise)?.re)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn minislot_is_linear(
            x in prop::collection::vec(-5.0f64..5.0, 4),
            y in prop::collection::vec(-5.0f64..5.0, 4),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
            seed in any::<u64>(),
        ) {
            let draws = sample_round(seed, 0, 4, &ChannelConfig::new(1.0, 0.0));
            let zero = Complex64::default();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = ota_minislot(&mix, &draws, zero).unwrap();
            let rhs = alpha * ota_minislot(&x, &draws, zero).unwrap() + beta * ota_minislot(&y, &draws, zero).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
