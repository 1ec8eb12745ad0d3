//! Step-size schedules and the iteration-count / rate calculators.
//!
//! The model step `ηₖ` is also written `αₖ`; they are the same quantity.

use serde::{Deserialize, Serialize};

use crate::estimators::TheoryConstants;
use crate::{Error, Result};

/// `a₀ (1 + k)^(−υ)`.
pub fn diminishing(k: u64, a0: f64, upsilon: f64) -> f64 {
    a0 * (1.0 + k as f64).powf(-upsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    /// `ηₖ = η₀(1+k)^(−υ₁)`, `γₖ = γ₀(1+k)^(−υ₂)`.
    Diminishing {
        eta0: f64,
        upsilon1: f64,
        gamma0: f64,
        upsilon2: f64,
    },
    /// `η = η₀K^(−1/4)`, `γ = γ₀K^(−1/4)` for a horizon of `K` rounds.
    ConstantThm2 { eta0: f64, gamma0: f64, horizon: u64 },
    /// `η = η₀K^(−1/2)`. `gamma` is only used by zero-order runs.
    ConstantThm4 {
        eta0: f64,
        horizon: u64,
        #[serde(default)]
        gamma: f64,
    },
    Constant { eta: f64, gamma: f64 },
}

impl Default for Schedule {
    /// `αₖ = 0.5(1+k)^(−0.5)`, `γₖ = 2.5(1+k)^(−0.25)`.
    fn default() -> Self {
        Schedule::Diminishing {
            eta0: 0.5,
            upsilon1: 0.5,
            gamma0: 2.5,
            upsilon2: 0.25,
        }
    }
}

impl Schedule {
    pub fn eta(&self, k: u64) -> f64 {
        match *self {
            Schedule::Diminishing { eta0, upsilon1, .. } => diminishing(k, eta0, upsilon1),
            Schedule::ConstantThm2 { eta0, horizon, .. } => eta0 * (horizon.max(1) as f64).powf(-0.25),
            Schedule::ConstantThm4 { eta0, horizon, .. } => eta0 * (horizon.max(1) as f64).powf(-0.5),
            Schedule::Constant { eta, .. } => eta,
        }
    }

    pub fn gamma(&self, k: u64) -> f64 {
        match *self {
            Schedule::Diminishing { gamma0, upsilon2, .. } => diminishing(k, gamma0, upsilon2),
            Schedule::ConstantThm2 { gamma0, horizon, .. } => gamma0 * (horizon.max(1) as f64).powf(-0.25),
            Schedule::ConstantThm4 { gamma, .. } => gamma,
            Schedule::Constant { gamma, .. } => gamma,
        }
    }

    /// Largest `γₖ` over the run, which is `γ₀` for every kind.
    pub fn gamma_max(&self) -> f64 {
        self.gamma(0)
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("schedule {name} must be >= 0, got {v}")))
            }
        };
        match *self {
            Schedule::Diminishing { eta0, upsilon1, gamma0, upsilon2 } => {
                nonneg("eta0", eta0)?;
                nonneg("gamma0", gamma0)?;
                nonneg("upsilon1", upsilon1)?;
                nonneg("upsilon2", upsilon2)
            }
            Schedule::ConstantThm2 { eta0, gamma0, horizon } => {
                nonneg("eta0", eta0)?;
                nonneg("gamma0", gamma0)?;
                if horizon == 0 {
                    return Err(Error::invalid("schedule horizon must be >= 1"));
                }
                Ok(())
            }
            Schedule::ConstantThm4 { eta0, horizon, gamma } => {
                nonneg("eta0", eta0)?;
                nonneg("gamma", gamma)?;
                if horizon == 0 {
                    return Err(Error::invalid("schedule horizon must be >= 1"));
                }
                Ok(())
            }
            Schedule::Constant { eta, gamma } => {
                nonneg("eta", eta)?;
                nonneg("gamma", gamma)
            }
        }
    }
}

/// Outcome of checking an exponent pair `(υ₁, υ₂)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assumption3Report {
    pub holds: bool,
    pub violated: Vec<&'static str>,
}

/// Sufficient conditions on the exponents of the diminishing schedules.
pub fn validate_assumption3(upsilon1: f64, upsilon2: f64) -> Assumption3Report {
    let (u1, u2) = (upsilon1, upsilon2);
    let checks: [(&'static str, bool); 5] = [
        ("upsilon1 > 0", u1 > 0.0),
        ("upsilon2 > 0", u2 > 0.0),
        ("0 < upsilon1 + upsilon2 <= 1", u1 + u2 > 0.0 && u1 + u2 <= 1.0),
        ("upsilon1 + 3 upsilon2 > 1", u1 + 3.0 * u2 > 1.0),
        ("upsilon1 + upsilon2 > 0.5", u1 + u2 > 0.5),
    ];
    let violated: Vec<&'static str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    Assumption3Report {
        holds: violated.is_empty(),
        violated,
    }
}

/// Inputs of the zero-order calculators. Pass `C` for the sync algorithm and
/// `C'` for the async one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroOrderInputs {
    pub delta_hat: f64,
    pub c1: f64,
    pub c3: f64,
    pub mu: f64,
    pub moment_bound: f64,
    pub eta0: f64,
    pub gamma0: f64,
}

/// Inputs of the first-order calculators. Pass `C2` or `C2'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirstOrderInputs {
    pub delta_hat: f64,
    pub b1: f64,
    pub mu: f64,
    pub moment_bound: f64,
    pub eta0: f64,
}

fn check_nonneg(pairs: &[(&str, f64)]) -> Result<()> {
    for (name, v) in pairs {
        if !(*v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
        }
    }
    Ok(())
}

fn check_pos(pairs: &[(&str, f64)]) -> Result<()> {
    for (name, v) in pairs {
        if !(*v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
        }
    }
    Ok(())
}

impl ZeroOrderInputs {
    pub fn from_constants(k: &TheoryConstants, moment_bound: f64, eta0: f64, gamma0: f64) -> Self {
        ZeroOrderInputs {
            delta_hat: k.delta_hat,
            c1: k.c1(),
            c3: k.c3(),
            mu: k.mu(),
            moment_bound,
            eta0,
            gamma0,
        }
    }

    fn validate(&self) -> Result<()> {
        check_pos(&[("c1", self.c1), ("eta0", self.eta0), ("gamma0", self.gamma0)])?;
        check_nonneg(&[
            ("delta_hat", self.delta_hat),
            ("c3", self.c3),
            ("mu", self.mu),
            ("moment bound", self.moment_bound),
        ])
    }

    /// `2Δ̂/(η₀γ₀c₁) + c₃²γ₀² + Cμη₀γ₀/c₁`.
    pub fn rate_constant(&self) -> Result<f64> {
        self.validate()?;
        let (e, g) = (self.eta0, self.gamma0);
        Ok(2.0 * self.delta_hat / (e * g * self.c1) + self.c3 * self.c3 * g * g + self.moment_bound * self.mu * e * g / self.c1)
    }
}

impl FirstOrderInputs {
    pub fn from_constants(k: &TheoryConstants, moment_bound: f64, eta0: f64) -> Self {
        FirstOrderInputs {
            delta_hat: k.delta_hat,
            b1: k.b1,
            mu: k.mu(),
            moment_bound,
            eta0,
        }
    }

    fn validate(&self) -> Result<()> {
        check_pos(&[("b1", self.b1), ("eta0", self.eta0)])?;
        check_nonneg(&[("delta_hat", self.delta_hat), ("mu", self.mu), ("moment bound", self.moment_bound)])
    }

    /// `Δ̂/(b₁η₀) + η₀μC₂/(2b₁)`.
    pub fn rate_constant(&self) -> Result<f64> {
        self.validate()?;
        Ok(self.delta_hat / (self.b1 * self.eta0) + self.eta0 * self.mu * self.moment_bound / (2.0 * self.b1))
    }
}

/// Required number of rounds, both as the real-valued formula and as a round count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationCount {
    pub real: f64,
    pub rounds: u64,
}

/// Relative slack absorbing floating-point noise before taking the ceiling.
const CEIL_SLACK: f64 = 1e-12;

fn ceil_rounds(real: f64) -> u64 {
    (real - real * CEIL_SLACK).ceil().max(0.0) as u64
}

fn check_prob(eps: f64, beta: f64) -> Result<()> {
    for (name, v) in [("epsilon", eps), ("beta", beta)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")));
        }
    }
    Ok(())
}

fn iterations(eps: f64, beta: f64, rate_constant: f64) -> Result<IterationCount> {
    check_prob(eps, beta)?;
    let real = (rate_constant / (eps * beta)).powi(2);
    Ok(IterationCount { real, rounds: ceil_rounds(real) })
}

/// Rounds after which `min ‖∇F‖² < ε` with probability at least `1 − β` (zero-order).
pub fn theorem2_iterations(eps: f64, beta: f64, inputs: &ZeroOrderInputs) -> Result<IterationCount> {
    iterations(eps, beta, inputs.rate_constant()?)
}

/// Rounds after which `min ‖∇F‖² < ε` with probability at least `1 − β` (first-order).
pub fn theorem4_iterations(eps: f64, beta: f64, inputs: &FirstOrderInputs) -> Result<IterationCount> {
    iterations(eps, beta, inputs.rate_constant()?)
}

fn beta_for(eps: f64, k: u64, rate_constant: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1), got {eps}")));
    }
    if k == 0 {
        return Err(Error::invalid("round count must be >= 1"));
    }
    Ok(rate_constant / (eps * (k as f64).sqrt()))
}

/// Failure probability guaranteed after `k` rounds (zero-order).
pub fn theorem2_beta(eps: f64, k: u64, inputs: &ZeroOrderInputs) -> Result<f64> {
    beta_for(eps, k, inputs.rate_constant()?)
}

/// Failure probability guaranteed after `k` rounds (first-order).
pub fn theorem4_beta(eps: f64, k: u64, inputs: &FirstOrderInputs) -> Result<f64> {
    beta_for(eps, k, inputs.rate_constant()?)
}

/// Upper bound on `min_k E‖∇F(θₖ)‖²` after `k` rounds with the zero-order constant steps.
pub fn rate_bound_thm2(k: u64, inputs: &ZeroOrderInputs) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("round count must be >= 1"));
    }
    Ok(inputs.rate_constant()? / (k as f64).sqrt())
}

/// Upper bound on `min_k E‖∇F(θₖ)‖²` after `k` rounds with the first-order constant step.
pub fn rate_bound_thm4(k: u64, inputs: &FirstOrderInputs) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("round count must be >= 1"));
    }
    Ok(inputs.rate_constant()? / (k as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_zo() -> ZeroOrderInputs {
        ZeroOrderInputs {
            delta_hat: 1.0,
            c1: 1.0,
            c3: 0.0,
            mu: 1.0,
            moment_bound: 0.0,
            eta0: 1.0,
            gamma0: 1.0,
        }
    }

    #[test]
    fn diminishing_fixtures() {
        assert_eq!(diminishing(0, 0.7, 0.3), 0.7);
        assert_eq!(diminishing(3, 0.5, 0.5), 0.25);
        assert_eq!(diminishing(15, 2.5, 0.25), 1.25);
        let s = Schedule::default();
        assert_eq!((s.eta(3), s.gamma(15)), (0.25, 1.25));
    }

    #[test]
    fn constant_schedules() {
        let s = Schedule::ConstantThm2 { eta0: 1.0, gamma0: 2.0, horizon: 16 };
        assert_eq!((s.eta(5), s.gamma(100)), (0.5, 1.0));
        let s = Schedule::ConstantThm4 { eta0: 1.0, horizon: 16, gamma: 0.0 };
        assert_eq!(s.eta(0), 0.25);
        assert!(Schedule::ConstantThm4 { eta0: 1.0, horizon: 0, gamma: 0.0 }.validate().is_err());
    }

    #[test]
    fn assumption3_examples() {
        assert!(validate_assumption3(0.5, 0.25).holds);
        let r = validate_assumption3(0.1, 0.1);
        assert!(!r.holds);
        assert!(r.violated.contains(&"upsilon1 + 3 upsilon2 > 1"));
        assert!(r.violated.contains(&"upsilon1 + upsilon2 > 0.5"));
        let r = validate_assumption3(1.0, 0.0);
        assert!(r.violated.contains(&"upsilon2 > 0"));
    }

    #[test]
    fn theorem2_unit_case() {
        let k = theorem2_iterations(0.1, 0.1, &unit_zo()).unwrap();
        assert_eq!(k.rounds, 40_000);
        assert!((k.real - 40_000.0).abs() < 1e-6);
    }

    #[test]
    fn theorem4_unit_case() {
        let inp = FirstOrderInputs {
            delta_hat: 1.0,
            b1: 1.0,
            mu: 1.0,
            moment_bound: 2.0,
            eta0: 1.0,
        };
        assert_eq!(theorem4_iterations(0.1, 0.1, &inp).unwrap().rounds, 40_000);
        let k1 = theorem4_iterations(0.1, 0.2, &inp).unwrap().real;
        let k2 = theorem4_iterations(0.1, 0.1, &inp).unwrap().real;
        assert!((k2 / k1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn halving_epsilon_quadruples_k() {
        let inp = ZeroOrderInputs { c3: 0.3, moment_bound: 5.0, ..unit_zo() };
        let a = theorem2_iterations(0.2, 0.3, &inp).unwrap().real;
        let b = theorem2_iterations(0.1, 0.3, &inp).unwrap().real;
        assert!((b / a - 4.0).abs() < 1e-12);
    }

    #[test]
    fn beta_roundtrip() {
        let inp = ZeroOrderInputs { c3: 0.5, moment_bound: 3.0, delta_hat: 2.0, ..unit_zo() };
        let (eps, beta) = (0.05, 0.2);
        let k = theorem2_iterations(eps, beta, &inp).unwrap();
        let back = theorem2_beta(eps, k.rounds, &inp).unwrap();
        assert!(back <= beta * (1.0 + 1e-12));
        if k.rounds > 1 {
            assert!(theorem2_beta(eps, k.rounds - 1, &inp).unwrap() > beta);
        }
    }

    #[test]
    fn rate_bound_fixtures() {
        let inp = ZeroOrderInputs { c3: 1.0, moment_bound: 1.0, ..unit_zo() };
        let r = rate_bound_thm2(100, &inp).unwrap();
        assert!((r - 0.4).abs() < 1e-15);
        let r4 = rate_bound_thm2(400, &inp).unwrap();
        assert!((r4 / r - 0.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_probabilities() {
        assert!(theorem2_iterations(0.0, 0.1, &unit_zo()).is_err());
        assert!(theorem2_iterations(0.1, 1.0, &unit_zo()).is_err());
        assert!(theorem2_iterations(0.1, 0.1, &ZeroOrderInputs { c1: 0.0, ..unit_zo() }).is_err());
    }
}
