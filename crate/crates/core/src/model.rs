//! Single-spin Ramsey measurement model and sensing-time accounting.
//!
//! Frequencies are angular, in rad/µs (reported as "MHz"), and all times are
//! in µs, so the accumulated phase `omega * tau` is dimensionless.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rounding slack tolerated before a probability is considered out of range.
pub const PROBABILITY_DUST: f64 = 1e-12;

/// Physical constants of the simulated spin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    /// Coherence time T2 (µs).
    pub t2: f64,
    /// Inactive time per shot for initialization and readout (µs).
    pub overhead: f64,
    /// Readout fidelity for outcome 0.
    pub f0: f64,
    /// Readout fidelity for outcome 1.
    pub f1: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            t2: 96.0,
            overhead: 240.0,
            f0: 1.0,
            f1: 1.0,
        }
    }
}

impl SensorModel {
    pub fn new(t2: f64, overhead: f64, f0: f64, f1: f64) -> Result<Self> {
        let model = Self { t2, overhead, f0, f1 };
        model.validate()?;
        Ok(model)
    }

    pub fn ideal(t2: f64, overhead: f64) -> Self {
        Self {
            t2,
            overhead,
            f0: 1.0,
            f1: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t2 > 0.0) {
            return Err(Error::InvalidArgument(format!("t2 must be > 0, got {}", self.t2)));
        }
        if !(self.overhead >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "overhead must be >= 0, got {}",
                self.overhead
            )));
        }
        for (name, f) in [("f0", self.f0), ("f1", self.f1)] {
            if !(f > 0.5 && f <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in (0.5, 1], got {f}"
                )));
            }
        }
        Ok(())
    }

    /// Fringe offset `(1 + f0 - f1) / 2`.
    #[inline]
    fn offset(&self) -> f64 {
        (1.0 + self.f0 - self.f1) / 2.0
    }

    /// Fringe contrast `(f0 + f1 - 1) / 2` before decoherence.
    #[inline]
    fn contrast(&self) -> f64 {
        (self.f0 + self.f1 - 1.0) / 2.0
    }

    /// Contrast after decay over sensing time `tau`.
    #[inline]
    pub fn visibility(&self, tau: f64) -> f64 {
        self.contrast() * (-tau / self.t2).exp()
    }
}

/// Sensing time and control phase for one Ramsey shot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotDesign {
    /// Free-evolution time (µs).
    pub tau: f64,
    /// Phase of the second π/2 pulse (rad).
    pub phi: f64,
}

impl ShotDesign {
    pub fn new(tau: f64, phi: f64) -> Self {
        Self { tau, phi }
    }
}

/// Single-shot readout result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Outcome {
    Zero = 0,
    One = 1,
}

impl Outcome {
    pub fn bit(self) -> u8 {
        self as u8
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.bit())
    }

    pub fn from_bit(bit: u8) -> Result<Self> {
        match bit {
            0 => Ok(Outcome::Zero),
            1 => Ok(Outcome::One),
            other => Err(Error::InvalidArgument(format!("outcome must be 0 or 1, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub design: ShotDesign,
    pub outcome: Outcome,
    /// Cumulative ledger consumption after this shot (µs).
    pub elapsed_at: f64,
}

fn clamp_dust(p: f64) -> f64 {
    debug_assert!(
        p > -PROBABILITY_DUST && p < 1.0 + PROBABILITY_DUST,
        "probability {p} outside [0, 1] beyond rounding"
    );
    p.clamp(0.0, 1.0)
}

/// Probability of reading outcome 0 at true frequency `omega`.
pub fn outcome_probability(model: &SensorModel, omega: f64, design: &ShotDesign) -> f64 {
    let p = model.offset() + model.visibility(design.tau) * (omega * design.tau + design.phi).cos();
    clamp_dust(p)
}

/// Probability of `outcome` at `omega`; the 1-outcome is the exact complement.
pub fn likelihood(model: &SensorModel, omega: f64, design: &ShotDesign, outcome: Outcome) -> f64 {
    let p0 = outcome_probability(model, omega, design);
    match outcome {
        Outcome::Zero => p0,
        Outcome::One => 1.0 - p0,
    }
}

pub fn sample_outcome<R: Rng + ?Sized>(
    model: &SensorModel,
    omega: f64,
    design: &ShotDesign,
    rng: &mut R,
) -> Outcome {
    let p0 = outcome_probability(model, omega, design);
    let u: f64 = rng.random();
    if u < p0 {
        Outcome::Zero
    } else {
        Outcome::One
    }
}

/// Wall-clock cost of one shot: sensing time plus overhead.
pub fn shot_cost(model: &SensorModel, design: &ShotDesign) -> f64 {
    design.tau + model.overhead
}

/// Fisher information of one Bernoulli shot about `omega` (µs²).
pub fn fisher_information(model: &SensorModel, omega: f64, design: &ShotDesign) -> Result<f64> {
    let p = outcome_probability(model, omega, design);
    if p <= 0.0 || p >= 1.0 {
        return Err(Error::DegenerateLikelihood(p));
    }
    let slope = -model.visibility(design.tau) * design.tau * (omega * design.tau + design.phi).sin();
    Ok(slope * slope / (p * (1.0 - p)))
}

/// Returned by [`TimeLedger::charge`] when a shot does not fit.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("time budget exhausted: {consumed} of {budget} µs used, shot needs {requested} µs")]
pub struct BudgetExhausted {
    pub budget: f64,
    pub consumed: f64,
    pub requested: f64,
}

/// Total sensing-time budget and how much of it has been spent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeLedger {
    budget: f64,
    consumed: f64,
}

impl TimeLedger {
    pub fn new(budget: f64) -> Self {
        assert!(budget >= 0.0, "budget must be non-negative");
        Self { budget, consumed: 0.0 }
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn consumed(&self) -> f64 {
        self.consumed
    }

    pub fn remaining(&self) -> f64 {
        self.budget - self.consumed
    }

    pub fn fits(&self, duration: f64) -> bool {
        self.consumed + duration <= self.budget
    }

    /// Spends `duration` if it fits; a shot that would overflow is rejected
    /// whole and leaves the ledger untouched.
    pub fn charge(&mut self, duration: f64) -> std::result::Result<f64, BudgetExhausted> {
        debug_assert!(duration > 0.0, "charge duration must be positive");
        if !self.fits(duration) {
            return Err(BudgetExhausted {
                budget: self.budget,
                consumed: self.consumed,
                requested: duration,
            });
        }
        self.consumed += duration;
        Ok(self.consumed)
    }
}

/// `floor(budget / cost)`: number of identical shots a fresh ledger admits.
pub fn shots_that_fit(budget: f64, cost_per_shot: f64) -> usize {
    let mut ledger = TimeLedger::new(budget);
    let mut count = 0;
    while ledger.charge(cost_per_shot).is_ok() {
        count += 1;
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const LONG_T2: f64 = 1e300;

    #[test]
    fn ideal_zero_time_gives_certain_zero() {
        let m = SensorModel::ideal(LONG_T2, 0.0);
        let p = outcome_probability(&m, 3.7, &ShotDesign::new(0.0, 0.0));
        assert_eq!(p, 1.0);
    }

    #[test]
    fn half_turn_gives_certain_one() {
        let m = SensorModel::ideal(LONG_T2, 0.0);
        let p = outcome_probability(&m, PI, &ShotDesign::new(1.0, 0.0));
        assert!(p.abs() < 1e-15);
    }

    #[test]
    fn matches_high_precision_closed_form() {
        // 40-digit evaluation of 1/2 + 1/2 e^{-0.5/96} cos(2 * 0.5 + 0.3).
        let m = SensorModel::ideal(96.0, 240.0);
        let p = outcome_probability(&m, 2.0, &ShotDesign::new(0.5, 0.3));
        assert!((p - 0.633_054_613_726_581_1).abs() < 1e-15);
    }

    #[test]
    fn readout_fidelity_shifts_and_shrinks_fringe() {
        let m = SensorModel::new(96.0, 240.0, 0.95, 0.9).unwrap();
        let d = ShotDesign::new(0.0, 0.0);
        // At zero phase the spin is in |0>, read correctly with probability f0.
        assert!((outcome_probability(&m, 0.0, &d) - 0.95).abs() < 1e-15);
        let d = ShotDesign::new(1.0, PI - 1.0);
        let p = outcome_probability(&SensorModel::new(LONG_T2, 0.0, 0.95, 0.9).unwrap(), 1.0, &d);
        assert!((p - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_sensor() {
        assert!(SensorModel::new(0.0, 240.0, 1.0, 1.0).is_err());
        assert!(SensorModel::new(96.0, -1.0, 1.0, 1.0).is_err());
        assert!(SensorModel::new(96.0, 240.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn degenerate_bernoulli_draws() {
        let m = SensorModel::ideal(LONG_T2, 0.0);
        let mut rng = crate::rng::stream(1, &[]);
        for _ in 0..1000 {
            assert_eq!(sample_outcome(&m, 1.0, &ShotDesign::new(0.0, 0.0), &mut rng), Outcome::Zero);
            assert_eq!(sample_outcome(&m, PI, &ShotDesign::new(1.0, 0.0), &mut rng), Outcome::One);
        }
    }

    #[test]
    fn empirical_frequency_concentrates() {
        // p0 = 0.7 with an ideal, non-decaying spin: cos(theta) = 0.4.
        let m = SensorModel::ideal(LONG_T2, 0.0);
        let d = ShotDesign::new(1.0, 0.4f64.acos());
        assert!((outcome_probability(&m, 0.0, &d) - 0.7).abs() < 1e-12);
        let mut rng = crate::rng::stream(2024, &[]);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| sample_outcome(&m, 0.0, &d, &mut rng) == Outcome::Zero)
            .count();
        let freq = zeros as f64 / n as f64;
        // 3 sigma of a Binomial(1e5, 0.7) frequency is 0.0043.
        assert!((freq - 0.7).abs() < 0.01, "freq = {freq}");
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let m = SensorModel::default();
        let d = ShotDesign::new(3.0, 0.5);
        let a: Vec<_> = {
            let mut r = crate::rng::stream(5, &[1]);
            (0..64).map(|_| sample_outcome(&m, 2.0, &d, &mut r)).collect()
        };
        let b: Vec<_> = {
            let mut r = crate::rng::stream(5, &[1]);
            (0..64).map(|_| sample_outcome(&m, 2.0, &d, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn shot_cost_adds_overhead() {
        let m = SensorModel::default();
        assert_eq!(shot_cost(&m, &ShotDesign::new(PI / 20.0, 0.0)), 240.0 + PI / 20.0);
        assert_eq!(shot_cost(&SensorModel::ideal(96.0, 0.0), &ShotDesign::new(5.0, 0.0)), 5.0);
        let per_shot = shot_cost(&m, &ShotDesign::new(PI / 20.0, 0.0));
        let mut ledger = TimeLedger::new(1e9);
        for _ in 0..70 {
            ledger.charge(per_shot).unwrap();
        }
        let expected = 70.0 * (240.0 + PI / 20.0);
        assert!((ledger.consumed() - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn ledger_rejects_overflow_without_mutation() {
        let mut ledger = TimeLedger::new(22_000.0);
        ledger.charge(21_900.0).unwrap();
        let err = ledger.charge(245.0).unwrap_err();
        assert_eq!(err.requested, 245.0);
        assert_eq!(ledger.consumed(), 21_900.0);

        let mut fresh = TimeLedger::new(22_000.0);
        assert_eq!(fresh.charge(245.0).unwrap(), 245.0);
    }

    #[test]
    fn nn_shots_capacity_matches_integer_division() {
        let cost = 240.0 + PI / 10.0;
        // floor(22000 / 240.314...) = 91
        assert_eq!(shots_that_fit(22_000.0, cost), 91);
    }

    #[test]
    fn fisher_at_quadrature_is_tau_squared() {
        let m = SensorModel::ideal(LONG_T2, 0.0);
        let tau = 2.5;
        let f = fisher_information(&m, 0.0, &ShotDesign::new(tau, PI / 2.0)).unwrap();
        assert!((f - tau * tau).abs() < 1e-12);
    }

    #[test]
    fn fisher_degenerate_at_fringe_peak() {
        let m = SensorModel::ideal(LONG_T2, 0.0);
        assert!(matches!(
            fisher_information(&m, 0.0, &ShotDesign::new(1.0, 0.0)),
            Err(Error::DegenerateLikelihood(_))
        ));
    }

    fn finite_difference_fisher(m: &SensorModel, omega: f64, d: &ShotDesign) -> f64 {
        let h = 1e-6;
        let dp = (outcome_probability(m, omega + h, d) - outcome_probability(m, omega - h, d)) / (2.0 * h);
        let p = outcome_probability(m, omega, d);
        dp * dp / (p * (1.0 - p))
    }

    #[test]
    fn fisher_matches_finite_difference_and_precise_value() {
        let m = SensorModel::ideal(96.0, 240.0);
        let d = ShotDesign::new(10.0, 0.2);
        let f = fisher_information(&m, 1.0, &d).unwrap();
        let fd = finite_difference_fisher(&m, 1.0, &d);
        assert!((f - fd).abs() / f < 1e-5);
        assert!((f - 67.894_626_986_764_89).abs() / f < 1e-12);
    }

    proptest! {
        #[test]
        fn ideal_probability_within_decay_envelope(
            omega in 0.0f64..40.0, tau in 0.0f64..200.0, phi in 0.0f64..(2.0 * PI)
        ) {
            let m = SensorModel::default();
            let p = outcome_probability(&m, omega, &ShotDesign::new(tau, phi));
            let v = (-tau / m.t2).exp();
            prop_assert!(p >= (1.0 - v) / 2.0 - 1e-15 && p <= (1.0 + v) / 2.0 + 1e-15);
            let d = ShotDesign::new(tau, phi);
            prop_assert_eq!(likelihood(&m, omega, &d, Outcome::Zero) + likelihood(&m, omega, &d, Outcome::One), 1.0);
        }

        #[test]
        fn fisher_agrees_with_finite_difference(
            omega in 0.1f64..20.0, tau in 0.05f64..40.0, phi in 0.0f64..(2.0 * PI)
        ) {
            let m = SensorModel::default();
            let d = ShotDesign::new(tau, phi);
            let p = outcome_probability(&m, omega, &d);
            prop_assume!((0.01..=0.99).contains(&p));
            let slope = m.visibility(tau) * tau * (omega * tau + phi).sin();
            // Skip points where the slope itself vanishes; the ratio is ill-conditioned there.
            prop_assume!(slope.abs() > 1e-3 * tau);
            let f = fisher_information(&m, omega, &d).unwrap();
            let fd = finite_difference_fisher(&m, omega, &d);
            prop_assert!((f - fd).abs() <= 1e-5 * f, "f = {}, fd = {}", f, fd);
        }

        #[test]
        fn ledger_consumption_is_sum_of_costs(taus in proptest::collection::vec(0.01f64..40.0, 1..120)) {
            let m = SensorModel::default();
            let mut ledger = TimeLedger::new(22_000.0);
            let mut total = 0.0;
            for tau in taus {
                let c = shot_cost(&m, &ShotDesign::new(tau, 0.0));
                if ledger.charge(c).is_err() { break; }
                total += c;
                prop_assert!(ledger.consumed() <= ledger.budget());
            }
            prop_assert_eq!(ledger.consumed(), total);
        }
    }
}
