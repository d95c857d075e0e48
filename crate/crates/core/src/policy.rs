//! Adaptive shot selection: observation encoding, action mapping, episode
//! rollouts over a particle filter, and score-function policy gradients.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    sample_outcome, shot_cost, MeasurementRecord, Outcome, SensorModel, ShotDesign, TimeLedger,
};
use crate::nn::{Head, NetworkParams, Reader};
use crate::posterior::{ParticleFilter, Support};
use crate::rng::{self, stream};

/// Width of the observation vector.
pub const OBSERVATION_WIDTH: usize = 5;

/// Policy input; every component is scaled into `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Posterior mean, affinely mapped from the filter support.
    pub omega_tilde: f64,
    /// `-(2/10) ln sqrt(variance) - 1`, clamped.
    pub sigma_tilde: f64,
    /// Posterior correlation; always 1 for a scalar parameter.
    pub gamma: f64,
    /// Shot index over the nominal maximum shot count.
    pub k_tilde: f64,
    /// Consumed fraction of the time budget.
    pub r_tilde: f64,
}

impl Observation {
    pub fn to_array(&self) -> [f64; OBSERVATION_WIDTH] {
        [
            self.omega_tilde,
            self.sigma_tilde,
            self.gamma,
            self.k_tilde,
            self.r_tilde,
        ]
    }
}

fn unit_scale(value: f64, lo: f64, hi: f64) -> f64 {
    (2.0 * (value - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
}

/// `sigma_tilde` for a posterior variance; zero variance maps to +1.
pub fn scaled_log_std(variance: f64) -> f64 {
    if variance <= 0.0 {
        return 1.0;
    }
    (-(2.0 / 10.0) * variance.sqrt().ln() - 1.0).clamp(-1.0, 1.0)
}

/// Encodes the filter state after `k` shots.
pub fn build_observation(filter: &ParticleFilter, k: usize, k_max: f64, ledger: &TimeLedger) -> Observation {
    let support = filter.support();
    Observation {
        omega_tilde: unit_scale(filter.mean(), support.lo, support.hi),
        sigma_tilde: scaled_log_std(filter.variance()),
        gamma: 1.0,
        k_tilde: unit_scale(k as f64, 0.0, k_max),
        r_tilde: unit_scale(ledger.consumed(), 0.0, ledger.budget()),
    }
}

/// Physical range for the sensing-time action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionRange {
    pub tau_floor: f64,
    pub tau_ceil: f64,
}

impl Default for ActionRange {
    fn default() -> Self {
        Self {
            tau_floor: 0.01,
            tau_ceil: 40.0,
        }
    }
}

/// Raw policy outputs in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionRaw {
    pub a_tau: f64,
    pub a_phi: f64,
}

/// Affine map of `a_tau` onto `[tau_floor, tau_ceil]` and of `a_phi` onto `[0, 2 pi]`.
pub fn map_action(raw: ActionRaw, range: &ActionRange) -> ShotDesign {
    ShotDesign {
        tau: range.tau_floor + (raw.a_tau + 1.0) / 2.0 * (range.tau_ceil - range.tau_floor),
        phi: map_phase(raw.a_phi),
    }
}

pub fn map_phase(a_phi: f64) -> f64 {
    PI * (a_phi + 1.0)
}

/// Predetermined geometric sensing times, longest first.
///
/// Level `j = 0..=levels` uses `tau = 2^(levels - j) * tau_min` and is repeated
/// `base_repeats + extra_repeats * j` times, so the shortest time gets the most
/// shots. The whole sequence repeats once exhausted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentialSchedule {
    pub tau_min: f64,
    pub levels: u32,
    pub base_repeats: usize,
    pub extra_repeats: usize,
}

impl ExponentialSchedule {
    /// Largest level count with `tau_min * 2^levels <= t2 / 2`, repeats G = 5, F = 2.
    pub fn for_sensor(tau_min: f64, t2: f64) -> Self {
        let mut levels = 0;
        while tau_min * 2f64.powi(levels as i32 + 1) <= t2 / 2.0 {
            levels += 1;
        }
        Self {
            tau_min,
            levels,
            base_repeats: 5,
            extra_repeats: 2,
        }
    }

    /// One pass through the schedule as `(tau, repeats)` pairs.
    pub fn levels(&self) -> Vec<(f64, usize)> {
        (0..=self.levels)
            .map(|j| {
                (
                    self.tau_min * 2f64.powi((self.levels - j) as i32),
                    self.base_repeats + self.extra_repeats * j as usize,
                )
            })
            .collect()
    }

    pub fn period(&self) -> usize {
        self.levels().iter().map(|(_, m)| m).sum()
    }

    /// Sensing time of the `index`-th shot.
    pub fn tau_at(&self, index: usize) -> f64 {
        let mut i = index % self.period();
        for (tau, repeats) in self.levels() {
            if i < repeats {
                return tau;
            }
            i -= repeats;
        }
        unreachable!("index reduced modulo the period")
    }
}

/// How raw actions become shot designs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DesignRule {
    /// Policy outputs `(a_tau, a_phi)`.
    Full(ActionRange),
    /// Policy outputs `a_phi` only; `tau` follows the schedule.
    PhaseOnly(ExponentialSchedule),
}

impl DesignRule {
    pub fn action_width(&self) -> usize {
        match self {
            DesignRule::Full(_) => 2,
            DesignRule::PhaseOnly(_) => 1,
        }
    }

    /// Design for the `shot`-th adaptive shot from raw action `raw`.
    pub fn design(&self, raw: &[f64], shot: usize) -> ShotDesign {
        match self {
            DesignRule::Full(range) => map_action(
                ActionRaw {
                    a_tau: raw[0],
                    a_phi: raw[1],
                },
                range,
            ),
            DesignRule::PhaseOnly(schedule) => ShotDesign::new(schedule.tau_at(shot), map_phase(raw[0])),
        }
    }

    /// Cheapest possible shot duration (without overhead).
    pub fn min_tau(&self) -> f64 {
        match self {
            DesignRule::Full(range) => range.tau_floor,
            DesignRule::PhaseOnly(s) => s.tau_min,
        }
    }
}

/// Nominal maximum shot count: `floor(budget / (overhead + min tau))`.
pub fn nominal_shot_count(budget: f64, model: &SensorModel, rule: &DesignRule) -> f64 {
    (budget / (model.overhead + rule.min_tau())).floor().max(1.0)
}

/// A deterministic map from observation to mean action in `[-1, 1]`,
/// differentiable in its parameters.
pub trait Policy: Sync {
    fn action_width(&self) -> usize;

    fn parameter_count(&self) -> usize;

    fn act(&self, observation: &[f64; OBSERVATION_WIDTH]) -> Vec<f64>;

    /// Adds `d(d_action . act(observation)) / d(params)` into `grad`.
    fn accumulate_gradient(&self, observation: &[f64; OBSERVATION_WIDTH], d_action: &[f64], grad: &mut [f64]);
}

impl Policy for NetworkParams {
    fn action_width(&self) -> usize {
        self.spec().output_width()
    }

    fn parameter_count(&self) -> usize {
        self.len()
    }

    fn act(&self, observation: &[f64; OBSERVATION_WIDTH]) -> Vec<f64> {
        self.forward(observation).expect("policy input width is 5")
    }

    fn accumulate_gradient(&self, observation: &[f64; OBSERVATION_WIDTH], d_action: &[f64], grad: &mut [f64]) {
        let cache = self.forward_cached(observation).expect("policy input width is 5");
        let d_logits = self.head_backward(&cache, d_action).expect("action width");
        self.backward(&cache, &d_logits, 1.0, grad).expect("gradient length");
    }
}

/// Everything about an adaptive episode except the policy and the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSettings {
    pub model: SensorModel,
    pub rule: DesignRule,
    /// Normalizer for the shot index in the observation and for the loss.
    pub k_max: f64,
    /// Standard deviation of Gaussian noise on raw actions; 0 at inference.
    pub exploration: f64,
    #[serde(default)]
    pub credit: Credit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub observation: Observation,
    /// Exploration noise drawn for this step (zeros at inference).
    pub noise: Vec<f64>,
    /// Clipped raw action that produced the design.
    pub raw: Vec<f64>,
    pub design: ShotDesign,
    pub outcome: Outcome,
    /// Posterior mean after the update.
    pub estimate: f64,
    pub squared_error: f64,
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub omega_true: f64,
    pub steps: Vec<TraceStep>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_estimate(&self) -> Option<f64> {
        self.steps.last().map(|s| s.estimate)
    }

    /// CSV rows `k,tau,phi,mu,estimate,sq_error,elapsed_us` (with header).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,tau,phi,mu,estimate,sq_error,elapsed_us\n");
        for (k, s) in self.steps.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                k,
                s.design.tau,
                s.design.phi,
                s.outcome.bit(),
                s.estimate,
                s.squared_error,
                s.elapsed
            ));
        }
        out
    }
}

/// Observe, act, measure, and update until the next shot no longer fits the ledger.
///
/// `shots_taken` is the number of shots already on the ledger (it feeds the
/// shot-index observation).
pub fn rollout_episode<P: Policy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    settings: &RolloutSettings,
    omega_true: f64,
    mut filter: ParticleFilter,
    ledger: &mut TimeLedger,
    shots_taken: usize,
    rng: &mut R,
) -> EpisodeTrace {
    let width = settings.rule.action_width();
    debug_assert_eq!(policy.action_width(), width);
    let mut steps = Vec::new();
    loop {
        let observation = build_observation(&filter, shots_taken + steps.len(), settings.k_max, ledger);
        let mean = policy.act(&observation.to_array());
        let noise: Vec<f64> = if settings.exploration > 0.0 {
            (0..width)
                .map(|_| settings.exploration * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>()
        } else {
            vec![0.0; width]
        };
        let raw: Vec<f64> = mean
            .iter()
            .zip(&noise)
            .map(|(m, e)| (m + e).clamp(-1.0, 1.0))
            .collect();
        let design = settings.rule.design(&raw, steps.len());
        let Ok(elapsed) = ledger.charge(shot_cost(&settings.model, &design)) else {
            break;
        };
        let outcome = sample_outcome(&settings.model, omega_true, &design, rng);
        let record = MeasurementRecord {
            design,
            outcome,
            elapsed_at: elapsed,
        };
        // A degenerate update keeps the previous posterior; the shot still counts.
        let _ = filter.bayes_update(&settings.model, &record);
        let estimate = filter.mean();
        steps.push(TraceStep {
            observation,
            noise,
            raw,
            design,
            outcome,
            estimate,
            squared_error: (estimate - omega_true).powi(2),
            elapsed,
        });
    }
    EpisodeTrace { omega_true, steps }
}

/// `(1 / k_norm) * sum_k |estimate_k - omega_true|^2`.
pub fn episode_loss(trace: &EpisodeTrace, k_norm: f64) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok(trace.steps.iter().map(|s| s.squared_error).sum::<f64>() / k_norm)
}

/// Where and how one training episode starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub omega_true: f64,
    pub support: Support,
    pub particles: usize,
    pub budget: f64,
    /// Ledger time already spent before the adaptive shots (e.g. the first stage).
    pub prefix_cost: f64,
    /// Shots already taken before the adaptive shots.
    pub prefix_shots: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn run<P: Policy + ?Sized>(&self, policy: &P, settings: &RolloutSettings) -> Result<EpisodeTrace> {
        let filter = ParticleFilter::init_uniform(self.support, self.particles)?;
        let mut ledger = TimeLedger::new(self.budget);
        if self.prefix_cost > 0.0 && ledger.charge(self.prefix_cost).is_err() {
            return Ok(EpisodeTrace {
                omega_true: self.omega_true,
                steps: Vec::new(),
            });
        }
        let mut rng = stream(self.seed, &[rng::stream::STAGE_TWO]);
        Ok(rollout_episode(
            policy,
            settings,
            self.omega_true,
            filter,
            &mut ledger,
            self.prefix_shots,
            &mut rng,
        ))
    }
}

/// How each action is credited with loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Credit {
    /// Every action of an episode carries the whole episode loss.
    Episode,
    /// Each action carries only the loss of its own and later shots.
    #[default]
    RewardToGo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStep {
    pub observation: [f64; OBSERVATION_WIDTH],
    pub noise: Vec<f64>,
    /// This shot's share of the episode loss.
    pub loss: f64,
}

/// One episode's contribution to a score-function estimate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSample {
    pub steps: Vec<ScoreStep>,
}

impl ScoreSample {
    pub fn from_trace(trace: &EpisodeTrace, k_norm: f64) -> Self {
        Self {
            steps: trace
                .steps
                .iter()
                .map(|s| ScoreStep {
                    observation: s.observation.to_array(),
                    noise: s.noise.clone(),
                    loss: s.squared_error / k_norm,
                })
                .collect(),
        }
    }

    pub fn loss(&self) -> f64 {
        self.steps.iter().map(|s| s.loss).sum()
    }

    /// Loss from step `k` to the end (zero past the last step).
    fn tail_losses(&self) -> Vec<f64> {
        let mut tails = vec![0.0; self.steps.len()];
        let mut acc = 0.0;
        for (k, s) in self.steps.iter().enumerate().rev() {
            acc += s.loss;
            tails[k] = acc;
        }
        tails
    }
}

/// Likelihood-ratio gradient of the expected loss with a leave-one-out baseline.
///
/// Actions are `mean(s) + noise`, `noise ~ N(0, sigma^2)`, so
/// `d log pi / d mean = noise / sigma^2`; clipping is part of the environment.
/// The baseline for an episode is the mean over the other episodes of the
/// same quantity (whole loss, or loss-to-go at the same step index).
pub fn score_function_gradient<P: Policy + ?Sized>(
    policy: &P,
    samples: &[ScoreSample],
    sigma: f64,
    credit: Credit,
) -> Result<Vec<f64>> {
    let batch = samples.len();
    if batch < 2 {
        return Err(Error::InvalidArgument(format!("batch size must be >= 2, got {batch}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument("exploration sigma must be > 0".into()));
    }
    let credited: Vec<Vec<f64>> = match credit {
        Credit::Episode => samples.iter().map(|s| vec![s.loss(); s.steps.len()]).collect(),
        Credit::RewardToGo => samples.iter().map(ScoreSample::tail_losses).collect(),
    };
    let at = |i: usize, k: usize| credited[i].get(k).copied().unwrap_or(0.0);
    let n = policy.parameter_count();
    let scale = 1.0 / (sigma * sigma * batch as f64 * (batch - 1) as f64);
    let parts: Vec<Vec<f64>> = (0..batch)
        .into_par_iter()
        .map(|i| {
            let mut grad = vec![0.0; n];
            for (k, step) in samples[i].steps.iter().enumerate() {
                // Sum of pairwise differences, so equal losses cancel exactly.
                let advantage: f64 = (0..batch).map(|j| at(i, k) - at(j, k)).sum();
                if advantage != 0.0 {
                    let d: Vec<f64> = step.noise.iter().map(|e| e * advantage * scale).collect();
                    policy.accumulate_gradient(&step.observation, &d, &mut grad);
                }
            }
            grad
        })
        .collect();
    let mut grad = vec![0.0; n];
    for part in parts {
        for (g, p) in grad.iter_mut().zip(part) {
            *g += p;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub gradient: Vec<f64>,
    /// Per-episode losses, in batch order.
    pub losses: Vec<f64>,
    pub traces: Vec<EpisodeTrace>,
}

impl BatchGradient {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// Rolls out every spec with exploration noise and returns the score-function gradient.
pub fn policy_gradient<P: Policy + ?Sized>(
    policy: &P,
    specs: &[EpisodeSpec],
    settings: &RolloutSettings,
) -> Result<BatchGradient> {
    let traces = specs
        .par_iter()
        .map(|spec| spec.run(policy, settings))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<ScoreSample> = traces
        .iter()
        .map(|t| ScoreSample::from_trace(t, settings.k_max))
        .collect();
    let gradient = score_function_gradient(policy, &samples, settings.exploration, settings.credit)?;
    Ok(BatchGradient {
        gradient,
        losses: samples.iter().map(ScoreSample::loss).collect(),
        traces,
    })
}

/// Trained policies keyed by the subrange they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    entries: Vec<(Support, NetworkParams)>,
}

impl PolicyTable {
    pub fn new(entries: Vec<(Support, NetworkParams)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("policy table is empty".into()));
        }
        for (_, p) in &entries {
            if p.spec().head() != Head::Bounded || p.spec().input_width() != OBSERVATION_WIDTH {
                return Err(Error::InvalidArgument(
                    "policies need a bounded head and 5 inputs".into(),
                ));
            }
        }
        Ok(Self { entries })
    }

    pub fn single(support: Support, params: NetworkParams) -> Result<Self> {
        Self::new(vec![(support, params)])
    }

    pub fn entries(&self) -> &[(Support, NetworkParams)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Policy whose subrange contains `omega` (nearest subrange otherwise).
    pub fn select(&self, omega: f64) -> &NetworkParams {
        self.entries
            .iter()
            .find(|(s, _)| omega >= s.lo && omega < s.hi)
            .or_else(|| {
                self.entries.iter().min_by(|a, b| {
                    a.0.distance(omega).total_cmp(&b.0.distance(omega))
                })
            })
            .map(|(_, p)| p)
            .expect("table is non-empty")
    }

    const MAGIC: &'static [u8; 4] = b"NNPT";

    /// `NNPT`, entry count (u32), then per entry `lo`, `hi` (f64) and an `NNP1` network.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (s, p) in &self.entries {
            out.extend_from_slice(&s.lo.to_le_bytes());
            out.extend_from_slice(&s.hi.to_le_bytes());
            out.extend_from_slice(&p.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != Self::MAGIC {
            return Err(Error::Format {
                what: "policy table",
                reason: "bad magic".into(),
            });
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        let mut rest = r.rest();
        for _ in 0..count {
            let mut r = Reader::new(rest);
            let support = Support::new(r.f64()?, r.f64()?)?;
            let (params, tail) = NetworkParams::read_prefix(r.rest())?;
            entries.push((support, params));
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(Error::Format {
                what: "policy table",
                reason: "trailing bytes".into(),
            });
        }
        Self::new(entries)
    }
}

/// One-shot bandit used to validate the gradient estimator in isolation.
pub mod bandit {
    use super::*;

    /// Loss minimum of the sanity bandit.
    pub const TARGET: f64 = 0.3;

    pub fn loss(action: f64) -> f64 {
        (action - TARGET).powi(2)
    }

    /// Single-parameter policy `a = tanh(theta)`, ignoring the observation.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct TanhScalarPolicy {
        pub theta: f64,
    }

    impl Policy for TanhScalarPolicy {
        fn action_width(&self) -> usize {
            1
        }

        fn parameter_count(&self) -> usize {
            1
        }

        fn act(&self, _observation: &[f64; OBSERVATION_WIDTH]) -> Vec<f64> {
            vec![self.theta.tanh()]
        }

        fn accumulate_gradient(&self, _observation: &[f64; OBSERVATION_WIDTH], d_action: &[f64], grad: &mut [f64]) {
            let t = self.theta.tanh();
            grad[0] += d_action[0] * (1.0 - t * t);
        }
    }

    /// Draws a batch of one-step episodes with exploration noise `sigma`.
    pub fn sample_batch<P: Policy + ?Sized, R: Rng + ?Sized>(
        policy: &P,
        batch: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Vec<ScoreSample> {
        let obs = [0.0; OBSERVATION_WIDTH];
        let mean = policy.act(&obs)[0];
        (0..batch)
            .map(|_| {
                let noise: f64 = sigma * Distribution::<f64>::sample(&StandardNormal, &mut *rng);
                let action = (mean + noise).clamp(-1.0, 1.0);
                ScoreSample {
                    steps: vec![ScoreStep {
                        observation: obs,
                        noise: vec![noise],
                        loss: loss(action),
                    }],
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn settings(exploration: f64) -> RolloutSettings {
        let model = SensorModel::default();
        let rule = DesignRule::Full(ActionRange::default());
        RolloutSettings {
            k_max: nominal_shot_count(22_000.0, &model, &rule),
            model,
            rule,
            exploration,
            credit: Credit::default(),
        }
    }

    /// Policy returning a fixed raw action.
    struct Constant(Vec<f64>);

    impl Policy for Constant {
        fn action_width(&self) -> usize {
            self.0.len()
        }
        fn parameter_count(&self) -> usize {
            1
        }
        fn act(&self, _: &[f64; OBSERVATION_WIDTH]) -> Vec<f64> {
            self.0.clone()
        }
        fn accumulate_gradient(&self, _: &[f64; OBSERVATION_WIDTH], _: &[f64], _: &mut [f64]) {}
    }

    #[test]
    fn sigma_tilde_examples() {
        assert_eq!(scaled_log_std(1.0), -1.0);
        assert!(scaled_log_std((-10f64).exp()).abs() < 1e-15);
        assert_eq!(scaled_log_std(0.0), 1.0);
        assert_eq!(scaled_log_std(1e6), -1.0);
        assert_eq!(scaled_log_std(1e-300), 1.0);
    }

    #[test]
    fn observation_at_start() {
        let f = ParticleFilter::init_uniform(Support::new(4.0, 6.0).unwrap(), 240).unwrap();
        let ledger = TimeLedger::new(22_000.0);
        let o = build_observation(&f, 0, 91.0, &ledger);
        assert!(o.omega_tilde.abs() < 1e-12);
        assert_eq!((o.gamma, o.k_tilde, o.r_tilde), (1.0, -1.0, -1.0));
    }

    #[test]
    fn action_mapping_examples() {
        let r = ActionRange::default();
        let d = map_action(ActionRaw { a_tau: -1.0, a_phi: -1.0 }, &r);
        assert_eq!((d.tau, d.phi), (0.01, 0.0));
        let d = map_action(ActionRaw { a_tau: 1.0, a_phi: 0.0 }, &r);
        assert_eq!((d.tau, d.phi), (40.0, PI));
        let d = map_action(ActionRaw { a_tau: 0.0, a_phi: 0.5 }, &r);
        assert!((d.tau - 20.005).abs() < 1e-12 && (d.phi - 1.5 * PI).abs() < 1e-15);
    }

    #[test]
    fn action_mapping_is_monotone() {
        let r = ActionRange::default();
        let mut last = map_action(ActionRaw { a_tau: -1.0, a_phi: -1.0 }, &r);
        for i in 1..=200 {
            let a = -1.0 + i as f64 / 100.0;
            let d = map_action(ActionRaw { a_tau: a, a_phi: a }, &r);
            assert!(d.tau > last.tau && d.phi > last.phi);
            last = d;
        }
    }

    #[test]
    fn schedule_levels_longest_first() {
        let s = ExponentialSchedule {
            tau_min: 1.0,
            levels: 3,
            base_repeats: 5,
            extra_repeats: 2,
        };
        let taus: Vec<f64> = s.levels().iter().map(|l| l.0).collect();
        assert_eq!(taus, vec![8.0, 4.0, 2.0, 1.0]);
        assert_eq!(s.levels().iter().map(|l| l.1).collect::<Vec<_>>(), vec![5, 7, 9, 11]);
        assert_eq!(s.tau_at(0), 8.0);
        assert_eq!(s.tau_at(5), 4.0);
        assert_eq!(s.tau_at(s.period()), 8.0);
        assert_eq!(s.tau_at(s.period() - 1), 1.0);

        let sensor = ExponentialSchedule::for_sensor(PI / 10.0, 96.0);
        assert_eq!(sensor.levels, 7);
        assert!(sensor.tau_min * 2f64.powi(7) <= 48.0);
    }

    #[test]
    fn oversized_shot_gives_empty_trace() {
        let mut s = settings(0.0);
        s.rule = DesignRule::Full(ActionRange { tau_floor: 1e6, tau_ceil: 2e6 });
        let f = ParticleFilter::init_uniform(Support::new(0.0, 1.0).unwrap(), 10).unwrap();
        let mut ledger = TimeLedger::new(22_000.0);
        let trace = rollout_episode(&Constant(vec![-1.0, -1.0]), &s, 0.5, f, &mut ledger, 0, &mut stream(1, &[]));
        assert!(trace.is_empty());
        assert_eq!(ledger.consumed(), 0.0);
        assert_eq!(episode_loss(&trace, 10.0), Err(Error::EmptyTrace));
    }

    #[test]
    fn rollout_accounts_time_and_is_reproducible() {
        let s = settings(0.1);
        let policy = NetworkParams::init(LayerSpec::policy(2), &mut stream(3, &[]));
        let run = || {
            let f = ParticleFilter::init_uniform(Support::new(3.0, 4.0).unwrap(), 240).unwrap();
            let mut ledger = TimeLedger::new(22_000.0);
            let t = rollout_episode(&policy, &s, 3.4, f, &mut ledger, 0, &mut stream(9, &[]));
            (t, ledger)
        };
        let (a, ledger) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        let total: f64 = a.steps.iter().map(|st| shot_cost(&s.model, &st.design)).sum();
        assert!((total - ledger.consumed()).abs() <= 1e-9 * total);
        assert!(a.steps.windows(2).all(|w| w[1].elapsed > w[0].elapsed));
        assert!(a.steps.last().unwrap().elapsed <= 22_000.0);
        // The next shot would not fit.
        assert!(ledger.remaining() < s.model.overhead + 40.0);
        for st in &a.steps {
            for v in st.observation.to_array() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn deterministic_outcomes_repeat_exactly() {
        // tau = 0.01 at omega ~ 0: p0 ~ 1 - 2.5e-9, effectively deterministic.
        let s = settings(0.0);
        let f = ParticleFilter::init_uniform(Support::new(0.0, 1e-6).unwrap(), 4).unwrap();
        let run = |seed| {
            let mut ledger = TimeLedger::new(5_000.0);
            rollout_episode(&Constant(vec![-1.0, -1.0]), &s, 0.0, f.clone(), &mut ledger, 0, &mut stream(seed, &[]))
        };
        assert_eq!(run(4), run(4));
        assert!(run(4).steps.iter().all(|st| st.outcome == Outcome::Zero));
    }

    #[test]
    fn episode_loss_examples() {
        let step = |err: f64| TraceStep {
            observation: Observation { omega_tilde: 0.0, sigma_tilde: 0.0, gamma: 1.0, k_tilde: 0.0, r_tilde: 0.0 },
            noise: vec![],
            raw: vec![],
            design: ShotDesign::new(1.0, 0.0),
            outcome: Outcome::Zero,
            estimate: 1.0 + err,
            squared_error: err * err,
            elapsed: 241.0,
        };
        let perfect = EpisodeTrace { omega_true: 1.0, steps: vec![step(0.0), step(0.0)] };
        assert_eq!(episode_loss(&perfect, 5.0).unwrap(), 0.0);
        let single = EpisodeTrace { omega_true: 1.0, steps: vec![step(2.0)] };
        assert!((episode_loss(&single, 10.0).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn equal_losses_cancel() {
        let policy = NetworkParams::init(LayerSpec::policy(2), &mut stream(5, &[]));
        let obs = [0.1, 0.2, 1.0, -0.5, 0.3];
        let samples: Vec<ScoreSample> = (0..4)
            .map(|i| ScoreSample {
                steps: vec![
                    ScoreStep { observation: obs, noise: vec![0.05 * i as f64, -0.02], loss: 0.5 },
                    ScoreStep { observation: obs, noise: vec![0.01, 0.03 * i as f64], loss: 0.2 },
                ],
            })
            .collect();
        for credit in [Credit::Episode, Credit::RewardToGo] {
            let g = score_function_gradient(&policy, &samples, 0.1, credit).unwrap();
            assert!(g.iter().all(|v| *v == 0.0));
            assert!(score_function_gradient(&policy, &samples[..1], 0.1, credit).is_err());
        }
    }

    #[test]
    fn credit_rules_agree_on_single_step_episodes() {
        use bandit::*;
        let policy = TanhScalarPolicy { theta: 0.4 };
        let batch = sample_batch(&policy, 32, 0.1, &mut stream(12, &[]));
        let a = score_function_gradient(&policy, &batch, 0.1, Credit::Episode).unwrap();
        let b = score_function_gradient(&policy, &batch, 0.1, Credit::RewardToGo).unwrap();
        assert!((a[0] - b[0]).abs() <= 1e-12 * a[0].abs());
    }

    #[test]
    fn reward_to_go_ignores_earlier_losses() {
        // Episodes differ only in the loss of step 0, so the step-1 action gets no credit.
        let policy = bandit::TanhScalarPolicy { theta: 0.1 };
        let obs = [0.0; OBSERVATION_WIDTH];
        let sample = |first: f64, late_noise: f64| ScoreSample {
            steps: vec![
                ScoreStep { observation: obs, noise: vec![0.0], loss: first },
                ScoreStep { observation: obs, noise: vec![late_noise], loss: 1.0 },
            ],
        };
        let batch = [sample(0.0, 0.3), sample(2.0, -0.1)];
        let g = score_function_gradient(&policy, &batch, 0.1, Credit::RewardToGo).unwrap();
        assert_eq!(g[0], 0.0);
        let g = score_function_gradient(&policy, &batch, 0.1, Credit::Episode).unwrap();
        assert_ne!(g[0], 0.0);
    }

    #[test]
    fn bandit_gradient_points_to_target_and_training_converges() {
        use bandit::*;
        let mut policy = TanhScalarPolicy { theta: -0.5 };
        let mut rng = stream(8, &[]);
        let g = {
            let mut acc = 0.0;
            for _ in 0..200 {
                acc += score_function_gradient(&policy, &sample_batch(&policy, 16, 0.1, &mut rng), 0.1, Credit::Episode).unwrap()[0];
            }
            acc
        };
        assert!(g < 0.0, "gradient should push theta up toward atanh(0.3)");

        let mut adam = crate::nn::AdamState::new(1, 0.01);
        let mut trace = Vec::new();
        for _ in 0..500 {
            let batch = sample_batch(&policy, 16, 0.1, &mut rng);
            trace.push(batch.iter().map(ScoreSample::loss).sum::<f64>() / 16.0);
            let g = score_function_gradient(&policy, &batch, 0.1, Credit::Episode).unwrap();
            let mut theta = [policy.theta];
            adam.step(&mut theta, &g).unwrap();
            policy.theta = theta[0];
        }
        assert!((policy.theta.tanh() - TARGET).abs() < 0.05, "a = {}", policy.theta.tanh());
        // 100-step moving average falls from the first window to the last.
        let window = |i: usize| trace[i..i + 100].iter().sum::<f64>() / 100.0;
        assert!(window(0) > window(100) && window(100) > window(400));
    }

    #[test]
    fn policy_table_dispatch_and_round_trip() {
        let mut rng = stream(2, &[]);
        let entries: Vec<_> = (0..3)
            .map(|n| {
                (
                    Support::new(n as f64, n as f64 + 1.0).unwrap(),
                    NetworkParams::init(LayerSpec::policy(2), &mut rng),
                )
            })
            .collect();
        let table = PolicyTable::new(entries.clone()).unwrap();
        assert_eq!(table.select(1.5), &entries[1].1);
        assert_eq!(table.select(0.0), &entries[0].1);
        assert_eq!(table.select(3.0), &entries[2].1);
        assert_eq!(table.select(-2.0), &entries[0].1);
        assert_eq!(PolicyTable::from_bytes(&table.to_bytes()).unwrap(), table);
        assert!(PolicyTable::from_bytes(&table.to_bytes()[..40]).is_err());
    }
}
