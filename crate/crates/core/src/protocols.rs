//! Runtime estimation protocols sharing one time-ledger contract: the
//! two-stage method and three single-stage baselines.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{make_environments, EpisodeSetup};
use crate::model::{shot_cost, Outcome, SensorModel, TimeLedger};
use crate::policy::{
    nominal_shot_count, rollout_episode, ActionRange, DesignRule, EpisodeTrace, ExponentialSchedule, PolicyTable,
    RolloutSettings,
};
use crate::posterior::{ParticleFilter, Support};
use crate::rng::{self, stream};
use crate::stage1::{fixed_design, stage1_run, tau_min, BnnEstimator, Stage1Output};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TwoStage,
    NnShots,
    PhaseOnly,
    VanillaRl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::TwoStage, Variant::NnShots, Variant::PhaseOnly, Variant::VanillaRl];

    pub fn id(self) -> &'static str {
        match self {
            Variant::TwoStage => "two_stage",
            Variant::NnShots => "nn_shots",
            Variant::PhaseOnly => "phase_only",
            Variant::VanillaRl => "vanilla_rl",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown protocol {s:?}")))
    }
}

/// Where the adaptive stage puts its particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    /// Width-`delta` interval centred on the first-stage estimate.
    Dynamic,
    /// The predefined `delta`-wide interval that contains the estimate.
    Fixed,
}

/// Width-`delta` interval around `omega_hat`, shifted to lie inside `[0, omega_max]`.
pub fn clamp_subrange(omega_hat: f64, delta: f64, omega_max: f64) -> (f64, f64) {
    let lo = (omega_hat - delta / 2.0).max(0.0).min(omega_max - delta);
    (lo, lo + delta)
}

/// The predefined interval `(n delta, (n + 1) delta)` containing `omega_hat`.
pub fn fixed_subrange(omega_hat: f64, delta: f64, omega_max: f64) -> Result<Support> {
    let n = (omega_max / delta).round().max(1.0) as usize;
    let envs = make_environments(omega_max, n, 1)?;
    let i = ((omega_hat / omega_max * n as f64).floor().max(0.0) as usize).min(n - 1);
    Ok(envs[i].support)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSpec {
    pub variant: Variant,
    pub model: SensorModel,
    pub omega_max: f64,
    pub budget: f64,
    pub stage1_shots: usize,
    pub delta: f64,
    pub particles: usize,
    pub action_range: ActionRange,
    pub range_mode: RangeMode,
    pub bnn: Option<Arc<BnnEstimator>>,
    pub policy: Option<Arc<PolicyTable>>,
}

impl ProtocolSpec {
    /// 70 first-stage shots, a 22 ms budget, `delta = omega_max / 10`, and
    /// 240 particles (480 from 20 MHz up; 960 for the full-range baselines).
    pub fn defaults(variant: Variant, omega_max: f64) -> Self {
        let particles = match variant {
            Variant::PhaseOnly | Variant::VanillaRl => 960,
            _ if omega_max >= 20.0 => 480,
            _ => 240,
        };
        Self {
            variant,
            model: SensorModel::default(),
            omega_max,
            budget: 22_000.0,
            stage1_shots: 70,
            delta: omega_max / 10.0,
            particles,
            action_range: ActionRange::default(),
            range_mode: RangeMode::Dynamic,
            bnn: None,
            policy: None,
        }
    }

    pub fn with_bnn(mut self, bnn: Arc<BnnEstimator>) -> Self {
        self.bnn = Some(bnn);
        self
    }

    pub fn with_policy(mut self, policy: Arc<PolicyTable>) -> Self {
        self.policy = Some(policy);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.omega_max > 0.0) || !(self.budget > 0.0) {
            return Err(Error::InvalidArgument("omega_max and budget must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta <= self.omega_max) {
            return Err(Error::InvalidArgument(format!(
                "delta {} must lie in (0, omega_max]",
                self.delta
            )));
        }
        if self.particles < 2 {
            return Err(Error::InvalidArgument("need at least 2 particles".into()));
        }
        Ok(())
    }

    pub fn design_rule(&self) -> DesignRule {
        match self.variant {
            Variant::PhaseOnly => DesignRule::PhaseOnly(ExponentialSchedule::for_sensor(
                tau_min(self.omega_max),
                self.model.t2,
            )),
            _ => DesignRule::Full(self.action_range),
        }
    }

    pub fn rollout_settings(&self, exploration: f64) -> RolloutSettings {
        let rule = self.design_rule();
        RolloutSettings {
            k_max: nominal_shot_count(self.budget, &self.model, &rule),
            model: self.model,
            rule,
            exploration,
            credit: Default::default(),
        }
    }

    /// Ledger time of a complete first stage, accumulated shot by shot.
    pub fn stage1_cost(&self) -> f64 {
        let cost = shot_cost(&self.model, &fixed_design(self.omega_max));
        let mut ledger = TimeLedger::new(f64::INFINITY);
        for _ in 0..self.stage1_shots {
            let _ = ledger.charge(cost);
        }
        ledger.consumed()
    }

    /// Training episodes matching what the adaptive stage sees at runtime.
    ///
    /// For the two-stage method, episodes start with the first-stage time
    /// and shot count already on the ledger.
    pub fn training_setup(&self, exploration: f64) -> EpisodeSetup {
        let (prefix_shots, prefix_cost) = match self.variant {
            Variant::TwoStage => (self.stage1_shots, self.stage1_cost()),
            _ => (0, 0.0),
        };
        EpisodeSetup {
            settings: self.rollout_settings(exploration),
            particles: self.particles,
            budget: self.budget,
            prefix_shots,
            prefix_cost,
        }
    }

    fn bnn(&self) -> Result<&BnnEstimator> {
        self.bnn.as_deref().ok_or(Error::MissingArtifact("BNN estimator"))
    }

    fn policy(&self) -> Result<&PolicyTable> {
        self.policy.as_deref().ok_or(Error::MissingArtifact("policy"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunShot {
    pub elapsed: f64,
    pub estimate: f64,
    pub tau: f64,
    pub phi: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationRun {
    pub protocol: Variant,
    pub seed: u64,
    pub omega_true: f64,
    pub budget: f64,
    pub shots: Vec<RunShot>,
    /// Shots belonging to the first stage (zero for single-stage protocols).
    pub stage1_shots: usize,
    /// Particle support of the adaptive stage, when one ran.
    pub subrange: Option<Support>,
}

impl EstimationRun {
    pub fn terminal_estimate(&self) -> Option<f64> {
        self.shots.last().map(|s| s.estimate)
    }

    pub fn elapsed(&self) -> f64 {
        self.shots.last().map_or(0.0, |s| s.elapsed)
    }

    /// `(elapsed, squared error)` per shot.
    pub fn squared_errors(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.shots
            .iter()
            .map(|s| (s.elapsed, (s.estimate - self.omega_true).powi(2)))
    }

    fn push_trace(&mut self, trace: &EpisodeTrace) {
        self.shots.extend(trace.steps.iter().map(|s| RunShot {
            elapsed: s.elapsed,
            estimate: s.estimate,
            tau: s.design.tau,
            phi: s.design.phi,
            outcome: s.outcome,
        }));
    }
}

/// Runs the protocol named by `spec.variant`.
pub fn run(spec: &ProtocolSpec, omega_true: f64, seed: u64) -> Result<EstimationRun> {
    match spec.variant {
        Variant::TwoStage => run_two_stage(spec, omega_true, seed),
        Variant::NnShots => run_nn_shots(spec, omega_true, seed),
        Variant::PhaseOnly => run_phase_only(spec, omega_true, seed),
        Variant::VanillaRl => run_vanilla_rl(spec, omega_true, seed),
    }
}

fn empty_run(spec: &ProtocolSpec, omega_true: f64, seed: u64) -> EstimationRun {
    EstimationRun {
        protocol: spec.variant,
        seed,
        omega_true,
        budget: spec.budget,
        shots: Vec::new(),
        stage1_shots: 0,
        subrange: None,
    }
}

fn stage1_into(
    spec: &ProtocolSpec,
    omega_true: f64,
    shots: usize,
    ledger: &mut TimeLedger,
    out: &mut EstimationRun,
    seed: u64,
) -> Result<Stage1Output> {
    let bnn = spec.bnn()?;
    let mut rng = stream(seed, &[rng::stream::STAGE_ONE]);
    let s1 = stage1_run(&spec.model, omega_true, shots, bnn, spec.delta, ledger, &mut rng)?;
    out.shots.extend(s1.records.iter().zip(&s1.running_estimates).map(|(r, e)| RunShot {
        elapsed: r.elapsed_at,
        estimate: *e,
        tau: r.design.tau,
        phi: r.design.phi,
        outcome: r.outcome,
    }));
    out.stage1_shots = s1.records.len();
    Ok(s1)
}

fn adaptive_stage(
    spec: &ProtocolSpec,
    omega_true: f64,
    support: Support,
    policy_key: f64,
    ledger: &mut TimeLedger,
    out: &mut EstimationRun,
    seed: u64,
) -> Result<()> {
    let policy = spec.policy()?.select(policy_key);
    let filter = ParticleFilter::init_uniform(support, spec.particles)?;
    let mut rng = stream(seed, &[rng::stream::STAGE_TWO]);
    let trace = rollout_episode(
        policy,
        &spec.rollout_settings(0.0),
        omega_true,
        filter,
        ledger,
        out.shots.len(),
        &mut rng,
    );
    out.subrange = Some(support);
    out.push_trace(&trace);
    Ok(())
}

/// First stage with the BNN, then the policy on a width-`delta` subrange
/// around its estimate until the budget runs out.
pub fn run_two_stage(spec: &ProtocolSpec, omega_true: f64, seed: u64) -> Result<EstimationRun> {
    spec.validate()?;
    let mut out = empty_run(spec, omega_true, seed);
    let mut ledger = TimeLedger::new(spec.budget);
    let omega_hat = if spec.stage1_shots > 0 {
        let s1 = stage1_into(spec, omega_true, spec.stage1_shots, &mut ledger, &mut out, seed)?;
        if s1.exhausted {
            return Ok(out);
        }
        s1.result.omega_hat
    } else {
        spec.omega_max / 2.0
    };
    let support = match spec.range_mode {
        RangeMode::Dynamic => {
            let (lo, hi) = clamp_subrange(omega_hat, spec.delta, spec.omega_max);
            Support::new(lo, hi)?
        }
        RangeMode::Fixed => fixed_subrange(omega_hat, spec.delta, spec.omega_max)?,
    };
    adaptive_stage(spec, omega_true, support, omega_hat, &mut ledger, &mut out, seed)?;
    Ok(out)
}

/// Fixed-design BNN shots for the whole budget, fusing as it goes.
pub fn run_nn_shots(spec: &ProtocolSpec, omega_true: f64, seed: u64) -> Result<EstimationRun> {
    spec.validate()?;
    let mut out = empty_run(spec, omega_true, seed);
    let mut ledger = TimeLedger::new(spec.budget);
    stage1_into(spec, omega_true, usize::MAX, &mut ledger, &mut out, seed)?;
    Ok(out)
}

/// Phase-only policy with geometric sensing times on the full range.
pub fn run_phase_only(spec: &ProtocolSpec, omega_true: f64, seed: u64) -> Result<EstimationRun> {
    full_range_adaptive(spec, omega_true, seed)
}

/// One policy choosing both design knobs on the full range.
pub fn run_vanilla_rl(spec: &ProtocolSpec, omega_true: f64, seed: u64) -> Result<EstimationRun> {
    full_range_adaptive(spec, omega_true, seed)
}

fn full_range_adaptive(spec: &ProtocolSpec, omega_true: f64, seed: u64) -> Result<EstimationRun> {
    spec.validate()?;
    let mut out = empty_run(spec, omega_true, seed);
    let mut ledger = TimeLedger::new(spec.budget);
    let support = Support::new(0.0, spec.omega_max)?;
    adaptive_stage(spec, omega_true, support, support.midpoint(), &mut ledger, &mut out, seed)?;
    Ok(out)
}
