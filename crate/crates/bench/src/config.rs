//! Experiment configuration, stored as JSON.
//!
//! Every field has a desk-scale default, so `{}` is a valid config file. A
//! manifest written by `evaluate` is also accepted: its `config` member is used.

use std::path::{Path, PathBuf};

use nvsense::fed::{FederationConfig, Strategy};
use nvsense::model::SensorModel;
use nvsense::protocols::{ProtocolSpec, RangeMode, Variant};
use nvsense::rng::split_seed;
use nvsense::stage1::BnnHyper;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BenchError, Result};
use crate::window::{Averaging, WindowOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub omega_max: f64,
    pub protocols: Vec<Variant>,
    pub episodes: usize,
    pub seed: Option<u64>,
    pub window_us: f64,
    pub budget: f64,
    pub sensor: SensorModel,
    pub curve: CurveSettings,
    pub stage1: Stage1Settings,
    pub rl: RlSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSettings {
    /// Leading shots left out of the two-stage and NN-shots curves.
    pub skip_shots: usize,
    pub averaging: Averaging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Settings {
    pub shots: usize,
    /// Subrange width for the adaptive stage; `omega_max / 10` when absent.
    pub delta: Option<f64>,
    pub classes: usize,
    pub dataset_columns: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSettings {
    pub agents: usize,
    pub rounds: usize,
    /// Episodes per agent per round.
    pub batch: usize,
    pub learning_rate: f64,
    pub exploration: f64,
    pub output_gain: f64,
    /// Rounds for the full-range baselines (vanilla RL, phase-only).
    pub baseline_rounds: usize,
    /// Which trained policy the two-stage protocol uses.
    pub two_stage_policy: Strategy,
    pub range_mode: RangeMode,
    /// Write a policy checkpoint every this many rounds (0 disables).
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            omega_max: 10.0,
            protocols: Variant::ALL.to_vec(),
            episodes: 200,
            seed: None,
            window_us: 500.0,
            budget: 22_000.0,
            sensor: SensorModel::default(),
            curve: CurveSettings::default(),
            stage1: Stage1Settings::default(),
            rl: RlSettings::default(),
            output_dir: None,
        }
    }
}

impl Default for CurveSettings {
    fn default() -> Self {
        Self {
            skip_shots: 10,
            averaging: Averaging::PerRun,
        }
    }
}

impl Default for Stage1Settings {
    fn default() -> Self {
        Self {
            shots: 70,
            delta: None,
            classes: 50,
            dataset_columns: 500,
            iterations: 2000,
            learning_rate: 1e-3,
            l2: 1e-4,
        }
    }
}

impl Default for RlSettings {
    fn default() -> Self {
        Self {
            agents: 10,
            rounds: 256,
            batch: 64,
            learning_rate: 1e-3,
            exploration: 0.1,
            output_gain: 1.0,
            baseline_rounds: 256,
            two_stage_policy: Strategy::Federated,
            range_mode: RangeMode::Dynamic,
            checkpoint_every: 64,
        }
    }
}

/// Labels for the seeds each artifact derives from the master seed.
pub mod seed_label {
    pub const DATASET: u64 = 101;
    pub const BNN: u64 = 102;
    pub const POLICY: u64 = 103;
    pub const EVALUATION: u64 = 104;
}

impl ExperimentConfig {
    /// Full-scale settings: 100 classes, 5,000 columns, 8,000 BNN iterations,
    /// 2,048 rounds of 1,024 episodes, 16,384 baseline rounds, 2,000 test episodes.
    pub fn paper_scale() -> Self {
        let mut c = Self::default();
        c.episodes = 2000;
        c.stage1.classes = 100;
        c.stage1.dataset_columns = 5000;
        c.stage1.iterations = 8000;
        c.rl.rounds = 2048;
        c.rl.batch = 1024;
        c.rl.baseline_rounds = 16_384;
        c.rl.checkpoint_every = 256;
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Self::from_json(&text).map_err(|source| BenchError::Config {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value {
            serde_json::Value::Object(mut map) if map.contains_key("config_sha256") => {
                serde_json::from_value(map.remove("config").unwrap_or_default())
            }
            other => serde_json::from_value(other),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchError::Usage(m.to_string()));
        if !(self.omega_max > 0.0) {
            return bad("omega_max must be positive");
        }
        if !(self.window_us > 0.0) {
            return bad("window width must be positive");
        }
        if self.episodes == 0 {
            return bad("episode count must be at least 1");
        }
        if !(self.budget > 0.0) {
            return bad("budget must be positive");
        }
        if self.protocols.is_empty() {
            return bad("at least one protocol is required");
        }
        if self.rl.agents == 0 || self.rl.rounds == 0 || self.rl.baseline_rounds == 0 {
            return bad("agents and rounds must be at least 1");
        }
        if self.rl.batch < 2 {
            return bad("batch must be at least 2");
        }
        if self.stage1.classes < 2 || self.stage1.dataset_columns == 0 || self.stage1.iterations == 0 {
            return bad("stage-1 classes, columns and iterations must be positive");
        }
        self.sensor.validate()?;
        Ok(())
    }

    pub fn master_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| BenchError::Usage("a master seed is required (--seed)".into()))
    }

    pub fn delta(&self) -> f64 {
        self.stage1.delta.unwrap_or(self.omega_max / 10.0)
    }

    pub fn seed_for(&self, label: u64) -> Result<u64> {
        Ok(split_seed(self.master_seed()?, &[label]))
    }

    /// Canonical JSON of the config, without the output directory.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        serde_json::to_string(&c).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn bnn_hyper(&self) -> Result<BnnHyper> {
        Ok(BnnHyper {
            iterations: self.stage1.iterations,
            learning_rate: self.stage1.learning_rate,
            l2: self.stage1.l2,
            seed: self.seed_for(seed_label::BNN)?,
        })
    }

    /// Protocol settings without artifacts attached.
    pub fn protocol_spec(&self, variant: Variant) -> ProtocolSpec {
        let mut spec = ProtocolSpec::defaults(variant, self.omega_max);
        spec.model = self.sensor;
        spec.budget = self.budget;
        spec.stage1_shots = self.stage1.shots;
        spec.delta = self.delta();
        spec.range_mode = self.rl.range_mode;
        spec
    }

    pub fn window_options(&self, variant: Variant) -> WindowOptions {
        WindowOptions {
            window_us: self.window_us,
            skip_shots: match variant {
                Variant::TwoStage | Variant::NnShots => self.curve.skip_shots,
                Variant::PhaseOnly | Variant::VanillaRl => 0,
            },
            averaging: self.curve.averaging,
        }
    }

    /// Training setup for one kind of policy.
    pub fn federation(&self, kind: PolicyKind) -> Result<FederationConfig> {
        let (strategy, agents, rounds, variant) = match kind {
            PolicyKind::Federated => (Strategy::Federated, self.rl.agents, self.rl.rounds, Variant::TwoStage),
            PolicyKind::OneM => (Strategy::OneM, self.rl.agents, self.rl.rounds, Variant::TwoStage),
            PolicyKind::MultipleM => (Strategy::MultipleM, self.rl.agents, self.rl.rounds, Variant::TwoStage),
            PolicyKind::Vanilla => (Strategy::Federated, 1, self.rl.baseline_rounds, Variant::VanillaRl),
            PolicyKind::PhaseOnly => (Strategy::Federated, 1, self.rl.baseline_rounds, Variant::PhaseOnly),
        };
        Ok(FederationConfig {
            strategy,
            n_agents: agents,
            rounds,
            batch: self.rl.batch,
            learning_rate: self.rl.learning_rate,
            omega_max: self.omega_max,
            seed: self.seed_for(seed_label::POLICY)?,
            output_gain: self.rl.output_gain,
            setup: self.protocol_spec(variant).training_setup(self.rl.exploration),
        })
    }
}

/// Trained policy artifacts, one file each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    Federated,
    OneM,
    MultipleM,
    Vanilla,
    PhaseOnly,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Federated,
        PolicyKind::OneM,
        PolicyKind::MultipleM,
        PolicyKind::Vanilla,
        PolicyKind::PhaseOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Federated => "federated",
            PolicyKind::OneM => "oneM",
            PolicyKind::MultipleM => "multipleM",
            PolicyKind::Vanilla => "vanilla",
            PolicyKind::PhaseOnly => "phase-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                BenchError::Usage(format!(
                    "unknown strategy {s:?} (expected federated, oneM, multipleM, vanilla or phase-only)"
                ))
            })
    }

    pub fn from_strategy(s: Strategy) -> Self {
        match s {
            Strategy::Federated => PolicyKind::Federated,
            Strategy::OneM => PolicyKind::OneM,
            Strategy::MultipleM => PolicyKind::MultipleM,
        }
    }

    /// Policy a protocol needs, if any.
    pub fn for_protocol(variant: Variant, config: &ExperimentConfig) -> Option<Self> {
        match variant {
            Variant::TwoStage => Some(Self::from_strategy(config.rl.two_stage_policy)),
            Variant::NnShots => None,
            Variant::PhaseOnly => Some(PolicyKind::PhaseOnly),
            Variant::VanillaRl => Some(PolicyKind::Vanilla),
        }
    }
}
