//! Offline policy training: federated averaging over subrange-local
//! environments, plus the single-model and independent-model ablations.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamState, LayerSpec, NetworkParams};
use crate::policy::{policy_gradient, EpisodeSpec, Policy, PolicyTable, RolloutSettings};
use crate::posterior::Support;
use crate::rng::{self, split_seed, stream};

/// One agent's slice of the frequency range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalEnvironment {
    pub index: usize,
    pub support: Support,
    pub episodes_per_round: usize,
}

/// Splits `(0, omega_max)` into `n_agents` equal, contiguous subranges.
pub fn make_environments(omega_max: f64, n_agents: usize, episodes_per_round: usize) -> Result<Vec<LocalEnvironment>> {
    if n_agents == 0 {
        return Err(Error::InvalidArgument("at least one agent is required".into()));
    }
    let edge = |n: usize| {
        if n == n_agents {
            omega_max
        } else {
            omega_max * n as f64 / n_agents as f64
        }
    };
    (0..n_agents)
        .map(|n| {
            Ok(LocalEnvironment {
                index: n,
                support: Support::new(edge(n), edge(n + 1))?,
                episodes_per_round,
            })
        })
        .collect()
}

/// How a training episode starts: particle count, budget, and any time and
/// shots already spent by the first stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSetup {
    pub settings: RolloutSettings,
    pub particles: usize,
    pub budget: f64,
    pub prefix_shots: usize,
    pub prefix_cost: f64,
}

impl EpisodeSetup {
    /// Batch of episodes on `support`, with truths drawn uniformly and one
    /// stream per episode derived from `batch_seed`.
    pub fn batch(&self, support: Support, size: usize, batch_seed: u64) -> Vec<EpisodeSpec> {
        (0..size)
            .map(|i| {
                let seed = split_seed(batch_seed, &[rng::stream::EPISODE, i as u64]);
                let omega_true = stream(seed, &[rng::stream::OMEGA_TRUE]).random_range(support.lo..support.hi);
                EpisodeSpec {
                    omega_true,
                    support,
                    particles: self.particles,
                    budget: self.budget,
                    prefix_cost: self.prefix_cost,
                    prefix_shots: self.prefix_shots,
                    seed,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "federated")]
    Federated,
    #[serde(rename = "oneM")]
    OneM,
    #[serde(rename = "multipleM")]
    MultipleM,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "federated" => Ok(Strategy::Federated),
            "oneM" => Ok(Strategy::OneM),
            "multipleM" => Ok(Strategy::MultipleM),
            other => Err(Error::InvalidArgument(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Federated => "federated",
            Strategy::OneM => "oneM",
            Strategy::MultipleM => "multipleM",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub strategy: Strategy,
    pub n_agents: usize,
    pub rounds: usize,
    /// Episodes per agent per round.
    pub batch: usize,
    pub learning_rate: f64,
    pub omega_max: f64,
    pub seed: u64,
    /// Multiplier on the initial output-layer weights.
    pub output_gain: f64,
    pub setup: EpisodeSetup,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.rounds == 0 {
            return Err(Error::InvalidArgument("n_agents and rounds must be >= 1".into()));
        }
        if self.batch < 2 {
            return Err(Error::InvalidArgument("batch must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.omega_max > 0.0) {
            return Err(Error::InvalidArgument("learning rate and omega_max must be positive".into()));
        }
        Ok(())
    }

    pub fn environments(&self) -> Result<Vec<LocalEnvironment>> {
        make_environments(self.omega_max, self.n_agents, self.batch)
    }

    pub fn initial_params(&self) -> NetworkParams {
        let spec = LayerSpec::policy(self.setup.settings.rule.action_width());
        let mut params = NetworkParams::init(spec, &mut stream(self.seed, &[rng::stream::INIT]));
        params.scale_output_layer(self.output_gain);
        params
    }

    /// Seed for environment `env` in round `round`; shared by all strategies.
    pub fn round_seed(&self, round: usize, env: usize) -> u64 {
        split_seed(self.seed, &[rng::stream::ROUND, round as u64, env as u64])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub params: NetworkParams,
    /// Mean episode loss of the batch, measured before the step.
    pub loss: f64,
}

/// One Adam step from `global` on a fresh batch from `env`.
pub fn local_round(
    global: &NetworkParams,
    env: &LocalEnvironment,
    setup: &EpisodeSetup,
    adam: &mut AdamState,
    round_seed: u64,
) -> Result<LocalUpdate> {
    let specs = setup.batch(env.support, env.episodes_per_round, round_seed);
    let batch = policy_gradient(global, &specs, &setup.settings)?;
    let mut params = global.clone();
    adam.step(params.values_mut(), &batch.gradient)?;
    Ok(LocalUpdate {
        params,
        loss: batch.mean_loss(),
    })
}

/// Size-weighted coordinatewise mean of parameter vectors.
pub fn fedavg(locals: &[&[f64]], sizes: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = locals.first() else {
        return Err(Error::InvalidArgument("fedavg needs at least one local model".into()));
    };
    if sizes.len() != locals.len() {
        return Err(Error::ShapeMismatch {
            expected: locals.len(),
            actual: sizes.len(),
        });
    }
    if sizes.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("dataset sizes must be positive".into()));
    }
    let total: f64 = sizes.iter().sum();
    let mut out = vec![0.0; first.len()];
    for (local, size) in locals.iter().zip(sizes) {
        if local.len() != out.len() {
            return Err(Error::ShapeMismatch {
                expected: out.len(),
                actual: local.len(),
            });
        }
        let w = size / total;
        for (o, v) in out.iter_mut().zip(local.iter()) {
            *o += w * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub round: usize,
    pub agent: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub table: PolicyTable,
    /// Per-agent batch losses in (round, agent) order.
    pub trace: Vec<LossRecord>,
    /// Size-weighted mean of the agent losses per round.
    pub global_trace: Vec<f64>,
}

impl TrainOutcome {
    /// CSV `round,agent,loss` with header.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("round,agent,loss\n");
        for r in &self.trace {
            out.push_str(&format!("{},{},{}\n", r.round, r.agent, r.loss));
        }
        out
    }
}

/// Called after every round with the round index and the current models.
pub type RoundObserver<'a> = dyn FnMut(usize, &[NetworkParams]) + 'a;

pub fn train(config: &FederationConfig) -> Result<TrainOutcome> {
    train_observed(config, &mut |_, _| {})
}

pub fn train_observed(config: &FederationConfig, observer: &mut RoundObserver<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let envs = config.environments()?;
    let init = config.initial_params();
    let full = Support::new(0.0, config.omega_max)?;
    let sizes: Vec<f64> = envs.iter().map(|e| e.episodes_per_round as f64).collect();
    let mut trace = Vec::new();
    let mut global_trace = Vec::with_capacity(config.rounds);

    let check = |round: usize, agent: usize, loss: f64| {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Diverged {
                iteration: round * envs.len() + agent,
                loss,
            })
        }
    };

    let table = match config.strategy {
        Strategy::Federated => {
            let mut global = init;
            let mut adams: Vec<AdamState> = envs
                .iter()
                .map(|_| AdamState::new(global.len(), config.learning_rate))
                .collect();
            for round in 0..config.rounds {
                let updates = adams
                    .par_iter_mut()
                    .zip(envs.par_iter())
                    .map(|(adam, env)| {
                        local_round(&global, env, &config.setup, adam, config.round_seed(round, env.index))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut weighted = 0.0;
                for (env, u) in envs.iter().zip(&updates) {
                    check(round, env.index, u.loss)?;
                    trace.push(LossRecord {
                        round,
                        agent: env.index,
                        loss: u.loss,
                    });
                    weighted += u.loss * env.episodes_per_round as f64;
                }
                global_trace.push(weighted / sizes.iter().sum::<f64>());
                let locals: Vec<&[f64]> = updates.iter().map(|u| u.params.values()).collect();
                let values = fedavg(&locals, &sizes)?;
                global = NetworkParams::from_values(global.spec().clone(), values)?;
                observer(round, std::slice::from_ref(&global));
            }
            PolicyTable::single(full, global)?
        }
        Strategy::OneM => {
            let mut params = init;
            let mut adam = AdamState::new(params.len(), config.learning_rate);
            for round in 0..config.rounds {
                let env = &envs[round % envs.len()];
                let u = local_round(&params, env, &config.setup, &mut adam, config.round_seed(round, env.index))?;
                check(round, env.index, u.loss)?;
                trace.push(LossRecord {
                    round,
                    agent: env.index,
                    loss: u.loss,
                });
                global_trace.push(u.loss);
                params = u.params;
                observer(round, std::slice::from_ref(&params));
            }
            PolicyTable::single(full, params)?
        }
        Strategy::MultipleM => {
            let mut agents: Vec<(NetworkParams, AdamState)> = envs
                .iter()
                .map(|_| (init.clone(), AdamState::new(init.len(), config.learning_rate)))
                .collect();
            for round in 0..config.rounds {
                let losses = agents
                    .par_iter_mut()
                    .zip(envs.par_iter())
                    .map(|((params, adam), env)| {
                        let u = local_round(params, env, &config.setup, adam, config.round_seed(round, env.index))?;
                        *params = u.params;
                        Ok(u.loss)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut weighted = 0.0;
                for (env, loss) in envs.iter().zip(losses) {
                    check(round, env.index, loss)?;
                    trace.push(LossRecord {
                        round,
                        agent: env.index,
                        loss,
                    });
                    weighted += loss * env.episodes_per_round as f64;
                }
                global_trace.push(weighted / sizes.iter().sum::<f64>());
                let models: Vec<NetworkParams> = agents.iter().map(|a| a.0.clone()).collect();
                observer(round, &models);
            }
            PolicyTable::new(
                envs.iter()
                    .zip(agents)
                    .map(|(env, (params, _))| (env.support, params))
                    .collect(),
            )?
        }
    };
    Ok(TrainOutcome {
        table,
        trace,
        global_trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSnapshot {
    /// Mean episode loss per environment.
    pub per_agent: Vec<f64>,
    /// Sum of every per-shot loss over every episode, divided by `K * sum |D_n|`.
    pub global: f64,
}

/// Evaluates `policy` on a batch from every environment without updating it.
pub fn loss_snapshot<P: Policy + ?Sized>(
    policy: &P,
    envs: &[LocalEnvironment],
    setup: &EpisodeSetup,
    seed: u64,
) -> Result<LossSnapshot> {
    let mut per_agent = Vec::with_capacity(envs.len());
    let mut total = 0.0;
    let mut episodes = 0usize;
    for env in envs {
        let specs = setup.batch(env.support, env.episodes_per_round, split_seed(seed, &[env.index as u64]));
        let traces = specs
            .par_iter()
            .map(|s| s.run(policy, &setup.settings))
            .collect::<Result<Vec<_>>>()?;
        let mut local = 0.0;
        for t in &traces {
            let per_shot: f64 = t.steps.iter().map(|s| s.squared_error).sum();
            total += per_shot;
            local += per_shot / setup.settings.k_max;
        }
        episodes += traces.len();
        per_agent.push(local / traces.len() as f64);
    }
    Ok(LossSnapshot {
        per_agent,
        global: total / (setup.settings.k_max * episodes as f64),
    })
}
