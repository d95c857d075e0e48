//! Trained artifacts on disk and the pipeline that produces them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nvsense::fed::train_observed;
use nvsense::policy::PolicyTable;
use nvsense::protocols::{ProtocolSpec, Variant};
use nvsense::stage1::{generate_dataset, train_bnn, BnnEstimator, Stage1Dataset};
use sha2::{Digest, Sha256};

use crate::config::{seed_label, ExperimentConfig, PolicyKind};
use crate::error::{BenchError, Result};

/// Artifact directory layout:
///
/// ```text
/// dataset.s1ds              stage-1 training data
/// bnn.nnp                   trained stage-1 estimator
/// bnn-loss.csv              iteration,loss
/// policy-<kind>.nnpt        policy table per training strategy
/// loss-<kind>.csv           round,agent,loss
/// checkpoints/<kind>-<round>.nnpt
/// ```
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
}

pub const DATASET_FILE: &str = "dataset.s1ds";
pub const BNN_FILE: &str = "bnn.nnp";

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn policy_file(kind: PolicyKind) -> String {
        format!("policy-{}.nnpt", kind.name())
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| BenchError::io(&path, e))?;
        Ok(path)
    }

    fn read(&self, name: &str, hint: &str) -> Result<Vec<u8>> {
        let path = self.path(name);
        std::fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                BenchError::MissingArtifact {
                    path: path.clone(),
                    hint: hint.to_string(),
                }
            } else {
                BenchError::io(&path, e)
            }
        })
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    pub fn load_dataset(&self) -> Result<Stage1Dataset> {
        Ok(Stage1Dataset::from_bytes(&self.read(DATASET_FILE, "run `nvsense gen-data`")?)?)
    }

    pub fn load_bnn(&self) -> Result<BnnEstimator> {
        Ok(BnnEstimator::from_bytes(&self.read(BNN_FILE, "run `nvsense train-bnn`")?)?)
    }

    pub fn load_policy(&self, kind: PolicyKind) -> Result<PolicyTable> {
        let hint = format!("run `nvsense train-rl --strategy {}`", kind.name());
        Ok(PolicyTable::from_bytes(&self.read(&Self::policy_file(kind), &hint)?)?)
    }

    /// SHA-256 of an artifact file.
    pub fn checksum(&self, name: &str) -> Result<String> {
        Ok(sha256_hex(&self.read(name, "artifact listed in the manifest")?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn gen_data(config: &ExperimentConfig, store: &ArtifactStore) -> Result<Stage1Dataset> {
    let ds = generate_dataset(
        &config.sensor,
        config.omega_max,
        config.stage1.classes,
        config.stage1.dataset_columns,
        config.seed_for(seed_label::DATASET)?,
    )?;
    store.write(DATASET_FILE, &ds.to_bytes())?;
    Ok(ds)
}

/// Trains the stage-1 estimator, generating the dataset first if absent.
pub fn train_bnn_artifact(config: &ExperimentConfig, store: &ArtifactStore) -> Result<BnnEstimator> {
    let ds = if store.exists(DATASET_FILE) {
        let ds = store.load_dataset()?;
        let expected = (config.omega_max, config.stage1.classes, config.stage1.dataset_columns);
        if (ds.omega_max(), ds.rows(), ds.cols()) != expected {
            return Err(BenchError::Usage(format!(
                "{} was generated with a different omega_max, class count or column count",
                store.path(DATASET_FILE).display()
            )));
        }
        ds
    } else {
        gen_data(config, store)?
    };
    let report = train_bnn(&ds, &config.bnn_hyper()?)?;
    store.write(BNN_FILE, &report.estimator.to_bytes())?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in report.loss_trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    store.write("bnn-loss.csv", csv.as_bytes())?;
    Ok(report.estimator)
}

pub fn train_policy_artifact(config: &ExperimentConfig, store: &ArtifactStore, kind: PolicyKind) -> Result<PolicyTable> {
    let fed = config.federation(kind)?;
    let every = config.rl.checkpoint_every;
    let mut checkpoint_error = None;
    let mut observer = |round: usize, models: &[nvsense::nn::NetworkParams]| {
        if every == 0 || (round + 1) % every != 0 || checkpoint_error.is_some() {
            return;
        }
        let envs = match fed.environments() {
            Ok(e) => e,
            Err(e) => {
                checkpoint_error = Some(BenchError::from(e));
                return;
            }
        };
        let entries = if models.len() == envs.len() && models.len() > 1 {
            envs.iter().map(|e| e.support).zip(models.iter().cloned()).collect()
        } else {
            vec![(
                nvsense::posterior::Support::new(0.0, config.omega_max).expect("positive range"),
                models[0].clone(),
            )]
        };
        let name = format!("checkpoints/{}-{:05}.nnpt", kind.name(), round + 1);
        let result = PolicyTable::new(entries)
            .map_err(BenchError::from)
            .and_then(|t| store.write(&name, &t.to_bytes()));
        if let Err(e) = result {
            checkpoint_error = Some(e);
        }
    };
    let outcome = train_observed(&fed, &mut observer)?;
    if let Some(e) = checkpoint_error {
        return Err(e);
    }
    store.write(&ArtifactStore::policy_file(kind), &outcome.table.to_bytes())?;
    store.write(&format!("loss-{}.csv", kind.name()), outcome.trace_csv().as_bytes())?;
    Ok(outcome.table)
}

/// Artifacts resolved for an evaluation, with their file checksums.
#[derive(Debug, Clone, Default)]
pub struct LoadedArtifacts {
    pub bnn: Option<Arc<BnnEstimator>>,
    pub policies: BTreeMap<PolicyKind, Arc<PolicyTable>>,
    /// File name to SHA-256.
    pub checksums: BTreeMap<String, String>,
}

impl LoadedArtifacts {
    /// Loads what `config.protocols` need; with `train_missing`, trains absent ones.
    pub fn resolve(config: &ExperimentConfig, store: &ArtifactStore, train_missing: bool) -> Result<Self> {
        let mut out = Self::default();
        for &variant in &config.protocols {
            if matches!(variant, Variant::TwoStage | Variant::NnShots) && out.bnn.is_none() {
                let bnn = if train_missing && !store.exists(BNN_FILE) {
                    train_bnn_artifact(config, store)?
                } else {
                    store.load_bnn()?
                };
                out.checksums.insert(BNN_FILE.into(), store.checksum(BNN_FILE)?);
                out.bnn = Some(Arc::new(bnn));
            }
            if let Some(kind) = PolicyKind::for_protocol(variant, config) {
                if out.policies.contains_key(&kind) {
                    continue;
                }
                let file = ArtifactStore::policy_file(kind);
                let table = if train_missing && !store.exists(&file) {
                    train_policy_artifact(config, store, kind)?
                } else {
                    store.load_policy(kind)?
                };
                out.checksums.insert(file.clone(), store.checksum(&file)?);
                out.policies.insert(kind, Arc::new(table));
            }
        }
        Ok(out)
    }

    /// Protocol spec with the right artifacts attached.
    pub fn spec(&self, config: &ExperimentConfig, variant: Variant) -> ProtocolSpec {
        let mut spec = config.protocol_spec(variant);
        spec.bnn = self.bnn.clone();
        spec.policy = PolicyKind::for_protocol(variant, config).and_then(|k| self.policies.get(&k).cloned());
        spec
    }
}
