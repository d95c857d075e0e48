//! Seeded batch evaluation and result files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nvsense::protocols::{run, EstimationRun, ProtocolSpec, Variant};
use nvsense::rng::{self, split_seed, stream};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::artifacts::{sha256_hex, LoadedArtifacts};
use crate::config::{seed_label, ExperimentConfig};
use crate::error::{BenchError, Result};
use crate::svg::{line_chart, Series};
use crate::window::{window_mse, ErrorTrace, WindowedCurve};

pub const RUNS_HEADER: &str = "protocol,seed,omega_true,elapsed_us,estimate,sq_error";
pub const CURVE_HEADER: &str = "protocol,window_center_us,mean_mse,n";

/// One test episode: its seed and true frequency, shared by every protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Episode {
    pub index: usize,
    pub seed: u64,
    pub omega_true: f64,
}

/// Test episodes with `omega_true` uniform on `(0, omega_max)`.
pub fn episode_plan(config: &ExperimentConfig) -> Result<Vec<Episode>> {
    let base = config.seed_for(seed_label::EVALUATION)?;
    Ok((0..config.episodes)
        .map(|i| Episode {
            index: i,
            seed: split_seed(base, &[rng::stream::EPISODE, i as u64]),
            omega_true: stream(base, &[rng::stream::OMEGA_TRUE, i as u64]).random_range(0.0..config.omega_max),
        })
        .collect())
}

pub fn run_episodes(spec: &ProtocolSpec, plan: &[Episode]) -> Result<Vec<EstimationRun>> {
    Ok(plan
        .par_iter()
        .map(|e| run(spec, e.omega_true, e.seed))
        .collect::<nvsense::Result<Vec<_>>>()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolResult {
    pub runs: Vec<EstimationRun>,
    pub curve: WindowedCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub plan: Vec<Episode>,
    pub results: BTreeMap<Variant, ProtocolResult>,
}

pub fn error_traces(config: &ExperimentConfig, variant: Variant, runs: &[EstimationRun]) -> Vec<ErrorTrace> {
    let skip = config.window_options(variant).skip_shots;
    runs.iter().map(|r| ErrorTrace::from_run(r, skip)).collect()
}

pub fn evaluate(config: &ExperimentConfig, artifacts: &LoadedArtifacts) -> Result<Evaluation> {
    config.validate()?;
    let plan = episode_plan(config)?;
    let mut results = BTreeMap::new();
    for &variant in &config.protocols {
        let runs = run_episodes(&artifacts.spec(config, variant), &plan)?;
        let curve = window_mse(&error_traces(config, variant, &runs), config.window_us, config.curve.averaging);
        results.insert(variant, ProtocolResult { runs, curve });
    }
    Ok(Evaluation { plan, results })
}

pub fn runs_csv<'a>(runs: impl IntoIterator<Item = &'a EstimationRun>) -> String {
    let mut out = format!("{RUNS_HEADER}\n");
    for r in runs {
        for s in &r.shots {
            let sq = (s.estimate - r.omega_true).powi(2);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.protocol, r.seed, r.omega_true, s.elapsed, s.estimate, sq
            );
        }
    }
    out
}

pub fn curve_csv<'a>(curves: impl IntoIterator<Item = (Variant, &'a WindowedCurve)>) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for (variant, c) in curves {
        for i in 0..c.len() {
            let _ = writeln!(out, "{},{},{},{}", variant, c.centers[i], c.mean_mse[i], c.counts[i]);
        }
    }
    out
}

pub fn figure_svg(evaluation: &Evaluation) -> String {
    let series: Vec<Series> = evaluation
        .results
        .iter()
        .map(|(v, r)| Series {
            label: v.id().to_string(),
            points: r.curve.centers.iter().copied().zip(r.curve.mean_mse.iter().copied()).collect(),
        })
        .collect();
    line_chart(&series, "elapsed time (us)", "windowed MSE (MHz^2)")
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    config_sha256: String,
    master_seed: u64,
    seed_derivation: &'static str,
    episodes: &'a [Episode],
    artifacts: &'a BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], written: &mut BTreeMap<String, String>) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| BenchError::io(&path, e))?;
    written.insert(name.to_string(), sha256_hex(bytes));
    Ok(path)
}

/// Which files to emit for an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `runs.csv`, `curve.csv`, `figure.svg`, `manifest.json`.
    Combined,
    /// Per-protocol `runs-<p>.csv` and `curve-<p>.csv`, plus `figure.svg` and `manifest.json`.
    PerProtocol,
}

/// Writes result files into `dir` and returns their paths.
pub fn write_outputs(
    dir: &Path,
    config: &ExperimentConfig,
    artifacts: &LoadedArtifacts,
    evaluation: &Evaluation,
    layout: Layout,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    let mut written = BTreeMap::new();
    let mut paths = Vec::new();
    match layout {
        Layout::Combined => {
            let runs = runs_csv(evaluation.results.values().flat_map(|r| &r.runs));
            paths.push(write_file(dir, "runs.csv", runs.as_bytes(), &mut written)?);
            let curves = curve_csv(evaluation.results.iter().map(|(v, r)| (*v, &r.curve)));
            paths.push(write_file(dir, "curve.csv", curves.as_bytes(), &mut written)?);
        }
        Layout::PerProtocol => {
            for (v, r) in &evaluation.results {
                let runs = runs_csv(&r.runs);
                paths.push(write_file(dir, &format!("runs-{v}.csv"), runs.as_bytes(), &mut written)?);
                let curve = curve_csv([(*v, &r.curve)]);
                paths.push(write_file(dir, &format!("curve-{v}.csv"), curve.as_bytes(), &mut written)?);
            }
        }
    }
    paths.push(write_file(dir, "figure.svg", figure_svg(evaluation).as_bytes(), &mut written)?);

    let mut stored = config.clone();
    stored.output_dir = None;
    let manifest = Manifest {
        tool: "nvsense",
        version: env!("CARGO_PKG_VERSION"),
        config: &stored,
        config_sha256: config.sha256(),
        master_seed: config.master_seed()?,
        seed_derivation: "episode i: seed = split_seed(split_seed(master, [104]), [4, i]); \
                          omega_true ~ U(0, omega_max) from stream(split_seed(master, [104]), [3, i])",
        episodes: &evaluation.plan,
        artifacts: &artifacts.checksums,
        outputs: written,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let path = dir.join("manifest.json");
    std::fs::write(&path, text).map_err(|e| BenchError::io(&path, e))?;
    paths.push(path);
    Ok(paths)
}

/// Artifact checksums recorded in a manifest file, if it is one.
pub fn manifest_checksums(text: &str) -> Option<BTreeMap<String, String>> {
    let value: serde_json::Value = serde_json::from_str(text).ok()?;
    serde_json::from_value(value.get("artifacts")?.clone()).ok()
}
