use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nvsense::model::SensorModel;
use nvsense::protocols::Variant;
use nvsense_bench::artifacts::{gen_data, train_bnn_artifact, train_policy_artifact, ArtifactStore, LoadedArtifacts};
use nvsense_bench::config::{ExperimentConfig, PolicyKind};
use nvsense_bench::diagnose::gaussian_asymptotics;
use nvsense_bench::evaluate::{evaluate, manifest_checksums, write_outputs, Layout};
use nvsense_bench::window::{terminal_window_mse, Averaging};
use nvsense_bench::{BenchError, Result};

/// Output root override; `--out` takes precedence.
const OUT_ENV: &str = "NVSENSE_OUT";

#[derive(Parser)]
#[command(name = "nvsense", version, about = "Two-stage adaptive NV magnetometry: training and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the stage-1 training dataset.
    GenData(Common),
    /// Train the stage-1 estimator (generates the dataset if absent).
    TrainBnn(Common),
    /// Train a policy.
    TrainRl {
        #[command(flatten)]
        common: Common,
        /// federated, oneM, multipleM, vanilla or phase-only.
        #[arg(long, default_value = "federated")]
        strategy: String,
    },
    /// Run the configured protocols and write runs.csv, curve.csv, figure.svg and manifest.json.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Train artifacts that are not on disk yet.
        #[arg(long)]
        train_missing: bool,
    },
    /// Like evaluate, with one CSV pair per protocol and a shared figure.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_missing: bool,
    },
    /// Fisher information and Gaussian-asymptotics check at a balanced design.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5.0)]
        omega: f64,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 500)]
        shots: usize,
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        #[arg(long, default_value_t = 2000)]
        particles: usize,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config, or a manifest from a previous evaluation.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (required for data generation, training and evaluation).
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (default: $NVSENSE_OUT, then the config, then ./nvsense-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use full-scale training and evaluation sizes.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    omega_max: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    protocols: Option<Vec<String>>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Window width in microseconds.
    #[arg(long)]
    window: Option<f64>,
    /// Time budget in microseconds.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    t2: Option<f64>,
    #[arg(long)]
    overhead: Option<f64>,
    #[arg(long)]
    skip_shots: Option<usize>,
    /// Average windows across all samples instead of per run first.
    #[arg(long)]
    pooled: bool,
    #[arg(long)]
    bnn_iterations: Option<usize>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    baseline_rounds: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

impl Common {
    fn resolve(&self, needs_seed: bool) -> Result<(ExperimentConfig, PathBuf)> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if self.paper_scale {
            let p = ExperimentConfig::paper_scale();
            c.episodes = p.episodes;
            c.stage1.classes = p.stage1.classes;
            c.stage1.dataset_columns = p.stage1.dataset_columns;
            c.stage1.iterations = p.stage1.iterations;
            c.rl.rounds = p.rl.rounds;
            c.rl.batch = p.rl.batch;
            c.rl.baseline_rounds = p.rl.baseline_rounds;
            c.rl.checkpoint_every = p.rl.checkpoint_every;
        }
        if let Some(s) = self.seed {
            c.seed = Some(s);
        } else if needs_seed {
            return Err(BenchError::Usage("--seed is required".into()));
        }
        if let Some(v) = self.omega_max {
            c.omega_max = v;
        }
        if let Some(list) = &self.protocols {
            c.protocols = list
                .iter()
                .map(|s| s.parse::<Variant>())
                .collect::<nvsense::Result<_>>()
                .map_err(|e| BenchError::Usage(e.to_string()))?;
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { c.$($field).+ = v; })*
            };
        }
        set!(
            episodes => episodes,
            window => window_us,
            budget => budget,
            skip_shots => curve.skip_shots,
            bnn_iterations => stage1.iterations,
            agents => rl.agents,
            rounds => rl.rounds,
            baseline_rounds => rl.baseline_rounds,
            batch => rl.batch,
            learning_rate => rl.learning_rate,
        );
        if self.t2.is_some() || self.overhead.is_some() {
            c.sensor = SensorModel::new(
                self.t2.unwrap_or(c.sensor.t2),
                self.overhead.unwrap_or(c.sensor.overhead),
                c.sensor.f0,
                c.sensor.f1,
            )?;
        }
        if self.pooled {
            c.curve.averaging = Averaging::Pooled;
        }
        c.validate()?;
        let root = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| c.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("nvsense-out"));
        Ok((c, root))
    }

    /// Fails if the config file is a manifest whose artifact checksums differ.
    fn verify_manifest(&self, store: &ArtifactStore) -> Result<()> {
        let Some(path) = &self.config else { return Ok(()) };
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        if let Some(sums) = manifest_checksums(&text) {
            for (name, sum) in sums {
                if store.checksum(&name)? != sum {
                    return Err(BenchError::ChecksumMismatch(store.path(&name)));
                }
            }
        }
        Ok(())
    }
}

fn artifact_store(root: &Path) -> ArtifactStore {
    ArtifactStore::new(root.join("artifacts"))
}

fn run_evaluation(common: &Common, train_missing: bool, layout: Layout, sub: &str) -> Result<()> {
    let (config, root) = common.resolve(true)?;
    let store = artifact_store(&root);
    common.verify_manifest(&store)?;
    let artifacts = LoadedArtifacts::resolve(&config, &store, train_missing)?;
    let evaluation = evaluate(&config, &artifacts)?;
    let dir = root.join(sub);
    for path in write_outputs(&dir, &config, &artifacts, &evaluation, layout)? {
        println!("wrote {}", path.display());
    }
    for (variant, result) in &evaluation.results {
        let mut terminal: Vec<f64> = nvsense_bench::evaluate::error_traces(&config, *variant, &result.runs)
            .iter()
            .filter_map(|t| terminal_window_mse(t, config.window_us))
            .collect();
        terminal.sort_by(f64::total_cmp);
        if let Some(median) = terminal.get(terminal.len() / 2) {
            println!("{variant}: median terminal-window MSE {median:.6e} over {} runs", terminal.len());
        }
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(common) => {
            let (config, root) = common.resolve(true)?;
            let store = artifact_store(&root);
            let ds = gen_data(&config, &store)?;
            println!(
                "wrote {} ({} x {})",
                store.path(nvsense_bench::artifacts::DATASET_FILE).display(),
                ds.rows(),
                ds.cols()
            );
        }
        Command::TrainBnn(common) => {
            let (config, root) = common.resolve(true)?;
            let store = artifact_store(&root);
            train_bnn_artifact(&config, &store)?;
            println!("wrote {}", store.path(nvsense_bench::artifacts::BNN_FILE).display());
        }
        Command::TrainRl { common, strategy } => {
            let kind = PolicyKind::parse(&strategy)?;
            let (config, root) = common.resolve(true)?;
            let store = artifact_store(&root);
            let table = train_policy_artifact(&config, &store, kind)?;
            println!(
                "wrote {} ({} policies)",
                store.path(&ArtifactStore::policy_file(kind)).display(),
                table.len()
            );
        }
        Command::Evaluate { common, train_missing } => run_evaluation(&common, train_missing, Layout::Combined, "evaluate")?,
        Command::Compare { common, train_missing } => {
            run_evaluation(&common, train_missing, Layout::PerProtocol, "compare")?
        }
        Command::Diagnose {
            common,
            omega,
            tau,
            shots,
            seeds,
            particles,
        } => {
            let (config, _) = common.resolve(false)?;
            let report = gaussian_asymptotics(&config.sensor, omega, tau, shots, seeds, particles)?;
            println!("fisher_information {:.10e}", report.fisher);
            println!("predicted_variance {:.6e}", report.predicted_variance);
            println!("mean_posterior_variance {:.6e}", report.mean_variance());
            println!("ratio {:.4}", report.ratio());
            if !report.ratio().is_finite() {
                return Err(BenchError::Core(nvsense::Error::DegenerateLikelihood(f64::NAN)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("nvsense: {line}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nvsense: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
