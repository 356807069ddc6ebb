//! Command-line pipeline: dataset generation, model training, fault
//! classification and estimation, detectability bounds, and report assembly.
//!
//! Configuration precedence is built-in defaults < config file < flags, and
//! every command writes the effective configuration it ran with next to its
//! outputs. The global seed drives all derived randomness, so two runs with
//! identical effective configs produce identical artifacts; reproducible mode
//! additionally omits wall-clock timings so the files are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::density::{
    estimate_contraction_rate, flatten, kl_gaussian, uniform_timepoints, w2_empirical,
    wasserstein_fdi_bound, BoundConstants,
};
use crate::dynamics::{
    default_initial_state, input_matrix_norm, simulate_ensemble, FaultProfile, SpacecraftParams,
    Trajectory,
};
use crate::ekf::{run_ekf, EkfConfig};
use crate::eval::{
    aggregate_l2, aggregate_rmse, classification_metrics, l2_error, rmse, EvalReport,
    ProfileMetrics,
};
use crate::faultgen::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, Scenario};
use crate::flowmatch::{load_model, save_model, train, FlowModel, TrainConfig};
use crate::inference::{classify_fault, estimate_fault, InferenceConfig};
use crate::{derive_seed, stream, Error, Result};

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numerical failures, 4 for I/O and file-format problems.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
    }
}

/// Full run configuration. A config file supplies any subset of these
/// fields; command-line flags override individual values on top.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Base seed. Every random stream in a run is derived from it.
    pub seed: u64,
    /// Worker-thread cap (None lets the runtime pick).
    pub threads: Option<usize>,
    /// Deterministic artifacts: wall-clock timings are omitted from outputs.
    pub reproducible: bool,
    pub params: SpacecraftParams,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub ekf: EkfConfig,
    pub bound: BoundRunConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 1,
            threads: None,
            reproducible: false,
            params: SpacecraftParams::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            ekf: EkfConfig::default(),
            bound: BoundRunConfig::default(),
        }
    }
}

/// Settings for the detectability-bound comparison: ensemble sizes, the
/// faulted profile, and the constants fed to the transport bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundRunConfig {
    /// Trajectories per ensemble (nominal and faulted).
    pub n: usize,
    /// Process and measurement noise std for both ensembles.
    pub sigma: f64,
    /// Std of the initial-state perturbation shared by both ensembles.
    pub init_std: f64,
    /// Number of uniformly spaced grid points kept when flattening.
    pub timepoints: usize,
    /// Actuator effectiveness of the faulted ensemble.
    pub eta: [f64; 4],
    /// Sensor effectiveness of the faulted ensemble.
    pub gamma: [f64; 7],
    /// Largest actuator deviation bound fed to the fault term.
    pub delta_bar: f64,
    pub eps_c: f64,
    pub eps_f: f64,
    /// Perturbation pairs used to estimate the contraction rate.
    pub n_pairs: usize,
    /// Initial attitude offset of each perturbation pair.
    pub perturbation: f64,
}

impl Default for BoundRunConfig {
    fn default() -> Self {
        BoundRunConfig {
            n: 64,
            sigma: 0.0015,
            init_std: 0.01,
            timepoints: 30,
            eta: [0.3, 0.9, 0.7, 1.0],
            gamma: [0.9, 0.8, 0.5, 0.6, 1.0, 0.7, 0.9],
            delta_bar: 0.7,
            eps_c: 0.1,
            eps_f: 0.1,
            n_pairs: 8,
            perturbation: 0.01,
        }
    }
}

impl BoundRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("bound.n must be at least 2".into()));
        }
        if self.sigma < 0.0 || self.init_std < 0.0 {
            return Err(Error::Config("bound noise levels must be nonnegative".into()));
        }
        if self.timepoints == 0 {
            return Err(Error::Config("bound.timepoints must be at least 1".into()));
        }
        if self.delta_bar < 0.0 {
            return Err(Error::Config("bound.delta_bar must be nonnegative".into()));
        }
        if self.eps_c <= 0.0 || self.eps_f <= 0.0 {
            return Err(Error::Config("bound.eps_c and eps_f must be positive".into()));
        }
        if self.n_pairs == 0 || self.perturbation <= 0.0 {
            return Err(Error::Config("bound contraction settings must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dfdi",
    version,
    about = "Probabilistic fault detection and identification for spacecraft attitude control"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Base seed for all derived randomness.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker-thread cap (falls back to DFDI_THREADS, then all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Omit wall-clock timings so identical runs emit identical bytes.
    #[arg(long, global = true)]
    pub reproducible: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a fault dataset and write it to disk.
    Generate(GenerateArgs),
    /// Train a flow-matching transition model on a dataset.
    Train(TrainArgs),
    /// Classify trajectories against the dataset's profile library.
    Classify(ClassifyArgs),
    /// Estimate fault magnitudes on trajectories with a trained model.
    Estimate(EstimateArgs),
    /// Compare the detectability bound against the empirical distance.
    Bound(BoundArgs),
    /// Assemble an evaluation report from earlier command outputs.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Fault scenario: type1 (actuator, with onsets) or type2 (persistent).
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Option<Scenario>,
    #[arg(long, value_name = "N")]
    pub n_train: Option<usize>,
    #[arg(long, value_name = "N")]
    pub n_val: Option<usize>,
    /// Output dataset path.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    pub dataset: PathBuf,
    /// Output checkpoint path (a .losses.csv sidecar is written next to it).
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "RATE")]
    pub lr: Option<f64>,
    #[arg(long, value_name = "N")]
    pub batch: Option<usize>,
}

/// Which dataset partition a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    All,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long, value_name = "PATH")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Dataset partition to classify.
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    /// Optional cap on the number of trajectories.
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long, value_name = "PATH")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Dataset partition to estimate on.
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    /// Optional cap on the number of trajectories.
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
    /// Also run the augmented-EKF baseline on the same measurements.
    #[arg(long)]
    pub with_ekf: bool,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Trajectories per ensemble.
    #[arg(long, value_name = "N")]
    pub n: Option<usize>,
    #[arg(long, value_name = "STD")]
    pub sigma: Option<f64>,
    #[arg(long, value_name = "N")]
    pub timepoints: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Classification output (from `classify`) to fold into the report.
    #[arg(long, value_name = "PATH")]
    pub classify: Option<PathBuf>,
    /// Estimation output (from `estimate`) to fold into the report.
    #[arg(long, value_name = "PATH")]
    pub estimate: Option<PathBuf>,
    /// Bound output (from `bound`) to fold into the report.
    #[arg(long, value_name = "PATH")]
    pub bound: Option<PathBuf>,
    /// Directory receiving report.json and report.csv.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    match s {
        "type1" => Ok(Scenario::Type1),
        "type2" => Ok(Scenario::Type2),
        _ => Err(format!("unknown scenario '{s}' (expected type1 or type2)")),
    }
}

/// Parses the process arguments and runs the selected command.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    dispatch(cli)
}

/// Resolves the effective config and executes one command.
pub fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.global)?;
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        // Ignore a second initialization (tests may dispatch repeatedly in
        // one process); the first pool wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Generate(a) => cmd_generate(&mut cfg, a),
        Command::Train(a) => cmd_train(&mut cfg, a),
        Command::Classify(a) => cmd_classify(&cfg, a),
        Command::Estimate(a) => cmd_estimate(&cfg, a),
        Command::Bound(a) => cmd_bound(&cfg, a),
        Command::Evaluate(a) => cmd_evaluate(&cfg, a),
    }
}

/// Applies precedence: defaults, then the config file, then global flags.
/// The DFDI_THREADS environment variable fills `threads` when neither the
/// flag nor the file set it.
pub fn resolve_config(global: &GlobalArgs) -> Result<AppConfig> {
    let mut cfg = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<AppConfig>(&text)
                .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?
        }
        None => AppConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(t) = global.threads {
        cfg.threads = Some(t);
    } else if cfg.threads.is_none() {
        if let Ok(v) = std::env::var("DFDI_THREADS") {
            let n: usize = v
                .parse()
                .map_err(|_| Error::Config(format!("DFDI_THREADS must be an integer, got '{v}'")))?;
            cfg.threads = Some(n);
        }
    }
    if global.reproducible {
        cfg.reproducible = true;
    }
    Ok(cfg)
}

/// Effective-config snapshot written alongside every command output.
#[derive(Debug, Serialize)]
struct Snapshot<'a> {
    command: &'a str,
    config: &'a AppConfig,
    outputs: Vec<String>,
}

/// `<output>.config.json` next to the command's primary output.
fn snapshot_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    primary.with_file_name(name)
}

fn write_snapshot(primary: &Path, command: &str, cfg: &AppConfig, outputs: &[&Path]) -> Result<()> {
    let snap = Snapshot {
        command,
        config: cfg,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&snap)?;
    fs::write(snapshot_path(primary), text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Wall time in seconds, or None in reproducible mode.
fn elapsed(cfg: &AppConfig, t0: Instant) -> Option<f64> {
    if cfg.reproducible {
        None
    } else {
        Some(t0.elapsed().as_secs_f64())
    }
}

fn cmd_generate(cfg: &mut AppConfig, args: &GenerateArgs) -> Result<()> {
    if let Some(s) = args.scenario {
        cfg.dataset.scenario = s;
    }
    if let Some(n) = args.n_train {
        cfg.dataset.n_train = n;
    }
    if let Some(n) = args.n_val {
        cfg.dataset.n_val = n;
    }
    cfg.dataset.base_seed = cfg.seed;
    let t0 = Instant::now();
    let ds = generate_dataset(&cfg.dataset, &cfg.params)?;
    save_dataset(&ds, &args.out)?;
    write_snapshot(&args.out, "generate", cfg, &[&args.out])?;
    println!(
        "generate: {} trajectories ({} train + {} val, {}, cond_dim {}) -> {}",
        ds.len(),
        cfg.dataset.n_train,
        cfg.dataset.n_val,
        ds.scenario,
        ds.cond_dim(),
        args.out.display()
    );
    if let Some(s) = elapsed(cfg, t0) {
        println!("generate: {s:.1} s");
    }
    Ok(())
}

fn cmd_train(cfg: &mut AppConfig, args: &TrainArgs) -> Result<()> {
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(l) = args.lr {
        cfg.train.lr = l;
    }
    if let Some(b) = args.batch {
        cfg.train.batch = b;
    }
    cfg.train.seed = cfg.seed;
    let t0 = Instant::now();
    let ds = load_dataset(&args.dataset)?;
    let mut model = FlowModel::new(ds.scenario, ds.params.horizon, ds.params.dt, cfg.seed);
    let history = train(&mut model, &ds, &cfg.train)?;
    save_model(&model, &args.out)?;
    let losses_path = snapshot_sibling(&args.out, ".losses.csv");
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for (i, &tr) in history.train_loss.iter().enumerate() {
        let val = history
            .val_loss
            .get(i)
            .map(|v| v.to_string())
            .unwrap_or_default();
        csv.push_str(&format!("{},{},{}\n", i + 1, tr, val));
    }
    fs::write(&losses_path, csv)?;
    write_snapshot(&args.out, "train", cfg, &[&args.out, &losses_path])?;
    let last = history.train_loss.last().copied().unwrap_or(f64::NAN);
    println!(
        "train: {} epochs on {} trajectories, final train loss {last:.4} -> {}",
        cfg.train.epochs,
        ds.len(),
        args.out.display()
    );
    if let Some(s) = elapsed(cfg, t0) {
        println!("train: {s:.1} s");
    }
    Ok(())
}

/// `<output><suffix>` next to the primary output.
fn snapshot_sibling(primary: &Path, suffix: &str) -> PathBuf {
    let mut name = primary.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    primary.with_file_name(name)
}

/// Trajectory indices selected by a partition choice and an optional cap.
fn select_indices(ds: &Dataset, split: Split, limit: Option<usize>) -> Vec<usize> {
    let range = match split {
        Split::Train => ds.train_range(),
        Split::Val => ds.val_range(),
        Split::All => 0..ds.len(),
    };
    match limit {
        Some(l) => range.take(l).collect(),
        None => range.collect(),
    }
}

/// Classification output: the deduplicated candidate library, one record per
/// trajectory, and the confusion matrix over library indices.
#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyArtifact {
    pub schema: String,
    pub scenario: Scenario,
    pub candidates: Vec<Vec<f64>>,
    pub results: Vec<ClassifyRecord>,
    /// Rows = true candidate, columns = predicted candidate.
    pub confusion: Vec<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyRecord {
    pub trajectory: usize,
    pub true_candidate: usize,
    pub predicted: usize,
    pub tie: bool,
    /// Score of the predicted candidate.
    pub nll: f64,
    /// Score of the true candidate.
    pub true_nll: f64,
}

pub const CLASSIFY_SCHEMA: &str = "dfdi-classify/1";
pub const ESTIMATE_SCHEMA: &str = "dfdi-estimate/1";
pub const BOUND_SCHEMA: &str = "dfdi-bound/1";

fn cmd_classify(cfg: &AppConfig, args: &ClassifyArgs) -> Result<()> {
    let t0 = Instant::now();
    let ds = load_dataset(&args.dataset)?;
    let model = load_model(&args.model)?;
    if model.scenario != ds.scenario {
        return Err(Error::Config(format!(
            "model scenario {} does not match dataset scenario {}",
            model.scenario, ds.scenario
        )));
    }
    // Candidate library: distinct conditioning vectors in first-seen order.
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    let mut truth: Vec<usize> = Vec::with_capacity(ds.len());
    for c in &ds.conditioning {
        let idx = match candidates.iter().position(|k| k == c) {
            Some(i) => i,
            None => {
                candidates.push(c.clone());
                candidates.len() - 1
            }
        };
        truth.push(idx);
    }
    let indices = select_indices(&ds, args.split, args.limit);
    if indices.is_empty() {
        return Err(Error::Config("selected partition is empty".into()));
    }
    let mut confusion = vec![vec![0u64; candidates.len()]; candidates.len()];
    let mut results = Vec::with_capacity(indices.len());
    for &i in &indices {
        let cls = classify_fault(&model, &ds.trajectories[i], &candidates)?;
        confusion[truth[i]][cls.argmin] += 1;
        results.push(ClassifyRecord {
            trajectory: i,
            true_candidate: truth[i],
            predicted: cls.argmin,
            tie: cls.tie,
            nll: cls.nlls[cls.argmin],
            true_nll: cls.nlls[truth[i]],
        });
    }
    let metrics = classification_metrics(&confusion)?;
    let artifact = ClassifyArtifact {
        schema: CLASSIFY_SCHEMA.into(),
        scenario: ds.scenario,
        candidates,
        results,
        confusion,
        wall_time_s: elapsed(cfg, t0),
    };
    write_json(&args.out, &artifact)?;
    write_snapshot(&args.out, "classify", cfg, &[&args.out])?;
    println!(
        "classify: {} trajectories, {} candidates, accuracy {:.1}% -> {}",
        artifact.results.len(),
        artifact.candidates.len(),
        100.0 * metrics.accuracy,
        args.out.display()
    );
    Ok(())
}

/// Estimation output: per-trajectory continuous estimates with the matching
/// ground truth, plus the grid geometry needed to rebuild fault tracks.
#[derive(Debug, Serialize, Deserialize)]
pub struct EstimateArtifact {
    pub schema: String,
    pub scenario: Scenario,
    pub horizon: f64,
    pub dt: f64,
    pub results: Vec<EstimateRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub trajectory: usize,
    pub true_eta: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_onset_times: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_gamma: Option<[f64; 7]>,
    pub eta: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub onset_times: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<[f64; 7]>,
    pub final_loss: f64,
    pub mean_abs_eta_error: f64,
    /// Trailing-window mean of the EKF baseline (when requested).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ekf_final: Option<Vec<f64>>,
}

fn cmd_estimate(cfg: &AppConfig, args: &EstimateArgs) -> Result<()> {
    let t0 = Instant::now();
    let ds = load_dataset(&args.dataset)?;
    let model = load_model(&args.model)?;
    if model.scenario != ds.scenario {
        return Err(Error::Config(format!(
            "model scenario {} does not match dataset scenario {}",
            model.scenario, ds.scenario
        )));
    }
    let indices = select_indices(&ds, args.split, args.limit);
    if indices.is_empty() {
        return Err(Error::Config("selected partition is empty".into()));
    }
    let mut results = Vec::with_capacity(indices.len());
    for &i in &indices {
        let traj = &ds.trajectories[i];
        let est = estimate_fault(&model, traj, &cfg.inference)?;
        let profile = &traj.profile;
        let mean_abs = profile
            .eta
            .iter()
            .zip(est.eta.iter())
            .map(|(t, e)| (t - e).abs())
            .sum::<f64>()
            / 4.0;
        let ekf_final = if args.with_ekf {
            let mut ek = cfg.ekf.clone();
            ek.scenario = ds.scenario;
            ek.params = ds.params.clone();
            ek.sigma_meas = ds.noise_stds[i];
            Some(run_ekf(traj, &ek)?.final_estimate)
        } else {
            None
        };
        results.push(EstimateRecord {
            trajectory: i,
            true_eta: profile.eta,
            true_onset_times: profile.onset_times,
            true_gamma: match ds.scenario {
                Scenario::Type1 => None,
                Scenario::Type2 => Some(profile.gamma),
            },
            eta: est.eta,
            onset_times: est.onset_times,
            gamma: est.gamma,
            final_loss: est.loss_trace.last().copied().unwrap_or(f64::NAN),
            mean_abs_eta_error: mean_abs,
            ekf_final,
        });
    }
    let mean_err =
        results.iter().map(|r| r.mean_abs_eta_error).sum::<f64>() / results.len() as f64;
    let artifact = EstimateArtifact {
        schema: ESTIMATE_SCHEMA.into(),
        scenario: ds.scenario,
        horizon: ds.params.horizon,
        dt: ds.params.dt,
        results,
        wall_time_s: elapsed(cfg, t0),
    };
    write_json(&args.out, &artifact)?;
    write_snapshot(&args.out, "estimate", cfg, &[&args.out])?;
    println!(
        "estimate: {} trajectories, mean |eta error| {:.4} -> {}",
        artifact.results.len(),
        mean_err,
        args.out.display()
    );
    Ok(())
}

/// Bound-comparison output: empirical distance, divergence, the bound with
/// the constants that produced it, and the strict-inequality verdict.
#[derive(Debug, Serialize, Deserialize)]
pub struct BoundArtifact {
    pub schema: String,
    pub n: usize,
    pub sigma: f64,
    pub timepoints: usize,
    pub eta: [f64; 4],
    pub gamma: [f64; 7],
    pub w2_empirical: f64,
    pub w2_bound: f64,
    pub w2_bound_squared: f64,
    pub kl: f64,
    /// Estimated contraction rate (median over perturbation pairs).
    pub alpha: f64,
    pub constants: BoundConstants,
    /// Whether the empirical distance lies strictly below the bound.
    pub satisfied: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

fn cmd_bound(cfg: &AppConfig, args: &BoundArgs) -> Result<()> {
    let mut b = cfg.bound.clone();
    if let Some(n) = args.n {
        b.n = n;
    }
    if let Some(s) = args.sigma {
        b.sigma = s;
    }
    if let Some(t) = args.timepoints {
        b.timepoints = t;
    }
    b.validate()?;
    let params = cfg.params.clone();
    let profile = FaultProfile::type2(b.eta, b.gamma);
    profile.validate(params.horizon)?;
    let t0 = Instant::now();
    let x0 = default_initial_state();
    let nominal = simulate_ensemble(
        &x0,
        b.init_std,
        &FaultProfile::nominal(),
        &params,
        b.sigma,
        b.n,
        derive_seed(cfg.seed, stream::ENSEMBLE, 0),
    )?;
    let faulted = simulate_ensemble(
        &x0,
        b.init_std,
        &profile,
        &params,
        b.sigma,
        b.n,
        derive_seed(cfg.seed, stream::ENSEMBLE, 1),
    )?;
    let u_bar = nominal
        .iter()
        .chain(faulted.iter())
        .map(|o| o.max_control_norm)
        .fold(0.0, f64::max);
    let nominal_truth: Vec<Trajectory> = nominal.into_iter().map(|o| o.truth).collect();
    let faulted_truth: Vec<Trajectory> = faulted.into_iter().map(|o| o.truth).collect();
    let timepoints = uniform_timepoints(params.n_steps() + 1, b.timepoints);
    let coords: Vec<usize> = (0..10).collect();
    let mu = flatten(&nominal_truth, &timepoints, &coords)?;
    let nu = flatten(&faulted_truth, &timepoints, &coords)?;
    let w2 = w2_empirical(&mu, &nu)?;
    let kl = kl_gaussian(&mu, &nu)?;
    let alpha = estimate_contraction_rate(&params, b.n_pairs, b.perturbation, cfg.seed)?;
    let g2 = b.sigma * 10f64.sqrt();
    let constants = BoundConstants {
        m_lo: 1.0,
        m_hi: 1.0,
        m_x: 0.0,
        m_xx: 0.0,
        g1: g2,
        g2,
        g_bar: input_matrix_norm(&params),
        u_bar,
        delta_bar: b.delta_bar,
        alpha: alpha.alpha,
        eps_c: b.eps_c,
        eps_f: b.eps_f,
    };
    // Both ensembles start from the same initial law, so the initial
    // transport distance is zero and only the fault term drives the bound.
    let bound = wasserstein_fdi_bound(&constants, 0.0, params.horizon)?;
    let artifact = BoundArtifact {
        schema: BOUND_SCHEMA.into(),
        n: b.n,
        sigma: b.sigma,
        timepoints: b.timepoints,
        eta: b.eta,
        gamma: b.gamma,
        w2_empirical: w2,
        w2_bound: bound.root,
        w2_bound_squared: bound.squared,
        kl,
        alpha: alpha.alpha,
        constants,
        satisfied: w2 < bound.root,
        wall_time_s: elapsed(cfg, t0),
    };
    write_json(&args.out, &artifact)?;
    write_snapshot(&args.out, "bound", cfg, &[&args.out])?;
    println!(
        "bound: W2 {:.4} {} bound {:.4} (KL {:.2}, alpha {:.3}) -> {}",
        artifact.w2_empirical,
        if artifact.satisfied { "<" } else { ">=" },
        artifact.w2_bound,
        artifact.kl,
        artifact.alpha,
        args.out.display()
    );
    Ok(())
}

/// Actuator effectiveness at time `t` under optional onsets (channels are
/// nominal before their onset).
fn eta_at(eta: &[f64; 4], onsets: &Option<[f64; 4]>, t: f64) -> [f64; 4] {
    match onsets {
        Some(o) => {
            let mut out = [1.0; 4];
            for i in 0..4 {
                if t >= o[i] {
                    out[i] = eta[i];
                }
            }
            out
        }
        None => *eta,
    }
}

/// Rebuilds true and estimated fault tracks on the simulation grid and
/// scores them. Actuator scenarios track the 4 effectiveness channels with
/// onset switching; persistent scenarios track all 11 constant channels.
fn estimate_tracks(
    art: &EstimateArtifact,
    rec: &EstimateRecord,
) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>, Vec<f64>)> {
    if art.dt <= 0.0 || art.horizon <= 0.0 {
        return Err(Error::Format("estimate artifact has a degenerate grid".into()));
    }
    let n_steps = (art.horizon / art.dt).round() as usize;
    let times: Vec<f64> = (0..=n_steps).map(|k| k as f64 * art.dt).collect();
    match art.scenario {
        Scenario::Type1 => {
            let mut truth = ndarray::Array2::zeros((times.len(), 4));
            let mut pred = ndarray::Array2::zeros((times.len(), 4));
            for (k, &t) in times.iter().enumerate() {
                let tv = eta_at(&rec.true_eta, &rec.true_onset_times, t);
                let pv = eta_at(&rec.eta, &rec.onset_times, t);
                for j in 0..4 {
                    truth[(k, j)] = tv[j];
                    pred[(k, j)] = pv[j];
                }
            }
            Ok((truth, pred, times))
        }
        Scenario::Type2 => {
            let tg = rec.true_gamma.ok_or_else(|| {
                Error::Format("persistent-fault record lacks true_gamma".into())
            })?;
            let pg = rec
                .gamma
                .ok_or_else(|| Error::Format("persistent-fault record lacks gamma".into()))?;
            let mut truth = ndarray::Array2::zeros((times.len(), 11));
            let mut pred = ndarray::Array2::zeros((times.len(), 11));
            for k in 0..times.len() {
                for j in 0..4 {
                    truth[(k, j)] = rec.true_eta[j];
                    pred[(k, j)] = rec.eta[j];
                }
                for j in 0..7 {
                    truth[(k, 4 + j)] = tg[j];
                    pred[(k, 4 + j)] = pg[j];
                }
            }
            Ok((truth, pred, times))
        }
    }
}

fn cmd_evaluate(cfg: &AppConfig, args: &EvaluateArgs) -> Result<()> {
    if args.classify.is_none() && args.estimate.is_none() && args.bound.is_none() {
        return Err(Error::Config(
            "evaluate needs at least one of --classify, --estimate, --bound".into(),
        ));
    }
    let mut report = EvalReport::new();
    if let Some(path) = &args.classify {
        let art: ClassifyArtifact = read_json(path)?;
        if art.schema != CLASSIFY_SCHEMA {
            return Err(Error::Format(format!(
                "{}: expected schema {CLASSIFY_SCHEMA}, found {}",
                path.display(),
                art.schema
            )));
        }
        report.classification = Some(classification_metrics(&art.confusion)?);
        report.confusion = Some(art.confusion);
        if let Some(w) = art.wall_time_s {
            report.wall_times_s.insert("classify".into(), w);
        }
    }
    if let Some(path) = &args.estimate {
        let art: EstimateArtifact = read_json(path)?;
        if art.schema != ESTIMATE_SCHEMA {
            return Err(Error::Format(format!(
                "{}: expected schema {ESTIMATE_SCHEMA}, found {}",
                path.display(),
                art.schema
            )));
        }
        let mut rmses = Vec::with_capacity(art.results.len());
        let mut l2s = Vec::with_capacity(art.results.len());
        for rec in &art.results {
            let (truth, pred, times) = estimate_tracks(&art, rec)?;
            let r = rmse(&truth, &pred, &times)?;
            let l = l2_error(&truth, &pred, &times)?;
            rmses.push(r);
            l2s.push(l);
            report.per_profile.push(ProfileMetrics {
                profile: format!("trajectory-{}", rec.trajectory),
                rmse: r,
                l2: l,
            });
        }
        report.overall_rmse = Some(aggregate_rmse(&rmses));
        report.overall_l2 = Some(aggregate_l2(&l2s));
        if let Some(w) = art.wall_time_s {
            report.wall_times_s.insert("estimate".into(), w);
        }
    }
    if let Some(path) = &args.bound {
        let art: BoundArtifact = read_json(path)?;
        if art.schema != BOUND_SCHEMA {
            return Err(Error::Format(format!(
                "{}: expected schema {BOUND_SCHEMA}, found {}",
                path.display(),
                art.schema
            )));
        }
        report.w2_empirical = Some(art.w2_empirical);
        report.w2_bound = Some(art.w2_bound);
        report.kl = Some(art.kl);
        if let Some(w) = art.wall_time_s {
            report.wall_times_s.insert("bound".into(), w);
        }
    }
    report.config_snapshot = Some(serde_json::to_value(cfg)?);
    let report = report.finalize();
    fs::create_dir_all(&args.out_dir)?;
    let json_path = args.out_dir.join("report.json");
    let csv_path = args.out_dir.join("report.csv");
    report.save(&json_path, &csv_path)?;
    let snap_primary = args.out_dir.join("report");
    write_snapshot(&snap_primary, "evaluate", cfg, &[&json_path, &csv_path])?;
    println!(
        "evaluate: report with {} profile rows -> {}",
        report.per_profile.len(),
        json_path.display()
    );
    Ok(())
}
