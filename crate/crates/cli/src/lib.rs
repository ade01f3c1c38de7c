//! Command implementations behind the `ccvl` binary.
//!
//! Every command reads one JSON experiment config, writes its outputs under
//! `<out>/<experiment name>/`, and records a run manifest with the config
//! digest and a digest of every output file.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ccvl_core::baselines::fixed_ccvl_select;
use ccvl_core::data::{OfflineDataset, ValueMeta};
use ccvl_core::harness::{
    alpha_sweep, collect, coverage_experiment, evaluate, optimal_return, report_file_name,
    train_method, write_rows_csv, EvalReport, ExperimentConfig, Trained,
};
use ccvl_core::mdp::QTable;
use ccvl_core::SolveReport;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_SHAPE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver did not converge: {0}")]
    Convergence(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Convergence(_) => EXIT_CONVERGENCE,
            CliError::Shape(_) => EXIT_SHAPE,
            CliError::Io(_) => 1,
        }
    }
}

impl From<ccvl_core::Error> for CliError {
    fn from(e: ccvl_core::Error) -> Self {
        use ccvl_core::Error as E;
        match e {
            E::Invalid { .. } | E::DeltaDomain(_) | E::Json(_) => CliError::Config(e.to_string()),
            E::NoConvergence { .. } => CliError::Convergence(e.to_string()),
            E::Shape(_) => CliError::Shape(e.to_string()),
            E::Io(io) => CliError::Io(io),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Options shared by every command.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub format: Format,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix: f64,
    pub finished_unix: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    pub output_paths: Vec<OutputFile>,
    pub timestamps: Timestamps,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the config's canonical JSON (object keys sorted, no whitespace).
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let value = serde_json::to_value(config).map_err(|e| CliError::Config(e.to_string()))?;
    let canonical = serde_json::to_string(&value).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(sha256_hex(canonical.as_bytes()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Collects output files and writes the manifest once the command is done.
struct Run {
    command: &'static str,
    dir: PathBuf,
    started: f64,
    outputs: Vec<OutputFile>,
}

impl Run {
    fn start(command: &'static str, out: &Path, config: &ExperimentConfig) -> Result<Self> {
        let dir = out.join(&config.name);
        fs::create_dir_all(&dir)?;
        Ok(Self {
            command,
            dir,
            started: unix_now(),
            outputs: Vec::new(),
        })
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let mut buf = Vec::new();
        f(&mut buf)?;
        let mut file = BufWriter::new(File::create(&path)?);
        file.write_all(&buf)?;
        file.flush()?;
        self.outputs.push(OutputFile {
            path: name.to_string(),
            sha256: sha256_hex(&buf),
        });
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| CliError::Io(e.into()))?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn finish(self, config: &ExperimentConfig, seeds: Vec<u64>) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_hash: config_hash(config)?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            output_paths: self.outputs,
            timestamps: Timestamps {
                started_unix: self.started,
                finished_unix: unix_now(),
            },
        };
        let path = self.dir.join(format!("manifest_{}.json", self.command));
        let mut file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut file, &manifest).map_err(|e| CliError::Io(e.into()))?;
        writeln!(file)?;
        file.flush()?;
        Ok(manifest)
    }
}

fn core<T>(r: ccvl_core::Result<T>) -> Result<T> {
    r.map_err(CliError::from)
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None => f(),
        Some(0) => Err(CliError::Config("--jobs must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(f),
    }
}

fn write_table_csv(table: &QTable, w: &mut dyn Write) -> Result<()> {
    writeln!(w, "s,a,q")?;
    for s in 0..table.num_states {
        for a in 0..table.num_actions {
            writeln!(w, "{s},{a},{}", table.get(s, a))?;
        }
    }
    Ok(())
}

/// `collect`: writes `dataset.jsonl` gathered in the training environment.
/// `--seed` replaces the dataset seed.
pub fn cmd_collect(opts: &RunOptions) -> Result<RunManifest> {
    let mut config = load_config(&opts.config)?;
    if let Some(seed) = opts.seed {
        config.dataset.seed = seed;
    }
    let mdp = core(config.env_train.build())?;
    let data = core(collect(&mdp, &config.dataset))?;
    let mut run = Run::start("collect", &opts.out, &config)?;
    run.write_with("dataset.jsonl", |w| core(data.write_jsonl(w)))?;
    run.finish(&config, vec![config.dataset.seed])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: String,
    pub alpha: f64,
    pub reports: Vec<SolveReport>,
    /// Grid index with the smallest offline Bellman error, for the fixed-δ ablation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_ccvl_index: Option<usize>,
}

pub fn load_dataset(path: &Path, config: &ExperimentConfig) -> Result<OfflineDataset> {
    let mdp = core(config.env_train.build())?;
    let file = File::open(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    core(OfflineDataset::read_jsonl(
        BufReader::new(file),
        mdp.num_states(),
        mdp.num_actions(),
    ))
}

/// `train`: writes `model.json`, the tables as CSV, and `solve_report.json`.
pub fn cmd_train(opts: &RunOptions, dataset: &Path) -> Result<RunManifest> {
    let config = load_config(&opts.config)?;
    let data = load_dataset(dataset, &config)?;
    let meta = ValueMeta::of(&core(config.env_train.build())?);
    let (trained, reports) = with_jobs(opts.jobs, || {
        core(train_method(&config.solver, &data, meta, config.wants_upper()))
    })?;
    let mut run = Run::start("train", &opts.out, &config)?;
    run.write_json("model.json", &trained)?;
    let mut fixed_ccvl_index = None;
    match &trained {
        Trained::Confidence { lower, upper } => {
            fixed_ccvl_index = Some(fixed_ccvl_select(lower, &data));
            run.write_with("lower.csv", |w| core(lower.write_csv(w)))?;
            if let Some(upper) = upper {
                run.write_with("upper.csv", |w| core(upper.write_csv(w)))?;
            }
        }
        Trained::Table { table } => {
            run.write_with("table.csv", |w| write_table_csv(table, w))?;
        }
        Trained::Ensemble { ensemble } => {
            for (i, member) in ensemble.members.iter().enumerate() {
                run.write_with(&format!("member_{i}.csv"), |w| write_table_csv(member, w))?;
            }
        }
    }
    let summary = TrainSummary {
        method: config.solver.method.tag().to_string(),
        alpha: config.solver.alpha,
        reports,
        fixed_ccvl_index,
    };
    run.write_json("solve_report.json", &summary)?;
    run.finish(&config, vec![config.dataset.seed])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub alpha: f64,
    pub seed: u64,
    pub mean_return: f64,
    pub optimal_return: f64,
    pub normalized_return: f64,
    pub per_episode_returns: Vec<f64>,
    pub start_deltas: Vec<f64>,
    pub end_deltas: Vec<f64>,
}

impl EvalSummary {
    fn of(method: &str, alpha: f64, seed: u64, r: &EvalReport) -> Self {
        Self {
            method: method.to_string(),
            alpha,
            seed,
            mean_return: r.mean_return,
            optimal_return: r.optimal_return,
            normalized_return: r.normalized_return,
            per_episode_returns: r.per_episode_returns.clone(),
            start_deltas: r.episode_modes.iter().map(|m| m.start_delta).collect(),
            end_deltas: r.episode_modes.iter().map(|m| m.end_delta).collect(),
        }
    }
}

fn stem(name: &str) -> &str {
    name.trim_end_matches(".csv")
}

/// `eval`: evaluates `model.json` in the evaluation environment once per
/// evaluation seed (`--seed` evaluates a single seed).
pub fn cmd_eval(opts: &RunOptions, model: &Path) -> Result<RunManifest> {
    let mut config = load_config(&opts.config)?;
    if let Some(seed) = opts.seed {
        config.eval.seeds = vec![seed];
    }
    let text = fs::read_to_string(model)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", model.display())))?;
    let trained: Trained = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", model.display())))?;
    let env = core(config.env_eval.build())?;
    if trained.num_states() != env.num_states() || trained.num_actions() != env.num_actions() {
        return Err(CliError::Shape(format!(
            "model is {}x{} but the evaluation environment is {}x{}",
            trained.num_states(),
            trained.num_actions(),
            env.num_states(),
            env.num_actions()
        )));
    }
    let normalizer = core(optimal_return(&env, config.eval.horizon))?;
    let method = config.solver.method.tag();
    let alpha = config.solver.alpha;
    let mut run = Run::start("eval", &opts.out, &config)?;
    for &seed in &config.eval.seeds {
        let policy = ccvl_core::policy::AdaptivePolicyConfig {
            seed,
            ..config.policy.clone()
        };
        let mut report = core(evaluate(
            &trained,
            &env,
            &policy,
            config.eval.episodes,
            config.eval.horizon,
            seed,
        ))?;
        report.normalize(normalizer);
        let name = report_file_name(method, alpha, seed);
        match opts.format {
            Format::Csv => {
                run.write_with(&name, |w| core(report.write_episodes_csv(w)))?;
                run.write_with(&format!("{}_trace.csv", stem(&name)), |w| {
                    core(report.write_trace_csv(w))
                })?;
            }
            Format::Json => {
                run.write_json(&format!("{}_report.json", stem(&name)), &report)?;
            }
        }
        run.write_json(
            &format!("{}.json", stem(&name)),
            &EvalSummary::of(method, alpha, seed, &report),
        )?;
    }
    let seeds = config.eval.seeds.clone();
    run.finish(&config, seeds)
}

/// `coverage`: one row per δ with coverage, successful resamples and failures.
pub fn cmd_coverage(opts: &RunOptions) -> Result<RunManifest> {
    let mut config = load_config(&opts.config)?;
    let mut spec = config
        .coverage
        .clone()
        .ok_or_else(|| CliError::Config("missing coverage section".into()))?;
    if let Some(seed) = opts.seed {
        spec.seed = seed;
        config.coverage = Some(spec.clone());
    }
    let mdp = core(config.env_train.build())?;
    let rows = with_jobs(opts.jobs, || {
        core(coverage_experiment(
            &mdp,
            &config.dataset,
            &config.solver,
            spec.num_resamples,
            &spec.deltas,
            spec.seed,
        ))
    })?;
    let mut run = Run::start("coverage", &opts.out, &config)?;
    match opts.format {
        Format::Csv => run.write_with("coverage.csv", |w| core(write_rows_csv(&rows, w)))?,
        Format::Json => run.write_json("coverage.json", &rows)?,
    };
    run.finish(&config, vec![spec.seed])
}

/// `sweep`: one row per (method, α, seed), plus each cell's episode CSV.
pub fn cmd_sweep(opts: &RunOptions) -> Result<RunManifest> {
    let mut config = load_config(&opts.config)?;
    if let Some(seed) = opts.seed {
        config.eval.seeds = vec![seed];
    }
    let alphas = config
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("missing sweep section".into()))?
        .alphas
        .clone();
    let cells = with_jobs(opts.jobs, || core(alpha_sweep(&config, &alphas)))?;
    let mut run = Run::start("sweep", &opts.out, &config)?;
    let rows: Vec<_> = cells.iter().map(|c| c.row.clone()).collect();
    match opts.format {
        Format::Csv => {
            run.write_with("sweep.csv", |w| core(write_rows_csv(&rows, w)))?;
            for cell in &cells {
                let name = report_file_name(&cell.row.method, cell.row.alpha, cell.row.seed);
                run.write_with(&name, |w| core(cell.report.write_episodes_csv(w)))?;
            }
        }
        Format::Json => {
            run.write_json("sweep.json", &rows)?;
        }
    }
    let seeds = config.eval.seeds.clone();
    run.finish(&config, seeds)
}
