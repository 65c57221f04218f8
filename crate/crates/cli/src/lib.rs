//! Ablation harness for `mamba-core`: each subcommand runs one experiment
//! and writes a CSV table.

pub mod config;
pub mod experiments;
pub mod report;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use clap::{Parser, Subcommand, ValueEnum};
use mamba_core::pipeline::{read_stream, write_results_csv, write_stream, TimingMode};
use mamba_core::{generate_stream, BankConfig, Pipeline, PipelineConfig, ScoreModel, StreamSpec};

use config::SharedArgs;
use experiments::*;
use report::Table;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mamba_core::Error),
    #[error("line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(mamba_core::Error::Io(_)) => "io",
            CliError::Core(mamba_core::Error::Parse { .. }) => "parse",
            CliError::Core(_) => "invalid",
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            _ => 1,
        }
    }

    /// `error: <kind>: <message>` on a single line.
    pub fn one_line(&self) -> String {
        let message = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error: {}: {}", self.kind(), message)
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Parser)]
#[command(name = "mamba", version, about = "Memory bank ablation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub shared: SharedArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreModelArg {
    Uniform,
    Frame,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhancement latency against bank size, sampled vs concatenated keys.
    RuntimeVsNm {
        #[arg(long)]
        parallel: bool,
    },
    /// Latency and quality proxy against key-set size.
    NkSweep {
        #[arg(long)]
        parallel: bool,
    },
    /// Frame entropy of key sets per sampling strategy.
    Diversity {
        /// Use uniform scores instead of frame-correlated ones.
        #[arg(long)]
        uniform_scores: bool,
        #[arg(long, default_value_t = 0.95)]
        rho: f64,
    },
    /// Frame coverage over time per update policy and scope.
    UpdatePolicy {
        /// Features written per frame.
        #[arg(long, default_value_t = 50)]
        per_frame: usize,
        #[arg(long, default_value_t = 2)]
        videos: usize,
    },
    /// Nearest-centroid accuracy and cosine before and after enhancement.
    QualityProxy {
        #[arg(long, default_value_t = 0.5)]
        query_sigma: f64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 4.0)]
        qk_gain: f64,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Runs the per-frame pipeline over a stream and writes per-stage rows.
    RunVideo {
        /// Shuffle frame order and skip the frame-order check.
        #[arg(long)]
        offline: bool,
        /// Write latencies as 0 so runs compare byte for byte.
        #[arg(long)]
        redact_timing: bool,
        /// Write the instance bank here as JSON lines before the final clear.
        #[arg(long)]
        snapshot: Option<std::path::PathBuf>,
        #[arg(long)]
        parallel: bool,
    },
    /// Writes a synthetic JSON-lines stream.
    GenStream {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 0.9)]
        rho: f64,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, value_enum, default_value_t = ScoreModelArg::Uniform)]
        score_model: ScoreModelArg,
        #[arg(long, default_value_t = 100)]
        pixel_per_frame: usize,
        #[arg(long, default_value_t = 75)]
        instance_per_frame: usize,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    execute(cli.command, cli.shared.resolve()?, stdout)
}

fn emit(table: &Table, shared: &SharedArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    match &shared.out {
        Some(path) => {
            let f = File::create(path).map_err(io_err(path))?;
            let mut w = BufWriter::new(f);
            table.write_csv(&mut w).map_err(io_err(path))?;
            w.flush().map_err(io_err(path))
        }
        None => table.write_csv(stdout).map_err(io_err(Path::new("<stdout>"))),
    }
}

fn stream_spec(shared: &SharedArgs) -> StreamSpec {
    StreamSpec {
        n_frames: shared.frames.unwrap_or(32),
        dim: shared.dim.unwrap_or(64),
        seed: shared.seed(),
        ..StreamSpec::default()
    }
}

fn runtime_options(shared: &SharedArgs, parallel: bool) -> RuntimeOptions {
    let d = RuntimeOptions::default();
    RuntimeOptions {
        n_m_grid: shared.grid.clone().unwrap_or(d.n_m_grid),
        n_k: shared.n_key.unwrap_or(d.n_k),
        dim: shared.dim.unwrap_or(d.dim),
        heads: shared.heads.unwrap_or(d.heads),
        n_queries: shared.queries.unwrap_or(d.n_queries),
        reps: shared.reps.unwrap_or(d.reps),
        strategy: shared.strategy(),
        memory_budget_bytes: shared.memory_budget_mb.map(|mb| mb << 20).unwrap_or(d.memory_budget_bytes),
        parallel,
        seed: shared.seed(),
        ..d
    }
}

pub fn execute(command: Command, shared: SharedArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::RuntimeVsNm { parallel } => {
            let rows = runtime_vs_nm(&runtime_options(&shared, parallel))?;
            emit(&runtime_table(&rows, parallel), &shared, stdout)
        }
        Command::NkSweep { parallel } => {
            let d = NkSweepOptions::default();
            let mut timing = runtime_options(&shared, parallel);
            timing.n_k = 0;
            let opts = NkSweepOptions {
                n_k_grid: shared.grid.clone().unwrap_or(d.n_k_grid),
                timing,
                n_m: shared.n_mem.unwrap_or(d.n_m),
                quality: QualityOptions {
                    seed: shared.seed(),
                    ..QualityOptions::default()
                },
            };
            emit(&nk_table(&nk_sweep(&opts)?), &shared, stdout)
        }
        Command::Diversity { uniform_scores, rho } => {
            let d = DiversityOptions::default();
            let opts = DiversityOptions {
                trials: shared.trials.unwrap_or(d.trials),
                n_frames: shared.frames.unwrap_or(d.n_frames),
                capacity: shared.n_mem.unwrap_or(d.capacity),
                n_k: shared.n_key.unwrap_or(d.n_k),
                dim: shared.dim.unwrap_or(d.dim),
                rho,
                score_model: if uniform_scores {
                    ScoreModel::UniformRandom
                } else {
                    d.score_model
                },
                seed: shared.seed(),
                ..d
            };
            emit(&diversity_table(&diversity(&opts)?), &shared, stdout)
        }
        Command::UpdatePolicy { per_frame, videos } => {
            let d = UpdatePolicyOptions::default();
            let policies = match shared.update {
                Some(_) => vec![shared.update_policy()],
                None => d.policies.clone(),
            };
            let scopes = match shared.scope {
                Some(_) => vec![shared.scope()],
                None => d.scopes.clone(),
            };
            let opts = UpdatePolicyOptions {
                n_m: shared.n_mem.unwrap_or(d.n_m),
                u: per_frame,
                frames_per_video: shared.frames.unwrap_or(d.frames_per_video),
                videos,
                strategy: shared.strategy(),
                policies,
                scopes,
                seed: shared.seed(),
            };
            emit(&update_table(&update_policy(&opts)?), &shared, stdout)
        }
        Command::QualityProxy {
            query_sigma,
            alpha,
            qk_gain,
            classes,
        } => {
            let d = QualityOptions::default();
            let opts = QualityOptions {
                dim: shared.dim.unwrap_or(d.dim),
                heads: shared.heads.unwrap_or(d.heads),
                n_classes: classes,
                query_sigma,
                alpha,
                qk_gain,
                n_k: shared.n_key.unwrap_or(d.n_k),
                n_queries: shared.queries.unwrap_or(d.n_queries),
                seed: shared.seed(),
                ..d
            };
            emit(&quality_table(&[quality_proxy(&opts)?]), &shared, stdout)
        }
        Command::RunVideo {
            offline,
            redact_timing,
            snapshot,
            parallel,
        } => run_video_cmd(&shared, offline, redact_timing, snapshot.as_deref(), parallel, stdout),
        Command::GenStream {
            classes,
            rho,
            sigma,
            score_model,
            pixel_per_frame,
            instance_per_frame,
        } => {
            let spec = StreamSpec {
                n_classes: classes,
                redundancy_rho: rho,
                noise_sigma: sigma,
                score_model: match score_model {
                    ScoreModelArg::Uniform => ScoreModel::UniformRandom,
                    ScoreModelArg::Frame => ScoreModel::FrameCorrelated { spread: 0.05 },
                },
                pixel_per_frame,
                instance_per_frame,
                ..stream_spec(&shared)
            };
            let frames = generate_stream(&spec)?;
            match &shared.out {
                Some(path) => {
                    let f = File::create(path).map_err(io_err(path))?;
                    let mut w = BufWriter::new(f);
                    write_stream(&frames, &mut w)?;
                    w.flush().map_err(io_err(path))
                }
                None => Ok(write_stream(&frames, stdout)?),
            }
        }
    }
}

fn run_video_cmd(
    shared: &SharedArgs,
    offline: bool,
    redact_timing: bool,
    snapshot: Option<&Path>,
    parallel: bool,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let frames = match &shared.stream {
        Some(path) => {
            let f = File::open(path).map_err(io_err(path))?;
            read_stream(BufReader::new(f))?
        }
        None => generate_stream(&stream_spec(shared))?,
    };
    let dim = frames
        .iter()
        .flat_map(|f| f.pixel_features.iter().chain(&f.instance_features))
        .map(|f| f.dim())
        .next()
        .ok_or_else(|| CliError::Usage("stream has no features".into()))?;
    let mut config = PipelineConfig::with_random_params(dim, dim, shared.heads.unwrap_or(16), shared.seed())?;
    config.n_pix = shared.n_pix.unwrap_or(config.n_pix);
    config.n_ins = shared.n_ins.unwrap_or(config.n_ins);
    config.offline_test = offline;
    config.parallel = parallel;
    let d = BankConfig::default();
    let bank = BankConfig::new(shared.n_mem.unwrap_or(d.capacity), shared.n_key.unwrap_or(d.n_k))
        .strategy(shared.strategy())
        .update_policy(shared.update_policy())
        .scope(shared.scope());
    config.pixel_bank = bank.clone();
    config.instance_bank = bank;
    let mut pipeline = Pipeline::new(config)?;
    let results = pipeline.process_video(&frames)?;
    if let Some(path) = snapshot {
        let f = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(f);
        pipeline.instance_bank().write_snapshot(&mut w)?;
        w.flush().map_err(io_err(path))?;
    }
    pipeline.end_video();
    let timing = if redact_timing {
        TimingMode::Redacted
    } else {
        TimingMode::Measured
    };
    let mut buf = Vec::new();
    write_results_csv(&results, timing, &mut buf)?;
    match &shared.out {
        Some(path) => std::fs::write(path, &buf).map_err(io_err(path)),
        None => stdout.write_all(&buf).map_err(io_err(Path::new("<stdout>"))),
    }
}
