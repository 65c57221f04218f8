//! Shared command-line options and the key=value config file they can be
//! loaded from. Flags given on the command line win over the file.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use mamba_core::{SamplingStrategy, Scope, UpdatePolicy};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyArg {
    Random,
    Score,
    Freq,
}

impl From<StrategyArg> for SamplingStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Random => SamplingStrategy::Random,
            StrategyArg::Score => SamplingStrategy::ScoreRanking,
            StrategyArg::Freq => SamplingStrategy::FrequencyGuided,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateArg {
    Feature,
    Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScopeArg {
    Video,
    Class,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Video => Scope::VideoWise,
            ScopeArg::Class => Scope::ClassWise,
        }
    }
}

/// Options every subcommand accepts. `None` means "not given".
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SharedArgs {
    /// Key=value file with defaults for any of these options.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Feature dimension.
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// Attention heads.
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    /// Memory bank capacity.
    #[arg(long, global = true)]
    pub n_mem: Option<usize>,
    /// Key-set size.
    #[arg(long, global = true)]
    pub n_key: Option<usize>,
    #[arg(long, global = true)]
    pub strategy: Option<StrategyArg>,
    #[arg(long, global = true)]
    pub update: Option<UpdateArg>,
    #[arg(long, global = true)]
    pub scope: Option<ScopeArg>,
    /// Pixel-level enhancement depth.
    #[arg(long, global = true)]
    pub n_pix: Option<usize>,
    /// Instance-level enhancement depth.
    #[arg(long, global = true)]
    pub n_ins: Option<usize>,
    #[arg(long, global = true)]
    pub frames: Option<usize>,
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    /// Comma-separated sweep values (N_m or N_k depending on the command).
    #[arg(long, global = true, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON-lines frame stream to read instead of generating one.
    #[arg(long, global = true)]
    pub stream: Option<PathBuf>,
    /// Seeded trials for statistical experiments.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Queries per timed step.
    #[arg(long, global = true)]
    pub queries: Option<usize>,
    /// Memory budget for concatenated key sets, in MiB.
    #[arg(long, global = true)]
    pub memory_budget_mb: Option<u64>,
}

impl SharedArgs {
    /// Fills every option not given here from `file`.
    pub fn or(self, file: SharedArgs) -> SharedArgs {
        SharedArgs {
            config: self.config,
            seed: self.seed.or(file.seed),
            dim: self.dim.or(file.dim),
            heads: self.heads.or(file.heads),
            n_mem: self.n_mem.or(file.n_mem),
            n_key: self.n_key.or(file.n_key),
            strategy: self.strategy.or(file.strategy),
            update: self.update.or(file.update),
            scope: self.scope.or(file.scope),
            n_pix: self.n_pix.or(file.n_pix),
            n_ins: self.n_ins.or(file.n_ins),
            frames: self.frames.or(file.frames),
            reps: self.reps.or(file.reps),
            grid: self.grid.or(file.grid),
            out: self.out.or(file.out),
            stream: self.stream.or(file.stream),
            trials: self.trials.or(file.trials),
            queries: self.queries.or(file.queries),
            memory_budget_mb: self.memory_budget_mb.or(file.memory_budget_mb),
        }
    }

    /// Merges in the config file named by `--config`, if any.
    pub fn resolve(self) -> Result<SharedArgs, CliError> {
        match self.config.clone() {
            Some(path) => {
                let file = load_config(&path)?;
                Ok(self.or(file))
            }
            None => Ok(self),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn strategy(&self) -> SamplingStrategy {
        self.strategy.map(Into::into).unwrap_or(SamplingStrategy::Random)
    }

    /// Feature-wise eviction reuses the sampling strategy.
    pub fn update_policy(&self) -> UpdatePolicy {
        match self.update.unwrap_or(UpdateArg::Feature) {
            UpdateArg::Feature => UpdatePolicy::FeatureWise(self.strategy()),
            UpdateArg::Frame => UpdatePolicy::FrameWise,
        }
    }

    pub fn scope(&self) -> Scope {
        self.scope.map(Into::into).unwrap_or(Scope::VideoWise)
    }
}

/// Parses a config file. Keys are option names; `-` and `_` are interchangeable.
pub fn parse_config(text: &str) -> Result<SharedArgs, CliError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        CliError::Config {
            line,
            message: e.message().to_string(),
        }
    })?;
    let normalized: toml::Table = table.into_iter().map(|(k, v)| (k.replace('_', "-"), v)).collect();
    SharedArgs::deserialize(toml::Value::Table(normalized)).map_err(|e| CliError::Config {
        line: 0,
        message: e.message().to_string(),
    })
}

pub fn load_config(path: &Path) -> Result<SharedArgs, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&text)
}
