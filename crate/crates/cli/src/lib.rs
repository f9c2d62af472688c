//! Command-line driver for the sparse-prefill pipeline.
//!
//! Every subcommand reads tensors from container files or generates a planted
//! workload, runs part of the pipeline, and emits a [`report::RunReport`].
//! Artifacts and the report are staged in temporary files and only moved into
//! place once the whole command has succeeded.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparse_prefill::{DiscoveryMethod, PipelineConfig, DEFAULT_EPSILON};

mod commands;
pub mod report;

use report::{ConfigEcho, Format};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Pipeline(#[from] sparse_prefill::Error),

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("report error: {0}")]
    Report(String),
}

impl CliError {
    /// 1 usage, 2 validation (including format and plan errors), 3 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Pipeline(sparse_prefill::Error::Io(_)) | CliError::Io { .. } | CliError::Report(_) => 3,
            CliError::Pipeline(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sparse-prefill", version, about = "Block-sparse attention prefill: discovery, selection, attention, sweeps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the block score map.
    Discover(DiscoverArgs),
    /// Turn a score map into a compacted block plan.
    Select(SelectArgs),
    /// Run block-sparse (or dense) attention.
    Attend(AttendArgs),
    /// Sweep selection parameters and sequence lengths.
    Sweep(SweepArgs),
    /// Write a generated workload to container files.
    Gen(GenArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Tokens per block.
    #[arg(long, short = 'B', default_value_t = 128)]
    pub block_size: usize,
    /// Keep blocks scoring at least alpha times the row maximum.
    #[arg(long, default_value_t = 0.12)]
    pub alpha: f32,
    #[arg(long, default_value_t = 256)]
    pub sink_tokens: usize,
    #[arg(long, default_value_t = 512)]
    pub window_tokens: usize,
    /// Softmax temperature; defaults to 1/sqrt(head_dim).
    #[arg(long)]
    pub scale: Option<f32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    pub fn config(&self) -> PipelineConfig {
        PipelineConfig {
            block_size: self.block_size,
            alpha: self.alpha,
            sink_tokens: self.sink_tokens,
            window_tokens: self.window_tokens,
            scale: self.scale,
            epsilon: DEFAULT_EPSILON,
            rng_seed: self.seed,
        }
    }

    pub fn echo(&self, params: serde_json::Value) -> ConfigEcho {
        ConfigEcho {
            block_size: self.block_size,
            alpha: self.alpha,
            sink_tokens: self.sink_tokens,
            window_tokens: self.window_tokens,
            scale: self.scale,
            epsilon: DEFAULT_EPSILON,
            seed: self.seed,
            params,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PatternKind {
    Vertical,
    Slash,
    Block,
    Needle,
}

/// Planted-workload generator settings.
#[derive(Debug, Clone, Args)]
pub struct WorkloadArgs {
    #[arg(long, value_enum)]
    pub pattern: Option<PatternKind>,
    /// Block index (vertical), token offset (slash), `row,col` (block), or
    /// token index (needle).
    #[arg(long)]
    pub target: Option<String>,
    /// Scaled-logit boost of planted pairs.
    #[arg(long, default_value_t = 5.0)]
    pub strength: f32,
    /// Standard deviation of background entries.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f32,
    /// Diagonal-block boost as a fraction of strength.
    #[arg(long, default_value_t = 0.6)]
    pub local_bias: f32,
    /// Flip the planted query component on alternate tokens.
    #[arg(long)]
    pub alternating: bool,
    #[arg(long, short = 'L', default_value_t = 2048)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 64)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

/// Tensor files; when absent a workload is generated from `--pattern`.
#[derive(Debug, Clone, Args)]
pub struct TensorArgs {
    #[arg(long, value_name = "PATH")]
    pub q: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub k: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub v: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleKind {
    Max,
    Topk,
    Topp,
}

#[derive(Debug, Clone, Args)]
pub struct RuleArgs {
    #[arg(long, value_enum, default_value = "max")]
    pub rule: RuleKind,
    #[arg(long, default_value_t = 8)]
    pub topk: usize,
    #[arg(long, default_value_t = 0.9)]
    pub topp: f32,
}

fn parse_method(s: &str) -> Result<DiscoveryMethod, String> {
    s.parse().map_err(|e: sparse_prefill::Error| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub tensors: TensorArgs,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// approx, exact, or pool-both.
    #[arg(long, value_parser = parse_method, default_value = "approx")]
    pub method: DiscoveryMethod,
    /// Directory for `scores.fpt`.
    #[arg(long)]
    pub save_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub tensors: TensorArgs,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[command(flatten)]
    pub rule: RuleArgs,
    /// Score map written by `discover`; skips discovery.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Directory for `plan_indices.fpt`, `plan_counts.fpt`, `mask.fpt`.
    #[arg(long)]
    pub save_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AttendArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub tensors: TensorArgs,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[command(flatten)]
    pub rule: RuleArgs,
    /// Directory holding `plan_indices.fpt` and `plan_counts.fpt`; otherwise
    /// the plan is discovered and selected here.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Run only the dense reference.
    #[arg(long)]
    pub dense: bool,
    /// Also run the dense reference and report the error.
    #[arg(long)]
    pub check: bool,
    /// Store log-sum-exp in base e instead of base 2.
    #[arg(long)]
    pub natural_log: bool,
    /// Directory for `o.fpt` and `lse.fpt`.
    #[arg(long)]
    pub save_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// Max-threshold alphas; defaults to 0,0.05,0.12,0.5,1 when no rule list is given.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f32>,
    #[arg(long, value_delimiter = ',')]
    pub topk: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub topp: Vec<f32>,
    /// Sequence lengths; defaults to `--seq-len`.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "approx")]
    pub methods: Vec<DiscoveryMethod>,
    /// Seeds per cell, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub trials: u64,
    /// Evaluate rules on generated heavy-tail rows instead of a workload.
    #[arg(long)]
    pub heavy_tail: bool,
    /// Blocks per heavy-tail row.
    #[arg(long, default_value_t = 64)]
    pub blocks: usize,
    #[arg(long, default_value_t = 0.7)]
    pub head_mass: f32,
    /// Alpha the heavy tail is built against.
    #[arg(long, default_value_t = 0.2)]
    pub tail_alpha: f32,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// Write a heavy-tail score map (`scores.fpt`) instead of tensors.
    #[arg(long)]
    pub heavy_tail: bool,
    #[arg(long, default_value_t = 64)]
    pub blocks: usize,
    #[arg(long, default_value_t = 0.7)]
    pub head_mass: f32,
    #[arg(long, default_value_t = 0.2)]
    pub tail_alpha: f32,
    /// Output directory for the generated files.
    #[arg(long)]
    pub save_dir: PathBuf,
}

/// Files produced by a command, written only after it has fully succeeded.
#[derive(Default)]
pub(crate) struct Staged {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub(crate) fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    pub(crate) fn add_tensor(&mut self, dir: &Path, name: &str, tensor: &sparse_prefill::tensor::RawTensor) -> Result<(), CliError> {
        let mut bytes = Vec::new();
        sparse_prefill::tensor::write_container(&mut bytes, tensor)?;
        self.add(dir.join(name), bytes);
        Ok(())
    }

    /// Writes every file to a temporary sibling, then renames them all.
    fn commit(self) -> Result<(), CliError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CliError::Io { path, source }
        };
        let mut pending = Vec::with_capacity(self.files.len());
        for (path, bytes) in self.files {
            let parent = match path.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            };
            std::fs::create_dir_all(&parent).map_err(io_err(&parent))?;
            let mut tmp = tempfile::NamedTempFile::new_in(&parent).map_err(io_err(&parent))?;
            tmp.write_all(&bytes).map_err(io_err(&path))?;
            pending.push((tmp, path));
        }
        for (tmp, path) in pending {
            tmp.persist(&path).map_err(|e| CliError::Io { path, source: e.error })?;
        }
        Ok(())
    }
}

/// Parses `args`, runs the command, and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let (report, format, out, mut staged) = commands::dispatch(cli.command)?;
    let rendered = report.render(format)?;
    match out {
        Some(path) => staged.add(path, rendered),
        None => {
            staged.commit()?;
            io::stdout()
                .write_all(&rendered)
                .map_err(|source| CliError::Io { path: "<stdout>".into(), source })?;
            return Ok(());
        }
    }
    staged.commit()
}
