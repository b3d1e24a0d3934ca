mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use recdiff::Error;
use toml::Value;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "recdiff", version, about = "Recurrent diffusion enhancement of low-resolution facial videos")]
struct Cli {
    /// TOML run config; unset keys take the toy defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.learning_rate=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the procedural toy dataset and its manifest.
    SynthData(SynthArgs),
    /// Train (or resume) a model on the manifest's training split.
    Train(TrainArgs),
    /// Enhance a low-resolution clip or every clip of a manifest split.
    Enhance(EnhanceArgs),
    /// Score generated clips against references.
    Evaluate(EvaluateArgs),
    /// Comparison table from metric reports and a frame grid from clips.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n_subjects: Option<usize>,
    #[arg(long)]
    n_frames: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Model,
    Upsample,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    low_res_dir: Option<PathBuf>,
    #[arg(long)]
    identity: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Clip directory, or a directory of `<subject>-<expression>` clips.
    #[arg(long)]
    generated: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    identity: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Metric reports, one table row each.
    reports: Vec<PathBuf>,
    /// Clip directory for one grid row; repeat for more rows.
    #[arg(long = "grid-clip")]
    grid_clips: Vec<PathBuf>,
    #[arg(long)]
    grid_cols: Option<usize>,
}

fn path(p: &std::path::Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn int(v: u64) -> Value {
    Value::Integer(v as i64)
}

impl Cli {
    fn flags(&self) -> Vec<(String, Value)> {
        let mut f: Vec<(&str, Value)> = Vec::new();
        if let Some(s) = self.seed {
            f.push(("seed", int(s)));
        }
        if let Some(d) = &self.output_dir {
            f.push(("output_dir", path(d)));
        }
        match &self.command {
            Command::SynthData(a) => {
                f.extend(a.n_subjects.map(|n| ("data.n_subjects", int(n as u64))));
                f.extend(a.n_frames.map(|n| ("data.n_frames", int(n as u64))));
            }
            Command::Train(a) => {
                f.extend(a.manifest.as_deref().map(|p| ("data.manifest", path(p))));
                f.extend(a.max_steps.map(|n| ("train.max_steps", int(n))));
            }
            Command::Enhance(a) => {
                f.extend(a.checkpoint.as_deref().map(|p| ("infer.checkpoint", path(p))));
                f.extend(a.low_res_dir.as_deref().map(|p| ("infer.low_res_dir", path(p))));
                f.extend(a.identity.as_deref().map(|p| ("infer.identity_image", path(p))));
                f.extend(a.manifest.as_deref().map(|p| ("data.manifest", path(p))));
                f.extend(a.stride.map(|n| ("infer.stride", int(n as u64))));
                if let Some(m) = a.method {
                    let name = match m {
                        MethodArg::Model => "model",
                        MethodArg::Upsample => "upsample",
                    };
                    f.push(("infer.method", Value::String(name.into())));
                }
            }
            Command::Evaluate(a) => {
                f.extend(a.generated.as_deref().map(|p| ("metrics.generated_dir", path(p))));
                f.extend(a.reference.as_deref().map(|p| ("metrics.reference_dir", path(p))));
                f.extend(a.identity.as_deref().map(|p| ("metrics.identity_image", path(p))));
                f.extend(a.manifest.as_deref().map(|p| ("data.manifest", path(p))));
                f.extend(a.label.clone().map(|l| ("metrics.label", Value::String(l))));
            }
            Command::Report(a) => {
                if !a.reports.is_empty() {
                    f.push(("report.reports", Value::Array(a.reports.iter().map(|p| path(p)).collect())));
                }
                if !a.grid_clips.is_empty() {
                    f.push(("report.grid_clips", Value::Array(a.grid_clips.iter().map(|p| path(p)).collect())));
                }
                f.extend(a.grid_cols.map(|n| ("report.grid_cols", int(n as u64))));
            }
        }
        f.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn stage(&self) -> &'static str {
        match self.command {
            Command::SynthData(_) => "synth-data",
            Command::Train(_) => "train",
            Command::Enhance(_) => "enhance",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
        }
    }
}

/// 2 configuration or input problems, 3 file system and checkpoint problems,
/// 4 numerical failures.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config { .. } | Error::Index { .. } | Error::Shape(_) | Error::Input(_) | Error::Json(_) => 2,
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => 3,
        Error::Numerical(_) | Error::Tensor(_) => 4,
        Error::Frame { .. } => unreachable!("root() strips frame context"),
    }
}

fn run(cli: &Cli) -> Result<(), (&'static str, Error)> {
    let config = RunConfig::resolve_with(cli.config.as_deref(), &cli.overrides, cli.flags())
        .map_err(|e| ("config", e))?;
    let stage = cli.stage();
    config.echo().map_err(|e| (stage, e))?;
    let result = match &cli.command {
        Command::SynthData(_) => commands::synth_data(&config),
        Command::Train(a) => commands::train(&config, a.resume.as_deref()),
        Command::Enhance(_) => commands::enhance(&config),
        Command::Evaluate(_) => commands::evaluate_cmd(&config),
        Command::Report(_) => commands::report(&config),
    };
    result.map_err(|e| (stage, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            eprintln!("error: {stage}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
