//! Command-line front end: plan scripts, generate stories, run ablations and
//! inspect run directories.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "isostory",
    version,
    about = "Consistent multi-scene story generation with isolated attention"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunFlags {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `pipeline.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `pipeline.lambda`.
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f32>,
    /// Keep isolated self-attention weights of every step.
    #[arg(long)]
    pub dump_attn: bool,
    /// Output directory (overrides `output.directory`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a script (or ask an LLM endpoint) and write a validated plan.
    Plan {
        #[arg(long, conflicts_with = "llm")]
        script: Option<PathBuf>,
        /// Storyline sent to the configured LLM endpoint.
        #[arg(long)]
        llm: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Plan file to write; defaults to `plan.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the pipeline over every scene and write a run directory.
    Generate {
        /// Plan JSON or story script.
        plan: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run the five-row ablation grid and write the comparison table.
    Ablate {
        plan: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Summarize one character of one scene and write its visualizations.
    Inspect {
        run: PathBuf,
        #[arg(long)]
        scene: usize,
        /// Character name or id.
        #[arg(long)]
        character: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub(crate) fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return 2;
            }
            let _ = write!(stdout, "{e}");
            return 0;
        }
    };
    match commands::dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
