use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use incontext_cli::config::registry;
use incontext_cli::{execute, Command};

/// Learn a localized concept from one masked image and transfer it.
#[derive(Parser)]
#[command(name = "incontext", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Learn a concept token and cross-attention deltas from a masked source image.
    Learn(RunArgs),
    /// Paint a learned concept into a masked region of a target image.
    Edit(RunArgs),
    /// Generate a new object instance carrying a learned concept.
    Generate(RunArgs),
    /// Find the region of a target image that corresponds to the source mask.
    MatchMask(RunArgs),
    /// Discover the shared concept region across several images.
    DiscoverMask(RunArgs),
    /// List every config key with its default.
    Keys,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file, or the manifest.json of an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides, e.g. --train.steps=200 --output.dir=out
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, args) = match cli.command {
        Cmd::Learn(a) => (Command::Learn, a),
        Cmd::Edit(a) => (Command::Edit, a),
        Cmd::Generate(a) => (Command::Generate, a),
        Cmd::MatchMask(a) => (Command::MatchMask, a),
        Cmd::DiscoverMask(a) => (Command::DiscoverMask, a),
        Cmd::Keys => {
            for k in registry() {
                println!("{:<28} {:<14} {}", k.name, k.default.as_deref().unwrap_or("-"), k.help);
            }
            return ExitCode::SUCCESS;
        }
    };
    match execute(command, args.config.as_deref(), &args.overrides) {
        Ok(report) => {
            println!("{}", report.output_dir.join("manifest.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {command}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
