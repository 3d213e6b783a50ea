use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fersnet_cli::config::{parse_override_args, resolve};
use fersnet_cli::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_synth, cmd_train, cmd_viz_gates, with_threads, CliConfig, CliError,
};

/// Joint expression recognition and synthesis on toy or real face corpora.
///
/// Any configuration key can be set on the command line by its dotted name,
/// e.g. `--loss.lambda1 0.3` or `--arch.ladder 8,16,32,64`, or through an
/// environment variable such as `FERSNET_LOSS__LAMBDA1=0.3`. Precedence:
/// defaults < --config file < environment < flags.
#[derive(Parser)]
#[command(name = "fersnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted configuration overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a toy-face corpus (`--subjects`, `--counts`, `--seed` are shorthands for `toy.*`).
    GenData(Common),
    /// Train the full model and write model.ckpt, history.csv and config.echo.
    Train(Common),
    /// Report accuracy of a checkpoint on the evaluation split.
    Eval(Common),
    /// Write a grid of source images and their synthesis for every class.
    Synth(Common),
    /// Export gate heat maps for a few evaluation samples.
    VizGates(Common),
    /// Train and compare the four ablation variants over several seeds.
    Ablate(Common),
}

const TOY_SHORTHANDS: [&str; 4] = ["subjects", "counts", "seed", "face"];

fn build_config(common: &Common, gen_data: bool) -> Result<CliConfig, CliError> {
    let usage = |errs: Vec<String>| CliError::Usage(errs.join("\n"));
    let mut flags = parse_override_args(&common.overrides).map_err(usage)?;
    if gen_data {
        for (k, _) in flags.iter_mut() {
            if TOY_SHORTHANDS.contains(&k.split('.').next().unwrap_or_default()) {
                *k = format!("toy.{k}");
            }
        }
    }
    let mut cfg = resolve(common.config.as_deref(), std::env::vars(), &flags).map_err(usage)?;
    if cfg.run.threads == Some(1) {
        cfg.train.deterministic = true;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, cmd): (&Common, fn(&CliConfig, &mut dyn std::io::Write) -> Result<(), CliError>) = match &cli.command {
        Command::GenData(c) => (c, cmd_gen_data),
        Command::Train(c) => (c, cmd_train),
        Command::Eval(c) => (c, cmd_eval),
        Command::Synth(c) => (c, cmd_synth),
        Command::VizGates(c) => (c, cmd_viz_gates),
        Command::Ablate(c) => (c, cmd_ablate),
    };
    let cfg = build_config(common, matches!(cli.command, Command::GenData(_)))?;
    with_threads(cfg.run.threads, || cmd(&cfg, &mut std::io::stdout().lock()))?
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
