use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use flowctrl_cli::{dispatch, parse_config, CliError, Command, Overrides};

/// Train and evaluate a time-varying emotion control branch on a synthetic
/// flow-matching TTS analog.
#[derive(Parser, Debug)]
#[command(name = "flowctrl", version)]
struct Args {
    /// gen-data | pretrain | train-ctrlnet | synth | eval | scan-blocks | flowstep | sweep-scale | ablate
    command: String,

    /// JSON configuration file; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (also where inputs are looked up by default).
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long = "t-emo")]
    t_emo: Option<f64>,

    #[arg(long)]
    lambda: Option<f64>,

    #[arg(long)]
    nfe: Option<usize>,

    /// Comma-separated block indices, e.g. `0,1,3`.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,

    #[arg(long)]
    window: Option<usize>,

    /// Training steps of the command's training phase.
    #[arg(long)]
    steps: Option<usize>,

    /// Any config key, e.g. `--set pretrain.learning_rate=0.002`.
    #[arg(long = "set", value_parser = parse_key_value)]
    set: Vec<(String, String)>,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

fn run(args: Args) -> Result<(), CliError> {
    let command: Command = args.command.parse()?;
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
        t_emo: args.t_emo,
        lambda: args.lambda,
        nfe: args.nfe,
        blocks: args.blocks,
        window: args.window,
        steps: args.steps,
        set: args.set,
    };
    let resolved = parse_config(args.config.as_deref(), &overrides, command.name())?;
    for path in dispatch(command, &resolved)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
