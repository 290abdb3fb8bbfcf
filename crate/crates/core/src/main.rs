use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ehrbench_core::cohort::{assign_groups, clip_window, GroupingConfig, LabeledStay};
use ehrbench_core::config::{documented_keys, extract_overrides, RunConfig};
use ehrbench_core::encoders::{
    encode_stay, write_manifest, EmbeddingManifest, EmbeddingModality, EncoderError, EncoderSpec, NativeEncoder,
};
use ehrbench_core::ingest::MasterDataset;
use ehrbench_core::lvlm::{MockScript, MockServer};
use ehrbench_core::pipeline::{Pipeline, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "ehrbench", version, about = "Multimodal EHR benchmark pipeline")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic source tables into paths.input_dir.
    Synth,
    /// Parse and link the source tables into the master dataset.
    Ingest,
    /// Apply cohort criteria and compute labels.
    Cohort,
    /// Split 80/20 and build structured features.
    Featurize,
    /// Run the selected encoders and write embedding manifests.
    Encode,
    /// Fit the fused logistic-regression model.
    Train,
    /// Score the test split and write eval_report.json.
    Evaluate,
    /// Query the vision-language endpoint on the test split.
    #[command(name = "lvlm-eval")]
    LvlmEval,
    /// Render reports/summary.md and CSV tables.
    Report,
    /// Run every stage in order.
    #[command(name = "run-all")]
    RunAll,
    /// Print a configuration with every key at its default.
    #[command(name = "config-template")]
    ConfigTemplate,
    /// Reference external encoder following the adapter protocol.
    Adapter(AdapterArgs),
    /// Serve a scripted chat-completions endpoint until interrupted.
    #[command(name = "mock-endpoint")]
    MockEndpoint {
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8089")]
        addr: String,
    },
}

#[derive(clap::Args)]
struct AdapterArgs {
    /// Master dataset directory.
    #[arg(long)]
    input: PathBuf,
    /// Manifest output directory.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    window_hours: f64,
    #[arg(long, default_value = "adapter")]
    name: String,
    /// timeseries, image or text.
    #[arg(long, default_value = "text")]
    modality: String,
    #[arg(long, default_value_t = 64)]
    dimension: usize,
    /// reference or hashed_tokens.
    #[arg(long, default_value = "reference")]
    encoder: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory image paths are relative to.
    #[arg(long)]
    image_root: Option<PathBuf>,
}

fn config_keys_help() -> String {
    let mut s = String::from("Configuration keys (override any with --<key>=<value>):\n");
    for (k, v) in documented_keys() {
        s.push_str(&format!("  --{k}  [default: {v}]\n"));
    }
    s
}

fn adapter(args: &AdapterArgs) -> Result<(), PipelineError> {
    let modality = EmbeddingModality::parse(&args.modality)
        .ok_or_else(|| EncoderError::AdapterFailure(format!("unknown modality {:?}", args.modality)))?;
    let encoder: NativeEncoder = serde_json::from_value(serde_json::Value::String(args.encoder.clone()))
        .map_err(|_| EncoderError::AdapterFailure(format!("unknown encoder {:?}", args.encoder)))?;
    let mut spec = EncoderSpec::native(&args.name, modality, args.dimension, encoder);
    spec.seed = args.seed;
    let master = MasterDataset::read(&args.input)?;
    let grouping = GroupingConfig::default();
    let root = args.image_root.clone().unwrap_or_else(|| args.input.clone());
    let mut rows = Vec::new();
    for s in &master.stays {
        let stay = LabeledStay {
            stay: clip_window(s, args.window_hours),
            mortality: 0,
            los: 0,
            groups: assign_groups(&s.demographics, &grouping),
        };
        if let Some(v) = encode_stay(&spec, encoder, &stay, &root)? {
            rows.push((s.key.stay_id, v));
        }
    }
    let manifest = EmbeddingManifest::from_rows(modality, &args.name, args.dimension, rows)?;
    write_manifest(&manifest, &args.output)?;
    Ok(())
}

fn load_config(path: Option<&PathBuf>, overrides: &[(String, String)]) -> Result<RunConfig, PipelineError> {
    let path = path.ok_or_else(|| ehrbench_core::config::ConfigError::new("<file>", "--config is required"))?;
    Ok(RunConfig::load(path, overrides)?)
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), PipelineError> {
    let stage = match &cli.command {
        Command::ConfigTemplate => {
            println!("{}", RunConfig::template().to_json());
            return Ok(());
        }
        Command::Adapter(args) => return adapter(args),
        Command::MockEndpoint { script, addr } => {
            let script = match script {
                Some(p) => MockScript::load(p)?,
                None => MockScript::default(),
            };
            let server = MockServer::bind(addr, script).map_err(|e| PipelineError::Io {
                path: addr.into(),
                message: e.to_string(),
            })?;
            println!("{}", server.base_url());
            server.wait();
            return Ok(());
        }
        Command::Synth => Stage::Synth,
        Command::Ingest => Stage::Ingest,
        Command::Cohort => Stage::Cohort,
        Command::Featurize => Stage::Featurize,
        Command::Encode => Stage::Encode,
        Command::Train => Stage::Train,
        Command::Evaluate => Stage::Evaluate,
        Command::LvlmEval => Stage::LvlmEval,
        Command::Report => Stage::Report,
        Command::RunAll => {
            let cfg = load_config(cli.config.as_ref(), &overrides)?;
            let mut p = Pipeline::new(cfg)?;
            return p.run_all(|stage, status| println!("{stage}: {status}"));
        }
    };
    let cfg = load_config(cli.config.as_ref(), &overrides)?;
    let mut p = Pipeline::new(cfg)?;
    let status = p.run(stage)?;
    println!("{stage}: {status}");
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = extract_overrides(std::env::args().collect());
    let cli = parse_cli(args);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_cli(args: Vec<String>) -> Cli {
    use clap::{CommandFactory, FromArgMatches};
    let cmd = Cli::command().after_long_help(config_keys_help());
    let matches = cmd.get_matches_from(args);
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}
