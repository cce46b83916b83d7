use std::path::PathBuf;

use anyhow::Result;
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use freespace::config::RunConfig;

use crate::exit::{fail, USAGE};

pub const OUT_ENV: &str = "FREESPACE_OUT";
const DEFAULT_OUT: &str = "freespace-out";

/// `--learning-rate` for `train.learning_rate`, and so on.
fn flag_name(key: &str) -> String {
    key.split_once('.').map_or(key, |(_, k)| k).replace('_', "-")
}

fn config_args() -> Vec<Arg> {
    RunConfig::default()
        .entries()
        .into_iter()
        .map(|(key, default)| {
            let (section, _) = key.split_once('.').expect("qualified key");
            let mut help = format!("[{section}] default: {}", if default.is_empty() { "-" } else { &default });
            if key == "eval.seeds" {
                help.push_str("; a single number N means seeds 0..N");
            }
            let mut arg = Arg::new(key)
                .long(flag_name(key))
                .value_name("VALUE")
                .help(help)
                .global(true)
                .help_heading("Config overrides");
            if key == "run.output_dir" {
                arg = arg.alias("out");
            }
            arg
        })
        .collect()
}

fn checkpoint_arg(required_note: &str) -> Arg {
    Arg::new("checkpoint")
        .long("checkpoint")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .help(format!("Model checkpoint (default: <out>/model.ckpt){required_note}"))
}

fn dataset_arg() -> Arg {
    Arg::new("dataset")
        .long("dataset")
        .value_name("DIR")
        .value_parser(value_parser!(PathBuf))
        .help("Dataset directory (default: <out>/dataset)")
}

pub fn command() -> Command {
    Command::new("freespace")
        .version(clap::crate_version!())
        .about("Adversarially robust free-space segmentation experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .global(true)
                .help("Config file; flags override its values"),
        )
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("SECTION.KEY=VALUE")
                .action(ArgAction::Append)
                .global(true)
                .help("Override any config key"),
        )
        .args(config_args())
        .subcommand(Command::new("config").about("Print the resolved configuration"))
        .subcommand(Command::new("synth").about("Generate the train/test dataset"))
        .subcommand(
            Command::new("annotate")
                .about("Label frames of a telemetry log")
                .arg(
                    Arg::new("log")
                        .value_name("LOG")
                        .value_parser(value_parser!(PathBuf))
                        .required_unless_present("scenario")
                        .help("Telemetry log to annotate"),
                )
                .arg(
                    Arg::new("scenario")
                        .long("scenario")
                        .value_name("NAME")
                        .conflicts_with("log")
                        .help("Annotate a simulated log: cruise, stop_and_go, near_obstacle, reverse, turning"),
                )
                .arg(
                    Arg::new("save-log")
                        .long("save-log")
                        .value_name("FILE")
                        .value_parser(value_parser!(PathBuf))
                        .requires("scenario")
                        .help("Also write the simulated log"),
                )
                .arg(
                    Arg::new("labels")
                        .long("labels")
                        .value_name("FILE")
                        .value_parser(value_parser!(PathBuf))
                        .help("Labels output (default: <out>/labels.txt)"),
                ),
        )
        .subcommand(
            Command::new("train")
                .about("Train one model")
                .arg(dataset_arg())
                .arg(checkpoint_arg(", written")),
        )
        .subcommand(
            Command::new("eval")
                .about("Clean and attacked mIoU of a checkpoint on the test split")
                .arg(dataset_arg())
                .arg(checkpoint_arg(""))
                .arg(
                    Arg::new("export-masks")
                        .long("export-masks")
                        .value_name("DIR")
                        .value_parser(value_parser!(PathBuf))
                        .help("Write predicted clean-image masks as PGM"),
                ),
        )
        .subcommand(
            Command::new("attack")
                .about("Write PGD-attacked copies of the test split")
                .arg(dataset_arg())
                .arg(checkpoint_arg(""))
                .arg(
                    Arg::new("into")
                        .long("into")
                        .value_name("DIR")
                        .value_parser(value_parser!(PathBuf))
                        .help("Output dataset directory (default: <out>/adversarial)"),
                ),
        )
        .subcommand(
            Command::new("ablation")
                .about("Four-row ablation matrix over eval.seeds")
                .arg(dataset_arg()),
        )
        .subcommand(
            Command::new("sweep-lambda")
                .about("Attacked mIoU of hidden-loss models over eval.lambdas")
                .arg(dataset_arg()),
        )
        .subcommand(
            Command::new("sweep-epsilon")
                .about("Attacked mIoU of one checkpoint over eval.epsilons")
                .arg(dataset_arg())
                .arg(checkpoint_arg("")),
        )
}

/// Defaults, then the config file, then `--set`, then per-key flags.
pub fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| fail(crate::exit::PATH, format!("cannot read config {}: {e}", path.display())))?;
        cfg.merge(&text)
            .map_err(|e| fail(USAGE, format!("{}: {e}", path.display())))?;
    }
    if let Some(sets) = m.get_many::<String>("set") {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| fail(USAGE, format!("--set expects SECTION.KEY=VALUE, got {s:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| fail(USAGE, e.to_string()))?;
        }
    }
    for (key, _) in RunConfig::default().entries() {
        if let Some(value) = m.get_one::<String>(key) {
            if key == "eval.seeds" && !value.contains(',') {
                if let Ok(n) = value.trim().parse::<u64>() {
                    cfg.seeds = (0..n).collect();
                    continue;
                }
            }
            cfg.set(key, value).map_err(|e| fail(USAGE, e.to_string()))?;
        }
    }
    cfg.validate().map_err(|e| fail(USAGE, e.to_string()))?;
    Ok(cfg)
}

pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}
