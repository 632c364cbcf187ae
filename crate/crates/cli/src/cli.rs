//! Command-line parsing. Every configuration key doubles as a `--key` flag.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::commands::{ablate_command, export_command, gradcheck_command, run_command};
use crate::config::{ExperimentConfig, RawConfig, KEYS};
use crate::error::CliError;

fn with_keys(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("flat key = value configuration file"),
    );
    KEYS.iter().fold(cmd, |cmd, (key, default, help)| {
        let help = if default.is_empty() {
            help.to_string()
        } else {
            format!("{help} [default: {default}]")
        };
        cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").help(help))
    })
}

pub fn command() -> Command {
    Command::new("freekd")
        .about("Free-direction knowledge distillation for graph neural networks")
        .subcommand_required(true)
        .subcommand(with_keys(Command::new("run").about("train every seed of one mode; writes per-run JSON and summary.csv")))
        .subcommand(with_keys(Command::new("ablate").about("run the seven ablation modes under shared seeds")))
        .subcommand(
            with_keys(Command::new("export-embeddings").about("write final-layer embeddings per model as CSV"))
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_parser(clap::value_parser!(u64))
                        .help("seed of the training run [default: first of seeds]"),
                )
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_parser(clap::value_parser!(PathBuf))
                        .action(ArgAction::Append)
                        .help("load a model from a checkpoint instead of training; repeatable"),
                ),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("compare every analytic gradient with central finite differences")
                .arg(Arg::new("corrupt").long("corrupt").value_name("CASE").hide(true)),
        )
}

fn experiment(m: &ArgMatches) -> Result<ExperimentConfig, CliError> {
    let mut raw = RawConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        raw.apply_file(path)?;
    }
    for (key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            raw.set(key, v)?;
        }
    }
    ExperimentConfig::from_raw(&raw)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match matches.subcommand() {
        Some(("run", m)) => experiment(m).and_then(|c| run_command(&c)).map(|p| println!("wrote {}", p.display())),
        Some(("ablate", m)) => experiment(m)
            .and_then(|c| ablate_command(&c))
            .map(|(p, _)| println!("wrote {}", p.display())),
        Some(("export-embeddings", m)) => experiment(m).and_then(|c| {
            let seed = m.get_one::<u64>("seed").copied().unwrap_or(c.seeds[0]);
            let checkpoints: Vec<PathBuf> = m.get_many::<PathBuf>("checkpoint").into_iter().flatten().cloned().collect();
            export_command(&c, seed, &checkpoints).map(|paths| {
                for p in paths {
                    println!("wrote {}", p.display());
                }
            })
        }),
        Some(("gradcheck", m)) => gradcheck_command(m.get_one::<String>("corrupt").map(String::as_str)).map(|_| ()),
        _ => unreachable!("subcommand is required"),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
