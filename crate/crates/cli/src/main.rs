//! `e2v`: simulate event data, cache teacher outputs, train, reconstruct and
//! evaluate. Exit codes: 0 ok, 1 usage or configuration, 2 data or I/O,
//! 3 numeric failure.

mod commands;
mod config;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use config::{keys_for, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

pub const COMMANDS: [(&str, &str); 7] = [
    ("simulate", "render random scenes and simulate their events"),
    ("teacher", "precompute the teacher cache of a dataset (resumable)"),
    ("train", "train a model on a dataset with a complete teacher cache"),
    ("reconstruct", "reconstruct frames from an event file"),
    ("evaluate", "score a checkpoint with the standard between-frame protocol"),
    ("robustness", "score a checkpoint along a sparsity, rate or irregularity sweep"),
    ("ablate", "train and score a grid of configurations over several seeds"),
];

fn cli() -> Command {
    let mut root = Command::new("e2v")
        .about("Event-to-video reconstruction with semantic guidance")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value file; flags override it"),
        );
        for k in keys_for(name) {
            let mut arg = Arg::new(k.name)
                .long(k.name.replace('_', "-"))
                .value_name("V")
                .num_args(k.arity)
                .action(ArgAction::Set)
                .help(format!("{} [default: {}]", k.help, if k.default.is_empty() { "none" } else { k.default }));
            if k.arity > 1 {
                arg = arg.value_names(["LO", "HI"]);
            }
            sub = sub.arg(arg);
        }
        root = root.subcommand(sub);
    }
    root
}

/// Keys given on the command line, multi-value flags joined with `,`.
fn flag_values(command: &str, m: &ArgMatches) -> Vec<(String, String)> {
    keys_for(command)
        .filter(|k| m.value_source(k.name) == Some(ValueSource::CommandLine))
        .map(|k| {
            let vals: Vec<&String> = m.get_many::<String>(k.name).into_iter().flatten().collect();
            let joined = vals.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(",");
            (k.name.to_string(), joined)
        })
        .collect()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use e2v_core::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidArgument(_) => 1,
                Error::Io { .. } | Error::Format { .. } | Error::Data(_) => 2,
                Error::Numeric(_) => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, sub) = matches.subcommand().expect("subcommand is required");
    let flags = flag_values(command, sub);
    let file = sub.get_one::<PathBuf>("config").map(PathBuf::as_path);
    let result = RunConfig::resolve(command, file, &flags, std::env::var("E2V_SEED").ok()).and_then(|cfg| commands::run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
