//! `vqtok`: train tokenizers, compress features, pretrain and fine-tune
//! slide models from the command line.

mod commands;
mod config;
mod error;
mod run;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};

use commands::{CommandSpec, COMMANDS};
use config::{flag_name, RunConfig, SEED_ENV};
use error::CliResult;

fn cli() -> Command {
    let mut cmd = Command::new("vqtok")
        .about("Vector-quantized compression of spatial feature tokens")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(format!(
            "Every subcommand takes --config FILE (key = value lines) and one flag per key.\n\
             Flags override the file; {SEED_ENV} overrides the file's seed but not --seed."
        ));
    for spec in &COMMANDS {
        let mut sub = Command::new(spec.name).about(spec.about).arg(
            Arg::new("config").long("config").value_name("FILE").value_parser(clap::value_parser!(PathBuf)).help("Key-value config file"),
        );
        for k in (spec.keys)() {
            let help = if k.default.is_empty() { k.help.to_string() } else { format!("{} [default: {}]", k.help, k.default) };
            sub = sub.arg(Arg::new(k.name).long(flag_name(k.name)).value_name("VALUE").help(help));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn flags(spec: &CommandSpec, m: &ArgMatches) -> Vec<(String, String)> {
    (spec.keys)()
        .into_iter()
        .filter(|k| m.value_source(k.name) == Some(ValueSource::CommandLine))
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect()
}

fn dispatch(name: &str, m: &ArgMatches) -> CliResult<()> {
    let spec = COMMANDS.iter().find(|c| c.name == name).expect("subcommand is registered");
    let cfg = RunConfig::resolve(
        spec.name,
        &(spec.keys)(),
        m.get_one::<PathBuf>("config").map(PathBuf::as_path),
        std::env::var(SEED_ENV).ok(),
        &flags(spec, m),
    )?;
    (spec.run)(&cfg)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match dispatch(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_tree_is_consistent() {
        cli().debug_assert();
        for spec in &COMMANDS {
            let keys = (spec.keys)();
            let mut names: Vec<&str> = keys.iter().map(|k| k.name).collect();
            names.sort();
            let n = names.len();
            names.dedup();
            assert_eq!(names.len(), n, "{} declares a key twice", spec.name);
            assert!(names.contains(&"run_dir") && names.contains(&"seed"), "{}", spec.name);
        }
    }
}
