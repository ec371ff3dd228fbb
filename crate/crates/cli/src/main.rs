mod commands;
mod config;
mod output;

use std::time::Instant;

use clap::{Arg, ArgAction, ArgMatches, Command};
use erlang_lct::models::{parameter_keys, MODEL_IDS};

use commands::{Run, Subcommand, SUBCOMMANDS};
use config::{CliError, Settings};

const CONFIG_HELP: &str = "\
Every option can also be given in the --config file as 'key = value' (one per
line, '#' starts a comment); model parameters there are 'model.key = value'.
Command-line flags override the file. Unknown keys are rejected.
Numbers in CSV files carry 17 significant digits.
Exit status: 0 success, 1 run failure, 2 invalid invocation or configuration.";

fn model_help() -> String {
    let mut text = String::from("Model parameters (--set KEY=VALUE):");
    for id in MODEL_IDS {
        let keys = parameter_keys(id).map(|k| k.join(", ")).unwrap_or_default();
        text.push_str(&format!("\n  {id}: {keys}"));
    }
    text
}

fn subcommand(sub: &Subcommand) -> Command {
    let mut after = format!("{}\n\n", sub.outputs);
    if sub.model {
        after.push_str(&model_help());
        after.push_str("\n\n");
    }
    after.push_str(CONFIG_HELP);
    let mut cmd = Command::new(sub.name).about(sub.about).after_help(after).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("Read options from a key = value file"),
    );
    if sub.model {
        cmd = cmd.arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("Override a model parameter (repeatable)"),
        );
    }
    for o in sub.options {
        let default = if o.default.is_empty() { "none" } else { o.default };
        cmd = cmd.arg(
            Arg::new(o.key)
                .long(o.key)
                .value_name("VALUE")
                .help(format!("{} [default: {default}]", o.help)),
        );
    }
    cmd
}

fn cli() -> Command {
    SUBCOMMANDS.iter().fold(
        Command::new("erlang-lct")
            .version(output::version())
            .about("Distributed-delay equations through Erlang mixture kernels and the linear chain trick")
            .subcommand_required(true)
            .arg_required_else_help(true),
        |cmd, sub| cmd.subcommand(subcommand(sub)),
    )
}

fn execute(sub: &Subcommand, matches: &ArgMatches) -> Result<(), CliError> {
    let settings = Settings::resolve(sub.options, sub.model, matches)?;
    let mut run = Run::new(sub.name, settings);
    std::fs::create_dir_all(&run.out)
        .map_err(|e| CliError::Failed(format!("cannot create {}: {e}", run.out.display())))?;
    let start = Instant::now();
    let result = (sub.run)(&mut run);
    if let Err(CliError::Usage(_)) = result {
        return result;
    }
    run.manifest.wall_time = start.elapsed().as_secs_f64();
    run.manifest.status = match &result {
        Ok(()) if run.manifest.failures.is_empty() => "ok",
        Ok(()) => "partial",
        Err(_) => "failed",
    }
    .into();
    if let Err(e) = &result {
        run.manifest.failures.push(e.to_string());
    }
    run.manifest.write_atomic(&run.out)?;
    result
}

fn main() {
    let matches = cli().get_matches();
    let (name, sub_matches) = matches.subcommand().expect("a subcommand is required");
    let sub = SUBCOMMANDS.iter().find(|s| s.name == name).expect("subcommand is registered");
    if let Err(e) = execute(sub, sub_matches) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn option_keys_are_unique() {
        for sub in &SUBCOMMANDS {
            let mut keys: Vec<&str> = sub.options.iter().map(|o| o.key).collect();
            keys.sort_unstable();
            let n = keys.len();
            keys.dedup();
            assert_eq!(keys.len(), n, "duplicate option in {}", sub.name);
            assert!(!keys.contains(&"config") && !keys.contains(&"set"));
        }
    }
}
