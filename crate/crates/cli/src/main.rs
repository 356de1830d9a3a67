//! `swaplm`: vocabulary, embeddings, clustering, pre-training, probing and
//! FLOPs reports, each writing into its own run directory.

mod commands;
mod error;
mod keys;
mod manifest;

use std::process::ExitCode;

use swaplm_core::config::KvFile;

use crate::commands::Context;
use crate::error::{CliError, Result, EXIT_USAGE};
use crate::keys::{Settings, COMMANDS};

fn run(matches: &clap::ArgMatches) -> Result<()> {
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let spec = COMMANDS.iter().find(|s| s.name == name).expect("registered subcommand");
    let config = match sub.get_one::<String>("config") {
        Some(path) => {
            let path = std::path::Path::new(path);
            if !path.is_file() {
                return Err(CliError::MissingFile(path.to_path_buf()));
            }
            Some(KvFile::load(path)?)
        }
        None => None,
    };
    let ctx = Context {
        command: spec.name,
        settings: Settings::resolve(spec, sub, config.as_ref())?,
    };
    let threads: usize = if ctx.reference()? {
        1
    } else {
        ctx.settings.req("threads")?
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))?;
    match spec.name {
        "gen-corpus" => commands::gen_corpus(&ctx),
        "build-vocab" => commands::build_vocab_cmd(&ctx),
        "train-embeddings" => commands::train_embeddings(&ctx),
        "cluster" => commands::cluster(&ctx),
        "pretrain" => commands::pretrain(&ctx),
        "probe" => commands::probe(&ctx),
        "flops" => commands::flops_cmd(&ctx),
        other => unreachable!("unhandled subcommand {other}"),
    }
}

fn main() -> ExitCode {
    let matches = match keys::cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("swaplm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
