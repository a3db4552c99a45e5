//! `xcorr` command-line front end.
//!
//! Logs go to standard error. Results are written to files, with short
//! summaries on standard output. Exit codes: 0 success, 1 runtime or I/O
//! failure, 2 invalid input.

mod args;
mod commands;

use std::path::Path;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use serde::{de::DeserializeOwned, Serialize};
use xcorr::Error;

use args::{Cli, Command};

/// Why a command failed, mapped to an exit code.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// The command ran but its check did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_validation() => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => e.fmt(f),
            Failure::Check(msg) => f.write_str(msg),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::Invalid(msg.into()))
}

fn version_text() -> String {
    format!(
        "{}\nformats:\n  volume        raw f32le + JSON header\n  drr image     {} (single file), 16-bit PGM + JSON sidecar, raw f32le + JSON sidecar\n  correspondence {}\n  manifest      version {}\n  checkpoint    XMATCH version {}",
        env!("CARGO_PKG_VERSION"),
        String::from_utf8_lossy(xcorr::image::DRR_MAGIC).trim_end_matches('\0'),
        String::from_utf8_lossy(xcorr::correspondence::MAGIC),
        xcorr::dataset::MANIFEST_VERSION,
        xcorr::matcher::CHECKPOINT_VERSION,
    )
}

/// Overlays the keys of a JSON object onto already-parsed arguments.
fn apply_config<T: Serialize + DeserializeOwned>(args: T, path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(args) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let json_err = |e| Error::Json {
        context: path.display().to_string(),
        source: e,
    };
    let overrides: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    let serde_json::Value::Object(overrides) = overrides else {
        return Err(invalid(format!("{}: config must be a JSON object", path.display())));
    };
    let mut merged = serde_json::to_value(args).expect("arguments serialize");
    let obj = merged.as_object_mut().expect("arguments are a struct");
    for (k, v) in overrides {
        obj.insert(k, v);
    }
    Ok(serde_json::from_value(merged).map_err(json_err)?)
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Check(format!("thread pool: {e}")))?;
    }
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::Phantom(a) => commands::phantom(apply_config(a, cfg)?),
        Command::Render(a) => commands::render(apply_config(a, cfg)?),
        Command::Corrgen(a) => commands::corrgen(apply_config(a, cfg)?),
        Command::Dataset(a) => commands::dataset(apply_config(a, cfg)?),
        Command::Train(a) => commands::train(apply_config(a, cfg)?),
        Command::Finetune(a) => commands::finetune(apply_config(a, cfg)?),
        Command::Eval(a) => commands::eval(apply_config(a, cfg)?),
        Command::Classify(a) => commands::classify(apply_config(a, cfg)?),
        Command::Gradcheck(a) => commands::gradcheck(apply_config(a, cfg)?),
    }
}

fn main() -> ExitCode {
    let version: &'static str = Box::leak(version_text().into_boxed_str());
    let matches = Cli::command().version(version).long_version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
