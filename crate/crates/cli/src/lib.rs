//! Command-line pipeline around `somnadhere-core`.
//!
//! Stages communicate through files in one shared output directory:
//! `synth` writes a cohort manifest plus raw signal files, `preprocess`
//! quality-controls the nights and extracts per-night features, `pretrain`
//! and `train` fit one model per cross-validation fold, `predict` scores
//! every night with the fold that never trained on it, and `eval`,
//! `interpret`, and `report` turn scores into metrics, analysis artifacts,
//! and figures. Every artifact-producing stage writes a run manifest with
//! the resolved seeds and a content hash per artifact; rerunning a stage on
//! identical inputs reproduces identical artifact bytes.
//!
//! Exit codes: 0 on success, 64 for usage errors, 65 for unreadable or
//! invalid configuration, 70 for runtime failures such as missing upstream
//! artifacts.

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

mod args;
mod config;
mod interpret_stage;
mod manifest;
mod report;
mod selftest;
mod stages;
mod svg;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_CONFIG: i32 = 65;
pub const EXIT_RUNTIME: i32 = 70;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for CliError {}

fn runtime(err: impl fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

/// Parse arguments (including the program name), run the subcommand, and
/// return the process exit code. The binary is a thin wrapper around this,
/// so tests can drive the full pipeline in process.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return code;
        }
    };
    match run(cli.cmd) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn run(cmd: args::Command) -> Result<(), CliError> {
    use args::Command;
    match cmd {
        Command::Selftest(t) => {
            configure_threads(t.threads);
            return selftest::run(t.seed.unwrap_or(7));
        }
        _ => {}
    }
    let stage_args = match &cmd {
        Command::Synth(a)
        | Command::Preprocess(a)
        | Command::Pretrain(a)
        | Command::Train(a)
        | Command::Predict(a)
        | Command::Eval(a)
        | Command::Interpret(a)
        | Command::Report(a) => a.clone(),
        Command::Selftest(_) => unreachable!(),
    };
    configure_threads(stage_args.threads);
    let run_config = config::load_config(&stage_args.config)?;
    let resolved = config::resolve(run_config, stage_args.preset, stage_args.seed)?;
    match cmd {
        Command::Synth(a) => stages::synth(&a, &resolved),
        Command::Preprocess(a) => stages::preprocess(&a, &resolved),
        Command::Pretrain(a) => stages::pretrain(&a, &resolved),
        Command::Train(a) => stages::train(&a, &resolved),
        Command::Predict(a) => stages::predict(&a, &resolved),
        Command::Eval(a) => stages::eval(&a, &resolved),
        Command::Interpret(a) => interpret_stage::interpret(&a, &resolved),
        Command::Report(a) => report::report(&a, &resolved),
        Command::Selftest(_) => unreachable!(),
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("SOMNADHERE_LOG", "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

/// Sizes the global worker pool. The pool can only be built once per
/// process; a later call asking for a different size keeps the existing
/// pool, which is safe because all parallel reductions are order-fixed.
fn configure_threads(threads: Option<usize>) {
    let Some(n) = threads else { return };
    if n == 0 {
        return;
    }
    let result = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    if result.is_err() && rayon::current_num_threads() != n {
        log::warn!(
            "thread pool already sized to {}, ignoring --threads {n}",
            rayon::current_num_threads()
        );
    }
}
