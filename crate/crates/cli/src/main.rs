mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::Cli;

/// Failure classes with their exit codes: 2 for usage and I/O, 1 for
/// computation.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(String),
    Compute(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::Io(_) => 2,
            Self::Compute(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Io(_) => "io",
            Self::Compute(_) => "computation",
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Io(m) | Self::Compute(m) => m,
        }
    }
}

impl From<fdrecon::Error> for Failure {
    fn from(e: fdrecon::Error) -> Self {
        use fdrecon::Error as E;
        match e {
            E::Io { .. } | E::Parse { .. } | E::NoCurves | E::DegenerateCurve(_) | E::OutsideDomain { .. } => {
                Self::Io(e.to_string())
            }
            _ => Self::Compute(e.to_string()),
        }
    }
}

fn report(f: &Failure, json: bool) {
    if json {
        let value = serde_json::json!({
            "error": { "code": f.code(), "kind": f.kind(), "message": f.message() }
        });
        eprintln!("{value}");
    } else {
        eprintln!("error: {}", f.message());
    }
}

fn main() -> ExitCode {
    let raw: Vec<_> = std::env::args_os().collect();
    let json = raw.iter().any(|a| a == "--error-json");
    let mut cmd = Cli::command();
    cmd.build();
    let args = match config::splice(&cmd, raw) {
        Ok(a) => a,
        Err(f) => {
            report(&f, json);
            return ExitCode::from(f.code());
        }
    };
    let matches = match cmd.clone().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json {
                report(&Failure::Usage(e.to_string().trim_end().to_string()), true);
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let comment = config::provenance(cmd.find_subcommand(name).expect("parsed subcommand"), sub_matches);

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            let f = Failure::Usage(format!("cannot start {} threads: {e}", cli.threads));
            report(&f, cli.error_json);
            return ExitCode::from(f.code());
        }
    };
    match pool.install(|| commands::run(&cli.command, &comment)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f, cli.error_json);
            ExitCode::from(f.code())
        }
    }
}
