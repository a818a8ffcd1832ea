//! `poa`: run the services, request and verify certificates, play the
//! security games and measure sizes.

mod commands;
mod config;
mod demo;
mod exit;
mod run;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use poa_core::service::{Clock, SimClock, SystemClock};
use poa_core::sim::Profile;

use crate::commands::Format;
use crate::config::Config;
use crate::exit::{CliError, Exit, EXIT_CODES_HELP};
use crate::run::Service;

#[derive(Debug, Parser)]
#[command(name = "poa", version, about = "Certificates proving possession of an OIDC token signature", after_help = EXIT_CODES_HELP)]
struct Cli {
    /// TOML topology file. `POA_<KEY>` and `POA_<TABLE>_<FIELD>` override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Freeze the clock at this Unix time.
    #[arg(long, global = true)]
    now: Option<u64>,
    /// RNG seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// toy (512-bit, e=7, lambda=16) or default (2048-bit, e=65537, lambda=128).
    #[arg(long, global = true)]
    profile: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve one service until interrupted.
    Run {
        service: Service,
        /// Create this service's key if it is missing.
        #[arg(long)]
        generate: bool,
        /// Which witness (default: the first configured).
        #[arg(long)]
        id: Option<String>,
    },
    /// Create every missing key of the topology.
    Keygen,
    /// Obtain a certificate; the PEM chain goes to stdout.
    Request {
        #[arg(long)]
        sub: String,
        /// Token audience (default: the CA id).
        #[arg(long)]
        aud: Option<String>,
        /// Token lifetime in seconds.
        #[arg(long)]
        lifetime: Option<u64>,
        /// Write the requester's private key here.
        #[arg(long)]
        key_out: Option<PathBuf>,
    },
    /// Verify a certificate; the report goes to stdout.
    Verify {
        /// PEM file, or - for stdin.
        #[arg(long)]
        cert: PathBuf,
        /// Trust roots JSON (default: the config's trust_roots).
        #[arg(long)]
        trust: Option<PathBuf>,
        #[arg(long)]
        ledger_url: Option<String>,
        #[arg(long)]
        ct_url: Option<String>,
        /// Skip the CT inclusion lookup (the SCT is still checked).
        #[arg(long)]
        offline: bool,
    },
    /// Proof and certificate sizes, prove/verify/issuance timings.
    Bench {
        #[arg(long, default_value_t = 5)]
        iterations: usize,
        #[arg(long, value_enum, default_value_t = Format::Both)]
        format: Format,
    },
    /// Completeness, unforgeability and replay games in process.
    Games {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        json: bool,
    },
    /// Start every service as a child process, request and verify once.
    Demo {
        /// Keep keys, config, logs and the certificate here.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, default_value = "alice@example.com")]
        sub: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(Exit::Usage as u8),
            };
        }
    };
    // Services log their activity; one-shot commands only warnings.
    let default_level = if matches!(cli.command, Command::Run { .. }) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| default_level.into()),
        )
        .init();
    match dispatch(cli) {
        Ok(exit) => ExitCode::from(exit as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit as u8)
        }
    }
}

fn clock(now: Option<u64>) -> Arc<dyn Clock> {
    match now {
        Some(now) => Arc::new(SimClock::new(now)),
        None => Arc::new(SystemClock),
    }
}

fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(profile) = &cli.profile {
        config.profile = profile.clone();
    }
    config.validate()?;
    Ok(config)
}

fn profile_arg(cli: &Cli) -> Result<Profile, CliError> {
    let name = cli.profile.as_deref().unwrap_or("toy");
    Profile::by_name(name).ok_or_else(|| CliError::new(Exit::Usage, format!("unknown profile {name:?} (toy|default)")))
}

fn dispatch(cli: Cli) -> Result<Exit, CliError> {
    match &cli.command {
        Command::Run { service, generate, id } => {
            let config = load_config(&cli)?;
            run::run(
                &config,
                run::RunArgs {
                    service: *service,
                    generate: *generate,
                    witness_id: id.as_deref(),
                },
                clock(cli.now),
            )?;
            Ok(Exit::Ok)
        }
        Command::Keygen => {
            commands::keygen(&load_config(&cli)?)?;
            Ok(Exit::Ok)
        }
        Command::Request { sub, aud, lifetime, key_out } => {
            let config = load_config(&cli)?;
            let pem = commands::request(
                &config,
                &commands::RequestArgs {
                    sub,
                    aud: aud.as_deref(),
                    lifetime: *lifetime,
                    key_out: key_out.as_deref(),
                },
            )?;
            print!("{pem}");
            Ok(Exit::Ok)
        }
        Command::Verify {
            cert,
            trust,
            ledger_url,
            ct_url,
            offline,
        } => {
            let config = load_config(&cli)?;
            let report = commands::verify(
                &config,
                &commands::VerifyArgs {
                    cert,
                    trust: trust.as_deref(),
                    ledger_url: ledger_url.as_deref(),
                    ct_url: ct_url.as_deref(),
                    offline: *offline,
                },
            )?;
            println!("{}", report.to_json());
            Ok(if report.accepted() { Exit::Ok } else { Exit::Reject })
        }
        Command::Bench { iterations, format } => {
            let out = commands::bench(profile_arg(&cli)?, cli.seed.unwrap_or(1), *iterations, *format)?;
            println!("{out}");
            Ok(Exit::Ok)
        }
        Command::Games { trials, json } => {
            let lines = commands::games(profile_arg(&cli)?, cli.seed.unwrap_or(1), *trials)?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&lines).map_err(CliError::internal)?);
            } else {
                println!("{}", commands::games_text(&lines));
            }
            Ok(if lines.iter().all(|l| l.ok) { Exit::Ok } else { Exit::Breach })
        }
        Command::Demo { dir, sub } => {
            let outcome = demo::demo(&demo::DemoArgs {
                dir: dir.as_deref(),
                sub,
                profile: cli.profile.as_deref().unwrap_or("toy"),
                seed: cli.seed,
                now: cli.now,
            })?;
            print!("{}", outcome.pem);
            println!("{}", outcome.report.to_json());
            Ok(if outcome.report.accepted() { Exit::Ok } else { Exit::Reject })
        }
    }
}
