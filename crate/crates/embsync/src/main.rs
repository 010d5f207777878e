use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use embsync::report::{report_document, summary};
use embsync::runner::{replay, run_scenario, RunOptions, TransportKind};
use embsync::scenario::server_config;
use embsync::ws::{serve, SYNC_PATH};
use embsync::ids::SeededIds;
use embsync_core::backend::builtin_registry;
use embsync_core::message::Payload;
use embsync_core::server::ServerCore;

#[derive(Parser)]
#[command(name = "embsync", version, about = "Run control-design episodes against a simulation backend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Ws,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the backend over WebSocket at /sync.
    Serve {
        #[arg(long, env = "EMBSYNC_PORT", default_value_t = 8765)]
        port: u16,
        #[arg(long, env = "EMBSYNC_HOST", default_value = "127.0.0.1")]
        host: String,
        /// JSON file of server and session settings.
        #[arg(long, env = "EMBSYNC_CONFIG")]
        config: Option<PathBuf>,
    },
    /// Run a scenario and write a report.
    Run {
        scenario: PathBuf,
        #[arg(long, value_enum, env = "EMBSYNC_TRANSPORT", default_value = "inproc")]
        transport: TransportArg,
        #[arg(long, env = "EMBSYNC_REPORT", default_value = "report.json")]
        report: PathBuf,
        #[arg(long, env = "EMBSYNC_SEED", default_value_t = 0)]
        seed: u64,
        /// Audit log path; defaults next to the report.
        #[arg(long, env = "EMBSYNC_AUDIT")]
        audit: Option<PathBuf>,
        /// Server to use with --transport ws; without it one is started locally.
        #[arg(long, env = "EMBSYNC_URL")]
        url: Option<String>,
    },
    /// Rebuild a report from an audit log.
    Replay {
        audit_log: PathBuf,
        /// Also write the report document here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<Payload, String> {
    let Some(p) = path else { return Ok(Payload::new()) };
    let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
}

fn cmd_serve(host: &str, port: u16, config: Option<&PathBuf>) -> ExitCode {
    let cfg = match load_config(config).map_err(|e| e.to_string()).and_then(|o| server_config(&o).map_err(|e| e.to_string())) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    rt.block_on(async {
        let listener = match tokio::net::TcpListener::bind((host, port)).await {
            Ok(l) => l,
            Err(e) => {
                eprintln!("error: cannot bind {host}:{port}: {e}");
                return ExitCode::from(3);
            }
        };
        let addr = listener.local_addr().map(|a| a.to_string()).unwrap_or_default();
        println!("listening on ws://{addr}{SYNC_PATH}");
        let seed = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        let core = ServerCore::new(cfg, builtin_registry(), Box::new(SeededIds::new(seed)));
        tokio::select! {
            _ = serve(listener, core) => {}
            _ = tokio::signal::ctrl_c() => println!("shutting down"),
        }
        ExitCode::SUCCESS
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EMBSYNC_LOG", "warn")).init();
    match Cli::parse().command {
        Command::Serve { port, host, config } => cmd_serve(&host, port, config.as_ref()),
        Command::Run {
            scenario,
            transport,
            report,
            seed,
            audit,
            url,
        } => {
            let opts = RunOptions {
                scenario,
                transport: match transport {
                    TransportArg::Inproc => TransportKind::Inproc,
                    TransportArg::Ws => TransportKind::Ws,
                },
                report: report.clone(),
                audit,
                url,
                seed,
            };
            match run_scenario(&opts) {
                Ok(out) => {
                    print!("{}", summary(&out.report));
                    if let Some(e) = &out.transport_error {
                        eprintln!("error: transport failure: {e}");
                    }
                    println!("report: {}", report.display());
                    ExitCode::from(out.exit_code() as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Replay { audit_log, report } => match replay(&audit_log) {
            Ok(body) => {
                print!("{}", summary(&body));
                if let Some(p) = report {
                    let doc = report_document(&audit_log.display().to_string(), body);
                    let text = serde_json::to_string_pretty(&doc).expect("json value serializes") + "\n";
                    if let Err(e) = std::fs::write(&p, text) {
                        eprintln!("error: {}: {e}", p.display());
                        return ExitCode::from(1);
                    }
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
