mod summary;

use std::fmt::Display;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use skydrop_core::sim::{load_and_plan, parse_log, run, Engine, LiveRunner, SimError};
use skydrop_core::world::{load_scenario, Scenario};

#[derive(Parser)]
#[command(name = "skydrop", version, about = "Plan and simulate multi-article UAV deliveries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Screen, pack and plan every aircraft; prints the plans as JSON.
    Plan(Input),
    /// Run the whole mission in virtual time; prints the report as JSON.
    Simulate {
        #[command(flatten)]
        input: Input,
        /// Where to write the event log.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run paced against the wall clock with the operator gateway attached.
    Serve {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Virtual seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        pace: f64,
    },
    /// Summarize an existing event log.
    Report {
        #[arg(long, visible_alias = "scenario")]
        log: PathBuf,
    },
}

#[derive(Args)]
struct Input {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Invalid(String),
    Infeasible(String),
    PortBusy(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 2,
            Failure::Infeasible(_) => 3,
            Failure::PortBusy(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Infeasible(m) | Failure::PortBusy(m) => m,
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Infeasible { .. } => Failure::Infeasible(e.to_string()),
            SimError::Scenario(e) => Failure::Invalid(e.to_string()),
        }
    }
}

fn invalid(context: impl Display, e: impl Display) -> Failure {
    Failure::Invalid(format!("{context}: {e}"))
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| invalid(path.display(), e))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| invalid(path.display(), e))
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn scenario(input: &Input) -> Result<Scenario, Failure> {
    let mut s = load_scenario(&read(&input.scenario)?).map_err(|e| invalid(input.scenario.display(), e))?;
    if let Some(seed) = input.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn plan(input: &Input) -> Result<(), Failure> {
    let s = scenario(input)?;
    let loadout = load_and_plan(&s)?;
    let plans: serde_json::Map<String, serde_json::Value> = loadout
        .crafts
        .iter()
        .map(|c| (c.aircraft.clone(), json!(c.plan.document(&s.params.planner))))
        .collect();
    let doc = json!({
        "plans": plans,
        "rejected": loadout.rejected,
        "unplaced": loadout.unplaced,
    });
    emit(&serde_json::to_string_pretty(&doc).expect("plan serializes"));
    Ok(())
}

fn simulate(input: &Input, out: Option<&Path>) -> Result<(), Failure> {
    let (log, report) = run(&scenario(input)?)?;
    if let Some(path) = out {
        write(path, &log.to_text())?;
    }
    emit(&report.to_json());
    Ok(())
}

fn serve(input: &Input, out: Option<&Path>, port: u16, pace: f64) -> Result<(), Failure> {
    if port < 1024 {
        return Err(Failure::Invalid(format!("port {port} is below 1024")));
    }
    if !(pace > 0.0 && pace.is_finite()) {
        return Err(Failure::Invalid(format!("pace must be positive, got {pace}")));
    }
    let engine = Engine::new(scenario(input)?)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| invalid("runtime", e))?;
    rt.block_on(async move {
        let listener = match tokio::net::TcpListener::bind(("127.0.0.1", port)).await {
            Ok(l) => l,
            Err(e) if e.kind() == ErrorKind::AddrInUse => {
                return Err(Failure::PortBusy(format!("port {port} is already in use")));
            }
            Err(e) => return Err(invalid(format!("port {port}"), e)),
        };
        eprintln!("gateway listening on http://127.0.0.1:{port}");
        let (runner, handle) = LiveRunner::new(engine, pace);
        let worker = thread::spawn(move || runner.run());
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(skydrop_opsvc::serve(listener, handle.clone(), async {
            let _ = stop_rx.await;
        }));

        let interrupt = tokio::signal::ctrl_c();
        tokio::pin!(interrupt);
        loop {
            tokio::select! {
                _ = &mut interrupt => {
                    eprintln!("interrupted, stopping");
                    handle.request_stop();
                    break;
                }
                _ = tokio::time::sleep(Duration::from_millis(50)) => {
                    if handle.is_stopped() {
                        break;
                    }
                }
            }
        }
        let engine = tokio::task::spawn_blocking(move || worker.join())
            .await
            .map_err(|e| invalid("simulation", e))?
            .map_err(|_| Failure::Invalid("simulation thread panicked".into()))?;
        if let Some(path) = out {
            write(path, &engine.log().to_text())?;
        }
        emit(&engine.report().to_json());
        let _ = stop_tx.send(());
        let _ = tokio::time::timeout(Duration::from_secs(2), server).await;
        Ok(())
    })
}

fn report(path: &Path) -> Result<(), Failure> {
    let entries = parse_log(&read(path)?).map_err(|(line, e)| invalid(format!("{}:{line}", path.display()), e))?;
    emit(summary::render(&entries).trim_end());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan(input) => plan(input),
        Command::Simulate { input, out } => simulate(input, out.as_deref()),
        Command::Serve {
            input,
            out,
            port,
            pace,
        } => serve(input, out.as_deref(), *port, *pace),
        Command::Report { log } => report(log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.message());
            ExitCode::from(f.code())
        }
    }
}
