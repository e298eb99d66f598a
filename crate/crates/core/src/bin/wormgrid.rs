use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wormgrid::classad::{check_requirements, compute_rank};
use wormgrid::control::{self, Pace};
use wormgrid::events::LogEvent;
use wormgrid::resources::{derive_clique_ad, Clique, Directory};
use wormgrid::selector::{self, SelectionRequest};
use wormgrid::sim::{self, bundled, Engine, MetricsRecord, Scenario, ScenarioOutcome};

#[derive(Parser)]
#[command(name = "wormgrid", version, about = "Contract-driven migration testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file (or a bundled one by name: fig5, table1, ...).
    Run {
        scenario: String,
        /// Write metrics.jsonl, events.jsonl, plot.csv and records.json here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pace the run by the wall clock and serve the control API.
        #[arg(long)]
        live: bool,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Simulated seconds per wall-clock second in live mode.
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
    },
    /// Match a request ad against clique files and print the selection.
    Match {
        request: PathBuf,
        #[arg(required = true)]
        cliques: Vec<PathBuf>,
    },
    /// Summarize a recorded metrics log, optionally serving it read-only.
    Replay {
        metrics: PathBuf,
        /// Event log; defaults to events.jsonl next to the metrics log.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Write the throughput series as CSV
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Serve the recorded run read-only on this address
        #[arg(long)]
        serve: Option<SocketAddr>,
    },
}

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { scenario, out, live, listen, time_scale } => run(&scenario, out, live, listen, time_scale),
        Command::Match { request, cliques } => match_cmd(&request, &cliques),
        Command::Replay { metrics, events, plot, serve } => replay(&metrics, events, plot, serve),
    }
}

fn load_scenario(name: &str) -> Result<Scenario> {
    let path = Path::new(name);
    if path.exists() {
        return Ok(Scenario::load(path)?);
    }
    match bundled::get(name) {
        Some(text) => Ok(Scenario::from_toml(text)?),
        None => Err(format!("no scenario file or bundled scenario named `{name}`").into()),
    }
}

fn run(name: &str, out: Option<PathBuf>, live: bool, listen: SocketAddr, time_scale: f64) -> Result<()> {
    let scenario = load_scenario(name)?;
    let scratch;
    let root = match &out {
        Some(dir) => dir.join("checkpoints"),
        None => {
            scratch = tempfile::tempdir()?;
            scratch.path().to_path_buf()
        }
    };
    if !live {
        let outcome = sim::run_scenario(&scenario, &root)?;
        summarize(&outcome);
        if let Some(dir) = &out {
            sim::write_outputs(&outcome, dir)?;
            println!("wrote {}", dir.display());
        }
        return Ok(());
    }
    if !(time_scale.is_finite() && time_scale > 0.0) {
        return Err("--time-scale must be positive".into());
    }
    let engine = Engine::new(scenario, &root)?;
    let (state, _engine_thread) = control::spawn_engine(engine, Pace::WallClock { time_scale });
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        if let Some(dir) = out {
            let watcher = state.clone();
            tokio::spawn(async move {
                loop {
                    tokio::time::sleep(std::time::Duration::from_millis(200)).await;
                    let done = watcher.snapshot(|p| p.status.as_ref().is_some_and(|s| s.finished));
                    if done {
                        let (metrics, events) = watcher.snapshot(|p| (p.metrics.clone(), p.events.clone()));
                        let written = std::fs::create_dir_all(&dir)
                            .and_then(|_| std::fs::write(dir.join("metrics.jsonl"), sim::to_jsonl(&metrics)))
                            .and_then(|_| std::fs::write(dir.join("events.jsonl"), sim::to_jsonl(&events)))
                            .and_then(|_| std::fs::write(dir.join("plot.csv"), sim::export_plot_data(&metrics)));
                        match written {
                            Ok(()) => println!("scenario finished; logs in {}", dir.display()),
                            Err(e) => eprintln!("writing logs: {e}"),
                        }
                        break;
                    }
                }
            });
        }
        println!("control API on http://{listen}");
        control::serve(state, listen).await
    })?;
    Ok(())
}

fn summarize(outcome: &ScenarioOutcome) {
    for rec in &outcome.records {
        let quanta: Vec<&MetricsRecord> = outcome.quanta(&rec.run_id).collect();
        let violations: Vec<String> = quanta.iter().filter(|q| q.violation).map(|q| q.quantum.to_string()).collect();
        println!(
            "{}: {} on {} after {} quanta; violations at [{}]",
            rec.run_id,
            rec.status,
            rec.current_clique.as_deref().unwrap_or("-"),
            quanta.len(),
            violations.join(", ")
        );
        if let Some(f) = &rec.failure {
            println!("  failure: {f}");
        }
    }
    for m in &outcome.migrations {
        println!(
            "migration {} -> {} ({}): {:.1} s, {} disk touches, resumed at iteration {}",
            m.run_id, m.target, m.trigger, m.duration_seconds, m.disk_touches, m.resumed_iteration
        );
    }
}

/// A clique file holds one clique in the scenario's `[[clique]]` layout,
/// without the array header. Scenario files contribute all their cliques.
fn load_cliques(path: &Path) -> Result<Vec<Clique>> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(s) = Scenario::from_toml(&text) {
        return Ok(s.cliques);
    }
    let clique: Clique = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    clique.validate()?;
    Ok(vec![clique])
}

fn match_cmd(request: &Path, files: &[PathBuf]) -> Result<()> {
    let req = SelectionRequest::parse(&std::fs::read_to_string(request)?, "cli")?;
    let mut dir = Directory::new();
    for f in files {
        for c in load_cliques(f)? {
            dir.register(c, f64::MAX, 0.0)?;
        }
    }
    for c in dir.live(0.0) {
        let ad = derive_clique_ad(c, 0.0);
        let verdict = match check_requirements(&req.request_ad, &ad) {
            Ok(true) => "match".to_string(),
            Ok(false) => "no match".to_string(),
            Err(e) => e.to_string(),
        };
        println!("{:<16} {:<10} rank {}", c.name, verdict, compute_rank(&req.request_ad, &ad));
    }
    let resp = selector::select(&req, &dir, 0.0);
    println!("{}", serde_json::to_string_pretty(&resp.record())?);
    if resp.is_success() {
        Ok(())
    } else {
        Err("no clique matched".into())
    }
}

fn replay(metrics_path: &Path, events: Option<PathBuf>, plot: Option<PathBuf>, serve: Option<SocketAddr>) -> Result<()> {
    let metrics: Vec<MetricsRecord> = sim::read_jsonl(metrics_path)?;
    let events_path = events.unwrap_or_else(|| metrics_path.with_file_name("events.jsonl"));
    let events: Vec<LogEvent> = if events_path.exists() { sim::read_jsonl(&events_path)? } else { Vec::new() };
    let quanta = metrics.iter().filter(|m| m.is_quantum()).count();
    let violations = metrics.iter().filter(|m| m.is_quantum() && m.violation).count();
    println!("{} records, {} quanta, {} violations, {} events", metrics.len(), quanta, violations, events.len());
    if let Some(p) = plot {
        std::fs::write(&p, sim::export_plot_data(&metrics))?;
        println!("wrote {}", p.display());
    }
    if let Some(addr) = serve {
        let state = control::replay_state(metrics, events);
        println!("read-only control API on http://{addr}");
        tokio::runtime::Runtime::new()?.block_on(control::serve(state, addr))?;
    }
    Ok(())
}
