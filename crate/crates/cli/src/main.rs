//! `tadbot` — run the gateway or a simulated device, characterize the
//! actuator, and summarize care logs. Commands that talk to a running
//! gateway go through its HTTP API.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod care;

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use futures::StreamExt;
use tadbot_client::device_sim::{self, SimConfig, SimEvent};
use tadbot_client::{CommandRequest, GatewayClient, SweepParams};
use tadbot_core::actuation::{simulate_markers, ActuationConfig, MarkerStream, DEFAULT_SAMPLE_RATE_HZ};
use tadbot_core::device::{Mode, DEFAULT_TENSION_LIMIT_N, DEFAULT_TICK_S};
use tadbot_core::experiment::TrialRequest;
use tadbot_core::protocol::{parse_ts, Motion};
use tadbot_core::signal::{estimate_amplitude, frequency_grid, sweep_characterization, write_sweep_csv};
use tadbot_gateway::{GatewayConfig, SystemClock};
use tracing::level_filters::LevelFilter;
use tracing::{info, warn};

const DEFAULT_GATEWAY: &str = "http://127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(name = "tadbot", version, about = "TadBot gateway, device simulator and analysis tools")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the gateway until interrupted.
    Serve(ServeArgs),
    /// Run a simulated TadBot that dials a gateway, until interrupted.
    SimDevice(SimArgs),
    /// Amplitude/frequency characterization sweep as CSV.
    Sweep(SweepArgs),
    /// Write a synthetic marker recording as CSV.
    Markers(MarkersArgs),
    /// Replay a marker recording through the tail-amplitude analysis.
    Replay(ReplayArgs),
    /// Per-phase care-event counts for one trial.
    Summarize(SummarizeArgs),
    /// Care events of one trial as CSV, labelled with their phase.
    Export(ExportArgs),
    /// Gateway status.
    Status(GatewayArg),
    /// Send a command to a device through the gateway.
    Command(CommandArgs),
    /// List trials known to the gateway.
    Trials(GatewayArg),
    /// Schedule a trial on the gateway.
    TrialCreate(TrialCreateArgs),
    /// Post a camera motion event to the gateway.
    Motion(MotionArgs),
    /// Follow the gateway event stream.
    Events(EventsArgs),
}

#[derive(Debug, Args)]
struct GatewayArg {
    /// Gateway base URL.
    #[arg(long, env = "TADBOT_GATEWAY", default_value = DEFAULT_GATEWAY)]
    gateway: String,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// TOML configuration; GATEWAY_* environment variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the HTTP listen address.
    #[arg(long)]
    listen: Option<std::net::SocketAddr>,
    /// Override the device listen address.
    #[arg(long)]
    device_listen: Option<std::net::SocketAddr>,
    /// Override the data directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[arg(long, default_value = "tadbot-1")]
    device: String,
    /// Gateway device endpoint, host:port.
    #[arg(long, default_value = "127.0.0.1:7070")]
    gateway: String,
    /// Tick length in simulated seconds.
    #[arg(long, default_value_t = DEFAULT_TICK_S)]
    tick: f64,
    #[arg(long, default_value_t = DEFAULT_TENSION_LIMIT_N)]
    tension_limit: f64,
    /// Run the device clock faster than wall time (default factor 100).
    #[arg(long, value_name = "FACTOR", num_args = 0..=1, default_missing_value = "100")]
    virtual_time: Option<f64>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 5.0)]
    fmin: f64,
    #[arg(long, default_value_t = 28.0)]
    fmax: f64,
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    /// Marker noise, RMS mm.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Recording length per frequency, s.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ask a running gateway instead of computing locally.
    #[arg(long)]
    gateway: Option<String>,
}

#[derive(Debug, Args)]
struct MarkersArgs {
    #[arg(long)]
    freq: f64,
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_RATE_HZ)]
    rate: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Marker CSV as written by `markers`.
    #[arg(long)]
    markers: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_RATE_HZ)]
    rate: f64,
}

#[derive(Debug, Args)]
pub struct TrialSource {
    /// Care log (`trial-<id>.log`).
    #[arg(long)]
    log: PathBuf,
    /// Trial id; taken from the log file name when absent.
    #[arg(long)]
    trial: Option<String>,
    /// Trial definitions (`trials.json`); defaults to the one beside the log.
    #[arg(long, conflicts_with = "seed")]
    trials: Option<PathBuf>,
    /// Rebuild the trial schedule from its randomization seed instead.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    #[command(flatten)]
    source: TrialSource,
    /// CSV instead of a table.
    #[arg(long)]
    csv: bool,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    source: TrialSource,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Action {
    Activate,
    Stop,
    SetTension,
}

#[derive(Debug, Args)]
struct CommandArgs {
    #[command(flatten)]
    gateway: GatewayArg,
    #[arg(long)]
    device: String,
    #[arg(long, value_enum)]
    action: Action,
    /// swimming or begging, for activate.
    #[arg(long, required_if_eq("action", "activate"))]
    mode: Option<Mode>,
    #[arg(long, required_if_eq("action", "set-tension"))]
    tension: Option<f64>,
}

#[derive(Debug, Args)]
struct TrialCreateArgs {
    #[command(flatten)]
    gateway: GatewayArg,
    #[arg(long)]
    pair: String,
    #[arg(long)]
    canister: String,
    /// First day, YYYY-MM-DD.
    #[arg(long)]
    start: chrono::NaiveDate,
    #[arg(long)]
    seed: u64,
    /// Confirms the tadpole in the canister was fed before the trial.
    #[arg(long)]
    fed: bool,
}

#[derive(Debug, Args)]
struct MotionArgs {
    #[command(flatten)]
    gateway: GatewayArg,
    #[arg(long)]
    camera: String,
    #[arg(long)]
    score: f64,
    /// RFC 3339 timestamp; now when absent.
    #[arg(long)]
    ts: Option<String>,
}

#[derive(Debug, Args)]
struct EventsArgs {
    #[command(flatten)]
    gateway: GatewayArg,
    #[arg(long, default_value_t = 0)]
    since: u64,
    /// Stop after this many events.
    #[arg(long)]
    limit: Option<usize>,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

pub fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let long_running = matches!(cli.command, Cmd::Serve(_) | Cmd::SimDevice(_));
    init_logging(if long_running { LevelFilter::INFO } else { LevelFilter::WARN });
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Runtime(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}

fn init_logging(default: LevelFilter) {
    let level = std::env::var("RUST_LOG")
        .ok()
        .and_then(|v| v.parse::<LevelFilter>().ok())
        .unwrap_or(default);
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(io::stderr)
        .init();
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Sweep(a) => sweep(a),
        Cmd::Markers(a) => markers(a),
        Cmd::Replay(a) => replay(a),
        Cmd::Summarize(a) => care::summarize(&a.source, a.csv),
        Cmd::Export(a) => care::export(&a.source, a.out.as_deref()),
        other => tokio::runtime::Runtime::new().map_err(runtime)?.block_on(run_async(other)),
    }
}

async fn run_async(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Serve(a) => serve(a).await,
        Cmd::SimDevice(a) => sim_device(a).await,
        Cmd::Status(g) => print_json(&client(&g.gateway)?.status().await.map_err(runtime)?),
        Cmd::Trials(g) => print_json(&client(&g.gateway)?.trials().await.map_err(runtime)?),
        Cmd::Command(a) => {
            let req = match a.action {
                Action::Activate => CommandRequest::activate(a.mode.expect("required by clap")),
                Action::Stop => CommandRequest::stop(),
                Action::SetTension => CommandRequest::set_tension(a.tension.expect("required by clap")),
            };
            let ack = client(&a.gateway.gateway)?.command(&a.device, &req).await.map_err(runtime)?;
            print_json(&ack)?;
            match ack.ok {
                true => Ok(()),
                false => Err(Failure::Runtime(ack.error.unwrap_or_else(|| "device refused".into()))),
            }
        }
        Cmd::TrialCreate(a) => {
            let req = TrialRequest {
                pair_id: a.pair,
                canister_id: a.canister,
                start_date: a.start,
                seed: a.seed,
                fed_confirmed: a.fed,
            };
            print_json(&client(&a.gateway.gateway)?.create_trial(&req).await.map_err(runtime)?)
        }
        Cmd::Motion(a) => {
            let ts = match a.ts {
                Some(s) => parse_ts(&s).map_err(Failure::Usage)?,
                None => chrono::Utc::now(),
            };
            let m = Motion { camera: a.camera, score: a.score, ts };
            print_json(&client(&a.gateway.gateway)?.post_motion(&m).await.map_err(runtime)?)
        }
        Cmd::Events(a) => {
            let (epoch, mut stream) = client(&a.gateway.gateway)?.events(a.since).await.map_err(runtime)?;
            eprintln!("epoch {epoch}");
            let mut seen = 0;
            while a.limit.is_none_or(|l| seen < l) {
                let Some(ev) = stream.next().await else { break };
                let ev = ev.map_err(runtime)?;
                println!("{} {} {}", ev.seq, ev.kind, ev.data);
                seen += 1;
            }
            Ok(())
        }
        Cmd::Sweep(_) | Cmd::Markers(_) | Cmd::Replay(_) | Cmd::Summarize(_) | Cmd::Export(_) => unreachable!(),
    }
}

fn client(url: &str) -> Result<GatewayClient, Failure> {
    GatewayClient::new(url).map_err(|e| Failure::Usage(e.to_string()))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(v).map_err(runtime)?);
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            File::create(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

async fn serve(a: ServeArgs) -> Result<(), Failure> {
    let mut cfg = GatewayConfig::load(a.config.as_deref()).map_err(runtime)?;
    if let Some(l) = a.listen {
        cfg.listen = l;
    }
    if let Some(l) = a.device_listen {
        cfg.device_listen = l;
    }
    if let Some(d) = a.data_dir {
        cfg.data_dir = d;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let gw = tadbot_gateway::start(cfg, Arc::new(SystemClock)).await.map_err(runtime)?;
    // Scripts read the bound addresses from this line.
    println!("listening http={} devices={} epoch={}", gw.http_addr, gw.device_addr, gw.state.store.epoch());
    let _ = io::stdout().flush();
    shutdown_signal().await;
    info!("shutting down");
    gw.shutdown().await;
    Ok(())
}

async fn sim_device(a: SimArgs) -> Result<(), Failure> {
    if !(a.tick > 0.0 && a.tick.is_finite()) {
        return Err(Failure::Usage(format!("--tick must be positive, got {}", a.tick)));
    }
    let mut cfg = SimConfig::new(a.device, a.gateway);
    cfg.tick_s = a.tick;
    cfg.tension_limit_n = a.tension_limit;
    if let Some(f) = a.virtual_time {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Failure::Usage(format!("--virtual-time factor must be positive, got {f}")));
        }
        cfg.time_scale = f;
    }
    let sim = device_sim::spawn(cfg);
    let mut events = sim.subscribe();
    let report = tokio::spawn(async move {
        while let Ok(ev) = events.recv().await {
            match ev {
                SimEvent::Command { tick, action, ok } => info!(tick, action = action.as_str(), ok, "command"),
                SimEvent::Disconnected => warn!("gateway link lost; redialling"),
                _ => {}
            }
        }
    });
    shutdown_signal().await;
    let state = sim.stop().await;
    report.abort();
    info!(ticks = state.ticks(), "device stopped");
    Ok(())
}

fn check_range(fmin: f64, fmax: f64, step: f64) -> Result<Vec<f64>, Failure> {
    if !(fmin.is_finite() && fmax.is_finite() && fmin >= 0.0) {
        return Err(Failure::Usage(format!("frequencies must be finite and non-negative, got {fmin}..{fmax}")));
    }
    if fmin > fmax {
        return Err(Failure::Usage(format!("--fmin {fmin} is above --fmax {fmax}")));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Failure::Usage(format!("--step must be positive, got {step}")));
    }
    Ok(frequency_grid(fmin, fmax, step))
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let freqs = check_range(a.fmin, a.fmax, a.step)?;
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(Failure::Usage(format!("--noise must be non-negative, got {}", a.noise)));
    }
    let csv = match &a.gateway {
        Some(url) => {
            let params = SweepParams {
                fmin: a.fmin,
                fmax: a.fmax,
                step: a.step,
                noise: a.noise,
                seed: a.seed,
                duration_s: Some(a.duration),
            };
            let c = client(url)?;
            let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
            rt.block_on(async { c.characterization(&params).await }).map_err(runtime)?.into_bytes()
        }
        None => {
            let points = sweep_characterization(&ActuationConfig::default(), &freqs, a.duration, a.noise, a.seed)
                .map_err(runtime)?;
            let mut buf = Vec::new();
            write_sweep_csv(&points, &mut buf).map_err(runtime)?;
            buf
        }
    };
    let mut out = output(a.out.as_deref())?;
    out.write_all(&csv).and_then(|_| out.flush()).map_err(runtime)
}

fn markers(a: MarkersArgs) -> Result<(), Failure> {
    let stream = simulate_markers(&ActuationConfig::default(), a.freq, a.duration, a.rate, a.noise, a.seed)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let mut out = output(a.out.as_deref())?;
    stream.write_csv(&mut out).map_err(runtime)?;
    out.flush().map_err(runtime)
}

fn replay(a: ReplayArgs) -> Result<(), Failure> {
    let file = File::open(&a.markers).map_err(|e| Failure::Runtime(format!("{}: {e}", a.markers.display())))?;
    let stream = MarkerStream::read_csv(io::BufReader::new(file), a.rate).map_err(runtime)?;
    let estimate = estimate_amplitude(&stream).map_err(runtime)?;
    println!("{}", serde_json::to_string(&estimate).map_err(runtime)?);
    Ok(())
}
