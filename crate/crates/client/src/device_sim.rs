//! A virtual TadBot speaking the device side of the line protocol.
//!
//! The simulator runs [`DeviceState`] on a tick loop paced by wall time
//! divided by `time_scale`; late ticks are caught up, so the virtual clock
//! never drifts from the tick count. It dials the gateway, introduces itself
//! with a telemetry line, answers every command with an ack followed by fresh
//! telemetry, and reports telemetry once per simulated second. Lost links are
//! redialled with exponential backoff while the device keeps running.

use std::future::Future;
use std::pin::Pin;
use std::time::Duration;

use tadbot_core::device::{DeviceState, DEFAULT_TENSION_LIMIT_N, DEFAULT_TICK_S};
use tadbot_core::protocol::{decode, encode, Ack, Command, CommandAction, LineBuffer, Telemetry, WireMessage};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::sync::{broadcast, watch};
use tokio::task::JoinHandle;
use tokio::time::{Instant, MissedTickBehavior};
use tracing::{debug, info, warn};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub device_id: String,
    /// `host:port` of the gateway's device listener.
    pub gateway: String,
    pub tick_s: f64,
    pub tension_limit_n: f64,
    /// Simulated seconds per wall-clock second.
    pub time_scale: f64,
    pub reconnect_min: Duration,
    pub reconnect_max: Duration,
}

impl SimConfig {
    pub fn new(device_id: impl Into<String>, gateway: impl Into<String>) -> Self {
        Self {
            device_id: device_id.into(),
            gateway: gateway.into(),
            tick_s: DEFAULT_TICK_S,
            tension_limit_n: DEFAULT_TENSION_LIMIT_N,
            time_scale: 1.0,
            reconnect_min: Duration::from_millis(100),
            reconnect_max: Duration::from_secs(5),
        }
    }

    fn tick_period(&self) -> Duration {
        Duration::from_secs_f64(self.tick_s / self.time_scale).max(Duration::from_micros(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimEvent {
    Connected,
    Disconnected,
    /// The device advanced to `tick` and drives the motor at `setpoint_hz`.
    Tick { tick: u64, setpoint_hz: f64 },
    /// A command was applied between `tick` and the next one.
    Command { tick: u64, action: CommandAction, ok: bool },
}

pub struct DeviceSimHandle {
    events: broadcast::Sender<SimEvent>,
    shutdown: watch::Sender<bool>,
    task: JoinHandle<DeviceState>,
}

impl DeviceSimHandle {
    pub fn subscribe(&self) -> broadcast::Receiver<SimEvent> {
        self.events.subscribe()
    }

    /// Stops the simulator and returns the final device state.
    pub async fn stop(self) -> DeviceState {
        let _ = self.shutdown.send(true);
        self.task.await.expect("device simulator panicked")
    }

    /// Resolves when the simulator exits on its own (it only does on stop).
    pub async fn join(self) -> DeviceState {
        self.task.await.expect("device simulator panicked")
    }
}

pub fn spawn(cfg: SimConfig) -> DeviceSimHandle {
    let (events, _) = broadcast::channel(8192);
    let (shutdown, rx) = watch::channel(false);
    let task = tokio::spawn(run(cfg, events.clone(), rx));
    DeviceSimHandle { events, shutdown, task }
}

type Connecting = Pin<Box<dyn Future<Output = std::io::Result<TcpStream>> + Send>>;

struct Link {
    reader: OwnedReadHalf,
    writer: OwnedWriteHalf,
    lines: LineBuffer,
}

async fn read_some(link: &mut Option<Link>, buf: &mut [u8]) -> std::io::Result<usize> {
    match link {
        Some(l) => l.reader.read(buf).await,
        None => std::future::pending().await,
    }
}

async fn connect_when_due(connecting: &mut Option<Connecting>, due: Instant) -> std::io::Result<TcpStream> {
    tokio::time::sleep_until(due).await;
    match connecting {
        Some(f) => f.await,
        None => std::future::pending().await,
    }
}

async fn send(link: &mut Option<Link>, msgs: &[WireMessage]) -> bool {
    let Some(l) = link else {
        return false;
    };
    let mut out = Vec::new();
    for m in msgs {
        match encode(m) {
            Ok(line) => out.extend(line),
            Err(e) => warn!(error = %e, "dropping unencodable message"),
        }
    }
    l.writer.write_all(&out).await.is_ok()
}

async fn run(cfg: SimConfig, events: broadcast::Sender<SimEvent>, mut shutdown: watch::Receiver<bool>) -> DeviceState {
    let mut state = DeviceState::with_params(cfg.device_id.clone(), cfg.tick_s, cfg.tension_limit_n);
    let mut ticker = tokio::time::interval(cfg.tick_period());
    ticker.set_missed_tick_behavior(MissedTickBehavior::Burst);
    ticker.tick().await;

    let mut link: Option<Link> = None;
    let mut backoff = cfg.reconnect_min;
    let mut connect_due = Instant::now();
    let mut connecting: Option<Connecting> = Some(Box::pin(TcpStream::connect(cfg.gateway.clone())));
    let mut buf = vec![0u8; 8192];

    loop {
        let mut lost = false;
        tokio::select! {
            _ = ticker.tick() => {
                let setpoint_hz = state.tick();
                let _ = events.send(SimEvent::Tick { tick: state.ticks(), setpoint_hz });
                if state.on_second_boundary() && link.is_some() {
                    lost = !send(&mut link, &[telemetry(&state)]).await;
                }
            }
            dialled = connect_when_due(&mut connecting, connect_due) => {
                connecting = None;
                match dialled {
                    Ok(stream) => {
                        let _ = stream.set_nodelay(true);
                        let (reader, writer) = stream.into_split();
                        link = Some(Link { reader, writer, lines: LineBuffer::new() });
                        if send(&mut link, &[telemetry(&state)]).await {
                            info!(device = %cfg.device_id, gateway = %cfg.gateway, "connected");
                            backoff = cfg.reconnect_min;
                            let _ = events.send(SimEvent::Connected);
                        } else {
                            lost = true;
                        }
                    }
                    Err(e) => {
                        debug!(error = %e, "dial failed");
                        lost = true;
                    }
                }
            }
            read = read_some(&mut link, &mut buf) => {
                let lines = match read {
                    Ok(0) | Err(_) => None,
                    Ok(n) => link.as_mut().and_then(|l| l.lines.push(&buf[..n]).ok()),
                };
                match lines {
                    None => lost = true,
                    Some(lines) => {
                        for line in lines {
                            let replies = handle_line(&mut state, &line, &events);
                            if !replies.is_empty() && !send(&mut link, &replies).await {
                                lost = true;
                                break;
                            }
                        }
                    }
                }
            }
            _ = shutdown.changed() => break,
        }
        if lost {
            if link.take().is_some() {
                warn!(device = %cfg.device_id, "link lost");
                let _ = events.send(SimEvent::Disconnected);
            }
            if connecting.is_none() {
                connect_due = Instant::now() + backoff;
                backoff = (backoff * 2).min(cfg.reconnect_max);
                connecting = Some(Box::pin(TcpStream::connect(cfg.gateway.clone())));
            }
        }
    }
    state
}

fn telemetry(state: &DeviceState) -> WireMessage {
    WireMessage::Telemetry(Telemetry::from(state.telemetry()))
}

/// Applies one received line and returns the replies to send.
fn handle_line(state: &mut DeviceState, line: &[u8], events: &broadcast::Sender<SimEvent>) -> Vec<WireMessage> {
    let cmd: Command = match decode(line) {
        Ok(WireMessage::Cmd(c)) => c,
        Ok(WireMessage::Ack(a)) => {
            if !a.ok {
                warn!(error = a.error.as_deref().unwrap_or(""), "gateway refused us");
            }
            return Vec::new();
        }
        Ok(other) => {
            debug!(kind = other.type_name(), "ignoring message");
            return Vec::new();
        }
        Err(e) => return vec![WireMessage::Ack(Ack::err("", e.to_string()))],
    };
    let result = if cmd.device != state.device_id() {
        Err(format!("command for {} reached {}", cmd.device, state.device_id()))
    } else {
        match cmd.action {
            CommandAction::Activate => match cmd.mode {
                Some(mode) => state.activate(mode).map_err(|e| e.to_string()),
                None => Err("activate without mode".to_owned()),
            },
            CommandAction::Stop => {
                state.stop();
                Ok(())
            }
            CommandAction::SetTension => match cmd.tension_n {
                Some(t) => state.set_tension(t).map_err(|e| e.to_string()),
                None => Err("set_tension without tension_n".to_owned()),
            },
        }
    };
    let _ = events.send(SimEvent::Command {
        tick: state.ticks(),
        action: cmd.action,
        ok: result.is_ok(),
    });
    let ack = match result {
        Ok(()) => Ack::ok(cmd.id),
        Err(e) => Ack::err(cmd.id, e),
    };
    vec![WireMessage::Ack(ack), telemetry(state)]
}
