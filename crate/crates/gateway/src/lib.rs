//! TadBot gateway service.
//!
//! Ingests camera motion events and fires webhook notifications, relays
//! experimenter commands to devices behind the trial-phase guard, keeps the
//! care-event logs, and streams everything it sees to dashboards.
//!
//! ```text
//! camera --POST /cameras/{id}/motion--> gateway --webhook--> experimenter
//! dashboard --POST /devices/{id}/command--> gateway --tcp line--> device
//! dashboard <--GET /events (SSE)-- gateway <--telemetry/acks-- device
//! ```

pub mod api;
pub mod clock;
pub mod config;
pub mod devices;
pub mod error;
pub mod notify;
pub mod store;
pub mod trials;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tadbot_core::device::{Mode, TelemetrySnapshot};
use tadbot_core::experiment::{guard_command, CareEvent, CareEventKind, GuardDecision, PhaseSpan, RequestedAction, Trial};
use tadbot_core::protocol::{Ack, Command, CommandAction, Motion, WireMessage};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tracing::{info, warn};

pub use clock::{Clock, ManualClock, SystemClock};
pub use config::{Binding, GatewayConfig};
pub use error::{ApiError, ConfigError};
pub use store::{EventRecord, EventStore, RecordBody};

use devices::DeviceRegistry;
use notify::{Notifier, NotifySnapshot};
use trials::TrialStore;

/// Body of `POST /devices/{id}/command`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRequest {
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tension_n: Option<f64>,
}

impl CommandRequest {
    pub fn activate(mode: Mode) -> Self {
        Self { action: "activate".into(), mode: Some(mode), tension_n: None }
    }

    pub fn stop() -> Self {
        Self { action: "stop".into(), mode: None, tension_n: None }
    }

    pub fn set_tension(tension_n: f64) -> Self {
        Self { action: "set_tension".into(), mode: None, tension_n: Some(tension_n) }
    }

    pub fn requested(&self) -> Result<RequestedAction, ApiError> {
        match CommandAction::parse(&self.action) {
            Some(CommandAction::Activate) => match self.mode {
                Some(m @ (Mode::Swimming | Mode::Begging)) => Ok(RequestedAction::Activate(m)),
                _ => Err(ApiError::BadRequest("activate needs mode swimming or begging".into())),
            },
            Some(CommandAction::Stop) => Ok(RequestedAction::Stop),
            Some(CommandAction::SetTension) => match self.tension_n {
                Some(_) => Ok(RequestedAction::SetTension),
                None => Err(ApiError::BadRequest("set_tension needs tension_n".into())),
            },
            None => Err(ApiError::BadRequest(format!("unknown action `{}`", self.action))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MotionReceipt {
    pub seq: u64,
    pub notified: bool,
    pub duplicate: bool,
    pub trial_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DeviceStatus {
    pub connected: bool,
    pub pair_id: String,
    pub telemetry: Option<TelemetrySnapshot>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CurrentPhase {
    pub index: usize,
    #[serde(flatten)]
    pub span: PhaseSpan,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrialStatus {
    pub trial_id: String,
    pub pair_id: String,
    pub current_phase: Option<CurrentPhase>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StatusSnapshot {
    pub epoch: String,
    pub now: DateTime<Utc>,
    pub last_seq: u64,
    pub event_counts: store::EventCounts,
    pub devices: BTreeMap<String, DeviceStatus>,
    pub trials: Vec<TrialStatus>,
    pub notifications: NotifySnapshot,
}

/// Camera, event time and score bits of a motion event.
type MotionKey = (String, DateTime<Utc>, u64);

pub struct AppState {
    pub config: GatewayConfig,
    pub clock: Arc<dyn Clock>,
    pub store: EventStore,
    pub trials: Mutex<TrialStore>,
    pub devices: DeviceRegistry,
    pub notifier: Notifier,
    motion_seen: Mutex<HashMap<MotionKey, u64>>,
    next_command: AtomicU64,
    shutdown: watch::Receiver<bool>,
}

impl AppState {
    pub fn new(
        config: GatewayConfig,
        clock: Arc<dyn Clock>,
        shutdown: watch::Receiver<bool>,
    ) -> Result<Self, tadbot_core::experiment::ExperimentError> {
        let trials = TrialStore::open(&config.data_dir)?;
        let notifier = Notifier::new(config.webhook.clone(), config.webhook_delays());
        Ok(Self {
            store: EventStore::new(uuid::Uuid::new_v4().simple().to_string()),
            trials: Mutex::new(trials),
            devices: DeviceRegistry::default(),
            notifier,
            clock,
            config,
            motion_seen: Mutex::default(),
            next_command: AtomicU64::new(1),
            shutdown,
        })
    }

    pub fn shutdown_signal(&self) -> watch::Receiver<bool> {
        self.shutdown.clone()
    }

    fn log_care(&self, trials: &mut TrialStore, event: CareEvent) -> bool {
        match trials.record(event.clone()) {
            Ok(()) => {
                self.store.append(self.clock.now(), RecordBody::Care(event));
                true
            }
            Err(e) => {
                warn!(error = %e, "care event not logged");
                false
            }
        }
    }

    /// Stores a camera motion event, logs it against the camera's active
    /// trial, and notifies when the score reaches the threshold.
    pub fn ingest_motion(&self, camera_id: &str, motion: Motion) -> Result<MotionReceipt, ApiError> {
        let binding = self
            .config
            .cameras
            .get(camera_id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown camera {camera_id}")))?;
        if motion.camera != camera_id {
            return Err(ApiError::BadRequest(format!(
                "body camera {} does not match path camera {camera_id}",
                motion.camera
            )));
        }

        // Redelivered events (same camera, ts and score) are stored once.
        let key = (motion.camera.clone(), motion.ts, motion.score.to_bits());
        let mut seen = self.motion_seen.lock().unwrap();
        if let Some(&seq) = seen.get(&key) {
            return Ok(MotionReceipt {
                seq,
                notified: false,
                duplicate: true,
                trial_id: None,
            });
        }

        let now = self.clock.now();
        let record = self.store.append(now, RecordBody::Wire(WireMessage::Motion(motion.clone())));
        seen.insert(key, record.seq);
        drop(seen);

        let mut trials = self.trials.lock().unwrap();
        let trial_id = trials.active_trial(&binding.pair_id, now).map(|t| t.trial_id.clone());
        if let Some(id) = &trial_id {
            let event = CareEvent::new(
                now,
                id.clone(),
                CareEventKind::MotionDetected,
                format!("camera={} score={}", motion.camera, motion.score),
            );
            self.log_care(&mut trials, event);
        }
        drop(trials);

        let notified = motion.score >= self.config.motion_threshold;
        if notified {
            self.notifier.dispatch(motion);
        }
        Ok(MotionReceipt {
            seq: record.seq,
            notified,
            duplicate: false,
            trial_id,
        })
    }

    /// Guard decision for a device command at `now`, without sending anything.
    pub fn authorize(&self, device_id: &str, requested: RequestedAction, now: DateTime<Utc>) -> Result<Option<Trial>, ApiError> {
        let binding = self
            .config
            .devices
            .get(device_id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown device {device_id}")))?;
        let trials = self.trials.lock().unwrap();
        let trial = trials.trial_for_pair(&binding.pair_id, now).cloned();
        match guard_command(trial.as_ref(), now, requested) {
            GuardDecision::Allow => Ok(trial),
            GuardDecision::Deny { reason } => {
                let phase = trial
                    .as_ref()
                    .and_then(|t| t.phase_at_time(now))
                    .map(|(_, p)| p.stimulus.to_string());
                Err(ApiError::Forbidden { reason, phase })
            }
        }
    }

    /// Guards, sends and awaits one device command. Commands are never retried.
    pub async fn command_device(&self, device_id: &str, req: &CommandRequest) -> Result<Ack, ApiError> {
        let requested = req.requested()?;
        let now = self.clock.now();
        let trial = self.authorize(device_id, requested, now)?;

        let id = format!("{}-{}", &self.store.epoch()[..8], self.next_command.fetch_add(1, Ordering::Relaxed));
        let cmd = match requested {
            RequestedAction::Activate(mode) => Command::activate(&id, device_id, mode),
            RequestedAction::Stop => Command::stop(&id, device_id),
            RequestedAction::SetTension => Command::set_tension(&id, device_id, req.tension_n.unwrap_or_default()),
        };
        tadbot_core::protocol::encode(&WireMessage::Cmd(cmd.clone())).map_err(|e| ApiError::BadRequest(e.to_string()))?;

        let ack = self
            .devices
            .send(cmd.clone(), Duration::from_millis(self.config.command_timeout_ms))
            .await?;
        self.store.append(self.clock.now(), RecordBody::Wire(WireMessage::Cmd(cmd)));
        self.store.append(self.clock.now(), RecordBody::Wire(WireMessage::Ack(ack.clone())));

        if let (true, RequestedAction::Activate(mode), Some(trial)) = (ack.ok, requested, trial) {
            let event = CareEvent::mode_activated(self.clock.now(), trial.trial_id.clone(), mode, device_id);
            let mut trials = self.trials.lock().unwrap();
            self.log_care(&mut trials, event);
        }
        Ok(ack)
    }

    pub fn status(&self) -> StatusSnapshot {
        let now = self.clock.now();
        let devices = self
            .config
            .devices
            .iter()
            .map(|(id, b)| {
                let telemetry = self.devices.latest_telemetry(id).map(|t| TelemetrySnapshot {
                    device: t.device,
                    t_s: t.t_s,
                    mode: t.mode,
                    phase: t.phase,
                    freq_hz: t.freq_hz,
                    remaining_s: t.remaining_s,
                    tension_n: t.tension_n,
                });
                (
                    id.clone(),
                    DeviceStatus {
                        connected: self.devices.is_connected(id),
                        pair_id: b.pair_id.clone(),
                        telemetry,
                    },
                )
            })
            .collect();
        let trials = self
            .trials
            .lock()
            .unwrap()
            .trials()
            .iter()
            .map(|t| trial_status(t, now))
            .collect();
        StatusSnapshot {
            epoch: self.store.epoch().to_owned(),
            now,
            last_seq: self.store.last_seq(),
            event_counts: self.store.counts(),
            devices,
            trials,
            notifications: self.notifier.snapshot(),
        }
    }
}

pub fn trial_status(t: &Trial, now: DateTime<Utc>) -> TrialStatus {
    TrialStatus {
        trial_id: t.trial_id.clone(),
        pair_id: t.pair_id.clone(),
        current_phase: t.phase_at_time(now).map(|(index, span)| CurrentPhase { index, span: *span }),
    }
}

/// A gateway bound to its sockets and serving in the background.
pub struct RunningGateway {
    pub http_addr: SocketAddr,
    pub device_addr: SocketAddr,
    pub state: Arc<AppState>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningGateway {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error("binding {0}: {1}")]
    Bind(SocketAddr, std::io::Error),
    #[error("opening trial store: {0}")]
    Store(#[from] tadbot_core::experiment::ExperimentError),
}

/// Binds the HTTP and device listeners and starts serving.
pub async fn start(config: GatewayConfig, clock: Arc<dyn Clock>) -> Result<RunningGateway, StartError> {
    let http = TcpListener::bind(config.listen)
        .await
        .map_err(|e| StartError::Bind(config.listen, e))?;
    let dev = TcpListener::bind(config.device_listen)
        .await
        .map_err(|e| StartError::Bind(config.device_listen, e))?;
    let http_addr = http.local_addr().map_err(|e| StartError::Bind(config.listen, e))?;
    let device_addr = dev.local_addr().map_err(|e| StartError::Bind(config.device_listen, e))?;

    let (tx, rx) = watch::channel(false);
    let state = Arc::new(AppState::new(config, clock, rx.clone())?);
    info!(%http_addr, %device_addr, epoch = state.store.epoch(), "gateway listening");

    let router = api::router(state.clone());
    let mut http_shutdown = rx.clone();
    let http_task = tokio::spawn(async move {
        let serve = axum::serve(http, router).with_graceful_shutdown(async move {
            let _ = http_shutdown.changed().await;
        });
        if let Err(e) = serve.await {
            warn!(error = %e, "http server stopped");
        }
    });
    let dev_task = tokio::spawn(devices::accept_loop(state.clone(), dev, rx));

    Ok(RunningGateway {
        http_addr,
        device_addr,
        state,
        shutdown: tx,
        tasks: vec![http_task, dev_task],
    })
}
