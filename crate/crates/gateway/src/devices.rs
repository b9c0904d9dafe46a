//! South-bound device link.
//!
//! Devices dial the gateway over TCP and speak the line protocol. The first
//! line a device sends must be a telemetry message naming a registered
//! device; after that the gateway writes commands and the device answers with
//! acks and periodic telemetry.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use tadbot_core::protocol::{decode, encode, Ack, Command, LineBuffer, Telemetry, WireMessage};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tracing::{debug, info, warn};

use crate::error::ApiError;
use crate::store::RecordBody;
use crate::AppState;

const HELLO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug)]
struct Link {
    conn: u64,
    tx: mpsc::UnboundedSender<Vec<u8>>,
    pending: Mutex<HashMap<String, oneshot::Sender<Ack>>>,
}

#[derive(Debug, Default)]
pub struct DeviceRegistry {
    links: RwLock<HashMap<String, Arc<Link>>>,
    telemetry: RwLock<HashMap<String, Telemetry>>,
    command_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    next_conn: AtomicU64,
}

impl DeviceRegistry {
    pub fn is_connected(&self, device_id: &str) -> bool {
        self.links.read().unwrap().contains_key(device_id)
    }

    pub fn latest_telemetry(&self, device_id: &str) -> Option<Telemetry> {
        self.telemetry.read().unwrap().get(device_id).cloned()
    }

    fn command_lock(&self, device_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.command_locks
            .lock()
            .unwrap()
            .entry(device_id.to_owned())
            .or_default()
            .clone()
    }

    /// Sends `cmd` and waits for its ack. One command is in flight per device.
    pub async fn send(&self, cmd: Command, timeout: Duration) -> Result<Ack, ApiError> {
        let lock = self.command_lock(&cmd.device);
        let _guard = lock.lock().await;

        let link = self
            .links
            .read()
            .unwrap()
            .get(&cmd.device)
            .cloned()
            .ok_or_else(|| ApiError::BadGateway(format!("device {} is not connected", cmd.device)))?;
        let line = encode(&WireMessage::Cmd(cmd.clone())).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let (ack_tx, ack_rx) = oneshot::channel();
        link.pending.lock().unwrap().insert(cmd.id.clone(), ack_tx);
        if link.tx.send(line).is_err() {
            link.pending.lock().unwrap().remove(&cmd.id);
            return Err(ApiError::BadGateway(format!("device {} link closed", cmd.device)));
        }
        match tokio::time::timeout(timeout, ack_rx).await {
            Ok(Ok(ack)) => Ok(ack),
            Ok(Err(_)) => Err(ApiError::BadGateway(format!(
                "device {} disconnected before acknowledging",
                cmd.device
            ))),
            Err(_) => {
                link.pending.lock().unwrap().remove(&cmd.id);
                Err(ApiError::GatewayTimeout(format!(
                    "device {} did not acknowledge within {} ms",
                    cmd.device,
                    timeout.as_millis()
                )))
            }
        }
    }
}

pub(crate) async fn accept_loop(state: Arc<AppState>, listener: TcpListener, mut shutdown: watch::Receiver<bool>) {
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    debug!(%peer, "device connection");
                    let state = state.clone();
                    let shutdown = shutdown.clone();
                    tokio::spawn(async move {
                        if let Err(e) = serve_device(state, stream, shutdown).await {
                            warn!(%peer, error = %e, "device connection ended");
                        }
                    });
                }
                Err(e) => warn!(error = %e, "device accept failed"),
            },
            _ = shutdown.changed() => return,
        }
    }
}

async fn serve_device(
    state: Arc<AppState>,
    stream: TcpStream,
    mut shutdown: watch::Receiver<bool>,
) -> Result<(), String> {
    let (mut reader, mut writer) = stream.into_split();
    let mut lines = LineBuffer::new();
    let mut buf = vec![0u8; 8192];
    let mut queue: std::collections::VecDeque<Vec<u8>> = Default::default();

    // Hello: first telemetry names the device.
    let hello = tokio::time::timeout(HELLO_TIMEOUT, async {
        loop {
            if let Some(l) = queue.pop_front() {
                return Ok(l);
            }
            let n = reader.read(&mut buf).await.map_err(|e| e.to_string())?;
            if n == 0 {
                return Err("closed before hello".to_owned());
            }
            queue.extend(lines.push(&buf[..n]).map_err(|e| e.to_string())?);
        }
    })
    .await
    .map_err(|_| "no hello within timeout".to_owned())??;

    let telemetry = match decode(&hello) {
        Ok(WireMessage::Telemetry(t)) => t,
        Ok(other) => return Err(format!("expected telemetry hello, got {}", other.type_name())),
        Err(e) => return Err(format!("bad hello: {e}")),
    };
    let device_id = telemetry.device.clone();
    if !state.config.devices.contains_key(&device_id) {
        let _ = writer
            .write_all(&encode(&WireMessage::Ack(Ack::err("", format!("unknown device {device_id}")))).unwrap())
            .await;
        return Err(format!("unregistered device {device_id}"));
    }

    let (tx, mut rx) = mpsc::unbounded_channel::<Vec<u8>>();
    let conn = state.devices.next_conn.fetch_add(1, Ordering::Relaxed);
    let link = Arc::new(Link {
        conn,
        tx,
        pending: Mutex::new(HashMap::new()),
    });
    state.devices.links.write().unwrap().insert(device_id.clone(), link.clone());
    info!(device = %device_id, "device connected");
    on_telemetry(&state, telemetry);

    let writer_task = tokio::spawn(async move {
        while let Some(line) = rx.recv().await {
            if writer.write_all(&line).await.is_err() {
                break;
            }
        }
    });

    let result = async {
        loop {
            while let Some(line) = queue.pop_front() {
                handle_line(&state, &link, &device_id, &line);
            }
            tokio::select! {
                read = reader.read(&mut buf) => {
                    let n = read.map_err(|e| e.to_string())?;
                    if n == 0 {
                        return Ok(());
                    }
                    queue.extend(lines.push(&buf[..n]).map_err(|e| e.to_string())?);
                }
                _ = shutdown.changed() => return Ok(()),
            }
        }
    }
    .await;

    {
        let mut links = state.devices.links.write().unwrap();
        if links.get(&device_id).is_some_and(|l| l.conn == conn) {
            links.remove(&device_id);
        }
    }
    link.pending.lock().unwrap().clear();
    writer_task.abort();
    info!(device = %device_id, "device disconnected");
    result
}

fn handle_line(state: &AppState, link: &Link, device_id: &str, line: &[u8]) {
    match decode(line) {
        Ok(WireMessage::Ack(ack)) => {
            let waiter = link.pending.lock().unwrap().remove(&ack.id);
            match waiter {
                Some(tx) => {
                    let _ = tx.send(ack);
                }
                None => debug!(device = %device_id, id = %ack.id, "ack for no pending command"),
            }
        }
        Ok(WireMessage::Telemetry(t)) if t.device == device_id => on_telemetry(state, t),
        Ok(WireMessage::Telemetry(t)) => warn!(device = %device_id, claimed = %t.device, "telemetry for another device ignored"),
        Ok(other) => warn!(device = %device_id, kind = other.type_name(), "unexpected message from device"),
        Err(e) => warn!(device = %device_id, error = %e, "undecodable line from device"),
    }
}

fn on_telemetry(state: &AppState, t: Telemetry) {
    state
        .devices
        .telemetry
        .write()
        .unwrap()
        .insert(t.device.clone(), t.clone());
    state.store.append(state.clock.now(), RecordBody::Wire(WireMessage::Telemetry(t)));
}
