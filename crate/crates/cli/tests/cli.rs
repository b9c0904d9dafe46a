use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

use chrono::{NaiveDate, TimeZone, Utc};
use tadbot_core::actuation::{tail_amplitude, ActuationConfig};
use tadbot_core::experiment::{log_path, schedule_trial, CareEvent, CareEventKind, CareLog, TrialRequest};

fn tadbot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tadbot"))
}

fn run(args: &[&str]) -> Output {
    tadbot().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_exits_zero_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "serve", "sim-device", "sweep", "markers", "replay", "summarize", "export", "status", "command", "trials",
        "trial-create", "motion", "events",
    ] {
        let o = tadbot().args([sub, "--help"]).current_dir(dir.path()).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{sub}: {}", stderr(&o));
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["launch"]).status.code(), Some(2));
    assert_eq!(run(&["sweep", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["sweep", "--fmin", "abc"]).status.code(), Some(2));
    let o = run(&["sweep", "--fmin", "20", "--fmax", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--fmin"), "{}", stderr(&o));
    assert_eq!(run(&["sweep", "--step", "0"]).status.code(), Some(2));
    assert_eq!(run(&["command", "--device", "d", "--action", "activate"]).status.code(), Some(2));
    assert_eq!(run(&["sim-device", "--virtual-time", "-3"]).status.code(), Some(2));
}

#[test]
fn sweep_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = run(&["sweep", "--noise", "0.3", "--seed", "4", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 25);

    let noiseless = stdout(&run(&["sweep", "--fmin", "16", "--fmax", "16"]));
    let amp: f64 = noiseless.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    let exact = tail_amplitude(&ActuationConfig::default(), 16.0).unwrap();
    assert!((amp - exact).abs() < 1e-3, "{amp} vs {exact}");
}

#[test]
fn markers_replay_through_the_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("m.csv");
    let o = run(&["markers", "--freq", "12", "--duration", "3", "--out", file.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["replay", "--markers", file.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let est: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let exact = tail_amplitude(&ActuationConfig::default(), 12.0).unwrap();
    assert!((est["amplitude_mm"].as_f64().unwrap() - exact).abs() < 1e-3);
    assert!((est["freq_hz"].as_f64().unwrap() - 12.0).abs() < 0.05);

    std::fs::write(&file, "nonsense\n1,2\n").unwrap();
    assert_eq!(run(&["replay", "--markers", file.to_str().unwrap()]).status.code(), Some(1));
}

fn request(pair: &str) -> TrialRequest {
    TrialRequest {
        pair_id: pair.into(),
        canister_id: "c1".into(),
        start_date: NaiveDate::from_ymd_opt(2024, 5, 6).unwrap(),
        seed: 21,
        fed_confirmed: true,
    }
}

fn write_log(dir: &Path, pair: &str, events: &[(u32, CareEventKind)]) -> std::path::PathBuf {
    let trial = schedule_trial(&request(pair)).unwrap();
    let path = log_path(dir, &trial.trial_id);
    let mut log = CareLog::open(&path, trial.trial_id.clone()).unwrap();
    for (day, kind) in events {
        let ts = Utc.with_ymd_and_hms(2024, 5, 6, 12, 0, 0).unwrap() + chrono::Duration::days(*day as i64);
        log.record_event(CareEvent::new(ts, trial.trial_id.clone(), *kind, "")).unwrap();
    }
    path
}

#[test]
fn summarize_empty_log_is_all_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_log(dir.path(), "p1", &[]);
    let o = run(&["summarize", "--log", path.to_str().unwrap(), "--seed", "21", "--csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("phase,stimulus,start,end,"));
    for r in &rows[1..4] {
        assert!(r.split(',').skip(4).all(|c| c == "0"), "{r}");
    }
    // No begging activations are attributed outside a phase.
    assert!(rows[4].starts_with("-,UNPHASED,-,-,"));
    assert!(rows[4].ends_with(",-"));
    let cells: Vec<&str> = rows[4].split(',').collect();
    assert!(cells[4..cells.len() - 1].iter().all(|c| *c == "0"), "{}", rows[4]);
}

#[test]
fn summarize_matches_constructed_log() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_log(
        dir.path(),
        "p2",
        &[(1, CareEventKind::FatherCall), (15, CareEventKind::FatherCall), (16, CareEventKind::EggProvision)],
    );
    let trial = schedule_trial(&request("p2")).unwrap();
    std::fs::write(dir.path().join("trials.json"), serde_json::to_string(&[&trial]).unwrap()).unwrap();

    // trials.json beside the log defines the phases.
    let o = run(&["summarize", "--log", path.to_str().unwrap(), "--csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let table: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    let col = |name: &str| table[0].iter().position(|h| *h == name).unwrap();
    assert_eq!(table[1][col("FATHER_CALL")], "1");
    assert_eq!(table[2][col("FATHER_CALL")], "1");
    assert_eq!(table[2][col("EGG_PROVISION")], "1");
    assert_eq!(table[3][col("FATHER_CALL")], "0");
    assert_eq!(table[1][col("stimulus")], trial.phases[0].stimulus.as_str());

    let o = run(&["summarize", "--log", path.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("trial p2-20240506  (3 events)"), "{}", stdout(&o));

    let out = dir.path().join("events.csv");
    let o = run(&["export", "--log", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(3).unwrap().contains(trial.phases[1].stimulus.as_str()));
}

#[test]
fn summarize_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["summarize", "--log", dir.path().join("trial-x-20240101.log").to_str().unwrap(), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));

    let path = write_log(dir.path(), "p3", &[(1, CareEventKind::FatherVisit)]);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"ts\":\"not a time\"}\n");
    std::fs::write(&path, text).unwrap();
    let o = run(&["summarize", "--log", path.to_str().unwrap(), "--seed", "21"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(".log:2:"), "{}", stderr(&o));

    // No trials.json and no seed: the trial cannot be reconstructed.
    let fresh = tempfile::tempdir().unwrap();
    let path = write_log(fresh.path(), "p4", &[]);
    let o = run(&["summarize", "--log", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--seed"), "{}", stderr(&o));
}

struct Reaped(Child);

impl Drop for Reaped {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn terminate(child: &mut Child) -> Option<i32> {
    Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while Instant::now() < deadline {
        if let Some(s) = child.try_wait().unwrap() {
            return s.code();
        }
        sleep(Duration::from_millis(20));
    }
    None
}

#[test]
fn serve_and_simulated_device_driven_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("gateway.toml");
    std::fs::write(
        &config,
        "listen = \"127.0.0.1:0\"\ndevice_listen = \"127.0.0.1:0\"\n\n[devices.bot]\npair_id = \"p9\"\n",
    )
    .unwrap();
    let mut serve = Reaped(
        tadbot()
            .args(["serve", "--config", config.to_str().unwrap(), "--data-dir"])
            .arg(dir.path().join("data"))
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let mut banner = String::new();
    BufReader::new(serve.0.stdout.take().unwrap()).read_line(&mut banner).unwrap();
    let field = |k: &str| {
        banner
            .split_whitespace()
            .find_map(|w| w.strip_prefix(k))
            .unwrap()
            .to_owned()
    };
    let url = format!("http://{}", field("http="));
    let devices = field("devices=");

    let mut sim = Reaped(
        tadbot()
            .args(["sim-device", "--device", "bot", "--gateway", &devices, "--virtual-time", "50"])
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let o = run(&["status", "--gateway", &url]);
        assert!(o.status.success(), "{}", stderr(&o));
        let s: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        if s["devices"]["bot"]["connected"] == true {
            break;
        }
        assert!(Instant::now() < deadline, "device never connected");
        sleep(Duration::from_millis(50));
    }

    let o = run(&["command", "--gateway", &url, "--device", "bot", "--action", "set-tension", "--tension", "1.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["command", "--gateway", &url, "--device", "bot", "--action", "set-tension", "--tension", "9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("interlock") || stderr(&o).contains("limit"), "{}", stderr(&o));
    let o = run(&["command", "--gateway", &url, "--device", "bot", "--action", "activate", "--mode", "begging"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("403"), "{}", stderr(&o));

    let o = run(&["events", "--gateway", &url, "--limit", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
    assert!(stdout(&o).starts_with("1 wire {\"v\":1,\"type\":\"telemetry\""), "{}", stdout(&o));

    assert_eq!(terminate(&mut sim.0), Some(0));
    assert_eq!(terminate(&mut serve.0), Some(0));
}

#[test]
fn sim_device_waits_for_an_absent_gateway() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let mut sim = Reaped(
        tadbot()
            .args(["sim-device", "--gateway", &port.to_string()])
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    sleep(Duration::from_millis(700));
    assert!(sim.0.try_wait().unwrap().is_none(), "sim-device gave up");
    assert_eq!(terminate(&mut sim.0), Some(0));
}
