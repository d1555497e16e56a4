use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

use gello_core::kinematics::RobotModel;
use gello_core::leader_bus::{CalibrationMap, EncoderReading, RAD_PER_TICK};
use gello_core::leader_model::{regularization_table, write_regularization_csv, LeaderDefaults, Sweep};
use gello_core::recorder;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn gello() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gello"));
    c.current_dir(root()).env("GELLO_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    gello().args(args).output().unwrap()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn interrupt(child: &mut Child) -> Output {
    Command::new("kill")
        .args(["-INT", &child.id().to_string()])
        .status()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while child.try_wait().unwrap().is_none() {
        assert!(Instant::now() < deadline, "node ignored the interrupt");
        sleep(Duration::from_millis(20));
    }
    let mut out = String::new();
    if let Some(mut e) = child.stderr.take() {
        std::io::Read::read_to_string(&mut e, &mut out).unwrap();
    }
    Output {
        status: child.wait().unwrap(),
        stdout: Vec::new(),
        stderr: out.into_bytes(),
    }
}

#[test]
fn usage_errors_exit_two() {
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("follower-sim"));

    assert_eq!(run(&["follower-sim", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));

    let both = run(&["leader", "--port", "/dev/null", "--virtual", "sine", "--calib", "c.json"]);
    assert_eq!(both.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&both.stderr).contains("cannot be used with"));

    let missing = run(&["analyze-regularization", "--leader", "models/ur5_leader.json", "--sweep", "sweeps/fig3.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--out"));

    assert_eq!(run(&["leader", "--calib", "c.json"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_one() {
    let out = run(&["follower-sim", "--model", "no/such/model.json", "--listen", "127.0.0.1:0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn analyze_regularization_matches_library_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fig3.csv");
    let started = Instant::now();
    let status = run(&[
        "analyze-regularization",
        "--leader",
        "models/ur5_leader.json",
        "--sweep",
        "sweeps/fig3.json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(started.elapsed() < Duration::from_secs(5));

    let leader = RobotModel::load(root().join("models/ur5_leader.json")).unwrap();
    let sweep = Sweep::load(root().join("sweeps/fig3.json")).unwrap();
    let d = LeaderDefaults::shipped();
    let rows = regularization_table(&leader, &d.inertias(&leader), &d.springs, &sweep.configurations).unwrap();
    let mut golden = Vec::new();
    write_regularization_csv(&mut golden, &rows).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), golden);
}

#[test]
fn validate_reports_through_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.jsonl");
    let meta = recorder::SessionMeta::now("ur5", 6, 0.5, 100.0);
    recorder::write_session(&good, &meta, &[]).unwrap();
    let ok = run(&["validate", good.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("ok: 0 records"));

    let bad = dir.path().join("bad.jsonl");
    let text = std::fs::read_to_string(&good).unwrap();
    std::fs::write(&bad, text.lines().next().unwrap().to_string() + "\n").unwrap();
    let out = run(&["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("missing footer"));
}

#[test]
fn calibrate_from_known_pose() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("calib.json");
    let pose = [0.0, -1.3, 1.5, -1.8, -1.57, 0.0];
    let ticks = [2048, 1200, 3100, 900, 1024, 4000];
    let status = run(&[
        "calibrate",
        "--ticks",
        "2048,1200,3100,900,1024,4000",
        "--pose",
        "0,-1.3,1.5,-1.8,-1.57,0",
        "--signs",
        "1,1,-1,1,1,1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let calib = CalibrationMap::load(&out).unwrap();
    for (i, e) in calib.joints().iter().enumerate() {
        let q = calib
            .to_radians(&EncoderReading { servo_id: e.servo_id, ticks: ticks[i], t_mono_us: 0 })
            .unwrap();
        let turns = (q - pose[i]) / std::f64::consts::TAU;
        assert!((turns - turns.round()).abs() * std::f64::consts::TAU <= RAD_PER_TICK / 2.0 + 1e-12);
    }
}

#[test]
fn nodes_run_as_processes_and_flush_on_interrupt() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("s.jsonl");
    let (l, f, r) = (free_port(), free_port(), free_port());
    let addr = |p: u16| format!("127.0.0.1:{p}");
    let spawn = |args: Vec<String>| gello().args(args).stderr(Stdio::piped()).spawn().unwrap();

    let mut recorder = spawn(vec![
        "record".into(), "--out".into(), session.to_str().unwrap().into(), "--listen".into(), addr(r),
    ]);
    let mut follower = spawn(vec![
        "follower-sim".into(), "--model".into(), "ur5".into(), "--q0=0,-1.3,1.5,-1.8,-1.57,0".into(),
        "--listen".into(), addr(f), "--peers".into(), format!("{},{}", addr(l), addr(r)),
    ]);
    let mut leader = spawn(vec![
        "leader".into(), "--virtual".into(), "sine".into(), "--sine".into(), "config/sine_ur5.json".into(),
        "--teleop".into(), "config/teleop.json".into(),
        "--listen".into(), addr(l), "--peers".into(), format!("{},{}", addr(f), addr(r)),
    ]);
    sleep(Duration::from_secs(3));
    for child in [&mut leader, &mut follower] {
        let out = interrupt(child);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = interrupt(&mut recorder);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report = recorder::validate(&session);
    assert!(report.is_ok(), "{report}");
    let s = recorder::read_session(&session).unwrap();
    assert!(s.records.len() > 100, "{} records", s.records.len());
    assert!(s.records.iter().all(|r| r.safety_flags & (1 << 9) == 0), "fault recorded");
}

#[test]
fn bridge_serves_assets_and_greets_console() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>console</h1>").unwrap();
    let (http, ws, sub) = (free_port(), free_port(), free_port());
    let mut bridge = gello()
        .args([
            "bridge", "--ws", &format!("127.0.0.1:{ws}"), "--http", &format!("127.0.0.1:{http}"),
            "--assets", dir.path().to_str().unwrap(), "--listen", &format!("127.0.0.1:{sub}"),
        ])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();

    let get = |path: &str| -> String {
        let deadline = Instant::now() + Duration::from_secs(5);
        loop {
            if let Ok(mut s) = std::net::TcpStream::connect(("127.0.0.1", http)) {
                use std::io::{Read, Write};
                write!(s, "GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
                let mut body = String::new();
                s.read_to_string(&mut body).unwrap();
                return body;
            }
            assert!(Instant::now() < deadline, "http never came up");
            sleep(Duration::from_millis(50));
        }
    };
    let index = get("/");
    assert!(index.starts_with("HTTP/1.1 200"), "{index}");
    assert!(index.contains("<h1>console</h1>"));
    assert!(get("/missing.js").starts_with("HTTP/1.1 404"));

    let (mut socket, _) = tungstenite::connect(format!("ws://127.0.0.1:{ws}")).unwrap();
    let first = socket.read().unwrap().into_text().unwrap();
    let doc: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(doc["type"], "model");
    assert_eq!(doc["name"], "ur5");
    drop(socket);

    assert!(interrupt(&mut bridge).status.success());
}

#[test]
fn unknown_log_level_falls_back_to_info() {
    let out = gello().env("GELLO_LOG", "loud").args(["validate", "nope.jsonl"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("GELLO_LOG=loud"));
}
