mod http;
mod net;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gello_core::clock::mono_us;
use gello_core::follower_sim::{FollowerSim, StationConfig};
use gello_core::kinematics::{builtin, JointVector, Pose, RobotModel};
use gello_core::leader_bus::{
    BusOptions, CalibrationMap, Generator, SerialTransport, ServoBus, SineChannel, TimedLeader,
    VirtualBus, VirtualLeader, WaypointScript, DEFAULT_BAUD,
};
use gello_core::leader_model::{regularization_table, write_regularization_csv, LeaderDefaults, Sweep};
use gello_core::node::bench::{self, BenchConfig};
use gello_core::node::{
    self, BridgeNode, BusLeader, FollowerSimNode, LeaderNode, LeaderSource, RecordTarget,
    RecorderNode, RemoteLeader, TeleopNodeConfig,
};
use gello_core::protocol::ws::WsBridge;
use gello_core::recorder::{self, SessionMeta};
use gello_core::teleop::{ArmGeometry, TeleopConfig};

use net::NetArgs;

#[derive(Debug, Parser)]
#[command(name = "gello", version, about = "Joint-space teleoperation nodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read the leader arm and drive the follower.
    Leader(LeaderArgs),
    /// Simulated follower arm.
    FollowerSim(FollowerArgs),
    /// Write control ticks to a session file.
    #[command(alias = "recorder")]
    Record(RecordArgs),
    /// Republish the commands of a recorded session.
    Replay(ReplayArgs),
    /// Check a session file and list its defects.
    Validate(ValidateArgs),
    /// Relay node traffic to console clients over WebSocket.
    Bridge(BridgeArgs),
    /// Holding force along a height sweep with and without springs, as CSV.
    AnalyzeRegularization(AnalyzeArgs),
    /// Derive encoder offsets from a known leader pose.
    Calibrate(CalibrateArgs),
    /// Leader, control loop and simulated follower in one process over loopback TCP.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VirtualKind {
    /// Per-joint sinusoids.
    Sine,
    /// Waypoints from --script.
    Script,
    /// Joint states sent by a console through the bridge.
    Console,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["port", "virtual_kind"])))]
struct LeaderArgs {
    /// Serial device of the leader's servo chain.
    #[arg(long)]
    port: Option<String>,
    #[arg(long, default_value_t = DEFAULT_BAUD)]
    baud: u32,
    /// Emulated leader instead of hardware.
    #[arg(long = "virtual", value_enum)]
    virtual_kind: Option<VirtualKind>,
    /// Calibration file; required with --port.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Follower model: a shipped name or a model file.
    #[arg(long, default_value = "ur5")]
    model: String,
    /// Control loop settings.
    #[arg(long)]
    teleop: Option<PathBuf>,
    /// Station file placing the follower (and a partner arm) in the world.
    #[arg(long, requires = "arm")]
    station: Option<PathBuf>,
    /// This follower's arm name in the station file.
    #[arg(long, requires = "station")]
    arm: Option<String>,
    /// Node publishing the partner arm's joints.
    #[arg(long)]
    partner_node: Option<u8>,
    /// Sine channels as a JSON array of {center, amplitude, frequency_hz, phase}.
    #[arg(long)]
    sine: Option<PathBuf>,
    /// Waypoint script for --virtual script.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Node whose joint states drive --virtual console.
    #[arg(long, default_value_t = node::BRIDGE_NODE)]
    console_node: u8,
    #[arg(long, default_value_t = node::LEADER_NODE)]
    node_id: u8,
    #[arg(long, default_value_t = node::FOLLOWER_NODE)]
    follower_node: u8,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Debug, Args)]
struct FollowerArgs {
    #[arg(long, default_value = "ur5", conflicts_with = "station")]
    model: String,
    #[arg(long, requires = "arm")]
    station: Option<PathBuf>,
    #[arg(long, requires = "station")]
    arm: Option<String>,
    /// Starting joints (rad), comma-separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    q0: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    #[arg(long, default_value_t = node::FOLLOWER_NODE)]
    node_id: u8,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["out", "dir"])))]
struct RecordArgs {
    /// Record everything into this file until interrupted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write one file per start/stop session control into this directory.
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long, default_value = "ur5")]
    model: String,
    /// Leader-to-follower scale stored in the session header.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    #[arg(long, default_value = "")]
    notes: String,
    #[arg(long, default_value_t = node::LEADER_NODE)]
    leader_node: u8,
    #[arg(long, default_value_t = node::FOLLOWER_NODE)]
    follower_node: u8,
    #[arg(long, default_value_t = node::RECORDER_NODE)]
    node_id: u8,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    #[arg(long, default_value_t = node::REPLAY_NODE)]
    node_id: u8,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    session: PathBuf,
}

#[derive(Debug, Args)]
struct BridgeArgs {
    /// WebSocket address for console clients.
    #[arg(long, default_value = "127.0.0.1:8765")]
    ws: String,
    /// HTTP address serving the console's static assets.
    #[arg(long)]
    http: Option<String>,
    /// Directory of built console assets.
    #[arg(long, requires = "http")]
    assets: Option<PathBuf>,
    #[arg(long, default_value = "ur5", conflicts_with = "station")]
    model: String,
    #[arg(long, requires = "arm")]
    station: Option<PathBuf>,
    #[arg(long, requires = "station")]
    arm: Option<String>,
    #[arg(long, default_value_t = node::FOLLOWER_NODE)]
    follower_node: u8,
    #[arg(long, default_value_t = node::BRIDGE_NODE)]
    node_id: u8,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Leader arm model file or shipped name.
    #[arg(long)]
    leader: String,
    /// Height sweep of leader configurations.
    #[arg(long)]
    sweep: PathBuf,
    /// Mass and spring parameters; the shipped set when absent.
    #[arg(long)]
    defaults: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("reading").required(true).args(["port", "ticks"])))]
struct CalibrateArgs {
    /// Serial device to read current encoder counts from.
    #[arg(long)]
    port: Option<String>,
    #[arg(long, default_value_t = DEFAULT_BAUD)]
    baud: u32,
    /// Encoder counts already read, one per joint.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    ticks: Option<Vec<i32>>,
    /// Joint angles (rad) the leader is held at.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pose: Vec<f64>,
    /// Servo ids per joint; 1..=n when absent.
    #[arg(long, value_delimiter = ',')]
    ids: Option<Vec<u8>>,
    /// +1 or -1 per joint; all +1 when absent.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    signs: Option<Vec<i8>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 30.0)]
    seconds: f64,
}

fn load_model(name: &str) -> Result<RobotModel> {
    match builtin::model(name) {
        Ok(m) => Ok(m),
        Err(_) => RobotModel::load(name).with_context(|| format!("model {name}")),
    }
}

/// Station arms as (name, sim); the named arm first.
fn station_arms(path: &PathBuf, arm: &str) -> Result<Vec<(String, FollowerSim)>> {
    let station = StationConfig::load(path)?;
    let mut arms = station.build(mono_us())?;
    let Some(i) = arms.iter().position(|(n, _)| n == arm) else {
        bail!("arm `{arm}` is not in {}", path.display());
    };
    arms.swap(0, i);
    Ok(arms)
}

fn run_leader(args: LeaderArgs, stop: &AtomicBool) -> Result<()> {
    let teleop = match &args.teleop {
        Some(p) => TeleopConfig::load(p)?,
        None => TeleopConfig::default(),
    };
    let (arm, partner) = match (&args.station, &args.arm) {
        (Some(path), Some(name)) => {
            let arms = station_arms(path, name)?;
            let geometry = |sim: &FollowerSim| -> Result<ArmGeometry> {
                Ok(teleop.arm_geometry(ArmGeometry::new(sim.model.clone()).with_base(sim.base))?)
            };
            let arm = geometry(&arms[0].1)?;
            let partner = match (arms.get(1), args.partner_node) {
                (Some((_, sim)), Some(id)) => Some((geometry(sim)?, id)),
                (Some((other, _)), None) => {
                    log::warn!("station arm `{other}` is ignored without --partner-node");
                    None
                }
                _ => None,
            };
            (arm, partner)
        }
        _ => (teleop.arm_geometry(ArmGeometry::new(load_model(&args.model)?))?, None),
    };
    let dof = arm.model.dof();
    let calib = match &args.calib {
        Some(p) => Some(CalibrationMap::load(p)?),
        None => None,
    };
    if calib.as_ref().is_some_and(|c| c.dof() != dof) {
        bail!("calibration has {} joints, the follower {dof}", calib.as_ref().map_or(0, |c| c.dof()));
    }
    let cfg = TeleopNodeConfig {
        teleop,
        arm,
        follower_node: args.follower_node,
        partner,
    };
    let virtual_calib = || calib.clone().map_or_else(|| CalibrationMap::uniform(dof, 1, 2048), Ok);
    match (&args.port, args.virtual_kind) {
        (Some(port), _) => {
            let Some(calib) = calib.clone() else {
                bail!("--port needs --calib");
            };
            let bus = ServoBus::new(SerialTransport::open(port, args.baud)?, BusOptions::default());
            drive(BusLeader { bus, calib }, cfg, &args, stop)
        }
        (None, Some(VirtualKind::Console)) => drive(RemoteLeader::new(args.console_node, dof), cfg, &args, stop),
        (None, Some(kind)) => {
            let generator = match kind {
                VirtualKind::Script => {
                    let Some(path) = &args.script else {
                        bail!("--virtual script needs --script");
                    };
                    Generator::Script(WaypointScript::load(path)?)
                }
                _ => Generator::Sine(match &args.sine {
                    Some(path) => {
                        let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
                        serde_json::from_str::<Vec<SineChannel>>(&text).with_context(|| path.display().to_string())?
                    }
                    None => default_sine(&cfg.arm.model)?,
                }),
            };
            let calib = virtual_calib()?;
            let bus = ServoBus::new(
                VirtualBus::new(TimedLeader::new(VirtualLeader::new(calib.clone(), generator)?)),
                BusOptions::default(),
            );
            drive(BusLeader { bus, calib }, cfg, &args, stop)
        }
        (None, None) => unreachable!("clap requires a leader source"),
    }
}

/// Small motion about the bench pose for the UR5, mid-range otherwise.
fn default_sine(model: &RobotModel) -> Result<Vec<SineChannel>> {
    if model.name() == "ur5" {
        return Ok(BenchConfig::ur5(0.0)?.sine);
    }
    Ok(model
        .mid_range()
        .iter()
        .map(|&c| SineChannel {
            center: c,
            amplitude: 0.1,
            frequency_hz: 0.1,
            phase: 0.0,
        })
        .collect())
}

fn drive<S: LeaderSource>(source: S, cfg: TeleopNodeConfig, args: &LeaderArgs, stop: &AtomicBool) -> Result<()> {
    let mut sub = args.net.subscriber()?;
    let mut publisher = args.net.publisher(args.node_id)?;
    let stats = LeaderNode::new(source, cfg, mono_us())?.run(&mut publisher, &mut sub, stop)?;
    log::info!(
        "leader stopped: {} ticks, {} commands, {} faults, {} read errors",
        stats.ticks,
        stats.commands,
        stats.faults,
        stats.read_errors
    );
    Ok(())
}

fn run_follower(args: FollowerArgs, stop: &AtomicBool) -> Result<()> {
    let mut sim = match (&args.station, &args.arm) {
        (Some(path), Some(name)) => station_arms(path, name)?.swap_remove(0).1,
        _ => {
            let model = load_model(&args.model)?;
            let q0 = model.mid_range();
            FollowerSim::new(model, q0, mono_us())?
        }
    };
    if let Some(q0) = &args.q0 {
        let base = sim.base;
        sim = FollowerSim::new(sim.model.clone(), JointVector::from_slice(q0)?, mono_us())?;
        sim.base = base;
    }
    let mut sub = args.net.subscriber()?;
    let mut publisher = args.net.publisher(args.node_id)?;
    let stats = FollowerSimNode::new(sim, args.rate)?.run(&mut publisher, &mut sub, stop)?;
    log::info!(
        "follower stopped: {} ticks, {} commands received",
        stats.ticks,
        stats.commands_received
    );
    Ok(())
}

fn run_record(args: RecordArgs, stop: &AtomicBool) -> Result<()> {
    let model = load_model(&args.model)?;
    let mut meta = SessionMeta::now(model.name(), model.dof(), args.alpha, args.rate);
    meta.notes = args.notes.clone();
    let target = match (&args.out, &args.dir) {
        (Some(p), _) => RecordTarget::File(p.clone()),
        (None, Some(d)) => {
            std::fs::create_dir_all(d).with_context(|| d.display().to_string())?;
            RecordTarget::Directory(d.clone())
        }
        (None, None) => unreachable!("clap requires a record target"),
    };
    let mut sub = args.net.subscriber()?;
    let mut publisher = args.net.publisher(args.node_id)?;
    let node = RecorderNode::new(meta, args.leader_node, args.follower_node, target)?;
    for (path, count) in node.run(&mut publisher, &mut sub, stop)? {
        log::info!("wrote {count} records to {}", path.display());
    }
    Ok(())
}

fn run_replay(args: ReplayArgs, stop: &AtomicBool) -> Result<()> {
    let mut publisher = args.net.publisher(args.node_id)?;
    let stats = node::run_replay(&args.session, args.speed, &mut publisher, stop)?;
    log::info!("replayed {} commands in {:.3} s", stats.emitted, stats.wall.as_secs_f64());
    Ok(())
}

fn run_validate(args: ValidateArgs) -> Result<bool> {
    let report = recorder::validate(&args.session);
    if report.is_ok() {
        let s = recorder::read_session(&args.session)?;
        println!(
            "ok: {} records, {:.3} s",
            s.records.len(),
            s.duration_us() as f64 / 1e6
        );
        return Ok(true);
    }
    println!("{report}");
    Ok(false)
}

fn run_bridge(args: BridgeArgs, stop: &AtomicBool) -> Result<()> {
    let (model, base) = match (&args.station, &args.arm) {
        (Some(path), Some(name)) => {
            let (_, sim) = station_arms(path, name)?.swap_remove(0);
            (sim.model, sim.base)
        }
        _ => (load_model(&args.model)?, Pose::identity()),
    };
    let _http = match &args.http {
        Some(addr) => Some(http::StaticServer::start(addr, args.assets.clone())?),
        None => None,
    };
    let ws = WsBridge::bind(&args.ws, Vec::new())?;
    log::info!("console websocket on ws://{}", ws.local_addr());
    let mut sub = args.net.subscriber()?;
    let mut publisher = args.net.publisher(args.node_id)?;
    BridgeNode::new(ws, model, base, args.follower_node).run(&mut publisher, &mut sub, stop)?;
    Ok(())
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let started = Instant::now();
    let leader = load_model(&args.leader)?;
    let sweep = Sweep::load(&args.sweep)?;
    let defaults = match &args.defaults {
        Some(p) => LeaderDefaults::load(p)?,
        None => LeaderDefaults::shipped(),
    };
    let rows = regularization_table(
        &leader,
        &defaults.inertias(&leader),
        &defaults.springs,
        &sweep.configurations,
    )?;
    let file = std::fs::File::create(&args.out).with_context(|| args.out.display().to_string())?;
    let mut out = std::io::BufWriter::new(file);
    write_regularization_csv(&mut out, &rows)?;
    std::io::Write::flush(&mut out)?;
    log::info!(
        "{} rows written to {} in {:.1} ms",
        rows.len(),
        args.out.display(),
        started.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn run_calibrate(args: CalibrateArgs) -> Result<()> {
    let n = args.pose.len();
    let ids = args.ids.clone().unwrap_or_else(|| (1..=n as u8).collect());
    let signs = args.signs.clone().unwrap_or_else(|| vec![1; n]);
    let ticks = match (&args.ticks, &args.port) {
        (Some(t), _) => t.clone(),
        (None, Some(port)) => {
            let mut bus = ServoBus::new(SerialTransport::open(port, args.baud)?, BusOptions::default());
            bus.read_positions(&ids)?.iter().map(|r| r.ticks).collect()
        }
        (None, None) => unreachable!("clap requires a reading"),
    };
    let calib = CalibrationMap::from_known_pose(&ids, &signs, &ticks, &args.pose)?;
    let text = serde_json::to_string_pretty(&calib)?;
    std::fs::write(&args.out, text + "\n").with_context(|| args.out.display().to_string())?;
    log::info!("calibration written to {}", args.out.display());
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<bool> {
    let report = bench::loopback(&BenchConfig::ur5(args.seconds)?)?;
    println!("commands        {}", report.commands);
    println!("faults          {}", report.faults);
    println!("read errors     {}", report.read_errors);
    println!("tracking rms    {:.5} rad", report.tracking_rms);
    println!("tracking max    {:.5} rad", report.tracking_max);
    println!("latency p50     {} us", report.latency_p50_us);
    println!("latency p99     {} us", report.latency_p99_us);
    println!("rate excess     {:.3e} rad", report.max_rate_excess);
    Ok(report.faults == 0 && report.tracking_rms < 0.02 && report.max_rate_excess <= 1e-12 && report.latency_p50_us < 2000)
}

fn init_logging() {
    let level = std::env::var("GELLO_LOG").unwrap_or_else(|_| "info".into());
    let known = ["error", "warn", "info", "debug"];
    let chosen = if known.contains(&level.as_str()) { level.as_str() } else { "info" };
    env_logger::Builder::new().parse_filters(chosen).init();
    if chosen != level {
        log::warn!("GELLO_LOG={level} is not one of {known:?}; using info");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed)) {
        log::warn!("no interrupt handler: {e}");
    }
    let result = match cli.command {
        Command::Leader(a) => run_leader(a, &stop).map(|_| true),
        Command::FollowerSim(a) => run_follower(a, &stop).map(|_| true),
        Command::Record(a) => run_record(a, &stop).map(|_| true),
        Command::Replay(a) => run_replay(a, &stop).map(|_| true),
        Command::Validate(a) => run_validate(a),
        Command::Bridge(a) => run_bridge(a, &stop).map(|_| true),
        Command::AnalyzeRegularization(a) => run_analyze(a).map(|_| true),
        Command::Calibrate(a) => run_calibrate(a).map(|_| true),
        Command::Bench(a) => run_bench(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
