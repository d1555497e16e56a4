//! Demonstration sessions as JSON lines, with validation and timed replay.
//!
//! Line 1 is the [`SessionMeta`], then one [`Record`] per line, then
//! `{"footer":{"count":N,"crc32":C}}` where the CRC covers every byte before
//! the footer line. A writer that fails part way leaves an `aborted` line
//! instead of a footer.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::follower_sim::{FollowerSim, SimError};
use crate::kinematics::JointVector;
use crate::teleop::Phase;

pub const SCHEMA_VERSION: u32 = 1;
pub const FLUSH_INTERVAL: Duration = Duration::from_secs(1);
pub const MAX_REPLAY_SPEED: f64 = 10.0;

#[derive(Debug, Error)]
pub enum RecorderError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("record {index}: {reason}")]
    BadRecord { index: u64, reason: String },
    #[error("invalid session file: {0}")]
    Invalid(ValidationReport),
    #[error("replay speed must lie in (0, {MAX_REPLAY_SPEED}], got {0}")]
    Speed(f64),
    #[error("session already finished or aborted")]
    Closed,
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionMeta {
    pub schema_version: u32,
    pub robot_name: String,
    pub dof: usize,
    pub alpha_scale: f64,
    pub rate_hz: f64,
    pub start_wall_iso8601: String,
    #[serde(default)]
    pub notes: String,
}

impl SessionMeta {
    /// Meta stamped with the current wall-clock time.
    pub fn now(robot_name: &str, dof: usize, alpha_scale: f64, rate_hz: f64) -> Self {
        SessionMeta {
            schema_version: SCHEMA_VERSION,
            robot_name: robot_name.to_string(),
            dof,
            alpha_scale,
            rate_hz,
            start_wall_iso8601: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
            notes: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub t_mono_us: u64,
    pub leader_q: Vec<f64>,
    pub cmd_q: Vec<f64>,
    pub follower_q: Vec<f64>,
    pub gripper: f64,
    pub safety_flags: u32,
    pub phase: Phase,
}

impl Record {
    fn check(&self, dof: usize) -> Result<(), String> {
        for (name, v) in [("leader_q", &self.leader_q), ("cmd_q", &self.cmd_q), ("follower_q", &self.follower_q)] {
            if v.len() != dof {
                return Err(format!("{name} has {} values, expected {dof}", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(format!("{name} has a non-finite value"));
            }
        }
        if !(0.0..=1.0).contains(&self.gripper) {
            return Err(format!("gripper {} outside [0, 1]", self.gripper));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Footer {
    pub count: u64,
    pub crc32: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FooterLine {
    footer: Footer,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AbortedLine {
    aborted: Aborted,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Aborted {
    count: u64,
    reason: String,
}

/// Streams records to a session file.
pub struct SessionWriter<W: Write> {
    out: BufWriter<W>,
    crc: crc32fast::Hasher,
    dof: usize,
    count: u64,
    last_t: Option<u64>,
    last_flush: Instant,
    open: bool,
}

impl SessionWriter<File> {
    pub fn create(path: impl AsRef<Path>, meta: &SessionMeta) -> Result<Self, RecorderError> {
        Self::new(File::create(path)?, meta)
    }
}

impl<W: Write> SessionWriter<W> {
    pub fn new(sink: W, meta: &SessionMeta) -> Result<Self, RecorderError> {
        let mut w = SessionWriter {
            out: BufWriter::new(sink),
            crc: crc32fast::Hasher::new(),
            dof: meta.dof,
            count: 0,
            last_t: None,
            last_flush: Instant::now(),
            open: true,
        };
        let line = serde_json::to_string(meta).expect("meta serialises");
        w.line(&line)?;
        Ok(w)
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    fn line(&mut self, text: &str) -> Result<(), RecorderError> {
        let result = self
            .out
            .write_all(text.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .and_then(|_| {
                if self.last_flush.elapsed() >= FLUSH_INTERVAL {
                    self.last_flush = Instant::now();
                    self.out.flush()
                } else {
                    Ok(())
                }
            });
        if let Err(e) = result {
            self.abort(&e.to_string());
            return Err(e.into());
        }
        self.crc.update(text.as_bytes());
        self.crc.update(b"\n");
        Ok(())
    }

    /// Appends one record. Malformed records are refused without touching the file.
    pub fn write(&mut self, r: &Record) -> Result<(), RecorderError> {
        if !self.open {
            return Err(RecorderError::Closed);
        }
        let bad = |reason: String| RecorderError::BadRecord {
            index: self.count,
            reason,
        };
        r.check(self.dof).map_err(bad)?;
        if let Some(prev) = self.last_t {
            if r.t_mono_us <= prev {
                return Err(bad(format!("timestamp {} not after {prev}", r.t_mono_us)));
            }
        }
        let line = serde_json::to_string(r).expect("record serialises");
        self.line(&line)?;
        self.last_t = Some(r.t_mono_us);
        self.count += 1;
        Ok(())
    }

    /// Writes the footer and flushes; returns the record count.
    pub fn finish(mut self) -> Result<u64, RecorderError> {
        if !self.open {
            return Err(RecorderError::Closed);
        }
        let footer = FooterLine {
            footer: Footer {
                count: self.count,
                crc32: self.crc.clone().finalize(),
            },
        };
        let text = serde_json::to_string(&footer).expect("footer serialises");
        let result = writeln!(self.out, "{text}").and_then(|_| self.out.flush());
        if let Err(e) = result {
            self.abort(&e.to_string());
            return Err(e.into());
        }
        self.open = false;
        Ok(self.count)
    }

    /// Best effort: leaves a marker so readers see the session as partial.
    fn abort(&mut self, reason: &str) {
        if !self.open {
            return;
        }
        self.open = false;
        log::error!("session aborted after {} records: {reason}", self.count);
        let marker = AbortedLine {
            aborted: Aborted {
                count: self.count,
                reason: reason.to_string(),
            },
        };
        let text = serde_json::to_string(&marker).expect("marker serialises");
        let _ = writeln!(self.out, "{text}").and_then(|_| self.out.flush());
    }
}

impl<W: Write> Drop for SessionWriter<W> {
    fn drop(&mut self) {
        self.abort("writer dropped before finish");
    }
}

pub fn write_session<'a>(
    path: impl AsRef<Path>,
    meta: &SessionMeta,
    records: impl IntoIterator<Item = &'a Record>,
) -> Result<u64, RecorderError> {
    let mut w = SessionWriter::create(path, meta)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Defect {
    /// 1-based line number, when the defect belongs to one line.
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Defect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(n) => write!(f, "line {n}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub defects: Vec<Defect>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.defects.is_empty()
    }

    fn add(&mut self, line: Option<usize>, message: impl Into<String>) {
        self.defects.push(Defect {
            line,
            message: message.into(),
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        let parts: Vec<String> = self.defects.iter().map(Defect::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub meta: SessionMeta,
    pub records: Vec<Record>,
}

impl Session {
    pub fn duration_us(&self) -> u64 {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => b.t_mono_us - a.t_mono_us,
            _ => 0,
        }
    }
}

fn scan(path: &Path) -> (Option<Session>, ValidationReport) {
    let mut report = ValidationReport::default();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) => {
            report.add(None, format!("cannot open {}: {e}", path.display()));
            return (None, report);
        }
    };
    let mut reader = BufReader::new(file);
    let mut crc = crc32fast::Hasher::new();
    let mut meta: Option<SessionMeta> = None;
    let mut records = Vec::new();
    let mut footer: Option<(usize, Footer, u32)> = None;
    let mut last_t: Option<u64> = None;
    let mut buf = String::new();
    let mut n = 0;
    loop {
        buf.clear();
        match reader.read_line(&mut buf) {
            Ok(0) => break,
            Ok(_) => {}
            Err(e) => {
                report.add(Some(n + 1), format!("unreadable: {e}"));
                break;
            }
        }
        n += 1;
        let text = buf.trim_end_matches(['\n', '\r']);
        if footer.is_some() {
            report.add(Some(n), "content after footer");
            continue;
        }
        if n == 1 {
            match serde_json::from_str::<SessionMeta>(text) {
                Ok(m) => {
                    if m.schema_version != SCHEMA_VERSION {
                        report.add(Some(1), format!("unsupported schema version {}", m.schema_version));
                    }
                    meta = Some(m);
                }
                Err(e) => report.add(Some(1), format!("bad meta: {e}")),
            }
            crc.update(buf.as_bytes());
            continue;
        }
        if let Ok(f) = serde_json::from_str::<FooterLine>(text) {
            footer = Some((n, f.footer, crc.clone().finalize()));
            continue;
        }
        if let Ok(a) = serde_json::from_str::<AbortedLine>(text) {
            report.add(
                Some(n),
                format!("session aborted after {} records: {}", a.aborted.count, a.aborted.reason),
            );
            crc.update(buf.as_bytes());
            continue;
        }
        crc.update(buf.as_bytes());
        match serde_json::from_str::<Record>(text) {
            Ok(r) => {
                if let Some(m) = &meta {
                    if let Err(reason) = r.check(m.dof) {
                        report.add(Some(n), reason);
                    }
                }
                if let Some(prev) = last_t {
                    if r.t_mono_us <= prev {
                        report.add(Some(n), format!("timestamp regression: {} after {prev}", r.t_mono_us));
                    }
                }
                last_t = Some(r.t_mono_us);
                records.push(r);
            }
            Err(e) => report.add(Some(n), format!("bad record: {e}")),
        }
    }
    if n == 0 {
        report.add(None, "empty file");
    }
    match footer {
        None => {
            if n > 0 {
                report.add(None, "missing footer");
            }
        }
        Some((line, f, actual_crc)) => {
            if f.count != records.len() as u64 {
                report.add(Some(line), format!("footer count {} but {} records", f.count, records.len()));
            }
            if f.crc32 != actual_crc {
                report.add(Some(line), format!("crc32 mismatch: footer {:#010x}, content {actual_crc:#010x}", f.crc32));
            }
        }
    }
    (meta.map(|meta| Session { meta, records }), report)
}

/// Checks a session file; problems are returned as data.
pub fn validate(path: impl AsRef<Path>) -> ValidationReport {
    scan(path.as_ref()).1
}

/// Loads a session, refusing any file that does not validate.
pub fn read_session(path: impl AsRef<Path>) -> Result<Session, RecorderError> {
    match scan(path.as_ref()) {
        (Some(s), report) if report.is_ok() => Ok(s),
        (_, report) => Err(RecorderError::Invalid(report)),
    }
}

/// Emission offsets from replay start for each record at `speed`.
pub fn replay_schedule(session: &Session, speed: f64) -> Result<Vec<Duration>, RecorderError> {
    if !(speed > 0.0 && speed <= MAX_REPLAY_SPEED) {
        return Err(RecorderError::Speed(speed));
    }
    let t0 = session.records.first().map_or(0, |r| r.t_mono_us);
    Ok(session
        .records
        .iter()
        .map(|r| Duration::from_secs_f64((r.t_mono_us - t0) as f64 / 1e6 / speed))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayStats {
    pub emitted: usize,
    /// Wall time from the first emission to the last.
    pub wall: Duration,
}

/// Calls `emit` with each record's command at its scheduled time. Deadlines
/// are absolute so sleep jitter does not accumulate. Stops early when `stop`
/// is raised.
pub fn replay(
    session: &Session,
    speed: f64,
    stop: Option<&AtomicBool>,
    mut emit: impl FnMut(&Record),
) -> Result<ReplayStats, RecorderError> {
    let schedule = replay_schedule(session, speed)?;
    let start = Instant::now();
    let mut first = None;
    let mut last = start;
    let mut emitted = 0;
    for (r, offset) in session.records.iter().zip(schedule) {
        if stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
            break;
        }
        let deadline = start + offset;
        sleep_until(deadline);
        let now = Instant::now();
        first.get_or_insert(now);
        last = now;
        emit(r);
        emitted += 1;
    }
    Ok(ReplayStats {
        emitted,
        wall: first.map_or(Duration::ZERO, |f| last - f),
    })
}

/// Sleeps until `deadline`, spinning for the last few hundred microseconds.
pub fn sleep_until(deadline: Instant) {
    const SPIN: Duration = Duration::from_micros(300);
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN {
            std::thread::sleep(left - SPIN);
        } else {
            std::hint::spin_loop();
        }
    }
}

/// Feeds the recorded commands into `sim`, using recorded time steps (the
/// first step is one nominal period), and returns the resulting joints.
pub fn replay_into_sim(session: &Session, sim: &mut FollowerSim) -> Result<Vec<JointVector>, RecorderError> {
    let mut prev: Option<u64> = None;
    let mut out = Vec::with_capacity(session.records.len());
    for r in &session.records {
        let dt = match prev {
            Some(p) => (r.t_mono_us - p) as f64 / 1e6,
            None => 1.0 / session.meta.rate_hz,
        };
        prev = Some(r.t_mono_us);
        out.push(sim.step(&r.cmd_q, dt)?.q.clone());
    }
    Ok(out)
}

/// Default file name for a new session in `dir`.
pub fn session_path(dir: impl AsRef<Path>) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    dir.as_ref().join(format!("session-{stamp}.jsonl"))
}
