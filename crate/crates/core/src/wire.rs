//! Length-prefixed TCP transport and server process lifecycle.
//!
//! Every payload on the agent and monitor sockets is preceded by its length
//! as a 4-byte unsigned big-endian integer.

use std::collections::BTreeSet;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU16, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use thiserror::Error;

use crate::mockserver::MockServer;
use crate::trace::{Direction, TraceTap};

/// Frames larger than this are rejected.
pub const MAX_FRAME_LEN: usize = 1 << 20;
pub const DEFAULT_AGENT_PORT: u16 = 3100;
/// The monitor port sits this far above the agent port.
pub const MONITOR_PORT_OFFSET: u16 = 1000;
pub const SERVER_BIN_ENV: &str = "RCSS_SERVER_BIN";

const KILL_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum WireError {
    #[error("empty payload")]
    EmptyPayload,
    #[error("connection closed by peer")]
    ConnectionClosed,
    #[error("connection closed mid-frame ({got} of {expected} bytes)")]
    TruncatedFrame { expected: usize, got: usize },
    #[error("frame of {0} bytes exceeds the 1 MiB cap")]
    OversizeFrame(usize),
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("failed to spawn server: {0}")]
    SpawnFailed(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Prefixes `payload` with its big-endian length.
pub fn frame_encode(payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if payload.is_empty() {
        return Err(WireError::EmptyPayload);
    }
    if payload.len() > MAX_FRAME_LEN {
        return Err(WireError::OversizeFrame(payload.len()));
    }
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn frame_write<W: Write + ?Sized>(w: &mut W, payload: &[u8]) -> Result<(), WireError> {
    let frame = frame_encode(payload)?;
    w.write_all(&frame).map_err(map_io)?;
    w.flush().map_err(map_io)
}

/// Reads one complete frame, tolerating arbitrary fragmentation.
pub fn frame_read<R: Read + ?Sized>(r: &mut R) -> Result<Vec<u8>, WireError> {
    let mut prefix = [0u8; 4];
    let got = read_full(r, &mut prefix)?;
    if got == 0 {
        return Err(WireError::ConnectionClosed);
    }
    if got < 4 {
        return Err(WireError::TruncatedFrame { expected: 4, got });
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::OversizeFrame(len));
    }
    if len == 0 {
        return Err(WireError::EmptyPayload);
    }
    let mut body = vec![0u8; len];
    let got = read_full(r, &mut body)?;
    if got < len {
        return Err(WireError::TruncatedFrame { expected: len, got });
    }
    Ok(body)
}

/// Fills `buf` until full or EOF; returns the number of bytes read.
fn read_full<R: Read + ?Sized>(r: &mut R, buf: &mut [u8]) -> Result<usize, WireError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(map_io(e)),
        }
    }
    Ok(filled)
}

fn map_io(e: io::Error) -> WireError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => WireError::Timeout("socket read".into()),
        ErrorKind::ConnectionReset | ErrorKind::BrokenPipe | ErrorKind::ConnectionAborted => {
            WireError::ConnectionClosed
        }
        _ => WireError::Io(e),
    }
}

/// A framed client connection. Owned by one environment at a time.
pub struct Connection {
    stream: TcpStream,
    tap: Option<TraceTap>,
}

impl Connection {
    /// Connects, retrying until `timeout` elapses.
    pub fn connect(host: &str, port: u16, timeout: Duration) -> Result<Self, WireError> {
        let addr = resolve(host, port)?;
        let deadline = Instant::now() + timeout;
        loop {
            match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    return Ok(Connection { stream, tap: None });
                }
                Err(e) if Instant::now() < deadline => {
                    debug!("connect {addr}: {e}; retrying");
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => {
                    return Err(WireError::Timeout(format!("connecting to {addr}: {e}")));
                }
            }
        }
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self, WireError> {
        stream.set_nodelay(true)?;
        Ok(Connection { stream, tap: None })
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> Result<(), WireError> {
        self.stream.set_read_timeout(timeout)?;
        Ok(())
    }

    /// Mirrors every payload sent or received into a trace.
    pub fn set_tap(&mut self, tap: Option<TraceTap>) {
        self.tap = tap;
    }

    pub fn send(&mut self, payload: &[u8]) -> Result<(), WireError> {
        frame_write(&mut self.stream, payload)?;
        if let Some(tap) = &self.tap {
            tap.record(Direction::ToServer, payload);
        }
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Vec<u8>, WireError> {
        let payload = frame_read(&mut self.stream)?;
        if let Some(tap) = &self.tap {
            tap.record(Direction::FromServer, &payload);
        }
        Ok(payload)
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }
}

fn resolve(host: &str, port: u16) -> Result<SocketAddr, WireError> {
    (host, port)
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| WireError::Io(io::Error::new(ErrorKind::NotFound, host.to_string())))
}

// Ports owned by live server handles in this process.
static PORTS_IN_USE: Mutex<BTreeSet<u16>> = Mutex::new(BTreeSet::new());
static LIVE_SERVERS: AtomicUsize = AtomicUsize::new(0);
static LIVE_PROCESSES: AtomicUsize = AtomicUsize::new(0);

/// Holds ports in the process-wide registry until dropped.
#[derive(Debug)]
struct PortReservation(Vec<u16>);

impl PortReservation {
    fn acquire(ports: &[u16]) -> Result<Self, WireError> {
        let mut used = PORTS_IN_USE.lock().unwrap();
        if let Some(&p) = ports.iter().find(|p| used.contains(p)) {
            return Err(WireError::PortInUse(p));
        }
        used.extend(ports.iter().copied());
        Ok(PortReservation(ports.to_vec()))
    }
}

impl Drop for PortReservation {
    fn drop(&mut self) {
        let mut used = PORTS_IN_USE.lock().unwrap();
        for p in &self.0 {
            used.remove(p);
        }
    }
}

/// Ports currently reserved by live server handles.
pub fn ports_in_use() -> Vec<u16> {
    PORTS_IN_USE.lock().unwrap().iter().copied().collect()
}

/// Number of server handles (mock or process) not yet closed.
pub fn live_servers() -> usize {
    LIVE_SERVERS.load(Ordering::SeqCst)
}

/// Number of spawned OS server processes not yet reaped.
pub fn live_processes() -> usize {
    LIVE_PROCESSES.load(Ordering::SeqCst)
}

pub fn port_is_free(port: u16) -> bool {
    TcpListener::bind((Ipv4Addr::LOCALHOST, port)).is_ok()
}

static AUTO_CURSOR: AtomicU16 = AtomicU16::new(0);

/// Picks a base port such that `base..base+n` and the matching monitor ports
/// are free. Successive calls within a process hand out disjoint blocks.
pub fn auto_base_port(n: usize) -> Result<u16, WireError> {
    const LO: u16 = 20000;
    const SPAN: u16 = 8000;
    let n = n.max(1) as u16;
    for _ in 0..(SPAN / n.max(1) + 1) {
        let offset = AUTO_CURSOR.fetch_add(n, Ordering::SeqCst) % SPAN;
        // agent ports live in even thousands, monitor ports in odd ones
        let block = offset / 1000 * 2000 + offset % 1000;
        let base = LO + block;
        if base % 1000 + n > 1000 || base + MONITOR_PORT_OFFSET + n >= 40000 {
            continue;
        }
        let used = PORTS_IN_USE.lock().unwrap().clone();
        let ok = (0..n).all(|i| {
            let a = base + i;
            let m = a + MONITOR_PORT_OFFSET;
            !used.contains(&a) && !used.contains(&m) && port_is_free(a) && port_is_free(m)
        });
        if ok {
            return Ok(base);
        }
    }
    Err(WireError::SpawnFailed("no free port block".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ServerKind {
    /// A server started by someone else; never terminated by us.
    External,
    /// An `rcssserver3d` (or compatible) OS process we spawned.
    SpawnedReal,
    /// The in-process mock simulator.
    SpawnedMock,
}

impl std::str::FromStr for ServerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "external" => Ok(ServerKind::External),
            "real" | "spawned-real" => Ok(ServerKind::SpawnedReal),
            "mock" | "spawned-mock" => Ok(ServerKind::SpawnedMock),
            _ => Err(format!(
                "unknown server kind {s:?} (expected mock, real, external)"
            )),
        }
    }
}

impl std::fmt::Display for ServerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ServerKind::External => "external",
            ServerKind::SpawnedReal => "real",
            ServerKind::SpawnedMock => "mock",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptions {
    pub host: String,
    /// Falls back to `$RCSS_SERVER_BIN` when unset.
    pub binary_path: Option<PathBuf>,
    /// Arguments placed before `--agent-port`/`--server-port`.
    pub extra_args: Vec<String>,
    pub startup_timeout: Duration,
    /// Seed for the mock simulator.
    pub seed: u64,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            host: "127.0.0.1".into(),
            binary_path: None,
            extra_args: Vec::new(),
            startup_timeout: Duration::from_secs(10),
            seed: 0,
        }
    }
}

enum Owned {
    Nothing,
    Mock(MockServer),
    Process(Child),
}

/// A running (or external) simulation server.
pub struct ServerHandle {
    pub agent_port: u16,
    pub monitor_port: u16,
    pub process_id: Option<u32>,
    pub kind: ServerKind,
    owned: Owned,
    ports: Option<PortReservation>,
    open: bool,
}

impl std::fmt::Debug for ServerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerHandle")
            .field("agent_port", &self.agent_port)
            .field("monitor_port", &self.monitor_port)
            .field("process_id", &self.process_id)
            .field("kind", &self.kind)
            .field("open", &self.open)
            .finish()
    }
}

/// Starts (or, for `External`, just describes) a server with its agent port at
/// `base_port` and its monitor port 1000 above.
pub fn spawn_server(
    kind: ServerKind,
    base_port: u16,
    opts: &ServerOptions,
) -> Result<ServerHandle, WireError> {
    let agent_port = base_port;
    let monitor_port = base_port
        .checked_add(MONITOR_PORT_OFFSET)
        .ok_or(WireError::PortInUse(base_port))?;

    let (owned, process_id, ports) = match kind {
        ServerKind::External => (Owned::Nothing, None, None),
        ServerKind::SpawnedMock => {
            let ports = PortReservation::acquire(&[agent_port, monitor_port])?;
            let server = MockServer::start(agent_port, monitor_port, opts.seed)?;
            (Owned::Mock(server), None, Some(ports))
        }
        ServerKind::SpawnedReal => {
            let ports = PortReservation::acquire(&[agent_port, monitor_port])?;
            for p in [agent_port, monitor_port] {
                if !port_is_free(p) {
                    return Err(WireError::PortInUse(p));
                }
            }
            let child = spawn_process(agent_port, monitor_port, opts)?;
            let pid = child.id();
            (Owned::Process(child), Some(pid), Some(ports))
        }
    };

    if kind != ServerKind::External {
        LIVE_SERVERS.fetch_add(1, Ordering::SeqCst);
    }
    let mut handle = ServerHandle {
        agent_port,
        monitor_port,
        process_id,
        kind,
        owned,
        ports,
        open: true,
    };
    if let Err(e) = handle.wait_ready(opts) {
        handle.close();
        return Err(e);
    }
    Ok(handle)
}

fn spawn_process(
    agent_port: u16,
    monitor_port: u16,
    opts: &ServerOptions,
) -> Result<Child, WireError> {
    let binary = opts
        .binary_path
        .clone()
        .or_else(|| std::env::var_os(SERVER_BIN_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            WireError::SpawnFailed(format!(
                "no server binary configured (set {SERVER_BIN_ENV})"
            ))
        })?;
    if !binary.is_file() {
        return Err(WireError::SpawnFailed(format!(
            "server binary {} not found",
            binary.display()
        )));
    }
    let child = Command::new(&binary)
        .args(&opts.extra_args)
        .arg("--agent-port")
        .arg(agent_port.to_string())
        .arg("--server-port")
        .arg(monitor_port.to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| WireError::SpawnFailed(format!("{}: {e}", binary.display())))?;
    LIVE_PROCESSES.fetch_add(1, Ordering::SeqCst);
    debug!("spawned {} as pid {}", binary.display(), child.id());
    Ok(child)
}

impl ServerHandle {
    fn wait_ready(&mut self, opts: &ServerOptions) -> Result<(), WireError> {
        let Owned::Process(child) = &mut self.owned else {
            return Ok(());
        };
        let addr = resolve(&opts.host, self.agent_port)?;
        let deadline = Instant::now() + opts.startup_timeout;
        loop {
            if let Some(status) = child.try_wait()? {
                return Err(WireError::SpawnFailed(format!(
                    "server exited early ({status})"
                )));
            }
            if TcpStream::connect_timeout(&addr, Duration::from_millis(200)).is_ok() {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(WireError::Timeout(format!(
                    "server did not accept on port {} within {:?}",
                    self.agent_port, opts.startup_timeout
                )));
            }
            thread::sleep(Duration::from_millis(25));
        }
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    /// Stops whatever this handle owns. Safe to call more than once.
    pub fn close(&mut self) {
        if !self.open {
            return;
        }
        self.open = false;
        match std::mem::replace(&mut self.owned, Owned::Nothing) {
            Owned::Nothing => {}
            Owned::Mock(mut server) => server.stop(),
            Owned::Process(child) => terminate(child),
        }
        if self.kind != ServerKind::External {
            LIVE_SERVERS.fetch_sub(1, Ordering::SeqCst);
        }
        self.ports = None;
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.close();
    }
}

fn terminate(mut child: Child) {
    let pid = child.id();
    // SAFETY: plain syscall on a pid we spawned and have not yet reaped.
    unsafe {
        libc::kill(pid as libc::pid_t, libc::SIGTERM);
    }
    let deadline = Instant::now() + KILL_GRACE;
    loop {
        match child.try_wait() {
            Ok(Some(_)) => break,
            Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(20)),
            Ok(None) => {
                warn!("server pid {pid} ignored SIGTERM; killing");
                let _ = child.kill();
                let _ = child.wait();
                break;
            }
            Err(e) => {
                warn!("waiting for server pid {pid}: {e}");
                let _ = child.kill();
                let _ = child.wait();
                break;
            }
        }
    }
    LIVE_PROCESSES.fetch_sub(1, Ordering::SeqCst);
}
