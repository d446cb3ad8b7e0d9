//! Source announcement and discovery over UDP broadcast.
//!
//! Each sender periodically broadcasts one line:
//!
//! ```text
//! TSRM-ANN v1 <group> <name> <host> <port>
//! ```
//!
//! Finders listening on the discovery port keep the latest announcement per
//! `(group, name)` and forget sources that stay silent longer than the ttl.
//! An unspecified host (`0.0.0.0` or `::`) is replaced by the datagram's
//! source address.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use socket2::{Domain, Protocol, Socket, Type};
use thiserror::Error;

pub const DEFAULT_DISCOVERY_PORT: u16 = 5959;
pub const DEFAULT_GROUP: &str = "public";
pub const PORT_ENV: &str = "TSRM_DISCOVERY_PORT";
pub const MAX_DATAGRAM_LEN: usize = 512;
pub const MAX_NAME_LEN: usize = 255;
const LINE_PREFIX: &str = "TSRM-ANN v1";
const POLL_TICK: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("invalid advertisement: {0}")]
    InvalidAdvertisement(String),
    #[error("malformed announcement: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A named sender's stream endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceAdvertisement {
    pub name: String,
    pub group: String,
    pub host: IpAddr,
    pub port: u16,
    /// When a finder last heard this source. `None` for local values.
    pub announced_at: Option<Instant>,
}

fn check_label(what: &str, s: &str) -> Result<(), DiscoveryError> {
    if s.is_empty() {
        return Err(DiscoveryError::InvalidAdvertisement(format!("{what} is empty")));
    }
    if s.len() > MAX_NAME_LEN {
        return Err(DiscoveryError::InvalidAdvertisement(format!("{what} is {} bytes, limit {MAX_NAME_LEN}", s.len())));
    }
    if s.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(DiscoveryError::InvalidAdvertisement(format!("{what} {s:?} contains whitespace")));
    }
    Ok(())
}

impl SourceAdvertisement {
    pub fn new(name: &str, group: &str, host: IpAddr, port: u16) -> Result<Self, DiscoveryError> {
        let ad =
            SourceAdvertisement { name: name.to_string(), group: group.to_string(), host, port, announced_at: None };
        ad.validate()?;
        Ok(ad)
    }

    pub fn validate(&self) -> Result<(), DiscoveryError> {
        check_label("name", &self.name)?;
        check_label("group", &self.group)?;
        if self.port == 0 {
            return Err(DiscoveryError::InvalidAdvertisement("port is 0".into()));
        }
        let len = self.to_line().len();
        if len > MAX_DATAGRAM_LEN {
            return Err(DiscoveryError::InvalidAdvertisement(format!(
                "announcement is {len} bytes, limit {MAX_DATAGRAM_LEN}"
            )));
        }
        Ok(())
    }

    pub fn endpoint(&self) -> SocketAddr {
        SocketAddr::new(self.host, self.port)
    }

    pub fn key(&self) -> (String, String) {
        (self.group.clone(), self.name.clone())
    }

    pub fn to_line(&self) -> String {
        format!("{LINE_PREFIX} {} {} {} {}", self.group, self.name, self.host, self.port)
    }

    pub fn parse_line(line: &str) -> Result<Self, DiscoveryError> {
        let line = line.strip_suffix('\n').unwrap_or(line);
        let rest = line
            .strip_prefix(LINE_PREFIX)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| DiscoveryError::Malformed(format!("missing prefix in {line:?}")))?;
        let parts: Vec<&str> = rest.split(' ').collect();
        let [group, name, host, port] = parts[..] else {
            return Err(DiscoveryError::Malformed(format!("expected 4 fields in {line:?}")));
        };
        let host: IpAddr = host.parse().map_err(|_| DiscoveryError::Malformed(format!("bad host {host:?}")))?;
        let port: u16 = port.parse().map_err(|_| DiscoveryError::Malformed(format!("bad port {port:?}")))?;
        SourceAdvertisement::new(name, group, host, port).map_err(|e| DiscoveryError::Malformed(e.to_string()))
    }
}

impl fmt::Display for SourceAdvertisement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} {}", self.group, self.name, self.endpoint())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscoveryConfig {
    pub port: u16,
    pub announce_interval: Duration,
    pub ttl: Duration,
    /// Destinations for announcements, each on `port`.
    pub targets: Vec<IpAddr>,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            port: DEFAULT_DISCOVERY_PORT,
            announce_interval: Duration::from_secs(1),
            ttl: Duration::from_secs(5),
            targets: vec![IpAddr::V4(Ipv4Addr::BROADCAST), IpAddr::V4(Ipv4Addr::LOCALHOST)],
        }
    }
}

impl DiscoveryConfig {
    /// Defaults with the port taken from `TSRM_DISCOVERY_PORT` if set.
    pub fn from_env() -> Result<Self, DiscoveryError> {
        let mut cfg = DiscoveryConfig::default();
        if let Ok(v) = std::env::var(PORT_ENV) {
            cfg.port = v
                .parse()
                .map_err(|_| DiscoveryError::InvalidAdvertisement(format!("{PORT_ENV}={v:?} is not a port")))?;
        }
        Ok(cfg)
    }

    pub fn with_port(mut self, port: u16) -> Self {
        self.port = port;
        self
    }

    /// Sets the interval and a ttl of five intervals.
    pub fn with_interval(mut self, interval: Duration) -> Self {
        self.announce_interval = interval;
        self.ttl = interval * 5;
        self
    }

    pub fn loopback_only(mut self) -> Self {
        self.targets = vec![IpAddr::V4(Ipv4Addr::LOCALHOST)];
        self
    }
}

/// Latest announcement per `(group, name)`.
#[derive(Debug, Clone)]
pub struct FinderTable {
    entries: BTreeMap<(String, String), SourceAdvertisement>,
    ttl: Duration,
    malformed: u64,
}

impl FinderTable {
    pub fn new(ttl: Duration) -> Self {
        FinderTable { entries: BTreeMap::new(), ttl, malformed: 0 }
    }

    /// Records one datagram received from `from` at `now`. Malformed input is
    /// counted and ignored.
    pub fn ingest(&mut self, datagram: &[u8], from: IpAddr, now: Instant) -> Result<(), DiscoveryError> {
        let parsed = std::str::from_utf8(datagram)
            .map_err(|_| DiscoveryError::Malformed("not UTF-8".into()))
            .and_then(SourceAdvertisement::parse_line);
        let mut ad = match parsed {
            Ok(ad) => ad,
            Err(e) => {
                self.malformed += 1;
                return Err(e);
            }
        };
        if ad.host.is_unspecified() {
            ad.host = from;
        }
        ad.announced_at = Some(now);
        self.entries.insert(ad.key(), ad);
        Ok(())
    }

    pub fn expire(&mut self, now: Instant) {
        let ttl = self.ttl;
        self.entries.retain(|_, ad| ad.announced_at.is_some_and(|t| now.saturating_duration_since(t) <= ttl));
    }

    /// Live entries sorted by `(group, name)`.
    pub fn sources(&mut self, now: Instant) -> Vec<SourceAdvertisement> {
        self.expire(now);
        self.entries.values().cloned().collect()
    }

    pub fn malformed_count(&self) -> u64 {
        self.malformed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Periodic broadcaster for one advertisement. Stops when dropped.
pub struct Announcer {
    stop: Option<mpsc::Sender<()>>,
    thread: Option<JoinHandle<()>>,
    sent: Arc<AtomicU64>,
    advertisement: SourceAdvertisement,
}

pub fn start_announcer(ad: SourceAdvertisement, cfg: &DiscoveryConfig) -> Result<Announcer, DiscoveryError> {
    ad.validate()?;
    let socket = UdpSocket::bind((Ipv4Addr::UNSPECIFIED, 0))?;
    socket.set_broadcast(true)?;
    let line = ad.to_line();
    let targets: Vec<SocketAddr> = cfg.targets.iter().map(|ip| SocketAddr::new(*ip, cfg.port)).collect();
    let interval = cfg.announce_interval;
    let sent = Arc::new(AtomicU64::new(0));
    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let counter = Arc::clone(&sent);
    let thread = thread::Builder::new().name(format!("announce-{}", ad.name)).spawn(move || loop {
        for target in &targets {
            match socket.send_to(line.as_bytes(), target) {
                Ok(_) => {
                    counter.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => log::debug!("announce to {target} failed: {e}"),
            }
        }
        match stop_rx.recv_timeout(interval) {
            Err(RecvTimeoutError::Timeout) => {}
            _ => return,
        }
    })?;
    Ok(Announcer { stop: Some(stop_tx), thread: Some(thread), sent, advertisement: ad })
}

impl Announcer {
    pub fn advertisement(&self) -> &SourceAdvertisement {
        &self.advertisement
    }

    /// Datagrams sent so far, summed over targets.
    pub fn datagrams_sent(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Announcer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Listens on the discovery port and maintains a [`FinderTable`].
pub struct Finder {
    table: Arc<Mutex<FinderTable>>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    local_port: u16,
}

fn bind_shared_udp(port: u16) -> io::Result<UdpSocket> {
    let socket = Socket::new(Domain::IPV4, Type::DGRAM, Some(Protocol::UDP))?;
    socket.set_reuse_address(true)?;
    socket.bind(&SocketAddr::from((Ipv4Addr::UNSPECIFIED, port)).into())?;
    Ok(socket.into())
}

impl Finder {
    pub fn bind(cfg: &DiscoveryConfig) -> Result<Finder, DiscoveryError> {
        let socket = bind_shared_udp(cfg.port)?;
        socket.set_read_timeout(Some(POLL_TICK))?;
        let local_port = socket.local_addr()?.port();
        let table = Arc::new(Mutex::new(FinderTable::new(cfg.ttl)));
        let stop = Arc::new(AtomicBool::new(false));
        let (t, s) = (Arc::clone(&table), Arc::clone(&stop));
        let thread = thread::Builder::new().name("finder".into()).spawn(move || {
            let mut buf = [0u8; 2048];
            while !s.load(Ordering::Relaxed) {
                match socket.recv_from(&mut buf) {
                    Ok((n, from)) => {
                        let res = t.lock().unwrap().ingest(&buf[..n], from.ip(), Instant::now());
                        if let Err(e) = res {
                            log::debug!("dropped datagram from {from}: {e}");
                        }
                    }
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                    Err(e) => {
                        log::warn!("finder receive failed: {e}");
                        thread::sleep(POLL_TICK);
                    }
                }
            }
        })?;
        Ok(Finder { table, stop, thread: Some(thread), local_port })
    }

    pub fn local_port(&self) -> u16 {
        self.local_port
    }

    pub fn poll_sources(&self) -> Vec<SourceAdvertisement> {
        self.table.lock().unwrap().sources(Instant::now())
    }

    pub fn malformed_count(&self) -> u64 {
        self.table.lock().unwrap().malformed_count()
    }

    pub fn lookup(&self, group: &str, name: &str) -> Option<SourceAdvertisement> {
        self.poll_sources().into_iter().find(|s| s.group == group && s.name == name)
    }

    /// Polls until `pred` accepts the source list or `timeout` passes.
    pub fn wait_for<F>(&self, timeout: Duration, mut pred: F) -> Option<Vec<SourceAdvertisement>>
    where
        F: FnMut(&[SourceAdvertisement]) -> bool,
    {
        let deadline = Instant::now() + timeout;
        loop {
            let sources = self.poll_sources();
            if pred(&sources) {
                return Some(sources);
            }
            if Instant::now() >= deadline {
                return None;
            }
            thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Finder {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
