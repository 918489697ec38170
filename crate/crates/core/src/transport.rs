//! The E3 connector: three logical channels per dApp–RAN pairing.
//!
//! * setup: request-reply, carries Setup and Subscription exchanges;
//! * inbound: publish-subscribe, RAN → dApp (Indication, XAppControl);
//! * outbound: publish-subscribe, dApp → RAN (Control, Report).
//!
//! The RAN side is the server on all three sockets. Data endpoints are
//! derived from the setup endpoint: `.in`/`.out` suffixes for Unix domain
//! sockets, ports +1/+2 for TCP. Publishers never block: each channel keeps a
//! bounded queue that drops its oldest entry when full and counts the drop.
//!
//! SCTP is not a live transport here; it only exists in the wire-overhead
//! accountant ([`account_overhead`]).

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::os::unix::fs::FileTypeExt;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::codec::{
    CodecError, E3Pdu, FrameHeader, SetupRequest, SetupResponse, SubscriptionRequest,
    SubscriptionResponse, HEADER_LEN,
};

pub const DEFAULT_QUEUE_CAPACITY: usize = 64;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);
/// Environment variable that overrides the `--endpoint` flag.
pub const ENDPOINT_ENV: &str = "E3_ENDPOINT";

/// Frames larger than this are treated as stream corruption.
const MAX_BODY_LEN: u32 = 64 << 20;
/// `sun_path` is 108 bytes including the terminating NUL.
const MAX_IPC_PATH: usize = 107;
const ACCEPT_POLL: Duration = Duration::from_micros(200);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("address in use: {0}")]
    AddressInUse(String),
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("setup rejected by the RAN")]
    SetupRejected,
    #[error("timed out")]
    TimedOut,
    #[error("peer disconnected")]
    Disconnected,
    #[error("channel set is not paired")]
    NotPaired,
    #[error("{0} is an accounting model, not a live transport")]
    Unsupported(TransportKind),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Self::TimedOut,
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe => Self::Disconnected,
            _ => Self::Io(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransportKind {
    LocalIpc,
    Tcp,
    /// Overhead model only.
    SctpModel,
}

impl TransportKind {
    pub fn is_live(self) -> bool {
        !matches!(self, Self::SctpModel)
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::LocalIpc => "ipc",
            Self::Tcp => "tcp",
            Self::SctpModel => "sctp",
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TransportKind {
    type Err = TransportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ipc" | "uds" | "local" => Ok(Self::LocalIpc),
            "tcp" => Ok(Self::Tcp),
            "sctp" => Ok(Self::SctpModel),
            other => Err(TransportError::InvalidEndpoint(format!(
                "unknown transport `{other}`"
            ))),
        }
    }
}

/// Picks `E3_ENDPOINT` when set, else the flag value.
pub fn resolve_endpoint(flag: Option<&str>) -> Option<String> {
    std::env::var(ENDPOINT_ENV)
        .ok()
        .filter(|v| !v.is_empty())
        .or_else(|| flag.map(str::to_owned))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Ipc(PathBuf),
    Tcp(SocketAddr),
}

impl Endpoint {
    pub fn parse(kind: TransportKind, s: &str) -> Result<Self, TransportError> {
        let invalid = |why: &str| TransportError::InvalidEndpoint(format!("`{s}`: {why}"));
        match kind {
            TransportKind::LocalIpc => {
                if s.is_empty() || !s.contains('/') || s.contains('\0') || s.ends_with('/') {
                    return Err(invalid("expected a filesystem path"));
                }
                // room for the longest derived suffix
                if s.len() + 4 > MAX_IPC_PATH {
                    return Err(invalid("path too long for a Unix socket"));
                }
                Ok(Self::Ipc(PathBuf::from(s)))
            }
            TransportKind::Tcp => {
                let addr = s
                    .to_socket_addrs()
                    .map_err(|_| invalid("expected host:port"))?
                    .next()
                    .ok_or_else(|| invalid("host did not resolve"))?;
                if addr.port() == 0 || addr.port() > u16::MAX - 2 {
                    return Err(invalid("port must leave room for +1/+2 data ports"));
                }
                Ok(Self::Tcp(addr))
            }
            TransportKind::SctpModel => Err(TransportError::Unsupported(kind)),
        }
    }

    pub fn kind(&self) -> TransportKind {
        match self {
            Self::Ipc(_) => TransportKind::LocalIpc,
            Self::Tcp(_) => TransportKind::Tcp,
        }
    }

    /// `(inbound, outbound)` endpoints derived from this setup endpoint.
    pub fn data_endpoints(&self) -> (Endpoint, Endpoint) {
        match self {
            Self::Ipc(path) => {
                let s = path.to_string_lossy();
                let stem = s.strip_suffix(".setup").unwrap_or(&s);
                (
                    Self::Ipc(format!("{stem}.in").into()),
                    Self::Ipc(format!("{stem}.out").into()),
                )
            }
            Self::Tcp(addr) => {
                let mut inbound = *addr;
                inbound.set_port(addr.port() + 1);
                let mut outbound = *addr;
                outbound.set_port(addr.port() + 2);
                (Self::Tcp(inbound), Self::Tcp(outbound))
            }
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ipc(p) => write!(f, "{}", p.display()),
            Self::Tcp(a) => write!(f, "{a}"),
        }
    }
}

#[derive(Debug)]
enum Conn {
    Unix(UnixStream),
    Tcp(TcpStream),
}

impl Conn {
    fn connect(ep: &Endpoint, timeout: Duration) -> Result<Self, TransportError> {
        let refused = |e: io::Error| match e.kind() {
            io::ErrorKind::ConnectionRefused | io::ErrorKind::NotFound => {
                TransportError::ConnectionRefused(ep.to_string())
            }
            io::ErrorKind::PermissionDenied => TransportError::PermissionDenied(ep.to_string()),
            _ => TransportError::from(e),
        };
        match ep {
            Endpoint::Ipc(path) => UnixStream::connect(path).map(Conn::Unix).map_err(refused),
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect_timeout(addr, timeout).map_err(refused)?;
                stream.set_nodelay(true)?;
                Ok(Conn::Tcp(stream))
            }
        }
    }

    fn try_clone(&self) -> io::Result<Self> {
        Ok(match self {
            Self::Unix(s) => Self::Unix(s.try_clone()?),
            Self::Tcp(s) => Self::Tcp(s.try_clone()?),
        })
    }

    fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        match self {
            Self::Unix(s) => s.set_read_timeout(t),
            Self::Tcp(s) => s.set_read_timeout(t),
        }
    }

    fn set_write_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        match self {
            Self::Unix(s) => s.set_write_timeout(t),
            Self::Tcp(s) => s.set_write_timeout(t),
        }
    }

    fn shutdown(&self, how: Shutdown) {
        let _ = match self {
            Self::Unix(s) => s.shutdown(how),
            Self::Tcp(s) => s.shutdown(how),
        };
    }
}

impl Read for Conn {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Self::Unix(s) => s.read(buf),
            Self::Tcp(s) => s.read(buf),
        }
    }
}

impl Write for Conn {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Self::Unix(s) => s.write(buf),
            Self::Tcp(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Self::Unix(s) => s.flush(),
            Self::Tcp(s) => s.flush(),
        }
    }
}

#[derive(Debug)]
enum Listener {
    Unix {
        listener: UnixListener,
        path: PathBuf,
    },
    Tcp(TcpListener),
}

impl Listener {
    fn bind(ep: &Endpoint) -> Result<Self, TransportError> {
        let map = |e: io::Error| match e.kind() {
            io::ErrorKind::AddrInUse => TransportError::AddressInUse(ep.to_string()),
            io::ErrorKind::PermissionDenied => TransportError::PermissionDenied(ep.to_string()),
            io::ErrorKind::NotFound | io::ErrorKind::AddrNotAvailable => {
                TransportError::InvalidEndpoint(ep.to_string())
            }
            _ => TransportError::from(e),
        };
        match ep {
            Endpoint::Ipc(path) => {
                remove_stale_socket(path)?;
                let listener = UnixListener::bind(path).map_err(map)?;
                listener.set_nonblocking(true)?;
                Ok(Self::Unix {
                    listener,
                    path: path.clone(),
                })
            }
            Endpoint::Tcp(addr) => {
                let listener = TcpListener::bind(addr).map_err(map)?;
                listener.set_nonblocking(true)?;
                Ok(Self::Tcp(listener))
            }
        }
    }

    fn accept(&self, timeout: Option<Duration>) -> Result<Conn, TransportError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            let attempt = match self {
                Self::Unix { listener, .. } => listener.accept().map(|(s, _)| Conn::Unix(s)),
                Self::Tcp(listener) => listener.accept().map(|(s, _)| Conn::Tcp(s)),
            };
            match attempt {
                Ok(conn) => {
                    match &conn {
                        Conn::Unix(s) => s.set_nonblocking(false)?,
                        Conn::Tcp(s) => {
                            s.set_nonblocking(false)?;
                            s.set_nodelay(true)?;
                        }
                    }
                    return Ok(conn);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if deadline.is_some_and(|d| Instant::now() >= d) {
                        return Err(TransportError::TimedOut);
                    }
                    thread::sleep(ACCEPT_POLL);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        if let Self::Unix { path, .. } = self {
            let _ = std::fs::remove_file(path);
        }
    }
}

/// A socket file nobody listens on is left behind by a crashed server; a
/// live one means the address is taken.
fn remove_stale_socket(path: &Path) -> Result<(), TransportError> {
    let Ok(meta) = std::fs::symlink_metadata(path) else {
        return Ok(());
    };
    if !meta.file_type().is_socket() {
        return Err(TransportError::AddressInUse(format!(
            "{} exists and is not a socket",
            path.display()
        )));
    }
    if UnixStream::connect(path).is_ok() {
        return Err(TransportError::AddressInUse(path.display().to_string()));
    }
    std::fs::remove_file(path)
        .map_err(|_| TransportError::PermissionDenied(path.display().to_string()))
}

fn read_frame(conn: &mut Conn) -> Result<E3Pdu, TransportError> {
    let mut frame = vec![0u8; HEADER_LEN];
    conn.read_exact(&mut frame)?;
    read_frame_rest(conn, frame)
}

/// Completes a frame whose header is already in `frame`.
fn read_frame_rest(conn: &mut Conn, mut frame: Vec<u8>) -> Result<E3Pdu, TransportError> {
    let header = FrameHeader::parse(&frame)?;
    if header.body_len > MAX_BODY_LEN {
        return Err(TransportError::Protocol(format!(
            "frame body of {} bytes",
            header.body_len
        )));
    }
    frame.resize(header.frame_len(), 0);
    conn.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(E3Pdu::decode(&frame)?.0)
}

struct QueueState<T> {
    items: VecDeque<T>,
    capacity: usize,
    dropped: u64,
    closed: bool,
}

/// Bounded FIFO that evicts its oldest entry when full.
pub struct DropOldestQueue<T> {
    state: Mutex<QueueState<T>>,
    ready: Condvar,
}

impl<T> DropOldestQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            state: Mutex::new(QueueState {
                items: VecDeque::with_capacity(capacity),
                capacity,
                dropped: 0,
                closed: false,
            }),
            ready: Condvar::new(),
        }
    }

    /// Returns `false` once the queue is closed.
    pub fn push(&self, item: T) -> bool {
        let mut st = self.state.lock().unwrap();
        if st.closed {
            return false;
        }
        if st.items.len() == st.capacity {
            st.items.pop_front();
            st.dropped += 1;
        }
        st.items.push_back(item);
        drop(st);
        self.ready.notify_one();
        true
    }

    /// Oldest item, waiting up to `timeout` (forever if `None`). Items queued
    /// before close are still handed out.
    pub fn pop(&self, timeout: Option<Duration>) -> Result<T, TransportError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(item) = st.items.pop_front() {
                return Ok(item);
            }
            if st.closed {
                return Err(TransportError::Disconnected);
            }
            st = match deadline {
                None => self.ready.wait(st).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(TransportError::TimedOut);
                    }
                    self.ready.wait_timeout(st, d - now).unwrap().0
                }
            };
        }
    }

    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().unwrap().closed
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.state.lock().unwrap().dropped
    }
}

/// Publishing end of a PUB-SUB channel. `publish` only enqueues; a writer
/// thread drains the queue onto the socket.
pub struct Publisher {
    queue: Arc<DropOldestQueue<Arc<[u8]>>>,
    conn: Conn,
    writer: Option<JoinHandle<()>>,
    sent: Arc<AtomicU64>,
}

impl Publisher {
    fn spawn(conn: Conn, capacity: usize) -> Result<Self, TransportError> {
        let queue: Arc<DropOldestQueue<Arc<[u8]>>> = Arc::new(DropOldestQueue::new(capacity));
        let sent = Arc::new(AtomicU64::new(0));
        let mut out = conn.try_clone()?;
        out.set_write_timeout(Some(DEFAULT_TIMEOUT))?;
        let writer = {
            let queue = Arc::clone(&queue);
            let sent = Arc::clone(&sent);
            thread::Builder::new()
                .name("e3-publisher".into())
                .spawn(move || {
                    while let Ok(frame) = queue.pop(None) {
                        if out.write_all(&frame).is_err() {
                            queue.close();
                            break;
                        }
                        sent.fetch_add(1, Ordering::Relaxed);
                    }
                })?
        };
        Ok(Self {
            queue,
            conn,
            writer: Some(writer),
            sent,
        })
    }

    pub fn publish(&self, pdu: &E3Pdu) -> Result<(), TransportError> {
        self.publish_frame(pdu.encode()?.into())
    }

    /// Publishes an already-encoded frame; lets one encoding serve many subscribers.
    pub fn publish_frame(&self, frame: Arc<[u8]>) -> Result<(), TransportError> {
        if self.queue.push(frame) {
            Ok(())
        } else {
            Err(TransportError::Disconnected)
        }
    }

    pub fn dropped(&self) -> u64 {
        self.queue.dropped()
    }

    /// Frames written to the socket so far.
    pub fn sent(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }

    pub fn is_connected(&self) -> bool {
        !self.queue.is_closed()
    }
}

impl Drop for Publisher {
    fn drop(&mut self) {
        // let the writer drain what is queued, then hang up
        self.queue.close();
        if let Some(w) = self.writer.take() {
            let _ = w.join();
        }
        self.conn.shutdown(Shutdown::Both);
    }
}

impl fmt::Debug for Publisher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Publisher")
            .field("queued", &self.queue.len())
            .field("dropped", &self.dropped())
            .finish()
    }
}

/// Subscribing end of a PUB-SUB channel. A reader thread decodes frames into
/// a bounded queue; [`Subscriber::next`] hands them out in arrival order.
pub struct Subscriber {
    queue: Arc<DropOldestQueue<E3Pdu>>,
    conn: Conn,
    reader: Option<JoinHandle<()>>,
    received: Arc<AtomicU64>,
}

impl Subscriber {
    fn spawn(conn: Conn, capacity: usize) -> Result<Self, TransportError> {
        let queue = Arc::new(DropOldestQueue::new(capacity));
        let received = Arc::new(AtomicU64::new(0));
        let mut input = conn.try_clone()?;
        let reader = {
            let queue = Arc::clone(&queue);
            let received = Arc::clone(&received);
            thread::Builder::new()
                .name("e3-subscriber".into())
                .spawn(move || {
                    while let Ok(pdu) = read_frame(&mut input) {
                        queue.push(pdu);
                        received.fetch_add(1, Ordering::Release);
                    }
                    queue.close();
                })?
        };
        Ok(Self {
            queue,
            conn,
            reader: Some(reader),
            received,
        })
    }

    /// Oldest undelivered PDU, or `TimedOut`. After the peer hangs up the
    /// remaining PDUs are still returned, then `Disconnected`.
    pub fn next(&self, timeout: Duration) -> Result<E3Pdu, TransportError> {
        self.queue.pop(Some(timeout))
    }

    /// True once the publisher hung up; queued frames can still be read.
    pub fn is_closed(&self) -> bool {
        self.queue.is_closed()
    }

    pub fn dropped(&self) -> u64 {
        self.queue.dropped()
    }

    /// Frames read off the socket so far, including ones later dropped.
    pub fn received(&self) -> u64 {
        self.received.load(Ordering::Acquire)
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

impl Drop for Subscriber {
    fn drop(&mut self) {
        self.conn.shutdown(Shutdown::Both);
        self.queue.close();
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}

impl fmt::Debug for Subscriber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Subscriber")
            .field("pending", &self.pending())
            .field("dropped", &self.dropped())
            .finish()
    }
}

/// RAN end of the setup channel.
#[derive(Debug)]
pub struct Replier {
    conn: Conn,
}

impl Replier {
    /// Waits up to `timeout` for a request to start. Once its first byte is
    /// in, the rest is read under the default timeout, so a poll timeout
    /// never splits a frame.
    pub fn recv(&mut self, timeout: Option<Duration>) -> Result<E3Pdu, TransportError> {
        self.conn.set_read_timeout(timeout)?;
        let mut frame = vec![0u8; HEADER_LEN];
        if self.conn.read(&mut frame[..1])? == 0 {
            return Err(TransportError::Disconnected);
        }
        self.conn.set_read_timeout(Some(DEFAULT_TIMEOUT))?;
        self.conn.read_exact(&mut frame[1..])?;
        read_frame_rest(&mut self.conn, frame)
    }

    pub fn reply(&mut self, pdu: &E3Pdu) -> Result<(), TransportError> {
        self.conn.write_all(&pdu.encode()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelOptions {
    pub timeout: Duration,
    pub queue_capacity: usize,
}

impl Default for ChannelOptions {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }
}

/// Data channels of one pairing, RAN side.
#[derive(Debug)]
pub struct RanDataChannels {
    /// RAN → dApp.
    pub inbound: Publisher,
    /// dApp → RAN.
    pub outbound: Subscriber,
}

/// Listening RAN-side connector. Serves exactly one dApp pairing.
#[derive(Debug)]
pub struct ChannelServer {
    kind: TransportKind,
    endpoints: [Endpoint; 3],
    setup: Listener,
    inbound: Listener,
    outbound: Listener,
}

impl ChannelServer {
    pub fn open(kind: TransportKind, endpoint: &str) -> Result<Self, TransportError> {
        if !kind.is_live() {
            return Err(TransportError::Unsupported(kind));
        }
        let setup_ep = Endpoint::parse(kind, endpoint)?;
        let (in_ep, out_ep) = setup_ep.data_endpoints();
        let setup = Listener::bind(&setup_ep)?;
        let inbound = Listener::bind(&in_ep)?;
        let outbound = Listener::bind(&out_ep)?;
        Ok(Self {
            kind,
            endpoints: [setup_ep, in_ep, out_ep],
            setup,
            inbound,
            outbound,
        })
    }

    pub fn kind(&self) -> TransportKind {
        self.kind
    }

    /// `[setup, inbound, outbound]`.
    pub fn endpoints(&self) -> &[Endpoint; 3] {
        &self.endpoints
    }

    pub fn accept_setup(&self, timeout: Option<Duration>) -> Result<Replier, TransportError> {
        Ok(Replier {
            conn: self.setup.accept(timeout)?,
        })
    }

    /// Accepts the dApp's two data connections; call after an accepted
    /// SetupResponse has been sent.
    pub fn accept_data(&self, opts: &ChannelOptions) -> Result<RanDataChannels, TransportError> {
        let inbound = Publisher::spawn(
            self.inbound.accept(Some(opts.timeout))?,
            opts.queue_capacity,
        )?;
        let outbound = Subscriber::spawn(
            self.outbound.accept(Some(opts.timeout))?,
            opts.queue_capacity,
        )?;
        Ok(RanDataChannels { inbound, outbound })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingState {
    Idle,
    SetupSent,
    Paired,
}

/// dApp-side connector.
///
/// State machine: `Idle` (setup socket connected) → `SetupSent` → `Paired`.
/// The data sockets are opened only on the transition to `Paired`, so no
/// data traffic can precede a successful setup.
#[derive(Debug)]
pub struct ChannelSet {
    endpoint: Endpoint,
    opts: ChannelOptions,
    state: PairingState,
    setup: Conn,
    inbound: Option<Subscriber>,
    outbound: Option<Publisher>,
    dapp_id: Option<u32>,
    accepted: Vec<u16>,
}

impl ChannelSet {
    pub fn connect(
        kind: TransportKind,
        endpoint: &str,
        opts: ChannelOptions,
    ) -> Result<Self, TransportError> {
        if !kind.is_live() {
            return Err(TransportError::Unsupported(kind));
        }
        let ep = Endpoint::parse(kind, endpoint)?;
        let setup = Conn::connect(&ep, opts.timeout)?;
        setup.set_read_timeout(Some(opts.timeout))?;
        Ok(Self {
            endpoint: ep,
            opts,
            state: PairingState::Idle,
            setup,
            inbound: None,
            outbound: None,
            dapp_id: None,
            accepted: Vec::new(),
        })
    }

    pub fn state(&self) -> PairingState {
        self.state
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn accepted_sms(&self) -> &[u16] {
        &self.accepted
    }

    pub fn dapp_id(&self) -> Option<u32> {
        self.dapp_id
    }

    fn request(&mut self, pdu: &E3Pdu) -> Result<E3Pdu, TransportError> {
        self.setup.write_all(&pdu.encode()?)?;
        read_frame(&mut self.setup)
    }

    /// Runs the setup exchange and, on acceptance, opens the data channels.
    pub fn setup(&mut self, req: SetupRequest) -> Result<SetupResponse, TransportError> {
        if self.state != PairingState::Idle {
            return Err(TransportError::Protocol("setup already performed".into()));
        }
        self.state = PairingState::SetupSent;
        let reply = match self.request(&E3Pdu::SetupRequest(req.clone())) {
            Ok(r) => r,
            Err(e) => {
                self.state = PairingState::Idle;
                return Err(e);
            }
        };
        let resp = match reply {
            E3Pdu::SetupResponse(r) if r.dapp_id == req.dapp_id => r,
            other => {
                self.state = PairingState::Idle;
                return Err(TransportError::Protocol(format!(
                    "expected SetupResponse, got {:?}",
                    other.kind()
                )));
            }
        };
        if !resp.accepted {
            self.state = PairingState::Idle;
            return Err(TransportError::SetupRejected);
        }
        let (in_ep, out_ep) = self.endpoint.data_endpoints();
        let inbound = Subscriber::spawn(
            Conn::connect(&in_ep, self.opts.timeout)?,
            self.opts.queue_capacity,
        )?;
        let outbound = Publisher::spawn(
            Conn::connect(&out_ep, self.opts.timeout)?,
            self.opts.queue_capacity,
        )?;
        self.inbound = Some(inbound);
        self.outbound = Some(outbound);
        self.dapp_id = Some(resp.dapp_id);
        self.accepted = resp.accepted_sm_ids.clone();
        self.state = PairingState::Paired;
        Ok(resp)
    }

    pub fn subscribe(
        &mut self,
        sm_id: u16,
        period_slots: u16,
    ) -> Result<SubscriptionResponse, TransportError> {
        let dapp_id = self
            .dapp_id
            .filter(|_| self.state == PairingState::Paired)
            .ok_or(TransportError::NotPaired)?;
        match self.request(&E3Pdu::SubscriptionRequest(SubscriptionRequest {
            dapp_id,
            sm_id,
            period_slots,
        }))? {
            E3Pdu::SubscriptionResponse(r) => Ok(r),
            other => Err(TransportError::Protocol(format!(
                "expected SubscriptionResponse, got {:?}",
                other.kind()
            ))),
        }
    }

    /// Publishes on the outbound (dApp → RAN) channel.
    pub fn publish(&self, pdu: &E3Pdu) -> Result<(), TransportError> {
        self.publish_frame(pdu.encode()?.into())
    }

    /// Fails with `Disconnected` once the RAN side has hung up.
    pub fn publish_frame(&self, frame: Arc<[u8]>) -> Result<(), TransportError> {
        let outbound = self.outbound.as_ref().ok_or(TransportError::NotPaired)?;
        if self.inbound.as_ref().is_some_and(Subscriber::is_closed) {
            return Err(TransportError::Disconnected);
        }
        outbound.publish_frame(frame)
    }

    /// Next PDU from the inbound (RAN → dApp) channel.
    pub fn next(&self, timeout: Duration) -> Result<E3Pdu, TransportError> {
        self.inbound
            .as_ref()
            .ok_or(TransportError::NotPaired)?
            .next(timeout)
    }

    pub fn inbound(&self) -> Option<&Subscriber> {
        self.inbound.as_ref()
    }

    pub fn outbound(&self) -> Option<&Publisher> {
        self.outbound.as_ref()
    }

    /// Drops the data channels; later publishes fail with `NotPaired`.
    pub fn disconnect(&mut self) {
        self.inbound = None;
        self.outbound = None;
        self.setup.shutdown(Shutdown::Both);
        self.state = PairingState::Idle;
    }
}

/// IPv4 (20 B) + TCP (20 B) headers per segment.
pub const TCP_SEGMENT_HEADER: usize = 40;
/// IPv4 (20 B) + SCTP common header (12 B) + DATA chunk header (16 B), plus
/// 20 B of per-packet SACK/bundling allowance.
pub const SCTP_SEGMENT_HEADER: usize = 68;

/// Bytes-on-wire accounting per transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverheadModel {
    pub tcp_mss: usize,
    pub sctp_mss: usize,
}

impl OverheadModel {
    /// Segment sizes at which TCP lands at 20% and SCTP at ≈42% overhead.
    pub const CALIBRATED: OverheadModel = OverheadModel {
        tcp_mss: 200,
        sctp_mss: 162,
    };

    pub fn with_mss(mss: usize) -> Self {
        Self {
            tcp_mss: mss,
            sctp_mss: mss,
        }
    }

    pub fn per_segment_header_bytes(&self, kind: TransportKind) -> usize {
        match kind {
            TransportKind::LocalIpc => 0,
            TransportKind::Tcp => TCP_SEGMENT_HEADER,
            TransportKind::SctpModel => SCTP_SEGMENT_HEADER,
        }
    }

    pub fn mss(&self, kind: TransportKind) -> Option<usize> {
        match kind {
            TransportKind::LocalIpc => None,
            TransportKind::Tcp => Some(self.tcp_mss),
            TransportKind::SctpModel => Some(self.sctp_mss),
        }
    }
}

impl Default for OverheadModel {
    fn default() -> Self {
        Self::CALIBRATED
    }
}

/// Bytes on the wire for one E3 frame of `frame_len` bytes.
pub fn account_overhead(model: &OverheadModel, kind: TransportKind, frame_len: usize) -> usize {
    match model.mss(kind) {
        None => frame_len,
        Some(mss) => {
            frame_len + model.per_segment_header_bytes(kind) * frame_len.div_ceil(mss.max(1))
        }
    }
}

/// `(wire - frame) / frame`.
pub fn overhead_ratio(model: &OverheadModel, kind: TransportKind, frame_len: usize) -> f64 {
    (account_overhead(model, kind, frame_len) - frame_len) as f64 / frame_len as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Control, Indication};
    use proptest::prelude::*;

    fn ipc_dir() -> tempfile::TempDir {
        tempfile::Builder::new()
            .prefix("e3t")
            .tempdir_in("/tmp")
            .unwrap()
    }

    #[test]
    fn ipc_endpoints_derive_suffixes() {
        let ep = Endpoint::parse(TransportKind::LocalIpc, "/tmp/e3.setup").unwrap();
        let (i, o) = ep.data_endpoints();
        assert_eq!(i, Endpoint::Ipc("/tmp/e3.in".into()));
        assert_eq!(o, Endpoint::Ipc("/tmp/e3.out".into()));
    }

    #[test]
    fn tcp_endpoints_derive_ports() {
        let ep = Endpoint::parse(TransportKind::Tcp, "127.0.0.1:9990").unwrap();
        let (i, o) = ep.data_endpoints();
        assert_eq!(i.to_string(), "127.0.0.1:9991");
        assert_eq!(o.to_string(), "127.0.0.1:9992");
    }

    #[test]
    fn malformed_endpoints_rejected() {
        assert!(matches!(
            Endpoint::parse(TransportKind::LocalIpc, "host:port"),
            Err(TransportError::InvalidEndpoint(_))
        ));
        assert!(matches!(
            Endpoint::parse(TransportKind::Tcp, "/tmp/x"),
            Err(TransportError::InvalidEndpoint(_))
        ));
        assert!(matches!(
            Endpoint::parse(TransportKind::Tcp, "127.0.0.1:65535"),
            Err(TransportError::InvalidEndpoint(_))
        ));
        assert!(matches!(
            ChannelServer::open(TransportKind::SctpModel, "x"),
            Err(TransportError::Unsupported(_))
        ));
    }

    #[test]
    fn second_server_on_same_path_is_address_in_use() {
        let dir = ipc_dir();
        let ep = dir.path().join("a.setup");
        let ep = ep.to_str().unwrap();
        let _first = ChannelServer::open(TransportKind::LocalIpc, ep).unwrap();
        assert!(matches!(
            ChannelServer::open(TransportKind::LocalIpc, ep),
            Err(TransportError::AddressInUse(_))
        ));
    }

    #[test]
    fn connect_without_server_is_refused() {
        let dir = ipc_dir();
        let ep = dir.path().join("none.setup");
        let err = ChannelSet::connect(
            TransportKind::LocalIpc,
            ep.to_str().unwrap(),
            ChannelOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TransportError::ConnectionRefused(_)));
    }

    #[test]
    fn queue_drops_oldest() {
        let q = DropOldestQueue::new(64);
        for i in 0..65 {
            q.push(i);
        }
        assert_eq!(q.dropped(), 1);
        assert_eq!(q.pop(Some(Duration::ZERO)).unwrap(), 1);
        q.close();
        assert!(!q.push(99));
        assert_eq!(q.len(), 63);
    }

    #[test]
    fn empty_queue_times_out() {
        let q: DropOldestQueue<u8> = DropOldestQueue::new(4);
        let t = Instant::now();
        assert!(matches!(
            q.pop(Some(Duration::from_millis(1))),
            Err(TransportError::TimedOut)
        ));
        assert!(t.elapsed() >= Duration::from_millis(1));
    }

    /// Minimal RAN side: accept setup, accept everything, open data channels.
    fn pair(kind: TransportKind, ep: &str, opts: ChannelOptions) -> (ChannelSet, RanDataChannels) {
        let server = ChannelServer::open(kind, ep).unwrap();
        let handle = thread::spawn(move || {
            let mut rep = server.accept_setup(Some(Duration::from_secs(2))).unwrap();
            let E3Pdu::SetupRequest(req) = rep.recv(None).unwrap() else {
                panic!("expected setup")
            };
            rep.reply(&E3Pdu::SetupResponse(SetupResponse {
                dapp_id: req.dapp_id,
                accepted: true,
                accepted_sm_ids: req.requested_sm_ids,
            }))
            .unwrap();
            let data = server.accept_data(&opts).unwrap();
            (server, rep, data)
        });
        let mut client = ChannelSet::connect(kind, ep, opts).unwrap();
        assert_eq!(client.state(), PairingState::Idle);
        assert!(matches!(
            client.publish(&ctrl(0)),
            Err(TransportError::NotPaired)
        ));
        client
            .setup(SetupRequest {
                dapp_id: 7,
                requested_sm_ids: vec![1],
            })
            .unwrap();
        assert_eq!(client.state(), PairingState::Paired);
        let (server, rep, data) = handle.join().unwrap();
        // keep the listeners and setup socket alive for the duration of the test
        std::mem::forget(server);
        std::mem::forget(rep);
        (client, data)
    }

    fn ctrl(seq: u32) -> E3Pdu {
        E3Pdu::Control(Control {
            sm_id: 1,
            sequence: seq,
            entries: vec![seq],
        })
    }

    fn ind(seq: u32) -> E3Pdu {
        E3Pdu::Indication(Indication {
            sm_id: 1,
            sequence: seq,
            origin_ts_ns: seq as u64,
            payload: vec![0; 16],
        })
    }

    #[test]
    fn fifo_over_ipc() {
        let dir = ipc_dir();
        let ep = dir.path().join("f.setup");
        let (client, ran) = pair(
            TransportKind::LocalIpc,
            ep.to_str().unwrap(),
            ChannelOptions::default(),
        );
        for s in 0..3 {
            ran.inbound.publish(&ind(s)).unwrap();
        }
        for s in 0..3 {
            assert_eq!(client.next(Duration::from_secs(1)).unwrap(), ind(s));
        }
        assert!(matches!(
            client.next(Duration::from_millis(1)),
            Err(TransportError::TimedOut)
        ));
        for s in 0..3 {
            client.publish(&ctrl(s)).unwrap();
        }
        for s in 0..3 {
            assert_eq!(ran.outbound.next(Duration::from_secs(1)).unwrap(), ctrl(s));
        }
    }

    #[test]
    fn fifo_over_tcp() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            let p = l.local_addr().unwrap().port();
            // leave room for +1/+2; a collision just fails the bind below
            p.min(60_000)
        };
        let ep = format!("127.0.0.1:{port}");
        let Ok(server_check) = ChannelServer::open(TransportKind::Tcp, &ep) else {
            return;
        };
        drop(server_check);
        let (client, ran) = pair(TransportKind::Tcp, &ep, ChannelOptions::default());
        for s in 0..50 {
            ran.inbound.publish(&ind(s)).unwrap();
        }
        for s in 0..50 {
            assert_eq!(client.next(Duration::from_secs(1)).unwrap(), ind(s));
        }
    }

    #[test]
    fn overflow_drops_oldest_and_counts() {
        let dir = ipc_dir();
        let ep = dir.path().join("o.setup");
        let (client, ran) = pair(
            TransportKind::LocalIpc,
            ep.to_str().unwrap(),
            ChannelOptions::default(),
        );
        for s in 0..65 {
            ran.inbound.publish(&ind(s)).unwrap();
        }
        let inbound = client.inbound().unwrap();
        let t = Instant::now();
        while inbound.received() < 65 && t.elapsed() < Duration::from_secs(2) {
            thread::sleep(Duration::from_millis(1));
        }
        assert_eq!(inbound.dropped() + ran.inbound.dropped(), 1);
        assert_eq!(client.next(Duration::from_secs(1)).unwrap(), ind(1));
    }

    #[test]
    fn disconnect_is_reported() {
        let dir = ipc_dir();
        let ep = dir.path().join("d.setup");
        let (mut client, ran) = pair(
            TransportKind::LocalIpc,
            ep.to_str().unwrap(),
            ChannelOptions::default(),
        );
        client.disconnect();
        assert!(matches!(
            client.publish(&ctrl(1)),
            Err(TransportError::NotPaired)
        ));
        assert!(matches!(
            ran.outbound.next(Duration::from_secs(1)),
            Err(TransportError::Disconnected)
        ));
    }

    #[test]
    fn overhead_calibration_points() {
        let m = OverheadModel::CALIBRATED;
        assert_eq!(account_overhead(&m, TransportKind::LocalIpc, 1536), 1536);
        assert_eq!(account_overhead(&m, TransportKind::Tcp, 200), 240);
        assert_eq!(account_overhead(&m, TransportKind::SctpModel, 162), 230);
        assert!((overhead_ratio(&m, TransportKind::Tcp, 200) - 0.20).abs() < 1e-12);
        assert!((overhead_ratio(&m, TransportKind::SctpModel, 162) - 0.42).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn overhead_ordering(len in 1usize..70_000, mss in 1usize..9000) {
            let m = OverheadModel::with_mss(mss);
            let ipc = account_overhead(&m, TransportKind::LocalIpc, len);
            let tcp = account_overhead(&m, TransportKind::Tcp, len);
            let sctp = account_overhead(&m, TransportKind::SctpModel, len);
            prop_assert_eq!(ipc, len);
            prop_assert!(ipc <= tcp && tcp < sctp);
        }
    }
}
