//! dApp-side framework: one [`DappCore`] per E3 endpoint, callbacks per
//! service model, and the control loop that drives them.
//!
//! ```no_run
//! use e3dapp::sdk::{DappCore, StopSignal};
//! use e3dapp::spectrum::{SpectrumConfig, SpectrumDapp};
//! use e3dapp::transport::{ChannelOptions, TransportKind};
//!
//! let mut core = DappCore::new(42, ChannelOptions::default());
//! core.setup_connection(TransportKind::LocalIpc, "/tmp/e3.setup", &[1])?;
//! core.subscribe(1, 1)?;
//! core.add_callback(1, Box::new(SpectrumDapp::new(SpectrumConfig::default())))?;
//! core.control_loop(&StopSignal::new())?;
//! # Ok::<(), e3dapp::SdkError>(())
//! ```

use std::collections::{BTreeMap, HashSet};
use std::error::Error;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::clock::monotonic_ns;
use crate::codec::{
    Control, E3Pdu, Indication, Report, SetupRequest, XAppControl, POLICY_DETECTION_THRESHOLD,
};
use crate::transport::{ChannelOptions, ChannelSet, TransportError, TransportKind};

#[derive(Debug, Error)]
pub enum SdkError {
    #[error("a DappCore is already attached to {0}")]
    EndpointBusy(String),
    #[error("not connected")]
    NotConnected,
    #[error("setup rejected by the RAN")]
    SetupRejected,
    #[error("timed out")]
    Timeout,
    #[error("service model {0} was not accepted at setup")]
    UnknownSm(u16),
    #[error("a handler for service model {0} is already registered")]
    DuplicateHandler(u16),
    #[error("subscription to service model {0} rejected")]
    SubscriptionRejected(u16),
    #[error("no callback registered")]
    NoCallbacks,
    #[error("disconnected")]
    Disconnected,
    #[error(transparent)]
    Transport(TransportError),
}

impl From<TransportError> for SdkError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::SetupRejected => Self::SetupRejected,
            TransportError::TimedOut => Self::Timeout,
            TransportError::Disconnected | TransportError::NotPaired => Self::Disconnected,
            other => Self::Transport(other),
        }
    }
}

/// What a handler returns: the PRB entries to send as Control, if any.
pub type HandlerResult = Result<Option<Vec<u32>>, Box<dyn Error + Send + Sync>>;

/// A dApp's per-indication logic. Handlers run synchronously on the loop
/// thread and should finish well within one slot.
pub trait IndicationHandler: Send {
    fn on_indication(
        &mut self,
        ctx: &mut TickContext<'_>,
        indication: &Indication,
    ) -> HandlerResult;
}

/// Lets the caller keep a handle on a handler after registering it.
impl<H: IndicationHandler> IndicationHandler for Arc<Mutex<H>> {
    fn on_indication(
        &mut self,
        ctx: &mut TickContext<'_>,
        indication: &Indication,
    ) -> HandlerResult {
        self.lock()
            .unwrap_or_else(|p| p.into_inner())
            .on_indication(ctx, indication)
    }
}

/// Latest policy value per key, as pushed by the xApp.
#[derive(Debug, Clone, Default)]
pub struct PolicyStore {
    values: BTreeMap<u16, Vec<u8>>,
}

impl PolicyStore {
    pub fn apply(&mut self, ctrl: &XAppControl) {
        self.values
            .insert(ctrl.policy_key, ctrl.policy_value.clone());
    }

    pub fn get(&self, key: u16) -> Option<&[u8]> {
        self.values.get(&key).map(Vec::as_slice)
    }

    /// Detection threshold override in dB (wire value: i32 centi-dB).
    pub fn threshold_override_db(&self) -> Option<f64> {
        let raw: [u8; 4] = self.get(POLICY_DETECTION_THRESHOLD)?.try_into().ok()?;
        Some(f64::from(i32::from_be_bytes(raw)) / 100.0)
    }
}

/// Handler view of one tick.
pub struct TickContext<'a> {
    policy: &'a PolicyStore,
    controls: Vec<Vec<u32>>,
    reports: Vec<Vec<u8>>,
}

impl<'a> TickContext<'a> {
    pub fn new(policy: &'a PolicyStore) -> Self {
        Self {
            policy,
            controls: Vec::new(),
            reports: Vec::new(),
        }
    }

    /// Sends a Control echoing this tick's sequence number, in addition to
    /// the handler's return value.
    pub fn schedule_control(&mut self, entries: Vec<u32>) {
        self.controls.push(entries);
    }

    pub fn schedule_report(&mut self, payload: Vec<u8>) {
        self.reports.push(payload);
    }

    pub fn policy(&self, key: u16) -> Option<&[u8]> {
        self.policy.get(key)
    }

    pub fn threshold_override_db(&self) -> Option<f64> {
        self.policy.threshold_override_db()
    }

    pub fn scheduled_reports(&self) -> &[Vec<u8>] {
        &self.reports
    }
}

/// Timestamps of one loop tick, monotonic nanoseconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TickRecord {
    pub sm_id: u16,
    pub sequence: u32,
    /// Indication origin stamp.
    pub t0_ns: u64,
    /// Indication taken off the channel.
    pub t1_ns: u64,
    /// Handler returned.
    pub t2_ns: u64,
    /// Control encoded and handed to the outbound channel (equals `t2_ns`
    /// when nothing was sent).
    pub t3_ns: u64,
    pub controls_sent: usize,
    pub control_entries: usize,
    pub reports_sent: usize,
    pub failed: bool,
}

/// Cooperative stop flag for [`DappCore::control_loop`]; clones share it.
#[derive(Debug, Clone, Default)]
pub struct StopSignal(Arc<AtomicBool>);

impl StopSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        self.0.store(true, Ordering::Release);
    }

    pub fn is_stopped(&self) -> bool {
        self.0.load(Ordering::Acquire)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoopStats {
    pub ticks: u64,
    pub failed_ticks: u64,
    pub unhandled: u64,
    pub policies: u64,
}

fn attached_endpoints() -> &'static Mutex<HashSet<String>> {
    static SET: OnceLock<Mutex<HashSet<String>>> = OnceLock::new();
    SET.get_or_init(Default::default)
}

/// Registration of one endpoint; released on drop.
#[derive(Debug)]
struct EndpointGuard(String);

impl EndpointGuard {
    fn acquire(key: String) -> Result<Self, SdkError> {
        if attached_endpoints().lock().unwrap().insert(key.clone()) {
            Ok(Self(key))
        } else {
            Err(SdkError::EndpointBusy(key))
        }
    }
}

impl Drop for EndpointGuard {
    fn drop(&mut self) {
        attached_endpoints().lock().unwrap().remove(&self.0);
    }
}

pub type RecordSink = Box<dyn FnMut(TickRecord) + Send>;

pub struct DappCore {
    dapp_id: u32,
    opts: ChannelOptions,
    poll: Duration,
    channels: Option<ChannelSet>,
    _guard: Option<EndpointGuard>,
    callbacks: BTreeMap<u16, Box<dyn IndicationHandler>>,
    policy: PolicyStore,
    sink: Option<RecordSink>,
    stats: LoopStats,
}

impl DappCore {
    pub fn new(dapp_id: u32, opts: ChannelOptions) -> Self {
        Self {
            dapp_id,
            opts,
            poll: Duration::from_micros(500),
            channels: None,
            _guard: None,
            callbacks: BTreeMap::new(),
            policy: PolicyStore::default(),
            sink: None,
            stats: LoopStats::default(),
        }
    }

    pub fn dapp_id(&self) -> u32 {
        self.dapp_id
    }

    /// How long the loop waits for data before re-checking its stop signal.
    pub fn set_poll_interval(&mut self, poll: Duration) {
        self.poll = poll;
    }

    pub fn channels(&self) -> Option<&ChannelSet> {
        self.channels.as_ref()
    }

    pub fn policy(&self) -> &PolicyStore {
        &self.policy
    }

    pub fn stats(&self) -> LoopStats {
        self.stats
    }

    /// Connects and runs setup. A server that is not up yet is retried until
    /// the channel timeout expires.
    pub fn setup_connection(
        &mut self,
        kind: TransportKind,
        endpoint: &str,
        requested_sms: &[u16],
    ) -> Result<Vec<u16>, SdkError> {
        if self.channels.is_some() {
            return Err(SdkError::Transport(TransportError::Protocol(
                "already connected".into(),
            )));
        }
        let guard = EndpointGuard::acquire(format!("{kind}:{endpoint}"))?;
        let deadline = Instant::now() + self.opts.timeout;
        let mut channels = loop {
            match ChannelSet::connect(kind, endpoint, self.opts) {
                Ok(c) => break c,
                Err(TransportError::ConnectionRefused(_)) if Instant::now() < deadline => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(TransportError::ConnectionRefused(_)) => return Err(SdkError::Timeout),
                Err(e) => return Err(e.into()),
            }
        };
        let resp = channels.setup(SetupRequest {
            dapp_id: self.dapp_id,
            requested_sm_ids: requested_sms.to_vec(),
        })?;
        self.channels = Some(channels);
        self._guard = Some(guard);
        Ok(resp.accepted_sm_ids)
    }

    fn connected(&self) -> Result<&ChannelSet, SdkError> {
        self.channels.as_ref().ok_or(SdkError::NotConnected)
    }

    pub fn subscribe(&mut self, sm_id: u16, period_slots: u16) -> Result<(), SdkError> {
        let channels = self.channels.as_mut().ok_or(SdkError::NotConnected)?;
        if !channels.accepted_sms().contains(&sm_id) {
            return Err(SdkError::UnknownSm(sm_id));
        }
        if channels.subscribe(sm_id, period_slots)?.accepted {
            Ok(())
        } else {
            Err(SdkError::SubscriptionRejected(sm_id))
        }
    }

    pub fn add_callback(
        &mut self,
        sm_id: u16,
        handler: Box<dyn IndicationHandler>,
    ) -> Result<(), SdkError> {
        if !self.connected()?.accepted_sms().contains(&sm_id) {
            return Err(SdkError::UnknownSm(sm_id));
        }
        if self.callbacks.contains_key(&sm_id) {
            return Err(SdkError::DuplicateHandler(sm_id));
        }
        self.callbacks.insert(sm_id, handler);
        Ok(())
    }

    pub fn remove_callback(&mut self, sm_id: u16) -> Result<Box<dyn IndicationHandler>, SdkError> {
        self.callbacks
            .remove(&sm_id)
            .ok_or(SdkError::UnknownSm(sm_id))
    }

    /// Receives one [`TickRecord`] per processed indication.
    pub fn set_record_sink(&mut self, sink: impl FnMut(TickRecord) + Send + 'static) {
        self.sink = Some(Box::new(sink));
    }

    /// Convenience sink feeding a channel.
    pub fn record_channel(&mut self) -> mpsc::Receiver<TickRecord> {
        let (tx, rx) = mpsc::channel();
        self.set_record_sink(move |r| {
            let _ = tx.send(r);
        });
        rx
    }

    pub fn schedule_control(
        &self,
        sm_id: u16,
        sequence: u32,
        entries: Vec<u32>,
    ) -> Result<(), SdkError> {
        self.connected()?.publish(&E3Pdu::Control(Control {
            sm_id,
            sequence,
            entries,
        }))?;
        Ok(())
    }

    pub fn schedule_report(&self, sm_id: u16, payload: Vec<u8>) -> Result<(), SdkError> {
        self.connected()?.publish(&E3Pdu::Report(Report {
            dapp_id: self.dapp_id,
            sm_id,
            payload,
        }))?;
        Ok(())
    }

    /// Drops the connection; later schedule calls fail with `NotConnected`.
    pub fn disconnect(&mut self) {
        if let Some(mut c) = self.channels.take() {
            c.disconnect();
        }
        self._guard = None;
    }

    /// Processes inbound traffic until `stop` is raised or the RAN hangs up.
    /// A failing or panicking handler marks its tick as failed; the loop
    /// carries on.
    pub fn control_loop(&mut self, stop: &StopSignal) -> Result<LoopStats, SdkError> {
        if self.callbacks.is_empty() {
            return Err(SdkError::NoCallbacks);
        }
        while !stop.is_stopped() {
            let pdu = match self.connected()?.next(self.poll) {
                Ok(p) => p,
                Err(TransportError::TimedOut) => continue,
                Err(TransportError::Disconnected) => break,
                Err(e) => return Err(e.into()),
            };
            match pdu {
                E3Pdu::Indication(ind) => match self.tick(&ind) {
                    Err(SdkError::Disconnected) => break,
                    r => r?,
                },
                E3Pdu::XAppControl(ctrl) if ctrl.dapp_id == self.dapp_id => {
                    self.policy.apply(&ctrl);
                    self.stats.policies += 1;
                }
                _ => self.stats.unhandled += 1,
            }
        }
        Ok(self.stats)
    }

    fn tick(&mut self, ind: &Indication) -> Result<(), SdkError> {
        let t1 = monotonic_ns();
        let Some(handler) = self.callbacks.get_mut(&ind.sm_id) else {
            self.stats.unhandled += 1;
            return Ok(());
        };
        let mut ctx = TickContext::new(&self.policy);
        let outcome =
            panic::catch_unwind(AssertUnwindSafe(|| handler.on_indication(&mut ctx, ind)));
        let t2 = monotonic_ns();
        let TickContext {
            mut controls,
            reports,
            ..
        } = ctx;
        let failed = match outcome {
            Ok(Ok(decision)) => {
                controls.splice(0..0, decision);
                false
            }
            Ok(Err(e)) => {
                log::warn!(
                    "handler for SM {} failed on seq {}: {e}",
                    ind.sm_id,
                    ind.sequence
                );
                true
            }
            Err(_) => {
                log::warn!(
                    "handler for SM {} panicked on seq {}",
                    ind.sm_id,
                    ind.sequence
                );
                true
            }
        };
        let channels = self.channels.as_ref().ok_or(SdkError::NotConnected)?;
        let control_entries = controls.iter().map(Vec::len).sum();
        let controls_sent = controls.len();
        let frames = controls
            .into_iter()
            .map(|entries| {
                let pdu = E3Pdu::Control(Control {
                    sm_id: ind.sm_id,
                    sequence: ind.sequence,
                    entries,
                });
                pdu.encode().map(Arc::<[u8]>::from)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| SdkError::Transport(e.into()))?;
        // stamped as the frames are handed over; the agent may apply them
        // before this thread runs again
        let t3 = if controls_sent > 0 {
            monotonic_ns()
        } else {
            t2
        };
        for frame in frames {
            channels.publish_frame(frame)?;
        }
        let reports_sent = reports.len();
        for payload in reports {
            channels.publish(&E3Pdu::Report(Report {
                dapp_id: self.dapp_id,
                sm_id: ind.sm_id,
                payload,
            }))?;
        }
        self.stats.ticks += 1;
        self.stats.failed_ticks += u64::from(failed);
        if let Some(sink) = self.sink.as_mut() {
            sink(TickRecord {
                sm_id: ind.sm_id,
                sequence: ind.sequence,
                t0_ns: ind.origin_ts_ns,
                t1_ns: t1,
                t2_ns: t2,
                t3_ns: t3,
                controls_sent,
                control_entries,
                reports_sent,
                failed,
            });
        }
        Ok(())
    }
}

impl std::fmt::Debug for DappCore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DappCore")
            .field("dapp_id", &self.dapp_id)
            .field("callbacks", &self.callbacks.keys().collect::<Vec<_>>())
            .field("stats", &self.stats)
            .finish()
    }
}

/// Everything needed to run one dApp on its own thread.
pub struct DappLaunch {
    pub dapp_id: u32,
    pub kind: TransportKind,
    pub endpoint: String,
    pub opts: ChannelOptions,
    pub sm_id: u16,
    pub period_slots: u16,
    pub handler: Box<dyn IndicationHandler>,
    pub records: Option<RecordSink>,
}

/// Connects, subscribes, registers the handler and runs the control loop
/// on a new thread until `stop` is raised or the RAN hangs up.
pub fn spawn_dapp(
    launch: DappLaunch,
    stop: StopSignal,
) -> std::io::Result<thread::JoinHandle<Result<LoopStats, SdkError>>> {
    thread::Builder::new()
        .name(format!("dapp-{}", launch.dapp_id))
        .spawn(move || {
            let DappLaunch {
                dapp_id,
                kind,
                endpoint,
                opts,
                sm_id,
                period_slots,
                handler,
                records,
            } = launch;
            let mut core = DappCore::new(dapp_id, opts);
            core.setup_connection(kind, &endpoint, &[sm_id])?;
            core.subscribe(sm_id, period_slots)?;
            core.add_callback(sm_id, handler)?;
            core.sink = records;
            core.control_loop(&stop)
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_policy_parses_centi_db() {
        let mut p = PolicyStore::default();
        assert_eq!(p.threshold_override_db(), None);
        p.apply(&XAppControl {
            dapp_id: 1,
            policy_key: 1,
            policy_value: (-250i32).to_be_bytes().to_vec(),
        });
        assert_eq!(p.threshold_override_db(), Some(-2.5));
        p.apply(&XAppControl {
            dapp_id: 1,
            policy_key: 1,
            policy_value: vec![1, 2],
        });
        assert_eq!(p.threshold_override_db(), None);
    }

    #[test]
    fn endpoint_guard_is_exclusive() {
        let a = EndpointGuard::acquire("ipc:/tmp/guard-test".into()).unwrap();
        assert!(matches!(
            EndpointGuard::acquire("ipc:/tmp/guard-test".into()),
            Err(SdkError::EndpointBusy(_))
        ));
        drop(a);
        EndpointGuard::acquire("ipc:/tmp/guard-test".into()).unwrap();
    }

    #[test]
    fn unconnected_core_reports_not_connected() {
        let mut core = DappCore::new(1, ChannelOptions::default());
        assert!(matches!(
            core.schedule_control(1, 0, vec![]),
            Err(SdkError::NotConnected)
        ));
        struct Nop;
        impl IndicationHandler for Nop {
            fn on_indication(&mut self, _: &mut TickContext<'_>, _: &Indication) -> HandlerResult {
                Ok(None)
            }
        }
        assert!(matches!(
            core.add_callback(1, Box::new(Nop)),
            Err(SdkError::NotConnected)
        ));
        assert!(matches!(
            core.control_loop(&StopSignal::new()),
            Err(SdkError::NoCallbacks)
        ));
    }

    #[test]
    fn dead_endpoint_times_out() {
        let dir = tempfile::Builder::new()
            .prefix("e3s")
            .tempdir_in("/tmp")
            .unwrap();
        let ep = dir.path().join("dead.setup");
        let mut core = DappCore::new(
            1,
            ChannelOptions {
                timeout: Duration::from_millis(50),
                ..Default::default()
            },
        );
        let err = core
            .setup_connection(TransportKind::LocalIpc, ep.to_str().unwrap(), &[1])
            .unwrap_err();
        assert!(matches!(err, SdkError::Timeout));
    }
}
