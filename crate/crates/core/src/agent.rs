//! RAN-side E3 termination.
//!
//! [`E3Agent`] is the reactor state: service-model registry, pairings,
//! subscription table, the simulated DU scheduler and the mock xApp. It does
//! no I/O of its own beyond pushing frames into per-dApp [`IndicationSink`]s.
//! [`AgentHost`] wires an agent to a live [`ChannelServer`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::clock::monotonic_ns;
use crate::codec::{
    CodecError, Control, E3Pdu, Indication, Report, SetupRequest, SetupResponse,
    SubscriptionRequest, SubscriptionResponse, XAppControl, SM_CIR, SM_SPECTRUM,
};
use crate::ransim::{PrbRun, SchedulerState, SimError};
use crate::transport::{
    ChannelOptions, ChannelServer, Publisher, Replier, Subscriber, TransportError, TransportKind,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("dApp {0} is already paired")]
    DuplicateDappId(u32),
    #[error("dApp {0} is not paired")]
    NotPaired(u32),
    #[error("unknown service model {0}")]
    UnknownSm(u16),
    #[error("dApp {dapp_id} already subscribed to service model {sm_id}")]
    AlreadySubscribed { dapp_id: u32, sm_id: u16 },
    #[error("PRB {prb} out of range for {n_prbs} PRBs")]
    EntryOutOfRange { prb: u32, n_prbs: u32 },
    #[error("setup rejected: no requested service model is registered")]
    SetupRejected,
    #[error("unexpected {0:?} on the setup channel")]
    UnexpectedPdu(crate::codec::PduKind),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl From<SimError> for AgentError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::EntryOutOfRange { prb, n_prbs } => Self::EntryOutOfRange { prb, n_prbs },
            other => Self::Transport(TransportError::Protocol(other.to_string())),
        }
    }
}

/// Where the agent pushes frames for one paired dApp.
pub trait IndicationSink: Send {
    fn send_frame(&self, frame: Arc<[u8]>) -> Result<(), TransportError>;
}

impl IndicationSink for Publisher {
    fn send_frame(&self, frame: Arc<[u8]>) -> Result<(), TransportError> {
        self.publish_frame(frame)
    }
}

/// Collects frames in memory.
#[derive(Debug, Clone, Default)]
pub struct MemorySink(pub Arc<Mutex<Vec<Arc<[u8]>>>>);

impl MemorySink {
    pub fn frames(&self) -> Vec<Arc<[u8]>> {
        self.0.lock().unwrap().clone()
    }
}

impl IndicationSink for MemorySink {
    fn send_frame(&self, frame: Arc<[u8]>) -> Result<(), TransportError> {
        self.0.lock().unwrap().push(frame);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceModel {
    pub sm_id: u16,
    pub name: String,
    /// Whether Control messages for this model reach the DU.
    pub accepts_control: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceModelRegistry {
    models: BTreeMap<u16, ServiceModel>,
}

impl ServiceModelRegistry {
    pub fn empty() -> Self {
        Self {
            models: BTreeMap::new(),
        }
    }

    /// SPECTRUM (I/Q bins, PRB-mask control) and CIR (channel snapshots).
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(ServiceModel {
            sm_id: SM_SPECTRUM,
            name: "SPECTRUM".into(),
            accepts_control: true,
        });
        r.register(ServiceModel {
            sm_id: SM_CIR,
            name: "CIR".into(),
            accepts_control: false,
        });
        r
    }

    /// Returns `false` if the id is taken.
    pub fn register(&mut self, model: ServiceModel) -> bool {
        if self.models.contains_key(&model.sm_id) {
            return false;
        }
        self.models.insert(model.sm_id, model);
        true
    }

    pub fn get(&self, sm_id: u16) -> Option<&ServiceModel> {
        self.models.get(&sm_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u16> + '_ {
        self.models.keys().copied()
    }
}

impl Default for ServiceModelRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Default)]
struct XAppState {
    reports: Vec<Report>,
    pending: Option<XAppControl>,
    pairings: Vec<u32>,
}

/// Stand-in for the near-RT controller side: logs Reports and hands out at
/// most one XAppControl per [`MockXApp::trigger`]. Cloning shares the state.
#[derive(Debug, Clone, Default)]
pub struct MockXApp {
    state: Arc<RwLock<XAppState>>,
}

impl MockXApp {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queues a policy for delivery at the next slot; replaces any policy not yet sent.
    pub fn trigger(&self, ctrl: XAppControl) {
        self.state.write().unwrap().pending = Some(ctrl);
    }

    pub fn take_pending(&self) -> Option<XAppControl> {
        self.state.write().unwrap().pending.take()
    }

    pub fn reports(&self) -> Vec<Report> {
        self.state.read().unwrap().reports.clone()
    }

    pub fn report_count(&self) -> usize {
        self.state.read().unwrap().reports.len()
    }

    /// dApps currently paired with the agent.
    pub fn pairings(&self) -> Vec<u32> {
        self.state.read().unwrap().pairings.clone()
    }

    fn log_report(&self, report: Report) {
        self.state.write().unwrap().reports.push(report);
    }

    fn set_pairings(&self, ids: Vec<u32>) {
        self.state.write().unwrap().pairings = ids;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubscriptionEntry {
    pub period_slots: u16,
    /// First slot this entry is eligible for.
    pub start_slot: u64,
    pub last_served_slot: Option<u64>,
}

impl SubscriptionEntry {
    fn due(&self, slot: u64) -> bool {
        let period = u64::from(self.period_slots.max(1));
        slot >= self.start_slot && (slot - self.start_slot).is_multiple_of(period)
    }
}

/// One Control taken over by the DU, stamped when it was applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppliedControl {
    pub dapp_id: u32,
    pub sm_id: u16,
    pub sequence: u32,
    pub n_entries: usize,
    pub t4_ns: u64,
}

struct Pairing {
    accepted: Vec<u16>,
    sink: Option<Box<dyn IndicationSink>>,
}

pub struct E3Agent {
    registry: ServiceModelRegistry,
    pairings: BTreeMap<u32, Pairing>,
    subscriptions: BTreeMap<(u32, u16), SubscriptionEntry>,
    last_slot: Option<u64>,
    scheduler: SchedulerState,
    pending_mask: Option<Vec<u32>>,
    xapp: MockXApp,
    applied: Vec<AppliedControl>,
    bytes_published: u64,
}

impl E3Agent {
    pub fn new(registry: ServiceModelRegistry, n_prbs: u32) -> Self {
        Self {
            registry,
            pairings: BTreeMap::new(),
            subscriptions: BTreeMap::new(),
            last_slot: None,
            scheduler: SchedulerState::new(n_prbs),
            pending_mask: None,
            xapp: MockXApp::new(),
            applied: Vec::new(),
            bytes_published: 0,
        }
    }

    pub fn registry(&self) -> &ServiceModelRegistry {
        &self.registry
    }

    pub fn xapp(&self) -> &MockXApp {
        &self.xapp
    }

    pub fn scheduler(&self) -> &SchedulerState {
        &self.scheduler
    }

    pub fn is_paired(&self, dapp_id: u32) -> bool {
        self.pairings.contains_key(&dapp_id)
    }

    pub fn subscriptions(&self) -> &BTreeMap<(u32, u16), SubscriptionEntry> {
        &self.subscriptions
    }

    /// Total bytes handed to sinks by [`E3Agent::dispatch_slot`].
    pub fn bytes_published(&self) -> u64 {
        self.bytes_published
    }

    /// Pairs the dApp with the registered subset of its requested models.
    /// A rejected request (empty intersection) records nothing.
    pub fn handle_setup(&mut self, req: &SetupRequest) -> Result<SetupResponse, AgentError> {
        if self.pairings.contains_key(&req.dapp_id) {
            return Err(AgentError::DuplicateDappId(req.dapp_id));
        }
        let mut accepted: Vec<u16> = req
            .requested_sm_ids
            .iter()
            .copied()
            .filter(|id| self.registry.get(*id).is_some())
            .collect();
        accepted.sort_unstable();
        accepted.dedup();
        let ok = !accepted.is_empty();
        if ok {
            self.pairings.insert(
                req.dapp_id,
                Pairing {
                    accepted: accepted.clone(),
                    sink: None,
                },
            );
            self.xapp
                .set_pairings(self.pairings.keys().copied().collect());
        }
        Ok(SetupResponse {
            dapp_id: req.dapp_id,
            accepted: ok,
            accepted_sm_ids: accepted,
        })
    }

    /// Attaches the inbound data channel of a paired dApp.
    pub fn attach(
        &mut self,
        dapp_id: u32,
        sink: Box<dyn IndicationSink>,
    ) -> Result<(), AgentError> {
        self.pairings
            .get_mut(&dapp_id)
            .ok_or(AgentError::NotPaired(dapp_id))?
            .sink = Some(sink);
        Ok(())
    }

    /// Forgets the dApp and its subscriptions.
    pub fn unpair(&mut self, dapp_id: u32) {
        self.pairings.remove(&dapp_id);
        self.subscriptions.retain(|(d, _), _| *d != dapp_id);
        self.xapp
            .set_pairings(self.pairings.keys().copied().collect());
    }

    pub fn handle_subscription(
        &mut self,
        req: &SubscriptionRequest,
    ) -> Result<SubscriptionResponse, AgentError> {
        let pairing = self
            .pairings
            .get(&req.dapp_id)
            .ok_or(AgentError::NotPaired(req.dapp_id))?;
        if !pairing.accepted.contains(&req.sm_id) {
            return Err(AgentError::UnknownSm(req.sm_id));
        }
        let key = (req.dapp_id, req.sm_id);
        if self.subscriptions.contains_key(&key) {
            return Err(AgentError::AlreadySubscribed {
                dapp_id: req.dapp_id,
                sm_id: req.sm_id,
            });
        }
        let start_slot = self.last_slot.map_or(0, |s| s + 1);
        self.subscriptions.insert(
            key,
            SubscriptionEntry {
                period_slots: req.period_slots,
                start_slot,
                last_served_slot: None,
            },
        );
        Ok(SubscriptionResponse {
            dapp_id: req.dapp_id,
            sm_id: req.sm_id,
            accepted: true,
        })
    }

    /// Mask received from the dApp, in force from the next slot.
    pub fn pending_mask(&self) -> Option<&[u32]> {
        self.pending_mask.as_deref()
    }

    /// Applies a pending PRB mask and returns the allocation for `slot`.
    /// The whole slot is scheduled under one mask.
    pub fn begin_slot(&mut self) -> PrbRun {
        if let Some(mask) = self.pending_mask.take() {
            self.scheduler
                .replace_mask(mask)
                .expect("pending masks are range-checked on arrival");
        }
        self.scheduler.usable_run()
    }

    /// Publishes one Indication per due subscription. Each service model's
    /// frame is encoded once and shared by all its subscribers; the sequence
    /// number is the slot index. Slots at or before the last dispatched slot
    /// are ignored. Pending xApp policies go out first.
    pub fn dispatch_slot(
        &mut self,
        slot: u64,
        snapshots: &BTreeMap<u16, Vec<u8>>,
    ) -> Result<usize, AgentError> {
        self.forward_xapp_control();
        if self.last_slot.is_some_and(|last| slot <= last) {
            return Ok(0);
        }
        self.last_slot = Some(slot);
        let mut sent = 0;
        for (&sm_id, payload) in snapshots {
            let due: Vec<u32> = self
                .subscriptions
                .iter()
                .filter(|(&(_, sm), e)| sm == sm_id && e.due(slot))
                .map(|(&(dapp, _), _)| dapp)
                .collect();
            if due.is_empty() {
                continue;
            }
            let pdu = E3Pdu::Indication(Indication {
                sm_id,
                sequence: slot as u32,
                origin_ts_ns: monotonic_ns(),
                payload: payload.clone(),
            });
            let frame: Arc<[u8]> = pdu.encode()?.into();
            for dapp in due {
                if let Some(sink) = self.pairings.get(&dapp).and_then(|p| p.sink.as_ref()) {
                    // a vanished dApp is noticed by the host; keep serving the rest
                    if sink.send_frame(Arc::clone(&frame)).is_ok() {
                        sent += 1;
                        self.bytes_published += frame.len() as u64;
                    }
                }
                if let Some(e) = self.subscriptions.get_mut(&(dapp, sm_id)) {
                    e.last_served_slot = Some(slot);
                }
            }
        }
        Ok(sent)
    }

    fn forward_xapp_control(&mut self) {
        let Some(ctrl) = self.xapp.take_pending() else {
            return;
        };
        if let Some(sink) = self
            .pairings
            .get(&ctrl.dapp_id)
            .and_then(|p| p.sink.as_ref())
        {
            if let Ok(frame) = E3Pdu::XAppControl(ctrl).encode() {
                let _ = sink.send_frame(frame.into());
            }
        }
    }

    /// Takes over a PRB blacklist. The mask becomes active at the next
    /// [`E3Agent::begin_slot`] and replaces the previous one.
    pub fn apply_control(
        &mut self,
        dapp_id: u32,
        ctrl: &Control,
    ) -> Result<AppliedControl, AgentError> {
        if !self.pairings.contains_key(&dapp_id) {
            return Err(AgentError::NotPaired(dapp_id));
        }
        match self.registry.get(ctrl.sm_id) {
            Some(sm) if sm.accepts_control => {}
            _ => return Err(AgentError::UnknownSm(ctrl.sm_id)),
        }
        let n_prbs = self.scheduler.n_prbs();
        if let Some(&prb) = ctrl.entries.iter().find(|&&p| p >= n_prbs) {
            return Err(AgentError::EntryOutOfRange { prb, n_prbs });
        }
        self.pending_mask = Some(ctrl.entries.clone());
        let applied = AppliedControl {
            dapp_id,
            sm_id: ctrl.sm_id,
            sequence: ctrl.sequence,
            n_entries: ctrl.entries.len(),
            t4_ns: monotonic_ns(),
        };
        self.applied.push(applied.clone());
        Ok(applied)
    }

    /// Applied controls since the last call.
    pub fn drain_applied(&mut self) -> Vec<AppliedControl> {
        std::mem::take(&mut self.applied)
    }

    pub fn relay_report(&mut self, dapp_id: u32, report: Report) -> Result<(), AgentError> {
        if !self.pairings.contains_key(&dapp_id) {
            return Err(AgentError::NotPaired(dapp_id));
        }
        self.xapp.log_report(report);
        Ok(())
    }
}

impl std::fmt::Debug for E3Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("E3Agent")
            .field("pairings", &self.pairings.keys().collect::<Vec<_>>())
            .field("subscriptions", &self.subscriptions)
            .field("mask", self.scheduler.mask())
            .finish()
    }
}

/// What arrived from the dApp on the outbound channel.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentEvent {
    ControlApplied(AppliedControl),
    ControlRejected { sequence: u32, reason: String },
    Report(Report),
}

/// A live agent serving one dApp pairing over a [`ChannelServer`].
///
/// After [`AgentHost::accept`] a background thread answers further requests
/// on the setup channel (subscriptions); slot dispatch and outbound
/// processing stay with the caller. Both lock the same [`E3Agent`].
pub struct AgentHost {
    agent: Arc<Mutex<E3Agent>>,
    server: ChannelServer,
    opts: ChannelOptions,
    dapp_id: Option<u32>,
    outbound: Option<Subscriber>,
    stop: Arc<AtomicBool>,
    setup_thread: Option<JoinHandle<()>>,
}

const SETUP_POLL: Duration = Duration::from_millis(20);

impl AgentHost {
    pub fn bind(
        kind: TransportKind,
        endpoint: &str,
        agent: E3Agent,
        opts: ChannelOptions,
    ) -> Result<Self, AgentError> {
        Ok(Self {
            agent: Arc::new(Mutex::new(agent)),
            server: ChannelServer::open(kind, endpoint)?,
            opts,
            dapp_id: None,
            outbound: None,
            stop: Arc::new(AtomicBool::new(false)),
            setup_thread: None,
        })
    }

    pub fn server(&self) -> &ChannelServer {
        &self.server
    }

    pub fn agent(&self) -> MutexGuard<'_, E3Agent> {
        self.agent.lock().unwrap()
    }

    pub fn dapp_id(&self) -> Option<u32> {
        self.dapp_id
    }

    /// Waits for a dApp, runs setup and opens the data channels.
    pub fn accept(&mut self, timeout: Option<Duration>) -> Result<u32, AgentError> {
        if self.dapp_id.is_some() {
            return Err(AgentError::Transport(TransportError::Protocol(
                "host already paired".into(),
            )));
        }
        let mut replier = self.server.accept_setup(timeout)?;
        let req = match replier.recv(Some(self.opts.timeout))? {
            E3Pdu::SetupRequest(r) => r,
            other => return Err(AgentError::UnexpectedPdu(other.kind())),
        };
        let resp = match self.agent().handle_setup(&req) {
            Ok(r) => r,
            Err(AgentError::DuplicateDappId(_)) => SetupResponse {
                dapp_id: req.dapp_id,
                accepted: false,
                accepted_sm_ids: vec![],
            },
            Err(e) => return Err(e),
        };
        replier.reply(&E3Pdu::SetupResponse(resp.clone()))?;
        if !resp.accepted {
            return Err(AgentError::SetupRejected);
        }
        let data = match self.server.accept_data(&self.opts) {
            Ok(d) => d,
            Err(e) => {
                self.agent().unpair(req.dapp_id);
                return Err(e.into());
            }
        };
        self.agent().attach(req.dapp_id, Box::new(data.inbound))?;
        self.outbound = Some(data.outbound);
        self.dapp_id = Some(req.dapp_id);

        let agent = Arc::clone(&self.agent);
        let stop = Arc::clone(&self.stop);
        self.setup_thread = Some(
            thread::Builder::new()
                .name("e3-agent-setup".into())
                .spawn(move || serve_setup(replier, agent, stop))
                .map_err(TransportError::from)?,
        );
        Ok(req.dapp_id)
    }

    /// Blocks until `n` subscriptions exist or the timeout passes.
    pub fn wait_subscriptions(&self, n: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.agent().subscriptions().len() >= n {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_micros(200));
        }
    }

    /// Processes the next PDU from the dApp: Controls go to the DU, Reports
    /// to the mock xApp.
    pub fn poll_outbound(&self, timeout: Duration) -> Result<AgentEvent, AgentError> {
        let outbound = self.outbound.as_ref().ok_or(TransportError::NotPaired)?;
        let dapp_id = self.dapp_id.ok_or(TransportError::NotPaired)?;
        loop {
            match outbound.next(timeout)? {
                E3Pdu::Control(ctrl) => {
                    return Ok(match self.agent().apply_control(dapp_id, &ctrl) {
                        Ok(applied) => AgentEvent::ControlApplied(applied),
                        Err(e) => AgentEvent::ControlRejected {
                            sequence: ctrl.sequence,
                            reason: e.to_string(),
                        },
                    });
                }
                E3Pdu::Report(report) => {
                    self.agent().relay_report(dapp_id, report.clone())?;
                    return Ok(AgentEvent::Report(report));
                }
                // nothing else is valid dApp → RAN data traffic
                _ => continue,
            }
        }
    }

    /// Frames the dApp side dropped from its inbound queue are not visible
    /// here; this is the RAN-side outbound drop count.
    pub fn outbound_dropped(&self) -> u64 {
        self.outbound.as_ref().map_or(0, Subscriber::dropped)
    }
}

impl Drop for AgentHost {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.setup_thread.take() {
            let _ = t.join();
        }
    }
}

impl std::fmt::Debug for AgentHost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentHost")
            .field("dapp_id", &self.dapp_id)
            .finish()
    }
}

fn serve_setup(mut replier: Replier, agent: Arc<Mutex<E3Agent>>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::Relaxed) {
        let pdu = match replier.recv(Some(SETUP_POLL)) {
            Ok(p) => p,
            Err(TransportError::TimedOut) => continue,
            Err(_) => break,
        };
        let reply = match pdu {
            E3Pdu::SubscriptionRequest(req) => {
                let accepted = agent.lock().unwrap().handle_subscription(&req).is_ok();
                E3Pdu::SubscriptionResponse(SubscriptionResponse {
                    dapp_id: req.dapp_id,
                    sm_id: req.sm_id,
                    accepted,
                })
            }
            E3Pdu::SetupRequest(req) => E3Pdu::SetupResponse(SetupResponse {
                dapp_id: req.dapp_id,
                accepted: false,
                accepted_sm_ids: vec![],
            }),
            _ => continue,
        };
        if replier.reply(&reply).is_err() {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paired(agent: &mut E3Agent, dapp_id: u32) -> MemorySink {
        agent
            .handle_setup(&SetupRequest {
                dapp_id,
                requested_sm_ids: vec![1, 2],
            })
            .unwrap();
        let sink = MemorySink::default();
        agent.attach(dapp_id, Box::new(sink.clone())).unwrap();
        sink
    }

    fn sub(
        agent: &mut E3Agent,
        dapp_id: u32,
        sm_id: u16,
        period_slots: u16,
    ) -> Result<SubscriptionResponse, AgentError> {
        agent.handle_subscription(&SubscriptionRequest {
            dapp_id,
            sm_id,
            period_slots,
        })
    }

    fn snap(sm: u16) -> BTreeMap<u16, Vec<u8>> {
        BTreeMap::from([(sm, vec![0xAB; 16])])
    }

    #[test]
    fn setup_intersects_with_registry() {
        let mut a = E3Agent::new(ServiceModelRegistry::builtin(), 106);
        let r = a
            .handle_setup(&SetupRequest {
                dapp_id: 1,
                requested_sm_ids: vec![1, 2],
            })
            .unwrap();
        assert!(r.accepted);
        assert_eq!(r.accepted_sm_ids, vec![1, 2]);
        let r = a
            .handle_setup(&SetupRequest {
                dapp_id: 2,
                requested_sm_ids: vec![9],
            })
            .unwrap();
        assert!(!r.accepted);
        assert!(r.accepted_sm_ids.is_empty());
        assert!(matches!(
            a.handle_setup(&SetupRequest {
                dapp_id: 1,
                requested_sm_ids: vec![1]
            }),
            Err(AgentError::DuplicateDappId(1))
        ));
        assert_eq!(a.xapp().pairings(), vec![1]);
    }

    #[test]
    fn subscription_errors() {
        let mut a = E3Agent::new(ServiceModelRegistry::builtin(), 106);
        assert!(matches!(
            sub(&mut a, 7, 1, 1),
            Err(AgentError::NotPaired(7))
        ));
        a.handle_setup(&SetupRequest {
            dapp_id: 7,
            requested_sm_ids: vec![1],
        })
        .unwrap();
        assert!(sub(&mut a, 7, 1, 1).unwrap().accepted);
        assert!(matches!(
            sub(&mut a, 7, 1, 1),
            Err(AgentError::AlreadySubscribed { .. })
        ));
        assert!(matches!(
            sub(&mut a, 7, 2, 1),
            Err(AgentError::UnknownSm(2))
        ));
    }

    #[test]
    fn shared_frame_for_all_subscribers() {
        let mut a = E3Agent::new(ServiceModelRegistry::builtin(), 106);
        let s1 = paired(&mut a, 1);
        let s2 = paired(&mut a, 2);
        sub(&mut a, 1, 1, 1).unwrap();
        sub(&mut a, 2, 1, 1).unwrap();
        assert_eq!(a.dispatch_slot(0, &snap(1)).unwrap(), 2);
        let (f1, f2) = (s1.frames(), s2.frames());
        assert!(Arc::ptr_eq(&f1[0], &f2[0]));
        assert_eq!(a.bytes_published(), 2 * f1[0].len() as u64);
    }

    #[test]
    fn period_and_idempotence() {
        let mut a = E3Agent::new(ServiceModelRegistry::builtin(), 106);
        let s = paired(&mut a, 1);
        sub(&mut a, 1, 1, 4).unwrap();
        let served: Vec<u64> = (0..8)
            .filter(|&slot| a.dispatch_slot(slot, &snap(1)).unwrap() == 1)
            .collect();
        assert_eq!(served, vec![0, 4]);
        assert_eq!(a.dispatch_slot(4, &snap(1)).unwrap(), 0);
        let seqs: Vec<u32> = s
            .frames()
            .iter()
            .map(|f| match E3Pdu::decode(f).unwrap().0 {
                E3Pdu::Indication(i) => i.sequence,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(seqs, vec![0, 4]);
    }

    #[test]
    fn empty_table_dispatches_nothing() {
        let mut a = E3Agent::new(ServiceModelRegistry::builtin(), 106);
        assert_eq!(a.dispatch_slot(0, &snap(1)).unwrap(), 0);
    }

    #[test]
    fn late_subscription_starts_next_slot() {
        let mut a = E3Agent::new(ServiceModelRegistry::builtin(), 106);
        paired(&mut a, 1);
        a.dispatch_slot(5, &snap(1)).unwrap();
        sub(&mut a, 1, 1, 2).unwrap();
        assert_eq!(a.subscriptions()[&(1, 1)].start_slot, 6);
        assert_eq!(a.dispatch_slot(6, &snap(1)).unwrap(), 1);
        assert_eq!(a.dispatch_slot(7, &snap(1)).unwrap(), 0);
    }

    #[test]
    fn control_replaces_mask_at_next_slot() {
        let mut a = E3Agent::new(ServiceModelRegistry::builtin(), 106);
        paired(&mut a, 1);
        let ctrl = Control {
            sm_id: 1,
            sequence: 3,
            entries: vec![30, 31, 32, 33],
        };
        a.apply_control(1, &ctrl).unwrap();
        assert!(a.scheduler().mask().is_empty());
        assert_eq!(a.begin_slot(), PrbRun { start: 0, len: 30 });
        a.apply_control(
            1,
            &Control {
                sm_id: 1,
                sequence: 4,
                entries: vec![],
            },
        )
        .unwrap();
        assert_eq!(a.begin_slot(), PrbRun::full(106));
        let log = a.drain_applied();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].n_entries, 4);
    }

    #[test]
    fn control_errors() {
        let mut a = E3Agent::new(ServiceModelRegistry::builtin(), 106);
        let c = Control {
            sm_id: 1,
            sequence: 0,
            entries: vec![999],
        };
        assert!(matches!(
            a.apply_control(1, &c),
            Err(AgentError::NotPaired(1))
        ));
        paired(&mut a, 1);
        assert!(matches!(
            a.apply_control(1, &c),
            Err(AgentError::EntryOutOfRange {
                prb: 999,
                n_prbs: 106
            })
        ));
        let cir = Control {
            sm_id: SM_CIR,
            sequence: 0,
            entries: vec![],
        };
        assert!(matches!(
            a.apply_control(1, &cir),
            Err(AgentError::UnknownSm(2))
        ));
        assert_eq!(a.begin_slot(), PrbRun::full(106));
    }

    #[test]
    fn reports_are_logged_in_order() {
        let mut a = E3Agent::new(ServiceModelRegistry::builtin(), 106);
        let r = |i: u8| Report {
            dapp_id: 1,
            sm_id: 1,
            payload: vec![i],
        };
        assert!(matches!(
            a.relay_report(1, r(0)),
            Err(AgentError::NotPaired(1))
        ));
        paired(&mut a, 1);
        for i in 0..100 {
            a.relay_report(1, r(i)).unwrap();
        }
        let log = a.xapp().reports();
        assert_eq!(log.len(), 100);
        assert!(log
            .iter()
            .enumerate()
            .all(|(i, rep)| rep.payload == [i as u8]));
    }

    #[test]
    fn xapp_policy_sent_once() {
        let mut a = E3Agent::new(ServiceModelRegistry::builtin(), 106);
        let s = paired(&mut a, 1);
        a.xapp().trigger(XAppControl {
            dapp_id: 1,
            policy_key: 1,
            policy_value: 1500i32.to_be_bytes().to_vec(),
        });
        a.dispatch_slot(0, &BTreeMap::new()).unwrap();
        a.dispatch_slot(1, &BTreeMap::new()).unwrap();
        assert_eq!(s.frames().len(), 1);
    }
}
