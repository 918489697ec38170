//! Control-loop latency measurement over a live agent/dApp pair.
//!
//! Every loop is timestamped at five points on the host monotonic clock:
//! T0 indication stamped by the agent, T1 taken off the channel by the dApp,
//! T2 handler done, T3 control published, T4 control applied by the agent.
//! The stages are collect = T1−T0, process = T2−T1, create = T3−T2 and
//! deliver = T4−T3; cumulative latency is T4−T0.

use std::collections::HashMap;
use std::io::Write;
use std::time::Duration;

use num_complex::Complex;
use serde::Serialize;
use thiserror::Error;

use crate::agent::{AgentError, AgentEvent, AgentHost, E3Agent, ServiceModelRegistry};
use crate::codec::{Indication, HEADER_LEN, PRB_ENTRY_LEN, SM_SPECTRUM};
use crate::ransim::{gen_spectrum, iq_from_payload, IncumbentConfig, PrbRun, RadioConfig};
use crate::sdk::{
    spawn_dapp, DappLaunch, HandlerResult, IndicationHandler, SdkError, StopSignal, TickContext,
    TickRecord,
};
use crate::spectrum::{detect, SpectrumConfig};
use crate::transport::{
    account_overhead, ChannelOptions, OverheadModel, TransportError, TransportKind,
};

pub const INDICATION_BYTES: [usize; 4] = [1536, 3072, 6144, 8192];
pub const WARMUP_LOOPS: usize = 100;
pub const DEFAULT_LOOPS: usize = 10_000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("clock unusable: timestamps out of order on loop {sequence} ({detail})")]
    ClockUnusable { sequence: u32, detail: String },
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
    #[error("loop {0} stalled: no control came back")]
    Stalled(u64),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Sdk(#[from] SdkError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Collect,
    Process,
    Create,
    Deliver,
    Cumulative,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Collect,
        Stage::Process,
        Stage::Create,
        Stage::Deliver,
        Stage::Cumulative,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::Process => "process",
            Stage::Create => "create",
            Stage::Deliver => "deliver",
            Stage::Cumulative => "cumulative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageLatencyRecord {
    pub sequence: u32,
    pub t0_ns: u64,
    pub t1_ns: u64,
    pub t2_ns: u64,
    pub t3_ns: u64,
    pub t4_ns: u64,
}

impl StageLatencyRecord {
    /// Rejects records whose timestamps are not ordered T0 ≤ … ≤ T4.
    pub fn new(sequence: u32, t: [u64; 5]) -> Result<Self, BenchError> {
        if let Some(i) = (0..4).find(|&i| t[i] > t[i + 1]) {
            return Err(BenchError::ClockUnusable {
                sequence,
                detail: format!("T{i}={} > T{}={}", t[i], i + 1, t[i + 1]),
            });
        }
        Ok(Self {
            sequence,
            t0_ns: t[0],
            t1_ns: t[1],
            t2_ns: t[2],
            t3_ns: t[3],
            t4_ns: t[4],
        })
    }

    pub fn from_tick(tick: &TickRecord, t4_ns: u64) -> Result<Self, BenchError> {
        Self::new(
            tick.sequence,
            [tick.t0_ns, tick.t1_ns, tick.t2_ns, tick.t3_ns, t4_ns],
        )
    }

    pub fn stage_ns(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Collect => self.t1_ns - self.t0_ns,
            Stage::Process => self.t2_ns - self.t1_ns,
            Stage::Create => self.t3_ns - self.t2_ns,
            Stage::Deliver => self.t4_ns - self.t3_ns,
            Stage::Cumulative => self.t4_ns - self.t0_ns,
        }
    }

    pub fn stages_sum_to_cumulative(&self) -> bool {
        Stage::ALL[..4]
            .iter()
            .map(|&s| self.stage_ns(s))
            .sum::<u64>()
            == self.stage_ns(Stage::Cumulative)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageSummary {
    pub n: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub min_us: f64,
    pub max_us: f64,
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[u64], p: f64) -> u64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Summary statistics in microseconds; all zero for an empty input.
pub fn summarize(values_ns: &[u64]) -> StageSummary {
    if values_ns.is_empty() {
        return StageSummary::default();
    }
    let mut sorted = values_ns.to_vec();
    sorted.sort_unstable();
    let us = |ns: u64| ns as f64 / 1e3;
    let mean = values_ns.iter().map(|&v| v as f64).sum::<f64>() / values_ns.len() as f64 / 1e3;
    StageSummary {
        n: sorted.len(),
        mean_us: mean,
        p50_us: us(percentile(&sorted, 50.0)),
        p99_us: us(percentile(&sorted, 99.0)),
        min_us: us(sorted[0]),
        max_us: us(sorted[sorted.len() - 1]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// 1-based position in the grid.
    pub config_id: usize,
    pub indication_bytes: usize,
    pub control_entries: usize,
    pub n_loops: usize,
    pub warmup: usize,
    pub transport: TransportKind,
    /// Setup endpoint; a private one is chosen when `None`.
    pub endpoint: Option<String>,
    pub n_prbs: u32,
}

impl BenchConfig {
    pub fn new(indication_bytes: usize, control_entries: usize) -> Self {
        Self {
            config_id: 0,
            indication_bytes,
            control_entries,
            n_loops: DEFAULT_LOOPS,
            warmup: WARMUP_LOOPS,
            transport: TransportKind::LocalIpc,
            endpoint: None,
            n_prbs: 106,
        }
    }

    /// Control sizes per resolution: empty, 4 and 8 PRBs, and every PRB.
    pub fn control_entry_counts(n_prbs: u32) -> [usize; 4] {
        [0, 4, 8, n_prbs as usize]
    }

    /// The 16 indication × control configurations.
    pub fn grid(n_loops: usize, transport: TransportKind) -> Vec<BenchConfig> {
        let mut out = Vec::with_capacity(16);
        for &ind in &INDICATION_BYTES {
            for ctrl in Self::control_entry_counts(106) {
                let mut c = BenchConfig::new(ind, ctrl);
                c.config_id = out.len() + 1;
                c.n_loops = n_loops;
                c.transport = transport;
                out.push(c);
            }
        }
        out
    }

    pub fn resolution(&self) -> usize {
        self.indication_bytes / 4
    }

    /// Size of the Control's PRB entry section.
    pub fn control_bytes(&self) -> usize {
        self.control_entries * PRB_ENTRY_LEN
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if !self.indication_bytes.is_multiple_of(4) || self.resolution() < self.n_prbs as usize {
            return Err(BenchError::InvalidConfig(format!(
                "indication of {} bytes does not hold at least {} I/Q samples",
                self.indication_bytes, self.n_prbs
            )));
        }
        if self.control_entries > self.n_prbs as usize {
            return Err(BenchError::InvalidConfig(format!(
                "{} control entries exceed {} PRBs",
                self.control_entries, self.n_prbs
            )));
        }
        if !self.transport.is_live() {
            return Err(BenchError::InvalidConfig(format!(
                "{} cannot carry traffic",
                self.transport
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BenchSummary {
    pub config: BenchConfig,
    pub stages: Vec<(Stage, StageSummary)>,
    pub records: usize,
    /// Records whose four stages do not add up to the cumulative latency.
    pub identity_violations: usize,
    pub dropped: u64,
}

impl BenchSummary {
    pub fn from_records(config: BenchConfig, records: &[StageLatencyRecord], dropped: u64) -> Self {
        let stages = Stage::ALL
            .iter()
            .map(|&s| {
                (
                    s,
                    summarize(&records.iter().map(|r| r.stage_ns(s)).collect::<Vec<_>>()),
                )
            })
            .collect();
        let identity_violations = records
            .iter()
            .filter(|r| !r.stages_sum_to_cumulative())
            .count();
        Self {
            config,
            stages,
            records: records.len(),
            identity_violations,
            dropped,
        }
    }

    pub fn stage(&self, stage: Stage) -> StageSummary {
        self.stages
            .iter()
            .find(|(s, _)| *s == stage)
            .map(|(_, v)| *v)
            .unwrap_or_default()
    }
}

/// Detects the incumbent, then answers with a fixed-size blacklist so the
/// control size is controlled by the configuration.
struct BenchHandler {
    detect_cfg: SpectrumConfig,
    entries: Vec<u32>,
}

impl IndicationHandler for BenchHandler {
    fn on_indication(
        &mut self,
        _ctx: &mut TickContext<'_>,
        indication: &Indication,
    ) -> HandlerResult {
        let bins: Vec<Complex<i16>> = iq_from_payload(&indication.payload)?;
        let found = detect(&bins, &self.detect_cfg)?;
        std::hint::black_box(found);
        Ok(Some(self.entries.clone()))
    }
}

fn private_endpoint(
    kind: TransportKind,
) -> Result<(Option<tempfile::TempDir>, String), BenchError> {
    match kind {
        TransportKind::LocalIpc => {
            let dir = tempfile::Builder::new().prefix("e3b").tempdir_in("/tmp")?;
            let ep = dir
                .path()
                .join("bench.setup")
                .to_string_lossy()
                .into_owned();
            Ok((Some(dir), ep))
        }
        _ => {
            let l = std::net::TcpListener::bind("127.0.0.1:0")?;
            let port = l.local_addr()?.port().min(u16::MAX - 2);
            Ok((None, format!("127.0.0.1:{port}")))
        }
    }
}

/// Runs `warmup + n_loops` lockstep loops: the agent dispatches one
/// indication, waits for the matching control, then moves on. Returns the
/// summary and the post-warm-up records.
pub fn run_bench(cfg: &BenchConfig) -> Result<(BenchSummary, Vec<StageLatencyRecord>), BenchError> {
    cfg.validate()?;
    if cfg.n_loops == 0 {
        return Ok((BenchSummary::from_records(cfg.clone(), &[], 0), Vec::new()));
    }
    let (_dir, endpoint) = match &cfg.endpoint {
        Some(ep) => (None, ep.clone()),
        None => private_endpoint(cfg.transport)?,
    };
    let radio = RadioConfig {
        resolution_bins: cfg.resolution(),
        n_prbs: cfg.n_prbs,
        ..RadioConfig::default()
    };
    radio
        .validate()
        .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    let spectrum = gen_spectrum(
        &radio,
        &IncumbentConfig::default(),
        &PrbRun::full(cfg.n_prbs),
        0,
        1,
    );
    let payload = std::collections::BTreeMap::from([(SM_SPECTRUM, spectrum.to_payload())]);

    let opts = ChannelOptions::default();
    let mut host = AgentHost::bind(
        cfg.transport,
        &endpoint,
        E3Agent::new(ServiceModelRegistry::builtin(), cfg.n_prbs),
        opts,
    )?;

    let stop = StopSignal::new();
    let (ticks_tx, ticks_rx) = std::sync::mpsc::channel();
    let handler = BenchHandler {
        detect_cfg: SpectrumConfig {
            n_prbs: cfg.n_prbs,
            resolution: cfg.resolution(),
            ..SpectrumConfig::default()
        },
        entries: (cfg.n_prbs - cfg.control_entries as u32..cfg.n_prbs).collect(),
    };
    let launch = DappLaunch {
        dapp_id: 1,
        kind: cfg.transport,
        endpoint: endpoint.clone(),
        opts,
        sm_id: SM_SPECTRUM,
        period_slots: 1,
        handler: Box::new(handler),
        records: Some(Box::new(move |r| {
            let _ = ticks_tx.send(r);
        })),
    };
    let dapp = spawn_dapp(launch, stop.clone())?;

    let run = (|| -> Result<HashMap<u32, u64>, BenchError> {
        host.accept(Some(Duration::from_secs(5)))?;
        if !host.wait_subscriptions(1, Duration::from_secs(5)) {
            return Err(BenchError::Stalled(0));
        }
        let total = (cfg.warmup + cfg.n_loops) as u64;
        let mut t4 = HashMap::with_capacity(total as usize);
        for slot in 0..total {
            {
                let mut agent = host.agent();
                agent.begin_slot();
                agent.dispatch_slot(slot, &payload)?;
            }
            loop {
                match host.poll_outbound(Duration::from_secs(2)) {
                    Ok(AgentEvent::ControlApplied(a)) if u64::from(a.sequence) == slot => {
                        t4.insert(a.sequence, a.t4_ns);
                        break;
                    }
                    Ok(_) => continue,
                    Err(AgentError::Transport(TransportError::TimedOut)) => {
                        return Err(BenchError::Stalled(slot))
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(t4)
    })();

    stop.stop();
    let dropped = host.outbound_dropped();
    drop(host);
    let dapp_result = dapp
        .join()
        .map_err(|_| BenchError::InvalidConfig("dApp thread panicked".into()))?;
    let t4 = run?;
    dapp_result?;

    let mut records = Vec::with_capacity(cfg.n_loops);
    for tick in ticks_rx.try_iter() {
        if (tick.sequence as usize) < cfg.warmup {
            continue;
        }
        if let Some(&t4) = t4.get(&tick.sequence) {
            records.push(StageLatencyRecord::from_tick(&tick, t4)?);
        }
    }
    records.sort_by_key(|r| r.sequence);
    Ok((
        BenchSummary::from_records(cfg.clone(), &records, dropped),
        records,
    ))
}

/// CSV with one row per configuration and stage.
pub fn write_summary_csv<W: Write>(summaries: &[BenchSummary], out: W) -> Result<(), BenchError> {
    #[derive(Serialize)]
    struct Row {
        config_id: usize,
        indication_bytes: usize,
        control_bytes: usize,
        stage: &'static str,
        mean_us: String,
        p50_us: String,
        p99_us: String,
        n: usize,
    }
    let mut w = csv::Writer::from_writer(out);
    for s in summaries {
        for &(stage, st) in &s.stages {
            w.serialize(Row {
                config_id: s.config.config_id,
                indication_bytes: s.config.indication_bytes,
                control_bytes: s.config.control_bytes(),
                stage: stage.label(),
                mean_us: format!("{:.3}", st.mean_us),
                p50_us: format!("{:.3}", st.p50_us),
                p99_us: format!("{:.3}", st.p99_us),
                n: st.n,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Smallest message length both calibrated segment sizes (200 and 162 B)
/// divide, so every row sits exactly on its calibration point.
pub const OVERHEAD_TABLE_MESSAGE_LEN: usize = 16_200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadRow {
    pub transport: TransportKind,
    pub overhead_pct_without_framing: f64,
    pub overhead_pct_with_framing: f64,
}

/// Transport overhead for a `message_len`-byte message, without and with
/// the 6-byte E3 frame header.
pub fn overhead_rows(model: &OverheadModel, message_len: usize) -> Vec<OverheadRow> {
    [
        TransportKind::LocalIpc,
        TransportKind::Tcp,
        TransportKind::SctpModel,
    ]
    .into_iter()
    .map(|kind| {
        let pct = |wire: usize| 100.0 * (wire - message_len) as f64 / message_len as f64;
        OverheadRow {
            transport: kind,
            overhead_pct_without_framing: pct(account_overhead(model, kind, message_len)),
            overhead_pct_with_framing: pct(account_overhead(model, kind, message_len + HEADER_LEN)),
        }
    })
    .collect()
}

pub fn emit_overhead_table<W: Write>(
    model: &OverheadModel,
    message_len: usize,
    out: W,
) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "transport",
        "overhead_pct_without_framing",
        "overhead_pct_with_framing",
    ])?;
    for row in overhead_rows(model, message_len) {
        w.write_record([
            row.transport.label().to_string(),
            format!("{:.3}", row.overhead_pct_without_framing),
            format!("{:.3}", row.overhead_pct_with_framing),
        ])?;
    }
    w.flush()?;
    Ok(())
}
