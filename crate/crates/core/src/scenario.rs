//! TOML scenarios: one simulated DU, optionally one dApp, run slot by slot.
//!
//! ```toml
//! name = "incumbent-with-dapp"
//! seed = 7
//! duration_slots = 200
//!
//! [radio]                 # required; RadioConfig fields, all optional
//! resolution_bins = 1536
//!
//! [incumbent]
//! enabled = true
//! start_slot = 50         # active for start_slot <= slot < end_slot
//!
//! [dapp]
//! kind = "spectrum"       # none | spectrum | ranging
//! threshold_db = 20
//!
//! [goodput]               # GoodputModel fields
//! [scheduler]
//! policy = "type1"
//! ```
//!
//! The dApp talks to the agent over real Unix domain sockets in a private
//! directory. The two sides run in lockstep (the agent waits for the dApp's
//! answer before the next slot), so outputs depend only on the file and its
//! seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::agent::{AgentError, AgentEvent, AgentHost, E3Agent, ServiceModelRegistry};
use crate::codec::{SM_CIR, SM_SPECTRUM};
use crate::ranging::{self, RangingConfig, RangingDapp};
use crate::ransim::{
    gen_cir_paths, gen_spectrum, interfered_prbs, slot_rng, GoodputModel, IncumbentConfig,
    PathSpec, RadioConfig,
};
use crate::sdk::{spawn_dapp, DappLaunch, IndicationHandler, SdkError, StopSignal};
use crate::spectrum::{self, SpectrumConfig, SpectrumDapp};
use crate::transport::{ChannelOptions, TransportError, TransportKind};
use crate::SPEED_OF_LIGHT;

/// A problem with a scenario file, located as precisely as possible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = &self.path {
            write!(f, "{}", p.display())?;
            if let Some(l) = self.line {
                write!(f, ":{l}")?;
            }
            f.write_str(": ")?;
        } else if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if let Some(field) = &self.field {
            write!(f, "{field}: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("slot {slot}: {reason}")]
    Runtime { slot: u64, reason: String },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Sdk(#[from] SdkError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DappKind {
    #[default]
    None,
    Spectrum,
    Ranging,
}

impl DappKind {
    pub fn label(self) -> &'static str {
        match self {
            DappKind::None => "none",
            DappKind::Spectrum => "spectrum",
            DappKind::Ranging => "ranging",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DappSection {
    pub kind: DappKind,
    pub dapp_id: u32,
    /// Spectrum detection threshold, dB above the noise floor.
    pub threshold_db: f64,
    pub hysteresis_slots: u32,
    /// Snapshots per ranging estimate.
    #[serde(rename = "M")]
    pub m: usize,
    pub model_order: usize,
    pub grid_step_ns: f64,
    pub tau_max_ns: f64,
    pub refine: bool,
    /// UE distances visited in order, one batch of M slots each.
    pub distances_m: Vec<f64>,
    /// Uplink SNR; omitted means noiseless.
    pub snr_db: Option<f64>,
}

impl Default for DappSection {
    fn default() -> Self {
        let r = RangingConfig::default();
        Self {
            kind: DappKind::None,
            dapp_id: 1,
            threshold_db: SpectrumConfig::default().threshold_db,
            hysteresis_slots: 0,
            m: r.m,
            model_order: r.model_order,
            grid_step_ns: r.grid_step_s * 1e9,
            tau_max_ns: r.tau_max_s * 1e9,
            refine: r.refine,
            distances_m: (3..=10).map(f64::from).collect(),
            snr_db: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncumbentSection {
    pub enabled: bool,
    pub center_hz: f64,
    pub width_hz: f64,
    pub power_db: f64,
    pub start_slot: u64,
    pub end_slot: Option<u64>,
}

impl Default for IncumbentSection {
    fn default() -> Self {
        let d = IncumbentConfig::default();
        Self {
            enabled: d.enabled,
            center_hz: d.center_hz,
            width_hz: d.width_hz,
            power_db: d.power_db,
            start_slot: 0,
            end_slot: None,
        }
    }
}

impl IncumbentSection {
    pub fn config(&self) -> IncumbentConfig {
        IncumbentConfig {
            enabled: self.enabled,
            center_hz: self.center_hz,
            width_hz: self.width_hz,
            power_db: self.power_db,
        }
    }

    pub fn active(&self, slot: u64) -> bool {
        self.enabled && slot >= self.start_slot && self.end_slot.is_none_or(|end| slot < end)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    /// Only `type1` is implemented.
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub duration_slots: u64,
    #[serde(default = "default_transport")]
    pub transport: String,
    pub radio: RadioConfig,
    #[serde(default)]
    pub incumbent: IncumbentSection,
    #[serde(default)]
    pub dapp: DappSection,
    #[serde(default)]
    pub goodput: GoodputModel,
    #[serde(default)]
    pub scheduler: SchedulerSection,
}

fn default_seed() -> u64 {
    1
}

fn default_transport() -> String {
    "ipc".into()
}

impl Scenario {
    /// Parses and checks a scenario without running it.
    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        let scenario: Scenario = toml::from_str(src).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(src, s.start));
            let message = e.message().to_string();
            let field = missing_field(&message);
            ConfigError {
                path: None,
                line,
                field,
                message,
            }
        })?;
        scenario
            .check()
            .map_err(|(section, key, message)| ConfigError {
                path: None,
                line: find_key_line(src, section, key),
                field: Some(match (section, key) {
                    ("", k) => k.to_string(),
                    (s, "") => s.to_string(),
                    (s, k) => format!("{s}.{k}"),
                }),
                message,
            })?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = fs::read_to_string(path).map_err(|e| ConfigError {
            path: Some(path.to_path_buf()),
            line: None,
            field: None,
            message: e.to_string(),
        })?;
        Self::parse(&src).map_err(|mut e| {
            e.path = Some(path.to_path_buf());
            e
        })
    }

    pub fn display_name(&self) -> &str {
        self.name.as_deref().unwrap_or("unnamed")
    }

    /// Re-runs the semantic checks, e.g. after overriding fields in code.
    pub fn recheck(&self) -> Result<(), ConfigError> {
        self.check().map_err(|(section, key, message)| ConfigError {
            path: None,
            line: None,
            field: Some(if section.is_empty() {
                key.to_string()
            } else if key.is_empty() {
                section.to_string()
            } else {
                format!("{section}.{key}")
            }),
            message,
        })
    }

    pub fn spectrum_config(&self) -> SpectrumConfig {
        SpectrumConfig {
            threshold_db: self.dapp.threshold_db,
            noise_floor_db: self.radio.noise_floor_db,
            n_prbs: self.radio.n_prbs,
            resolution: self.radio.resolution_bins,
            hysteresis_slots: self.dapp.hysteresis_slots,
        }
    }

    pub fn ranging_config(&self) -> RangingConfig {
        RangingConfig {
            m: self.dapp.m,
            model_order: self.dapp.model_order,
            tau_max_s: self.dapp.tau_max_ns * 1e-9,
            grid_step_s: self.dapp.grid_step_ns * 1e-9,
            refine: self.dapp.refine,
            forward_backward: true,
            subcarrier_spacing_hz: self.radio.subcarrier_spacing_hz(),
        }
    }

    /// Semantic checks; errors name `(section, key, message)`.
    fn check(&self) -> Result<(), (&'static str, &'static str, String)> {
        if self.duration_slots == 0 {
            return Err(("", "duration_slots", "must be greater than 0".into()));
        }
        if self
            .transport
            .parse::<TransportKind>()
            .map_or(true, |k| !k.is_live())
        {
            return Err((
                "",
                "transport",
                format!("`{}` is not a live transport (ipc, tcp)", self.transport),
            ));
        }
        self.radio
            .validate()
            .map_err(|e| ("radio", "", e.to_string()))?;
        self.incumbent
            .config()
            .validate(&self.radio)
            .map_err(|e| ("incumbent", "center_hz", e.to_string()))?;
        if self
            .incumbent
            .end_slot
            .is_some_and(|end| end <= self.incumbent.start_slot)
        {
            return Err(("incumbent", "end_slot", "must be after start_slot".into()));
        }
        self.goodput
            .validate()
            .map_err(|e| ("goodput", "", e.to_string()))?;
        if !matches!(self.scheduler.policy.as_str(), "" | "type1") {
            return Err((
                "scheduler",
                "policy",
                format!(
                    "unknown policy `{}` (expected type1)",
                    self.scheduler.policy
                ),
            ));
        }
        match self.dapp.kind {
            DappKind::None => {}
            DappKind::Spectrum => {
                self.spectrum_config()
                    .validate()
                    .map_err(|e| ("dapp", "threshold_db", e.to_string()))?;
            }
            DappKind::Ranging => {
                self.ranging_config()
                    .validate()
                    .map_err(|e| ("dapp", "M", e.to_string()))?;
                if self.dapp.distances_m.is_empty()
                    || self
                        .dapp
                        .distances_m
                        .iter()
                        .any(|d| !(*d > 0.0) || !d.is_finite())
                {
                    return Err((
                        "dapp",
                        "distances_m",
                        "need at least one positive distance".into(),
                    ));
                }
                if self.dapp.snr_db.is_some_and(|s| !s.is_finite()) {
                    return Err(("dapp", "snr_db", "must be finite".into()));
                }
                if self.radio.cir_subcarriers <= self.dapp.model_order {
                    return Err((
                        "radio",
                        "cir_subcarriers",
                        "must exceed the model order".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

fn missing_field(message: &str) -> Option<String> {
    let rest = message.split("missing field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

/// Line of `key = …` inside `[section]` (top level when `section` is empty),
/// or of the section header when `key` is empty or absent.
fn find_key_line(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header_line = Some(i + 1);
            }
            continue;
        }
        if current == section && !key.is_empty() {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header_line
}

/// Validates a scenario file without executing it.
pub fn validate(path: &Path) -> Result<Scenario, ConfigError> {
    Scenario::load(path)
}

/// `*.toml` files in `dir`, sorted, each with its name or its error.
pub fn list_scenarios(dir: &Path) -> io::Result<Vec<(PathBuf, Result<String, ConfigError>)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    Ok(paths
        .into_iter()
        .map(|p| {
            let r = Scenario::load(&p).map(|s| s.display_name().to_string());
            (p, r)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangingRow {
    pub batch: usize,
    pub true_distance_m: f64,
    pub estimated_distance_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub name: String,
    pub slots: u64,
    pub mean_goodput_mbps: f64,
    pub incumbent_slots: u64,
    pub controls_applied: usize,
    pub reports: usize,
    /// Mask in force during the last slot.
    pub final_mask: Vec<u32>,
    pub ranging: Vec<RangingRow>,
    pub artifacts: Vec<PathBuf>,
}

struct DappRun {
    host: AgentHost,
    stop: StopSignal,
    thread: std::thread::JoinHandle<Result<crate::sdk::LoopStats, SdkError>>,
    _dir: Option<tempfile::TempDir>,
}

fn start_dapp(
    sc: &Scenario,
    sm_id: u16,
    handler: Box<dyn IndicationHandler>,
    queue: usize,
) -> Result<DappRun, ScenarioError> {
    let kind: TransportKind = sc
        .transport
        .parse()
        .map_err(|e: TransportError| ConfigError {
            path: None,
            line: None,
            field: Some("transport".into()),
            message: e.to_string(),
        })?;
    let (dir, endpoint) = match kind {
        TransportKind::Tcp => {
            let port = std::net::TcpListener::bind("127.0.0.1:0")?
                .local_addr()?
                .port()
                .min(u16::MAX - 2);
            (None, format!("127.0.0.1:{port}"))
        }
        _ => {
            let dir = tempfile::Builder::new().prefix("e3r").tempdir_in("/tmp")?;
            let ep = dir.path().join("run.setup").to_string_lossy().into_owned();
            (Some(dir), ep)
        }
    };
    let opts = ChannelOptions {
        queue_capacity: queue,
        ..ChannelOptions::default()
    };
    let agent = E3Agent::new(ServiceModelRegistry::builtin(), sc.radio.n_prbs);
    let mut host = AgentHost::bind(kind, &endpoint, agent, opts)?;
    let stop = StopSignal::new();
    let launch = DappLaunch {
        dapp_id: sc.dapp.dapp_id,
        kind,
        endpoint,
        opts,
        sm_id,
        period_slots: 1,
        handler,
        records: None,
    };
    let thread = spawn_dapp(launch, stop.clone())?;
    host.accept(Some(Duration::from_secs(5)))?;
    if !host.wait_subscriptions(1, Duration::from_secs(5)) {
        return Err(ScenarioError::Runtime {
            slot: 0,
            reason: "dApp never subscribed".into(),
        });
    }
    Ok(DappRun {
        host,
        stop,
        thread,
        _dir: dir,
    })
}

impl DappRun {
    fn finish(self) -> Result<(), ScenarioError> {
        self.stop.stop();
        drop(self.host);
        self.thread.join().map_err(|_| ScenarioError::Runtime {
            slot: 0,
            reason: "dApp thread panicked".into(),
        })??;
        Ok(())
    }
}

const LOCKSTEP_TIMEOUT: Duration = Duration::from_secs(5);

/// Runs the scenario and writes its artifacts into `out_dir`.
pub fn run_scenario(path: &Path, out_dir: &Path) -> Result<ScenarioOutcome, ScenarioError> {
    let sc = Scenario::load(path)?;
    run_loaded(&sc, out_dir)
}

pub fn run_loaded(sc: &Scenario, out_dir: &Path) -> Result<ScenarioOutcome, ScenarioError> {
    fs::create_dir_all(out_dir)?;
    match sc.dapp.kind {
        DappKind::Ranging => run_ranging(sc, out_dir),
        _ => run_spectrum(sc, out_dir),
    }
}

fn fmt_mask(mask: &BTreeSet<u32>) -> String {
    mask.iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

fn run_spectrum(sc: &Scenario, out_dir: &Path) -> Result<ScenarioOutcome, ScenarioError> {
    let inc = sc.incumbent.config();
    let interfered = interfered_prbs(&sc.radio, &inc);
    let mut dapp = match sc.dapp.kind {
        DappKind::Spectrum => {
            let handler = SpectrumDapp::new(sc.spectrum_config());
            Some(start_dapp(
                sc,
                SM_SPECTRUM,
                Box::new(handler),
                crate::transport::DEFAULT_QUEUE_CAPACITY,
            )?)
        }
        _ => None,
    };
    // without a dApp the DU runs on its own; the agent only holds the mask
    let mut standalone = E3Agent::new(ServiceModelRegistry::builtin(), sc.radio.n_prbs);

    let timeline_path = out_dir.join("timeline.csv");
    let mut w = csv::Writer::from_path(&timeline_path)?;
    w.write_record([
        "slot",
        "incumbent",
        "blocked_prbs",
        "mask",
        "usable_run",
        "goodput_mbps",
    ])?;

    let (mut total, mut incumbent_slots, mut controls, mut reports) = (0.0, 0u64, 0usize, 0usize);
    let mut final_mask = BTreeSet::new();
    let empty = BTreeSet::new();
    let mut result = Ok(());
    for slot in 0..sc.duration_slots {
        let active = sc.incumbent.active(slot);
        let slot_inc = IncumbentConfig {
            enabled: active,
            ..inc.clone()
        };
        let (run, mask) = match &dapp {
            Some(d) => {
                let mut agent = d.host.agent();
                let run = agent.begin_slot();
                (run, agent.scheduler().mask().clone())
            }
            None => (
                standalone.begin_slot(),
                standalone.scheduler().mask().clone(),
            ),
        };
        let goodput = sc
            .goodput
            .goodput(&run, if active { &interfered } else { &empty });
        total += goodput;
        incumbent_slots += u64::from(active);
        w.write_record([
            slot.to_string(),
            u8::from(active).to_string(),
            mask.len().to_string(),
            fmt_mask(&mask),
            run.to_string(),
            format!("{goodput:.3}"),
        ])?;
        final_mask = mask;

        let Some(d) = &mut dapp else { continue };
        let spectrum = gen_spectrum(&sc.radio, &slot_inc, &run, slot, sc.seed);
        let snapshots = BTreeMap::from([(SM_SPECTRUM, spectrum.to_payload())]);
        d.host.agent().dispatch_slot(slot, &snapshots)?;
        // the spectrum dApp reports every slot, after any control for it
        let waited = loop {
            match d.host.poll_outbound(LOCKSTEP_TIMEOUT) {
                Ok(AgentEvent::ControlApplied(_)) => controls += 1,
                Ok(AgentEvent::ControlRejected { reason, .. }) => break Err(reason),
                Ok(AgentEvent::Report(r)) => {
                    reports += 1;
                    if spectrum::decode_report(&r.payload)
                        .is_some_and(|(_, s)| u64::from(s) == slot)
                    {
                        break Ok(());
                    }
                }
                Err(e) => break Err(e.to_string()),
            }
        };
        if let Err(reason) = waited {
            result = Err(ScenarioError::Runtime { slot, reason });
            break;
        }
    }
    w.flush()?;
    drop(w);
    if let Some(d) = dapp.take() {
        d.finish()?;
    }
    result?;

    let outcome = ScenarioOutcome {
        name: sc.display_name().to_string(),
        slots: sc.duration_slots,
        mean_goodput_mbps: total / sc.duration_slots as f64,
        incumbent_slots,
        controls_applied: controls,
        reports,
        final_mask: final_mask.into_iter().collect(),
        ranging: Vec::new(),
        artifacts: vec![timeline_path, out_dir.join("summary.txt")],
    };
    fs::write(out_dir.join("summary.txt"), summary_text(sc, &outcome))?;
    Ok(outcome)
}

fn run_ranging(sc: &Scenario, out_dir: &Path) -> Result<ScenarioOutcome, ScenarioError> {
    let cfg = sc.ranging_config();
    let m = cfg.m;
    let handler = Arc::new(Mutex::new(RangingDapp::new(cfg).map_err(|e| {
        ConfigError {
            path: None,
            line: None,
            field: Some("dapp".into()),
            message: e.to_string(),
        }
    })?));
    let d = start_dapp(
        sc,
        SM_CIR,
        Box::new(Arc::clone(&handler)),
        m.max(crate::transport::DEFAULT_QUEUE_CAPACITY) + 1,
    )?;

    let mut rows = Vec::new();
    let mut reports = 0;
    let mut result = Ok(());
    for slot in 0..sc.duration_slots {
        let batch = (slot / m as u64) as usize;
        let distance = sc.dapp.distances_m[batch % sc.dapp.distances_m.len()];
        let path = PathSpec {
            delay_s: distance / SPEED_OF_LIGHT,
            gain: num_complex::Complex64::new(1.0, 0.0),
        };
        let mut rng = slot_rng(sc.seed, 2, slot);
        let snap = gen_cir_paths(&sc.radio, &[path], sc.dapp.snr_db, 1, &mut rng)
            .map_err(|e| ScenarioError::Runtime {
                slot,
                reason: e.to_string(),
            })?
            .remove(0);
        d.host
            .agent()
            .dispatch_slot(slot, &BTreeMap::from([(SM_CIR, snap.to_payload())]))?;
        if (slot + 1) % m as u64 != 0 {
            continue;
        }
        match d.host.poll_outbound(LOCKSTEP_TIMEOUT) {
            Ok(AgentEvent::Report(r)) => {
                reports += 1;
                let Some((mm, _, _)) = ranging::decode_report(&r.payload) else {
                    result = Err(ScenarioError::Runtime {
                        slot,
                        reason: "malformed ranging report".into(),
                    });
                    break;
                };
                rows.push(RangingRow {
                    batch,
                    true_distance_m: distance,
                    estimated_distance_m: f64::from(mm) / 1000.0,
                });
            }
            Ok(other) => {
                result = Err(ScenarioError::Runtime {
                    slot,
                    reason: format!("unexpected {other:?}"),
                });
                break;
            }
            Err(e) => {
                result = Err(ScenarioError::Runtime {
                    slot,
                    reason: e.to_string(),
                });
                break;
            }
        }
    }
    d.finish()?;
    result?;

    let csv_path = out_dir.join("ranging.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record([
        "batch",
        "true_distance_m",
        "estimated_distance_m",
        "abs_error_m",
        "M",
    ])?;
    for r in &rows {
        w.write_record([
            r.batch.to_string(),
            format!("{:.3}", r.true_distance_m),
            format!("{:.3}", r.estimated_distance_m),
            format!("{:.3}", (r.estimated_distance_m - r.true_distance_m).abs()),
            m.to_string(),
        ])?;
    }
    w.flush()?;

    let outcome = ScenarioOutcome {
        name: sc.display_name().to_string(),
        slots: sc.duration_slots,
        mean_goodput_mbps: sc.goodput.goodput(
            &crate::ransim::PrbRun::full(sc.radio.n_prbs),
            &BTreeSet::new(),
        ),
        incumbent_slots: 0,
        controls_applied: 0,
        reports,
        final_mask: Vec::new(),
        ranging: rows,
        artifacts: vec![csv_path, out_dir.join("summary.txt")],
    };
    fs::write(out_dir.join("summary.txt"), summary_text(sc, &outcome))?;
    Ok(outcome)
}

fn summary_text(sc: &Scenario, o: &ScenarioOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {}", o.name);
    let _ = writeln!(s, "seed: {}", sc.seed);
    let _ = writeln!(s, "slots: {}", o.slots);
    let _ = writeln!(s, "dapp: {}", sc.dapp.kind.label());
    let _ = writeln!(s, "incumbent_slots: {}", o.incumbent_slots);
    let _ = writeln!(s, "mean_goodput_mbps: {:.3}", o.mean_goodput_mbps);
    let _ = writeln!(s, "controls_applied: {}", o.controls_applied);
    let _ = writeln!(s, "reports: {}", o.reports);
    let mask: Vec<String> = o.final_mask.iter().map(u32::to_string).collect();
    let _ = writeln!(s, "final_mask: [{}]", mask.join(","));
    if !o.ranging.is_empty() {
        let mut errs: Vec<f64> = o
            .ranging
            .iter()
            .map(|r| (r.estimated_distance_m - r.true_distance_m).abs())
            .collect();
        errs.sort_by(f64::total_cmp);
        let _ = writeln!(s, "estimates: {}", errs.len());
        let _ = writeln!(s, "median_abs_error_m: {:.3}", errs[errs.len() / 2]);
    }
    s
}
