use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use e3dapp::agent::{AgentError, AgentEvent, AgentHost, E3Agent, ServiceModelRegistry};
use e3dapp::bench::{
    emit_overhead_table, run_bench, write_summary_csv, BenchConfig, Stage, DEFAULT_LOOPS,
    OVERHEAD_TABLE_MESSAGE_LEN,
};
use e3dapp::codec::{SM_CIR, SM_SPECTRUM};
use e3dapp::ranging::{RangingConfig, RangingDapp};
use e3dapp::ransim::{gen_cir, gen_spectrum, IncumbentConfig, RadioConfig};
use e3dapp::scenario::{self, ConfigError, DappKind, Scenario, ScenarioError};
use e3dapp::sdk::{DappCore, StopSignal};
use e3dapp::spectrum::{SpectrumConfig, SpectrumDapp};
use e3dapp::transport::{
    resolve_endpoint, ChannelOptions, OverheadModel, TransportError, TransportKind,
};

#[derive(Parser)]
#[command(
    name = "e3dapp",
    version,
    about = "Real-time dApps over the E3 interface"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and write its CSV artifacts.
    Run(RunArgs),
    /// Measure loop latency over the indication x control grid.
    Bench(BenchArgs),
    /// Check a scenario file without running it.
    Validate { file: PathBuf },
    /// List the scenarios in a directory.
    List {
        #[arg(default_value = "scenarios")]
        dir: PathBuf,
    },
    /// Run the RAN side (simulated DU + E3 agent) and wait for one dApp.
    Agent(AgentArgs),
    /// Run a dApp against a running agent.
    Dapp(DappArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DappChoice {
    None,
    Spectrum,
    Ranging,
}

#[derive(Args, Clone)]
struct Link {
    /// ipc or tcp
    #[arg(long, default_value = "ipc")]
    transport: TransportKind,
    /// Setup endpoint: a socket path (ipc) or host:port (tcp). E3_ENDPOINT,
    /// when set, takes precedence.
    #[arg(long)]
    endpoint: Option<String>,
}

const DEFAULT_ENDPOINT: &str = "/tmp/e3dapp.setup";

impl Link {
    fn endpoint(&self) -> String {
        resolve_endpoint(self.endpoint.as_deref()).unwrap_or_else(|| DEFAULT_ENDPOINT.to_string())
    }
}

#[derive(Args, Clone, Default)]
struct DappTuning {
    #[arg(long)]
    threshold_db: Option<f64>,
    #[arg(long)]
    hysteresis_slots: Option<u32>,
    /// Snapshots per ranging estimate.
    #[arg(long = "M", alias = "m")]
    m: Option<usize>,
    #[arg(long)]
    model_order: Option<usize>,
    #[arg(long)]
    grid_step_ns: Option<f64>,
    #[arg(long)]
    tau_max_ns: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    transport: Option<TransportKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dapp: Option<DappChoice>,
    #[arg(long)]
    n_prbs: Option<u32>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    slot_us: Option<u64>,
    #[command(flatten)]
    tuning: DappTuning,
}

#[derive(Args)]
struct BenchArgs {
    /// Run all 16 configurations.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    grid: bool,
    /// Run a single configuration (1..=16).
    #[arg(long)]
    config: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_LOOPS)]
    loops: usize,
    #[arg(long, default_value = "ipc")]
    transport: TransportKind,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
}

#[derive(Args)]
struct AgentArgs {
    #[command(flatten)]
    link: Link,
    #[arg(long, default_value_t = 106)]
    n_prbs: u32,
    #[arg(long, default_value_t = 1536)]
    resolution: usize,
    #[arg(long, default_value_t = 500)]
    slot_us: u64,
    #[arg(long, default_value_t = 2000)]
    slots: u64,
    /// Enable the default incumbent from this slot on.
    #[arg(long)]
    incumbent_from: Option<u64>,
    /// UE distance for channel snapshots.
    #[arg(long, default_value_t = 5.0)]
    distance_m: f64,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Seconds to wait for the dApp.
    #[arg(long, default_value_t = 30)]
    wait_s: u64,
}

#[derive(Args)]
struct DappArgs {
    #[command(flatten)]
    link: Link,
    #[arg(long, default_value = "spectrum")]
    dapp: DappChoice,
    #[arg(long, default_value_t = 1)]
    dapp_id: u32,
    #[arg(long, default_value_t = 106)]
    n_prbs: u32,
    #[arg(long, default_value_t = 1536)]
    resolution: usize,
    #[command(flatten)]
    tuning: DappTuning,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Validate { file } => cmd_validate(&file),
        Cmd::List { dir } => cmd_list(&dir),
        Cmd::Agent(a) => cmd_agent(a),
        Cmd::Dapp(a) => cmd_dapp(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn apply_tuning(sc: &mut Scenario, t: &DappTuning) {
    let d = &mut sc.dapp;
    if let Some(v) = t.threshold_db {
        d.threshold_db = v;
    }
    if let Some(v) = t.hysteresis_slots {
        d.hysteresis_slots = v;
    }
    if let Some(v) = t.m {
        d.m = v;
    }
    if let Some(v) = t.model_order {
        d.model_order = v;
    }
    if let Some(v) = t.grid_step_ns {
        d.grid_step_ns = v;
    }
    if let Some(v) = t.tau_max_ns {
        d.tau_max_ns = v;
    }
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let mut sc = Scenario::load(&a.scenario)?;
    if let Some(t) = a.transport {
        sc.transport = t.label().to_string();
    }
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    if let Some(d) = a.dapp {
        sc.dapp.kind = match d {
            DappChoice::None => DappKind::None,
            DappChoice::Spectrum => DappKind::Spectrum,
            DappChoice::Ranging => DappKind::Ranging,
        };
    }
    if let Some(n) = a.n_prbs {
        sc.radio.n_prbs = n;
    }
    if let Some(r) = a.resolution {
        sc.radio.resolution_bins = r;
    }
    if let Some(us) = a.slot_us {
        sc.radio.slot_us = us;
    }
    apply_tuning(&mut sc, &a.tuning);
    sc.recheck().map_err(|mut e| {
        e.path = Some(a.scenario.clone());
        e
    })?;

    let outcome = scenario::run_loaded(&sc, &a.out)?;
    println!("scenario {}: {} slots", outcome.name, outcome.slots);
    println!("  mean goodput {:.3} Mbps", outcome.mean_goodput_mbps);
    println!(
        "  controls applied {}, reports {}",
        outcome.controls_applied, outcome.reports
    );
    if !outcome.ranging.is_empty() {
        let mut errs: Vec<f64> = outcome
            .ranging
            .iter()
            .map(|r| (r.estimated_distance_m - r.true_distance_m).abs())
            .collect();
        errs.sort_by(f64::total_cmp);
        println!(
            "  {} range estimates, median abs error {:.3} m",
            errs.len(),
            errs[errs.len() / 2]
        );
    }
    for p in &outcome.artifacts {
        println!("  wrote {}", p.display());
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    let grid = BenchConfig::grid(a.loops, a.transport);
    let selected: Vec<BenchConfig> = match a.config {
        Some(id) => {
            let cfg = grid.into_iter().find(|c| c.config_id == id);
            vec![cfg.ok_or_else(|| Failure::Config(format!("config {id} is not in 1..=16")))?]
        }
        None => grid,
    };
    fs::create_dir_all(&a.out).map_err(runtime)?;

    let mut summaries = Vec::new();
    for cfg in &selected {
        let (summary, records) = run_bench(cfg).map_err(runtime)?;
        let c = summary.stage(Stage::Cumulative);
        println!(
            "config {:>2}  indication {:>4} B  control {:>3} B  cumulative mean {:>8.1} us  p99 {:>8.1} us",
            cfg.config_id,
            cfg.indication_bytes,
            cfg.control_bytes(),
            c.mean_us,
            c.p99_us
        );
        if summary.identity_violations > 0 {
            warn!(
                "config {}: {} records break the stage-sum identity",
                cfg.config_id, summary.identity_violations
            );
        }
        write_records(
            &a.out.join(format!("records_{:02}.csv", cfg.config_id)),
            &records,
        )
        .map_err(runtime)?;
        summaries.push(summary);
    }
    let summary_path = a.out.join("summary.csv");
    write_summary_csv(
        &summaries,
        fs::File::create(&summary_path).map_err(runtime)?,
    )
    .map_err(runtime)?;
    let overhead_path = a.out.join("overhead.csv");
    emit_overhead_table(
        &OverheadModel::CALIBRATED,
        OVERHEAD_TABLE_MESSAGE_LEN,
        fs::File::create(&overhead_path).map_err(runtime)?,
    )
    .map_err(runtime)?;
    println!(
        "wrote {} and {}",
        summary_path.display(),
        overhead_path.display()
    );
    Ok(())
}

fn write_records(path: &Path, records: &[e3dapp::StageLatencyRecord]) -> std::io::Result<()> {
    let mut s = String::from("sequence,collect_ns,process_ns,create_ns,deliver_ns,cumulative_ns\n");
    for r in records {
        let _ = write!(s, "{}", r.sequence);
        for stage in Stage::ALL {
            let _ = write!(s, ",{}", r.stage_ns(stage));
        }
        s.push('\n');
    }
    fs::write(path, s)
}

fn cmd_validate(file: &Path) -> Result<(), Failure> {
    let sc = scenario::validate(file)?;
    println!(
        "{}: ok ({}, {} slots, dApp {})",
        file.display(),
        sc.display_name(),
        sc.duration_slots,
        sc.dapp.kind.label()
    );
    Ok(())
}

fn cmd_list(dir: &Path) -> Result<(), Failure> {
    let entries =
        scenario::list_scenarios(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let mut bad = 0;
    for (path, r) in entries {
        match r {
            Ok(name) => println!("{}\t{name}", path.display()),
            Err(e) => {
                bad += 1;
                println!("{}\tINVALID: {e}", path.display());
            }
        }
    }
    if bad > 0 {
        return Err(Failure::Config(format!("{bad} invalid scenario file(s)")));
    }
    Ok(())
}

fn cmd_agent(a: AgentArgs) -> Result<(), Failure> {
    let endpoint = a.link.endpoint();
    let radio = RadioConfig {
        n_prbs: a.n_prbs,
        resolution_bins: a.resolution,
        slot_us: a.slot_us,
        ..RadioConfig::default()
    };
    radio
        .validate()
        .map_err(|e| Failure::Config(e.to_string()))?;
    let agent = E3Agent::new(ServiceModelRegistry::builtin(), a.n_prbs);
    let mut host = AgentHost::bind(
        a.link.transport,
        &endpoint,
        agent,
        ChannelOptions::default(),
    )
    .map_err(runtime)?;
    println!("agent listening on {} ({})", endpoint, a.link.transport);
    let dapp_id = host
        .accept(Some(Duration::from_secs(a.wait_s)))
        .map_err(runtime)?;
    println!("paired with dApp {dapp_id}");
    if !host.wait_subscriptions(1, Duration::from_secs(a.wait_s)) {
        return Err(runtime("dApp never subscribed"));
    }

    let slot = Duration::from_micros(a.slot_us.max(1));
    let start = Instant::now();
    let (mut controls, mut reports) = (0usize, 0usize);
    for n in 0..a.slots {
        let run = host.agent().begin_slot();
        let incumbent = IncumbentConfig {
            enabled: a.incumbent_from.is_some_and(|s| n >= s),
            ..IncumbentConfig::default()
        };
        let wants: Vec<u16> = host
            .agent()
            .subscriptions()
            .keys()
            .map(|&(_, sm)| sm)
            .collect();
        let mut snapshots = BTreeMap::new();
        if wants.contains(&SM_SPECTRUM) {
            snapshots.insert(
                SM_SPECTRUM,
                gen_spectrum(&radio, &incumbent, &run, n, a.seed).to_payload(),
            );
        }
        if wants.contains(&SM_CIR) {
            let snap = gen_cir(&radio, a.distance_m, a.snr_db, 1, a.seed ^ n).map_err(runtime)?;
            snapshots.insert(SM_CIR, snap[0].to_payload());
        }
        host.agent().dispatch_slot(n, &snapshots).map_err(runtime)?;

        let deadline = start + slot * (n as u32 + 1);
        drain_events(&host, deadline, &mut controls, &mut reports)?;
    }
    // answers to the last slots
    drain_events(
        &host,
        Instant::now() + Duration::from_millis(100),
        &mut controls,
        &mut reports,
    )?;
    let mask: Vec<String> = host
        .agent()
        .scheduler()
        .mask()
        .iter()
        .map(u32::to_string)
        .collect();
    println!(
        "{} slots done: {controls} controls applied, {reports} reports, final mask [{}]",
        a.slots,
        mask.join(",")
    );
    Ok(())
}

/// Handles dApp traffic until `deadline`; polls at least once.
fn drain_events(
    host: &AgentHost,
    deadline: Instant,
    controls: &mut usize,
    reports: &mut usize,
) -> Result<(), Failure> {
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match host.poll_outbound(left) {
            Ok(AgentEvent::ControlApplied(c)) => {
                *controls += 1;
                info!("control seq {} with {} PRBs", c.sequence, c.n_entries);
            }
            Ok(AgentEvent::ControlRejected { sequence, reason }) => {
                warn!("control seq {sequence} rejected: {reason}")
            }
            Ok(AgentEvent::Report(r)) => {
                *reports += 1;
                log::debug!("report of {} bytes", r.payload.len());
            }
            Err(AgentError::Transport(TransportError::TimedOut)) => return Ok(()),
            Err(e) => return Err(runtime(e)),
        }
        if left.is_zero() {
            return Ok(());
        }
    }
}

fn cmd_dapp(a: DappArgs) -> Result<(), Failure> {
    let endpoint = a.link.endpoint();
    let t = &a.tuning;
    let (sm_id, handler): (u16, Box<dyn e3dapp::sdk::IndicationHandler>) = match a.dapp {
        DappChoice::Spectrum => {
            let d = SpectrumConfig::default();
            let cfg = SpectrumConfig {
                threshold_db: t.threshold_db.unwrap_or(d.threshold_db),
                hysteresis_slots: t.hysteresis_slots.unwrap_or(d.hysteresis_slots),
                n_prbs: a.n_prbs,
                resolution: a.resolution,
                ..d
            };
            cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
            (SM_SPECTRUM, Box::new(SpectrumDapp::new(cfg)))
        }
        DappChoice::Ranging => {
            let d = RangingConfig {
                subcarrier_spacing_hz: RadioConfig::default().subcarrier_spacing_hz(),
                ..RangingConfig::default()
            };
            let cfg = RangingConfig {
                m: t.m.unwrap_or(d.m),
                model_order: t.model_order.unwrap_or(d.model_order),
                grid_step_s: t.grid_step_ns.map_or(d.grid_step_s, |v| v * 1e-9),
                tau_max_s: t.tau_max_ns.map_or(d.tau_max_s, |v| v * 1e-9),
                ..d
            };
            (
                SM_CIR,
                Box::new(RangingDapp::new(cfg).map_err(|e| Failure::Config(e.to_string()))?),
            )
        }
        DappChoice::None => return Err(Failure::Config("--dapp none has nothing to run".into())),
    };
    let mut core = DappCore::new(a.dapp_id, ChannelOptions::default());
    let accepted = core
        .setup_connection(a.link.transport, &endpoint, &[sm_id])
        .map_err(runtime)?;
    println!(
        "dApp {} connected to {endpoint}, service models {accepted:?}",
        a.dapp_id
    );
    core.subscribe(sm_id, 1).map_err(runtime)?;
    core.add_callback(sm_id, handler).map_err(runtime)?;
    let stats = core.control_loop(&StopSignal::new()).map_err(runtime)?;
    println!(
        "RAN disconnected after {} indications ({} failed, {} policies)",
        stats.ticks, stats.failed_ticks, stats.policies
    );
    Ok(())
}
