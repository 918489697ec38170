//! Real-time RAN control loops over the E3 interface.
//!
//! The crate bundles the pieces needed to run dApps next to a (simulated)
//! distributed unit:
//!
//! * [`codec`]: E3AP PDUs and their fixed-layout binary frames.
//! * [`transport`]: the three-socket connector (setup REQ-REP, inbound and
//!   outbound PUB-SUB) over Unix domain sockets or TCP, plus a wire-overhead
//!   accountant.
//! * [`agent`]: the RAN-side E3 termination with its service-model registry,
//!   subscription manager and mock xApp endpoint.
//! * [`ransim`]: synthetic spectra, uplink channel snapshots, a type-1
//!   contiguous scheduler and a goodput model.
//! * [`sdk`]: the dApp-side core (connection setup, callbacks, control loop).
//! * [`spectrum`] and [`ranging`]: the two reference dApps.
//! * [`bench`]: four-stage loop latency measurement and summaries.
//! * [`scenario`]: scenario files and the single-process scenario runner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod bench;
pub mod clock;
pub mod codec;
pub mod ranging;
pub mod ransim;
pub mod scenario;
pub mod sdk;
pub mod spectrum;
pub mod transport;

pub use agent::{AgentError, AgentHost, E3Agent, MockXApp};
pub use bench::{BenchConfig, BenchSummary, StageLatencyRecord};
pub use codec::{CodecError, E3Pdu, PduKind, SM_CIR, SM_SPECTRUM};
pub use ranging::{RangeEstimate, RangingConfig};
pub use ransim::{CirSnapshot, IncumbentConfig, IqSpectrum, PrbRun, RadioConfig, SchedulerState};
pub use scenario::{Scenario, ScenarioError};
pub use sdk::{DappCore, SdkError, TickContext};
pub use spectrum::{PrbBlacklist, SpectrumConfig};
pub use transport::{ChannelSet, TransportError, TransportKind};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
