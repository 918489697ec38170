//! Inputs shared by the criterion benches.

use e3dapp::codec::{Control, E3Pdu, Indication, SM_SPECTRUM};
use e3dapp::ranging::RangingConfig;
use e3dapp::ransim::{gen_cir, gen_spectrum, IncumbentConfig, PrbRun, RadioConfig};
use e3dapp::spectrum::SpectrumConfig;
use num_complex::{Complex, Complex64};

/// Sensing snapshot at `resolution` bins with the default incumbent on.
pub fn spectrum_bins(resolution: usize) -> (Vec<Complex<i16>>, SpectrumConfig) {
    let radio = RadioConfig {
        resolution_bins: resolution,
        ..RadioConfig::default()
    };
    let inc = IncumbentConfig {
        enabled: true,
        ..IncumbentConfig::default()
    };
    let spec = gen_spectrum(&radio, &inc, &PrbRun::full(radio.n_prbs), 0, 1);
    (
        spec.bins,
        SpectrumConfig {
            resolution,
            ..SpectrumConfig::default()
        },
    )
}

pub fn indication(payload_bytes: usize) -> E3Pdu {
    E3Pdu::Indication(Indication {
        sm_id: SM_SPECTRUM,
        sequence: 42,
        origin_ts_ns: 1,
        payload: vec![0x5a; payload_bytes],
    })
}

pub fn control(entries: u32) -> E3Pdu {
    E3Pdu::Control(Control {
        sm_id: SM_SPECTRUM,
        sequence: 42,
        entries: (0..entries).collect(),
    })
}

/// `m` noisy channel snapshots of a UE at 6 m and a matching estimator setup.
pub fn cir_batch(m: usize, snr_db: f64) -> (Vec<Vec<Complex64>>, RangingConfig) {
    let radio = RadioConfig::default();
    let snaps = gen_cir(&radio, 6.0, Some(snr_db), m, 9)
        .expect("valid fixture")
        .into_iter()
        .map(|s| s.response)
        .collect();
    let cfg = RangingConfig {
        m,
        subcarrier_spacing_hz: radio.subcarrier_spacing_hz(),
        ..RangingConfig::default()
    };
    (snaps, cfg)
}
