//! Spectrum-sharing dApp.
//!
//! Each sensing snapshot is thresholded bin by bin; a PRB is blacklisted as
//! soon as any of its bins is hot. The resulting blacklist is sent to the RAN
//! whenever it changes, and a short report goes out on every snapshot.

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Indication, SM_SPECTRUM};
use crate::ransim::{iq_from_payload, magnitude_db};
use crate::sdk::{HandlerResult, IndicationHandler, TickContext};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectrumError {
    #[error("expected {expected} bins, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid spectrum config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    /// Detection threshold in dB above `noise_floor_db`.
    pub threshold_db: f64,
    /// Noise floor the threshold is relative to.
    pub noise_floor_db: f64,
    pub n_prbs: u32,
    pub resolution: usize,
    /// Resend an unchanged blacklist after this many slots; 0 disables.
    pub hysteresis_slots: u32,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            threshold_db: 20.0,
            noise_floor_db: 30.0,
            n_prbs: 106,
            resolution: 1536,
            hysteresis_slots: 0,
        }
    }
}

impl SpectrumConfig {
    pub fn validate(&self) -> Result<(), SpectrumError> {
        if !self.threshold_db.is_finite() || !self.noise_floor_db.is_finite() {
            return Err(SpectrumError::InvalidConfig(
                "threshold and noise floor must be finite",
            ));
        }
        if self.n_prbs == 0 || self.resolution < self.n_prbs as usize {
            return Err(SpectrumError::InvalidConfig(
                "resolution must be >= n_prbs > 0",
            ));
        }
        Ok(())
    }

    /// Absolute magnitude (dB) at or above which a bin counts as occupied.
    pub fn absolute_threshold_db(&self) -> f64 {
        self.noise_floor_db + self.threshold_db
    }
}

/// Strictly increasing PRB indices the scheduler must avoid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct PrbBlacklist(Vec<u32>);

impl PrbBlacklist {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    /// Accepts only strictly increasing indices below `n_prbs`.
    pub fn from_sorted(entries: Vec<u32>, n_prbs: u32) -> Option<Self> {
        let sorted = entries.windows(2).all(|w| w[0] < w[1]);
        let in_range = entries.last().is_none_or(|&p| p < n_prbs);
        (sorted && in_range).then_some(Self(entries))
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_entries(self) -> Vec<u32> {
        self.0
    }
}

/// Thresholds every bin and maps hot bins to PRBs via `floor(k·n_prbs/R)`.
pub fn detect(bins: &[Complex<i16>], cfg: &SpectrumConfig) -> Result<PrbBlacklist, SpectrumError> {
    if bins.len() != cfg.resolution {
        return Err(SpectrumError::LengthMismatch {
            expected: cfg.resolution,
            actual: bins.len(),
        });
    }
    let threshold = cfg.absolute_threshold_db();
    let n = cfg.n_prbs as u64;
    let r = cfg.resolution as u64;
    let mut out: Vec<u32> = Vec::new();
    for (k, bin) in bins.iter().enumerate() {
        if magnitude_db(*bin) >= threshold {
            let prb = (k as u64 * n / r) as u32;
            // bins are visited in order, so PRBs arrive non-decreasing
            if out.last() != Some(&prb) {
                out.push(prb);
            }
        }
    }
    Ok(PrbBlacklist(out))
}

/// Report body: `{n_blocked u16, slot u32}`, big-endian.
pub fn encode_report(n_blocked: u16, slot: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(6);
    out.extend_from_slice(&n_blocked.to_be_bytes());
    out.extend_from_slice(&slot.to_be_bytes());
    out
}

pub fn decode_report(payload: &[u8]) -> Option<(u16, u32)> {
    let b: &[u8; 6] = payload.try_into().ok()?;
    Some((
        u16::from_be_bytes([b[0], b[1]]),
        u32::from_be_bytes([b[2], b[3], b[4], b[5]]),
    ))
}

/// Indication handler for the SPECTRUM service model.
#[derive(Debug)]
pub struct SpectrumDapp {
    cfg: SpectrumConfig,
    last_sent: Option<PrbBlacklist>,
    slots_since_sent: u32,
    controls_sent: u64,
}

impl SpectrumDapp {
    pub fn new(cfg: SpectrumConfig) -> Self {
        Self {
            cfg,
            last_sent: None,
            slots_since_sent: 0,
            controls_sent: 0,
        }
    }

    pub fn config(&self) -> &SpectrumConfig {
        &self.cfg
    }

    pub fn controls_sent(&self) -> u64 {
        self.controls_sent
    }

    /// Runs detection on one snapshot and decides whether a control is due.
    pub fn process(
        &mut self,
        bins: &[Complex<i16>],
    ) -> Result<(PrbBlacklist, bool), SpectrumError> {
        let blacklist = detect(bins, &self.cfg)?;
        self.slots_since_sent = self.slots_since_sent.saturating_add(1);
        let changed = self.last_sent.as_ref() != Some(&blacklist);
        let refresh =
            self.cfg.hysteresis_slots > 0 && self.slots_since_sent >= self.cfg.hysteresis_slots;
        let send = changed || refresh;
        if send {
            self.last_sent = Some(blacklist.clone());
            self.slots_since_sent = 0;
            self.controls_sent += 1;
        }
        Ok((blacklist, send))
    }
}

impl IndicationHandler for SpectrumDapp {
    fn on_indication(
        &mut self,
        ctx: &mut TickContext<'_>,
        indication: &Indication,
    ) -> HandlerResult {
        if let Some(db) = ctx.threshold_override_db() {
            self.cfg.threshold_db = db;
        }
        let bins = iq_from_payload(&indication.payload)?;
        let (blacklist, send) = self.process(&bins)?;
        let n_blocked = u16::try_from(blacklist.len()).unwrap_or(u16::MAX);
        ctx.schedule_report(encode_report(n_blocked, indication.sequence));
        Ok(send.then(|| blacklist.into_entries()))
    }
}

/// The service model this dApp consumes.
pub const SERVICE_MODEL: u16 = SM_SPECTRUM;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ransim::{
        bin_level_db, gen_spectrum, IncumbentConfig, PrbRun, RadioConfig, RESOLUTIONS,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn radio(r: usize) -> RadioConfig {
        RadioConfig {
            resolution_bins: r,
            ..Default::default()
        }
    }

    fn cfg_for(radio: &RadioConfig, threshold_db: f64) -> SpectrumConfig {
        SpectrumConfig {
            threshold_db,
            noise_floor_db: radio.noise_floor_db,
            n_prbs: radio.n_prbs,
            resolution: radio.resolution_bins,
            hysteresis_slots: 0,
        }
    }

    /// Oracle: per-bin frequency-interval overlap with the band, then the
    /// expected level against the threshold, then each PRB checked against
    /// all of its bins.
    fn oracle(
        radio: &RadioConfig,
        inc: &IncumbentConfig,
        carrier: &PrbRun,
        threshold_db: f64,
    ) -> Vec<u32> {
        let (lo, hi) = inc.band();
        let hot: Vec<bool> = (0..radio.resolution_bins)
            .map(|k| {
                let (a, b) = radio.bin_interval(k);
                let overlaps = inc.enabled && a < hi && b > lo;
                let mut linear = 1.0;
                if carrier.contains((k * radio.n_prbs as usize / radio.resolution_bins) as u32) {
                    linear += 10f64.powf(radio.carrier_power_db / 10.0);
                }
                if overlaps {
                    linear += 10f64.powf(inc.power_db / 10.0);
                }
                10.0 * f64::log10(linear) >= threshold_db
            })
            .collect();
        (0..radio.n_prbs)
            .filter(|&p| {
                (0..radio.resolution_bins)
                    .filter(|&k| {
                        (k as u64 * radio.n_prbs as u64) / radio.resolution_bins as u64 == p as u64
                    })
                    .any(|k| hot[k])
            })
            .collect()
    }

    #[test]
    fn noise_only_is_clean() {
        let radio = radio(1536);
        let s = gen_spectrum(&radio, &IncumbentConfig::default(), &PrbRun::EMPTY, 0, 1);
        assert!(detect(&s.bins, &cfg_for(&radio, 6.0)).unwrap().is_empty());
    }

    #[test]
    fn default_incumbent_blacklists_three_prbs() {
        let radio = radio(1536);
        let inc = IncumbentConfig {
            enabled: true,
            ..Default::default()
        };
        let s = gen_spectrum(&radio, &inc, &PrbRun::full(106), 0, 1);
        let bl = detect(&s.bins, &cfg_for(&radio, 20.0)).unwrap();
        assert_eq!(bl.entries(), &[80, 81, 82]);
        assert_eq!(
            bl.entries(),
            oracle(&radio, &inc, &PrbRun::full(106), 20.0).as_slice()
        );
    }

    #[test]
    fn hot_bin_on_prb_boundary_belongs_to_floor_owner() {
        let radio = radio(1536);
        let cfg = cfg_for(&radio, 20.0);
        // bin 1160 is the first bin of PRB 80: ceil(80 * 1536 / 106) = 1160
        assert_eq!(radio.bins_of_prb(80).start, 1160);
        let mut bins = vec![Complex::new(31i16, 0); 1536];
        bins[1160] = Complex::new(10_000, 0);
        assert_eq!(detect(&bins, &cfg).unwrap().entries(), &[80]);
        bins[1160] = Complex::new(31, 0);
        bins[1159] = Complex::new(10_000, 0);
        assert_eq!(detect(&bins, &cfg).unwrap().entries(), &[79]);
    }

    #[test]
    fn zero_bins_are_never_hot() {
        let cfg = SpectrumConfig {
            threshold_db: -500.0,
            noise_floor_db: 0.0,
            n_prbs: 106,
            resolution: 384,
            hysteresis_slots: 0,
        };
        let bins = vec![Complex::new(0i16, 0); 384];
        assert!(detect(&bins, &cfg).unwrap().is_empty());
    }

    #[test]
    fn wrong_length_rejected() {
        let cfg = SpectrumConfig::default();
        assert_eq!(
            detect(&[Complex::new(0, 0); 10], &cfg),
            Err(SpectrumError::LengthMismatch {
                expected: 1536,
                actual: 10
            })
        );
    }

    #[test]
    fn matches_oracle_on_random_bands() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for case in 0..120 {
            let r = RESOLUTIONS[case % 4];
            let radio = radio(r);
            let width = rng.random_range(50e3..6e6);
            let center = rng.random_range(radio.f_lo() - width / 4.0..radio.f_hi() + width / 4.0);
            let inc = IncumbentConfig {
                enabled: true,
                center_hz: center,
                width_hz: width,
                power_db: 30.0,
            };
            if inc.validate(&radio).is_err() {
                continue;
            }
            let run = PrbRun {
                start: 0,
                len: rng.random_range(0..=106),
            };
            let s = gen_spectrum(&radio, &inc, &run, case as u64, 7);
            let bl = detect(&s.bins, &cfg_for(&radio, 20.0)).unwrap();
            assert_eq!(
                bl.entries(),
                oracle(&radio, &inc, &run, 20.0).as_slice(),
                "case {case}"
            );
        }
    }

    #[test]
    fn change_triggered_emission() {
        let radio = radio(1536);
        let mut dapp = SpectrumDapp::new(cfg_for(&radio, 20.0));
        let quiet = gen_spectrum(
            &radio,
            &IncumbentConfig::default(),
            &PrbRun::full(106),
            0,
            1,
        );
        let sent = (0..100)
            .filter(|_| dapp.process(&quiet.bins).unwrap().1)
            .count();
        assert_eq!(sent, 1);

        let inc = IncumbentConfig {
            enabled: true,
            ..Default::default()
        };
        let busy = gen_spectrum(&radio, &inc, &PrbRun::full(106), 1, 1);
        let (bl, send) = dapp.process(&busy.bins).unwrap();
        assert!(send && (3..=5).contains(&bl.len()));
        assert!(!dapp.process(&busy.bins).unwrap().1);
        let (bl, send) = dapp.process(&quiet.bins).unwrap();
        assert!(send && bl.is_empty());
    }

    #[test]
    fn hysteresis_refreshes_unchanged_blacklist() {
        let radio = radio(384);
        let mut cfg = cfg_for(&radio, 20.0);
        cfg.hysteresis_slots = 10;
        let mut dapp = SpectrumDapp::new(cfg);
        let quiet = gen_spectrum(
            &radio,
            &IncumbentConfig::default(),
            &PrbRun::full(106),
            0,
            1,
        );
        let sent = (0..100)
            .filter(|_| dapp.process(&quiet.bins).unwrap().1)
            .count();
        assert_eq!(sent, 10);
    }

    #[test]
    fn report_layout() {
        let p = encode_report(4, 0x0102_0304);
        assert_eq!(p, vec![0, 4, 1, 2, 3, 4]);
        assert_eq!(decode_report(&p), Some((4, 0x0102_0304)));
    }

    #[test]
    fn blacklist_invariants() {
        assert!(PrbBlacklist::from_sorted(vec![1, 2, 5], 106).is_some());
        assert!(PrbBlacklist::from_sorted(vec![2, 2], 106).is_none());
        assert!(PrbBlacklist::from_sorted(vec![106], 106).is_none());
    }

    fn span_hz(radio: &RadioConfig, bl: &PrbBlacklist) -> Option<(f64, f64)> {
        let first = *bl.entries().first()?;
        let last = *bl.entries().last()?;
        let lo = radio.bin_interval(radio.bins_of_prb(first).start).0;
        let hi = radio.bin_interval(radio.bins_of_prb(last).end - 1).1;
        Some((lo, hi))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn raising_threshold_never_grows_blacklist(
            center in 3.60e9f64..3.638e9, width in 1e5f64..4e6, t in 0.0f64..40.0, dt in 0.0f64..20.0, r_idx in 0usize..4,
        ) {
            let radio = radio(RESOLUTIONS[r_idx]);
            let inc = IncumbentConfig { enabled: true, center_hz: center, width_hz: width, power_db: 30.0 };
            let s = gen_spectrum(&radio, &inc, &PrbRun::full(106), 0, 3);
            let low = detect(&s.bins, &cfg_for(&radio, t)).unwrap();
            let high = detect(&s.bins, &cfg_for(&radio, t + dt)).unwrap();
            prop_assert!(high.entries().iter().all(|p| low.entries().contains(p)));
        }

        #[test]
        fn raising_power_never_shrinks_blacklist(
            center in 3.60e9f64..3.638e9, width in 1e5f64..4e6, p in 0.0f64..40.0, dp in 0.0f64..20.0,
        ) {
            let radio = radio(768);
            let weak = IncumbentConfig { enabled: true, center_hz: center, width_hz: width, power_db: p };
            let strong = IncumbentConfig { power_db: p + dp, ..weak.clone() };
            let cfg = cfg_for(&radio, 20.0);
            let a = detect(&gen_spectrum(&radio, &weak, &PrbRun::EMPTY, 0, 3).bins, &cfg).unwrap();
            let b = detect(&gen_spectrum(&radio, &strong, &PrbRun::EMPTY, 0, 3).bins, &cfg).unwrap();
            prop_assert!(a.entries().iter().all(|x| b.entries().contains(x)));
        }

        #[test]
        fn coarse_resolution_span_covers_fine_span(center in 3.60e9f64..3.638e9, width in 2e5f64..4e6) {
            let coarse = radio(384);
            let fine = radio(1536);
            let inc = IncumbentConfig { enabled: true, center_hz: center, width_hz: width, power_db: 30.0 };
            let c = detect(&gen_spectrum(&coarse, &inc, &PrbRun::EMPTY, 0, 3).bins, &cfg_for(&coarse, 20.0)).unwrap();
            let f = detect(&gen_spectrum(&fine, &inc, &PrbRun::EMPTY, 0, 3).bins, &cfg_for(&fine, 20.0)).unwrap();
            if let (Some((clo, chi)), Some((flo, fhi))) = (span_hz(&coarse, &c), span_hz(&fine, &f)) {
                let slack = fine.bandwidth_hz / fine.n_prbs as f64;
                prop_assert!(clo <= flo + slack && chi >= fhi - slack);
            }
        }
    }

    #[test]
    fn expected_levels_are_separated_from_threshold() {
        // quantization stays far from the default threshold for every level class
        let radio = radio(1536);
        let inc = IncumbentConfig {
            enabled: true,
            ..Default::default()
        };
        let threshold = radio.noise_floor_db + 20.0;
        for k in 0..radio.resolution_bins {
            let level = bin_level_db(&radio, &inc, &PrbRun::full(106), k);
            assert!((level - threshold).abs() > 5.0);
        }
    }
}
