//! Simulated distributed unit.
//!
//! Produces the data the E3 service models expose (frequency-domain I/Q bins
//! and uplink channel snapshots), runs a type-1 contiguous scheduler whose
//! PRB mask is driven by dApp control, and scores each slot with a simple
//! goodput model.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use num_complex::{Complex, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::IQ_SAMPLE_LEN;
use crate::SPEED_OF_LIGHT;

/// Sensing resolutions supported by the spectrum service model.
pub const RESOLUTIONS: [usize; 4] = [384, 768, 1536, 2048];

/// Full-scale magnitude used when packing channel snapshots into int16 pairs.
const CIR_FULL_SCALE: f64 = 16384.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("PRB {prb} out of range for {n_prbs} PRBs")]
    EntryOutOfRange { prb: u32, n_prbs: u32 },
    #[error("payload of {0} bytes is not a whole number of 4-byte samples")]
    MisalignedPayload(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub center_freq_hz: f64,
    pub bandwidth_hz: f64,
    pub n_prbs: u32,
    /// Number of frequency bins per sensing snapshot.
    pub resolution_bins: usize,
    /// Per-bin noise level, dB relative to one int16 LSB.
    pub noise_floor_db: f64,
    /// gNB carrier level on scheduled PRBs, dB above the noise floor.
    pub carrier_power_db: f64,
    pub slot_us: u64,
    /// Subcarriers per uplink channel snapshot.
    pub cir_subcarriers: usize,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            center_freq_hz: 3.6192e9,
            bandwidth_hz: 40e6,
            n_prbs: 106,
            resolution_bins: 1536,
            noise_floor_db: 30.0,
            carrier_power_db: 10.0,
            slot_us: 500,
            cir_subcarriers: 64,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.bandwidth_hz > 0.0) || !self.bandwidth_hz.is_finite() {
            return Err(SimError::InvalidConfig(
                "bandwidth_hz must be positive".into(),
            ));
        }
        if !self.center_freq_hz.is_finite() || self.center_freq_hz <= self.bandwidth_hz / 2.0 {
            return Err(SimError::InvalidConfig(
                "center_freq_hz must exceed half the bandwidth".into(),
            ));
        }
        if self.n_prbs == 0 {
            return Err(SimError::InvalidConfig("n_prbs must be positive".into()));
        }
        if !RESOLUTIONS.contains(&self.resolution_bins) {
            return Err(SimError::InvalidConfig(format!(
                "resolution_bins {} not one of {RESOLUTIONS:?}",
                self.resolution_bins
            )));
        }
        if self.resolution_bins < self.n_prbs as usize {
            return Err(SimError::InvalidConfig(
                "resolution_bins must be >= n_prbs".into(),
            ));
        }
        if self.cir_subcarriers < 2 {
            return Err(SimError::InvalidConfig(
                "cir_subcarriers must be >= 2".into(),
            ));
        }
        if !self.noise_floor_db.is_finite() || !self.carrier_power_db.is_finite() {
            return Err(SimError::InvalidConfig(
                "power levels must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Lower edge of the carrier span.
    pub fn f_lo(&self) -> f64 {
        self.center_freq_hz - self.bandwidth_hz / 2.0
    }

    pub fn f_hi(&self) -> f64 {
        self.center_freq_hz + self.bandwidth_hz / 2.0
    }

    pub fn bin_width_hz(&self) -> f64 {
        self.bandwidth_hz / self.resolution_bins as f64
    }

    /// Half-open frequency interval `[lo, hi)` covered by bin `k`.
    pub fn bin_interval(&self, k: usize) -> (f64, f64) {
        let width = self.bin_width_hz();
        let lo = self.f_lo() + k as f64 * width;
        (lo, lo + width)
    }

    /// Bin containing frequency `f`, if it lies in the carrier span.
    pub fn bin_of_freq(&self, f: f64) -> Option<usize> {
        if f < self.f_lo() || f >= self.f_hi() {
            return None;
        }
        let k = ((f - self.f_lo()) / self.bin_width_hz()).floor() as usize;
        Some(k.min(self.resolution_bins - 1))
    }

    /// PRB owning bin `k`: `floor(k * n_prbs / R)`.
    pub fn prb_of_bin(&self, k: usize) -> u32 {
        (k as u64 * self.n_prbs as u64 / self.resolution_bins as u64) as u32
    }

    /// Bins owned by PRB `p`.
    pub fn bins_of_prb(&self, p: u32) -> Range<usize> {
        let r = self.resolution_bins as u64;
        let n = self.n_prbs as u64;
        let start = (p as u64 * r).div_ceil(n);
        let end = ((p as u64 + 1) * r).div_ceil(n);
        start as usize..end as usize
    }

    pub fn subcarrier_spacing_hz(&self) -> f64 {
        self.bandwidth_hz / self.cir_subcarriers as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncumbentConfig {
    pub enabled: bool,
    pub center_hz: f64,
    pub width_hz: f64,
    /// Level above the noise floor, dB.
    pub power_db: f64,
}

impl Default for IncumbentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            center_hz: 3.63e9,
            width_hz: 1e6,
            power_db: 30.0,
        }
    }
}

impl IncumbentConfig {
    pub fn band(&self) -> (f64, f64) {
        (
            self.center_hz - self.width_hz / 2.0,
            self.center_hz + self.width_hz / 2.0,
        )
    }

    pub fn validate(&self, radio: &RadioConfig) -> Result<(), SimError> {
        if !self.enabled {
            return Ok(());
        }
        if !(self.width_hz > 0.0) || !self.power_db.is_finite() {
            return Err(SimError::InvalidConfig(
                "incumbent width must be positive and power finite".into(),
            ));
        }
        let (lo, hi) = self.band();
        if hi <= radio.f_lo() || lo >= radio.f_hi() {
            return Err(SimError::InvalidConfig(
                "incumbent band does not intersect the carrier".into(),
            ));
        }
        Ok(())
    }
}

/// Bins whose interval overlaps the incumbent band with positive measure.
pub fn incumbent_bins(radio: &RadioConfig, inc: &IncumbentConfig) -> Range<usize> {
    if !inc.enabled {
        return 0..0;
    }
    let (lo, hi) = inc.band();
    let width = radio.bin_width_hz();
    let r = radio.resolution_bins as f64;
    let start = ((lo - radio.f_lo()) / width).floor().clamp(0.0, r) as usize;
    let end = ((hi - radio.f_lo()) / width).ceil().clamp(0.0, r) as usize;
    if start >= end {
        0..0
    } else {
        start..end
    }
}

/// PRBs owning at least one bin of the incumbent band.
pub fn interfered_prbs(radio: &RadioConfig, inc: &IncumbentConfig) -> BTreeSet<u32> {
    incumbent_bins(radio, inc)
        .map(|k| radio.prb_of_bin(k))
        .collect()
}

/// Contiguous PRB allocation `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrbRun {
    pub start: u32,
    pub len: u32,
}

impl PrbRun {
    pub const EMPTY: PrbRun = PrbRun { start: 0, len: 0 };

    pub fn full(n_prbs: u32) -> Self {
        Self {
            start: 0,
            len: n_prbs,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn last(&self) -> Option<u32> {
        (!self.is_empty()).then(|| self.start + self.len - 1)
    }

    pub fn contains(&self, prb: u32) -> bool {
        prb >= self.start && prb - self.start < self.len
    }

    pub fn iter(&self) -> Range<u32> {
        self.start..self.start + self.len
    }
}

impl fmt::Display for PrbRun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.last() {
            Some(last) => write!(f, "[{},{}]", self.start, last),
            None => f.write_str("[]"),
        }
    }
}

/// Blocked PRBs plus the carrier size they index into.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulerState {
    n_prbs: u32,
    mask: BTreeSet<u32>,
}

impl SchedulerState {
    pub fn new(n_prbs: u32) -> Self {
        Self {
            n_prbs,
            mask: BTreeSet::new(),
        }
    }

    pub fn n_prbs(&self) -> u32 {
        self.n_prbs
    }

    pub fn mask(&self) -> &BTreeSet<u32> {
        &self.mask
    }

    /// Replaces the whole mask. Nothing changes if any entry is out of range.
    pub fn replace_mask<I: IntoIterator<Item = u32>>(
        &mut self,
        entries: I,
    ) -> Result<(), SimError> {
        let next: BTreeSet<u32> = entries.into_iter().collect();
        if let Some(&prb) = next.iter().find(|&&p| p >= self.n_prbs) {
            return Err(SimError::EntryOutOfRange {
                prb,
                n_prbs: self.n_prbs,
            });
        }
        self.mask = next;
        Ok(())
    }

    pub fn usable_run(&self) -> PrbRun {
        Type1Scheduler.schedule(self)
    }
}

/// Resource allocation policy for the single simulated UE.
pub trait Scheduler {
    fn schedule(&self, state: &SchedulerState) -> PrbRun;
}

/// Contiguous allocation starting at PRB 0 and truncated at the first
/// blocked PRB. Everything right of a blocked PRB is lost as well.
#[derive(Debug, Clone, Copy, Default)]
pub struct Type1Scheduler;

impl Scheduler for Type1Scheduler {
    fn schedule(&self, state: &SchedulerState) -> PrbRun {
        let end = state.mask.first().copied().unwrap_or(state.n_prbs);
        PrbRun { start: 0, len: end }
    }
}

pub fn schedule_slot(state: &SchedulerState) -> PrbRun {
    Type1Scheduler.schedule(state)
}

/// Deterministic per-slot RNG for a given stream.
pub fn slot_rng(seed: u64, stream: u64, slot: u64) -> ChaCha8Rng {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(stream ^ mix(slot))))
}

/// One sensing snapshot of int16 I/Q bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IqSpectrum {
    pub slot: u64,
    pub bins: Vec<Complex<i16>>,
}

impl IqSpectrum {
    /// Big-endian `I, Q` pairs, 4 bytes per bin.
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.bins.len() * IQ_SAMPLE_LEN);
        for b in &self.bins {
            out.extend_from_slice(&b.re.to_be_bytes());
            out.extend_from_slice(&b.im.to_be_bytes());
        }
        out
    }

    pub fn from_payload(slot: u64, payload: &[u8]) -> Result<Self, SimError> {
        Ok(Self {
            slot,
            bins: iq_from_payload(payload)?,
        })
    }

    pub fn magnitude_db(&self, k: usize) -> f64 {
        magnitude_db(self.bins[k])
    }
}

pub fn iq_from_payload(payload: &[u8]) -> Result<Vec<Complex<i16>>, SimError> {
    if !payload.len().is_multiple_of(IQ_SAMPLE_LEN) {
        return Err(SimError::MisalignedPayload(payload.len()));
    }
    Ok(payload
        .chunks_exact(IQ_SAMPLE_LEN)
        .map(|c| {
            Complex::new(
                i16::from_be_bytes([c[0], c[1]]),
                i16::from_be_bytes([c[2], c[3]]),
            )
        })
        .collect())
}

/// `20·log10(|bin|)`, with an all-zero bin mapped to negative infinity.
pub fn magnitude_db(bin: Complex<i16>) -> f64 {
    let re = bin.re as f64;
    let im = bin.im as f64;
    let power = re * re + im * im;
    if power == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * power.log10()
    }
}

/// Nominal level of bin `k` in dB: noise, plus carrier on scheduled PRBs,
/// plus incumbent on overlapping bins, summed in linear power.
pub fn bin_level_db(radio: &RadioConfig, inc: &IncumbentConfig, carrier: &PrbRun, k: usize) -> f64 {
    let mut linear = 1.0;
    if carrier.contains(radio.prb_of_bin(k)) {
        linear += db_to_power(radio.carrier_power_db);
    }
    if incumbent_bins(radio, inc).contains(&k) {
        linear += db_to_power(inc.power_db);
    }
    radio.noise_floor_db + 10.0 * linear.log10()
}

fn db_to_power(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Synthesizes the sensing snapshot for `slot`. Bin magnitudes follow
/// [`bin_level_db`] exactly (up to int16 rounding); phases are uniform.
pub fn gen_spectrum(
    radio: &RadioConfig,
    inc: &IncumbentConfig,
    carrier: &PrbRun,
    slot: u64,
    seed: u64,
) -> IqSpectrum {
    let mut rng = slot_rng(seed, 1, slot);
    let inc_bins = incumbent_bins(radio, inc);
    let carrier_gain = db_to_power(radio.carrier_power_db);
    let inc_gain = db_to_power(inc.power_db);
    let bins = (0..radio.resolution_bins)
        .map(|k| {
            let mut linear = 1.0;
            if carrier.contains(radio.prb_of_bin(k)) {
                linear += carrier_gain;
            }
            if inc_bins.contains(&k) {
                linear += inc_gain;
            }
            let amplitude = 10f64.powf(radio.noise_floor_db / 20.0) * linear.sqrt();
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Complex::new(
                quantize(amplitude * phase.cos()),
                quantize(amplitude * phase.sin()),
            )
        })
        .collect();
    IqSpectrum { slot, bins }
}

fn quantize(x: f64) -> i16 {
    x.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// One propagation path of a synthetic uplink channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSpec {
    pub delay_s: f64,
    pub gain: Complex64,
}

/// Uplink channel frequency response over K subcarriers.
#[derive(Debug, Clone, PartialEq)]
pub struct CirSnapshot {
    pub response: Vec<Complex64>,
    pub subcarrier_spacing_hz: f64,
    /// Nominal SNR; `+inf` for noiseless snapshots.
    pub snr_db: f64,
    /// Realized signal-to-noise ratio of this snapshot.
    pub measured_snr_db: f64,
    /// Delay of the first path (ground truth, not transmitted).
    pub true_delay_s: f64,
}

impl CirSnapshot {
    /// Packs the response into int16 I/Q pairs, scaled so the largest
    /// component sits at a fixed full scale. Delay estimation is invariant to
    /// the per-snapshot scale.
    pub fn to_payload(&self) -> Vec<u8> {
        let peak = self
            .response
            .iter()
            .map(|h| h.re.abs().max(h.im.abs()))
            .fold(0.0, f64::max);
        let scale = if peak > 0.0 {
            CIR_FULL_SCALE / peak
        } else {
            0.0
        };
        let mut out = Vec::with_capacity(self.response.len() * IQ_SAMPLE_LEN);
        for h in &self.response {
            out.extend_from_slice(&quantize(h.re * scale).to_be_bytes());
            out.extend_from_slice(&quantize(h.im * scale).to_be_bytes());
        }
        out
    }
}

/// Decodes a packed channel snapshot back to complex values (arbitrary scale).
pub fn cir_from_payload(payload: &[u8]) -> Result<Vec<Complex64>, SimError> {
    Ok(iq_from_payload(payload)?
        .into_iter()
        .map(|c| Complex64::new(c.re as f64 / CIR_FULL_SCALE, c.im as f64 / CIR_FULL_SCALE))
        .collect())
}

/// Baseband subcarrier offsets `k·Δf`, k = 0..K.
pub fn subcarrier_freqs(k: usize, spacing_hz: f64) -> Vec<f64> {
    (0..k).map(|i| i as f64 * spacing_hz).collect()
}

/// `M` single-path snapshots for a UE at `distance_m`, one-way delay `d/c`.
/// `snr_db = None` yields noiseless (identical) snapshots.
pub fn gen_cir(
    radio: &RadioConfig,
    distance_m: f64,
    snr_db: Option<f64>,
    m: usize,
    seed: u64,
) -> Result<Vec<CirSnapshot>, SimError> {
    if !(distance_m > 0.0) || !distance_m.is_finite() {
        return Err(SimError::InvalidArgument("distance_m must be positive"));
    }
    let path = PathSpec {
        delay_s: distance_m / SPEED_OF_LIGHT,
        gain: Complex64::new(1.0, 0.0),
    };
    let mut rng = slot_rng(seed, 2, distance_m.to_bits());
    gen_cir_paths(radio, &[path], snr_db, m, &mut rng)
}

/// Multipath variant of [`gen_cir`]; SNR is relative to the total path power.
pub fn gen_cir_paths<R: Rng + ?Sized>(
    radio: &RadioConfig,
    paths: &[PathSpec],
    snr_db: Option<f64>,
    m: usize,
    rng: &mut R,
) -> Result<Vec<CirSnapshot>, SimError> {
    if m == 0 {
        return Err(SimError::InvalidArgument("snapshot count must be >= 1"));
    }
    if paths.is_empty() {
        return Err(SimError::InvalidArgument("at least one path required"));
    }
    let spacing = radio.subcarrier_spacing_hz();
    let freqs = subcarrier_freqs(radio.cir_subcarriers, spacing);
    let clean: Vec<Complex64> = freqs
        .iter()
        .map(|&f| {
            paths
                .iter()
                .map(|p| {
                    p.gain * Complex64::from_polar(1.0, -std::f64::consts::TAU * f * p.delay_s)
                })
                .sum()
        })
        .collect();
    let path_power: f64 = paths.iter().map(|p| p.gain.norm_sqr()).sum();
    let noise_std = snr_db.map(|snr| (path_power * 10f64.powf(-snr / 10.0) / 2.0).sqrt());
    let signal_energy: f64 = clean.iter().map(|h| h.norm_sqr()).sum();

    Ok((0..m)
        .map(|_| {
            let (response, measured) = match noise_std {
                None => (clean.clone(), f64::INFINITY),
                Some(std) => {
                    let mut noise_energy = 0.0;
                    let response = clean
                        .iter()
                        .map(|h| {
                            let re: f64 = StandardNormal.sample(rng);
                            let im: f64 = StandardNormal.sample(rng);
                            let n = Complex64::new(re * std, im * std);
                            noise_energy += n.norm_sqr();
                            h + n
                        })
                        .collect();
                    (response, 10.0 * (signal_energy / noise_energy).log10())
                }
            };
            CirSnapshot {
                response,
                subcarrier_spacing_hz: spacing,
                snr_db: snr_db.unwrap_or(f64::INFINITY),
                measured_snr_db: measured,
                true_delay_s: paths[0].delay_s,
            }
        })
        .collect())
}

/// Linear goodput model scored per slot.
///
/// Clean scheduled PRBs deliver `rate_per_prb_mbps`; interfered scheduled
/// PRBs deliver `(1 - loss_factor)` of it. When any scheduled PRB is hit,
/// transport blocks spanning the allocation fail and are retransmitted, which
/// removes a further `collateral_penalty` fraction of the slot's goodput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoodputModel {
    pub rate_per_prb_mbps: f64,
    pub loss_factor: f64,
    pub collateral_penalty: f64,
}

impl Default for GoodputModel {
    fn default() -> Self {
        Self {
            rate_per_prb_mbps: 71.3 / 106.0,
            loss_factor: 1.0,
            collateral_penalty: 0.3,
        }
    }
}

impl GoodputModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.rate_per_prb_mbps >= 0.0)
            || !unit(self.loss_factor)
            || !unit(self.collateral_penalty)
        {
            return Err(SimError::InvalidConfig(
                "goodput: rate must be >= 0, loss_factor and collateral_penalty in [0,1]".into(),
            ));
        }
        Ok(())
    }

    pub fn goodput(&self, scheduled: &PrbRun, interfered: &BTreeSet<u32>) -> f64 {
        let hit = interfered
            .iter()
            .filter(|&&p| scheduled.contains(p))
            .count() as f64;
        let clean = scheduled.len as f64 - hit;
        let raw = self.rate_per_prb_mbps * (clean + (1.0 - self.loss_factor) * hit);
        if hit > 0.0 {
            raw * (1.0 - self.collateral_penalty)
        } else {
            raw
        }
    }
}
