//! Ranging dApp: delay-domain MUSIC on uplink channel snapshots.
//!
//! Pipeline: sample covariance over M snapshots (optionally forward–backward
//! averaged), Hermitian eigendecomposition, noise-subspace pseudo-spectrum
//! `P(τ) = 1 / (aᴴ E_n E_nᴴ a)` on a delay grid, grid argmax with optional
//! three-point parabolic refinement, then `distance = c·τ̂`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Indication, SM_CIR};
use crate::ransim::{cir_from_payload, subcarrier_freqs};
use crate::sdk::{HandlerResult, IndicationHandler, TickContext};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RangingError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("eigendecomposition did not converge")]
    EigFailure,
    #[error("need at least {needed} snapshots for model order {order}, got {got}")]
    NotEnoughSnapshots {
        got: usize,
        needed: usize,
        order: usize,
    },
    #[error("invalid ranging config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangingConfig {
    /// Snapshots per estimate.
    #[serde(rename = "M")]
    pub m: usize,
    pub model_order: usize,
    pub tau_max_s: f64,
    pub grid_step_s: f64,
    pub refine: bool,
    pub forward_backward: bool,
    pub subcarrier_spacing_hz: f64,
}

impl Default for RangingConfig {
    fn default() -> Self {
        Self {
            m: 60,
            model_order: 1,
            // twice a 50 ns (15 m) span of interest
            tau_max_s: 100e-9,
            grid_step_s: 0.1e-9,
            refine: true,
            forward_backward: true,
            subcarrier_spacing_hz: 40e6 / 64.0,
        }
    }
}

impl RangingConfig {
    pub fn validate(&self) -> Result<(), RangingError> {
        if self.model_order < 1 {
            return Err(RangingError::InvalidConfig("model_order must be >= 1"));
        }
        if !(self.grid_step_s > 0.0) || !(self.tau_max_s > 0.0) {
            return Err(RangingError::InvalidConfig(
                "grid_step and tau_max must be positive",
            ));
        }
        if self.m < self.model_order + 1 {
            return Err(RangingError::NotEnoughSnapshots {
                got: self.m,
                needed: self.model_order + 1,
                order: self.model_order,
            });
        }
        if !(self.subcarrier_spacing_hz > 0.0) {
            return Err(RangingError::InvalidConfig(
                "subcarrier spacing must be positive",
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> DelayGrid {
        DelayGrid {
            tau_max_s: self.tau_max_s,
            step_s: self.grid_step_s,
        }
    }
}

/// Uniform delay grid `0, step, 2·step, …, ≤ tau_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayGrid {
    pub tau_max_s: f64,
    pub step_s: f64,
}

impl DelayGrid {
    pub fn len(&self) -> usize {
        (self.tau_max_s / self.step_s + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn delay(&self, i: usize) -> f64 {
        i as f64 * self.step_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeEstimate {
    pub distance_m: f64,
    pub delay_s: f64,
    /// Pseudo-spectrum value at the peak.
    pub peak: f64,
    pub m_used: usize,
    /// Per-subcarrier SNR inferred from the eigenvalue split.
    pub snr_db: f64,
}

/// `R = (1/M) Σ h hᴴ`, optionally replaced by `(R + J R* J) / 2`.
pub fn covariance(
    snapshots: &[Vec<Complex64>],
    forward_backward: bool,
) -> Result<DMatrix<Complex64>, RangingError> {
    let first = snapshots
        .first()
        .ok_or_else(|| RangingError::DimensionMismatch("no snapshots".into()))?;
    let k = first.len();
    if k < 2 {
        return Err(RangingError::DimensionMismatch(format!(
            "need K >= 2 subcarriers, got {k}"
        )));
    }
    if let Some(bad) = snapshots.iter().find(|s| s.len() != k) {
        return Err(RangingError::DimensionMismatch(format!(
            "snapshot has {} subcarriers, expected {k}",
            bad.len()
        )));
    }
    let m = snapshots.len();
    let data = DMatrix::from_fn(k, m, |row, col| snapshots[col][row]);
    let mut r = &data * data.adjoint() / Complex64::new(m as f64, 0.0);
    if forward_backward {
        let backward = DMatrix::from_fn(k, k, |i, j| r[(k - 1 - i, k - 1 - j)].conj());
        r = (r + backward) * Complex64::new(0.5, 0.0);
    }
    Ok(r)
}

#[derive(Debug, Clone)]
pub struct MusicSpectrum {
    pub grid: DelayGrid,
    /// `aᴴ E_n E_nᴴ a` per grid point.
    pub denominators: Vec<f64>,
    /// Eigenvalues of the covariance, ascending.
    pub eigenvalues: Vec<f64>,
}

impl MusicSpectrum {
    pub fn value(&self, i: usize) -> f64 {
        1.0 / self.denominators[i].max(f64::MIN_POSITIVE)
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.denominators.len())
            .map(|i| self.value(i))
            .collect()
    }

    /// Grid index of the global maximum of `P`.
    pub fn argmax(&self) -> usize {
        self.denominators
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |best, (i, &d)| if d < best.1 { (i, d) } else { best },
            )
            .0
    }

    /// Interior local maxima of `P`, strongest first.
    pub fn peaks(&self) -> Vec<usize> {
        let d = &self.denominators;
        let mut idx: Vec<usize> = (1..d.len().saturating_sub(1))
            .filter(|&i| d[i] < d[i - 1] && d[i] <= d[i + 1])
            .collect();
        idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
        idx
    }

    /// Parabolic vertex through the neighbors of grid point `i`, in delay units.
    pub fn refined_delay(&self, i: usize) -> f64 {
        let d = &self.denominators;
        let tau = self.grid.delay(i);
        if i == 0 || i + 1 >= d.len() {
            return tau;
        }
        let curvature = d[i - 1] - 2.0 * d[i] + d[i + 1];
        if !(curvature > 0.0) {
            return tau;
        }
        let offset = (0.5 * (d[i - 1] - d[i + 1]) / curvature).clamp(-0.5, 0.5);
        tau + offset * self.grid.step_s
    }
}

/// Noise-subspace pseudo-spectrum of `r` for model order `p`.
pub fn music_spectrum(
    r: &DMatrix<Complex64>,
    p: usize,
    freqs: &[f64],
    grid: &DelayGrid,
) -> Result<MusicSpectrum, RangingError> {
    let k = r.nrows();
    if r.ncols() != k || freqs.len() != k {
        return Err(RangingError::DimensionMismatch(format!(
            "covariance {}x{} with {} subcarrier frequencies",
            r.nrows(),
            r.ncols(),
            freqs.len()
        )));
    }
    if p == 0 || p >= k {
        return Err(RangingError::InvalidConfig(
            "model order must satisfy 1 <= p < K",
        ));
    }
    let eig = r
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 1000 * k)
        .ok_or(RangingError::EigFailure)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let noise_dim = k - p;
    let noise = DMatrix::from_fn(k, noise_dim, |row, col| eig.eigenvectors[(row, order[col])]);

    let n_grid = grid.len();
    let steering = DMatrix::from_fn(k, n_grid, |row, col| {
        Complex64::from_polar(1.0, -std::f64::consts::TAU * freqs[row] * grid.delay(col))
    });
    let projected = noise.adjoint() * steering;
    let denominators = projected
        .column_iter()
        .map(|c| c.iter().map(|z| z.norm_sqr()).sum())
        .collect();
    Ok(MusicSpectrum {
        grid: *grid,
        denominators,
        eigenvalues: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
    })
}

/// Full pipeline on one batch of snapshots.
pub fn estimate_distance(
    snapshots: &[Vec<Complex64>],
    cfg: &RangingConfig,
) -> Result<RangeEstimate, RangingError> {
    cfg.validate()?;
    let needed = cfg.model_order + 1;
    if snapshots.len() < needed {
        return Err(RangingError::NotEnoughSnapshots {
            got: snapshots.len(),
            needed,
            order: cfg.model_order,
        });
    }
    let r = covariance(snapshots, cfg.forward_backward)?;
    let k = r.nrows();
    let freqs = subcarrier_freqs(k, cfg.subcarrier_spacing_hz);
    let spectrum = music_spectrum(&r, cfg.model_order, &freqs, &cfg.grid())?;
    let best = spectrum.argmax();
    let delay = if cfg.refine {
        spectrum.refined_delay(best)
    } else {
        spectrum.grid.delay(best)
    }
    .clamp(0.0, cfg.tau_max_s);

    let noise_dim = k - cfg.model_order;
    let noise_power = spectrum.eigenvalues[..noise_dim].iter().sum::<f64>() / noise_dim as f64;
    let signal_power: f64 = spectrum.eigenvalues[noise_dim..]
        .iter()
        .map(|l| l - noise_power)
        .sum();
    let snr_db = 10.0 * (signal_power / (k as f64 * noise_power.max(f64::MIN_POSITIVE))).log10();

    Ok(RangeEstimate {
        distance_m: SPEED_OF_LIGHT * delay,
        delay_s: delay,
        peak: spectrum.value(best),
        m_used: snapshots.len(),
        snr_db,
    })
}

/// Report body: `{distance_mm u32, M u16, peak_q16 u32}`, big-endian.
/// The peak is Q16.16 fixed point, saturating.
pub fn encode_report(est: &RangeEstimate) -> Vec<u8> {
    let mm = (est.distance_m * 1000.0)
        .round()
        .clamp(0.0, u32::MAX as f64) as u32;
    let m = u16::try_from(est.m_used).unwrap_or(u16::MAX);
    let peak = (est.peak * 65536.0).round().clamp(0.0, u32::MAX as f64) as u32;
    let mut out = Vec::with_capacity(10);
    out.extend_from_slice(&mm.to_be_bytes());
    out.extend_from_slice(&m.to_be_bytes());
    out.extend_from_slice(&peak.to_be_bytes());
    out
}

/// Returns `(distance_mm, M, peak_q16)`.
pub fn decode_report(payload: &[u8]) -> Option<(u32, u16, u32)> {
    let b: &[u8; 10] = payload.try_into().ok()?;
    Some((
        u32::from_be_bytes([b[0], b[1], b[2], b[3]]),
        u16::from_be_bytes([b[4], b[5]]),
        u32::from_be_bytes([b[6], b[7], b[8], b[9]]),
    ))
}

/// Indication handler for the CIR service model. Buffers snapshots and
/// reports an estimate every `M` indications.
#[derive(Debug)]
pub struct RangingDapp {
    cfg: RangingConfig,
    batch: Vec<Vec<Complex64>>,
    estimates: Vec<RangeEstimate>,
}

impl RangingDapp {
    pub fn new(cfg: RangingConfig) -> Result<Self, RangingError> {
        cfg.validate()?;
        Ok(Self {
            batch: Vec::with_capacity(cfg.m),
            cfg,
            estimates: Vec::new(),
        })
    }

    pub fn estimates(&self) -> &[RangeEstimate] {
        &self.estimates
    }
}

impl IndicationHandler for RangingDapp {
    fn on_indication(
        &mut self,
        ctx: &mut TickContext<'_>,
        indication: &Indication,
    ) -> HandlerResult {
        self.batch.push(cir_from_payload(&indication.payload)?);
        if self.batch.len() >= self.cfg.m {
            let batch = std::mem::take(&mut self.batch);
            let est = estimate_distance(&batch, &self.cfg)?;
            ctx.schedule_report(encode_report(&est));
            self.estimates.push(est);
        }
        Ok(None)
    }
}

pub const SERVICE_MODEL: u16 = SM_CIR;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ransim::{gen_cir, gen_cir_paths, PathSpec, RadioConfig};
    use rand::{Rng, SeedableRng};

    fn responses(
        radio: &RadioConfig,
        d: f64,
        snr: Option<f64>,
        m: usize,
        seed: u64,
    ) -> Vec<Vec<Complex64>> {
        gen_cir(radio, d, snr, m, seed)
            .unwrap()
            .into_iter()
            .map(|s| s.response)
            .collect()
    }

    fn max_rel_asymmetry(r: &DMatrix<Complex64>) -> f64 {
        let scale = r.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let mut worst: f64 = 0.0;
        for i in 0..r.nrows() {
            for j in 0..r.ncols() {
                worst = worst.max((r[(i, j)] - r[(j, i)].conj()).norm() / scale);
            }
        }
        worst
    }

    #[test]
    fn identical_snapshots_give_rank_one() {
        let radio = RadioConfig::default();
        let snaps = responses(&radio, 4.0, None, 5, 0);
        let r = covariance(&snaps, false).unwrap();
        let eig = r.symmetric_eigen();
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        let top = *vals.last().unwrap();
        assert!((top - 64.0).abs() < 1e-9);
        assert!(vals[..63].iter().all(|v| v.abs() < 1e-9 * top));
    }

    #[test]
    fn empty_batch_is_dimension_mismatch() {
        assert!(matches!(
            covariance(&[], true),
            Err(RangingError::DimensionMismatch(_))
        ));
        let ragged = vec![
            vec![Complex64::new(1.0, 0.0); 4],
            vec![Complex64::new(1.0, 0.0); 3],
        ];
        assert!(matches!(
            covariance(&ragged, true),
            Err(RangingError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn covariance_is_hermitian() {
        let radio = RadioConfig::default();
        for fb in [false, true] {
            let r = covariance(&responses(&radio, 6.0, Some(0.0), 20, 3), fb).unwrap();
            assert!(max_rel_asymmetry(&r) < 1e-12);
        }
    }

    #[test]
    fn eigen_conservation() {
        let radio = RadioConfig::default();
        let r = covariance(&responses(&radio, 8.0, Some(-10.0), 30, 4), true).unwrap();
        let freqs = subcarrier_freqs(64, radio.subcarrier_spacing_hz());
        let s = music_spectrum(&r, 1, &freqs, &RangingConfig::default().grid()).unwrap();
        let trace: f64 = r.diagonal().iter().map(|z| z.re).sum();
        let sum: f64 = s.eigenvalues.iter().sum();
        assert!(((sum - trace) / trace).abs() < 1e-9);
        assert!(s.eigenvalues.iter().all(|&l| l >= -1e-9 * trace));
    }

    #[test]
    fn identity_covariance_is_flat() {
        let k = 32;
        let r = DMatrix::<Complex64>::identity(k, k);
        let freqs = subcarrier_freqs(k, 1.25e6);
        let s = music_spectrum(&r, 1, &freqs, &RangingConfig::default().grid()).unwrap();
        let v = s.values();
        let (lo, hi) = v
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert!((hi - lo) / lo < 0.01);
    }

    #[test]
    fn noiseless_single_path_hits_grid() {
        let radio = RadioConfig::default();
        let cfg = RangingConfig {
            refine: false,
            ..Default::default()
        };
        for d in [3.0, 5.0, 6.66, 9.99] {
            let est = estimate_distance(&responses(&radio, d, None, 4, 0), &cfg).unwrap();
            assert!(
                (est.distance_m - d).abs() <= SPEED_OF_LIGHT * cfg.grid_step_s,
                "d={d} got {}",
                est.distance_m
            );
        }
    }

    #[test]
    fn five_meters_with_1024_subcarriers() {
        let radio = RadioConfig {
            cir_subcarriers: 1024,
            ..Default::default()
        };
        let cfg = RangingConfig {
            subcarrier_spacing_hz: radio.subcarrier_spacing_hz(),
            tau_max_s: 40e-9,
            m: 2,
            ..Default::default()
        };
        let est = estimate_distance(&responses(&radio, 5.0, None, 2, 0), &cfg).unwrap();
        assert!((est.distance_m - 5.0).abs() <= SPEED_OF_LIGHT * cfg.grid_step_s);
    }

    #[test]
    fn two_paths_resolve() {
        let radio = RadioConfig::default();
        let spacing = radio.subcarrier_spacing_hz();
        let separation = 2.0 / (64.0 * spacing);
        let (t1, t2) = (20e-9, 20e-9 + separation);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let snaps: Vec<Vec<Complex64>> = (0..40)
            .map(|_| {
                let paths = [
                    PathSpec {
                        delay_s: t1,
                        gain: Complex64::from_polar(
                            1.0,
                            rng.random_range(0.0..std::f64::consts::TAU),
                        ),
                    },
                    PathSpec {
                        delay_s: t2,
                        gain: Complex64::from_polar(
                            0.8,
                            rng.random_range(0.0..std::f64::consts::TAU),
                        ),
                    },
                ];
                gen_cir_paths(&radio, &paths, Some(20.0), 1, &mut rng)
                    .unwrap()
                    .remove(0)
                    .response
            })
            .collect();
        let r = covariance(&snaps, true).unwrap();
        let freqs = subcarrier_freqs(64, spacing);
        let s = music_spectrum(&r, 2, &freqs, &RangingConfig::default().grid()).unwrap();
        let mut found: Vec<f64> = s.peaks().iter().take(2).map(|&i| s.grid.delay(i)).collect();
        found.sort_by(f64::total_cmp);
        assert_eq!(found.len(), 2);
        assert!((found[0] - t1).abs() < 1e-9, "{found:?}");
        assert!((found[1] - t2).abs() < 1e-9, "{found:?}");
    }

    #[test]
    fn too_few_snapshots_rejected() {
        let radio = RadioConfig::default();
        let cfg = RangingConfig {
            m: 2,
            model_order: 1,
            ..Default::default()
        };
        let err = estimate_distance(&responses(&radio, 5.0, None, 1, 0), &cfg).unwrap_err();
        assert!(matches!(
            err,
            RangingError::NotEnoughSnapshots {
                got: 1,
                needed: 2,
                ..
            }
        ));
        assert!(RangingConfig {
            m: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn refinement_stays_within_half_step() {
        let radio = RadioConfig::default();
        let cfg = RangingConfig::default();
        let est = estimate_distance(&responses(&radio, 7.3, Some(10.0), 20, 1), &cfg).unwrap();
        assert!(est.distance_m >= 0.0 && est.distance_m <= SPEED_OF_LIGHT * cfg.tau_max_s);
        assert!((est.distance_m - 7.3).abs() < 0.5);
        assert!(
            (est.snr_db - 10.0).abs() < 3.0,
            "snr estimate {}",
            est.snr_db
        );
    }

    #[test]
    fn report_layout() {
        let est = RangeEstimate {
            distance_m: 5.0126,
            delay_s: 0.0,
            peak: 1.5,
            m_used: 60,
            snr_db: 0.0,
        };
        let p = encode_report(&est);
        assert_eq!(decode_report(&p), Some((5013, 60, 98304)));
    }
}
