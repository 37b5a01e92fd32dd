//! Monostatic signal model.
//!
//! A rotating Tx/Rx pair sits on a circle of radius `r` around the array
//! centre and scans azimuth in fixed steps. For rotation angle `φ` and
//! frequency `f` the channel is
//!
//! ```text
//! H(f, φ) = Σ_ℓ α_ℓ · a(f, φ; θ_ℓ) · e^{-j2πfτ_ℓ}
//! a(f, φ; θ) = e^{j4πfr·cos(θ-φ)/c} · √G(θ-φ)
//! ```
//!
//! where `τ_ℓ` is referenced to the array centre and `G` is the combined
//! Tx+Rx power pattern. At boresight (`θ = φ`) the array phase advances the
//! path by `2r/c`, so the observed delay is the antenna-to-scatterer round
//! trip.

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cis_cycles, db_to_power, wrap_deg_180, Real};

/// Sounder and rotating-array geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct ArrayConfig<T> {
    pub radius_m: T,
    pub rotation_angles_deg: Vec<T>,
    pub freq_start_hz: T,
    pub freq_stop_hz: T,
    pub n_freq_points: usize,
    pub antenna_peak_gain_dbi: T,
    pub hpbw_deg: T,
    /// Sidelobe level per antenna, dB below the peak.
    #[serde(default = "default_sidelobe_floor")]
    pub sidelobe_floor_db: T,
    /// Informational only; the model is azimuth-plane.
    pub trx_height_m: T,
}

fn default_sidelobe_floor<T: Real>() -> T {
    T::lit(30.0)
}

impl<T: Real> Default for ArrayConfig<T> {
    /// 290–310 GHz, 2001 points, 1° scan over 360°, 26 dBi / 8° horns, r = 0.23 m.
    fn default() -> Self {
        Self {
            radius_m: T::lit(0.23),
            rotation_angles_deg: (0..360).map(T::from_usize_lossy).collect(),
            freq_start_hz: T::lit(290e9),
            freq_stop_hz: T::lit(310e9),
            n_freq_points: 2001,
            antenna_peak_gain_dbi: T::lit(26.0),
            hpbw_deg: T::lit(8.0),
            sidelobe_floor_db: T::lit(30.0),
            trx_height_m: T::lit(2.0),
        }
    }
}

impl<T: Real> ArrayConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_m >= T::zero()) || !self.radius_m.is_finite() {
            return Err(Error::InvalidConfig(format!("radius_m must be >= 0, got {}", self.radius_m)));
        }
        if self.n_freq_points < 2 {
            return Err(Error::InvalidConfig("n_freq_points must be >= 2".into()));
        }
        if !(self.freq_stop_hz > self.freq_start_hz) {
            return Err(Error::InvalidConfig("freq_stop_hz must exceed freq_start_hz".into()));
        }
        if !(self.hpbw_deg > T::zero()) {
            return Err(Error::InvalidConfig("hpbw_deg must be positive".into()));
        }
        if self.rotation_angles_deg.is_empty() {
            return Err(Error::InvalidConfig("rotation grid is empty".into()));
        }
        let full = T::lit(360.0);
        for w in self.rotation_angles_deg.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidConfig("rotation grid must be strictly increasing".into()));
            }
        }
        if self.rotation_angles_deg.iter().any(|&a| a < T::zero() || a >= full) {
            return Err(Error::InvalidConfig("rotation angles must lie in [0, 360)".into()));
        }
        Ok(())
    }

    pub fn bandwidth_hz(&self) -> T {
        self.freq_stop_hz - self.freq_start_hz
    }

    pub fn center_freq_hz(&self) -> T {
        (self.freq_start_hz + self.freq_stop_hz) * T::lit(0.5)
    }

    pub fn n_angles(&self) -> usize {
        self.rotation_angles_deg.len()
    }

    /// Sampled frequency grid: `f_n = f_start + n·B/N`, `n = 0..N`.
    pub fn frequency_grid(&self) -> FrequencyGrid<T> {
        FrequencyGrid {
            start_hz: self.freq_start_hz,
            step_hz: self.bandwidth_hz() / T::from_usize_lossy(self.n_freq_points),
            len: self.n_freq_points,
        }
    }

    /// Delay-bin spacing of the IDFT, `1/B`.
    pub fn delay_step_s(&self) -> T {
        T::one() / self.bandwidth_hz()
    }

    pub fn delay_grid_s(&self) -> Vec<T> {
        let step = self.delay_step_s();
        (0..self.n_freq_points).map(|k| T::from_usize_lossy(k) * step).collect()
    }

    /// Largest representable delay, `(N-1)/B`.
    pub fn alias_free_delay_s(&self) -> T {
        T::from_usize_lossy(self.n_freq_points - 1) * self.delay_step_s()
    }

    /// `10·log10 Σ_j G(φ_j − φ_0) / G(0)`: how much more power an extended
    /// surface with one return per rotation angle delivers into one column
    /// than a single boresight return does (incoherent sum).
    pub fn beam_integration_db(&self) -> T {
        let pattern = self.pattern();
        let first = self.rotation_angles_deg.first().copied().unwrap_or_else(T::zero);
        let sum = self
            .rotation_angles_deg
            .iter()
            .map(|&a| pattern.gain(a - first))
            .fold(T::zero(), |acc, g| acc + g);
        crate::scalar::power_to_db(sum / pattern.peak_gain())
    }

    pub fn pattern(&self) -> AntennaPattern<T> {
        AntennaPattern {
            peak_gain_dbi: self.antenna_peak_gain_dbi,
            hpbw_deg: self.hpbw_deg,
            sidelobe_floor_db: self.sidelobe_floor_db,
        }
    }
}

/// Uniform frequency grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyGrid<T> {
    pub start_hz: T,
    pub step_hz: T,
    pub len: usize,
}

impl<T: Real> FrequencyGrid<T> {
    #[inline]
    pub fn at(&self, n: usize) -> T {
        self.start_hz + T::from_usize_lossy(n) * self.step_hz
    }

    pub fn to_vec(&self) -> Vec<T> {
        (0..self.len).map(|n| self.at(n)).collect()
    }

    /// `Σ_n e^{j2π f_n Δτ}`, the correlation between two unit steering
    /// vectors `Δτ` apart.
    pub fn steering_kernel(&self, delta_s: T) -> Complex<T> {
        let x = self.step_hz * delta_s;
        let n = T::from_usize_lossy(self.len);
        let denom = (T::PI() * x).sin();
        let carrier = cis_cycles(self.start_hz * delta_s);
        if denom.abs() < T::lit(1e-9) {
            // Δf·Δτ is an integer: every term is identical.
            return (0..self.len).fold(Complex::new(T::zero(), T::zero()), |acc, k| {
                acc + cis_cycles((self.start_hz + T::from_usize_lossy(k) * self.step_hz) * delta_s)
            });
        }
        let ratio = (T::PI() * n * x).sin() / denom;
        carrier * cis_cycles(T::lit(0.5) * (n - T::one()) * x) * ratio
    }
}

/// Gaussian main lobe in dB (−3 dB per antenna at ±HPBW/2) floored at a
/// constant sidelobe level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AntennaPattern<T> {
    pub peak_gain_dbi: T,
    pub hpbw_deg: T,
    pub sidelobe_floor_db: T,
}

impl<T: Real> AntennaPattern<T> {
    /// Gain of one antenna in dBi at the given pointing offset.
    pub fn per_antenna_gain_dbi(&self, offset_deg: T) -> T {
        let off = wrap_deg_180(offset_deg);
        let ratio = off / self.hpbw_deg;
        let atten = (T::lit(12.0) * ratio * ratio).min(self.sidelobe_floor_db);
        self.peak_gain_dbi - atten
    }

    /// Combined Tx+Rx linear power gain.
    pub fn gain(&self, offset_deg: T) -> T {
        db_to_power(T::lit(2.0) * self.per_antenna_gain_dbi(offset_deg))
    }

    pub fn peak_gain(&self) -> T {
        db_to_power(T::lit(2.0) * self.peak_gain_dbi)
    }
}

/// Combined Tx+Rx power-pattern weight at a pointing offset.
pub fn antenna_gain<T: Real>(offset_deg: T, config: &ArrayConfig<T>) -> T {
    config.pattern().gain(offset_deg)
}

/// One propagation path. `delay_s` is referenced to the array centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mpc<T> {
    pub amplitude: Complex<T>,
    pub delay_s: T,
    pub angle_deg: T,
}

/// Array response `e^{j4πfr·cos(θ-φ)/c} · √G(θ-φ)` for one path.
pub fn array_response<T: Real>(mpc: &Mpc<T>, freq_hz: T, phi_deg: T, config: &ArrayConfig<T>) -> Complex<T> {
    let offset = mpc.angle_deg - phi_deg;
    let cycles = T::lit(2.0) * freq_hz * config.radius_m * offset.to_radians().cos() / T::speed_of_light();
    cis_cycles(cycles) * antenna_gain(offset, config).sqrt()
}

/// Complex white noise added per (frequency, angle) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec<T> {
    /// `E|n|²` in dB relative to unit `|H|²`.
    pub power_db: T,
    pub seed: u64,
}

/// Channel frequency response, stored one rotation angle per contiguous column.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFrequencyResponse<T> {
    values: Vec<Complex<T>>,
    config: ArrayConfig<T>,
}

impl<T: Real> ChannelFrequencyResponse<T> {
    pub fn new(values: Vec<Complex<T>>, config: ArrayConfig<T>) -> Result<Self> {
        config.validate()?;
        let expected = config.n_freq_points * config.n_angles();
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "CFR has {} values, expected {} x {}",
                values.len(),
                config.n_freq_points,
                config.n_angles()
            )));
        }
        Ok(Self { values, config })
    }

    pub fn zeros(config: ArrayConfig<T>) -> Result<Self> {
        let n = config.n_freq_points * config.n_angles();
        Self::new(vec![Complex::new(T::zero(), T::zero()); n], config)
    }

    pub fn config(&self) -> &ArrayConfig<T> {
        &self.config
    }

    pub fn n_freq(&self) -> usize {
        self.config.n_freq_points
    }

    pub fn n_angles(&self) -> usize {
        self.config.n_angles()
    }

    pub fn column(&self, j: usize) -> &[Complex<T>] {
        let n = self.n_freq();
        &self.values[j * n..(j + 1) * n]
    }

    pub fn get(&self, freq_idx: usize, angle_idx: usize) -> Complex<T> {
        self.values[angle_idx * self.n_freq() + freq_idx]
    }

    /// Column-major backing storage (`angle_idx * n_freq + freq_idx`).
    pub fn as_slice(&self) -> &[Complex<T>] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

fn column_seed(seed: u64, column: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ (column as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Evaluates `H(f, φ)` for a set of paths, optionally adding seeded noise.
pub fn synthesize_cfr<T: Real>(
    mpcs: &[Mpc<T>],
    config: &ArrayConfig<T>,
    noise: Option<&NoiseSpec<T>>,
) -> Result<ChannelFrequencyResponse<T>> {
    config.validate()?;
    let limit = config.alias_free_delay_s();
    for m in mpcs {
        if !(m.delay_s >= T::zero() && m.delay_s < limit) {
            return Err(Error::DelayOutOfRange {
                delay_ns: m.delay_s.as_f64() * 1e9,
                limit_ns: limit.as_f64() * 1e9,
            });
        }
    }
    let grid = config.frequency_grid();
    let pattern = config.pattern();
    let c = T::speed_of_light();
    let n_freq = config.n_freq_points;

    let columns: Vec<Vec<Complex<T>>> = config
        .rotation_angles_deg
        .par_iter()
        .enumerate()
        .map(|(j, &phi)| {
            let mut col = vec![Complex::new(T::zero(), T::zero()); n_freq];
            for m in mpcs {
                let offset = m.angle_deg - phi;
                let weight = m.amplitude * pattern.gain(offset).sqrt();
                // Net delay seen at this rotation: τ − 2r·cos(θ−φ)/c.
                let net = m.delay_s - T::lit(2.0) * config.radius_m * offset.to_radians().cos() / c;
                accumulate_tone(&mut col, &grid, weight, net);
            }
            if let Some(spec) = noise {
                let sigma = (db_to_power(spec.power_db) * T::lit(0.5)).sqrt().as_f64();
                let mut rng = ChaCha8Rng::seed_from_u64(column_seed(spec.seed, j));
                for z in col.iter_mut() {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    *z += Complex::new(T::lit(re * sigma), T::lit(im * sigma));
                }
            }
            col
        })
        .collect();

    ChannelFrequencyResponse::new(columns.into_iter().flatten().collect(), config.clone())
}

/// Adds `weight · e^{-j2π f_n τ}` over the grid using a re-anchored phasor recurrence.
pub(crate) fn accumulate_tone<T: Real>(out: &mut [Complex<T>], grid: &FrequencyGrid<T>, weight: Complex<T>, delay_s: T) {
    const ANCHOR: usize = 128;
    let step = cis_cycles(-grid.step_hz * delay_s);
    for (block, chunk) in out.chunks_mut(ANCHOR).enumerate() {
        let mut z = weight * cis_cycles(-grid.at(block * ANCHOR) * delay_s);
        for v in chunk.iter_mut() {
            *v += z;
            z = z * step;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::SPEED_OF_LIGHT;
    use approx::assert_relative_eq;

    fn unity_config(n_angles: usize) -> ArrayConfig<f64> {
        ArrayConfig {
            radius_m: 0.0,
            rotation_angles_deg: (0..n_angles).map(|a| a as f64).collect(),
            n_freq_points: 64,
            antenna_peak_gain_dbi: 0.0,
            ..ArrayConfig::default()
        }
    }

    #[test]
    fn beam_integration_for_default_scan() {
        let cfg = ArrayConfig::<f64>::default();
        let direct: f64 = (-180..180).map(|k: i32| 10f64.powf(-2.0 * (12.0 * (k as f64 / 8.0).powi(2)).min(30.0) / 10.0)).sum();
        assert_relative_eq!(cfg.beam_integration_db(), 10.0 * direct.log10(), epsilon = 1e-9);
        assert!((cfg.beam_integration_db() - 7.80).abs() < 0.01);
    }

    #[test]
    fn peak_gain_is_two_antennas() {
        let cfg = ArrayConfig::<f64>::default();
        assert_relative_eq!(antenna_gain(0.0, &cfg), 10f64.powf(5.2), max_relative = 1e-12);
    }

    #[test]
    fn hpbw_edge_is_minus_three_db_per_antenna() {
        let pattern = ArrayConfig::<f64>::default().pattern();
        assert_relative_eq!(pattern.per_antenna_gain_dbi(4.0), 23.0, epsilon = 1e-12);
        assert_relative_eq!(pattern.per_antenna_gain_dbi(-4.0), 23.0, epsilon = 1e-12);
        let ratio = pattern.gain(4.0) / pattern.peak_gain();
        assert_relative_eq!(ratio, 10f64.powf(-0.6), max_relative = 1e-12);
    }

    #[test]
    fn gain_wraps_at_half_turn() {
        let cfg = ArrayConfig::<f64>::default();
        assert_eq!(antenna_gain(180.0, &cfg), antenna_gain(-180.0, &cfg));
        assert_eq!(antenna_gain(350.0, &cfg), antenna_gain(-10.0, &cfg));
    }

    #[test]
    fn sidelobe_floor_holds() {
        let pattern = ArrayConfig::<f64>::default().pattern();
        assert_relative_eq!(pattern.per_antenna_gain_dbi(90.0), -4.0, epsilon = 1e-12);
    }

    #[test]
    fn array_phase_is_unity_for_integer_round_trip_wavelengths() {
        let cfg = ArrayConfig { radius_m: 0.25, antenna_peak_gain_dbi: 0.0, ..ArrayConfig::<f64>::default() };
        // 2fr/c = 500 cycles
        let f = 500.0 * SPEED_OF_LIGHT / (2.0 * 0.25);
        let mpc = Mpc { amplitude: Complex::new(1.0, 0.0), delay_s: 0.0, angle_deg: 30.0 };
        let a = array_response(&mpc, f, 30.0, &cfg);
        assert_relative_eq!(a.re, 1.0, epsilon = 1e-9);
        assert_relative_eq!(a.im, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn array_phase_is_unity_at_zero_radius_or_broadside() {
        let mut cfg = ArrayConfig { antenna_peak_gain_dbi: 0.0, sidelobe_floor_db: 0.0, ..ArrayConfig::<f64>::default() };
        let mpc = Mpc { amplitude: Complex::new(1.0, 0.0), delay_s: 0.0, angle_deg: 90.0 };
        let a = array_response(&mpc, 300e9, 0.0, &cfg);
        assert_relative_eq!(a.re, 1.0, epsilon = 1e-9);
        assert_relative_eq!(a.im, 0.0, epsilon = 1e-9);
        cfg.radius_m = 0.0;
        for phi in [0.0, 17.0, 123.0] {
            let a = array_response(&mpc, 301.7e9, phi, &cfg);
            assert_relative_eq!(a.arg(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_mpc_set_gives_zero_response() {
        let cfr = synthesize_cfr::<f64>(&[], &unity_config(4), None).unwrap();
        assert!(cfr.as_slice().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn single_boresight_path_is_unity() {
        let cfg = ArrayConfig { sidelobe_floor_db: 0.0, ..unity_config(4) };
        let mpc = Mpc { amplitude: Complex::new(1.0, 0.0), delay_s: 0.0, angle_deg: 2.0 };
        let cfr = synthesize_cfr(&[mpc], &cfg, None).unwrap();
        for z in cfr.column(2) {
            assert_relative_eq!(z.re, 1.0, epsilon = 1e-12);
            assert_relative_eq!(z.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_aliased_delays() {
        let cfg = unity_config(2);
        let mpc = Mpc { amplitude: Complex::new(1.0, 0.0), delay_s: 1e-6, angle_deg: 0.0 };
        assert!(matches!(synthesize_cfr(&[mpc], &cfg, None), Err(Error::DelayOutOfRange { .. })));
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let cfg = unity_config(3);
        let noise = NoiseSpec { power_db: -20.0, seed: 7 };
        let a = synthesize_cfr::<f64>(&[], &cfg, Some(&noise)).unwrap();
        let b = synthesize_cfr::<f64>(&[], &cfg, Some(&noise)).unwrap();
        assert_eq!(a, b);
        let other = NoiseSpec { seed: 8, ..noise };
        assert_ne!(a, synthesize_cfr::<f64>(&[], &cfg, Some(&other)).unwrap());
    }

    #[test]
    fn steering_kernel_matches_direct_sum() {
        let grid = ArrayConfig::<f64>::default().frequency_grid();
        for delta in [0.0, 1.3e-11, -7.77e-10, 4.2e-9] {
            let direct = (0..grid.len).fold(Complex::new(0.0, 0.0), |acc, n| acc + cis_cycles(grid.at(n) * delta));
            let fast = grid.steering_kernel(delta);
            assert_relative_eq!(fast.re, direct.re, epsilon = 1e-6 * grid.len as f64);
            assert_relative_eq!(fast.im, direct.im, epsilon = 1e-6 * grid.len as f64);
        }
    }

    #[test]
    fn f32_instantiation_agrees_with_f64() {
        let c32 = ArrayConfig::<f32>::default();
        let c64 = ArrayConfig::<f64>::default();
        let g32 = antenna_gain(3.0_f32, &c32) as f64;
        let g64 = antenna_gain(3.0_f64, &c64);
        assert_relative_eq!(g32, g64, max_relative = 1e-5);
    }
}
