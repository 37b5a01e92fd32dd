//! Delay-domain transform and the power-angle-delay profile.

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelFrequencyResponse;
use crate::error::{Error, Result};
use crate::scalar::{amplitude_to_db, Real};

/// Frequency-domain taper applied before the inverse transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Taper {
    #[default]
    Rectangular,
    /// Hann window scaled to unit mean.
    Hann,
}

impl Taper {
    pub fn weights<T: Real>(&self, n: usize) -> Vec<T> {
        match self {
            Taper::Rectangular => vec![T::one(); n],
            Taper::Hann => {
                if n < 2 {
                    return vec![T::one(); n];
                }
                let denom = T::from_usize_lossy(n - 1);
                let raw: Vec<T> = (0..n)
                    .map(|k| T::lit(0.5) * (T::one() - (T::TAU() * T::from_usize_lossy(k) / denom).cos()))
                    .collect();
                let mean = raw.iter().copied().fold(T::zero(), |a, b| a + b) / T::from_usize_lossy(n);
                raw.into_iter().map(|w| w / mean).collect()
            }
        }
    }
}

/// Complex impulse response, one delay profile per rotation angle.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImpulseResponse<T> {
    /// Column-major: `angle_idx * n_delay + delay_idx`.
    values: Vec<Complex<T>>,
    pub delay_grid_s: Vec<T>,
    pub angle_grid_deg: Vec<T>,
}

impl<T: Real> ChannelImpulseResponse<T> {
    pub fn n_delay(&self) -> usize {
        self.delay_grid_s.len()
    }

    pub fn n_angles(&self) -> usize {
        self.angle_grid_deg.len()
    }

    pub fn column(&self, j: usize) -> &[Complex<T>] {
        let n = self.n_delay();
        &self.values[j * n..(j + 1) * n]
    }

    pub fn get(&self, delay_idx: usize, angle_idx: usize) -> Complex<T> {
        self.values[angle_idx * self.n_delay() + delay_idx]
    }
}

/// Per-column inverse DFT with `1/N` scaling.
pub fn cfr_to_cir<T: Real>(cfr: &ChannelFrequencyResponse<T>, taper: Taper) -> ChannelImpulseResponse<T> {
    let n = cfr.n_freq();
    let fft = FftPlanner::<T>::new().plan_fft_inverse(n);
    let weights = taper.weights::<T>(n);
    let scale = T::one() / T::from_usize_lossy(n);
    let values: Vec<Complex<T>> = (0..cfr.n_angles())
        .into_par_iter()
        .flat_map_iter(|j| {
            let mut buf: Vec<Complex<T>> =
                cfr.column(j).iter().zip(&weights).map(|(h, &w)| h * (w * scale)).collect();
            fft.process(&mut buf);
            buf
        })
        .collect();
    ChannelImpulseResponse {
        values,
        delay_grid_s: cfr.config().delay_grid_s(),
        angle_grid_deg: cfr.config().rotation_angles_deg.clone(),
    }
}

/// Power-angle-delay profile in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct Padp<T> {
    /// Row-major `n_delay × n_angles`: `delay_idx * n_angles + angle_idx`.
    pub power_db: Vec<T>,
    pub delay_grid_s: Vec<T>,
    pub angle_grid_deg: Vec<T>,
    pub noise_floor_db: T,
}

impl<T: Real> Padp<T> {
    pub fn new(power_db: Vec<T>, delay_grid_s: Vec<T>, angle_grid_deg: Vec<T>) -> Result<Self> {
        if power_db.len() != delay_grid_s.len() * angle_grid_deg.len() {
            return Err(Error::ShapeMismatch(format!(
                "PADP has {} cells, expected {} x {}",
                power_db.len(),
                delay_grid_s.len(),
                angle_grid_deg.len()
            )));
        }
        if power_db.is_empty() {
            return Err(Error::Empty("PADP"));
        }
        let noise_floor_db = estimate_noise_floor(&power_db);
        Ok(Self { power_db, delay_grid_s, angle_grid_deg, noise_floor_db })
    }

    pub fn n_delay(&self) -> usize {
        self.delay_grid_s.len()
    }

    pub fn n_angles(&self) -> usize {
        self.angle_grid_deg.len()
    }

    pub fn get(&self, delay_idx: usize, angle_idx: usize) -> T {
        self.power_db[delay_idx * self.n_angles() + angle_idx]
    }

    pub fn delay_step_s(&self) -> T {
        if self.delay_grid_s.len() < 2 {
            T::zero()
        } else {
            self.delay_grid_s[1] - self.delay_grid_s[0]
        }
    }
}

/// `20·log10|h|` per cell, with the noise floor attached.
pub fn compute_padp<T: Real>(cir: &ChannelImpulseResponse<T>) -> Padp<T> {
    let (nd, na) = (cir.n_delay(), cir.n_angles());
    let mut power_db = vec![T::zero(); nd * na];
    for j in 0..na {
        for (i, h) in cir.column(j).iter().enumerate() {
            power_db[i * na + j] = amplitude_to_db(h.norm());
        }
    }
    Padp::new(power_db, cir.delay_grid_s.clone(), cir.angle_grid_deg.clone())
        .expect("CIR dimensions are consistent")
}

/// Median of the lowest half of the cells (the 25th percentile overall).
pub fn lower_half_median<T: Real>(cells: &[T]) -> T {
    assert!(!cells.is_empty(), "noise floor of an empty PADP");
    let mut v = cells.to_vec();
    let half = (v.len() / 2).max(1);
    let k = (half - 1) / 2;
    let (_, nth, _) = v.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    *nth
}

/// `10·log10(1/ln(4/3))`: mean over 25th percentile of an exponential
/// (Rayleigh-amplitude) power distribution.
pub const RAYLEIGH_QUARTILE_OFFSET_DB: f64 = 5.410_872_012_930_47;

/// Mean noise power in dB, from the lower-half median of all cells.
///
/// Noise-only cells have exponentially distributed power, whose 25th
/// percentile sits [`RAYLEIGH_QUARTILE_OFFSET_DB`] below the mean; the offset
/// is added back so the floor reports the mean noise level.
pub fn estimate_noise_floor<T: Real>(cells: &[T]) -> T {
    lower_half_median(cells) + T::lit(RAYLEIGH_QUARTILE_OFFSET_DB)
}
