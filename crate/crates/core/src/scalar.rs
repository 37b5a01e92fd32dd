//! Scalar abstraction shared by every numeric module.
//!
//! The core is written once against [`Real`] and instantiated for `f32` and
//! `f64`. Unit conversions between linear and decibel quantities live here as
//! well so every module agrees on the conventions.

use std::fmt::{Debug, Display};

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Floating-point scalar the numeric core is generic over (`f32` or `f64`).
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + rustfft::FftNum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }

    #[inline]
    fn speed_of_light() -> Self {
        Self::lit(SPEED_OF_LIGHT)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `e^{j2πx}` for a phase given in cycles.
///
/// The integer part is removed before scaling so large cycle counts (f·τ is
/// in the thousands at 300 GHz) keep full precision in `f32`.
#[inline]
pub fn cis_cycles<T: Real>(cycles: T) -> Complex<T> {
    let frac = cycles - cycles.round();
    let phase = T::TAU() * frac;
    Complex::new(phase.cos(), phase.sin())
}

#[inline]
pub fn power_to_db<T: Real>(power: T) -> T {
    T::lit(10.0) * power.log10()
}

#[inline]
pub fn amplitude_to_db<T: Real>(amplitude: T) -> T {
    T::lit(20.0) * amplitude.log10()
}

#[inline]
pub fn db_to_power<T: Real>(db: T) -> T {
    T::lit(10.0).powf(db / T::lit(10.0))
}

#[inline]
pub fn db_to_amplitude<T: Real>(db: T) -> T {
    T::lit(10.0).powf(db / T::lit(20.0))
}

/// Wraps an angle in degrees to `[-180, 180)`.
#[inline]
pub fn wrap_deg_180<T: Real>(deg: T) -> T {
    let full = T::lit(360.0);
    let half = T::lit(180.0);
    let mut w = (deg + half) % full;
    if w < T::zero() {
        w += full;
    }
    w - half
}

/// Wraps an angle in degrees to `[0, 360)`.
#[inline]
pub fn wrap_deg_360<T: Real>(deg: T) -> T {
    let full = T::lit(360.0);
    let mut w = deg % full;
    if w < T::zero() {
        w += full;
    }
    if w >= full {
        w -= full;
    }
    w
}

/// Free-space path loss `20·log10(4π f τ)` in dB for total delay `tau_s`.
#[inline]
pub fn fspl_db<T: Real>(freq_hz: T, tau_s: T) -> T {
    amplitude_to_db(T::lit(4.0) * T::PI() * freq_hz * tau_s)
}
