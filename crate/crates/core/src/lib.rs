//! Environment reconstruction and material identification from monostatic
//! wideband delay-angle scans.
//!
//! The processing chain is
//! [`channel`] → [`padp`] → [`segmentation`] → [`sage`] → [`geometry`] →
//! [`materials`], with [`scene`] providing synthetic measurements and ground
//! truth. Every numeric type is generic over [`Real`] (`f32` or `f64`); the
//! aliases below pin the common instantiations.

pub mod baseline;
pub mod channel;
pub mod error;
pub mod geometry;
pub mod materials;
pub mod padp;
pub mod sage;
pub mod scalar;
pub mod scene;
pub mod segmentation;

pub use error::{Error, Result};
pub use scalar::{Real, SPEED_OF_LIGHT};

pub type ArrayConfig64 = channel::ArrayConfig<f64>;
pub type ArrayConfig32 = channel::ArrayConfig<f32>;
pub type Mpc64 = channel::Mpc<f64>;
pub type Mpc32 = channel::Mpc<f32>;
pub type Cfr64 = channel::ChannelFrequencyResponse<f64>;
pub type Cfr32 = channel::ChannelFrequencyResponse<f32>;
pub type Scene64 = scene::Scene<f64>;
pub type Scene32 = scene::Scene<f32>;
pub type GroundTruth64 = scene::GroundTruth<f64>;
pub type Padp64 = padp::Padp<f64>;
pub type Padp32 = padp::Padp<f32>;
pub type Region64 = segmentation::Region<f64>;
pub type Region32 = segmentation::Region<f32>;
pub type ColumnEstimate64 = sage::ColumnEstimate<f64>;
pub type Trajectory64 = sage::Trajectory<f64>;
pub type DeembeddedMpc64 = sage::DeembeddedMpc<f64>;
pub type StructureTemplate64 = geometry::StructureTemplate<f64>;
pub type FitResult64 = geometry::FitResult<f64>;
pub type MapPoint64 = geometry::MapPoint<f64>;
pub type MaterialDatabase64 = materials::MaterialDatabase<f64>;
