//! Single-bounce scene simulator.
//!
//! Walls are 2-D segments. For every TRx and rotation angle the boresight ray
//! leaves the antenna (on the circle of radius `r`) and the first wall it hits
//! returns one backscatter path whose power is free-space loss plus the wall
//! material's reflection loss plus an optional roughness term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use num_complex::Complex;

use crate::channel::{ArrayConfig, Mpc};
use crate::error::{Error, Result};
use crate::materials::MaterialDatabase;
use crate::scalar::{db_to_amplitude, fspl_db, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Bearing of `other` seen from `self`, degrees in `[0, 360)`.
    pub fn bearing_deg(&self, other: &Self) -> T {
        crate::scalar::wrap_deg_360((other.y - self.y).atan2(other.x - self.x).to_degrees())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct Wall<T> {
    pub start: Point2<T>,
    pub end: Point2<T>,
    pub material: String,
    /// Constant extra loss on every return from this wall, dB.
    #[serde(default = "zero")]
    pub backscatter_extra_db: T,
    /// Per-hit extra loss drawn uniformly from `[0, spread]` dB.
    #[serde(default = "zero")]
    pub roughness_spread_db: T,
}

fn zero<T: Real>() -> T {
    T::zero()
}

impl<T: Real> Wall<T> {
    pub fn length(&self) -> T {
        self.start.distance(&self.end)
    }

    /// Euclidean distance from `p` to the segment.
    pub fn distance_to(&self, p: &Point2<T>) -> T {
        point_segment_distance(p, &self.start, &self.end)
    }
}

/// Distance from `p` to the segment `a`–`b`.
pub fn point_segment_distance<T: Real>(p: &Point2<T>, a: &Point2<T>, b: &Point2<T>) -> T {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == T::zero() {
        return p.distance(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).max(T::zero()).min(T::one());
    p.distance(&Point2::new(a.x + t * dx, a.y + t * dy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct Scene<T> {
    pub walls: Vec<Wall<T>>,
    pub trx_positions: Vec<Point2<T>>,
    /// Seed for the per-hit roughness draws.
    #[serde(default)]
    pub seed: u64,
}

impl<T: Real> Scene<T> {
    pub fn validate(&self) -> Result<()> {
        let eps = T::lit(1e-9);
        for (k, w) in self.walls.iter().enumerate() {
            if !(w.length() > eps) {
                return Err(Error::InvalidScene(format!("wall {k} has zero length")));
            }
            if w.roughness_spread_db < T::zero() {
                return Err(Error::InvalidScene(format!("wall {k} has negative roughness spread")));
            }
        }
        for (t, p) in self.trx_positions.iter().enumerate() {
            if let Some(k) = self.walls.iter().position(|w| w.distance_to(p) <= eps) {
                return Err(Error::InvalidScene(format!("TRx {t} lies on wall {k}")));
            }
        }
        Ok(())
    }

    pub fn segments(&self) -> Vec<(Point2<T>, Point2<T>)> {
        self.walls.iter().map(|w| (w.start, w.end)).collect()
    }
}

/// First wall intersected by a boresight ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoresightHit<T> {
    pub wall: usize,
    pub point: Point2<T>,
    /// Antenna-to-hit distance.
    pub distance_m: T,
}

/// Casts the ray leaving the antenna at `trx + r·(cos φ, sin φ)` along `φ`.
pub fn trace_boresight<T: Real>(
    scene: &Scene<T>,
    trx: Point2<T>,
    phi_deg: T,
    config: &ArrayConfig<T>,
) -> Option<BoresightHit<T>> {
    let (s, c) = phi_deg.to_radians().sin_cos();
    let origin = Point2::new(trx.x + config.radius_m * c, trx.y + config.radius_m * s);
    let eps = T::lit(1e-12);
    let mut best: Option<BoresightHit<T>> = None;
    for (k, w) in scene.walls.iter().enumerate() {
        let (ex, ey) = (w.end.x - w.start.x, w.end.y - w.start.y);
        let denom = c * ey - s * ex;
        if denom.abs() < eps {
            continue;
        }
        let (wx, wy) = (w.start.x - origin.x, w.start.y - origin.y);
        let t = (wx * ey - wy * ex) / denom;
        let u = (wx * s - wy * c) / denom;
        if t > eps && u >= -eps && u <= T::one() + eps && best.is_none_or(|b| t < b.distance_m) {
            best = Some(BoresightHit {
                wall: k,
                point: Point2::new(origin.x + t * c, origin.y + t * s),
                distance_m: t,
            });
        }
    }
    best
}

/// One ground-truth backscatter path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthPath<T> {
    pub trx: usize,
    pub column: usize,
    pub phi_deg: T,
    /// Round-trip delay from the antenna, `2·distance/c`.
    pub tau_s: T,
    /// Equal to `phi_deg` (boresight return).
    pub theta_deg: T,
    /// Path gain before antenna gain, dB.
    pub power_db: T,
    pub wall: usize,
    pub hit: Point2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth<T> {
    pub paths: Vec<GroundTruthPath<T>>,
    pub n_trx: usize,
}

impl<T: Real> GroundTruth<T> {
    pub fn for_trx(&self, trx: usize) -> impl Iterator<Item = &GroundTruthPath<T>> {
        self.paths.iter().filter(move |p| p.trx == trx)
    }

    /// Paths of one TRx in the channel model's convention (delays referenced
    /// to the array centre, real positive amplitude).
    pub fn mpcs(&self, trx: usize, config: &ArrayConfig<T>) -> Vec<Mpc<T>> {
        let offset = T::lit(2.0) * config.radius_m / T::speed_of_light();
        self.for_trx(trx)
            .map(|p| Mpc {
                amplitude: Complex::new(db_to_amplitude(p.power_db), T::zero()),
                delay_s: p.tau_s + offset,
                angle_deg: p.theta_deg,
            })
            .collect()
    }
}

fn roughness_draw(seed: u64, wall: usize, trx: usize, column: usize) -> f64 {
    let key = seed
        ^ (wall as u64).wrapping_mul(0xA24B_AED4_963E_E407)
        ^ (trx as u64).wrapping_mul(0x9FB2_1C65_1E98_DF25)
        ^ (column as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    ChaCha8Rng::seed_from_u64(key).random::<f64>()
}

/// One boresight return per (TRx, rotation angle) that hits a wall.
pub fn generate_ground_truth<T: Real>(
    scene: &Scene<T>,
    config: &ArrayConfig<T>,
    db: &MaterialDatabase<T>,
) -> Result<GroundTruth<T>> {
    scene.validate()?;
    config.validate()?;
    let wall_rl: Vec<T> = scene
        .walls
        .iter()
        .map(|w| db.get(&w.material).map(|e| e.nominal_rl_db()))
        .collect::<Result<_>>()?;
    let freq = config.center_freq_hz();
    let n_angles = config.n_angles();
    let c = T::speed_of_light();

    let paths: Vec<GroundTruthPath<T>> = (0..scene.trx_positions.len() * n_angles)
        .into_par_iter()
        .filter_map(|idx| {
            let (trx, column) = (idx / n_angles, idx % n_angles);
            let phi = config.rotation_angles_deg[column];
            let hit = trace_boresight(scene, scene.trx_positions[trx], phi, config)?;
            let wall = &scene.walls[hit.wall];
            let tau = T::lit(2.0) * hit.distance_m / c;
            let rough = wall.roughness_spread_db * T::lit(roughness_draw(scene.seed, hit.wall, trx, column));
            let power_db = -fspl_db(freq, tau) - wall_rl[hit.wall] - wall.backscatter_extra_db - rough;
            Some(GroundTruthPath {
                trx,
                column,
                phi_deg: phi,
                tau_s: tau,
                theta_deg: phi,
                power_db,
                wall: hit.wall,
                hit: hit.point,
            })
        })
        .collect();

    Ok(GroundTruth { paths, n_trx: scene.trx_positions.len() })
}
