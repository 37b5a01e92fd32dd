//! Reflection-loss material identification.
//!
//! Reflection loss (RL) is the power reflectance in dB, `−20·log10|R|`.
//! Oblique measurements are mapped to normal incidence by inverting the
//! Fresnel model for a real, lossless permittivity.

use std::io::{Read, Write};

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{fspl_db, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Biological,
    Metal,
    Building,
    Functional,
}

/// Normal-incidence reflection loss of one material at 300 GHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialEntry<T> {
    pub name: String,
    pub category: Category,
    pub rl_min_db: T,
    pub rl_max_db: T,
    pub sample_count: u32,
}

impl<T: Real> MaterialEntry<T> {
    pub fn nominal_rl_db(&self) -> T {
        (self.rl_min_db + self.rl_max_db) * T::lit(0.5)
    }

    /// Zero inside `[rl_min, rl_max]`, otherwise the gap to the nearest bound.
    pub fn distance_db(&self, rl_db: T) -> T {
        if rl_db < self.rl_min_db {
            self.rl_min_db - rl_db
        } else if rl_db > self.rl_max_db {
            rl_db - self.rl_max_db
        } else {
            T::zero()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialDatabase<T> {
    entries: Vec<MaterialEntry<T>>,
}

impl<T: Real> MaterialDatabase<T> {
    pub fn new(entries: Vec<MaterialEntry<T>>) -> Result<Self> {
        for e in &entries {
            if e.name.trim().is_empty() {
                return Err(Error::Database("entry with empty name".into()));
            }
            if !(e.rl_min_db >= T::zero() && e.rl_min_db <= e.rl_max_db && e.rl_max_db.is_finite()) {
                return Err(Error::Database(format!(
                    "`{}`: need 0 <= rl_min_db <= rl_max_db, got {} and {}",
                    e.name, e.rl_min_db, e.rl_max_db
                )));
            }
        }
        let mut names: Vec<String> = entries.iter().map(|e| e.name.to_lowercase()).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Database(format!("duplicate entry `{}`", w[0])));
        }
        Ok(Self { entries })
    }

    /// The published exemplary values at 300 GHz.
    pub fn seed() -> Self {
        let e = |name: &str, category, lo: f64, hi: f64| MaterialEntry {
            name: name.to_string(),
            category,
            rl_min_db: T::lit(lo),
            rl_max_db: T::lit(hi),
            sample_count: 1,
        };
        Self {
            entries: vec![
                e("Metal", Category::Metal, 1.74, 2.87),
                e("Cement", Category::Building, 11.99, 11.99),
                e("Ceramic", Category::Building, 12.25, 12.25),
                e("Fiber cement", Category::Building, 13.24, 13.24),
                e("Cardboard", Category::Functional, 17.00, 17.00),
                e("Wood", Category::Building, 20.56, 20.56),
            ],
        }
    }

    pub fn entries(&self) -> &[MaterialEntry<T>] {
        &self.entries
    }

    /// Case-insensitive lookup by name.
    pub fn get(&self, name: &str) -> Result<&MaterialEntry<T>> {
        self.entries
            .iter()
            .find(|e| e.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::UnknownMaterial(name.to_string()))
    }

    /// Reads `name,category,rl_min_db,rl_max_db,sample_count` records.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self>
    where
        T: for<'de> Deserialize<'de>,
    {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let entries = rdr.deserialize().collect::<std::result::Result<Vec<MaterialEntry<T>>, _>>()?;
        Self::new(entries)
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()>
    where
        T: Serialize,
    {
        let mut wtr = csv::Writer::from_writer(writer);
        for e in &self.entries {
            wtr.serialize(e)?;
        }
        wtr.flush().map_err(|e| Error::Database(e.to_string()))?;
        Ok(())
    }
}

/// TE Fresnel coefficient at the interface from medium 1 into medium 2.
///
/// `cos γ₂` follows from Snell's law; principal square roots throughout, so
/// total internal reflection comes out of the complex arithmetic.
pub fn fresnel_reflection<T: Real>(eta1: Complex<T>, eta2: Complex<T>, gamma1_deg: T) -> Complex<T> {
    let (sin1, cos1) = gamma1_deg.to_radians().sin_cos();
    let one = Complex::new(T::one(), T::zero());
    let cos2 = (one - eta1 / eta2 * (sin1 * sin1)).sqrt();
    let a = eta1.sqrt() * cos1;
    let b = eta2.sqrt() * cos2;
    (a - b) / (a + b)
}

/// `−20·log10|R|`. Returns `+∞` for `R = 0`.
pub fn reflection_loss_db<T: Real>(r: Complex<T>) -> Result<T> {
    let mag = r.norm();
    if !mag.is_finite() {
        return Err(Error::NonFinite);
    }
    if mag == T::zero() {
        return Ok(T::infinity());
    }
    if mag > T::one() + T::epsilon() * T::lit(64.0) {
        return Err(Error::NonPhysicalReflection(mag.as_f64()));
    }
    Ok((-T::lit(20.0) * mag.min(T::one()).log10()).max(T::zero()))
}

fn rl_from_air<T: Real>(eta2: T, gamma_deg: T) -> T {
    let r = fresnel_reflection(Complex::new(T::one(), T::zero()), Complex::new(eta2, T::zero()), gamma_deg);
    -T::lit(20.0) * r.norm().log10()
}

/// Maps a reflection loss measured at `gamma1_deg` to normal incidence.
///
/// The relative permittivity is recovered by bisection over `(1, 1e8]`
/// (parametrised as `ln(η−1)`), where the loss is strictly decreasing.
pub fn calibrate_to_normal<T: Real>(rl_db: T, gamma1_deg: T) -> Result<T> {
    let not_invertible = || Error::NotInvertible { rl_db: rl_db.as_f64(), gamma_deg: gamma1_deg.as_f64() };
    if !(rl_db >= T::zero()) || !rl_db.is_finite() || !gamma1_deg.is_finite() {
        return Err(not_invertible());
    }
    if gamma1_deg == T::zero() || rl_db == T::zero() {
        return Ok(rl_db);
    }
    if !(gamma1_deg.abs() < T::lit(90.0)) {
        return Err(not_invertible());
    }
    let mut lo = T::lit(-30.0); // η − 1 = e^-30
    let mut hi = T::lit(1e8 - 1.0).ln();
    let at = |u: T| rl_from_air(T::one() + u.exp(), gamma1_deg);
    if rl_db < at(hi) || rl_db > at(lo) {
        return Err(not_invertible());
    }
    for _ in 0..200 {
        let mid = (lo + hi) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if at(mid) > rl_db {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let eta = T::one() + ((lo + hi) * T::lit(0.5)).exp();
    Ok(rl_from_air(eta, T::zero()))
}

/// `RL = P_loss − FSPL(τ)`, with `P_loss` the de-embedded path loss in dB.
pub fn mpc_reflection_loss<T: Real>(power_loss_db: T, tau_s: T, f_hz: T) -> Result<T> {
    if !(tau_s > T::zero()) {
        return Err(Error::NonPositiveDelay(tau_s.as_f64()));
    }
    Ok(power_loss_db - fspl_db(f_hz, tau_s))
}

/// Per-region reflection losses split into specular and diffuse members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReflectionProfile<T> {
    pub region_label: u32,
    pub rl_db: Vec<T>,
    pub min_rl_db: T,
    /// Indices into `rl_db`.
    pub specular: Vec<usize>,
    pub diffuse: Vec<usize>,
}

/// Members within `margin_db` of the region minimum are specular.
pub fn classify_region<T: Real>(region_label: u32, rl_db: &[T], margin_db: T) -> Result<RegionReflectionProfile<T>> {
    if rl_db.is_empty() {
        return Err(Error::Empty("reflection-loss list"));
    }
    let min = rl_db.iter().copied().fold(T::infinity(), T::min);
    let (specular, diffuse): (Vec<usize>, Vec<usize>) = (0..rl_db.len()).partition(|&k| rl_db[k] <= min + margin_db);
    Ok(RegionReflectionProfile { region_label, rl_db: rl_db.to_vec(), min_rl_db: min, specular, diffuse })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialMatch<T> {
    pub name: String,
    pub category: Category,
    pub distance_db: T,
}

/// All entries ranked by interval distance to `min_rl_db`, ties by name.
pub fn identify_material<T: Real>(min_rl_db: T, db: &MaterialDatabase<T>) -> Vec<MaterialMatch<T>> {
    let mut out: Vec<MaterialMatch<T>> = db
        .entries()
        .iter()
        .map(|e| MaterialMatch { name: e.name.clone(), category: e.category, distance_db: e.distance_db(min_rl_db) })
        .collect();
    out.sort_by(|a, b| a.distance_db.partial_cmp(&b.distance_db).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.name.cmp(&b.name)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn c(x: f64) -> Complex<f64> {
        Complex::new(x, 0.0)
    }

    #[test]
    fn identical_media_do_not_reflect() {
        let r = fresnel_reflection(Complex::new(2.5, -0.3), Complex::new(2.5, -0.3), 33.0);
        assert!(r.norm() < 1e-15);
        assert_eq!(reflection_loss_db(r * 0.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn conductor_limit() {
        let r = fresnel_reflection(c(1.0), c(1e12), 0.0);
        assert!((r.norm() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn quarter_permittivity_at_normal_incidence() {
        let r = fresnel_reflection(c(1.0), c(4.0), 0.0);
        assert_relative_eq!(r.re, -1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(r.im, 0.0, epsilon = 1e-15);
        let rl = reflection_loss_db(r).unwrap();
        assert_relative_eq!(rl, -20.0 * (1.0f64 / 3.0).log10(), epsilon = 1e-12);
        assert!((rl - 9.54).abs() < 0.005);
    }

    #[test]
    fn unit_reflection_is_lossless_and_excess_is_rejected() {
        assert_eq!(reflection_loss_db(c(1.0)).unwrap(), 0.0);
        assert_eq!(reflection_loss_db(Complex::new(0.0, -1.0)).unwrap(), 0.0);
        assert!(matches!(reflection_loss_db(c(1.01)), Err(Error::NonPhysicalReflection(_))));
    }

    #[test]
    fn small_angle_expansion_agrees() {
        // Second-order expansion of the TE coefficient for n₁ = 1, n₂ = 2.
        let g = 10f64.to_radians();
        let n = 2.0;
        let num = (1.0 - n) - g * g / 2.0 + g * g / (2.0 * n);
        let den = (1.0 + n) - g * g / 2.0 - g * g / (2.0 * n);
        let approx = -20.0 * (num / den).abs().log10();
        let direct = reflection_loss_db(fresnel_reflection(c(1.0), c(4.0), 10.0)).unwrap();
        assert!((approx - direct).abs() < 0.01, "{approx} vs {direct}");
    }

    #[test]
    fn total_internal_reflection_is_unit_magnitude() {
        let r = fresnel_reflection(c(4.0), c(1.0), 60.0);
        assert_relative_eq!(r.norm(), 1.0, epsilon = 1e-12);
        assert!(reflection_loss_db(r).unwrap() < 1e-9);
    }

    #[test]
    fn calibration_fixed_points() {
        assert_eq!(calibrate_to_normal(7.3, 0.0).unwrap(), 7.3);
        assert_eq!(calibrate_to_normal(0.0, 10.0).unwrap(), 0.0);
        assert!(calibrate_to_normal(-1.0, 10.0).is_err());
        assert!(matches!(calibrate_to_normal(1e-9, 10.0), Err(Error::NotInvertible { .. })));
    }

    #[test]
    fn calibration_round_trip_for_quarter_permittivity() {
        let rl10 = reflection_loss_db(fresnel_reflection(c(1.0), c(4.0), 10.0)).unwrap();
        let rl0 = calibrate_to_normal(rl10, 10.0).unwrap();
        assert!((rl0 - 20.0 * 3f64.log10()).abs() < 0.01);
    }

    #[test]
    fn fspl_anchor_values() {
        let f = 300e9;
        let rl = mpc_reflection_loss(42.0, 1.0 / (4.0 * std::f64::consts::PI * f), f).unwrap();
        assert_relative_eq!(rl, 42.0, epsilon = 1e-9);
        let fspl = 100.0 - mpc_reflection_loss(100.0, 10e-9, f).unwrap();
        assert_relative_eq!(fspl, 20.0 * (4.0 * std::f64::consts::PI * 3000.0).log10(), epsilon = 1e-9);
        assert!((fspl - 91.53).abs() < 0.005);
        assert!(mpc_reflection_loss(1.0, 0.0, f).is_err());
    }

    #[test]
    fn classification_examples() {
        let all = classify_region(1, &[5.0, 5.0, 5.0], 3.0).unwrap();
        assert_eq!(all.specular, vec![0, 1, 2]);
        assert!(all.diffuse.is_empty());
        let one = classify_region(2, &[15.0, 2.5, 18.0, 16.2], 3.0).unwrap();
        assert_eq!(one.specular, vec![1]);
        assert_eq!(one.diffuse, vec![0, 2, 3]);
        assert_eq!(one.min_rl_db, 2.5);
        assert!(classify_region::<f64>(3, &[], 3.0).is_err());
    }

    #[test]
    fn identification_anchors() {
        let db = MaterialDatabase::<f64>::seed();
        assert_eq!(identify_material(11.40, &db)[0].name, "Cement");
        let metal = &identify_material(2.50, &db)[0];
        assert_eq!((metal.name.as_str(), metal.distance_db), ("Metal", 0.0));
        let wood = &identify_material(20.56, &db)[0];
        assert_eq!((wood.name.as_str(), wood.distance_db), ("Wood", 0.0));
    }

    #[test]
    fn ties_break_by_name() {
        let entry = |n: &str| MaterialEntry { name: n.into(), category: Category::Building, rl_min_db: 10.0, rl_max_db: 10.0, sample_count: 1 };
        let db = MaterialDatabase::new(vec![entry("b"), entry("a")]).unwrap();
        let m = identify_material(12.0, &db);
        assert_eq!(m[0].name, "a");
        assert_eq!(m[1].name, "b");
    }

    #[test]
    fn csv_round_trip() {
        let db = MaterialDatabase::<f64>::seed();
        let mut buf = Vec::new();
        db.to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("name,category,rl_min_db,rl_max_db,sample_count\n"));
        assert_eq!(MaterialDatabase::<f64>::from_csv(buf.as_slice()).unwrap(), db);
    }

    #[test]
    fn database_rejects_inverted_ranges() {
        let csv = "name,category,rl_min_db,rl_max_db,sample_count\nx,metal,3.0,2.0,4\n";
        assert!(MaterialDatabase::<f64>::from_csv(csv.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn loss_strictly_decreases_with_permittivity(
            eta in 1.01f64..1e4, factor in 1.01f64..10.0, gamma in 0.0f64..80.0
        ) {
            prop_assert!(rl_from_air(eta * factor, gamma) < rl_from_air(eta, gamma));
        }

        #[test]
        fn calibration_inverts_the_forward_model(eta in 1.5f64..100.0, gamma in 1.0f64..60.0) {
            let forward = rl_from_air(eta, gamma);
            let normal = calibrate_to_normal(forward, gamma).unwrap();
            prop_assert!((normal - rl_from_air(eta, 0.0)).abs() < 0.01);
        }

        #[test]
        fn top_match_is_stable_under_small_perturbations(rl in 0.0f64..30.0, frac in -0.49f64..0.49) {
            let db = MaterialDatabase::<f64>::seed();
            let ranked = identify_material(rl, &db);
            let gap = ranked[1].distance_db - ranked[0].distance_db;
            let moved = identify_material(rl + frac * gap, &db);
            prop_assert_eq!(&moved[0].name, &ranked[0].name);
        }
    }
}
