//! Structure templates, least-squares template fitting, point mapping,
//! sliding-window refinement and ranging-error metrics.
//!
//! Templates are written in the range domain `ρ = r + c·τ/2` (distance from
//! the array centre), where a flat wall at perpendicular distance `d` and
//! normal bearing `θ₀` reads `ρ(θ) = d / cos(θ − θ₀)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sage::DeembeddedMpc;
use crate::scalar::{wrap_deg_180, Real};
use crate::scene::{point_segment_distance, Point2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    FlatWall,
    InnerCorner,
    OuterCorner,
}

impl StructureKind {
    pub const ALL: [StructureKind; 3] = [Self::FlatWall, Self::InnerCorner, Self::OuterCorner];

    pub fn name(&self) -> &'static str {
        match self {
            Self::FlatWall => "flat_wall",
            Self::InnerCorner => "inner_corner",
            Self::OuterCorner => "outer_corner",
        }
    }

    /// Open support interval of `θ − θ₀` in degrees.
    pub fn support_deg(&self) -> (f64, f64) {
        match self {
            Self::FlatWall => (-90.0, 90.0),
            Self::InnerCorner => (-90.0, 180.0),
            Self::OuterCorner => (0.0, 90.0),
        }
    }
}

/// `d1_m` belongs to the wall whose normal is at `θ₀ + 90°` (the `sin`
/// branch), `d2_m` to the wall whose normal is at `θ₀` (the `cos` branch). A
/// flat wall only uses `d2_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureTemplate<T> {
    pub kind: StructureKind,
    pub d1_m: T,
    pub d2_m: T,
    pub theta0_deg: T,
    pub radius_m: T,
}

impl<T: Real> StructureTemplate<T> {
    pub fn flat_wall(d_m: T, theta0_deg: T, radius_m: T) -> Self {
        Self { kind: StructureKind::FlatWall, d1_m: d_m, d2_m: d_m, theta0_deg, radius_m }
    }

    pub fn inner_corner(d1_m: T, d2_m: T, theta0_deg: T, radius_m: T) -> Self {
        Self { kind: StructureKind::InnerCorner, d1_m, d2_m, theta0_deg, radius_m }
    }

    pub fn outer_corner(d1_m: T, d2_m: T, theta0_deg: T, radius_m: T) -> Self {
        Self { kind: StructureKind::OuterCorner, d1_m, d2_m, theta0_deg, radius_m }
    }

    /// Bearing at which the two corner branches meet.
    pub fn crossover_deg(&self) -> T {
        self.theta0_deg + self.d1_m.atan2(self.d2_m).to_degrees()
    }

    /// Whether the `d1` wall is the one seen at `theta_deg`.
    pub fn on_sin_branch(&self, theta_deg: T) -> bool {
        if self.kind == StructureKind::FlatWall {
            return false;
        }
        let rad = wrap_deg_180(theta_deg - self.theta0_deg).to_radians();
        let (s, c) = rad.sin_cos();
        let eps = T::lit(1e-12);
        match (c > eps, s > eps) {
            (true, true) => {
                let (a, b) = (self.d2_m / c, self.d1_m / s);
                if self.kind == StructureKind::InnerCorner { b < a } else { b > a }
            }
            (false, true) => true,
            _ => false,
        }
    }

    /// Range from the array centre, `r + c·τ/2`.
    pub fn range(&self, theta_deg: T) -> Result<T> {
        let rel = wrap_deg_180(theta_deg - self.theta0_deg);
        let (lo, hi) = self.kind.support_deg();
        // Treat −180 as 180 for the inner-corner support.
        let rel = if self.kind == StructureKind::InnerCorner && rel <= T::lit(-90.0) { rel + T::lit(360.0) } else { rel };
        if !(rel > T::lit(lo) && rel < T::lit(hi)) {
            return Err(Error::OutsideSupport { theta_deg: theta_deg.as_f64() });
        }
        let (sin, cos) = rel.to_radians().sin_cos();
        let rho = branch_range(self.kind, self.d1_m, self.d2_m, cos, sin)
            .ok_or(Error::OutsideSupport { theta_deg: theta_deg.as_f64() })?;
        Ok(rho)
    }
}

fn branch_range<T: Real>(kind: StructureKind, d1: T, d2: T, cos: T, sin: T) -> Option<T> {
    let eps = T::lit(1e-12);
    let a = (cos > eps).then(|| d2 / cos);
    let b = (sin > eps).then(|| d1 / sin);
    match (kind, a, b) {
        (StructureKind::FlatWall, Some(a), _) => Some(a),
        (StructureKind::InnerCorner, Some(a), Some(b)) => Some(a.min(b)),
        (StructureKind::InnerCorner, Some(a), None) | (StructureKind::InnerCorner, None, Some(a)) => Some(a),
        (StructureKind::OuterCorner, Some(a), Some(b)) => Some(a.max(b)),
        _ => None,
    }
}

/// Round-trip delay referenced to the antenna aperture, `(2/c)(ρ(θ) − r)`.
pub fn template_delay<T: Real>(template: &StructureTemplate<T>, theta_deg: T) -> Result<T> {
    let rho = template.range(theta_deg)?;
    Ok(T::lit(2.0) * (rho - template.radius_m) / T::speed_of_light())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<T> {
    pub template: StructureTemplate<T>,
    pub rmse_s: T,
    /// `τ_meas − τ_model` per input point.
    pub residuals_s: Vec<T>,
    /// Best RMSE reached by every kind that was tried.
    pub per_kind_rmse_s: Vec<(StructureKind, T)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub distance_step_m: f64,
    pub angle_step_deg: f64,
    pub final_distance_step_m: f64,
    pub final_angle_step_deg: f64,
    /// Half-width of the distance grid around the data-implied distance.
    pub search_halfwidth_m: f64,
    /// Corners must reach an RMSE below `(1 − gain) ×` the flat-wall RMSE.
    pub corner_min_gain: f64,
    /// ... and improve on it by at least this much.
    pub corner_min_improvement_s: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            distance_step_m: 0.01,
            angle_step_deg: 1.0,
            final_distance_step_m: 1e-4,
            final_angle_step_deg: 0.01,
            search_halfwidth_m: 0.3,
            corner_min_gain: 0.1,
            corner_min_improvement_s: 1e-12,
        }
    }
}

pub const MIN_FIT_POINTS: usize = 5;

struct Problem<T> {
    theta: Vec<T>,
    rho: Vec<T>,
    radius: T,
}

impl<T: Real> Problem<T> {
    /// Sum of squared range residuals, giving up once `cap` is exceeded.
    fn sse(&self, t: &StructureTemplate<T>, cap: T) -> T {
        let mut acc = T::zero();
        for (&th, &rho) in self.theta.iter().zip(&self.rho) {
            match t.range(th) {
                Ok(m) => {
                    let e = rho - m;
                    acc += e * e;
                }
                Err(_) => return T::infinity(),
            }
            if acc > cap {
                return acc;
            }
        }
        acc
    }
}

/// Grid search then pattern-search refinement, one template per kind.
///
/// Orientation is scanned in whole degrees and distances on a centimetre
/// grid spanning ±0.3 m around the distance the data imply for that
/// orientation (the least-squares distance for a wall, the extreme
/// projected range for a corner branch); the best grid point is refined by
/// coordinate steps that are halved until they reach 0.1 mm / 0.01°. The
/// returned kind has the lowest RMSE, except that a corner only replaces a
/// flat wall when it improves the RMSE by the configured relative margin.
pub fn fit_structure<T: Real>(
    points: &[(T, T)],
    kinds: &[StructureKind],
    radius_m: T,
    settings: &FitSettings,
) -> Result<FitResult<T>> {
    if points.len() < MIN_FIT_POINTS {
        return Err(Error::TooFewPoints { needed: MIN_FIT_POINTS, got: points.len() });
    }
    if kinds.is_empty() {
        return Err(Error::InvalidConfig("no structure kinds requested".into()));
    }
    if points.iter().any(|(a, t)| !a.is_finite() || !t.is_finite()) {
        return Err(Error::NonFinite);
    }
    let first = wrap_deg_180(points[0].0);
    if points.iter().all(|(a, _)| (wrap_deg_180(*a) - first).abs() < T::lit(1e-9)) {
        return Err(Error::InsufficientAngularExtent);
    }
    let c = T::speed_of_light();
    let problem = Problem {
        theta: points.iter().map(|p| p.0).collect(),
        rho: points.iter().map(|p| radius_m + c * p.1 / T::lit(2.0)).collect(),
        radius: radius_m,
    };

    let mut fits: Vec<(StructureTemplate<T>, T)> = Vec::new();
    for &kind in kinds {
        if fits.iter().any(|(t, _)| t.kind == kind) {
            continue;
        }
        if let Some(fit) = fit_kind(&problem, kind, settings) {
            fits.push(fit);
        }
    }
    if fits.is_empty() {
        return Err(Error::NoFeasibleTemplate);
    }

    let n = T::from_usize_lossy(points.len());
    let to_rmse_s = |sse: T| T::lit(2.0) / c * (sse / n).sqrt();
    let per_kind: Vec<(StructureKind, T)> = fits.iter().map(|(t, s)| (t.kind, to_rmse_s(*s))).collect();
    let flat = per_kind.iter().find(|(k, _)| *k == StructureKind::FlatWall).map(|x| x.1);
    let gain = T::lit(1.0 - settings.corner_min_gain);
    let min_improvement = T::lit(settings.corner_min_improvement_s);
    let best = (0..per_kind.len())
        .filter(|&i| is_eligible(&per_kind, i, flat, gain, min_improvement))
        .min_by(|&a, &b| per_kind[a].1.partial_cmp(&per_kind[b].1).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or(0);
    let template = fits[best].0;
    let residuals_s = points
        .iter()
        .map(|&(th, tau)| template_delay(&template, th).map(|m| tau - m))
        .collect::<Result<Vec<T>>>()?;
    let rmse_s = (residuals_s.iter().map(|e| *e * *e).fold(T::zero(), |a, b| a + b) / n).sqrt();
    Ok(FitResult { template, rmse_s, residuals_s, per_kind_rmse_s: per_kind })
}

fn is_eligible<T: Real>(per_kind: &[(StructureKind, T)], i: usize, flat: Option<T>, gain: T, min_improvement: T) -> bool {
    let (kind, rmse) = per_kind[i];
    match (kind, flat) {
        (StructureKind::FlatWall, _) | (_, None) => true,
        (_, Some(f)) => rmse < gain * f && f - rmse >= min_improvement,
    }
}

fn fit_kind<T: Real>(
    problem: &Problem<T>,
    kind: StructureKind,
    settings: &FitSettings,
) -> Option<(StructureTemplate<T>, T)> {
    let (lo, hi) = kind.support_deg();
    let rel_ok = |theta0: f64| {
        problem.theta.iter().all(|&th| {
            let mut rel = wrap_deg_180(th.as_f64() - theta0);
            if kind == StructureKind::InnerCorner && rel <= -90.0 {
                rel += 360.0;
            }
            rel > lo && rel < hi
        })
    };
    let dstep = settings.distance_step_m;
    let rho_max = problem.rho.iter().fold(T::zero(), |m, r| m.max(*r));
    let n_theta = (360.0 / settings.angle_step_deg).round().max(1.0) as usize;
    let make = |d1: T, d2: T, th0: T| match kind {
        StructureKind::FlatWall => StructureTemplate::flat_wall(d2, th0, problem.radius),
        StructureKind::InnerCorner => StructureTemplate::inner_corner(d1, d2, th0, problem.radius),
        StructureKind::OuterCorner => StructureTemplate::outer_corner(d1, d2, th0, problem.radius),
    };
    // Grid indices k (distance (k + 1)·step) within the search window around an anchor.
    let span = |anchor: T| {
        let lo = ((anchor.as_f64() - settings.search_halfwidth_m) / dstep).floor().max(1.0) as usize;
        let hi = ((anchor.as_f64() + settings.search_halfwidth_m) / dstep).ceil().max(1.0) as usize;
        (lo - 1)..hi
    };
    let dist = |k: usize| T::lit(dstep * (k + 1) as f64);
    let eps = T::lit(1e-12);

    let mut best: Option<(StructureTemplate<T>, T)> = None;
    let mut trig: Vec<(T, T)> = Vec::with_capacity(problem.theta.len());
    for a in 0..n_theta {
        let theta0 = a as f64 * settings.angle_step_deg;
        if !rel_ok(theta0) {
            continue;
        }
        let th0 = T::lit(theta0);
        trig.clear();
        trig.extend(problem.theta.iter().map(|&th| {
            let (s, c) = (th - th0).to_radians().sin_cos();
            (c, s)
        }));
        // Noise-free data pins each distance to an extreme of ρ·cos / ρ·sin.
        let pick = |f: &dyn Fn(&(T, T)) -> T, valid: &dyn Fn(&(T, T)) -> bool, take_max: bool| {
            let vals = trig.iter().zip(&problem.rho).filter(|(t, _)| valid(t)).map(|(t, r)| *r * f(t));
            let v = if take_max { vals.fold(T::neg_infinity(), T::max) } else { vals.fold(T::infinity(), T::min) };
            if v.is_finite() { v } else { rho_max }
        };
        let cos_of = |t: &(T, T)| t.0;
        let sin_of = |t: &(T, T)| t.1;
        let cos_ok = |t: &(T, T)| t.0 > eps;
        let sin_ok = |t: &(T, T)| t.1 > eps;
        let (anchor1, anchor2) = match kind {
            StructureKind::FlatWall => {
                let (num, den) = trig
                    .iter()
                    .zip(&problem.rho)
                    .fold((T::zero(), T::zero()), |(n, d), (t, r)| (n + *r / t.0, d + T::one() / (t.0 * t.0)));
                let d = num / den;
                (d, d)
            }
            StructureKind::InnerCorner => (pick(&sin_of, &sin_ok, true), pick(&cos_of, &cos_ok, true)),
            StructureKind::OuterCorner => (pick(&sin_of, &sin_ok, false), pick(&cos_of, &cos_ok, false)),
        };
        let range1 = if kind == StructureKind::FlatWall { 0..1 } else { span(anchor1) };
        for i in range1 {
            for k in span(anchor2) {
                let (d1, d2) = (dist(i), dist(k));
                let cap = best.map_or(T::infinity(), |b| b.1);
                let mut acc = T::zero();
                for (t, &rho) in trig.iter().zip(&problem.rho) {
                    match branch_range(kind, d1, d2, t.0, t.1) {
                        Some(m) => acc += (rho - m) * (rho - m),
                        None => {
                            acc = T::infinity();
                            break;
                        }
                    }
                    if acc > cap {
                        break;
                    }
                }
                if acc < cap {
                    best = Some((make(d1, d2, th0), acc));
                }
            }
        }
    }
    let (mut t, mut s) = best?;

    // Pattern search over (d1, d2, θ₀).
    let mut step_d = T::lit(dstep);
    let mut step_a = T::lit(settings.angle_step_deg);
    let final_d = T::lit(settings.final_distance_step_m);
    let final_a = T::lit(settings.final_angle_step_deg);
    let half = T::lit(0.5);
    loop {
        let mut improved = false;
        for axis in 0..3 {
            if kind == StructureKind::FlatWall && axis == 0 {
                continue;
            }
            for sign in [T::one(), -T::one()] {
                let mut cand = t;
                match axis {
                    0 => cand.d1_m += sign * step_d,
                    1 => cand.d2_m += sign * step_d,
                    _ => cand.theta0_deg += sign * step_a,
                }
                if kind == StructureKind::FlatWall {
                    cand.d1_m = cand.d2_m;
                }
                if cand.d1_m <= T::zero() || cand.d2_m <= T::zero() {
                    continue;
                }
                let cs = problem.sse(&cand, s);
                if cs < s {
                    t = cand;
                    s = cs;
                    improved = true;
                }
            }
        }
        if !improved {
            if step_d <= final_d && step_a <= final_a {
                break;
            }
            step_d = (step_d * half).max(final_d);
            step_a = (step_a * half).max(final_a);
        }
    }
    t.theta0_deg = crate::scalar::wrap_deg_360(t.theta0_deg);
    Some((t, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapPoint<T> {
    pub x_m: T,
    pub y_m: T,
    pub trx_id: usize,
    pub region_label: u32,
    pub phi_deg: T,
    pub tau_s: T,
    pub filtered: bool,
}

impl<T: Real> MapPoint<T> {
    pub fn point(&self) -> Point2<T> {
        Point2::new(self.x_m, self.y_m)
    }
}

/// `trx + (r + c·τ/2)·(cos θ, sin θ)`.
pub fn map_to_cartesian<T: Real>(mpc: &DeembeddedMpc<T>, trx: Point2<T>, radius_m: T, trx_id: usize) -> MapPoint<T> {
    map_delay_angle(mpc.tau_s, mpc.phi_deg, mpc.region_label, trx, radius_m, trx_id)
}

pub fn map_delay_angle<T: Real>(
    tau_s: T,
    theta_deg: T,
    region_label: u32,
    trx: Point2<T>,
    radius_m: T,
    trx_id: usize,
) -> MapPoint<T> {
    let range = radius_m + T::speed_of_light() * tau_s / T::lit(2.0);
    let rad = theta_deg.to_radians();
    MapPoint {
        x_m: trx.x + range * rad.cos(),
        y_m: trx.y + range * rad.sin(),
        trx_id,
        region_label,
        phi_deg: theta_deg,
        tau_s,
        filtered: false,
    }
}

/// Inverse of the mapping: `(τ, θ)` of a point as seen from `trx`.
pub fn delay_angle_of<T: Real>(p: Point2<T>, trx: Point2<T>, radius_m: T) -> (T, T) {
    let range = trx.distance(&p);
    (T::lit(2.0) * (range - radius_m) / T::speed_of_light(), trx.bearing_deg(&p))
}

/// Centred moving average; the window shrinks symmetrically at both ends.
pub fn sliding_window_filter<T: Real>(points: &[MapPoint<T>], w: usize) -> Result<Vec<MapPoint<T>>> {
    if w == 0 || w % 2 == 0 {
        return Err(Error::InvalidWindow(w));
    }
    let n = points.len();
    let h = (w - 1) / 2;
    Ok((0..n)
        .map(|i| {
            let k = h.min(i).min(n - 1 - i);
            let span = &points[i - k..=i + k];
            let m = T::from_usize_lossy(span.len());
            let x = span.iter().fold(T::zero(), |a, p| a + p.x_m) / m;
            let y = span.iter().fold(T::zero(), |a, p| a + p.y_m) / m;
            MapPoint { x_m: x, y_m: y, filtered: true, ..points[i] }
        })
        .collect())
}

pub const REPORTED_QUANTILES: [f64; 7] = [0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mde_m: f64,
    pub rmse_m: f64,
    /// `(probability, error)` pairs.
    pub quantiles: Vec<(f64, f64)>,
    /// Sorted per-point errors.
    pub cdf: Vec<f64>,
}

/// Linear-interpolation empirical quantile of sorted data.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Distance from each point to the nearest ground-truth segment.
pub fn point_errors<T: Real>(points: &[Point2<T>], walls: &[(Point2<T>, Point2<T>)]) -> Result<Vec<T>> {
    if points.is_empty() {
        return Err(Error::Empty("points"));
    }
    if walls.is_empty() {
        return Err(Error::Empty("walls"));
    }
    Ok(points
        .iter()
        .map(|p| walls.iter().map(|(a, b)| point_segment_distance(p, a, b)).fold(T::infinity(), |m, d| m.min(d)))
        .collect())
}

pub fn compute_metrics<T: Real>(points: &[Point2<T>], walls: &[(Point2<T>, Point2<T>)]) -> Result<Metrics> {
    let mut errors: Vec<f64> = point_errors(points, walls)?.into_iter().map(|e| e.as_f64()).collect();
    errors.sort_by(f64::total_cmp);
    let n = errors.len() as f64;
    let mde_m = errors.iter().sum::<f64>() / n;
    let rmse_m = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let quantiles = REPORTED_QUANTILES.iter().map(|&p| (p, empirical_quantile(&errors, p))).collect();
    Ok(Metrics { mde_m, rmse_m, quantiles, cdf: errors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperSettings {
    /// Sliding-window length in points (odd).
    pub window: usize,
    pub kinds: Vec<StructureKind>,
    pub fit: FitSettings,
}

impl Default for MapperSettings {
    fn default() -> Self {
        Self { window: 11, kinds: StructureKind::ALL.to_vec(), fit: FitSettings::default() }
    }
}

/// Mapping result for one region seen from one TRx.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap<T> {
    pub region_label: u32,
    pub fit: Option<FitResult<T>>,
    /// Raw points in scan order.
    pub points: Vec<MapPoint<T>>,
    /// Sliding-window output, empty when no structure could be fitted.
    pub filtered: Vec<MapPoint<T>>,
}

/// Indices ordering bearings along the scan, starting after the widest gap
/// so that a region straddling 0° stays contiguous.
pub fn scan_order<T: Real>(angles_deg: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..angles_deg.len()).collect();
    let key = |i: usize| crate::scalar::wrap_deg_360(angles_deg[i]);
    idx.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    if idx.len() < 2 {
        return idx;
    }
    let full = T::lit(360.0);
    let mut start = 0;
    let mut widest = key(idx[0]) + full - key(idx[idx.len() - 1]);
    for k in 1..idx.len() {
        let gap = key(idx[k]) - key(idx[k - 1]);
        if gap > widest {
            widest = gap;
            start = k;
        }
    }
    idx.rotate_left(start);
    idx
}

/// Maps one region's de-embedded paths, fits a structure template to them
/// and smooths each straight run of the fitted structure separately, so a
/// corner is never averaged across its two walls.
pub fn map_region<T: Real>(
    mpcs: &[DeembeddedMpc<T>],
    trx: Point2<T>,
    trx_id: usize,
    radius_m: T,
    settings: &MapperSettings,
) -> Result<RegionMap<T>> {
    let region_label = mpcs.first().map_or(0, |m| m.region_label);
    let order = scan_order(&mpcs.iter().map(|m| m.phi_deg).collect::<Vec<_>>());
    let ordered: Vec<&DeembeddedMpc<T>> = order.iter().map(|&i| &mpcs[i]).collect();
    let points: Vec<MapPoint<T>> = ordered.iter().map(|m| map_to_cartesian(m, trx, radius_m, trx_id)).collect();
    let samples: Vec<(T, T)> = ordered.iter().map(|m| (m.phi_deg, m.tau_s)).collect();
    let fit = match fit_structure(&samples, &settings.kinds, radius_m, &settings.fit) {
        Ok(f) => Some(f),
        Err(Error::TooFewPoints { .. } | Error::InsufficientAngularExtent | Error::NoFeasibleTemplate) => None,
        Err(e) => return Err(e),
    };
    let mut filtered = Vec::new();
    if let Some(fit) = &fit {
        let branch: Vec<bool> = samples.iter().map(|&(th, _)| fit.template.on_sin_branch(th)).collect();
        let mut start = 0;
        for k in 1..=points.len() {
            if k == points.len() || branch[k] != branch[start] {
                filtered.extend(sliding_window_filter(&points[start..k], settings.window)?);
                start = k;
            }
        }
    }
    Ok(RegionMap { region_label, fit, points, filtered })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use num_complex::Complex;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const C: f64 = crate::scalar::SPEED_OF_LIGHT;

    fn corner() -> StructureTemplate<f64> {
        StructureTemplate::inner_corner(1.60, 1.23, 0.0, 0.23)
    }

    #[test]
    fn inner_corner_examples() {
        let t = corner();
        assert_relative_eq!(template_delay(&t, 90.0).unwrap(), 2.0 * 1.37 / C, epsilon = 1e-20);
        assert_relative_eq!(template_delay(&t, 0.0).unwrap(), 2.0 * 1.00 / C, epsilon = 1e-20);
        assert!((template_delay(&t, 90.0).unwrap() * 1e9 - 9.14).abs() < 0.01);
        assert!((template_delay(&t, 0.0).unwrap() * 1e9 - 6.67).abs() < 0.01);
        let x = (1.60f64 / 1.23).atan();
        assert_relative_eq!(1.60 / x.sin(), 1.23 / x.cos(), max_relative = 1e-14);
        assert_relative_eq!(t.crossover_deg(), x.to_degrees(), epsilon = 1e-12);
    }

    #[test]
    fn outside_support_is_an_error() {
        assert!(template_delay(&StructureTemplate::flat_wall(1.0, 0.0, 0.23), 95.0).is_err());
        assert!(template_delay(&corner(), -120.0).is_err());
        assert!(template_delay(&StructureTemplate::outer_corner(1.0, 1.0, 0.0, 0.23), 100.0).is_err());
        assert!(template_delay(&corner(), 170.0).is_ok());
    }

    #[test]
    fn outer_corner_takes_the_far_branch() {
        let t = StructureTemplate::outer_corner(1.0, 2.0, 0.0, 0.0);
        let rho = t.range(30.0).unwrap();
        assert_relative_eq!(rho, (2.0 / 30f64.to_radians().cos()).max(1.0 / 30f64.to_radians().sin()));
    }

    fn sample(t: &StructureTemplate<f64>, angles: impl Iterator<Item = f64>) -> Vec<(f64, f64)> {
        angles.map(|a| (a, template_delay(t, a).unwrap())).collect()
    }

    #[test]
    fn noiseless_corner_is_recovered() {
        let t = corner();
        let pts = sample(&t, (5..=85).step_by(2).map(|a| a as f64));
        let fit = fit_structure(&pts, &StructureKind::ALL, 0.23, &FitSettings::default()).unwrap();
        assert_eq!(fit.template.kind, StructureKind::InnerCorner);
        assert!((fit.template.d1_m - 1.60).abs() < 1e-3);
        assert!((fit.template.d2_m - 1.23).abs() < 1e-3);
        assert!(fit.rmse_s < 0.01e-9);
    }

    #[test]
    fn noiseless_flat_wall_prefers_flat_kind() {
        let t = StructureTemplate::flat_wall(1.23, 270.0, 0.23);
        let pts = sample(&t, (220..=320).step_by(3).map(|a| a as f64));
        let fit = fit_structure(&pts, &StructureKind::ALL, 0.23, &FitSettings::default()).unwrap();
        assert_eq!(fit.template.kind, StructureKind::FlatWall);
        assert!((fit.template.d2_m - 1.23).abs() < 1e-3);
        assert!((fit.template.theta0_deg - 270.0).abs() < 0.05);
    }

    #[test]
    fn jittered_corner_rmse_matches_jitter_scale() {
        let t = corner();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.05e-9).unwrap();
        let pts: Vec<(f64, f64)> =
            sample(&t, (5..=85).map(|a| a as f64)).into_iter().map(|(a, tau)| (a, tau + noise.sample(&mut rng))).collect();
        let fit = fit_structure(&pts, &[StructureKind::InnerCorner], 0.23, &FitSettings::default()).unwrap();
        assert!(fit.rmse_s > 0.02e-9 && fit.rmse_s < 0.1e-9, "{}", fit.rmse_s);
    }

    #[test]
    fn fit_preconditions() {
        let few = vec![(0.0, 1e-9); 4];
        assert!(matches!(fit_structure(&few, &StructureKind::ALL, 0.23, &FitSettings::default()), Err(Error::TooFewPoints { .. })));
        let same = vec![(10.0, 1e-9); 6];
        assert!(matches!(
            fit_structure(&same, &StructureKind::ALL, 0.23, &FitSettings::default()),
            Err(Error::InsufficientAngularExtent)
        ));
    }

    #[test]
    fn residuals_match_reported_rmse() {
        let t = StructureTemplate::flat_wall(2.0, 45.0, 0.23);
        let pts: Vec<(f64, f64)> = sample(&t, (20..=70).step_by(5).map(|a| a as f64))
            .into_iter()
            .enumerate()
            .map(|(i, (a, tau))| (a, tau + if i % 2 == 0 { 0.02e-9 } else { -0.02e-9 }))
            .collect();
        let fit = fit_structure(&pts, &[StructureKind::FlatWall], 0.23, &FitSettings::default()).unwrap();
        let direct: f64 = pts
            .iter()
            .map(|&(a, tau)| (tau - template_delay(&fit.template, a).unwrap()).powi(2))
            .sum::<f64>()
            / pts.len() as f64;
        assert_relative_eq!(fit.rmse_s, direct.sqrt(), max_relative = 1e-9);
    }

    fn mpc(tau_s: f64, phi_deg: f64) -> DeembeddedMpc<f64> {
        DeembeddedMpc { alpha: Complex::new(1.0, 0.0), tau_s, phi_deg, column: 0, region_label: 1, power_db: 0.0 }
    }

    #[test]
    fn mapping_examples() {
        let o = Point2::new(0.0, 0.0);
        let p = map_to_cartesian(&mpc(0.0, 0.0), o, 0.23, 0);
        assert_relative_eq!(p.x_m, 0.23);
        assert_relative_eq!(p.y_m, 0.0);
        let p = map_to_cartesian(&mpc(2.0 / C, 90.0), o, 0.23, 0);
        assert!(p.x_m.abs() < 1e-15);
        assert_relative_eq!(p.y_m, 1.23, max_relative = 1e-15);
    }

    fn line_points(n: usize) -> Vec<MapPoint<f64>> {
        (0..n)
            .map(|i| MapPoint {
                x_m: 0.3 + 0.01 * i as f64,
                y_m: 1.0 - 0.02 * i as f64,
                trx_id: 0,
                region_label: 1,
                phi_deg: i as f64,
                tau_s: 0.0,
                filtered: false,
            })
            .collect()
    }

    #[test]
    fn window_of_one_is_identity() {
        let pts = line_points(9);
        let out = sliding_window_filter(&pts, 1).unwrap();
        for (a, b) in pts.iter().zip(&out) {
            assert_eq!((a.x_m, a.y_m), (b.x_m, b.y_m));
        }
        assert!(sliding_window_filter(&pts, 4).is_err());
    }

    #[test]
    fn collinear_equally_spaced_points_are_fixed() {
        let pts = line_points(30);
        let out = sliding_window_filter(&pts, 11).unwrap();
        assert_eq!(out.len(), pts.len());
        for (a, b) in pts.iter().zip(&out) {
            assert!((a.x_m - b.x_m).abs() < 1e-12 && (a.y_m - b.y_m).abs() < 1e-12);
        }
    }

    #[test]
    fn window_reduces_line_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = Normal::new(0.0, 0.005).unwrap();
        let pts: Vec<MapPoint<f64>> = (0..400)
            .map(|i| MapPoint {
                x_m: i as f64 * 0.005,
                y_m: 1.23 + noise.sample(&mut rng),
                trx_id: 0,
                region_label: 1,
                phi_deg: i as f64,
                tau_s: 0.0,
                filtered: false,
            })
            .collect();
        let rmse = |p: &[MapPoint<f64>]| (p.iter().map(|p| (p.y_m - 1.23).powi(2)).sum::<f64>() / p.len() as f64).sqrt();
        let out = sliding_window_filter(&pts, 11).unwrap();
        assert!(rmse(&pts) >= 2.0 * rmse(&out));
    }

    #[test]
    fn metric_examples() {
        let wall = [(Point2::new(-5.0, 0.0), Point2::new(5.0, 0.0))];
        let on = [Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)];
        let m = compute_metrics(&on, &wall).unwrap();
        assert_eq!((m.mde_m, m.rmse_m), (0.0, 0.0));
        let m = compute_metrics(&[Point2::new(2.0, 0.01)], &wall).unwrap();
        assert_relative_eq!(m.mde_m, 0.01, epsilon = 1e-15);
        assert_relative_eq!(m.rmse_m, 0.01, epsilon = 1e-15);
        assert!(compute_metrics::<f64>(&[], &wall).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(empirical_quantile(&v, 0.5), 2.0);
        assert_eq!(empirical_quantile(&v, 0.1), 0.4);
        assert_eq!(empirical_quantile(&v, 1.0), 4.0);
    }

    /// Closest point on a segment by dense sampling.
    fn brute_distance(p: Point2<f64>, a: Point2<f64>, b: Point2<f64>) -> f64 {
        (0..=20000)
            .map(|k| {
                let t = k as f64 / 20000.0;
                p.distance(&Point2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)))
            })
            .fold(f64::INFINITY, f64::min)
    }

    proptest! {
        #[test]
        fn errors_match_brute_force(
            px in -3.0f64..3.0, py in -3.0f64..3.0,
            segs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 1..4),
        ) {
            let walls: Vec<_> = segs.iter().map(|s| (Point2::new(s.0, s.1), Point2::new(s.2, s.3))).collect();
            let p = Point2::new(px, py);
            let e = point_errors(&[p], &walls).unwrap()[0];
            let brute = walls.iter().map(|(a, b)| brute_distance(p, *a, *b)).fold(f64::INFINITY, f64::min);
            prop_assert!(e <= brute + 1e-12);
            prop_assert!(brute - e <= 6.0 * 8.5 / 20000.0);
        }

        #[test]
        fn mapping_inverts(tau_ns in 0.01f64..90.0, theta in 0.0f64..360.0, x in -5.0f64..5.0, y in -5.0f64..5.0) {
            let trx = Point2::new(x, y);
            let p = map_to_cartesian(&mpc(tau_ns * 1e-9, theta), trx, 0.23, 0);
            let (tau, bearing) = delay_angle_of(p.point(), trx, 0.23);
            prop_assert!((tau - tau_ns * 1e-9).abs() < 1e-20 + 1e-12 * tau_ns * 1e-9);
            prop_assert!(wrap_deg_180(bearing - theta).abs() < 1e-9);
        }

        #[test]
        fn interior_window_preserves_centroid(n in 11usize..40, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.01).unwrap();
            let mut pts = line_points(n);
            for p in pts.iter_mut() {
                p.x_m += noise.sample(&mut rng);
                p.y_m += noise.sample(&mut rng);
            }
            let out = sliding_window_filter(&pts, 11).unwrap();
            for i in 5..n - 5 {
                let mx = pts[i - 5..=i + 5].iter().map(|p| p.x_m).sum::<f64>() / 11.0;
                prop_assert!((out[i].x_m - mx).abs() <= 4.0 * f64::EPSILON * mx.abs().max(1.0));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn refined_fit_beats_every_grid_point(d in 0.8f64..2.5, th0 in 0.0f64..360.0, seed in any::<u64>()) {
            let t = StructureTemplate::flat_wall(d, th0, 0.23);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.03e-9).unwrap();
            let pts: Vec<(f64, f64)> = (-40..=40).step_by(4)
                .map(|a| th0 + a as f64)
                .map(|a| (a, template_delay(&t, a).unwrap() + noise.sample(&mut rng)))
                .collect();
            let fit = fit_structure(&pts, &[StructureKind::FlatWall], 0.23, &FitSettings::default()).unwrap();
            let rmse = |tp: &StructureTemplate<f64>| -> f64 {
                let s: f64 = pts.iter().map(|&(a, tau)| match template_delay(tp, a) {
                    Ok(m) => (tau - m).powi(2),
                    Err(_) => f64::INFINITY,
                }).sum();
                (s / pts.len() as f64).sqrt()
            };
            let rho_max = pts.iter().map(|p| 0.23 + C * p.1 / 2.0).fold(0.0, f64::max);
            for a in 0..360 {
                for k in 0..((rho_max + 0.02) / 0.01).ceil() as usize {
                    let g = StructureTemplate::flat_wall(0.01 * (k + 1) as f64, a as f64, 0.23);
                    prop_assert!(fit.rmse_s <= rmse(&g) * (1.0 + 1e-12));
                }
            }
        }
    }
}
