//! Element-wise SAGE over region-restricted delay candidates, trajectory
//! tracking across rotation angles, and antenna de-embedding.
//!
//! Each rotation angle is processed independently. The correlation
//! `c(τ) = Σ_f H(f)·e^{j2πfτ}` is evaluated once per candidate; extracting or
//! re-adding a path then only needs the closed-form steering kernel, so the
//! cost per column is dominated by `candidates × frequencies`.

use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{AntennaPattern, ChannelFrequencyResponse, FrequencyGrid};
use crate::error::{Error, Result};
use crate::scalar::{amplitude_to_db, cis_cycles, Real};
use crate::segmentation::Region;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SageSettings {
    pub max_paths: usize,
    pub iterations: usize,
    /// Candidate delay spacing; must divide the PADP delay step.
    pub delay_step_s: f64,
    /// Extraction stops once the residual peak falls below floor + margin.
    pub stop_margin_db: f64,
    /// Tracking gate in PADP delay bins per rotation step.
    pub gate_bins: f64,
    pub min_trajectory_len: usize,
}

impl Default for SageSettings {
    fn default() -> Self {
        Self {
            max_paths: 3,
            iterations: 1,
            delay_step_s: 0.01e-9,
            stop_margin_db: 6.0,
            gate_bins: 2.0,
            min_trajectory_len: 3,
        }
    }
}

impl SageSettings {
    /// Number of candidates per PADP delay bin.
    pub fn refinement(&self, padp_step_s: f64) -> Result<usize> {
        if !(self.delay_step_s > 0.0) || !(padp_step_s > 0.0) {
            return Err(Error::InvalidConfig("SAGE delay step must be positive".into()));
        }
        let ratio = padp_step_s / self.delay_step_s;
        let k = ratio.round();
        if k < 1.0 || (ratio - k).abs() > 1e-6 * ratio {
            return Err(Error::InvalidConfig(format!(
                "SAGE delay step {} ns must divide the PADP step {} ns",
                self.delay_step_s * 1e9,
                padp_step_s * 1e9
            )));
        }
        Ok(k as usize)
    }
}

/// Candidate delays for one column, on the lattice `m · step`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DelayCandidates {
    /// Strictly increasing lattice indices.
    pub index: Vec<usize>,
    /// Region label per candidate (0 when outside every region).
    pub label: Vec<u32>,
}

impl DelayCandidates {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Sub-bin lattice points covering the given PADP bins.
    pub fn from_bins(bins: impl IntoIterator<Item = (usize, u32)>, refine: usize) -> Self {
        let (lo, hi) = sub_bin_range(refine);
        let mut pairs: Vec<(usize, u32)> = bins
            .into_iter()
            .flat_map(|(i, l)| {
                (lo..=hi).filter_map(move |k| {
                    let m = (refine * i) as isize + k;
                    (m >= 0).then_some((m as usize, l))
                })
            })
            .collect();
        pairs.sort_unstable_by_key(|p| p.0);
        pairs.dedup_by_key(|p| p.0);
        Self { index: pairs.iter().map(|p| p.0).collect(), label: pairs.iter().map(|p| p.1).collect() }
    }
}

fn sub_bin_range(refine: usize) -> (isize, isize) {
    let r = refine as isize;
    if refine % 2 == 1 {
        (-(r / 2), r / 2)
    } else {
        (-(r / 2), r / 2 - 1)
    }
}

/// Precomputed steering kernel on the candidate lattice.
#[derive(Debug, Clone)]
pub struct SageEngine<T> {
    pub grid: FrequencyGrid<T>,
    pub step_s: T,
    kernel: Vec<Complex<T>>,
    span: usize,
}

impl<T: Real> SageEngine<T> {
    /// Supports lattice indices in `0..=max_index`.
    pub fn new(grid: FrequencyGrid<T>, step_s: T, max_index: usize) -> Self {
        let span = max_index;
        let kernel = (0..=2 * span)
            .into_par_iter()
            .map(|k| grid.steering_kernel(T::from_usize_lossy(k) * step_s - T::from_usize_lossy(span) * step_s))
            .collect();
        Self { grid, step_s, kernel, span }
    }

    /// `Σ_f e^{j2πf(τ_a − τ_b)}` for lattice indices `a`, `b`.
    #[inline]
    pub fn kernel(&self, a: usize, b: usize) -> Complex<T> {
        self.kernel[a + self.span - b]
    }

    pub fn delay(&self, index: usize) -> T {
        T::from_usize_lossy(index) * self.step_s
    }

    /// `c(τ) = Σ_f H(f)·e^{j2πfτ}` via a re-anchored phasor recurrence.
    pub fn correlate(&self, h: &[Complex<T>], index: usize) -> Complex<T> {
        const ANCHOR: usize = 128;
        let tau = self.delay(index);
        let step = cis_cycles(self.grid.step_hz * tau);
        let mut acc = Complex::new(T::zero(), T::zero());
        for (block, chunk) in h.chunks(ANCHOR).enumerate() {
            let mut z = cis_cycles(self.grid.at(block * ANCHOR) * tau);
            for &v in chunk {
                acc += v * z;
                z = z * step;
            }
        }
        acc
    }
}

impl<T: Real> SageEngine<T> {
    /// [`correlate`](Self::correlate) for many lattice indices, four at a
    /// time so the independent recurrences can overlap.
    pub fn correlate_all(&self, h: &[Complex<T>], indices: &[usize]) -> Vec<Complex<T>> {
        const ANCHOR: usize = 128;
        const LANES: usize = 4;
        let mut out = Vec::with_capacity(indices.len());
        let zero = Complex::new(T::zero(), T::zero());
        for group in indices.chunks(LANES) {
            let mut tau = [T::zero(); LANES];
            for (t, &m) in tau.iter_mut().zip(group) {
                *t = self.delay(m);
            }
            let step: [Complex<T>; LANES] = std::array::from_fn(|l| cis_cycles(self.grid.step_hz * tau[l]));
            let mut acc = [zero; LANES];
            for (block, chunk) in h.chunks(ANCHOR).enumerate() {
                let f0 = self.grid.at(block * ANCHOR);
                let mut z: [Complex<T>; LANES] = std::array::from_fn(|l| cis_cycles(f0 * tau[l]));
                for &v in chunk {
                    for l in 0..LANES {
                        acc[l] += v * z[l];
                        z[l] = z[l] * step[l];
                    }
                }
            }
            out.extend_from_slice(&acc[..group.len()]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate<T> {
    pub beta: Complex<T>,
    pub tau_s: T,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnEstimate<T> {
    pub column: usize,
    pub phi_deg: T,
    /// Sorted by descending `|β|`.
    pub paths: Vec<PathEstimate<T>>,
    /// `‖H_res‖²` before extraction and after every extraction or re-estimation step.
    pub residual_energy: Vec<T>,
    /// Number of candidate delays correlated.
    pub candidates: usize,
}

/// SAGE on one column.
///
/// Paths are extracted greedily at the strongest residual correlation with
/// least-squares amplitude `β = c(τ)/N`, then refined by `iterations` rounds
/// of add-back / re-maximise / re-subtract. Extraction stops at `max_paths`
/// or when `20·log10(|c|/N)` drops below `stop_db`.
pub fn sage_column<T: Real>(
    h: &[Complex<T>],
    engine: &SageEngine<T>,
    candidates: &DelayCandidates,
    max_paths: usize,
    iterations: usize,
    stop_db: T,
) -> Result<(Vec<PathEstimate<T>>, Vec<T>)> {
    if h.len() != engine.grid.len {
        return Err(Error::ShapeMismatch(format!("column has {} samples, grid has {}", h.len(), engine.grid.len)));
    }
    if h.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut energy = h.iter().map(|z| z.norm_sqr()).fold(T::zero(), |a, b| a + b);
    let mut trace = vec![energy];
    if candidates.is_empty() || max_paths == 0 {
        return Ok((Vec::new(), trace));
    }
    if let Some(&last) = candidates.index.last() {
        if last > engine.span {
            return Err(Error::InvalidConfig("candidate outside the SAGE engine span".into()));
        }
    }
    let n = T::from_usize_lossy(h.len());
    let mut corr = engine.correlate_all(h, &candidates.index);

    let argmax = |corr: &[Complex<T>]| -> usize {
        let mut best = 0;
        let mut best_v = T::neg_infinity();
        for (k, c) in corr.iter().enumerate() {
            let v = c.norm_sqr();
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        best
    };
    let shift = |corr: &mut [Complex<T>], at: usize, beta: Complex<T>, sign: T| {
        let src = candidates.index[at];
        for (c, &m) in corr.iter_mut().zip(&candidates.index) {
            *c += engine.kernel(m, src) * beta * sign;
        }
    };

    let mut paths: Vec<(usize, Complex<T>)> = Vec::new();
    while paths.len() < max_paths {
        let k = argmax(&corr);
        if amplitude_to_db(corr[k].norm() / n) < stop_db {
            break;
        }
        let beta = corr[k] / n;
        energy = (energy - corr[k].norm_sqr() / n).max(T::zero());
        shift(&mut corr, k, beta, -T::one());
        paths.push((k, beta));
        trace.push(energy);
    }

    for _ in 0..iterations {
        for p in 0..paths.len() {
            let (k_old, b_old) = paths[p];
            let before = corr[k_old];
            energy += T::lit(2.0) * (b_old.conj() * before).re + n * b_old.norm_sqr();
            shift(&mut corr, k_old, b_old, T::one());
            let k = argmax(&corr);
            let beta = corr[k] / n;
            energy = (energy - corr[k].norm_sqr() / n).max(T::zero());
            shift(&mut corr, k, beta, -T::one());
            paths[p] = (k, beta);
            trace.push(energy);
        }
    }

    let mut out: Vec<PathEstimate<T>> = paths
        .into_iter()
        .map(|(k, beta)| PathEstimate { beta, tau_s: engine.delay(candidates.index[k]), label: candidates.label[k] })
        .collect();
    out.sort_by(|a, b| b.beta.norm().total_cmp_or_eq(&a.beta.norm()).then(a.tau_s.total_cmp_or_eq(&b.tau_s)));
    Ok((out, trace))
}

trait TotalCmp {
    fn total_cmp_or_eq(&self, other: &Self) -> std::cmp::Ordering;
}

impl<T: Real> TotalCmp for T {
    fn total_cmp_or_eq(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).unwrap_or(std::cmp::Ordering::Equal)
    }
}

/// Per-column estimates plus search-space counters.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOutput<T> {
    pub columns: Vec<ColumnEstimate<T>>,
    /// PADP cells whose delay range was searched.
    pub visited_cells: usize,
    /// Candidate delays correlated against the CFR.
    pub candidate_evaluations: usize,
}

fn run_columns<T: Real>(
    cfr: &ChannelFrequencyResponse<T>,
    per_column: Vec<(usize, Vec<(usize, u32)>)>,
    settings: &SageSettings,
    noise_floor_db: T,
) -> Result<EstimateOutput<T>> {
    let config = cfr.config();
    let refine = settings.refinement(config.delay_step_s().as_f64())?;
    let step = config.delay_step_s() / T::from_usize_lossy(refine);
    let max_index = refine * config.n_freq_points + refine;
    let engine = SageEngine::new(config.frequency_grid(), step, max_index);
    let stop_db = noise_floor_db + T::lit(settings.stop_margin_db);
    let visited_cells = per_column.iter().map(|(_, b)| b.len()).sum();
    let columns: Vec<ColumnEstimate<T>> = per_column
        .into_par_iter()
        .map(|(j, bins)| {
            let cands = DelayCandidates::from_bins(bins, refine);
            let (paths, residual_energy) =
                sage_column(cfr.column(j), &engine, &cands, settings.max_paths, settings.iterations, stop_db)?;
            Ok(ColumnEstimate {
                column: j,
                phi_deg: config.rotation_angles_deg[j],
                paths,
                residual_energy,
                candidates: cands.len(),
            })
        })
        .collect::<Result<_>>()?;
    let candidate_evaluations = columns.iter().map(|c| c.candidates).sum();
    Ok(EstimateOutput { columns, visited_cells, candidate_evaluations })
}

/// Region-restricted estimation: only columns touched by a region are
/// processed, and only over the delay bins the regions cover there.
pub fn estimate_all<T: Real>(
    cfr: &ChannelFrequencyResponse<T>,
    regions: &[Region<T>],
    settings: &SageSettings,
    noise_floor_db: T,
) -> Result<EstimateOutput<T>> {
    let mut per_column: Vec<Vec<(usize, u32)>> = vec![Vec::new(); cfr.n_angles()];
    for r in regions {
        for c in &r.cells {
            if c.j < per_column.len() && c.i < cfr.n_freq() {
                per_column[c.j].push((c.i, r.label));
            }
        }
    }
    let per_column = per_column.into_iter().enumerate().filter(|(_, b)| !b.is_empty()).collect();
    run_columns(cfr, per_column, settings, noise_floor_db)
}

/// Baseline: every delay bin of every column. Path labels are read from
/// `label_map` (row-major delay × angle, 0 outside regions).
pub fn estimate_full_grid<T: Real>(
    cfr: &ChannelFrequencyResponse<T>,
    label_map: &[u32],
    settings: &SageSettings,
    noise_floor_db: T,
) -> Result<EstimateOutput<T>> {
    let (nd, na) = (cfr.n_freq(), cfr.n_angles());
    if label_map.len() != nd * na {
        return Err(Error::ShapeMismatch("label map does not match the CFR grid".into()));
    }
    let per_column = (0..na).map(|j| (j, (0..nd).map(|i| (i, label_map[i * na + j])).collect())).collect();
    run_columns(cfr, per_column, settings, noise_floor_db)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSample<T> {
    pub column: usize,
    pub phi_deg: T,
    pub beta: Complex<T>,
    pub tau_s: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub label: u32,
    /// In scan order (a trajectory crossing 360° continues from column 0).
    pub samples: Vec<TrackSample<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Nearest-neighbour association across consecutive rotation angles.
///
/// A path joins the active trajectory of the same region label whose last
/// sample is at most two columns back (one missed angle) and within
/// `gate_s` per column step, choosing the smallest delay jump. Stronger paths
/// are associated first. Trajectories crossing the end of the scan are joined
/// with those starting at its beginning, and any shorter than `min_len` are
/// discarded.
pub fn track_trajectories<T: Real>(
    columns: &[ColumnEstimate<T>],
    n_angles: usize,
    gate_s: T,
    min_len: usize,
) -> Vec<Trajectory<T>> {
    const MAX_STEP: usize = 2;
    let mut order: Vec<&ColumnEstimate<T>> = columns.iter().collect();
    order.sort_by_key(|c| c.column);

    let mut tracks: Vec<Trajectory<T>> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    for col in order {
        active.retain(|&t| col.column - tracks[t].samples.last().map_or(0, |s| s.column) <= MAX_STEP);
        let mut taken = vec![false; active.len()];
        for p in &col.paths {
            let mut best: Option<(usize, T)> = None;
            for (slot, &t) in active.iter().enumerate() {
                let last = tracks[t].samples.last().expect("tracks are never empty");
                if taken[slot] || tracks[t].label != p.label || last.column == col.column {
                    continue;
                }
                let steps = T::from_usize_lossy(col.column - last.column);
                let jump = (p.tau_s - last.tau_s).abs();
                if jump <= gate_s * steps && best.is_none_or(|(_, b)| jump < b) {
                    best = Some((slot, jump));
                }
            }
            let sample = TrackSample { column: col.column, phi_deg: col.phi_deg, beta: p.beta, tau_s: p.tau_s };
            match best {
                Some((slot, _)) => {
                    taken[slot] = true;
                    tracks[active[slot]].samples.push(sample);
                }
                None => {
                    tracks.push(Trajectory { label: p.label, samples: vec![sample] });
                    active.push(tracks.len() - 1);
                    taken.push(true);
                }
            }
        }
    }

    // Join across the 359° → 0° seam.
    let mut absorbed = vec![false; tracks.len()];
    for a in 0..tracks.len() {
        if absorbed[a] {
            continue;
        }
        let end = *tracks[a].samples.last().expect("non-empty");
        let mut best: Option<(usize, T)> = None;
        for b in 0..tracks.len() {
            if b == a || absorbed[b] || tracks[b].label != tracks[a].label {
                continue;
            }
            let start = tracks[b].samples[0];
            let steps = start.column + n_angles - end.column;
            if steps == 0 || steps > MAX_STEP || start.column >= end.column {
                continue;
            }
            let jump = (start.tau_s - end.tau_s).abs();
            if jump <= gate_s * T::from_usize_lossy(steps) && best.is_none_or(|(_, j)| jump < j) {
                best = Some((b, jump));
            }
        }
        if let Some((b, _)) = best {
            let tail = std::mem::take(&mut tracks[b].samples);
            tracks[a].samples.extend(tail);
            absorbed[b] = true;
        }
    }

    tracks
        .into_iter()
        .zip(absorbed)
        .filter(|(t, gone)| !gone && t.samples.len() >= min_len.max(1))
        .map(|(t, _)| t)
        .collect()
}

/// One de-embedded path per trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeembeddedMpc<T> {
    pub alpha: Complex<T>,
    pub tau_s: T,
    pub phi_deg: T,
    pub column: usize,
    pub region_label: u32,
    /// `20·log10|α|`.
    pub power_db: T,
}

/// Keeps each trajectory's strongest sample (ties: lowest angle) and removes
/// the combined antenna peak gain from its amplitude. Output is sorted by
/// region label, then angle.
pub fn deembed<T: Real>(trajectories: &[Trajectory<T>], pattern: &AntennaPattern<T>) -> Vec<DeembeddedMpc<T>> {
    let scale = pattern.peak_gain().sqrt();
    let mut out: Vec<DeembeddedMpc<T>> = trajectories
        .iter()
        .filter_map(|t| {
            let best = t.samples.iter().copied().reduce(|best, s| {
                let (a, b) = (s.beta.norm(), best.beta.norm());
                if a > b || (a == b && s.phi_deg < best.phi_deg) {
                    s
                } else {
                    best
                }
            })?;
            let alpha = best.beta / scale;
            Some(DeembeddedMpc {
                alpha,
                tau_s: best.tau_s,
                phi_deg: best.phi_deg,
                column: best.column,
                region_label: t.label,
                power_db: amplitude_to_db(alpha.norm()),
            })
        })
        .collect();
    out.sort_by(|a, b| {
        a.region_label
            .cmp(&b.region_label)
            .then(a.phi_deg.total_cmp_or_eq(&b.phi_deg))
            .then(a.tau_s.total_cmp_or_eq(&b.tau_s))
    });
    out
}

/// Re-applies the antenna peak gain, giving one single-sample trajectory per path.
pub fn lift<T: Real>(mpcs: &[DeembeddedMpc<T>], pattern: &AntennaPattern<T>) -> Vec<Trajectory<T>> {
    let scale = pattern.peak_gain().sqrt();
    mpcs.iter()
        .map(|m| Trajectory {
            label: m.region_label,
            samples: vec![TrackSample { column: m.column, phi_deg: m.phi_deg, beta: m.alpha * scale, tau_s: m.tau_s }],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{synthesize_cfr, ArrayConfig, Mpc, NoiseSpec};
    use crate::padp::{cfr_to_cir, compute_padp, Taper};
    use crate::segmentation::{segment, SegmentationSettings};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn engine() -> SageEngine<f64> {
        let cfg = ArrayConfig::<f64>::default();
        SageEngine::new(cfg.frequency_grid(), 0.01e-9, 5 * 2001 + 5)
    }

    fn tone(engine: &SageEngine<f64>, paths: &[(Complex<f64>, usize)]) -> Vec<Complex<f64>> {
        let g = engine.grid;
        let mut h = vec![Complex::new(0.0, 0.0); g.len];
        for &(beta, m) in paths {
            crate::channel::accumulate_tone(&mut h, &g, beta, engine.delay(m));
        }
        h
    }

    fn window(lo: usize, hi: usize) -> DelayCandidates {
        DelayCandidates { index: (lo..hi).collect(), label: vec![1; hi - lo] }
    }

    #[test]
    fn kernel_table_matches_direct_correlation() {
        let e = engine();
        let h = tone(&e, &[(Complex::new(1.0, 0.0), 700)]);
        for m in [650, 699, 700, 701, 833] {
            let c = e.correlate(&h, m);
            let k = e.kernel(m, 700);
            assert!((c - k).norm() < 1e-8, "{m}: {c} vs {k}");
        }
        assert_relative_eq!(e.kernel(5, 5).re, 2001.0, epsilon = 1e-9);
        let idx = [650, 699, 700, 701, 833];
        for (c, &m) in e.correlate_all(&h, &idx).iter().zip(&idx) {
            assert!((c - e.correlate(&h, m)).norm() < 1e-9);
        }
    }

    #[test]
    fn single_on_grid_path_is_recovered_exactly() {
        let e = engine();
        let beta = Complex::new(0.3, -0.4);
        let h = tone(&e, &[(beta, 1234)]);
        let (paths, _) = sage_column(&h, &e, &window(1000, 1500), 4, 1, -200.0).unwrap();
        assert_eq!(paths[0].tau_s, e.delay(1234));
        assert!((paths[0].beta - beta).norm() < 1e-12);
        assert!(paths.iter().skip(1).all(|p| p.beta.norm() < 1e-9));
    }

    #[test]
    fn empty_candidates_give_no_paths() {
        let e = engine();
        let h = tone(&e, &[(Complex::new(1.0, 0.0), 100)]);
        let (paths, _) = sage_column(&h, &e, &DelayCandidates::default(), 4, 1, -200.0).unwrap();
        assert!(paths.is_empty());
    }

    #[test]
    fn non_finite_column_is_rejected() {
        let e = engine();
        let mut h = tone(&e, &[(Complex::new(1.0, 0.0), 100)]);
        h[7].re = f64::NAN;
        assert!(matches!(sage_column(&h, &e, &window(0, 10), 1, 1, -200.0), Err(Error::NonFinite)));
    }

    /// Exhaustive two-path least squares over all candidate pairs.
    fn two_path_oracle(e: &SageEngine<f64>, h: &[Complex<f64>], cands: &[usize]) -> (usize, usize) {
        let n = h.len() as f64;
        let c: Vec<Complex<f64>> = cands.iter().map(|&m| e.correlate(h, m)).collect();
        let mut best = (0, 0, f64::NEG_INFINITY);
        for a in 0..cands.len() {
            for b in a + 1..cands.len() {
                // Projection energy of H onto span{s_a, s_b}.
                let k = e.kernel(cands[b], cands[a]);
                let det = n * n - k.norm_sqr();
                if det <= 1e-9 * n * n {
                    continue;
                }
                let ca = c[a];
                let cb = c[b];
                let energy = (n * (ca.norm_sqr() + cb.norm_sqr()) - 2.0 * (ca.conj() * k.conj() * cb).re) / det;
                if energy > best.2 {
                    best = (cands[a], cands[b], energy);
                }
            }
        }
        (best.0, best.1)
    }

    #[test]
    fn two_separated_paths_match_grid_oracle() {
        let e = engine();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let m1 = rng.random_range(400..500);
            let m2 = m1 + rng.random_range(15..40);
            let b1 = Complex::from_polar(1.0, rng.random_range(0.0..6.28));
            let b2 = Complex::from_polar(rng.random_range(0.3..1.0), rng.random_range(0.0..6.28));
            let h = tone(&e, &[(b1, m1), (b2, m2)]);
            let cands: Vec<usize> = (m1 - 10..m2 + 10).collect();
            let oracle = two_path_oracle(&e, &h, &cands);
            assert_eq!(oracle, (m1, m2));
            let (paths, _) = sage_column(&h, &e, &window(m1 - 10, m2 + 10), 2, 3, -200.0).unwrap();
            let mut found: Vec<usize> = paths.iter().map(|p| (p.tau_s / e.step_s).round() as usize).collect();
            found.sort();
            assert_eq!(found, vec![m1, m2]);
        }
    }

    #[test]
    fn stop_rule_halts_at_the_noise_margin() {
        let e = engine();
        let h = tone(&e, &[(Complex::new(1.0, 0.0), 300), (Complex::new(1e-4, 0.0), 600)]);
        // Second path is at −80 dB; stopping at −60 dB keeps only the first.
        let (paths, _) = sage_column(&h, &e, &window(200, 700), 8, 1, -60.0).unwrap();
        assert_eq!(paths.len(), 1);
    }

    #[test]
    fn candidates_cover_sub_bins() {
        let c = DelayCandidates::from_bins([(0, 1), (1, 1), (7, 2)], 5);
        assert_eq!(c.index, vec![0, 1, 2, 3, 4, 5, 6, 7, 33, 34, 35, 36, 37]);
        assert_eq!(c.label[10], 2);
        let even = DelayCandidates::from_bins([(2, 1)], 4);
        assert_eq!(even.index, vec![6, 7, 8, 9]);
    }

    #[test]
    fn refinement_must_divide_the_bin() {
        let s = SageSettings { delay_step_s: 0.01e-9, ..Default::default() };
        assert_eq!(s.refinement(0.05e-9).unwrap(), 5);
        let bad = SageSettings { delay_step_s: 0.03e-9, ..Default::default() };
        assert!(bad.refinement(0.05e-9).is_err());
    }

    fn col(column: usize, paths: &[(f64, f64, u32)]) -> ColumnEstimate<f64> {
        ColumnEstimate {
            column,
            phi_deg: column as f64,
            paths: paths.iter().map(|&(b, t, l)| PathEstimate { beta: Complex::new(b, 0.0), tau_s: t, label: l }).collect(),
            residual_energy: vec![],
            candidates: 0,
        }
    }

    #[test]
    fn constant_path_forms_one_trajectory() {
        let cols: Vec<_> = (10..30).map(|j| col(j, &[(1.0, 5e-9, 1)])).collect();
        let t = track_trajectories(&cols, 360, 0.1e-9, 3);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 20);
    }

    #[test]
    fn distant_paths_never_merge() {
        let cols: Vec<_> = (0..20).map(|j| col(j + 50, &[(1.0, 5e-9, 1), (0.5, 9e-9, 1)])).collect();
        let t = track_trajectories(&cols, 360, 0.1e-9, 3);
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|t| t.len() == 20));
    }

    #[test]
    fn short_tracks_are_dropped_and_gaps_bridged() {
        let mut cols = vec![col(0, &[(1.0, 5e-9, 1)]), col(1, &[(1.0, 5e-9, 1)])];
        assert!(track_trajectories(&cols, 360, 0.1e-9, 3).is_empty());
        cols.push(col(3, &[(1.0, 5e-9, 1)]));
        assert_eq!(track_trajectories(&cols, 360, 0.1e-9, 3).len(), 1);
        cols.push(col(6, &[(1.0, 5e-9, 1)]));
        assert_eq!(track_trajectories(&cols, 360, 0.1e-9, 3)[0].len(), 3);
    }

    #[test]
    fn labels_separate_trajectories() {
        let cols: Vec<_> = (0..5).map(|j| col(j, &[(1.0, 5e-9, 1), (0.9, 5.01e-9, 2)])).collect();
        let t = track_trajectories(&cols, 360, 0.1e-9, 3);
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|t| t.samples.len() == 5));
    }

    #[test]
    fn trajectories_cross_the_seam() {
        let cols: Vec<_> = [357, 358, 359, 0, 1, 2].iter().map(|&j| col(j, &[(1.0, 5e-9, 1)])).collect();
        let t = track_trajectories(&cols, 360, 0.1e-9, 3);
        assert_eq!(t.len(), 1);
        let order: Vec<usize> = t[0].samples.iter().map(|s| s.column).collect();
        assert_eq!(order, vec![357, 358, 359, 0, 1, 2]);
    }

    #[test]
    fn deembedding_examples() {
        let pattern = ArrayConfig::<f64>::default().pattern();
        let rising = Trajectory {
            label: 1,
            samples: (0..5)
                .map(|k| TrackSample { column: k, phi_deg: k as f64, beta: Complex::new(k as f64 + 1.0, 0.0), tau_s: 1e-9 })
                .collect(),
        };
        let flat = Trajectory {
            label: 2,
            samples: (10..15)
                .rev()
                .map(|k| TrackSample { column: k, phi_deg: k as f64, beta: Complex::new(0.0, 2.0), tau_s: 1e-9 })
                .collect(),
        };
        let d = deembed(&[flat, rising], &pattern);
        assert_eq!(d[0].phi_deg, 4.0);
        assert_eq!(d[1].phi_deg, 10.0);
        assert_relative_eq!(d[0].power_db, 20.0 * 5f64.log10() - 52.0, epsilon = 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn residual_energy_never_increases(seed in any::<u64>(), noisy in any::<bool>()) {
            let e = engine();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let paths: Vec<(Complex<f64>, usize)> = (0..rng.random_range(1..5))
                .map(|_| (Complex::from_polar(rng.random_range(0.1..1.0), rng.random_range(0.0..6.28)), rng.random_range(200..400)))
                .collect();
            let mut h = tone(&e, &paths);
            if noisy {
                for z in h.iter_mut() {
                    *z += Complex::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * 0.05;
                }
            }
            let (_, trace) = sage_column(&h, &e, &window(150, 450), 6, 2, -300.0).unwrap();
            for w in trace.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-9);
            }
            // Tracked energy equals the true residual norm.
            let (est, trace) = sage_column(&h, &e, &window(150, 450), 6, 2, -300.0).unwrap();
            let mut res = h.clone();
            for p in &est {
                crate::channel::accumulate_tone(&mut res, &e.grid, -p.beta, p.tau_s);
            }
            let direct: f64 = res.iter().map(|z| z.norm_sqr()).sum();
            prop_assert!((direct - trace.last().unwrap()).abs() <= 1e-6 * trace[0]);
        }

        #[test]
        fn deembed_of_lifted_output_is_identity(n in 1usize..20, seed in any::<u64>()) {
            let pattern = ArrayConfig::<f64>::default().pattern();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let trajectories: Vec<Trajectory<f64>> = (0..n).map(|k| Trajectory {
                label: rng.random_range(1..4),
                samples: (0..rng.random_range(3..8)).map(|s| TrackSample {
                    column: k * 10 + s,
                    phi_deg: (k * 10 + s) as f64,
                    beta: Complex::from_polar(rng.random_range(0.01..1.0), rng.random_range(0.0..6.28)),
                    tau_s: rng.random_range(1e-9..3e-8),
                }).collect(),
            }).collect();
            let once = deembed(&trajectories, &pattern);
            let twice = deembed(&lift(&once, &pattern), &pattern);
            prop_assert_eq!(once.len(), twice.len());
            for (a, b) in once.iter().zip(&twice) {
                prop_assert_eq!((a.column, a.region_label, a.tau_s), (b.column, b.region_label, b.tau_s));
                prop_assert!((a.alpha - b.alpha).norm() <= 1e-12 * a.alpha.norm());
            }
        }
    }

    #[test]
    fn restricted_and_full_grid_agree_on_noiseless_data() {
        let cfg = ArrayConfig {
            rotation_angles_deg: (0..40).map(|a| a as f64 * 9.0).collect(),
            sidelobe_floor_db: 80.0,
            ..ArrayConfig::default()
        };
        let mpcs = [
            Mpc { amplitude: Complex::new(3e-3, 0.0), delay_s: 7.123e-9, angle_deg: 90.0 },
            Mpc { amplitude: Complex::new(2e-3, 0.0), delay_s: 12.5e-9, angle_deg: 200.0 },
        ];
        let noise = NoiseSpec { power_db: -50.0, seed: 5 };
        let cfr = synthesize_cfr(&mpcs, &cfg, Some(&noise)).unwrap();
        let padp = compute_padp(&cfr_to_cir(&cfr, Taper::Rectangular));
        let (_, regions) = segment(&padp, &SegmentationSettings::default()).unwrap();
        let settings = SageSettings { max_paths: 2, ..Default::default() };
        let restricted = estimate_all(&cfr, &regions, &settings, padp.noise_floor_db).unwrap();
        let map = crate::segmentation::region_label_map(&regions, padp.n_delay(), padp.n_angles());
        let full = estimate_full_grid(&cfr, &map, &settings, padp.noise_floor_db).unwrap();
        assert!(restricted.columns.len() < full.columns.len());
        for r in restricted.columns.iter().filter(|r| !r.paths.is_empty()) {
            let f = full.columns.iter().find(|f| f.column == r.column).unwrap();
            let (a, b) = (&r.paths[0], &f.paths[0]);
            assert!((a.tau_s - b.tau_s).abs() <= 0.005e-9);
            assert!((a.beta - b.beta).norm() <= 0.01 * b.beta.norm());
        }
        assert!(restricted.visited_cells * 5 <= full.visited_cells);
    }
}
