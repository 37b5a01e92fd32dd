//! Region-restricted versus full-grid estimation on one TRx.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use terasense_core::channel::{synthesize_cfr, NoiseSpec};
use terasense_core::padp::{cfr_to_cir, compute_padp};
use terasense_core::sage::DeembeddedMpc;
use terasense_core::scene::generate_ground_truth;
use terasense_core::segmentation::segment;

use crate::config::PipelineConfig;
use crate::error::{AtStage, StageError, StageResult};
use crate::stages::estimate_trx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub trx_id: usize,
    pub region_cells: usize,
    pub total_cells: usize,
    /// `region_cells / total_cells`.
    pub ratio: f64,
    pub region_time_s: f64,
    pub full_time_s: f64,
    /// `full_time_s / region_time_s`; absent when estimation was skipped.
    pub speedup: Option<f64>,
    pub region_mpcs: usize,
    pub full_mpcs: usize,
    /// Region-run MPCs with a full-grid MPC at the same label and column.
    pub matched_mpcs: usize,
    /// Largest delay difference over matched MPCs, in PADP bins.
    pub max_delay_diff_bins: f64,
    /// Matched MPCs whose delays agree within one PADP bin.
    pub within_one_bin: usize,
}

/// Matches MPCs of the two runs by `(region_label, column)`.
/// Returns `(matched, max |Δτ| in bins, count within one bin)`.
pub fn compare_mpcs(region: &[DeembeddedMpc<f64>], full: &[DeembeddedMpc<f64>], bin_s: f64) -> (usize, f64, usize) {
    let index: BTreeMap<(u32, usize), Vec<f64>> = full.iter().fold(BTreeMap::new(), |mut m, x| {
        m.entry((x.region_label, x.column)).or_insert_with(Vec::new).push(x.tau_s);
        m
    });
    let diffs: Vec<f64> = region
        .iter()
        .filter_map(|m| {
            index.get(&(m.region_label, m.column)).map(|taus| {
                taus.iter().map(|t| (t - m.tau_s).abs() / bin_s).fold(f64::INFINITY, f64::min)
            })
        })
        .collect();
    let max = diffs.iter().copied().fold(0.0, f64::max);
    let within = diffs.iter().filter(|&&d| d <= 1.0).count();
    (diffs.len(), max, within)
}

/// Simulates TRx `trx`, segments its PADP, and times region-restricted
/// and full-grid SAGE on the same CFR. With no regions both runs are
/// skipped and the ratio is 0.
pub fn benchmark_search_space(cfg: &PipelineConfig, trx: usize) -> StageResult<BenchReport> {
    const S: &str = "bench";
    cfg.validate()?;
    let scene = cfg.load_scene()?;
    if trx >= scene.trx_positions.len() {
        return Err(StageError::new(S, format!("TRx {trx} not in scene ({} positions)", scene.trx_positions.len())));
    }
    let db = cfg.load_database()?;
    let gt = generate_ground_truth(&scene, &cfg.array, &db).at(S)?;
    let noise = cfg.noise.enabled.then(|| NoiseSpec { power_db: cfg.noise.power_db, seed: cfg.noise_seed(trx) });
    let cfr = synthesize_cfr(&gt.mpcs(trx, &cfg.array), &cfg.array, noise.as_ref()).at(S)?;
    let padp = compute_padp(&cfr_to_cir(&cfr, cfg.padp.taper));
    let (_, regions) = segment(&padp, &cfg.segmentation).at(S)?;
    let total_cells = cfr.n_freq() * cfr.n_angles();
    let region_cells: usize = regions.iter().map(|r| r.cell_count()).sum();

    let mut report = BenchReport {
        trx_id: trx,
        region_cells,
        total_cells,
        ratio: region_cells as f64 / total_cells as f64,
        region_time_s: 0.0,
        full_time_s: 0.0,
        speedup: None,
        region_mpcs: 0,
        full_mpcs: 0,
        matched_mpcs: 0,
        max_delay_diff_bins: 0.0,
        within_one_bin: 0,
    };
    if regions.is_empty() {
        return Ok(report);
    }
    let t0 = Instant::now();
    let (_, region_mpcs) = estimate_trx(&cfr, &regions, padp.noise_floor_db, cfg, false).at(S)?;
    report.region_time_s = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let (_, full_mpcs) = estimate_trx(&cfr, &regions, padp.noise_floor_db, cfg, true).at(S)?;
    report.full_time_s = t0.elapsed().as_secs_f64();
    report.speedup = Some(report.full_time_s / report.region_time_s.max(1e-12));
    let (matched, max_diff, within) = compare_mpcs(&region_mpcs, &full_mpcs, cfg.array.delay_step_s());
    report.region_mpcs = region_mpcs.len();
    report.full_mpcs = full_mpcs.len();
    report.matched_mpcs = matched;
    report.max_delay_diff_bins = max_diff;
    report.within_one_bin = within;
    Ok(report)
}
