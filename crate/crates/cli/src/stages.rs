//! The six file-to-file stages. Each reads only artifacts written by the
//! stages before it, so any stage can be rerun on its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use terasense_core::baseline::max_search;
use terasense_core::channel::{synthesize_cfr, ChannelFrequencyResponse, NoiseSpec};
use terasense_core::geometry::{compute_metrics, map_region, Metrics, RegionMap, StructureTemplate};
use terasense_core::materials::{calibrate_to_normal, classify_region, identify_material, mpc_reflection_loss, MaterialMatch};
use terasense_core::padp::{cfr_to_cir, compute_padp};
use terasense_core::sage::{deembed, estimate_all, estimate_full_grid, track_trajectories, DeembeddedMpc, EstimateOutput};
use terasense_core::scalar::{amplitude_to_db, wrap_deg_180};
use terasense_core::scene::{generate_ground_truth, Point2, Scene};
use terasense_core::segmentation::{region_label_map, segment as segment_padp, BoundingBox, Region};

use crate::config::PipelineConfig;
use crate::error::{AtStage, StageError, StageResult};
use crate::io::{self, CfrMeta, EstimateRow, GroundTruthRow, MpcRow, PointRow, StructureRow};

pub const STAGES: [&str; 6] = ["simulate", "padp", "segment", "estimate", "map", "identify"];

pub fn run_stage(name: &str, cfg: &PipelineConfig) -> StageResult<()> {
    match name {
        "simulate" => simulate(cfg),
        "padp" => padp(cfg),
        "segment" => segment(cfg),
        "estimate" => estimate(cfg),
        "map" => map(cfg),
        "identify" => identify(cfg),
        other => Err(StageError::new("config", format!("unknown stage `{other}`"))),
    }
}

fn out_dir(cfg: &PipelineConfig, stage: &str) -> StageResult<std::path::PathBuf> {
    io::create_dir(&cfg.output_dir).at(stage)?;
    Ok(cfg.output_dir.clone())
}

fn read_scene(out: &Path, stage: &str) -> StageResult<Scene<f64>> {
    io::read_json(&out.join("scene.json")).at(stage)
}

/// Scene → `scene.json`, `ground_truth.csv` and one `cfr.bin`/`cfr.json`
/// pair per TRx.
pub fn simulate(cfg: &PipelineConfig) -> StageResult<()> {
    const S: &str = "simulate";
    let out = out_dir(cfg, S)?;
    let scene = cfg.load_scene()?;
    let db = cfg.load_database()?;
    let gt = generate_ground_truth(&scene, &cfg.array, &db).at(S)?;

    // Stale TRx directories from a larger earlier run would leak into later stages.
    if let Ok(old) = io::trx_dirs(&out) {
        for (_, dir) in old {
            fs::remove_dir_all(&dir).map_err(|e| StageError::new(S, format!("{}: {e}", dir.display())))?;
        }
    }

    io::write_json(&out.join("scene.json"), &scene).at(S)?;
    let rows: Vec<GroundTruthRow> = gt
        .paths
        .iter()
        .map(|p| GroundTruthRow {
            trx_id: p.trx,
            column: p.column,
            phi_deg: p.phi_deg,
            tau_ns: p.tau_s * 1e9,
            theta_deg: p.theta_deg,
            power_db: p.power_db,
            wall_id: p.wall,
            hit_x_m: p.hit.x,
            hit_y_m: p.hit.y,
        })
        .collect();
    io::write_csv(&out.join("ground_truth.csv"), &rows).at(S)?;

    for (t, &pos) in scene.trx_positions.iter().enumerate() {
        let noise = cfg.noise.enabled.then(|| NoiseSpec { power_db: cfg.noise.power_db, seed: cfg.noise_seed(t) });
        let cfr = synthesize_cfr(&gt.mpcs(t, &cfg.array), &cfg.array, noise.as_ref()).at(S)?;
        let dir = io::trx_dir(&out, t);
        io::create_dir(&dir).at(S)?;
        let meta = CfrMeta {
            trx_id: t,
            trx_position: pos,
            n_freq: cfr.n_freq(),
            n_angles: cfr.n_angles(),
            layout: io::CFR_LAYOUT.to_string(),
            noise_power_db: noise.map(|n| n.power_db),
            array: cfg.array.clone(),
        };
        io::write_cfr(&dir, &cfr, &meta).at(S)?;
    }
    Ok(())
}

/// `cfr.bin` → `padp.csv` + `padp.json`.
pub fn padp(cfg: &PipelineConfig) -> StageResult<()> {
    const S: &str = "padp";
    for (t, dir) in io::trx_dirs(&cfg.output_dir).at(S)? {
        let (cfr, _) = io::read_cfr(&dir).at(S)?;
        let padp = compute_padp(&cfr_to_cir(&cfr, cfg.padp.taper));
        io::write_padp(&dir, &padp, t).at(S)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSummary {
    pub label: u32,
    pub cells: usize,
    pub bbox: BoundingBox,
    pub peak_power_db: f64,
    pub tau_min_ns: f64,
    pub tau_max_ns: f64,
}

/// `padp.csv` → `regions.csv` (one row per cell) + `regions.json`.
pub fn segment(cfg: &PipelineConfig) -> StageResult<()> {
    const S: &str = "segment";
    for (_, dir) in io::trx_dirs(&cfg.output_dir).at(S)? {
        let (padp, _) = io::read_padp(&dir).at(S)?;
        let (_, regions) = segment_padp(&padp, &cfg.segmentation).at(S)?;
        io::write_regions(&dir, &regions).at(S)?;
        let summary: Vec<RegionSummary> = regions
            .iter()
            .map(|r| RegionSummary {
                label: r.label,
                cells: r.cell_count(),
                bbox: r.bbox,
                peak_power_db: r.peak_power_db,
                tau_min_ns: padp.delay_grid_s[r.bbox.i_min] * 1e9,
                tau_max_ns: padp.delay_grid_s[r.bbox.i_max] * 1e9,
            })
            .collect();
        io::write_json(&dir.join("regions.json"), &summary).at(S)?;
    }
    Ok(())
}

/// Search-space counters of one estimation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub trx_id: usize,
    pub full_grid: bool,
    pub visited_cells: usize,
    pub total_cells: usize,
    pub visited_ratio: f64,
    pub candidate_evaluations: usize,
    pub columns: usize,
    pub paths: usize,
    pub mpcs: usize,
}

/// SAGE over the regions (or every cell), then tracking and de-embedding.
/// Paths outside every region are not tracked.
pub fn estimate_trx(
    cfr: &ChannelFrequencyResponse<f64>,
    regions: &[Region<f64>],
    noise_floor_db: f64,
    cfg: &PipelineConfig,
    full_grid: bool,
) -> terasense_core::Result<(EstimateOutput<f64>, Vec<DeembeddedMpc<f64>>)> {
    let est = if regions.is_empty() {
        EstimateOutput { columns: Vec::new(), visited_cells: 0, candidate_evaluations: 0 }
    } else if full_grid {
        let labels = region_label_map(regions, cfr.n_freq(), cfr.n_angles());
        estimate_full_grid(cfr, &labels, &cfg.sage, noise_floor_db)?
    } else {
        estimate_all(cfr, regions, &cfg.sage, noise_floor_db)?
    };
    let gate = cfg.sage.gate_bins * cfr.config().delay_step_s();
    let mut tracks = track_trajectories(&est.columns, cfr.n_angles(), gate, cfg.sage.min_trajectory_len);
    tracks.retain(|t| t.label > 0);
    let mpcs = deembed(&tracks, &cfr.config().pattern());
    Ok((est, mpcs))
}

fn mpc_rows(trx_id: usize, mpcs: &[DeembeddedMpc<f64>]) -> Vec<MpcRow> {
    mpcs.iter()
        .map(|m| MpcRow {
            trx_id,
            region_label: m.region_label,
            column: m.column,
            theta_deg: m.phi_deg,
            tau_ns: m.tau_s * 1e9,
            alpha_re: m.alpha.re,
            alpha_im: m.alpha.im,
            alpha_db: m.power_db,
        })
        .collect()
}

pub fn mpcs_from_rows(rows: &[MpcRow]) -> Vec<DeembeddedMpc<f64>> {
    rows.iter()
        .map(|r| DeembeddedMpc {
            alpha: Complex::new(r.alpha_re, r.alpha_im),
            tau_s: r.tau_ns * 1e-9,
            phi_deg: r.theta_deg,
            column: r.column,
            region_label: r.region_label,
            power_db: r.alpha_db,
        })
        .collect()
}

const MPC_HEADER: [&str; 8] = ["trx_id", "region_label", "column", "theta_deg", "tau_ns", "alpha_re", "alpha_im", "alpha_db"];

/// `cfr.bin` + `regions.csv` + `padp.json` → `estimates.csv`, `mpcs.csv`,
/// `search.json`.
pub fn estimate(cfg: &PipelineConfig) -> StageResult<()> {
    const S: &str = "estimate";
    for (t, dir) in io::trx_dirs(&cfg.output_dir).at(S)? {
        let (cfr, _) = io::read_cfr(&dir).at(S)?;
        let meta: io::PadpMeta = io::read_json(&dir.join("padp.json")).at(S)?;
        let regions = io::read_regions(&dir).at(S)?;
        let (est, mpcs) = estimate_trx(&cfr, &regions, meta.noise_floor_db, cfg, cfg.full_grid).at(S)?;

        let estimates: Vec<EstimateRow> = est
            .columns
            .iter()
            .flat_map(|c| {
                c.paths.iter().enumerate().map(move |(rank, p)| EstimateRow {
                    column: c.column,
                    phi_deg: c.phi_deg,
                    rank,
                    region_label: p.label,
                    tau_ns: p.tau_s * 1e9,
                    beta_re: p.beta.re,
                    beta_im: p.beta.im,
                    beta_db: amplitude_to_db(p.beta.norm()),
                })
            })
            .collect();
        io::write_csv_with_header(
            &dir.join("estimates.csv"),
            &["column", "phi_deg", "rank", "region_label", "tau_ns", "beta_re", "beta_im", "beta_db"],
            &estimates,
        )
        .at(S)?;
        io::write_csv_with_header(&dir.join("mpcs.csv"), &MPC_HEADER, &mpc_rows(t, &mpcs)).at(S)?;
        let total_cells = cfr.n_freq() * cfr.n_angles();
        let report = SearchReport {
            trx_id: t,
            full_grid: cfg.full_grid,
            visited_cells: est.visited_cells,
            total_cells,
            visited_ratio: est.visited_cells as f64 / total_cells as f64,
            candidate_evaluations: est.candidate_evaluations,
            columns: est.columns.len(),
            paths: estimates.len(),
            mpcs: mpcs.len(),
        };
        io::write_json(&dir.join("search.json"), &report).at(S)?;
    }
    Ok(())
}

/// Fits and maps every region of one TRx, in label order.
pub fn map_trx(mpcs: &[DeembeddedMpc<f64>], trx: Point2<f64>, trx_id: usize, cfg: &PipelineConfig) -> terasense_core::Result<Vec<RegionMap<f64>>> {
    let mut groups: BTreeMap<u32, Vec<DeembeddedMpc<f64>>> = BTreeMap::new();
    for m in mpcs {
        groups.entry(m.region_label).or_default().push(*m);
    }
    groups.values().map(|g| map_region(g, trx, trx_id, cfg.array.radius_m, &cfg.mapper)).collect()
}

/// Error statistics of one point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSetMetrics {
    pub n_points: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Sliding-window output of regions with a fitted structure.
    pub filtered: Option<PointSetMetrics>,
    /// Every de-embedded MPC, unsmoothed.
    pub raw: Option<PointSetMetrics>,
    /// Per-column maximum search on the PADP.
    pub baseline: Option<PointSetMetrics>,
    /// Baseline MDE over filtered MDE.
    pub baseline_mde_ratio: Option<f64>,
}

fn point_metrics(points: &[Point2<f64>], walls: &[(Point2<f64>, Point2<f64>)]) -> StageResult<Option<PointSetMetrics>> {
    if points.is_empty() {
        return Ok(None);
    }
    let metrics = compute_metrics(points, walls).at("map")?;
    Ok(Some(PointSetMetrics { n_points: points.len(), metrics }))
}

fn point_row(p: &terasense_core::geometry::MapPoint<f64>) -> PointRow {
    PointRow {
        trx_id: p.trx_id,
        region_label: p.region_label,
        theta_deg: p.phi_deg,
        tau_ns: p.tau_s * 1e9,
        x_m: p.x_m,
        y_m: p.y_m,
        filtered: p.filtered,
    }
}

const POINT_HEADER: [&str; 7] = ["trx_id", "region_label", "theta_deg", "tau_ns", "x_m", "y_m", "filtered"];

/// `mpcs.csv` + `padp.csv` + `scene.json` → `points.csv`, `structures.csv`,
/// `baseline_points.csv`, `metrics.json`.
pub fn map(cfg: &PipelineConfig) -> StageResult<()> {
    const S: &str = "map";
    let out = cfg.output_dir.clone();
    let scene = read_scene(&out, S)?;
    let walls = scene.segments();
    let (mut points, mut structures, mut baseline) = (Vec::new(), Vec::new(), Vec::new());
    for (t, dir) in io::trx_dirs(&out).at(S)? {
        let trx = *scene
            .trx_positions
            .get(t)
            .ok_or_else(|| StageError::new(S, format!("scene.json has no TRx {t}")))?;
        let rows: Vec<MpcRow> = io::read_csv(&dir.join("mpcs.csv")).at(S)?;
        for rm in map_trx(&mpcs_from_rows(&rows), trx, t, cfg).at(S)? {
            let row = match &rm.fit {
                Some(f) => StructureRow {
                    trx_id: t,
                    region_label: rm.region_label,
                    kind: f.template.kind.name().to_string(),
                    d1_m: f.template.d1_m,
                    d2_m: f.template.d2_m,
                    theta0_deg: f.template.theta0_deg,
                    rmse_ns: f.rmse_s * 1e9,
                    n_points: rm.points.len(),
                },
                None => StructureRow {
                    trx_id: t,
                    region_label: rm.region_label,
                    kind: "none".into(),
                    d1_m: f64::NAN,
                    d2_m: f64::NAN,
                    theta0_deg: f64::NAN,
                    rmse_ns: f64::NAN,
                    n_points: rm.points.len(),
                },
            };
            structures.push(row);
            points.extend(rm.points.iter().chain(&rm.filtered).map(point_row));
        }
        let (padp, _) = io::read_padp(&dir).at(S)?;
        baseline.extend(max_search(&padp, cfg.baseline.margin_db, trx, cfg.array.radius_m, t).iter().map(point_row));
    }
    io::write_csv_with_header(&out.join("points.csv"), &POINT_HEADER, &points).at(S)?;
    io::write_csv_with_header(&out.join("baseline_points.csv"), &POINT_HEADER, &baseline).at(S)?;
    io::write_csv_with_header(
        &out.join("structures.csv"),
        &["trx_id", "region_label", "kind", "d1_m", "d2_m", "theta0_deg", "rmse_ns", "n_points"],
        &structures,
    )
    .at(S)?;

    let xy = |rows: &[PointRow], keep: &dyn Fn(&PointRow) -> bool| -> Vec<Point2<f64>> {
        rows.iter().filter(|r| keep(r)).map(|r| Point2::new(r.x_m, r.y_m)).collect()
    };
    let filtered = point_metrics(&xy(&points, &|r| r.filtered), &walls)?;
    let raw = point_metrics(&xy(&points, &|r| !r.filtered), &walls)?;
    let base = point_metrics(&xy(&baseline, &|_| true), &walls)?;
    let ratio = match (&filtered, &base) {
        (Some(f), Some(b)) if f.metrics.mde_m > 0.0 => Some(b.metrics.mde_m / f.metrics.mde_m),
        _ => None,
    };
    let report = MetricsReport { filtered, raw, baseline: base, baseline_mde_ratio: ratio };
    io::write_json(&out.join("metrics.json"), &report).at(S)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionMaterial {
    pub trx_id: usize,
    pub region_label: u32,
    pub n_mpcs: usize,
    pub min_rl_db: f64,
    pub min_rl_theta_deg: f64,
    pub min_rl_tau_ns: f64,
    pub specular_count: usize,
    pub diffuse_count: usize,
    /// Material of the scene wall nearest the strongest-reflecting point.
    pub nearest_wall_material: Option<String>,
    pub top_matches: Vec<MaterialMatch<f64>>,
    pub rl_db: Vec<f64>,
    /// Paths whose incidence calibration failed and kept their raw loss.
    pub calibration_failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialsReport {
    pub frequency_hz: f64,
    pub calibrate_incidence: bool,
    pub regions: Vec<RegionMaterial>,
}

/// Incidence angle of a path at `theta_deg` on a fitted structure.
pub fn incidence_deg(template: &StructureTemplate<f64>, theta_deg: f64) -> f64 {
    let normal = if template.on_sin_branch(theta_deg) { template.theta0_deg + 90.0 } else { template.theta0_deg };
    wrap_deg_180(theta_deg - normal).abs()
}

fn template_of(row: &StructureRow) -> Option<StructureTemplate<f64>> {
    let kind = terasense_core::geometry::StructureKind::ALL.into_iter().find(|k| k.name() == row.kind)?;
    Some(StructureTemplate { kind, d1_m: row.d1_m, d2_m: row.d2_m, theta0_deg: row.theta0_deg, radius_m: 0.0 })
}

/// `mpcs.csv` (+ `structures.csv` when calibrating) → `materials.json`.
pub fn identify(cfg: &PipelineConfig) -> StageResult<()> {
    const S: &str = "identify";
    let out = cfg.output_dir.clone();
    let db = cfg.load_database()?;
    let scene = read_scene(&out, S)?;
    let freq = cfg.analysis_frequency_hz();
    let templates: BTreeMap<(usize, u32), StructureTemplate<f64>> = if cfg.materials.calibrate_incidence {
        let rows: Vec<StructureRow> = io::read_csv(&out.join("structures.csv")).at(S)?;
        rows.iter().filter_map(|r| Some(((r.trx_id, r.region_label), template_of(r)?))).collect()
    } else {
        BTreeMap::new()
    };
    let mut regions = Vec::new();
    for (t, dir) in io::trx_dirs(&out).at(S)? {
        let rows: Vec<MpcRow> = io::read_csv(&dir.join("mpcs.csv")).at(S)?;
        let mut groups: BTreeMap<u32, Vec<&MpcRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry(r.region_label).or_default().push(r);
        }
        for (label, group) in groups {
            let template = templates.get(&(t, label));
            let mut failures = 0;
            let rl: Vec<f64> = group
                .iter()
                .map(|m| {
                    let raw = mpc_reflection_loss(-m.alpha_db, m.tau_ns * 1e-9, freq)?;
                    Ok(match template {
                        Some(tp) => calibrate_to_normal(raw, incidence_deg(tp, m.theta_deg)).unwrap_or_else(|_| {
                            failures += 1;
                            raw
                        }),
                        None => raw,
                    })
                })
                .collect::<terasense_core::Result<_>>()
                .at(S)?;
            let profile = classify_region(label, &rl, cfg.materials.specular_margin_db).at(S)?;
            let k = (0..rl.len()).min_by(|&a, &b| rl[a].total_cmp(&rl[b])).expect("non-empty group");
            let best = group[k];
            let nearest_wall_material = scene.trx_positions.get(t).and_then(|&trx| {
                let p = terasense_core::geometry::map_delay_angle(best.tau_ns * 1e-9, best.theta_deg, label, trx, cfg.array.radius_m, t)
                    .point();
                scene
                    .walls
                    .iter()
                    .min_by(|a, b| a.distance_to(&p).total_cmp(&b.distance_to(&p)))
                    .map(|w| w.material.clone())
            });
            let mut matches = identify_material(profile.min_rl_db, &db);
            matches.truncate(3);
            regions.push(RegionMaterial {
                trx_id: t,
                region_label: label,
                n_mpcs: group.len(),
                min_rl_db: profile.min_rl_db,
                min_rl_theta_deg: best.theta_deg,
                min_rl_tau_ns: best.tau_ns,
                specular_count: profile.specular.len(),
                diffuse_count: profile.diffuse.len(),
                nearest_wall_material,
                top_matches: matches,
                rl_db: profile.rl_db,
                calibration_failures: failures,
            });
        }
    }
    let report = MaterialsReport { frequency_hz: freq, calibrate_incidence: cfg.materials.calibrate_incidence, regions };
    io::write_json(&out.join("materials.json"), &report).at(S)
}
