//! PNG renderings of the run artifacts. Plots carry no text; axes are
//! described in the README.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::Serialize;
use terasense_core::geometry::empirical_quantile;
use terasense_core::scene::Scene;

use crate::error::{AtStage, StageError, StageResult};
use crate::io::{self, PointRow};
use crate::stages::{MaterialsReport, MetricsReport};

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([30, 30, 30]);
const GREY: Rgb<u8> = Rgb([170, 170, 170]);
const PALETTE: [Rgb<u8>; 8] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([23, 190, 207]),
];

#[derive(Debug, Clone, Default, Serialize)]
pub struct PlotReport {
    pub written: Vec<String>,
    /// `(plot, reason)` for every plot whose inputs were missing.
    pub skipped: Vec<(String, String)>,
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Self { img: RgbImage::from_pixel(w, h, BG) }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            self.put((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64, c);
        }
    }

    fn dot(&mut self, (x, y): (f64, f64), r: i64, c: Rgb<u8>) {
        let (cx, cy) = (x.round() as i64, y.round() as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(cx + dx, cy + dy, c);
                }
            }
        }
    }

    fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    fn frame(&mut self, m: f64) {
        let (w, h) = (self.img.width() as f64 - 1.0, self.img.height() as f64 - 1.0);
        self.line((m, m), (m, h - m), INK);
        self.line((m, h - m), (w - m, h - m), INK);
    }

    fn save(&self, path: &Path) -> StageResult<()> {
        self.img.save(path).map_err(|e| StageError::new("plot", format!("{}: {e}", path.display())))
    }
}

/// Linear map from a data interval onto pixels.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    p0: f64,
    p1: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, p0: f64, p1: f64) -> Self {
        let hi = if hi > lo { hi } else { lo + 1.0 };
        Self { lo, hi, p0, p1 }
    }

    fn px(&self, v: f64) -> f64 {
        self.p0 + (v - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0)
    }
}

/// Dark blue → teal → yellow.
fn colormap(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let stops = [(0.0, [20.0, 20.0, 70.0]), (0.5, [30.0, 150.0, 140.0]), (1.0, [250.0, 230.0, 40.0])];
    let k = if t < 0.5 { 0 } else { 1 };
    let (a, b) = (stops[k], stops[k + 1]);
    let u = (t - a.0) / (b.0 - a.0);
    Rgb([0, 1, 2].map(|c| (a.1[c] + u * (b.1[c] - a.1[c])).round() as u8))
}

fn label_color(label: u32) -> Rgb<u8> {
    PALETTE[(label as usize + PALETTE.len() - 1) % PALETTE.len()]
}

/// Delay rows worth showing: up to the last row with a cell 10 dB above
/// the floor, plus a margin.
fn shown_rows(padp: &terasense_core::padp::Padp<f64>) -> usize {
    let thr = padp.noise_floor_db + 10.0;
    let last = (0..padp.n_delay()).rev().find(|&i| (0..padp.n_angles()).any(|j| padp.get(i, j) > thr)).unwrap_or(0);
    (last + 40).clamp(100.min(padp.n_delay()), padp.n_delay())
}

fn padp_heatmap(dir: &Path, path: &Path) -> StageResult<usize> {
    let (padp, _) = io::read_padp(dir).at("plot")?;
    let rows = shown_rows(&padp);
    let (lo, hi) = (padp.noise_floor_db, padp.power_db.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let mut c = Canvas::new(padp.n_angles() as u32 * 2, rows as u32);
    for i in 0..rows {
        for j in 0..padp.n_angles() {
            let col = colormap((padp.get(i, j) - lo) / (hi - lo).max(1e-9));
            c.fill(2 * j as i64, i as i64, 2 * j as i64 + 1, i as i64, col);
        }
    }
    c.save(path)?;
    Ok(rows)
}

fn label_map(dir: &Path, rows: usize, n_angles: usize, path: &Path) -> StageResult<()> {
    let regions: Vec<io::RegionRow> = io::read_csv(&dir.join("regions.csv")).at("plot")?;
    let mut c = Canvas::new(n_angles as u32 * 2, rows as u32);
    for r in regions.iter().filter(|r| r.i < rows) {
        c.fill(2 * r.j as i64, r.i as i64, 2 * r.j as i64 + 1, r.i as i64, label_color(r.label));
    }
    c.save(path)
}

fn reconstruction(out: &Path, path: &Path) -> StageResult<()> {
    let scene: Scene<f64> = io::read_json(&out.join("scene.json")).at("plot")?;
    let points: Vec<PointRow> = io::read_csv(&out.join("points.csv")).at("plot")?;
    let xs = scene.walls.iter().flat_map(|w| [w.start.x, w.end.x]).chain(scene.trx_positions.iter().map(|p| p.x));
    let ys = scene.walls.iter().flat_map(|w| [w.start.y, w.end.y]).chain(scene.trx_positions.iter().map(|p| p.y));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let scale = (1100.0 / (x1 - x0 + 1.0)).min(700.0 / (y1 - y0 + 1.0));
    let (w, h) = (((x1 - x0 + 1.0) * scale) as u32 + 1, ((y1 - y0 + 1.0) * scale) as u32 + 1);
    let ax = Axis::new(x0 - 0.5, x1 + 0.5, 0.0, w as f64 - 1.0);
    let ay = Axis::new(y0 - 0.5, y1 + 0.5, h as f64 - 1.0, 0.0);
    let mut c = Canvas::new(w, h);
    for wall in &scene.walls {
        c.line((ax.px(wall.start.x), ay.px(wall.start.y)), (ax.px(wall.end.x), ay.px(wall.end.y)), INK);
    }
    for p in points.iter().filter(|p| !p.filtered) {
        c.dot((ax.px(p.x_m), ay.px(p.y_m)), 1, GREY);
    }
    for p in points.iter().filter(|p| p.filtered) {
        c.dot((ax.px(p.x_m), ay.px(p.y_m)), 1, PALETTE[p.trx_id % PALETTE.len()]);
    }
    for p in &scene.trx_positions {
        c.dot((ax.px(p.x), ay.px(p.y)), 4, PALETTE[3]);
    }
    c.save(path)
}

/// Writes `cdf.csv` (the sorted errors of `metrics.json`) and the plot.
fn error_cdf(out: &Path, path: &Path) -> StageResult<()> {
    let report: MetricsReport = io::read_json(&out.join("metrics.json")).at("plot")?;
    let set = report.filtered.or(report.raw).ok_or_else(|| StageError::new("plot", "metrics.json has no point set"))?;
    let errors = &set.metrics.cdf;
    let n = errors.len();
    #[derive(Serialize)]
    struct Row {
        error_m: f64,
        probability: f64,
    }
    let rows: Vec<Row> = errors.iter().enumerate().map(|(k, &e)| Row { error_m: e, probability: (k + 1) as f64 / n as f64 }).collect();
    io::write_csv(&out.join("plots").join("cdf.csv"), &rows).at("plot")?;

    let (w, h, m) = (800u32, 500u32, 30.0);
    let ax = Axis::new(0.0, errors.last().copied().unwrap_or(1.0), m, w as f64 - m);
    let ay = Axis::new(0.0, 1.0, h as f64 - m, m);
    let mut c = Canvas::new(w, h);
    c.frame(m);
    let mut prev = (ax.px(0.0), ay.px(0.0));
    for r in &rows {
        let step = (ax.px(r.error_m), prev.1);
        let up = (step.0, ay.px(r.probability));
        c.line(prev, step, PALETTE[0]);
        c.line(step, up, PALETTE[0]);
        prev = up;
    }
    for &(p, q) in &set.metrics.quantiles {
        debug_assert_eq!(q, empirical_quantile(errors, p));
        c.dot((ax.px(q), ay.px(p)), 3, PALETTE[3]);
    }
    c.save(path)
}

fn rl_histogram(out: &Path, path: &Path) -> StageResult<()> {
    let report: MaterialsReport = io::read_json(&out.join("materials.json")).at("plot")?;
    let all: Vec<f64> = report.regions.iter().flat_map(|r| r.rl_db.iter().copied()).filter(|v| v.is_finite()).collect();
    if all.is_empty() {
        return Err(StageError::new("plot", "materials.json has no reflection losses"));
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min).floor();
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil().max(lo + 1.0);
    let n_bins = ((hi - lo) / 0.5).ceil() as usize + 1;
    let mut counts = vec![vec![0usize; n_bins]; report.regions.len()];
    for (k, r) in report.regions.iter().enumerate() {
        for v in r.rl_db.iter().filter(|v| v.is_finite()) {
            counts[k][((v - lo) / 0.5) as usize] += 1;
        }
    }
    let peak = (0..n_bins).map(|b| counts.iter().map(|c| c[b]).sum::<usize>()).max().unwrap_or(1).max(1);
    let (w, h, m) = (800u32, 500u32, 30.0);
    let ax = Axis::new(lo, lo + n_bins as f64 * 0.5, m, w as f64 - m);
    let ay = Axis::new(0.0, peak as f64, h as f64 - m, m);
    let mut c = Canvas::new(w, h);
    c.frame(m);
    for b in 0..n_bins {
        let mut base = 0usize;
        let (xa, xb) = (ax.px(lo + b as f64 * 0.5) + 1.0, ax.px(lo + (b + 1) as f64 * 0.5) - 1.0);
        for (k, region_counts) in counts.iter().enumerate() {
            let n = region_counts[b];
            if n > 0 {
                let color = PALETTE[k % PALETTE.len()];
                c.fill(xa as i64, ay.px(base as f64) as i64, xb as i64, ay.px((base + n) as f64) as i64, color);
                base += n;
            }
        }
    }
    c.save(path)
}

/// Renders `plots/{padp,regions,reconstruction,error_cdf,rl_histogram}.png`
/// from the artifacts under `out`, using the first TRx for the per-TRx
/// images. Only a missing PADP is an error; other plots whose inputs are
/// absent are skipped and listed in the report.
pub fn emit_plots(out: &Path) -> StageResult<PlotReport> {
    let dirs = io::trx_dirs(out).at("plot")?;
    let (_, first) = &dirs[0];
    if !first.join("padp.csv").exists() {
        return Err(StageError::new("plot", format!("missing artifact {}", first.join("padp.csv").display())));
    }
    let plots = out.join("plots");
    io::create_dir(&plots).at("plot")?;
    let mut report = PlotReport::default();
    let rows = padp_heatmap(first, &plots.join("padp.png"))?;
    report.written.push("padp.png".into());
    let n_angles = io::read_json::<io::PadpMeta>(&first.join("padp.json")).at("plot")?.n_angles;

    let mut attempt = |name: &str, inputs: &[&Path], f: &dyn Fn(&Path) -> StageResult<()>| -> StageResult<()> {
        if let Some(missing) = inputs.iter().find(|p| !p.exists()) {
            report.skipped.push((name.to_string(), format!("missing {}", missing.display())));
            return Ok(());
        }
        f(&plots.join(name))?;
        report.written.push(name.to_string());
        Ok(())
    };
    attempt("regions.png", &[&first.join("regions.csv")], &|p| label_map(first, rows, n_angles, p))?;
    attempt("reconstruction.png", &[&out.join("scene.json"), &out.join("points.csv")], &|p| reconstruction(out, p))?;
    attempt("error_cdf.png", &[&out.join("metrics.json")], &|p| error_cdf(out, p))?;
    attempt("rl_histogram.png", &[&out.join("materials.json")], &|p| rl_histogram(out, p))?;
    for (name, reason) in &report.skipped {
        eprintln!("plot: skipped {name} ({reason})");
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), Rgb([20, 20, 70]));
        assert_eq!(colormap(1.0), Rgb([250, 230, 40]));
        assert_eq!(colormap(-3.0), colormap(0.0));
    }

    #[test]
    fn axis_maps_endpoints() {
        let a = Axis::new(2.0, 4.0, 10.0, 110.0);
        assert_eq!(a.px(2.0), 10.0);
        assert_eq!(a.px(4.0), 110.0);
        let flipped = Axis::new(0.0, 1.0, 100.0, 0.0);
        assert_eq!(flipped.px(1.0), 0.0);
    }

    #[test]
    fn empty_output_dir_is_a_named_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_plots(dir.path()).unwrap_err();
        assert_eq!(err.stage, "plot");
    }
}
