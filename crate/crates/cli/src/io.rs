//! Artifact formats. Every file uses degrees, nanoseconds, metres and dB.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use terasense_core::channel::{ArrayConfig, ChannelFrequencyResponse};
use terasense_core::padp::Padp;
use terasense_core::scene::Point2;
use terasense_core::segmentation::{BoundingBox, Region, RegionCell};

/// A missing or malformed artifact.
#[derive(Debug)]
pub struct ArtifactError {
    pub path: PathBuf,
    pub message: String,
}

impl fmt::Display for ArtifactError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.message)
    }
}

pub type IoResult<T> = std::result::Result<T, ArtifactError>;

fn fail(path: &Path, e: impl fmt::Display) -> ArtifactError {
    ArtifactError { path: path.to_path_buf(), message: e.to_string() }
}

pub fn trx_dir(out: &Path, trx: usize) -> PathBuf {
    out.join(format!("trx_{trx:02}"))
}

/// Sorted `trx_XX` directories under `out`.
pub fn trx_dirs(out: &Path) -> IoResult<Vec<(usize, PathBuf)>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(out).map_err(|e| fail(out, e))? {
        let entry = entry.map_err(|e| fail(out, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("trx_").and_then(|s| s.parse::<usize>().ok()) {
            if entry.path().is_dir() {
                dirs.push((id, entry.path()));
            }
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(fail(out, "no trx_XX directories; run `simulate` first"));
    }
    Ok(dirs)
}

pub fn create_dir(path: &Path) -> IoResult<()> {
    fs::create_dir_all(path).map_err(|e| fail(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> IoResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| fail(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| fail(path, e))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> IoResult<D> {
    let text = fs::read_to_string(path).map_err(|e| fail(path, e))?;
    serde_json::from_str(&text).map_err(|e| fail(path, e))
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> IoResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| fail(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| fail(path, e))?;
    }
    w.flush().map_err(|e| fail(path, e))
}

/// Writes a header-only file when `rows` is empty.
pub fn write_csv_with_header<S: Serialize>(path: &Path, header: &[&str], rows: &[S]) -> IoResult<()> {
    if rows.is_empty() {
        let mut w = csv::Writer::from_path(path).map_err(|e| fail(path, e))?;
        w.write_record(header).map_err(|e| fail(path, e))?;
        return w.flush().map_err(|e| fail(path, e));
    }
    write_csv(path, rows)
}

pub fn read_csv<D: DeserializeOwned>(path: &Path) -> IoResult<Vec<D>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| fail(path, e))?;
    r.deserialize().collect::<Result<Vec<D>, _>>().map_err(|e| fail(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub trx_id: usize,
    pub column: usize,
    pub phi_deg: f64,
    /// Round-trip delay from the antenna.
    pub tau_ns: f64,
    pub theta_deg: f64,
    pub power_db: f64,
    pub wall_id: usize,
    pub hit_x_m: f64,
    pub hit_y_m: f64,
}

/// Sidecar of `cfr.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfrMeta {
    pub trx_id: usize,
    pub trx_position: Point2<f64>,
    pub n_freq: usize,
    pub n_angles: usize,
    /// `cfr.bin` holds little-endian f64 `(re, im)` pairs, frequency index
    /// fastest, one rotation angle after another.
    pub layout: String,
    pub noise_power_db: Option<f64>,
    pub array: ArrayConfig<f64>,
}

pub const CFR_LAYOUT: &str = "f64le re,im; frequency-major within angle columns";

pub fn write_cfr(dir: &Path, cfr: &ChannelFrequencyResponse<f64>, meta: &CfrMeta) -> IoResult<()> {
    let mut bytes = Vec::with_capacity(cfr.as_slice().len() * 16);
    for v in cfr.as_slice() {
        bytes.extend_from_slice(&v.re.to_le_bytes());
        bytes.extend_from_slice(&v.im.to_le_bytes());
    }
    let bin = dir.join("cfr.bin");
    fs::write(&bin, bytes).map_err(|e| fail(&bin, e))?;
    write_json(&dir.join("cfr.json"), meta)
}

pub fn read_cfr(dir: &Path) -> IoResult<(ChannelFrequencyResponse<f64>, CfrMeta)> {
    let meta: CfrMeta = read_json(&dir.join("cfr.json"))?;
    let bin = dir.join("cfr.bin");
    let bytes = fs::read(&bin).map_err(|e| fail(&bin, e))?;
    if bytes.len() != meta.n_freq * meta.n_angles * 16 {
        return Err(fail(&bin, format!("expected {} bytes, found {}", meta.n_freq * meta.n_angles * 16, bytes.len())));
    }
    let values = bytes
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            Complex::new(re, im)
        })
        .collect();
    let cfr = ChannelFrequencyResponse::new(values, meta.array.clone()).map_err(|e| fail(&bin, e))?;
    Ok((cfr, meta))
}

/// Sidecar of `padp.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PadpMeta {
    pub trx_id: usize,
    pub n_delay: usize,
    pub n_angles: usize,
    pub delay_step_ns: f64,
    /// Estimated from the unrounded profile.
    pub noise_floor_db: f64,
    pub peak_db: f64,
}

/// `padp.csv`: `delay_ns` then one column per rotation angle, powers in dB
/// rounded to 1e-4.
pub fn write_padp(dir: &Path, padp: &Padp<f64>, trx_id: usize) -> IoResult<()> {
    use std::fmt::Write as _;
    let path = dir.join("padp.csv");
    let mut text = String::with_capacity(padp.power_db.len() * 10);
    text.push_str("delay_ns");
    for a in &padp.angle_grid_deg {
        let _ = write!(text, ",{a}");
    }
    text.push('\n');
    for i in 0..padp.n_delay() {
        let _ = write!(text, "{:.4}", padp.delay_grid_s[i] * 1e9);
        for j in 0..padp.n_angles() {
            let _ = write!(text, ",{:.4}", padp.get(i, j));
        }
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| fail(&path, e))?;
    let meta = PadpMeta {
        trx_id,
        n_delay: padp.n_delay(),
        n_angles: padp.n_angles(),
        delay_step_ns: padp.delay_step_s() * 1e9,
        noise_floor_db: padp.noise_floor_db,
        peak_db: padp.power_db.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    write_json(&dir.join("padp.json"), &meta)
}

/// Reads `padp.csv`, taking the noise floor from `padp.json`.
pub fn read_padp(dir: &Path) -> IoResult<(Padp<f64>, PadpMeta)> {
    let meta: PadpMeta = read_json(&dir.join("padp.json"))?;
    let path = dir.join("padp.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| fail(&path, e))?;
    let angles = r
        .headers()
        .map_err(|e| fail(&path, e))?
        .iter()
        .skip(1)
        .map(|s| s.parse::<f64>().map_err(|e| fail(&path, e)))
        .collect::<IoResult<Vec<f64>>>()?;
    let mut delays = Vec::with_capacity(meta.n_delay);
    let mut power = Vec::with_capacity(meta.n_delay * angles.len());
    for rec in r.records() {
        let rec = rec.map_err(|e| fail(&path, e))?;
        let mut fields = rec.iter().map(|s| s.parse::<f64>().map_err(|e| fail(&path, e)));
        delays.push(fields.next().ok_or_else(|| fail(&path, "empty row"))?? * 1e-9);
        for v in fields {
            power.push(v?);
        }
    }
    let mut padp = Padp::new(power, delays, angles).map_err(|e| fail(&path, e))?;
    padp.noise_floor_db = meta.noise_floor_db;
    Ok((padp, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub label: u32,
    pub i: usize,
    pub j: usize,
    pub tau_ns: f64,
    pub theta_deg: f64,
    pub power_db: f64,
}

pub fn write_regions(dir: &Path, regions: &[Region<f64>]) -> IoResult<()> {
    let rows: Vec<RegionRow> = regions
        .iter()
        .flat_map(|r| {
            r.cells.iter().map(|c| RegionRow {
                label: r.label,
                i: c.i,
                j: c.j,
                tau_ns: c.tau_s * 1e9,
                theta_deg: c.theta_deg,
                power_db: c.power_db,
            })
        })
        .collect();
    write_csv_with_header(&dir.join("regions.csv"), &["label", "i", "j", "tau_ns", "theta_deg", "power_db"], &rows)
}

/// Rebuilds regions from `regions.csv`, ordered by label.
pub fn read_regions(dir: &Path) -> IoResult<Vec<Region<f64>>> {
    let rows: Vec<RegionRow> = read_csv(&dir.join("regions.csv"))?;
    let mut by_label: std::collections::BTreeMap<u32, Vec<RegionCell<f64>>> = Default::default();
    for r in rows {
        by_label.entry(r.label).or_default().push(RegionCell {
            i: r.i,
            j: r.j,
            tau_s: r.tau_ns * 1e-9,
            theta_deg: r.theta_deg,
            power_db: r.power_db,
        });
    }
    Ok(by_label
        .into_iter()
        .map(|(label, cells)| {
            let bbox = BoundingBox {
                i_min: cells.iter().map(|c| c.i).min().unwrap_or(0),
                i_max: cells.iter().map(|c| c.i).max().unwrap_or(0),
                j_min: cells.iter().map(|c| c.j).min().unwrap_or(0),
                j_max: cells.iter().map(|c| c.j).max().unwrap_or(0),
            };
            let peak_power_db = cells.iter().map(|c| c.power_db).fold(f64::NEG_INFINITY, f64::max);
            Region { label, cells, bbox, peak_power_db }
        })
        .collect())
}

/// One SAGE path of one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub column: usize,
    pub phi_deg: f64,
    pub rank: usize,
    pub region_label: u32,
    pub tau_ns: f64,
    pub beta_re: f64,
    pub beta_im: f64,
    pub beta_db: f64,
}

/// One de-embedded MPC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcRow {
    pub trx_id: usize,
    pub region_label: u32,
    pub column: usize,
    pub theta_deg: f64,
    pub tau_ns: f64,
    pub alpha_re: f64,
    pub alpha_im: f64,
    pub alpha_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub trx_id: usize,
    pub region_label: u32,
    pub theta_deg: f64,
    pub tau_ns: f64,
    pub x_m: f64,
    pub y_m: f64,
    pub filtered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureRow {
    pub trx_id: usize,
    pub region_label: u32,
    /// `flat_wall`, `inner_corner`, `outer_corner`, or `none` when no
    /// template could be fitted.
    pub kind: String,
    pub d1_m: f64,
    pub d2_m: f64,
    pub theta0_deg: f64,
    pub rmse_ns: f64,
    pub n_points: usize,
}

/// Lowercase hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> IoResult<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| fail(path, e))?;
    Ok(crate::config::hex(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use terasense_core::channel::{synthesize_cfr, Mpc};
    use terasense_core::padp::{cfr_to_cir, compute_padp, Taper};

    fn small_config() -> ArrayConfig<f64> {
        ArrayConfig {
            n_freq_points: 101,
            rotation_angles_deg: (0..12).map(|k| k as f64 * 30.0).collect(),
            ..ArrayConfig::default()
        }
    }

    fn small_cfr() -> ChannelFrequencyResponse<f64> {
        let mpc = Mpc { amplitude: Complex::new(1e-3, 0.0), delay_s: 1e-9, angle_deg: 30.0 };
        synthesize_cfr(&[mpc], &small_config(), None).unwrap()
    }

    #[test]
    fn cfr_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfr = small_cfr();
        let meta = CfrMeta {
            trx_id: 0,
            trx_position: Point2::new(1.0, 2.0),
            n_freq: cfr.n_freq(),
            n_angles: cfr.n_angles(),
            layout: CFR_LAYOUT.into(),
            noise_power_db: None,
            array: small_config(),
        };
        write_cfr(dir.path(), &cfr, &meta).unwrap();
        let (back, meta_back) = read_cfr(dir.path()).unwrap();
        assert_eq!(back, cfr);
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn padp_round_trip_is_rounded_to_four_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let padp = compute_padp(&cfr_to_cir(&small_cfr(), Taper::Rectangular));
        write_padp(dir.path(), &padp, 0).unwrap();
        let (back, meta) = read_padp(dir.path()).unwrap();
        assert_eq!(back.noise_floor_db, padp.noise_floor_db);
        assert_eq!(meta.n_delay, padp.n_delay());
        assert_eq!(back.angle_grid_deg, padp.angle_grid_deg);
        for (a, b) in back.power_db.iter().zip(&padp.power_db) {
            assert!((a - b).abs() <= 0.5e-4 + 1e-9);
        }
    }

    #[test]
    fn missing_cfr_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_cfr(dir.path()).unwrap_err();
        assert!(err.to_string().contains("cfr.json"));
    }

    #[test]
    fn trx_dirs_are_sorted_and_required() {
        let dir = tempfile::tempdir().unwrap();
        assert!(trx_dirs(dir.path()).is_err());
        for t in [3, 0, 11] {
            create_dir(&trx_dir(dir.path(), t)).unwrap();
        }
        let ids: Vec<usize> = trx_dirs(dir.path()).unwrap().into_iter().map(|(t, _)| t).collect();
        assert_eq!(ids, vec![0, 3, 11]);
    }
}
