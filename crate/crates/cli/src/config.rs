//! Run configuration: one JSON document with a section per module.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use terasense_core::channel::ArrayConfig;
use terasense_core::geometry::MapperSettings;
use terasense_core::materials::MaterialDatabase;
use terasense_core::padp::Taper;
use terasense_core::sage::SageSettings;
use terasense_core::scene::Scene;
use terasense_core::segmentation::SegmentationSettings;

use crate::error::{AtStage, StageError, StageResult};

/// Paper-scale scene: an inner corner (walls 1.60 m and 1.23 m from the first
/// TRx), ten TRx positions 0.5 m apart, and two small panels.
pub const PAPER_SCENE_JSON: &str = include_str!("../data/paper_scene.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
    /// Per-frequency-sample complex noise power, dB.
    pub power_db: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { enabled: true, power_db: -70.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PadpConfig {
    pub taper: Taper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialsConfig {
    /// Database CSV; the seed table when absent.
    pub database: Option<PathBuf>,
    pub specular_margin_db: f64,
    /// Convert each path's loss to normal incidence using the fitted
    /// structure's incidence angle before ranking.
    pub calibrate_incidence: bool,
    /// Frequency used for the path-loss term; the band centre when absent.
    pub frequency_hz: Option<f64>,
}

impl Default for MaterialsConfig {
    fn default() -> Self {
        Self { database: None, specular_margin_db: 3.0, calibrate_incidence: false, frequency_hz: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Maximum-search keeps columns whose peak exceeds floor + margin.
    pub margin_db: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { margin_db: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Scene JSON; the built-in ten-position scene when absent.
    pub scene: Option<PathBuf>,
    pub array: ArrayConfig<f64>,
    pub noise: NoiseConfig,
    pub padp: PadpConfig,
    pub segmentation: SegmentationSettings,
    pub sage: SageSettings,
    pub mapper: MapperSettings,
    pub materials: MaterialsConfig,
    pub baseline: BaselineConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Estimate over every delay bin of every column instead of the regions.
    pub full_grid: bool,
    /// Only process the first `n` TRx positions of the scene.
    pub max_trx: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: None,
            array: ArrayConfig::default(),
            noise: NoiseConfig::default(),
            padp: PadpConfig::default(),
            segmentation: SegmentationSettings::default(),
            sage: SageSettings::default(),
            mapper: MapperSettings::default(),
            materials: MaterialsConfig::default(),
            baseline: BaselineConfig::default(),
            output_dir: PathBuf::from("terasense-out"),
            seed: 1,
            full_grid: false,
            max_trx: None,
        }
    }
}

impl PipelineConfig {
    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> StageResult<Self> {
        let file = File::open(path).at("config")?;
        let mut cfg: Self = serde_json::from_reader(std::io::BufReader::new(file)).at("config")?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.scene.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.materials.database.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> StageResult<()> {
        self.array.validate().at("config")?;
        if !self.noise.power_db.is_finite() {
            return Err(StageError::new("config", "noise power must be finite"));
        }
        self.segmentation.structuring_element.validate().at("config")?;
        self.sage.refinement(self.array.delay_step_s()).at("config")?;
        if self.mapper.window == 0 || self.mapper.window % 2 == 0 {
            return Err(StageError::new("config", format!("window length {} must be odd", self.mapper.window)));
        }
        if self.mapper.kinds.is_empty() {
            return Err(StageError::new("config", "at least one structure kind is required"));
        }
        for p in self.scene.iter().chain(self.materials.database.iter()) {
            if !p.exists() {
                return Err(StageError::new("config", format!("file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn load_scene(&self) -> StageResult<Scene<f64>> {
        let mut scene: Scene<f64> = match &self.scene {
            Some(p) => serde_json::from_reader(std::io::BufReader::new(File::open(p).at("config")?)).at("config")?,
            None => serde_json::from_str(PAPER_SCENE_JSON).at("config")?,
        };
        if let Some(n) = self.max_trx {
            scene.trx_positions.truncate(n);
        }
        scene.validate().at("config")?;
        Ok(scene)
    }

    pub fn load_database(&self) -> StageResult<MaterialDatabase<f64>> {
        match &self.materials.database {
            Some(p) => MaterialDatabase::from_csv(File::open(p).at("identify")?).at("identify"),
            None => Ok(MaterialDatabase::seed()),
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Noise seed of one TRx, derived from the run seed.
    pub fn noise_seed(&self, trx: usize) -> u64 {
        let mut z = self.seed.wrapping_add((trx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn analysis_frequency_hz(&self) -> f64 {
        self.materials.frequency_hz.unwrap_or_else(|| self.array.center_freq_hz())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
