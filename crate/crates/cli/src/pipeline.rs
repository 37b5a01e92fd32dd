//! Full run: every stage in order, plots, then a manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{AtStage, StageResult};
use crate::io;
use crate::plot;
use crate::stages::{run_stage, STAGES};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    /// The effective configuration; rerunning it reproduces every artifact.
    pub config: PipelineConfig,
    pub timings: Vec<StageTiming>,
    /// Relative path → SHA-256, sorted by path.
    pub artifacts: Vec<(String, String)>,
}

/// Runs simulate → padp → segment → estimate → map → identify → plot and
/// writes `manifest.json`. A failing stage aborts the run; artifacts already
/// written are left in place.
pub fn run_pipeline(cfg: &PipelineConfig) -> StageResult<Manifest> {
    cfg.validate()?;
    io::create_dir(&cfg.output_dir).at("config")?;
    let mut timings = Vec::new();
    for stage in STAGES {
        let t0 = Instant::now();
        run_stage(stage, cfg)?;
        timings.push(StageTiming { stage: stage.to_string(), seconds: t0.elapsed().as_secs_f64() });
    }
    let t0 = Instant::now();
    plot::emit_plots(&cfg.output_dir)?;
    timings.push(StageTiming { stage: "plot".into(), seconds: t0.elapsed().as_secs_f64() });

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        timings,
        artifacts: artifact_hashes(&cfg.output_dir)?,
    };
    io::write_json(&cfg.output_dir.join("manifest.json"), &manifest).at("manifest")?;
    Ok(manifest)
}

/// Every file under `out` except the manifest itself.
pub fn artifact_files(out: &Path) -> StageResult<Vec<PathBuf>> {
    fn walk(dir: &Path, acc: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, acc)?;
            } else {
                acc.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(out, &mut files).at("manifest")?;
    files.retain(|p| p != &out.join("manifest.json"));
    files.sort();
    Ok(files)
}

fn artifact_hashes(out: &Path) -> StageResult<Vec<(String, String)>> {
    artifact_files(out)?
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(out).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            Ok((rel, io::file_sha256(&p).at("manifest")?))
        })
        .collect()
}
