use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::args::StageArgs;
use crate::config::{Resolved, SeedSummary};
use crate::{runtime, CliError};

/// Provenance record written by every artifact-producing stage, once with
/// `status: "running"` before any stochastic work (so the resolved seeds
/// are on disk first) and again with the artifact hashes when the stage
/// completes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub stage: String,
    pub status: String,
    pub config_path: String,
    pub config_sha256: String,
    pub preset: String,
    pub seeds: SeedSummary,
    pub threads: usize,
    pub module_versions: BTreeMap<String, String>,
    pub out_dir: String,
    pub elapsed_ms: Option<u64>,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Serialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub struct StageRun {
    manifest: RunManifest,
    out: PathBuf,
    started: Instant,
}

fn module_versions() -> BTreeMap<String, String> {
    [
        ("somnadhere-core", somnadhere_core::VERSION),
        ("somnadhere-cli", env!("CARGO_PKG_VERSION")),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

pub fn sha256_file(path: &Path) -> Result<(String, u64), CliError> {
    let bytes = fs::read(path)
        .map_err(|e| runtime(format!("cannot hash {}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok((format!("{digest:x}"), bytes.len() as u64))
}

impl StageRun {
    pub fn begin(stage: &str, args: &StageArgs, resolved: &Resolved) -> Result<StageRun, CliError> {
        fs::create_dir_all(&args.out)
            .map_err(|e| runtime(format!("cannot create {}: {e}", args.out.display())))?;
        let (config_sha256, _) = sha256_file(&args.config)?;
        let run = StageRun {
            manifest: RunManifest {
                stage: stage.to_string(),
                status: "running".to_string(),
                config_path: args.config.display().to_string(),
                config_sha256,
                preset: args.preset.name().to_string(),
                seeds: resolved.seeds(),
                threads: rayon::current_num_threads(),
                module_versions: module_versions(),
                out_dir: args.out.display().to_string(),
                elapsed_ms: None,
                artifacts: Vec::new(),
            },
            out: args.out.clone(),
            started: Instant::now(),
        };
        run.write()?;
        Ok(run)
    }

    fn path(&self) -> PathBuf {
        self.out.join(format!("{}.manifest.json", self.manifest.stage))
    }

    fn write(&self) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(&self.manifest).map_err(runtime)?;
        let path = self.path();
        fs::write(&path, json + "\n")
            .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
    }

    /// Hash the produced artifacts and write the completed manifest.
    pub fn finish(mut self, artifacts: &[PathBuf]) -> Result<(), CliError> {
        let mut entries: Vec<ArtifactEntry> = artifacts
            .par_iter()
            .map(|p| {
                let (sha256, bytes) = sha256_file(p)?;
                let rel = p
                    .strip_prefix(&self.out)
                    .map(|r| r.display().to_string())
                    .unwrap_or_else(|_| p.display().to_string());
                Ok(ArtifactEntry {
                    path: rel,
                    sha256,
                    bytes,
                })
            })
            .collect::<Result<_, CliError>>()?;
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        self.manifest.artifacts = entries;
        self.manifest.status = "complete".to_string();
        self.manifest.elapsed_ms = Some(self.started.elapsed().as_millis() as u64);
        log::info!(
            "stage {} finished in {} ms with {} artifacts",
            self.manifest.stage,
            self.manifest.elapsed_ms.unwrap(),
            self.manifest.artifacts.len()
        );
        self.write()
    }
}
