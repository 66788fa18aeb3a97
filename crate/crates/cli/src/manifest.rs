use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use irs_vlp::config::{Profile, Scenario};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Written next to every set of outputs; holds enough to re-run the command.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the resolved scenario's canonical JSON.
    pub scene_hash: String,
    pub profile: Profile,
    pub seed: u64,
    pub outputs: Vec<PathBuf>,
    pub duration_s: f64,
    pub scenario: &'a Scenario,
}

pub fn scene_hash(scenario: &Scenario) -> Result<String> {
    let json = scenario.canonical_json()?;
    Ok(Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl<'a> RunManifest<'a> {
    pub fn new(
        subcommand: &'static str,
        config_path: Option<PathBuf>,
        scenario: &'a Scenario,
        outputs: Vec<PathBuf>,
        elapsed: Duration,
    ) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            args: std::env::args().collect(),
            config_path,
            scene_hash: scene_hash(scenario)?,
            profile: scenario.profile,
            seed: scenario.seed,
            outputs,
            duration_s: elapsed.as_secs_f64(),
            scenario,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.manifest.json", self.subcommand));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
