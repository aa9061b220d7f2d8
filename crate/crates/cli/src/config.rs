use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::Context;
use primid_core::gallery::Species;
use serde::Deserialize;

/// Settings that may come from a TOML file. Command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub model: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub seed: Option<u64>,
    pub species: Option<Species>,
    pub json: Option<bool>,
    pub k: Option<usize>,
    pub threshold: Option<f32>,
    pub verify_threshold: Option<f32>,
    pub bind: Option<SocketAddr>,
    pub static_dir: Option<PathBuf>,
}

impl CliConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Overlays `flags` on top of `self`; any value given as a flag wins.
    pub fn overlay(self, flags: CliConfig) -> Self {
        Self {
            model: flags.model.or(self.model),
            model_config: flags.model_config.or(self.model_config),
            gallery: flags.gallery.or(self.gallery),
            template: flags.template.or(self.template),
            seed: flags.seed.or(self.seed),
            species: flags.species.or(self.species),
            json: flags.json.or(self.json),
            k: flags.k.or(self.k),
            threshold: flags.threshold.or(self.threshold),
            verify_threshold: flags.verify_threshold.or(self.verify_threshold),
            bind: flags.bind.or(self.bind),
            static_dir: flags.static_dir.or(self.static_dir),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn json(&self) -> bool {
        self.json.unwrap_or(false)
    }
}
