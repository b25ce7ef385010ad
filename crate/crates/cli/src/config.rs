//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pierce_core::features::FeatureConfig;
use pierce_core::qc::{QcConfig, SplitConfig};
use pierce_core::synth::ScenarioConfig;
use pierce_core::windowing::WindowConfig;
use pierce_nn::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowOptions {
    pub t_in: usize,
    pub t_out: usize,
    /// Step between consecutive training windows.
    pub train_stride: usize,
    /// Step between consecutive validation and test windows.
    pub eval_stride: usize,
    /// Nearest neighbours per node.
    pub k: usize,
    /// Feed the day-of-year encoding to the model.
    pub day_of_year: bool,
    /// Feed Dst and F10.7 to the model.
    pub space_weather: bool,
}

impl Default for WindowOptions {
    fn default() -> Self {
        let w = WindowConfig::default();
        Self {
            t_in: w.t_in,
            t_out: w.t_out,
            train_stride: 1,
            eval_stride: 1,
            k: pierce_core::graph::DEFAULT_K,
            day_of_year: true,
            space_weather: true,
        }
    }
}

impl WindowOptions {
    pub fn window(&self) -> WindowConfig {
        WindowConfig { t_in: self.t_in, t_out: self.t_out }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Forecasters trained and compared by `run` and `report`.
    pub forecasters: Vec<String>,
    pub batch_size: usize,
    pub dropout_fractions: Vec<f64>,
    pub histogram_bins: usize,
    /// Lead step of the exported probability map.
    pub map_lead: usize,
    pub map_resolution_deg: f64,
    pub map_sigma_deg: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            forecasters: ["persistence", "full", "no_graph", "no_conditioning", "no_history", "no_zero_baseline"]
                .map(String::from)
                .to_vec(),
            batch_size: 64,
            dropout_fractions: pierce_eval::experiments::DROPOUT_FRACTIONS.to_vec(),
            histogram_bins: 10,
            map_lead: 6,
            map_resolution_deg: 0.5,
            map_sigma_deg: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// TOML file holding the scenario; replaces `[scenario]` when set.
    #[serde(default)]
    pub scenario_file: Option<PathBuf>,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub qc: QcConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub window: WindowOptions,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path`, resolves `scenario_file` relative to it, and applies
    /// the global seed.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(f) = cfg.scenario_file.take() {
            let f = path.parent().unwrap_or(Path::new(".")).join(f);
            let text = std::fs::read_to_string(&f).with_context(|| format!("reading scenario {}", f.display()))?;
            cfg.scenario = toml::from_str(&text).with_context(|| format!("parsing scenario {}", f.display()))?;
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    /// Propagates the global seed and window length, then validates.
    pub fn finalize(&mut self) -> Result<()> {
        self.scenario.seed = self.seed;
        self.train.seed = self.seed;
        self.model.t_out = self.window.t_out;
        self.model.validate()?;
        if self.window.t_in == 0 || self.window.t_out == 0 {
            bail!("window lengths must be positive");
        }
        if self.window.train_stride == 0 || self.window.eval_stride == 0 {
            bail!("window strides must be positive");
        }
        let registry = pierce_eval::Registry::default();
        for f in &self.eval.forecasters {
            if !registry.contains(f) {
                bail!("unknown forecaster {f} in eval.forecasters");
            }
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) -> Result<()> {
        self.seed = seed;
        self.finalize()
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
