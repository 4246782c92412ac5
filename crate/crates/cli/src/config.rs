//! Run configuration. Every field has a default; unknown keys are rejected.

use std::path::Path;

use adatoken::costmodel::Workload;
use adatoken::infoflow::InfoFlowParams;
use adatoken::scheduler::Bounds;
use adatoken::tokenstream::SceneSpec;
use adatoken::toydecoder::{DecoderConfig, QueryRows};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub decoder: DecoderConfig,
    pub n_system: usize,
    pub n_prompt: usize,
    /// Scenes written by `gen` and run by `simulate`.
    pub n_scenes: usize,
    /// Root seed for scene sampling.
    pub seed: u64,
    /// Seed for the decoder's random heads.
    pub decoder_seed: u64,
    /// Query rows recorded by `gen`; `s_cross` needs prompt and spatial rows.
    pub query_rows: QueryRows,
    pub infoflow: InfoFlowParams,
    pub redundancy_threshold: f64,
    pub fit: FitSettings,
    /// `adatoken`, `attention_row` or `random`.
    pub strategy: String,
    pub bench: BenchSettings,
    pub cost: Workload,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub target_retention: f64,
    pub lambda_smooth: f64,
    /// Defaults to the standard box for the decoder depth.
    pub bounds: Option<Bounds>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub retentions: Vec<f64>,
    pub n_scenes: usize,
    /// Scenes used to measure the contribution curve before fitting.
    pub calibration_scenes: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            decoder: DecoderConfig::default(),
            n_system: 8,
            n_prompt: 8,
            n_scenes: 4,
            seed: 0,
            decoder_seed: 0,
            query_rows: QueryRows::All,
            infoflow: InfoFlowParams::default(),
            redundancy_threshold: 0.05,
            fit: FitSettings::default(),
            strategy: "adatoken".into(),
            bench: BenchSettings::default(),
            cost: Workload::reference(),
            workers: 0,
        }
    }
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            target_retention: 0.4,
            lambda_smooth: 1.0,
            bounds: None,
            seed: 0,
        }
    }
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            retentions: vec![0.1, 0.2, 0.4],
            n_scenes: 200,
            calibration_scenes: 8,
            seed: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.scene.validate()?;
        self.decoder.validate(&self.scene)?;
        self.infoflow.validate()?;
        self.cost.dims.validate()?;
        if self.n_prompt == 0 {
            return Err(invalid("n_prompt must be ≥ 1 (the final prompt token ranks spatial tokens)"));
        }
        if !(self.redundancy_threshold > 0.0 && self.redundancy_threshold < 1.0) {
            return Err(invalid("redundancy_threshold must be in (0, 1)"));
        }
        let g = self.fit.target_retention;
        if !(g > 0.0 && g <= 1.0) {
            return Err(invalid(format!("fit.target_retention must be in (0, 1], got {g}")));
        }
        if !(self.fit.lambda_smooth >= 0.0 && self.fit.lambda_smooth.is_finite()) {
            return Err(invalid("fit.lambda_smooth must be finite and ≥ 0"));
        }
        if let Some(b) = &self.fit.bounds {
            b.validate()?;
        }
        if self.bench.retentions.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(invalid("bench.retentions must lie in (0, 1]"));
        }
        if self.bench.calibration_scenes == 0 {
            return Err(invalid("bench.calibration_scenes must be ≥ 1"));
        }
        crate::commands::parse_strategy(&self.strategy, 0)?;
        Ok(())
    }

    /// Hex SHA-256 of the resolved config as compact JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
