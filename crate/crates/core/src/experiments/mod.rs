//! Experiment drivers and their configuration files.

mod collapse;
mod studies;

#[cfg(test)]
mod tests;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, ForecastError, Result};
use crate::exec::ExecMode;
use crate::model::{EvalConfig, ModelConfig};
use crate::series::{MixConfig, D1_SHARES, D2_SHARES, D3_SHARES};

pub use collapse::{causal_conv, exp_kernel, recent_nonzero_std, run_collapse_sim, CollapseConfig, CollapseCurve, CollapseResult};
pub use studies::{
    head_count_sweep, run_ablation, run_bias_sampling_experiment, train_and_evaluate, AblationCell, AblationResult,
    AblationSummaryRow, BiasSamplingCell, BiasSamplingResult, BiasSamplingSummaryRow, BiasSide, HeadSweepCell,
    HeadSweepResult, HeadSweepSummaryRow, StudySetup, Variant,
};

/// Synthetic dataset description: category shares (a preset name or six
/// explicit fractions, fastest first) plus optional overrides of the
/// generator defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub preset: String,
    pub shares: Option<[f64; 6]>,
    pub series: usize,
    pub length: Option<usize>,
    pub train_len: Option<usize>,
    pub new_product_fraction: Option<f64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            preset: "d1".into(),
            shares: None,
            series: 2000,
            length: None,
            train_len: None,
            new_product_fraction: None,
        }
    }
}

impl DatasetSpec {
    pub fn mix(&self) -> Result<MixConfig> {
        let shares = match (self.shares, self.preset.as_str()) {
            (Some(s), _) => s,
            (None, "d1") => D1_SHARES,
            (None, "d2") => D2_SHARES,
            (None, "d3") => D3_SHARES,
            (None, other) => return invalid(format!("unknown dataset preset {other:?}")),
        };
        if shares.iter().any(|s| !(*s >= 0.0)) || shares.iter().sum::<f64>() <= 0.0 {
            return invalid("category shares must be non-negative with a positive sum");
        }
        let mut mix = MixConfig::from_shares(&shares, self.series);
        if let Some(n) = self.length {
            mix.length = n;
        }
        if let Some(n) = self.train_len {
            mix.train_len = n;
        }
        if let Some(f) = self.new_product_fraction {
            mix.new_product_fraction = f;
        }
        Ok(mix)
    }
}

/// Contents of an experiment configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    /// The training seed is optional here; runs set it from their seed list.
    pub model: ModelConfig,
    #[serde(default = "default_stride")]
    pub eval_stride: usize,
    /// Scheduling of independent runs within a study.
    #[serde(default)]
    pub exec: ExecMode,
}

fn default_stride() -> usize {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: ModelConfig::with_seed(0),
            eval_stride: 1,
            exec: ExecMode::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let mut value: serde_json::Value = if is_toml {
            toml::from_str(&text).map_err(|e| ForecastError::Toml(e.to_string()))?
        } else {
            serde_json::from_str(&text)?
        };
        Self::from_value(&mut value)
    }

    fn from_value(value: &mut serde_json::Value) -> Result<Self> {
        let Some(root) = value.as_object_mut() else {
            return invalid("experiment config must be a table");
        };
        let model = root.entry("model").or_insert_with(|| serde_json::json!({}));
        let Some(model) = model.as_object_mut() else {
            return invalid("[model] must be a table");
        };
        let training = model.entry("training").or_insert_with(|| serde_json::json!({}));
        if let Some(t) = training.as_object_mut() {
            t.entry("seed").or_insert(serde_json::json!(0));
        }
        let cfg: Self = serde_json::from_value(value.clone())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_stride == 0 {
            return invalid("eval_stride must be >= 1");
        }
        self.dataset.mix()?;
        self.model.validate()
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            stride: self.eval_stride,
            ..EvalConfig::default()
        }
    }

    pub fn study_setup(&self) -> Result<StudySetup> {
        Ok(StudySetup {
            dataset: self.dataset.mix()?,
            model: self.model.clone(),
            eval: self.eval_config(),
            exec: self.exec,
        })
    }
}

/// One experiment invocation: what to run, with which seeds, and where the
/// outputs go.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentSpec {
    pub id: String,
    pub config: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    /// Checks the seed list and creates the output directory, failing if it
    /// cannot be written.
    pub fn prepare(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return invalid(format!("{}: at least one seed is required", self.id));
        }
        std::fs::create_dir_all(&self.out_dir)?;
        if std::fs::metadata(&self.out_dir)?.permissions().readonly() {
            return invalid(format!("output directory {} is read-only", self.out_dir.display()));
        }
        Ok(())
    }

    pub fn load_config(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }
}
