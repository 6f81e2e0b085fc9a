//! Run configuration: one TOML file, unknown keys rejected, flags override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factoring::{FactorMode, LinearInit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

/// Every knob of a run. Defaults follow the desk-scale recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub precision: Precision,
    pub patch: usize,

    pub flow_depth: usize,
    pub flow_width: usize,
    pub flow_block_depth: usize,
    pub flow_heads: usize,
    pub flow_mlp: usize,

    pub backbone_depth: usize,
    pub backbone_width: usize,
    pub backbone_heads: usize,
    pub backbone_kv_heads: usize,
    pub backbone_mlp: usize,
    pub dropout: f64,
    pub mixture_components: usize,

    pub factor_mode: FactorMode,
    /// Channels per token kept for the autoregressive prior. Unset means all
    /// channels with no factoring and 16 otherwise.
    pub factor_dims: Option<usize>,
    pub factor_init: LinearInit,

    pub sigma0: f64,
    pub sigma_end: f64,
    pub jitter_std: f64,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_frac: f64,
    pub final_lr_frac: f64,

    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,

    pub text_weight: f64,
    pub cond_drop: f64,
    pub stop_gradient: bool,
    pub flip: bool,
    pub max_text: usize,

    pub checkpoint_every: u64,
    pub eval_every: u64,

    pub cfg_strength: f64,
    pub cfg_budget: usize,
    pub temp_mixture: f64,
    pub temp_scale: f64,
    pub temp_factored: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_data: None,
            eval_data: None,
            precision: Precision::F32,
            patch: 4,
            flow_depth: 8,
            flow_width: 64,
            flow_block_depth: 2,
            flow_heads: 4,
            flow_mlp: 128,
            backbone_depth: 4,
            backbone_width: 128,
            backbone_heads: 4,
            backbone_kv_heads: 1,
            backbone_mlp: 512,
            dropout: 0.1,
            mixture_components: 64,
            factor_mode: FactorMode::PostFlow,
            factor_dims: None,
            factor_init: LinearInit::Identity,
            sigma0: 64.0,
            sigma_end: 0.0,
            jitter_std: 0.3,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            warmup_frac: 0.02,
            final_lr_frac: 0.1,
            batch_size: 64,
            steps: 5000,
            seed: 0,
            text_weight: 0.0025,
            cond_drop: 0.1,
            stop_gradient: true,
            flip: true,
            max_text: 16,
            checkpoint_every: 1000,
            eval_every: 0,
            cfg_strength: 4.0,
            cfg_budget: 64,
            temp_mixture: 1.0,
            temp_scale: 1.0,
            temp_factored: 1.0,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Resolved channel count d for tokens with `c` channels.
    pub fn factor_dims_for(&self, c: usize) -> usize {
        match (self.factor_dims, self.factor_mode) {
            (Some(d), _) => d,
            (None, FactorMode::None) => c,
            (None, _) => 16.min(c),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parse `text` and apply `key=value` overrides on top.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            table.insert(k.clone(), parse_value(v));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit.
        for (key, v) in [("seed", self.seed), ("steps", self.steps)] {
            if v > i64::MAX as u64 {
                return Err(Error::Config(format!("{key} must be below 2^63, got {v}")));
            }
        }
        let positive = [
            ("patch", self.patch),
            ("flow_width", self.flow_width),
            ("flow_block_depth", self.flow_block_depth),
            ("flow_heads", self.flow_heads),
            ("flow_mlp", self.flow_mlp),
            ("backbone_width", self.backbone_width),
            ("backbone_heads", self.backbone_heads),
            ("backbone_kv_heads", self.backbone_kv_heads),
            ("backbone_mlp", self.backbone_mlp),
            ("mixture_components", self.mixture_components),
            ("batch_size", self.batch_size),
            ("cfg_budget", self.cfg_budget),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let unit = [("dropout", self.dropout), ("cond_drop", self.cond_drop), ("warmup_frac", self.warmup_frac)];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.dropout >= 1.0 {
            return Err(Error::Config("dropout must be below 1".into()));
        }
        if !(self.sigma_end >= 0.0 && self.sigma0 >= self.sigma_end) {
            return Err(Error::Config("noise schedule needs 0 ≤ sigma_end ≤ sigma0".into()));
        }
        if !(self.lr > 0.0 && self.grad_clip > 0.0 && self.jitter_std >= 0.0 && self.cfg_strength >= 0.0) {
            return Err(Error::Config("lr and grad_clip must be positive; jitter and guidance non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Parse `key=value` override strings.
pub fn parse_overrides(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Usage(format!("override {s:?} is not key=value")))
        })
        .collect()
}
