//! Model geometry, timing constants and their validation.
//!
//! Both types are plain data: they are deserialized from a single JSON
//! document (`{"model": {...}, "timing": {...}}`) and checked once by
//! [`validate_config`]. Everything downstream takes a [`ValidatedConfig`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bit-widths an expert can be stored or transferred at.
pub const BIT_WIDTHS: [u8; 4] = [16, 8, 4, 2];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Static MoE geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    /// Routed experts per layer. Shared experts live in `dense_bytes`.
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    /// First deep layer; layers `0..shallow_boundary` are cached first.
    #[serde(rename = "shallow_boundary_L")]
    pub shallow_boundary: usize,
    /// Bytes per expert keyed by bit-width.
    pub expert_bytes: BTreeMap<u8, u64>,
    /// Non-expert resident bytes: dense layers, shared experts, KV cache,
    /// activations and the prefetch staging area.
    pub dense_bytes: u64,
}

impl ModelConfig {
    pub fn expert_bytes_at(&self, bits: u8) -> u64 {
        self.expert_bytes[&bits]
    }

    /// Geometry resembling a 24-layer, 60-expert, top-4 model with
    /// fine-grained experts (3 x 2048 x 1408 parameters each). The hidden
    /// dimension is the synthetic one used by the trace generator, not the
    /// real model width.
    pub fn reference() -> Self {
        let params: u64 = 3 * 2048 * 1408;
        let expert_bytes = BIT_WIDTHS
            .iter()
            .map(|&b| (b, crate::quant::expert_bytes_for(params, b, 64)))
            .collect();
        Self {
            num_layers: 24,
            num_experts: 60,
            top_k: 4,
            hidden_dim: 64,
            shallow_boundary: 3,
            expert_bytes,
            dense_bytes: 4_000_000_000,
        }
    }
}

/// Per-step compute costs and per-expert transfer costs, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    /// MoE layer compute for one decode step.
    pub t_moe: f64,
    pub t_attn: f64,
    pub t_gate: f64,
    /// Host-to-device transfer time of one expert, keyed by bit-width.
    pub t_expert_io: BTreeMap<u8, f64>,
    /// Dequantization cost per quantized expert, charged on the compute stream.
    pub dequant_ms: f64,
    /// MoE layer compute for the whole prompt batch during prefill.
    /// Falls back to `t_moe` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_moe_prefill: Option<f64>,
}

impl TimingModel {
    pub fn io_ms(&self, bits: u8) -> f64 {
        self.t_expert_io[&bits]
    }

    pub fn prefill_moe_ms(&self) -> f64 {
        self.t_moe_prefill.unwrap_or(self.t_moe)
    }

    /// Decode-step time window `t_moe + t_attn + t_gate`.
    pub fn step_window(&self) -> f64 {
        self.t_moe + self.t_attn + self.t_gate
    }

    /// Transfer times proportional to `expert_bytes`, pinned so that a
    /// 16-bit expert takes `ms_per_bf16_expert`.
    pub fn proportional(cfg: &ModelConfig, ms_per_bf16_expert: f64) -> BTreeMap<u8, f64> {
        let full = cfg.expert_bytes_at(16) as f64;
        cfg.expert_bytes
            .iter()
            .map(|(&b, &bytes)| (b, ms_per_bf16_expert * bytes as f64 / full))
            .collect()
    }

    /// 13 ms MoE block and 6 ms per 16-bit expert transfer, as measured on a
    /// PCIe 3.0 desktop GPU. Attention and gate costs are our defaults.
    pub fn reference(cfg: &ModelConfig) -> Self {
        Self {
            t_moe: 13.0,
            t_attn: 2.0,
            t_gate: 0.5,
            t_expert_io: Self::proportional(cfg, 6.0),
            dequant_ms: 0.2,
            t_moe_prefill: Some(120.0),
        }
    }

    /// Same model, transfers scaled by `factor` (e.g. 4.0 for a PCIe 1.0 host).
    pub fn with_io_scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for v in out.t_expert_io.values_mut() {
            *v *= factor;
        }
        out
    }
}

/// A model/timing pair that has passed [`validate_config`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidatedConfig {
    model: ModelConfig,
    timing: TimingModel,
}

impl ValidatedConfig {
    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn timing(&self) -> &TimingModel {
        &self.timing
    }

    pub fn into_parts(self) -> (ModelConfig, TimingModel) {
        (self.model, self.timing)
    }

    pub fn reference() -> Self {
        let model = ModelConfig::reference();
        let timing = TimingModel::reference(&model);
        validate_config(model, timing).expect("reference config is valid")
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::InvalidConfig(msg.into())
}

pub fn validate_config(cfg: ModelConfig, timing: TimingModel) -> Result<ValidatedConfig, ConfigError> {
    if cfg.num_layers == 0 {
        return Err(invalid("num_layers must be >= 1"));
    }
    if cfg.num_experts == 0 {
        return Err(invalid("num_experts must be >= 1"));
    }
    if cfg.top_k == 0 || cfg.top_k > cfg.num_experts {
        return Err(invalid(format!(
            "top_k must satisfy 1 <= top_k <= num_experts (top_k={}, num_experts={})",
            cfg.top_k, cfg.num_experts
        )));
    }
    if cfg.hidden_dim == 0 {
        return Err(invalid("hidden_dim must be >= 1"));
    }
    if cfg.shallow_boundary > cfg.num_layers {
        return Err(invalid(format!(
            "shallow_boundary_L must satisfy 0 <= L <= num_layers (L={}, num_layers={})",
            cfg.shallow_boundary, cfg.num_layers
        )));
    }
    for b in BIT_WIDTHS {
        match cfg.expert_bytes.get(&b) {
            None => return Err(invalid(format!("expert_bytes missing bit-width {b}"))),
            Some(0) => return Err(invalid(format!("expert_bytes[{b}] must be > 0"))),
            Some(_) => {}
        }
    }
    if let Some(extra) = cfg.expert_bytes.keys().find(|b| !BIT_WIDTHS.contains(b)) {
        return Err(invalid(format!("expert_bytes has unsupported bit-width {extra}")));
    }
    // BTreeMap iterates in ascending bit-width order.
    let sizes: Vec<(u8, u64)> = cfg.expert_bytes.iter().map(|(&b, &s)| (b, s)).collect();
    for pair in sizes.windows(2) {
        let ((lo_b, lo), (hi_b, hi)) = (pair[0], pair[1]);
        if lo >= hi {
            return Err(invalid(format!(
                "expert_bytes must strictly decrease with bit-width (expert_bytes[{lo_b}]={lo} >= expert_bytes[{hi_b}]={hi})"
            )));
        }
    }

    for (name, v) in [
        ("t_moe", timing.t_moe),
        ("t_attn", timing.t_attn),
        ("t_gate", timing.t_gate),
        ("dequant_ms", timing.dequant_ms),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid(format!("{name} must be finite and > 0 (got {v})")));
        }
    }
    if let Some(v) = timing.t_moe_prefill {
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid(format!("t_moe_prefill must be finite and > 0 (got {v})")));
        }
    }
    for b in [16u8, 4, 2] {
        if !timing.t_expert_io.contains_key(&b) {
            return Err(invalid(format!("t_expert_io missing bit-width {b}")));
        }
    }
    for (&b, &v) in &timing.t_expert_io {
        if !BIT_WIDTHS.contains(&b) {
            return Err(invalid(format!("t_expert_io has unsupported bit-width {b}")));
        }
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid(format!("t_expert_io[{b}] must be finite and > 0 (got {v})")));
        }
    }
    let io: Vec<(u8, f64)> = timing.t_expert_io.iter().map(|(&b, &v)| (b, v)).collect();
    for pair in io.windows(2) {
        let ((lo_b, lo), (hi_b, hi)) = (pair[0], pair[1]);
        if lo >= hi {
            return Err(invalid(format!(
                "t_expert_io must strictly increase with bit-width (t_expert_io[{lo_b}]={lo} >= t_expert_io[{hi_b}]={hi})"
            )));
        }
    }
    Ok(ValidatedConfig { model: cfg, timing })
}

/// On-disk config document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub timing: TimingModel,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ValidatedConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: ConfigFile = serde_json::from_str(&text)?;
        validate_config(file.model, file.timing)
    }

    pub fn save(cfg: &ValidatedConfig, path: &Path) -> Result<(), ConfigError> {
        let doc = ConfigFile {
            model: cfg.model().clone(),
            timing: cfg.timing().clone(),
        };
        let text = serde_json::to_string_pretty(&doc)?;
        fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelConfig, TimingModel) {
        let model = ModelConfig {
            num_layers: 8,
            num_experts: 4,
            top_k: 2,
            hidden_dim: 16,
            shallow_boundary: 3,
            expert_bytes: [(16, 1600), (8, 800), (4, 400), (2, 200)].into_iter().collect(),
            dense_bytes: 10_000,
        };
        let timing = TimingModel {
            t_moe: 13.0,
            t_attn: 9.0,
            t_gate: 2.0,
            t_expert_io: [(16, 24.0), (8, 12.0), (4, 6.0), (2, 3.0)].into_iter().collect(),
            dequant_ms: 0.2,
            t_moe_prefill: None,
        };
        (model, timing)
    }

    #[test]
    fn accepts_valid_small_config() {
        let (m, t) = small();
        let v = validate_config(m.clone(), t.clone()).unwrap();
        assert_eq!(v.model(), &m);
        assert_eq!(v.timing(), &t);
    }

    #[test]
    fn rejects_top_k_above_num_experts() {
        let (mut m, t) = small();
        m.top_k = 5;
        let err = validate_config(m, t).unwrap_err().to_string();
        assert!(err.contains("top_k"), "{err}");
    }

    #[test]
    fn rejects_io_ordering_violation() {
        let (m, mut t) = small();
        t.t_expert_io.insert(2, 7.0);
        t.t_expert_io.insert(4, 6.0);
        let err = validate_config(m, t).unwrap_err().to_string();
        assert!(err.contains("t_expert_io"), "{err}");
    }

    #[test]
    fn rejects_boundary_past_last_layer() {
        let (mut m, t) = small();
        m.shallow_boundary = 9;
        assert!(validate_config(m, t).is_err());
    }

    #[test]
    fn reference_config_is_valid() {
        let v = ValidatedConfig::reference();
        assert_eq!(v.model().num_experts, 60);
        assert!((v.timing().io_ms(16) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let cfg = ValidatedConfig::reference();
        ConfigFile::save(&cfg, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("shallow_boundary_L"));
        assert_eq!(ConfigFile::load(&path).unwrap(), cfg);
    }
}
