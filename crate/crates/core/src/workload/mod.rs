//! Transformer workload description: model hyperparameters, requests, KV
//! cache sizing and the operator graphs for prefill and decode.

mod graph;

pub use graph::{
    build_decode_graph, build_prefill_graph, op_flops, op_flops_with, op_kv_bytes,
    op_moved_bytes, op_weight_bytes, Block, Dims, FcLayer, FlopConstants, KvKind, NodeId, OpClass,
    OpKind, OpNode, OpRole, OperatorGraph, Phase, WeightBytes,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::presets;

fn default_elem_bytes() -> u64 {
    2
}

fn default_ffn_mult() -> u64 {
    4
}

/// Hyperparameters of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub d_emb: u64,
    pub n_layers: u64,
    pub n_heads: u64,
    pub d_k: u64,
    #[serde(default = "default_elem_bytes")]
    pub elem_bytes: u64,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_emb", self.d_emb),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("elem_bytes", self.elem_bytes),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(Error::InvalidModel(format!("{name} must be positive")));
            }
        }
        if self.n_heads * self.d_k != self.d_emb {
            return Err(Error::InvalidModel(format!(
                "d_emb ({}) must equal n_heads ({}) x d_k ({}) = {}",
                self.d_emb,
                self.n_heads,
                self.d_k,
                self.n_heads * self.d_k
            )));
        }
        Ok(())
    }

    pub fn d_ffn(&self) -> u64 {
        self.ffn_mult * self.d_emb
    }

    /// Bundled OPT presets by name (`opt-350m` ... `opt-30b`).
    pub fn preset(name: &str) -> Result<Self> {
        let text = presets::model(name).ok_or_else(|| Error::UnknownPreset(name.to_string()))?;
        load_model_config(text)
    }
}

/// Parse and validate a model config document.
pub fn load_model_config(source: &str) -> Result<ModelConfig> {
    let config: ModelConfig = serde_json::from_str(source)?;
    config.validate()?;
    Ok(config)
}

/// Prompt length and number of generated tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub len_in: u64,
    pub len_out: u64,
}

impl InferenceRequest {
    pub fn new(len_in: u64, len_out: u64) -> Result<Self> {
        let req = Self { len_in, len_out };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        if self.len_in == 0 {
            return Err(Error::InvalidRequest("len_in must be at least 1".into()));
        }
        Ok(())
    }

    /// Attention length seen by decode step `t` (1-based).
    pub fn decode_seq_len(&self, t: u64) -> u64 {
        self.len_in + t - 1
    }
}

/// KV cache occupancy for one decode step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KVCacheState {
    pub seq_len: u64,
    pub bytes_per_layer: u64,
    pub total_bytes: u64,
}

impl KVCacheState {
    pub fn new(model: &ModelConfig, seq_len: u64) -> Self {
        let bytes_per_layer = 2 * seq_len * model.d_emb * model.elem_bytes;
        Self {
            seq_len,
            bytes_per_layer,
            total_bytes: bytes_per_layer * model.n_layers,
        }
    }
}

pub fn kv_cache_bytes(model: &ModelConfig, seq: u64) -> u64 {
    KVCacheState::new(model, seq).total_bytes
}

/// Static weight bytes of the decoder body. Embedding table and LM head are
/// not part of the simulated graphs and are excluded.
pub fn model_weight_bytes(model: &ModelConfig) -> u64 {
    let one_layer = ModelConfig {
        n_layers: 1,
        ..model.clone()
    };
    let kv = KVCacheState::new(&one_layer, 1);
    let graph = build_decode_graph(&one_layer, &kv);
    let per_layer: u64 = graph
        .nodes
        .iter()
        .map(|n| op_weight_bytes(n, &one_layer).bytes)
        .sum();
    per_layer * model.n_layers
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opt_presets_match_table() {
        let m = ModelConfig::preset("opt-13b").unwrap();
        assert_eq!((m.d_emb, m.n_layers, m.n_heads, m.d_k), (5120, 40, 40, 128));
        let m = ModelConfig::preset("opt-350m").unwrap();
        assert_eq!((m.d_emb, m.n_layers, m.n_heads, m.d_k), (1024, 24, 16, 64));
        let m = ModelConfig::preset("opt-1.3b").unwrap();
        assert_eq!((m.d_emb, m.n_layers, m.n_heads, m.d_k), (2048, 24, 32, 64));
        let m = ModelConfig::preset("opt-6.7b").unwrap();
        assert_eq!((m.d_emb, m.n_layers, m.n_heads, m.d_k), (4096, 32, 32, 128));
        let m = ModelConfig::preset("opt-30b").unwrap();
        assert_eq!((m.d_emb, m.n_layers, m.n_heads, m.d_k), (7168, 48, 56, 128));
        assert_eq!(m.elem_bytes, 2);
        assert_eq!(m.ffn_mult, 4);
    }

    #[test]
    fn inconsistent_head_dim_rejected() {
        let doc = r#"{"name":"bad","d_emb":1000,"n_layers":2,"n_heads":16,"d_k":64}"#;
        let err = load_model_config(doc).unwrap_err();
        assert!(matches!(err, Error::InvalidModel(_)), "{err}");
        assert!(err.to_string().contains("1024"));
    }

    #[test]
    fn missing_field_rejected() {
        let doc = r#"{"name":"bad","d_emb":1024,"n_heads":16,"d_k":64}"#;
        let err = load_model_config(doc).unwrap_err();
        assert!(err.to_string().contains("n_layers"), "{err}");
    }

    #[test]
    fn zero_field_rejected() {
        let doc = r#"{"name":"bad","d_emb":0,"n_layers":2,"n_heads":0,"d_k":64}"#;
        assert!(matches!(
            load_model_config(doc),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(
            ModelConfig::preset("gpt-9"),
            Err(Error::UnknownPreset(_))
        ));
    }

    #[test]
    fn kv_cache_opt30b_1k() {
        let m = ModelConfig::preset("opt-30b").unwrap();
        let bytes = kv_cache_bytes(&m, 1024);
        assert_eq!(bytes, 1_409_286_144);
        let gib = bytes as f64 / (1u64 << 30) as f64;
        assert!((gib - 1.3125).abs() < 1e-12);
        assert_eq!(kv_cache_bytes(&m, 0), 0);
    }

    #[test]
    fn decoder_weights_opt30b() {
        let m = ModelConfig::preset("opt-30b").unwrap();
        let bytes = model_weight_bytes(&m);
        assert_eq!(bytes, 12 * 7168 * 7168 * 2 * 48);
        let rel = (bytes as f64 / 60e9 - 1.0).abs();
        assert!(rel < 0.05, "{rel}");
    }

    #[test]
    fn request_validation() {
        assert!(InferenceRequest::new(0, 4).is_err());
        let r = InferenceRequest::new(256, 0).unwrap();
        assert_eq!(r.decode_seq_len(1), 256);
    }
}
