//! Model parameters, seeded initialization, and the named-tensor container.
//!
//! Weights are stored in the safetensors layout (8-byte little-endian header
//! length, JSON header, raw little-endian f32 payloads). Tensor names:
//!
//! | name                  | shape                 |
//! |-----------------------|-----------------------|
//! | `embed`               | `[vocab, d_model]`    |
//! | `layer.{i}.attn_q`    | `[d_model, d_model]`  |
//! | `layer.{i}.attn_k`    | `[d_model, d_model]`  |
//! | `layer.{i}.attn_v`    | `[d_model, d_model]`  |
//! | `layer.{i}.attn_o`    | `[d_model, d_model]`  |
//! | `layer.{i}.mlp_gate`  | `[d_ff, d_model]`     |
//! | `layer.{i}.mlp_up`    | `[d_ff, d_model]`     |
//! | `layer.{i}.mlp_down`  | `[d_model, d_ff]`     |
//! | `layer.{i}.norm1`     | `[d_model]`           |
//! | `layer.{i}.norm2`     | `[d_model]`           |
//! | `final_norm`          | `[d_model]`           |
//! | `unembed`             | `[vocab, d_model]`    |
//!
//! Projection matrices use the `[out_features, in_features]` convention.
//! The model config is stored as JSON under the `config` metadata key.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::config::ModelConfig;
use crate::error::{Error, Result};

const CONFIG_KEY: &str = "config";

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_q: Vec<f32>,
    pub attn_k: Vec<f32>,
    pub attn_v: Vec<f32>,
    pub attn_o: Vec<f32>,
    pub mlp_gate: Vec<f32>,
    pub mlp_up: Vec<f32>,
    pub mlp_down: Vec<f32>,
    pub norm1: Vec<f32>,
    pub norm2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub unembed: Vec<f32>,
}

/// Canonical tensor names and shapes for a config, in storage order.
pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
    let mut out = vec![("embed".to_string(), vec![v, d])];
    for i in 0..config.n_layers {
        for (suffix, shape) in [
            ("attn_q", vec![d, d]),
            ("attn_k", vec![d, d]),
            ("attn_v", vec![d, d]),
            ("attn_o", vec![d, d]),
            ("mlp_gate", vec![f, d]),
            ("mlp_up", vec![f, d]),
            ("mlp_down", vec![d, f]),
            ("norm1", vec![d]),
            ("norm2", vec![d]),
        ] {
            out.push((format!("layer.{i}.{suffix}"), shape));
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![v, d]));
    out
}

impl LayerWeights {
    fn slots(&self) -> [&Vec<f32>; 9] {
        [
            &self.attn_q,
            &self.attn_k,
            &self.attn_v,
            &self.attn_o,
            &self.mlp_gate,
            &self.mlp_up,
            &self.mlp_down,
            &self.norm1,
            &self.norm2,
        ]
    }

    fn slots_mut(&mut self) -> [&mut Vec<f32>; 9] {
        [
            &mut self.attn_q,
            &mut self.attn_k,
            &mut self.attn_v,
            &mut self.attn_o,
            &mut self.mlp_gate,
            &mut self.mlp_up,
            &mut self.mlp_down,
            &mut self.norm1,
            &mut self.norm2,
        ]
    }
}

impl ModelWeights {
    /// All-zero weights with unit norm gains.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let layer = LayerWeights {
            attn_q: vec![0.0; d * d],
            attn_k: vec![0.0; d * d],
            attn_v: vec![0.0; d * d],
            attn_o: vec![0.0; d * d],
            mlp_gate: vec![0.0; f * d],
            mlp_up: vec![0.0; f * d],
            mlp_down: vec![0.0; d * f],
            norm1: vec![1.0; d],
            norm2: vec![1.0; d],
        };
        Ok(ModelWeights {
            config: config.clone(),
            embed: vec![0.0; v * d],
            layers: vec![layer; config.n_layers],
            final_norm: vec![1.0; d],
            unembed: vec![0.0; v * d],
        })
    }

    /// Parameter buffers in [`tensor_layout`] order.
    pub fn params(&self) -> Vec<&Vec<f32>> {
        let mut out = vec![&self.embed];
        for layer in &self.layers {
            out.extend(layer.slots());
        }
        out.push(&self.final_norm);
        out.push(&self.unembed);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = vec![&mut self.embed];
        for layer in &mut self.layers {
            out.extend(layer.slots_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Little-endian bytes of every parameter, in layout order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_params() * 4);
        for p in self.params() {
            for v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Serialize to the named-tensor container format.
    pub fn to_container_bytes(&self) -> Result<Vec<u8>> {
        let layout = tensor_layout(&self.config);
        let bytes: Vec<Vec<u8>> = self.params().iter().map(|p| f32_to_le(p)).collect();
        let mut views = Vec::with_capacity(layout.len());
        for ((name, shape), data) in layout.into_iter().zip(&bytes) {
            let view = TensorView::new(Dtype::F32, shape, data)
                .map_err(|e| Error::Container(format!("{name}: {e}")))?;
            views.push((name, view));
        }
        let mut meta = HashMap::new();
        meta.insert(CONFIG_KEY.to_string(), serde_json::to_string(&self.config)?);
        safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Container(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_container_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn f32_to_le(xs: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(xs.len() * 4);
    for v in xs {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn le_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Draw weights from N(0, 1/d_model); RMS-norm gains start at 1.
///
/// The same `(config, seed)` always produces bit-identical weights.
pub fn random_init(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    let mut weights = ModelWeights::zeros(config)?;
    let std = 1.0 / (config.d_model as f32).sqrt();
    let normal = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = tensor_layout(config);
    for ((name, _), param) in layout.iter().zip(weights.params_mut()) {
        if name.ends_with("norm1") || name.ends_with("norm2") || name == "final_norm" {
            continue;
        }
        for v in param.iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(weights)
}

/// Read the config stored in a container's metadata, if present.
pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) =
        SafeTensors::read_metadata(&bytes).map_err(|e| Error::Container(e.to_string()))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(CONFIG_KEY))
        .ok_or_else(|| {
            Error::Container(format!("{}: no `{CONFIG_KEY}` metadata entry", path.display()))
        })?;
    let config: ModelConfig = serde_json::from_str(raw)?;
    config.validate()?;
    Ok(config)
}

/// Load and shape-check every tensor named by `config`.
pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<ModelWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    weights_from_container_bytes(&bytes, config)
}

pub fn weights_from_container_bytes(bytes: &[u8], config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Container(e.to_string()))?;
    let mut weights = ModelWeights::zeros(config)?;
    for ((name, shape), slot) in tensor_layout(config).into_iter().zip(weights.params_mut()) {
        let view = match st.tensor(&name) {
            Ok(v) => v,
            Err(safetensors::SafeTensorError::TensorNotFound(_)) => {
                return Err(Error::MissingTensor { name })
            }
            Err(e) => return Err(Error::Container(format!("{name}: {e}"))),
        };
        if view.dtype() != Dtype::F32 {
            return Err(Error::Dtype {
                name,
                dtype: format!("{:?}", view.dtype()),
            });
        }
        if view.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                name,
                expected: shape,
                found: view.shape().to_vec(),
            });
        }
        let values = le_to_f32(view.data());
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { name, index });
        }
        *slot = values;
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            rope_theta: 10_000.0,
            rms_eps: 1e-5,
            max_seq_len: 16,
        }
    }

    fn container_without(weights: &ModelWeights, skip: &str) -> Vec<u8> {
        let layout = tensor_layout(&weights.config);
        let bytes: Vec<Vec<u8>> = weights.params().iter().map(|p| f32_to_le(p)).collect();
        let views: Vec<_> = layout
            .into_iter()
            .zip(&bytes)
            .filter(|((n, _), _)| n != skip)
            .map(|((n, s), b)| (n, TensorView::new(Dtype::F32, s, b).unwrap()))
            .collect();
        safetensors::serialize(views, &None).unwrap()
    }

    #[test]
    fn same_seed_is_bit_identical_and_seeds_differ() {
        let a = random_init(&tiny(), 1).unwrap();
        let b = random_init(&tiny(), 1).unwrap();
        let c = random_init(&tiny(), 2).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        assert_ne!(a.to_le_bytes(), c.to_le_bytes());
        assert!(a.layers[0].norm1.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn random_init_rejects_indivisible_heads() {
        let mut cfg = tiny();
        cfg.d_model = 64;
        cfg.n_heads = 3;
        assert!(matches!(random_init(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn container_round_trip_two_layers() {
        let w = random_init(&tiny(), 7).unwrap();
        let bytes = w.to_container_bytes().unwrap();
        let back = weights_from_container_bytes(&bytes, &tiny()).unwrap();
        assert_eq!(back.layers.len(), 2);
        assert_eq!(back, w);
    }

    #[test]
    fn missing_unembed_is_named() {
        let w = random_init(&tiny(), 7).unwrap();
        let bytes = container_without(&w, "unembed");
        match weights_from_container_bytes(&bytes, &tiny()) {
            Err(Error::MissingTensor { name }) => assert_eq!(name, "unembed"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wider_embedding_is_a_shape_mismatch() {
        let w = random_init(&tiny(), 0).unwrap();
        let layout = tensor_layout(&w.config);
        let mut bytes: Vec<Vec<u8>> = w.params().iter().map(|p| f32_to_le(p)).collect();
        bytes[0] = f32_to_le(&vec![0.5; 11 * 9]);
        let views: Vec<_> = layout
            .into_iter()
            .zip(&bytes)
            .map(|((n, s), b)| {
                let s = if n == "embed" { vec![11, 9] } else { s };
                (n, TensorView::new(Dtype::F32, s, b).unwrap())
            })
            .collect();
        let container = safetensors::serialize(views, &None).unwrap();
        match weights_from_container_bytes(&container, &tiny()) {
            Err(Error::ShapeMismatch { name, expected, found }) => {
                assert_eq!(name, "embed");
                assert_eq!(expected, vec![11, 8]);
                assert_eq!(found, vec![11, 9]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut w = random_init(&tiny(), 0).unwrap();
        w.layers[1].mlp_up[3] = f32::NAN;
        let bytes = w.to_container_bytes().unwrap();
        match weights_from_container_bytes(&bytes, &tiny()) {
            Err(Error::NonFinite { name, index }) => {
                assert_eq!(name, "layer.1.mlp_up");
                assert_eq!(index, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
