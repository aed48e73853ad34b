//! Forward pass with residual-stream hook points.
//!
//! Layer `0` is the embedding output; layer `L` (1-based) is the residual
//! stream after block `L`. Hooks at layer `L` rewrite one position of that
//! stream before block `L + 1` reads it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::{LayerWeights, ModelWeights};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, matmul_nt};

/// `gain_i · x_i / sqrt(mean(x²) + eps)`
pub fn rms_norm(x: &[f32], gain: &[f32], eps: f32) -> Vec<f32> {
    let inv = inv_rms(x, eps);
    x.iter().zip(gain).map(|(&v, &g)| g * (v * inv)).collect()
}

#[inline]
pub(crate) fn inv_rms(x: &[f32], eps: f32) -> f32 {
    let ms = dot(x, x) / x.len() as f32;
    1.0 / (ms + eps).sqrt()
}

/// Row-wise RMS norm; returns the normalized rows and each row's `1/rms`.
pub(crate) fn rms_norm_rows(x: &[f32], d: usize, gain: &[f32], eps: f32) -> (Vec<f32>, Vec<f32>) {
    let mut out = Vec::with_capacity(x.len());
    let mut invs = Vec::with_capacity(x.len() / d);
    for row in x.chunks_exact(d) {
        let inv = inv_rms(row, eps);
        invs.push(inv);
        out.extend(row.iter().zip(gain).map(|(&v, &g)| g * (v * inv)));
    }
    (out, invs)
}

#[inline]
pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Rotary position tables (rotate-half layout).
#[derive(Debug, Clone)]
pub(crate) struct Rope {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl Rope {
    pub(crate) fn new(config: &ModelConfig) -> Self {
        let hd = config.head_dim();
        let half = hd / 2;
        let mut cos = Vec::with_capacity(config.max_seq_len * half);
        let mut sin = Vec::with_capacity(config.max_seq_len * half);
        let theta = config.rope_theta as f64;
        for pos in 0..config.max_seq_len {
            for i in 0..half {
                let inv_freq = theta.powf(-(2.0 * i as f64) / hd as f64);
                let angle = pos as f64 * inv_freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Rope { half, cos, sin }
    }

    /// Rotate one head vector in place; `inverse` applies the transpose.
    #[inline]
    pub(crate) fn rotate(&self, x: &mut [f32], pos: usize, inverse: bool) {
        let base = pos * self.half;
        for i in 0..self.half {
            let c = self.cos[base + i];
            let s = if inverse { -self.sin[base + i] } else { self.sin[base + i] };
            let (a, b) = (x[i], x[i + self.half]);
            x[i] = a * c - b * s;
            x[i + self.half] = b * c + a * s;
        }
    }
}

/// Intermediate activations of one block, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct BlockCache {
    pub x_in: Vec<f32>,
    pub inv1: Vec<f32>,
    pub a: Vec<f32>,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    /// `n_heads × seq × seq`, zero above the diagonal.
    pub probs: Vec<f32>,
    pub ctx: Vec<f32>,
    pub x_mid: Vec<f32>,
    pub inv2: Vec<f32>,
    pub m: Vec<f32>,
    pub gate: Vec<f32>,
    pub up: Vec<f32>,
    pub act: Vec<f32>,
}

pub(crate) fn block_forward(
    config: &ModelConfig,
    rope: &Rope,
    lw: &LayerWeights,
    x: &[f32],
    seq: usize,
) -> (Vec<f32>, BlockCache) {
    let d = config.d_model;
    let f = config.d_ff;
    let nh = config.n_heads;
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();

    let (a, inv1) = rms_norm_rows(x, d, &lw.norm1, config.rms_eps);
    let mut q = matmul_nt(&a, &lw.attn_q, seq, d, d);
    let mut k = matmul_nt(&a, &lw.attn_k, seq, d, d);
    let v = matmul_nt(&a, &lw.attn_v, seq, d, d);
    for pos in 0..seq {
        for h in 0..nh {
            let r = pos * d + h * hd..pos * d + (h + 1) * hd;
            rope.rotate(&mut q[r.clone()], pos, false);
            rope.rotate(&mut k[r], pos, false);
        }
    }

    let mut probs = vec![0.0f32; nh * seq * seq];
    let mut ctx = vec![0.0f32; seq * d];
    for h in 0..nh {
        for i in 0..seq {
            let qi = &q[i * d + h * hd..i * d + (h + 1) * hd];
            let row = &mut probs[(h * seq + i) * seq..(h * seq + i) * seq + seq];
            let mut max = f32::NEG_INFINITY;
            for j in 0..=i {
                let s = dot(qi, &k[j * d + h * hd..j * d + (h + 1) * hd]) * scale;
                row[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0f32;
            for p in row.iter_mut().take(i + 1) {
                *p = (*p - max).exp();
                sum += *p;
            }
            let out = &mut ctx[i * d + h * hd..i * d + (h + 1) * hd];
            for j in 0..=i {
                row[j] /= sum;
                axpy(out, row[j], &v[j * d + h * hd..j * d + (h + 1) * hd]);
            }
        }
    }

    let attn = matmul_nt(&ctx, &lw.attn_o, seq, d, d);
    let x_mid: Vec<f32> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();

    let (m, inv2) = rms_norm_rows(&x_mid, d, &lw.norm2, config.rms_eps);
    let gate = matmul_nt(&m, &lw.mlp_gate, seq, d, f);
    let up = matmul_nt(&m, &lw.mlp_up, seq, d, f);
    let act: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    let down = matmul_nt(&act, &lw.mlp_down, seq, f, d);
    let out: Vec<f32> = x_mid.iter().zip(&down).map(|(a, b)| a + b).collect();

    let cache = BlockCache {
        x_in: x.to_vec(),
        inv1,
        a,
        q,
        k,
        v,
        probs,
        ctx,
        x_mid,
        inv2,
        m,
        gate,
        up,
        act,
    };
    (out, cache)
}

/// Which token a hook or capture refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Index(usize),
    Last,
}

impl Position {
    pub fn resolve(self, seq_len: usize) -> Option<usize> {
        match self {
            Position::Index(i) if i < seq_len => Some(i),
            Position::Last if seq_len > 0 => Some(seq_len - 1),
            _ => None,
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Position::Index(i) => write!(f, "{i}"),
            Position::Last => f.write_str("last"),
        }
    }
}

/// A pure rewrite of one hidden-state vector.
pub type Transform = Arc<dyn Fn(&[f32]) -> Result<Vec<f32>> + Send + Sync>;

/// Rewrites the residual stream at `(layer, position)`.
#[derive(Clone)]
pub struct HookAction {
    pub layer: usize,
    pub position: Position,
    pub transform: Transform,
}

impl HookAction {
    pub fn new(
        layer: usize,
        position: Position,
        f: impl Fn(&[f32]) -> Result<Vec<f32>> + Send + Sync + 'static,
    ) -> Self {
        HookAction {
            layer,
            position,
            transform: Arc::new(f),
        }
    }

    pub fn identity(layer: usize, position: Position) -> Self {
        Self::new(layer, position, |h| Ok(h.to_vec()))
    }
}

impl fmt::Debug for HookAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HookAction")
            .field("layer", &self.layer)
            .field("position", &self.position)
            .finish_non_exhaustive()
    }
}

/// A residual-stream vector at a given layer and position.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub vector: Vec<f32>,
    pub layer: usize,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    /// `seq_len × vocab_size`, row-major.
    pub logits: Vec<f32>,
    /// Post-hook residual stream (`seq_len × d_model`) per requested layer.
    pub captured: BTreeMap<usize, Vec<f32>>,
}

impl ForwardOutput {
    pub fn logits_at(&self, position: usize) -> &[f32] {
        &self.logits[position * self.vocab_size..(position + 1) * self.vocab_size]
    }

    pub fn last_logits(&self) -> &[f32] {
        self.logits_at(self.seq_len - 1)
    }

    pub fn hidden(&self, layer: usize, position: usize) -> Option<HiddenState> {
        let m = self.captured.get(&layer)?;
        if position >= self.seq_len {
            return None;
        }
        Some(HiddenState {
            vector: m[position * self.d_model..(position + 1) * self.d_model].to_vec(),
            layer,
            position,
        })
    }
}

fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some((position, &id)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &t)| t as usize >= config.vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            id,
            position,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

pub(crate) fn embed_tokens(weights: &ModelWeights, tokens: &[u32]) -> Vec<f32> {
    let d = weights.config.d_model;
    let mut x = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        x.extend_from_slice(&weights.embed[t as usize * d..(t as usize + 1) * d]);
    }
    x
}

fn apply_hooks(hooks: &[&HookAction], x: &mut [f32], seq: usize, d: usize) -> Result<()> {
    for hook in hooks {
        // positions were validated up front
        let pos = hook.position.resolve(seq).expect("validated hook position");
        let slot = &mut x[pos * d..(pos + 1) * d];
        let new = (hook.transform)(slot)?;
        if new.len() != d {
            return Err(Error::Hook(format!(
                "transform at layer {} position {} returned {} values, expected {d}",
                hook.layer,
                hook.position,
                new.len()
            )));
        }
        slot.copy_from_slice(&new);
    }
    Ok(())
}

/// Causal forward pass with residual-stream hooks and captures.
pub fn forward_with_hooks(
    weights: &ModelWeights,
    tokens: &[u32],
    hooks: &[HookAction],
    capture_layers: &BTreeSet<usize>,
) -> Result<ForwardOutput> {
    let config = &weights.config;
    check_tokens(config, tokens)?;
    let seq = tokens.len();
    let d = config.d_model;
    let n = config.n_layers;

    let mut by_layer: Vec<Vec<&HookAction>> = vec![Vec::new(); n + 1];
    let mut seen = BTreeSet::new();
    for hook in hooks {
        if hook.layer > n {
            return Err(Error::Hook(format!(
                "hook layer {} out of range [0, {n}]",
                hook.layer
            )));
        }
        let pos = hook.position.resolve(seq).ok_or_else(|| {
            Error::Hook(format!(
                "hook position {} out of range for sequence length {seq}",
                hook.position
            ))
        })?;
        if !seen.insert((hook.layer, pos)) {
            return Err(Error::Hook(format!(
                "more than one hook at layer {} position {pos}",
                hook.layer
            )));
        }
        by_layer[hook.layer].push(hook);
    }
    if let Some(&bad) = capture_layers.iter().find(|&&l| l > n) {
        return Err(Error::Hook(format!("capture layer {bad} out of range [0, {n}]")));
    }

    let rope = Rope::new(config);
    let mut captured = BTreeMap::new();
    let mut x = embed_tokens(weights, tokens);
    apply_hooks(&by_layer[0], &mut x, seq, d)?;
    if capture_layers.contains(&0) {
        captured.insert(0, x.clone());
    }
    for (i, lw) in weights.layers.iter().enumerate() {
        let (out, _) = block_forward(config, &rope, lw, &x, seq);
        x = out;
        apply_hooks(&by_layer[i + 1], &mut x, seq, d)?;
        if capture_layers.contains(&(i + 1)) {
            captured.insert(i + 1, x.clone());
        }
    }

    let (normed, _) = rms_norm_rows(&x, d, &weights.final_norm, config.rms_eps);
    let logits = matmul_nt(&normed, &weights.unembed, seq, d, config.vocab_size);
    Ok(ForwardOutput {
        seq_len: seq,
        vocab_size: config.vocab_size,
        d_model: d,
        logits,
        captured,
    })
}

/// Whether [`unembed_logits`] applies the final RMS norm first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalNorm {
    Apply,
    Bypass,
}

/// `W_out · h`, optionally after the final RMS norm. No bias terms.
pub fn unembed_logits(weights: &ModelWeights, h: &[f32], final_norm: FinalNorm) -> Vec<f32> {
    let d = weights.config.d_model;
    let normed;
    let input = match final_norm {
        FinalNorm::Apply => {
            normed = rms_norm(h, &weights.final_norm, weights.config.rms_eps);
            &normed
        }
        FinalNorm::Bypass => h,
    };
    matmul_nt(input, &weights.unembed, 1, d, weights.config.vocab_size)
}
