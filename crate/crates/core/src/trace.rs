//! Activation traces: residual-stream states for a batch of sequences.
//!
//! # File layout (`MGTR`, version 1)
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `b"MGTR"` |
//! | 4 | 4 | format version, u32 LE (`1`) |
//! | 8 | 8 | header length `H` in bytes, u64 LE |
//! | 16 | `H` | UTF-8 JSON header |
//! | 16 + `H` | `payload_bytes` | f32 LE payload |
//!
//! Header fields, in order: `model_name` (string), `n_layers` (block count
//! of the source model), `d_model`, `dtype` (always `"f32"`), `layers`
//! (captured layer indices, strictly increasing, each ≤ `n_layers`; `0` is
//! the embedding output), `selectors` (`"last"`, `"fourth_from_end"` or a
//! decimal absolute index), `sequences` (`[{id, tokens, positions}]`, where
//! `positions[k]` is the absolute position selector `k` resolved to), and
//! `payload_bytes`.
//!
//! The payload is `n_sequences × layers.len() × selectors.len() × d_model`
//! floats in (sequence, layer, position, feature) order, and `payload_bytes`
//! must equal that count times 4. Nothing follows the payload.
//!
//! Next-token distributions at the selected positions travel in a separate
//! named-tensor file (see [`Predictions`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::softmax_f64;
use crate::matrix::Matrix;
use crate::model::weights::{f32_to_le, le_to_f32};
use crate::model::{forward_with_hooks, ModelWeights};

pub const MAGIC: [u8; 4] = *b"MGTR";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

/// Which token of a sequence to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TokenSelector {
    Last,
    FourthFromEnd,
    Index(usize),
}

impl TokenSelector {
    /// Absolute position in a sequence of `len` tokens.
    pub fn resolve(self, len: usize) -> Option<usize> {
        match self {
            TokenSelector::Last => len.checked_sub(1),
            TokenSelector::FourthFromEnd => len.checked_sub(4),
            TokenSelector::Index(i) => (i < len).then_some(i),
        }
    }
}

impl fmt::Display for TokenSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenSelector::Last => f.write_str("last"),
            TokenSelector::FourthFromEnd => f.write_str("fourth_from_end"),
            TokenSelector::Index(i) => write!(f, "{i}"),
        }
    }
}

impl FromStr for TokenSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "last" => Ok(TokenSelector::Last),
            "fourth_from_end" | "fourth-from-end" => Ok(TokenSelector::FourthFromEnd),
            other => other.parse().map(TokenSelector::Index).map_err(|_| {
                Error::Invalid(format!(
                    "unknown token selector `{other}` (use last, fourth_from_end or an index)"
                ))
            }),
        }
    }
}

impl TryFrom<String> for TokenSelector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TokenSelector> for String {
    fn from(s: TokenSelector) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSequence {
    pub id: String,
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub model_name: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub dtype: String,
    pub layers: Vec<usize>,
    pub selectors: Vec<TokenSelector>,
    pub sequences: Vec<TraceSequence>,
    pub payload_bytes: u64,
}

impl TraceHeader {
    /// Float count implied by the shape fields.
    pub fn expected_floats(&self) -> Option<u64> {
        [self.layers.len(), self.selectors.len(), self.d_model]
            .iter()
            .try_fold(self.sequences.len() as u64, |acc, &x| acc.checked_mul(x as u64))
    }

    fn validate_shape(&self) -> Result<()> {
        if self.dtype != "f32" {
            return Err(Error::Trace(format!("unsupported dtype `{}` (only f32)", self.dtype)));
        }
        if self.d_model == 0 {
            return Err(Error::Trace("d_model must be at least 1".into()));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Trace(format!("layers must be strictly increasing: {:?}", self.layers)));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l > self.n_layers) {
            return Err(Error::Trace(format!("layer {l} exceeds n_layers {}", self.n_layers)));
        }
        for s in &self.sequences {
            if s.positions.len() != self.selectors.len() {
                return Err(Error::Trace(format!(
                    "sequence `{}` lists {} positions for {} selectors",
                    s.id,
                    s.positions.len(),
                    self.selectors.len()
                )));
            }
            for (sel, &p) in self.selectors.iter().zip(&s.positions) {
                if sel.resolve(s.tokens.len()) != Some(p) {
                    return Err(Error::Trace(format!(
                        "sequence `{}`: position {p} does not match selector {sel} on {} tokens",
                        s.id,
                        s.tokens.len()
                    )));
                }
            }
        }
        let floats = self
            .expected_floats()
            .ok_or_else(|| Error::PayloadMismatch("shape product overflows".into()))?;
        if floats.checked_mul(4) != Some(self.payload_bytes) {
            return Err(Error::PayloadMismatch(format!(
                "header declares payload_bytes {} but {} sequences × {} layers × {} positions × d_model {} need {}",
                self.payload_bytes,
                self.sequences.len(),
                self.layers.len(),
                self.selectors.len(),
                self.d_model,
                floats.saturating_mul(4)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub header: TraceHeader,
    pub payload: Vec<f32>,
}

impl ActivationTrace {
    /// Assemble a trace, filling in `payload_bytes` and checking the shape.
    pub fn new(mut header: TraceHeader, payload: Vec<f32>) -> Result<Self> {
        header.payload_bytes = payload.len() as u64 * 4;
        header.validate_shape()?;
        Ok(ActivationTrace { header, payload })
    }

    pub fn n_sequences(&self) -> usize {
        self.header.sequences.len()
    }

    pub fn d_model(&self) -> usize {
        self.header.d_model
    }

    pub fn layers(&self) -> &[usize] {
        &self.header.layers
    }

    /// Hidden state of sequence `seq` at captured-layer slot `layer_slot`
    /// and selector slot `selector_slot`.
    pub fn state(&self, seq: usize, layer_slot: usize, selector_slot: usize) -> &[f32] {
        let h = &self.header;
        let d = h.d_model;
        let idx = ((seq * h.layers.len() + layer_slot) * h.selectors.len() + selector_slot) * d;
        &self.payload[idx..idx + d]
    }
}

/// Next-token distributions at each selected position, `n_sequences × vocab`
/// per selector. Stored as tensors `probs.<selector>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub n_sequences: usize,
    pub vocab_size: usize,
    pub by_selector: BTreeMap<TokenSelector, Vec<f32>>,
}

impl Predictions {
    /// Distributions for one selector as f64 rows, renormalized to undo
    /// f32 storage rounding.
    pub fn rows(&self, selector: TokenSelector) -> Result<Vec<Vec<f64>>> {
        let data = self.by_selector.get(&selector).ok_or_else(|| {
            Error::Trace(format!("predictions hold no distributions for selector {selector}"))
        })?;
        Ok(data
            .chunks_exact(self.vocab_size)
            .map(|row| {
                let s: f64 = row.iter().map(|&p| p as f64).sum();
                row.iter().map(|&p| p as f64 / s).collect()
            })
            .collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let shape = vec![self.n_sequences, self.vocab_size];
        let bytes: Vec<(String, Vec<u8>)> = self
            .by_selector
            .iter()
            .map(|(s, v)| (format!("probs.{s}"), f32_to_le(v)))
            .collect();
        let views = bytes
            .iter()
            .map(|(n, b)| {
                TensorView::new(Dtype::F32, shape.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Container(format!("{n}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = safetensors::serialize(views, &None).map_err(|e| Error::Container(e.to_string()))?;
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Container(format!("{}: {e}", path.display())))?;
        let mut by_selector = BTreeMap::new();
        let mut dims: Option<(usize, usize)> = None;
        for (name, view) in st.tensors() {
            let sel = name
                .strip_prefix("probs.")
                .ok_or_else(|| Error::Container(format!("unexpected tensor `{name}` in predictions")))?
                .parse::<TokenSelector>()?;
            if view.dtype() != Dtype::F32 {
                return Err(Error::Dtype { name, dtype: format!("{:?}", view.dtype()) });
            }
            let shape = view.shape();
            if shape.len() != 2 || dims.is_some_and(|d| d != (shape[0], shape[1])) {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: dims.map_or(vec![], |(a, b)| vec![a, b]),
                    found: shape.to_vec(),
                });
            }
            dims = Some((shape[0], shape[1]));
            by_selector.insert(sel, le_to_f32(view.data()));
        }
        let (n_sequences, vocab_size) =
            dims.ok_or_else(|| Error::Container(format!("{}: no prediction tensors", path.display())))?;
        Ok(Predictions { n_sequences, vocab_size, by_selector })
    }
}

/// One sequence to capture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceInput {
    pub id: String,
    pub tokens: Vec<u32>,
}

/// Run every sequence through `weights` and keep the residual stream at
/// `layers` × `selectors`, plus the softmax distribution at each selected
/// position.
pub fn capture_trace(
    weights: &ModelWeights,
    model_name: &str,
    sequences: &[SequenceInput],
    layers: &BTreeSet<usize>,
    selectors: &[TokenSelector],
) -> Result<(ActivationTrace, Predictions)> {
    let cfg = &weights.config;
    if let Some(&l) = layers.iter().find(|&&l| l > cfg.n_layers) {
        return Err(Error::Trace(format!("layer {l} exceeds model depth {}", cfg.n_layers)));
    }
    if layers.is_empty() || selectors.is_empty() {
        return Err(Error::Trace("capture needs at least one layer and one selector".into()));
    }
    let mut records = Vec::with_capacity(sequences.len());
    for s in sequences {
        let positions = selectors
            .iter()
            .map(|sel| {
                sel.resolve(s.tokens.len()).ok_or_else(|| Error::SelectorOutOfRange {
                    selector: sel.to_string(),
                    sequence_id: s.id.clone(),
                    len: s.tokens.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(TraceSequence { id: s.id.clone(), tokens: s.tokens.clone(), positions });
    }

    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let per_seq: Vec<(Vec<f32>, Vec<Vec<f32>>)> = records
        .par_iter()
        .map(|r| {
            let out = forward_with_hooks(weights, &r.tokens, &[], layers)?;
            let mut states = Vec::with_capacity(layers.len() * r.positions.len() * d);
            for l in layers {
                let h = &out.captured[l];
                for &p in &r.positions {
                    states.extend_from_slice(&h[p * d..(p + 1) * d]);
                }
            }
            let probs = r
                .positions
                .iter()
                .map(|&p| softmax_f64(out.logits_at(p)).into_iter().map(|x| x as f32).collect())
                .collect();
            Ok((states, probs))
        })
        .collect::<Result<_>>()?;

    let mut payload = Vec::with_capacity(records.len() * layers.len() * selectors.len() * d);
    let mut by_selector: BTreeMap<TokenSelector, Vec<f32>> = BTreeMap::new();
    for (states, probs) in per_seq {
        payload.extend(states);
        for (sel, p) in selectors.iter().zip(probs) {
            by_selector.entry(*sel).or_insert_with(|| Vec::with_capacity(records.len() * v)).extend(p);
        }
    }
    let header = TraceHeader {
        model_name: model_name.to_string(),
        n_layers: cfg.n_layers,
        d_model: d,
        dtype: "f32".into(),
        layers: layers.iter().copied().collect(),
        selectors: selectors.to_vec(),
        sequences: records,
        payload_bytes: 0,
    };
    let preds = Predictions { n_sequences: header.sequences.len(), vocab_size: v, by_selector };
    Ok((ActivationTrace::new(header, payload)?, preds))
}

pub fn trace_to_bytes(trace: &ActivationTrace) -> Result<Vec<u8>> {
    trace.header.validate_shape()?;
    if trace.payload.len() as u64 * 4 != trace.header.payload_bytes {
        return Err(Error::PayloadMismatch(format!(
            "payload holds {} floats, header declares {} bytes",
            trace.payload.len(),
            trace.header.payload_bytes
        )));
    }
    let header = serde_json::to_vec(&trace.header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + trace.payload.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&f32_to_le(&trace.payload));
    Ok(out)
}

pub fn trace_from_bytes(bytes: &[u8]) -> Result<ActivationTrace> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes, shorter than the magic", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(Error::Truncated(format!("{} bytes, prefix needs {PREFIX_LEN}", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let rest = &bytes[PREFIX_LEN..];
    if header_len > rest.len() as u64 {
        return Err(Error::Truncated(format!(
            "header declares {header_len} bytes, only {} remain",
            rest.len()
        )));
    }
    let (header_bytes, payload) = rest.split_at(header_len as usize);
    let header: TraceHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Trace(format!("malformed header: {e}")))?;
    header.validate_shape()?;
    let actual = payload.len() as u64;
    if actual < header.payload_bytes {
        return Err(Error::Truncated(format!(
            "payload has {actual} bytes, header declares {}",
            header.payload_bytes
        )));
    }
    if actual > header.payload_bytes {
        return Err(Error::PayloadMismatch(format!(
            "{} trailing bytes after the declared payload",
            actual - header.payload_bytes
        )));
    }
    Ok(ActivationTrace { payload: le_to_f32(payload), header })
}

pub fn write_trace(trace: &ActivationTrace, path: &Path) -> Result<()> {
    let bytes = trace_to_bytes(trace)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<ActivationTrace> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    trace_from_bytes(&bytes)
}

/// `n_sequences × d_model` matrix of one selector at one captured layer,
/// rows in sequence order.
pub fn select_token_matrix(trace: &ActivationTrace, layer: usize, selector: TokenSelector) -> Result<Matrix> {
    let h = &trace.header;
    let layer_slot = h
        .layers
        .iter()
        .position(|&l| l == layer)
        .ok_or_else(|| Error::Trace(format!("layer {layer} was not captured (have {:?})", h.layers)))?;
    let sel_slot = h
        .selectors
        .iter()
        .position(|&s| s == selector)
        .ok_or_else(|| Error::Trace(format!("selector {selector} was not captured")))?;
    let mut data = Vec::with_capacity(h.sequences.len() * h.d_model);
    for seq in 0..h.sequences.len() {
        data.extend_from_slice(trace.state(seq, layer_slot, sel_slot));
    }
    Matrix::new(h.sequences.len(), h.d_model, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_init, ModelConfig};

    fn model() -> ModelWeights {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            vocab_size: 11,
            rope_theta: 10_000.0,
            rms_eps: 1e-5,
            max_seq_len: 16,
        };
        random_init(&cfg, 9).unwrap()
    }

    fn seqs() -> Vec<SequenceInput> {
        (0..3)
            .map(|i| SequenceInput { id: format!("s{i}"), tokens: (0..5 + i as u32).map(|t| (t * 3 + i as u32) % 11).collect() })
            .collect()
    }

    #[test]
    fn capture_shape_and_determinism() {
        let w = model();
        let layers: BTreeSet<usize> = (0..=2).collect();
        let (a, pa) = capture_trace(&w, "m", &seqs(), &layers, &[TokenSelector::Last]).unwrap();
        assert_eq!(a.payload.len(), 3 * 3 * 8);
        assert_eq!(a.header.payload_bytes, 3 * 3 * 8 * 4);
        let (b, pb) = capture_trace(&w, "m", &seqs(), &layers, &[TokenSelector::Last]).unwrap();
        assert_eq!(f32_to_le(&a.payload), f32_to_le(&b.payload));
        assert_eq!(pa, pb);
        for row in pa.rows(TokenSelector::Last).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn captured_rows_match_forward_pass() {
        let w = model();
        let layers: BTreeSet<usize> = [1].into();
        let sels = [TokenSelector::Last, TokenSelector::FourthFromEnd];
        let (t, _) = capture_trace(&w, "m", &seqs(), &layers, &sels).unwrap();
        let m = select_token_matrix(&t, 1, TokenSelector::FourthFromEnd).unwrap();
        for (i, s) in seqs().iter().enumerate() {
            let out = forward_with_hooks(&w, &s.tokens, &[], &layers).unwrap();
            let p = s.tokens.len() - 4;
            assert_eq!(m.row(i), &out.captured[&1][p * 8..(p + 1) * 8]);
        }
        assert!(select_token_matrix(&t, 2, TokenSelector::Last).is_err());
    }

    #[test]
    fn short_sequence_names_its_id() {
        let w = model();
        let s = vec![SequenceInput { id: "tiny".into(), tokens: vec![1, 2, 3] }];
        let err = capture_trace(&w, "m", &s, &[0].into(), &[TokenSelector::FourthFromEnd]).unwrap_err();
        assert!(err.to_string().contains("tiny"), "{err}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let w = model();
        let (t, _) = capture_trace(&w, "m", &seqs(), &[0, 2].into(), &[TokenSelector::Last]).unwrap();
        let bytes = trace_to_bytes(&t).unwrap();
        assert_eq!(trace_from_bytes(&bytes).unwrap(), t);

        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(trace_from_bytes(cut), Err(Error::Truncated(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(trace_from_bytes(&bad), Err(Error::BadMagic(_))));

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(trace_from_bytes(&extra), Err(Error::PayloadMismatch(_))));

        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(trace_from_bytes(&v2), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn header_d_model_disagreeing_with_payload() {
        let w = model();
        let (mut t, _) = capture_trace(&w, "m", &seqs(), &[1].into(), &[TokenSelector::Last]).unwrap();
        t.header.d_model = 16;
        let header = serde_json::to_vec(&t.header).unwrap();
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&f32_to_le(&t.payload));
        assert!(matches!(trace_from_bytes(&bytes), Err(Error::PayloadMismatch(_))));
    }

    #[test]
    fn selector_text_round_trip() {
        for s in [TokenSelector::Last, TokenSelector::FourthFromEnd, TokenSelector::Index(7)] {
            assert_eq!(s.to_string().parse::<TokenSelector>().unwrap(), s);
        }
        assert!("middle".parse::<TokenSelector>().is_err());
        assert_eq!(TokenSelector::FourthFromEnd.resolve(4), Some(0));
        assert_eq!(TokenSelector::FourthFromEnd.resolve(3), None);
    }

    #[test]
    fn predictions_round_trip() {
        let w = model();
        let (_, p) = capture_trace(&w, "m", &seqs(), &[0].into(), &[TokenSelector::Last, TokenSelector::Index(2)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        p.write(&path).unwrap();
        assert_eq!(Predictions::read(&path).unwrap(), p);
    }
}
