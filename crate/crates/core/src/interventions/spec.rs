//! Files exchanged with an external model runner.
//!
//! An **intervention spec** is a JSON document plus a sidecar named-tensor
//! file (same container format as model weights). Fields:
//!
//! - `format`: always `"mechgeo-intervention-spec"`; `version`: `1`
//! - `model`: free-form model identifier
//! - `kind`: `input_month` | `input_interval` | `output_prediction`
//! - `mode`: `additive` | `angular_snap` | `norm_rescale`
//! - `tensor_file`: sidecar path, relative to the spec file's directory
//! - `readout_ids`: the 12 month token ids, January first
//! - `prompts`: prompt texts; entries refer to them by index
//! - `entries[]`: `{prompt, layer, position, tensor, gamma, gamma_prime}`
//!   where `layer` counts blocks (the residual stream after block `layer`),
//!   `position` is `"last"` or `{"index": n}`, `tensor` names a sidecar
//!   tensor, and `gamma`/`gamma_prime` index into `readout_ids`.
//!
//! Sidecar tensors are f32: an additive vector `[d_model]`, a unit direction
//! `[d_model]` for angular snap, or `[1]` holding the target norm.
//!
//! An **intervention results** file is JSON:
//! `{format: "mechgeo-intervention-results", version: 1, model, readout_ids,
//! results: [{entry, before: [12], after: [12]}]}` with restricted logits
//! before and after each entry's intervention.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use super::{
    apply_intervention, preference_shift, InterventionMode, PlannedIntervention, PromptStates,
    Provenance, SteeringPayload, SteeringVector, SweepPrompt, SweepRecord, TargetKind,
};
use crate::error::{Error, Result};
use crate::linalg::argmax;
use crate::matrix::Matrix;
use crate::model::weights::{f32_to_le, le_to_f32};
use crate::model::{forward_with_hooks, HookAction, ModelWeights, Position};
use crate::months::{ground_truth_target, ReadoutSet};
use crate::trace::{ActivationTrace, Predictions, TokenSelector};

pub const SPEC_FORMAT: &str = "mechgeo-intervention-spec";
pub const RESULTS_FORMAT: &str = "mechgeo-intervention-results";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecEntry {
    pub prompt: usize,
    pub layer: usize,
    pub position: Position,
    pub tensor: String,
    pub gamma: usize,
    pub gamma_prime: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub kind: TargetKind,
    pub mode: InterventionMode,
    pub tensor_file: String,
    pub readout_ids: Vec<u32>,
    pub prompts: Vec<String>,
    pub entries: Vec<SpecEntry>,
}

/// Named sidecar tensors, in name order.
pub type SpecTensors = BTreeMap<String, Vec<f32>>;

impl InterventionSpec {
    /// Serialize a sweep plan. Shared steering vectors become one tensor each.
    pub fn from_plan(
        model: &str,
        kind: TargetKind,
        mode: InterventionMode,
        readout_ids: Vec<u32>,
        prompts: Vec<String>,
        plan: &[PlannedIntervention],
        tensor_file: &str,
    ) -> Result<(Self, SpecTensors)> {
        let mut names: HashMap<*const SteeringVector, String> = HashMap::new();
        let mut tensors = SpecTensors::new();
        let mut entries = Vec::with_capacity(plan.len());
        for step in plan {
            if step.prompt_index >= prompts.len() {
                return Err(Error::Intervention(format!(
                    "plan refers to prompt {} but only {} prompts given",
                    step.prompt_index,
                    prompts.len()
                )));
            }
            if step.vector.mode() != mode {
                return Err(Error::Intervention(format!(
                    "plan mixes modes: {} in a {mode} spec",
                    step.vector.mode()
                )));
            }
            let key = Arc::as_ptr(&step.vector);
            let name = match names.get(&key) {
                Some(n) => n.clone(),
                None => {
                    let n = format!("v{:06}", names.len());
                    tensors.insert(n.clone(), payload_tensor(&step.vector.payload));
                    names.insert(key, n.clone());
                    n
                }
            };
            entries.push(SpecEntry {
                prompt: step.prompt_index,
                layer: step.layer,
                position: step.position,
                tensor: name,
                gamma: step.gamma,
                gamma_prime: step.gamma_prime,
            });
        }
        let spec = InterventionSpec {
            format: SPEC_FORMAT.into(),
            version: FORMAT_VERSION,
            model: model.into(),
            kind,
            mode,
            tensor_file: tensor_file.into(),
            readout_ids,
            prompts,
            entries,
        };
        Ok((spec, tensors))
    }

    /// The steering vector an entry applies, rebuilt from the sidecar.
    pub fn steering_vector(&self, entry: &SpecEntry, tensors: &SpecTensors) -> Result<SteeringVector> {
        let data = tensors.get(&entry.tensor).ok_or_else(|| {
            Error::Intervention(format!("spec entry refers to missing tensor `{}`", entry.tensor))
        })?;
        let payload = match self.mode {
            InterventionMode::Additive => SteeringPayload::Additive { vector: data.clone() },
            InterventionMode::AngularSnap => SteeringPayload::AngularSnap { direction: data.clone() },
            InterventionMode::NormRescale => {
                if data.len() != 1 {
                    return Err(Error::Intervention(format!(
                        "norm tensor `{}` must hold one value, has {}",
                        entry.tensor,
                        data.len()
                    )));
                }
                SteeringPayload::NormRescale { target_norm: data[0] }
            }
        };
        Ok(SteeringVector {
            layer: entry.layer,
            payload,
            provenance: Provenance {
                source_group: String::new(),
                target_group: String::new(),
                source_size: 0,
                target_size: 0,
            },
        })
    }

    pub fn validate(&self, tensors: &SpecTensors) -> Result<()> {
        if self.format != SPEC_FORMAT {
            return Err(Error::Intervention(format!("not an intervention spec: format `{}`", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::Intervention(format!("unsupported spec version {}", self.version)));
        }
        if self.readout_ids.len() != 12 {
            return Err(Error::Intervention(format!(
                "readout_ids must list 12 ids, found {}",
                self.readout_ids.len()
            )));
        }
        let mut dim = None;
        for (i, e) in self.entries.iter().enumerate() {
            if e.prompt >= self.prompts.len() {
                return Err(Error::Intervention(format!("entry {i}: prompt {} out of range", e.prompt)));
            }
            if e.gamma >= 12 || e.gamma_prime >= 12 || e.gamma == e.gamma_prime {
                return Err(Error::Intervention(format!(
                    "entry {i}: bad readout targets ({}, {})",
                    e.gamma, e.gamma_prime
                )));
            }
            let sv = self.steering_vector(e, tensors)?;
            if let SteeringPayload::Additive { vector: v } | SteeringPayload::AngularSnap { direction: v } = &sv.payload {
                match dim {
                    None => dim = Some(v.len()),
                    Some(d) if d != v.len() => {
                        return Err(Error::Intervention(format!(
                            "entry {i}: tensor `{}` has {} values, others have {d}",
                            e.tensor,
                            v.len()
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

fn payload_tensor(p: &SteeringPayload) -> Vec<f32> {
    match p {
        SteeringPayload::Additive { vector } => vector.clone(),
        SteeringPayload::AngularSnap { direction } => direction.clone(),
        SteeringPayload::NormRescale { target_norm } => vec![*target_norm],
    }
}

fn sidecar_path(spec_path: &Path, tensor_file: &str) -> PathBuf {
    spec_path
        .parent()
        .map(|d| d.join(tensor_file))
        .unwrap_or_else(|| PathBuf::from(tensor_file))
}

/// Write the spec JSON to `path` and its tensors next to it.
pub fn write_spec(path: &Path, spec: &InterventionSpec, tensors: &SpecTensors) -> Result<()> {
    spec.validate(tensors)?;
    let bytes: Vec<(String, Vec<u8>, usize)> = tensors
        .iter()
        .map(|(n, v)| (n.clone(), f32_to_le(v), v.len()))
        .collect();
    let views = bytes
        .iter()
        .map(|(n, b, len)| {
            TensorView::new(Dtype::F32, vec![*len], b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Container(format!("{n}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let sidecar = safetensors::serialize(views, &None).map_err(|e| Error::Container(e.to_string()))?;
    let side_path = sidecar_path(path, &spec.tensor_file);
    std::fs::write(&side_path, sidecar).map_err(|e| Error::io(&side_path, e))?;
    let mut json = serde_json::to_vec_pretty(spec)?;
    json.push(b'\n');
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_spec(path: &Path) -> Result<(InterventionSpec, SpecTensors)> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let spec: InterventionSpec = serde_json::from_slice(&raw)?;
    let side_path = sidecar_path(path, &spec.tensor_file);
    let bytes = std::fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Container(e.to_string()))?;
    let mut tensors = SpecTensors::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Dtype {
                name,
                dtype: format!("{:?}", view.dtype()),
            });
        }
        tensors.insert(name, le_to_f32(view.data()));
    }
    spec.validate(&tensors)?;
    Ok((spec, tensors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryResult {
    pub entry: usize,
    pub before: Vec<f32>,
    pub after: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResults {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub readout_ids: Vec<u32>,
    pub results: Vec<EntryResult>,
}

pub fn read_results(path: &Path) -> Result<InterventionResults> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let r: InterventionResults = serde_json::from_slice(&raw)?;
    if r.format != RESULTS_FORMAT || r.version != FORMAT_VERSION {
        return Err(Error::Intervention(format!(
            "{}: expected {RESULTS_FORMAT} v{FORMAT_VERSION}, found {} v{}",
            path.display(),
            r.format,
            r.version
        )));
    }
    Ok(r)
}

pub fn write_results(path: &Path, results: &InterventionResults) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(results)?;
    json.push(b'\n');
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Preference shifts for every answered spec entry.
///
/// `ground_truth[prompt]` (when given) flags prompts whose `before` readout
/// argmax is correct.
pub fn records_from_results(
    spec: &InterventionSpec,
    results: &InterventionResults,
    ground_truth: Option<&[usize]>,
) -> Result<Vec<SweepRecord>> {
    if results.readout_ids != spec.readout_ids {
        return Err(Error::Intervention(
            "results were produced with a different readout set than the spec".into(),
        ));
    }
    results
        .results
        .iter()
        .map(|r| {
            let e = spec.entries.get(r.entry).ok_or_else(|| {
                Error::Intervention(format!("result refers to unknown entry {}", r.entry))
            })?;
            if r.before.len() != 12 || r.after.len() != 12 {
                return Err(Error::Intervention(format!(
                    "entry {}: expected 12 restricted logits",
                    r.entry
                )));
            }
            let baseline_correct = match ground_truth {
                Some(gt) => gt.get(e.prompt).copied() == Some(crate::linalg::argmax(&r.before)),
                None => true,
            };
            Ok(SweepRecord {
                layer: e.layer,
                prompt_index: e.prompt,
                gamma: e.gamma,
                gamma_prime: e.gamma_prime,
                shift: preference_shift(&r.before, &r.after, e.gamma, e.gamma_prime)?,
                baseline_correct,
            })
        })
        .collect()
}

/// Sweep inputs for the 144 Months prompts from an exported trace.
///
/// The trace must hold the prompts in canonical order (start month major,
/// interval 1..=12 minor) and capture both `position` (the intervention
/// token) and `last` (for the baseline prediction, read from `predictions`
/// through `readout_ids`). Hook layers are the captured layers above 0.
pub fn months_inputs_from_trace(
    trace: &ActivationTrace,
    predictions: &Predictions,
    position: TokenSelector,
    readout_ids: &[u32],
) -> Result<(Vec<SweepPrompt>, PromptStates)> {
    let h = &trace.header;
    if h.sequences.len() != 144 {
        return Err(Error::Intervention(format!(
            "a Months trace needs the 144 canonical prompts, found {} sequences",
            h.sequences.len()
        )));
    }
    let pos_slot = h.selectors.iter().position(|&s| s == position).ok_or_else(|| {
        Error::Intervention(format!("trace does not capture the intervention selector {position}"))
    })?;
    let probs = predictions.rows(TokenSelector::Last)?;
    if probs.len() != 144 {
        return Err(Error::LengthMismatch { left: probs.len(), right: 144 });
    }
    let mut prompts = Vec::with_capacity(144);
    for (i, seq) in h.sequences.iter().enumerate() {
        let (alpha, beta) = (i / 12, i % 12 + 1);
        let restricted = readout_ids
            .iter()
            .map(|&id| {
                probs[i].get(id as usize).map(|&p| p as f32).ok_or_else(|| {
                    Error::Intervention(format!("readout id {id} outside the {}-way predictions", probs[i].len()))
                })
            })
            .collect::<Result<Vec<f32>>>()?;
        prompts.push(SweepPrompt {
            alpha,
            beta,
            gamma: ground_truth_target(alpha, beta)?,
            prediction: Some(argmax(&restricted)),
            position: Position::Index(seq.positions[pos_slot]),
        });
    }
    let mut layers = Vec::new();
    let mut states = Vec::new();
    for (slot, &layer) in h.layers.iter().enumerate().filter(|(_, &l)| l > 0) {
        let rows: Vec<&[f32]> = (0..144).map(|s| trace.state(s, slot, pos_slot)).collect();
        layers.push(layer);
        states.push(Matrix::from_rows(&rows)?);
    }
    if layers.is_empty() {
        return Err(Error::Intervention("trace captures no layer above the embedding".into()));
    }
    Ok((prompts, PromptStates { layers, states }))
}

/// Execute a spec on an in-process model, producing the results file an
/// external runner would write. `tokens[k]` encodes `spec.prompts[k]`.
pub fn execute_spec(
    weights: &ModelWeights,
    spec: &InterventionSpec,
    tensors: &SpecTensors,
    tokens: &[Vec<u32>],
) -> Result<InterventionResults> {
    spec.validate(tensors)?;
    if tokens.len() != spec.prompts.len() {
        return Err(Error::LengthMismatch { left: tokens.len(), right: spec.prompts.len() });
    }
    let readout = ReadoutSet::new(spec.readout_ids.clone(), weights.config.vocab_size)?;
    let before: Vec<Vec<f32>> = tokens
        .par_iter()
        .map(|t| {
            let out = forward_with_hooks(weights, t, &[], &Default::default())?;
            Ok(readout.restrict(out.last_logits()))
        })
        .collect::<Result<_>>()?;
    let results = spec
        .entries
        .par_iter()
        .enumerate()
        .map(|(k, e)| {
            let sv = spec.steering_vector(e, tensors)?;
            let hook = HookAction::new(e.layer, e.position, move |h| apply_intervention(h, &sv));
            let out = forward_with_hooks(weights, &tokens[e.prompt], &[hook], &Default::default())?;
            Ok(EntryResult {
                entry: k,
                before: before[e.prompt].clone(),
                after: readout.restrict(out.last_logits()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InterventionResults {
        format: RESULTS_FORMAT.into(),
        version: FORMAT_VERSION,
        model: spec.model.clone(),
        readout_ids: spec.readout_ids.clone(),
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::{apply_intervention, NormTarget, SweepOptions};
    use crate::interventions::plan_sweep;
    use crate::matrix::Matrix;

    fn plan(mode: InterventionMode) -> (Vec<SweepPrompt>, Vec<PlannedIntervention>) {
        let mut prompts = Vec::new();
        let mut rows = Vec::new();
        for alpha in 0..12 {
            for beta in 1..=12 {
                prompts.push(SweepPrompt {
                    alpha,
                    beta,
                    gamma: (alpha + beta) % 12,
                    prediction: Some((alpha + beta) % 12),
                    position: Position::Last,
                });
                rows.push(vec![1.0 + alpha as f32, beta as f32, 0.5]);
            }
        }
        let states = PromptStates {
            layers: vec![1, 2],
            states: vec![Matrix::from_rows(&rows).unwrap(); 2],
        };
        let opts = SweepOptions { norm_target: NormTarget::MemberMean, ..Default::default() };
        let plan = plan_sweep(&prompts, &states, TargetKind::OutputPrediction, mode, opts).unwrap();
        (prompts, plan)
    }

    #[test]
    fn spec_round_trips_and_dedupes_tensors() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [InterventionMode::Additive, InterventionMode::AngularSnap, InterventionMode::NormRescale] {
            let (prompts, plan) = plan(mode);
            let texts: Vec<String> = (0..prompts.len()).map(|i| format!("prompt {i}")).collect();
            let (spec, tensors) = InterventionSpec::from_plan(
                "toy",
                TargetKind::OutputPrediction,
                mode,
                (0..12).collect(),
                texts,
                &plan,
                "vectors.safetensors",
            )
            .unwrap();
            // 2 layers × 12 sources × 11 targets
            assert_eq!(tensors.len(), 2 * 12 * 11);
            let path = dir.path().join("spec.json");
            write_spec(&path, &spec, &tensors).unwrap();
            let (back, back_tensors) = read_spec(&path).unwrap();
            assert_eq!(back, spec);
            assert_eq!(back_tensors, tensors);
            let h = [0.3f32, -1.0, 2.0];
            for (e, step) in back.entries.iter().zip(&plan).step_by(97) {
                let sv = back.steering_vector(e, &back_tensors).unwrap();
                assert_eq!(apply_intervention(&h, &sv).unwrap(), apply_intervention(&h, &step.vector).unwrap());
            }
        }
    }

    #[test]
    fn results_become_preference_shifts() {
        let (prompts, plan) = plan(InterventionMode::Additive);
        let texts = vec![String::new(); prompts.len()];
        let (spec, _) = InterventionSpec::from_plan(
            "toy",
            TargetKind::OutputPrediction,
            InterventionMode::Additive,
            (0..12).collect(),
            texts,
            &plan[..2],
            "v.safetensors",
        )
        .unwrap();
        let mut before = vec![0.0f32; 12];
        before[spec.entries[0].gamma] = 2.0;
        before[spec.entries[0].gamma_prime] = 1.0;
        let mut after = vec![0.0f32; 12];
        after[spec.entries[0].gamma] = 1.0;
        after[spec.entries[0].gamma_prime] = 3.0;
        let results = InterventionResults {
            format: RESULTS_FORMAT.into(),
            version: 1,
            model: "toy".into(),
            readout_ids: (0..12).collect(),
            results: vec![
                EntryResult { entry: 0, before: before.clone(), after },
                EntryResult { entry: 1, before: before.clone(), after: before },
            ],
        };
        let recs = records_from_results(&spec, &results, None).unwrap();
        assert_eq!(recs[0].shift, 3.0);
        assert_eq!(recs[1].shift, 0.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.json");
        write_results(&path, &results).unwrap();
        assert_eq!(read_results(&path).unwrap(), results);

        let mut other = results.clone();
        other.readout_ids[0] = 99;
        assert!(records_from_results(&spec, &other, None).is_err());
        let mut bad = results;
        bad.results[0].entry = 7;
        assert!(records_from_results(&spec, &bad, None).is_err());
    }

    #[test]
    fn missing_tensor_is_rejected_on_read() {
        let (prompts, plan) = plan(InterventionMode::Additive);
        let texts = vec![String::new(); prompts.len()];
        let (spec, mut tensors) = InterventionSpec::from_plan(
            "toy",
            TargetKind::OutputPrediction,
            InterventionMode::Additive,
            (0..12).collect(),
            texts,
            &plan[..3],
            "v.safetensors",
        )
        .unwrap();
        tensors.remove(&spec.entries[0].tensor);
        let dir = tempfile::tempdir().unwrap();
        assert!(write_spec(&dir.path().join("s.json"), &spec, &tensors).is_err());
    }
}
