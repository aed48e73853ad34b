//! Layer sweeps over the Months prompts and phase-change detection.
//!
//! A sweep is split in two: [`plan_sweep`] turns per-layer token states into
//! a list of concrete interventions, and [`layer_sweep`] executes that plan
//! on an in-process model. The same plan can instead be serialized for an
//! external runner (see [`super::spec`]).
//!
//! Curve entry `k` corresponds to an intervention on the residual stream
//! after block `k + 1`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    apply_intervention, compute_steering_vector, preference_shift, InterventionMode, NormTarget,
    SteeringVector,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{forward_with_hooks, HookAction, ModelWeights, Position};
use crate::months::{BaselinePass, MonthsPrompt, ReadoutSet, INTERVALS, MONTHS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Steer the start-month token toward another month's centroid.
    InputMonth,
    /// Steer the interval token toward another interval's centroid.
    InputInterval,
    /// Steer the final token toward another baseline-prediction centroid.
    OutputPrediction,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::InputMonth => "input_month",
            TargetKind::InputInterval => "input_interval",
            TargetKind::OutputPrediction => "output_prediction",
        }
    }

    pub fn is_input(self) -> bool {
        !matches!(self, TargetKind::OutputPrediction)
    }

    fn group_name(self, key: usize) -> String {
        match self {
            TargetKind::InputInterval => INTERVALS[key - 1].to_string(),
            _ => MONTHS[key].to_string(),
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "month" | "input_month" => Ok(TargetKind::InputMonth),
            "interval" | "input_interval" => Ok(TargetKind::InputInterval),
            "output" | "output_prediction" => Ok(TargetKind::OutputPrediction),
            other => Err(Error::Invalid(format!(
                "unknown sweep target `{other}` (expected month, interval, output)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SweepOptions {
    pub norm_target: NormTarget,
    /// Exclude the intervened prompt from its own source centroid.
    pub leave_one_out: bool,
    /// Average only over prompts the model answers correctly at baseline.
    pub correct_only: bool,
}

/// Per-prompt metadata a sweep needs, independent of the model backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPrompt {
    pub alpha: usize,
    pub beta: usize,
    pub gamma: usize,
    pub prediction: Option<usize>,
    pub position: Position,
}

/// Token states at the intervention position, one matrix per hook layer.
///
/// `layers[k]` is the hook layer of `states[k]`; rows follow prompt order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptStates {
    pub layers: Vec<usize>,
    pub states: Vec<Matrix>,
}

impl PromptStates {
    pub fn from_baseline(
        baseline: &BaselinePass,
        prompts: &[MonthsPrompt],
        kind: TargetKind,
    ) -> Result<Self> {
        let layers: Vec<usize> = (1..=baseline.n_layers).collect();
        let mut states = Vec::with_capacity(layers.len());
        for &layer in &layers {
            let rows: Vec<Vec<f32>> = prompts
                .iter()
                .enumerate()
                .map(|(i, p)| baseline.state(i, layer, position_index(p, kind)))
                .collect::<Result<_>>()?;
            states.push(Matrix::from_rows(&rows)?);
        }
        Ok(PromptStates { layers, states })
    }
}

fn position_index(p: &MonthsPrompt, kind: TargetKind) -> usize {
    match kind {
        TargetKind::InputMonth => p.alpha_pos,
        TargetKind::InputInterval => p.beta_pos,
        TargetKind::OutputPrediction => p.final_pos,
    }
}

pub(crate) fn sweep_prompts(
    prompts: &[MonthsPrompt],
    baseline: &BaselinePass,
    kind: TargetKind,
) -> Vec<SweepPrompt> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| SweepPrompt {
            alpha: p.alpha,
            beta: p.beta,
            gamma: p.gamma,
            prediction: Some(baseline.predictions[i]),
            position: Position::Index(position_index(p, kind)),
        })
        .collect()
}

/// One intervention to run: steer `prompt_index` at `(layer, position)`.
#[derive(Debug, Clone)]
pub struct PlannedIntervention {
    pub layer: usize,
    pub prompt_index: usize,
    pub position: Position,
    pub vector: Arc<SteeringVector>,
    /// Readout index of the old target.
    pub gamma: usize,
    /// Readout index of the new target.
    pub gamma_prime: usize,
}

fn group_key(p: &SweepPrompt, kind: TargetKind) -> Option<usize> {
    match kind {
        TargetKind::InputMonth => Some(p.alpha),
        TargetKind::InputInterval => Some(p.beta),
        TargetKind::OutputPrediction => p.prediction,
    }
}

fn all_keys(kind: TargetKind) -> std::ops::RangeInclusive<usize> {
    match kind {
        TargetKind::InputInterval => 1..=12,
        _ => 0..=11,
    }
}

fn targets_for(p: &SweepPrompt, kind: TargetKind, source: usize, target: usize) -> (usize, usize) {
    match kind {
        TargetKind::InputMonth => (p.gamma, (target + p.beta) % 12),
        TargetKind::InputInterval => (p.gamma, (p.alpha + target) % 12),
        TargetKind::OutputPrediction => (source, target),
    }
}

fn gather(states: &Matrix, members: &[usize]) -> Result<Matrix> {
    let rows: Vec<&[f32]> = members.iter().map(|&i| states.row(i)).collect();
    Matrix::from_rows(&rows)
}

/// Expand a sweep into concrete interventions, in (layer, prompt, target) order.
///
/// Groups are keyed by start month, interval, or baseline prediction. Every
/// prompt is steered toward every other non-empty group; prompts without a
/// baseline prediction are left out of output-centric groups.
pub fn plan_sweep(
    prompts: &[SweepPrompt],
    states: &PromptStates,
    kind: TargetKind,
    mode: InterventionMode,
    opts: SweepOptions,
) -> Result<Vec<PlannedIntervention>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in prompts.iter().enumerate() {
        if let Some(k) = group_key(p, kind) {
            groups.entry(k).or_default().push(i);
        }
    }
    let mut plan = Vec::new();
    for (&layer, layer_states) in states.layers.iter().zip(&states.states) {
        if layer_states.rows() != prompts.len() {
            return Err(Error::LengthMismatch {
                left: layer_states.rows(),
                right: prompts.len(),
            });
        }
        let mut cache: BTreeMap<(usize, usize), Arc<SteeringVector>> = BTreeMap::new();
        for (i, p) in prompts.iter().enumerate() {
            let Some(source) = group_key(p, kind) else { continue };
            for target in all_keys(kind) {
                if target == source {
                    continue;
                }
                let Some(target_members) = groups.get(&target) else { continue };
                let vector = if opts.leave_one_out && mode == InterventionMode::Additive {
                    let src: Vec<usize> =
                        groups[&source].iter().copied().filter(|&j| j != i).collect();
                    if src.is_empty() {
                        continue;
                    }
                    Arc::new(compute_steering_vector(
                        &gather(layer_states, &src)?,
                        &gather(layer_states, target_members)?,
                        layer,
                        mode,
                        opts.norm_target,
                        (&kind.group_name(source), &kind.group_name(target)),
                    )?)
                } else if let Some(v) = cache.get(&(source, target)) {
                    v.clone()
                } else {
                    let v = Arc::new(compute_steering_vector(
                        &gather(layer_states, &groups[&source])?,
                        &gather(layer_states, target_members)?,
                        layer,
                        mode,
                        opts.norm_target,
                        (&kind.group_name(source), &kind.group_name(target)),
                    )?);
                    cache.insert((source, target), v.clone());
                    v
                };
                let (gamma, gamma_prime) = targets_for(p, kind, source, target);
                plan.push(PlannedIntervention {
                    layer,
                    prompt_index: i,
                    position: p.position,
                    vector,
                    gamma,
                    gamma_prime,
                });
            }
        }
    }
    Ok(plan)
}

/// One executed intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub layer: usize,
    pub prompt_index: usize,
    pub gamma: usize,
    pub gamma_prime: usize,
    pub shift: f64,
    pub baseline_correct: bool,
}

/// Mean preference shift per hook layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectCurve {
    pub kind: TargetKind,
    pub mode: InterventionMode,
    /// Hook layer of each entry.
    pub layers: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub curve: EffectCurve,
    pub records: Vec<SweepRecord>,
}

/// Average over targets within each prompt, then over prompts.
pub fn curve_from_records(
    records: &[SweepRecord],
    layers: &[usize],
    kind: TargetKind,
    mode: InterventionMode,
    correct_only: bool,
) -> EffectCurve {
    let mut values = Vec::with_capacity(layers.len());
    for &layer in layers {
        let mut per_prompt: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in records
            .iter()
            .filter(|r| r.layer == layer && (!correct_only || r.baseline_correct))
        {
            let e = per_prompt.entry(r.prompt_index).or_insert((0.0, 0));
            e.0 += r.shift;
            e.1 += 1;
        }
        let n = per_prompt.len();
        let total: f64 = per_prompt.values().map(|(s, c)| s / *c as f64).sum();
        values.push(if n == 0 { 0.0 } else { total / n as f64 });
    }
    EffectCurve {
        kind,
        mode,
        layers: layers.to_vec(),
        values,
    }
}

/// Run every intervention of a Months sweep on `weights`.
pub fn layer_sweep(
    weights: &ModelWeights,
    prompts: &[MonthsPrompt],
    baseline: &BaselinePass,
    readout: &ReadoutSet,
    kind: TargetKind,
    mode: InterventionMode,
    opts: SweepOptions,
) -> Result<SweepResult> {
    if baseline.predictions.len() != prompts.len() {
        return Err(Error::LengthMismatch {
            left: baseline.predictions.len(),
            right: prompts.len(),
        });
    }
    let meta = sweep_prompts(prompts, baseline, kind);
    let states = PromptStates::from_baseline(baseline, prompts, kind)?;
    let plan = plan_sweep(&meta, &states, kind, mode, opts)?;

    let records: Vec<SweepRecord> = plan
        .par_iter()
        .map(|step| {
            let sv = step.vector.clone();
            let hook = HookAction::new(step.layer, step.position, move |h| {
                apply_intervention(h, &sv)
            });
            let prompt = &prompts[step.prompt_index];
            let out = forward_with_hooks(weights, &prompt.tokens, &[hook], &Default::default())?;
            let after = readout.restrict(out.last_logits());
            let before = &baseline.restricted_logits[step.prompt_index];
            Ok(SweepRecord {
                layer: step.layer,
                prompt_index: step.prompt_index,
                gamma: step.gamma,
                gamma_prime: step.gamma_prime,
                shift: preference_shift(before, &after, step.gamma, step.gamma_prime)?,
                baseline_correct: baseline.predictions[step.prompt_index] == prompt.gamma,
            })
        })
        .collect::<Result<_>>()?;

    let curve = curve_from_records(&records, &states.layers, kind, mode, opts.correct_only);
    Ok(SweepResult { curve, records })
}

/// Centered moving average with window 3, truncated at the edges.
pub fn smooth3(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            xs[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// First curve index from which the smoothed output curve stays strictly
/// above the smoothed input curve through the last entry.
pub fn detect_phase_change(input: &[f64], output: &[f64]) -> Result<Option<usize>> {
    if input.len() != output.len() {
        return Err(Error::LengthMismatch {
            left: input.len(),
            right: output.len(),
        });
    }
    if input.is_empty() {
        return Ok(None);
    }
    let si = smooth3(input);
    let so = smooth3(output);
    let mut start = None;
    for i in (0..si.len()).rev() {
        if so[i] > si[i] {
            start = Some(i);
        } else {
            break;
        }
    }
    Ok(start)
}
