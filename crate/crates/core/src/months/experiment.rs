use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::{generate_prompts, readout_prediction, MonthsPrompt, ReadoutSet, SyntheticVocab, MONTHS};
use crate::error::{Error, Result};
use crate::interventions::{
    layer_sweep, EffectCurve, InterventionMode, SweepOptions, SweepRecord, TargetKind,
};
use crate::model::{forward_with_hooks, ModelWeights};

/// Unintervened pass over every prompt, with all layers captured.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePass {
    pub n_layers: usize,
    pub d_model: usize,
    /// Final-position logits over the readout set, one row per prompt.
    pub restricted_logits: Vec<Vec<f32>>,
    pub predictions: Vec<usize>,
    /// Per prompt: layer → `seq × d_model` residual stream.
    pub captures: Vec<BTreeMap<usize, Vec<f32>>>,
}

impl BaselinePass {
    pub fn compute(
        weights: &ModelWeights,
        prompts: &[MonthsPrompt],
        readout: &ReadoutSet,
    ) -> Result<Self> {
        let n = weights.config.n_layers;
        let layers: BTreeSet<usize> = (0..=n).collect();
        let outs: Vec<_> = prompts
            .par_iter()
            .map(|p| forward_with_hooks(weights, &p.tokens, &[], &layers))
            .collect::<Result<_>>()?;
        let mut restricted_logits = Vec::with_capacity(prompts.len());
        let mut predictions = Vec::with_capacity(prompts.len());
        let mut captures = Vec::with_capacity(prompts.len());
        for out in outs {
            let (pred, restricted) = readout_prediction(out.last_logits(), readout);
            predictions.push(pred);
            restricted_logits.push(restricted);
            captures.push(out.captured);
        }
        Ok(BaselinePass {
            n_layers: n,
            d_model: weights.config.d_model,
            restricted_logits,
            predictions,
            captures,
        })
    }

    pub fn state(&self, prompt: usize, layer: usize, position: usize) -> Result<Vec<f32>> {
        let d = self.d_model;
        let m = self
            .captures
            .get(prompt)
            .and_then(|c| c.get(&layer))
            .ok_or_else(|| Error::Months(format!("no baseline capture for prompt {prompt} layer {layer}")))?;
        m.get(position * d..(position + 1) * d)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| Error::Months(format!("position {position} outside prompt {prompt}")))
    }

    pub fn accuracy(&self, prompts: &[MonthsPrompt]) -> f64 {
        let correct = prompts
            .iter()
            .zip(&self.predictions)
            .filter(|(p, &pred)| p.gamma == pred)
            .count();
        correct as f64 / prompts.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub baseline_accuracy: f64,
    pub curve: EffectCurve,
    /// One record per (layer, prompt, swept target); `baseline_correct`
    /// flags prompts the model gets wrong without intervention.
    pub records: Vec<SweepRecord>,
}

/// Run one Months sweep (`kind` × `mode`) on `weights`.
pub fn run_intervention_experiment(
    weights: &ModelWeights,
    vocab: &SyntheticVocab,
    kind: TargetKind,
    mode: InterventionMode,
    opts: SweepOptions,
) -> Result<ExperimentResult> {
    let prompts = generate_prompts(vocab)?;
    let readout = vocab.readout()?;
    let baseline = BaselinePass::compute(weights, &prompts, &readout)?;
    run_with_baseline(weights, &prompts, &readout, &baseline, kind, mode, opts)
}

pub(crate) fn run_with_baseline(
    weights: &ModelWeights,
    prompts: &[MonthsPrompt],
    readout: &ReadoutSet,
    baseline: &BaselinePass,
    kind: TargetKind,
    mode: InterventionMode,
    opts: SweepOptions,
) -> Result<ExperimentResult> {
    if kind == TargetKind::OutputPrediction {
        for (m, name) in MONTHS.iter().enumerate() {
            if !baseline.predictions.contains(&m) {
                return Err(Error::EmptyPredictionGroup {
                    month: (*name).to_string(),
                });
            }
        }
    }
    let result = layer_sweep(weights, prompts, baseline, readout, kind, mode, opts)?;
    Ok(ExperimentResult {
        baseline_accuracy: baseline.accuracy(prompts),
        curve: result.curve,
        records: result.records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_init, HookAction, ModelConfig, Position};

    fn tiny_model(vocab: &SyntheticVocab) -> ModelWeights {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 16,
            vocab_size: vocab.len(),
            rope_theta: 10_000.0,
            rms_eps: 1e-5,
            max_seq_len: 16,
        };
        random_init(&cfg, 4).unwrap()
    }

    #[test]
    fn identity_hooked_passes_reproduce_baseline_bits() {
        let vocab = SyntheticVocab::months();
        let w = tiny_model(&vocab);
        let prompts = generate_prompts(&vocab).unwrap();
        let readout = vocab.readout().unwrap();
        let base = BaselinePass::compute(&w, &prompts, &readout).unwrap();
        for (i, p) in prompts.iter().enumerate().step_by(13) {
            for layer in 1..=2 {
                let hook = HookAction::identity(layer, Position::Index(p.alpha_pos));
                let out = forward_with_hooks(&w, &p.tokens, &[hook], &Default::default()).unwrap();
                assert_eq!(readout.restrict(out.last_logits()), base.restricted_logits[i]);
            }
        }
    }

    #[test]
    fn record_count_is_layers_by_prompts_by_targets() {
        let vocab = SyntheticVocab::months();
        let w = tiny_model(&vocab);
        let r = run_intervention_experiment(
            &w,
            &vocab,
            TargetKind::InputInterval,
            InterventionMode::Additive,
            SweepOptions::default(),
        )
        .unwrap();
        assert_eq!(r.records.len(), 2 * 144 * 11);
        assert_eq!(r.curve.values.len(), 2);
        assert_eq!(r.curve.layers, vec![1, 2]);
    }

    #[test]
    fn identical_month_embeddings_give_zero_additive_curve() {
        let vocab = SyntheticVocab::months();
        let mut w = tiny_model(&vocab);
        let d = w.config.d_model;
        let jan = vocab.id("January").unwrap() as usize;
        let row = w.embed[jan * d..(jan + 1) * d].to_vec();
        for m in MONTHS {
            let id = vocab.id(m).unwrap() as usize;
            w.embed[id * d..(id + 1) * d].copy_from_slice(&row);
        }
        let r = run_intervention_experiment(
            &w,
            &vocab,
            TargetKind::InputMonth,
            InterventionMode::Additive,
            SweepOptions::default(),
        )
        .unwrap();
        assert!(r.curve.values.iter().all(|&v| v == 0.0), "{:?}", r.curve.values);
    }

    #[test]
    fn output_sweep_requires_every_prediction_group() {
        let vocab = SyntheticVocab::months();
        let cfg = tiny_model(&vocab).config;
        // zero weights: every prompt predicts January
        let w = ModelWeights::zeros(&cfg).unwrap();
        let err = run_intervention_experiment(
            &w,
            &vocab,
            TargetKind::OutputPrediction,
            InterventionMode::Additive,
            SweepOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyPredictionGroup { ref month } if month == "February"));
    }
}
