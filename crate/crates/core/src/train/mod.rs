//! Desk-scale trainer for the Months task.
//!
//! Trains a small model with Adam on the cross-entropy of the final-position
//! prediction. Everything is single-threaded and seeded, so a fixed
//! `(ModelConfig, TrainConfig)` pair reproduces the same weights bit for bit.

mod backward;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::Rope;
use crate::model::{forward_with_hooks, random_init, ModelConfig, ModelWeights};
use crate::months::{generate_prompts, readout_prediction, ReadoutSet, SyntheticVocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of augmented (prefixed) sequences held out for evaluation.
    pub eval_fraction: f64,
    /// Extra copies of each prompt behind a random distractor prefix.
    pub augment_copies: usize,
    /// Stop early once training-set readout accuracy reaches 1.0, checked
    /// every `check_every` steps (0 disables the check).
    pub check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            steps: 1500,
            batch_size: 48,
            seed: 0,
            eval_fraction: 0.2,
            augment_copies: 0,
            check_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Invalid("train steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Invalid(format!(
                "eval fraction must lie in (0, 1), got {}",
                self.eval_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// A token sequence whose final position should predict `target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub tokens: Vec<u32>,
    pub target: u32,
    /// Calendar index of the target month.
    pub month: usize,
    pub canonical: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonthsDataset {
    pub train: Vec<LabeledSequence>,
    /// The 144 canonical prompts first, then held-out augmented copies.
    pub eval: Vec<LabeledSequence>,
}

impl MonthsDataset {
    pub fn canonical_eval(&self) -> &[LabeledSequence] {
        &self.eval[..144]
    }
}

/// Labeled Months sequences.
///
/// The 144 canonical prompts are used for training and are always present,
/// unmodified and exactly once, at the head of the eval split. With
/// `augment_copies > 0` each prompt is also replicated behind random
/// distractor prefixes; `eval_fraction` of those replicas are held out.
pub fn build_months_dataset(
    vocab: &SyntheticVocab,
    augment_copies: usize,
    eval_fraction: f64,
    augmentation_seed: u64,
) -> Result<MonthsDataset> {
    let prompts = generate_prompts(vocab)?;
    let readout = vocab.readout()?;
    let canonical: Vec<LabeledSequence> = prompts
        .iter()
        .map(|p| LabeledSequence {
            tokens: p.tokens.clone(),
            target: readout.ids()[p.gamma],
            month: p.gamma,
            canonical: true,
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(augmentation_seed);
    let mut augmented = Vec::with_capacity(augment_copies * prompts.len());
    for _ in 0..augment_copies {
        for seq in &canonical {
            let len = rng.random_range(1..=6);
            let mut tokens: Vec<u32> = (0..len)
                .map(|_| rng.random_range(0..vocab.len() as u32))
                .collect();
            tokens.extend_from_slice(&seq.tokens);
            augmented.push(LabeledSequence {
                tokens,
                canonical: false,
                ..seq.clone()
            });
        }
    }
    augmented.shuffle(&mut rng);
    let n_eval = (augmented.len() as f64 * eval_fraction).round() as usize;
    let held_out = augmented.split_off(augmented.len() - n_eval);

    let mut train = canonical.clone();
    train.extend(augmented);
    let mut eval = canonical;
    eval.extend(held_out);
    Ok(MonthsDataset { train, eval })
}

struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    fn new(weights: &ModelWeights, lr: f32) -> Self {
        let shapes: Vec<Vec<f32>> = weights.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    fn step(&mut self, weights: &mut ModelWeights, grads: &ModelWeights) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in weights
            .params_mut()
            .into_iter()
            .zip(grads.params())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Mean batch loss (nats) per optimizer step.
    pub loss_history: Vec<f64>,
    /// Restricted-readout accuracy on the 144 canonical prompts.
    pub canonical_accuracy: f64,
}

/// Train on the Months dataset built from the default synthetic vocabulary.
pub fn train_toy_model(config: &ModelConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    train.validate()?;
    let vocab = SyntheticVocab::months();
    if config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "vocab_size {} does not match the Months vocabulary ({} words)",
            config.vocab_size,
            vocab.len()
        )));
    }
    let readout = vocab.readout()?;
    let data = build_months_dataset(
        &vocab,
        train.augment_copies,
        train.eval_fraction,
        train.seed.wrapping_add(1),
    )?;
    if let Some(s) = data.train.iter().find(|s| s.tokens.len() > config.max_seq_len) {
        return Err(Error::SequenceTooLong {
            len: s.tokens.len(),
            max: config.max_seq_len,
        });
    }

    let mut weights = random_init(config, train.seed)?;
    let rope = Rope::new(config);
    let mut adam = Adam::new(&weights, train.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();
    let batch = train.batch_size.min(order.len());
    let mut history = Vec::with_capacity(train.steps);

    for step in 0..train.steps {
        let mut grads = backward::zeros_like(&weights);
        let mut loss = 0.0f64;
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &data.train[order[cursor]];
            cursor += 1;
            loss += backward::accumulate_gradients(
                &weights,
                &rope,
                &s.tokens,
                s.target,
                1.0 / batch as f32,
                &mut grads,
            );
        }
        let loss = loss / batch as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss as f32,
            });
        }
        history.push(loss);
        adam.step(&mut weights, &grads);
        if weights.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                step,
                loss: f32::NAN,
            });
        }
        if train.check_every > 0
            && (step + 1) % train.check_every == 0
            && evaluate(&weights, &data.train, &readout)? == 1.0
        {
            break;
        }
    }

    let canonical_accuracy = evaluate(&weights, data.canonical_eval(), &readout)?;
    Ok(TrainOutcome {
        weights,
        loss_history: history,
        canonical_accuracy,
    })
}

/// Fraction of sequences whose restricted-readout argmax equals the label.
pub fn evaluate(
    weights: &ModelWeights,
    sequences: &[LabeledSequence],
    readout: &ReadoutSet,
) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty prompt set".into()));
    }
    let mut correct = 0usize;
    for s in sequences {
        let out = forward_with_hooks(weights, &s.tokens, &[], &Default::default())?;
        let (pred, _) = readout_prediction(out.last_logits(), readout);
        if pred == s.month {
            correct += 1;
        }
    }
    Ok(correct as f64 / sequences.len() as f64)
}
