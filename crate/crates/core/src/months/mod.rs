//! The closed 144-prompt Months task: vocabulary, prompts, and readout.
//!
//! Prompt template: `Let's do some calendar math . [INTERVAL] months from [MONTH] is`

mod experiment;

pub use experiment::{run_intervention_experiment, BaselinePass, ExperimentResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::argmax;

pub const MONTHS: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];

pub const INTERVALS: [&str; 12] = [
    "One", "Two", "Three", "Four", "Five", "Six", "Seven", "Eight", "Nine", "Ten", "Eleven",
    "Twelve",
];

pub const SENTENCE_MARK: &str = ".";

const TEMPLATE_HEAD: [&str; 6] = ["Let's", "do", "some", "calendar", "math", SENTENCE_MARK];
const TEMPLATE_MID: [&str; 2] = ["months", "from"];
const TEMPLATE_TAIL: [&str; 1] = ["is"];

/// Word-level vocabulary covering the Months template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticVocab {
    words: Vec<String>,
}

impl Default for SyntheticVocab {
    fn default() -> Self {
        Self::months()
    }
}

impl SyntheticVocab {
    pub fn months() -> Self {
        let mut words: Vec<String> = Vec::new();
        for w in TEMPLATE_HEAD
            .iter()
            .chain(&TEMPLATE_MID)
            .chain(&TEMPLATE_TAIL)
            .chain(&MONTHS)
            .chain(&INTERVALS)
        {
            if !words.iter().any(|x| x == w) {
                words.push((*w).to_string());
            }
        }
        SyntheticVocab { words }
    }

    /// A vocabulary from an explicit word list (ids follow list order).
    pub fn from_words(words: Vec<String>) -> Self {
        SyntheticVocab { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<u32>> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Months(format!("vocabulary has no token for `{w}`")))
            })
            .collect()
    }

    pub fn readout(&self) -> Result<ReadoutSet> {
        let ids = self.encode(&MONTHS)?;
        ReadoutSet::new(ids, self.len())
    }
}

/// Twelve month token ids in calendar order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadoutSet {
    ids: Vec<u32>,
}

impl ReadoutSet {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if ids.len() != 12 {
            return Err(Error::Months(format!("readout needs 12 ids, got {}", ids.len())));
        }
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= vocab_size {
                return Err(Error::Months(format!(
                    "readout id {id} for {} outside vocab of size {vocab_size}",
                    MONTHS[i]
                )));
            }
            if ids[..i].contains(&id) {
                return Err(Error::Months(format!("readout id {id} repeated")));
            }
        }
        Ok(ReadoutSet { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// The 12 month logits in calendar order.
    pub fn restrict(&self, logits: &[f32]) -> Vec<f32> {
        self.ids.iter().map(|&id| logits[id as usize]).collect()
    }
}

/// One instantiated Months prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonthsPrompt {
    /// Start month, 0 = January.
    pub alpha: usize,
    /// Interval in months, 1..=12.
    pub beta: usize,
    /// `(alpha + beta) mod 12`.
    pub gamma: usize,
    pub tokens: Vec<u32>,
    pub alpha_pos: usize,
    pub beta_pos: usize,
    pub final_pos: usize,
}

impl MonthsPrompt {
    pub fn text(&self) -> String {
        prompt_words(self.alpha, self.beta).join(" ")
    }
}

fn prompt_words(alpha: usize, beta: usize) -> Vec<&'static str> {
    let mut words: Vec<&str> = TEMPLATE_HEAD.to_vec();
    words.push(INTERVALS[beta - 1]);
    words.extend(TEMPLATE_MID);
    words.push(MONTHS[alpha]);
    words.extend(TEMPLATE_TAIL);
    words
}

/// `(alpha + beta) mod 12`, with `alpha` in `0..12` and `beta` in `1..=12`.
pub fn ground_truth_target(alpha: usize, beta: usize) -> Result<usize> {
    if alpha >= 12 {
        return Err(Error::Months(format!("start month index {alpha} out of range 0..12")));
    }
    if !(1..=12).contains(&beta) {
        return Err(Error::Months(format!("interval {beta} out of range 1..=12")));
    }
    Ok((alpha + beta) % 12)
}

/// All 144 prompts, ordered by start month then interval.
pub fn generate_prompts(vocab: &SyntheticVocab) -> Result<Vec<MonthsPrompt>> {
    let beta_pos = TEMPLATE_HEAD.len();
    let alpha_pos = beta_pos + 1 + TEMPLATE_MID.len();
    let final_pos = alpha_pos + TEMPLATE_TAIL.len();
    let mut prompts = Vec::with_capacity(144);
    for alpha in 0..12 {
        for beta in 1..=12 {
            let tokens = vocab.encode(&prompt_words(alpha, beta))?;
            prompts.push(MonthsPrompt {
                alpha,
                beta,
                gamma: ground_truth_target(alpha, beta)?,
                tokens,
                alpha_pos,
                beta_pos,
                final_pos,
            });
        }
    }
    Ok(prompts)
}

/// Restricted argmax over the 12 month logits; ties go to the earliest month.
pub fn readout_prediction(logits: &[f32], readout: &ReadoutSet) -> (usize, Vec<f32>) {
    let restricted = readout.restrict(logits);
    (argmax(&restricted), restricted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generates_144_prompts_with_consistent_positions() {
        let vocab = SyntheticVocab::months();
        let prompts = generate_prompts(&vocab).unwrap();
        assert_eq!(prompts.len(), 144);
        let first = &prompts[0];
        for p in &prompts {
            assert_eq!(p.tokens.len(), first.tokens.len());
            assert_eq!(p.tokens[p.alpha_pos], vocab.id(MONTHS[p.alpha]).unwrap());
            assert_eq!(p.tokens[p.beta_pos], vocab.id(INTERVALS[p.beta - 1]).unwrap());
            assert_eq!(p.final_pos, p.tokens.len() - 1);
            for (i, (&a, &b)) in p.tokens.iter().zip(&first.tokens).enumerate() {
                if i != p.alpha_pos && i != p.beta_pos {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn two_months_from_january_is_march() {
        let vocab = SyntheticVocab::months();
        let prompts = generate_prompts(&vocab).unwrap();
        let p = prompts.iter().find(|p| p.alpha == 0 && p.beta == 2).unwrap();
        assert_eq!(MONTHS[p.gamma], "March");
        assert_eq!(
            p.text(),
            "Let's do some calendar math . Two months from January is"
        );
    }

    #[test]
    fn modular_identities() {
        assert_eq!(ground_truth_target(0, 12).unwrap(), 0);
        assert_eq!(ground_truth_target(11, 1).unwrap(), 0);
        for m in 0..12 {
            assert_eq!(ground_truth_target(m, 12).unwrap(), m);
        }
        assert!(ground_truth_target(12, 1).is_err());
        assert!(ground_truth_target(0, 0).is_err());
        assert!(ground_truth_target(0, 13).is_err());
    }

    #[test]
    fn readout_tie_break_and_shift_invariance() {
        let vocab = SyntheticVocab::months();
        let readout = vocab.readout().unwrap();
        let logits = vec![0.25f32; vocab.len()];
        assert_eq!(readout_prediction(&logits, &readout).0, 0);
        let mut logits = vec![0.0f32; vocab.len()];
        logits[vocab.id("March").unwrap() as usize] = 2.0;
        logits[0] = 50.0; // not a month; ignored by the restricted readout
        assert_eq!(readout_prediction(&logits, &readout).0, 2);
        let shifted: Vec<f32> = logits.iter().map(|v| v + 7.5).collect();
        assert_eq!(readout_prediction(&shifted, &readout).0, 2);
    }

    #[test]
    fn vocabulary_gap_is_reported() {
        let vocab = SyntheticVocab::from_words(vec!["Let's".into(), "do".into()]);
        assert!(matches!(generate_prompts(&vocab), Err(Error::Months(_))));
    }

    #[test]
    fn readout_validation() {
        assert!(ReadoutSet::new(vec![1; 12], 20).is_err());
        assert!(ReadoutSet::new((0..12).collect(), 11).is_err());
        assert!(ReadoutSet::new((0..11).collect(), 20).is_err());
    }
}
