//! Steering vectors, the three intervention geometries, and the
//! preference-shift effect measure.
//!
//! - **Additive**: `h + (centroid(target) - centroid(source))`.
//! - **Angular snap**: keep `‖h‖`, replace the direction with the mean
//!   direction of the (row-normalized) target group.
//! - **Norm rescale**: keep the direction of `h`, set its norm to the target
//!   group's mean norm.

pub mod spec;
mod sweep;

pub use sweep::{
    curve_from_records, detect_phase_change, layer_sweep, plan_sweep, smooth3, EffectCurve,
    PlannedIntervention, PromptStates, SweepOptions, SweepPrompt, SweepRecord, SweepResult,
    TargetKind,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    Additive,
    AngularSnap,
    NormRescale,
}

impl InterventionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InterventionMode::Additive => "additive",
            InterventionMode::AngularSnap => "angular_snap",
            InterventionMode::NormRescale => "norm_rescale",
        }
    }
}

impl fmt::Display for InterventionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InterventionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(InterventionMode::Additive),
            "angular" | "angular_snap" => Ok(InterventionMode::AngularSnap),
            "norm" | "norm_rescale" => Ok(InterventionMode::NormRescale),
            other => Err(Error::Invalid(format!(
                "unknown intervention mode `{other}` (expected additive, angular, norm)"
            ))),
        }
    }
}

/// What "the norm of the target" means for norm-rescale vectors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormTarget {
    /// Mean of the target group's member norms.
    #[default]
    MemberMean,
    /// Norm of the target group's centroid.
    CentroidNorm,
}

impl FromStr for NormTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "member-mean" | "member_mean" => Ok(NormTarget::MemberMean),
            "centroid" | "centroid-norm" | "centroid_norm" => Ok(NormTarget::CentroidNorm),
            other => Err(Error::Invalid(format!(
                "unknown norm target `{other}` (expected member-mean or centroid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SteeringPayload {
    Additive { vector: Vec<f32> },
    AngularSnap { direction: Vec<f32> },
    NormRescale { target_norm: f32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_group: String,
    pub target_group: String,
    pub source_size: usize,
    pub target_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub layer: usize,
    pub payload: SteeringPayload,
    pub provenance: Provenance,
}

impl SteeringVector {
    pub fn mode(&self) -> InterventionMode {
        match self.payload {
            SteeringPayload::Additive { .. } => InterventionMode::Additive,
            SteeringPayload::AngularSnap { .. } => InterventionMode::AngularSnap,
            SteeringPayload::NormRescale { .. } => InterventionMode::NormRescale,
        }
    }
}

fn centroid(group: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0f64; group.cols()];
    for row in group.iter_rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let n = group.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

fn norm64(x: impl IntoIterator<Item = f64>) -> f64 {
    x.into_iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Build a steering vector that moves representations from `source` toward `target`.
///
/// Rows are token representations. The source group only matters for
/// additive vectors; for the other modes it is kept for provenance.
pub fn compute_steering_vector(
    source: &Matrix,
    target: &Matrix,
    layer: usize,
    mode: InterventionMode,
    norm_target: NormTarget,
    provenance: (&str, &str),
) -> Result<SteeringVector> {
    if source.rows() == 0 || target.rows() == 0 {
        return Err(Error::Intervention("steering groups must be non-empty".into()));
    }
    if source.cols() != target.cols() {
        return Err(Error::Intervention(format!(
            "group dimensions differ: {} vs {}",
            source.cols(),
            target.cols()
        )));
    }
    let payload = match mode {
        InterventionMode::Additive => {
            let a = centroid(source);
            let b = centroid(target);
            SteeringPayload::Additive {
                vector: b.iter().zip(&a).map(|(b, a)| (b - a) as f32).collect(),
            }
        }
        InterventionMode::AngularSnap => {
            let mut acc = vec![0.0f64; target.cols()];
            for (i, row) in target.iter_rows().enumerate() {
                let n = norm64(row.iter().map(|&v| v as f64));
                if n == 0.0 {
                    return Err(Error::Intervention(format!(
                        "zero-norm row {i} in target group under angular mode"
                    )));
                }
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64 / n;
                }
            }
            let n = norm64(acc.iter().copied());
            if n == 0.0 {
                return Err(Error::Intervention(
                    "target directions cancel; mean direction is undefined".into(),
                ));
            }
            SteeringPayload::AngularSnap {
                direction: acc.iter().map(|a| (a / n) as f32).collect(),
            }
        }
        InterventionMode::NormRescale => {
            let target_norm = match norm_target {
                NormTarget::MemberMean => {
                    target
                        .iter_rows()
                        .map(|r| norm64(r.iter().map(|&v| v as f64)))
                        .sum::<f64>()
                        / target.rows() as f64
                }
                NormTarget::CentroidNorm => norm64(centroid(target)),
            };
            if !(target_norm > 0.0) {
                return Err(Error::Intervention("target norm must be positive".into()));
            }
            SteeringPayload::NormRescale {
                target_norm: target_norm as f32,
            }
        }
    };
    Ok(SteeringVector {
        layer,
        payload,
        provenance: Provenance {
            source_group: provenance.0.to_string(),
            target_group: provenance.1.to_string(),
            source_size: source.rows(),
            target_size: target.rows(),
        },
    })
}

/// Apply a steering vector to one hidden state.
pub fn apply_intervention(h: &[f32], sv: &SteeringVector) -> Result<Vec<f32>> {
    if let Some(i) = h.iter().position(|v| !v.is_finite()) {
        return Err(Error::Intervention(format!("non-finite hidden state at index {i}")));
    }
    let check_dim = |len: usize| {
        if len != h.len() {
            Err(Error::Intervention(format!(
                "steering dimension {len} does not match hidden size {}",
                h.len()
            )))
        } else {
            Ok(())
        }
    };
    match &sv.payload {
        SteeringPayload::Additive { vector } => {
            check_dim(vector.len())?;
            Ok(h.iter().zip(vector).map(|(a, b)| a + b).collect())
        }
        SteeringPayload::AngularSnap { direction } => {
            check_dim(direction.len())?;
            let n = norm64(h.iter().map(|&v| v as f64));
            if n == 0.0 {
                return Err(Error::Intervention("zero-norm hidden state under angular snap".into()));
            }
            Ok(direction.iter().map(|&d| (n * d as f64) as f32).collect())
        }
        SteeringPayload::NormRescale { target_norm } => {
            let n = norm64(h.iter().map(|&v| v as f64));
            if n == 0.0 {
                return Err(Error::Intervention("zero-norm hidden state under norm rescale".into()));
            }
            let s = *target_norm as f64 / n;
            Ok(h.iter().map(|&v| (v as f64 * s) as f32).collect())
        }
    }
}

/// `(after[γ′] − after[γ]) − (before[γ′] − before[γ])` over readout logits.
pub fn preference_shift(
    before: &[f32],
    after: &[f32],
    gamma: usize,
    gamma_prime: usize,
) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::LengthMismatch {
            left: before.len(),
            right: after.len(),
        });
    }
    if gamma == gamma_prime {
        return Err(Error::Intervention(format!(
            "old and new target coincide (index {gamma})"
        )));
    }
    if gamma >= before.len() || gamma_prime >= before.len() {
        return Err(Error::Intervention(format!(
            "readout index out of range: ({gamma}, {gamma_prime}) for {} logits",
            before.len()
        )));
    }
    let after_gap = after[gamma_prime] as f64 - after[gamma] as f64;
    let before_gap = before[gamma_prime] as f64 - before[gamma] as f64;
    Ok(after_gap - before_gap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn additive(sv: &SteeringVector) -> &[f32] {
        match &sv.payload {
            SteeringPayload::Additive { vector } => vector,
            _ => panic!("not additive"),
        }
    }

    #[test]
    fn singleton_additive_is_difference_and_antisymmetric() {
        let a = m(&[&[1.0, 2.0, 3.0]]);
        let b = m(&[&[4.0, 0.0, -1.0]]);
        let ab = compute_steering_vector(&a, &b, 2, InterventionMode::Additive, NormTarget::MemberMean, ("a", "b")).unwrap();
        assert_eq!(additive(&ab), &[3.0, -2.0, -4.0]);
        let ba = compute_steering_vector(&b, &a, 2, InterventionMode::Additive, NormTarget::MemberMean, ("b", "a")).unwrap();
        for (x, y) in additive(&ab).iter().zip(additive(&ba)) {
            assert_eq!(*x, -y);
        }
        assert_eq!(ab.provenance.source_size, 1);
    }

    #[test]
    fn angular_direction_is_normalize_then_average() {
        let a = m(&[&[5.0, 5.0]]);
        let b = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let sv = compute_steering_vector(&a, &b, 0, InterventionMode::AngularSnap, NormTarget::MemberMean, ("a", "b")).unwrap();
        let SteeringPayload::AngularSnap { direction } = &sv.payload else { panic!() };
        let r = std::f32::consts::FRAC_1_SQRT_2;
        assert!((direction[0] - r).abs() < 1e-7 && (direction[1] - r).abs() < 1e-7);
        // Unequal norms do not bias the direction.
        let b2 = m(&[&[100.0, 0.0], &[0.0, 1.0]]);
        let sv2 = compute_steering_vector(&a, &b2, 0, InterventionMode::AngularSnap, NormTarget::MemberMean, ("a", "b")).unwrap();
        assert_eq!(sv.payload, sv2.payload);
    }

    #[test]
    fn norm_targets() {
        let a = m(&[&[1.0, 0.0]]);
        let b = m(&[&[3.0, 4.0], &[-3.0, 4.0]]);
        let mean = compute_steering_vector(&a, &b, 0, InterventionMode::NormRescale, NormTarget::MemberMean, ("a", "b")).unwrap();
        let cent = compute_steering_vector(&a, &b, 0, InterventionMode::NormRescale, NormTarget::CentroidNorm, ("a", "b")).unwrap();
        assert_eq!(mean.payload, SteeringPayload::NormRescale { target_norm: 5.0 });
        assert_eq!(cent.payload, SteeringPayload::NormRescale { target_norm: 4.0 });
    }

    #[test]
    fn construction_errors() {
        let empty = Matrix::new(0, 2, vec![]).unwrap();
        let b = m(&[&[1.0, 0.0]]);
        assert!(compute_steering_vector(&empty, &b, 0, InterventionMode::Additive, NormTarget::MemberMean, ("a", "b")).is_err());
        assert!(compute_steering_vector(&b, &empty, 0, InterventionMode::Additive, NormTarget::MemberMean, ("a", "b")).is_err());
        let zero_row = m(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert!(compute_steering_vector(&b, &zero_row, 0, InterventionMode::AngularSnap, NormTarget::MemberMean, ("a", "b")).is_err());
        let wide = m(&[&[1.0, 0.0, 0.0]]);
        assert!(compute_steering_vector(&b, &wide, 0, InterventionMode::Additive, NormTarget::MemberMean, ("a", "b")).is_err());
    }

    fn sv(payload: SteeringPayload) -> SteeringVector {
        SteeringVector {
            layer: 0,
            payload,
            provenance: Provenance {
                source_group: String::new(),
                target_group: String::new(),
                source_size: 1,
                target_size: 1,
            },
        }
    }

    #[test]
    fn apply_examples() {
        let h = [3.0f32, 4.0];
        let zero = sv(SteeringPayload::Additive { vector: vec![0.0, 0.0] });
        assert_eq!(apply_intervention(&h, &zero).unwrap(), h.to_vec());
        let snap = sv(SteeringPayload::AngularSnap { direction: vec![1.0, 0.0] });
        assert_eq!(apply_intervention(&h, &snap).unwrap(), vec![5.0, 0.0]);
        let rescale = sv(SteeringPayload::NormRescale { target_norm: 10.0 });
        assert_eq!(apply_intervention(&h, &rescale).unwrap(), vec![6.0, 8.0]);
    }

    #[test]
    fn apply_errors() {
        let snap = sv(SteeringPayload::AngularSnap { direction: vec![1.0, 0.0] });
        assert!(apply_intervention(&[0.0, 0.0], &snap).is_err());
        let rescale = sv(SteeringPayload::NormRescale { target_norm: 1.0 });
        assert!(apply_intervention(&[0.0, 0.0], &rescale).is_err());
        assert!(apply_intervention(&[1.0, 0.0, 0.0], &snap).is_err());
        assert!(apply_intervention(&[f32::NAN, 0.0], &rescale).is_err());
    }

    #[test]
    fn preference_shift_examples() {
        let before = [2.0f32, 1.0];
        let after = [1.0f32, 3.0];
        assert_eq!(preference_shift(&before, &after, 0, 1).unwrap(), 3.0);
        assert_eq!(preference_shift(&before, &after, 1, 0).unwrap(), -3.0);
        assert_eq!(preference_shift(&before, &before, 0, 1).unwrap(), 0.0);
        assert!(preference_shift(&before, &after, 1, 1).is_err());
        assert!(preference_shift(&before, &after, 0, 2).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("angular".parse::<InterventionMode>().unwrap(), InterventionMode::AngularSnap);
        assert_eq!("norm_rescale".parse::<InterventionMode>().unwrap(), InterventionMode::NormRescale);
        assert!("rotate".parse::<InterventionMode>().is_err());
    }
}
