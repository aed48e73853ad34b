//! Representational statistics over token matrices: participation ratio,
//! pairwise distances, symmetric KL divergence between predictions, and
//! Spearman correlation between the two.
//!
//! Everything is computed in f64 on f32 inputs.

mod distance;
mod spectrum;
mod stats;

pub use distance::{
    angular_distance, cosine_similarity, euclidean_distance, pairwise_distances, upper_pairs,
    DistanceMatrix, DistanceMetric,
};
pub use spectrum::{
    participation_ratio, participation_ratio_of, prepare, spectrum, spectrum_checked, SpectrumRoute,
    SpectrumSummary,
};
pub use stats::{
    average_ranks, baseline_difference, pearson, spearman_rho, symmetric_kl, symmetric_kl_with,
    KlConvention,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{select_token_matrix, ActivationTrace, TokenSelector};

/// Per-layer Spearman ρ between representational distance and prediction
/// divergence. `None` marks layers where ρ is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCurve {
    pub metric: DistanceMetric,
    pub token_set: TokenSelector,
    pub layers: Vec<usize>,
    pub values: Vec<Option<f64>>,
}

/// Upper-triangle symmetric KL between every pair of distributions.
pub fn pairwise_symmetric_kl(predictions: &[Vec<f64>], convention: KlConvention) -> Result<Vec<f64>> {
    upper_pairs(predictions.len())
        .map(|(i, j)| symmetric_kl_with(&predictions[i], &predictions[j], convention))
        .collect()
}

/// Spearman ρ per captured layer between pairwise distances of the selected
/// tokens and pairwise symmetric KL of `predictions` (one per sequence).
pub fn layer_correlation_curve(
    trace: &ActivationTrace,
    selector: TokenSelector,
    predictions: &[Vec<f64>],
    metric: DistanceMetric,
) -> Result<CorrelationCurve> {
    layer_correlation_curve_with(trace, selector, predictions, metric, KlConvention::Jeffreys)
}

pub fn layer_correlation_curve_with(
    trace: &ActivationTrace,
    selector: TokenSelector,
    predictions: &[Vec<f64>],
    metric: DistanceMetric,
    convention: KlConvention,
) -> Result<CorrelationCurve> {
    if predictions.len() != trace.n_sequences() {
        return Err(Error::Geometry(format!(
            "{} prediction vectors for {} trace sequences",
            predictions.len(),
            trace.n_sequences()
        )));
    }
    let kl = pairwise_symmetric_kl(predictions, convention)?;
    let values = trace
        .layers()
        .par_iter()
        .map(|&layer| {
            let m = select_token_matrix(trace, layer, selector)?;
            let dist = pairwise_distances(&m, metric)?.upper_triangle();
            spearman_rho(&dist, &kl)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrelationCurve {
        metric,
        token_set: selector,
        layers: trace.layers().to_vec(),
        values,
    })
}

/// Participation ratio at every captured layer; `None` where all rows
/// coincide (e.g. an identical final token at the embedding layer).
pub fn pr_curve(
    trace: &ActivationTrace,
    selector: TokenSelector,
    normalize_rows: bool,
    center: bool,
) -> Result<Vec<Option<SpectrumSummary>>> {
    trace
        .layers()
        .par_iter()
        .map(|&layer| {
            let m = select_token_matrix(trace, layer, selector)?;
            spectrum_checked(&m, normalize_rows, center, SpectrumRoute::Auto)
                .map_err(|e| Error::Geometry(format!("layer {layer}: {e}")))
        })
        .collect()
}

/// Restrict a distribution to `ids` and renormalize.
pub fn restrict_distribution(p: &[f64], ids: &[u32]) -> Result<Vec<f64>> {
    let sub = ids
        .iter()
        .map(|&i| {
            p.get(i as usize)
                .copied()
                .ok_or_else(|| Error::Geometry(format!("readout id {i} outside a {}-way distribution", p.len())))
        })
        .collect::<Result<Vec<f64>>>()?;
    let s: f64 = sub.iter().sum();
    if !(s > 0.0) {
        return Err(Error::Geometry("restricted distribution has zero mass".into()));
    }
    Ok(sub.into_iter().map(|x| x / s).collect())
}
