use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization constant for the symmetric KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlConvention {
    /// `KL(p‖q) + KL(q‖p)`
    #[default]
    Jeffreys,
    /// Half of the above.
    Halved,
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if let Some(i) = p.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::Geometry(format!("{name}[{i}] = {} is not a positive probability", p[i])));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Geometry(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `KL(p‖q) + KL(q‖p)` in nats.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    symmetric_kl_with(p, q, KlConvention::Jeffreys)
}

pub fn symmetric_kl_with(p: &[f64], q: &[f64], convention: KlConvention) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch { left: p.len(), right: q.len() });
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    // Σ p ln(p/q) + Σ q ln(q/p) = Σ (p - q)(ln p - ln q)
    let j: f64 = p.iter().zip(q).map(|(&a, &b)| (a - b) * (a.ln() - b.ln())).sum();
    Ok(match convention {
        KlConvention::Jeffreys => j,
        KlConvention::Halved => j / 2.0,
    })
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation, or `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman ρ. `Ok(None)` when either input is constant, so ρ is undefined.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 3 {
        return Err(Error::Geometry(format!("Spearman needs at least 3 pairs, got {}", x.len())));
    }
    if let Some(v) = x.iter().chain(y).find(|v| v.is_nan()) {
        return Err(Error::Geometry(format!("cannot rank {v}")));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Elementwise `ordered − shuffled`.
pub fn baseline_difference(ordered: &[f64], shuffled: &[f64]) -> Result<Vec<f64>> {
    if ordered.len() != shuffled.len() {
        return Err(Error::LengthMismatch { left: ordered.len(), right: shuffled.len() });
    }
    Ok(ordered.iter().zip(shuffled).map(|(a, b)| a - b).collect())
}
