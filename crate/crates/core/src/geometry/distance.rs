use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Euclidean,
    /// Angle in radians, `arccos` of the clamped cosine.
    Angular,
}

impl DistanceMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Angular => "angular",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "angular" => Ok(DistanceMetric::Angular),
            other => Err(Error::Invalid(format!("unknown metric `{other}` (expected euclidean or angular)"))),
        }
    }
}

fn sq_norm(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64 * v as f64).sum()
}

pub fn euclidean_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    let (na, nb) = (sq_norm(a), sq_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Geometry("cosine of a zero-norm vector is undefined".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok(dot / (na * nb).sqrt())
}

pub fn angular_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    Ok(cosine_similarity(a, b)?.clamp(-1.0, 1.0).acos())
}

/// Symmetric `n × n` distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub metric: DistanceMetric,
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Entries `(i, j)` with `i < j`, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        upper_pairs(self.n).map(|(i, j)| self.get(i, j)).collect()
    }
}

/// Index pairs `(i, j)`, `i < j`, in the order every pairwise statistic uses.
pub fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

pub fn pairwise_distances(m: &Matrix, metric: DistanceMetric) -> Result<DistanceMatrix> {
    let n = m.rows();
    if n < 2 {
        return Err(Error::Geometry(format!("need at least 2 rows, got {n}")));
    }
    if metric == DistanceMetric::Angular {
        if let Some(i) = m.iter_rows().position(|r| sq_norm(r) == 0.0) {
            return Err(Error::Geometry(format!("row {i} has zero norm; angular distance undefined")));
        }
    }
    let mut data = vec![0.0; n * n];
    for (i, j) in upper_pairs(n) {
        let d = match metric {
            DistanceMetric::Euclidean => euclidean_distance(m.row(i), m.row(j))?,
            DistanceMetric::Angular => angular_distance(m.row(i), m.row(j))?,
        };
        data[i * n + j] = d;
        data[j * n + i] = d;
    }
    Ok(DistanceMatrix { metric, n, data })
}
