use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Eigen-spectrum `λ_i = σ_i²` of a (processed) token matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    /// Nonincreasing, nonnegative.
    pub eigenvalues: Vec<f64>,
    pub participation_ratio: f64,
    pub normalized: bool,
    pub centered: bool,
}

impl SpectrumSummary {
    pub fn positive_rank(&self) -> usize {
        self.eigenvalues.iter().filter(|&&l| l > 0.0).count()
    }
}

/// Which eigenproblem to solve. `Auto` picks the smaller of the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpectrumRoute {
    #[default]
    Auto,
    /// `X Xᵀ` (n × n)
    Gram,
    /// `Xᵀ X` (d × d)
    Covariance,
}

/// Rows as f64, optionally unit-normalized and column-centered.
pub fn prepare(m: &Matrix, normalize_rows: bool, center: bool) -> Result<DMatrix<f64>> {
    let (n, d) = (m.rows(), m.cols());
    if n < 2 {
        return Err(Error::Geometry(format!("need at least 2 rows, got {n}")));
    }
    if d == 0 {
        return Err(Error::Geometry("matrix has no columns".into()));
    }
    let mut x = DMatrix::<f64>::zeros(n, d);
    for (i, row) in m.iter_rows().enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Geometry(format!("non-finite value at row {i}, column {j}")));
        }
        let scale = if normalize_rows {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Geometry(format!("row {i} has zero norm and cannot be normalized")));
            }
            1.0 / norm
        } else {
            1.0
        };
        for (j, &v) in row.iter().enumerate() {
            x[(i, j)] = v as f64 * scale;
        }
    }
    if center {
        center_columns(&mut x);
    }
    Ok(x)
}

fn center_columns(x: &mut DMatrix<f64>) {
    let n = x.nrows() as f64;
    for j in 0..x.ncols() {
        let mean = x.column(j).sum() / n;
        x.column_mut(j).add_scalar_mut(-mean);
    }
}

/// Spectrum through an explicit route.
pub fn spectrum(m: &Matrix, normalize_rows: bool, center: bool, route: SpectrumRoute) -> Result<SpectrumSummary> {
    spectrum_checked(m, normalize_rows, center, route)?.ok_or_else(|| {
        Error::Geometry("all eigenvalues vanish (every row identical after centering?)".into())
    })
}

/// Like [`spectrum`], but `Ok(None)` when every eigenvalue vanishes and the
/// participation ratio is undefined.
pub fn spectrum_checked(
    m: &Matrix,
    normalize_rows: bool,
    center: bool,
    route: SpectrumRoute,
) -> Result<Option<SpectrumSummary>> {
    let mut x = prepare(m, normalize_rows, false)?;
    let scale = x.norm_squared();
    if center {
        center_columns(&mut x);
    }
    let (n, d) = x.shape();
    let use_gram = match route {
        SpectrumRoute::Auto => n < d,
        SpectrumRoute::Gram => true,
        SpectrumRoute::Covariance => false,
    };
    let g = if use_gram { &x * x.transpose() } else { x.transpose() * &x };
    let mut eig: Vec<f64> = SymmetricEigen::new(g).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    // Rounding noise of the zero eigenspace, measured against the data
    // before centering so that centering residue of identical rows is noise.
    let cutoff = scale * (n * d) as f64 * f64::EPSILON;
    for l in &mut eig {
        if *l <= cutoff {
            *l = 0.0;
        }
    }
    Ok(participation_ratio_of(&eig).map(|pr| SpectrumSummary {
        eigenvalues: eig,
        participation_ratio: pr,
        normalized: normalize_rows,
        centered: center,
    }))
}

/// `(Σλ)² / Σλ²`, or `None` for an all-zero spectrum.
pub fn participation_ratio_of(eigenvalues: &[f64]) -> Option<f64> {
    let s: f64 = eigenvalues.iter().sum();
    let s2: f64 = eigenvalues.iter().map(|l| l * l).sum();
    (s2 > 0.0).then(|| s * s / s2)
}

/// Participation ratio of the rows of `m` (`n × d`, `n ≥ 2`).
pub fn participation_ratio(m: &Matrix, normalize_rows: bool, center: bool) -> Result<SpectrumSummary> {
    spectrum(m, normalize_rows, center, SpectrumRoute::Auto)
}
