//! Geometry diagnostics: distance of the class-mean Gram to an orthogonal
//! frame and to a simplex ETF, the neural-collapse ratio, and class-mean
//! cosines.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    center_columns, class_means, EmbeddingMatrix, GramMatrix, LabelSet, MeanMatrix,
};

/// Relative eigenvalue cutoff for the pseudoinverse of `Σ_B`.
pub const PINV_RTOL: f64 = 1e-10;

fn normalized(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let norm = m.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Undefined(what));
    }
    Ok(m / norm)
}

/// `‖G_M/‖G_M‖_F − I_k/‖I_k‖_F‖_F` with `G_M = MᵀM`, no centering.
pub fn delta_gm(m: &MeanMatrix) -> Result<f64> {
    let g = normalized(m.gram().as_matrix(), "zero class-mean gram")?;
    let k = m.k();
    let target = DMatrix::<f64>::identity(k, k) / (k as f64).sqrt();
    Ok((g - target).norm())
}

/// Same distance after global-mean centering, against `I − 11ᵀ/k`.
pub fn delta_etf(m: &MeanMatrix) -> Result<f64> {
    let k = m.k();
    if k < 2 {
        return Err(Error::Undefined("ETF distance needs k >= 2"));
    }
    let g = normalized(
        center_columns(m).gram().as_matrix(),
        "centered class means are zero",
    )?;
    let target = DMatrix::<f64>::identity(k, k) - DMatrix::from_element(k, k, 1.0 / k as f64);
    let target = target / ((k - 1) as f64).sqrt();
    Ok((g - target).norm())
}

/// Moore–Penrose pseudoinverse of a symmetric PSD matrix, dropping
/// eigenvalues below `rtol · λ_max`.
pub fn pinv_psd(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let lambda_max = eig.eigenvalues.amax();
    let cutoff = rtol * lambda_max;
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > cutoff && lambda > 0.0 {
            let v = eig.eigenvectors.column(idx);
            out += (v * v.transpose()) / lambda;
        }
    }
    out
}

/// Between-class scatter `Σ_B` about `μ_G = (1/k) Σ μ_c`.
pub fn between_class_scatter(means: &MeanMatrix) -> DMatrix<f64> {
    let centered = center_columns(means);
    let c = centered.as_matrix();
    c * c.transpose()
}

/// Within-class scatter `Σ_W = Σ_i (h_i − μ_{y_i})(h_i − μ_{y_i})ᵀ`.
pub fn within_class_scatter(h: &EmbeddingMatrix, y: &LabelSet, means: &MeanMatrix) -> DMatrix<f64> {
    let mut dev = h.as_matrix().clone();
    for (i, mut col) in dev.column_iter_mut().enumerate() {
        col -= means.as_matrix().column(y.label(i));
    }
    &dev * dev.transpose()
}

/// `tr(Σ_W Σ_B†) / k`.
pub fn beta_nc(h: &EmbeddingMatrix, y: &LabelSet) -> Result<f64> {
    if y.k() < 2 {
        return Err(Error::Undefined("neural-collapse ratio needs k >= 2"));
    }
    let means = class_means(h, y)?;
    let sb = between_class_scatter(&means);
    if sb.amax() <= f64::MIN_POSITIVE {
        return Err(Error::Undefined("between-class scatter is zero"));
    }
    let sw = within_class_scatter(h, y, &means);
    let pinv = pinv_psd(&sb, PINV_RTOL);
    Ok((sw * pinv).trace() / y.k() as f64)
}

/// `k × k` table of class-mean cosines `μ_cᵀμ_c' / (‖μ_c‖‖μ_c'‖)`.
pub fn cosine_table(m: &MeanMatrix) -> Result<DMatrix<f64>> {
    let norms: Vec<f64> = m.as_matrix().column_iter().map(|c| c.norm()).collect();
    if norms.contains(&0.0) {
        return Err(Error::Undefined("a class mean is zero"));
    }
    let g = m.gram().into_inner();
    Ok(DMatrix::from_fn(m.k(), m.k(), |i, j| {
        g[(i, j)] / (norms[i] * norms[j])
    }))
}

/// Average class-mean cosine over unordered pairs `c ≠ c'`.
pub fn mean_pairwise_cosine(m: &MeanMatrix) -> Result<f64> {
    pair_average(m, |v| v)
}

fn pair_average(m: &MeanMatrix, f: impl Fn(f64) -> f64) -> Result<f64> {
    let k = m.k();
    if k < 2 {
        return Err(Error::Undefined("pairwise cosine needs k >= 2"));
    }
    let table = cosine_table(m)?;
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            sum += f(table[(i, j)]);
        }
    }
    Ok(sum / (k * (k - 1) / 2) as f64)
}

/// `G / max|G_ij|`, the normalization used for heatmaps.
pub fn heatmap_payload(g: &GramMatrix) -> Result<DMatrix<f64>> {
    let max = g.as_matrix().amax();
    if max == 0.0 {
        return Err(Error::Undefined("gram matrix is zero"));
    }
    Ok(g.as_matrix() / max)
}

pub fn write_heatmap_csv<W: Write>(payload: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    for row in payload.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:.16e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Every diagnostic for one embedding/label pair. Metrics that are undefined
/// for the input (for example `k = 1`) are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub delta_gm: Option<f64>,
    pub delta_etf: Option<f64>,
    pub beta_nc: Option<f64>,
    pub mean_cos: Option<f64>,
    pub mean_abs_cos: Option<f64>,
    pub cosines: Vec<Vec<f64>>,
    pub heatmap: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl GeometryReport {
    pub fn compute(h: &EmbeddingMatrix, y: &LabelSet) -> Result<Self> {
        let means = class_means(h, y)?;
        Ok(Self {
            delta_gm: delta_gm(&means).ok(),
            delta_etf: delta_etf(&means).ok(),
            beta_nc: beta_nc(h, y).ok(),
            mean_cos: mean_pairwise_cosine(&means).ok(),
            mean_abs_cos: pair_average(&means, f64::abs).ok(),
            cosines: cosine_table(&means).map(|t| rows(&t)).unwrap_or_default(),
            heatmap: heatmap_payload(&means.gram())
                .map(|t| rows(&t))
                .unwrap_or_default(),
        })
    }
}
