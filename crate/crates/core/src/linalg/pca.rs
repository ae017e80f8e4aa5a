use crate::error::{Error, Result};
use crate::linalg::matrix::{dot, Matrix};
use crate::linalg::svd::jacobi_svd;

/// Two-component PCA basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// `d × 2`, orthonormal columns.
    pub components: Matrix,
    /// Share of total variance captured by the two components.
    pub explained_ratio: f64,
}

impl Pca2 {
    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        assert_eq!(x.len(), self.mean.len());
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let c0 = self.components.column(0);
        let c1 = self.components.column(1);
        [dot(&centered, &c0), dot(&centered, &c1)]
    }
}

/// Fits the top-2 principal directions of an `n × d` point cloud.
pub fn pca_fit_2d(points: &Matrix) -> Result<Pca2> {
    let (n, d) = points.shape();
    if n < 2 {
        return Err(Error::InsufficientData(format!("PCA needs at least 2 points, got {n}")));
    }
    if d < 2 {
        return Err(Error::InsufficientData(format!("PCA needs dimension >= 2, got {d}")));
    }
    if !points.is_finite() {
        return Err(Error::InvalidInput("non-finite point".into()));
    }
    let mean: Vec<f64> = (0..d)
        .map(|c| (0..n).map(|r| points[(r, c)]).sum::<f64>() / n as f64)
        .collect();
    // Pad with zero rows when n < d; right singular vectors are unchanged.
    let rows = n.max(d);
    let centered = Matrix::from_fn(rows, d, |r, c| if r < n { points[(r, c)] - mean[c] } else { 0.0 });
    let total: f64 = centered.data().iter().map(|v| v * v).sum();
    if total <= f64::MIN_POSITIVE || total.sqrt() <= 1e-12 * (1.0 + mean.iter().map(|m| m * m).sum::<f64>().sqrt()) {
        return Err(Error::DegenerateVariance);
    }
    let svd = jacobi_svd(&centered);
    let components = svd.v.leading_columns(2);
    let explained_ratio = (svd.s[0] * svd.s[0] + svd.s[1] * svd.s[1]) / total;
    Ok(Pca2 {
        mean,
        components,
        explained_ratio,
    })
}
