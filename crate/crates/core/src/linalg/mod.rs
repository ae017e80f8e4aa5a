//! Dense linear algebra: matrices, Jacobi SVD and two-component PCA.

mod matrix;
mod pca;
mod svd;

pub use matrix::{dot, gemm, norm2, p_norm, Matrix};
pub use pca::{pca_fit_2d, Pca2};
pub use svd::{svd_full, svd_truncate, Svd, TruncatedSvd, DEGENERATE_SPECTRUM_SUM, JACOBI_TOLERANCE, MAX_SVD_DIM};
