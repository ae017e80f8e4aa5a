//! Synthetic stacks whose maps share one orthogonal singular basis.

use coupling_core::Matrix;

use crate::error::{LabError, Result};

/// Tolerance on `‖UᵀU − I‖_F`.
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledStackSpec {
    pub u: Matrix,
    /// One length-`d` non-negative spectrum per layer.
    pub spectra: Vec<Vec<f64>>,
}

/// `J_l = U · diag(s_l) · Uᵀ` for every layer.
pub fn build_coupled_stack(spec: &CoupledStackSpec) -> Result<Vec<Matrix>> {
    let u = &spec.u;
    if !u.is_square() {
        return Err(coupling_core::Error::ShapeMismatch(format!("basis is {:?}", u.shape())).into());
    }
    let d = u.rows();
    let err = u.t_matmul(u)?.sub(&Matrix::identity(d))?.frobenius_norm();
    if !(err <= ORTHOGONALITY_TOLERANCE) {
        return Err(LabError::InvalidBasis(err));
    }
    if spec.spectra.is_empty() {
        return Err(coupling_core::Error::InvalidInput("stack needs at least one layer".into()).into());
    }
    spec.spectra
        .iter()
        .map(|s| {
            if s.len() != d {
                return Err(
                    coupling_core::Error::ShapeMismatch(format!("spectrum of length {} for d = {d}", s.len())).into(),
                );
            }
            if s.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(
                    coupling_core::Error::InvalidInput("spectra must be finite and non-negative".into()).into(),
                );
            }
            let scaled = Matrix::from_fn(d, d, |i, j| u[(i, j)] * s[j]);
            Ok(scaled.matmul_t(u)?)
        })
        .collect()
}
