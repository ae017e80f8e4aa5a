//! One-sided (Hestenes) Jacobi SVD.
//!
//! Cyclic sweeps orthogonalize the columns of a working copy of the input
//! until every pair satisfies `|aᵢ·aⱼ| ≤ tol · ‖aᵢ‖‖aⱼ‖`. The result is
//! fully deterministic: a fixed pair order, no randomization and no
//! threading, so identical input bits give identical output bits.

use crate::error::{Error, Result};
use crate::linalg::matrix::{dot, Matrix};

/// Relative off-diagonal threshold below which a pair counts as orthogonal.
pub const JACOBI_TOLERANCE: f64 = 1e-14;
const MAX_SWEEPS: usize = 80;
/// Upper bound on the dimension accepted by [`svd_full`].
pub const MAX_SVD_DIM: usize = 1024;
/// Top-K spectra whose sum falls below this are flagged degenerate.
pub const DEGENERATE_SPECTRUM_SUM: f64 = 1e-12;

/// Full SVD `M = U · diag(s) · Vᵀ` of a square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

/// Leading `k` singular triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    pub u_k: Matrix,
    pub s_k: Vec<f64>,
    pub v_k: Matrix,
    pub k: usize,
}

impl TruncatedSvd {
    /// True when the retained spectrum carries no usable mass.
    pub fn is_degenerate(&self) -> bool {
        self.s_k.iter().sum::<f64>() < DEGENERATE_SPECTRUM_SUM
    }

    pub fn dim(&self) -> usize {
        self.u_k.rows()
    }
}

impl Svd {
    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.u.cols(), |r, c| self.u[(r, c)] * self.s[c]);
        us.matmul_t(&self.v).expect("svd factors are conformant")
    }
}

/// SVD of a square matrix with singular values sorted non-increasing.
///
/// Each singular pair is sign-normalized so that the entry of `uᵢ` with the
/// largest magnitude is positive (lowest index wins ties).
pub fn svd_full(m: &Matrix) -> Result<Svd> {
    if !m.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "svd_full needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if m.rows() > MAX_SVD_DIM {
        return Err(Error::InvalidInput(format!(
            "dimension {} exceeds {MAX_SVD_DIM}",
            m.rows()
        )));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput("non-finite entry".into()));
    }
    Ok(jacobi_svd(m))
}

/// Keeps the leading `k` columns and values of a full decomposition.
pub fn svd_truncate(full: &Svd, k: usize) -> Result<TruncatedSvd> {
    let d = full.dim();
    if k == 0 || k > d {
        return Err(Error::InvalidK { k, max: d });
    }
    Ok(TruncatedSvd {
        u_k: full.u.leading_columns(k),
        s_k: full.s[..k].to_vec(),
        v_k: full.v.leading_columns(k),
        k,
    })
}

/// Thin SVD of a tall (`rows ≥ cols`) matrix: `U` is `rows × cols`.
pub(crate) fn jacobi_svd(a: &Matrix) -> Svd {
    let (m, n) = a.shape();
    assert!(m >= n, "jacobi_svd expects rows >= cols");

    // column-major working copies
    let mut w: Vec<f64> = (0..n).flat_map(|c| a.column(c)).collect();
    let mut v: Vec<f64> = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (head, tail) = w.split_at_mut(q * m);
                let ap = &mut head[p * m..(p + 1) * m];
                let aq = &mut tail[..m];
                let alpha = dot(ap, ap);
                let beta = dot(aq, aq);
                let gamma = dot(ap, aq);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(ap, aq, c, s);
                let (vh, vt) = v.split_at_mut(q * n);
                rotate(&mut vh[p * n..(p + 1) * n], &mut vt[..n], c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|c| dot(&w[c * m..(c + 1) * m], &w[c * m..(c + 1) * m]).sqrt())
        .collect();
    // stable sort keeps the lowest original index first among ties
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s_max = norms[order.first().copied().unwrap_or(0)].max(0.0);
    let null_floor = s_max * (m as f64) * f64::EPSILON;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut null_slots = Vec::new();
    for (slot, &c) in order.iter().enumerate() {
        let sigma = norms[c];
        let col = &w[c * m..(c + 1) * m];
        if sigma > null_floor && sigma > 0.0 {
            u_cols.push(col.iter().map(|x| x / sigma).collect());
        } else {
            u_cols.push(Vec::new());
            null_slots.push(slot);
        }
        s.push(sigma);
        v_cols.push(v[c * n..(c + 1) * n].to_vec());
    }

    // Directions with numerically zero singular value carry no information;
    // fill them with an orthonormal completion so U stays orthogonal.
    if !null_slots.is_empty() {
        let mut candidate = 0usize;
        for &slot in &null_slots {
            loop {
                assert!(candidate < m, "orthonormal completion ran out of candidates");
                let mut e = vec![0.0; m];
                e[candidate] = 1.0;
                candidate += 1;
                for _ in 0..2 {
                    for (other_slot, other) in u_cols.iter().enumerate() {
                        if other.is_empty() || other_slot == slot {
                            continue;
                        }
                        let proj = dot(&e, other);
                        for (x, o) in e.iter_mut().zip(other) {
                            *x -= proj * o;
                        }
                    }
                }
                let nrm = dot(&e, &e).sqrt();
                if nrm > 1e-6 {
                    u_cols[slot] = e.iter().map(|x| x / nrm).collect();
                    break;
                }
            }
        }
    }

    for (uc, vc) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let mut best = 0;
        for (i, x) in uc.iter().enumerate() {
            if x.abs() > uc[best].abs() {
                best = i;
            }
        }
        if uc[best] < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let u = Matrix::from_fn(m, n, |r, c| u_cols[c][r]);
    let v = Matrix::from_fn(n, n, |r, c| v_cols[c][r]);
    Svd { u, s, v }
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let xa = *a;
        let yb = *b;
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}
