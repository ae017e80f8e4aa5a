//! Coupling of Jacobian singular bases.
//!
//! For a probe Jacobian `J` and a basis Jacobian `J'` with top-K singular
//! vectors `U'_K`, `V'_K`:
//!
//! * coupling matrix `A = U'_Kᵀ · J · V'_K`
//! * cross matrix `B = V'_Kᵀ · J · U'_K`
//! * miscoupling `m_K = ‖A − diag(s_K)‖_F / ‖s_K‖_p`, with `s_K` the probe's
//!   own top-K singular values, and coupling `c_K = 1 − m_K`.
//!
//! Aggregates are folded in sorted [`ConnectionId`] order, so results do not
//! depend on how records were produced.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobian::{BlockJacobian, ConnectionId};
use crate::linalg::{p_norm, svd_full, svd_truncate, Matrix, TruncatedSvd, DEGENERATE_SPECTRUM_SUM};

/// Label recorded with reports for the normalization used in `c_K`.
pub const NORMALIZATION_LABEL: &str = "p1-sum";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    Depthwise,
    TokenSelf,
    TokenFixedInput,
    TokenFixedOutput,
    CrossB,
}

impl CouplingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CouplingKind::Depthwise => "depthwise",
            CouplingKind::TokenSelf => "token_self",
            CouplingKind::TokenFixedInput => "token_fixed_input",
            CouplingKind::TokenFixedOutput => "token_fixed_output",
            CouplingKind::CrossB => "cross_b",
        }
    }
}

impl fmt::Display for CouplingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CouplingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "depthwise" => CouplingKind::Depthwise,
            "token_self" => CouplingKind::TokenSelf,
            "token_fixed_input" => CouplingKind::TokenFixedInput,
            "token_fixed_output" => CouplingKind::TokenFixedOutput,
            "cross_b" => CouplingKind::CrossB,
            other => return Err(Error::InvalidInput(format!("unknown coupling kind '{other}'"))),
        })
    }
}

/// One probe-vs-basis measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingRecord {
    pub kind: CouplingKind,
    pub probe: ConnectionId,
    pub basis: ConnectionId,
    pub k: usize,
    pub p: f64,
    /// Raw signed `A` (or `B` for [`CouplingKind::CrossB`]).
    pub a: Matrix,
    pub m_k: f64,
    pub c_k: f64,
    /// Probe spectrum too small for `m_K` to be meaningful; excluded from
    /// means. `m_k`/`c_k` are NaN in that case.
    pub degenerate: bool,
}

impl CouplingRecord {
    /// `|A|`, used for heatmap exports.
    pub fn abs_matrix(&self) -> Matrix {
        Matrix::from_fn(self.a.rows(), self.a.cols(), |r, c| self.a[(r, c)].abs())
    }
}

fn check_basis(j: &Matrix, basis: &TruncatedSvd) -> Result<()> {
    let d = basis.dim();
    if j.shape() != (d, d) || basis.v_k.rows() != d {
        return Err(Error::ShapeMismatch(format!(
            "Jacobian {:?} vs basis dimension {d}",
            j.shape()
        )));
    }
    Ok(())
}

/// `A = U_Kᵀ · J · V_K`.
pub fn coupling_matrix(j: &Matrix, basis: &TruncatedSvd) -> Result<Matrix> {
    check_basis(j, basis)?;
    basis.u_k.t_matmul(&j.matmul(&basis.v_k)?)
}

/// `B = V_Kᵀ · J · U_K`.
pub fn cross_coupling_matrix(j: &Matrix, basis: &TruncatedSvd) -> Result<Matrix> {
    check_basis(j, basis)?;
    basis.v_k.t_matmul(&j.matmul(&basis.u_k)?)
}

/// Returns `(m_K, c_K)` for a `K × K` matrix against the probe's top-K
/// singular values.
pub fn miscoupling(a: &Matrix, s_probe: &[f64], p: f64) -> Result<(f64, f64)> {
    let k = s_probe.len();
    if a.shape() != (k, k) {
        return Err(Error::ShapeMismatch(format!(
            "A is {:?}, spectrum has {k} values",
            a.shape()
        )));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidInput(format!("norm order p = {p} must be >= 1")));
    }
    let sum: f64 = s_probe.iter().map(|v| v.abs()).sum();
    if sum < DEGENERATE_SPECTRUM_SUM {
        return Err(Error::DegenerateSpectrum(sum));
    }
    let mut diff = 0.0;
    for r in 0..k {
        for c in 0..k {
            let target = if r == c { s_probe[r] } else { 0.0 };
            let e = a[(r, c)] - target;
            diff += e * e;
        }
    }
    let m = diff.sqrt() / p_norm(s_probe, p);
    Ok((m, 1.0 - m))
}

/// A Jacobian with its truncated decomposition.
#[derive(Debug, Clone)]
pub struct Analyzed {
    pub j: Matrix,
    pub svd: TruncatedSvd,
}

impl Analyzed {
    pub fn new(j: Matrix, k: usize) -> Result<Self> {
        let svd = svd_truncate(&svd_full(&j)?, k)?;
        Ok(Self { j, svd })
    }
}

/// Measures `probe` in the bases of `basis`.
pub fn measure(
    kind: CouplingKind,
    probe_id: ConnectionId,
    probe: &Analyzed,
    basis_id: ConnectionId,
    basis: &Analyzed,
    p: f64,
) -> Result<CouplingRecord> {
    let a = match kind {
        CouplingKind::CrossB => cross_coupling_matrix(&probe.j, &basis.svd)?,
        _ => coupling_matrix(&probe.j, &basis.svd)?,
    };
    let (m_k, c_k, degenerate) = match miscoupling(&a, &probe.svd.s_k, p) {
        Ok((m, c)) => (m, c, false),
        Err(Error::DegenerateSpectrum(_)) => (f64::NAN, f64::NAN, true),
        Err(e) => return Err(e),
    };
    Ok(CouplingRecord {
        kind,
        probe: probe_id,
        basis: basis_id,
        k: probe.svd.k,
        p,
        a,
        m_k,
        c_k,
        degenerate,
    })
}

/// Token-wise comparison scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenScheme {
    /// `J^l_{tt}` vs `J^{l'}_{t't'}` over all `t, t'`.
    SelfCoupling,
    /// `J^l_{t1 t2}` vs `J^{l'}_{t1 t2'}` over `t2, t2' ≥ t1`.
    FixedInput(usize),
    /// `J^l_{t1 t2}` vs `J^{l'}_{t1' t2}` over `t1, t1' ≤ t2`.
    FixedOutput(usize),
}

/// Depth-wise records with their summary.
#[derive(Debug, Clone)]
pub struct DepthwiseReport {
    pub records: Vec<CouplingRecord>,
    /// Mean `c_K` over `l ≠ l'` non-degenerate records.
    pub mean_c: Option<f64>,
}

/// Holds truncated decompositions for a set of Jacobians at a fixed `K`.
pub struct CouplingAnalyzer {
    k: usize,
    p: f64,
    analyzed: BTreeMap<ConnectionId, Analyzed>,
}

impl CouplingAnalyzer {
    /// Decomposes every Jacobian once (in parallel).
    pub fn new<'a>(jacobians: impl IntoIterator<Item = &'a BlockJacobian>, k: usize, p: f64) -> Result<Self> {
        if !(p >= 1.0) {
            return Err(Error::InvalidInput(format!("norm order p = {p} must be >= 1")));
        }
        let items: Vec<&BlockJacobian> = jacobians.into_iter().collect();
        let analyzed: Vec<(ConnectionId, Analyzed)> = items
            .par_iter()
            .map(|bj| Analyzed::new(bj.j.clone(), k).map(|a| (bj.id, a)))
            .collect::<Result<_>>()?;
        Ok(Self {
            k,
            p,
            analyzed: analyzed.into_iter().collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, id: &ConnectionId) -> Option<&Analyzed> {
        self.analyzed.get(id)
    }

    fn require(&self, ids: &[ConnectionId]) -> Result<()> {
        let missing: Vec<String> = ids
            .iter()
            .filter(|id| !self.analyzed.contains_key(id))
            .map(ToString::to_string)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompleteInput(missing))
        }
    }

    pub fn record(&self, kind: CouplingKind, probe: ConnectionId, basis: ConnectionId) -> Result<CouplingRecord> {
        self.require(&[probe, basis])?;
        measure(
            kind,
            probe,
            &self.analyzed[&probe],
            basis,
            &self.analyzed[&basis],
            self.p,
        )
    }

    /// All ordered pairs `(l, l')`, `l ≠ l'`, of `J^l_{tt}`.
    pub fn depthwise(&self, layers: &[usize], t: usize) -> Result<DepthwiseReport> {
        self.depthwise_kind(layers, t, CouplingKind::Depthwise)
    }

    /// Depth-wise pairs measured with the cross matrix `B`.
    pub fn depthwise_cross(&self, layers: &[usize], t: usize) -> Result<DepthwiseReport> {
        self.depthwise_kind(layers, t, CouplingKind::CrossB)
    }

    fn depthwise_kind(&self, layers: &[usize], t: usize, kind: CouplingKind) -> Result<DepthwiseReport> {
        let ids: Vec<ConnectionId> = layers
            .iter()
            .map(|&l| ConnectionId::diagonal(l, t))
            .collect::<Result<_>>()?;
        self.require(&ids)?;
        let mut records = Vec::new();
        for &probe in &ids {
            for &basis in &ids {
                if probe.layer != basis.layer {
                    records.push(self.record(kind, probe, basis)?);
                }
            }
        }
        let mean_c = mean_coupling(&records);
        Ok(DepthwiseReport { records, mean_c })
    }

    pub fn tokenwise(
        &self,
        scheme: TokenScheme,
        layers: (usize, usize),
        n_tokens: usize,
    ) -> Result<Vec<CouplingRecord>> {
        let (l, lb) = layers;
        let pairs: Vec<(ConnectionId, ConnectionId)> = match scheme {
            TokenScheme::SelfCoupling => {
                let mut v = Vec::new();
                for t in 0..n_tokens {
                    for tb in 0..n_tokens {
                        v.push((ConnectionId::diagonal(l, t)?, ConnectionId::diagonal(lb, tb)?));
                    }
                }
                v
            }
            TokenScheme::FixedInput(t1) => {
                if t1 >= n_tokens {
                    return Err(Error::InvalidConnection {
                        layer: l,
                        t_in: t1,
                        t_out: t1,
                        reason: format!("fixed input token beyond {n_tokens} tokens"),
                    });
                }
                let mut v = Vec::new();
                for t2 in t1..n_tokens {
                    for t2b in t1..n_tokens {
                        v.push((ConnectionId::new(l, t1, t2)?, ConnectionId::new(lb, t1, t2b)?));
                    }
                }
                v
            }
            TokenScheme::FixedOutput(t2) => {
                if t2 >= n_tokens {
                    return Err(Error::InvalidConnection {
                        layer: l,
                        t_in: t2,
                        t_out: t2,
                        reason: format!("fixed output token beyond {n_tokens} tokens"),
                    });
                }
                let mut v = Vec::new();
                for t1 in 0..=t2 {
                    for t1b in 0..=t2 {
                        v.push((ConnectionId::new(l, t1, t2)?, ConnectionId::new(lb, t1b, t2)?));
                    }
                }
                v
            }
        };
        let kind = match scheme {
            TokenScheme::SelfCoupling => CouplingKind::TokenSelf,
            TokenScheme::FixedInput(_) => CouplingKind::TokenFixedInput,
            TokenScheme::FixedOutput(_) => CouplingKind::TokenFixedOutput,
        };
        let mut needed: Vec<ConnectionId> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        needed.sort();
        needed.dedup();
        self.require(&needed)?;
        pairs
            .into_iter()
            .map(|(probe, basis)| self.record(kind, probe, basis))
            .collect()
    }
}

/// Mean `c_K` over non-degenerate records whose probe and basis differ,
/// folded in sorted connection order.
pub fn mean_coupling(records: &[CouplingRecord]) -> Option<f64> {
    let mut vals: Vec<(ConnectionId, ConnectionId, f64)> = records
        .iter()
        .filter(|r| !r.degenerate && r.probe != r.basis)
        .map(|r| (r.probe, r.basis, r.c_k))
        .collect();
    if vals.is_empty() {
        return None;
    }
    vals.sort_by_key(|a| (a.0, a.1));
    Some(vals.iter().map(|v| v.2).sum::<f64>() / vals.len() as f64)
}

/// `L × L` matrix of mean `c_K` per `(probe layer, basis layer)`; the
/// diagonal is 1 by convention.
pub fn adjacency_summary(records: &[CouplingRecord], n_layers: usize) -> Result<Matrix> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no coupling records".into()));
    }
    let mut sorted: Vec<&CouplingRecord> = records.iter().filter(|r| !r.degenerate).collect();
    sorted.sort_by_key(|a| (a.probe, a.basis));
    let mut sums = vec![(0.0, 0usize); n_layers * n_layers];
    for r in sorted {
        let (l, lb) = (r.probe.layer, r.basis.layer);
        if l == 0 || lb == 0 || l > n_layers || lb > n_layers {
            return Err(Error::InvalidInput(format!(
                "record layer pair ({l}, {lb}) outside 1..={n_layers}"
            )));
        }
        let e = &mut sums[(l - 1) * n_layers + (lb - 1)];
        e.0 += r.c_k;
        e.1 += 1;
    }
    let mut missing = Vec::new();
    let mut out = Matrix::identity(n_layers);
    for l in 0..n_layers {
        for lb in 0..n_layers {
            if l == lb {
                continue;
            }
            let (s, c) = sums[l * n_layers + lb];
            if c == 0 {
                missing.push(format!("layers ({}, {})", l + 1, lb + 1));
            } else {
                out[(l, lb)] = s / c as f64;
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteInput(missing));
    }
    Ok(out)
}

/// Mean of adjacency entries whose layer distance satisfies `pred`.
pub fn adjacency_band_mean(adj: &Matrix, pred: impl Fn(usize) -> bool) -> Option<f64> {
    let n = adj.rows();
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && pred(i.abs_diff(j)))
        .map(|(i, j)| adj[(i, j)])
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trunc(j: &Matrix, k: usize) -> TruncatedSvd {
        svd_truncate(&svd_full(j).unwrap(), k).unwrap()
    }

    #[test]
    fn self_basis_diagonalizes() {
        let j = Matrix::from_fn(5, 5, |r, c| ((r * 7 + c * 3) % 11) as f64 - 5.0);
        let t = trunc(&j, 3);
        let a = coupling_matrix(&j, &t).unwrap();
        let diff = a.sub(&Matrix::from_diag(&t.s_k)).unwrap().frobenius_norm();
        assert!(diff < 1e-10);
    }

    #[test]
    fn hand_computed_basis_mismatch() {
        let j = Matrix::from_diag(&[4.0, 3.0, 2.0, 1.0]);
        let basis = trunc(&Matrix::from_diag(&[1.0, 2.0, 4.0, 3.0]), 2);
        let a = coupling_matrix(&j, &basis).unwrap();
        assert_eq!(a, Matrix::from_diag(&[2.0, 1.0]));
        let (m, c) = miscoupling(&a, &[4.0, 3.0], 1.0).unwrap();
        assert!((m - 8f64.sqrt() / 7.0).abs() < 1e-12);
        assert!((c - (1.0 - 8f64.sqrt() / 7.0)).abs() < 1e-12);
        assert!((m - 0.4041).abs() < 1e-4);
    }

    #[test]
    fn perfect_coupling_is_zero_miscoupling() {
        let a = Matrix::from_diag(&[3.0, 1.0]);
        assert_eq!(miscoupling(&a, &[3.0, 1.0], 1.0).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn degenerate_and_shape_errors() {
        let a = Matrix::zeros(2, 2);
        assert!(matches!(
            miscoupling(&a, &[0.0, 0.0], 1.0),
            Err(Error::DegenerateSpectrum(_))
        ));
        assert!(matches!(miscoupling(&a, &[1.0], 1.0), Err(Error::ShapeMismatch(_))));
        let basis = trunc(&Matrix::identity(3), 2);
        assert!(matches!(
            coupling_matrix(&Matrix::identity(4), &basis),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn cross_matrix_on_symmetric_psd_equals_a() {
        let q = Matrix::from_fn(3, 3, |r, c| [[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 4.0]][r][c]);
        let t = trunc(&q, 2);
        let a = coupling_matrix(&q, &t).unwrap();
        let b = cross_coupling_matrix(&q, &t).unwrap();
        assert!(a.sub(&b).unwrap().frobenius_norm() < 1e-12);
        assert!(b.sub(&Matrix::from_diag(&t.s_k)).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn cross_matrix_one_by_one() {
        // basis with u = +1, v = -1 (J' = -1)
        let basis = trunc(&Matrix::from_diag(&[-1.0]), 1);
        assert_eq!(basis.u_k[(0, 0)], 1.0);
        assert_eq!(basis.v_k[(0, 0)], -1.0);
        let j = Matrix::from_diag(&[1.0]);
        assert_eq!(coupling_matrix(&j, &basis).unwrap()[(0, 0)], -1.0);
        assert_eq!(cross_coupling_matrix(&j, &basis).unwrap()[(0, 0)], -1.0);
    }

    #[test]
    fn adjacency_errors_and_reproduction() {
        assert!(matches!(adjacency_summary(&[], 2), Err(Error::InsufficientData(_))));
        let ids = [
            ConnectionId::diagonal(1, 0).unwrap(),
            ConnectionId::diagonal(2, 0).unwrap(),
        ];
        let mk = |p: ConnectionId, b: ConnectionId, c: f64| CouplingRecord {
            kind: CouplingKind::Depthwise,
            probe: p,
            basis: b,
            k: 1,
            p: 1.0,
            a: Matrix::zeros(1, 1),
            m_k: 1.0 - c,
            c_k: c,
            degenerate: false,
        };
        let adj = adjacency_summary(&[mk(ids[0], ids[1], 0.3), mk(ids[1], ids[0], 0.7)], 2).unwrap();
        assert_eq!(adj.data(), &[1.0, 0.3, 0.7, 1.0]);
        assert!(matches!(
            adjacency_summary(&[mk(ids[0], ids[1], 0.3)], 2),
            Err(Error::IncompleteInput(_))
        ));
    }
}
