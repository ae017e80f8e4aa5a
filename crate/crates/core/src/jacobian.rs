//! Per-block, per-token-pair Jacobians of the skip-free block map.
//!
//! `J^l_{t1 t2} = ∂ f^l(X^{l-1})_{t2} / ∂ x_{t1}^{l-1}`, a `d_model × d_model`
//! matrix. Column `j` comes from one dual-number pass of the block with the
//! tangent seeded on coordinate `j` of row `t1`; the tangents of every
//! output row `t2 ≥ t1` are read off the same pass. Causality makes
//! `J_{t1 t2} = 0` for `t1 > t2` with no computation at all.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Scalar};
use crate::error::{Error, Result};
use crate::linalg::{svd_full, svd_truncate, Matrix, TruncatedSvd};
use crate::model::forward::block_parts;
use crate::model::{write_bundle, HiddenTrace, Model, TensorSource};

/// Connection `(l, t1, t2)`: block `l` (1-based), input token `t1`, output
/// token `t2` (0-based), with `t1 ≤ t2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConnectionId {
    pub layer: usize,
    pub t_in: usize,
    pub t_out: usize,
}

impl ConnectionId {
    pub fn new(layer: usize, t_in: usize, t_out: usize) -> Result<Self> {
        if layer == 0 {
            return Err(Error::InvalidConnection {
                layer,
                t_in,
                t_out,
                reason: "layers are numbered from 1".into(),
            });
        }
        if t_in > t_out {
            return Err(Error::InvalidConnection {
                layer,
                t_in,
                t_out,
                reason: "t_in > t_out is a causal zero".into(),
            });
        }
        Ok(Self { layer, t_in, t_out })
    }

    /// `J^l_{tt}`
    pub fn diagonal(layer: usize, t: usize) -> Result<Self> {
        Self::new(layer, t, t)
    }
}

impl fmt::Display for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "J_l{}_t{}_{}", self.layer, self.t_in, self.t_out)
    }
}

/// Identifies where a Jacobian was evaluated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalContext {
    pub prompt_id: String,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockJacobian {
    pub id: ConnectionId,
    pub j: Matrix,
    pub context: EvalContext,
}

/// Which map is differentiated for the final block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalLayerMode {
    /// `f^L = h + FFN(g)`, ignoring the final layer norm.
    #[default]
    ExcludeFinalLn,
    /// `LN_final(X + f^L) − X`, so that `I + J` is the full block
    /// linearization including the final norm.
    IncludeFinalLn,
}

pub struct JacobianEngine<'a> {
    model: &'a Model,
    final_mode: FinalLayerMode,
    context: EvalContext,
}

impl<'a> JacobianEngine<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self {
            model,
            final_mode: FinalLayerMode::default(),
            context: EvalContext::default(),
        }
    }

    pub fn with_final_mode(mut self, mode: FinalLayerMode) -> Self {
        self.final_mode = mode;
        self
    }

    pub fn with_context(mut self, context: EvalContext) -> Self {
        self.context = context;
        self
    }

    fn check(&self, trace: &HiddenTrace, layer: usize, t_in: usize) -> Result<()> {
        let n = trace.n_tokens();
        let l_max = self.model.config.n_layers;
        if layer == 0 || layer > l_max || trace.n_layers() != l_max {
            return Err(Error::InvalidConnection {
                layer,
                t_in,
                t_out: t_in,
                reason: format!("layer must be in 1..={l_max} for this trace"),
            });
        }
        if t_in >= n {
            return Err(Error::InvalidConnection {
                layer,
                t_in,
                t_out: t_in,
                reason: format!("prompt has {n} tokens"),
            });
        }
        if trace.xs[0].cols() != self.model.config.d_model {
            return Err(Error::ShapeMismatch("trace width differs from d_model".into()));
        }
        Ok(())
    }

    /// The differentiated map on generic scalars: `f` or, for the final
    /// block in [`FinalLayerMode::IncludeFinalLn`], `LN_final(X + f) − X`.
    fn map<T: Scalar>(&self, x: &[T], layer: usize) -> Vec<T> {
        let block = layer - 1;
        let parts = block_parts(x, &self.model.config, &self.model.weights.layers[block]);
        if self.final_mode == FinalLayerMode::IncludeFinalLn && self.model.applies_final_ln(block) {
            let normed = self.model.final_norm(&parts.pre);
            normed.iter().zip(x).map(|(&a, &b)| a - b).collect()
        } else {
            parts.f
        }
    }

    /// All `J^l_{t1 t2}` for `t2 ≥ t1`, from `d_model` forward-mode passes.
    pub fn block_jacobian_row(&self, trace: &HiddenTrace, layer: usize, t_in: usize) -> Result<Vec<BlockJacobian>> {
        self.check(trace, layer, t_in)?;
        let d = self.model.config.d_model;
        let n = trace.n_tokens();
        let x = &trace.xs[layer - 1];

        // columns[j][t2 - t_in] holds column j of J_{t_in, t2}
        let columns: Vec<Vec<Vec<f64>>> = (0..d)
            .into_par_iter()
            .map(|j| {
                let mut input: Vec<Dual> = x.data().iter().map(|&v| Dual::constant(v)).collect();
                input[t_in * d + j].eps = 1.0;
                let out = self.map(&input, layer);
                (t_in..n)
                    .map(|t2| out[t2 * d..(t2 + 1) * d].iter().map(|v| v.eps).collect())
                    .collect()
            })
            .collect();

        let mut result = Vec::with_capacity(n - t_in);
        for (offset, t_out) in (t_in..n).enumerate() {
            let mut jm = Matrix::zeros(d, d);
            for (j, col) in columns.iter().enumerate() {
                for (k, &v) in col[offset].iter().enumerate() {
                    jm[(k, j)] = v;
                }
            }
            if !jm.is_finite() {
                return Err(Error::NumericalOverflow { layer });
            }
            result.push(BlockJacobian {
                id: ConnectionId { layer, t_in, t_out },
                j: jm,
                context: self.context.clone(),
            });
        }
        Ok(result)
    }

    /// A single connection. `t_in > t_out` yields the exact zero matrix.
    pub fn block_jacobian(&self, trace: &HiddenTrace, layer: usize, t_in: usize, t_out: usize) -> Result<Matrix> {
        self.check(trace, layer, t_in)?;
        if t_out >= trace.n_tokens() {
            return Err(Error::InvalidConnection {
                layer,
                t_in,
                t_out,
                reason: "t_out beyond prompt".into(),
            });
        }
        let d = self.model.config.d_model;
        if t_in > t_out {
            return Ok(Matrix::zeros(d, d));
        }
        // Rows after t_out cannot influence row t_out; drop them.
        let x = &trace.xs[layer - 1];
        let rows = t_out + 1;
        let cols: Vec<Vec<f64>> = (0..d)
            .into_par_iter()
            .map(|j| {
                let mut input: Vec<Dual> = x.data()[..rows * d].iter().map(|&v| Dual::constant(v)).collect();
                input[t_in * d + j].eps = 1.0;
                let out = self.map(&input, layer);
                out[t_out * d..(t_out + 1) * d].iter().map(|v| v.eps).collect()
            })
            .collect();
        let jm = Matrix::from_fn(d, d, |k, j| cols[j][k]);
        if !jm.is_finite() {
            return Err(Error::NumericalOverflow { layer });
        }
        Ok(jm)
    }

    /// Every `J^l_{t1 t2}` with `t1 ≤ t2` for the given layers, keyed by
    /// connection.
    pub fn all_connections(
        &self,
        trace: &HiddenTrace,
        layers: &[usize],
    ) -> Result<BTreeMap<ConnectionId, BlockJacobian>> {
        let mut out = BTreeMap::new();
        for &layer in layers {
            for t_in in 0..trace.n_tokens() {
                for bj in self.block_jacobian_row(trace, layer, t_in)? {
                    out.insert(bj.id, bj);
                }
            }
        }
        Ok(out)
    }

    /// `J^l_{tt}` for each listed layer.
    pub fn diagonal_jacobians(
        &self,
        trace: &HiddenTrace,
        layers: &[usize],
        t: usize,
    ) -> Result<BTreeMap<ConnectionId, BlockJacobian>> {
        let mut out = BTreeMap::new();
        for &layer in layers {
            let j = self.block_jacobian(trace, layer, t, t)?;
            let id = ConnectionId {
                layer,
                t_in: t,
                t_out: t,
            };
            out.insert(
                id,
                BlockJacobian {
                    id,
                    j,
                    context: self.context.clone(),
                },
            );
        }
        Ok(out)
    }

    /// Central-difference Jacobian: `(f(X + hE) − f(X − hE)) / 2h` with `E`
    /// perturbing one coordinate of row `t_in` at a time. Test oracle.
    pub fn fd_block_jacobian(
        &self,
        trace: &HiddenTrace,
        layer: usize,
        t_in: usize,
        t_out: usize,
        step: f64,
    ) -> Result<Matrix> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidInput(format!("finite-difference step {step}")));
        }
        self.check(trace, layer, t_in)?;
        if t_out >= trace.n_tokens() {
            return Err(Error::InvalidConnection {
                layer,
                t_in,
                t_out,
                reason: "t_out beyond prompt".into(),
            });
        }
        let d = self.model.config.d_model;
        let base = trace.xs[layer - 1].data();
        let mut jm = Matrix::zeros(d, d);
        for j in 0..d {
            let mut plus = base.to_vec();
            let mut minus = base.to_vec();
            plus[t_in * d + j] += step;
            minus[t_in * d + j] -= step;
            let fp = self.map::<f64>(&plus, layer);
            let fm = self.map::<f64>(&minus, layer);
            for k in 0..d {
                jm[(k, j)] = (fp[t_out * d + k] - fm[t_out * d + k]) / (2.0 * step);
            }
        }
        Ok(jm)
    }

    /// Evaluates the differentiated map at an arbitrary block input.
    pub fn eval_map(&self, x: &Matrix, layer: usize) -> Result<Matrix> {
        if layer == 0 || layer > self.model.config.n_layers || x.cols() != self.model.config.d_model {
            return Err(Error::InvalidInput(format!("layer {layer} / input {:?}", x.shape())));
        }
        Matrix::new(x.rows(), x.cols(), self.map::<f64>(x.data(), layer))
    }
}

/// Truncated SVD of a Jacobian.
pub fn jacobian_svd(j: &Matrix, k: usize) -> Result<TruncatedSvd> {
    svd_truncate(&svd_full(j)?, k)
}

/// Writes Jacobians as a tensor bundle, one tensor per connection named
/// `J_l{l}_t{t1}_{t2}`.
pub fn dump_jacobians<'a>(path: &Path, jacobians: impl IntoIterator<Item = &'a BlockJacobian>) -> Result<()> {
    let jacobians: Vec<&BlockJacobian> = jacobians.into_iter().collect();
    let tensors: Vec<TensorSource<'_>> = jacobians
        .iter()
        .map(|bj| TensorSource {
            name: bj.id.to_string(),
            shape: vec![bj.j.rows(), bj.j.cols()],
            data: bj.j.data(),
        })
        .collect();
    let mut meta = BTreeMap::new();
    if let Some(first) = jacobians.first() {
        meta.insert("prompt_id".to_string(), first.context.prompt_id.clone().into());
        meta.insert("checkpoint_id".to_string(), first.context.checkpoint_id.clone().into());
    }
    write_bundle(path, None, meta, &tensors)
}
