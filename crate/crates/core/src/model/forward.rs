//! The transformer block, written once over [`Scalar`].
//!
//! Per block, with `X` the `n × d` input:
//!
//! ```text
//! h = MHA(LN₁(X))
//! g = LN₂(X + h)
//! f = h + FFN(g)
//! F = X + f                  (non-final blocks, or final_ln = false)
//! F = LN_final(X + f)        (final block when final_ln = true)
//! ```
//!
//! `FFN(g) = GeLU(g·W₁ + b₁)·W₂ + b₂` with the tanh GeLU. Attention is causal,
//! scaled by `1/√(d_model/n_heads)` per head, with optional RoPE on queries
//! and keys.

use crate::dual::Scalar;
use crate::linalg::Matrix;
use crate::model::config::{ModelConfig, PosEncoding, ROPE_BASE};
use crate::model::weights::LayerWeights;

/// `√(2/π)`
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = (x + x * x * x.scale(GELU_CUBIC)).scale(GELU_SQRT_2_OVER_PI);
    (x * (T::from_f64(1.0) + inner.tanh())).scale(0.5)
}

/// Row-wise layer norm with population variance.
pub fn layer_norm<T: Scalar>(x: &[T], d: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let inv_d = 1.0 / d as f64;
    for row in x.chunks_exact(d) {
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        let mean = mean.scale(inv_d);
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        let rstd = T::from_f64(1.0) / (var.scale(inv_d) + T::from_f64(eps)).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out.push(((v - mean) * rstd).scale(gain[j]) + T::from_f64(bias[j]));
        }
    }
    out
}

/// `x · W (+ b)` for row-major `x` of width `w.rows()`.
pub fn linear<T: Scalar>(x: &[T], w: &Matrix, bias: Option<&[f64]>) -> Vec<T> {
    let (din, dout) = w.shape();
    let n = x.len() / din;
    let mut out = Vec::with_capacity(n * dout);
    for row in x.chunks_exact(din) {
        let start = out.len();
        match bias {
            Some(b) => out.extend(b.iter().map(|&v| T::from_f64(v))),
            None => out.resize(start + dout, T::zero()),
        }
        let acc = &mut out[start..];
        for (j, &xv) in row.iter().enumerate() {
            for (o, &wv) in acc.iter_mut().zip(w.row(j)) {
                *o += xv.scale(wv);
            }
        }
    }
    out
}

/// Cosine/sine tables for RoPE, indexed `[pos][pair]`.
pub struct RopeTable {
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(n: usize, head_dim: usize) -> Self {
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(n * pairs);
        let mut sin = Vec::with_capacity(n * pairs);
        for pos in 0..n {
            for i in 0..pairs {
                let theta = pos as f64 * ROPE_BASE.powf(-(2.0 * i as f64) / head_dim as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        Self { pairs, cos, sin }
    }

    #[inline]
    pub fn cos_sin(&self, pos: usize, pair: usize) -> (f64, f64) {
        let idx = pos * self.pairs + pair;
        (self.cos[idx], self.sin[idx])
    }

    /// Rotates every head of an `n × d_model` query/key matrix in place.
    /// With `inverse`, applies the transposed rotation.
    pub fn apply<T: Scalar>(&self, x: &mut [T], d_model: usize, head_dim: usize, inverse: bool) {
        for (pos, row) in x.chunks_exact_mut(d_model).enumerate() {
            for head in row.chunks_exact_mut(head_dim) {
                for i in 0..self.pairs {
                    let (c, s) = self.cos_sin(pos, i);
                    let s = if inverse { -s } else { s };
                    let a = head[2 * i];
                    let b = head[2 * i + 1];
                    head[2 * i] = a.scale(c) - b.scale(s);
                    head[2 * i + 1] = a.scale(s) + b.scale(c);
                }
            }
        }
    }
}

/// Standard sinusoidal position vector: `sin` on even, `cos` on odd
/// coordinates, frequency `10000^(-2i/d)`.
pub fn sinusoid(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = j / 2;
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Causal multi-head attention applied to already-normalized rows `y`.
pub fn attention<T: Scalar>(y: &[T], cfg: &ModelConfig, lw: &LayerWeights) -> Vec<T> {
    let d = cfg.d_model;
    let n = y.len() / d;
    let hd = cfg.head_dim();
    let mut q = linear(y, &lw.w_q, None);
    let mut k = linear(y, &lw.w_k, None);
    let v = linear(y, &lw.w_v, None);
    if cfg.pos_encoding == PosEncoding::Rope {
        let table = RopeTable::new(n, hd);
        table.apply(&mut q, d, hd, false);
        table.apply(&mut k, d, hd, false);
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut o = vec![T::zero(); n * d];
    let mut scores = vec![T::zero(); n];
    for h in 0..cfg.n_heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let qi = &q[i * d..][cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k[j * d..][cols.clone()];
                let mut s = T::zero();
                for (&a, &b) in qi.iter().zip(kj) {
                    s += a * b;
                }
                let s = s.scale(scale);
                max = max.max(s.value());
                scores[j] = s;
            }
            // softmax is shift invariant, so subtracting a constant keeps
            // the tangent exact
            let shift = T::from_f64(max);
            let mut total = T::zero();
            for s in scores[..=i].iter_mut() {
                *s = (*s - shift).exp();
                total += *s;
            }
            let oi = &mut o[i * d..][cols.clone()];
            for j in 0..=i {
                let p = scores[j] / total;
                let vj = &v[j * d..][cols.clone()];
                for (acc, &vv) in oi.iter_mut().zip(vj) {
                    *acc += p * vv;
                }
            }
        }
    }
    linear(&o, &lw.w_o, None)
}

/// Output of the generic block: the skip-free map `f` and `X + f`.
pub struct BlockParts<T> {
    pub f: Vec<T>,
    pub pre: Vec<T>,
}

/// Evaluates `f = h + FFN(g)` and `X + f` for one block.
pub fn block_parts<T: Scalar>(x: &[T], cfg: &ModelConfig, lw: &LayerWeights) -> BlockParts<T> {
    let d = cfg.d_model;
    let eps = cfg.ln_epsilon;
    let y = layer_norm(x, d, &lw.ln1_gain, &lw.ln1_bias, eps);
    let h = attention(&y, cfg, lw);
    let z: Vec<T> = x.iter().zip(&h).map(|(&a, &b)| a + b).collect();
    let g = layer_norm(&z, d, &lw.ln2_gain, &lw.ln2_bias, eps);
    let mut a = linear(&g, &lw.w_ff1, Some(&lw.b_ff1));
    for v in a.iter_mut() {
        *v = gelu(*v);
    }
    let ffn = linear(&a, &lw.w_ff2, Some(&lw.b_ff2));
    let f: Vec<T> = h.iter().zip(&ffn).map(|(&a, &b)| a + b).collect();
    let pre: Vec<T> = x.iter().zip(&f).map(|(&a, &b)| a + b).collect();
    BlockParts { f, pre }
}
