//! Reverse-mode gradients of the next-token loss through the exact block.
//!
//! The forward pass mirrors `coupling_core::model` but keeps every
//! intermediate needed by the backward pass, and supports per-block skip
//! scales for stochastic depth: block `l` contributes `keep_l · f^l`, and a
//! zero scale drops the block entirely.

use coupling_core::linalg::gemm;
use coupling_core::model::forward::RopeTable;
use coupling_core::model::{LayerWeights, Model, PosEncoding, Token};
use coupling_core::Matrix;

use crate::error::Result;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

struct Norm {
    xhat: Matrix,
    rstd: Vec<f64>,
}

fn ln_forward(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> (Norm, Matrix) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[(r, j)] = h;
            y[(r, j)] = h * gain[j] + bias[j];
        }
    }
    (Norm { xhat, rstd }, y)
}

/// Returns `dx` and accumulates gain/bias gradients.
fn ln_backward(dy: &Matrix, norm: &Norm, gain: &[f64], dgain: &mut [f64], dbias: &mut [f64]) -> Matrix {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let (g, h) = (dy.row(r), norm.xhat.row(r));
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_h = 0.0;
        for j in 0..d {
            dgain[j] += g[j] * h[j];
            dbias[j] += g[j];
            dxhat[j] = g[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_h += dxhat[j] * h[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_h /= d as f64;
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = norm.rstd[r] * (dxhat[j] - mean_dxhat - h[j] * mean_dxhat_h);
        }
    }
    dx
}

fn mul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows(), b.cols());
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    c
}

/// `c += aᵀ · b`
fn acc_t_mul(a: &Matrix, b: &Matrix, c: &mut Matrix) {
    gemm(1.0, a, true, b, false, 1.0, c);
}

/// `a · bᵀ`
fn mul_t(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows(), b.rows());
    gemm(1.0, a, false, b, true, 0.0, &mut c);
    c
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn acc_colsum(m: &Matrix, out: &mut [f64]) {
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
}

struct BlockCache {
    norm1: Norm,
    y: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per head, row-major `n × n` attention weights (zero above diagonal).
    probs: Vec<Vec<f64>>,
    hcat: Matrix,
    norm2: Norm,
    g: Matrix,
    a_pre: Matrix,
    a_act: Matrix,
}

struct LayerTape {
    keep: f64,
    block: Option<BlockCache>,
    final_norm: Option<Norm>,
}

struct Tape {
    layers: Vec<LayerTape>,
    out: Matrix,
}

fn attention_forward(model: &Model, y: &Matrix, lw: &LayerWeights) -> (Matrix, Matrix, Matrix, Vec<Vec<f64>>, Matrix) {
    let cfg = &model.config;
    let (n, d) = y.shape();
    let hd = cfg.head_dim();
    let mut q = mul(y, &lw.w_q);
    let mut k = mul(y, &lw.w_k);
    let v = mul(y, &lw.w_v);
    if cfg.pos_encoding == PosEncoding::Rope {
        let table = RopeTable::new(n, hd);
        table.apply(q.data_mut(), d, hd, false);
        table.apply(k.data_mut(), d, hd, false);
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut hcat = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let c0 = h * hd;
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            let qi = &q.row(i)[c0..c0 + hd];
            let row = &mut p[i * n..i * n + i + 1];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[c0..c0 + hd];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*s);
            }
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for s in row.iter_mut() {
                *s /= total;
            }
            let out = &mut hcat.row_mut(i)[c0..c0 + hd];
            for (j, &w) in row.iter().enumerate() {
                for (o, vv) in out.iter_mut().zip(&v.row(j)[c0..c0 + hd]) {
                    *o += w * vv;
                }
            }
        }
        probs.push(p);
    }
    (q, k, v, probs, hcat)
}

fn gelu_and_slope(x: f64) -> (f64, f64) {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let slope = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    (value, slope)
}

fn forward(model: &Model, tokens: &[Token], keep: &[f64]) -> Result<Tape> {
    let cfg = &model.config;
    let eps = cfg.ln_epsilon;
    let mut x = model.embed(tokens)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, lw) in model.weights.layers.iter().enumerate() {
        let keep_l = keep[l];
        let mut pre = x.clone();
        let block = if keep_l != 0.0 {
            let (norm1, y) = ln_forward(&x, &lw.ln1_gain, &lw.ln1_bias, eps);
            let (q, k, v, probs, hcat) = attention_forward(model, &y, lw);
            let h = mul(&hcat, &lw.w_o);
            let mut z = x.clone();
            z.add_assign(&h);
            let (norm2, g) = ln_forward(&z, &lw.ln2_gain, &lw.ln2_bias, eps);
            let mut a_pre = mul(&g, &lw.w_ff1);
            add_bias(&mut a_pre, &lw.b_ff1);
            let mut a_act = a_pre.clone();
            for v in a_act.data_mut() {
                *v = gelu_and_slope(*v).0;
            }
            let mut ff = mul(&a_act, &lw.w_ff2);
            add_bias(&mut ff, &lw.b_ff2);
            for ((p, hv), fv) in pre.data_mut().iter_mut().zip(h.data()).zip(ff.data()) {
                *p += keep_l * (hv + fv);
            }
            Some(BlockCache {
                norm1,
                y,
                q,
                k,
                v,
                probs,
                hcat,
                norm2,
                g,
                a_pre,
                a_act,
            })
        } else {
            None
        };
        let final_norm = if model.applies_final_ln(l) {
            let (norm, out) = ln_forward(&pre, &model.weights.final_ln_gain, &model.weights.final_ln_bias, eps);
            x = out;
            Some(norm)
        } else {
            x = pre;
            None
        };
        layers.push(LayerTape {
            keep: keep_l,
            block,
            final_norm,
        });
    }
    Ok(Tape { layers, out: x })
}

/// Sum of next-token cross-entropies over positions `0 … n−2`, with the
/// gradient of the logits.
fn cross_entropy(logits: &Matrix, tokens: &[Token]) -> (f64, Matrix) {
    let (n, v) = logits.shape();
    let mut dlogits = Matrix::zeros(n, v);
    let mut loss = 0.0;
    for t in 0..n - 1 {
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + total.ln();
        let target = tokens[t + 1] as usize;
        loss += log_z - row[target];
        let d = dlogits.row_mut(t);
        for (j, z) in row.iter().enumerate() {
            d[j] = (z - log_z).exp();
        }
        d[target] -= 1.0;
    }
    (loss, dlogits)
}

/// Summed next-token loss of one sequence (no gradient).
pub fn sequence_loss(model: &Model, tokens: &[Token], keep: &[f64]) -> Result<f64> {
    let tape = forward(model, tokens, keep)?;
    let logits = mul_t(&tape.out, &model.weights.unembedding);
    Ok(cross_entropy(&logits, tokens).0)
}

/// Adds `weight · ∇(summed loss)` into `grads` and returns the summed loss
/// of the sequence.
pub fn accumulate_gradients(
    model: &Model,
    tokens: &[Token],
    keep: &[f64],
    weight: f64,
    grads: &mut coupling_core::model::ModelWeights,
) -> Result<f64> {
    let cfg = &model.config;
    let (n, d) = (tokens.len(), cfg.d_model);
    let hd = cfg.head_dim();
    let tape = forward(model, tokens, keep)?;
    let logits = mul_t(&tape.out, &model.weights.unembedding);
    let (loss, mut dlogits) = cross_entropy(&logits, tokens);
    for v in dlogits.data_mut() {
        *v *= weight;
    }
    acc_t_mul(&dlogits, &tape.out, &mut grads.unembedding);
    let mut dx = mul(&dlogits, &model.weights.unembedding);

    let rope = (cfg.pos_encoding == PosEncoding::Rope).then(|| RopeTable::new(n, hd));
    let scale = 1.0 / (hd as f64).sqrt();

    for (l, lt) in tape.layers.iter().enumerate().rev() {
        let lw = &model.weights.layers[l];
        let gl = &mut grads.layers[l];
        // dx currently holds the gradient of the block output
        let dpre = match &lt.final_norm {
            Some(norm) => ln_backward(
                &dx,
                norm,
                &model.weights.final_ln_gain,
                &mut grads.final_ln_gain,
                &mut grads.final_ln_bias,
            ),
            None => dx,
        };
        let Some(c) = &lt.block else {
            dx = dpre;
            continue;
        };
        let mut df = dpre.clone();
        for v in df.data_mut() {
            *v *= lt.keep;
        }
        let mut dx_next = dpre;

        // FFN
        acc_t_mul(&c.a_act, &df, &mut gl.w_ff2);
        acc_colsum(&df, &mut gl.b_ff2);
        let mut da = mul_t(&df, &lw.w_ff2);
        for (dv, &pre) in da.data_mut().iter_mut().zip(c.a_pre.data()) {
            *dv *= gelu_and_slope(pre).1;
        }
        acc_t_mul(&c.g, &da, &mut gl.w_ff1);
        acc_colsum(&da, &mut gl.b_ff1);
        let dg = mul_t(&da, &lw.w_ff1);
        let dz = ln_backward(&dg, &c.norm2, &lw.ln2_gain, &mut gl.ln2_gain, &mut gl.ln2_bias);
        dx_next.add_assign(&dz);
        let mut dh = df;
        dh.add_assign(&dz);

        // attention output projection
        acc_t_mul(&c.hcat, &dh, &mut gl.w_o);
        let dhcat = mul_t(&dh, &lw.w_o);

        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut dp = vec![0.0; n];
        for (h, p) in c.probs.iter().enumerate() {
            let c0 = h * hd;
            for i in 0..n {
                let prow = &p[i * n..i * n + i + 1];
                let doi = &dhcat.row(i)[c0..c0 + hd];
                let mut dot_pd = 0.0;
                for j in 0..=i {
                    let vj = &c.v.row(j)[c0..c0 + hd];
                    dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot_pd += prow[j] * dp[j];
                    for (dvv, o) in dv.row_mut(j)[c0..c0 + hd].iter_mut().zip(doi) {
                        *dvv += prow[j] * o;
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot_pd) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..hd {
                        dq[(i, c0 + t)] += ds * c.k[(j, c0 + t)];
                        dk[(j, c0 + t)] += ds * c.q[(i, c0 + t)];
                    }
                }
            }
        }
        if let Some(table) = &rope {
            table.apply(dq.data_mut(), d, hd, true);
            table.apply(dk.data_mut(), d, hd, true);
        }
        acc_t_mul(&c.y, &dq, &mut gl.w_q);
        acc_t_mul(&c.y, &dk, &mut gl.w_k);
        acc_t_mul(&c.y, &dv, &mut gl.w_v);
        let mut dy = mul_t(&dq, &lw.w_q);
        gemm(1.0, &dk, false, &lw.w_k, true, 1.0, &mut dy);
        gemm(1.0, &dv, false, &lw.w_v, true, 1.0, &mut dy);
        let dx1 = ln_backward(&dy, &c.norm1, &lw.ln1_gain, &mut gl.ln1_gain, &mut gl.ln1_bias);
        dx_next.add_assign(&dx1);
        dx = dx_next;
    }

    for (t, &tok) in tokens.iter().enumerate() {
        for (g, v) in grads.token_embedding.row_mut(tok as usize).iter_mut().zip(dx.row(t)) {
            *g += v;
        }
    }
    Ok(loss)
}
