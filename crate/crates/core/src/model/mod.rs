//! Minimal decoder-only transformer with full hidden-state capture.

mod bundle;
mod checkpoint;
mod config;
pub mod forward;
mod weights;

pub use bundle::{
    read_bundle, write_bundle, BundleManifest, DType, LoadedTensor, TensorEntry, TensorSource, BUNDLE_ALIGN,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, PosEncoding, DEFAULT_LN_EPSILON, ROPE_BASE};
pub use weights::{tensor_layout, LayerWeights, ModelWeights};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use forward::{block_parts, layer_norm, sinusoid};

/// Token id.
pub type Token = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

/// Result of one block evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    /// Skip-free block map `f = h + FFN(g)`.
    pub f_out: Matrix,
    /// `X + f`, or `LN_final(X + f)` for the final block.
    pub block_out: Matrix,
}

/// Hidden states `X⁰ … X^L` and block maps `f¹ … f^L` of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub tokens: Vec<Token>,
    /// `L + 1` matrices, each `n × d_model`.
    pub xs: Vec<Matrix>,
    /// `fs[l-1] = f^l(X^{l-1})`.
    pub fs: Vec<Matrix>,
}

impl HiddenTrace {
    pub fn n_tokens(&self) -> usize {
        self.xs[0].rows()
    }

    pub fn n_layers(&self) -> usize {
        self.xs.len() - 1
    }

    /// `x_token^layer`
    pub fn point(&self, token: usize, layer: usize) -> &[f64] {
        self.xs[layer].row(token)
    }

    /// `x_token^0 … x_token^L`
    pub fn trajectory(&self, token: usize) -> Vec<Vec<f64>> {
        self.xs.iter().map(|x| x.row(token).to_vec()).collect()
    }
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = ModelWeights::init_random(&config, seed);
        Ok(Self { config, weights })
    }

    pub fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.d_vocab) {
            return Err(Error::UnknownToken {
                id: id as usize,
                vocab: self.config.d_vocab,
            });
        }
        Ok(())
    }

    /// Token embedding rows, plus the sinusoid when configured.
    pub fn embed(&self, tokens: &[Token]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i)
                .copy_from_slice(self.weights.token_embedding.row(t as usize));
            if self.config.pos_encoding == PosEncoding::Sinusoidal {
                for (a, p) in x.row_mut(i).iter_mut().zip(sinusoid(i, d)) {
                    *a += p;
                }
            }
        }
        Ok(x)
    }

    /// Evaluates block `block` (0-based, producing `X^{block+1}`).
    pub fn block_forward(&self, x: &Matrix, block: usize) -> Result<BlockOutput> {
        let cfg = &self.config;
        if block >= cfg.n_layers {
            return Err(Error::InvalidInput(format!(
                "block {block} out of range for {} layers",
                cfg.n_layers
            )));
        }
        if x.cols() != cfg.d_model || x.rows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "block input {:?}, d_model {}",
                x.shape(),
                cfg.d_model
            )));
        }
        let parts = block_parts(x.data(), cfg, &self.weights.layers[block]);
        let out = if self.applies_final_ln(block) {
            self.final_norm(&parts.pre)
        } else {
            parts.pre
        };
        let layer = block + 1;
        if parts.f.iter().chain(&out).any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow { layer });
        }
        Ok(BlockOutput {
            f_out: Matrix::from_raw(x.rows(), cfg.d_model, parts.f),
            block_out: Matrix::from_raw(x.rows(), cfg.d_model, out),
        })
    }

    /// True when block `block` (0-based) ends with the final layer norm.
    pub fn applies_final_ln(&self, block: usize) -> bool {
        self.config.final_ln && block + 1 == self.config.n_layers
    }

    pub(crate) fn final_norm<T: crate::dual::Scalar>(&self, x: &[T]) -> Vec<T> {
        layer_norm(
            x,
            self.config.d_model,
            &self.weights.final_ln_gain,
            &self.weights.final_ln_bias,
            self.config.ln_epsilon,
        )
    }

    pub fn forward_trace(&self, tokens: &[Token]) -> Result<HiddenTrace> {
        let x0 = self.embed(tokens)?;
        let mut trace = self.forward_from_embeddings(x0)?;
        trace.tokens = tokens.to_vec();
        trace.tokens.shrink_to_fit();
        Ok(trace)
    }

    /// Runs all blocks from a given `X⁰`. The returned trace has no tokens.
    pub fn forward_from_embeddings(&self, x0: Matrix) -> Result<HiddenTrace> {
        if x0.cols() != self.config.d_model || x0.rows() == 0 {
            return Err(Error::ShapeMismatch(format!("X0 shape {:?}", x0.shape())));
        }
        if x0.rows() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: x0.rows(),
                max: self.config.max_seq,
            });
        }
        let mut xs = Vec::with_capacity(self.config.n_layers + 1);
        let mut fs = Vec::with_capacity(self.config.n_layers);
        xs.push(x0);
        for block in 0..self.config.n_layers {
            let out = self.block_forward(xs.last().expect("non-empty"), block)?;
            fs.push(out.f_out);
            xs.push(out.block_out);
        }
        Ok(HiddenTrace {
            tokens: Vec::new(),
            xs,
            fs,
        })
    }

    /// Logits `M · x` for every row of `X^at_layer`.
    ///
    /// With `apply_final_ln` the final layer norm is applied first, except
    /// when `X^at_layer` already ends with it (`at_layer = L` and
    /// `final_ln`), so it is never applied twice.
    pub fn logits(&self, trace: &HiddenTrace, at_layer: usize, apply_final_ln: bool) -> Result<Matrix> {
        if at_layer > trace.n_layers() {
            return Err(Error::InvalidInput(format!(
                "layer {at_layer} beyond trace depth {}",
                trace.n_layers()
            )));
        }
        let x = &trace.xs[at_layer];
        if x.cols() != self.config.d_model {
            return Err(Error::ShapeMismatch("trace width differs from d_model".into()));
        }
        let already_normed = at_layer == self.config.n_layers && self.config.final_ln;
        let h = if apply_final_ln && !already_normed {
            Matrix::from_raw(x.rows(), x.cols(), self.final_norm(x.data()))
        } else {
            x.clone()
        };
        h.matmul_t(&self.weights.unembedding)
    }

    /// Argmax next-token prediction after the last prompt token, from the
    /// model output `X^L` as is.
    pub fn predict_next(&self, tokens: &[Token]) -> Result<Token> {
        let trace = self.forward_trace(tokens)?;
        let logits = self.logits(&trace, self.config.n_layers, false)?;
        Ok(argmax(logits.row(logits.rows() - 1)) as Token)
    }
}

/// Index of the largest value; lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config(pos: PosEncoding) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            d_vocab: 11,
            max_seq: 12,
            pos_encoding: pos,
            ln_epsilon: 1e-5,
            final_ln: true,
        }
    }

    #[test]
    fn embed_lookup_and_errors() {
        let model = Model::init_random(small_config(PosEncoding::None), 1).unwrap();
        let x = model.embed(&[5]).unwrap();
        assert_eq!(x.row(0), model.weights.token_embedding.row(5));
        assert!(matches!(model.embed(&[]), Err(Error::EmptyPrompt)));
        assert!(matches!(
            model.embed(&[11]),
            Err(Error::UnknownToken { id: 11, vocab: 11 })
        ));
        assert!(matches!(
            model.embed(&[0; 13]),
            Err(Error::SequenceTooLong { len: 13, max: 12 })
        ));
    }

    #[test]
    fn sinusoid_against_direct_formula() {
        let cfg = small_config(PosEncoding::Sinusoidal);
        let model = Model::new(cfg, ModelWeights::zeros(&cfg)).unwrap();
        let x = model.embed(&[0, 3, 1]).unwrap();
        for pos in 0..3 {
            for i in 0..4 {
                let freq = 1.0 / 10_000f64.powf((2 * i) as f64 / 8.0);
                assert_eq!(x[(pos, 2 * i)], (pos as f64 * freq).sin());
                assert_eq!(x[(pos, 2 * i + 1)], (pos as f64 * freq).cos());
            }
        }
    }

    #[test]
    fn zero_block_is_identity_for_inner_layers() {
        let cfg = small_config(PosEncoding::Rope);
        let model = Model::new(cfg, ModelWeights::zeros(&cfg)).unwrap();
        let x = Matrix::from_fn(3, 8, |r, c| (r * 8 + c) as f64 * 0.1 - 1.0);
        let out = model.block_forward(&x, 0).unwrap();
        assert!(out.f_out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.block_out, x);
    }

    #[test]
    fn zero_model_trace_is_constant_before_final_layer() {
        let mut cfg = small_config(PosEncoding::None);
        cfg.n_layers = 3;
        let model = Model::new(cfg, ModelWeights::zeros(&cfg)).unwrap();
        let mut w = model.weights.clone();
        w.token_embedding = Matrix::from_fn(11, 8, |r, c| (r + c) as f64);
        let model = Model::new(cfg, w).unwrap();
        let trace = model.forward_trace(&[1, 2, 3]).unwrap();
        for l in 0..3 {
            assert_eq!(trace.xs[l], trace.xs[0]);
        }
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let cfg = small_config(PosEncoding::Rope);
        let model = Model::init_random(cfg, 5).unwrap();
        let lw = &model.weights.layers[0];
        let x = Matrix::from_fn(1, 8, |_, c| c as f64 * 0.3 - 1.0);
        let y = layer_norm(x.data(), 8, &lw.ln1_gain, &lw.ln1_bias, cfg.ln_epsilon);
        let got = forward::attention(&y, &cfg, lw);
        let y = Matrix::new(1, 8, y).unwrap();
        let want = y.matmul(&lw.w_v).unwrap().matmul(&lw.w_o).unwrap();
        for (a, b) in got.iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn logits_zero_unembedding_argmax_zero() {
        let cfg = small_config(PosEncoding::None);
        let mut w = ModelWeights::init_random(&cfg, 2);
        w.unembedding = Matrix::zeros(11, 8);
        let model = Model::new(cfg, w).unwrap();
        let trace = model.forward_trace(&[1, 4]).unwrap();
        let logits = model.logits(&trace, 2, true).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(model.predict_next(&[1, 4]).unwrap(), 0);
    }

    #[test]
    fn identity_unembedding_exposes_coordinates() {
        let cfg = small_config(PosEncoding::None);
        let mut w = ModelWeights::init_random(&cfg, 2);
        w.unembedding = Matrix::from_fn(11, 8, |r, c| if r == c { 1.0 } else { 0.0 });
        let model = Model::new(cfg, w).unwrap();
        let trace = model.forward_trace(&[1, 4, 7]).unwrap();
        let logits = model.logits(&trace, 2, true).unwrap();
        for t in 0..3 {
            assert_eq!(&logits.row(t)[..8], trace.point(t, 2));
            assert!(logits.row(t)[8..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
