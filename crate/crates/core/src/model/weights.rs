use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::config::ModelConfig;

/// Learnable tensors of one transformer block. Linear maps act on row
/// vectors: `y = x · W (+ b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    /// `d_model × d_ff`
    pub w_ff1: Matrix,
    pub b_ff1: Vec<f64>,
    /// `d_ff × d_model`
    pub w_ff2: Matrix,
    pub b_ff2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `d_vocab × d_model`
    pub token_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Vec<f64>,
    pub final_ln_bias: Vec<f64>,
    /// `d_vocab × d_model`; logits are `M · x`.
    pub unembedding: Matrix,
}

/// Name and shape of every tensor, in storage order.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![("token_embedding".to_string(), vec![cfg.d_vocab, d])];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("w_q"), vec![d, d]),
            (p("w_k"), vec![d, d]),
            (p("w_v"), vec![d, d]),
            (p("w_o"), vec![d, d]),
            (p("ln1_gain"), vec![d]),
            (p("ln1_bias"), vec![d]),
            (p("ln2_gain"), vec![d]),
            (p("ln2_bias"), vec![d]),
            (p("w_ff1"), vec![d, cfg.d_ff]),
            (p("b_ff1"), vec![cfg.d_ff]),
            (p("w_ff2"), vec![cfg.d_ff, d]),
            (p("b_ff2"), vec![d]),
        ]);
    }
    out.extend([
        ("final_ln_gain".to_string(), vec![d]),
        ("final_ln_bias".to_string(), vec![d]),
        ("unembedding".to_string(), vec![cfg.d_vocab, d]),
    ]);
    out
}

impl LayerWeights {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            w_ff1: Matrix::zeros(d, cfg.d_ff),
            b_ff1: vec![0.0; cfg.d_ff],
            w_ff2: Matrix::zeros(cfg.d_ff, d),
            b_ff2: vec![0.0; d],
        }
    }
}

impl ModelWeights {
    /// All linear maps zero, layer-norm gains one and biases zero.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            token_embedding: Matrix::zeros(cfg.d_vocab, cfg.d_model),
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(cfg)).collect(),
            final_ln_gain: vec![1.0; cfg.d_model],
            final_ln_bias: vec![0.0; cfg.d_model],
            unembedding: Matrix::zeros(cfg.d_vocab, cfg.d_model),
        }
    }

    /// Every tensor zero, including layer-norm gains. Used as a gradient
    /// accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut w = self.clone();
        for s in w.slices_mut() {
            s.fill(0.0);
        }
        w
    }

    /// Seeded Gaussian initialization.
    ///
    /// Linear maps get std `0.5/√fan_in`; the two maps writing into the
    /// residual stream (`w_o`, `w_ff2`) are further scaled by `1/√(2L)`.
    /// Embedding rows get std `1/√d_model`, so rows have roughly unit norm.
    pub fn init_random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };
        let d = cfg.d_model;
        let depth_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let w_std = 0.5 / (d as f64).sqrt();
        let ff2_std = 0.5 / (cfg.d_ff as f64).sqrt() * depth_scale;

        let token_embedding = gauss(cfg.d_vocab, d, 1.0 / (d as f64).sqrt());
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let mut lw = LayerWeights::zeros(cfg);
                lw.w_q = gauss(d, d, w_std);
                lw.w_k = gauss(d, d, w_std);
                lw.w_v = gauss(d, d, w_std);
                lw.w_o = gauss(d, d, w_std * depth_scale);
                lw.w_ff1 = gauss(d, cfg.d_ff, w_std);
                lw.w_ff2 = gauss(cfg.d_ff, d, ff2_std);
                lw
            })
            .collect();
        let unembedding = gauss(cfg.d_vocab, d, 1.0 / (d as f64).sqrt());
        Self {
            token_embedding,
            layers,
            final_ln_gain: vec![1.0; d],
            final_ln_bias: vec![0.0; d],
            unembedding,
        }
    }

    /// Tensors in [`tensor_layout`] order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.token_embedding.data()];
        for l in &self.layers {
            out.extend([
                l.w_q.data(),
                l.w_k.data(),
                l.w_v.data(),
                l.w_o.data(),
                &l.ln1_gain[..],
                &l.ln1_bias[..],
                &l.ln2_gain[..],
                &l.ln2_bias[..],
                l.w_ff1.data(),
                &l.b_ff1[..],
                l.w_ff2.data(),
                &l.b_ff2[..],
            ]);
        }
        out.extend([
            &self.final_ln_gain[..],
            &self.final_ln_bias[..],
            self.unembedding.data(),
        ]);
        out
    }

    /// Mutable tensors in [`tensor_layout`] order.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let ModelWeights {
            token_embedding,
            layers,
            final_ln_gain,
            final_ln_bias,
            unembedding,
        } = self;
        let mut out = vec![token_embedding.data_mut()];
        for l in layers.iter_mut() {
            let LayerWeights {
                w_q,
                w_k,
                w_v,
                w_o,
                ln1_gain,
                ln1_bias,
                ln2_gain,
                ln2_bias,
                w_ff1,
                b_ff1,
                w_ff2,
                b_ff2,
            } = l;
            out.extend([
                w_q.data_mut(),
                w_k.data_mut(),
                w_v.data_mut(),
                w_o.data_mut(),
                &mut ln1_gain[..],
                &mut ln1_bias[..],
                &mut ln2_gain[..],
                &mut ln2_bias[..],
                w_ff1.data_mut(),
                &mut b_ff1[..],
                w_ff2.data_mut(),
                &mut b_ff2[..],
            ]);
        }
        out.extend([&mut final_ln_gain[..], &mut final_ln_bias[..], unembedding.data_mut()]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Rebuilds weights from tensors laid out as in [`tensor_layout`].
    pub fn from_tensors(cfg: &ModelConfig, mut tensors: Vec<Vec<f64>>) -> Result<Self> {
        let layout = tensor_layout(cfg);
        if tensors.len() != layout.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        let mut w = Self::zeros(cfg);
        for ((dst, src), (name, shape)) in w.slices_mut().into_iter().zip(tensors.iter_mut()).zip(&layout) {
            if dst.len() != src.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {shape:?} ({} values), got {}",
                    dst.len(),
                    src.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        w.validate(cfg)?;
        Ok(w)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = tensor_layout(cfg);
        let slices = self.slices();
        if layout.len() != slices.len() {
            return Err(Error::ShapeMismatch(format!(
                "weights hold {} layers, config says {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        let mats = std::iter::once(&self.token_embedding)
            .chain(
                self.layers
                    .iter()
                    .flat_map(|l| [&l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.w_ff1, &l.w_ff2]),
            )
            .chain(std::iter::once(&self.unembedding));
        let mat_shapes = layout.iter().filter(|(_, s)| s.len() == 2);
        for (m, (name, shape)) in mats.zip(mat_shapes) {
            if [m.rows(), m.cols()] != shape[..] {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    m.shape()
                )));
            }
        }
        for (s, (name, shape)) in slices.iter().zip(&layout) {
            let numel: usize = shape.iter().product();
            if s.len() != numel {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {numel} values, got {}",
                    s.len()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has a non-finite entry")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::PosEncoding;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            d_vocab: 7,
            max_seq: 8,
            pos_encoding: PosEncoding::None,
            ln_epsilon: 1e-5,
            final_ln: true,
        }
    }

    #[test]
    fn layout_matches_slices() {
        let c = cfg();
        let w = ModelWeights::init_random(&c, 1);
        let layout = tensor_layout(&c);
        let slices = w.slices();
        assert_eq!(layout.len(), slices.len());
        for ((_, shape), s) in layout.iter().zip(&slices) {
            assert_eq!(shape.iter().product::<usize>(), s.len());
        }
        w.validate(&c).unwrap();
    }

    #[test]
    fn from_tensors_round_trip() {
        let c = cfg();
        let w = ModelWeights::init_random(&c, 9);
        let tensors = w.slices().iter().map(|s| s.to_vec()).collect();
        assert_eq!(ModelWeights::from_tensors(&c, tensors).unwrap(), w);
    }

    #[test]
    fn init_is_seeded() {
        let c = cfg();
        assert_eq!(ModelWeights::init_random(&c, 3), ModelWeights::init_random(&c, 3));
        assert_ne!(ModelWeights::init_random(&c, 3), ModelWeights::init_random(&c, 4));
    }
}
