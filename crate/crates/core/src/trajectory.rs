//! Geometry of individual token trajectories `x⁰ … x^L` through depth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::jacobian::BlockJacobian;
use crate::linalg::{dot, norm2, pca_fit_2d, svd_full, Matrix, Pca2};
use crate::model::{HiddenTrace, Model, Token};

/// Steps shorter than this are skipped by the line-shape score.
pub const LSS_STEP_GUARD: f64 = 1e-12;
/// `|mean α|` below this leaves the expodistance undefined.
pub const ED_MEAN_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineShape {
    pub score: f64,
    /// Steps that entered the unit-step walk.
    pub used_steps: usize,
    /// Steps dropped by [`LSS_STEP_GUARD`].
    pub skipped_steps: usize,
}

/// Line-shape score `L / ‖x̃^L − x̃⁰‖` of the unit-step walk
/// `x̃^l = x̃^{l-1} + (x^l − x^{l-1}) / ‖x^l − x^{l-1}‖`.
///
/// Steps shorter than [`LSS_STEP_GUARD`] are skipped and `L` is reduced by
/// the number skipped.
pub fn line_shape_score<P: AsRef<[f64]>>(traj: &[P]) -> Result<LineShape> {
    if traj.len() < 2 {
        return Err(Error::DegenerateTrajectory);
    }
    let d = traj[0].as_ref().len();
    if traj.iter().any(|p| p.as_ref().len() != d) {
        return Err(Error::ShapeMismatch("trajectory points differ in dimension".into()));
    }
    let mut walk = vec![0.0; d];
    let mut used = 0;
    let mut skipped = 0;
    let mut step = vec![0.0; d];
    for pair in traj.windows(2) {
        let (a, b) = (pair[0].as_ref(), pair[1].as_ref());
        for ((s, x), y) in step.iter_mut().zip(a).zip(b) {
            *s = y - x;
        }
        let len = norm2(&step);
        if !(len >= LSS_STEP_GUARD) {
            skipped += 1;
            continue;
        }
        for (w, s) in walk.iter_mut().zip(&step) {
            *w += s / len;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::DegenerateTrajectory);
    }
    let end = norm2(&walk);
    Ok(LineShape {
        score: used as f64 / end,
        used_steps: used,
        skipped_steps: skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expodistance {
    /// `α^l = ln(‖x^l‖ / ‖x^{l-1}‖)`, `l = 1 … L`.
    pub alphas: Vec<f64>,
    pub mean_alpha: f64,
    /// `Var_l α / (Avg_l α)²` with population variance; `None` when the mean
    /// is within [`ED_MEAN_GUARD`] of zero.
    pub ed: Option<f64>,
}

pub fn expodistance(norms: &[f64]) -> Result<Expodistance> {
    if norms.len() < 2 {
        return Err(Error::InsufficientData("expodistance needs at least two norms".into()));
    }
    if let Some(l) = norms.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateNorm(l));
    }
    let alphas: Vec<f64> = norms.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    let n = alphas.len() as f64;
    let mean = alphas.iter().sum::<f64>() / n;
    let var = alphas.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let ed = (mean.abs() > ED_MEAN_GUARD).then(|| var / (mean * mean));
    Ok(Expodistance {
        alphas,
        mean_alpha: mean,
        ed,
    })
}

/// Per-token summary of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMetrics {
    pub token: usize,
    pub lss: f64,
    pub lss_skipped_steps: usize,
    pub alphas: Vec<f64>,
    pub mean_alpha: f64,
    pub ed: Option<f64>,
    pub norms: Vec<f64>,
}

pub fn trajectory_metrics(trace: &HiddenTrace, token: usize) -> Result<TrajectoryMetrics> {
    if token >= trace.n_tokens() {
        return Err(Error::InvalidInput(format!("token {token} beyond prompt")));
    }
    let traj = trace.trajectory(token);
    let lss = line_shape_score(&traj)?;
    let norms: Vec<f64> = traj.iter().map(|x| norm2(x)).collect();
    let ed = expodistance(&norms)?;
    Ok(TrajectoryMetrics {
        token,
        lss: lss.score,
        lss_skipped_steps: lss.skipped_steps,
        alphas: ed.alphas,
        mean_alpha: ed.mean_alpha,
        ed: ed.ed,
        norms,
    })
}

/// `‖x_i^l‖` per token and layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormProfile {
    /// `norms[token][layer]`, `L + 1` entries per token.
    pub norms: Vec<Vec<f64>>,
    /// Whether each token's norms never decrease with depth.
    pub non_decreasing: Vec<bool>,
}

pub fn layer_norm_profile(trace: &HiddenTrace) -> NormProfile {
    let norms: Vec<Vec<f64>> = (0..trace.n_tokens())
        .map(|t| trace.xs.iter().map(|x| norm2(x.row(t))).collect())
        .collect();
    let non_decreasing = norms.iter().map(|v| v.windows(2).all(|w| w[1] >= w[0])).collect();
    NormProfile { norms, non_decreasing }
}

/// Coefficient of variation of the step lengths `‖x^l − x^{l-1}‖`.
pub fn step_length_cv(traj: &[Vec<f64>]) -> Option<f64> {
    let steps: Vec<f64> = traj
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    if steps.is_empty() {
        return None;
    }
    let n = steps.len() as f64;
    let mean = steps.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return None;
    }
    let var = steps.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean)
}

/// Entropy in nats of `softmax(logits)`.
pub fn softmax_entropy(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let h = exps
        .iter()
        .filter(|&&e| e > 0.0)
        .map(|&e| {
            let p = e / z;
            -p * p.ln()
        })
        .sum::<f64>();
    h.max(0.0)
}

/// Entropy of the next-token distribution read from the last token at each
/// layer `0 … L` (logit lens).
pub fn logit_entropy_profile(model: &Model, trace: &HiddenTrace, apply_final_ln: bool) -> Result<Vec<f64>> {
    let last = trace.n_tokens() - 1;
    (0..=trace.n_layers())
        .map(|l| {
            let logits = model.logits(trace, l, apply_final_ln)?;
            Ok(softmax_entropy(logits.row(last)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PcaPoint {
    pub token: usize,
    pub layer: usize,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Debug, Clone)]
pub struct PcaTrajectories {
    pub pca: Pca2,
    pub points: Vec<PcaPoint>,
}

/// Two-component PCA fitted on the rows of `X^L` only; every `x_i^l` is
/// projected with that basis.
pub fn pca_trajectories(trace: &HiddenTrace) -> Result<PcaTrajectories> {
    let last = &trace.xs[trace.n_layers()];
    let pca = pca_fit_2d(last)?;
    let mut points = Vec::with_capacity(trace.n_tokens() * (trace.n_layers() + 1));
    for token in 0..trace.n_tokens() {
        for (layer, x) in trace.xs.iter().enumerate() {
            let [pc1, pc2] = pca.project(x.row(token));
            points.push(PcaPoint { token, layer, pc1, pc2 });
        }
    }
    Ok(PcaTrajectories { pca, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationRow {
    pub scale: f64,
    pub cos_first: f64,
    pub cos_last: f64,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Adds `N(0, scale²)` noise to the last token's input embedding and reports
/// the cosine similarity of perturbed vs clean `x_n` at layer 1 and layer L.
pub fn perturbation_probe(model: &Model, tokens: &[Token], scales: &[f64], seed: u64) -> Result<Vec<PerturbationRow>> {
    if let Some(s) = scales.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidInput(format!("noise scale {s} must be finite and >= 0")));
    }
    let clean = model.forward_trace(tokens)?;
    let n = clean.n_tokens();
    let l = clean.n_layers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    scales
        .iter()
        .map(|&scale| {
            let mut x0 = clean.xs[0].clone();
            for v in x0.row_mut(n - 1) {
                *v += scale * unit.sample(&mut rng);
            }
            let noisy = model.forward_from_embeddings(x0)?;
            Ok(PerturbationRow {
                scale,
                cos_first: cosine(clean.point(n - 1, 1), noisy.point(n - 1, 1)),
                cos_last: cosine(clean.point(n - 1, l), noisy.point(n - 1, l)),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SingularValueRow {
    pub layer: usize,
    /// 1-based rank.
    pub rank: usize,
    pub value: f64,
}

/// Top-K singular values per layer for one token's `J^l_{tt}`.
pub fn singular_value_profile(jacobians: &[&BlockJacobian], k: usize) -> Result<Vec<SingularValueRow>> {
    if jacobians.is_empty() {
        return Err(Error::IncompleteInput(vec!["no Jacobians supplied".into()]));
    }
    let mut rows = Vec::new();
    let mut sorted: Vec<&&BlockJacobian> = jacobians.iter().collect();
    sorted.sort_by_key(|bj| bj.id);
    for bj in sorted {
        let svd = svd_full(&bj.j)?;
        if k == 0 || k > svd.dim() {
            return Err(Error::InvalidK { k, max: svd.dim() });
        }
        rows.extend(svd.s[..k].iter().enumerate().map(|(r, &value)| SingularValueRow {
            layer: bj.id.layer,
            rank: r + 1,
            value,
        }));
    }
    Ok(rows)
}

/// Iterates `x^{l+1} = (I + J_l) x^l` from `x⁰`, returning `x⁰ … x^L`.
pub fn iterate_linear_stack(maps: &[Matrix], x0: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![x0.to_vec()];
    for m in maps {
        if m.shape() != (x0.len(), x0.len()) {
            return Err(Error::ShapeMismatch(format!("map {:?} vs dim {}", m.shape(), x0.len())));
        }
        let prev = out.last().expect("non-empty");
        let jx = m.matvec(prev);
        out.push(prev.iter().zip(jx).map(|(a, b)| a + b).collect());
    }
    Ok(out)
}
