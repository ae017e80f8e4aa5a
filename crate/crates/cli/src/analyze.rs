//! Per-prompt coupling and trajectory analysis of one checkpoint.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use coupling_core::coupling::{adjacency_summary, CouplingAnalyzer, CouplingKind, CouplingRecord, TokenScheme};
use coupling_core::jacobian::{BlockJacobian, ConnectionId, FinalLayerMode, JacobianEngine};
use coupling_core::linalg::Matrix;
use coupling_core::model::{Model, Token};
use coupling_core::report::{
    fmt_f64, fmt_opt, write_adjacency, Table, COUPLING_CSV, ENTROPY_CSV, NORMS_CSV, PCA_CSV, PERTURB_CSV, SVALS_CSV,
    TRAJECTORIES_CSV,
};
use coupling_core::row;
use coupling_core::trajectory::{
    layer_norm_profile, logit_entropy_profile, pca_trajectories, perturbation_probe, singular_value_profile,
    trajectory_metrics, PcaPoint, PerturbationRow, SingularValueRow, TrajectoryMetrics,
};
use coupling_core::Error as CoreError;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Depthwise,
    SelfCoupling,
    FixedInput,
    FixedOutput,
    CrossB,
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "depthwise" => Scheme::Depthwise,
            "self" => Scheme::SelfCoupling,
            "fixed_input" => Scheme::FixedInput,
            "fixed_output" => Scheme::FixedOutput,
            "cross_b" => Scheme::CrossB,
            other => return Err(format!("unknown scheme '{other}'")),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeOptions {
    /// Overrides `k_ratio` when set.
    pub k: Option<usize>,
    pub k_ratio: f64,
    pub p: f64,
    /// 1-based blocks; `None` means all.
    pub layers: Option<Vec<usize>>,
    pub schemes: Vec<Scheme>,
    /// Layer pair for the token-wise schemes; `None` picks the middle pair.
    pub token_layers: Option<(usize, usize)>,
    pub fixed_input_token: usize,
    /// `None` means the last token.
    pub fixed_output_token: Option<usize>,
    pub seed: u64,
    pub perturb_scales: Vec<f64>,
    /// Read entropy from logits without the final layer norm.
    pub entropy_raw: bool,
    pub final_mode: FinalLayerMode,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            k: None,
            k_ratio: 0.1,
            p: 1.0,
            layers: None,
            schemes: vec![Scheme::Depthwise, Scheme::SelfCoupling],
            token_layers: None,
            fixed_input_token: 0,
            fixed_output_token: None,
            seed: 0,
            perturb_scales: vec![0.01, 0.1, 1.0],
            entropy_raw: false,
            final_mode: FinalLayerMode::ExcludeFinalLn,
        }
    }
}

impl AnalyzeOptions {
    pub fn resolve_k(&self, d_model: usize) -> Result<usize> {
        if let Some(k) = self.k {
            return Ok(k);
        }
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return Err(config(format!("k ratio {} outside (0, 1]", self.k_ratio)));
        }
        Ok(((d_model as f64 * self.k_ratio).round() as usize).max(1))
    }

    fn resolve_layers(&self, n_layers: usize) -> Result<Vec<usize>> {
        let layers = self.layers.clone().unwrap_or_else(|| (1..=n_layers).collect());
        if layers.is_empty() {
            return Err(config("no layers selected"));
        }
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > n_layers) {
            return Err(config(format!("layer {bad} outside 1..={n_layers}")));
        }
        Ok(layers)
    }

    fn resolve_token_layers(&self, n_layers: usize) -> Result<Option<(usize, usize)>> {
        match self.token_layers {
            Some((l, lb)) if l == 0 || lb == 0 || l > n_layers || lb > n_layers => {
                Err(config(format!("token layers ({l}, {lb}) outside 1..={n_layers}")))
            }
            Some(pair) => Ok(Some(pair)),
            None if n_layers >= 2 => Ok(Some((n_layers / 2, n_layers / 2 + 1))),
            None => Ok(Some((1, 1))),
        }
    }
}

/// Everything measured on one prompt.
#[derive(Debug, Clone)]
pub struct PromptAnalysis {
    pub prompt: usize,
    pub records: Vec<CouplingRecord>,
    pub depthwise_mean: Option<f64>,
    pub trajectories: Vec<TrajectoryMetrics>,
    pub norms: Vec<Vec<f64>>,
    pub entropy: Vec<f64>,
    pub pca: Vec<PcaPoint>,
    pub svals: Vec<SingularValueRow>,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub k: usize,
    pub prompts: Vec<PromptAnalysis>,
    pub perturb: Vec<PerturbationRow>,
    /// Pooled depth-wise adjacency; `None` unless every block was analyzed.
    pub adjacency: Option<Matrix>,
}

fn analyze_prompt(
    model: &Model,
    idx: usize,
    tokens: &[Token],
    opts: &AnalyzeOptions,
    k: usize,
    layers: &[usize],
    token_layers: Option<(usize, usize)>,
) -> Result<PromptAnalysis> {
    let trace = model.forward_trace(tokens)?;
    let n = tokens.len();
    let last = n - 1;
    let engine = JacobianEngine::new(model).with_final_mode(opts.final_mode);

    let mut jac: BTreeMap<ConnectionId, BlockJacobian> = engine.diagonal_jacobians(&trace, layers, last)?;
    let wants = |s: Scheme| opts.schemes.contains(&s);
    if let Some((l, lb)) = token_layers {
        if wants(Scheme::FixedInput) || wants(Scheme::FixedOutput) {
            jac.extend(engine.all_connections(&trace, &[l, lb])?);
        } else if wants(Scheme::SelfCoupling) {
            for t in 0..n {
                jac.extend(engine.diagonal_jacobians(&trace, &[l, lb], t)?);
            }
        }
    }
    let analyzer = CouplingAnalyzer::new(jac.values(), k, opts.p)?;

    let mut records = Vec::new();
    let depthwise = analyzer.depthwise(layers, last)?;
    let depthwise_mean = depthwise.mean_c;
    if wants(Scheme::Depthwise) {
        records.extend(depthwise.records);
    }
    if wants(Scheme::CrossB) {
        records.extend(analyzer.depthwise_cross(layers, last)?.records);
    }
    if let Some(pair) = token_layers {
        if wants(Scheme::SelfCoupling) {
            records.extend(analyzer.tokenwise(TokenScheme::SelfCoupling, pair, n)?);
        }
        if wants(Scheme::FixedInput) {
            if opts.fixed_input_token >= n {
                return Err(config(format!(
                    "fixed input token {} beyond prompt {idx} of length {n}",
                    opts.fixed_input_token
                )));
            }
            records.extend(analyzer.tokenwise(TokenScheme::FixedInput(opts.fixed_input_token), pair, n)?);
        }
        if wants(Scheme::FixedOutput) {
            let t2 = opts.fixed_output_token.unwrap_or(last);
            if t2 >= n {
                return Err(config(format!(
                    "fixed output token {t2} beyond prompt {idx} of length {n}"
                )));
            }
            records.extend(analyzer.tokenwise(TokenScheme::FixedOutput(t2), pair, n)?);
        }
    }

    let diag: Vec<&BlockJacobian> = layers
        .iter()
        .map(|&l| {
            &jac[&ConnectionId {
                layer: l,
                t_in: last,
                t_out: last,
            }]
        })
        .collect();
    let svals = singular_value_profile(&diag, k)?;

    let trajectories = (0..n)
        .map(|t| trajectory_metrics(&trace, t))
        .collect::<Result<Vec<_>, CoreError>>()?;
    let norms = layer_norm_profile(&trace).norms;
    let entropy = logit_entropy_profile(model, &trace, !opts.entropy_raw)?;
    // the plane is fitted on the final-layer rows; one token or identical
    // rows leave it undefined
    let pca = match pca_trajectories(&trace) {
        Ok(p) => p.points,
        Err(e @ (CoreError::InsufficientData(_) | CoreError::DegenerateVariance)) => {
            log::warn!("prompt {idx}: no PCA projection ({e})");
            Vec::new()
        }
        Err(e) => return Err(e.into()),
    };

    Ok(PromptAnalysis {
        prompt: idx,
        records,
        depthwise_mean,
        trajectories,
        norms,
        entropy,
        pca,
        svals,
    })
}

pub fn analyze(model: &Model, prompts: &[Vec<Token>], opts: &AnalyzeOptions) -> Result<Analysis> {
    if prompts.is_empty() {
        return Err(config("no prompts"));
    }
    for p in prompts {
        model.check_tokens(p)?;
    }
    let n_layers = model.config.n_layers;
    let k = opts.resolve_k(model.config.d_model)?;
    let layers = opts.resolve_layers(n_layers)?;
    let token_layers = opts.resolve_token_layers(n_layers)?;

    let per_prompt = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| analyze_prompt(model, i, p, opts, k, &layers, token_layers))
        .collect::<Result<Vec<_>>>()?;

    let perturb = if opts.perturb_scales.is_empty() {
        Vec::new()
    } else {
        perturbation_probe(model, &prompts[0], &opts.perturb_scales, opts.seed)?
    };

    let adjacency = if n_layers >= 2 && layers.len() == n_layers && opts.schemes.contains(&Scheme::Depthwise) {
        let pooled: Vec<CouplingRecord> = per_prompt
            .iter()
            .flat_map(|a| a.records.iter().filter(|r| r.kind == CouplingKind::Depthwise).cloned())
            .collect();
        match adjacency_summary(&pooled, n_layers) {
            Ok(m) => Some(m),
            Err(e) => {
                log::warn!("adjacency not written: {e}");
                None
            }
        }
    } else {
        None
    };

    Ok(Analysis {
        k,
        prompts: per_prompt,
        perturb,
        adjacency,
    })
}

impl Analysis {
    /// Writes every table into `dir`; returns the file names written.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        let mut coupling = Table::new(&COUPLING_CSV);
        let mut traj = Table::new(&TRAJECTORIES_CSV);
        let mut norms = Table::new(&NORMS_CSV);
        let mut entropy = Table::new(&ENTROPY_CSV);
        let mut pca = Table::new(&PCA_CSV);
        let mut svals = Table::new(&SVALS_CSV);
        for a in &self.prompts {
            for r in &a.records {
                coupling.push(row![
                    r.kind,
                    r.probe.layer,
                    r.probe.t_in,
                    r.probe.t_out,
                    r.basis.layer,
                    r.basis.t_in,
                    r.basis.t_out,
                    r.k,
                    fmt_f64(r.p),
                    fmt_f64(r.m_k),
                    fmt_f64(r.c_k),
                    a.prompt,
                    r.degenerate
                ]);
            }
            for m in &a.trajectories {
                traj.push(row![
                    a.prompt,
                    m.token,
                    fmt_f64(m.lss),
                    fmt_opt(m.ed),
                    fmt_f64(m.mean_alpha)
                ]);
            }
            for (t, per_layer) in a.norms.iter().enumerate() {
                for (l, v) in per_layer.iter().enumerate() {
                    norms.push(row![a.prompt, t, l, fmt_f64(*v)]);
                }
            }
            for (l, h) in a.entropy.iter().enumerate() {
                entropy.push(row![a.prompt, l, fmt_f64(*h)]);
            }
            for p in &a.pca {
                pca.push(row![a.prompt, p.token, p.layer, fmt_f64(p.pc1), fmt_f64(p.pc2)]);
            }
            let last = a.trajectories.len() - 1;
            for s in &a.svals {
                svals.push(row![s.layer, s.rank, fmt_f64(s.value), a.prompt, last]);
            }
        }
        let mut perturb = Table::new(&PERTURB_CSV);
        for r in &self.perturb {
            perturb.push(row![fmt_f64(r.scale), fmt_f64(r.cos_first), fmt_f64(r.cos_last)]);
        }

        let mut files = Vec::new();
        for t in [&coupling, &traj, &norms, &entropy, &pca, &svals, &perturb] {
            files.push(file_name(&t.write(dir)?));
        }
        if let Some(adj) = &self.adjacency {
            write_adjacency(dir, adj)?;
            files.push(coupling_core::report::ADJACENCY_JSON.to_string());
            files.push(coupling_core::report::ADJACENCY_CSV.file.to_string());
        }
        Ok(files)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
