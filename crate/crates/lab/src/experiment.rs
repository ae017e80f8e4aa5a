//! Emergence and correlation experiments over trained checkpoints.

use std::path::{Path, PathBuf};

use coupling_core::coupling::{adjacency_band_mean, adjacency_summary, CouplingAnalyzer, CouplingRecord, TokenScheme};
use coupling_core::jacobian::JacobianEngine;
use coupling_core::model::{load_checkpoint, Model, Token};
use coupling_core::report::{fmt_f64, fmt_opt, Table, EMERGENCE_CSV, SWEEP_CSV};
use coupling_core::trajectory::trajectory_metrics;
use coupling_core::{row, Error, Matrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::task::{generate_task, SyntheticTask};
use crate::train::{train, TrainRun};

pub const METRIC_DEPTHWISE: &str = "depthwise_coupling";
pub const METRIC_SELF: &str = "self_coupling";
pub const METRIC_LSS: &str = "lss";
pub const METRIC_ED: &str = "ed";
/// Mean adjacency entry over layer pairs with `|l − l'| = 1`.
pub const METRIC_ADJ_NEAR: &str = "adjacency_near";
/// Mean adjacency entry over layer pairs with `|l − l'| ≥ 4`.
pub const METRIC_ADJ_FAR: &str = "adjacency_far";
pub const FAR_DISTANCE: usize = 4;

/// Probe prompts and coupling settings shared by all checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// `None` resolves to `max(1, round(d_model / 10))`.
    pub k: Option<usize>,
    pub p: f64,
    pub prompts: Vec<Vec<Token>>,
    /// Layer pair for token self-coupling; `None` picks the two middle
    /// layers `(⌊L/2⌋, ⌊L/2⌋ + 1)`.
    pub self_layers: Option<(usize, usize)>,
}

impl ProbeConfig {
    /// The first `count` validation sequences of `task`, truncated to `len`
    /// tokens: the fixed probe set used by the experiments.
    pub fn from_task(task: &SyntheticTask, count: usize, len: usize) -> Result<Self> {
        let data = generate_task(task)?;
        let prompts = data
            .val
            .iter()
            .take(count)
            .map(|s| s[..len.min(s.len())].to_vec())
            .collect();
        Ok(Self {
            k: None,
            p: 1.0,
            prompts,
            self_layers: None,
        })
    }

    fn resolve_k(&self, model: &Model) -> usize {
        self.k.unwrap_or_else(|| model.config.default_k())
    }

    fn self_pair(&self, n_layers: usize) -> Option<(usize, usize)> {
        self.self_layers
            .or_else(|| (n_layers >= 2).then(|| (n_layers / 2, n_layers / 2 + 1)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmergenceRow {
    pub step: usize,
    pub metric: &'static str,
    /// `None` when undefined for this checkpoint (written as `NaN`).
    pub value: Option<f64>,
}

/// Summary of one checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointSummary {
    pub step: usize,
    pub depthwise: Option<f64>,
    pub self_coupling: Option<f64>,
    pub lss: Option<f64>,
    pub ed: Option<f64>,
    /// Depth-wise adjacency at the final token, pooled over prompts.
    pub adjacency: Matrix,
    pub depthwise_records: Vec<CouplingRecord>,
}

impl CheckpointSummary {
    pub fn rows(&self) -> Vec<EmergenceRow> {
        let near = adjacency_band_mean(&self.adjacency, |g| g == 1);
        let far = adjacency_band_mean(&self.adjacency, |g| g >= FAR_DISTANCE);
        [
            (METRIC_DEPTHWISE, self.depthwise),
            (METRIC_SELF, self.self_coupling),
            (METRIC_LSS, self.lss),
            (METRIC_ED, self.ed),
            (METRIC_ADJ_NEAR, near),
            (METRIC_ADJ_FAR, far),
        ]
        .into_iter()
        .map(|(metric, value)| EmergenceRow {
            step: self.step,
            metric,
            value,
        })
        .collect()
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean depth-wise coupling at the final token over the probe prompts,
/// with the records it was computed from.
pub fn final_token_depthwise(model: &Model, probes: &ProbeConfig) -> Result<(Option<f64>, Vec<CouplingRecord>)> {
    let k = probes.resolve_k(model);
    let layers: Vec<usize> = (1..=model.config.n_layers).collect();
    let engine = JacobianEngine::new(model);
    let mut means = Vec::new();
    let mut records = Vec::new();
    for prompt in &probes.prompts {
        let trace = model.forward_trace(prompt)?;
        let t = prompt.len() - 1;
        let jac = engine.diagonal_jacobians(&trace, &layers, t)?;
        let analyzer = CouplingAnalyzer::new(jac.values(), k, probes.p)?;
        let report = analyzer.depthwise(&layers, t)?;
        means.extend(report.mean_c);
        records.extend(report.records);
    }
    Ok((mean(means), records))
}

/// All metrics for one model.
pub fn summarize_checkpoint(step: usize, model: &Model, probes: &ProbeConfig) -> Result<CheckpointSummary> {
    if probes.prompts.is_empty() {
        return Err(Error::InsufficientData("no probe prompts".into()).into());
    }
    let n_layers = model.config.n_layers;
    let k = probes.resolve_k(model);
    let (depthwise, depthwise_records) = final_token_depthwise(model, probes)?;
    let adjacency = if n_layers >= 2 {
        adjacency_summary(&depthwise_records, n_layers).unwrap_or_else(|_| Matrix::identity(n_layers))
    } else {
        Matrix::identity(1)
    };

    let engine = JacobianEngine::new(model);
    let mut self_means = Vec::new();
    let mut lss = Vec::new();
    let mut ed = Vec::new();
    for prompt in &probes.prompts {
        let trace = model.forward_trace(prompt)?;
        let n = prompt.len();
        if let Some((l, lb)) = probes.self_pair(n_layers) {
            let mut jacobians = Vec::new();
            for t in 0..n {
                jacobians.extend(engine.diagonal_jacobians(&trace, &[l, lb], t)?.into_values());
            }
            let analyzer = CouplingAnalyzer::new(&jacobians, k, probes.p)?;
            let records = analyzer.tokenwise(TokenScheme::SelfCoupling, (l, lb), n)?;
            self_means.extend(coupling_core::coupling::mean_coupling(&records));
        }
        for t in 0..n {
            let m = trajectory_metrics(&trace, t)?;
            if m.lss.is_finite() {
                lss.push(m.lss);
            }
            ed.extend(m.ed);
        }
    }
    Ok(CheckpointSummary {
        step,
        depthwise,
        self_coupling: mean(self_means),
        lss: mean(lss),
        ed: mean(ed),
        adjacency,
        depthwise_records,
    })
}

#[derive(Debug, Clone)]
pub struct EmergenceReport {
    pub checkpoints: Vec<CheckpointSummary>,
}

impl EmergenceReport {
    pub fn rows(&self) -> Vec<EmergenceRow> {
        self.checkpoints.iter().flat_map(CheckpointSummary::rows).collect()
    }

    pub fn get(&self, step: usize) -> Option<&CheckpointSummary> {
        self.checkpoints.iter().find(|c| c.step == step)
    }

    pub fn write_csv(&self, dir: &Path) -> Result<PathBuf> {
        let mut table = Table::new(&EMERGENCE_CSV);
        for r in self.rows() {
            table.push(row![r.step, r.metric, fmt_opt(r.value)]);
        }
        Ok(table.write(dir)?)
    }
}

/// Analyzes in-memory checkpoints, in the order given.
pub fn emergence_from_models<'a>(
    checkpoints: impl IntoIterator<Item = (usize, &'a Model)>,
    probes: &ProbeConfig,
) -> Result<EmergenceReport> {
    let checkpoints = checkpoints
        .into_iter()
        .map(|(step, model)| summarize_checkpoint(step, model, probes))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmergenceReport { checkpoints })
}

/// Loads checkpoints from disk and analyzes them. Every missing file is
/// reported at once before any analysis starts.
pub fn emergence_experiment(checkpoints: &[(usize, PathBuf)], probes: &ProbeConfig) -> Result<EmergenceReport> {
    if checkpoints.is_empty() {
        return Err(Error::InsufficientData("empty checkpoint list".into()).into());
    }
    let missing: Vec<String> = checkpoints
        .iter()
        .filter(|(_, p)| !p.is_file())
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteInput(missing).into());
    }
    let mut out = Vec::with_capacity(checkpoints.len());
    for (step, path) in checkpoints {
        let model = load_checkpoint(path)?;
        out.push(summarize_checkpoint(*step, &model, probes)?);
    }
    Ok(EmergenceReport { checkpoints: out })
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either variable has constant ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub run_id: String,
    /// Value of the swept hyperparameter, reported in `sweep.csv`.
    pub hyperparam: f64,
    pub run: TrainRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run_id: String,
    pub hyperparam: f64,
    pub val_loss: f64,
    pub mean_coupling: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Spearman correlation of (mean coupling, validation loss); `None` when
    /// undefined, e.g. for identical runs.
    pub spearman: Option<f64>,
}

impl SweepReport {
    /// True when higher coupling goes with lower validation loss.
    pub fn coupling_tracks_performance(&self) -> Option<bool> {
        self.spearman.map(|r| r < 0.0)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let mut table = Table::new(&SWEEP_CSV);
        for r in &self.rows {
            table.push(row![
                r.run_id,
                fmt_f64(r.hyperparam),
                fmt_f64(r.val_loss),
                fmt_opt(r.mean_coupling)
            ]);
        }
        let path = table.write(dir)?;
        let summary = serde_json::json!({
            "n_runs": self.rows.len(),
            "spearman_coupling_vs_val_loss": self.spearman,
            "higher_coupling_lower_loss": self.coupling_tracks_performance(),
        });
        let summary_path = dir.join(SWEEP_SUMMARY_JSON);
        std::fs::write(
            &summary_path,
            serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n",
        )
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", summary_path.display())))?;
        Ok(path)
    }
}

pub const SWEEP_SUMMARY_JSON: &str = "sweep_summary.json";
pub const MIN_SWEEP_RUNS: usize = 4;

/// Trains every run (concurrently) and correlates final depth-wise coupling
/// with final validation loss.
pub fn correlation_sweep(runs: &[SweepRun], task: &SyntheticTask, probes: &ProbeConfig) -> Result<SweepReport> {
    if runs.len() < MIN_SWEEP_RUNS {
        return Err(Error::InsufficientData(format!(
            "correlation sweep needs at least {MIN_SWEEP_RUNS} runs, got {}",
            runs.len()
        ))
        .into());
    }
    let data = generate_task(task)?;
    let rows = runs
        .par_iter()
        .map(|r| {
            let out = train(&r.run, &data, None)?;
            let (mean_coupling, _) = final_token_depthwise(&out.final_model, probes)?;
            log::info!(
                "sweep run {}: val {:.4} coupling {:?}",
                r.run_id,
                out.final_val_loss,
                mean_coupling
            );
            Ok(SweepRow {
                run_id: r.run_id.clone(),
                hyperparam: r.hyperparam,
                val_loss: out.final_val_loss,
                mean_coupling,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let paired: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.mean_coupling.map(|c| (c, r.val_loss)))
        .collect();
    let (c, v): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
    let spearman = if c.len() >= 2 { spearman(&c, &v) } else { None };
    Ok(SweepReport { rows, spearman })
}
