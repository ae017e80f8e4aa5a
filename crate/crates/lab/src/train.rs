//! Seeded training loop with AdamW and optional stochastic block skipping.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use coupling_core::model::{save_checkpoint, Model, ModelConfig, ModelWeights, Token};
use coupling_core::report::{fmt_f64, fmt_opt, Table, LOSS_CSV};
use coupling_core::row;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grad::{accumulate_gradients, sequence_loss};
use crate::task::TaskData;

const BATCH_STREAM: u64 = 3;
const SKIP_STREAM: u64 = 4;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Strictly ascending, each `≤ steps`; step 0 is the initialization.
    pub checkpoint_steps: Vec<usize>,
    pub seed: u64,
    /// Probability of dropping each block for each training sequence.
    pub block_skip: f64,
    /// Validation loss is evaluated every `eval_every` steps, at every
    /// checkpoint and at the last step.
    pub eval_every: usize,
}

/// Powers of two up to `stride`, then every `stride` steps, always ending at
/// `steps`.
pub fn default_checkpoint_grid(steps: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut grid = vec![0];
    let mut p = 1;
    while p < stride && p < steps {
        grid.push(p);
        p *= 2;
    }
    let mut s = stride;
    while s < steps {
        grid.push(s);
        s += stride;
    }
    grid.push(steps);
    grid.dedup();
    grid
}

impl TrainRun {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidRun(m));
        self.config.validate()?;
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.block_skip) {
            return bad(format!("block_skip {} must lie in [0, 1)", self.block_skip));
        }
        if self.checkpoint_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("checkpoint_steps must be strictly ascending".into());
        }
        if self.checkpoint_steps.last().is_some_and(|&s| s > self.steps) {
            return bad("checkpoint step beyond the last training step".into());
        }
        Ok(())
    }

    fn check_data(&self, data: &TaskData) -> Result<()> {
        let all = data.train.iter().chain(&data.val);
        for seq in all {
            if seq.len() < 2 || seq.len() > self.config.max_seq {
                return Err(LabError::InvalidRun(format!(
                    "sequence length {} outside 2..={}",
                    seq.len(),
                    self.config.max_seq
                )));
            }
            if let Some(&t) = seq.iter().find(|&&t| t as usize >= self.config.d_vocab) {
                return Err(LabError::InvalidRun(format!(
                    "token {t} outside model vocabulary {}",
                    self.config.d_vocab
                )));
            }
        }
        if data.train.is_empty() || data.val.is_empty() {
            return Err(LabError::InvalidRun("empty training or validation split".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    /// Mean next-token loss of the batch drawn at this step, at the
    /// parameters after `step` updates.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub model: Model,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoints: Vec<Checkpoint>,
    pub loss: Vec<LossRow>,
    pub final_model: Model,
    pub final_val_loss: f64,
}

pub fn checkpoint_file_name(step: usize) -> String {
    format!("ckpt-{step:06}.json")
}

/// Mean next-token loss over a set of sequences, without block skipping.
pub fn mean_loss(model: &Model, seqs: &[Vec<Token>]) -> Result<f64> {
    let keep = vec![1.0; model.config.n_layers];
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs {
        total += sequence_loss(model, s, &keep)?;
        count += s.len() - 1;
    }
    Ok(total / count as f64)
}

struct Adam {
    m: ModelWeights,
    v: ModelWeights,
    t: i32,
}

impl Adam {
    fn new(weights: &ModelWeights) -> Self {
        Self {
            m: weights.zeros_like(),
            v: weights.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, o: &OptimizerConfig, weights: &mut ModelWeights, grads: &ModelWeights) {
        self.t += 1;
        let bc1 = 1.0 - o.beta1.powi(self.t);
        let bc2 = 1.0 - o.beta2.powi(self.t);
        let params = weights.slices_mut();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((w, g), m), v) in params.into_iter().zip(grads.slices()).zip(ms).zip(vs) {
            for i in 0..w.len() {
                m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
                v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + o.eps) + o.weight_decay * w[i];
                w[i] -= o.lr * update;
            }
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains from a seeded initialization. With `out_dir`, checkpoints are
/// written as tensor bundles and the loss curve as `loss.csv`.
pub fn train(run: &TrainRun, data: &TaskData, out_dir: Option<&Path>) -> Result<TrainOutput> {
    run.validate()?;
    run.check_data(data)?;
    let mut model = Model::init_random(run.config, run.seed)?;
    let n_layers = run.config.n_layers;
    let mut adam = Adam::new(&model.weights);
    let mut batch_rng = stream(run.seed, BATCH_STREAM);
    let mut skip_rng = stream(run.seed, SKIP_STREAM);
    let keep_scale = 1.0 / (1.0 - run.block_skip);

    let mut checkpoints = Vec::with_capacity(run.checkpoint_steps.len());
    let mut loss = Vec::with_capacity(run.steps + 1);
    let mut pending = run.checkpoint_steps.iter().peekable();
    let mut final_val_loss = f64::NAN;

    for step in 0..=run.steps {
        let mut grads = model.weights.zeros_like();
        let batch: Vec<&Vec<Token>> = (0..run.batch_size)
            .map(|_| &data.train[batch_rng.random_range(0..data.train.len())])
            .collect();
        let targets: usize = batch.iter().map(|s| s.len() - 1).sum();
        let weight = 1.0 / targets as f64;
        let mut batch_loss = 0.0;
        for seq in batch {
            let keep: Vec<f64> = (0..n_layers)
                .map(|_| {
                    if run.block_skip > 0.0 && skip_rng.random_bool(run.block_skip) {
                        0.0
                    } else if run.block_skip > 0.0 {
                        keep_scale
                    } else {
                        1.0
                    }
                })
                .collect();
            batch_loss += if step < run.steps {
                accumulate_gradients(&model, seq, &keep, weight, &mut grads)?
            } else {
                sequence_loss(&model, seq, &keep)?
            };
        }
        let train_loss = batch_loss * weight;
        if !train_loss.is_finite() {
            return Err(LabError::TrainingDiverged { step, loss: train_loss });
        }

        let is_checkpoint = pending.peek().is_some_and(|&&s| s == step);
        let val_loss = if step % run.eval_every == 0 || step == run.steps || is_checkpoint {
            let v = mean_loss(&model, &data.val)?;
            if !v.is_finite() {
                return Err(LabError::TrainingDiverged { step, loss: v });
            }
            log::info!("step {step}: train {train_loss:.4} val {v:.4}");
            Some(v)
        } else {
            None
        };
        if step == run.steps {
            final_val_loss = val_loss.expect("evaluated at the last step");
        }
        loss.push(LossRow {
            step,
            train_loss,
            val_loss,
        });

        if is_checkpoint {
            pending.next();
            let path = match out_dir {
                Some(dir) => {
                    let path = dir.join(checkpoint_file_name(step));
                    let mut meta = BTreeMap::new();
                    meta.insert("step".to_string(), serde_json::json!(step));
                    meta.insert("seed".to_string(), serde_json::json!(run.seed));
                    meta.insert("block_skip".to_string(), serde_json::json!(run.block_skip));
                    std::fs::create_dir_all(dir)
                        .map_err(|e| coupling_core::Error::InvalidInput(format!("{}: {e}", dir.display())))?;
                    save_checkpoint(&model, &path, meta)?;
                    Some(path)
                }
                None => None,
            };
            checkpoints.push(Checkpoint {
                step,
                model: model.clone(),
                path,
            });
        }

        if step < run.steps {
            if grads.slices().iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(LabError::TrainingDiverged { step, loss: train_loss });
            }
            adam.step(&run.optimizer, &mut model.weights, &grads);
        }
    }

    if let Some(dir) = out_dir {
        write_loss_csv(dir, &loss)?;
    }
    Ok(TrainOutput {
        checkpoints,
        loss,
        final_model: model,
        final_val_loss,
    })
}

pub fn write_loss_csv(dir: &Path, rows: &[LossRow]) -> Result<PathBuf> {
    let mut table = Table::new(&LOSS_CSV);
    for r in rows {
        table.push(row![r.step, fmt_f64(r.train_loss), fmt_opt(r.val_loss)]);
    }
    Ok(table.write(dir)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{generate_task, SyntheticTask, TaskKind};
    use coupling_core::model::PosEncoding;

    fn setup(lr: f64, steps: usize) -> (TrainRun, TaskData) {
        let task = SyntheticTask {
            kind: TaskKind::MarkovChain { order: 1, alphabet: 6 },
            seed: 1,
            train_size: 64,
            val_size: 16,
            seq_len: 10,
        };
        let run = TrainRun {
            config: ModelConfig {
                n_layers: 2,
                d_model: 16,
                n_heads: 2,
                d_ff: 32,
                d_vocab: 6,
                max_seq: 10,
                pos_encoding: PosEncoding::Rope,
                ln_epsilon: 1e-5,
                final_ln: true,
            },
            optimizer: OptimizerConfig {
                lr,
                ..Default::default()
            },
            steps,
            batch_size: 4,
            checkpoint_steps: vec![0, steps],
            seed: 9,
            block_skip: 0.0,
            eval_every: 5,
        };
        (run, generate_task(&task).unwrap())
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (run, data) = setup(0.0, 6);
        let out = train(&run, &data, None).unwrap();
        assert_eq!(out.checkpoints[0].model, out.checkpoints[1].model);
        assert_eq!(out.final_model, out.checkpoints[0].model);
    }

    #[test]
    fn loss_decreases_and_runs_repeat_bitwise() {
        let (run, data) = setup(1e-2, 40);
        let a = train(&run, &data, None).unwrap();
        let b = train(&run, &data, None).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.final_model, b.final_model);
        let first = a.loss[0].val_loss.unwrap();
        assert!(a.final_val_loss < first, "{first} -> {}", a.final_val_loss);
    }

    #[test]
    fn block_skip_changes_the_trajectory_deterministically() {
        let (mut run, data) = setup(1e-2, 10);
        run.block_skip = 0.5;
        let a = train(&run, &data, None).unwrap();
        let b = train(&run, &data, None).unwrap();
        assert_eq!(a.final_model, b.final_model);
        run.block_skip = 0.0;
        let c = train(&run, &data, None).unwrap();
        assert_ne!(a.final_model, c.final_model);
    }

    #[test]
    fn run_validation() {
        let (mut run, data) = setup(1e-3, 10);
        run.checkpoint_steps = vec![5, 2];
        assert!(matches!(train(&run, &data, None), Err(LabError::InvalidRun(_))));
        run.checkpoint_steps = vec![0, 11];
        assert!(run.validate().is_err());
        run.checkpoint_steps = vec![0];
        run.optimizer.lr = -1.0;
        assert!(run.validate().is_err());
        run.optimizer.lr = 1e-3;
        run.config.d_vocab = 3;
        assert!(matches!(train(&run, &data, None), Err(LabError::InvalidRun(_))));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (mut run, data) = setup(1e200, 5);
        run.optimizer.weight_decay = 0.0;
        run.config.final_ln = false;
        match train(&run, &data, None) {
            Err(LabError::TrainingDiverged { .. }) => {}
            Ok(out) => panic!("expected divergence, final val {}", out.final_val_loss),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn checkpoint_grid_shape() {
        assert_eq!(
            default_checkpoint_grid(100, 32),
            vec![0, 1, 2, 4, 8, 16, 32, 64, 96, 100]
        );
        assert_eq!(default_checkpoint_grid(4, 32), vec![0, 1, 2, 4]);
    }
}
