//! Run, task and probe settings read from `key = value` spec files.

use coupling_core::model::{ModelConfig, PosEncoding, DEFAULT_LN_EPSILON};
use coupling_lab::experiment::{ProbeConfig, SweepRun};
use coupling_lab::task::{SyntheticTask, TaskKind};
use coupling_lab::train::{default_checkpoint_grid, OptimizerConfig, TrainRun};

use crate::error::{config, Result};
use crate::kv::KvDoc;

pub const TASK_KEYS: &[&str] = &[
    "task",
    "order",
    "alphabet",
    "span",
    "modulus",
    "task_seed",
    "train_size",
    "val_size",
    "seq_len",
];

pub const RUN_KEYS: &[&str] = &[
    "n_layers",
    "d_model",
    "n_heads",
    "d_ff",
    "d_vocab",
    "max_seq",
    "pos_encoding",
    "ln_epsilon",
    "final_ln",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "steps",
    "batch_size",
    "checkpoint_steps",
    "checkpoint_stride",
    "seed",
    "block_skip",
    "eval_every",
];

pub const PROBE_KEYS: &[&str] = &["probe_count", "probe_len", "k", "p", "self_layers"];

pub const SWEEP_KEYS: &[&str] = &["skip_rates", "seeds"];

pub const EMERGENCE_KEYS: &[&str] = &["checkpoint_dir"];

pub fn task_from(doc: &KvDoc) -> Result<SyntheticTask> {
    let name: String = doc.get_or("task", "markov_chain".to_string())?;
    let kind = match name.as_str() {
        "markov_chain" => TaskKind::MarkovChain {
            order: doc.get_or("order", 1)?,
            alphabet: doc.get_or("alphabet", 16)?,
        },
        "copy_task" => TaskKind::CopyTask {
            span: doc.get_or("span", 4)?,
            alphabet: doc.get_or("alphabet", 16)?,
        },
        "modular_sum" => TaskKind::ModularSum {
            modulus: doc.get_or("modulus", 7)?,
        },
        other => return Err(config(format!("unknown task '{other}'"))),
    };
    let task = SyntheticTask {
        kind,
        seed: doc.get_or("task_seed", 0)?,
        train_size: doc.get_or("train_size", 4096)?,
        val_size: doc.get_or("val_size", 128)?,
        seq_len: doc.get_or("seq_len", 32)?,
    };
    task.validate()?;
    Ok(task)
}

pub fn run_from(doc: &KvDoc, task: &SyntheticTask) -> Result<TrainRun> {
    let d_model = doc.get_or("d_model", 64)?;
    let pos: PosEncoding = doc.get_or("pos_encoding", PosEncoding::Rope)?;
    let model = ModelConfig {
        n_layers: doc.get_or("n_layers", 6)?,
        d_model,
        n_heads: doc.get_or("n_heads", 4)?,
        d_ff: doc.get_or("d_ff", 4 * d_model)?,
        d_vocab: doc.get_or("d_vocab", task.vocab_size())?,
        max_seq: doc.get_or("max_seq", task.sequence_len())?,
        pos_encoding: pos,
        ln_epsilon: doc.get_or("ln_epsilon", DEFAULT_LN_EPSILON)?,
        final_ln: doc.get_or("final_ln", true)?,
    };
    let defaults = OptimizerConfig::default();
    let optimizer = OptimizerConfig {
        lr: doc.get_or("lr", defaults.lr)?,
        beta1: doc.get_or("beta1", defaults.beta1)?,
        beta2: doc.get_or("beta2", defaults.beta2)?,
        eps: doc.get_or("eps", defaults.eps)?,
        weight_decay: doc.get_or("weight_decay", defaults.weight_decay)?,
    };
    let steps: usize = doc.get_or("steps", 1000)?;
    let checkpoint_steps = match doc.list::<usize>("checkpoint_steps")? {
        Some(list) if list.is_empty() => return Err(config("checkpoint_steps is empty")),
        Some(list) => list,
        None => default_checkpoint_grid(steps, doc.get_or("checkpoint_stride", 1024)?),
    };
    let run = TrainRun {
        config: model,
        optimizer,
        steps,
        batch_size: doc.get_or("batch_size", 8)?,
        checkpoint_steps,
        seed: doc.get_or("seed", 0)?,
        block_skip: doc.get_or("block_skip", 0.0)?,
        eval_every: doc.get_or("eval_every", 100)?,
    };
    run.validate()?;
    Ok(run)
}

pub fn probes_from(doc: &KvDoc, task: &SyntheticTask) -> Result<ProbeConfig> {
    let count = doc.get_or("probe_count", 4)?;
    let len = doc.get_or("probe_len", task.sequence_len().min(16))?;
    if count == 0 || len == 0 {
        return Err(config("probe_count and probe_len must be positive"));
    }
    let mut probes = ProbeConfig::from_task(task, count, len)?;
    probes.k = doc.get("k")?;
    probes.p = doc.get_or("p", 1.0)?;
    probes.self_layers = match doc.list::<usize>("self_layers")? {
        None => None,
        Some(v) if v.len() == 2 => Some((v[0], v[1])),
        Some(_) => return Err(config("self_layers takes two layer indices")),
    };
    Ok(probes)
}

/// One run per `(skip rate, seed)`, in that nesting order.
pub fn sweep_runs(doc: &KvDoc, base: &TrainRun) -> Result<Vec<SweepRun>> {
    let rates = doc.list::<f64>("skip_rates")?.unwrap_or_else(|| vec![0.0, 0.025, 0.05]);
    let seeds = doc
        .list::<u64>("seeds")?
        .unwrap_or_else(|| vec![base.seed, base.seed + 1]);
    let mut runs = Vec::new();
    for &rate in &rates {
        for &seed in &seeds {
            let run = TrainRun {
                block_skip: rate,
                seed,
                ..base.clone()
            };
            run.validate()?;
            runs.push(SweepRun {
                run_id: format!("skip{rate}-seed{seed}"),
                hyperparam: rate,
                run,
            });
        }
    }
    Ok(runs)
}
