//! Synthetic next-token tasks.
//!
//! Every sequence is drawn from a ChaCha8 stream keyed by the task seed:
//! stream 0 builds task tables, stream 1 the training split, stream 2 the
//! validation split. Validation sequences that also occur in the training
//! split are redrawn, so the splits are disjoint.

use std::collections::HashSet;

use coupling_core::model::Token;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Dirichlet concentration of each Markov transition row. Small values give
/// peaked, learnable transitions.
pub const MARKOV_CONCENTRATION: f64 = 0.2;
/// Upper bound on `alphabet^order` Markov contexts.
pub const MAX_MARKOV_CONTEXTS: usize = 1 << 16;
const REDRAW_FACTOR: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Order-`order` chain over `alphabet` symbols with Dirichlet rows.
    MarkovChain { order: usize, alphabet: usize },
    /// `x₁…x_span, SEP, x₁…x_span` with symbols `1..=alphabet` and `SEP = 0`.
    CopyTask { span: usize, alphabet: usize },
    /// `a₁, s₁, a₂, s₂, …` with `s_i = (a₁ + … + a_i) mod modulus`.
    ModularSum { modulus: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// Sequence length for Markov and modular tasks; copy sequences are
    /// always `2·span + 1` long.
    pub seq_len: usize,
}

impl SyntheticTask {
    pub fn vocab_size(&self) -> usize {
        match self.kind {
            TaskKind::MarkovChain { alphabet, .. } => alphabet,
            TaskKind::CopyTask { alphabet, .. } => alphabet + 1,
            TaskKind::ModularSum { modulus } => modulus,
        }
    }

    pub fn sequence_len(&self) -> usize {
        match self.kind {
            TaskKind::CopyTask { span, .. } => 2 * span + 1,
            _ => self.seq_len,
        }
    }

    /// Cross-entropy of uniform prediction over the vocabulary.
    pub fn uniform_baseline(&self) -> f64 {
        (self.vocab_size() as f64).ln()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidTask(m));
        if self.train_size == 0 {
            return bad("train_size must be positive".into());
        }
        if self.val_size == 0 {
            return bad("val_size must be positive".into());
        }
        match self.kind {
            TaskKind::MarkovChain { order, alphabet } => {
                if order == 0 || alphabet < 2 {
                    return bad(format!(
                        "markov chain needs order >= 1 and alphabet >= 2, got {order}, {alphabet}"
                    ));
                }
                let contexts = (alphabet as u128).checked_pow(order as u32);
                if contexts.is_none_or(|c| c > MAX_MARKOV_CONTEXTS as u128) {
                    return bad(format!("alphabet^order exceeds {MAX_MARKOV_CONTEXTS} contexts"));
                }
                if self.seq_len <= order {
                    return bad(format!("seq_len {} must exceed order {order}", self.seq_len));
                }
            }
            TaskKind::CopyTask { span, alphabet } => {
                if span == 0 || alphabet < 2 {
                    return bad(format!(
                        "copy task needs span >= 1 and alphabet >= 2, got {span}, {alphabet}"
                    ));
                }
            }
            TaskKind::ModularSum { modulus } => {
                if modulus < 2 {
                    return bad(format!("modulus must be >= 2, got {modulus}"));
                }
                if self.seq_len < 2 || !self.seq_len.is_multiple_of(2) {
                    return bad(format!("modular sum needs an even seq_len >= 2, got {}", self.seq_len));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Vec<Vec<Token>>,
    pub val: Vec<Vec<Token>>,
    /// Markov transition rows, indexed by context
    /// `Σ_i c_i · alphabet^(order-1-i)` (oldest symbol most significant).
    pub transitions: Option<Vec<Vec<f64>>>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn markov_table(rng: &mut ChaCha8Rng, contexts: usize, alphabet: usize) -> Vec<Vec<f64>> {
    let gamma = Gamma::new(MARKOV_CONCENTRATION, 1.0).expect("positive shape");
    (0..contexts)
        .map(|_| {
            let mut row: Vec<f64> = (0..alphabet).map(|_| gamma.sample(rng)).collect();
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            } else {
                row = vec![1.0 / alphabet as f64; alphabet];
            }
            row
        })
        .collect()
}

fn sample_row(rng: &mut ChaCha8Rng, row: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

struct Sampler<'a> {
    task: &'a SyntheticTask,
    table: Option<&'a [Vec<f64>]>,
}

impl Sampler<'_> {
    fn sequence(&self, rng: &mut ChaCha8Rng) -> Vec<Token> {
        let n = self.task.sequence_len();
        match self.task.kind {
            TaskKind::MarkovChain { order, alphabet } => {
                let table = self.table.expect("markov table");
                let mut seq: Vec<Token> = (0..order).map(|_| rng.random_range(0..alphabet) as Token).collect();
                let radix = alphabet;
                while seq.len() < n {
                    let ctx = seq[seq.len() - order..]
                        .iter()
                        .fold(0usize, |acc, &c| acc * radix + c as usize);
                    seq.push(sample_row(rng, &table[ctx]) as Token);
                }
                seq
            }
            TaskKind::CopyTask { span, alphabet } => {
                let head: Vec<Token> = (0..span).map(|_| rng.random_range(1..=alphabet) as Token).collect();
                let mut seq = head.clone();
                seq.push(0);
                seq.extend(head);
                seq
            }
            TaskKind::ModularSum { modulus } => {
                let mut seq = Vec::with_capacity(n);
                let mut sum = 0;
                while seq.len() < n {
                    let a = rng.random_range(0..modulus);
                    sum = (sum + a) % modulus;
                    seq.push(a as Token);
                    seq.push(sum as Token);
                }
                seq
            }
        }
    }
}

pub fn generate_task(task: &SyntheticTask) -> Result<TaskData> {
    task.validate()?;
    let transitions = match task.kind {
        TaskKind::MarkovChain { order, alphabet } => Some(markov_table(
            &mut stream(task.seed, 0),
            alphabet.pow(order as u32),
            alphabet,
        )),
        _ => None,
    };
    let sampler = Sampler {
        task,
        table: transitions.as_deref(),
    };
    let mut train_rng = stream(task.seed, 1);
    let train: Vec<Vec<Token>> = (0..task.train_size).map(|_| sampler.sequence(&mut train_rng)).collect();

    let seen: HashSet<&[Token]> = train.iter().map(Vec::as_slice).collect();
    let mut val_rng = stream(task.seed, 2);
    let mut val = Vec::with_capacity(task.val_size);
    let budget = task.val_size.saturating_mul(REDRAW_FACTOR);
    let mut draws = 0;
    while val.len() < task.val_size {
        if draws == budget {
            return Err(LabError::InvalidTask(format!(
                "could not draw {} validation sequences disjoint from the training split",
                task.val_size
            )));
        }
        draws += 1;
        let seq = sampler.sequence(&mut val_rng);
        if !seen.contains(seq.as_slice()) {
            val.push(seq);
        }
    }
    Ok(TaskData {
        train,
        val,
        transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(kind: TaskKind) -> SyntheticTask {
        SyntheticTask {
            kind,
            seed: 3,
            train_size: 200,
            val_size: 50,
            seq_len: 12,
        }
    }

    #[test]
    fn copy_sequences_repeat_after_separator() {
        let data = generate_task(&task(TaskKind::CopyTask { span: 4, alphabet: 6 })).unwrap();
        for seq in data.train.iter().chain(&data.val) {
            assert_eq!(seq.len(), 9);
            assert_eq!(seq[4], 0);
            assert_eq!(seq[..4], seq[5..]);
            assert!(seq[..4].iter().all(|&t| (1..=6).contains(&t)));
        }
    }

    #[test]
    fn modular_sums_accumulate() {
        let data = generate_task(&task(TaskKind::ModularSum { modulus: 7 })).unwrap();
        for seq in &data.train {
            let mut sum = 0;
            for pair in seq.chunks(2) {
                sum = (sum + pair[0]) % 7;
                assert_eq!(pair[1], sum);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_reproducible() {
        let spec = task(TaskKind::MarkovChain { order: 1, alphabet: 5 });
        let a = generate_task(&spec).unwrap();
        let b = generate_task(&spec).unwrap();
        assert_eq!(a, b);
        for v in &a.val {
            assert!(!a.train.contains(v));
        }
        let small = SyntheticTask {
            train_size: 40,
            val_size: 10,
            ..task(TaskKind::CopyTask { span: 2, alphabet: 2 })
        };
        // only four distinct copy sequences exist
        assert!(matches!(generate_task(&small), Err(LabError::InvalidTask(_))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = task(TaskKind::ModularSum { modulus: 5 });
        spec.train_size = 0;
        assert!(matches!(generate_task(&spec), Err(LabError::InvalidTask(_))));
        let spec = SyntheticTask {
            seq_len: 7,
            ..task(TaskKind::ModularSum { modulus: 5 })
        };
        assert!(spec.validate().is_err());
        assert!(task(TaskKind::MarkovChain { order: 0, alphabet: 4 })
            .validate()
            .is_err());
        assert!(task(TaskKind::MarkovChain { order: 9, alphabet: 8 })
            .validate()
            .is_err());
    }

    #[test]
    fn transition_rows_are_distributions() {
        let data = generate_task(&task(TaskKind::MarkovChain { order: 2, alphabet: 4 })).unwrap();
        let rows = data.transitions.unwrap();
        assert_eq!(rows.len(), 16);
        for row in rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bigram_frequencies_follow_the_transition_table() {
        let t = SyntheticTask {
            kind: TaskKind::MarkovChain { order: 1, alphabet: 4 },
            seed: 12,
            train_size: 2000,
            val_size: 10,
            seq_len: 50,
        };
        let data = generate_task(&t).unwrap();
        let rows = data.transitions.unwrap();
        let mut counts = vec![vec![0usize; 4]; 4];
        for seq in &data.train {
            for w in seq.windows(2) {
                counts[w[0] as usize][w[1] as usize] += 1;
            }
        }
        for (ctx, row) in rows.iter().enumerate() {
            let n: usize = counts[ctx].iter().sum();
            if n == 0 {
                continue;
            }
            for (next, &p) in row.iter().enumerate() {
                let freq = counts[ctx][next] as f64 / n as f64;
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!(
                    (freq - p).abs() <= 5.0 * se + 1e-9,
                    "context {ctx} -> {next}: {freq} vs {p}"
                );
            }
        }
    }
}
