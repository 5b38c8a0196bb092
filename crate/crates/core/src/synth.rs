//! Synthetic sequence tasks laid out for teacher forcing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
/// First payload symbol.
pub const FIRST_SYMBOL: usize = 4;

/// Sample indices at or above this offset form the held-out split.
pub const HELDOUT_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `<bos> x <sep> x <eos>`; loss on the second copy.
    Copy,
    /// `<bos> x <sep> reverse(x) <eos>`; loss on the reversed part.
    Reverse,
    /// Text from a fixed random bigram source; loss everywhere.
    CharLm,
    /// `<bos> x <sep> π(x) <eos>` for a fixed symbol permutation `π`.
    Substitute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTask {
    pub kind: TaskKind,
    /// Payload length is uniform in `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthTask {
    fn default() -> Self {
        SynthTask {
            kind: TaskKind::Copy,
            min_len: 1,
            max_len: 8,
            seed: 0,
        }
    }
}

/// One example: model inputs and next-token labels, unpadded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub inputs: Vec<usize>,
    pub labels: Vec<Option<usize>>,
}

impl SynthTask {
    /// Longest input sequence this task produces.
    pub fn max_seq(&self) -> usize {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse | TaskKind::Substitute => 2 * self.max_len + 2,
            TaskKind::CharLm => self.max_len,
        }
    }

    pub fn validate(&self, vocab: usize, n: usize) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("task.min_len", "need 1 <= min_len <= max_len"));
        }
        if vocab <= FIRST_SYMBOL {
            return Err(Error::config("model.vocab", "no room for payload symbols"));
        }
        if self.max_seq() > n {
            return Err(Error::config(
                "task.max_len",
                format!("sequences of up to {} tokens exceed model.n = {n}", self.max_seq()),
            ));
        }
        Ok(())
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// Example `index`; a pure function of `(kind, seed, index)`.
    pub fn example(&self, index: u64, vocab: usize) -> Example {
        let mut rng = self.rng(index);
        let len = rng.random_range(self.min_len..=self.max_len);
        let symbols = vocab - FIRST_SYMBOL;
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse | TaskKind::Substitute => {
                let payload: Vec<usize> = (0..len).map(|_| FIRST_SYMBOL + rng.random_range(0..symbols)).collect();
                let target: Vec<usize> = match self.kind {
                    TaskKind::Reverse => payload.iter().rev().copied().collect(),
                    TaskKind::Substitute => {
                        let pi = self.permutation(symbols);
                        payload.iter().map(|&x| FIRST_SYMBOL + pi[x - FIRST_SYMBOL]).collect()
                    }
                    _ => payload.clone(),
                };
                prompt_target(&payload, &target)
            }
            TaskKind::CharLm => {
                let table = self.bigram_table(symbols);
                let mut seq = vec![BOS];
                let mut prev = rng.random_range(0..symbols);
                seq.push(FIRST_SYMBOL + prev);
                while seq.len() <= len {
                    let u: f64 = rng.random();
                    let row = &table[prev];
                    prev = row.iter().position(|&c| u < c).unwrap_or(symbols - 1);
                    seq.push(FIRST_SYMBOL + prev);
                }
                let inputs = seq[..seq.len() - 1].to_vec();
                let labels = seq[1..].iter().map(|&t| Some(t)).collect();
                Example { inputs, labels }
            }
        }
    }

    /// Cumulative next-symbol distributions, skewed so that each symbol has
    /// two likely successors.
    fn bigram_table(&self, symbols: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_b16a);
        (0..symbols)
            .map(|_| {
                let mut w: Vec<f64> = (0..symbols).map(|_| rng.random::<f64>() * 0.1).collect();
                for _ in 0..2 {
                    w[rng.random_range(0..symbols)] += 1.0;
                }
                let total: f64 = w.iter().sum();
                let mut acc = 0.0;
                w.iter()
                    .map(|v| {
                        acc += v / total;
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    /// The symbol permutation used by [`TaskKind::Substitute`].
    pub fn permutation(&self, symbols: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7065_726d);
        let mut pi: Vec<usize> = (0..symbols).collect();
        pi.shuffle(&mut rng);
        pi
    }

    /// `count` consecutive examples starting at `start`, padded to `seq`.
    pub fn batch(&self, start: u64, count: usize, vocab: usize, seq: usize) -> TokenBatch {
        let mut inputs = Vec::with_capacity(count * seq);
        let mut labels = Vec::with_capacity(count * seq);
        for i in 0..count {
            let ex = self.example(start + i as u64, vocab);
            assert!(ex.inputs.len() <= seq, "example longer than the padded length");
            let pad = seq - ex.inputs.len();
            inputs.extend_from_slice(&ex.inputs);
            inputs.extend(std::iter::repeat_n(PAD, pad));
            labels.extend_from_slice(&ex.labels);
            labels.extend(std::iter::repeat_n(None, pad));
        }
        TokenBatch { seq, inputs, labels }
    }
}

fn prompt_target(payload: &[usize], target: &[usize]) -> Example {
    let mut seq = vec![BOS];
    seq.extend_from_slice(payload);
    seq.push(SEP);
    let answer_start = seq.len();
    seq.extend_from_slice(target);
    seq.push(EOS);
    let inputs = seq[..seq.len() - 1].to_vec();
    let labels = (1..seq.len())
        .map(|i| (i >= answer_start).then_some(seq[i]))
        .collect();
    Example { inputs, labels }
}

/// Training batches `first..first + count` of `batch_size` examples each.
pub fn synth_batches(
    task: &SynthTask,
    batch_size: usize,
    first: u64,
    count: usize,
    vocab: usize,
    seq: usize,
) -> impl Iterator<Item = TokenBatch> + '_ {
    (0..count as u64).map(move |b| task.batch((first + b) * batch_size as u64, batch_size, vocab, seq))
}

/// A held-out batch disjoint from every training batch.
pub fn heldout_batch(task: &SynthTask, count: usize, vocab: usize, seq: usize) -> TokenBatch {
    task.batch(HELDOUT_OFFSET, count, vocab, seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(kind: TaskKind) -> SynthTask {
        SynthTask {
            kind,
            min_len: 3,
            max_len: 3,
            seed: 9,
        }
    }

    #[test]
    fn copy_layout() {
        let p = [4, 5, 6];
        let ex = prompt_target(&p, &p);
        // <bos> a b c <sep> a b c
        assert_eq!(ex.inputs, vec![BOS, 4, 5, 6, SEP, 4, 5, 6]);
        assert_eq!(ex.labels, vec![None, None, None, None, Some(4), Some(5), Some(6), Some(EOS)]);
    }

    #[test]
    fn reverse_target_segment() {
        let ex = task(TaskKind::Reverse).example(0, 32);
        let payload = &ex.inputs[1..4];
        let target: Vec<usize> = ex.labels.iter().flatten().copied().take(3).collect();
        let mut rev = payload.to_vec();
        rev.reverse();
        assert_eq!(target, rev);
    }

    #[test]
    fn substitute_applies_a_fixed_permutation() {
        let t = task(TaskKind::Substitute);
        let pi = t.permutation(28);
        let mut sorted = pi.clone();
        sorted.sort();
        assert_eq!(sorted, (0..28).collect::<Vec<_>>());
        for index in 0..20 {
            let ex = t.example(index, 32);
            let payload = &ex.inputs[1..4];
            let target: Vec<usize> = ex.labels.iter().flatten().copied().take(3).collect();
            let mapped: Vec<usize> = payload.iter().map(|&x| FIRST_SYMBOL + pi[x - FIRST_SYMBOL]).collect();
            assert_eq!(target, mapped);
        }
    }

    #[test]
    fn labels_are_inputs_shifted() {
        for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::CharLm, TaskKind::Substitute] {
            let ex = task(kind).example(5, 16);
            for i in 0..ex.inputs.len() - 1 {
                if let Some(l) = ex.labels[i] {
                    assert_eq!(l, ex.inputs[i + 1]);
                }
            }
        }
    }

    #[test]
    fn examples_are_deterministic() {
        for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::CharLm, TaskKind::Substitute] {
            let t = task(kind);
            assert_eq!(t.example(17, 32), t.example(17, 32));
        }
        let t = task(TaskKind::Copy);
        assert_ne!(t.example(1, 32), t.example(2, 32));
    }

    #[test]
    fn batches_are_padded() {
        let t = SynthTask {
            min_len: 1,
            max_len: 4,
            ..task(TaskKind::Copy)
        };
        let b = t.batch(0, 5, 32, 10);
        assert_eq!(b.inputs.len(), 50);
        assert_eq!(b.labels.len(), 50);
        assert!(b.inputs.iter().all(|&x| x < 32));
        let heldout = heldout_batch(&t, 5, 32, 10);
        assert_ne!(heldout, b);
    }

    #[test]
    fn overlong_tasks_are_rejected() {
        let t = SynthTask {
            max_len: 8,
            ..task(TaskKind::Copy)
        };
        assert!(t.validate(32, 17).is_err());
        assert!(t.validate(32, 18).is_ok());
    }
}
