//! Seeded order-2 Markov language-modeling task.
//!
//! The successor distribution of a context `(a, b)` depends on `b` and on
//! the class `a mod context_classes` of `a`: each of those contexts has a
//! small set of successor tokens with skewed probabilities, so a model that
//! attends to the previous two positions can get well below the uniform
//! loss `ln(vocab)`. With `context_classes == vocab_size` every pair is its
//! own context.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Successors per context.
    pub branching: usize,
    /// Distinct classes of the older context token.
    pub context_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 128,
            branching: 4,
            context_classes: 4,
            n_train: 1024,
            n_val: 64,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config(format!(
                "vocab size {} must be at least 2",
                self.vocab_size
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::config("sequences need at least 2 tokens"));
        }
        if self.branching == 0 || self.branching > self.vocab_size {
            return Err(Error::config(format!(
                "branching {} must be in 1..={}",
                self.branching, self.vocab_size
            )));
        }
        if self.context_classes == 0 || self.context_classes > self.vocab_size {
            return Err(Error::config(format!(
                "context classes {} must be in 1..={}",
                self.context_classes, self.vocab_size
            )));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::config(
                "train and validation splits must be non-empty",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticLmTask {
    pub config: TaskConfig,
    successors: Vec<Vec<usize>>,
    probs: Vec<Vec<f64>>,
    weights: Vec<WeightedIndex<f64>>,
    train: Vec<Vec<usize>>,
    val: Vec<Vec<usize>>,
}

impl SyntheticLmTask {
    pub fn new(config: TaskConfig) -> Result<Self> {
        config.validate()?;
        let v = config.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tokens: Vec<usize> = (0..v).collect();
        let contexts = config.context_classes * v;
        let mut successors = Vec::with_capacity(contexts);
        let mut probs = Vec::with_capacity(contexts);
        let mut weights = Vec::with_capacity(contexts);
        for _ in 0..contexts {
            successors.push(
                tokens
                    .choose_multiple(&mut rng, config.branching)
                    .copied()
                    .collect(),
            );
            // geometric-ish weights: the first successor dominates
            let w: Vec<f64> = (0..config.branching)
                .map(|i| rng.gen_range(0.5..1.0) * 0.5f64.powi(i as i32))
                .collect();
            let sum: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|x| x / sum).collect();
            weights.push(WeightedIndex::new(&p).expect("positive weights"));
            probs.push(p);
        }
        let mut task = Self {
            config,
            successors,
            probs,
            weights,
            train: Vec::new(),
            val: Vec::new(),
        };

        let mut seen = HashSet::new();
        let mut budget = 100 * (config.n_train + config.n_val);
        let mut fill = |task: &Self, rng: &mut ChaCha8Rng, n: usize| -> Result<Vec<Vec<usize>>> {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                if budget == 0 {
                    return Err(Error::config(
                        "task cannot produce enough distinct sequences for disjoint splits",
                    ));
                }
                budget -= 1;
                let s = task.sample(rng);
                if seen.insert(s.clone()) {
                    out.push(s);
                }
            }
            Ok(out)
        };
        let val = fill(
            &task,
            &mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_0A11),
            config.n_val,
        )?;
        let train = fill(
            &task,
            &mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            config.n_train,
        )?;
        task.val = val;
        task.train = train;
        Ok(task)
    }

    fn context(&self, a: usize, b: usize) -> usize {
        (a % self.config.context_classes) * self.config.vocab_size + b
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let v = self.config.vocab_size;
        let mut s = Vec::with_capacity(self.config.seq_len);
        s.push(rng.gen_range(0..v));
        s.push(rng.gen_range(0..v));
        while s.len() < self.config.seq_len {
            let ctx = self.context(s[s.len() - 2], s[s.len() - 1]);
            let pick = self.weights[ctx].sample(rng);
            s.push(self.successors[ctx][pick]);
        }
        s
    }

    pub fn train_set(&self) -> &[Vec<usize>] {
        &self.train
    }

    pub fn val_set(&self) -> &[Vec<usize>] {
        &self.val
    }

    /// Training batch for `step`, drawn from the train split by a stream
    /// keyed on `(seed, step)`; identical arguments give identical batches.
    pub fn train_batch(&self, seed: u64, step: usize, batch_size: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step as u64);
        (0..batch_size)
            .map(|_| self.train[rng.gen_range(0..self.train.len())].clone())
            .collect()
    }

    /// First `n` validation sequences (all of them if `n` exceeds the split).
    pub fn val_batch(&self, n: usize) -> Vec<Vec<usize>> {
        self.val.iter().take(n.max(1)).cloned().collect()
    }

    /// Cross-entropy of the generating chain itself on the validation split,
    /// skipping the two uniformly drawn start tokens (a floor for any model).
    pub fn oracle_loss(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in &self.val {
            for t in 2..s.len() {
                let ctx = self.context(s[t - 2], s[t - 1]);
                let pos = self.successors[ctx]
                    .iter()
                    .position(|&x| x == s[t])
                    .expect("sampled successor");
                total -= self.probs[ctx][pos].ln();
                count += 1;
            }
        }
        total / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskConfig {
        TaskConfig {
            vocab_size: 16,
            seq_len: 12,
            n_train: 40,
            n_val: 8,
            ..TaskConfig::default()
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = SyntheticLmTask::new(small()).unwrap();
        let b = SyntheticLmTask::new(small()).unwrap();
        assert_eq!(a.train_set(), b.train_set());
        assert_eq!(a.val_set(), b.val_set());
        assert_eq!(a.train_batch(3, 7, 4), b.train_batch(3, 7, 4));
        assert_ne!(a.train_batch(3, 7, 4), a.train_batch(3, 8, 4));
        let val: HashSet<_> = a.val_set().iter().collect();
        assert!(a.train_set().iter().all(|s| !val.contains(s)));
        assert!(a.train_set().iter().flatten().all(|&t| t < 16));
        assert!(a.train_set().iter().all(|s| s.len() == 12));
    }

    #[test]
    fn oracle_loss_is_below_uniform() {
        let t = SyntheticLmTask::new(small()).unwrap();
        let l = t.oracle_loss();
        assert!(l > 0.0 && l < (16f64).ln() * 0.5, "{l}");
        for p in &t.probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transitions_follow_the_chain() {
        let t = SyntheticLmTask::new(small()).unwrap();
        for s in t.train_set() {
            for i in 2..s.len() {
                assert!(t.successors[(s[i - 2] % 4) * 16 + s[i - 1]].contains(&s[i]));
            }
        }
    }

    #[test]
    fn config_errors() {
        for bad in [
            TaskConfig {
                vocab_size: 0,
                ..small()
            },
            TaskConfig {
                seq_len: 1,
                ..small()
            },
            TaskConfig {
                branching: 0,
                ..small()
            },
            TaskConfig {
                n_val: 0,
                ..small()
            },
            TaskConfig {
                context_classes: 0,
                ..small()
            },
            TaskConfig {
                vocab_size: 2,
                branching: 1,
                context_classes: 1,
                seq_len: 3,
                n_train: 10,
                n_val: 1,
                seed: 0,
            },
        ] {
            assert!(matches!(SyntheticLmTask::new(bad), Err(Error::Config(_))));
        }
    }
}
