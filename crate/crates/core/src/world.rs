//! Synthetic token world for end-to-end runs.
//!
//! The vocabulary is partitioned into a REFUSE token, harmful-topic
//! tokens, per-class task feature tokens, task answer tokens, compliance
//! tokens, a generic CHAT token, and noise. Alignment training maps
//! harmful prompts to REFUSE and benign prompts to CHAT, so refusal is
//! keyed to harmful tokens rather than being a blanket habit.
//! Fine-tuning maps task prompts to their class answer; harmful-mix
//! fine-tuning additionally maps harmful prompts to compliance tokens.
//! Every generator is deterministic for a given seed.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::refmodel::{Batch, RefModelConfig};

#[derive(Debug, Clone)]
pub struct World {
    pub vocab_size: usize,
    pub context_len: usize,
    pub refuse_token: u32,
    pub chat_token: u32,
    harmful: Range<u32>,
    n_classes: usize,
    feats_per_class: usize,
    feat_base: u32,
    answer_base: u32,
    comply: Range<u32>,
    noise: Range<u32>,
}

impl World {
    /// The stock 32-token world: 1 refuse, 8 harmful, 4 task classes of
    /// 3 feature tokens, 4 answers, 3 compliance tokens, 3 noise, 1 chat.
    pub fn standard() -> World {
        World {
            vocab_size: 32,
            context_len: 8,
            refuse_token: 0,
            chat_token: 31,
            harmful: 1..9,
            n_classes: 4,
            feats_per_class: 3,
            feat_base: 9,
            answer_base: 21,
            comply: 25..28,
            noise: 28..31,
        }
    }

    pub fn model_config(&self, hidden_dims: Vec<usize>, seed: u64) -> RefModelConfig {
        RefModelConfig::new(self.vocab_size, self.context_len, hidden_dims, seed)
            .expect("standard world dimensions are valid")
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn answer_token(&self, class: usize) -> u32 {
        assert!(class < self.n_classes);
        self.answer_base + class as u32
    }

    fn harmful_rows(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        (0..n * self.context_len)
            .map(|_| rng.gen_range(self.harmful.clone()))
            .collect()
    }

    /// Harmful prompts labeled with REFUSE: alignment training data and
    /// the target set for Fisher estimation.
    pub fn harmful_refusal_batch(&self, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = self.harmful_rows(n, &mut rng);
        Batch::new(self.context_len, tokens, vec![self.refuse_token; n])
            .expect("generated rows tile")
    }

    /// Harmful prompts labeled with compliance tokens: the unalignment
    /// recipe, and the contamination half of harmful-mix fine-tuning.
    pub fn harmful_comply_batch(&self, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = self.harmful_rows(n, &mut rng);
        let targets = (0..n).map(|_| rng.gen_range(self.comply.clone())).collect();
        Batch::new(self.context_len, tokens, targets).expect("generated rows tile")
    }

    fn task_rows(&self, n: usize, rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<usize>) {
        let mut tokens = Vec::with_capacity(n * self.context_len);
        let mut classes = Vec::with_capacity(n);
        for _ in 0..n {
            let class = rng.gen_range(0..self.n_classes);
            let lo = self.feat_base + (class * self.feats_per_class) as u32;
            let hi = lo + self.feats_per_class as u32;
            for _ in 0..self.context_len {
                if rng.gen::<f64>() < 0.15 {
                    tokens.push(rng.gen_range(self.noise.clone()));
                } else {
                    tokens.push(rng.gen_range(lo..hi));
                }
            }
            classes.push(class);
        }
        (tokens, classes)
    }

    /// Class-typed task prompts labeled with the class answer token.
    /// Mostly class feature tokens with occasional noise.
    pub fn task_batch(&self, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tokens, classes) = self.task_rows(n, &mut rng);
        let targets = classes.iter().map(|&c| self.answer_token(c)).collect();
        Batch::new(self.context_len, tokens, targets).expect("generated rows tile")
    }

    /// Task-shaped prompts labeled with the generic CHAT token: what an
    /// aligned assistant says to benign prompts it has no skill for.
    pub fn benign_chat_batch(&self, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tokens, _) = self.task_rows(n, &mut rng);
        Batch::new(self.context_len, tokens, vec![self.chat_token; n])
            .expect("generated rows tile")
    }
}

/// Writes a batch in the dataset text format: one line per row,
/// comma-separated tokens, a tab, then the target token.
pub fn write_batch(batch: &Batch, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (row, target) in batch.rows() {
        let toks: Vec<String> = row.iter().map(u32::to_string).collect();
        out.push_str(&toks.join(","));
        out.push('\t');
        out.push_str(&target.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads the dataset text format. The context length is taken from the
/// first row; every row must match it.
pub fn read_batch(path: &Path) -> Result<Batch> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    let mut context_len = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (row_part, target_part) = line.split_once('\t').ok_or(Error::MalformedDataset {
            line: lineno,
            reason: "missing tab separator".into(),
        })?;
        let row: Vec<u32> = row_part
            .split(',')
            .map(|t| {
                t.trim().parse::<u32>().map_err(|e| Error::MalformedDataset {
                    line: lineno,
                    reason: format!("bad token {t:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        match context_len {
            None => context_len = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::MalformedDataset {
                    line: lineno,
                    reason: format!("row has {} tokens, earlier rows have {c}", row.len()),
                })
            }
            _ => {}
        }
        let target = target_part
            .trim()
            .parse::<u32>()
            .map_err(|e| Error::MalformedDataset {
                line: lineno,
                reason: format!("bad target {target_part:?}: {e}"),
            })?;
        tokens.extend_from_slice(&row);
        targets.push(target);
    }
    let context_len = context_len.ok_or(Error::MalformedDataset {
        line: 0,
        reason: "dataset is empty".into(),
    })?;
    Batch::new(context_len, tokens, targets)
}
