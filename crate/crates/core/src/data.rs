//! Byte-level corpora and deterministic batching for causal and masked
//! objectives.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 256;
pub const MASK: usize = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn tokenize_bytes(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`tokenize_bytes`]; special tokens have no byte and are dropped.
pub fn detokenize(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub paths: Vec<String>,
    /// Fraction of the corpus (contiguous prefix) used for training.
    pub train_fraction: f64,
    /// Bytes of generated text used when `paths` is empty.
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
    pub mask_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            paths: Vec::new(),
            train_fraction: 0.9,
            synthetic_bytes: 1 << 20,
            synthetic_seed: 7,
            mask_prob: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train_tokens: Vec<usize>,
    pub valid_tokens: Vec<usize>,
    pub vocab_size: usize,
}

impl Corpus {
    /// Splits `bytes` into a training prefix and a validation suffix.
    pub fn from_bytes(bytes: &[u8], train_fraction: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "train fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        let tokens = tokenize_bytes(bytes);
        let cut = (tokens.len() as f64 * train_fraction).round() as usize;
        Ok(Self {
            valid_tokens: tokens[cut..].to_vec(),
            train_tokens: tokens[..cut].to_vec(),
            vocab_size: VOCAB_SIZE,
        })
    }

    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let bytes = if cfg.paths.is_empty() {
            synthetic_text(cfg.synthetic_bytes, cfg.synthetic_seed)
        } else {
            let mut all = Vec::new();
            for p in &cfg.paths {
                all.extend(std::fs::read(Path::new(p))?);
            }
            all
        };
        Self::from_bytes(&bytes, cfg.train_fraction)
    }
}

/// One batch of `batch_size` sequences of `seq_len` tokens, flattened
/// row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Batch {
    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Infinite stream of next-token batches over non-overlapping windows,
/// reshuffled every epoch.
pub struct ClmBatches<'a> {
    tokens: &'a [usize],
    batch_size: usize,
    seq_len: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

pub fn make_clm_batches(tokens: &[usize], batch_size: usize, seq_len: usize, seed: u64) -> Result<ClmBatches<'_>> {
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::Validation("batch_size and seq_len must be positive".into()));
    }
    if tokens.len() < seq_len + 1 {
        return Err(Error::CorpusTooSmall {
            needed: seq_len + 1,
            have: tokens.len(),
        });
    }
    let chunks = (tokens.len() - 1) / seq_len;
    let mut it = ClmBatches {
        tokens,
        batch_size,
        seq_len,
        order: (0..chunks).collect(),
        cursor: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    it.order.shuffle(&mut it.rng);
    Ok(it)
}

impl ClmBatches<'_> {
    pub fn chunks_per_epoch(&self) -> usize {
        self.order.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for ClmBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let picked = &self.order[self.cursor..end];
        self.cursor = end;
        let s = self.seq_len;
        let mut inputs = Vec::with_capacity(picked.len() * s);
        let mut targets = Vec::with_capacity(picked.len() * s);
        for &c in picked {
            inputs.extend_from_slice(&self.tokens[c * s..c * s + s]);
            targets.extend_from_slice(&self.tokens[c * s + 1..c * s + s + 1]);
        }
        Some(Batch {
            batch_size: picked.len(),
            seq_len: s,
            loss_mask: vec![true; inputs.len()],
            inputs,
            targets,
        })
    }
}

/// Infinite stream of masked-LM batches: each position is selected with
/// `mask_prob`; selected inputs become MASK (80%), a random byte (10%) or
/// stay unchanged (10%).
pub struct MlmBatches<'a> {
    tokens: &'a [usize],
    batch_size: usize,
    seq_len: usize,
    mask_prob: f64,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

pub fn make_mlm_batches(
    tokens: &[usize],
    batch_size: usize,
    seq_len: usize,
    mask_prob: f64,
    seed: u64,
) -> Result<MlmBatches<'_>> {
    if !(0.0..1.0).contains(&mask_prob) {
        return Err(Error::Validation(format!(
            "mask_prob must lie in [0, 1), got {mask_prob}"
        )));
    }
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::Validation("batch_size and seq_len must be positive".into()));
    }
    if tokens.len() < seq_len {
        return Err(Error::CorpusTooSmall {
            needed: seq_len,
            have: tokens.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..tokens.len() / seq_len).collect();
    order.shuffle(&mut rng);
    Ok(MlmBatches {
        tokens,
        batch_size,
        seq_len,
        mask_prob,
        order,
        cursor: 0,
        rng,
    })
}

fn corrupt(window: &[usize], mask_prob: f64, rng: &mut impl Rng, batch: &mut Batch) {
    for &t in window {
        let selected = mask_prob > 0.0 && rng.random::<f64>() < mask_prob;
        let input = if selected {
            let r: f64 = rng.random();
            if r < 0.8 {
                MASK
            } else if r < 0.9 {
                rng.random_range(0..256)
            } else {
                t
            }
        } else {
            t
        };
        batch.inputs.push(input);
        batch.targets.push(t);
        batch.loss_mask.push(selected);
    }
}

impl Iterator for MlmBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let s = self.seq_len;
        let mut batch = Batch {
            batch_size: end - self.cursor,
            seq_len: s,
            inputs: Vec::new(),
            targets: Vec::new(),
            loss_mask: Vec::new(),
        };
        for i in self.cursor..end {
            let c = self.order[i];
            corrupt(
                &self.tokens[c * s..c * s + s],
                self.mask_prob,
                &mut self.rng,
                &mut batch,
            );
        }
        self.cursor = end;
        Some(batch)
    }
}

/// Fixed evaluation batches: the first `max_batches` consecutive windows of
/// `tokens`, in order. Masked batches use a fixed corruption seed.
pub fn eval_batches(
    tokens: &[usize],
    batch_size: usize,
    seq_len: usize,
    max_batches: usize,
    masked: Option<(f64, u64)>,
) -> Result<Vec<Batch>> {
    let mut out = Vec::new();
    match masked {
        None => {
            if tokens.len() < seq_len + 1 {
                return Err(Error::CorpusTooSmall {
                    needed: seq_len + 1,
                    have: tokens.len(),
                });
            }
            let chunks = (tokens.len() - 1) / seq_len;
            let s = seq_len;
            for start in (0..chunks).step_by(batch_size).take(max_batches) {
                let end = (start + batch_size).min(chunks);
                let mut b = Batch {
                    batch_size: end - start,
                    seq_len: s,
                    inputs: Vec::new(),
                    targets: Vec::new(),
                    loss_mask: Vec::new(),
                };
                for c in start..end {
                    b.inputs.extend_from_slice(&tokens[c * s..c * s + s]);
                    b.targets.extend_from_slice(&tokens[c * s + 1..c * s + s + 1]);
                }
                b.loss_mask = vec![true; b.inputs.len()];
                out.push(b);
            }
        }
        Some((mask_prob, seed)) => {
            if tokens.len() < seq_len {
                return Err(Error::CorpusTooSmall {
                    needed: seq_len,
                    have: tokens.len(),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let chunks = tokens.len() / seq_len;
            let s = seq_len;
            for start in (0..chunks).step_by(batch_size).take(max_batches) {
                let end = (start + batch_size).min(chunks);
                let mut b = Batch {
                    batch_size: end - start,
                    seq_len: s,
                    inputs: Vec::new(),
                    targets: Vec::new(),
                    loss_mask: Vec::new(),
                };
                for c in start..end {
                    corrupt(&tokens[c * s..c * s + s], mask_prob, &mut rng, &mut b);
                }
                out.push(b);
            }
        }
    }
    Ok(out)
}

const SUBJECTS: &[&str] = &[
    "the model",
    "a layer",
    "the optimizer",
    "every gradient",
    "the network",
    "our baseline",
    "the attention head",
    "a small transformer",
    "the residual stream",
    "this experiment",
    "the learning rate",
    "each token",
    "the validation loss",
    "a careful reader",
    "the scale",
];
const VERBS: &[&str] = &[
    "improves",
    "reduces",
    "increases",
    "stabilizes",
    "follows",
    "changes",
    "matches",
    "exceeds",
    "normalizes",
    "measures",
    "predicts",
    "ignores",
    "tracks",
    "shapes",
    "limits",
];
const OBJECTS: &[&str] = &[
    "the perplexity",
    "its own output",
    "the earlier layers",
    "the later layers",
    "every step",
    "the training curve",
    "a larger batch",
    "the final score",
    "the head scale",
    "the warmup",
    "the mismatch",
    "a random seed",
    "the feedforward block",
    "the norm",
    "the signal",
];
const ADVERBS: &[&str] = &[
    "quickly",
    "slowly",
    "again",
    "at first",
    "in practice",
    "by design",
    "over time",
    "early",
    "late in training",
    "without warning",
    "on average",
    "per layer",
];
const JOINERS: &[&str] = &[", and ", ", but ", " while ", " because ", " so "];

/// Deterministic English-like text from a small stochastic grammar with
/// Zipf-skewed word choice.
pub fn synthetic_text(n_bytes: usize, seed: u64) -> Vec<u8> {
    fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
        // P(i) ∝ 1/(i+1)
        let h: f64 = (1..=words.len()).map(|i| 1.0 / i as f64).sum();
        let mut u = rng.random::<f64>() * h;
        for (i, w) in words.iter().enumerate() {
            u -= 1.0 / (i + 1) as f64;
            if u <= 0.0 {
                return w;
            }
        }
        words[words.len() - 1]
    }
    fn clause(rng: &mut ChaCha8Rng, out: &mut String) {
        out.push_str(pick(rng, SUBJECTS));
        out.push(' ');
        out.push_str(pick(rng, VERBS));
        out.push(' ');
        out.push_str(pick(rng, OBJECTS));
        if rng.random::<f64>() < 0.4 {
            out.push(' ');
            out.push_str(pick(rng, ADVERBS));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(n_bytes + 256);
    let mut sentences_in_paragraph = 0;
    while text.len() < n_bytes {
        let mut s = String::new();
        clause(&mut rng, &mut s);
        if rng.random::<f64>() < 0.35 {
            s.push_str(pick(&mut rng, JOINERS));
            clause(&mut rng, &mut s);
        }
        let mut chars = s.chars();
        if let Some(first) = chars.next() {
            text.extend(first.to_uppercase());
            text.push_str(chars.as_str());
        }
        text.push_str(if rng.random::<f64>() < 0.9 { ". " } else { "? " });
        sentences_in_paragraph += 1;
        if sentences_in_paragraph >= 6 && rng.random::<f64>() < 0.3 {
            text.push('\n');
            sentences_in_paragraph = 0;
        }
    }
    let mut bytes = text.into_bytes();
    bytes.truncate(n_bytes);
    bytes
}
