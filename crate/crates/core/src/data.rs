//! Vocabulary, synthetic parallel corpora and padded batches.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id bijection. Ids `0..4` are PAD, BOS, EOS and UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Frequency-ranked vocabulary over whitespace tokens, ties broken
    /// lexicographically. `max_size` caps the number of regular tokens;
    /// the reserved tokens come on top.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocab> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in sentences {
            for tok in s.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        counts.retain(|t, _| !RESERVED_TOKENS.contains(t));
        if counts.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        // BTreeMap iteration is lexicographic and the sort is stable.
        ranked.sort_by(|a, b| b.1.cmp(&a.1));
        ranked.truncate(max_size);
        Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Vocabulary with the reserved tokens followed by `tokens` in order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Vocab> {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
        all.extend(tokens);
        let mut index = BTreeMap::new();
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED_TOKENS[UNK], |s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids of a whitespace-tokenized sentence, without EOS.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Tokens up to the first EOS, skipping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Synthetic tasks

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Task {
    Copy,
    Reverse,
    /// Word-by-word translation through a fixed random bijection with
    /// adjacent pairs swapped, optionally with untranslatable filler words.
    Lexicon,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Task> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "lexicon" => Ok(Task::Lexicon),
            other => Err(Error::Input(format!("unknown task `{other}` (expected copy, reverse or lexicon)"))),
        }
    }
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Lexicon => "lexicon",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSpec {
    pub task: Task,
    /// Number of distinct content words.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    pub seed: u64,
    /// Probability that a source position holds a filler word (lexicon task only).
    pub filler_rate: f64,
    pub filler_types: usize,
    /// Seed of the lexicon bijection, shared by train and test splits.
    pub lexicon_seed: u64,
}

impl SyntheticSpec {
    pub fn new(task: Task, vocab_size: usize, min_len: usize, max_len: usize, count: usize, seed: u64) -> Self {
        SyntheticSpec {
            task,
            vocab_size,
            min_len,
            max_len,
            count,
            seed,
            filler_rate: 0.0,
            filler_types: 4,
            lexicon_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("synthetic vocabulary must be non-empty".into()));
        }
        if self.min_len > self.max_len || self.max_len > 256 {
            return Err(Error::Config(format!(
                "length range {}..={} is invalid (maximum 256)",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.filler_rate) {
            return Err(Error::Config("filler rate must lie in [0, 1)".into()));
        }
        if self.filler_rate > 0.0 && (self.task != Task::Lexicon || self.filler_types == 0) {
            return Err(Error::Config("filler words need the lexicon task and at least one filler type".into()));
        }
        Ok(())
    }

    /// Source-word to target-word translation table.
    pub fn translation_table(&self) -> BTreeMap<String, String> {
        let perm = lexicon_permutation(self.vocab_size, self.lexicon_seed);
        (0..self.vocab_size)
            .map(|i| {
                let tgt = match self.task {
                    Task::Lexicon => target_word(perm[i]),
                    _ => content_word(i),
                };
                (content_word(i), tgt)
            })
            .collect()
    }
}

pub fn content_word(i: usize) -> String {
    format!("w{i}")
}

pub fn target_word(i: usize) -> String {
    format!("t{i}")
}

pub fn filler_word(i: usize) -> String {
    format!("f{i}")
}

pub fn is_filler(token: &str) -> bool {
    token.starts_with('f') && token[1..].parse::<usize>().is_ok()
}

/// Random bijection on `0..n`, a pure function of the seed.
pub fn lexicon_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c65_7869_636f_6e00);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Swap positions `2k` and `2k + 1`; an odd trailing element stays put.
pub fn swap_adjacent<T>(items: &mut [T]) {
    for pair in items.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
}

/// One generated sentence pair with its gold word alignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    /// Target position of each source position; `None` for filler words.
    pub alignment: Vec<Option<usize>>,
}

impl SyntheticPair {
    pub fn source_line(&self) -> String {
        self.source.join(" ")
    }

    pub fn target_line(&self) -> String {
        self.target.join(" ")
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticPair>> {
    spec.validate()?;
    let perm = lexicon_permutation(spec.vocab_size, spec.lexicon_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut source = Vec::with_capacity(len);
        let mut content = Vec::with_capacity(len);
        for _ in 0..len {
            if spec.filler_rate > 0.0 && rng.random_bool(spec.filler_rate) {
                source.push(filler_word(rng.random_range(0..spec.filler_types)));
            } else {
                let w = rng.random_range(0..spec.vocab_size);
                content.push((source.len(), w));
                source.push(content_word(w));
            }
        }
        let n = content.len();
        let mut alignment = vec![None; len];
        let target = match spec.task {
            Task::Copy => {
                for (k, &(pos, _)) in content.iter().enumerate() {
                    alignment[pos] = Some(k);
                }
                content.iter().map(|&(_, w)| content_word(w)).collect()
            }
            Task::Reverse => {
                for (k, &(pos, _)) in content.iter().enumerate() {
                    alignment[pos] = Some(n - 1 - k);
                }
                content.iter().rev().map(|&(_, w)| content_word(w)).collect()
            }
            Task::Lexicon => {
                let mut order: Vec<usize> = (0..n).collect();
                swap_adjacent(&mut order);
                // order[target position] = content index
                for (tpos, &k) in order.iter().enumerate() {
                    alignment[content[k].0] = Some(tpos);
                }
                order.iter().map(|&k| target_word(perm[content[k].1])).collect()
            }
        };
        out.push(SyntheticPair {
            source,
            target,
            alignment,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Batching

/// A tokenized sentence pair; both sides end with EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Example {
    pub fn encode(src_vocab: &Vocab, tgt_vocab: &Vocab, source: &str, target: &str) -> Example {
        let mut src = src_vocab.encode(source);
        src.push(EOS);
        let mut tgt = tgt_vocab.encode(target);
        tgt.push(EOS);
        Example { src, tgt }
    }

    /// Longer side including EOS.
    pub fn max_len(&self) -> usize {
        self.src.len().max(self.tgt.len())
    }
}

/// Padded, masked batch in row-major `[batch, len]` layout.
///
/// The decoder input is the target shifted right behind BOS; the decoder
/// output is the target itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelBatch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src_ids: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_mask: Vec<bool>,
    pub src_lengths: Vec<usize>,
    pub tgt_lengths: Vec<usize>,
}

impl ParallelBatch {
    pub fn from_examples(examples: &[&Example]) -> Result<ParallelBatch> {
        if examples.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for e in examples {
            if e.src.last() != Some(&EOS) || e.tgt.last() != Some(&EOS) {
                return Err(Error::Input("every sequence must end with EOS".into()));
            }
        }
        let batch = examples.len();
        let src_len = examples.iter().map(|e| e.src.len()).max().unwrap_or(1);
        let tgt_len = examples.iter().map(|e| e.tgt.len()).max().unwrap_or(1);
        let mut b = ParallelBatch {
            batch,
            src_len,
            tgt_len,
            src_ids: vec![PAD; batch * src_len],
            src_mask: vec![false; batch * src_len],
            tgt_in: vec![PAD; batch * tgt_len],
            tgt_out: vec![PAD; batch * tgt_len],
            tgt_mask: vec![false; batch * tgt_len],
            src_lengths: examples.iter().map(|e| e.src.len()).collect(),
            tgt_lengths: examples.iter().map(|e| e.tgt.len()).collect(),
        };
        for (r, e) in examples.iter().enumerate() {
            for (i, &id) in e.src.iter().enumerate() {
                b.src_ids[r * src_len + i] = id;
                b.src_mask[r * src_len + i] = true;
            }
            for (t, &id) in e.tgt.iter().enumerate() {
                b.tgt_out[r * tgt_len + t] = id;
                b.tgt_in[r * tgt_len + t] = if t == 0 { BOS } else { e.tgt[t - 1] };
                b.tgt_mask[r * tgt_len + t] = true;
            }
        }
        Ok(b)
    }

    pub fn num_src_tokens(&self) -> usize {
        self.src_lengths.iter().sum()
    }

    pub fn num_tgt_tokens(&self) -> usize {
        self.tgt_lengths.iter().sum()
    }
}

/// Drops pairs whose source or target (before EOS) exceeds `max_len` tokens.
pub fn filter_by_length(examples: Vec<Example>, max_len: usize) -> Vec<Example> {
    examples.into_iter().filter(|e| e.max_len() <= max_len + 1).collect()
}

/// One epoch of length-bucketed batches.
///
/// Examples are shuffled, stably sorted by length and cut into batches whose
/// `rows * longest` stays within `batch_tokens` (a batch always holds at
/// least one example). Batch order is shuffled afterwards.
pub fn make_batches<R: Rng + ?Sized>(
    examples: &[Example],
    batch_tokens: usize,
    rng: &mut R,
) -> Result<Vec<ParallelBatch>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| examples[i].max_len());
    let mut groups: Vec<Vec<&Example>> = Vec::new();
    let mut current: Vec<&Example> = Vec::new();
    for &i in &order {
        let e = &examples[i];
        let longest = current.iter().map(|x| x.max_len()).max().unwrap_or(0).max(e.max_len());
        if !current.is_empty() && (current.len() + 1) * longest > batch_tokens {
            groups.push(core::mem::take(&mut current));
        }
        current.push(e);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(rng);
    groups.iter().map(|g| ParallelBatch::from_examples(g)).collect()
}

/// Endless stream of batches, reshuffled every epoch.
pub struct Batcher {
    examples: Vec<Example>,
    batch_tokens: usize,
    rng: ChaCha8Rng,
    pending: Vec<ParallelBatch>,
    epoch: usize,
}

impl Batcher {
    pub fn new(examples: Vec<Example>, batch_tokens: usize, seed: u64) -> Result<Batcher> {
        if examples.is_empty() {
            return Err(Error::Input("no training examples".into()));
        }
        Ok(Batcher {
            examples,
            batch_tokens,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: Vec::new(),
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Result<ParallelBatch> {
        if self.pending.is_empty() {
            self.pending = make_batches(&self.examples, self.batch_tokens, &mut self.rng)?;
            self.pending.reverse();
            self.epoch += 1;
        }
        Ok(self.pending.pop().expect("non-empty epoch"))
    }
}
