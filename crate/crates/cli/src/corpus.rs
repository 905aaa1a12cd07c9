//! Parallel text corpora and synthetic task data.

use std::fs;
use std::path::Path;

use gdr_core::data::{content_word, filler_word, gen_synthetic, target_word, SyntheticSpec, Task, Vocab};

use crate::error::{CliError, Result};

/// Sentence pairs as whitespace-tokenized lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parallel {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
}

impl Parallel {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

/// Reads two aligned files, or a single tab-separated file when `tgt` is `None`.
pub fn read_parallel(src: &Path, tgt: Option<&Path>) -> Result<Parallel> {
    match tgt {
        Some(tgt) => {
            let sources = read_lines(src)?;
            let targets = read_lines(tgt)?;
            if sources.len() != targets.len() {
                return Err(CliError::Format(format!(
                    "{} has {} lines but {} has {}",
                    src.display(),
                    sources.len(),
                    tgt.display(),
                    targets.len()
                )));
            }
            Ok(Parallel { sources, targets })
        }
        None => {
            let mut out = Parallel::default();
            for (n, line) in read_lines(src)?.into_iter().enumerate() {
                let Some((s, t)) = line.split_once('\t') else {
                    return Err(CliError::Format(format!("{}:{}: expected a tab", src.display(), n + 1)));
                };
                out.sources.push(s.trim().to_string());
                out.targets.push(t.trim().to_string());
            }
            Ok(out)
        }
    }
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<Parallel> {
    let pairs = gen_synthetic(spec)?;
    Ok(Parallel {
        sources: pairs.iter().map(|p| p.source_line()).collect(),
        targets: pairs.iter().map(|p| p.target_line()).collect(),
    })
}

/// Complete vocabularies of a synthetic task, independent of the sample.
pub fn synthetic_vocabs(spec: &SyntheticSpec) -> Result<(Vocab, Vocab)> {
    let mut src: Vec<String> = (0..spec.vocab_size).map(content_word).collect();
    if spec.filler_rate > 0.0 {
        src.extend((0..spec.filler_types).map(filler_word));
    }
    let tgt: Vec<String> = match spec.task {
        Task::Lexicon => (0..spec.vocab_size).map(target_word).collect(),
        Task::Copy | Task::Reverse => (0..spec.vocab_size).map(content_word).collect(),
    };
    Ok((Vocab::from_tokens(src)?, Vocab::from_tokens(tgt)?))
}

/// Encodes a sentence, counting tokens missing from the vocabulary.
pub fn encode_counting(vocab: &Vocab, sentence: &str, unknown: &mut usize) -> Vec<usize> {
    sentence
        .split_whitespace()
        .map(|t| {
            if !vocab.contains(t) {
                *unknown += 1;
            }
            vocab.id(t)
        })
        .collect()
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
