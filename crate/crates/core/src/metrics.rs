//! Corpus BLEU, coverage difference ratio, bag-of-words overlap rate and
//! source-length buckets.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::fmath;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BleuOptions {
    pub case_sensitive: bool,
    /// Add-one smoothing of the 2..4-gram precisions.
    pub smooth: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions {
            case_sensitive: false,
            smooth: false,
        }
    }
}

fn tokens(s: &str, case_sensitive: bool) -> Vec<String> {
    s.split_whitespace()
        .map(|t| if case_sensitive { String::from(t) } else { t.to_lowercase() })
        .collect()
}

fn ngram_counts(toks: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    for w in toks.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct BleuStats {
    matches: [usize; 4],
    totals: [usize; 4],
    hyp_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, hyp: &[String], reference: &[String]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }

    /// Orders with no hypothesis n-gram at all are left out of the geometric mean.
    fn score(&self, smooth: bool) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..4 {
            let (mut m, mut t) = (self.matches[n] as f64, self.totals[n] as f64);
            if self.totals[n] == 0 {
                continue;
            }
            if smooth && n > 0 {
                m += 1.0;
                t += 1.0;
            }
            if m == 0.0 {
                return 0.0;
            }
            log_sum += fmath::ln(m / t);
            orders += 1;
        }
        let bp = if self.hyp_len < self.ref_len {
            fmath::exp(1.0 - self.ref_len as f64 / self.hyp_len as f64)
        } else {
            1.0
        };
        100.0 * bp * fmath::exp(log_sum / orders as f64)
    }
}

/// Corpus-level BLEU-4 in `[0, 100]` over whitespace-tokenized sentences.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R], opts: BleuOptions) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(&tokens(h.as_ref(), opts.case_sensitive), &tokens(r.as_ref(), opts.case_sensitive));
    }
    Ok(stats.score(opts.smooth))
}

/// Word alignment used to decide which source positions a translation covers.
pub trait Aligner {
    fn covered(&self, source: &[&str], target: &[&str]) -> BTreeSet<usize>;
}

/// Aligns a source word to an unused target occurrence of its dictionary
/// translation. Without a dictionary every word translates to itself.
#[derive(Clone, Debug, Default)]
pub struct LexicalAligner {
    pub table: Option<BTreeMap<String, String>>,
}

impl LexicalAligner {
    pub fn identity() -> Self {
        LexicalAligner { table: None }
    }

    pub fn with_table(table: BTreeMap<String, String>) -> Self {
        LexicalAligner { table: Some(table) }
    }
}

impl Aligner for LexicalAligner {
    fn covered(&self, source: &[&str], target: &[&str]) -> BTreeSet<usize> {
        let mut available: BTreeMap<&str, usize> = BTreeMap::new();
        for &t in target {
            *available.entry(t).or_insert(0) += 1;
        }
        let mut out = BTreeSet::new();
        for (i, &s) in source.iter().enumerate() {
            let want = match &self.table {
                Some(t) => match t.get(s) {
                    Some(w) => w.as_str(),
                    None => continue,
                },
                None => s,
            };
            if let Some(c) = available.get_mut(want).filter(|c| **c > 0) {
                *c -= 1;
                out.insert(i);
            }
        }
        out
    }
}

/// `1 - |C_ref \ C_gen| / |C_ref|` for covered-position sets, evaluated as
/// `|C_ref ∩ C_gen| / |C_ref|`.
pub fn cdr_sets(c_ref: &BTreeSet<usize>, c_gen: &BTreeSet<usize>) -> Result<f64> {
    if c_ref.is_empty() {
        return Err(Error::Input("reference covers no source word".into()));
    }
    Ok(c_ref.intersection(c_gen).count() as f64 / c_ref.len() as f64)
}

/// Coverage difference ratio of a single sentence.
pub fn cdr(source: &str, reference: &str, hypothesis: &str, aligner: &dyn Aligner) -> Result<f64> {
    let src: Vec<&str> = source.split_whitespace().collect();
    let c_ref = aligner.covered(&src, &reference.split_whitespace().collect::<Vec<_>>());
    let c_gen = aligner.covered(&src, &hypothesis.split_whitespace().collect::<Vec<_>>());
    cdr_sets(&c_ref, &c_gen)
}

/// Corpus coverage difference ratio: kept and reference-covered counts are
/// summed over sentences before dividing.
pub fn corpus_cdr<S: AsRef<str>>(sources: &[S], references: &[S], hypotheses: &[S], aligner: &dyn Aligner) -> Result<f64> {
    if sources.len() != references.len() || sources.len() != hypotheses.len() {
        return Err(Error::Input("source, reference and hypothesis counts differ".into()));
    }
    let (mut kept, mut total) = (0usize, 0usize);
    for ((s, r), h) in sources.iter().zip(references).zip(hypotheses) {
        let src: Vec<&str> = s.as_ref().split_whitespace().collect();
        let c_ref = aligner.covered(&src, &r.as_ref().split_whitespace().collect::<Vec<_>>());
        let c_gen = aligner.covered(&src, &h.as_ref().split_whitespace().collect::<Vec<_>>());
        kept += c_ref.intersection(&c_gen).count();
        total += c_ref.len();
    }
    if total == 0 {
        return Err(Error::Input("references cover no source word".into()));
    }
    Ok(kept as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Side {
    Past,
    Future,
}

/// Ids of the `n` highest scores, ties going to the lower id.
fn top_ids(scores: &[f64], n: usize) -> BTreeSet<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(n);
    ids.into_iter().collect()
}

/// Mean over steps of the fraction of the gold bag found among the top
/// `multiplier * k` scored words, `k` being the bag size. At step `t`
/// (1-based) the past bag is `y_1..y_t` and the future bag `y_t..y_T`.
/// Repeated gold words count once per occurrence.
pub fn overlap_rate(scores: &[Vec<f64>], target: &[usize], side: Side, multiplier: usize) -> Result<f64> {
    if scores.len() != target.len() {
        return Err(Error::Input(format!("{} score rows for {} target tokens", scores.len(), target.len())));
    }
    if target.is_empty() {
        return Err(Error::Input("empty target".into()));
    }
    let n = target.len();
    let mut sum = 0.0;
    for (t, row) in scores.iter().enumerate() {
        let bag = match side {
            Side::Past => &target[..=t],
            Side::Future => &target[t..],
        };
        let top = top_ids(row, multiplier * bag.len());
        let hits = bag.iter().filter(|y| top.contains(y)).count();
        sum += hits as f64 / bag.len() as f64;
    }
    Ok(sum / n as f64)
}

/// One source-length bucket `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Bucket {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub bleu: f64,
    pub mean_hyp_len: f64,
}

/// A scored sentence: source, reference and hypothesis text.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored<'a> {
    pub source: &'a str,
    pub reference: &'a str,
    pub hypothesis: &'a str,
}

/// BLEU and mean hypothesis length per source-length bucket of `width`
/// words. Buckets without sentences are omitted.
pub fn length_buckets(items: &[Scored<'_>], width: usize, opts: BleuOptions) -> Result<Vec<Bucket>> {
    if width == 0 {
        return Err(Error::Config("bucket width must be at least 1".into()));
    }
    let mut groups: BTreeMap<usize, Vec<&Scored<'_>>> = BTreeMap::new();
    for it in items {
        groups.entry(it.source.split_whitespace().count() / width).or_default().push(it);
    }
    groups
        .into_iter()
        .map(|(k, g)| {
            let hyps: Vec<&str> = g.iter().map(|s| s.hypothesis).collect();
            let refs: Vec<&str> = g.iter().map(|s| s.reference).collect();
            let len: usize = hyps.iter().map(|h| h.split_whitespace().count()).sum();
            Ok(Bucket {
                lo: k * width,
                hi: k * width + width - 1,
                count: g.len(),
                bleu: bleu(&hyps, &refs, opts)?,
                mean_hyp_len: len as f64 / g.len() as f64,
            })
        })
        .collect()
}

/// Fraction of hypotheses identical to their reference.
pub fn exact_match<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::Input("need equal, non-zero numbers of hypotheses and references".into()));
    }
    let hits = hypotheses
        .iter()
        .zip(references)
        .filter(|(h, r)| h.as_ref().split_whitespace().eq(r.as_ref().split_whitespace()))
        .count();
    Ok(hits as f64 / hypotheses.len() as f64)
}

/// Results of evaluating a model on a test set.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub sentences: usize,
    pub bleu: f64,
    pub exact_match: f64,
    pub cdr: Option<f64>,
    pub overlap_past: Option<f64>,
    pub overlap_future: Option<f64>,
    pub buckets: Vec<Bucket>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn bleu_fixture() {
        let b = bleu(&["a b c d"], &["a b c d e"], BleuOptions::default()).unwrap();
        assert!((b - 77.8800783).abs() < 1e-4, "{b}");
        assert_eq!(bleu(&["A b"], &["a B"], BleuOptions::default()).unwrap(), 100.0);
        let cs = BleuOptions {
            case_sensitive: true,
            smooth: false,
        };
        assert_eq!(bleu(&["A b"], &["a B"], cs).unwrap(), 0.0);
        assert!(bleu(&["a"], &["a", "b"], BleuOptions::default()).is_err());
    }

    #[test]
    fn smoothing_rescues_missing_higher_orders() {
        let plain = bleu(&["a x b y"], &["a c b d"], BleuOptions::default()).unwrap();
        assert_eq!(plain, 0.0);
        let smooth = BleuOptions {
            case_sensitive: false,
            smooth: true,
        };
        assert!(bleu(&["a x b y"], &["a c b d"], smooth).unwrap() > 0.0);
    }

    #[test]
    fn lexical_aligner_uses_each_target_once() {
        let a = LexicalAligner::identity();
        let c = a.covered(&["x", "x", "y"], &["x", "z"]);
        assert_eq!(c.into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn cdr_examples() {
        let r: BTreeSet<usize> = [0, 1, 2, 3].into();
        let g: BTreeSet<usize> = [0, 1].into();
        assert_eq!(cdr_sets(&r, &g).unwrap(), 0.5);
        assert_eq!(cdr_sets(&r, &r).unwrap(), 1.0);
        assert!(cdr_sets(&BTreeSet::new(), &g).is_err());
    }

    #[test]
    fn buckets_are_sparse() {
        let items = [
            Scored {
                source: "a",
                reference: "a",
                hypothesis: "a",
            },
            Scored {
                source: "a b c d e f g",
                reference: "x y",
                hypothesis: "x",
            },
        ];
        let b = length_buckets(&items, 2, BleuOptions::default()).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].lo, b[0].hi, b[1].lo), (0, 1, 6));
        assert!(length_buckets(&items, 0, BleuOptions::default()).is_err());
    }
}
