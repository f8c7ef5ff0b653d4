//! Parallel corpus ingestion and text normalization.
//!
//! Sentences are lowercased, NFD-decomposed with combining marks removed,
//! stripped of everything that is not a basic Latin letter, and re-joined with
//! single spaces. A second normalizer keeps an extra symbol alphabet so that
//! OCR misfits such as `c0de` survive.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Symbols kept by [`normalize_noisy`] when no channel alphabet is supplied.
pub const DEFAULT_NOISY_SYMBOLS: &str = "0123456789+@";

fn normalize_with(raw: &str, keep: impl Fn(char) -> bool) -> String {
    let lowered = raw.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for ch in lowered.nfd() {
        if is_combining_mark(ch) {
            continue;
        }
        if ch.is_ascii_lowercase() || keep(ch) {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        } else if ch.is_whitespace() {
            pending_space = true;
        }
    }
    out
}

/// Lowercase, fold diacritics, drop everything but `a-z`, collapse spaces.
pub fn normalize_sentence(raw: &str) -> String {
    normalize_with(raw, |_| false)
}

/// Like [`normalize_sentence`] but keeps digits, `+` and `@`.
pub fn normalize_noisy(raw: &str) -> String {
    normalize_noisy_keeping(raw, |c| DEFAULT_NOISY_SYMBOLS.contains(c))
}

/// Like [`normalize_sentence`] but additionally keeps every character accepted
/// by `keep`. Characters that are whitespace, combining marks, or change under
/// lowercasing or decomposition are never kept, so the result stays idempotent.
pub fn normalize_noisy_keeping(raw: &str, keep: impl Fn(char) -> bool) -> String {
    normalize_with(raw, |c| keep(c) && is_stable_symbol(c))
}

/// A character that passes through lowercasing and NFD unchanged and is
/// neither whitespace nor a combining mark.
pub fn is_stable_symbol(c: char) -> bool {
    if c.is_whitespace() || is_combining_mark(c) {
        return false;
    }
    let mut lower = c.to_lowercase();
    if lower.next() != Some(c) || lower.next().is_some() {
        return false;
    }
    let mut nfd = std::iter::once(c).nfd();
    nfd.next() == Some(c) && nfd.next().is_none()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
}

impl SentencePair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SentencePair> {
        self.pairs.iter()
    }

    /// Two-column tab-separated text, one pair per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let _ = writeln!(out, "{}\t{}", p.source, p.target);
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

impl FromIterator<SentencePair> for ParallelCorpus {
    fn from_iter<I: IntoIterator<Item = SentencePair>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Result of reading a tab-separated pair file.
#[derive(Debug, Clone, Default)]
pub struct ParsedCorpus {
    pub corpus: ParallelCorpus,
    /// Lines whose source or target normalized to the empty string.
    pub dropped_empty: usize,
    /// Non-blank lines with fewer than two tab-separated fields.
    pub malformed: usize,
}

impl ParsedCorpus {
    pub fn dropped(&self) -> usize {
        self.dropped_empty + self.malformed
    }
}

/// Parse tab-separated pairs from text, normalizing each side with its own
/// function. Columns beyond the second are ignored.
pub fn parse_pairs_str(
    text: &str,
    source_norm: impl Fn(&str) -> String,
    target_norm: impl Fn(&str) -> String,
) -> ParsedCorpus {
    let mut parsed = ParsedCorpus::default();
    for line in text.lines() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(src), Some(tgt)) = (fields.next(), fields.next()) else {
            parsed.malformed += 1;
            continue;
        };
        let source = source_norm(src);
        let target = target_norm(tgt);
        if source.is_empty() || target.is_empty() {
            parsed.dropped_empty += 1;
            continue;
        }
        parsed.corpus.pairs.push(SentencePair { source, target });
    }
    parsed
}

pub fn parse_anki_str(text: &str) -> ParsedCorpus {
    parse_pairs_str(text, normalize_sentence, normalize_sentence)
}

/// Read an ANKI export: `english<TAB>spanish[<TAB>attribution]` per line.
pub fn parse_anki(path: &Path) -> Result<ParsedCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_anki_str(&text))
}

/// Read a pair file whose source column may carry OCR misfits (an augmented
/// corpus). Sources keep the default noisy symbols; targets are normalized
/// as clean text.
pub fn parse_noisy_pairs(path: &Path) -> Result<ParsedCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_pairs_str(&text, normalize_noisy, normalize_sentence))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LengthHistogram {
    pub counts: BTreeMap<usize, usize>,
}

impl LengthHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Fraction of sentences with at most `words` tokens.
    pub fn fraction_at_most(&self, words: usize) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let within: usize = self.counts.range(..=words).map(|(_, c)| c).sum();
        within as f64 / total as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("word_count,sentences\n");
        for (k, v) in &self.counts {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }
}

pub fn length_histogram(corpus: &ParallelCorpus, side: Side) -> Result<LengthHistogram> {
    if corpus.is_empty() {
        return Err(Error::data("cannot build a length histogram of an empty corpus"));
    }
    let mut hist = LengthHistogram::default();
    for pair in corpus.iter() {
        let sentence = match side {
            Side::Source => &pair.source,
            Side::Target => &pair.target,
        };
        *hist.counts.entry(sentence.split_whitespace().count()).or_insert(0) += 1;
    }
    Ok(hist)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            train_fraction: train,
            val_fraction: val,
            test_fraction: test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config(format!("split fractions must lie in [0,1], got {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions must sum to 1, got {fr:?}")));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: ParallelCorpus,
    pub val: ParallelCorpus,
    pub test: ParallelCorpus,
}

/// Seeded shuffle followed by a contiguous train/val/test partition.
///
/// Train and validation must both end up non-empty, as must the test split
/// whenever its fraction is positive.
pub fn split_corpus(corpus: &ParallelCorpus, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = corpus.len();
    if n < 3 {
        return Err(Error::data(format!("corpus of {n} pairs is too small to split")));
    }
    let n_train = (((n as f64) * spec.train_fraction).round() as usize).min(n);
    let n_val = (((n as f64) * spec.val_fraction).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || (spec.test_fraction > 0.0 && n_test == 0) {
        return Err(Error::data(format!(
            "split {:?} of {n} pairs leaves a required partition empty (train {n_train}, val {n_val}, test {n_test})",
            (spec.train_fraction, spec.val_fraction, spec.test_fraction)
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let take = |range: std::ops::Range<usize>| -> ParallelCorpus {
        order[range].iter().map(|&i| corpus.pairs[i].clone()).collect()
    };
    Ok(Splits {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_sentence("Hello, World!"), "hello world");
        assert_eq!(normalize_sentence("¿Está aquí?"), "esta aqui");
        assert_eq!(normalize_sentence("   "), "");
        assert_eq!(normalize_sentence("Ñandú\tcon  niño\n"), "nandu con nino");
        assert_eq!(normalize_sentence("I have 3 dogs."), "i have dogs");
    }

    #[test]
    fn noisy_keeps_confusion_symbols() {
        assert_eq!(normalize_noisy("C0de"), "c0de");
        assert_eq!(normalize_noisy("+oday!"), "+oday");
        assert_eq!(normalize_noisy("hello"), "hello");
        assert_eq!(normalize_noisy("h3llo, w@rld"), "h3llo w@rld");
    }

    #[test]
    fn anki_lines() {
        let parsed = parse_anki_str("Go.\tVe.\nHi.\tHola.\tCC-BY attribution\n!!!\t???\nno tab here\n\n");
        assert_eq!(
            parsed.corpus.pairs,
            vec![SentencePair::new("go", "ve"), SentencePair::new("hi", "hola")]
        );
        assert_eq!(parsed.dropped_empty, 1);
        assert_eq!(parsed.malformed, 1);
    }

    #[test]
    fn anki_missing_file() {
        let err = parse_anki(Path::new("/definitely/not/here.txt")).unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.txt"));
    }

    #[test]
    fn histogram_counts() {
        let c = ParallelCorpus::new(vec![
            SentencePair::new("go", "ve"),
            SentencePair::new("be cool", "se genial"),
        ]);
        let h = length_histogram(&c, Side::Source).unwrap();
        assert_eq!(h.counts, BTreeMap::from([(1, 1), (2, 1)]));
        assert_eq!(h.to_csv(), "word_count,sentences\n1,1\n2,1\n");

        let single = ParallelCorpus::new(vec![SentencePair::new("a b c", "x")]);
        let h = length_histogram(&single, Side::Source).unwrap();
        assert_eq!(h.counts, BTreeMap::from([(3, 1)]));
        assert!(length_histogram(&ParallelCorpus::default(), Side::Target).is_err());
    }

    fn numbered(n: usize) -> ParallelCorpus {
        (0..n)
            .map(|i| SentencePair::new(format!("s{i}"), format!("t{i}")))
            .collect()
    }

    #[test]
    fn split_sizes() {
        let s = split_corpus(&numbered(10), &SplitSpec::new(0.8, 0.1, 0.1, 7).unwrap()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_rejects_empty_validation() {
        let spec = SplitSpec::new(1.0, 0.0, 0.0, 1).unwrap();
        assert!(split_corpus(&numbered(10), &spec).is_err());
        assert!(split_corpus(&numbered(2), &SplitSpec::default()).is_err());
        assert!(SplitSpec::new(0.5, 0.5, 0.5, 0).is_err());
        assert!(SplitSpec::new(1.2, -0.1, -0.1, 0).is_err());
    }

    #[test]
    fn split_seed_changes_order_only() {
        let c = numbered(100);
        let a = split_corpus(&c, &SplitSpec::new(0.8, 0.1, 0.1, 7).unwrap()).unwrap();
        let b = split_corpus(&c, &SplitSpec::new(0.8, 0.1, 0.1, 8).unwrap()).unwrap();
        let a2 = split_corpus(&c, &SplitSpec::new(0.8, 0.1, 0.1, 7).unwrap()).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (80, 10, 10));
        assert_eq!((b.train.len(), b.val.len(), b.test.len()), (80, 10, 10));
        assert_ne!(a.train, b.train);
        assert_eq!(a.train, a2.train);
        assert_eq!(a.test, a2.test);
    }
}
