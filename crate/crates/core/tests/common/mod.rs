#![allow(dead_code)]

use std::path::{Path, PathBuf};

use transdocs::corpus::{parse_anki, ParallelCorpus};
use transdocs::train::{encode_corpus, EncodedPair};
use transdocs::vocab::Vocabulary;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// The first `n` pairs of a fixture file.
pub fn fixture_pairs(name: &str, n: usize) -> ParallelCorpus {
    let parsed = parse_anki(&fixture(name)).expect("fixture parses");
    assert!(parsed.corpus.len() >= n, "{name} has only {} pairs", parsed.corpus.len());
    parsed.corpus.iter().take(n).cloned().collect()
}

pub fn vocabularies(corpus: &ParallelCorpus) -> (Vocabulary, Vocabulary) {
    let src: Vec<&str> = corpus.iter().map(|p| p.source.as_str()).collect();
    let tgt: Vec<&str> = corpus.iter().map(|p| p.target.as_str()).collect();
    (Vocabulary::build(&src).unwrap(), Vocabulary::build(&tgt).unwrap())
}

pub fn encode(corpus: &ParallelCorpus, sv: &Vocabulary, tv: &Vocabulary, max_len: usize) -> Vec<EncodedPair> {
    let (pairs, skipped) = encode_corpus(corpus, sv, tv, max_len).unwrap();
    assert_eq!(skipped, 0, "fixture pairs exceed max_len {max_len}");
    pairs
}
