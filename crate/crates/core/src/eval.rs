//! Corpus-level BLEU-4 and prediction dumps.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::{translate_greedy, ModelParams};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothing {
    None,
    /// Add one to the matched and total counts of every order above 1.
    AddOne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuConfig {
    pub max_n: usize,
    pub weights: Vec<f64>,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            weights: vec![0.25; 4],
            smoothing: Smoothing::None,
        }
    }
}

impl BleuConfig {
    fn validate(&self) -> Result<()> {
        if self.max_n == 0 || self.weights.len() != self.max_n {
            return Err(Error::config("BLEU needs one weight per n-gram order"));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::config("BLEU weights must sum to 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: Vec<f64>,
    /// Clipped matches and candidate n-gram totals per order, after smoothing.
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
    pub smoothing: Smoothing,
}

impl BleuReport {
    /// `key=value` lines: bleu, p1..pN, bp, lengths, aggregation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "bleu={}", self.bleu);
        for (i, p) in self.precisions.iter().enumerate() {
            let _ = writeln!(out, "p{}={}", i + 1, p);
        }
        let _ = writeln!(out, "bp={}", self.brevity_penalty);
        let _ = writeln!(out, "candidate_length={}", self.candidate_length);
        let _ = writeln!(out, "reference_length={}", self.reference_length);
        let _ = writeln!(out, "aggregation=corpus");
        let smoothing = match self.smoothing {
            Smoothing::None => "none",
            Smoothing::AddOne => "add-one",
        };
        let _ = writeln!(out, "smoothing={smoothing}");
        out
    }
}

fn ngram_counts<'a, S: AsRef<str>>(tokens: &'a [S], n: usize) -> HashMap<Vec<&'a str>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with single references.
///
/// Clipped n-gram matches and candidate n-gram totals are summed over the
/// corpus per order. An order for which neither side has any n-grams counts
/// as precision 1; otherwise a zero total gives precision 0.
pub fn bleu4<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>], config: &BleuConfig) -> Result<BleuReport> {
    config.validate()?;
    if candidates.len() != references.len() {
        return Err(Error::data(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::data("BLEU needs at least one sentence pair"));
    }
    let max_n = config.max_n;
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let mut ref_totals = vec![0u64; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=max_n {
            let cc = ngram_counts(cand, n);
            let rc = ngram_counts(reference, n);
            for (g, &c) in &cc {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
            ref_totals[n - 1] += rc.values().sum::<u64>();
        }
    }
    if config.smoothing == Smoothing::AddOne {
        for n in 1..max_n {
            matches[n] += 1;
            totals[n] += 1;
        }
    }
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| match (totals[i], ref_totals[i]) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (t, _) => matches[i] as f64 / t as f64,
        })
        .collect();
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) || brevity_penalty == 0.0 {
        0.0
    } else {
        let log_mean: f64 = precisions.iter().zip(&config.weights).map(|(p, w)| w * p.ln()).sum();
        brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_length: c_len,
        reference_length: r_len,
        smoothing: config.smoothing,
    })
}

/// Convenience wrapper over whitespace-tokenized sentences.
pub fn bleu4_sentences(candidates: &[String], references: &[String], config: &BleuConfig) -> Result<BleuReport> {
    let split = |v: &[String]| -> Vec<Vec<String>> {
        v.iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect()
    };
    bleu4(&split(candidates), &split(references), config)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: BleuReport,
    pub predictions: Vec<String>,
    /// `source<TAB>reference<TAB>prediction` per line.
    pub predictions_tsv: String,
}

/// Greedy-translate every test source and score against its target.
pub fn evaluate_model(
    test: &ParallelCorpus,
    params: &ModelParams,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
    config: &BleuConfig,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::data("cannot evaluate on an empty test set"));
    }
    let mut predictions = Vec::with_capacity(test.len());
    let mut tsv = String::new();
    for pair in test.iter() {
        let pred = translate_greedy(&pair.source, params, src_vocab, tgt_vocab, max_len)?;
        let _ = writeln!(tsv, "{}\t{}\t{}", pair.source, pair.target, pred);
        predictions.push(pred);
    }
    let references: Vec<String> = test.iter().map(|p| p.target.clone()).collect();
    let report = bleu4_sentences(&predictions, &references, config)?;
    Ok(Evaluation {
        report,
        predictions,
        predictions_tsv: tsv,
    })
}
