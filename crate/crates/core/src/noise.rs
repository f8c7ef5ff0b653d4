//! OCR-misfit generation.
//!
//! A [`NoiseChannel`] corrupts normalized sentences one character at a time
//! with visually motivated substitutions (`o`→`0`, `t`→`+`, ...), plus rare
//! deletions and insertions. Spaces are never touched, so corrupted sentences
//! stay token-aligned with their originals unless a whole word is deleted.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{is_stable_symbol, normalize_noisy_keeping, normalize_sentence, ParallelCorpus, SentencePair};
use crate::error::{Error, Result};

/// Symmetric confusion pairs used by [`NoiseChannel::default_confusions`].
pub const DEFAULT_CONFUSION_PAIRS: [(char, char); 9] = [
    ('o', '0'),
    ('l', '1'),
    ('i', '1'),
    ('e', '3'),
    ('a', '@'),
    ('s', '5'),
    ('t', '+'),
    ('g', '9'),
    ('b', '8'),
];

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseChannel {
    pub confusions: BTreeMap<char, Vec<(char, f64)>>,
    pub substitution_rate: f64,
    pub deletion_rate: f64,
    pub insertion_rate: f64,
    pub seed: u64,
}

impl NoiseChannel {
    pub fn new(
        confusions: BTreeMap<char, Vec<(char, f64)>>,
        substitution_rate: f64,
        deletion_rate: f64,
        insertion_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let channel = Self {
            confusions,
            substitution_rate,
            deletion_rate,
            insertion_rate,
            seed,
        };
        channel.validate()?;
        Ok(channel)
    }

    /// Both directions of every [`DEFAULT_CONFUSION_PAIRS`] entry with uniform
    /// weights; rates 0.08 / 0.01 / 0.01.
    pub fn default_confusions() -> Self {
        let mut confusions: BTreeMap<char, Vec<(char, f64)>> = BTreeMap::new();
        for (a, b) in DEFAULT_CONFUSION_PAIRS {
            confusions.entry(a).or_default().push((b, 1.0));
            confusions.entry(b).or_default().push((a, 1.0));
        }
        Self {
            confusions,
            substitution_rate: 0.08,
            deletion_rate: 0.01,
            insertion_rate: 0.01,
            seed: 0,
        }
    }

    pub fn with_rates(mut self, substitution: f64, deletion: f64, insertion: f64) -> Result<Self> {
        self.substitution_rate = substitution;
        self.deletion_rate = deletion;
        self.insertion_rate = insertion;
        self.validate()?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.substitution_rate, self.deletion_rate, self.insertion_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config(format!("noise rates must lie in [0,1], got {rates:?}")));
        }
        if self.substitution_rate + self.deletion_rate > 1.0 {
            return Err(Error::config("substitution_rate + deletion_rate must not exceed 1"));
        }
        for (from, targets) in &self.confusions {
            if targets.is_empty() {
                return Err(Error::config(format!("confusion entry for {from:?} has no replacements")));
            }
            for &(to, w) in targets {
                if !(w > 0.0 && w.is_finite()) {
                    return Err(Error::config(format!("confusion weight {from:?}->{to:?} must be positive, got {w}")));
                }
                if !(to.is_ascii_lowercase() || is_stable_symbol(to)) {
                    return Err(Error::config(format!("confusion replacement {to:?} is not a usable symbol")));
                }
            }
        }
        Ok(())
    }

    /// Every replacement character, sorted.
    pub fn alphabet(&self) -> Vec<char> {
        let set: BTreeSet<char> = self.confusions.values().flatten().map(|&(c, _)| c).collect();
        set.into_iter().collect()
    }

    pub fn normalize(&self, raw: &str) -> String {
        let alphabet = self.alphabet();
        normalize_noisy_keeping(raw, |c| alphabet.contains(&c))
    }

    /// Random stream for pair `index`; independent of every other index.
    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    fn draw_replacement<R: Rng + ?Sized>(targets: &[(char, f64)], rng: &mut R) -> char {
        let total: f64 = targets.iter().map(|t| t.1).sum();
        let mut u = rng.gen::<f64>() * total;
        for &(c, w) in targets {
            if u < w {
                return c;
            }
            u -= w;
        }
        targets[targets.len() - 1].0
    }

    /// Corrupt one normalized sentence.
    ///
    /// Every non-space character consumes exactly two uniform draws (edit and
    /// insertion) plus one more when substituted, so streams stay aligned
    /// across rate settings with the same seed.
    pub fn corrupt<R: Rng + ?Sized>(&self, sentence: &str, rng: &mut R) -> String {
        let alphabet = self.alphabet();
        let mut out = String::with_capacity(sentence.len() + 4);
        for ch in sentence.chars() {
            if ch == ' ' {
                out.push(' ');
                continue;
            }
            let u: f64 = rng.gen();
            match self.confusions.get(&ch) {
                Some(targets) if u < self.substitution_rate => {
                    out.push(Self::draw_replacement(targets, rng));
                }
                _ if u >= self.substitution_rate && u < self.substitution_rate + self.deletion_rate => {}
                _ => out.push(ch),
            }
            if rng.gen::<f64>() < self.insertion_rate && !alphabet.is_empty() {
                out.push(alphabet[rng.gen_range(0..alphabet.len())]);
            }
        }
        normalize_noisy_keeping(&out, |c| alphabet.contains(&c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Clean,
    Misfit,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Clean => "clean",
            Provenance::Misfit => "misfit",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentedCorpus {
    pub pairs: ParallelCorpus,
    pub provenance: Vec<Provenance>,
}

impl AugmentedCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `clean` pairs followed by the pairs of `misfits`.
    pub fn with_clean(clean: &ParallelCorpus, misfits: AugmentedCorpus) -> Self {
        let mut out = AugmentedCorpus {
            pairs: clean.clone(),
            provenance: vec![Provenance::Clean; clean.len()],
        };
        out.pairs.pairs.extend(misfits.pairs.pairs);
        out.provenance.extend(misfits.provenance);
        out
    }

    pub fn count(&self, which: Provenance) -> usize {
        self.provenance.iter().filter(|&&p| p == which).count()
    }

    /// Three columns: `source<TAB>target<TAB>clean|misfit`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (p, prov) in self.pairs.iter().zip(&self.provenance) {
            let _ = writeln!(out, "{}\t{}\t{}", p.source, p.target, prov);
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Append one misfit pair per clean pair. Pair `i` draws from stream `i` of
/// the channel seed. A corruption that deletes every character falls back to
/// the clean source, still flagged as a misfit.
pub fn augment(corpus: &ParallelCorpus, channel: &NoiseChannel) -> Result<AugmentedCorpus> {
    if corpus.is_empty() {
        return Err(Error::data("cannot augment an empty corpus"));
    }
    channel.validate()?;
    let misfits = corpus
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut rng = channel.stream(i as u64);
            let noisy = channel.corrupt(&pair.source, &mut rng);
            let source = if noisy.is_empty() { pair.source.clone() } else { noisy };
            SentencePair::new(source, pair.target.clone())
        })
        .collect::<ParallelCorpus>();
    let n = misfits.len();
    Ok(AugmentedCorpus::with_clean(
        corpus,
        AugmentedCorpus {
            pairs: misfits,
            provenance: vec![Provenance::Misfit; n],
        },
    ))
}

#[derive(Debug, Clone, Default)]
pub struct OcrIngest {
    /// Misfit pairs only.
    pub misfits: AugmentedCorpus,
    /// Predictions whose original text is not a reference source.
    pub unmatched: usize,
    /// Lines without two fields, or whose prediction normalizes to nothing.
    pub malformed: usize,
}

/// Pair externally produced OCR predictions with reference targets.
///
/// Each line is `prediction<TAB>original`. The original is normalized as clean
/// text and looked up among the reference sources; when a source occurs more
/// than once the first pair wins.
pub fn ingest_ocr_predictions_str(text: &str, reference: &ParallelCorpus) -> OcrIngest {
    let mut lookup: HashMap<&str, &str> = HashMap::new();
    for p in reference.iter() {
        lookup.entry(p.source.as_str()).or_insert(p.target.as_str());
    }
    let symbols = NoiseChannel::default_confusions().alphabet();
    let mut out = OcrIngest::default();
    for line in text.lines() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(pred), Some(orig)) = (fields.next(), fields.next()) else {
            out.malformed += 1;
            continue;
        };
        let prediction = normalize_noisy_keeping(pred, |c| symbols.contains(&c));
        if prediction.is_empty() {
            out.malformed += 1;
            continue;
        }
        match lookup.get(normalize_sentence(orig).as_str()) {
            Some(target) => {
                out.misfits.pairs.pairs.push(SentencePair::new(prediction, *target));
                out.misfits.provenance.push(Provenance::Misfit);
            }
            None => out.unmatched += 1,
        }
    }
    out
}

pub fn ingest_ocr_predictions(path: &Path, reference: &ParallelCorpus) -> Result<OcrIngest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(ingest_ocr_predictions_str(&text, reference))
}
