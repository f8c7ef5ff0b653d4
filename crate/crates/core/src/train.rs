//! Teacher-forced training with Adam, validation tracking and early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{log_sum_exp, Tape, Tensor};
use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::{forward_teacher_forced, Mode, ModelDims, ModelParams, Variant};
use crate::vocab::{EncodedSequence, Role, Vocabulary, DEFAULT_MAX_LEN};

/// `-log softmax(logits)[target]` via log-sum-exp.
pub fn sparse_ce(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            size: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[target])
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub d_src: usize,
    pub d_tgt: usize,
    pub n_units: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub max_len: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            dropout_rate: 0.2,
            d_src: 256,
            d_tgt: 256,
            n_units: 256,
            batch_size: 64,
            max_epochs: 30,
            patience: 5,
            max_len: DEFAULT_MAX_LEN,
            seed: 0,
            variant: Variant::Attention,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout must lie in [0,1), got {}", self.dropout_rate)));
        }
        let sizes = [
            ("d_src", self.d_src),
            ("d_tgt", self.d_tgt),
            ("n_units", self.n_units),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.max_len < 3 {
            return Err(Error::config("max_len must be at least 3"));
        }
        Ok(())
    }

    pub fn dims(&self, src_vocab: usize, tgt_vocab: usize) -> ModelDims {
        ModelDims {
            src_vocab,
            tgt_vocab,
            src_emb: self.d_src,
            tgt_emb: self.d_tgt,
            n_units: self.n_units,
        }
    }

    /// Every field as `key=value` pairs, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("d_src", self.d_src.to_string()),
            ("d_tgt", self.d_tgt.to_string()),
            ("n_units", self.n_units.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("max_len", self.max_len.to_string()),
            ("seed", self.seed.to_string()),
            ("variant", self.variant.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub src: EncodedSequence,
    pub tgt: EncodedSequence,
}

/// Encode every pair that fits `max_len`; returns the pairs and the number
/// skipped for length.
pub fn encode_corpus(
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<EncodedPair>, usize)> {
    let mut out = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for p in corpus.iter() {
        let src = src_vocab.encode(&p.source, max_len, Role::Source);
        let tgt = tgt_vocab.encode(&p.target, max_len, Role::Target);
        match (src, tgt) {
            (Ok(src), Ok(tgt)) => out.push(EncodedPair { src, tgt }),
            (Err(Error::TooLong { .. }), _) | (_, Err(Error::TooLong { .. })) => skipped += 1,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok((out, skipped))
}

/// Adam moments for a list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: Vec<&mut Tensor>, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::data(format!(
            "adam_step got {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (pd, gd, md, vd) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
            vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// SplitMix64 finalizer, used to derive independent seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ purpose).wrapping_add(epoch as u64)))
}

/// One pass over `pairs` in an epoch-seeded order. Each batch's loss is the
/// sum of per-position cross-entropies divided by the batch's scored
/// positions; one Adam step per batch. Returns the mean per-position loss.
pub fn run_epoch(
    pairs: &[EncodedPair],
    params: &mut ModelParams,
    opt: &mut AdamState,
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::data("cannot train on an empty corpus"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut epoch_rng(config.seed, epoch, 0x5348_5546));
    let mut dropout_rng = epoch_rng(config.seed, epoch, 0x4452_4f50);

    let mut grads = params.zero_grads();
    let mut total_loss = 0.0;
    let mut total_scored = 0usize;
    for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
        grads.iter_mut().for_each(|g| g.fill(0.0));
        let mut batch_loss = 0.0;
        let mut batch_scored = 0usize;
        for &pi in batch {
            let pair = &pairs[pi];
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let mut mode = Mode::Train {
                dropout: config.dropout_rate,
                rng: &mut dropout_rng,
            };
            let tf = forward_teacher_forced(&mut tape, &bound, &pair.src, &pair.tgt, &mut mode)?;
            let loss = tape.scalar(tf.loss_sum);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {loss} at epoch {epoch}, batch {batch_no}, pair {pi}"
                )));
            }
            tape.backward_into(tf.loss_sum, &mut grads).map_err(|e| match e {
                Error::NonFinite(m) => {
                    Error::NonFinite(format!("{m} at epoch {epoch}, batch {batch_no}, pair {pi}"))
                }
                other => other,
            })?;
            batch_loss += loss;
            batch_scored += tf.scored;
        }
        let inv = 1.0 / batch_scored as f64;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
        adam_step(params.tensors_mut(), &grads, opt, config.learning_rate)?;
        total_loss += batch_loss;
        total_scored += batch_scored;
    }
    Ok(total_loss / total_scored as f64)
}

/// Teacher-forced mean per-position loss with dropout off.
pub fn evaluate_loss(pairs: &[EncodedPair], params: &ModelParams) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::data("cannot evaluate on an empty corpus"));
    }
    let mut total = 0.0;
    let mut scored = 0usize;
    for pair in pairs {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let tf = forward_teacher_forced(&mut tape, &bound, &pair.src, &pair.tgt, &mut Mode::Eval)?;
        total += tape.scalar(tf.loss_sum);
        scored += tf.scored;
    }
    let mean = total / scored as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite(format!("validation loss {mean}")));
    }
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_val_loss: f64,
    /// 1-based.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub config: TrainConfig,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss`, full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_loss);
        }
        out
    }

    /// Best validation loss and the epoch reaching it, e.g. `0.70429 (14)`.
    pub fn summary(&self) -> String {
        format!("{:.5} ({})", self.best_val_loss, self.best_epoch)
    }
}

/// Patience rule: stop once `patience` consecutive epochs fail to improve on
/// the best validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopDecision {
                improved: true,
                stop: false,
            }
        } else {
            self.since_best += 1;
            StopDecision {
                improved: false,
                stop: self.since_best >= self.patience,
            }
        }
    }
}

/// Train from a seeded initialization, keeping the parameters of the best
/// validation epoch and stopping after `patience` epochs without improvement.
pub fn fit(
    train: &[EncodedPair],
    val: &[EncodedPair],
    vocab_sizes: (usize, usize),
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    fit_with(train, val, vocab_sizes, config, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(
    train: &[EncodedPair],
    val: &[EncodedPair],
    vocab_sizes: (usize, usize),
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("training and validation sets must be non-empty"));
    }
    let dims = config.dims(vocab_sizes.0, vocab_sizes.1);
    let mut params = ModelParams::init(dims, config.variant, config.seed)?;
    let mut opt = AdamState::new(params.tensors());
    let mut best = params.clone();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_val_loss: f64::INFINITY,
        best_epoch: 0,
        stopped_epoch: 0,
        config: config.clone(),
    };
    let mut stopper = EarlyStopping::new(config.patience);
    for epoch in 1..=config.max_epochs {
        let train_loss = run_epoch(train, &mut params, &mut opt, config, epoch)?;
        let val_loss = evaluate_loss(val, &params)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
        };
        report.epochs.push(record);
        report.stopped_epoch = epoch;
        on_epoch(&record);
        let step = stopper.observe(epoch, val_loss);
        if step.improved {
            best.clone_from(&params);
        }
        report.best_val_loss = stopper.best_val_loss;
        report.best_epoch = stopper.best_epoch;
        if step.stop {
            break;
        }
    }
    Ok((best, report))
}
