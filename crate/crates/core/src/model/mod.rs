//! LSTM encoder-decoder translation models.
//!
//! Two variants share the encoder: [`Variant::Plain`] feeds the decoder's
//! hidden state straight into the output projection, while
//! [`Variant::Attention`] scores every encoder state against the decoder
//! state with a dot product, mixes them into a context vector, and projects
//! `tanh(W_c [context; h_t])` to the vocabulary.
//!
//! All tensors use the row-vector convention: a hidden state is `[1, n]` and
//! a projection is `x · W` with `W: [in, out]`. LSTM gates are fused in the
//! order input, forget, candidate, output.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vocab::{EncodedSequence, Vocabulary, EOS, SOS};

pub use checkpoint::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Plain,
    Attention,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::Attention => "attention",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "attention" => Ok(Variant::Attention),
            other => Err(Error::config(format!("unknown model variant {other:?} (expected plain|attention)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub src_emb: usize,
    pub tgt_emb: usize,
    pub n_units: usize,
}

impl ModelDims {
    fn validate(&self) -> Result<()> {
        let all = [self.src_vocab, self.tgt_vocab, self.src_emb, self.tgt_emb, self.n_units];
        if all.contains(&0) {
            return Err(Error::config(format!("model dimensions must be positive, got {self:?}")));
        }
        Ok(())
    }
}

/// Fused LSTM weights: `input [d, 4n]`, `recurrent [n, 4n]`, `bias [1, 4n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub input: Tensor,
    pub recurrent: Tensor,
    pub bias: Tensor,
}

impl LstmWeights {
    pub fn n_units(&self) -> usize {
        self.recurrent.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    pub dims: ModelDims,
    pub src_embedding: Tensor,
    pub tgt_embedding: Tensor,
    pub encoder: LstmWeights,
    pub decoder: LstmWeights,
    /// `[2n, n]`, attention variant only.
    pub attn_proj: Option<Tensor>,
    pub out_proj: Tensor,
    pub out_bias: Tensor,
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

fn lstm_init<R: Rng>(input: usize, n: usize, rng: &mut R) -> LstmWeights {
    let mut bias = Tensor::zeros(&[1, 4 * n]);
    bias.data_mut()[n..2 * n].iter_mut().for_each(|b| *b = 1.0);
    LstmWeights {
        input: glorot(input, 4 * n, rng),
        recurrent: glorot(n, 4 * n, rng),
        bias,
    }
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases except a forget-gate bias of one.
    pub fn init(dims: ModelDims, variant: Variant, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.n_units;
        let src_embedding = glorot(dims.src_vocab, dims.src_emb, &mut rng);
        let tgt_embedding = glorot(dims.tgt_vocab, dims.tgt_emb, &mut rng);
        let encoder = lstm_init(dims.src_emb, n, &mut rng);
        let decoder = lstm_init(dims.tgt_emb, n, &mut rng);
        let attn_proj = match variant {
            Variant::Attention => Some(glorot(2 * n, n, &mut rng)),
            Variant::Plain => None,
        };
        let out_proj = glorot(n, dims.tgt_vocab, &mut rng);
        Ok(Self {
            variant,
            dims,
            src_embedding,
            tgt_embedding,
            encoder,
            decoder,
            attn_proj,
            out_proj,
            out_bias: Tensor::zeros(&[1, dims.tgt_vocab]),
        })
    }

    /// Same shapes as `init`, every value zero.
    pub fn zeros(dims: ModelDims, variant: Variant) -> Result<Self> {
        let mut p = Self::init(dims, variant, 0)?;
        p.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        Ok(p)
    }

    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<&'static str> {
        let mut names = vec![
            "src_embedding",
            "tgt_embedding",
            "encoder.input",
            "encoder.recurrent",
            "encoder.bias",
            "decoder.input",
            "decoder.recurrent",
            "decoder.bias",
        ];
        if self.attn_proj.is_some() {
            names.push("attn_proj");
        }
        names.extend(["out_proj", "out_bias"]);
        names
    }

    /// Every tensor in canonical order (checkpoints, optimizer state, tapes).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![
            &self.src_embedding,
            &self.tgt_embedding,
            &self.encoder.input,
            &self.encoder.recurrent,
            &self.encoder.bias,
            &self.decoder.input,
            &self.decoder.recurrent,
            &self.decoder.bias,
        ];
        if let Some(w) = &self.attn_proj {
            v.push(w);
        }
        v.extend([&self.out_proj, &self.out_bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.src_embedding,
            &mut self.tgt_embedding,
            &mut self.encoder.input,
            &mut self.encoder.recurrent,
            &mut self.encoder.bias,
            &mut self.decoder.input,
            &mut self.decoder.recurrent,
            &mut self.decoder.bias,
        ];
        if let Some(w) = &mut self.attn_proj {
            v.push(w);
        }
        v.extend([&mut self.out_proj, &mut self.out_bias]);
        v
    }

    /// Zero tensors shaped like every parameter, in canonical order.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.tensors().into_iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over the serialized tensors.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for t in self.tensors() {
            buf.clear();
            t.write_to(&mut buf).expect("write to Vec");
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    /// Register every parameter on `tape` in canonical order.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> BoundParams {
        let lstm = |w: &'p LstmWeights, tape: &mut Tape<'p>| LstmVars {
            input: tape.param(&w.input),
            recurrent: tape.param(&w.recurrent),
            bias: tape.param(&w.bias),
            n_units: w.n_units(),
        };
        let src_embedding = tape.param(&self.src_embedding);
        let tgt_embedding = tape.param(&self.tgt_embedding);
        let encoder = lstm(&self.encoder, tape);
        let decoder = lstm(&self.decoder, tape);
        let attn_proj = self.attn_proj.as_ref().map(|w| tape.param(w));
        BoundParams {
            variant: self.variant,
            dims: self.dims,
            src_embedding,
            tgt_embedding,
            encoder,
            decoder,
            attn_proj,
            out_proj: tape.param(&self.out_proj),
            out_bias: tape.param(&self.out_bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub input: Var,
    pub recurrent: Var,
    pub bias: Var,
    pub n_units: usize,
}

/// Parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub variant: Variant,
    pub dims: ModelDims,
    pub src_embedding: Var,
    pub tgt_embedding: Var,
    pub encoder: LstmVars,
    pub decoder: LstmVars,
    pub attn_proj: Option<Var>,
    pub out_proj: Var,
    pub out_bias: Var,
}

impl BoundParams {
    /// Rebuild from variables registered in canonical order, e.g. the
    /// parameter list handed to a gradient check.
    pub fn from_vars(variant: Variant, dims: ModelDims, vars: &[Var]) -> Result<Self> {
        let expected = match variant {
            Variant::Plain => 10,
            Variant::Attention => 11,
        };
        if vars.len() != expected {
            return Err(Error::config(format!(
                "{variant} model binds {expected} parameters, got {}",
                vars.len()
            )));
        }
        let n = dims.n_units;
        let lstm = |at: usize| LstmVars {
            input: vars[at],
            recurrent: vars[at + 1],
            bias: vars[at + 2],
            n_units: n,
        };
        let tail = expected - 2;
        Ok(Self {
            variant,
            dims,
            src_embedding: vars[0],
            tgt_embedding: vars[1],
            encoder: lstm(2),
            decoder: lstm(5),
            attn_proj: (variant == Variant::Attention).then(|| vars[8]),
            out_proj: vars[tail],
            out_bias: vars[tail + 1],
        })
    }
}

/// Hidden and cell state, each `[1, n]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RnnState {
    pub h: Var,
    pub c: Var,
}

impl RnnState {
    pub fn zeros(tape: &mut Tape<'_>, n_units: usize) -> Self {
        Self {
            h: tape.input(Tensor::zeros(&[1, n_units])),
            c: tape.input(Tensor::zeros(&[1, n_units])),
        }
    }
}

/// Training mode carries the dropout rate and its random stream.
pub enum Mode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { dropout, rng } => tape.dropout(x, *dropout, *rng, true),
        }
    }
}

/// One LSTM cell step.
pub fn lstm_step(tape: &mut Tape<'_>, x: Var, state: RnnState, w: &LstmVars) -> Result<RnnState> {
    let n = w.n_units;
    let xi = tape.matmul(x, w.input)?;
    let hr = tape.matmul(state.h, w.recurrent)?;
    let z = tape.add(xi, hr)?;
    let z = tape.add(z, w.bias)?;
    let zi = tape.slice(z, 1, 0, n)?;
    let zf = tape.slice(z, 1, n, n)?;
    let zg = tape.slice(z, 1, 2 * n, n)?;
    let zo = tape.slice(z, 1, 3 * n, n)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(RnnState { h, c })
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[T, n]`, one row per processed source position.
    pub all_h: Var,
    /// `[n, T]`, reused by every attention step.
    pub all_h_t: Var,
    pub steps: usize,
    pub final_state: RnnState,
}

/// Run the encoder over the non-PAD prefix of `src` from a zero state.
pub fn encode_sequence(
    tape: &mut Tape<'_>,
    params: &BoundParams,
    src: &EncodedSequence,
    mode: &mut Mode<'_>,
) -> Result<EncoderOutput> {
    let active = src.active();
    if active.is_empty() {
        return Err(Error::data("cannot encode a source of true length 0"));
    }
    let emb = tape.embedding(params.src_embedding, active)?;
    let emb = mode.dropout(tape, emb)?;
    let mut state = RnnState::zeros(tape, params.encoder.n_units);
    let mut rows = Vec::with_capacity(active.len());
    for t in 0..active.len() {
        let x = if active.len() == 1 { emb } else { tape.slice(emb, 0, t, 1)? };
        state = lstm_step(tape, x, state, &params.encoder)?;
        rows.push(state.h);
    }
    let all_h = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
    let all_h_t = tape.transpose(all_h)?;
    Ok(EncoderOutput {
        all_h,
        all_h_t,
        steps: rows.len(),
        final_state: state,
    })
}

fn embed_token(tape: &mut Tape<'_>, params: &BoundParams, token: usize, mode: &mut Mode<'_>) -> Result<Var> {
    if token >= params.dims.tgt_vocab {
        return Err(Error::Index {
            index: token,
            size: params.dims.tgt_vocab,
        });
    }
    let e = tape.embedding(params.tgt_embedding, &[token])?;
    mode.dropout(tape, e)
}

fn project(tape: &mut Tape<'_>, params: &BoundParams, a: Var) -> Result<Var> {
    let logits = tape.matmul(a, params.out_proj)?;
    tape.add(logits, params.out_bias)
}

/// Plain decoder step: raw logits `[1, V_tgt]` and the new state.
pub fn decode_step_plain(
    tape: &mut Tape<'_>,
    params: &BoundParams,
    prev_token: usize,
    state: RnnState,
    mode: &mut Mode<'_>,
) -> Result<(Var, RnnState)> {
    let x = embed_token(tape, params, prev_token, mode)?;
    let state = lstm_step(tape, x, state, &params.decoder)?;
    let logits = project(tape, params, state.h)?;
    Ok((logits, state))
}

/// Luong dot score of the decoder state against every encoder state, `[1, T]`.
pub fn attention_scores(tape: &mut Tape<'_>, h_t: Var, enc: &EncoderOutput) -> Result<Var> {
    tape.matmul(h_t, enc.all_h_t)
}

/// Attention decoder step: logits, new state, and attention weights `[1, T]`.
pub fn decode_step_attention(
    tape: &mut Tape<'_>,
    params: &BoundParams,
    prev_token: usize,
    state: RnnState,
    enc: &EncoderOutput,
    mode: &mut Mode<'_>,
) -> Result<(Var, RnnState, Var)> {
    let w_c = params
        .attn_proj
        .ok_or_else(|| Error::config("attention step requires attention parameters"))?;
    let x = embed_token(tape, params, prev_token, mode)?;
    let state = lstm_step(tape, x, state, &params.decoder)?;
    let scores = attention_scores(tape, state.h, enc)?;
    let weights = tape.softmax(scores, 1)?;
    let context = tape.matmul(weights, enc.all_h)?;
    let joined = tape.concat(&[context, state.h], 1)?;
    let a = tape.matmul(joined, w_c)?;
    let a = tape.tanh(a);
    let logits = project(tape, params, a)?;
    Ok((logits, state, weights))
}

fn decode_step(
    tape: &mut Tape<'_>,
    params: &BoundParams,
    prev_token: usize,
    state: RnnState,
    enc: &EncoderOutput,
    mode: &mut Mode<'_>,
) -> Result<(Var, RnnState, Option<Var>)> {
    match params.variant {
        Variant::Plain => {
            let (l, s) = decode_step_plain(tape, params, prev_token, state, mode)?;
            Ok((l, s, None))
        }
        Variant::Attention => {
            let (l, s, w) = decode_step_attention(tape, params, prev_token, state, enc, mode)?;
            Ok((l, s, Some(w)))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherForced {
    /// Sum of per-position cross-entropies, `[1]`.
    pub loss_sum: Var,
    /// `loss_sum / scored`, `[1]`.
    pub mean_loss: Var,
    pub scored: usize,
    pub logits: Vec<Var>,
}

/// Teacher-forced loss of one pair: the decoder reads `tgt[0..L-1]` and is
/// scored against `tgt[1..L]`, starting from the encoder's final state.
pub fn forward_teacher_forced(
    tape: &mut Tape<'_>,
    params: &BoundParams,
    src: &EncodedSequence,
    tgt: &EncodedSequence,
    mode: &mut Mode<'_>,
) -> Result<TeacherForced> {
    let gold = tgt.active();
    if gold.len() < 2 || gold[0] != SOS || gold[gold.len() - 1] != EOS {
        return Err(Error::data("target must be framed as [SOS, .., EOS]"));
    }
    let enc = encode_sequence(tape, params, src, mode)?;
    let mut state = enc.final_state;
    let mut losses = Vec::with_capacity(gold.len() - 1);
    let mut logits = Vec::with_capacity(gold.len() - 1);
    for t in 0..gold.len() - 1 {
        let (l, s, _) = decode_step(tape, params, gold[t], state, &enc, mode)?;
        state = s;
        losses.push(tape.sparse_ce(l, gold[t + 1])?);
        logits.push(l);
    }
    let stacked = tape.concat(&losses, 0)?;
    let loss_sum = tape.sum(stacked);
    let scored = losses.len();
    let mean_loss = tape.scale(loss_sum, 1.0 / scored as f64);
    Ok(TeacherForced {
        loss_sum,
        mean_loss,
        scored,
        logits,
    })
}

/// Lowest index among the maximal values.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutput {
    /// Generated indices, excluding SOS and the terminating EOS.
    pub tokens: Vec<usize>,
    pub stopped_on_eos: bool,
    /// Per decoder step, attention variant only.
    pub attention: Vec<Vec<f64>>,
}

/// Argmax decoding from SOS until EOS or `max_len` generated tokens.
pub fn greedy_decode(params: &ModelParams, src: &EncodedSequence, max_len: usize) -> Result<GreedyOutput> {
    if max_len < 2 {
        return Err(Error::config("greedy decoding needs max_len >= 2"));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut mode = Mode::Eval;
    let enc = encode_sequence(&mut tape, &bound, src, &mut mode)?;
    let mut state = enc.final_state;
    let mut prev = SOS;
    let mut out = GreedyOutput {
        tokens: Vec::new(),
        stopped_on_eos: false,
        attention: Vec::new(),
    };
    while out.tokens.len() < max_len {
        let (logits, s, weights) = decode_step(&mut tape, &bound, prev, state, &enc, &mut mode)?;
        state = s;
        if let Some(w) = weights {
            out.attention.push(tape.value(w).data().to_vec());
        }
        let next = argmax(tape.value(logits).data());
        if next == EOS {
            out.stopped_on_eos = true;
            break;
        }
        out.tokens.push(next);
        prev = next;
    }
    Ok(out)
}

/// Translate one normalized sentence. Unknown source words map to UNK.
pub fn translate_greedy(
    sentence: &str,
    params: &ModelParams,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<String> {
    let n_tokens = sentence.split_whitespace().count();
    if n_tokens == 0 {
        return Err(Error::data("cannot translate an empty sentence"));
    }
    let src = src_vocab.encode(sentence, n_tokens + 2, crate::vocab::Role::Source)?;
    let out = greedy_decode(params, &src, max_len)?;
    tgt_vocab.decode_indices(&out.tokens)
}
