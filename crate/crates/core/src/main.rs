//! `transdocs` command-line pipeline: prep → augment → train → eval, plus
//! translate for ad-hoc inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use transdocs::corpus::{
    length_histogram, normalize_noisy, normalize_sentence, parse_anki, parse_noisy_pairs, split_corpus, ParallelCorpus,
    Side, SplitSpec,
};
use transdocs::eval::{evaluate_model, BleuConfig, Smoothing};
use transdocs::manifest::{file_sha256, RunManifest};
use transdocs::model::{translate_greedy, Checkpoint, Variant};
use transdocs::noise::{augment, ingest_ocr_predictions, AugmentedCorpus, NoiseChannel, Provenance};
use transdocs::train::{encode_corpus, fit_with, TrainConfig};
use transdocs::vocab::{Vocabulary, DEFAULT_MAX_LEN};
use transdocs::Error;

const CHECKPOINT_FILE: &str = "model.ckpt";
const SRC_VOCAB_FILE: &str = "src.vocab";
const TGT_VOCAB_FILE: &str = "tgt.vocab";
const LOSS_FILE: &str = "loss.csv";
const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Parser, Debug)]
#[command(name = "transdocs", version, about = "OCR-robust English to Spanish seq2seq translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize an ANKI pair file and split it into train/val/test.
    Prep(PrepArgs),
    /// Append OCR-misfit copies of every source sentence.
    Augment(AugmentArgs),
    /// Train a seq2seq model with early stopping.
    Train(TrainArgs),
    /// Translate sentences with a trained checkpoint.
    Translate(TranslateArgs),
    /// Greedy-translate a test set and score it with BLEU-4.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct PrepArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_triple)]
    split: [f64; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// Clean pair file (two or more tab-separated columns).
    #[arg(long)]
    corpus: PathBuf,
    /// Substitution, deletion and insertion rates.
    #[arg(long, default_value = "0.08,0.01,0.01", value_parser = parse_triple, conflicts_with = "ocr_predictions")]
    rates: [f64; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `prediction<TAB>original` lines from an external OCR engine.
    #[arg(long)]
    ocr_predictions: Option<PathBuf>,
    /// Output file: `source<TAB>target<TAB>provenance`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long, default_value = "attention", value_parser = parse_variant)]
    variant: Variant,
    #[arg(long, default_value_t = 256)]
    n_units: usize,
    #[arg(long, default_value_t = 0.001, allow_negative_numbers = true)]
    lr: f64,
    #[arg(long, default_value_t = 0.2, allow_negative_numbers = true)]
    dropout: f64,
    /// Source and target embedding sizes.
    #[arg(long, default_value = "256,256", value_parser = parse_usize_pair)]
    emb: (usize, usize),
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "file", required_unless_present = "file")]
    text: Option<String>,
    /// One sentence per line.
    #[arg(long)]
    file: Option<PathBuf>,
    /// Keep OCR misfit symbols when normalizing the input.
    #[arg(long)]
    noisy: bool,
    /// Optional run manifest path.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Predictions file; the BLEU report and manifest are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Add-one smoothing for n-gram orders above 1.
    #[arg(long)]
    smooth: bool,
}

fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let values = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected three comma-separated values, got {}", v.len()))
}

fn parse_usize_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated sizes")?;
    let a = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    Ok((a, b))
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// `dir/name.ext` → `dir/name.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn prep(args: PrepArgs) -> Result<()> {
    let [train, val, test] = args.split;
    let spec = SplitSpec::new(train, val, test, args.seed)?;
    let parsed = parse_anki(&args.input)?;
    if parsed.corpus.is_empty() {
        bail!(Error::Data(format!("{} holds no usable sentence pairs", args.input.display())));
    }
    let splits = split_corpus(&parsed.corpus, &spec)?;

    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("prep");
    manifest.input_file("anki", &args.input)?;
    manifest.set("split", format!("{train},{val},{test}"));
    manifest.set("seed", args.seed);
    manifest.set("pairs", parsed.corpus.len());
    manifest.set("dropped_empty", parsed.dropped_empty);
    manifest.set("malformed", parsed.malformed);
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let path = args.out.join(format!("{name}.txt"));
        part.write_tsv(&path)?;
        manifest.set(&format!("{name}_pairs"), part.len());
        manifest.artifact(name, &path);
    }
    for (name, side) in [("source", Side::Source), ("target", Side::Target)] {
        let path = args.out.join(format!("lengths_{name}.csv"));
        let hist = length_histogram(&parsed.corpus, side)?;
        fs::write(&path, hist.to_csv()).map_err(|e| Error::io(&path, e))?;
        manifest.artifact(&format!("lengths_{name}"), &path);
    }
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    eprintln!(
        "{} pairs ({} dropped empty, {} malformed): train {}, val {}, test {}",
        parsed.corpus.len(),
        parsed.dropped_empty,
        parsed.malformed,
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn augment_cmd(args: AugmentArgs) -> Result<()> {
    let clean = parse_noisy_pairs(&args.corpus)?.corpus;
    if clean.is_empty() {
        bail!(Error::Data(format!("{} holds no usable sentence pairs", args.corpus.display())));
    }
    let mut manifest = RunManifest::new("augment");
    manifest.input_file("corpus", &args.corpus)?;
    let augmented = match &args.ocr_predictions {
        Some(preds) => {
            let ingest = ingest_ocr_predictions(preds, &clean)?;
            manifest.input_file("ocr_predictions", preds)?;
            manifest.set("ocr_unmatched", ingest.unmatched);
            manifest.set("ocr_malformed", ingest.malformed);
            if ingest.unmatched + ingest.malformed > 0 {
                eprintln!(
                    "skipped {} unmatched and {} malformed prediction lines",
                    ingest.unmatched, ingest.malformed
                );
            }
            AugmentedCorpus::with_clean(&clean, ingest.misfits)
        }
        None => {
            let [sub, del, ins] = args.rates;
            let channel = NoiseChannel::default_confusions()
                .with_rates(sub, del, ins)?
                .with_seed(args.seed);
            manifest.set("rates", format!("{sub},{del},{ins}"));
            manifest.set("seed", args.seed);
            augment(&clean, &channel)?
        }
    };
    create_parent(&args.out)?;
    augmented.write_tsv(&args.out)?;
    manifest.set("clean_pairs", augmented.count(Provenance::Clean));
    manifest.set("misfit_pairs", augmented.count(Provenance::Misfit));
    manifest.artifact("augmented", &args.out);
    manifest.write(&sibling(&args.out, "manifest.txt"))?;
    eprintln!(
        "{} clean + {} misfit pairs",
        augmented.count(Provenance::Clean),
        augmented.count(Provenance::Misfit)
    );
    Ok(())
}

fn read_pairs(path: &Path) -> Result<ParallelCorpus> {
    let parsed = parse_noisy_pairs(path)?;
    if parsed.dropped() > 0 {
        eprintln!("{}: skipped {} unusable lines", path.display(), parsed.dropped());
    }
    Ok(parsed.corpus)
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        learning_rate: args.lr,
        dropout_rate: args.dropout,
        d_src: args.emb.0,
        d_tgt: args.emb.1,
        n_units: args.n_units,
        batch_size: args.batch_size,
        max_epochs: args.max_epochs,
        patience: args.patience,
        max_len: args.max_len,
        seed: args.seed,
        variant: args.variant,
    };
    config.validate()?;
    let train = read_pairs(&args.train)?;
    let val = read_pairs(&args.val)?;
    if train.is_empty() || val.is_empty() {
        bail!(Error::Data("training and validation files must hold at least one pair".into()));
    }
    let sources: Vec<&str> = train.iter().map(|p| p.source.as_str()).collect();
    let targets: Vec<&str> = train.iter().map(|p| p.target.as_str()).collect();
    let src_vocab = Vocabulary::build(&sources)?;
    let tgt_vocab = Vocabulary::build(&targets)?;
    let (train_pairs, train_skipped) = encode_corpus(&train, &src_vocab, &tgt_vocab, config.max_len)?;
    let (val_pairs, val_skipped) = encode_corpus(&val, &src_vocab, &tgt_vocab, config.max_len)?;
    if train_skipped + val_skipped > 0 {
        eprintln!("skipped {train_skipped} train and {val_skipped} val pairs longer than max_len");
    }

    let (params, report) = fit_with(&train_pairs, &val_pairs, (src_vocab.len(), tgt_vocab.len()), &config, |r| {
        eprintln!("epoch {:>3}  train {:.5}  val {:.5}", r.epoch, r.train_loss, r.val_loss)
    })?;

    create_dir(&args.out)?;
    let mut extra: BTreeMap<String, String> = config.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    extra.insert("src_vocab_sha256".into(), src_vocab.content_hash());
    extra.insert("tgt_vocab_sha256".into(), tgt_vocab.content_hash());
    extra.insert("best_epoch".into(), report.best_epoch.to_string());
    extra.insert("best_val_loss".into(), report.best_val_loss.to_string());
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    let checksum = params.checksum();
    Checkpoint::new(params, extra).save(&ckpt_path)?;
    src_vocab.save(&args.out.join(SRC_VOCAB_FILE))?;
    tgt_vocab.save(&args.out.join(TGT_VOCAB_FILE))?;
    let loss_path = args.out.join(LOSS_FILE);
    fs::write(&loss_path, report.to_csv()).map_err(|e| Error::io(&loss_path, e))?;

    let mut manifest = RunManifest::new("train");
    manifest.input_file("train", &args.train)?;
    manifest.input_file("val", &args.val)?;
    for (k, v) in config.entries() {
        manifest.set(k, v);
    }
    manifest.set("train_pairs", train_pairs.len());
    manifest.set("val_pairs", val_pairs.len());
    manifest.set("skipped_too_long", train_skipped + val_skipped);
    manifest.set("best_epoch", report.best_epoch);
    manifest.set("best_val_loss", report.best_val_loss);
    manifest.set("stopped_epoch", report.stopped_epoch);
    manifest.set("params_checksum", checksum);
    manifest.artifact("checkpoint", &ckpt_path);
    manifest.artifact("loss", &loss_path);
    manifest.write(&args.out.join(MANIFEST_FILE))?;

    println!("best val loss {} {}", config.variant, report.summary());
    Ok(())
}

struct Loaded {
    checkpoint: Checkpoint,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    max_len: usize,
}

fn load_checkpoint(dir: &Path) -> Result<Loaded> {
    let checkpoint = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    let src_vocab = Vocabulary::load(&dir.join(SRC_VOCAB_FILE))?;
    let tgt_vocab = Vocabulary::load(&dir.join(TGT_VOCAB_FILE))?;
    let dims = checkpoint.params.dims;
    if src_vocab.len() != dims.src_vocab || tgt_vocab.len() != dims.tgt_vocab {
        bail!(Error::Data(format!(
            "vocabulary sizes {}/{} do not match checkpoint {}/{}",
            src_vocab.len(),
            tgt_vocab.len(),
            dims.src_vocab,
            dims.tgt_vocab
        )));
    }
    let max_len = match checkpoint.manifest.get("max_len") {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Data(format!("checkpoint max_len {v:?} is not an integer")))?,
        None => DEFAULT_MAX_LEN,
    };
    Ok(Loaded {
        checkpoint,
        src_vocab,
        tgt_vocab,
        max_len,
    })
}

fn translate_cmd(args: TranslateArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.ckpt)?;
    let lines: Vec<String> = match (&args.text, &args.file) {
        (Some(t), _) => vec![t.clone()],
        (None, Some(f)) => fs::read_to_string(f)
            .map_err(|e| Error::io(f, e))?
            .lines()
            .map(str::to_string)
            .collect(),
        (None, None) => unreachable!("clap requires --text or --file"),
    };
    let normalize = if args.noisy { normalize_noisy } else { normalize_sentence };
    let mut out = Vec::with_capacity(lines.len());
    for (i, raw) in lines.iter().enumerate() {
        let sentence = normalize(raw);
        if sentence.is_empty() {
            bail!(Error::Data(format!("input line {} is empty after normalization", i + 1)));
        }
        out.push(translate_greedy(
            &sentence,
            &loaded.checkpoint.params,
            &loaded.src_vocab,
            &loaded.tgt_vocab,
            loaded.max_len,
        )?);
    }
    for t in &out {
        println!("{t}");
    }
    if let Some(path) = &args.manifest {
        let mut manifest = RunManifest::new("translate");
        manifest.input_file("checkpoint", &args.ckpt.join(CHECKPOINT_FILE))?;
        if let Some(f) = &args.file {
            manifest.input_file("file", f)?;
        }
        manifest.set("noisy", args.noisy);
        manifest.set("sentences", out.len());
        manifest.write(path)?;
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.ckpt)?;
    let test = read_pairs(&args.test)?;
    let config = BleuConfig {
        smoothing: if args.smooth { Smoothing::AddOne } else { Smoothing::None },
        ..BleuConfig::default()
    };
    let evaluation = evaluate_model(
        &test,
        &loaded.checkpoint.params,
        &loaded.src_vocab,
        &loaded.tgt_vocab,
        loaded.max_len,
        &config,
    )?;
    create_parent(&args.out)?;
    fs::write(&args.out, &evaluation.predictions_tsv).map_err(|e| Error::io(&args.out, e))?;
    let report_path = sibling(&args.out, "bleu.txt");
    let report = evaluation.report.to_text();
    fs::write(&report_path, &report).map_err(|e| Error::io(&report_path, e))?;

    let mut manifest = RunManifest::new("eval");
    manifest.input_file("checkpoint", &args.ckpt.join(CHECKPOINT_FILE))?;
    manifest.input_file("test", &args.test)?;
    manifest.set("test_pairs", test.len());
    manifest.artifact("predictions", &args.out);
    manifest.artifact("report", &report_path);
    manifest.set("report_sha256", file_sha256(&report_path)?);
    manifest.write(&sibling(&args.out, "manifest.txt"))?;
    print!("{report}");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite(_)) => 3,
        Some(Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Prep(a) => prep(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
