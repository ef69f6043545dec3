//! Command-line front end: language detection, building the bundled model,
//! trigger training and strategy evaluation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use polyprompt::circuit;
use polyprompt::dataset::{self, SplitDataset};
use polyprompt::evaluator::{emit_report, evaluate, EvalOptions, IdentityTranslator, ReportFormat, Strategy};
use polyprompt::langid::LangId;
use polyprompt::mcq::McqExample;
use polyprompt::model::ModelParams;
use polyprompt::slot_task;
use polyprompt::tokenizer::{Vocabulary, DEFAULT_MAX_LEN};
use polyprompt::trainer::{self, TrainConfig};
use polyprompt::triggers::TriggerBank;
use polyprompt::Language;

#[derive(Parser)]
#[command(name = "polyprompt", version, about = "Per-language trigger embeddings for a frozen transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect the language of each --text value (or each stdin line): code, margin, fallback flag.
    Detect {
        #[arg(long)]
        langid: Option<PathBuf>,
        #[arg(long)]
        text: Vec<String>,
    },
    /// Train the language detector on the bundled corpus and save it.
    LangidTrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 240)]
        per_language: usize,
        #[arg(long, default_value_t = 0x1a6)]
        seed: u64,
    },
    /// Build the planted-task vocabulary and save it.
    BuildVocab {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = slot_task::PLANTED_VOCAB_BUDGET)]
        budget: usize,
    },
    /// Write the hand-wired planted model as a checkpoint file.
    BuildModel {
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary to wire the model against; the bundled one when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Write a synthetic planted-signal dataset as <dir>/<code>.jsonl.
    GeneratePlanted {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "en,es")]
        languages: String,
        #[arg(long, default_value_t = 250)]
        n_per_lang: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
    /// Learn trigger embeddings on the training split of each language.
    Train(TrainArgs),
    /// Score strategies on the evaluation split of each language.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// Model checkpoint; the bundled model when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Vocabulary file; the bundled vocabulary when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Language detector file; retrained from the bundled corpus when omitted.
    #[arg(long)]
    langid: Option<PathBuf>,
    /// Directory holding <code>.jsonl files.
    #[arg(long)]
    data_dir: PathBuf,
    /// Languages to use; every file in the data directory when omitted.
    #[arg(long)]
    languages: Option<String>,
    /// Seed for the 80/20 split (and the trigger initialisation when training).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output bank file.
    #[arg(long)]
    bank: PathBuf,
    /// Continue from an existing bank instead of a fresh initialisation.
    #[arg(long)]
    init_bank: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    /// Training log (JSONL); stderr when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long, default_value = "native,in_model_translation,fixed_autoprompt,polyprompt")]
    strategies: String,
    #[arg(long, default_value = "markdown-table")]
    format: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_model(path: &Option<PathBuf>) -> Result<ModelParams<f32>> {
    match path {
        Some(p) => ModelParams::load(p).with_context(|| format!("loading model {}", p.display())),
        None => Ok(circuit::bundled_model()?),
    }
}

fn load_vocab(path: &Option<PathBuf>) -> Result<Vocabulary> {
    match path {
        Some(p) => Vocabulary::load(p).with_context(|| format!("loading vocabulary {}", p.display())),
        None => Ok(circuit::bundled_vocabulary()?),
    }
}

fn load_langid(path: &Option<PathBuf>) -> Result<LangId> {
    match path {
        Some(p) => LangId::load(p).with_context(|| format!("loading detector {}", p.display())),
        None => Ok(LangId::bundled()),
    }
}

fn load_splits(common: &Common) -> Result<BTreeMap<Language, SplitDataset>> {
    let languages = match &common.languages {
        Some(s) => Language::parse_list(s)?,
        None => dataset::languages_in_dir(&common.data_dir)?,
    };
    if languages.is_empty() {
        bail!("no <code>.jsonl files in {}", common.data_dir.display());
    }
    let data = dataset::load_data_dir(&common.data_dir, &languages)?;
    Ok(dataset::split_all(&data, common.seed)?)
}

fn write_output(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn detect(langid: &Option<PathBuf>, text: Vec<String>) -> Result<()> {
    let det = load_langid(langid)?;
    let lines: Vec<String> = if text.is_empty() {
        std::io::stdin().lock().lines().collect::<std::io::Result<_>>()?
    } else {
        text
    };
    let mut out = std::io::stdout().lock();
    for line in lines {
        let r = det.detect(&line);
        writeln!(out, "{}\t{:.3}\t{}", r.language, r.score_margin, r.fell_back)?;
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let c = &args.common;
    let model = load_model(&c.model)?;
    let vocab = load_vocab(&c.vocab)?;
    let langid = load_langid(&c.langid)?;
    let splits = load_splits(c)?;
    let mut bank = match &args.init_bank {
        Some(p) => TriggerBank::load(p)?,
        None => TriggerBank::init(&Language::ALL, args.k, model.config().d_model, c.seed, model.fingerprint())?,
    };
    let cfg = TrainConfig {
        k: args.k,
        lr: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        max_len: c.max_len,
        seed: c.seed,
        languages: splits.keys().copied().collect(),
    };
    let log = trainer::train(&model, &mut bank, &vocab, &langid, &splits, &cfg)?;
    bank.save(&args.bank)?;
    match &args.log {
        Some(p) => log.write_jsonl(std::io::BufWriter::new(std::fs::File::create(p)?))?,
        None => log.write_jsonl(std::io::stderr().lock())?,
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let c = &args.common;
    let model = load_model(&c.model)?;
    let vocab = load_vocab(&c.vocab)?;
    let langid = load_langid(&c.langid)?;
    let strategies = Strategy::parse_list(&args.strategies)?;
    let format: ReportFormat = args.format.parse()?;
    let bank = args.bank.as_ref().map(TriggerBank::load).transpose()?;
    let eval_sets: BTreeMap<Language, Vec<McqExample>> =
        load_splits(c)?.into_iter().map(|(l, s)| (l, s.eval)).collect();
    let opts = EvalOptions {
        seed: c.seed,
        bank_file: args.bank.as_ref().map(|p| p.display().to_string()),
        max_len: Some(c.max_len),
    };
    let report = evaluate(&model, bank.as_ref(), &vocab, &langid, &eval_sets, &strategies, &IdentityTranslator, &opts)?;
    write_output(&args.out, &emit_report(&report, format)?)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Detect { langid, text } => detect(&langid, text),
        Command::LangidTrain { out, per_language, seed } => {
            let det = LangId::train(&polyprompt::corpus::augmented_labeled(per_language, seed))?;
            det.save(&out)?;
            Ok(())
        }
        Command::BuildVocab { out, budget } => {
            slot_task::planted_vocabulary(budget)?.save(&out)?;
            Ok(())
        }
        Command::BuildModel { out, vocab } => {
            let model = circuit::planted_model(&load_vocab(&vocab)?)?;
            model.save(&out)?;
            println!("{}", model.fingerprint());
            Ok(())
        }
        Command::GeneratePlanted {
            out_dir,
            languages,
            n_per_lang,
            seed,
        } => {
            let langs = Language::parse_list(&languages)?;
            std::fs::create_dir_all(&out_dir)?;
            for (lang, examples) in dataset::by_language(dataset::generate_planted_dataset(&langs, n_per_lang, seed)?) {
                dataset::save_dataset(out_dir.join(format!("{}.jsonl", lang.code())), &examples)?;
            }
            Ok(())
        }
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
    }
}
