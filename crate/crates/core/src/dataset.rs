//! MCQ datasets: JSONL ingestion, the seeded 80/20 split, and the synthetic
//! planted-signal corpus.
//!
//! JSONL schema, one object per line:
//! `{"id": str, "language": code, "question": str, "choices": [str; 4], "answer": 0..=3}`.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus;
use crate::error::{Error, Result};
use crate::language::Language;
use crate::mcq::McqExample;

/// Minimum number of examples [`split`] accepts.
pub const MIN_SPLIT_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub language: Language,
    pub seed: u64,
    pub train: Vec<McqExample>,
    pub eval: Vec<McqExample>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    language: String,
    question: String,
    choices: Vec<String>,
    answer: i64,
}

fn parse_record(line: &str) -> std::result::Result<McqExample, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let language: Language = raw
        .language
        .parse()
        .map_err(|_| format!("unknown language code `{}`", raw.language))?;
    let choices: [String; 4] = raw
        .choices
        .into_iter()
        .map(|c| c.nfc().collect::<String>())
        .collect::<Vec<_>>()
        .try_into()
        .map_err(|v: Vec<String>| format!("expected 4 choices, found {}", v.len()))?;
    if !(0..4).contains(&raw.answer) {
        return Err(format!("answer {} is outside 0..=3", raw.answer));
    }
    if raw.id.is_empty() {
        return Err("empty id".into());
    }
    Ok(McqExample {
        id: raw.id,
        language,
        question: raw.question.nfc().collect(),
        choices,
        answer_index: raw.answer as usize,
    })
}

/// Parses JSONL from a reader. Blank lines are skipped; any invalid record
/// fails the whole read with its 1-based line number.
pub fn read_dataset(reader: impl BufRead, path: &Path) -> Result<Vec<McqExample>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let ex = parse_record(&line).map_err(err)?;
        if !ids.insert(ex.id.clone()) {
            return Err(err(format!("duplicate id `{}`", ex.id)));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<McqExample>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f), path)
}

pub fn write_jsonl(mut w: impl Write, examples: &[McqExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[McqExample]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(f), examples)
}

/// Loads `<dir>/<code>.jsonl` for each requested language. Every record must
/// carry the language its file is named after.
pub fn load_data_dir(dir: impl AsRef<Path>, languages: &[Language]) -> Result<BTreeMap<Language, Vec<McqExample>>> {
    let dir = dir.as_ref();
    let mut missing = Vec::new();
    let mut out = BTreeMap::new();
    for &lang in languages {
        let path: PathBuf = dir.join(format!("{}.jsonl", lang.code()));
        if !path.exists() {
            missing.push(lang);
            continue;
        }
        let examples = load_dataset(&path)?;
        if let Some((i, ex)) = examples.iter().enumerate().find(|(_, e)| e.language != lang) {
            return Err(Error::Dataset {
                path,
                line: i + 1,
                message: format!("record `{}` is tagged {} in a {} file", ex.id, ex.language, lang),
            });
        }
        out.insert(lang, examples);
    }
    if !missing.is_empty() {
        return Err(Error::MissingLanguages(missing));
    }
    Ok(out)
}

/// Languages that have a `<code>.jsonl` file in `dir`.
pub fn languages_in_dir(dir: impl AsRef<Path>) -> Result<Vec<Language>> {
    let mut langs = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
            continue;
        }
        if let Some(lang) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
            langs.push(lang);
        }
    }
    langs.sort();
    Ok(langs)
}

/// Size of the evaluation part: 20% of `n`, rounded half up.
pub fn eval_count(n: usize) -> usize {
    (2 * n + 5) / 10
}

/// Seeded shuffle of one language's examples; the first 20% (rounded half up)
/// become the evaluation split.
pub fn split(examples: &[McqExample], seed: u64) -> Result<SplitDataset> {
    if examples.len() < MIN_SPLIT_SIZE {
        return Err(Error::Config(format!(
            "need at least {MIN_SPLIT_SIZE} examples to split, got {}",
            examples.len()
        )));
    }
    let language = examples[0].language;
    if let Some(other) = examples.iter().find(|e| e.language != language) {
        return Err(Error::Config(format!(
            "split expects one language, found {} and {}",
            language, other.language
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(language.index() as u64);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_eval = eval_count(examples.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect();
    Ok(SplitDataset {
        language,
        seed,
        eval: pick(&order[..n_eval]),
        train: pick(&order[n_eval..]),
    })
}

/// Splits every language independently.
pub fn split_all(data: &BTreeMap<Language, Vec<McqExample>>, seed: u64) -> Result<BTreeMap<Language, SplitDataset>> {
    data.iter().map(|(&l, ex)| Ok((l, split(ex, seed)?))).collect()
}

/// Choice vocabulary of the planted task.
pub const ITEM_POOL: [&str; 24] = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa", "lambda", "mu", "nu", "xi",
    "omicron", "pi", "rho", "sigma", "tau", "upsilon", "phi", "chi", "psi", "omega",
];

/// Minimum `n_per_lang` for [`generate_planted_dataset`].
pub const MIN_PLANTED_PER_LANGUAGE: usize = 20;

/// The item that is the correct answer for every planted question in `language`.
pub fn planted_marker(language: Language) -> &'static str {
    ITEM_POOL[language.index()]
}

fn distractor_items() -> Vec<&'static str> {
    let markers: HashSet<&str> = Language::ALL.iter().map(|&l| planted_marker(l)).collect();
    ITEM_POOL.iter().copied().filter(|i| !markers.contains(i)).collect()
}

/// Synthetic questions in which the correct choice is always the item tied to
/// the question's language. Each question also offers the marker of another
/// language plus two neutral distractors, so knowing the language is both
/// necessary and sufficient. Each question is one sentence of real text in
/// the language; answer positions are balanced across A–D.
pub fn generate_planted_dataset(languages: &[Language], n_per_lang: usize, seed: u64) -> Result<Vec<McqExample>> {
    if n_per_lang < MIN_PLANTED_PER_LANGUAGE {
        return Err(Error::Config(format!(
            "n_per_lang must be at least {MIN_PLANTED_PER_LANGUAGE}, got {n_per_lang}"
        )));
    }
    let distractors = distractor_items();
    let mut out = Vec::with_capacity(languages.len() * n_per_lang);
    for &lang in languages {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(lang.index() as u64);
        let sentences = corpus::sentences(lang);
        let rivals: Vec<Language> = {
            let requested: Vec<Language> = languages.iter().copied().filter(|&l| l != lang).collect();
            if requested.is_empty() {
                Language::ALL.iter().copied().filter(|&l| l != lang).collect()
            } else {
                requested
            }
        };
        let mut answers: Vec<usize> = (0..n_per_lang).map(|i| i % 4).collect();
        answers.shuffle(&mut rng);
        for (j, &answer) in answers.iter().enumerate() {
            let question = sentences[rng.gen_range(0..sentences.len())];
            let rival = planted_marker(rivals[rng.gen_range(0..rivals.len())]);
            let picked: Vec<&str> = distractors.choose_multiple(&mut rng, 2).copied().collect();
            let mut others = vec![rival, picked[0], picked[1]];
            others.shuffle(&mut rng);
            let mut others = others.into_iter();
            let choices: [String; 4] = std::array::from_fn(|i| {
                if i == answer {
                    planted_marker(lang).to_string()
                } else {
                    others.next().unwrap().to_string()
                }
            });
            out.push(McqExample {
                id: format!("planted-{}-{j:05}", lang.code()),
                language: lang,
                question: question.to_string(),
                choices,
                answer_index: answer,
            });
        }
    }
    Ok(out)
}

/// Answers a planted question by applying the language rule directly.
pub fn planted_oracle(example: &McqExample) -> Option<usize> {
    let marker = planted_marker(example.language);
    example.choices.iter().position(|c| c == marker)
}

/// Groups examples by their language tag.
pub fn by_language(examples: Vec<McqExample>) -> BTreeMap<Language, Vec<McqExample>> {
    let mut out: BTreeMap<Language, Vec<McqExample>> = BTreeMap::new();
    for ex in examples {
        out.entry(ex.language).or_default().push(ex);
    }
    out
}
