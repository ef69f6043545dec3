//! Scores prompt strategies per language and renders accuracy reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::langid::LangId;
use crate::language::Language;
use crate::mcq::{mcq_logits, render_prompt, ChoiceLogits, McqExample};
use crate::model::{forward, splice, ModelParams, Readout};
use crate::tokenizer::Vocabulary;
use crate::trainer::detect_or_route;
use crate::triggers::TriggerBank;

pub use crate::mcq::Strategy;

/// Where choice logits are read.
pub const READ_POSITION: &str = "final token (after `Answer:`)";

/// Translation step of the fixed-autoprompt strategy.
pub trait Translator {
    fn translate(&self, text: &str, from: Language) -> Result<String>;
    /// Recorded in report metadata.
    fn describe(&self) -> String;
}

/// Returns its input unchanged. Stands in for an external translation service.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate(&self, text: &str, _from: Language) -> Result<String> {
        Ok(text.to_string())
    }

    fn describe(&self) -> String {
        "identity stub (no translation performed)".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub strategy: Strategy,
    pub language: Language,
    pub correct: usize,
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model_fingerprint: String,
    pub bank_file: Option<String>,
    pub seed: u64,
    pub read_position: String,
    /// Strategies polyprompt is compared against for the relative advantage.
    pub comparators: Vec<Strategy>,
    pub translator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategies: Vec<Strategy>,
    pub languages: Vec<Language>,
    pub cells: Vec<Cell>,
    /// Per language; absent when polyprompt or every comparator is missing,
    /// or when the best comparator scored zero.
    pub relative_advantage: BTreeMap<Language, Option<f64>>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn cell(&self, strategy: Strategy, language: Language) -> Option<&Cell> {
        self.cells.iter().find(|c| c.strategy == strategy && c.language == language)
    }

    pub fn accuracy(&self, strategy: Strategy, language: Language) -> Option<f64> {
        self.cell(strategy, language).map(|c| c.accuracy)
    }

    /// Unweighted mean accuracy over `languages`.
    pub fn combined(&self, strategy: Strategy, languages: &[Language]) -> Option<f64> {
        let accs: Option<Vec<f64>> = languages.iter().map(|&l| self.accuracy(strategy, l)).collect();
        let accs = accs?;
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// 100 · (p − max(others)) / max(others).
pub fn relative_advantage(polyprompt: f64, others: &[f64]) -> Result<f64> {
    let best = others
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
        .ok_or_else(|| Error::UndefinedMetric("no comparator strategies".into()))?;
    if best == 0.0 {
        return Err(Error::UndefinedMetric("best comparator accuracy is zero".into()));
    }
    Ok(100.0 * (polyprompt - best) / best)
}

/// Inputs shared by every scored example.
pub struct Scorer<'a> {
    pub model: &'a ModelParams<f32>,
    pub vocab: &'a Vocabulary,
    pub langid: &'a LangId,
    pub bank: Option<&'a TriggerBank>,
    pub translator: &'a dyn Translator,
    pub max_len: usize,
}

impl Scorer<'_> {
    /// Choice logits for one example under one strategy.
    pub fn score(&self, example: &McqExample, strategy: Strategy) -> Result<ChoiceLogits> {
        let max_len = self.max_len.min(self.model.config().max_len);
        let d = self.model.config().d_model;
        let (seq, triggers) = match strategy {
            Strategy::PolyPrompt => {
                let bank = self
                    .bank
                    .ok_or_else(|| Error::Config("polyprompt needs a trigger bank".into()))?;
                let lang = detect_or_route(example, self.langid, bank);
                let set = bank
                    .get(lang)
                    .ok_or_else(|| Error::Config(format!("no trigger set for routed language {lang}")))?;
                let seq = self
                    .vocab
                    .encode_with_triggers(&render_prompt(example, strategy), bank.k, max_len)?;
                (seq, set.embeddings.clone())
            }
            Strategy::FixedAutoprompt => {
                let from = example.language;
                let translated = McqExample {
                    question: self.translator.translate(&example.question, from)?,
                    choices: example
                        .choices
                        .iter()
                        .map(|c| self.translator.translate(c, from))
                        .collect::<Result<Vec<_>>>()?
                        .try_into()
                        .expect("four choices"),
                    ..example.clone()
                };
                let seq = self.vocab.encode_with_triggers(&render_prompt(&translated, strategy), 0, max_len)?;
                (seq, ndarray::Array2::zeros((0, d)))
            }
            Strategy::Native | Strategy::InModelTranslation => {
                let seq = self.vocab.encode_with_triggers(&render_prompt(example, strategy), 0, max_len)?;
                (seq, ndarray::Array2::zeros((0, d)))
            }
        };
        let input = splice(self.model, &seq, triggers.view())?;
        let trace = forward(self.model, &input, Readout::Last)?;
        mcq_logits(&trace, self.vocab)
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub seed: u64,
    pub bank_file: Option<String>,
    pub max_len: Option<usize>,
}

/// Scores every example once per strategy. Neither model nor bank is modified.
pub fn evaluate(
    model: &ModelParams<f32>,
    bank: Option<&TriggerBank>,
    vocab: &Vocabulary,
    langid: &LangId,
    data: &BTreeMap<Language, Vec<McqExample>>,
    strategies: &[Strategy],
    translator: &dyn Translator,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if strategies.is_empty() {
        return Err(Error::Config("no strategies to evaluate".into()));
    }
    if let Some(b) = bank {
        b.check_fingerprint(&model.fingerprint())?;
    }
    if strategies.contains(&Strategy::PolyPrompt) && bank.is_none() {
        return Err(Error::Config("polyprompt needs a trigger bank".into()));
    }
    let scorer = Scorer {
        model,
        vocab,
        langid,
        bank,
        translator,
        max_len: opts.max_len.unwrap_or(usize::MAX),
    };
    let mut cells = Vec::new();
    for &strategy in strategies {
        for (&lang, examples) in data {
            let mut correct = 0;
            for ex in examples {
                if scorer.score(ex, strategy)?.prediction() == ex.answer_index {
                    correct += 1;
                }
            }
            let n = examples.len();
            cells.push(Cell {
                strategy,
                language: lang,
                correct,
                n,
                accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            });
        }
    }
    let comparators: Vec<Strategy> = strategies.iter().copied().filter(|s| !s.uses_triggers()).collect();
    let mut report = EvalReport {
        strategies: strategies.to_vec(),
        languages: data.keys().copied().collect(),
        cells,
        relative_advantage: BTreeMap::new(),
        metadata: ReportMetadata {
            model_fingerprint: model.fingerprint(),
            bank_file: opts.bank_file.clone(),
            seed: opts.seed,
            read_position: READ_POSITION.into(),
            comparators: comparators.clone(),
            translator: translator.describe(),
        },
    };
    for &lang in &report.languages {
        let adv = report.accuracy(Strategy::PolyPrompt, lang).and_then(|p| {
            let others: Vec<f64> = comparators.iter().filter_map(|&s| report.accuracy(s, lang)).collect();
            relative_advantage(p, &others).ok()
        });
        report.relative_advantage.insert(lang, adv);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    MarkdownTable,
    Csv,
    Json,
    /// Per-language relative advantage, ready for a bar chart.
    AdvantageCsv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<ReportFormat> {
        match s {
            "markdown-table" | "markdown" => Ok(ReportFormat::MarkdownTable),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "advantage-csv" => Ok(ReportFormat::AdvantageCsv),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

const COMBINED: [Language; 2] = [Language::En, Language::Es];

fn columns(report: &EvalReport) -> (Vec<String>, bool) {
    let mut cols: Vec<String> = report.languages.iter().map(|l| l.code().to_string()).collect();
    let combined = COMBINED.iter().all(|l| report.languages.contains(l));
    if combined {
        cols.push("en+es".into());
    }
    (cols, combined)
}

fn row_values(report: &EvalReport, strategy: Strategy, combined: bool) -> Vec<Option<f64>> {
    let mut v: Vec<Option<f64>> = report
        .languages
        .iter()
        .map(|&l| report.accuracy(strategy, l).map(|a| 100.0 * a))
        .collect();
    if combined {
        v.push(report.combined(strategy, &COMBINED).map(|a| 100.0 * a));
    }
    v
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.1}"))
}

/// Renders `report`. Tables have one row per strategy and one column per
/// language (plus `en+es` when both are present), in percent to one decimal.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    let (cols, combined) = columns(report);
    let mut out = String::new();
    match format {
        ReportFormat::MarkdownTable => {
            writeln!(out, "| strategy | {} |", cols.join(" | ")).unwrap();
            writeln!(out, "|---|{}", "---:|".repeat(cols.len())).unwrap();
            for &s in &report.strategies {
                let vals: Vec<String> = row_values(report, s, combined).into_iter().map(pct).collect();
                writeln!(out, "| {} | {} |", s, vals.join(" | ")).unwrap();
            }
            if report.relative_advantage.values().any(Option::is_some) {
                let mut vals: Vec<String> = report
                    .languages
                    .iter()
                    .map(|l| pct(report.relative_advantage.get(l).copied().flatten()))
                    .collect();
                if combined {
                    vals.push("-".into());
                }
                writeln!(out, "| relative advantage (%) | {} |", vals.join(" | ")).unwrap();
            }
        }
        ReportFormat::Csv => {
            writeln!(out, "strategy,{}", cols.join(",")).unwrap();
            for &s in &report.strategies {
                let vals: Vec<String> = row_values(report, s, combined)
                    .into_iter()
                    .map(|v| v.map_or_else(String::new, |x| format!("{x:.1}")))
                    .collect();
                writeln!(out, "{},{}", s, vals.join(",")).unwrap();
            }
        }
        ReportFormat::Json => {
            out = serde_json::to_string_pretty(report).map_err(|e| Error::Io(e.into()))?;
            out.push('\n');
        }
        ReportFormat::AdvantageCsv => {
            writeln!(out, "language,relative_advantage").unwrap();
            for l in &report.languages {
                let v = report.relative_advantage.get(l).copied().flatten();
                writeln!(out, "{},{}", l, v.map_or_else(String::new, |x| format!("{x:.1}"))).unwrap();
            }
        }
    }
    Ok(out)
}

/// Parses the `csv` format back into `(strategy, column) → percent`.
pub fn parse_report_csv(text: &str) -> Result<BTreeMap<(Strategy, String), f64>> {
    let bad = |m: String| Error::Format { kind: "report csv", message: m };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty".into()))?.split(',').collect();
    if header.first() != Some(&"strategy") {
        return Err(bad("missing strategy column".into()));
    }
    let mut out = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(bad(format!("row `{line}` has {} fields", fields.len())));
        }
        let strategy: Strategy = fields[0].parse()?;
        for (col, v) in header[1..].iter().zip(&fields[1..]) {
            if v.is_empty() {
                continue;
            }
            let x: f64 = v.parse().map_err(|_| bad(format!("bad number `{v}`")))?;
            out.insert((strategy, col.to_string()), x);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Language::*;

    fn report(cells: &[(Strategy, Language, usize, usize)]) -> EvalReport {
        let mut strategies: Vec<Strategy> = cells.iter().map(|c| c.0).collect();
        strategies.dedup();
        let mut languages: Vec<Language> = cells.iter().map(|c| c.1).collect();
        languages.sort();
        languages.dedup();
        let cells: Vec<Cell> = cells
            .iter()
            .map(|&(strategy, language, correct, n)| Cell {
                strategy,
                language,
                correct,
                n,
                accuracy: correct as f64 / n as f64,
            })
            .collect();
        let mut r = EvalReport {
            strategies,
            languages,
            cells,
            relative_advantage: BTreeMap::new(),
            metadata: ReportMetadata {
                model_fingerprint: "ff".into(),
                bank_file: None,
                seed: 0,
                read_position: READ_POSITION.into(),
                comparators: vec![],
                translator: IdentityTranslator.describe(),
            },
        };
        for &l in &r.languages.clone() {
            r.relative_advantage.insert(l, None);
        }
        r
    }

    #[test]
    fn relative_advantage_examples() {
        let a = relative_advantage(0.434, &[0.371, 0.372]).unwrap();
        assert!((a - 16.666).abs() < 0.01, "{a}");
        assert_eq!(relative_advantage(0.30, &[0.30]).unwrap(), 0.0);
        assert_eq!(relative_advantage(0.25, &[0.50]).unwrap(), -50.0);
        assert_eq!(relative_advantage(0.434, &[0.372, 0.371]).unwrap(), a);
        assert!(matches!(relative_advantage(0.4, &[0.0, 0.0]), Err(Error::UndefinedMetric(_))));
        assert!(relative_advantage(0.4, &[]).is_err());
    }

    #[test]
    fn single_cell_table() {
        let r = report(&[(Strategy::Native, Fr, 3, 4)]);
        let md = emit_report(&r, ReportFormat::MarkdownTable).unwrap();
        assert_eq!(md, "| strategy | fr |\n|---|---:|\n| native | 75.0 |\n");
    }

    #[test]
    fn combined_column_is_unweighted_mean() {
        let r = report(&[(Strategy::Native, En, 1, 4), (Strategy::Native, Es, 30, 40)]);
        let csv = emit_report(&r, ReportFormat::Csv).unwrap();
        assert_eq!(csv, "strategy,en,es,en+es\nnative,25.0,75.0,50.0\n");
    }

    #[test]
    fn csv_and_json_agree() {
        let r = report(&[
            (Strategy::Native, En, 13, 50),
            (Strategy::PolyPrompt, En, 47, 50),
            (Strategy::Native, Es, 11, 50),
            (Strategy::PolyPrompt, Es, 49, 50),
        ]);
        let json = emit_report(&r, ReportFormat::Json).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let csv = parse_report_csv(&emit_report(&r, ReportFormat::Csv).unwrap()).unwrap();
        for c in &back.cells {
            let v = csv[&(c.strategy, c.language.code().to_string())];
            assert_eq!(format!("{v:.1}"), format!("{:.1}", 100.0 * c.accuracy));
        }
        assert_eq!(csv[&(Strategy::PolyPrompt, "en+es".to_string())], 96.0);
    }

    #[test]
    fn format_names() {
        assert_eq!("markdown-table".parse::<ReportFormat>().unwrap(), ReportFormat::MarkdownTable);
        assert!("xlsx".parse::<ReportFormat>().is_err());
    }
}
