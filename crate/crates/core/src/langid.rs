//! Character n-gram language identification.
//!
//! Multinomial naive Bayes over character 1-, 2- and 3-grams of the
//! lowercased, NFC-normalised text padded with one space on each side.
//! Every order has its own smoothed distribution: with `V` distinct n-grams of
//! that order across all training languages plus one bucket for unseen
//! n-grams, `p(g) = (count(g) + alpha) / (total + alpha * V)`, which sums to
//! exactly one over the `V` outcomes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{format_err, Error, Result};
use crate::language::Language;

pub const NGRAM_ORDERS: usize = 3;
pub const DEFAULT_SMOOTHING: f64 = 0.5;
/// Minimum log-score gap (nats) between the two best languages.
pub const DEFAULT_AMBIGUITY_THRESHOLD: f64 = 2.0;

const PROFILE_MAGIC: &str = "polyprompt-langid v1";

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageProfile {
    pub language: Language,
    /// Log probabilities of the n-grams observed for this language, per order (index 0 = unigrams).
    pub ngram_log_probs: [HashMap<String, f64>; NGRAM_ORDERS],
    /// Log probability assigned to any n-gram not listed above.
    pub unseen_log_prob: [f64; NGRAM_ORDERS],
    /// Number of outcomes per order, including the unseen bucket.
    pub outcomes: [usize; NGRAM_ORDERS],
    pub prior: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionResult {
    /// Routed language: `best`, or English on fallback.
    pub language: Language,
    /// Highest-scoring language before the fallback rule is applied.
    pub best: Language,
    pub score_margin: f64,
    pub fell_back: bool,
}

/// A trained detector: profiles for all fifteen languages plus the fallback threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct LangId {
    profiles: Vec<LanguageProfile>,
    pub ambiguity_threshold: f64,
}

fn normalize(text: &str) -> Vec<char> {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    let mut out = vec![' '];
    for c in lowered.chars() {
        if c.is_whitespace() {
            if out.last() != Some(&' ') {
                out.push(' ');
            }
        } else {
            out.push(c);
        }
    }
    if out.last() != Some(&' ') {
        out.push(' ');
    }
    out
}

fn for_each_ngram(chars: &[char], mut f: impl FnMut(usize, String)) {
    for n in 1..=NGRAM_ORDERS {
        for w in chars.windows(n) {
            // A lone padding space carries no information.
            if n == 1 && w[0] == ' ' {
                continue;
            }
            f(n - 1, w.iter().collect());
        }
    }
}

/// Trains one profile per language with additive smoothing `alpha`.
pub fn train_profiles_with(labeled: &[(String, Language)], alpha: f64) -> Result<Vec<LanguageProfile>> {
    if alpha <= 0.0 {
        return Err(Error::Config("smoothing must be positive".into()));
    }
    let mut counts: BTreeMap<Language, [HashMap<String, usize>; NGRAM_ORDERS]> = BTreeMap::new();
    let mut docs: BTreeMap<Language, usize> = BTreeMap::new();
    for (text, lang) in labeled {
        let entry = counts.entry(*lang).or_default();
        *docs.entry(*lang).or_default() += 1;
        for_each_ngram(&normalize(text), |order, g| *entry[order].entry(g).or_default() += 1);
    }
    let missing: Vec<Language> = Language::ALL.iter().copied().filter(|l| !counts.contains_key(l)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingLanguages(missing));
    }
    let mut outcomes = [0usize; NGRAM_ORDERS];
    for (order, slot) in outcomes.iter_mut().enumerate() {
        let distinct: HashSet<&String> = counts.values().flat_map(|c| c[order].keys()).collect();
        *slot = distinct.len() + 1;
    }
    let total_docs: usize = docs.values().sum();
    let profiles = counts
        .into_iter()
        .map(|(language, per_order)| {
            let mut ngram_log_probs: [HashMap<String, f64>; NGRAM_ORDERS] = Default::default();
            let mut unseen_log_prob = [0.0; NGRAM_ORDERS];
            for (order, table) in per_order.into_iter().enumerate() {
                let total: usize = table.values().sum();
                let denom = total as f64 + alpha * outcomes[order] as f64;
                unseen_log_prob[order] = (alpha / denom).ln();
                ngram_log_probs[order] = table
                    .into_iter()
                    .map(|(g, c)| (g, ((c as f64 + alpha) / denom).ln()))
                    .collect();
            }
            LanguageProfile {
                language,
                ngram_log_probs,
                unseen_log_prob,
                outcomes,
                prior: (docs[&language] as f64 / total_docs as f64).ln(),
            }
        })
        .collect();
    Ok(profiles)
}

/// [`train_profiles_with`] at the default smoothing.
pub fn train_profiles(labeled: &[(String, Language)]) -> Result<Vec<LanguageProfile>> {
    train_profiles_with(labeled, DEFAULT_SMOOTHING)
}

impl LanguageProfile {
    fn score(&self, chars: &[char]) -> f64 {
        let mut s = self.prior;
        let mut buf = String::new();
        for n in 1..=NGRAM_ORDERS {
            let table = &self.ngram_log_probs[n - 1];
            for w in chars.windows(n) {
                if n == 1 && w[0] == ' ' {
                    continue;
                }
                buf.clear();
                buf.extend(w.iter());
                s += table.get(buf.as_str()).copied().unwrap_or(self.unseen_log_prob[n - 1]);
            }
        }
        s
    }

    /// Total probability mass of one order, including the unseen outcomes.
    pub fn order_mass(&self, order: usize) -> f64 {
        let table = &self.ngram_log_probs[order];
        let seen: f64 = table.values().map(|lp| lp.exp()).sum();
        seen + (self.outcomes[order] - table.len()) as f64 * self.unseen_log_prob[order].exp()
    }
}

/// Scores `text` against every profile and applies the English fallback.
///
/// Empty or whitespace-only text, and any text whose best-versus-second margin
/// is below `ambiguity_threshold`, is routed to English with `fell_back` set.
/// Exact score ties go to the lexicographically smaller code.
pub fn detect(text: &str, profiles: &[LanguageProfile], ambiguity_threshold: f64) -> DetectionResult {
    let fallback = DetectionResult {
        language: Language::FALLBACK,
        best: Language::FALLBACK,
        score_margin: 0.0,
        fell_back: true,
    };
    if text.trim().is_empty() || profiles.is_empty() {
        return fallback;
    }
    let chars = normalize(text);
    let mut scored: Vec<(f64, Language)> = profiles.iter().map(|p| (p.score(&chars), p.language)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let (best_score, best) = scored[0];
    if !best_score.is_finite() {
        return fallback;
    }
    let score_margin = scored.get(1).map_or(f64::INFINITY, |s| best_score - s.0);
    let fell_back = !(score_margin >= ambiguity_threshold);
    DetectionResult {
        language: if fell_back { Language::FALLBACK } else { best },
        best,
        score_margin: if score_margin.is_nan() { 0.0 } else { score_margin },
        fell_back,
    }
}

impl LangId {
    pub fn new(profiles: Vec<LanguageProfile>, ambiguity_threshold: f64) -> Result<LangId> {
        let covered: HashSet<Language> = profiles.iter().map(|p| p.language).collect();
        let missing: Vec<Language> = Language::ALL.iter().copied().filter(|l| !covered.contains(l)).collect();
        if !missing.is_empty() {
            return Err(Error::MissingLanguages(missing));
        }
        Ok(LangId {
            profiles,
            ambiguity_threshold,
        })
    }

    pub fn train(labeled: &[(String, Language)]) -> Result<LangId> {
        LangId::new(train_profiles(labeled)?, DEFAULT_AMBIGUITY_THRESHOLD)
    }

    /// Detector trained on the bundled corpus, augmented to 240 sentences per language.
    pub fn bundled() -> LangId {
        LangId::train(&crate::corpus::augmented_labeled(240, 0x1a6))
            .expect("bundled corpus covers every language")
    }

    pub fn profiles(&self) -> &[LanguageProfile] {
        &self.profiles
    }

    pub fn detect(&self, text: &str) -> DetectionResult {
        detect(text, &self.profiles, self.ambiguity_threshold)
    }

    /// Writes the profiles as text: header, smoothing-independent outcome
    /// counts, then per language a header line and one `order\tngram\tlogprob`
    /// line per n-gram (n-gram escaped).
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "{PROFILE_MAGIC}").unwrap();
        writeln!(s, "threshold {:?}", self.ambiguity_threshold).unwrap();
        writeln!(s, "profiles {}", self.profiles.len()).unwrap();
        for p in &self.profiles {
            let counts: Vec<String> = p.ngram_log_probs.iter().map(|t| t.len().to_string()).collect();
            writeln!(
                s,
                "language {} prior {:?} outcomes {} unseen {:?} {:?} {:?} entries {}",
                p.language,
                p.prior,
                p.outcomes.map(|o| o.to_string()).join(","),
                p.unseen_log_prob[0],
                p.unseen_log_prob[1],
                p.unseen_log_prob[2],
                counts.join(",")
            )
            .unwrap();
            for (order, table) in p.ngram_log_probs.iter().enumerate() {
                let mut rows: Vec<(&String, &f64)> = table.iter().collect();
                rows.sort_by(|a, b| a.0.cmp(b.0));
                for (g, lp) in rows {
                    writeln!(s, "{}\t{}\t{:?}", order + 1, escape(g), lp).unwrap();
                }
            }
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn read_from(r: impl BufRead) -> Result<LangId> {
        let err = |m: &str| format_err("langid", m);
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines.next().ok_or_else(|| err("unexpected end of file"))?.map_err(Error::from)
        };
        if next()? != PROFILE_MAGIC {
            return Err(err("bad magic line"));
        }
        let threshold: f64 = next()?
            .strip_prefix("threshold ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err("bad threshold line"))?;
        let count: usize = next()?
            .strip_prefix("profiles ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err("bad profile count"))?;
        let mut profiles = Vec::with_capacity(count);
        for _ in 0..count {
            let header = next()?;
            let f: Vec<&str> = header.split(' ').collect();
            if f.len() != 12 || f[0] != "language" || f[2] != "prior" || f[4] != "outcomes" || f[6] != "unseen" || f[10] != "entries" {
                return Err(err("bad profile header"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            let triple = |s: &str| -> Result<[usize; NGRAM_ORDERS]> {
                let v: Vec<usize> = s.split(',').map(|x| x.parse().map_err(|_| err("bad count"))).collect::<Result<_>>()?;
                v.try_into().map_err(|_| err("expected three counts"))
            };
            let language: Language = f[1].parse()?;
            let prior = num(f[3])?;
            let outcomes = triple(f[5])?;
            let unseen_log_prob = [num(f[7])?, num(f[8])?, num(f[9])?];
            let entries = triple(f[11])?;
            let mut ngram_log_probs: [HashMap<String, f64>; NGRAM_ORDERS] = Default::default();
            for (order, &n) in entries.iter().enumerate() {
                for _ in 0..n {
                    let line = next()?;
                    let mut parts = line.splitn(3, '\t');
                    let (o, g, lp) = (parts.next(), parts.next(), parts.next());
                    let (Some(o), Some(g), Some(lp)) = (o, g, lp) else {
                        return Err(err("bad n-gram line"));
                    };
                    if o != (order + 1).to_string() {
                        return Err(err("n-gram order out of sequence"));
                    }
                    ngram_log_probs[order].insert(unescape(g).ok_or_else(|| err("bad escape"))?, num(lp)?);
                }
            }
            profiles.push(LanguageProfile {
                language,
                ngram_log_probs,
                unseen_log_prob,
                outcomes,
                prior,
            });
        }
        LangId::new(profiles, threshold)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LangId> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n").replace('\r', "\\r")
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::new();
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            out.push(match it.next()? {
                '\\' => '\\',
                't' => '\t',
                'n' => '\n',
                'r' => '\r',
                _ => return None,
            });
        } else {
            out.push(c);
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn detector() -> &'static LangId {
        static D: OnceLock<LangId> = OnceLock::new();
        D.get_or_init(LangId::bundled)
    }

    #[test]
    fn fifteen_profiles_from_full_corpus() {
        let labeled = corpus::augmented_labeled(200, 1);
        for lang in Language::ALL {
            assert!(labeled.iter().filter(|(_, l)| *l == lang).count() >= 200);
        }
        assert_eq!(train_profiles(&labeled).unwrap().len(), 15);
    }

    #[test]
    fn missing_language_is_named() {
        let labeled: Vec<_> = corpus::labeled().into_iter().filter(|(_, l)| *l != Language::Sw).collect();
        match train_profiles(&labeled) {
            Err(Error::MissingLanguages(m)) => assert_eq!(m, vec![Language::Sw]),
            other => panic!("expected missing-language error, got {other:?}"),
        }
    }

    #[test]
    fn per_order_probabilities_sum_to_one() {
        for p in detector().profiles() {
            for order in 0..NGRAM_ORDERS {
                assert!((p.order_mass(order) - 1.0).abs() < 1e-6, "{} order {}", p.language, order + 1);
            }
        }
    }

    #[test]
    fn english_pangram() {
        let r = detector().detect("The quick brown fox jumps over the lazy dog");
        assert_eq!(r.language, Language::En);
        assert!(!r.fell_back);
    }

    #[test]
    fn empty_and_blank_fall_back() {
        for t in ["", "   ", "\n\t"] {
            let r = detector().detect(t);
            assert_eq!(r.language, Language::En);
            assert!(r.fell_back);
        }
    }

    #[test]
    fn ambiguous_romance_string_falls_back() {
        // One word spelled identically in Spanish, Italian and Portuguese.
        let text = "casa";
        let r = detector().detect(text);
        let mut scored: Vec<(f64, Language)> = detector()
            .profiles()
            .iter()
            .map(|p| (p.score(&normalize(text)), p.language))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let top2: HashSet<Language> = [scored[0].1, scored[1].1].into_iter().collect();
        assert_eq!(top2, [Language::Es, Language::It].into_iter().collect());
        assert!(r.score_margin < DEFAULT_AMBIGUITY_THRESHOLD);
        assert!(r.fell_back);
        assert_eq!(r.language, Language::En);
    }

    #[test]
    fn ties_break_toward_smaller_code() {
        let mut profiles = detector().profiles().to_vec();
        // Make `it` an exact copy of `es`.
        let es = profiles.iter().find(|p| p.language == Language::Es).unwrap().clone();
        for p in profiles.iter_mut().filter(|p| p.language == Language::It) {
            *p = LanguageProfile { language: Language::It, ..es.clone() };
        }
        let r = detect("¿Dónde está la biblioteca de la universidad?", &profiles, 0.0);
        assert_eq!(r.best, Language::Es);
        assert_eq!(r.score_margin, 0.0);
    }

    #[test]
    fn file_round_trip() {
        let mut buf = Vec::new();
        detector().write_to(&mut buf).unwrap();
        let back = LangId::read_from(&buf[..]).unwrap();
        assert_eq!(&back, detector());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn detect_is_total_and_deterministic(text in "\\PC{0,80}") {
            let a = detector().detect(&text);
            let b = detector().detect(&text);
            prop_assert_eq!(a, b);
            prop_assert!(a.score_margin >= 0.0);
            if a.fell_back {
                prop_assert_eq!(a.language, Language::En);
            }
        }

        #[test]
        fn doubling_keeps_the_argmax(idx in 0usize..1065) {
            let all = corpus::labeled();
            let (text, _) = &all[idx % all.len()];
            prop_assume!(text.chars().count() >= 20);
            let once = detector().detect(text).best;
            let twice = detector().detect(&format!("{text}{text}")).best;
            prop_assert_eq!(once, twice);
        }
    }
}
