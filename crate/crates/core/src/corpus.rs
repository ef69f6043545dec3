//! Bundled multilingual sentence corpus.
//!
//! Seventy-odd hand-written sentences per language ship with the crate. They
//! feed the language identifier, the vocabulary builder and the planted
//! question generator. [`augment`] stretches a sentence list to a target size
//! by splicing word spans (or character spans for unsegmented scripts) taken
//! from the given sentences, so n-gram statistics stay within the source text.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::language::Language;

const RAW: [(Language, &str); 15] = [
    (Language::Am, include_str!("../data/langid/am.txt")),
    (Language::Ar, include_str!("../data/langid/ar.txt")),
    (Language::Cs, include_str!("../data/langid/cs.txt")),
    (Language::De, include_str!("../data/langid/de.txt")),
    (Language::En, include_str!("../data/langid/en.txt")),
    (Language::Es, include_str!("../data/langid/es.txt")),
    (Language::Fa, include_str!("../data/langid/fa.txt")),
    (Language::Fr, include_str!("../data/langid/fr.txt")),
    (Language::Hi, include_str!("../data/langid/hi.txt")),
    (Language::It, include_str!("../data/langid/it.txt")),
    (Language::Ja, include_str!("../data/langid/ja.txt")),
    (Language::Ko, include_str!("../data/langid/ko.txt")),
    (Language::Nl, include_str!("../data/langid/nl.txt")),
    (Language::Sw, include_str!("../data/langid/sw.txt")),
    (Language::Zh, include_str!("../data/langid/zh.txt")),
];

/// The bundled sentences for one language.
pub fn sentences(language: Language) -> Vec<&'static str> {
    RAW[language.index()]
        .1
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}

/// Every bundled sentence tagged with its language.
pub fn labeled() -> Vec<(String, Language)> {
    Language::ALL
        .iter()
        .flat_map(|&lang| sentences(lang).into_iter().map(move |s| (s.to_string(), lang)))
        .collect()
}

/// Scripts written without spaces between words.
pub fn is_unsegmented(language: Language) -> bool {
    matches!(language, Language::Ja | Language::Zh)
}

/// Seeded per-language train/held-out partition of the bundled sentences.
pub struct HoldoutSplit {
    pub train: Vec<(String, Language)>,
    pub held_out: Vec<(String, Language)>,
}

/// Splits each language's sentences, sending `held_out_fraction` (rounded) to
/// the held-out side, and augments the training side to at least
/// `train_target` sentences per language.
pub fn holdout_split(held_out_fraction: f64, train_target: usize, seed: u64) -> HoldoutSplit {
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for lang in Language::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(lang.index() as u64);
        let mut sents = sentences(lang);
        sents.shuffle(&mut rng);
        let n_held = (sents.len() as f64 * held_out_fraction).round() as usize;
        let (held, rest) = sents.split_at(n_held);
        held_out.extend(held.iter().map(|s| (s.to_string(), lang)));
        let rest: Vec<String> = rest.iter().map(|s| s.to_string()).collect();
        let augmented = augment(&rest, lang, train_target, rng.gen());
        train.extend(augmented.into_iter().map(|s| (s, lang)));
    }
    HoldoutSplit { train, held_out }
}

/// The full bundled corpus augmented to `target` sentences per language.
pub fn augmented_labeled(target: usize, seed: u64) -> Vec<(String, Language)> {
    Language::ALL
        .iter()
        .flat_map(|&lang| {
            let base: Vec<String> = sentences(lang).iter().map(|s| s.to_string()).collect();
            augment(&base, lang, target, seed ^ (lang.index() as u64) << 32)
                .into_iter()
                .map(move |s| (s, lang))
        })
        .collect()
}

/// Returns `base` followed by synthetic sentences until `target` is reached.
pub fn augment(base: &[String], language: Language, target: usize, seed: u64) -> Vec<String> {
    let mut out = base.to_vec();
    if base.is_empty() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unsegmented = is_unsegmented(language);
    let units: Vec<Vec<String>> = base
        .iter()
        .map(|s| {
            if unsegmented {
                s.chars().map(String::from).collect()
            } else {
                s.split_whitespace().map(String::from).collect()
            }
        })
        .collect();
    while out.len() < target {
        let pieces = rng.gen_range(2..=3);
        let mut parts = Vec::new();
        for _ in 0..pieces {
            let src = &units[rng.gen_range(0..units.len())];
            let (lo, hi) = if unsegmented { (6, 14) } else { (3, 7) };
            let len = rng.gen_range(lo..=hi).min(src.len());
            let start = rng.gen_range(0..=src.len() - len);
            let sep = if unsegmented { "" } else { " " };
            parts.push(src[start..start + len].join(sep));
        }
        let sep = if unsegmented { "" } else { " " };
        out.push(parts.join(sep));
    }
    out
}
