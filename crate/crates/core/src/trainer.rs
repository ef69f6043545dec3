//! The trigger optimisation loop: epochs, then languages, then shuffled
//! mini-batches. Only trigger rows and their Adam state change.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitDataset;
use crate::error::{Error, Result};
use crate::langid::LangId;
use crate::language::Language;
use crate::mcq::{choice_grad_to_logits, mcq_logits, mcq_loss, render_prompt, McqExample, Strategy};
use crate::model::{backward_to_triggers, forward, splice, ModelParams, Readout};
use crate::tokenizer::{TokenSequence, Vocabulary, DEFAULT_MAX_LEN};
use crate::triggers::TriggerBank;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Upper bound on sequence length; the model's own limit also applies.
    pub max_len: usize,
    pub seed: u64,
    pub languages: Vec<Language>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 5,
            lr: 1e-3,
            batch_size: 4,
            epochs: 2,
            max_len: DEFAULT_MAX_LEN,
            seed: 0,
            languages: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Config("k, batch size and max_len must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Statistics for one language within one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based
    pub epoch: usize,
    pub language: Language,
    pub mean_loss: f64,
    pub examples: usize,
    pub wall_time_secs: f64,
    /// Examples whose routed language differs from their label.
    pub disagreements: usize,
    /// Mean batch loss of every optimiser step.
    pub step_losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<EpochLog>,
}

impl TrainLog {
    /// Mean loss over all languages in `epoch`, weighted by example count.
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let rows: Vec<&EpochLog> = self.entries.iter().filter(|e| e.epoch == epoch).collect();
        let n: usize = rows.iter().map(|e| e.examples).sum();
        (n > 0).then(|| rows.iter().map(|e| e.mean_loss * e.examples as f64).sum::<f64>() / n as f64)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Detects the question language and maps it to a trigger set, falling back
/// to English when detection is ambiguous or the bank has no set for it.
pub fn detect_or_route(example: &McqExample, langid: &LangId, bank: &TriggerBank) -> Language {
    let d = langid.detect(&example.question);
    if d.fell_back || !bank.contains(d.language) {
        Language::FALLBACK
    } else {
        d.language
    }
}

/// Token sequence for the trigger-bearing prompt of `example`.
pub fn encode_polyprompt(vocab: &Vocabulary, example: &McqExample, k: usize, max_len: usize) -> Result<TokenSequence> {
    vocab.encode_with_triggers(&render_prompt(example, Strategy::PolyPrompt), k, max_len)
}

struct Scored {
    loss: f64,
    routed: Language,
    grad: Array2<f32>,
}

fn example_step(
    model: &ModelParams<f32>,
    bank: &TriggerBank,
    vocab: &Vocabulary,
    langid: &LangId,
    ex: &McqExample,
    k: usize,
    max_len: usize,
    scale: f64,
) -> Result<Scored> {
    let routed = detect_or_route(ex, langid, bank);
    let set = bank
        .get(routed)
        .ok_or_else(|| Error::Config(format!("no trigger set for routed language {routed}")))?;
    let seq = encode_polyprompt(vocab, ex, k, max_len)?;
    let input = splice(model, &seq, set.embeddings.view())?;
    let trace = forward(model, &input, Readout::Last)?;
    let logits = mcq_logits(&trace, vocab)?;
    let (loss, g) = mcq_loss(&logits, ex.answer_index);
    let up = choice_grad_to_logits(&trace, vocab, &g, scale);
    let grad = backward_to_triggers(model, &trace, up.view(), &seq.trigger_positions)?;
    Ok(Scored { loss, routed, grad })
}

/// Optimises the trigger sets of `cfg.languages` (all languages in `data` when
/// empty) on their training splits.
///
/// On error the bank holds the state after the last completed step.
pub fn train(
    model: &ModelParams<f32>,
    bank: &mut TriggerBank,
    vocab: &Vocabulary,
    langid: &LangId,
    data: &BTreeMap<Language, SplitDataset>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    bank.check_fingerprint(&model.fingerprint())?;
    let mc = model.config();
    if bank.k != cfg.k || bank.d != mc.d_model {
        return Err(Error::Config(format!(
            "bank is k={} d={}, run wants k={} on a d={} model",
            bank.k, bank.d, cfg.k, mc.d_model
        )));
    }
    let languages: Vec<Language> = if cfg.languages.is_empty() {
        data.keys().copied().collect()
    } else {
        cfg.languages.clone()
    };
    let missing: Vec<Language> = languages.iter().copied().filter(|l| !data.contains_key(l)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingLanguages(missing));
    }
    if let Some(l) = languages.iter().find(|l| !bank.contains(**l)) {
        return Err(Error::Config(format!("bank has no trigger set for {l}")));
    }
    let max_len = cfg.max_len.min(mc.max_len);

    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        for &lang in &languages {
            let started = Instant::now();
            let train = &data[&lang].train;
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((epoch as u64) << 8) | lang.index() as u64);
            order.shuffle(&mut rng);

            let mut entry = EpochLog {
                epoch,
                language: lang,
                mean_loss: 0.0,
                examples: 0,
                wall_time_secs: 0.0,
                disagreements: 0,
                step_losses: Vec::new(),
            };
            let mut loss_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                step += 1;
                let scale = 1.0 / batch.len() as f64;
                let mut grads: BTreeMap<Language, Array2<f32>> = BTreeMap::new();
                let mut batch_loss = 0.0;
                for &i in batch {
                    let ex = &train[i];
                    let s = example_step(model, bank, vocab, langid, ex, cfg.k, max_len, scale)?;
                    if s.routed != ex.language {
                        entry.disagreements += 1;
                    }
                    batch_loss += s.loss * scale;
                    match grads.get_mut(&s.routed) {
                        Some(g) => *g += &s.grad,
                        None => {
                            grads.insert(s.routed, s.grad);
                        }
                    }
                }
                if !batch_loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        language: lang,
                        step,
                    });
                }
                if let Some((l, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                    return Err(Error::Numeric(format!(
                        "non-finite trigger gradient for {l} at epoch {epoch}, step {step}"
                    )));
                }
                let adam = bank.adam;
                for (l, g) in &grads {
                    bank.get_mut(*l).expect("routed language is in the bank").adam_step(g, cfg.lr, &adam)?;
                }
                loss_sum += batch_loss * batch.len() as f64;
                entry.examples += batch.len();
                entry.step_losses.push(batch_loss);
            }
            entry.mean_loss = if entry.examples > 0 {
                loss_sum / entry.examples as f64
            } else {
                0.0
            };
            entry.wall_time_secs = started.elapsed().as_secs_f64();
            log.entries.push(entry);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{by_language, generate_planted_dataset, split_all};
    use crate::model::ModelConfig;
    use crate::slot_task::{planted_vocabulary, PLANTED_VOCAB_BUDGET};
    use Language::*;

    struct Fixture {
        vocab: Vocabulary,
        model: ModelParams<f32>,
        langid: LangId,
        data: BTreeMap<Language, SplitDataset>,
    }

    fn fixture() -> Fixture {
        let vocab = planted_vocabulary(PLANTED_VOCAB_BUDGET).unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            vocab_size: vocab.len(),
            max_len: 192,
            d_ff: 16,
        };
        let model = ModelParams::random(cfg, 1, 0.1).unwrap();
        let data = split_all(&by_language(generate_planted_dataset(&[En, Es], 20, 4).unwrap()), 4).unwrap();
        Fixture {
            vocab,
            model,
            langid: LangId::bundled(),
            data,
        }
    }

    fn bank(f: &Fixture) -> TriggerBank {
        TriggerBank::init(&[En, Es, Fr], 5, 16, 3, f.model.fingerprint()).unwrap()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let f = fixture();
        let mut b = bank(&f);
        let before = b.clone();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let log = train(&f.model, &mut b, &f.vocab, &f.langid, &f.data, &cfg).unwrap();
        assert!(log.entries.is_empty());
        assert_eq!(b, before);
    }

    #[test]
    fn only_trained_language_moves_and_runs_repeat() {
        let f = fixture();
        let cfg = TrainConfig {
            epochs: 1,
            languages: vec![Es],
            ..TrainConfig::default()
        };
        let mut a = bank(&f);
        let init = a.clone();
        let log = train(&f.model, &mut a, &f.vocab, &f.langid, &f.data, &cfg).unwrap();
        assert_eq!(a.get(En), init.get(En));
        assert_eq!(a.get(Fr), init.get(Fr));
        assert_ne!(a.get(Es), init.get(Es));
        assert_eq!(log.entries.len(), 1);
        assert_eq!(log.entries[0].examples, f.data[&Es].train.len());
        assert_eq!(log.entries[0].step_losses.len(), 4); // 16 examples, batch 4
        assert_eq!(log.entries[0].disagreements, 0);

        let mut b = bank(&f);
        train(&f.model, &mut b, &f.vocab, &f.langid, &f.data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(f.model.recompute_checksum(), f.model.checksum());
    }

    #[test]
    fn partial_last_batch_is_kept() {
        let f = fixture();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 5,
            languages: vec![En],
            ..TrainConfig::default()
        };
        let log = train(&f.model, &mut bank(&f), &f.vocab, &f.langid, &f.data, &cfg).unwrap();
        assert_eq!(log.entries[0].step_losses.len(), 4);
        assert_eq!(log.entries[0].examples, 16);
    }

    #[test]
    fn preconditions() {
        let f = fixture();
        let mut wrong = TriggerBank::init(&[En, Es], 5, 16, 3, "feed").unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&f.model, &mut wrong, &f.vocab, &f.langid, &f.data, &cfg),
            Err(Error::FingerprintMismatch { .. })
        ));
        let cfg = TrainConfig {
            languages: vec![Fr],
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&f.model, &mut bank(&f), &f.vocab, &f.langid, &f.data, &cfg),
            Err(Error::MissingLanguages(l)) if l == vec![Fr]
        ));
        let cfg = TrainConfig { k: 3, ..TrainConfig::default() };
        assert!(train(&f.model, &mut bank(&f), &f.vocab, &f.langid, &f.data, &cfg).is_err());
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn routing_rules() {
        let f = fixture();
        let b = bank(&f);
        let mut ex = f.data[&Es].train[0].clone();
        assert_eq!(detect_or_route(&ex, &f.langid, &b), Es);
        ex.question = String::new();
        assert_eq!(detect_or_route(&ex, &f.langid, &b), En);
        ex.question = "Der Hund schläft im Garten, während die Kinder in der Schule sind.".into();
        assert_eq!(f.langid.detect(&ex.question).language, De);
        assert_eq!(detect_or_route(&ex, &f.langid, &b), En);
    }
}
