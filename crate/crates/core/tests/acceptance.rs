//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

use polyprompt::corpus;
use polyprompt::dataset::{self, SplitDataset};
use polyprompt::evaluator::{evaluate, EvalOptions, EvalReport, IdentityTranslator, Strategy};
use polyprompt::langid::LangId;
use polyprompt::mcq::{mcq_loss, ChoiceLogits, McqExample};
use polyprompt::model::{backward_to_triggers, forward, splice, ModelConfig, ModelParams, Readout};
use polyprompt::circuit;
use polyprompt::tokenizer::{TokenSequence, Vocabulary};
use polyprompt::trainer::{train, TrainConfig, TrainLog};
use polyprompt::triggers::TriggerBank;
use polyprompt::Language::{self, En, Es};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

struct Planted {
    model: ModelParams<f32>,
    vocab: Vocabulary,
    langid: LangId,
    splits: BTreeMap<Language, SplitDataset>,
    eval_sets: BTreeMap<Language, Vec<McqExample>>,
    checksum_before: [u8; 32],
    bank: TriggerBank,
    log: TrainLog,
    report: EvalReport,
    elapsed: Duration,
}

const PLANTED_PER_LANGUAGE: usize = 250;
const PLANTED_SEED: u64 = 3;
const BANK_SEED: u64 = 7;

fn planted_config() -> TrainConfig {
    TrainConfig {
        max_len: 256,
        seed: BANK_SEED,
        languages: vec![En, Es],
        ..TrainConfig::default()
    }
}

fn run_planted() -> Result<Planted, String> {
    let started = Instant::now();
    let model = circuit::bundled_model().map_err(|e| e.to_string())?;
    let vocab = circuit::bundled_vocabulary().map_err(|e| e.to_string())?;
    let langid = LangId::bundled();
    let examples = dataset::generate_planted_dataset(&[En, Es], PLANTED_PER_LANGUAGE, PLANTED_SEED).map_err(|e| e.to_string())?;
    let splits = dataset::split_all(&dataset::by_language(examples), PLANTED_SEED).map_err(|e| e.to_string())?;
    let eval_sets: BTreeMap<_, _> = splits.iter().map(|(&l, s)| (l, s.eval.clone())).collect();
    let checksum_before = model.checksum();
    let mut bank = TriggerBank::init(&Language::ALL, 5, model.config().d_model, BANK_SEED, model.fingerprint())
        .map_err(|e| e.to_string())?;
    let log = train(&model, &mut bank, &vocab, &langid, &splits, &planted_config()).map_err(|e| e.to_string())?;
    let report = evaluate(
        &model,
        Some(&bank),
        &vocab,
        &langid,
        &eval_sets,
        &Strategy::ALL,
        &IdentityTranslator,
        &EvalOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    Ok(Planted {
        model,
        vocab,
        langid,
        splits,
        eval_sets,
        checksum_before,
        bank,
        log,
        report,
        elapsed: started.elapsed(),
    })
}

fn gradient_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let instances = 30;
    for inst in 0..instances {
        let d = [8, 12, 16][inst % 3];
        let n_heads = *[1, 2, 4].choose(&mut rng).unwrap();
        let cfg = ModelConfig {
            d_model: d,
            n_layers: 1 + inst % 2,
            n_heads,
            vocab_size: rng.gen_range(12..40),
            max_len: 16,
            d_ff: rng.gen_range(4..24),
        };
        let model = ModelParams::<f64>::random(cfg, rng.gen(), 0.3).map_err(|e| e.to_string())?;
        let k = rng.gen_range(1..=4);
        let n = rng.gen_range(k + 2..=12);
        let mut ids = vec![3u32];
        ids.extend(std::iter::repeat_n(0, k));
        while ids.len() < n {
            ids.push(rng.gen_range(4..cfg.vocab_size as u32));
        }
        let seq = TokenSequence::from_ids(ids, 0);
        let triggers = Array2::from_shape_simple_fn((k, d), || rng.gen_range(-0.5..0.5));
        let readout = if inst % 3 == 0 { Readout::Last } else { Readout::All };
        let rows = if readout == Readout::Last { 1 } else { n };
        let up = Array2::from_shape_simple_fn((rows, cfg.vocab_size), || rng.gen_range(-1.0..1.0));
        let objective = |t: &Array2<f64>| -> f64 {
            let input = splice(&model, &seq, t.view()).unwrap();
            (&forward(&model, &input, readout).unwrap().logits * &up).sum()
        };
        let trace = forward(&model, &splice(&model, &seq, triggers.view()).unwrap(), readout).unwrap();
        let grad = backward_to_triggers(&model, &trace, up.view(), &seq.trigger_positions).map_err(|e| e.to_string())?;
        for i in 0..k {
            for j in 0..d {
                let mut p = triggers.clone();
                p[[i, j]] += h;
                let mut m = triggers.clone();
                m[[i, j]] -= h;
                let fd = (objective(&p) - objective(&m)) / (2.0 * h);
                let rel = (grad[[i, j]] - fd).abs() / (fd.abs() + 1e-8);
                worst = worst.max(rel);
                entries += 1;
            }
        }
        check(model.recompute_checksum() == model.checksum(), "model changed during backward")?;
    }
    let secs = started.elapsed().as_secs_f64();
    check(worst < 1e-4, format!("worst relative error {worst:.2e}"))?;
    check(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "{instances} instances, {entries} entries, worst relative error {worst:.2e}, {secs:.1}s"
    ))
}

fn frozen(p: &Planted) -> Outcome {
    let after = p.model.recompute_checksum();
    check(after == p.checksum_before, "checksum changed")?;
    check(p.log.entries.iter().filter(|e| e.epoch == 2).count() == 2, "expected a full 2-epoch run")?;
    Ok(format!("checksum {} unchanged after 2 epochs", &hex(&after)[..16]))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn planted_signal(p: &Planted) -> Outcome {
    let mut parts = Vec::new();
    for (&lang, split) in &p.splits {
        check(split.train.len() >= 200 && split.eval.len() >= 50, format!("{lang} split too small"))?;
    }
    for lang in [En, Es] {
        let poly = p.report.accuracy(Strategy::PolyPrompt, lang).unwrap();
        let native = p.report.accuracy(Strategy::Native, lang).unwrap();
        let fixed = p.report.accuracy(Strategy::FixedAutoprompt, lang).unwrap();
        parts.push(format!(
            "{lang}: polyprompt {:.1}% native {:.1}% fixed {:.1}%",
            100.0 * poly,
            100.0 * native,
            100.0 * fixed
        ));
        check(poly >= 0.90, format!("{lang} polyprompt {poly:.3} < 0.90"))?;
        check(native <= 0.35, format!("{lang} native {native:.3} > 0.35"))?;
        check(fixed <= 0.35, format!("{lang} fixed_autoprompt {fixed:.3} > 0.35"))?;
    }
    let e1 = p.log.epoch_mean_loss(1).unwrap();
    let e2 = p.log.epoch_mean_loss(2).unwrap();
    parts.push(format!("loss {e1:.3} -> {e2:.3}"));
    check(e2 < e1, format!("epoch-2 loss {e2:.4} not below epoch-1 {e1:.4}"))?;
    let secs = p.elapsed.as_secs_f64();
    parts.push(format!("{secs:.1}s"));
    check(secs < 600.0, format!("took {secs:.1}s"))?;
    Ok(parts.join("; "))
}

fn isolation(p: &Planted) -> Outcome {
    let mut bank = TriggerBank::init(&Language::ALL, 5, p.model.config().d_model, 11, p.model.fingerprint())
        .map_err(|e| e.to_string())?;
    let init = bank.clone();
    let cfg = TrainConfig {
        epochs: 1,
        languages: vec![En],
        ..planted_config()
    };
    train(&p.model, &mut bank, &p.vocab, &p.langid, &p.splits, &cfg).map_err(|e| e.to_string())?;
    check(bank.get(En) != init.get(En), "trained language did not move")?;
    for lang in Language::ALL.into_iter().filter(|&l| l != En) {
        check(bank.get(lang) == init.get(lang), format!("{lang} changed while training en"))?;
    }

    let mut swapped = p.bank.clone();
    swapped.swap_languages(En, Es).map_err(|e| e.to_string())?;
    let report = evaluate(
        &p.model,
        Some(&swapped),
        &p.vocab,
        &p.langid,
        &p.eval_sets,
        &[Strategy::PolyPrompt],
        &IdentityTranslator,
        &EvalOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let mut parts = vec!["other sets bit-identical after en-only training".to_string()];
    for lang in [En, Es] {
        let before = p.report.accuracy(Strategy::PolyPrompt, lang).unwrap();
        let after = report.accuracy(Strategy::PolyPrompt, lang).unwrap();
        let drop = 100.0 * (before - after);
        parts.push(format!("{lang} swap drop {drop:.1} pts"));
        check(drop >= 30.0, format!("{lang} dropped only {drop:.1} points"))?;
    }
    Ok(parts.join("; "))
}

fn mcq_math() -> Outcome {
    let (l, _) = mcq_loss(&ChoiceLogits::new([0.0; 4]).unwrap(), 0);
    check((l - 4f64.ln()).abs() < 1e-9, format!("uniform loss {l}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_fd: f64 = 0.0;
    for _ in 0..200 {
        let v: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
        let a = rng.gen_range(0..4);
        let (_, g) = mcq_loss(&ChoiceLogits::new(v).unwrap(), a);
        for i in 0..4 {
            let h = 1e-5;
            let mut p = v;
            p[i] += h;
            let mut m = v;
            m[i] -= h;
            let fd = (mcq_loss(&ChoiceLogits::new(p).unwrap(), a).0 - mcq_loss(&ChoiceLogits::new(m).unwrap(), a).0) / (2.0 * h);
            worst_fd = worst_fd.max((fd - g[i]).abs());
        }
        check(g.iter().sum::<f64>().abs() < 1e-12, "gradient does not sum to zero")?;
    }
    check(worst_fd < 1e-8, format!("finite-difference error {worst_fd:.2e}"))?;
    for _ in 0..1000 {
        let v: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-10.0..10.0));
        let c = rng.gen_range(-100.0..100.0);
        let base = ChoiceLogits::new(v).unwrap();
        let shifted = ChoiceLogits::new(v.map(|x| x + c)).unwrap();
        check(base.prediction() == shifted.prediction(), format!("shift changed prediction for {v:?}"))?;
        let a = rng.gen_range(0..4);
        check((mcq_loss(&base, a).0 - mcq_loss(&shifted, a).0).abs() < 1e-9, "shift changed loss")?;
    }
    Ok(format!("ln 4 exact, max finite-difference error {worst_fd:.1e}, 1000 shifts invariant"))
}

fn language_id() -> Outcome {
    const FOLDS: usize = 5;
    let mut correct = 0;
    let mut total = 0;
    let mut per_lang: BTreeMap<Language, (usize, usize)> = BTreeMap::new();
    let shuffled: Vec<(Language, Vec<String>)> = Language::ALL
        .iter()
        .map(|&l| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xf01d);
            rng.set_stream(l.index() as u64);
            let mut s: Vec<String> = corpus::sentences(l).iter().map(|s| s.to_string()).collect();
            s.shuffle(&mut rng);
            (l, s)
        })
        .collect();
    for fold in 0..FOLDS {
        let mut train_set = Vec::new();
        let mut held = Vec::new();
        for (lang, sents) in &shuffled {
            let (test, rest): (Vec<_>, Vec<_>) = sents.iter().enumerate().partition(|(i, _)| i % FOLDS == fold);
            let rest: Vec<String> = rest.into_iter().map(|(_, s)| s.clone()).collect();
            for s in corpus::augment(&rest, *lang, 240, fold as u64) {
                train_set.push((s, *lang));
            }
            held.extend(test.into_iter().map(|(_, s)| (s.clone(), *lang)));
        }
        let det = LangId::train(&train_set).map_err(|e| e.to_string())?;
        for (text, lang) in held.iter().filter(|(t, _)| t.chars().count() >= 40) {
            let hit = det.detect(text).language == *lang;
            correct += hit as usize;
            total += 1;
            let e = per_lang.entry(*lang).or_default();
            e.0 += hit as usize;
            e.1 += 1;
        }
    }
    check(per_lang.len() == 15, format!("only {} languages had long held-out sentences", per_lang.len()))?;
    let acc = correct as f64 / total as f64;
    let (worst_lang, (wc, wn)) = per_lang
        .iter()
        .min_by(|a, b| (a.1 .0 as f64 / a.1 .1 as f64).total_cmp(&(b.1 .0 as f64 / b.1 .1 as f64)))
        .unwrap();
    check(acc >= 0.95, format!("held-out accuracy {acc:.3}"))?;
    let det = LangId::bundled();
    for empty in ["", "   ", "\n"] {
        let r = det.detect(empty);
        check(r.language == En && r.fell_back, format!("{empty:?} gave {r:?}"))?;
    }
    Ok(format!(
        "{correct}/{total} = {:.1}% held out (5-fold), weakest {worst_lang} {wc}/{wn}; empty input -> en, fell back",
        100.0 * acc
    ))
}

fn determinism(p: &Planted) -> Outcome {
    let all: Vec<McqExample> = p.splits.values().flat_map(|s| s.train.iter().chain(&s.eval)).cloned().collect();
    let by_lang = dataset::by_language(all);
    check(dataset::split_all(&by_lang, 9).unwrap() == dataset::split_all(&by_lang, 9).unwrap(), "split differs")?;
    let d = p.model.config().d_model;
    let a = TriggerBank::init(&Language::ALL, 5, d, 7, p.model.fingerprint()).unwrap();
    let b = TriggerBank::init(&Language::ALL, 5, d, 7, p.model.fingerprint()).unwrap();
    check(a == b, "init bank differs")?;

    let small: BTreeMap<Language, SplitDataset> = p
        .splits
        .iter()
        .map(|(&l, s)| {
            let mut s = s.clone();
            s.train.truncate(40);
            (l, s)
        })
        .collect();
    let cfg = TrainConfig { epochs: 1, ..planted_config() };
    let mut a = a;
    let mut b = b;
    train(&p.model, &mut a, &p.vocab, &p.langid, &small, &cfg).map_err(|e| e.to_string())?;
    train(&p.model, &mut b, &p.vocab, &p.langid, &small, &cfg).map_err(|e| e.to_string())?;
    check(a == b, "final bank differs between identical runs")?;

    let mut bank_bytes = Vec::new();
    p.bank.write_to(&mut bank_bytes).unwrap();
    let bank_back = TriggerBank::read_from(&bank_bytes[..]).map_err(|e| e.to_string())?;
    check(bank_back == p.bank, "bank round trip differs")?;
    let mut again = Vec::new();
    bank_back.write_to(&mut again).unwrap();
    check(again == bank_bytes, "bank re-serialisation differs")?;

    let mut model_bytes = Vec::new();
    p.model.write_to(&mut model_bytes).unwrap();
    let model_back = ModelParams::read_from(&model_bytes[..]).map_err(|e| e.to_string())?;
    check(model_back.weights() == p.model.weights(), "model round trip differs")?;
    let mut again = Vec::new();
    model_back.write_to(&mut again).unwrap();
    check(again == model_bytes, "model re-serialisation differs")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("en.jsonl");
    let rows: Vec<McqExample> = (0..14_042)
        .map(|i| McqExample {
            id: format!("mmlu-{i}"),
            language: En,
            question: format!("Question number {i}?"),
            choices: ["one".into(), "two".into(), "three".into(), "four".into()],
            answer_index: i % 4,
        })
        .collect();
    dataset::save_dataset(&path, &rows).map_err(|e| e.to_string())?;
    let loaded = dataset::load_dataset(&path).map_err(|e| e.to_string())?;
    check(loaded == rows, "ingested rows differ")?;
    let split = dataset::split(&loaded, 0).map_err(|e| e.to_string())?;
    check(
        (split.eval.len(), split.train.len()) == (2808, 11_234),
        format!("split {} / {}", split.eval.len(), split.train.len()),
    )?;
    let ids: HashSet<&str> = split.eval.iter().chain(&split.train).map(|e| e.id.as_str()).collect();
    check(ids.len() == 14_042, "split is not a partition")?;
    Ok("split, init bank and trained bank repeat bit-exactly; bank and model files round-trip; 14042 -> 2808 / 11234".into())
}

fn chance_level() -> Outcome {
    let vocab = circuit::bundled_vocabulary().map_err(|e| e.to_string())?;
    let cfg = ModelConfig::desk(vocab.len());
    let model = ModelParams::<f32>::random(cfg, 99, 0.02).map_err(|e| e.to_string())?;
    let bank = TriggerBank::init(&Language::ALL, 5, cfg.d_model, 1, model.fingerprint()).unwrap();
    let data = dataset::by_language(dataset::generate_planted_dataset(&[En, Es], 200, 17).unwrap());
    let n: usize = data.values().map(Vec::len).sum();
    let report = evaluate(
        &model,
        Some(&bank),
        &vocab,
        &LangId::bundled(),
        &data,
        &Strategy::ALL,
        &IdentityTranslator,
        &EvalOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let binom = Binomial::new(0.25, n as u64).unwrap();
    let lo = binom.inverse_cdf(0.005);
    let hi = binom.inverse_cdf(0.995);
    let mut parts = vec![format!("n={n}, 99% interval [{lo}, {hi}]")];
    for s in Strategy::ALL {
        let correct: usize = report.cells.iter().filter(|c| c.strategy == s).map(|c| c.correct).sum();
        parts.push(format!("{s} {correct}"));
        check(
            (lo..=hi).contains(&(correct as u64)),
            format!("{s} scored {correct}/{n}, outside [{lo}, {hi}]"),
        )?;
    }
    Ok(parts.join("; "))
}

fn main() {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS - {detail}"),
            Err(why) => {
                failures += 1;
                println!("criterion {id} ({name}): FAIL - {why}");
            }
        }
    };
    let guard = |f: &dyn Fn() -> Outcome| -> Outcome {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        })
    };

    report(1, "gradient oracle", guard(&gradient_oracle));
    let planted = run_planted();
    let with = |f: fn(&Planted) -> Outcome| -> Outcome {
        match &planted {
            Ok(p) => guard(&|| f(p)),
            Err(e) => Err(format!("planted run failed: {e}")),
        }
    };
    report(2, "frozen model", with(frozen));
    report(3, "planted signal", with(planted_signal));
    report(4, "language isolation", with(isolation));
    report(5, "mcq math", guard(&mcq_math));
    report(6, "language id", guard(&language_id));
    report(7, "determinism and formats", with(determinism));
    report(8, "chance level", guard(&chance_level));

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
