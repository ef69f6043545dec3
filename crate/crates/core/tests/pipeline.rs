use std::collections::BTreeMap;

use polyprompt::circuit;
use polyprompt::dataset;
use polyprompt::evaluator::{emit_report, evaluate, parse_report_csv, EvalOptions, IdentityTranslator, ReportFormat, Strategy};
use polyprompt::langid::LangId;
use polyprompt::trainer::{train, TrainConfig};
use polyprompt::triggers::TriggerBank;
use polyprompt::{Error, Language};

#[test]
fn untrained_triggers_leave_the_default_answer() {
    let model = circuit::bundled_model().unwrap();
    let vocab = circuit::bundled_vocabulary().unwrap();
    let data = dataset::by_language(dataset::generate_planted_dataset(&[Language::Fr], 40, 1).unwrap());
    let bank = TriggerBank::init(&[Language::En, Language::Fr], 5, 128, 2, model.fingerprint()).unwrap();
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
    .unwrap();
    let share_a = data[&Language::Fr].iter().filter(|e| e.answer_index == 0).count() as f64 / 40.0;
    for s in Strategy::ALL {
        assert_eq!(report.accuracy(s, Language::Fr), Some(share_a), "{s}");
    }
}

#[test]
fn csv_report_round_trips_cell_accuracies() {
    let model = circuit::bundled_model().unwrap();
    let vocab = circuit::bundled_vocabulary().unwrap();
    let langid = LangId::bundled();
    let langs = [Language::En, Language::Es];
    let splits = dataset::split_all(&dataset::by_language(dataset::generate_planted_dataset(&langs, 40, 8).unwrap()), 8).unwrap();
    let mut bank = TriggerBank::init(&langs, 5, 128, 1, model.fingerprint()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        max_len: 256,
        languages: langs.to_vec(),
        ..TrainConfig::default()
    };
    train(&model, &mut bank, &vocab, &langid, &splits, &cfg).unwrap();
    let eval: BTreeMap<_, _> = splits.iter().map(|(&l, s)| (l, s.eval.clone())).collect();
    let report = evaluate(&model, Some(&bank), &vocab, &langid, &eval, &Strategy::ALL, &IdentityTranslator, &EvalOptions::default()).unwrap();
    let parsed = parse_report_csv(&emit_report(&report, ReportFormat::Csv).unwrap()).unwrap();
    for cell in &report.cells {
        let v = parsed[&(cell.strategy, cell.language.code().to_string())];
        assert!((v - 100.0 * cell.accuracy).abs() < 0.051);
    }
    let md = emit_report(&report, ReportFormat::MarkdownTable).unwrap();
    assert_eq!(md.lines().count(), 3 + Strategy::ALL.len());
    assert!(md.lines().last().unwrap().starts_with("| relative advantage (%) |"));
    let json: serde_json::Value = serde_json::from_str(&emit_report(&report, ReportFormat::Json).unwrap()).unwrap();
    assert_eq!(json["metadata"]["model_fingerprint"], serde_json::json!(model.fingerprint()));
}

#[test]
fn training_refuses_a_bank_bound_to_another_model() {
    let model = circuit::bundled_model().unwrap();
    let vocab = circuit::bundled_vocabulary().unwrap();
    let splits = dataset::split_all(&dataset::by_language(dataset::generate_planted_dataset(&[Language::En], 20, 0).unwrap()), 0).unwrap();
    let mut bank = TriggerBank::init(&[Language::En], 5, 128, 0, "0".repeat(64)).unwrap();
    let cfg = TrainConfig {
        languages: vec![Language::En],
        ..TrainConfig::default()
    };
    let err = train(&model, &mut bank, &vocab, &LangId::bundled(), &splits, &cfg).unwrap_err();
    assert!(matches!(err, Error::FingerprintMismatch { .. }), "{err}");
}
