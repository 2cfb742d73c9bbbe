use std::path::Path;

use grad2task::trainer::{TrainConfig, FIELD_DOCS};
use grad2task::Error;

#[test]
fn text_form_round_trips() {
    let mut cfg = TrainConfig::default();
    cfg.lr = 3e-4;
    cfg.seed = 42;
    cfg.adapt_linear = true;
    cfg.eval_shots = "2,4".into();
    let back = TrainConfig::parse(&cfg.to_text(), Path::new("x")).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(TrainConfig::parse("", Path::new("x")).unwrap(), TrainConfig::default());
}

#[test]
fn every_key_is_documented() {
    let text = TrainConfig::default().to_text();
    let keys: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once(" = ").map(|p| p.0))
        .collect();
    assert!(keys.len() > 40);
    for k in keys {
        assert!(FIELD_DOCS.iter().any(|(n, _)| *n == k), "{k} lacks a doc line");
    }
}

#[test]
fn unknown_key_reports_line() {
    let err = TrainConfig::parse("seed = 1\n# note\nlearning_rate = 0.1\n", Path::new("run.cfg")).unwrap_err();
    match &err {
        Error::Parse { line, msg, .. } => {
            assert_eq!(*line, 3);
            assert!(msg.contains("learning_rate"), "{msg}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("run.cfg"));
}

#[test]
fn type_errors_are_reported() {
    let mut cfg = TrainConfig::default();
    assert!(cfg.set("seed", "-1").is_err());
    assert!(cfg.set("lr", "fast").is_err());
    assert!(cfg.set("lr", "inf").is_err());
    assert!(cfg.set("adapt_linear", "yes").is_err());
    assert!(TrainConfig::parse("seed 3\n", Path::new("c")).is_err());
    cfg.set("lr", "1").unwrap();
    assert_eq!(cfg.lr, 1.0);
    cfg.set("shots", "7").unwrap();
    assert_eq!(cfg.shots, 7);
}

#[test]
fn validation_catches_bad_values() {
    let bad: &[(&str, &str)] = &[
        ("early_stop_metric", "f1"),
        ("variant", "nope"),
        ("adapter_activation", "tanh"),
        ("eval_shots", "4,,x"),
        ("stage", "3"),
        ("shots", "0"),
        ("max_seq_len", "4"),
        ("tasks", "a=unknown:meta-train"),
        ("tasks", "a=keyword-presence:sideways"),
    ];
    TrainConfig::default().validate().unwrap();
    for (k, v) in bad {
        let mut cfg = TrainConfig::default();
        cfg.set(k, v).unwrap();
        assert!(cfg.validate().is_err(), "{k} = {v} accepted");
    }
    let mut cfg = TrainConfig::default();
    cfg.set("early_stop_metric", "accuracy").unwrap();
    assert!(!cfg.select_by_loss().unwrap());
}

#[test]
fn benchmark_is_seeded() {
    let mut cfg = TrainConfig::default();
    cfg.train_per_class = 8;
    cfg.val_per_class = 4;
    cfg.test_size = 10;
    let a = cfg.benchmark().unwrap();
    let b = cfg.benchmark().unwrap();
    assert_eq!(a.tasks, b.tasks);
    cfg.seed = 1;
    assert_ne!(cfg.benchmark().unwrap().tasks, a.tasks);
}
