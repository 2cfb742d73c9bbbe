use grad2task::adaptation::{Conditioner, Variant};
use grad2task::encoder::BaseModel;
use grad2task::eval::{
    auc, eval_tasks, evaluate_kshot, make_pairs, mean_std, run_ablation, samediff_eval, samediff_train, EvalReport,
    EvalRow, FeaturePair, SameDiffConfig, SameDiffModel,
};
use grad2task::tensor::{AdamConfig, Rng};
use grad2task::trainer::TrainConfig;
use proptest::prelude::*;

/// Probability that a random positive outranks a random negative, ties half.
fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn random_scores(rng: &mut Rng) -> (Vec<f64>, Vec<bool>) {
    let n = 2 + rng.below(60);
    // Coarse grid so ties are common.
    let grid = 1 + rng.below(10);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| rng.below(grid) as f64 / grid as f64).collect();
    (scores, labels)
}

#[test]
fn auc_matches_quadratic_oracle_exactly() {
    let mut rng = Rng::new(12);
    for _ in 0..100 {
        let (s, l) = random_scores(&mut rng);
        assert_eq!(auc(&s, &l).unwrap(), auc_oracle(&s, &l), "{s:?} {l:?}");
    }
    let mut rng = Rng::new(13);
    for _ in 0..100 {
        let n = 2 + rng.below(40);
        let s: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut l: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
        l[0] = !l[1];
        assert_eq!(auc(&s, &l).unwrap(), auc_oracle(&s, &l));
    }
}

#[test]
fn auc_edge_cases() {
    assert_eq!(auc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
    assert_eq!(auc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
    assert_eq!(auc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    assert!(auc(&[0.1], &[true, false]).is_err());
    assert!(auc(&[f64::NAN, 0.2], &[true, false]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_is_invariant_to_monotone_maps(seed in any::<u64>()) {
        let (s, l) = random_scores(&mut Rng::new(seed));
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
        prop_assert_eq!(auc(&s, &l).unwrap(), auc(&t, &l).unwrap());
        let flipped: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auc(&flipped, &l).unwrap() - (1.0 - auc(&s, &l).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn mean_std_matches_definition(xs in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let (m, s) = mean_std(&xs);
        let n = xs.len() as f64;
        let want_m = xs.iter().sum::<f64>() / n;
        let want_s = (xs.iter().map(|x| (x - want_m).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!((m - want_m).abs() < 1e-12);
        prop_assert!((s - want_s).abs() < 1e-12);
    }

    #[test]
    fn samediff_probability_is_symmetric(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let m = SameDiffModel::new(5, 3, &mut rng).unwrap();
        let a: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        prop_assert_eq!(m.probability(&a, &b).unwrap(), m.probability(&b, &a).unwrap());
        let c = m.cosine(&a, &a).unwrap();
        prop_assert!((c - 1.0).abs() < 1e-12);
    }
}

#[test]
fn pairs_alternate_and_respect_tasks() {
    let mut rng = Rng::new(0);
    let pool: Vec<Vec<Vec<f64>>> = (0..3).map(|t| (0..4).map(|i| vec![t as f64, i as f64]).collect()).collect();
    let pairs = make_pairs(&pool, 50, &mut rng).unwrap();
    for (i, p) in pairs.iter().enumerate() {
        assert_eq!(p.same, i % 2 == 0);
        assert_eq!(p.a[0] == p.b[0], p.same);
        if p.same {
            assert_ne!(p.a, p.b);
        }
    }
    assert!(make_pairs(&pool[..1], 4, &mut rng).is_err());
}

#[test]
fn samediff_learns_separable_clusters() {
    let mut rng = Rng::new(5);
    let centres: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
    let pool = |rng: &mut Rng| -> Vec<Vec<Vec<f64>>> {
        centres
            .iter()
            .map(|c| (0..6).map(|_| c.iter().map(|x| x + 0.1 * rng.normal()).collect()).collect())
            .collect()
    };
    let train = make_pairs(&pool(&mut rng), 80, &mut rng).unwrap();
    let test = make_pairs(&pool(&mut rng), 80, &mut rng).unwrap();
    let cfg = SameDiffConfig {
        dim: 4,
        steps: 100,
        adam: AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
    };
    let m = samediff_train(&train, &cfg, &mut Rng::new(1)).unwrap();
    assert!(samediff_eval(&m, &test).unwrap() > 0.9);
    let one_label: Vec<FeaturePair> = train.iter().filter(|p| p.same).cloned().collect();
    assert!(samediff_train(&one_label, &cfg, &mut Rng::new(1)).is_err());
}

#[test]
fn report_renders_csv_and_table() {
    let mut r = EvalReport::default();
    r.rows.push(EvalRow::from_runs("grad2task", "parity", 4, vec![0.5, 0.75]));
    r.rows.push(EvalRow::from_runs("protonet-bn", "topic5", 16, vec![0.25]));
    let csv = r.to_csv();
    assert_eq!(csv.lines().next().unwrap(), "variant,task,k,mean,std,runs");
    assert_eq!(csv.lines().nth(1).unwrap(), "grad2task,parity,4,0.625,0.125,2");
    let table = r.to_table();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().contains("0.6250"));
    assert_eq!(r.get("protonet-bn", "topic5", 16).unwrap().runs, 1);
    assert!(r.get("protonet-bn", "topic5", 4).is_none());
}

fn small_cfg() -> TrainConfig {
    let mut c = TrainConfig::default();
    for (k, v) in [
        ("tasks", "presence=keyword-presence:meta-train,topic3=topic-3:meta-train,parity=keyword-parity:meta-test"),
        ("region_size", "16"),
        ("train_per_class", "12"),
        ("val_per_class", "6"),
        ("test_size", "12"),
        ("min_len", "6"),
        ("max_len", "8"),
        ("max_seq_len", "10"),
        ("model_dim", "8"),
        ("num_layers", "1"),
        ("num_heads", "2"),
        ("ffn_dim", "8"),
        ("adapter_bottleneck_dim", "3"),
        ("head_out_dim", "6"),
        ("episodes_per_step", "2"),
        ("shots", "2"),
        ("query_shots", "2"),
        ("val_episodes", "4"),
        ("task_hidden_size", "4"),
        ("task_embed_size", "3"),
        ("hyper_hidden", "4"),
        ("fim_rounds", "1"),
        ("eval_runs", "3"),
        ("eval_shots", "2,4"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

#[test]
fn eval_task_selection_checks_roles() {
    let bench = small_cfg().benchmark().unwrap();
    let names: Vec<String> = eval_tasks(&bench, &[], false).unwrap().iter().map(|d| d.name.clone()).collect();
    assert_eq!(names, ["parity"]);
    assert!(eval_tasks(&bench, &["presence".into()], false).is_err());
    assert_eq!(eval_tasks(&bench, &["presence".into()], true).unwrap().len(), 1);
    assert!(eval_tasks(&bench, &["missing".into()], true).is_err());
}

#[test]
fn identity_conditioner_scores_like_baseline() {
    let cfg = small_cfg();
    let bench = cfg.benchmark().unwrap();
    let model = BaseModel::new(cfg.encoder_config(bench.vocab.len()).unwrap(), &mut Rng::new(0)).unwrap();
    let tasks = eval_tasks(&bench, &[], false).unwrap();
    let base = evaluate_kshot(&model, None, None, &tasks, 2, 3, 7, "b").unwrap();
    let cond = Conditioner::new(Variant::Grad2Task, &model.config, cfg.conditioner_config(), &mut Rng::new(1)).unwrap();
    let adapted = evaluate_kshot(&model, Some(&cond), Some(&bench.vocab), &tasks, 2, 3, 7, "b").unwrap();
    assert_eq!(base, adapted);
    let again = evaluate_kshot(&model, None, None, &tasks, 2, 3, 7, "b").unwrap();
    assert_eq!(base, again);
    assert!(evaluate_kshot(&model, None, None, &tasks, 2, 0, 7, "b").is_err());
}

#[test]
fn every_ablation_variant_runs() {
    let cfg = small_cfg();
    let bench = cfg.benchmark().unwrap();
    let model = BaseModel::new(cfg.encoder_config(bench.vocab.len()).unwrap(), &mut Rng::new(0)).unwrap();
    let tasks = eval_tasks(&bench, &[], false).unwrap();
    for v in Variant::ALL {
        let run = run_ablation(v, &model, &bench, &tasks, &cfg, 1).unwrap();
        assert_eq!(run.report.rows.len(), 2, "{v}");
        assert!(run.report.rows.iter().all(|r| r.variant == v.tag() && r.runs == 3));
        assert_eq!(run.summary.map(|s| s.steps), Some(1));
    }
}
