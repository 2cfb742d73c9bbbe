use log::info;

use crate::adaptation::{Conditioner, Variant};
use crate::encoder::BaseModel;
use crate::episodes::{Benchmark, LabeledDataset, Role};
use crate::error::Result;
use crate::eval::kshot::{evaluate_kshot, EvalReport};
use crate::tensor::Rng;
use crate::trainer::{steps_per_epoch, train_stage1, train_stage2, MetricsLog, TrainConfig, TrainSummary};

pub const BASELINE_TAG: &str = "protonet-bn";

const ABLATION_STREAM: u64 = 0x4142_4c54;

/// Outcome of one ablation variant.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub variant: Variant,
    pub summary: Option<TrainSummary>,
    pub report: EvalReport,
    pub log: MetricsLog,
}

/// Stage-2 step budget implied by `cfg`: `max_steps`, or the full epoch
/// budget when uncapped.
pub fn stage2_budget(bench: &Benchmark, cfg: &TrainConfig) -> Result<usize> {
    if cfg.max_steps > 0 {
        return Ok(cfg.max_steps);
    }
    let reg = bench.registry(Role::MetaTrain)?;
    Ok(cfg.max_epochs * steps_per_epoch(&reg, cfg))
}

/// Evaluate every shot count in `shots` on `tasks`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_all(
    model: &BaseModel,
    cond: Option<&Conditioner>,
    bench: &Benchmark,
    tasks: &[&LabeledDataset],
    shots: &[usize],
    runs: usize,
    seed: u64,
    tag: &str,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for &k in shots {
        report.extend(evaluate_kshot(model, cond, Some(&bench.vocab), tasks, k, runs, seed, tag)?);
    }
    Ok(report)
}

/// Train one variant from the shared stage-1 model and evaluate it.
/// `budget` is the number of optimiser steps; 0 skips training.
pub fn run_ablation(
    variant: Variant,
    base: &BaseModel,
    bench: &Benchmark,
    tasks: &[&LabeledDataset],
    cfg: &TrainConfig,
    budget: usize,
) -> Result<AblationRun> {
    let shots = cfg.eval_shot_list()?;
    let reg = bench.registry(Role::MetaTrain)?;
    let mut model = base.clone();
    let mut log = MetricsLog::default();
    let mut run_cfg = cfg.clone();
    run_cfg.max_steps = budget;
    run_cfg.variant = variant.tag().to_string();
    run_cfg.checkpoint.clear();
    info!("ablation {variant}: {budget} steps");
    match variant {
        Variant::PnLonger => {
            let summary = if budget > 0 {
                run_cfg.stage = 1;
                run_cfg.max_epochs = run_cfg.max_epochs.max(budget);
                Some(train_stage1(&mut model, &reg, &run_cfg, &mut log)?)
            } else {
                None
            };
            let report = evaluate_all(&model, None, bench, tasks, &shots, cfg.eval_runs, cfg.seed, variant.tag())?;
            Ok(AblationRun {
                variant,
                summary,
                report,
                log,
            })
        }
        _ => {
            let mut rng = Rng::new(cfg.seed).child(ABLATION_STREAM);
            let mut cond = Conditioner::new(variant, &model.config, cfg.conditioner_config(), &mut rng)?;
            let summary = if budget > 0 {
                run_cfg.stage = 2;
                run_cfg.max_epochs = run_cfg.max_epochs.max(budget);
                Some(train_stage2(&mut model, &mut cond, Some(&bench.vocab), &reg, &run_cfg, &mut log)?)
            } else {
                None
            };
            let report = evaluate_all(&model, Some(&cond), bench, tasks, &shots, cfg.eval_runs, cfg.seed, variant.tag())?;
            Ok(AblationRun {
                variant,
                summary,
                report,
                log,
            })
        }
    }
}
