use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;

use crate::adaptation::{base_log_probs_graph, base_predict, probs_of, Conditioner, TaskSignal};
use crate::encoder::{is_stage1_param, BaseModel, Vocab};
use crate::episodes::{sample_episode, sample_episode_from, Episode, Split, TaskRegistry};
use crate::error::{Error, Result};
use crate::proto::{argmax, nll_graph};
use crate::tensor::{save_checkpoint, Graph, ParamStore, Rng, Var};
use crate::trainer::config::TrainConfig;

const TRAIN_STREAM: u64 = 0x5452_4149;
const VAL_STREAM: u64 = 0x5641_4c00;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub split: String,
    pub task: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, step: usize, epoch: usize, split: &str, task: &str, loss: f64, accuracy: f64) {
        self.rows.push(MetricsRow {
            step,
            epoch,
            split: split.to_string(),
            task: task.to_string(),
            loss,
            accuracy,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,split,task,loss,accuracy\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{},{}", r.step, r.epoch, r.split, r.task, r.loss, r.accuracy).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Loss, accuracy and named gradients from one training episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub task: String,
    pub loss: f64,
    pub accuracy: f64,
    /// `(store/name, gradient)` pairs.
    pub grads: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub initial_val_loss: f64,
    pub initial_val_accuracy: f64,
    pub best_val_loss: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
}

pub fn query_accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    hits as f64 / labels.len().max(1) as f64
}

fn finish(g: &Graph, lp: Var, loss: Var, ep: &Episode) -> (f64, f64) {
    let acc = query_accuracy(&probs_of(g, lp), &ep.query_labels());
    (g.value(loss).item(), acc)
}

/// Forward and backward for one stage-1 episode.
pub fn stage1_episode(model: &BaseModel, ep: &Episode, dropout: Option<&mut Rng>) -> Result<EpisodeOutcome> {
    let mut g = Graph::new();
    let lp = base_log_probs_graph(&mut g, model, &ep.support, &ep.query, ep.num_classes, dropout)?;
    let loss = nll_graph(&mut g, lp, &ep.query_labels())?;
    let grads = g.backward(loss)?;
    let (l, acc) = finish(&g, lp, loss, ep);
    Ok(EpisodeOutcome {
        task: ep.task.clone(),
        loss: l,
        accuracy: acc,
        grads: model
            .params
            .collect_grads(&g, &grads)
            .into_iter()
            .map(|(n, v)| (format!("model/{n}"), v))
            .collect(),
    })
}

/// Forward and backward for one stage-2 episode. Fails if any gradient
/// reaches the base model.
pub fn stage2_episode(
    model: &BaseModel,
    cond: &Conditioner,
    vocab: Option<&Vocab>,
    ep: &Episode,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    let signal = cond.task_signal(model, vocab, ep, &mut rng.child(0))?;
    let mut drop = rng.child(1);
    let mut g = Graph::new();
    let lp = cond.log_probs_graph(&mut g, model, &signal, &ep.support, &ep.query, ep.num_classes, Some(&mut drop))?;
    let loss = nll_graph(&mut g, lp, &ep.query_labels())?;
    let grads = g.backward(loss)?;
    if let Some((name, _)) = model.params.collect_grads(&g, &grads).into_iter().next() {
        return Err(Error::FrozenGrad(name));
    }
    let (l, acc) = finish(&g, lp, loss, ep);
    let mut named = Vec::new();
    for (prefix, store) in cond.stores() {
        named.extend(
            store
                .collect_grads(&g, &grads)
                .into_iter()
                .map(|(n, v)| (format!("{prefix}/{n}"), v)),
        );
    }
    Ok(EpisodeOutcome {
        task: ep.task.clone(),
        loss: l,
        accuracy: acc,
        grads: named,
    })
}

/// Eval-mode loss and accuracy on one episode.
pub fn evaluate_episode(
    model: &BaseModel,
    cond: Option<(&Conditioner, Option<&Vocab>)>,
    ep: &Episode,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let lp = match cond {
        None => base_log_probs_graph(&mut g, model, &ep.support, &ep.query, ep.num_classes, None)?,
        Some((c, vocab)) => {
            let signal = c.task_signal(model, vocab, ep, rng)?;
            c.log_probs_graph(&mut g, model, &signal, &ep.support, &ep.query, ep.num_classes, None)?
        }
    };
    let loss = nll_graph(&mut g, lp, &ep.query_labels())?;
    Ok(finish(&g, lp, loss, ep))
}

fn step_rng(cfg: &TrainConfig, step: usize, e: usize) -> Rng {
    Rng::new(cfg.seed).child(TRAIN_STREAM).child(step as u64).child(e as u64)
}

/// The `M` episodes of optimiser step `step`, each with its own stream.
pub fn step_episodes(reg: &TaskRegistry<'_>, cfg: &TrainConfig, step: usize) -> Result<Vec<(Episode, Rng)>> {
    (0..cfg.episodes_per_step)
        .map(|e| {
            let mut r = step_rng(cfg, step, e);
            let task = reg.sample_task(&mut r);
            let ep = sample_episode(task, cfg.shots, cfg.query_shots, &mut r)?;
            Ok((ep, r.child(7)))
        })
        .collect()
}

/// Fixed validation episodes from the validation pools of `reg`'s tasks.
pub fn validation_episodes(reg: &TaskRegistry<'_>, cfg: &TrainConfig) -> Result<Vec<Episode>> {
    let mut r = Rng::new(cfg.seed).child(VAL_STREAM);
    (0..cfg.val_episodes)
        .map(|_| {
            let task = reg.sample_task(&mut r);
            sample_episode_from(task, Split::Val, cfg.shots, cfg.query_shots, &mut r)
        })
        .collect()
}

/// Optimiser steps per epoch: enough episodes to cover the meta-train pools
/// about once, unless fixed by the config.
pub fn steps_per_epoch(reg: &TaskRegistry<'_>, cfg: &TrainConfig) -> usize {
    if cfg.steps_per_epoch > 0 {
        return cfg.steps_per_epoch;
    }
    let ds = reg.datasets();
    let total: usize = ds.iter().map(|d| d.size()).sum();
    let per_ep: f64 = ds
        .iter()
        .zip(reg.weights())
        .map(|(d, w)| w * (d.num_classes() * (cfg.shots + cfg.query_shots)) as f64)
        .sum();
    ((total as f64 / (per_ep * cfg.episodes_per_step as f64)).round() as usize).max(1)
}

/// Episodes run concurrently; results come back in input order, so the
/// gradient reduction order is fixed either way.
fn run_parallel<T: Send>(
    items: Vec<(Episode, Rng)>,
    f: impl Fn(&Episode, &mut Rng) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    items.into_par_iter().map(|(ep, mut r)| f(&ep, &mut r)).collect()
}

fn check_finite(step: usize, outcomes: &[EpisodeOutcome]) -> Result<()> {
    for o in outcomes {
        if !o.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {} on task {}", o.loss, o.task),
            });
        }
        if let Some((n, _)) = o.grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Diverged {
                step,
                detail: format!("non-finite gradient for {n} on task {}", o.task),
            });
        }
    }
    Ok(())
}

/// Add `(1/M) Σ grads` into the stores, in episode order.
fn accumulate(stores: &mut [(&str, &mut ParamStore)], outcomes: &[EpisodeOutcome]) -> Result<()> {
    let scale = 1.0 / outcomes.len() as f64;
    for o in outcomes {
        for (full, grad) in &o.grads {
            let (prefix, name) = full.split_once('/').expect("prefixed gradient name");
            let store = stores
                .iter_mut()
                .find(|(p, _)| *p == prefix)
                .map(|(_, s)| &mut **s)
                .ok_or_else(|| Error::UnknownParam(full.clone()))?;
            let scaled: Vec<f64> = grad.iter().map(|x| x * scale).collect();
            let idx = store.index_of(name)?;
            store.accumulate_grad(idx, &scaled);
        }
    }
    Ok(())
}

/// One stage-1 optimiser step at index `step`. Depends only on the model
/// (values and optimiser state), the registry, the config and `step`.
pub fn stage1_step(
    model: &mut BaseModel,
    reg: &TaskRegistry<'_>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<EpisodeOutcome>> {
    let items = step_episodes(reg, cfg, step)?;
    let m: &BaseModel = model;
    let outcomes = run_parallel(items, |ep, r| stage1_episode(m, ep, Some(r)))
        .map_err(|e| diverged(step, e))?;
    check_finite(step, &outcomes)?;
    accumulate(&mut [("model", &mut model.params)], &outcomes)?;
    model.params.adam_step(&cfg.adam())?;
    Ok(outcomes)
}

/// One stage-2 optimiser step; only the conditioner's stores change.
pub fn stage2_step(
    model: &BaseModel,
    cond: &mut Conditioner,
    vocab: Option<&Vocab>,
    reg: &TaskRegistry<'_>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<EpisodeOutcome>> {
    let items = step_episodes(reg, cfg, step)?;
    let c: &Conditioner = cond;
    let outcomes = run_parallel(items, |ep, r| stage2_episode(model, c, vocab, ep, r))
        .map_err(|e| diverged(step, e))?;
    check_finite(step, &outcomes)?;
    let adam = cfg.adam();
    let mut stores = cond.stores_mut();
    accumulate(&mut stores, &outcomes)?;
    for (_, s) in stores.iter_mut() {
        s.adam_step(&adam)?;
    }
    Ok(outcomes)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Mean validation loss and accuracy, with per-task rows in `log`.
#[allow(clippy::too_many_arguments)]
fn validate(
    model: &BaseModel,
    cond: Option<(&Conditioner, Option<&Vocab>)>,
    episodes: &[Episode],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    step: usize,
    epoch: usize,
) -> Result<(f64, f64)> {
    let items: Vec<(Episode, Rng)> = episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| (ep.clone(), Rng::new(cfg.seed).child(VAL_STREAM + 1).child(i as u64)))
        .collect();
    let res = run_parallel(items, |ep, r| evaluate_episode(model, cond, ep, r))?;
    let mut tasks: Vec<&str> = episodes.iter().map(|e| e.task.as_str()).collect();
    tasks.sort_unstable();
    tasks.dedup();
    for t in tasks {
        let sel: Vec<&(f64, f64)> = episodes.iter().zip(&res).filter(|(e, _)| e.task == t).map(|(_, r)| r).collect();
        let n = sel.len() as f64;
        log.push(step, epoch, "val", t, sel.iter().map(|r| r.0).sum::<f64>() / n, sel.iter().map(|r| r.1).sum::<f64>() / n);
    }
    let n = res.len() as f64;
    let loss = res.iter().map(|r| r.0).sum::<f64>() / n;
    let acc = res.iter().map(|r| r.1).sum::<f64>() / n;
    log.push(step, epoch, "val", "all", loss, acc);
    Ok((loss, acc))
}

struct EarlyStop {
    best_loss: f64,
    best_acc: f64,
    best_epoch: usize,
    bad: usize,
    by_loss: bool,
}

impl EarlyStop {
    fn new(loss: f64, acc: f64, by_loss: bool) -> Self {
        Self {
            best_loss: loss,
            best_acc: acc,
            best_epoch: 0,
            bad: 0,
            by_loss,
        }
    }

    /// Record an epoch; returns whether it is the new best.
    fn observe(&mut self, epoch: usize, loss: f64, acc: f64) -> bool {
        let better = if self.by_loss {
            loss < self.best_loss || (loss == self.best_loss && acc > self.best_acc)
        } else {
            acc > self.best_acc || (acc == self.best_acc && loss < self.best_loss)
        };
        if better {
            self.best_acc = acc;
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.bad = 0;
            true
        } else {
            self.bad += 1;
            false
        }
    }
}

fn log_train(log: &mut MetricsLog, step: usize, epoch: usize, outcomes: &[EpisodeOutcome]) {
    for o in outcomes {
        log.push(step, epoch, "train", &o.task, o.loss, o.accuracy);
    }
}

fn checkpoint_path(cfg: &TrainConfig) -> Option<&Path> {
    (!cfg.checkpoint.is_empty()).then(|| Path::new(&cfg.checkpoint))
}

/// Stage 1: train adapters, layer norms and the output head with the
/// ProtoNet loss. Keeps the weights of the best validation epoch.
pub fn train_stage1(
    model: &mut BaseModel,
    reg: &TaskRegistry<'_>,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainSummary> {
    cfg.validate()?;
    model.params.set_trainable_where(is_stage1_param);
    let val = validation_episodes(reg, cfg)?;
    let spe = steps_per_epoch(reg, cfg);
    let (l0, a0) = validate(model, None, &val, cfg, log, 0, 0)?;
    let mut stop = EarlyStop::new(l0, a0, cfg.select_by_loss()?);
    let mut best = model.params.clone();
    let mut step = 0;
    let mut epochs = 0;
    info!("stage 1: {spe} steps/epoch, initial val acc {a0:.4}");
    'outer: for epoch in 1..=cfg.max_epochs {
        for _ in 0..spe {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'outer;
            }
            let out = stage1_step(model, reg, cfg, step)?;
            step += 1;
            log_train(log, step, epoch, &out);
        }
        epochs = epoch;
        let (l, a) = validate(model, None, &val, cfg, log, step, epoch)?;
        info!("stage 1 epoch {epoch}: val loss {l:.4} acc {a:.4}");
        if stop.observe(epoch, l, a) {
            best = model.params.clone();
            if let Some(p) = checkpoint_path(cfg) {
                save_checkpoint(p, &[("model", &model.params)])?;
            }
        } else if stop.bad >= cfg.patience {
            info!("stage 1: early stop after epoch {epoch}");
            break;
        }
    }
    if cfg.max_steps > 0 && step >= cfg.max_steps && epochs < cfg.max_epochs {
        let (l, a) = validate(model, None, &val, cfg, log, step, epochs + 1)?;
        if stop.observe(epochs + 1, l, a) {
            best = model.params.clone();
            if let Some(p) = checkpoint_path(cfg) {
                save_checkpoint(p, &[("model", &model.params)])?;
            }
        }
        epochs += 1;
    }
    model.params = best;
    Ok(TrainSummary {
        steps: step,
        epochs,
        initial_val_loss: l0,
        initial_val_accuracy: a0,
        best_val_loss: stop.best_loss,
        best_val_accuracy: stop.best_acc,
        best_epoch: stop.best_epoch,
    })
}

/// Fails unless the conditioner currently reproduces the base model exactly
/// on `ep`.
pub fn verify_identity(model: &BaseModel, cond: &Conditioner, vocab: Option<&Vocab>, ep: &Episode) -> Result<()> {
    let base = base_predict(model, ep)?;
    let signal = cond.task_signal(model, vocab, ep, &mut Rng::new(0))?;
    let adapted = cond.predict(model, &signal, ep)?;
    if base != adapted {
        let worst = base
            .iter()
            .flatten()
            .zip(adapted.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        return Err(Error::Config(format!(
            "conditioner does not start at the identity (max probability difference {worst:e})"
        )));
    }
    Ok(())
}

/// Stage 2: freeze the base model and train the conditioner.
pub fn train_stage2(
    model: &mut BaseModel,
    cond: &mut Conditioner,
    vocab: Option<&Vocab>,
    reg: &TaskRegistry<'_>,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainSummary> {
    cfg.validate()?;
    model.params.freeze_all();
    let before = model.params.fingerprint();
    let val = validation_episodes(reg, cfg)?;
    if let Some(ep) = val.first() {
        verify_identity(model, cond, vocab, ep)?;
    }
    if matches!(cond.task_signal(model, vocab, &val[0], &mut Rng::new(0))?, TaskSignal::None) {
        warn!("stage 2 with variant {}: nothing to train", cond.variant);
    }
    let spe = steps_per_epoch(reg, cfg);
    let (l0, a0) = validate(model, Some((cond, vocab)), &val, cfg, log, 0, 0)?;
    let mut stop = EarlyStop::new(l0, a0, cfg.select_by_loss()?);
    let mut best = cond.clone();
    let mut step = 0;
    let mut epochs = 0;
    info!("stage 2 ({}): {spe} steps/epoch, initial val acc {a0:.4}", cond.variant);
    let save = |c: &Conditioner| -> Result<()> {
        if let Some(p) = checkpoint_path(cfg) {
            save_checkpoint(p, &c.stores())?;
        }
        Ok(())
    };
    'outer: for epoch in 1..=cfg.max_epochs {
        for _ in 0..spe {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'outer;
            }
            let out = stage2_step(model, cond, vocab, reg, cfg, step)?;
            step += 1;
            log_train(log, step, epoch, &out);
        }
        epochs = epoch;
        let (l, a) = validate(model, Some((cond, vocab)), &val, cfg, log, step, epoch)?;
        info!("stage 2 epoch {epoch}: val loss {l:.4} acc {a:.4}");
        if stop.observe(epoch, l, a) {
            best = cond.clone();
            save(cond)?;
        } else if stop.bad >= cfg.patience {
            info!("stage 2: early stop after epoch {epoch}");
            break;
        }
    }
    if cfg.max_steps > 0 && step >= cfg.max_steps && epochs < cfg.max_epochs {
        let (l, a) = validate(model, Some((cond, vocab)), &val, cfg, log, step, epochs + 1)?;
        if stop.observe(epochs + 1, l, a) {
            best = cond.clone();
            save(cond)?;
        }
        epochs += 1;
    }
    if model.params.fingerprint() != before {
        return Err(Error::FrozenGrad("base model changed during stage 2".into()));
    }
    *cond = best;
    Ok(TrainSummary {
        steps: step,
        epochs,
        initial_val_loss: l0,
        initial_val_accuracy: a0,
        best_val_loss: stop.best_loss,
        best_val_accuracy: stop.best_acc,
        best_epoch: stop.best_epoch,
    })
}
