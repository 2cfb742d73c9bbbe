use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::adaptation::{base_predict, Conditioner};
use crate::encoder::{BaseModel, Vocab};
use crate::episodes::{sample_eval_episode, Benchmark, LabeledDataset, Role};
use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::trainer::query_accuracy;

const EVAL_STREAM: u64 = 0x4556_414c;

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub variant: String,
    pub task: String,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    pub accuracies: Vec<f64>,
}

impl EvalRow {
    pub fn from_runs(variant: &str, task: &str, k: usize, accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self {
            variant: variant.to_string(),
            task: task.to_string(),
            k,
            mean,
            std,
            runs: accuracies.len(),
            accuracies,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    pub fn get(&self, variant: &str, task: &str, k: usize) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.variant == variant && r.task == task && r.k == k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,task,k,mean,std,runs\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{},{}", r.variant, r.task, r.k, r.mean, r.std, r.runs).unwrap();
        }
        out
    }

    /// Aligned text table, one row per (variant, task, k).
    pub fn to_table(&self) -> String {
        let header = ["variant", "task", "k", "mean", "std", "runs"].map(String::from);
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.variant.clone(),
                    r.task.clone(),
                    r.k.to_string(),
                    format!("{:.4}", r.mean),
                    format!("{:.4}", r.std),
                    r.runs.to_string(),
                ]
            })
            .collect();
        let mut widths = header.clone().map(|h| h.len());
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        for row in std::iter::once(&header).chain(&body) {
            let cells: Vec<String> = row
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn write(&self, csv: &Path, table: &Path) -> Result<()> {
        fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        fs::write(table, self.to_table()).map_err(|e| Error::io(table, e))
    }
}

/// Meta-test tasks of `bench`, or the named tasks after a role check.
pub fn eval_tasks<'a>(bench: &'a Benchmark, names: &[String], allow_overlap: bool) -> Result<Vec<&'a LabeledDataset>> {
    if names.is_empty() {
        let tasks = bench.with_role(Role::MetaTest);
        if tasks.is_empty() {
            return Err(Error::Config("benchmark has no meta-test tasks".into()));
        }
        return Ok(tasks);
    }
    names
        .iter()
        .map(|n| {
            let d = bench.task(n).ok_or_else(|| Error::Config(format!("unknown task {n:?}")))?;
            if bench.role_of(n) == Some(Role::MetaTrain) && !allow_overlap {
                return Err(Error::Config(format!(
                    "task {n:?} is a meta-train task; pass --allow-overlap to evaluate it anyway"
                )));
            }
            Ok(d)
        })
        .collect()
}

/// Accuracy over `runs` independent `k`-shot support sets per task, each
/// classifying the task's whole test pool. Support sets depend only on
/// `(seed, task position, k, run)`, so variants see identical episodes.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_kshot(
    model: &BaseModel,
    cond: Option<&Conditioner>,
    vocab: Option<&Vocab>,
    tasks: &[&LabeledDataset],
    k: usize,
    runs: usize,
    seed: u64,
    tag: &str,
) -> Result<EvalReport> {
    if runs == 0 {
        return Err(Error::Config("runs must be >= 1".into()));
    }
    let mut report = EvalReport::default();
    for (ti, task) in tasks.iter().enumerate() {
        if task.test.is_empty() {
            return Err(Error::Input(format!("task {} has an empty test pool", task.name)));
        }
        let accs = (0..runs)
            .into_par_iter()
            .map(|run| {
                let mut rng = Rng::new(seed)
                    .child(EVAL_STREAM)
                    .child(ti as u64)
                    .child(k as u64)
                    .child(run as u64);
                let ep = sample_eval_episode(task, k, &mut rng)?;
                let probs = match cond {
                    None => base_predict(model, &ep)?,
                    Some(c) => {
                        let signal = c.task_signal(model, vocab, &ep, &mut rng.child(1))?;
                        c.predict(model, &signal, &ep)?
                    }
                };
                Ok(query_accuracy(&probs, &ep.query_labels()))
            })
            .collect::<Result<Vec<f64>>>()?;
        report.rows.push(EvalRow::from_runs(tag, &task.name, k, accs));
    }
    Ok(report)
}
