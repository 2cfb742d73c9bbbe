//! Nearest-prototype classification and the prototypical-network loss.
//!
//! Logits are negative squared Euclidean distances to class means. Class
//! members are summed in a canonical (value-sorted) order so prototypes are
//! bit-identical under any reordering of the support set.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// `protos[c]` is the mean embedding of class `c`.
    pub protos: Vec<Vec<f64>>,
}

impl PrototypeSet {
    pub fn num_classes(&self) -> usize {
        self.protos.len()
    }

    pub fn dim(&self) -> usize {
        self.protos.first().map_or(0, Vec::len)
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Indices of class members grouped by class, each group in canonical order.
fn class_members<'a>(
    rows: impl Fn(usize) -> &'a [f64],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    if num_classes < 2 {
        return Err(Error::Input(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut members = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Input(format!("label {y} out of range for {num_classes} classes")));
        }
        members[y].push(i);
    }
    for (c, m) in members.iter_mut().enumerate() {
        if m.is_empty() {
            return Err(Error::Input(format!("class {c} has no support embeddings")));
        }
        m.sort_by(|&a, &b| lex_cmp(rows(a), rows(b)));
    }
    Ok(members)
}

pub fn compute_prototypes(embeddings: &[(Vec<f64>, usize)], num_classes: usize) -> Result<PrototypeSet> {
    let dim = embeddings.first().map_or(0, |e| e.0.len());
    if embeddings.iter().any(|e| e.0.len() != dim) {
        return Err(Error::Input("embeddings differ in dimension".into()));
    }
    let labels: Vec<usize> = embeddings.iter().map(|e| e.1).collect();
    let members = class_members(|i| &embeddings[i].0, &labels, num_classes)?;
    let protos = members
        .iter()
        .map(|m| {
            let mut sum = vec![0.0; dim];
            for &i in m {
                for (s, x) in sum.iter_mut().zip(&embeddings[i].0) {
                    *s += x;
                }
            }
            sum.iter().map(|s| s / m.len() as f64).collect()
        })
        .collect();
    Ok(PrototypeSet { protos })
}

/// `logit_c = -||query - mu_c||^2`.
pub fn class_logits(query: &[f64], protos: &PrototypeSet) -> Result<Vec<f64>> {
    if query.len() != protos.dim() {
        return Err(Error::Shape {
            op: "class_logits",
            left: vec![query.len()],
            right: vec![protos.dim()],
        });
    }
    Ok(protos
        .protos
        .iter()
        .map(|p| -query.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |best, i| if xs[i] > xs[best] { i } else { best })
}

/// Mean query negative log-likelihood.
pub fn protonet_loss(
    support: &[(Vec<f64>, usize)],
    query: &[(Vec<f64>, usize)],
    num_classes: usize,
) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::Input("empty query set".into()));
    }
    let protos = compute_prototypes(support, num_classes)?;
    let mut total = 0.0;
    for (x, y) in query {
        let logits = class_logits(x, &protos)?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[*y];
    }
    Ok(total / query.len() as f64)
}

/// Class means on the graph. `support` is `n x d`; returns `C x d`.
pub fn prototypes_graph(g: &mut Graph, support: Var, labels: &[usize], num_classes: usize) -> Result<Var> {
    let (n, d) = g.value(support).dims2();
    if labels.len() != n {
        return Err(Error::Input(format!("{} labels for {n} support rows", labels.len())));
    }
    let data = g.value(support).data().to_vec();
    let members = class_members(|i| &data[i * d..(i + 1) * d], labels, num_classes)?;
    let mut rows = Vec::with_capacity(num_classes);
    for m in &members {
        let sel = g.gather_rows(support, m)?;
        rows.push(g.mean_rows(sel)?);
    }
    g.concat_rows(&rows)
}

/// `-sq_dist(query, protos)`, shape `q x C`.
pub fn logits_graph(g: &mut Graph, query: Var, protos: Var) -> Result<Var> {
    let d = g.sq_dist(query, protos)?;
    g.scale(d, -1.0)
}

/// Row-wise log class probabilities for `query` given prototypes.
pub fn log_probs_graph(g: &mut Graph, query: Var, protos: Var) -> Result<Var> {
    let logits = logits_graph(g, query, protos)?;
    g.log_softmax(logits)
}

/// Mean negative log-likelihood of `labels` under `log_probs` (`q x C`).
pub fn nll_graph(g: &mut Graph, log_probs: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Input("empty query set".into()));
    }
    let picks: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    let lp = g.pick(log_probs, &picks)?;
    let m = g.mean(lp)?;
    g.scale(m, -1.0)
}

/// Prototypical-network loss on the graph.
pub fn protonet_loss_graph(
    g: &mut Graph,
    support: Var,
    support_labels: &[usize],
    query: Var,
    query_labels: &[usize],
    num_classes: usize,
) -> Result<Var> {
    let protos = prototypes_graph(g, support, support_labels, num_classes)?;
    let lp = log_probs_graph(g, query, protos)?;
    nll_graph(g, lp, query_labels)
}
