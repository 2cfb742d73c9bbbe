use rayon::prelude::*;

use crate::encoder::BaseModel;
use crate::episodes::{sample_episode, LabeledDataset};
use crate::error::{Error, Result};
use crate::taskemb::{fim_diag_features, FimConfig};
use crate::tensor::{AdamConfig, Graph, ParamStore, Rng, Tensor, Var};

/// A pair of task feature vectors and whether they come from the same task.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub same: bool,
}

/// Mean-pooled gradient features for `per_task` `k`-shot episodes of each
/// task, computed in parallel with per-episode streams.
pub fn feature_pool(
    model: &BaseModel,
    tasks: &[&LabeledDataset],
    k: usize,
    per_task: usize,
    fim: &FimConfig,
    normalize: bool,
    rng: &Rng,
) -> Result<Vec<Vec<Vec<f64>>>> {
    tasks
        .iter()
        .enumerate()
        .map(|(ti, task)| {
            (0..per_task)
                .into_par_iter()
                .map(|i| {
                    let mut r = rng.child(ti as u64).child(i as u64);
                    let ep = sample_episode(task, k, 0, &mut r)?;
                    Ok(fim_diag_features(model, &ep, fim, &mut r)?.mean_pooled(normalize))
                })
                .collect()
        })
        .collect()
}

/// `n` pairs alternating same/different, drawn from a per-task pool.
/// Same-task pairs use two distinct pool entries.
pub fn make_pairs(pool: &[Vec<Vec<f64>>], n: usize, rng: &mut Rng) -> Result<Vec<FeaturePair>> {
    if pool.len() < 2 {
        return Err(Error::Input("same/different pairs need at least two tasks".into()));
    }
    if pool.iter().any(|p| p.len() < 2) {
        return Err(Error::Input("same/different pairs need at least two episodes per task".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let same = i % 2 == 0;
        let ta = rng.below(pool.len());
        let (a, b) = if same {
            let ij = rng.sample_indices(pool[ta].len(), 2);
            (&pool[ta][ij[0]], &pool[ta][ij[1]])
        } else {
            let mut tb = rng.below(pool.len() - 1);
            if tb >= ta {
                tb += 1;
            }
            (&pool[ta][rng.below(pool[ta].len())], &pool[tb][rng.below(pool[tb].len())])
        };
        out.push(FeaturePair {
            a: a.clone(),
            b: b.clone(),
            same,
        });
    }
    Ok(out)
}

/// `sigmoid(a * cos(W u_A, W u_B) + b)` with one map `W` for both sides.
#[derive(Debug, Clone)]
pub struct SameDiffModel {
    pub params: ParamStore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SameDiffConfig {
    pub dim: usize,
    pub steps: usize,
    pub adam: AdamConfig,
}

impl SameDiffModel {
    pub fn new(input: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if input == 0 || dim == 0 {
            return Err(Error::Config("same/different model sizes must be positive".into()));
        }
        let mut s = ParamStore::new();
        s.insert_normal("w", vec![input, dim], 1.0 / (input as f64).sqrt(), rng)?;
        s.insert("a", Tensor::scalar(5.0))?;
        s.insert("b", Tensor::scalar(0.0))?;
        Ok(Self { params: s })
    }

    fn cos_graph(&self, g: &mut Graph, ua: &[f64], ub: &[f64]) -> Result<Var> {
        let w = g.param(&self.params, "w")?;
        let xa = g.constant(Tensor::row(ua.to_vec()))?;
        let xb = g.constant(Tensor::row(ub.to_vec()))?;
        let pa = g.matmul(xa, w)?;
        let pb = g.matmul(xb, w)?;
        let ab = g.mul(pa, pb)?;
        let dot = g.sum(ab)?;
        let sa = g.square(pa)?;
        let sa = g.sum(sa)?;
        let sb = g.square(pb)?;
        let sb = g.sum(sb)?;
        let nn = g.mul(sa, sb)?;
        let norm = g.sqrt(nn)?;
        g.div(dot, norm)
    }

    /// Logit `a * cos + b`.
    fn logit_graph(&self, g: &mut Graph, ua: &[f64], ub: &[f64]) -> Result<Var> {
        let c = self.cos_graph(g, ua, ub)?;
        let a = g.param(&self.params, "a")?;
        let b = g.param(&self.params, "b")?;
        let z = g.mul(a, c)?;
        g.add(z, b)
    }

    pub fn cosine(&self, ua: &[f64], ub: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let c = self.cos_graph(&mut g, ua, ub)?;
        Ok(g.value(c).item())
    }

    pub fn probability(&self, ua: &[f64], ub: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let z = self.logit_graph(&mut g, ua, ub)?;
        let p = g.sigmoid(z)?;
        Ok(g.value(p).item())
    }

    /// Mean binary cross-entropy over `pairs` on `g`.
    fn bce_graph(&self, g: &mut Graph, pairs: &[FeaturePair]) -> Result<Var> {
        let mut terms = Vec::with_capacity(pairs.len());
        for p in pairs {
            let z = self.logit_graph(g, &p.a, &p.b)?;
            // -log sigmoid(z) for positives, -log sigmoid(-z) for negatives.
            let s = if p.same { g.scale(z, -1.0)? } else { z };
            let e = g.exp(s)?;
            let one = g.constant(Tensor::scalar(1.0))?;
            let e1 = g.add(e, one)?;
            terms.push(g.log(e1)?);
        }
        let rows: Vec<Var> = terms
            .into_iter()
            .map(|t| g.reshape(t, vec![1, 1]))
            .collect::<Result<_>>()?;
        let all = g.concat_rows(&rows)?;
        g.mean(all)
    }

    pub fn loss(&self, pairs: &[FeaturePair]) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.bce_graph(&mut g, pairs)?;
        Ok(g.value(l).item())
    }
}

/// Full-batch Adam on binary cross-entropy.
pub fn samediff_train(pairs: &[FeaturePair], cfg: &SameDiffConfig, rng: &mut Rng) -> Result<SameDiffModel> {
    if pairs.is_empty() {
        return Err(Error::Input("no training pairs".into()));
    }
    if pairs.iter().all(|p| p.same) || pairs.iter().all(|p| !p.same) {
        return Err(Error::Input("same/different training pairs all carry one label".into()));
    }
    let mut m = SameDiffModel::new(pairs[0].a.len(), cfg.dim, rng)?;
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let l = m.bce_graph(&mut g, pairs)?;
        let grads = g.backward(l)?;
        m.params.accumulate_from(&g, &grads);
        m.params.adam_step(&cfg.adam)?;
    }
    Ok(m)
}

/// ROC AUC with ties counted as half, via average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Input("AUC is undefined with a single class".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn samediff_eval(model: &SameDiffModel, pairs: &[FeaturePair]) -> Result<f64> {
    let scores = pairs
        .iter()
        .map(|p| model.probability(&p.a, &p.b))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.same).collect();
    auc(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SameDiffResult {
    pub k: usize,
    pub train_loss: f64,
    pub auc: f64,
}

/// Train on meta-train task pairs and score meta-test task pairs, once per
/// shot count in `cfg.samediff_shots`.
pub fn run_samediff(
    model: &BaseModel,
    bench: &crate::episodes::Benchmark,
    cfg: &crate::trainer::TrainConfig,
) -> Result<Vec<SameDiffResult>> {
    use crate::episodes::Role;
    let train_tasks = bench.with_role(Role::MetaTrain);
    let test_tasks = bench.with_role(Role::MetaTest);
    let root = Rng::new(cfg.seed).child(0x5344_4946);
    let fim = cfg.fim_config();
    let sd = SameDiffConfig {
        dim: cfg.samediff_dim,
        steps: cfg.samediff_steps,
        adam: AdamConfig {
            lr: cfg.samediff_lr,
            ..AdamConfig::default()
        },
    };
    let mut out = Vec::new();
    for k in cfg.samediff_shot_list()? {
        let r = root.child(k as u64);
        let train_pool = feature_pool(model, &train_tasks, k, cfg.samediff_pool, &fim, cfg.normalize_features, &r.child(0))?;
        let test_pool = feature_pool(model, &test_tasks, k, cfg.samediff_pool, &fim, cfg.normalize_features, &r.child(1))?;
        let train = make_pairs(&train_pool, cfg.samediff_train_pairs, &mut r.child(2))?;
        let test = make_pairs(&test_pool, cfg.samediff_test_pairs, &mut r.child(3))?;
        let m = samediff_train(&train, &sd, &mut r.child(4))?;
        out.push(SameDiffResult {
            k,
            train_loss: m.loss(&train)?,
            auc: samediff_eval(&m, &test)?,
        });
    }
    Ok(out)
}
