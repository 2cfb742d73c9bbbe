use crate::episodes::dataset::{Example, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// One few-shot task instance drawn from a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: String,
    pub support: Vec<Example>,
    pub query: Vec<Example>,
    pub shots: usize,
    pub num_classes: usize,
    /// Class names indexed by episode-local label.
    pub class_names: Vec<String>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|e| e.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|e| e.label).collect()
    }

    /// Check class balance, label range and support/query disjointness.
    pub fn check(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Input(format!("episode has {} classes", self.num_classes)));
        }
        let mut counts = vec![0usize; self.num_classes];
        for e in self.support.iter().chain(&self.query) {
            if e.label >= self.num_classes {
                return Err(Error::Input(format!("label {} out of range", e.label)));
            }
        }
        for e in &self.support {
            counts[e.label] += 1;
        }
        if counts.iter().any(|&c| c != self.shots) {
            return Err(Error::Input(format!("unbalanced support: {counts:?}")));
        }
        Ok(())
    }
}

/// Datasets with sampling weights proportional to the square root of their
/// training-pool sizes.
#[derive(Debug, Clone)]
pub struct TaskRegistry<'a> {
    datasets: Vec<&'a LabeledDataset>,
    weights: Vec<f64>,
}

impl<'a> TaskRegistry<'a> {
    pub fn new(datasets: Vec<&'a LabeledDataset>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Input("empty task registry".into()));
        }
        let roots: Vec<f64> = datasets.iter().map(|d| (d.size() as f64).sqrt()).collect();
        let total: f64 = roots.iter().sum();
        if total <= 0.0 {
            return Err(Error::Input("all registry datasets are empty".into()));
        }
        let weights = roots.iter().map(|r| r / total).collect();
        Ok(Self { datasets, weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn datasets(&self) -> &[&'a LabeledDataset] {
        &self.datasets
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    /// Index of a task drawn with the registry weights.
    pub fn sample_index(&self, rng: &mut Rng) -> usize {
        rng.categorical(&self.weights)
    }

    pub fn sample_task(&self, rng: &mut Rng) -> &'a LabeledDataset {
        self.datasets[self.sample_index(rng)]
    }
}

/// Draw `k` support and `query_k` query examples per class, without
/// replacement, from one pool of `dataset`.
pub fn sample_episode_from(
    dataset: &LabeledDataset,
    split: Split,
    k: usize,
    query_k: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Input("k must be >= 1".into()));
    }
    let pool = dataset.pool(split);
    let c = dataset.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, e) in pool.iter().enumerate() {
        by_class[e.label].push(i);
    }
    let mut support = Vec::with_capacity(k * c);
    let mut query = Vec::with_capacity(query_k * c);
    for (label, members) in by_class.iter().enumerate() {
        let need = k + query_k;
        if members.len() < need {
            return Err(Error::InsufficientExamples {
                class: format!("{}/{}", dataset.name, dataset.class_names[label]),
                available: members.len(),
                required: need,
            });
        }
        let picks = rng.sample_indices(members.len(), need);
        for (j, &p) in picks.iter().enumerate() {
            let e = pool[members[p]].clone();
            if j < k {
                support.push(e);
            } else {
                query.push(e);
            }
        }
    }
    Ok(Episode {
        task: dataset.name.clone(),
        support,
        query,
        shots: k,
        num_classes: c,
        class_names: dataset.class_names.clone(),
    })
}

/// Training episode from the train pool.
pub fn sample_episode(dataset: &LabeledDataset, k: usize, query_k: usize, rng: &mut Rng) -> Result<Episode> {
    sample_episode_from(dataset, Split::Train, k, query_k, rng)
}

/// Evaluation episode: a `k`-shot support set from the train pool and the
/// entire test pool as the query set.
pub fn sample_eval_episode(dataset: &LabeledDataset, k: usize, rng: &mut Rng) -> Result<Episode> {
    let mut ep = sample_episode_from(dataset, Split::Train, k, 0, rng)?;
    ep.query = dataset.test.clone();
    Ok(ep)
}

/// Default probe-subset sizes for a `k`-shot, `c`-class support set:
/// `ceil(k/2)` prototype examples per class, the remainder as probes.
pub fn default_subsample_sizes(k: usize, c: usize) -> (usize, usize) {
    let m = k.div_ceil(2);
    (m, c * k - m * c)
}

/// Split support indices into a per-class prototype subset (`m` per class)
/// and a disjoint probe subset of `probe_size` examples.
pub fn subsample_support(
    episode: &Episode,
    m: usize,
    probe_size: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let c = episode.num_classes;
    if m == 0 || probe_size == 0 {
        return Err(Error::Input(format!(
            "prototype count ({m}) and probe size ({probe_size}) must both be >= 1"
        )));
    }
    if m * c + probe_size > episode.support.len() {
        return Err(Error::Input(format!(
            "cannot take {m} x {c} prototype examples plus {probe_size} probes from {} support examples",
            episode.support.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, e) in episode.support.iter().enumerate() {
        by_class[e.label].push(i);
    }
    let mut protos = Vec::with_capacity(m * c);
    let mut rest = Vec::new();
    for (label, members) in by_class.iter().enumerate() {
        if members.len() < m {
            return Err(Error::InsufficientExamples {
                class: episode.class_names.get(label).cloned().unwrap_or_else(|| label.to_string()),
                available: members.len(),
                required: m,
            });
        }
        let picks = rng.sample_indices(members.len(), m);
        let mut taken = vec![false; members.len()];
        for p in picks {
            taken[p] = true;
            protos.push(members[p]);
        }
        rest.extend(members.iter().zip(&taken).filter(|(_, &t)| !t).map(|(&i, _)| i));
    }
    let probe = rng
        .sample_indices(rest.len(), probe_size)
        .into_iter()
        .map(|i| rest[i])
        .collect();
    Ok((protos, probe))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(name: &str, per_class: usize, classes: usize) -> LabeledDataset {
        let mut train = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                train.push(Example {
                    tokens: vec![1, (c * 1000 + i) as u32],
                    label: c,
                });
            }
        }
        LabeledDataset {
            name: name.into(),
            class_names: (0..classes).map(|c| format!("c{c}")).collect(),
            train,
            val: Vec::new(),
            test: Vec::new(),
        }
    }

    #[test]
    fn single_dataset_always_chosen() {
        let d = dataset("a", 4, 2);
        let r = TaskRegistry::new(vec![&d]).unwrap();
        let mut rng = Rng::new(0);
        for _ in 0..20 {
            assert_eq!(r.sample_index(&mut rng), 0);
        }
    }

    #[test]
    fn sqrt_weights() {
        let a = dataset("a", 50, 2);
        let b = dataset("b", 200, 2);
        let r = TaskRegistry::new(vec![&a, &b]).unwrap();
        assert!((r.weights()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.weights()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_shot_episode() {
        let d = dataset("a", 5, 2);
        let ep = sample_episode(&d, 1, 1, &mut Rng::new(1)).unwrap();
        assert_eq!(ep.support.len(), 2);
        assert_eq!(ep.query.len(), 2);
        assert!(ep.support.iter().all(|s| !ep.query.contains(s)));
        ep.check().unwrap();
    }

    #[test]
    fn same_seed_same_episode() {
        let d = dataset("a", 10, 3);
        let a = sample_episode(&d, 2, 2, &mut Rng::new(5)).unwrap();
        let b = sample_episode(&d, 2, 2, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_names_class() {
        let d = dataset("a", 3, 2);
        let err = sample_episode(&d, 2, 2, &mut Rng::new(0)).unwrap_err().to_string();
        assert!(err.contains("a/c0"), "{err}");
    }

    #[test]
    fn subsample_sizes() {
        let d = dataset("a", 10, 3);
        let ep = sample_episode(&d, 4, 4, &mut Rng::new(0)).unwrap();
        let (p, q) = subsample_support(&ep, 2, 4, &mut Rng::new(1)).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(q.len(), 4);
        assert!(subsample_support(&ep, 4, 0, &mut Rng::new(1)).is_err());
        assert!(subsample_support(&ep, 4, 1, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn default_sizes_fill_support() {
        assert_eq!(default_subsample_sizes(4, 2), (2, 4));
        assert_eq!(default_subsample_sizes(16, 3), (8, 24));
        assert_eq!(default_subsample_sizes(3, 2), (2, 2));
        assert_eq!(default_subsample_sizes(1, 2), (1, 0));
    }
}
