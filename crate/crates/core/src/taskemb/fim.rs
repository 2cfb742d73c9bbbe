use serde::{Deserialize, Serialize};

use crate::encoder::{adapter_param_names, BaseModel, ForwardOptions};
use crate::episodes::{default_subsample_sizes, subsample_support, Episode, Example};
use crate::error::{Error, Result};
use crate::proto::{log_probs_graph, prototypes_graph};
use crate::tensor::{Graph, Rng, Var};

/// Per-adapter diagonal Fisher features.
#[derive(Debug, Clone, PartialEq)]
pub struct GradFeatures {
    /// `per_adapter[l]` is flattened in `adapter_param_names(l)` order.
    pub per_adapter: Vec<Vec<f64>>,
    pub rounds: usize,
}

impl GradFeatures {
    /// Each adapter's vector divided by `(mean entry + 1e-12)`.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.per_adapter
            .iter()
            .map(|v| {
                let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
                let s = 1.0 / (mean + 1e-12);
                v.iter().map(|x| x * s).collect()
            })
            .collect()
    }

    /// Network input: normalised or raw depending on `normalize`.
    pub fn inputs(&self, normalize: bool) -> Vec<Vec<f64>> {
        if normalize {
            self.normalized()
        } else {
            self.per_adapter.clone()
        }
    }

    /// Mean over adapters (all adapters share one shape).
    pub fn mean_pooled(&self, normalize: bool) -> Vec<f64> {
        let inputs = self.inputs(normalize);
        let n = inputs.len() as f64;
        let mut out = vec![0.0; inputs.first().map_or(0, Vec::len)];
        for v in &inputs {
            for (o, x) in out.iter_mut().zip(v) {
                *o += x / n;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FimConfig {
    /// Subsampling rounds averaged together.
    pub rounds: usize,
    /// Prototype examples per class; `None` uses `ceil(k/2)`.
    pub proto_per_class: Option<usize>,
    /// Probe subset size; `None` uses the rest of the support set.
    pub probe_size: Option<usize>,
}

impl Default for FimConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            proto_per_class: None,
            probe_size: None,
        }
    }
}

/// What one round drew: prototype examples, probe examples and the labels
/// sampled from the model for each probe.
#[derive(Debug, Clone, PartialEq)]
pub struct FimRound {
    pub proto: Vec<Example>,
    pub probe: Vec<Example>,
    pub sampled: Vec<usize>,
}

/// Support set sorted by `(label, tokens)`, so subsampling depends only on
/// the set's contents.
fn canonical(episode: &Episode) -> Episode {
    let mut ep = episode.clone();
    ep.support
        .sort_by(|a, b| a.label.cmp(&b.label).then_with(|| a.tokens.cmp(&b.tokens)));
    ep
}

fn is_adapter(name: &str) -> bool {
    name.starts_with("adapter")
}

/// Gradient of `log p(y'_j | x_j)` for every probe `j`, squared and summed,
/// then averaged over rounds. Labels `y'_j` are drawn from the model's own
/// predictive distribution. Runs in eval mode.
pub fn fim_diag_features(model: &BaseModel, episode: &Episode, cfg: &FimConfig, rng: &mut Rng) -> Result<GradFeatures> {
    fim_diag_features_traced(model, episode, cfg, rng).map(|(f, _)| f)
}

pub fn fim_diag_features_traced(
    model: &BaseModel,
    episode: &Episode,
    cfg: &FimConfig,
    rng: &mut Rng,
) -> Result<(GradFeatures, Vec<FimRound>)> {
    if cfg.rounds == 0 {
        return Err(Error::Input("FIM rounds must be >= 1".into()));
    }
    let ep = canonical(episode);
    let (dm, dp) = default_subsample_sizes(ep.shots, ep.num_classes);
    let m = cfg.proto_per_class.unwrap_or(dm);
    let probe_size = cfg.probe_size.unwrap_or(dp);
    let n_adapters = model.config.num_adapters();
    let p = model.config.adapter_param_count();
    let mut acc = vec![vec![0.0; p]; n_adapters];
    let mut trace = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let (proto_idx, mut probe_idx) = subsample_support(&ep, m, probe_size, rng)?;
        probe_idx.sort_unstable();
        let proto: Vec<Example> = proto_idx.iter().map(|&i| ep.support[i].clone()).collect();
        let probe: Vec<Example> = probe_idx.iter().map(|&i| ep.support[i].clone()).collect();
        let (sampled, sq) = round_sq_grads(model, &proto, &probe, ep.num_classes, Sampling::Draw(rng))?;
        for (a, s) in acc.iter_mut().zip(&sq) {
            for (x, y) in a.iter_mut().zip(s) {
                *x += y;
            }
        }
        trace.push(FimRound { proto, probe, sampled });
    }
    for a in &mut acc {
        a.iter_mut().for_each(|x| *x /= cfg.rounds as f64);
    }
    Ok((
        GradFeatures {
            per_adapter: acc,
            rounds: cfg.rounds,
        },
        trace,
    ))
}

pub enum Sampling<'a> {
    Draw(&'a mut Rng),
    Given(&'a [usize]),
}

/// One round: sampled labels and per-adapter sums of squared gradients.
pub fn round_sq_grads(
    model: &BaseModel,
    proto: &[Example],
    probe: &[Example],
    num_classes: usize,
    sampling: Sampling<'_>,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut g = Graph::new().watching(is_adapter);
    let vars = model.bind(&mut g)?;
    let encode = |g: &mut Graph, xs: &[Example]| -> Result<Var> {
        let mut rows = Vec::with_capacity(xs.len());
        for x in xs {
            rows.push(model.forward(g, &vars, &x.tokens, &mut ForwardOptions::default())?.embedding);
        }
        g.concat_rows(&rows)
    };
    let pe = encode(&mut g, proto)?;
    let proto_labels: Vec<usize> = proto.iter().map(|e| e.label).collect();
    let protos = prototypes_graph(&mut g, pe, &proto_labels, num_classes)?;
    let qe = encode(&mut g, probe)?;
    let lp = log_probs_graph(&mut g, qe, protos)?;

    let sampled: Vec<usize> = match sampling {
        Sampling::Given(ys) => {
            if ys.len() != probe.len() {
                return Err(Error::Input("one sampled label per probe required".into()));
            }
            ys.to_vec()
        }
        Sampling::Draw(rng) => {
            let lpv = g.value(lp);
            (0..probe.len())
                .map(|j| {
                    let probs: Vec<f64> = (0..num_classes).map(|c| lpv.get2(j, c).exp()).collect();
                    rng.categorical(&probs)
                })
                .collect()
        }
    };

    let n_adapters = model.config.num_adapters();
    let names: Vec<[String; 4]> = (0..n_adapters).map(adapter_param_names).collect();
    let adapter_vars: Vec<Vec<Var>> = names
        .iter()
        .map(|ns| {
            ns.iter()
                .map(|n| g.bound_var(&model.params, n).expect("adapter bound"))
                .collect()
        })
        .collect();
    let p = model.config.adapter_param_count();
    let mut sq = vec![vec![0.0; p]; n_adapters];
    for (j, &y) in sampled.iter().enumerate() {
        let lpj = g.pick(lp, &[(j, y)])?;
        let lpj = g.sum(lpj)?;
        let grads = g.backward(lpj)?;
        for (l, vars) in adapter_vars.iter().enumerate() {
            let mut off = 0;
            for &v in vars {
                let n = g.value(v).numel();
                if let Some(gr) = grads.wrt(v) {
                    for (k, x) in gr.iter().enumerate() {
                        sq[l][off + k] += x * x;
                    }
                }
                off += n;
            }
        }
    }
    if sq.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("fim features"));
    }
    Ok((sampled, sq))
}
