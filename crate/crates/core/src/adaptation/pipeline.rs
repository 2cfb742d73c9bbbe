use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adaptation::film::FilmScope;
use crate::adaptation::net::{AdaptNet, AdaptNetConfig, HyperNet, HyperNetConfig};
use crate::encoder::{AdapterVars, BaseModel, EncoderConfig, ForwardOptions, ModelVars, Modulation, Vocab};
use crate::episodes::{Episode, Example};
use crate::error::{Error, Result};
use crate::proto::{log_probs_graph, prototypes_graph};
use crate::taskemb::{
    fim_diag_features, input_label_task_rep, mean_input_task_rep, FimConfig, TaskEmbedConfig, TaskEmbedNet,
};
use crate::tensor::{Graph, ParamStore, Rng, Tensor, Var};

/// Model variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Gradient features, GRU embeddings, [CLS]-only FiLM.
    Grad2Task,
    /// Stage-1 model trained for the stage-2 budget as well.
    PnLonger,
    /// Mean input embedding as the task representation.
    InputMean,
    /// Mean input embedding plus label-text embedding.
    InputLabel,
    /// FiLM on every token.
    AdaptAll,
    /// Adapter weights generated from the task embedding.
    Hypernet,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Grad2Task,
        Variant::PnLonger,
        Variant::InputMean,
        Variant::InputLabel,
        Variant::AdaptAll,
        Variant::Hypernet,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Grad2Task => "grad2task",
            Variant::PnLonger => "pn-longer",
            Variant::InputMean => "x",
            Variant::InputLabel => "x-and-y",
            Variant::AdaptAll => "adapt-all",
            Variant::Hypernet => "hypernet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|v| v.tag()).collect();
            Error::Config(format!("unknown variant {s:?}; valid: {}", names.join(", ")))
        })
    }

    pub fn uses_gradients(self) -> bool {
        matches!(self, Variant::Grad2Task | Variant::AdaptAll | Variant::Hypernet)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionerConfig {
    pub hidden_size: usize,
    pub embed_size: usize,
    pub gru_layers: usize,
    pub fim: FimConfig,
    pub normalize_features: bool,
    pub adapt_hidden_mult: usize,
    pub adapt_linear: bool,
    pub hyper_hidden: usize,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self {
            hidden_size: 32,
            embed_size: 16,
            gru_layers: 2,
            fim: FimConfig::default(),
            normalize_features: true,
            adapt_hidden_mult: 2,
            adapt_linear: false,
            hyper_hidden: 32,
        }
    }
}

/// Per-episode task information, computed before the stage-2 graph.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSignal {
    None,
    /// One feature vector per adapter.
    PerLayer(Vec<Vec<f64>>),
    /// One vector used at every adapter.
    Shared(Vec<f64>),
}

/// Stage-2 networks for one variant.
#[derive(Debug, Clone)]
pub struct Conditioner {
    pub variant: Variant,
    pub config: ConditionerConfig,
    pub task_net: Option<TaskEmbedNet>,
    pub adapt_net: Option<AdaptNet>,
    pub hyper: Option<HyperNet>,
}

impl Conditioner {
    pub fn new(variant: Variant, enc: &EncoderConfig, config: ConditionerConfig, rng: &mut Rng) -> Result<Self> {
        let n = enc.num_adapters();
        let task_net = if variant.uses_gradients() {
            let tc = TaskEmbedConfig {
                input_size: enc.adapter_param_count(),
                hidden_size: config.hidden_size,
                embed_size: config.embed_size,
                gru_layers: config.gru_layers,
            };
            Some(TaskEmbedNet::new(tc, &mut rng.child(1))?)
        } else {
            None
        };
        let embed_size = match variant {
            Variant::InputMean => enc.head_out_dim,
            Variant::InputLabel => 2 * enc.head_out_dim,
            _ => config.embed_size,
        };
        let adapt_net = match variant {
            Variant::PnLonger | Variant::Hypernet => None,
            _ => Some(AdaptNet::new(
                AdaptNetConfig {
                    num_adapters: n,
                    embed_size,
                    model_dim: enc.model_dim,
                    bottleneck: enc.adapter_bottleneck_dim,
                    hidden_mult: config.adapt_hidden_mult,
                    linear: config.adapt_linear,
                },
                &mut rng.child(2),
            )?),
        };
        let hyper = if variant == Variant::Hypernet {
            Some(HyperNet::new(
                HyperNetConfig {
                    num_adapters: n,
                    embed_size,
                    hidden: config.hyper_hidden,
                    model_dim: enc.model_dim,
                    bottleneck: enc.adapter_bottleneck_dim,
                },
                &mut rng.child(3),
            )?)
        } else {
            None
        };
        Ok(Self {
            variant,
            config,
            task_net,
            adapt_net,
            hyper,
        })
    }

    pub fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut v = Vec::new();
        if let Some(t) = &self.task_net {
            v.push(("taskemb", &t.params));
        }
        if let Some(a) = &self.adapt_net {
            v.push(("adapt", &a.params));
        }
        if let Some(h) = &self.hyper {
            v.push(("hyper", &h.params));
        }
        v
    }

    pub fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParamStore)> {
        let mut v = Vec::new();
        if let Some(t) = &mut self.task_net {
            v.push(("taskemb", &mut t.params));
        }
        if let Some(a) = &mut self.adapt_net {
            v.push(("adapt", &mut a.params));
        }
        if let Some(h) = &mut self.hyper {
            v.push(("hyper", &mut h.params));
        }
        v
    }

    /// Task signal for `episode`, read from its support set only.
    pub fn task_signal(
        &self,
        model: &BaseModel,
        vocab: Option<&Vocab>,
        episode: &Episode,
        rng: &mut Rng,
    ) -> Result<TaskSignal> {
        match self.variant {
            Variant::PnLonger => Ok(TaskSignal::None),
            Variant::InputMean => Ok(TaskSignal::Shared(mean_input_task_rep(model, episode)?)),
            Variant::InputLabel => {
                let vocab = vocab.ok_or_else(|| Error::Input("x-and-y variant needs the vocabulary".into()))?;
                Ok(TaskSignal::Shared(input_label_task_rep(model, vocab, episode)?))
            }
            _ => {
                let f = fim_diag_features(model, episode, &self.config.fim, rng)?;
                Ok(TaskSignal::PerLayer(f.inputs(self.config.normalize_features)))
            }
        }
    }

    /// Per-adapter task embeddings of one episode as plain vectors. Empty
    /// for variants without a task signal.
    pub fn embed_episode(
        &self,
        model: &BaseModel,
        vocab: Option<&Vocab>,
        episode: &Episode,
        rng: &mut Rng,
    ) -> Result<Vec<Vec<f64>>> {
        let signal = self.task_signal(model, vocab, episode, rng)?;
        let mut g = Graph::new();
        let vars = self.embeddings(&mut g, &signal, model.config.num_adapters())?;
        Ok(vars.iter().map(|&v| g.value(v).data().to_vec()).collect())
    }

    /// Per-adapter task embeddings on `g`.
    pub fn embeddings(&self, g: &mut Graph, signal: &TaskSignal, num_adapters: usize) -> Result<Vec<Var>> {
        match (signal, &self.task_net) {
            (TaskSignal::None, _) => Ok(Vec::new()),
            (TaskSignal::PerLayer(feats), Some(net)) => {
                if feats.len() != num_adapters {
                    return Err(Error::Input(format!(
                        "{} feature vectors for {num_adapters} adapters",
                        feats.len()
                    )));
                }
                net.embed_graph(g, feats)
            }
            (TaskSignal::Shared(v), _) => {
                let c = g.constant(Tensor::row(v.clone()))?;
                let e = g.stop_grad(c)?;
                Ok(vec![e; num_adapters])
            }
            (TaskSignal::PerLayer(_), None) => {
                Err(Error::Input(format!("variant {} takes no gradient features", self.variant)))
            }
        }
    }

    /// Base-model bindings for one episode. The hypernetwork variant swaps
    /// in generated adapter weights.
    pub fn bind_model(&self, g: &mut Graph, model: &BaseModel, evars: &[Var]) -> Result<ModelVars> {
        let mut vars = model.bind(g)?;
        if let Some(h) = &self.hyper {
            let (d, b) = (model.config.model_dim, model.config.adapter_bottleneck_dim);
            for (l, av) in vars.adapters.iter_mut().enumerate() {
                let r = h.residual_graph(g, l, evars[l])?;
                let mut off = 0;
                let mut piece = |g: &mut Graph, base: Var, shape: Vec<usize>| -> Result<Var> {
                    let n: usize = shape.iter().product();
                    let s = g.slice_cols(r, off, off + n)?;
                    off += n;
                    let s = g.reshape(s, shape)?;
                    g.add(base, s)
                };
                *av = AdapterVars {
                    down_w: piece(g, av.down_w, vec![d, b])?,
                    down_b: piece(g, av.down_b, vec![b])?,
                    up_w: piece(g, av.up_w, vec![b, d])?,
                    up_b: piece(g, av.up_b, vec![d])?,
                };
            }
        }
        Ok(vars)
    }

    /// Conditioned embedding of one sequence, `1 x head_out_dim`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        model: &BaseModel,
        vars: &ModelVars,
        evars: &[Var],
        tokens: &[u32],
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let scope = if self.variant == Variant::AdaptAll {
            FilmScope::AllTokens
        } else {
            FilmScope::Cls
        };
        match &self.adapt_net {
            Some(an) => {
                let mut gen = |g: &mut Graph, l: usize, cls: Var| an.gen_graph(g, l, evars[l], cls);
                let mut opts = ForwardOptions {
                    modulation: Modulation::Generate(&mut gen),
                    scope,
                    dropout,
                    use_adapters: true,
                };
                Ok(model.forward(g, vars, tokens, &mut opts)?.embedding)
            }
            None => {
                let mut opts = ForwardOptions {
                    dropout,
                    ..ForwardOptions::default()
                };
                Ok(model.forward(g, vars, tokens, &mut opts)?.embedding)
            }
        }
    }

    /// Query log-probabilities (`|Q| x C`) under the conditioned model, with
    /// prototypes built from the conditioned support embeddings.
    #[allow(clippy::too_many_arguments)]
    pub fn log_probs_graph(
        &self,
        g: &mut Graph,
        model: &BaseModel,
        signal: &TaskSignal,
        support: &[Example],
        query: &[Example],
        num_classes: usize,
        mut dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let evars = self.embeddings(g, signal, model.config.num_adapters())?;
        let vars = self.bind_model(g, model, &evars)?;
        let mut enc = |g: &mut Graph, xs: &[Example]| -> Result<Var> {
            let rows = xs
                .iter()
                .map(|x| self.encode_graph(g, model, &vars, &evars, &x.tokens, dropout.as_deref_mut()))
                .collect::<Result<Vec<_>>>()?;
            g.concat_rows(&rows)
        };
        let s = enc(g, support)?;
        let labels: Vec<usize> = support.iter().map(|e| e.label).collect();
        let protos = prototypes_graph(g, s, &labels, num_classes)?;
        let q = enc(g, query)?;
        log_probs_graph(g, q, protos)
    }

    /// Eval-mode query probabilities for `episode` given its task signal.
    pub fn predict(&self, model: &BaseModel, signal: &TaskSignal, episode: &Episode) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let lp = self.log_probs_graph(
            &mut g,
            model,
            signal,
            &episode.support,
            &episode.query,
            episode.num_classes,
            None,
        )?;
        Ok(probs_of(&g, lp))
    }
}

/// Full conditioned pipeline: task signal from the support set, then
/// conditioned prototypes and query probabilities.
pub fn adapted_predict(
    model: &BaseModel,
    cond: &Conditioner,
    vocab: Option<&Vocab>,
    episode: &Episode,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    let signal = cond.task_signal(model, vocab, episode, rng)?;
    cond.predict(model, &signal, episode)
}

/// Unconditioned ProtoNet query log-probabilities, `|Q| x C`.
pub fn base_log_probs_graph(
    g: &mut Graph,
    model: &BaseModel,
    support: &[Example],
    query: &[Example],
    num_classes: usize,
    mut dropout: Option<&mut Rng>,
) -> Result<Var> {
    let vars = model.bind(g)?;
    let mut enc = |g: &mut Graph, xs: &[Example]| -> Result<Var> {
        let rows = xs
            .iter()
            .map(|x| {
                let mut opts = ForwardOptions {
                    dropout: dropout.as_deref_mut(),
                    ..ForwardOptions::default()
                };
                Ok(model.forward(g, &vars, &x.tokens, &mut opts)?.embedding)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    };
    let s = enc(g, support)?;
    let labels: Vec<usize> = support.iter().map(|e| e.label).collect();
    let protos = prototypes_graph(g, s, &labels, num_classes)?;
    let q = enc(g, query)?;
    log_probs_graph(g, q, protos)
}

/// Unconditioned ProtoNet query probabilities.
pub fn base_predict(model: &BaseModel, episode: &Episode) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let lp = base_log_probs_graph(&mut g, model, &episode.support, &episode.query, episode.num_classes, None)?;
    Ok(probs_of(&g, lp))
}

pub(crate) fn probs_of(g: &Graph, lp: Var) -> Vec<Vec<f64>> {
    let v = g.value(lp);
    let (q, c) = v.dims2();
    (0..q).map(|i| (0..c).map(|j| v.get2(i, j).exp()).collect()).collect()
}
