use serde::{Deserialize, Serialize};

use crate::adaptation::film::{AdaptationParams, FilmVars};
use crate::encoder::linear;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptNetConfig {
    pub num_adapters: usize,
    pub embed_size: usize,
    pub model_dim: usize,
    pub bottleneck: usize,
    /// Hidden width as a multiple of the input size.
    pub hidden_mult: usize,
    /// Plain affine maps instead of one-hidden-layer perceptrons.
    pub linear: bool,
}

impl AdaptNetConfig {
    pub fn input_size(&self) -> usize {
        self.embed_size + self.model_dim
    }
}

pub const FILM_HEADS: [&str; 4] = ["gamma_mid", "beta_mid", "gamma_out", "beta_out"];

/// Per-adapter perceptrons mapping `[e_task, cls]` to FiLM parameters.
/// Final layers start at zero, so a fresh net yields the identity modulation.
#[derive(Debug, Clone)]
pub struct AdaptNet {
    pub config: AdaptNetConfig,
    pub params: ParamStore,
}

impl AdaptNet {
    pub fn new(config: AdaptNetConfig, rng: &mut Rng) -> Result<Self> {
        let c = &config;
        if c.num_adapters == 0 || c.embed_size == 0 || c.model_dim == 0 || c.bottleneck == 0 {
            return Err(Error::Config(format!("adaptation net sizes must be positive: {c:?}")));
        }
        if !c.linear && c.hidden_mult == 0 {
            return Err(Error::Config("adapt_hidden_mult must be >= 1".into()));
        }
        let inp = c.input_size();
        let hid = c.hidden_mult * inp;
        let mut s = ParamStore::new();
        for l in 0..c.num_adapters {
            for (k, head) in FILM_HEADS.iter().enumerate() {
                let out = if k < 2 { c.bottleneck } else { c.model_dim };
                let p = format!("adapt{l}.{head}");
                if c.linear {
                    s.insert(format!("{p}.w"), Tensor::zeros(vec![inp, out]))?;
                    s.insert(format!("{p}.b"), Tensor::zeros(vec![out]))?;
                } else {
                    s.insert_normal(format!("{p}.w1"), vec![inp, hid], 1.0 / (inp as f64).sqrt(), rng)?;
                    s.insert(format!("{p}.b1"), Tensor::zeros(vec![hid]))?;
                    s.insert(format!("{p}.w2"), Tensor::zeros(vec![hid, out]))?;
                    s.insert(format!("{p}.b2"), Tensor::zeros(vec![out]))?;
                }
            }
        }
        Ok(Self { config, params: s })
    }

    /// FiLM parameters for adapter `l` from task embedding `e` (`1 x E`)
    /// and the [CLS] activation entering that adapter (`1 x model_dim`).
    pub fn gen_graph(&self, g: &mut Graph, l: usize, e: Var, cls: Var) -> Result<FilmVars> {
        let c = &self.config;
        if l >= c.num_adapters {
            return Err(Error::Input(format!("adapter index {l} >= {}", c.num_adapters)));
        }
        let (ew, cw) = (g.value(e).numel(), g.value(cls).numel());
        if ew != c.embed_size || cw != c.model_dim {
            return Err(Error::Shape {
                op: "gen_adapt_params",
                left: vec![c.embed_size, c.model_dim],
                right: vec![ew, cw],
            });
        }
        let e = g.reshape(e, vec![1, ew])?;
        let cls = g.reshape(cls, vec![1, cw])?;
        let x = g.concat_cols(&[e, cls])?;
        let mut outs = [x; 4];
        for (k, head) in FILM_HEADS.iter().enumerate() {
            let p = format!("adapt{l}.{head}");
            let y = if c.linear {
                let w = g.param(&self.params, &format!("{p}.w"))?;
                let b = g.param(&self.params, &format!("{p}.b"))?;
                linear(g, x, w, b)?
            } else {
                let w1 = g.param(&self.params, &format!("{p}.w1"))?;
                let b1 = g.param(&self.params, &format!("{p}.b1"))?;
                let w2 = g.param(&self.params, &format!("{p}.w2"))?;
                let b2 = g.param(&self.params, &format!("{p}.b2"))?;
                let h = linear(g, x, w1, b1)?;
                let h = g.tanh(h)?;
                linear(g, h, w2, b2)?
            };
            outs[k] = if k % 2 == 0 {
                let n = g.value(y).numel();
                let one = g.constant(Tensor::full(vec![1, n], 1.0))?;
                g.add(y, one)?
            } else {
                y
            };
        }
        Ok(FilmVars {
            gamma_mid: outs[0],
            beta_mid: outs[1],
            gamma_out: outs[2],
            beta_out: outs[3],
        })
    }

    pub fn gen_adapt_params(&self, l: usize, e: &[f64], cls: &[f64]) -> Result<AdaptationParams> {
        let mut g = Graph::new();
        let ev = g.constant(Tensor::row(e.to_vec()))?;
        let cv = g.constant(Tensor::row(cls.to_vec()))?;
        let f = self.gen_graph(&mut g, l, ev, cv)?;
        Ok(AdaptationParams::from_vars(&g, &f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperNetConfig {
    pub num_adapters: usize,
    pub embed_size: usize,
    pub hidden: usize,
    pub model_dim: usize,
    pub bottleneck: usize,
}

impl HyperNetConfig {
    pub fn output_size(&self) -> usize {
        let (d, b) = (self.model_dim, self.bottleneck);
        d * b + b + b * d + d
    }
}

/// Per-adapter networks producing a residual on the adapter weights:
/// `α'_l = α_l + hnet_l(e_l)`. Zero output layers reproduce the base adapters.
#[derive(Debug, Clone)]
pub struct HyperNet {
    pub config: HyperNetConfig,
    pub params: ParamStore,
}

impl HyperNet {
    pub fn new(config: HyperNetConfig, rng: &mut Rng) -> Result<Self> {
        let c = &config;
        if c.num_adapters == 0 || c.embed_size == 0 || c.hidden == 0 {
            return Err(Error::Config(format!("hypernetwork sizes must be positive: {c:?}")));
        }
        let mut s = ParamStore::new();
        for l in 0..c.num_adapters {
            s.insert_normal(format!("hyper{l}.w1"), vec![c.embed_size, c.hidden], 1.0 / (c.embed_size as f64).sqrt(), rng)?;
            s.insert(format!("hyper{l}.b1"), Tensor::zeros(vec![c.hidden]))?;
            s.insert(format!("hyper{l}.w2"), Tensor::zeros(vec![c.hidden, c.output_size()]))?;
            s.insert(format!("hyper{l}.b2"), Tensor::zeros(vec![c.output_size()]))?;
        }
        Ok(Self { config, params: s })
    }

    /// Flat residual for adapter `l`, `1 x output_size`.
    pub fn residual_graph(&self, g: &mut Graph, l: usize, e: Var) -> Result<Var> {
        let c = &self.config;
        if l >= c.num_adapters {
            return Err(Error::Input(format!("adapter index {l} >= {}", c.num_adapters)));
        }
        let n = g.value(e).numel();
        if n != c.embed_size {
            return Err(Error::Shape {
                op: "hypernet",
                left: vec![c.embed_size],
                right: vec![n],
            });
        }
        let e = g.reshape(e, vec![1, n])?;
        let w1 = g.param(&self.params, &format!("hyper{l}.w1"))?;
        let b1 = g.param(&self.params, &format!("hyper{l}.b1"))?;
        let w2 = g.param(&self.params, &format!("hyper{l}.w2"))?;
        let b2 = g.param(&self.params, &format!("hyper{l}.b2"))?;
        let h = linear(g, e, w1, b1)?;
        let h = g.tanh(h)?;
        linear(g, h, w2, b2)
    }
}
