use serde::{Deserialize, Serialize};

use crate::encoder::linear;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedConfig {
    pub input_size: usize,
    pub hidden_size: usize,
    pub embed_size: usize,
    pub gru_layers: usize,
}

impl TaskEmbedConfig {
    pub fn new(input_size: usize) -> Self {
        Self {
            input_size,
            hidden_size: 32,
            embed_size: 16,
            gru_layers: 2,
        }
    }
}

/// Stacked GRU over the per-adapter feature sequence, with learned initial
/// states and a linear output head. The same weights run at every step.
#[derive(Debug, Clone)]
pub struct TaskEmbedNet {
    pub config: TaskEmbedConfig,
    pub params: ParamStore,
}

struct GruVars {
    w_i: Var,
    b_i: Var,
    w_h: Var,
    b_h: Var,
    h0: Var,
}

pub fn gru_param_names(layer: usize) -> [String; 5] {
    ["w_i", "b_i", "w_h", "b_h", "h0"].map(|n| format!("gru{layer}.{n}"))
}

impl TaskEmbedNet {
    pub fn new(config: TaskEmbedConfig, rng: &mut Rng) -> Result<Self> {
        let c = &config;
        if c.input_size == 0 || c.hidden_size == 0 || c.embed_size == 0 || c.gru_layers == 0 {
            return Err(Error::Config(format!("task embedding sizes must be positive: {c:?}")));
        }
        let h = c.hidden_size;
        let mut s = ParamStore::new();
        for layer in 0..c.gru_layers {
            let inp = if layer == 0 { c.input_size } else { h };
            let [w_i, b_i, w_h, b_h, h0] = gru_param_names(layer);
            s.insert_normal(w_i, vec![inp, 3 * h], 1.0 / (inp as f64).sqrt(), rng)?;
            s.insert(b_i, Tensor::zeros(vec![3 * h]))?;
            s.insert_normal(w_h, vec![h, 3 * h], 1.0 / (h as f64).sqrt(), rng)?;
            s.insert(b_h, Tensor::zeros(vec![3 * h]))?;
            s.insert(h0, Tensor::zeros(vec![h]))?;
        }
        s.insert_normal("out.w", vec![h, c.embed_size], 1.0 / (h as f64).sqrt(), rng)?;
        s.insert("out.b", Tensor::zeros(vec![c.embed_size]))?;
        Ok(Self { config, params: s })
    }

    /// One task embedding per input vector, built on `g`.
    pub fn embed_graph(&self, g: &mut Graph, inputs: &[Vec<f64>]) -> Result<Vec<Var>> {
        let c = &self.config;
        if inputs.is_empty() {
            return Err(Error::Input("task embedding needs at least one feature vector".into()));
        }
        if let Some(bad) = inputs.iter().find(|v| v.len() != c.input_size) {
            return Err(Error::Input(format!(
                "feature vector has length {}, network expects {}",
                bad.len(),
                c.input_size
            )));
        }
        let mut layers = Vec::with_capacity(c.gru_layers);
        for layer in 0..c.gru_layers {
            let [w_i, b_i, w_h, b_h, h0] = gru_param_names(layer);
            let h0 = g.param(&self.params, &h0)?;
            layers.push(GruVars {
                w_i: g.param(&self.params, &w_i)?,
                b_i: g.param(&self.params, &b_i)?,
                w_h: g.param(&self.params, &w_h)?,
                b_h: g.param(&self.params, &b_h)?,
                h0: g.reshape(h0, vec![1, c.hidden_size])?,
            });
        }
        let out_w = g.param(&self.params, "out.w")?;
        let out_b = g.param(&self.params, "out.b")?;
        let mut state: Vec<Var> = layers.iter().map(|l| l.h0).collect();
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            let x = g.constant(Tensor::row(x.clone()))?;
            let mut x = g.stop_grad(x)?;
            for (layer, lv) in layers.iter().enumerate() {
                state[layer] = gru_cell(g, lv, x, state[layer], c.hidden_size)?;
                x = state[layer];
            }
            out.push(linear(g, x, out_w, out_b)?);
        }
        Ok(out)
    }

    /// Plain-value embeddings, one per input vector.
    pub fn embed_layers(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = self.embed_graph(&mut g, inputs)?;
        Ok(vars.iter().map(|&v| g.value(v).data().to_vec()).collect())
    }
}

/// `r = σ(W_ir x + b_ir + W_hr h + b_hr)`, `z` likewise,
/// `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
fn gru_cell(g: &mut Graph, v: &GruVars, x: Var, h: Var, hs: usize) -> Result<Var> {
    let gi = linear(g, x, v.w_i, v.b_i)?;
    let gh = linear(g, h, v.w_h, v.b_h)?;
    let part = |g: &mut Graph, a: Var, k: usize| g.slice_cols(a, k * hs, (k + 1) * hs);
    let (ir, iz, inn) = (part(g, gi, 0)?, part(g, gi, 1)?, part(g, gi, 2)?);
    let (hr, hz, hn) = (part(g, gh, 0)?, part(g, gh, 1)?, part(g, gh, 2)?);
    let r = g.add(ir, hr)?;
    let r = g.sigmoid(r)?;
    let z = g.add(iz, hz)?;
    let z = g.sigmoid(z)?;
    let rn = g.mul(r, hn)?;
    let n = g.add(inn, rn)?;
    let n = g.tanh(n)?;
    let d = g.sub(h, n)?;
    let zd = g.mul(z, d)?;
    g.add(n, zd)
}
