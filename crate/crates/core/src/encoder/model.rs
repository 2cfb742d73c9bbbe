use serde::{Deserialize, Serialize};

use crate::adaptation::{film_apply, AdaptationParams, FilmScope, FilmVars};
use crate::encoder::vocab::CLS;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Rng, Tensor, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub adapter_bottleneck_dim: usize,
    pub head_out_dim: usize,
    pub dropout_rate: f64,
    pub adapter_activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_seq_len: 32,
            model_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 64,
            adapter_bottleneck_dim: 8,
            head_out_dim: 32,
            dropout_rate: 0.1,
            adapter_activation: Activation::Gelu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.head_out_dim == 0 || self.adapter_bottleneck_dim == 0 || self.ffn_dim == 0 {
            return bad("head_out_dim, adapter_bottleneck_dim and ffn_dim must be > 0".into());
        }
        if self.num_layers == 0 || self.max_seq_len == 0 {
            return bad("num_layers and max_seq_len must be > 0".into());
        }
        if self.vocab_size <= CLS as usize {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Two adapters per transformer layer.
    pub fn num_adapters(&self) -> usize {
        2 * self.num_layers
    }

    /// Flattened parameter count of one adapter.
    pub fn adapter_param_count(&self) -> usize {
        let (d, b) = (self.model_dim, self.adapter_bottleneck_dim);
        d * b + b + b * d + d
    }
}

/// Which part of Θ a base-model parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Transformer weights and embeddings (θ).
    Encoder,
    /// Layer-norm gains and biases.
    LayerNorm,
    /// Bottleneck adapters (α).
    Adapter,
    /// Output projection (ω).
    Head,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("adapter") {
        ParamGroup::Adapter
    } else if name.starts_with("head.") {
        ParamGroup::Head
    } else if name.contains(".ln") {
        ParamGroup::LayerNorm
    } else {
        ParamGroup::Encoder
    }
}

/// Adapters, layer norms and head: the set trained in the first stage.
pub fn is_stage1_param(name: &str) -> bool {
    param_group(name) != ParamGroup::Encoder
}

pub fn adapter_prefix(l: usize) -> String {
    format!("adapter{l}")
}

/// Parameter names of adapter `l`, in flattening order.
pub fn adapter_param_names(l: usize) -> [String; 4] {
    let p = adapter_prefix(l);
    [
        format!("{p}.down.w"),
        format!("{p}.down.b"),
        format!("{p}.up.w"),
        format!("{p}.up.b"),
    ]
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub down_w: Var,
    pub down_b: Var,
    pub up_w: Var,
    pub up_b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

/// Base-model parameters bound on a graph.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub tok: Var,
    pub pos: Var,
    pub emb_ln_g: Var,
    pub emb_ln_b: Var,
    pub layers: Vec<LayerVars>,
    pub adapters: Vec<AdapterVars>,
    pub head_w: Var,
    pub head_b: Var,
}

/// Per-adapter FiLM source for a forward pass.
pub enum Modulation<'a> {
    None,
    Fixed(&'a [FilmVars]),
    /// Called with `(graph, adapter index, [CLS] row of the adapter input)`.
    Generate(&'a mut dyn FnMut(&mut Graph, usize, Var) -> Result<FilmVars>),
}

pub struct ForwardOptions<'a> {
    pub modulation: Modulation<'a>,
    pub scope: FilmScope,
    /// Training-mode dropout stream; `None` is eval mode.
    pub dropout: Option<&'a mut Rng>,
    pub use_adapters: bool,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            modulation: Modulation::None,
            scope: FilmScope::Cls,
            dropout: None,
            use_adapters: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Final hidden states, `T x model_dim`.
    pub hidden: Var,
    /// Head-projected [CLS] embedding, `1 x head_out_dim`.
    pub embedding: Var,
}

/// Transformer encoder with bottleneck adapters and a linear head.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn affine_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x, LAYER_NORM_EPS)?;
    let n = g.mul_row(n, gain)?;
    g.add_row(n, bias)
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask = (0..g.value(x).numel())
                .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
                .collect();
            g.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

impl BaseModel {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d, f, b) = (c.model_dim, c.ffn_dim, c.adapter_bottleneck_dim);
        let mut s = ParamStore::new();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        s.insert_normal("emb.tok", vec![c.vocab_size, d], 1.0, rng)?;
        s.insert_normal("emb.pos", vec![c.max_seq_len, d], 1.0, rng)?;
        s.insert("emb.ln.g", Tensor::full(vec![d], 1.0))?;
        s.insert("emb.ln.b", Tensor::zeros(vec![d]))?;
        for i in 0..c.num_layers {
            let p = format!("layer{i}");
            for m in ["q", "k", "v", "o"] {
                s.insert_normal(format!("{p}.attn.w{m}"), vec![d, d], inv(d), rng)?;
                s.insert(format!("{p}.attn.b{m}"), Tensor::zeros(vec![d]))?;
            }
            s.insert(format!("{p}.ln1.g"), Tensor::full(vec![d], 1.0))?;
            s.insert(format!("{p}.ln1.b"), Tensor::zeros(vec![d]))?;
            s.insert_normal(format!("{p}.ffn.w1"), vec![d, f], inv(d), rng)?;
            s.insert(format!("{p}.ffn.b1"), Tensor::zeros(vec![f]))?;
            s.insert_normal(format!("{p}.ffn.w2"), vec![f, d], inv(f), rng)?;
            s.insert(format!("{p}.ffn.b2"), Tensor::zeros(vec![d]))?;
            s.insert(format!("{p}.ln2.g"), Tensor::full(vec![d], 1.0))?;
            s.insert(format!("{p}.ln2.b"), Tensor::zeros(vec![d]))?;
        }
        for l in 0..c.num_adapters() {
            let [dw, db, uw, ub] = adapter_param_names(l);
            s.insert_normal(dw, vec![d, b], inv(d), rng)?;
            s.insert(db, Tensor::zeros(vec![b]))?;
            s.insert(uw, Tensor::zeros(vec![b, d]))?;
            s.insert(ub, Tensor::zeros(vec![d]))?;
        }
        s.insert_normal("head.w", vec![d, c.head_out_dim], inv(d), rng)?;
        s.insert("head.b", Tensor::zeros(vec![c.head_out_dim]))?;
        Ok(Self { config, params: s })
    }

    /// Bind every parameter on `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<ModelVars> {
        let s = &self.params;
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for i in 0..self.config.num_layers {
            let mut p = |n: &str| g.param(s, &format!("layer{i}.{n}"));
            layers.push(LayerVars {
                wq: p("attn.wq")?,
                bq: p("attn.bq")?,
                wk: p("attn.wk")?,
                bk: p("attn.bk")?,
                wv: p("attn.wv")?,
                bv: p("attn.bv")?,
                wo: p("attn.wo")?,
                bo: p("attn.bo")?,
                ln1_g: p("ln1.g")?,
                ln1_b: p("ln1.b")?,
                w1: p("ffn.w1")?,
                b1: p("ffn.b1")?,
                w2: p("ffn.w2")?,
                b2: p("ffn.b2")?,
                ln2_g: p("ln2.g")?,
                ln2_b: p("ln2.b")?,
            });
        }
        let mut adapters = Vec::with_capacity(self.config.num_adapters());
        for l in 0..self.config.num_adapters() {
            let [dw, db, uw, ub] = adapter_param_names(l);
            adapters.push(AdapterVars {
                down_w: g.param(s, &dw)?,
                down_b: g.param(s, &db)?,
                up_w: g.param(s, &uw)?,
                up_b: g.param(s, &ub)?,
            });
        }
        Ok(ModelVars {
            tok: g.param(s, "emb.tok")?,
            pos: g.param(s, "emb.pos")?,
            emb_ln_g: g.param(s, "emb.ln.g")?,
            emb_ln_b: g.param(s, "emb.ln.b")?,
            layers,
            adapters,
            head_w: g.param(s, "head.w")?,
            head_b: g.param(s, "head.b")?,
        })
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if tokens[0] != CLS {
            return Err(Error::Input(format!(
                "position 0 must be [CLS] ({CLS}), found {}",
                tokens[0]
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "unknown token id {bad} (vocab size {})",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Full forward pass for one sequence.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        tokens: &[u32],
        opts: &mut ForwardOptions<'_>,
    ) -> Result<EncoderOutput> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let t = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.gather_rows(vars.tok, &ids)?;
        let pos = g.gather_rows(vars.pos, &positions)?;
        let x = g.add(tok, pos)?;
        let x = affine_norm(g, x, vars.emb_ln_g, vars.emb_ln_b)?;
        let mut h = dropout(g, x, c.dropout_rate, opts.dropout.as_deref_mut())?;

        let dh = c.model_dim / c.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (i, lv) in vars.layers.iter().enumerate() {
            let q = linear(g, h, lv.wq, lv.bq)?;
            let k = linear(g, h, lv.wk, lv.bk)?;
            let v = linear(g, h, lv.wv, lv.bv)?;
            let mut heads = Vec::with_capacity(c.num_heads);
            for hd in 0..c.num_heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice_cols(q, lo, hi)?;
                let kh = g.slice_cols(k, lo, hi)?;
                let vh = g.slice_cols(v, lo, hi)?;
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, scale)?;
                let a = g.softmax(s)?;
                heads.push(g.matmul(a, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let o = linear(g, cat, lv.wo, lv.bo)?;
            let o = dropout(g, o, c.dropout_rate, opts.dropout.as_deref_mut())?;
            let o = self.adapter_block(g, vars, 2 * i, o, opts)?;
            let r = g.add(h, o)?;
            h = affine_norm(g, r, lv.ln1_g, lv.ln1_b)?;

            let f = linear(g, h, lv.w1, lv.b1)?;
            let f = g.gelu(f)?;
            let f = linear(g, f, lv.w2, lv.b2)?;
            let f = dropout(g, f, c.dropout_rate, opts.dropout.as_deref_mut())?;
            let f = self.adapter_block(g, vars, 2 * i + 1, f, opts)?;
            let r = g.add(h, f)?;
            h = affine_norm(g, r, lv.ln2_g, lv.ln2_b)?;
        }
        let cls = g.slice_rows(h, 0, 1)?;
        let embedding = linear(g, cls, vars.head_w, vars.head_b)?;
        Ok(EncoderOutput { hidden: h, embedding })
    }

    fn adapter_block(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        l: usize,
        h: Var,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<Var> {
        if !opts.use_adapters {
            return Ok(h);
        }
        let film = match &mut opts.modulation {
            Modulation::None => None,
            Modulation::Fixed(params) => Some(*params.get(l).ok_or_else(|| {
                Error::Input(format!("no adaptation parameters for adapter {l}"))
            })?),
            Modulation::Generate(gen) => {
                let cls = g.slice_rows(h, 0, 1)?;
                Some(gen(g, l, cls)?)
            }
        };
        adapter_forward(
            g,
            &vars.adapters[l],
            h,
            self.config.adapter_activation,
            film.as_ref(),
            opts.scope,
        )
    }

    /// Eval-mode [CLS] embedding.
    pub fn encode(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g)?;
        let out = self.forward(&mut g, &vars, tokens, &mut ForwardOptions::default())?;
        Ok(g.value(out.embedding).data().to_vec())
    }

    /// Eval-mode embedding with fixed per-adapter FiLM parameters.
    pub fn encode_adapted(
        &self,
        tokens: &[u32],
        adapt: &[AdaptationParams],
        scope: FilmScope,
    ) -> Result<Vec<f64>> {
        if adapt.len() != self.config.num_adapters() {
            return Err(Error::Input(format!(
                "adaptation supplied for {} adapters, model has {}",
                adapt.len(),
                self.config.num_adapters()
            )));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g)?;
        let films = adapt
            .iter()
            .map(|a| a.to_vars(&mut g))
            .collect::<Result<Vec<_>>>()?;
        let mut opts = ForwardOptions {
            modulation: Modulation::Fixed(&films),
            scope,
            ..ForwardOptions::default()
        };
        let out = self.forward(&mut g, &vars, tokens, &mut opts)?;
        Ok(g.value(out.embedding).data().to_vec())
    }

    /// Flattened parameters of adapter `l`, in [`adapter_param_names`] order.
    pub fn adapter_flat(&self, l: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.config.adapter_param_count());
        for n in adapter_param_names(l) {
            out.extend_from_slice(self.params.get(&n)?.data());
        }
        Ok(out)
    }
}

/// `h + film_out(up(film_mid(act(down(h)))))`.
pub fn adapter_forward(
    g: &mut Graph,
    av: &AdapterVars,
    h: Var,
    act: Activation,
    film: Option<&FilmVars>,
    scope: FilmScope,
) -> Result<Var> {
    let z = linear(g, h, av.down_w, av.down_b)?;
    let mut a = match act {
        Activation::Relu => g.relu(z)?,
        Activation::Gelu => g.gelu(z)?,
    };
    if let Some(f) = film {
        a = film_apply(g, a, f.gamma_mid, f.beta_mid, scope)?;
    }
    let mut u = linear(g, a, av.up_w, av.up_b)?;
    if let Some(f) = film {
        u = film_apply(g, u, f.gamma_out, f.beta_out, scope)?;
    }
    g.add(h, u)
}
