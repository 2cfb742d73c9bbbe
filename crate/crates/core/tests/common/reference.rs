//! Direct loop implementations used as oracles.
#![allow(dead_code)]

use grad2task::adaptation::{AdaptationParams, FilmScope};
use grad2task::encoder::{Activation, BaseModel};
use grad2task::tensor::ParamStore;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(store: &ParamStore, name: &str) -> Mat {
    let t = store.get(name).unwrap();
    let (r, c) = t.dims2();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn vec_of(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap().data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    matmul(x, w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(a, c)| a + c).collect())
        .collect()
}

pub fn vec_affine(x: &[f64], w: &Mat, b: &[f64]) -> Vec<f64> {
    affine(&vec![x.to_vec()], w, b).remove(0)
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(i, v)| (v - mu) / sd * g[i] + b[i]).collect()
        })
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// Adapter weights `(down.w, down.b, up.w, up.b)`.
pub struct Adapter {
    pub dw: Mat,
    pub db: Vec<f64>,
    pub uw: Mat,
    pub ub: Vec<f64>,
}

pub fn adapter(store: &ParamStore, l: usize) -> Adapter {
    let p = format!("adapter{l}");
    Adapter {
        dw: mat(store, &format!("{p}.down.w")),
        db: vec_of(store, &format!("{p}.down.b")),
        uw: mat(store, &format!("{p}.up.w")),
        ub: vec_of(store, &format!("{p}.up.b")),
    }
}

fn film_rows(x: &mut Mat, gamma: &[f64], beta: &[f64], scope: FilmScope) {
    let rows = match scope {
        FilmScope::Cls => 1,
        FilmScope::AllTokens => x.len(),
    };
    for r in x.iter_mut().take(rows) {
        for (i, v) in r.iter_mut().enumerate() {
            *v = *v * gamma[i] + beta[i];
        }
    }
}

pub fn adapter_apply(h: &Mat, a: &Adapter, act: Activation, film: Option<&AdaptationParams>, scope: FilmScope) -> Mat {
    let mut z: Mat = affine(h, &a.dw, &a.db)
        .into_iter()
        .map(|r| {
            r.into_iter()
                .map(|v| match act {
                    Activation::Gelu => gelu(v),
                    Activation::Relu => v.max(0.0),
                })
                .collect()
        })
        .collect();
    if let Some(f) = film {
        film_rows(&mut z, &f.gamma_mid, &f.beta_mid, scope);
    }
    let mut u = affine(&z, &a.uw, &a.ub);
    if let Some(f) = film {
        film_rows(&mut u, &f.gamma_out, &f.beta_out, scope);
    }
    add(h, &u)
}

/// Per-adapter FiLM callback: adapter index and the [CLS] row entering it.
pub type FilmFn<'a> = dyn FnMut(usize, &[f64]) -> Option<AdaptationParams> + 'a;

/// Reference encoder; `adapters` overrides the model's adapter weights.
pub fn forward(
    model: &BaseModel,
    adapters: &[Adapter],
    tokens: &[u32],
    film: &mut FilmFn<'_>,
    scope: FilmScope,
) -> (Mat, Vec<f64>) {
    let c = &model.config;
    let s = &model.params;
    let tok = mat(s, "emb.tok");
    let pos = mat(s, "emb.pos");
    let x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| tok[t as usize].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    let mut h = layer_norm(&x, &vec_of(s, "emb.ln.g"), &vec_of(s, "emb.ln.b"));
    let dh = c.model_dim / c.num_heads;
    for i in 0..c.num_layers {
        let p = |n: &str| format!("layer{i}.{n}");
        let q = affine(&h, &mat(s, &p("attn.wq")), &vec_of(s, &p("attn.bq")));
        let k = affine(&h, &mat(s, &p("attn.wk")), &vec_of(s, &p("attn.bk")));
        let v = affine(&h, &mat(s, &p("attn.wv")), &vec_of(s, &p("attn.bv")));
        let t = h.len();
        let mut cat = vec![vec![0.0; c.model_dim]; t];
        for hd in 0..c.num_heads {
            for a in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|b| (0..dh).map(|j| q[a][hd * dh + j] * k[b][hd * dh + j]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let w = softmax(&scores);
                for j in 0..dh {
                    cat[a][hd * dh + j] = (0..t).map(|b| w[b] * v[b][hd * dh + j]).sum();
                }
            }
        }
        let o = affine(&cat, &mat(s, &p("attn.wo")), &vec_of(s, &p("attn.bo")));
        let f0 = film(2 * i, &o[0]);
        let o = adapter_apply(&o, &adapters[2 * i], c.adapter_activation, f0.as_ref(), scope);
        h = layer_norm(&add(&h, &o), &vec_of(s, &p("ln1.g")), &vec_of(s, &p("ln1.b")));
        let f: Mat = affine(&h, &mat(s, &p("ffn.w1")), &vec_of(s, &p("ffn.b1")))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let f = affine(&f, &mat(s, &p("ffn.w2")), &vec_of(s, &p("ffn.b2")));
        let f1 = film(2 * i + 1, &f[0]);
        let f = adapter_apply(&f, &adapters[2 * i + 1], c.adapter_activation, f1.as_ref(), scope);
        h = layer_norm(&add(&h, &f), &vec_of(s, &p("ln2.g")), &vec_of(s, &p("ln2.b")));
    }
    let emb = vec_affine(&h[0], &mat(s, "head.w"), &vec_of(s, "head.b"));
    (h, emb)
}

pub fn base_adapters(model: &BaseModel) -> Vec<Adapter> {
    (0..model.config.num_adapters()).map(|l| adapter(&model.params, l)).collect()
}

pub fn plain_embedding(model: &BaseModel, tokens: &[u32]) -> Vec<f64> {
    forward(model, &base_adapters(model), tokens, &mut |_, _| None, FilmScope::Cls).1
}

/// Stacked GRU with shared weights over the sequence, then the output head.
pub fn gru_embed(store: &ParamStore, layers: usize, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut state: Vec<Vec<f64>> = (0..layers).map(|l| vec_of(store, &format!("gru{l}.h0"))).collect();
    let hs = state[0].len();
    let mut out = Vec::new();
    for x in inputs {
        let mut x = x.clone();
        for l in 0..layers {
            let gi = vec_affine(&x, &mat(store, &format!("gru{l}.w_i")), &vec_of(store, &format!("gru{l}.b_i")));
            let gh = vec_affine(&state[l], &mat(store, &format!("gru{l}.w_h")), &vec_of(store, &format!("gru{l}.b_h")));
            let mut h = vec![0.0; hs];
            for j in 0..hs {
                let r = sigmoid(gi[j] + gh[j]);
                let z = sigmoid(gi[hs + j] + gh[hs + j]);
                let n = (gi[2 * hs + j] + r * gh[2 * hs + j]).tanh();
                h[j] = (1.0 - z) * n + z * state[l][j];
            }
            state[l] = h.clone();
            x = h;
        }
        out.push(vec_affine(&x, &mat(store, "out.w"), &vec_of(store, "out.b")));
    }
    out
}

/// One-hidden-layer tanh perceptron per FiLM head; γ heads get +1.
pub fn adapt_net_params(store: &ParamStore, l: usize, e: &[f64], cls: &[f64], linear: bool) -> AdaptationParams {
    let x: Vec<f64> = e.iter().chain(cls).cloned().collect();
    let head = |name: &str, plus_one: bool| -> Vec<f64> {
        let p = format!("adapt{l}.{name}");
        let y = if linear {
            vec_affine(&x, &mat(store, &format!("{p}.w")), &vec_of(store, &format!("{p}.b")))
        } else {
            let h: Vec<f64> = vec_affine(&x, &mat(store, &format!("{p}.w1")), &vec_of(store, &format!("{p}.b1")))
                .into_iter()
                .map(f64::tanh)
                .collect();
            vec_affine(&h, &mat(store, &format!("{p}.w2")), &vec_of(store, &format!("{p}.b2")))
        };
        if plus_one {
            y.into_iter().map(|v| v + 1.0).collect()
        } else {
            y
        }
    };
    AdaptationParams {
        gamma_mid: head("gamma_mid", true),
        beta_mid: head("beta_mid", false),
        gamma_out: head("gamma_out", true),
        beta_out: head("beta_out", false),
    }
}

/// Base adapter weights plus the hypernetwork residual for `e`.
pub fn hyper_adapter(model: &BaseModel, hyper: &ParamStore, l: usize, e: &[f64]) -> Adapter {
    let h: Vec<f64> = vec_affine(e, &mat(hyper, &format!("hyper{l}.w1")), &vec_of(hyper, &format!("hyper{l}.b1")))
        .into_iter()
        .map(f64::tanh)
        .collect();
    let r = vec_affine(&h, &mat(hyper, &format!("hyper{l}.w2")), &vec_of(hyper, &format!("hyper{l}.b2")));
    let base = adapter(&model.params, l);
    let (d, b) = (model.config.model_dim, model.config.adapter_bottleneck_dim);
    let mut off = 0;
    let mut take = |n: usize| {
        let s = r[off..off + n].to_vec();
        off += n;
        s
    };
    let dw = take(d * b);
    let db = take(b);
    let uw = take(b * d);
    let ub = take(d);
    let addm = |m: &Mat, flat: &[f64]| -> Mat {
        let c = m[0].len();
        m.iter()
            .enumerate()
            .map(|(i, row)| row.iter().enumerate().map(|(j, v)| v + flat[i * c + j]).collect())
            .collect()
    };
    let addv = |v: &[f64], flat: &[f64]| -> Vec<f64> { v.iter().zip(flat).map(|(a, b)| a + b).collect() };
    Adapter {
        dw: addm(&base.dw, &dw),
        db: addv(&base.db, &db),
        uw: addm(&base.uw, &uw),
        ub: addv(&base.ub, &ub),
    }
}

/// Softmax over negated squared distances to class means.
pub fn proto_probs(support: &[(Vec<f64>, usize)], query: &[Vec<f64>], classes: usize) -> Vec<Vec<f64>> {
    let d = support[0].0.len();
    let mut protos = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (x, y) in support {
        counts[*y] += 1;
        for i in 0..d {
            protos[*y][i] += x[i];
        }
    }
    for (p, n) in protos.iter_mut().zip(&counts) {
        for v in p.iter_mut() {
            *v /= *n as f64;
        }
    }
    query
        .iter()
        .map(|q| {
            let logits: Vec<f64> = protos
                .iter()
                .map(|p| -p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect();
            softmax(&logits)
        })
        .collect()
}
