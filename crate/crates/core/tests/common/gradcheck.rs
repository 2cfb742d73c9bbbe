//! Central-difference checks of the episode loss gradients.

use std::collections::HashMap;

use grad2task::adaptation::{base_log_probs_graph, Variant};
use grad2task::encoder::{adapter_param_names, is_stage1_param, BaseModel};
use grad2task::episodes::{Episode, Example};
use grad2task::proto::nll_graph;
use grad2task::tensor::{Graph, ParamStore, Rng};
use grad2task::trainer::{stage1_episode, stage2_episode};

use super::*;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Central differences over every trainable scalar of `store`, compared
/// with `analytic` (keyed by parameter name). Returns the worst error.
pub fn check_store(
    label: &str,
    store: &mut ParamStore,
    analytic: &HashMap<String, Vec<f64>>,
    loss: &mut dyn FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for name in store.trainable_names() {
        let g = analytic
            .get(&name)
            .unwrap_or_else(|| panic!("{label}: no analytic gradient for {name}"));
        let n = store.get(&name).unwrap().numel();
        assert_eq!(g.len(), n, "{label}: gradient size of {name}");
        for i in 0..n {
            let x0 = store.get(&name).unwrap().data()[i];
            store.get_mut(&name).unwrap().data_mut()[i] = x0 + H;
            let lp = loss(store);
            store.get_mut(&name).unwrap().data_mut()[i] = x0 - H;
            let lm = loss(store);
            store.get_mut(&name).unwrap().data_mut()[i] = x0;
            let fd = (lp - lm) / (2.0 * H);
            let e = rel_err(g[i], fd);
            assert!(
                e <= TOL,
                "{label}: {name}[{i}] autodiff {} vs finite difference {fd} (rel {e:.2e})",
                g[i]
            );
            worst = worst.max(e);
        }
    }
    worst
}

pub fn setup(seed: u64) -> (BaseModel, Episode, Rng) {
    let mut rng = Rng::new(seed);
    let vocab_size = 10 + rng.below(6);
    let mut model = tiny_model(&mut rng, vocab_size);
    jitter(&mut model.params, 0.1, &mut rng);
    let classes = 2 + rng.below(2);
    let ep = random_episode(&mut rng, vocab_size, 6, classes, 2, 1);
    (model, ep, rng)
}

pub fn stage1_check(seed: u64) -> f64 {
    let (mut model, ep, _) = setup(seed);
    model.params.set_trainable_where(is_stage1_param);
    let out = stage1_episode(&model, &ep, None).unwrap();
    let analytic: HashMap<String, Vec<f64>> = out
        .grads
        .into_iter()
        .map(|(n, g)| (n.trim_start_matches("model/").to_string(), g))
        .collect();
    let mut params = model.params.clone();
    let mut m = model.clone();
    check_store(&format!("stage 1 seed {seed}"), &mut params, &analytic, &mut |p| {
        m.params = p.clone();
        let mut g = Graph::new();
        let lp = base_log_probs_graph(&mut g, &m, &ep.support, &ep.query, ep.num_classes, None).unwrap();
        let l = nll_graph(&mut g, lp, &ep.query_labels()).unwrap();
        g.value(l).item()
    })
}

pub fn stage2_check(seed: u64, variant: Variant) -> f64 {
    let (mut model, ep, mut rng) = setup(seed);
    model.params.freeze_all();
    let vocab = vocab_with_classes(model.config.vocab_size.saturating_sub(4 + ep.num_classes), ep.num_classes);
    let mut cond = conditioner(&model, variant, &mut rng);
    for (_, s) in cond.stores_mut() {
        jitter(s, 0.1, &mut rng);
    }
    let ep_rng = rng.child(99);
    let out = stage2_episode(&model, &cond, Some(&vocab), &ep, &mut ep_rng.clone()).unwrap();
    let analytic: HashMap<String, Vec<f64>> = out.grads.into_iter().collect();
    // Same stream as the episode step, so the features match.
    let signal = cond.task_signal(&model, Some(&vocab), &ep, &mut ep_rng.child(0)).unwrap();
    let mut worst = 0.0f64;
    let prefixes: Vec<&str> = cond.stores().iter().map(|(p, _)| *p).collect();
    for (si, prefix) in prefixes.iter().enumerate() {
        let sub: HashMap<String, Vec<f64>> = analytic
            .iter()
            .filter_map(|(n, g)| n.strip_prefix(&format!("{prefix}/")).map(|s| (s.to_string(), g.clone())))
            .collect();
        let mut store = cond.stores()[si].1.clone();
        let label = format!("stage 2 {variant} seed {seed} {prefix}");
        let mut c = cond.clone();
        worst = worst.max(check_store(&label, &mut store, &sub, &mut |p| {
            *c.stores_mut()[si].1 = p.clone();
            let mut g = Graph::new();
            let lp = c
                .log_probs_graph(&mut g, &model, &signal, &ep.support, &ep.query, ep.num_classes, None)
                .unwrap();
            let l = nll_graph(&mut g, lp, &ep.query_labels()).unwrap();
            g.value(l).item()
        }));
    }
    worst
}

/// A jittered 1-layer tiny model and the generator that made it.
pub fn one_layer_model(seed: u64) -> (BaseModel, Rng) {
    let mut rng = Rng::new(seed);
    let mut cfg = tiny_config(&mut rng, 12);
    cfg.num_layers = 1;
    let mut model = BaseModel::new(cfg, &mut rng).unwrap();
    jitter(&mut model.params, 0.3, &mut rng);
    (model, rng)
}

pub fn log_prob(model: &BaseModel, proto: &[Example], probe: &Example, classes: usize, y: usize) -> f64 {
    let mut g = Graph::new();
    let lp = base_log_probs_graph(&mut g, model, proto, std::slice::from_ref(probe), classes, None).unwrap();
    g.value(lp).get2(0, y)
}

/// `sum_j (d log p(y_j | x_j) / dθ)^2` per adapter, by central differences.
pub fn fd_sq_grads(model: &BaseModel, proto: &[Example], probe: &[Example], ys: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let mut m = model.clone();
    (0..model.config.num_adapters())
        .map(|l| {
            let mut out = Vec::new();
            for name in adapter_param_names(l) {
                for i in 0..model.params.get(&name).unwrap().numel() {
                    let x0 = m.params.get(&name).unwrap().data()[i];
                    let mut total = 0.0;
                    for (x, &y) in probe.iter().zip(ys) {
                        m.params.get_mut(&name).unwrap().data_mut()[i] = x0 + h;
                        let lp = log_prob(&m, proto, x, classes, y);
                        m.params.get_mut(&name).unwrap().data_mut()[i] = x0 - h;
                        let lm = log_prob(&m, proto, x, classes, y);
                        m.params.get_mut(&name).unwrap().data_mut()[i] = x0;
                        let d = (lp - lm) / (2.0 * h);
                        total += d * d;
                    }
                    out.push(total);
                }
            }
            out
        })
        .collect()
}
