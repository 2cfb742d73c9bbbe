#![allow(dead_code)]

use grad2task::adaptation::{Conditioner, ConditionerConfig, Variant};
use grad2task::encoder::{Activation, BaseModel, EncoderConfig, Vocab, CLS};
use grad2task::episodes::{Episode, Example};
use grad2task::taskemb::FimConfig;
use grad2task::tensor::{ParamStore, Rng, Tensor};

/// A random tiny encoder: 1-2 layers, widths <= 8, no dropout.
pub fn tiny_config(rng: &mut Rng, vocab_size: usize) -> EncoderConfig {
    let heads = 1 + rng.below(2);
    let model_dim = heads * (2 + rng.below(3));
    EncoderConfig {
        vocab_size,
        max_seq_len: 8,
        model_dim,
        num_layers: 1 + rng.below(2),
        num_heads: heads,
        ffn_dim: 4 + rng.below(5),
        adapter_bottleneck_dim: 2 + rng.below(3),
        head_out_dim: 2 + rng.below(5),
        dropout_rate: 0.0,
        adapter_activation: Activation::Gelu,
    }
}

pub fn tiny_conditioner_config() -> ConditionerConfig {
    ConditionerConfig {
        hidden_size: 3,
        embed_size: 3,
        gru_layers: 2,
        fim: FimConfig {
            rounds: 1,
            ..FimConfig::default()
        },
        normalize_features: true,
        adapt_hidden_mult: 1,
        adapt_linear: false,
        hyper_hidden: 3,
    }
}

pub fn random_tokens(rng: &mut Rng, vocab_size: usize, max_len: usize) -> Vec<u32> {
    let len = 2 + rng.below(max_len - 1);
    let mut t = vec![CLS];
    t.extend((1..len).map(|_| 4 + rng.below(vocab_size - 4) as u32));
    t
}

/// Episode of random sequences with `k` support and `q` query examples per class.
pub fn random_episode(rng: &mut Rng, vocab_size: usize, max_len: usize, classes: usize, k: usize, q: usize) -> Episode {
    let draw = |rng: &mut Rng, n: usize| -> Vec<Example> {
        (0..classes)
            .flat_map(|c| (0..n).map(move |_| c))
            .collect::<Vec<_>>()
            .into_iter()
            .map(|label| Example {
                tokens: random_tokens(rng, vocab_size, max_len),
                label,
            })
            .collect()
    };
    let support = draw(rng, k);
    let query = draw(rng, q);
    Episode {
        task: "random".into(),
        support,
        query,
        shots: k,
        num_classes: classes,
        class_names: (0..classes).map(|c| format!("class{c}")).collect(),
    }
}

/// Add Gaussian noise of scale `s` to every value of `store`.
pub fn jitter(store: &mut ParamStore, s: f64, rng: &mut Rng) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        for x in t.data_mut() {
            *x += s * rng.normal();
        }
    }
}

pub fn tiny_model(rng: &mut Rng, vocab_size: usize) -> BaseModel {
    let cfg = tiny_config(rng, vocab_size);
    BaseModel::new(cfg, rng).unwrap()
}

pub fn conditioner(model: &BaseModel, variant: Variant, rng: &mut Rng) -> Conditioner {
    Conditioner::new(variant, &model.config, tiny_conditioner_config(), rng).unwrap()
}

/// Vocabulary holding the class names `class0..class{n-1}` after `extra` filler tokens.
pub fn vocab_with_classes(extra: usize, n: usize) -> Vocab {
    let mut v = Vocab::new();
    for i in 0..extra {
        v.push(&format!("w{i}"));
    }
    for c in 0..n {
        v.push(&format!("class{c}"));
    }
    v
}

pub fn scalar(v: f64) -> Tensor {
    Tensor::scalar(v)
}
pub mod gradcheck;
pub mod reference;
