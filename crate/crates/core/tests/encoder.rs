mod common;

use grad2task::adaptation::{AdaptationParams, FilmScope};
use grad2task::encoder::{BaseModel, ForwardOptions, CLS};
use grad2task::tensor::{Graph, Rng};
use proptest::prelude::*;

use common::reference::{self, base_adapters};
use common::*;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_film(rng: &mut Rng, b: usize, d: usize) -> AdaptationParams {
    let mut v = |n: usize, c: f64| (0..n).map(|_| c + 0.3 * rng.normal()).collect::<Vec<_>>();
    AdaptationParams {
        gamma_mid: v(b, 1.0),
        beta_mid: v(b, 0.0),
        gamma_out: v(d, 1.0),
        beta_out: v(d, 0.0),
    }
}

fn jittered(seed: u64) -> (BaseModel, Rng) {
    let mut rng = Rng::new(seed);
    let mut model = tiny_model(&mut rng, 12);
    jitter(&mut model.params, 0.2, &mut rng);
    (model, rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_matches_reference(seed in any::<u64>()) {
        let (model, mut rng) = jittered(seed);
        let tokens = random_tokens(&mut rng, 12, model.config.max_seq_len);
        let got = model.encode(&tokens).unwrap();
        let want = reference::plain_embedding(&model, &tokens);
        prop_assert!(max_abs_diff(&got, &want) < 1e-10);
    }

    #[test]
    fn hidden_states_match_reference(seed in any::<u64>()) {
        let (model, mut rng) = jittered(seed);
        let tokens = random_tokens(&mut rng, 12, model.config.max_seq_len);
        let mut g = Graph::new();
        let vars = model.bind(&mut g).unwrap();
        let out = model.forward(&mut g, &vars, &tokens, &mut ForwardOptions::default()).unwrap();
        let (hidden, _) = reference::forward(&model, &base_adapters(&model), &tokens, &mut |_, _| None, FilmScope::Cls);
        let flat: Vec<f64> = hidden.concat();
        prop_assert!(max_abs_diff(g.value(out.hidden).data(), &flat) < 1e-10);
    }

    #[test]
    fn fixed_film_matches_reference(seed in any::<u64>(), all_tokens in any::<bool>()) {
        let (model, mut rng) = jittered(seed);
        let scope = if all_tokens { FilmScope::AllTokens } else { FilmScope::Cls };
        let (b, d) = (model.config.adapter_bottleneck_dim, model.config.model_dim);
        let films: Vec<AdaptationParams> = (0..model.config.num_adapters()).map(|_| random_film(&mut rng, b, d)).collect();
        let tokens = random_tokens(&mut rng, 12, model.config.max_seq_len);
        let got = model.encode_adapted(&tokens, &films, scope).unwrap();
        let (_, want) = reference::forward(&model, &base_adapters(&model), &tokens, &mut |l, _| Some(films[l].clone()), scope);
        prop_assert!(max_abs_diff(&got, &want) < 1e-10);
    }

    #[test]
    fn identity_film_is_exact(seed in any::<u64>(), all_tokens in any::<bool>()) {
        let (model, mut rng) = jittered(seed);
        let scope = if all_tokens { FilmScope::AllTokens } else { FilmScope::Cls };
        let ident = vec![
            AdaptationParams::identity(model.config.adapter_bottleneck_dim, model.config.model_dim);
            model.config.num_adapters()
        ];
        let tokens = random_tokens(&mut rng, 12, model.config.max_seq_len);
        prop_assert_eq!(model.encode_adapted(&tokens, &ident, scope).unwrap(), model.encode(&tokens).unwrap());
    }
}

#[test]
fn fresh_adapters_are_exact_identity() {
    let mut rng = Rng::new(3);
    let model = tiny_model(&mut rng, 12);
    let tokens = random_tokens(&mut rng, 12, model.config.max_seq_len);
    let with = model.encode(&tokens).unwrap();
    let mut g = Graph::new();
    let vars = model.bind(&mut g).unwrap();
    let mut opts = ForwardOptions {
        use_adapters: false,
        ..ForwardOptions::default()
    };
    let without = model.forward(&mut g, &vars, &tokens, &mut opts).unwrap();
    assert_eq!(with, g.value(without.embedding).data());
}

#[test]
fn rejects_malformed_sequences() {
    let model = tiny_model(&mut Rng::new(5), 12);
    assert!(model.encode(&[]).is_err());
    assert!(model.encode(&[4, 5]).is_err(), "missing [CLS]");
    assert!(model.encode(&[CLS, 12]).is_err(), "out-of-vocabulary id");
    let long = vec![CLS; model.config.max_seq_len + 1];
    assert!(model.encode(&long).is_err());
}

#[test]
fn dropout_changes_training_forward_only() {
    let mut rng = Rng::new(8);
    let mut cfg = tiny_config(&mut rng, 12);
    cfg.dropout_rate = 0.5;
    let model = BaseModel::new(cfg, &mut rng).unwrap();
    let tokens = random_tokens(&mut rng, 12, model.config.max_seq_len);
    let mut g = Graph::new();
    let vars = model.bind(&mut g).unwrap();
    let mut drop = Rng::new(1);
    let mut opts = ForwardOptions {
        dropout: Some(&mut drop),
        ..ForwardOptions::default()
    };
    let train = model.forward(&mut g, &vars, &tokens, &mut opts).unwrap();
    let eval = model.encode(&tokens).unwrap();
    assert_ne!(g.value(train.embedding).data(), &eval[..]);
    assert_eq!(eval, model.encode(&tokens).unwrap());
}
