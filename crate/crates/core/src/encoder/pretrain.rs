use log::{info, warn};

use crate::encoder::model::{linear, param_group, BaseModel, ForwardOptions, ParamGroup};
use crate::encoder::vocab::{CLS, MASK};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, Graph, ParamStore, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            mask_prob: 0.15,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainLog {
    /// `(step, loss, masked-token accuracy)` per optimiser step.
    pub steps: Vec<(usize, f64, f64)>,
}

/// Masked-token prediction head, discarded after warmup.
pub fn mlm_head(model: &BaseModel, rng: &mut Rng) -> Result<ParamStore> {
    let (d, v) = (model.config.model_dim, model.config.vocab_size);
    let mut s = ParamStore::new();
    s.insert_normal("mlm.w", vec![d, v], 1.0 / (d as f64).sqrt(), rng)?;
    s.insert("mlm.b", Tensor::zeros(vec![v]))?;
    Ok(s)
}

/// Replace a random subset of non-[CLS] positions by `[MASK]`. At least one
/// position is masked when the sequence has any.
fn mask_sequence(tokens: &[u32], prob: f64, rng: &mut Rng) -> (Vec<u32>, Vec<(usize, u32)>) {
    let mut masked = tokens.to_vec();
    let mut targets = Vec::new();
    for (i, tok) in masked.iter_mut().enumerate().skip(1) {
        if rng.uniform() < prob {
            targets.push((i, *tok));
            *tok = MASK;
        }
    }
    if targets.is_empty() && tokens.len() > 1 {
        let i = 1 + rng.below(tokens.len() - 1);
        targets.push((i, tokens[i]));
        masked[i] = MASK;
    }
    (masked, targets)
}

/// Masked-token warmup of the encoder weights θ and layer norms.
///
/// Adapters and the output head are not touched. `steps == 0` is a no-op.
pub fn pretrain_encoder(
    model: &mut BaseModel,
    corpus: &[Vec<u32>],
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainLog> {
    let mut log = PretrainLog::default();
    if cfg.steps == 0 {
        warn!("pretrain_encoder called with steps = 0; nothing to do");
        return Ok(log);
    }
    let usable: Vec<&Vec<u32>> = corpus.iter().filter(|s| s.len() > 1).collect();
    if usable.is_empty() {
        return Err(Error::Input("pretraining corpus has no sequences longer than [CLS]".into()));
    }
    let saved_flags: Vec<bool> = model.params.iter().map(|p| p.trainable).collect();
    model.params.set_trainable_where(|n| {
        matches!(param_group(n), ParamGroup::Encoder | ParamGroup::LayerNorm)
    });
    let mut head = mlm_head(model, &mut rng.child(0))?;
    let result = (|| {
        for step in 0..cfg.steps {
            let mut step_rng = rng.child(step as u64 + 1);
            let mut g = Graph::new();
            let vars = model.bind(&mut g)?;
            let hw = g.param(&head, "mlm.w")?;
            let hb = g.param(&head, "mlm.b")?;
            let mut losses = Vec::new();
            let (mut correct, mut total) = (0usize, 0usize);
            for _ in 0..cfg.batch_size {
                let seq = usable[step_rng.below(usable.len())];
                debug_assert_eq!(seq[0], CLS);
                let (masked, targets) = mask_sequence(seq, cfg.mask_prob, &mut step_rng);
                let mut drop_rng = step_rng.child(total as u64);
                let mut opts = ForwardOptions {
                    dropout: Some(&mut drop_rng),
                    ..ForwardOptions::default()
                };
                let out = model.forward(&mut g, &vars, &masked, &mut opts)?;
                let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
                let hm = g.gather_rows(out.hidden, &rows)?;
                let logits = linear(&mut g, hm, hw, hb)?;
                let logp = g.log_softmax(logits)?;
                for (r, &(_, want)) in targets.iter().enumerate() {
                    let row = &g.value(logp).data()[r * model.config.vocab_size..(r + 1) * model.config.vocab_size];
                    let pred = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                        .0;
                    correct += usize::from(pred == want as usize);
                    total += 1;
                }
                let picks: Vec<(usize, usize)> = targets
                    .iter()
                    .enumerate()
                    .map(|(r, &(_, want))| (r, want as usize))
                    .collect();
                losses.push(g.pick(logp, &picks)?);
            }
            let all = g.concat_cols(&losses)?;
            let mean = g.mean(all)?;
            let loss = g.scale(mean, -1.0)?;
            let loss_value = g.value(loss).item();
            let grads = g.backward(loss)?;
            model.params.accumulate_from(&g, &grads);
            head.accumulate_from(&g, &grads);
            model.params.adam_step(&cfg.adam)?;
            head.adam_step(&cfg.adam)?;
            let acc = correct as f64 / total.max(1) as f64;
            log.steps.push((step, loss_value, acc));
            if step % 50 == 0 || step + 1 == cfg.steps {
                info!("pretrain step {step}: loss {loss_value:.4} masked acc {acc:.3}");
            }
        }
        Ok(())
    })();
    for (p, flag) in model.params.params_mut().iter_mut().zip(saved_flags) {
        p.trainable = flag;
        p.grad = None;
    }
    result.map(|_| log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::model::EncoderConfig;

    fn model() -> BaseModel {
        let cfg = EncoderConfig {
            vocab_size: 8,
            max_seq_len: 8,
            model_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 8,
            adapter_bottleneck_dim: 2,
            head_out_dim: 4,
            ..EncoderConfig::default()
        };
        BaseModel::new(cfg, &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn zero_steps_is_noop() {
        let mut m = model();
        let before = m.params.fingerprint();
        let corpus = vec![vec![CLS, 4, 5]];
        let log = pretrain_encoder(
            &mut m,
            &corpus,
            &PretrainConfig {
                steps: 0,
                ..PretrainConfig::default()
            },
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(log.steps.is_empty());
        assert_eq!(m.params.fingerprint(), before);
    }

    #[test]
    fn adapters_and_head_untouched() {
        let mut m = model();
        let keep = |n: &str| matches!(param_group(n), ParamGroup::Adapter | ParamGroup::Head);
        let before = m.params.fingerprint_where(keep);
        let enc_before = m.params.fingerprint_where(|n| param_group(n) == ParamGroup::Encoder);
        let corpus = vec![vec![CLS, 4, 4, 4], vec![CLS, 5, 5, 5]];
        let cfg = PretrainConfig {
            steps: 3,
            ..PretrainConfig::default()
        };
        pretrain_encoder(&mut m, &corpus, &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(m.params.fingerprint_where(keep), before);
        assert_ne!(m.params.fingerprint_where(|n| param_group(n) == ParamGroup::Encoder), enc_before);
    }

    #[test]
    fn empty_corpus_is_error() {
        let mut m = model();
        let cfg = PretrainConfig::default();
        assert!(pretrain_encoder(&mut m, &[vec![CLS]], &cfg, &mut Rng::new(0)).is_err());
    }
}
