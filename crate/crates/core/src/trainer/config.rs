use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::adaptation::{ConditionerConfig, Variant};
use crate::encoder::{Activation, EncoderConfig, PretrainConfig};
use crate::episodes::{make_synthetic_suite, Benchmark, Family, Role, SuiteSpec};
use crate::error::{Error, Result};
use crate::taskemb::FimConfig;
use crate::tensor::{AdamConfig, Rng};

/// Every tunable of a run, flat so each field is one `key = value` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,

    pub tasks: String,
    pub region_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_size: usize,
    pub min_len: usize,
    pub max_len: usize,

    pub max_seq_len: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub adapter_bottleneck_dim: usize,
    pub head_out_dim: usize,
    pub dropout_rate: f64,
    pub adapter_activation: String,

    pub pretrain_steps: usize,
    pub pretrain_batch_size: usize,
    pub mask_prob: f64,
    pub pretrain_lr: f64,

    pub stage: usize,
    pub episodes_per_step: usize,
    pub shots: usize,
    pub query_shots: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub early_stop_metric: String,
    pub steps_per_epoch: usize,
    pub max_steps: usize,
    pub val_episodes: usize,
    pub checkpoint: String,
    pub deterministic: bool,

    pub variant: String,
    pub fim_rounds: usize,
    pub normalize_features: bool,
    pub task_hidden_size: usize,
    pub task_embed_size: usize,
    pub gru_layers: usize,
    pub adapt_hidden_mult: usize,
    pub adapt_linear: bool,
    pub hyper_hidden: usize,

    pub eval_runs: usize,
    pub eval_shots: String,
    pub allow_overlap: bool,

    pub samediff_shots: String,
    pub samediff_pool: usize,
    pub samediff_train_pairs: usize,
    pub samediff_test_pairs: usize,
    pub samediff_steps: usize,
    pub samediff_lr: f64,
    pub samediff_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: "presence=keyword-presence:meta-train,topic3=topic-3:meta-train,\
                    sentiment=sentiment:meta-train,parity=keyword-parity:meta-test,topic5=topic-5:meta-test"
                .into(),
            region_size: 32,
            train_per_class: 128,
            val_per_class: 32,
            test_size: 240,
            min_len: 8,
            max_len: 16,
            max_seq_len: 32,
            model_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 64,
            adapter_bottleneck_dim: 8,
            head_out_dim: 32,
            dropout_rate: 0.1,
            adapter_activation: "gelu".into(),
            pretrain_steps: 300,
            pretrain_batch_size: 8,
            mask_prob: 0.15,
            pretrain_lr: 1e-3,
            stage: 1,
            episodes_per_step: 4,
            shots: 4,
            query_shots: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 10,
            patience: 2,
            early_stop_metric: "loss".into(),
            steps_per_epoch: 100,
            max_steps: 0,
            val_episodes: 32,
            checkpoint: String::new(),
            deterministic: true,
            variant: "grad2task".into(),
            fim_rounds: 2,
            normalize_features: true,
            task_hidden_size: 32,
            task_embed_size: 16,
            gru_layers: 2,
            adapt_hidden_mult: 2,
            adapt_linear: false,
            hyper_hidden: 32,
            eval_runs: 10,
            eval_shots: "4,8,16".into(),
            allow_overlap: false,
            samediff_shots: "4,16".into(),
            samediff_pool: 12,
            samediff_train_pairs: 200,
            samediff_test_pairs: 200,
            samediff_steps: 300,
            samediff_lr: 1e-2,
            samediff_dim: 32,
        }
    }
}

/// One-line description per key, written above it in saved configs.
pub const FIELD_DOCS: &[(&str, &str)] = &[
    ("seed", "root seed; every random stream derives from it"),
    ("tasks", "comma list of name=family:role (families: keyword-presence, keyword-parity, topic-<C>, sentiment)"),
    ("region_size", "private tokens per synthetic task"),
    ("train_per_class", "training-pool examples per class"),
    ("val_per_class", "validation-pool examples per class"),
    ("test_size", "test-pool size"),
    ("min_len", "shortest generated body, excluding [CLS]"),
    ("max_len", "longest generated body, excluding [CLS]"),
    ("max_seq_len", "positions in the encoder, including [CLS]"),
    ("model_dim", "hidden width"),
    ("num_layers", "transformer layers; adapters = 2 x layers"),
    ("num_heads", "attention heads; must divide model_dim"),
    ("ffn_dim", "feed-forward width"),
    ("adapter_bottleneck_dim", "adapter bottleneck width"),
    ("head_out_dim", "width of the [CLS] output head"),
    ("dropout_rate", "training-mode dropout"),
    ("adapter_activation", "gelu or relu"),
    ("pretrain_steps", "masked-token warmup steps"),
    ("pretrain_batch_size", "sequences per warmup step"),
    ("mask_prob", "masking probability during warmup"),
    ("pretrain_lr", "warmup learning rate"),
    ("stage", "1 = adapters/layer norms/head, 2 = task embedding and adaptation nets"),
    ("episodes_per_step", "episodes averaged per optimiser step"),
    ("shots", "support examples per class during training"),
    ("query_shots", "query examples per class during training"),
    ("lr", "learning rate (grid: 1e-3, 2e-3, 5e-3, 1e-2)"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("eps", "Adam epsilon"),
    ("max_epochs", "epoch budget"),
    ("patience", "epochs without validation improvement before stopping"),
    ("early_stop_metric", "validation metric for early stopping: loss or accuracy"),
    ("steps_per_epoch", "0 = derive from meta-train pool sizes"),
    ("max_steps", "0 = no cap"),
    ("val_episodes", "fixed validation episodes per evaluation"),
    ("checkpoint", "where the best weights are written; empty = nowhere"),
    ("deterministic", "fixed-order gradient reduction"),
    ("variant", "grad2task, pn-longer, x, x-and-y, adapt-all or hypernet"),
    ("fim_rounds", "probe subsampling rounds per episode"),
    ("normalize_features", "scale each gradient feature vector by 1/mean"),
    ("task_hidden_size", "GRU hidden width"),
    ("task_embed_size", "task embedding width"),
    ("gru_layers", "stacked GRU layers"),
    ("adapt_hidden_mult", "adaptation perceptron width / input width"),
    ("adapt_linear", "affine adaptation maps instead of perceptrons"),
    ("hyper_hidden", "hypernetwork hidden width"),
    ("eval_runs", "sampled support sets per task and shot count"),
    ("eval_shots", "comma list of shot counts"),
    ("allow_overlap", "permit evaluating meta-train tasks"),
    ("samediff_shots", "comma list of shot counts for the same/different experiment"),
    ("samediff_pool", "episodes per task whose features are paired up"),
    ("samediff_train_pairs", "training pairs (balanced)"),
    ("samediff_test_pairs", "test pairs per shot count (balanced)"),
    ("samediff_steps", "Adam steps for the pair classifier"),
    ("samediff_lr", "pair classifier learning rate"),
    ("samediff_dim", "output width of the shared linear map"),
];

fn parse_list(key: &str, s: &str) -> Result<Vec<usize>> {
    let out = s
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Config(format!("{key}: {e}")))?;
    if out.is_empty() || out.contains(&0) {
        return Err(Error::Config(format!("{key}: expected positive integers, got {s:?}")));
    }
    Ok(out)
}

impl TrainConfig {
    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Set one field from its text form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = match serde_json::to_value(&*self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config serialises to an object"),
        };
        let old = map.get(key).ok_or_else(|| {
            Error::Config(format!("unknown key `{key}`"))
        })?;
        let bad = |what: &str| Error::Config(format!("`{key}` expects {what}, got {value:?}"));
        let new = match old {
            Value::Bool(_) => Value::Bool(value.parse().map_err(|_| bad("true or false"))?),
            Value::String(_) => Value::String(value.to_string()),
            Value::Number(n) if n.is_u64() => Value::Number(value.parse::<u64>().map_err(|_| bad("a non-negative integer"))?.into()),
            Value::Number(_) => {
                let x: f64 = value.parse().map_err(|_| bad("a number"))?;
                Value::Number(Number::from_f64(x).ok_or_else(|| bad("a finite number"))?)
            }
            _ => unreachable!("flat config"),
        };
        map.insert(key.to_string(), new);
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Text form accepted by [`TrainConfig::parse`], with a comment per key.
    pub fn to_text(&self) -> String {
        let map: Map<String, Value> = match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config serialises to an object"),
        };
        let mut out = String::new();
        for (k, v) in &map {
            if let Some((_, doc)) = FIELD_DOCS.iter().find(|(n, _)| n == k) {
                out.push_str(&format!("# {doc}\n"));
            }
            let v = match v {
                Value::String(s) => s.clone(),
                Value::Number(n) if n.is_f64() => format!("{:?}", n.as_f64().unwrap()),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.episodes_per_step == 0 {
            return err("episodes_per_step must be >= 1".into());
        }
        if self.shots == 0 || self.query_shots == 0 {
            return err("shots and query_shots must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.stage != 1 && self.stage != 2 {
            return err(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.max_seq_len < self.max_len + 1 {
            return err(format!(
                "max_seq_len {} cannot hold max_len {} plus [CLS]",
                self.max_seq_len, self.max_len
            ));
        }
        if self.val_episodes == 0 || self.eval_runs == 0 {
            return err("val_episodes and eval_runs must be >= 1".into());
        }
        self.select_by_loss()?;
        self.variant()?;
        self.activation()?;
        self.eval_shot_list()?;
        self.samediff_shot_list()?;
        self.suite()?;
        Ok(())
    }

    pub fn activation(&self) -> Result<Activation> {
        match self.adapter_activation.as_str() {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            s => Err(Error::Config(format!("adapter_activation must be gelu or relu, got {s:?}"))),
        }
    }

    /// Whether early stopping ranks epochs by validation loss (else accuracy).
    pub fn select_by_loss(&self) -> Result<bool> {
        match self.early_stop_metric.as_str() {
            "loss" => Ok(true),
            "accuracy" => Ok(false),
            s => Err(Error::Config(format!("early_stop_metric must be loss or accuracy, got {s:?}"))),
        }
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(&self.variant)
    }

    pub fn eval_shot_list(&self) -> Result<Vec<usize>> {
        parse_list("eval_shots", &self.eval_shots)
    }

    pub fn samediff_shot_list(&self) -> Result<Vec<usize>> {
        parse_list("samediff_shots", &self.samediff_shots)
    }

    pub fn encoder_config(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let c = EncoderConfig {
            vocab_size,
            max_seq_len: self.max_seq_len,
            model_dim: self.model_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            adapter_bottleneck_dim: self.adapter_bottleneck_dim,
            head_out_dim: self.head_out_dim,
            dropout_rate: self.dropout_rate,
            adapter_activation: self.activation()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch_size,
            mask_prob: self.mask_prob,
            adam: AdamConfig {
                lr: self.pretrain_lr,
                ..self.adam()
            },
        }
    }

    pub fn fim_config(&self) -> FimConfig {
        FimConfig {
            rounds: self.fim_rounds,
            proto_per_class: None,
            probe_size: None,
        }
    }

    pub fn conditioner_config(&self) -> ConditionerConfig {
        ConditionerConfig {
            hidden_size: self.task_hidden_size,
            embed_size: self.task_embed_size,
            gru_layers: self.gru_layers,
            fim: self.fim_config(),
            normalize_features: self.normalize_features,
            adapt_hidden_mult: self.adapt_hidden_mult,
            adapt_linear: self.adapt_linear,
            hyper_hidden: self.hyper_hidden,
        }
    }

    /// Synthetic suite and the role of each task.
    pub fn suite(&self) -> Result<(SuiteSpec, Vec<Role>)> {
        let mut tasks = Vec::new();
        let mut roles = Vec::new();
        for item in self.tasks.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, rest) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("tasks entry {item:?}: expected name=family:role")))?;
            let (family, role) = rest
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("tasks entry {item:?}: expected name=family:role")))?;
            if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == '.' || c == '/') {
                return Err(Error::Config(format!("bad task name {name:?}")));
            }
            tasks.push((name.to_string(), Family::parse(family)?));
            roles.push(Role::parse(role)?);
        }
        let spec = SuiteSpec {
            tasks,
            region_size: self.region_size,
            vocab_limit: None,
            train_per_class: self.train_per_class,
            val_per_class: self.val_per_class,
            test_size: self.test_size,
            min_len: self.min_len,
            max_len: self.max_len,
        };
        Ok((spec, roles))
    }

    /// Generate the synthetic benchmark described by `tasks` and the data
    /// keys, seeded from `seed`.
    pub fn benchmark(&self) -> Result<Benchmark> {
        let (spec, roles) = self.suite()?;
        let suite = make_synthetic_suite(&spec, &mut Rng::new(self.seed).child(DATA_STREAM))?;
        Ok(Benchmark {
            vocab: suite.vocab,
            tasks: suite.datasets.into_iter().zip(roles).collect(),
        })
    }
}

const DATA_STREAM: u64 = 0x4441_5441;
