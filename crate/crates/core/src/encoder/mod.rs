//! Transformer base model with bottleneck adapters and [CLS] pooling.

mod model;
mod pretrain;
mod vocab;

pub use model::{
    adapter_forward, adapter_param_names, adapter_prefix, is_stage1_param, param_group,
    Activation, AdapterVars, BaseModel, EncoderConfig, EncoderOutput, ForwardOptions, LayerVars,
    ModelVars, Modulation, ParamGroup,
};
pub(crate) use model::linear;
pub use pretrain::{mlm_head, pretrain_encoder, PretrainConfig, PretrainLog};
pub use vocab::{Vocab, CLS, MASK, PAD, UNK};
