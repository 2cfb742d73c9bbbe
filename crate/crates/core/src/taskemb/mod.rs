//! Fisher-diagonal gradient features and the recurrent task-embedding network.

mod fim;
mod net;
mod reps;

pub use fim::{
    fim_diag_features, fim_diag_features_traced, round_sq_grads, FimConfig, FimRound, GradFeatures, Sampling,
};
pub use net::{gru_param_names, TaskEmbedConfig, TaskEmbedNet};
pub use reps::{export_embeddings, input_label_task_rep, mean_input_task_rep, read_embeddings, EmbeddingRecord};
