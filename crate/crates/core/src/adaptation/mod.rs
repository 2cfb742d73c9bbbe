//! FiLM conditioning of the adapters and the stage-2 prediction pipeline.

mod film;
mod net;
mod pipeline;

pub(crate) use pipeline::probs_of;
pub use film::{film_apply, AdaptationParams, FilmScope, FilmVars};
pub use net::{AdaptNet, AdaptNetConfig, HyperNet, HyperNetConfig, FILM_HEADS};
pub use pipeline::{adapted_predict, base_log_probs_graph, base_predict, Conditioner, ConditionerConfig, TaskSignal, Variant};
