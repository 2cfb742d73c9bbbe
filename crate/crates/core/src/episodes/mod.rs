//! Datasets, synthetic task generation and episodic sampling.

mod dataset;
mod registry;
mod sampling;
mod synthetic;

pub use dataset::{load_jsonl, load_split_jsonl, write_jsonl, Example, LabeledDataset, Split};
pub use registry::{Benchmark, Role};
pub use sampling::{
    default_subsample_sizes, sample_episode, sample_episode_from, sample_eval_episode,
    subsample_support, Episode, TaskRegistry,
};
pub use synthetic::{make_synthetic_suite, Family, SuiteSpec, SyntheticSuite, TaskLayout};
