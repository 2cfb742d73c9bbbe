//! k-shot evaluation, the same/different task experiment and ablations.

mod ablation;
mod kshot;
mod samediff;

pub use ablation::{evaluate_all, run_ablation, stage2_budget, AblationRun, BASELINE_TAG};
pub use kshot::{eval_tasks, evaluate_kshot, mean_std, EvalReport, EvalRow};
pub use samediff::{
    auc, feature_pool, make_pairs, run_samediff, samediff_eval, samediff_train, FeaturePair, SameDiffConfig,
    SameDiffModel, SameDiffResult,
};
