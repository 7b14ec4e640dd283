//! Ranking metrics, run evaluation and fairness analyses.

mod fairness;
mod metrics;
mod report;

pub use fairness::{
    fairness_disease_sd, fairness_disease_sd_with, fairness_perturbation, DiseaseSdConfig,
    FairnessError, FairnessItem, FairnessReport, PerturbationDelta, VariantRow,
};
pub use metrics::{index_qrels, ndcg_at_k, recall_at_k, GainMode, QueryQrels, QrelsIndex, RecallMode};
pub use report::{evaluate_rows, evaluate_run, EvalError, EvalOptions, EvalReport, QueryMetrics};
