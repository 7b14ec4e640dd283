//! Zero-shot ranking of doctor profiles against patient needs using graded
//! relevance labels elicited from a text-generation backend.
//!
//! The crate is organised around the scoring pipeline:
//!
//! - [`domain`]: profiles, queries, label schemes and ranked lists, plus the
//!   text construction rules that turn records into prompt-ready strings.
//! - [`backend`]: the gateway to text-generation backends (HTTP and
//!   deterministic mocks), with an on-disk response cache.
//! - [`scoring`]: the pointwise graded-label ranker.
//! - [`comparison`]: pairwise (heapsort) and listwise (sliding window) baselines.
//! - [`explain`]: ranking criteria and per-candidate rationales.
//! - [`eval`]: NDCG / Recall, run evaluation and fairness analyses.
//! - [`dataset`]: file formats, validation, hard negative mining and fixtures.

pub mod backend;
pub mod comparison;
pub mod dataset;
pub mod domain;
pub mod eval;
pub mod explain;
pub mod io;
pub mod prompts;
pub mod scoring;
pub mod seed;
pub mod tokenizer;

#[cfg(any(test, feature = "oracles"))]
pub mod oracles;

pub use backend::{BackendConfig, BackendError, BackendKind, Gateway, LabelLogits};
pub use domain::{
    DoctorProfile, GradedJudgment, LabelScheme, MedicalQuery, PairKey, ProfileField, RankedList,
    ScoredCandidate,
};
pub use scoring::ScoreStrategy;
