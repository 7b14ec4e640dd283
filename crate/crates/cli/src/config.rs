//! Job configuration: one JSON document, overridable from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gradrank::backend::BackendKind;
use gradrank::comparison::WindowPlan;
use gradrank::explain::CriteriaStore;
use gradrank::scoring::FailurePolicy;
use gradrank::seed::sha256_hex;
use gradrank::{BackendConfig, LabelScheme, ProfileField, ScoreStrategy};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Pointwise,
    Pairwise,
    Listwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CriteriaMode {
    #[default]
    None,
    /// Each pair uses its own criteria document.
    Matched,
    /// Each pair uses another pair's document (seeded derangement).
    Shuffled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub profile: usize,
    pub criteria: usize,
    pub rationale: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            profile: 2048,
            criteria: 1024,
            rationale: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub criteria_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    pub backend: BackendConfig,
    pub scheme: LabelScheme,
    pub strategy: Strategy,
    pub score_strategy: ScoreStrategy,
    pub window: WindowPlan,
    pub listwise_passes: usize,
    pub criteria_mode: CriteriaMode,
    pub budgets: Budgets,
    pub field_order: Vec<ProfileField>,
    pub failure_policy: FailurePolicy,
    pub paths: Paths,
    /// Root of every random choice in a job; see [`JobConfig::derived_seed`].
    pub seed: u64,
}

impl Default for JobConfig {
    fn default() -> Self {
        JobConfig {
            backend: BackendConfig::default(),
            scheme: LabelScheme::default(),
            strategy: Strategy::Pointwise,
            score_strategy: ScoreStrategy::Sum,
            window: WindowPlan::default(),
            listwise_passes: 1,
            criteria_mode: CriteriaMode::None,
            budgets: Budgets::default(),
            field_order: ProfileField::ALL.to_vec(),
            failure_policy: FailurePolicy::AbortQuery,
            paths: Paths::default(),
            seed: 0,
        }
    }
}

/// What a command needs from the configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    pub dataset: bool,
    pub qrels: bool,
    /// Criteria documents for the configured criteria mode.
    pub criteria: bool,
    pub criteria_dir: bool,
}

impl JobConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `derive_seed(seed, tag)`; every purpose gets its own stream.
    pub fn derived_seed(&self, tag: &str) -> u64 {
        gradrank::seed::derive_seed(self.seed, tag)
    }

    /// The configuration actually run: noise backends draw their seed from
    /// the job seed.
    pub fn resolved(&self) -> JobConfig {
        let mut c = self.clone();
        if c.backend.kind == BackendKind::Noise {
            c.backend.seed = self.derived_seed("noise-backend");
        }
        c
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn criteria_store(&self) -> Result<CriteriaStore> {
        match &self.paths.criteria_dir {
            Some(d) => Ok(CriteriaStore::open(d)),
            None => bail!("paths.criteria_dir: not set"),
        }
    }

    /// Checks the configuration before any work starts. Messages name the
    /// offending field.
    pub fn validate(&self, needs: Needs) -> Result<()> {
        for (name, v) in [
            ("budgets.profile", self.budgets.profile),
            ("budgets.criteria", self.budgets.criteria),
            ("budgets.rationale", self.budgets.rationale),
        ] {
            if v == 0 {
                bail!("{name}: must be positive");
            }
        }
        if self.field_order.is_empty() {
            bail!("field_order: must name at least one field");
        }
        self.backend.validate(&self.scheme).context("backend")?;
        WindowPlan::new(self.window.window_size, self.window.step_size).context("window")?;
        if self.listwise_passes == 0 {
            bail!("listwise_passes: must be at least 1");
        }
        let mut required = Vec::new();
        if needs.dataset {
            required.push(("paths.corpus", &self.paths.corpus));
            required.push(("paths.queries", &self.paths.queries));
        }
        if needs.qrels {
            required.push(("paths.qrels", &self.paths.qrels));
        }
        for (name, p) in required {
            match p {
                None => bail!("{name}: not set"),
                Some(p) if !p.is_file() => bail!("{name}: {} does not exist", p.display()),
                _ => {}
            }
        }
        if needs.criteria_dir || (needs.criteria && self.criteria_mode != CriteriaMode::None) {
            let Some(dir) = &self.paths.criteria_dir else {
                bail!("paths.criteria_dir: required for criteria mode {:?}", self.criteria_mode);
            };
            if needs.criteria && self.criteria_mode != CriteriaMode::None {
                let docs = CriteriaStore::open(dir).load_all().context("paths.criteria_dir")?;
                if docs.is_empty() {
                    bail!("paths.criteria_dir: no criteria documents in {}", dir.display());
                }
                if self.criteria_mode == CriteriaMode::Shuffled && docs.len() < 2 {
                    bail!("paths.criteria_dir: shuffled criteria need documents for at least 2 pairs");
                }
            }
        }
        Ok(())
    }
}
