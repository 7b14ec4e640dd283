use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gradrank::backend::{BackendKind, TokenizerChoice};
use gradrank::dataset::MiningParams;
use gradrank::eval::{DiseaseSdConfig, EvalOptions, GainMode, RecallMode};
use gradrank::{LabelScheme, PairKey, ScoreStrategy};
use gradrank_cli::config::{CriteriaMode, JobConfig, Strategy};
use gradrank_cli::jobs;
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "gradrank", version, about = "Rank doctor profiles with graded relevance labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank the judged candidates of every query and write a TREC run.
    Rank {
        #[command(flatten)]
        job: JobArgs,
        /// Output files are <output_dir>/<name>.trec, .sidecar.jsonl, .provenance.json.
        #[arg(long, default_value = "run")]
        run_name: String,
    },
    /// Generate, propagate or shuffle ranking criteria.
    #[command(subcommand)]
    Criteria(CriteriaCommand),
    /// Write rationales for a pointwise run from its logit sidecar.
    Explain {
        #[command(flatten)]
        job: JobArgs,
        #[arg(long)]
        run: PathBuf,
        /// Only explain the top k candidates of each query.
        #[arg(long)]
        top_k: Option<usize>,
        /// Defaults to <output_dir>/rationales.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// NDCG@k and Recall@k of a run.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long = "k", default_values_t = vec![10])]
        ks: Vec<usize>,
        #[arg(long, default_value = "exponential")]
        gain: GainMode,
        #[arg(long, default_value = "standard")]
        recall: RecallMode,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Disease spread and query-prefix sensitivity of a ranker.
    #[command(subcommand)]
    Fairness(FairnessCommand),
    /// Select hard negatives for every query pair from a first-stage pool.
    MineNegatives {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Enables the review sheet.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Judgments at or above this grade count as positives.
        #[arg(long, default_value_t = 1)]
        positive_min: i32,
        #[arg(long, default_value_t = 1024)]
        min_profile_tokens: usize,
        #[arg(long, default_value_t = 0.01)]
        top_exclude_fraction: f64,
        #[arg(long, default_value_t = 0.30)]
        replacement_fraction: f64,
        #[arg(long, default_value_t = 4)]
        cross_pair_min_label: i32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a deterministic synthetic dataset.
    Fixture {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 38)]
        queries: usize,
        #[arg(long, default_value_t = 114)]
        docs_per_query: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0, 1, 2, 3, 4, 5])]
        levels: Vec<i32>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Check corpus, queries and qrels for consistency.
    /// Exit status: 0 clean, 3 warnings only, 4 errors.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Inspect or empty a response cache.
    #[command(subcommand)]
    Cache(CacheCommand),
}

#[derive(Subcommand)]
enum CriteriaCommand {
    /// Draft criteria for every query pair.
    Generate {
        #[command(flatten)]
        job: JobArgs,
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    /// Propagate one pair's criteria to every pair lacking them.
    Oneshot {
        #[command(flatten)]
        job: JobArgs,
        #[arg(long)]
        disease: String,
        #[arg(long)]
        treatment: String,
    },
    /// Write a seeded assignment in which no pair keeps its own criteria.
    Shuffle {
        #[command(flatten)]
        job: JobArgs,
    },
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum FairnessCommand {
    /// Spread of per-disease NDCG over stratified samples of a run.
    DiseaseSd {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 1000)]
        repeats: usize,
        #[arg(long, default_value_t = 5)]
        per_label: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5])]
        levels: Vec<i32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "exponential")]
        gain: GainMode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-rank under sensitive query prefixes and compare NDCG.
    Perturb {
        #[command(flatten)]
        job: JobArgs,
        /// Repeat once per variant; an empty string means no prefix.
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "exponential")]
        gain: GainMode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CacheCommand {
    /// Entry count and size as JSON.
    Stats {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Delete every cached response.
    Clear {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// A JSON config file plus flag overrides; flags win.
#[derive(Args, Clone)]
struct JobArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// http_openai_compatible | oracle | noise | replay
    #[arg(long, value_parser = serde_value::<BackendKind>)]
    backend: Option<BackendKind>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model_id: Option<String>,
    /// Environment variable holding the API credential.
    #[arg(long)]
    credential_env: Option<String>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    top_logprobs: Option<usize>,
    #[arg(long)]
    timeout_secs: Option<f64>,
    /// backend | reference | char_budget
    #[arg(long, value_parser = serde_value::<TokenizerChoice>)]
    tokenizer: Option<TokenizerChoice>,
    #[arg(long)]
    replay_dir: Option<PathBuf>,
    #[arg(long)]
    replay_identity: Option<String>,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    /// SUM | MAX_logit | MAX_prob
    #[arg(long)]
    score_strategy: Option<ScoreStrategy>,
    /// Number of graded labels: 5, 4, 3 or 2.
    #[arg(long)]
    labels: Option<usize>,
    #[arg(long, value_enum)]
    criteria_mode: Option<CriteriaMode>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    profile_budget: Option<usize>,
    #[arg(long)]
    criteria_budget: Option<usize>,
    #[arg(long)]
    rationale_budget: Option<usize>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    #[arg(long)]
    criteria_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl JobArgs {
    fn resolve(self) -> Result<JobConfig> {
        let mut c = match &self.config {
            Some(p) => JobConfig::load(p)?,
            None => JobConfig::default(),
        };
        set(&mut c.backend.kind, self.backend);
        if self.endpoint.is_some() {
            c.backend.endpoint_url = self.endpoint;
        }
        set(&mut c.backend.model_id, self.model_id);
        if self.credential_env.is_some() {
            c.backend.credential_env_var = self.credential_env;
        }
        set(&mut c.backend.max_in_flight, self.max_in_flight);
        set(&mut c.backend.top_logprobs, self.top_logprobs);
        set(&mut c.backend.request_timeout_secs, self.timeout_secs);
        set(&mut c.backend.tokenizer, self.tokenizer);
        if self.replay_dir.is_some() {
            c.backend.replay_dir = self.replay_dir;
        }
        if self.replay_identity.is_some() {
            c.backend.replay_identity = self.replay_identity;
        }
        set(&mut c.strategy, self.strategy);
        set(&mut c.score_strategy, self.score_strategy);
        if let Some(n) = self.labels {
            c.scheme = LabelScheme::with_levels(n).context("--labels")?;
        }
        set(&mut c.criteria_mode, self.criteria_mode);
        set(&mut c.window.window_size, self.window);
        set(&mut c.window.step_size, self.step);
        set(&mut c.listwise_passes, self.passes);
        set(&mut c.budgets.profile, self.profile_budget);
        set(&mut c.budgets.criteria, self.criteria_budget);
        set(&mut c.budgets.rationale, self.rationale_budget);
        let p = &mut c.paths;
        for (slot, v) in [
            (&mut p.corpus, self.corpus),
            (&mut p.queries, self.queries),
            (&mut p.qrels, self.qrels),
            (&mut p.criteria_dir, self.criteria_dir),
            (&mut p.cache_dir, self.cache_dir),
            (&mut p.output_dir, self.output_dir),
        ] {
            if v.is_some() {
                *slot = v;
            }
        }
        set(&mut c.seed, self.seed);
        Ok(c)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Rank { job, run_name } => {
            let out = jobs::cmd_rank(&job.resolve()?, &run_name)?;
            println!("run: {}", out.run_path.display());
            if let Some(s) = &out.sidecar_path {
                println!("sidecar: {}", s.display());
            }
            println!("provenance: {}", out.provenance_path.display());
            let p = &out.provenance;
            println!(
                "queries: {}  backend calls: {} logprob, {} generate  cache: {} hits, {} misses  warnings: {}",
                out.lists.len(),
                p.backend_calls.logprob,
                p.backend_calls.generate,
                p.cache.hits,
                p.cache.misses,
                p.warnings
            );
        }
        Command::Criteria(cmd) => match cmd {
            CriteriaCommand::Generate { job, n } => {
                let docs = jobs::cmd_criteria_generate(&job.resolve()?, n)?;
                for d in &docs {
                    println!("{}\t{}", d.criteria_id, d.pair_key);
                }
            }
            CriteriaCommand::Oneshot { job, disease, treatment } => {
                let docs = jobs::cmd_criteria_oneshot(&job.resolve()?, &PairKey::new(disease, treatment))?;
                for d in &docs {
                    println!("{}\t{}", d.criteria_id, d.pair_key);
                }
            }
            CriteriaCommand::Shuffle { job } => {
                let (path, manifest) = jobs::cmd_criteria_shuffle(&job.resolve()?)?;
                println!("manifest: {} ({} pairs)", path.display(), manifest.entries.len());
            }
        },
        Command::Explain { job, run, top_k, out } => {
            let out = jobs::cmd_explain(&job.resolve()?, &run, top_k, out)?;
            println!("{} rationales: {}", out.rationales.len(), out.path.display());
        }
        Command::Evaluate { run, qrels, ks, gain, recall, out } => {
            let report = jobs::cmd_evaluate(&run, &qrels, &EvalOptions { ks, gain, recall }, out.as_deref())?;
            print!("{}", report.to_table());
        }
        Command::Fairness(cmd) => match cmd {
            FairnessCommand::DiseaseSd {
                run,
                qrels,
                queries,
                repeats,
                per_label,
                levels,
                seed,
                k,
                gain,
                out,
            } => {
                let cfg = DiseaseSdConfig {
                    repeats,
                    per_label,
                    label_levels: levels,
                    seed,
                    k,
                    gain,
                };
                print_json(&jobs::cmd_fairness_sd(&run, &qrels, &queries, &cfg, out.as_deref())?)?;
            }
            FairnessCommand::Perturb { job, variants, k, gain, out } => {
                print_json(&jobs::cmd_fairness_perturb(&job.resolve()?, &variants, k, gain, out.as_deref())?)?;
            }
        },
        Command::MineNegatives {
            queries,
            qrels,
            pool,
            corpus,
            out_dir,
            positive_min,
            min_profile_tokens,
            top_exclude_fraction,
            replacement_fraction,
            cross_pair_min_label,
            seed,
        } => {
            let params = MiningParams {
                min_profile_tokens,
                top_exclude_fraction,
                replacement_fraction,
                cross_pair_min_label,
                seed,
            };
            let out = jobs::cmd_mine(&queries, &qrels, &pool, corpus.as_deref(), &params, positive_min, &out_dir)?;
            println!("mined {} pairs: {}", out.outcomes.len(), out.negatives_path.display());
            if let Some(r) = &out.review_path {
                println!("review sheet: {}", r.display());
            }
            if !out.failures.is_empty() {
                for (_, why) in &out.failures {
                    eprintln!("failed: {why}");
                }
                return Ok(ExitCode::from(1));
            }
        }
        Command::Fixture {
            seed,
            queries,
            docs_per_query,
            levels,
            out_dir,
        } => {
            let m = jobs::cmd_fixture(seed, queries, docs_per_query, &levels, &out_dir)?;
            print_json(&m)?;
        }
        Command::Validate {
            corpus,
            queries,
            qrels,
            json,
        } => {
            let report = jobs::cmd_validate(&corpus, &queries, &qrels)?;
            if json {
                print_json(&report)?;
            } else {
                for f in &report.findings {
                    println!("{f}");
                }
                println!(
                    "{} doctors, {} queries, {} judgments, {} findings",
                    report.doctors,
                    report.queries,
                    report.judgments,
                    report.findings.len()
                );
            }
            return Ok(ExitCode::from(report.status().exit_code() as u8));
        }
        Command::Cache(cmd) => match cmd {
            CacheCommand::Stats { dir } => print_json(&jobs::cmd_cache_stats(&dir)?)?,
            CacheCommand::Clear { dir } => println!("removed {} entries from {}", jobs::cmd_cache_clear(&dir)?, display(&dir)),
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
