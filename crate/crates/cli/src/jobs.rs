//! Job implementations behind each subcommand. Each returns a structured
//! result so tests can drive jobs without spawning the binary.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use gradrank::backend::{BackendKind, CacheStats, GatewayStats, OracleBackend, OracleJudgment, ResponseCache, TokenizerChoice};
use gradrank::comparison::{rank_listwise_sliding, rank_pairwise_heapsort, ComparisonOptions};
use gradrank::dataset::{
    generate_synthetic_fixture, mine_hard_negatives, review_sheet, validate_dataset, Dataset, MiningOutcome,
    MiningParams, PoolEntry, PoolRecord, ValidationReport,
};
use gradrank::domain::serialize_profile;
use gradrank::eval::{
    evaluate_run, fairness_disease_sd, fairness_perturbation, index_qrels, DiseaseSdConfig, EvalOptions, EvalReport,
    FairnessItem, FairnessReport, GainMode,
};
use gradrank::explain::{
    generate_criteria_candidates, generate_criteria_oneshot, generate_rationale, shuffle_criteria_assignment,
    AssignmentManifest, CriteriaDocument, Rationale,
};
use gradrank::io::{format_run, read_jsonl, read_qrels, read_run, to_jsonl, write_atomic};
use gradrank::prompts::TEMPLATE_VERSION;
use gradrank::scoring::{rank_pointwise, CandidateDetail, PointwiseOptions};
use gradrank::seed::sha256_hex;
use gradrank::tokenizer::{CharBudget, ReferenceTokenizer, Tokenizer};
use gradrank::{DoctorProfile, Gateway, MedicalQuery, PairKey, RankedList};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{CriteriaMode, JobConfig, Needs, Strategy};

#[derive(Debug, Error)]
pub enum JobError {
    #[error("no logit sidecar at {0}; explanations need a pointwise run")]
    MissingSidecar(PathBuf),
    #[error("sidecar has no entry for ({query_id}, {doctor_id})")]
    MissingSidecarEntry { query_id: String, doctor_id: String },
    #[error("criteria document {0} not found in the criteria dir")]
    MissingCriteria(String),
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(bytes))
}

/// Sidecar of `run`: `out/run.trec` pairs with `out/run.sidecar.jsonl`.
pub fn sidecar_path(run: &Path) -> PathBuf {
    run.with_extension("sidecar.jsonl")
}

pub fn provenance_path(run: &Path) -> PathBuf {
    run.with_extension("provenance.json")
}

/// Inputs of a job, loaded once.
pub struct JobContext {
    pub config: JobConfig,
    pub data: Dataset,
    pub gateway: Gateway,
    pub input_digests: BTreeMap<String, String>,
}

fn oracle_tokenizer(choice: TokenizerChoice) -> Box<dyn Tokenizer> {
    match choice {
        TokenizerChoice::CharBudget => Box::new(CharBudget),
        _ => Box::new(ReferenceTokenizer),
    }
}

/// The oracle backend sees the qrels through the same profile text the
/// ranking prompts will carry.
fn oracle_for(config: &JobConfig, data: &Dataset) -> Result<OracleBackend> {
    let tokenizer = oracle_tokenizer(config.backend.tokenizer);
    let profiles = data.profiles_by_id();
    let queries: HashMap<&str, &MedicalQuery> = data.queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let mut judgments = Vec::with_capacity(data.qrels.len());
    for j in &data.qrels {
        let (Some(q), Some(p)) = (queries.get(j.query_id.as_str()), profiles.get(j.doctor_id.as_str())) else {
            continue;
        };
        judgments.push(OracleJudgment {
            query_text: q.rendered_text().to_string(),
            profile_text: serialize_profile(p, &config.field_order, config.budgets.profile, tokenizer.as_ref())?,
            grade: j.relevance,
        });
    }
    Ok(OracleBackend::new(&config.backend.model_id, judgments))
}

impl JobContext {
    pub fn open(config: &JobConfig, needs: Needs) -> Result<Self> {
        let config = config.resolved();
        config.validate(needs)?;
        let mut input_digests = BTreeMap::new();
        let mut data = Dataset::default();
        if needs.dataset {
            let corpus = config.paths.corpus.as_ref().expect("validated");
            let queries = config.paths.queries.as_ref().expect("validated");
            data.corpus = read_jsonl(corpus)?;
            data.queries = read_jsonl(queries)?;
            input_digests.insert("corpus".into(), file_digest(corpus)?);
            input_digests.insert("queries".into(), file_digest(queries)?);
        }
        if let Some(qrels) = config.paths.qrels.as_ref().filter(|_| needs.qrels) {
            data.qrels = read_qrels(qrels)?;
            input_digests.insert("qrels".into(), file_digest(qrels)?);
        }
        let oracle = if config.backend.kind == BackendKind::Oracle {
            if !needs.qrels {
                bail!("backend.kind: the oracle backend needs paths.qrels");
            }
            Some(oracle_for(&config, &data)?)
        } else {
            None
        };
        let gateway = Gateway::from_config(&config.backend, oracle, config.paths.cache_dir.clone())
            .context("building backend")?;
        Ok(JobContext {
            config,
            data,
            gateway,
            input_digests,
        })
    }

    fn pointwise_options(&self) -> PointwiseOptions {
        PointwiseOptions {
            scheme: self.config.scheme.clone(),
            strategy: self.config.score_strategy,
            field_order: self.config.field_order.clone(),
            profile_budget: self.config.budgets.profile,
            failure_policy: self.config.failure_policy,
        }
    }

    fn comparison_options(&self) -> ComparisonOptions {
        ComparisonOptions {
            field_order: self.config.field_order.clone(),
            profile_budget: self.config.budgets.profile,
        }
    }

    /// Judged doctors of every query, in qrels order. Unknown doctors are
    /// skipped and counted as warnings.
    fn candidates(&self, warnings: &AtomicUsize) -> BTreeMap<String, Vec<DoctorProfile>> {
        let profiles = self.data.profiles_by_id();
        self.data
            .candidates_by_query()
            .into_iter()
            .map(|(q, ids)| {
                let list = ids
                    .into_iter()
                    .filter_map(|d| {
                        let p = profiles.get(d).map(|p| (*p).clone());
                        if p.is_none() {
                            log::warn!("query {q}: doctor {d} is not in the corpus; skipped");
                            warnings.fetch_add(1, Ordering::SeqCst);
                        }
                        p
                    })
                    .collect();
                (q.to_string(), list)
            })
            .collect()
    }

    /// Criteria document for each query pair under the configured mode.
    pub fn criteria_assignment(&self) -> Result<(BTreeMap<PairKey, CriteriaDocument>, Option<AssignmentManifest>)> {
        if self.config.criteria_mode == CriteriaMode::None {
            return Ok((BTreeMap::new(), None));
        }
        let store = self.config.criteria_store()?;
        let all = store.load_all()?;
        let (assignment, manifest) = match self.config.criteria_mode {
            CriteriaMode::Matched => (all, None),
            CriteriaMode::Shuffled => {
                let seed = self.config.derived_seed("criteria-shuffle");
                let shuffled = shuffle_criteria_assignment(&all, seed)?;
                let manifest = AssignmentManifest::from_assignment(seed, &shuffled);
                (shuffled, Some(manifest))
            }
            CriteriaMode::None => unreachable!(),
        };
        for q in &self.data.queries {
            if !assignment.contains_key(&q.pair_key()) {
                bail!("paths.criteria_dir: no criteria document for {}", q.pair_key());
            }
        }
        Ok((assignment, manifest))
    }

    fn ranking_query(
        &self,
        query: &MedicalQuery,
        candidates: &[DoctorProfile],
        criteria: Option<&CriteriaDocument>,
        warnings: &AtomicUsize,
    ) -> Result<(RankedList, Vec<CandidateDetail>)> {
        match self.config.strategy {
            Strategy::Pointwise => {
                let out = rank_pointwise(&self.gateway, query, candidates, &self.pointwise_options(), criteria)?;
                let floored: usize = out.details.iter().map(|d| d.logits.floored_count()).sum();
                if floored > 0 {
                    log::warn!("query {}: {floored} label logits floored", query.query_id);
                }
                warnings.fetch_add(out.failures.len() + usize::from(floored > 0), Ordering::SeqCst);
                Ok((out.list, out.details))
            }
            Strategy::Pairwise => {
                let out = rank_pairwise_heapsort(&self.gateway, query, candidates, &self.comparison_options())?;
                Ok((out.list, Vec::new()))
            }
            Strategy::Listwise => {
                let out = rank_listwise_sliding(
                    &self.gateway,
                    query,
                    candidates,
                    self.config.window,
                    self.config.listwise_passes,
                    &self.comparison_options(),
                )?;
                Ok((out.list, Vec::new()))
            }
        }
    }

    pub fn run_tag(&self) -> String {
        let model: String = self
            .config
            .backend
            .model_id
            .chars()
            .map(|c| if c.is_whitespace() { '_' } else { c })
            .collect();
        let strategy = match self.config.strategy {
            Strategy::Pointwise => format!("pointwise-{}-L{}", self.config.score_strategy, self.config.scheme.len()),
            Strategy::Pairwise => "pairwise-heapsort".to_string(),
            Strategy::Listwise => self.config.window.to_string(),
        };
        let criteria = match self.config.criteria_mode {
            CriteriaMode::None => "nocriteria",
            CriteriaMode::Matched => "criteria",
            CriteriaMode::Shuffled => "shuffled-criteria",
        };
        format!("{model}/{strategy}/{criteria}")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendCalls {
    pub logprob: u64,
    pub generate: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub tool_version: String,
    pub template_version: String,
    pub config_digest: String,
    /// The resolved configuration; re-running it reproduces the job.
    pub config: JobConfig,
    pub backend_identity: String,
    pub run_tag: Option<String>,
    pub input_digests: BTreeMap<String, String>,
    pub output_digests: BTreeMap<String, String>,
    /// Criteria id used for each pair.
    pub criteria_ids: BTreeMap<String, String>,
    pub criteria_manifest: Option<AssignmentManifest>,
    pub cache: CacheStats,
    pub backend_calls: BackendCalls,
    pub warnings: usize,
    pub errors: usize,
    pub created_unix: u64,
}

fn provenance(ctx: &JobContext, command: &str, stats: &GatewayStats) -> Provenance {
    Provenance {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        template_version: TEMPLATE_VERSION.to_string(),
        config_digest: ctx.config.digest(),
        config: ctx.config.clone(),
        backend_identity: ctx.gateway.identity(),
        run_tag: None,
        input_digests: ctx.input_digests.clone(),
        output_digests: BTreeMap::new(),
        criteria_ids: BTreeMap::new(),
        criteria_manifest: None,
        cache: stats.cache,
        backend_calls: BackendCalls {
            logprob: stats.logprob_calls,
            generate: stats.generate_calls,
        },
        warnings: 0,
        errors: 0,
        created_unix: unix_now(),
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

pub struct RankOutput {
    pub run_path: PathBuf,
    pub sidecar_path: Option<PathBuf>,
    pub provenance_path: PathBuf,
    pub lists: Vec<RankedList>,
    pub details: Vec<CandidateDetail>,
    pub provenance: Provenance,
}

/// Ranks the judged candidates of every query and writes the run file,
/// the logit sidecar (pointwise only) and the provenance record.
pub fn cmd_rank(config: &JobConfig, run_name: &str) -> Result<RankOutput> {
    let ctx = JobContext::open(
        config,
        Needs {
            dataset: true,
            qrels: true,
            criteria: true,
            criteria_dir: false,
        },
    )?;
    let (assignment, manifest) = ctx.criteria_assignment()?;
    let warnings = AtomicUsize::new(0);
    let candidates = ctx.candidates(&warnings);
    let mut lists = Vec::new();
    let mut details = Vec::new();
    let mut criteria_ids = BTreeMap::new();
    for q in &ctx.data.queries {
        let Some(cands) = candidates.get(&q.query_id).filter(|c| !c.is_empty()) else {
            log::warn!("query {} has no candidates; skipped", q.query_id);
            warnings.fetch_add(1, Ordering::SeqCst);
            continue;
        };
        let criteria = assignment.get(&q.pair_key());
        if let Some(c) = criteria {
            criteria_ids.insert(q.pair_key().to_string(), c.criteria_id.clone());
        }
        let (list, d) = ctx
            .ranking_query(q, cands, criteria, &warnings)
            .with_context(|| format!("ranking query {}", q.query_id))?;
        lists.push(list);
        details.extend(d);
    }

    let out_dir = ctx.config.output_dir();
    let run_path = out_dir.join(format!("{run_name}.trec"));
    let tag = ctx.run_tag();
    write_atomic(&run_path, format_run(&lists, &tag).as_bytes())?;
    let mut prov = provenance(&ctx, "rank", &ctx.gateway.stats());
    prov.output_digests.insert("run".into(), file_digest(&run_path)?);
    let sidecar = if ctx.config.strategy == Strategy::Pointwise {
        let p = sidecar_path(&run_path);
        write_atomic(&p, to_jsonl(&details).as_bytes())?;
        prov.output_digests.insert("sidecar".into(), file_digest(&p)?);
        Some(p)
    } else {
        None
    };
    prov.run_tag = Some(tag);
    prov.criteria_ids = criteria_ids;
    prov.criteria_manifest = manifest;
    prov.warnings = warnings.load(Ordering::SeqCst);
    let provenance_path = provenance_path(&run_path);
    write_json(&provenance_path, &prov)?;
    Ok(RankOutput {
        run_path,
        sidecar_path: sidecar,
        provenance_path,
        lists,
        details,
        provenance: prov,
    })
}

/// Runs `f` over `items` with up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(workers: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= items.len() {
            break;
        }
        let r = f(&items[i]);
        let failed = r.is_err();
        *slots[i].lock().unwrap() = Some(r);
        if failed {
            next.store(items.len(), Ordering::SeqCst);
        }
    };
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(work);
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(r) => out.push(r?),
            None => return Err(anyhow!("job aborted after an earlier failure")),
        }
    }
    Ok(out)
}

pub struct ExplainOutput {
    pub path: PathBuf,
    pub rationales: Vec<Rationale>,
    pub stats: GatewayStats,
}

/// One rationale per ranked candidate (or per top-k of each query), built
/// from the logits stored in the run's sidecar.
pub fn cmd_explain(config: &JobConfig, run: &Path, top_k: Option<usize>, out: Option<PathBuf>) -> Result<ExplainOutput> {
    let sidecar = sidecar_path(run);
    if !sidecar.is_file() {
        return Err(JobError::MissingSidecar(sidecar).into());
    }
    let ctx = JobContext::open(
        config,
        Needs {
            dataset: true,
            qrels: config.backend.kind == BackendKind::Oracle,
            criteria: false,
            criteria_dir: false,
        },
    )?;
    let details: Vec<CandidateDetail> = read_jsonl(&sidecar)?;
    let details: HashMap<(&str, &str), &CandidateDetail> =
        details.iter().map(|d| ((d.query_id.as_str(), d.doctor_id.as_str()), d)).collect();
    let criteria: HashMap<String, CriteriaDocument> = match &ctx.config.paths.criteria_dir {
        Some(_) => ctx
            .config
            .criteria_store()?
            .load_all()?
            .into_values()
            .map(|d| (d.criteria_id.clone(), d))
            .collect(),
        None => HashMap::new(),
    };

    let mut rows = read_run(run)?;
    rows.sort_by(|a, b| a.query_id.cmp(&b.query_id).then(a.rank.cmp(&b.rank)));
    let mut per_query: BTreeMap<&str, usize> = BTreeMap::new();
    let mut jobs = Vec::new();
    for r in &rows {
        let n = per_query.entry(r.query_id.as_str()).or_default();
        *n += 1;
        if top_k.is_some_and(|k| *n > k) {
            continue;
        }
        let d = details
            .get(&(r.query_id.as_str(), r.doctor_id.as_str()))
            .ok_or_else(|| JobError::MissingSidecarEntry {
                query_id: r.query_id.clone(),
                doctor_id: r.doctor_id.clone(),
            })?;
        jobs.push(*d);
    }

    let queries: HashMap<&str, &MedicalQuery> = ctx.data.queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let profiles = ctx.data.profiles_by_id();
    let tokenizer = ctx.gateway.tokenizer();
    let cfg = &ctx.config;
    let rationales = parallel_map(ctx.gateway.max_in_flight(), &jobs, |d| {
        let q = queries
            .get(d.query_id.as_str())
            .ok_or_else(|| anyhow!("run query {} is not in the queries file", d.query_id))?;
        let p = profiles
            .get(d.doctor_id.as_str())
            .ok_or_else(|| anyhow!("run doctor {} is not in the corpus", d.doctor_id))?;
        let text = serialize_profile(p, &cfg.field_order, cfg.budgets.profile, tokenizer.as_ref())?;
        let doc = match &d.criteria_id {
            Some(id) => Some(criteria.get(id).ok_or_else(|| JobError::MissingCriteria(id.clone()))?),
            None => None,
        };
        Ok(generate_rationale(
            &ctx.gateway,
            q,
            &d.doctor_id,
            &text,
            &d.logits,
            &cfg.scheme,
            doc,
            cfg.budgets.rationale,
        )?)
    })?;
    let path = out.unwrap_or_else(|| ctx.config.output_dir().join("rationales.jsonl"));
    write_atomic(&path, to_jsonl(&rationales).as_bytes())?;
    Ok(ExplainOutput {
        path,
        rationales,
        stats: ctx.gateway.stats(),
    })
}

fn unique_pairs(queries: &[MedicalQuery]) -> Vec<PairKey> {
    let set: BTreeSet<PairKey> = queries.iter().map(MedicalQuery::pair_key).collect();
    set.into_iter().collect()
}

fn criteria_context(config: &JobConfig) -> Result<JobContext> {
    let needs = Needs {
        dataset: false,
        qrels: config.backend.kind == BackendKind::Oracle,
        criteria: false,
        criteria_dir: true,
    };
    let mut ctx = JobContext::open(config, needs)?;
    let queries = ctx
        .config
        .paths
        .queries
        .clone()
        .ok_or_else(|| anyhow!("paths.queries: not set"))?;
    ctx.data.queries = read_jsonl(&queries)?;
    Ok(ctx)
}

/// Writes `n` drafts per pair; the first draft becomes the active document
/// unless the pair already has one.
pub fn cmd_criteria_generate(config: &JobConfig, n: usize) -> Result<Vec<CriteriaDocument>> {
    let ctx = criteria_context(config)?;
    let store = ctx.config.criteria_store()?;
    let pairs = unique_pairs(&ctx.data.queries);
    let drafts = parallel_map(ctx.gateway.max_in_flight(), &pairs, |pair| {
        Ok(generate_criteria_candidates(&ctx.gateway, pair, n, ctx.config.budgets.criteria)?)
    })?;
    let mut all = Vec::new();
    for docs in drafts {
        for (i, d) in docs.iter().enumerate() {
            store.save_candidate(d, i)?;
        }
        if store.load(&docs[0].pair_key)?.is_none() {
            store.save(&docs[0])?;
        }
        all.extend(docs);
    }
    Ok(all)
}

/// Generates criteria for every pair lacking them, with the exemplar pair's
/// active document as the worked example.
pub fn cmd_criteria_oneshot(config: &JobConfig, exemplar: &PairKey) -> Result<Vec<CriteriaDocument>> {
    let ctx = criteria_context(config)?;
    let store = ctx.config.criteria_store()?;
    let example = store
        .load(exemplar)?
        .ok_or_else(|| anyhow!("exemplar pair {exemplar} has no criteria document"))?;
    let mut todo = Vec::new();
    for pair in unique_pairs(&ctx.data.queries) {
        if pair != *exemplar && store.load(&pair)?.is_none() {
            todo.push(pair);
        }
    }
    let docs = parallel_map(ctx.gateway.max_in_flight(), &todo, |pair| {
        Ok(generate_criteria_oneshot(&ctx.gateway, pair, &example, ctx.config.budgets.criteria)?)
    })?;
    for d in &docs {
        store.save(d)?;
    }
    Ok(docs)
}

/// Writes the shuffled assignment used by criteria mode `shuffled`.
pub fn cmd_criteria_shuffle(config: &JobConfig) -> Result<(PathBuf, AssignmentManifest)> {
    let store = config.criteria_store()?;
    let all = store.load_all()?;
    let seed = config.derived_seed("criteria-shuffle");
    let shuffled = shuffle_criteria_assignment(&all, seed)?;
    let manifest = AssignmentManifest::from_assignment(seed, &shuffled);
    let path = store.write_manifest(&format!("shuffled-{seed}"), &manifest)?;
    Ok((path, manifest))
}

pub fn cmd_evaluate(run: &Path, qrels: &Path, opts: &EvalOptions, out: Option<&Path>) -> Result<EvalReport> {
    let report = evaluate_run(run, qrels, opts)?;
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    Ok(report)
}

/// A report plus sha256 digests of the files it was computed from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Digested<T> {
    pub input_digests: BTreeMap<String, String>,
    #[serde(flatten)]
    pub report: T,
}

/// Disease-level NDCG spread using the scores of an existing run.
pub fn cmd_fairness_sd(
    run: &Path,
    qrels: &Path,
    queries: &Path,
    cfg: &DiseaseSdConfig,
    out: Option<&Path>,
) -> Result<Digested<FairnessReport>> {
    let rows = read_run(run)?;
    let judgments = read_qrels(qrels)?;
    let qs: Vec<MedicalQuery> = read_jsonl(queries)?;
    let disease: HashMap<&str, &str> = qs.iter().map(|q| (q.query_id.as_str(), q.disease.as_str())).collect();
    let labels: HashMap<(&str, &str), i32> = judgments
        .iter()
        .map(|j| ((j.query_id.as_str(), j.doctor_id.as_str()), j.relevance))
        .collect();
    let mut grouped: BTreeMap<String, Vec<FairnessItem>> = BTreeMap::new();
    for r in &rows {
        let (Some(d), Some(label)) = (
            disease.get(r.query_id.as_str()),
            labels.get(&(r.query_id.as_str(), r.doctor_id.as_str())),
        ) else {
            continue;
        };
        grouped.entry(d.to_string()).or_default().push(FairnessItem {
            doctor_id: r.doctor_id.clone(),
            true_label: *label,
            model_score: r.score,
        });
    }
    let report = Digested {
        input_digests: BTreeMap::from([
            ("run".into(), file_digest(run)?),
            ("qrels".into(), file_digest(qrels)?),
            ("queries".into(), file_digest(queries)?),
        ]),
        report: fairness_disease_sd(&grouped, cfg)?,
    };
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    Ok(report)
}

/// Re-ranks every query under each sensitive prefix with the configured
/// strategy and compares macro NDCG@k.
pub fn cmd_fairness_perturb(
    config: &JobConfig,
    variants: &[String],
    k: usize,
    gain: GainMode,
    out: Option<&Path>,
) -> Result<Digested<FairnessReport>> {
    let ctx = JobContext::open(
        config,
        Needs {
            dataset: true,
            qrels: true,
            criteria: true,
            criteria_dir: false,
        },
    )?;
    let (assignment, _) = ctx.criteria_assignment()?;
    let warnings = AtomicUsize::new(0);
    let candidates = ctx.candidates(&warnings);
    let qrels = index_qrels(&ctx.data.qrels);
    let queries: Vec<MedicalQuery> = ctx
        .data
        .queries
        .iter()
        .filter(|q| candidates.get(&q.query_id).is_some_and(|c| !c.is_empty()))
        .cloned()
        .collect();
    let report = fairness_perturbation(&queries, variants, &qrels, k, gain, |q| {
        ctx.ranking_query(q, &candidates[&q.query_id], assignment.get(&q.pair_key()), &warnings)
            .map(|(list, _)| list)
            .map_err(|e| -> Box<dyn std::error::Error + Send + Sync> { e.into() })
    })?;
    let report = Digested {
        input_digests: ctx.input_digests.clone(),
        report,
    };
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    Ok(report)
}

pub struct MineOutput {
    pub outcomes: Vec<MiningOutcome>,
    /// Pairs that could not be mined, with the reason.
    pub failures: Vec<(PairKey, String)>,
    pub negatives_path: PathBuf,
    pub review_path: Option<PathBuf>,
}

/// Mines negatives for every query pair. Positives are judged doctors with
/// relevance at least `positive_min`.
pub fn cmd_mine(
    queries: &Path,
    qrels: &Path,
    pool: &Path,
    corpus: Option<&Path>,
    params: &MiningParams,
    positive_min: i32,
    out_dir: &Path,
) -> Result<MineOutput> {
    let qs: Vec<MedicalQuery> = read_jsonl(queries)?;
    let judgments = read_qrels(qrels)?;
    let records: Vec<PoolRecord> = read_jsonl(pool)?;
    let pair_of: HashMap<&str, PairKey> = qs.iter().map(|q| (q.query_id.as_str(), q.pair_key())).collect();

    let mut positives: BTreeMap<PairKey, BTreeSet<String>> = BTreeMap::new();
    let mut labelled: BTreeMap<PairKey, Vec<(String, i32)>> = BTreeMap::new();
    for j in &judgments {
        let Some(pair) = pair_of.get(j.query_id.as_str()) else {
            log::warn!("qrels query {} is not in the queries file", j.query_id);
            continue;
        };
        if j.relevance >= positive_min {
            positives.entry(pair.clone()).or_default().insert(j.doctor_id.clone());
            labelled.entry(pair.clone()).or_default().push((j.doctor_id.clone(), j.relevance));
        }
    }
    let mut pools: BTreeMap<PairKey, Vec<PoolEntry>> = BTreeMap::new();
    for r in records {
        pools.entry(r.pair_key()).or_default().push(r.entry);
    }

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (pair, pos) in &positives {
        let pool = pools.get(pair).map(Vec::as_slice).unwrap_or(&[]);
        match mine_hard_negatives(pair, pos, pool, &labelled, params) {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::error!("{e}");
                failures.push((pair.clone(), e.to_string()));
            }
        }
    }
    let records: Vec<_> = outcomes.iter().flat_map(|o| o.records()).collect();
    let negatives_path = out_dir.join("negatives.jsonl");
    write_atomic(&negatives_path, to_jsonl(&records).as_bytes())?;
    let review_path = match corpus {
        Some(c) => {
            let profiles: Vec<DoctorProfile> = read_jsonl(c)?;
            let by_id = profiles.iter().map(|p| (p.doctor_id.as_str(), p)).collect();
            let path = out_dir.join("review.csv");
            write_atomic(&path, review_sheet(&outcomes, &by_id)?.as_bytes())?;
            Some(path)
        }
        None => None,
    };
    Ok(MineOutput {
        outcomes,
        failures,
        negatives_path,
        review_path,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub seed: u64,
    pub n_queries: usize,
    pub docs_per_query: usize,
    pub label_levels: Vec<i32>,
    pub judgments: usize,
    pub file_digests: BTreeMap<String, String>,
}

pub fn cmd_fixture(seed: u64, n_queries: usize, docs_per_query: usize, levels: &[i32], out_dir: &Path) -> Result<FixtureManifest> {
    let fixture = generate_synthetic_fixture(seed, n_queries, docs_per_query, levels)?;
    fixture.write(out_dir)?;
    let mut file_digests = BTreeMap::new();
    for name in ["corpus.jsonl", "queries.jsonl", "qrels.txt", "pool.jsonl"] {
        file_digests.insert(name.to_string(), file_digest(&out_dir.join(name))?);
    }
    let manifest = FixtureManifest {
        seed,
        n_queries,
        docs_per_query,
        label_levels: levels.to_vec(),
        judgments: fixture.qrels.len(),
        file_digests,
    };
    write_json(&out_dir.join("fixture.json"), &manifest)?;
    Ok(manifest)
}

pub fn cmd_validate(corpus: &Path, queries: &Path, qrels: &Path) -> Result<ValidationReport> {
    let data = Dataset::load(corpus, queries, qrels)?;
    Ok(validate_dataset(&data))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheSummary {
    pub dir: PathBuf,
    pub entries: usize,
    pub bytes: u64,
}

pub fn cmd_cache_stats(dir: &Path) -> Result<CacheSummary> {
    let cache = ResponseCache::open(dir)?;
    let (entries, bytes) = cache.disk_usage()?;
    Ok(CacheSummary {
        dir: dir.to_path_buf(),
        entries,
        bytes,
    })
}

pub fn cmd_cache_clear(dir: &Path) -> Result<usize> {
    Ok(ResponseCache::open(dir)?.clear()?)
}
