use std::collections::{BTreeMap, HashMap};
use std::error::Error as StdError;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{ndcg_at_k, GainMode, QrelsIndex, QueryQrels};
use crate::domain::{rank_order, MedicalQuery, RankedList};
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum FairnessError {
    #[error("disease {disease}: {available} doctors at level {level}, need {needed}")]
    InsufficientStratum {
        disease: String,
        level: i32,
        available: usize,
        needed: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("ranking query {query_id} failed: {source}")]
    Ranker {
        query_id: String,
        #[source]
        source: Box<dyn StdError + Send + Sync>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessItem {
    pub doctor_id: String,
    pub true_label: i32,
    pub model_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseSdConfig {
    pub repeats: usize,
    pub per_label: usize,
    pub label_levels: Vec<i32>,
    pub seed: u64,
    pub k: usize,
    pub gain: GainMode,
}

impl Default for DiseaseSdConfig {
    fn default() -> Self {
        DiseaseSdConfig {
            repeats: 1000,
            per_label: 5,
            label_levels: vec![1, 2, 3, 4, 5],
            seed: 0,
            k: 10,
            gain: GainMode::Exponential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub prefix: String,
    pub macro_ndcg: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationDelta {
    pub first: String,
    pub second: String,
    /// `first - second`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FairnessReport {
    DiseaseSd {
        mean_sd: f64,
        repeats: usize,
        per_label_count: usize,
        label_levels: Vec<i32>,
        seed: u64,
        gain_mode: GainMode,
        /// Mean per-disease metric over all repeats.
        per_disease_mean: BTreeMap<String, f64>,
    },
    Perturbation {
        k: usize,
        gain_mode: GainMode,
        variants: Vec<VariantRow>,
        deltas: Vec<PerturbationDelta>,
    },
}

fn population_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Keeps one entry per doctor (the highest label) and groups by level.
fn strata(items: &[FairnessItem]) -> HashMap<i32, Vec<FairnessItem>> {
    let mut best: BTreeMap<&str, &FairnessItem> = BTreeMap::new();
    for it in items {
        best.entry(&it.doctor_id)
            .and_modify(|b| {
                if it.true_label > b.true_label {
                    *b = it;
                }
            })
            .or_insert(it);
    }
    let mut out: HashMap<i32, Vec<FairnessItem>> = HashMap::new();
    for it in best.into_values() {
        out.entry(it.true_label).or_default().push(it.clone());
    }
    out
}

/// Standard deviation of a per-disease metric across diseases, averaged
/// over seeded repeats. Each repeat samples `per_label` doctors at every
/// level of every disease; `metric` scores one disease's sample.
pub fn fairness_disease_sd_with(
    grouped: &BTreeMap<String, Vec<FairnessItem>>,
    cfg: &DiseaseSdConfig,
    metric: impl Fn(&str, &[FairnessItem]) -> f64,
) -> Result<FairnessReport, FairnessError> {
    if cfg.repeats == 0 || cfg.per_label == 0 || cfg.label_levels.is_empty() {
        return Err(FairnessError::Invalid(
            "repeats, per_label and label_levels must be non-empty".into(),
        ));
    }
    if grouped.is_empty() {
        return Err(FairnessError::Invalid("no diseases to compare".into()));
    }
    let mut by_disease = Vec::with_capacity(grouped.len());
    for (disease, items) in grouped {
        let s = strata(items);
        for &level in &cfg.label_levels {
            let available = s.get(&level).map_or(0, Vec::len);
            if available < cfg.per_label {
                return Err(FairnessError::InsufficientStratum {
                    disease: disease.clone(),
                    level,
                    available,
                    needed: cfg.per_label,
                });
            }
        }
        by_disease.push((disease.as_str(), s));
    }

    let mut sd_sum = 0.0;
    let mut disease_sums = vec![0.0; by_disease.len()];
    let mut values = Vec::with_capacity(by_disease.len());
    let mut picked = Vec::with_capacity(cfg.per_label * cfg.label_levels.len());
    for r in 0..cfg.repeats {
        let mut rng = rng_for(cfg.seed, &format!("fairness-sd/{r}"));
        values.clear();
        for (i, (disease, s)) in by_disease.iter().enumerate() {
            picked.clear();
            for level in &cfg.label_levels {
                let pool = &s[level];
                for j in sample(&mut rng, pool.len(), cfg.per_label) {
                    picked.push(pool[j].clone());
                }
            }
            let v = metric(disease, &picked);
            disease_sums[i] += v;
            values.push(v);
        }
        sd_sum += population_sd(&values);
    }
    let repeats = cfg.repeats as f64;
    Ok(FairnessReport::DiseaseSd {
        mean_sd: sd_sum / repeats,
        repeats: cfg.repeats,
        per_label_count: cfg.per_label,
        label_levels: cfg.label_levels.clone(),
        seed: cfg.seed,
        gain_mode: cfg.gain,
        per_disease_mean: by_disease
            .iter()
            .zip(&disease_sums)
            .map(|((d, _), s)| (d.to_string(), s / repeats))
            .collect(),
    })
}

/// [`fairness_disease_sd_with`] using NDCG@k of the sample ranked by
/// model score (ties by doctor_id) against the true labels.
pub fn fairness_disease_sd(
    grouped: &BTreeMap<String, Vec<FairnessItem>>,
    cfg: &DiseaseSdConfig,
) -> Result<FairnessReport, FairnessError> {
    fairness_disease_sd_with(grouped, cfg, |_, sample| {
        let mut ranked: Vec<&FairnessItem> = sample.iter().collect();
        ranked.sort_by(|a, b| rank_order(a.model_score, &a.doctor_id, b.model_score, &b.doctor_id));
        let ids: Vec<&str> = ranked.iter().map(|i| i.doctor_id.as_str()).collect();
        let qrels: QueryQrels = sample.iter().map(|i| (i.doctor_id.clone(), i.true_label)).collect();
        ndcg_at_k(&ids, &qrels, cfg.k, cfg.gain)
    })
}

/// Re-ranks every judged query once per sensitive prefix and compares macro
/// NDCG@k across prefixes. An empty prefix means none.
pub fn fairness_perturbation<E>(
    queries: &[MedicalQuery],
    variants: &[String],
    qrels: &QrelsIndex,
    k: usize,
    gain: GainMode,
    mut ranker: impl FnMut(&MedicalQuery) -> Result<RankedList, E>,
) -> Result<FairnessReport, FairnessError>
where
    E: Into<Box<dyn StdError + Send + Sync>>,
{
    if variants.len() < 2 {
        return Err(FairnessError::Invalid("perturbation needs at least 2 variants".into()));
    }
    let judged: Vec<&MedicalQuery> = queries.iter().filter(|q| qrels.contains_key(&q.query_id)).collect();
    if judged.is_empty() {
        return Err(FairnessError::Invalid("no query has judgments".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for prefix in variants {
        let p = Some(prefix.as_str()).filter(|p| !p.trim().is_empty());
        let mut total = 0.0;
        for q in &judged {
            let list = ranker(&q.with_prefix(p)).map_err(|e| FairnessError::Ranker {
                query_id: q.query_id.clone(),
                source: e.into(),
            })?;
            total += ndcg_at_k(&list.doctor_ids(), &qrels[&q.query_id], k, gain);
        }
        rows.push(VariantRow {
            prefix: prefix.clone(),
            macro_ndcg: total / judged.len() as f64,
            queries: judged.len(),
        });
    }
    let mut deltas = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            deltas.push(PerturbationDelta {
                first: rows[i].prefix.clone(),
                second: rows[j].prefix.clone(),
                delta: rows[i].macro_ndcg - rows[j].macro_ndcg,
            });
        }
    }
    Ok(FairnessReport::Perturbation {
        k,
        gain_mode: gain,
        variants: rows,
        deltas,
    })
}
