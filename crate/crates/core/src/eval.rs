//! Retrieval quality measures.
//!
//! Rankings are per-query lists of keyword ids, best first. Labels are
//! per-query sets of relevant ids with optional per-id propensities.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_text, KeywordId};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("missing propensity for keyword {0}")]
    MissingPropensity(KeywordId),
    #[error("{rankings} rankings but {labels} label sets")]
    LengthMismatch { rankings: usize, labels: usize },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchType {
    Exact,
    Phrase,
}

/// A (query, keyword) quality judgment in `[0, 1]`.
pub trait Scorer: Sync {
    fn score(&self, query: &str, keyword: &str) -> f64;
    fn match_type(&self) -> MatchType;
}

/// Token-set overlap. Exact match scores the Jaccard index of the two token
/// sets; phrase match scores the fraction of keyword tokens found in the
/// query.
#[derive(Copy, Clone, Debug)]
pub struct OverlapScorer {
    pub match_type: MatchType,
}

impl Scorer for OverlapScorer {
    fn score(&self, query: &str, keyword: &str) -> f64 {
        let q: BTreeSet<String> = normalize_text(query).split(' ').filter(|t| !t.is_empty()).map(String::from).collect();
        let k: BTreeSet<String> = normalize_text(keyword).split(' ').filter(|t| !t.is_empty()).map(String::from).collect();
        let common = q.intersection(&k).count() as f64;
        match self.match_type {
            MatchType::Exact => {
                let union = q.union(&k).count();
                if union == 0 {
                    0.0
                } else {
                    common / union as f64
                }
            }
            MatchType::Phrase => {
                if k.is_empty() {
                    0.0
                } else {
                    common / k.len() as f64
                }
            }
        }
    }

    fn match_type(&self) -> MatchType {
        self.match_type
    }
}

/// Retrieved keyword texts for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryKeywords {
    pub query: String,
    pub keywords: Vec<String>,
}

/// Mean number of retrieved keywords per query scoring strictly above `s`.
pub fn good_keyword_density(
    retrievals: &[QueryKeywords],
    scorer: &dyn Scorer,
    s: f64,
) -> Result<f64, EvalError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(EvalError::BadThreshold(s));
    }
    if retrievals.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let good: usize = retrievals
        .iter()
        .map(|r| r.keywords.iter().filter(|k| scorer.score(&r.query, k) > s).count())
        .sum();
    Ok(good as f64 / retrievals.len() as f64)
}

/// A metric averaged over the queries that have labels.
#[derive(Copy, Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Averaged {
    pub value: f64,
    pub counted: usize,
    /// Queries skipped for having no labels.
    pub excluded: usize,
}

fn check(rankings: usize, labels: usize, k: usize) -> Result<(), EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if rankings != labels {
        return Err(EvalError::LengthMismatch { rankings, labels });
    }
    Ok(())
}

fn hits(ranking: &[KeywordId], gold: &BTreeSet<KeywordId>, k: usize) -> usize {
    ranking.iter().take(k).filter(|id| gold.contains(id)).count()
}

fn average<F>(labels: &[BTreeSet<KeywordId>], mut per_query: F) -> Result<Averaged, EvalError>
where
    F: FnMut(usize) -> Result<f64, EvalError>,
{
    let mut sum = 0.0;
    let mut counted = 0;
    for (i, gold) in labels.iter().enumerate() {
        if gold.is_empty() {
            continue;
        }
        sum += per_query(i)?;
        counted += 1;
    }
    Ok(Averaged {
        value: if counted == 0 { 0.0 } else { sum / counted as f64 },
        counted,
        excluded: labels.len() - counted,
    })
}

/// Hits in the top `k` over `k`, averaged over every query.
pub fn precision_at_k(
    rankings: &[Vec<KeywordId>],
    labels: &[BTreeSet<KeywordId>],
    k: usize,
) -> Result<f64, EvalError> {
    check(rankings.len(), labels.len(), k)?;
    if rankings.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let total: f64 = rankings
        .iter()
        .zip(labels)
        .map(|(r, g)| hits(r, g, k) as f64 / k as f64)
        .sum();
    Ok(total / rankings.len() as f64)
}

pub fn recall_at_k(
    rankings: &[Vec<KeywordId>],
    labels: &[BTreeSet<KeywordId>],
    k: usize,
) -> Result<Averaged, EvalError> {
    check(rankings.len(), labels.len(), k)?;
    average(labels, |i| Ok(hits(&rankings[i], &labels[i], k) as f64 / labels[i].len() as f64))
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 2) as f64).log2()
}

pub fn ndcg_at_k(
    rankings: &[Vec<KeywordId>],
    labels: &[BTreeSet<KeywordId>],
    k: usize,
) -> Result<Averaged, EvalError> {
    check(rankings.len(), labels.len(), k)?;
    average(labels, |i| {
        let gold = &labels[i];
        let dcg: f64 = rankings[i]
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, id)| gold.contains(id))
            .map(|(r, _)| discount(r))
            .sum();
        let ideal: f64 = (0..k.min(gold.len())).map(discount).sum();
        Ok(dcg / ideal)
    })
}

fn inverse_propensities(
    gold: &BTreeSet<KeywordId>,
    propensities: &HashMap<KeywordId, f64>,
) -> Result<Vec<f64>, EvalError> {
    let mut w: Vec<f64> = gold
        .iter()
        .map(|id| {
            propensities
                .get(id)
                .map(|p| 1.0 / p)
                .ok_or(EvalError::MissingPropensity(*id))
        })
        .collect::<Result<_, _>>()?;
    w.sort_by(|a, b| b.total_cmp(a));
    Ok(w)
}

/// Propensity-scored precision, normalized per query by the best score
/// achievable in `k` slots.
pub fn psp_at_k(
    rankings: &[Vec<KeywordId>],
    labels: &[BTreeSet<KeywordId>],
    propensities: &HashMap<KeywordId, f64>,
    k: usize,
) -> Result<Averaged, EvalError> {
    check(rankings.len(), labels.len(), k)?;
    average(labels, |i| {
        let w = inverse_propensities(&labels[i], propensities)?;
        let got: f64 = rankings[i]
            .iter()
            .take(k)
            .filter(|id| labels[i].contains(id))
            .map(|id| 1.0 / propensities[id])
            .sum();
        let ideal: f64 = w.iter().take(k).sum();
        Ok(got / ideal)
    })
}

/// Propensity-scored nDCG with the same ideal normalization.
pub fn psn_at_k(
    rankings: &[Vec<KeywordId>],
    labels: &[BTreeSet<KeywordId>],
    propensities: &HashMap<KeywordId, f64>,
    k: usize,
) -> Result<Averaged, EvalError> {
    check(rankings.len(), labels.len(), k)?;
    average(labels, |i| {
        let w = inverse_propensities(&labels[i], propensities)?;
        let got: f64 = rankings[i]
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, id)| labels[i].contains(id))
            .map(|(r, id)| discount(r) / propensities[id])
            .sum();
        let ideal: f64 = w.iter().take(k).enumerate().map(|(r, x)| x * discount(r)).sum();
        Ok(got / ideal)
    })
}

/// Keyword length histogram per channel label.
pub fn length_distribution<'a, I>(items: I) -> BTreeMap<String, BTreeMap<usize, usize>>
where
    I: IntoIterator<Item = (&'a str, usize)>,
{
    let mut out: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
    for (channel, len) in items {
        *out.entry(channel.to_string()).or_default().entry(len).or_default() += 1;
    }
    out
}

/// Relevant keyword ids per normalized query text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub labels: BTreeMap<String, BTreeSet<KeywordId>>,
    pub propensities: Option<HashMap<KeywordId, f64>>,
}

impl LabeledSet {
    /// Parses `query<TAB>id[,id...]` lines. Repeated queries merge.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut labels: BTreeMap<String, BTreeSet<KeywordId>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: &str| EvalError::Parse {
                line: n + 1,
                reason: reason.into(),
            };
            let (q, ids) = line.split_once('\t').ok_or_else(|| err("expected query<TAB>ids"))?;
            let set = labels.entry(normalize_text(q)).or_default();
            for id in ids.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                set.insert(KeywordId(id.parse().map_err(|_| err("bad keyword id"))?));
            }
        }
        Ok(Self {
            labels,
            propensities: None,
        })
    }

    /// Parses `id<TAB>p` lines with `p` in `(0, 1]`.
    pub fn parse_propensities(text: &str) -> Result<HashMap<KeywordId, f64>, EvalError> {
        let mut out = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: &str| EvalError::Parse {
                line: n + 1,
                reason: reason.into(),
            };
            let (id, p) = line.split_once('\t').ok_or_else(|| err("expected id<TAB>p"))?;
            let id: u32 = id.trim().parse().map_err(|_| err("bad keyword id"))?;
            let p: f64 = p.trim().parse().map_err(|_| err("bad propensity"))?;
            if !(p > 0.0 && p <= 1.0) {
                return Err(err("propensity outside (0, 1]"));
            }
            out.insert(KeywordId(id), p);
        }
        Ok(out)
    }

    pub fn get(&self, query: &str) -> BTreeSet<KeywordId> {
        self.labels.get(&normalize_text(query)).cloned().unwrap_or_default()
    }
}

/// One query's ranked output as consumed by [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct RankedQuery {
    pub query: String,
    pub results: Vec<(KeywordId, String)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub queries: usize,
    pub excluded_unlabeled: usize,
    pub scorer: Option<MatchType>,
    pub q_at: BTreeMap<String, f64>,
    pub p_at: BTreeMap<String, f64>,
    pub r_at: BTreeMap<String, f64>,
    pub ndcg_at: BTreeMap<String, f64>,
    pub psp_at: BTreeMap<String, f64>,
    pub psn_at: BTreeMap<String, f64>,
}

/// Computes every measure for every requested `k` and threshold. Ranking
/// measures need `labels`; Q@s needs a scorer.
pub fn evaluate(
    ranked: &[RankedQuery],
    labels: Option<&LabeledSet>,
    scorer: Option<&dyn Scorer>,
    ks: &[usize],
    thresholds: &[f64],
) -> Result<MetricsReport, EvalError> {
    if ranked.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut report = MetricsReport {
        queries: ranked.len(),
        scorer: scorer.map(Scorer::match_type),
        ..MetricsReport::default()
    };
    if let Some(scorer) = scorer {
        let texts: Vec<QueryKeywords> = ranked
            .iter()
            .map(|r| QueryKeywords {
                query: r.query.clone(),
                keywords: r.results.iter().map(|(_, t)| t.clone()).collect(),
            })
            .collect();
        for &s in thresholds {
            report.q_at.insert(format!("{s}"), good_keyword_density(&texts, scorer, s)?);
        }
    }
    if let Some(set) = labels {
        let rankings: Vec<Vec<KeywordId>> = ranked
            .iter()
            .map(|r| r.results.iter().map(|(id, _)| *id).collect())
            .collect();
        let gold: Vec<BTreeSet<KeywordId>> = ranked.iter().map(|r| set.get(&r.query)).collect();
        report.excluded_unlabeled = gold.iter().filter(|g| g.is_empty()).count();
        for &k in ks {
            let key = k.to_string();
            report.p_at.insert(key.clone(), precision_at_k(&rankings, &gold, k)?);
            report.r_at.insert(key.clone(), recall_at_k(&rankings, &gold, k)?.value);
            report.ndcg_at.insert(key.clone(), ndcg_at_k(&rankings, &gold, k)?.value);
            if let Some(p) = &set.propensities {
                report.psp_at.insert(key.clone(), psp_at_k(&rankings, &gold, p, k)?.value);
                report.psn_at.insert(key, psn_at_k(&rankings, &gold, p, k)?.value);
            }
        }
    }
    Ok(report)
}
