//! In-batch hard negative mining over query clusters.
//!
//! Queries are grouped by balanced k-means on their current dense
//! embeddings, batches are cut from single clusters, and each pair's
//! negatives are the most similar keywords of the other pairs in its batch
//! that are not gold for the query.

use std::collections::{BTreeSet, HashMap};

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::TrainError;
use crate::corpus::{normalize_text, KeywordId, TrainingPair};

#[derive(Clone, Debug, Default)]
pub struct MinedBatches {
    /// Pair indices per batch.
    pub batches: Vec<Vec<usize>>,
    /// Negative keyword ids per pair, hardest first.
    pub negatives: Vec<Vec<KeywordId>>,
    /// Cluster of each pair.
    pub clusters: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spherical k-means where every cluster holds at most `ceil(n / k)` points.
/// Assignment is greedy over (point, centroid) pairs by descending
/// similarity.
pub fn balanced_kmeans<R: Rng>(
    points: &[Vec<f64>],
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Vec<usize> {
    let n = points.len();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let k = k.min(n);
    let cap = n.div_ceil(k);
    let mut centroids: Vec<Vec<f64>> = index::sample(rng, n, k)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    let mut assign = vec![usize::MAX; n];
    let mut order: Vec<(f64, usize, usize)> = Vec::with_capacity(n * k);
    for _ in 0..iters.max(1) {
        order.clear();
        for (i, p) in points.iter().enumerate() {
            for (c, cen) in centroids.iter().enumerate() {
                order.push((dot(p, cen), i, c));
            }
        }
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = vec![usize::MAX; n];
        let mut sizes = vec![0usize; k];
        for &(_, i, c) in &order {
            if next[i] == usize::MAX && sizes[c] < cap {
                next[i] = c;
                sizes[c] += 1;
            }
        }
        let converged = next == assign;
        assign = next;
        if converged {
            break;
        }
        for (c, cen) in centroids.iter_mut().enumerate() {
            let mut sum = vec![0.0; cen.len()];
            for (i, p) in points.iter().enumerate() {
                if assign[i] == c {
                    sum.iter_mut().zip(p).for_each(|(s, x)| *s += x);
                }
            }
            let norm = dot(&sum, &sum).sqrt();
            if norm > 0.0 {
                *cen = sum.into_iter().map(|x| x / norm).collect();
            }
        }
    }
    assign
}

/// Clusters the pairs' queries, cuts single-cluster batches and picks the
/// hardest non-gold in-batch keywords for every pair.
///
/// A pair whose batch offers no usable candidate gets one uniformly drawn
/// non-gold keyword from the whole training set instead.
pub fn mine_negatives<R: Rng>(
    query_emb: &[Vec<f64>],
    keyword_emb: &HashMap<KeywordId, Vec<f64>>,
    pairs: &[TrainingPair],
    cluster_count: usize,
    negatives_per_positive: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<MinedBatches, TrainError> {
    assert_eq!(query_emb.len(), pairs.len(), "one query embedding per pair");
    if cluster_count == 0 || cluster_count > pairs.len() {
        return Err(TrainError::TooManyClusters {
            clusters: cluster_count,
            queries: pairs.len(),
        });
    }
    let mut gold: HashMap<String, BTreeSet<KeywordId>> = HashMap::new();
    for p in pairs {
        gold.entry(normalize_text(&p.query_text))
            .or_default()
            .insert(p.keyword_id);
    }
    let gold_of: Vec<&BTreeSet<KeywordId>> = pairs
        .iter()
        .map(|p| &gold[&normalize_text(&p.query_text)])
        .collect();

    let clusters = balanced_kmeans(query_emb, cluster_count, 10, rng);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cluster_count];
    for (i, &c) in clusters.iter().enumerate() {
        members[c].push(i);
    }
    let mut batches = Vec::new();
    for mut m in members {
        m.shuffle(rng);
        batches.extend(m.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);

    let all_keywords: Vec<KeywordId> = {
        let mut v: Vec<_> = keyword_emb.keys().copied().collect();
        v.sort();
        v
    };
    let mut negatives = vec![Vec::new(); pairs.len()];
    for batch in &batches {
        let candidates: BTreeSet<KeywordId> = batch.iter().map(|&i| pairs[i].keyword_id).collect();
        for &i in batch {
            let q = &query_emb[i];
            let mut scored: Vec<(f64, KeywordId)> = candidates
                .iter()
                .filter(|kw| !gold_of[i].contains(kw))
                .map(|&kw| (dot(q, &keyword_emb[&kw]), kw))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored.truncate(negatives_per_positive.max(1));
            negatives[i] = scored.into_iter().map(|(_, kw)| kw).collect();
            if negatives[i].is_empty() {
                let pool: Vec<KeywordId> = all_keywords
                    .iter()
                    .copied()
                    .filter(|kw| !gold_of[i].contains(kw))
                    .collect();
                if let Some(&kw) = pool.get(rng.random_range(0..pool.len().max(1))) {
                    negatives[i].push(kw);
                }
            }
        }
    }
    Ok(MinedBatches {
        batches,
        negatives,
        clusters,
    })
}
