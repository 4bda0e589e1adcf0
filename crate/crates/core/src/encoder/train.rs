//! Mini-batch training with per-epoch negative mining.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::loss::joint_loss_value;
use super::{
    joint_loss, mine_negatives, EncoderError, EncoderParams, LossBreakdown, LossConfig,
    ModelDims, Similarity, Triple,
};
use crate::corpus::{read_text, KeywordId, TokenId, TrainingPair, Vocab, DEFAULT_MAX_LEN};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("no training pairs")]
    EmptyPairs,
    #[error("{clusters} clusters requested for {queries} queries")]
    TooManyClusters { clusters: usize, queries: usize },
    #[error("loss diverged at epoch {epoch}, batch {batch}: {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Training hyperparameters, loadable from JSON. Unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// γ
    pub margin: f64,
    /// α
    pub nlg_weight: f64,
    pub similarity: Similarity,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Query clusters for negative mining; defaults to `ceil(pairs / batch_size)`.
    pub cluster_count: Option<usize>,
    pub negatives_per_positive: usize,
    pub seed: u64,
    pub dim: usize,
    pub dense_dim: usize,
    pub hidden: usize,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            nlg_weight: 1.0,
            similarity: Similarity::Cosine,
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 20,
            batch_size: 32,
            cluster_count: None,
            negatives_per_positive: 1,
            seed: 0,
            dim: 32,
            dense_dim: 32,
            hidden: 64,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = read_text(path).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            nlg_weight: self.nlg_weight,
            similarity: self.similarity,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.margin >= 0.0) {
            return bad("margin must be >= 0");
        }
        if !(self.nlg_weight >= 0.0) {
            return bad("nlg_weight must be >= 0");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 || self.negatives_per_positive == 0 {
            return bad("batch_size and negatives_per_positive must be >= 1");
        }
        if self.cluster_count == Some(0) {
            return bad("cluster_count must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: EncoderParams,
    /// Full-dataset loss at initialization, against the first epoch's negatives.
    pub initial_loss: LossBreakdown,
    /// Full-dataset loss after training, against the same negatives.
    pub final_loss: LossBreakdown,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean joint loss over all pairs for fixed negatives.
pub fn dataset_loss(
    params: &EncoderParams,
    pairs: &[TrainingPair],
    negatives: &[Vec<KeywordId>],
    keyword_tokens: &HashMap<KeywordId, &[TokenId]>,
    cfg: &LossConfig,
) -> Result<LossBreakdown, EncoderError> {
    let triples: Vec<Triple<'_>> = (0..pairs.len())
        .map(|i| triple(pairs, negatives, keyword_tokens, i))
        .collect();
    joint_loss_value(params, &triples, cfg)
}

fn triple<'a>(
    pairs: &'a [TrainingPair],
    negatives: &[Vec<KeywordId>],
    keyword_tokens: &HashMap<KeywordId, &'a [TokenId]>,
    i: usize,
) -> Triple<'a> {
    Triple {
        query: pairs[i].query.ids(),
        keyword: pairs[i].keyword.ids(),
        negatives: negatives[i].iter().map(|kw| keyword_tokens[kw]).collect(),
    }
}

fn embed_all<'a, I>(params: &EncoderParams, seqs: I) -> Result<Vec<Vec<f64>>, EncoderError>
where
    I: IntoParallelIterator<Item = &'a [TokenId]>,
    I::Iter: IndexedParallelIterator,
{
    seqs.into_par_iter().map(|s| params.embed(s)).collect()
}

/// Trains a fresh encoder. A fixed seed reproduces the parameter
/// trajectory bit for bit, independently of the rayon thread count.
pub fn train(
    config: &TrainConfig,
    pairs: &[TrainingPair],
    vocab: &Vocab,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyPairs);
    }
    let dims = ModelDims {
        vocab: vocab.len(),
        dim: config.dim,
        dense_dim: config.dense_dim,
        hidden: config.hidden,
        max_len: config.max_len,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = EncoderParams::random(dims, &mut rng)?;
    params.vocab_checksum = vocab.checksum();
    let loss_cfg = config.loss();

    let mut keyword_tokens: HashMap<KeywordId, &[TokenId]> = HashMap::new();
    for p in pairs {
        keyword_tokens.insert(p.keyword_id, p.keyword.ids());
    }
    let mut keyword_ids: Vec<KeywordId> = keyword_tokens.keys().copied().collect();
    keyword_ids.sort();
    let clusters = config
        .cluster_count
        .unwrap_or_else(|| pairs.len().div_ceil(config.batch_size))
        .min(pairs.len());

    let mut velocity = params.zeros_like();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut reference: Option<(Vec<Vec<KeywordId>>, LossBreakdown)> = None;
    for epoch in 0..config.epochs {
        let query_emb = embed_all(&params, pairs.par_iter().map(|p| p.query.ids()))?;
        let kw_emb = embed_all(
            &params,
            keyword_ids.par_iter().map(|k| crate::corpus::keyword_surface(keyword_tokens[k])),
        )?;
        let kw_emb: HashMap<KeywordId, Vec<f64>> = keyword_ids.iter().copied().zip(kw_emb).collect();
        let mined = mine_negatives(
            &query_emb,
            &kw_emb,
            pairs,
            clusters,
            config.negatives_per_positive,
            config.batch_size,
            &mut rng,
        )?;
        if reference.is_none() {
            let initial = dataset_loss(&params, pairs, &mined.negatives, &keyword_tokens, &loss_cfg)?;
            reference = Some((mined.negatives.clone(), initial));
        }
        let mut sum = 0.0;
        for (b, batch) in mined.batches.iter().enumerate() {
            let triples: Vec<Triple<'_>> = batch
                .iter()
                .map(|&i| triple(pairs, &mined.negatives, &keyword_tokens, i))
                .collect();
            let (loss, grad) = joint_loss(&params, &triples, &loss_cfg)?;
            if !loss.total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    loss: loss.total,
                });
            }
            sum += loss.total;
            for (v, g) in velocity.tensors_mut().into_iter().zip(grad.tensors()) {
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = config.momentum * *vi - config.learning_rate * gi;
                }
            }
            params.add_scaled(1.0, &velocity);
            if !params.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    loss: f64::NAN,
                });
            }
        }
        epoch_losses.push(sum / mined.batches.len() as f64);
    }

    let (initial_loss, final_loss) = match reference {
        Some((negs, initial)) => {
            let fin = dataset_loss(&params, pairs, &negs, &keyword_tokens, &loss_cfg)?;
            (initial, fin)
        }
        None => Default::default(),
    };
    Ok(TrainReport {
        params,
        initial_loss,
        final_loss,
        epoch_losses,
    })
}
