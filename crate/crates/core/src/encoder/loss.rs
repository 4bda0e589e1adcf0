//! Joint objective: triplet margin over dense similarities plus the summed
//! token negative log-likelihood of the keyword under the query's table.
//!
//! For a batch of `n` triples,
//!
//! ```text
//! L = 1/n Σ_i max_j [ s(q_i, l_ij) - s(q_i, k_i) + γ ]_+  +  α/n Σ_i Σ_t -log p(K_t = k_it | q_i)
//! ```
//!
//! where the NLL runs over every keyword position through EOW. With several
//! negatives per pair only the hardest one contributes.

use ndarray::{s, Array1, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EncoderError, EncoderParams};
use crate::corpus::{keyword_surface, TokenId};
use crate::table::logsumexp;

/// Pairs per gradient-reduction chunk. Fixed so that the summation order,
/// and hence the result, does not depend on the thread count.
const CHUNK: usize = 16;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Inner product of unit-normalized embeddings.
    #[default]
    Cosine,
    /// Raw inner product of the dense projections.
    Dot,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// γ
    pub margin: f64,
    /// α
    pub nlg_weight: f64,
    pub similarity: Similarity,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            nlg_weight: 1.0,
            similarity: Similarity::Cosine,
        }
    }
}

/// One training example: query tokens, keyword tokens (with EOW) and the
/// mined negative keywords (with EOW).
#[derive(Clone, Debug)]
pub struct Triple<'a> {
    pub query: &'a [TokenId],
    pub keyword: &'a [TokenId],
    pub negatives: Vec<&'a [TokenId]>,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean hinge term.
    pub dense: f64,
    /// Mean summed NLL, before weighting by α.
    pub nll: f64,
}

struct DenseForward<'a> {
    tokens: &'a [TokenId],
    pool: Array1<f64>,
    emb: Array1<f64>,
    norm: f64,
}

fn dense_forward<'a>(
    p: &EncoderParams,
    tokens: &'a [TokenId],
    sim: Similarity,
) -> Result<DenseForward<'a>, EncoderError> {
    p.check_input(tokens)?;
    let pool = p.pool(tokens);
    let z = p.dense_proj.dot(&pool);
    let (emb, norm) = match sim {
        Similarity::Cosine => {
            let norm = z.dot(&z).sqrt();
            if norm == 0.0 {
                return Err(EncoderError::DegenerateEmbedding);
            }
            (z / norm, norm)
        }
        Similarity::Dot => (z, 1.0),
    };
    Ok(DenseForward {
        tokens,
        pool,
        emb,
        norm,
    })
}

fn add_outer(m: &mut ndarray::ArrayViewMut2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in m.axis_iter_mut(Axis(0)).zip(a.iter()) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

/// Backpropagates `d_emb` through the dense head; returns d(pool).
fn dense_backward(
    p: &EncoderParams,
    f: &DenseForward<'_>,
    d_emb: &Array1<f64>,
    sim: Similarity,
    g: &mut EncoderParams,
) -> Array1<f64> {
    let dz = match sim {
        Similarity::Cosine => (d_emb - &(&f.emb * f.emb.dot(d_emb))) / f.norm,
        Similarity::Dot => d_emb.clone(),
    };
    add_outer(&mut g.dense_proj.view_mut(), dz.view(), f.pool.view());
    p.dense_proj.t().dot(&dz)
}

fn scatter_pool(g: &mut EncoderParams, tokens: &[TokenId], d_pool: &Array1<f64>) {
    let w = 1.0 / tokens.len() as f64;
    for &t in tokens {
        g.token_emb.row_mut(t as usize).scaled_add(w, d_pool);
    }
}

/// Loss terms of one triple; gradients scaled by `scale` are accumulated
/// into `g` when present.
fn triple_terms(
    p: &EncoderParams,
    triple: &Triple<'_>,
    cfg: &LossConfig,
    scale: f64,
    mut g: Option<&mut EncoderParams>,
) -> Result<(f64, f64), EncoderError> {
    let sim = cfg.similarity;
    let q = dense_forward(p, triple.query, sim)?;
    let k = dense_forward(p, keyword_surface(triple.keyword), sim)?;
    let negs = triple
        .negatives
        .iter()
        .map(|l| dense_forward(p, keyword_surface(l), sim))
        .collect::<Result<Vec<_>, _>>()?;
    if triple.keyword.len() > p.dims.max_len {
        return Err(EncoderError::TooLong {
            len: triple.keyword.len(),
            max: p.dims.max_len,
        });
    }
    p.check_input(triple.keyword)?;

    let s_pos = q.emb.dot(&k.emb);
    let mut hardest = 0;
    let mut s_neg = f64::NEG_INFINITY;
    for (j, l) in negs.iter().enumerate() {
        let s = q.emb.dot(&l.emb);
        if s > s_neg {
            s_neg = s;
            hardest = j;
        }
    }
    let violation = s_neg - s_pos + cfg.margin;
    let hinge = violation.max(0.0);

    let mut d_pool_q = Array1::<f64>::zeros(p.dims.dim);
    if let Some(g) = g.as_deref_mut() {
        if violation > 0.0 {
            let l = &negs[hardest];
            let d_q = (&l.emb - &k.emb) * scale;
            d_pool_q += &dense_backward(p, &q, &d_q, sim, g);
            let d_k = &q.emb * -scale;
            let d_pool_k = dense_backward(p, &k, &d_k, sim, g);
            scatter_pool(g, k.tokens, &d_pool_k);
            let d_l = &q.emb * scale;
            let d_pool_l = dense_backward(p, l, &d_l, sim, g);
            scatter_pool(g, l.tokens, &d_pool_l);
        }
    }

    let d = p.dims.dim;
    let mut nll = 0.0;
    for (t, &target) in triple.keyword.iter().enumerate() {
        let (pre, hidden) = p.hidden_at(q.pool.view(), t);
        let logits = p.out_proj.dot(&hidden) + &p.out_bias;
        let lse = logsumexp(logits.as_slice().unwrap());
        nll += lse - logits[target as usize];
        let Some(g) = g.as_deref_mut() else { continue };
        if cfg.nlg_weight == 0.0 {
            continue;
        }
        let w = cfg.nlg_weight * scale;
        let mut d_logits = logits.mapv(|x| (x - lse).exp() * w);
        d_logits[target as usize] -= w;
        add_outer(&mut g.out_proj.view_mut(), d_logits.view(), hidden.view());
        g.out_bias += &d_logits;
        let d_hidden = p.out_proj.t().dot(&d_logits);
        let d_pre = ndarray::Zip::from(&d_hidden)
            .and(&pre)
            .map_collect(|&dh, &u| if u > 0.0 { dh } else { 0.0 });
        let mut input = Array1::zeros(2 * d);
        input.slice_mut(s![..d]).assign(&q.pool);
        input.slice_mut(s![d..]).assign(&p.pos_emb.row(t));
        add_outer(&mut g.hidden_proj.view_mut(), d_pre.view(), input.view());
        g.hidden_bias += &d_pre;
        let d_input = p.hidden_proj.t().dot(&d_pre);
        d_pool_q += &d_input.slice(s![..d]);
        g.pos_emb.row_mut(t).scaled_add(1.0, &d_input.slice(s![d..]));
    }
    if let Some(g) = g {
        scatter_pool(g, q.tokens, &d_pool_q);
    }
    Ok((hinge, nll))
}

fn validate(batch: &[Triple<'_>]) -> Result<(), EncoderError> {
    if batch.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    if let Some(i) = batch.iter().position(|t| t.negatives.is_empty()) {
        return Err(EncoderError::NoNegatives(i));
    }
    Ok(())
}

fn breakdown(hinge: f64, nll: f64, n: usize, cfg: &LossConfig) -> LossBreakdown {
    let dense = hinge / n as f64;
    let nll = nll / n as f64;
    LossBreakdown {
        total: dense + cfg.nlg_weight * nll,
        dense,
        nll,
    }
}

/// Batch loss and its exact gradient with respect to every parameter.
pub fn joint_loss(
    params: &EncoderParams,
    batch: &[Triple<'_>],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, EncoderParams), EncoderError> {
    validate(batch)?;
    let scale = 1.0 / batch.len() as f64;
    let partials = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            let mut sums = (0.0, 0.0);
            for triple in chunk {
                let (h, n) = triple_terms(params, triple, cfg, scale, Some(&mut g))?;
                sums.0 += h;
                sums.1 += n;
            }
            Ok((sums, g))
        })
        .collect::<Result<Vec<_>, EncoderError>>()?;
    let mut grad = params.zeros_like();
    let (mut hinge, mut nll) = (0.0, 0.0);
    for ((h, n), g) in partials {
        hinge += h;
        nll += n;
        grad.add_scaled(1.0, &g);
    }
    Ok((breakdown(hinge, nll, batch.len(), cfg), grad))
}

/// Loss value only.
pub fn joint_loss_value(
    params: &EncoderParams,
    batch: &[Triple<'_>],
    cfg: &LossConfig,
) -> Result<LossBreakdown, EncoderError> {
    validate(batch)?;
    let partials = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().try_fold((0.0, 0.0), |acc, t| {
                triple_terms(params, t, cfg, 0.0, None).map(|(h, n)| (acc.0 + h, acc.1 + n))
            })
        })
        .collect::<Result<Vec<_>, EncoderError>>()?;
    let (hinge, nll) = partials
        .into_iter()
        .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(breakdown(hinge, nll, batch.len(), cfg))
}
