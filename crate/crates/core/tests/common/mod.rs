//! Generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use unikw_core::corpus::parse_pairs;
use unikw_core::encoder::{Similarity, TrainReport, Triple};
use unikw_core::retriever::BundleOptions;
use unikw_core::synth::{mapping_corpus, SynthCorpus};
use unikw_core::{
    train, Catalog, Direction, EncoderParams, EngineBundle, IndexKind, KeywordId, KeywordTrie, ProbTable,
    TokenId, TrainConfig, Vocab, EOW,
};

/// A random catalog over a small alphabet and a random table to decode.
pub struct Instance {
    /// Keyword tokens including the trailing EOW, indexed by id.
    pub keywords: Vec<Vec<TokenId>>,
    pub vocab: usize,
    pub table: ProbTable,
    pub forward: KeywordTrie,
    pub reversed: KeywordTrie,
}

impl Instance {
    pub fn random<R: Rng>(rng: &mut R, max_keywords: usize, max_tokens: usize) -> Self {
        let vocab = rng.random_range(5..=12usize);
        let rows = max_tokens + 1;
        let target = rng.random_range(1..=max_keywords);
        let mut seen = BTreeSet::new();
        let mut keywords = Vec::new();
        for _ in 0..target * 4 {
            if keywords.len() == target {
                break;
            }
            let len = rng.random_range(1..=max_tokens);
            let mut k: Vec<TokenId> = (0..len).map(|_| rng.random_range(3..vocab as TokenId)).collect();
            k.push(EOW);
            if seen.insert(k.clone()) {
                keywords.push(k);
            }
        }
        let scale = rng.random_range(0.5..4.0);
        let logits: Vec<f64> = (0..rows * vocab)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        let table = ProbTable::from_logits(rows, vocab, logits);
        Self::new(keywords, vocab, table)
    }

    pub fn new(keywords: Vec<Vec<TokenId>>, vocab: usize, table: ProbTable) -> Self {
        let entries = || keywords.iter().enumerate().map(|(i, k)| (KeywordId(i as u32), k.as_slice()));
        let forward = KeywordTrie::build(entries(), Direction::Forward, 0).unwrap();
        let reversed = KeywordTrie::build(entries(), Direction::Reversed, 0).unwrap();
        Self {
            keywords,
            vocab,
            table,
            forward,
            reversed,
        }
    }

    /// Exact score of a keyword: the sum of its per-position table entries.
    pub fn score(&self, id: usize) -> f64 {
        self.keywords[id]
            .iter()
            .enumerate()
            .map(|(t, &tok)| self.table.get(t, tok))
            .sum()
    }

    pub fn min_token_logprob(&self, id: usize) -> f64 {
        self.keywords[id]
            .iter()
            .enumerate()
            .map(|(t, &tok)| self.table.get(t, tok))
            .fold(f64::INFINITY, f64::min)
    }

    /// Every keyword ranked by exact score, ties by smaller id.
    pub fn brute_force(&self) -> Vec<(KeywordId, f64)> {
        let mut all: Vec<(KeywordId, f64)> = (0..self.keywords.len())
            .map(|i| (KeywordId(i as u32), self.score(i)))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all
    }

    /// Tokens that follow `prefix` in some catalog keyword.
    pub fn followers(&self, prefix: &[TokenId]) -> BTreeSet<TokenId> {
        self.keywords
            .iter()
            .filter(|k| k.len() > prefix.len() && k.starts_with(prefix))
            .map(|k| k[prefix.len()])
            .collect()
    }

    /// Tokens that precede the reversed `suffix` among keywords of
    /// `len` tokens (EOW included).
    pub fn reversed_followers(&self, len: usize, rev_suffix: &[TokenId]) -> BTreeSet<TokenId> {
        self.keywords
            .iter()
            .filter(|k| k.len() == len && k.len() > rev_suffix.len())
            .filter(|k| k.iter().rev().zip(rev_suffix).all(|(a, b)| a == b))
            .map(|k| k[k.len() - 1 - rev_suffix.len()])
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major matrix.
pub struct Mat {
    pub data: Vec<f64>,
    pub cols: usize,
}

fn row(m: &Mat, i: usize) -> &[f64] {
    &m.data[i * m.cols..(i + 1) * m.cols]
}

/// Plain copies of the parameter tensors.
pub struct PlainParams {
    pub e: Mat,
    pub p: Mat,
    pub a: Mat,
    pub u: Mat,
    pub b: Vec<f64>,
    pub w: Mat,
    pub c: Vec<f64>,
    pub d: usize,
    pub h: usize,
    pub v: usize,
}

impl PlainParams {
    pub fn from(params: &EncoderParams) -> Self {
        let t = params.tensors();
        let dims = params.dims;
        let m = |i: usize, cols: usize| Mat {
            data: t[i].to_vec(),
            cols,
        };
        Self {
            e: m(0, dims.dim),
            p: m(1, dims.dim),
            a: m(2, dims.dim),
            u: m(3, 2 * dims.dim),
            b: t[4].to_vec(),
            w: m(5, dims.hidden),
            c: t[6].to_vec(),
            d: dims.dim,
            h: dims.hidden,
            v: dims.vocab,
        }
    }

    fn pool(&self, tokens: &[TokenId]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for &t in tokens {
            for (o, x) in out.iter_mut().zip(row(&self.e, t as usize)) {
                *o += x;
            }
        }
        out.iter().map(|x| x / tokens.len() as f64).collect()
    }

    fn dense(&self, tokens: &[TokenId], sim: Similarity) -> Vec<f64> {
        let pool = self.pool(tokens);
        let z: Vec<f64> = (0..self.a.data.len() / self.d).map(|i| dot(row(&self.a, i), &pool)).collect();
        match sim {
            Similarity::Dot => z,
            Similarity::Cosine => {
                let n = dot(&z, &z).sqrt();
                z.iter().map(|x| x / n).collect()
            }
        }
    }

    /// Hidden pre-activations at position `t` for a query.
    fn pre(&self, pool: &[f64], t: usize) -> Vec<f64> {
        let mut input = pool.to_vec();
        input.extend_from_slice(row(&self.p, t));
        (0..self.h).map(|i| dot(row(&self.u, i), &input) + self.b[i]).collect()
    }

    fn logprob(&self, pool: &[f64], t: usize, token: TokenId) -> f64 {
        let hid: Vec<f64> = self.pre(pool, t).into_iter().map(|x| x.max(0.0)).collect();
        let logits: Vec<f64> = (0..self.v).map(|j| dot(row(&self.w, j), &hid) + self.c[j]).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        logits[token as usize] - lse
    }
}

/// Distance of the batch from the loss's non-differentiable points.
pub struct Kinks {
    pub min_preactivation: f64,
    pub min_hinge: f64,
    pub min_negative_gap: f64,
}

/// The joint objective computed from scratch with plain loops.
pub fn oracle_loss(
    params: &EncoderParams,
    batch: &[Triple<'_>],
    margin: f64,
    alpha: f64,
    sim: Similarity,
) -> (f64, Kinks) {
    let p = PlainParams::from(params);
    let surface = |k: &[TokenId]| -> Vec<TokenId> {
        let s: Vec<TokenId> = k.iter().copied().filter(|&t| t != EOW).collect();
        if s.is_empty() {
            vec![unikw_core::UNK]
        } else {
            s
        }
    };
    let mut kinks = Kinks {
        min_preactivation: f64::INFINITY,
        min_hinge: f64::INFINITY,
        min_negative_gap: f64::INFINITY,
    };
    let mut dense = 0.0;
    let mut nll = 0.0;
    for tr in batch {
        let q = p.dense(tr.query, sim);
        let sk = dot(&q, &p.dense(&surface(tr.keyword), sim));
        let mut negs: Vec<f64> = tr.negatives.iter().map(|l| dot(&q, &p.dense(&surface(l), sim))).collect();
        negs.sort_by(|a, b| b.total_cmp(a));
        let v = negs[0] - sk + margin;
        dense += v.max(0.0);
        kinks.min_hinge = kinks.min_hinge.min(v.abs());
        if negs.len() > 1 {
            kinks.min_negative_gap = kinks.min_negative_gap.min(negs[0] - negs[1]);
        }
        let pool = p.pool(tr.query);
        for (t, &tok) in tr.keyword.iter().enumerate() {
            nll -= p.logprob(&pool, t, tok);
            if alpha > 0.0 {
                for x in p.pre(&pool, t) {
                    kinks.min_preactivation = kinks.min_preactivation.min(x.abs());
                }
            }
        }
    }
    let n = batch.len() as f64;
    (dense / n + alpha * nll / n, kinks)
}

pub fn random_tokens<R: Rng>(rng: &mut R, vocab: usize, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(1..vocab as TokenId)).collect()
}

pub fn random_keyword<R: Rng>(rng: &mut R, vocab: usize, max_len: usize) -> Vec<TokenId> {
    let len = rng.random_range(1..max_len);
    let pool: Vec<TokenId> = (3..vocab as TokenId).collect();
    let mut k: Vec<TokenId> = (0..len).map(|_| *pool.choose(rng).unwrap()).collect();
    k.push(EOW);
    k
}

pub struct Trained {
    pub corpus: SynthCorpus,
    pub bundle: EngineBundle,
    pub report: TrainReport,
    pub seconds: f64,
}

pub fn training_config() -> TrainConfig {
    TrainConfig {
        epochs: 25,
        max_len: 6,
        seed: 7,
        ..TrainConfig::default()
    }
}

/// Trains on the 200-keyword, 1000-query mapping corpus and builds a bundle.
pub fn train_synthetic(config: &TrainConfig, kind: IndexKind) -> Trained {
    let start = Instant::now();
    let corpus = mapping_corpus(200, 5, 1, 11);
    let tsv = corpus.pairs_tsv();
    let lines = corpus.keywords.iter().map(String::as_str).chain(tsv.lines());
    let vocab = Vocab::from_lines(lines, 1).unwrap();
    let catalog = Catalog::from_lines(corpus.keywords.iter().cloned());
    let pairs = parse_pairs(&tsv, &vocab, &catalog, config.max_len).unwrap();
    assert_eq!(pairs.malformed, 0);
    let report = train(config, &pairs.pairs, &vocab).unwrap();
    let options = BundleOptions {
        kind,
        ..BundleOptions::default()
    };
    let bundle = EngineBundle::build(report.params.clone(), vocab, catalog, &options).unwrap();
    Trained {
        corpus,
        bundle,
        report,
        seconds: start.elapsed().as_secs_f64(),
    }
}
