//! Two-headed encoder: one forward pass yields a unit-norm dense embedding
//! and an `M × V` table of per-position token log-probabilities.
//!
//! The model is deliberately small. Token embeddings are mean-pooled; the
//! dense head is a linear projection of the pool, and the generative head is
//! a position-conditioned feed-forward layer over `[pool ; position]`:
//!
//! ```text
//! dense    = normalize(A · pool)
//! hidden_t = relu(U · [pool ; P_t] + b)
//! row_t    = log_softmax(W · hidden_t + c)
//! ```
//!
//! Everything is `f64`, which is what makes exact finite-difference checks of
//! the training objective possible.

mod loss;
mod mining;
mod train;

pub use loss::{joint_loss, joint_loss_value, LossBreakdown, LossConfig, Similarity, Triple};
pub use mining::{balanced_kmeans, mine_negatives, MinedBatches};
pub use train::{dataset_loss, train, TrainConfig, TrainError, TrainReport};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::corpus::TokenId;
use crate::table::{log_softmax_in_place, ProbTable};

const MAGIC: &[u8; 4] = b"KENC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("sequence of length {len} exceeds maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("dense projection collapsed to the zero vector")]
    DegenerateEmbedding,
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch item {0} has no negatives")]
    NoNegatives(usize),
    #[error("invalid model dimensions: {0}")]
    BadDims(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// V
    pub vocab: usize,
    /// d, token and position embedding width
    pub dim: usize,
    /// d_dr
    pub dense_dim: usize,
    /// h
    pub hidden: usize,
    /// M
    pub max_len: usize,
}

impl ModelDims {
    fn validate(&self) -> Result<(), EncoderError> {
        let all = [self.vocab, self.dim, self.dense_dim, self.hidden, self.max_len];
        if all.contains(&0) {
            return Err(EncoderError::BadDims(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Trainable state. Also used as the gradient container, since gradients
/// have exactly the parameters' shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: ModelDims,
    /// Checksum of the vocab the model was trained against.
    pub vocab_checksum: u64,
    /// E, V × d
    pub token_emb: Array2<f64>,
    /// P, M × d
    pub pos_emb: Array2<f64>,
    /// A, d_dr × d
    pub dense_proj: Array2<f64>,
    /// U, h × 2d
    pub hidden_proj: Array2<f64>,
    /// b, h
    pub hidden_bias: Array1<f64>,
    /// W, V × h
    pub out_proj: Array2<f64>,
    /// c, V
    pub out_bias: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 7] = [
    "token_emb",
    "pos_emb",
    "dense_proj",
    "hidden_proj",
    "hidden_bias",
    "out_proj",
    "out_bias",
];

impl EncoderParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims {
            vocab,
            dim,
            dense_dim,
            hidden,
            max_len,
        } = dims;
        Self {
            dims,
            vocab_checksum: 0,
            token_emb: Array2::zeros((vocab, dim)),
            pos_emb: Array2::zeros((max_len, dim)),
            dense_proj: Array2::zeros((dense_dim, dim)),
            hidden_proj: Array2::zeros((hidden, 2 * dim)),
            hidden_bias: Array1::zeros(hidden),
            out_proj: Array2::zeros((vocab, hidden)),
            out_bias: Array1::zeros(vocab),
        }
    }

    /// Gaussian init scaled by fan-in; biases start at zero.
    pub fn random<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self, EncoderError> {
        dims.validate()?;
        let mut p = Self::zeros(dims);
        let fill = |a: &mut Array2<f64>, std: f64, rng: &mut R| {
            let normal = Normal::new(0.0, std).unwrap();
            a.iter_mut().for_each(|x| *x = normal.sample(rng));
        };
        let d = dims.dim as f64;
        fill(&mut p.token_emb, 1.0, rng);
        fill(&mut p.pos_emb, 1.0, rng);
        fill(&mut p.dense_proj, 1.0 / d.sqrt(), rng);
        fill(&mut p.hidden_proj, 1.0 / (2.0 * d).sqrt(), rng);
        fill(&mut p.out_proj, 1.0 / (dims.hidden as f64).sqrt(), rng);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.dims);
        z.vocab_checksum = self.vocab_checksum;
        z
    }

    /// Flat views of every tensor, in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            self.token_emb.as_slice().unwrap(),
            self.pos_emb.as_slice().unwrap(),
            self.dense_proj.as_slice().unwrap(),
            self.hidden_proj.as_slice().unwrap(),
            self.hidden_bias.as_slice().unwrap(),
            self.out_proj.as_slice().unwrap(),
            self.out_bias.as_slice().unwrap(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.token_emb.as_slice_mut().unwrap(),
            self.pos_emb.as_slice_mut().unwrap(),
            self.dense_proj.as_slice_mut().unwrap(),
            self.hidden_proj.as_slice_mut().unwrap(),
            self.hidden_bias.as_slice_mut().unwrap(),
            self.out_proj.as_slice_mut().unwrap(),
            self.out_bias.as_slice_mut().unwrap(),
        ]
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn check_input(&self, tokens: &[TokenId]) -> Result<(), EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptyInput);
        }
        if tokens.len() > self.dims.max_len {
            return Err(EncoderError::TooLong {
                len: tokens.len(),
                max: self.dims.max_len,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= self.dims.vocab) {
            return Err(EncoderError::TokenOutOfRange {
                token,
                vocab: self.dims.vocab,
            });
        }
        Ok(())
    }

    /// Mean of the token embeddings, summed in sorted token order so that
    /// equal multisets pool to bit-identical vectors.
    pub(crate) fn pool(&self, tokens: &[TokenId]) -> Array1<f64> {
        let mut sorted = tokens.to_vec();
        sorted.sort_unstable();
        let mut pool = Array1::zeros(self.dims.dim);
        for &t in &sorted {
            pool += &self.token_emb.row(t as usize);
        }
        pool / tokens.len() as f64
    }

    /// Pre-activation and activation of the hidden layer at position `t`.
    pub(crate) fn hidden_at(&self, pool: ArrayView1<f64>, t: usize) -> (Array1<f64>, Array1<f64>) {
        let d = self.dims.dim;
        let u_pool = self.hidden_proj.slice(ndarray::s![.., ..d]);
        let u_pos = self.hidden_proj.slice(ndarray::s![.., d..]);
        let pre = u_pool.dot(&pool) + u_pos.dot(&self.pos_emb.row(t)) + &self.hidden_bias;
        let act = pre.mapv(|x| x.max(0.0));
        (pre, act)
    }

    /// Dense embedding only; the generative head is not evaluated.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Vec<f64>, EncoderError> {
        self.check_input(tokens)?;
        let z = self.dense_proj.dot(&self.pool(tokens));
        let norm = z.dot(&z).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EncoderError::DegenerateEmbedding);
        }
        Ok((z / norm).to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        let ModelDims {
            vocab,
            dim,
            dense_dim,
            hidden,
            max_len,
        } = self.dims;
        for v in [vocab, dim, dense_dim, hidden, max_len] {
            w.u64(v as u64);
        }
        w.u64(self.vocab_checksum);
        for t in self.tensors() {
            for &x in t {
                w.f64(x);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let mut r = Reader::open(bytes, MAGIC)?;
        r.expect_version(VERSION)?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = usize::try_from(r.u64()?).map_err(|_| EncoderError::BadDims("overflow".into()))?;
        }
        let dims = ModelDims {
            vocab: dims[0],
            dim: dims[1],
            dense_dim: dims[2],
            hidden: dims[3],
            max_len: dims[4],
        };
        dims.validate()?;
        let expected = dims.vocab * dims.dim
            + dims.max_len * dims.dim
            + dims.dense_dim * dims.dim
            + dims.hidden * 2 * dims.dim
            + dims.hidden
            + dims.vocab * dims.hidden
            + dims.vocab;
        let vocab_checksum = r.u64()?;
        if r.remaining() != expected * 8 {
            return Err(CodecError::Truncated.into());
        }
        let mut p = Self::zeros(dims);
        p.vocab_checksum = vocab_checksum;
        for t in p.tensors_mut() {
            for x in t.iter_mut() {
                *x = r.f64()?;
            }
        }
        r.expect_end()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        fs::write(path, self.to_bytes()).map_err(|source| EncoderError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let bytes = fs::read(path).map_err(|source| EncoderError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// Unit-norm dense embedding (d_dr).
    pub dense: Vec<f64>,
    /// Per-position log-probabilities (M × V).
    pub logprobs: ProbTable,
}

/// Single forward pass over both heads.
pub fn encode(params: &EncoderParams, tokens: &[TokenId]) -> Result<EncoderOutput, EncoderError> {
    let dense = params.embed(tokens)?;
    let pool = params.pool(tokens);
    let ModelDims {
        vocab, max_len, ..
    } = params.dims;
    let mut logits = Vec::with_capacity(max_len * vocab);
    for t in 0..max_len {
        let (_, hidden) = params.hidden_at(pool.view(), t);
        let mut row = (params.out_proj.dot(&hidden) + &params.out_bias).to_vec();
        log_softmax_in_place(&mut row);
        logits.extend(row);
    }
    Ok(EncoderOutput {
        dense,
        logprobs: ProbTable::from_logprobs(max_len, vocab, logits),
    })
}

/// Shared read-only encoder that counts forward passes.
#[derive(Debug)]
pub struct Encoder {
    params: EncoderParams,
    passes: AtomicU64,
}

impl Encoder {
    pub fn new(params: EncoderParams) -> Self {
        Self {
            params,
            passes: AtomicU64::new(0),
        }
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn encode(&self, tokens: &[TokenId]) -> Result<EncoderOutput, EncoderError> {
        self.passes.fetch_add(1, Ordering::Relaxed);
        encode(&self.params, tokens)
    }

    /// Forward passes performed through [`Encoder::encode`] so far.
    pub fn forward_passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_counter(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }
}
