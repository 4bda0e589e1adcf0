//! Keyword retrieval from a single encoder pass.
//!
//! One forward pass of a small two-headed encoder yields a dense query
//! embedding, searched against keyword embeddings, and a per-position token
//! distribution, decoded by beam search constrained to a keyword trie.

pub mod codec;
pub mod corpus;
pub mod decoder;
pub mod dense_index;
pub mod encoder;
pub mod eval;
pub mod retriever;
pub mod synth;
pub mod table;
pub mod trie;

pub use corpus::{Catalog, KeywordId, Role, TokenId, TokenSeq, TrainingPair, Vocab, EOW, PAD, UNK};
pub use decoder::{beam_search, constrained_logprob, permutation_decode, DecodeConfig, Hypothesis, Order, Scored};
pub use dense_index::{cluster_keywords, DenseIndex, GraphParams, IndexKind, Neighbor};
pub use encoder::{encode, joint_loss, train, Encoder, EncoderOutput, EncoderParams, ModelDims, TrainConfig};
pub use eval::{MatchType, OverlapScorer, Scorer};
pub use retriever::{overlap_stats, EngineBundle, OverlapStats, RetrievalResult, RetrieveConfig, Source};
pub use table::ProbTable;
pub use trie::{Direction, KeywordTrie, NodeId};
