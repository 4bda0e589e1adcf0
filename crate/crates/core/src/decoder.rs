//! Trie-constrained beam search over a [`ProbTable`].
//!
//! The trie turns the position-independent token distributions into an
//! autoregressive model: a token may follow a prefix only if it is a child
//! of the prefix's node, in which case it carries its raw table
//! log-probability, and otherwise it is impossible. Every emitted sequence is
//! therefore a catalog keyword.
//!
//! Scores are plain cumulative log-probabilities with no length
//! normalization. Completed keywords leave the beam and are collected
//! separately, so the beam always holds the `B` best unfinished prefixes.
//! Because the score of a keyword is a sum over its absolute positions, it
//! does not depend on the order in which the positions were decoded; that
//! is what lets [`permutation_decode`] merge left-to-right and right-to-left
//! runs by plain score.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{KeywordId, TokenId};
use crate::table::ProbTable;
use crate::trie::{Direction, KeywordTrie, NodeId};

/// Largest allowed disagreement between orders for the same keyword.
pub const ORDER_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("position {position} outside a table of {rows} rows")]
    PositionOutOfRange { position: usize, rows: usize },
    #[error("prefix is not a path in the trie")]
    InvalidPrefix,
    #[error("order {order:?} needs a {needed:?} trie")]
    WrongTrie { order: Order, needed: Direction },
    #[error("keyword {keyword} scored {a} and {b} under different orders")]
    OrderDisagreement { keyword: KeywordId, a: f64, b: f64 },
    #[error("beam size must be at least 1")]
    ZeroBeam,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    L2R,
    R2L,
}

impl Order {
    pub fn direction(self) -> Direction {
        match self {
            Order::L2R => Direction::Forward,
            Order::R2L => Direction::Reversed,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l2r" => Some(Order::L2R),
            "r2l" => Some(Order::R2L),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Per-token log-probability floor; `-inf` disables pruning and is
    /// written as `null` in JSON.
    #[serde(with = "prune_serde")]
    pub prune: f64,
    pub orders: Vec<Order>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 100,
            prune: f64::NEG_INFINITY,
            orders: vec![Order::L2R, Order::R2L],
        }
    }
}

impl DecodeConfig {
    pub fn with_beam(beam: usize) -> Self {
        Self {
            beam,
            ..Self::default()
        }
    }
}

mod prune_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

/// A partially decoded keyword.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Tokens in decoding order.
    pub prefix: Vec<TokenId>,
    pub node: NodeId,
    pub score: f64,
    pub min_logprob: f64,
    /// Length partition for right-to-left decoding.
    pub length: Option<usize>,
}

impl Hypothesis {
    /// 0-based table row of the next token.
    fn next_position(&self) -> usize {
        match self.length {
            None => self.prefix.len(),
            Some(m) => m - 1 - self.prefix.len(),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Scored {
    pub keyword: KeywordId,
    pub score: f64,
}

fn by_score_then_id(a: &Scored, b: &Scored) -> Ordering {
    b.score.total_cmp(&a.score).then(a.keyword.cmp(&b.keyword))
}

/// The masked next-token log-probability `log p~(token | prefix)`.
///
/// `prefix` is a raw trie path: for a reversed trie it starts with the
/// length-partition label `m`, and the following `j - 1` tokens put the
/// next token at 1-based position `m - j + 1`. A length label itself
/// costs nothing when asked for with an empty prefix.
pub fn constrained_logprob(
    table: &ProbTable,
    trie: &KeywordTrie,
    prefix: &[TokenId],
    token: TokenId,
) -> Result<f64, DecodeError> {
    let node = trie.walk(prefix).ok_or(DecodeError::InvalidPrefix)?;
    let position = match trie.direction() {
        Direction::Forward => prefix.len(),
        Direction::Reversed => match prefix.first() {
            None => {
                return Ok(if trie.child(node, token).is_some() {
                    0.0
                } else {
                    f64::NEG_INFINITY
                })
            }
            Some(&m) => (m as usize)
                .checked_sub(prefix.len())
                .ok_or(DecodeError::InvalidPrefix)?,
        },
    };
    if position >= table.rows() {
        return Err(DecodeError::PositionOutOfRange {
            position,
            rows: table.rows(),
        });
    }
    Ok(match trie.child(node, token) {
        Some(_) => table.get(position, token),
        None => f64::NEG_INFINITY,
    })
}

fn initial_beam(trie: &KeywordTrie, table: &ProbTable) -> Vec<Hypothesis> {
    let root = Hypothesis {
        prefix: Vec::new(),
        node: trie.root(),
        score: 0.0,
        min_logprob: 0.0,
        length: None,
    };
    match trie.direction() {
        Direction::Forward => vec![root],
        Direction::Reversed => trie
            .children_of(trie.root())
            .iter()
            .filter(|&(m, _)| m as usize <= table.rows())
            .map(|(m, node)| Hypothesis {
                node,
                length: Some(m as usize),
                ..root.clone()
            })
            .collect(),
    }
}

/// Beam search in one order. `trie` must be forward for left-to-right and
/// reversed for right-to-left decoding.
pub fn beam_search(
    table: &ProbTable,
    trie: &KeywordTrie,
    beam: usize,
    prune: f64,
) -> Result<Vec<Scored>, DecodeError> {
    if beam == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    let mut active = initial_beam(trie, table);
    let mut done: Vec<Scored> = Vec::new();
    let mut candidates: Vec<Hypothesis> = Vec::new();
    while !active.is_empty() {
        candidates.clear();
        for hyp in &active {
            let position = hyp.next_position();
            if position >= table.rows() {
                continue;
            }
            for (token, child) in trie.children_of(hyp.node).iter() {
                let lp = table.get(position, token);
                if lp < prune || lp == f64::NEG_INFINITY {
                    continue;
                }
                let score = hyp.score + lp;
                if let Some(keyword) = trie.terminal(child) {
                    done.push(Scored { keyword, score });
                    continue;
                }
                let mut prefix = Vec::with_capacity(hyp.prefix.len() + 1);
                prefix.extend_from_slice(&hyp.prefix);
                prefix.push(token);
                candidates.push(Hypothesis {
                    prefix,
                    node: child,
                    score,
                    min_logprob: hyp.min_logprob.min(lp),
                    length: hyp.length,
                });
            }
        }
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.node.cmp(&b.node)));
        candidates.truncate(beam);
        std::mem::swap(&mut active, &mut candidates);

        // Log-probabilities are non-positive, so an unfinished prefix can
        // only lose score. Once `beam` finished keywords all beat the best
        // unfinished prefix, nothing left can enter the top `beam`.
        if done.len() >= beam {
            if let Some(best) = active.first() {
                done.sort_by(by_score_then_id);
                done.truncate(beam);
                if best.score < done[beam - 1].score {
                    break;
                }
            }
        }
    }
    done.sort_by(by_score_then_id);
    done.truncate(beam);
    Ok(done)
}

/// Decodes in every configured order and ranks the union by score.
pub fn permutation_decode(
    table: &ProbTable,
    forward: &KeywordTrie,
    reversed: Option<&KeywordTrie>,
    config: &DecodeConfig,
) -> Result<Vec<Scored>, DecodeError> {
    let mut merged: BTreeMap<KeywordId, f64> = BTreeMap::new();
    for &order in &config.orders {
        let trie = match order {
            Order::L2R => forward,
            Order::R2L => reversed.ok_or(DecodeError::WrongTrie {
                order,
                needed: Direction::Reversed,
            })?,
        };
        if trie.direction() != order.direction() {
            return Err(DecodeError::WrongTrie {
                order,
                needed: order.direction(),
            });
        }
        for s in beam_search(table, trie, config.beam, config.prune)? {
            match merged.get(&s.keyword) {
                Some(&prev) if (prev - s.score).abs() > ORDER_TOLERANCE => {
                    return Err(DecodeError::OrderDisagreement {
                        keyword: s.keyword,
                        a: prev,
                        b: s.score,
                    })
                }
                Some(_) => {}
                None => {
                    merged.insert(s.keyword, s.score);
                }
            }
        }
    }
    let mut out: Vec<Scored> = merged
        .into_iter()
        .map(|(keyword, score)| Scored { keyword, score })
        .collect();
    out.sort_by(by_score_then_id);
    out.truncate(config.beam);
    Ok(out)
}
