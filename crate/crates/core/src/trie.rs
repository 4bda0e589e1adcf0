//! Immutable keyword trie in a flat CSR layout.
//!
//! Nodes are numbered in breadth-first order with children visited in
//! ascending token order. Under that numbering the edges, stored parent by
//! parent, point at consecutive nodes: edge `e` always leads to node `e + 1`.
//! A node therefore costs one offset plus one label per incoming edge, and
//! the child reference array is implicit.
//!
//! A reversed trie stores each keyword right to left below a first-level
//! edge labelled with the keyword length (EOW included), so that depth `j`
//! under partition `m` always corresponds to absolute position `m - j + 1`.
//!
//! Every terminal is a non-root leaf and every non-root leaf is a terminal:
//! keywords end with a single EOW in forward tries, and all paths inside a
//! length partition of a reversed trie have the same depth.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::corpus::{KeywordId, TokenId, EOW};

const MAGIC: &[u8; 4] = b"KTRI";
const VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reversed,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);
}

#[derive(Debug, Error)]
pub enum TrieError {
    #[error("keyword {id}: {reason}")]
    InvalidKeyword { id: KeywordId, reason: &'static str },
    #[error("keywords {first} and {second} have the same token sequence")]
    Duplicate { first: KeywordId, second: KeywordId },
    #[error("invalid node reference {0}")]
    InvalidNode(u32),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeywordTrie {
    direction: Direction,
    vocab_checksum: u64,
    offsets: Vec<u32>,
    labels: Vec<TokenId>,
    /// Sorted by node.
    terminals: Vec<(u32, KeywordId)>,
}

/// Outgoing edges of one node, sorted by label.
#[derive(Copy, Clone, Debug)]
pub struct Children<'a> {
    labels: &'a [TokenId],
    first_edge: u32,
}

impl<'a> Children<'a> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &'a [TokenId] {
        self.labels
    }

    pub fn get(&self, label: TokenId) -> Option<NodeId> {
        self.labels
            .binary_search(&label)
            .ok()
            .map(|i| NodeId(self.first_edge + i as u32 + 1))
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, NodeId)> + 'a {
        let first = self.first_edge;
        self.labels
            .iter()
            .enumerate()
            .map(move |(i, &l)| (l, NodeId(first + i as u32 + 1)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryStats {
    pub nodes: usize,
    pub edges: usize,
    pub keywords: usize,
    pub serialized_bytes: usize,
    pub bytes_per_keyword: f64,
    /// Bytes held by the in-memory arrays.
    pub resident_bytes: usize,
}

#[derive(Default)]
struct BuildNode {
    children: BTreeMap<TokenId, usize>,
    terminal: Option<KeywordId>,
}

impl KeywordTrie {
    /// Builds a trie over `(id, tokens)` pairs. Every sequence must end with
    /// exactly one EOW; duplicate sequences are rejected.
    pub fn build<'a, I>(
        keywords: I,
        direction: Direction,
        vocab_checksum: u64,
    ) -> Result<Self, TrieError>
    where
        I: IntoIterator<Item = (KeywordId, &'a [TokenId])>,
    {
        let mut nodes = vec![BuildNode::default()];
        let mut path = Vec::new();
        for (id, tokens) in keywords {
            match tokens.iter().position(|&t| t == EOW) {
                None => {
                    return Err(TrieError::InvalidKeyword {
                        id,
                        reason: "missing EOW",
                    })
                }
                Some(p) if p + 1 != tokens.len() => {
                    return Err(TrieError::InvalidKeyword {
                        id,
                        reason: "EOW before end of sequence",
                    })
                }
                Some(_) => {}
            }
            path.clear();
            match direction {
                Direction::Forward => path.extend_from_slice(tokens),
                Direction::Reversed => {
                    path.push(tokens.len() as TokenId);
                    path.extend(tokens.iter().rev());
                }
            }
            let mut node = 0;
            for &label in &path {
                node = match nodes[node].children.get(&label) {
                    Some(&child) => child,
                    None => {
                        nodes.push(BuildNode::default());
                        let child = nodes.len() - 1;
                        nodes[node].children.insert(label, child);
                        child
                    }
                };
            }
            if let Some(first) = nodes[node].terminal {
                return Err(TrieError::Duplicate { first, second: id });
            }
            nodes[node].terminal = Some(id);
        }

        let mut offsets = Vec::with_capacity(nodes.len() + 1);
        let mut labels = Vec::with_capacity(nodes.len() - 1);
        let mut terminals = Vec::new();
        let mut queue = VecDeque::from([0usize]);
        let mut next_id = 0u32;
        while let Some(n) = queue.pop_front() {
            if let Some(kw) = nodes[n].terminal {
                terminals.push((next_id, kw));
            }
            next_id += 1;
            offsets.push(labels.len() as u32);
            for (&label, &child) in &nodes[n].children {
                labels.push(label);
                queue.push_back(child);
            }
        }
        offsets.push(labels.len() as u32);
        Ok(Self {
            direction,
            vocab_checksum,
            offsets,
            labels,
            terminals,
        })
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn vocab_checksum(&self) -> u64 {
        self.vocab_checksum
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.labels.len()
    }

    pub fn keyword_count(&self) -> usize {
        self.terminals.len()
    }

    pub fn root(&self) -> NodeId {
        NodeId::ROOT
    }

    pub fn children(&self, node: NodeId) -> Result<Children<'_>, TrieError> {
        let n = node.0 as usize;
        if n >= self.node_count() {
            return Err(TrieError::InvalidNode(node.0));
        }
        let (start, end) = (self.offsets[n], self.offsets[n + 1]);
        Ok(Children {
            labels: &self.labels[start as usize..end as usize],
            first_edge: start,
        })
    }

    /// `children` for a node known to be valid, e.g. one obtained from this trie.
    pub(crate) fn children_of(&self, node: NodeId) -> Children<'_> {
        let n = node.0 as usize;
        let (start, end) = (self.offsets[n], self.offsets[n + 1]);
        Children {
            labels: &self.labels[start as usize..end as usize],
            first_edge: start,
        }
    }

    pub fn child(&self, node: NodeId, label: TokenId) -> Option<NodeId> {
        self.children(node).ok()?.get(label)
    }

    pub fn terminal(&self, node: NodeId) -> Option<KeywordId> {
        let n = node.0 as usize;
        if n == 0 || n >= self.node_count() || self.offsets[n] != self.offsets[n + 1] {
            return None;
        }
        self.terminals
            .binary_search_by_key(&node.0, |&(t, _)| t)
            .ok()
            .map(|i| self.terminals[i].1)
    }

    /// Walks a raw trie path (length label first for reversed tries).
    pub fn walk(&self, path: &[TokenId]) -> Option<NodeId> {
        path.iter()
            .try_fold(NodeId::ROOT, |node, &label| self.child(node, label))
    }

    /// Keyword id for a left-to-right token sequence, whatever the direction.
    pub fn lookup(&self, tokens: &[TokenId]) -> Option<KeywordId> {
        if tokens.last() != Some(&EOW) {
            return None;
        }
        let node = match self.direction {
            Direction::Forward => self.walk(tokens)?,
            Direction::Reversed => {
                let part = self.child(NodeId::ROOT, tokens.len() as TokenId)?;
                tokens
                    .iter()
                    .rev()
                    .try_fold(part, |node, &t| self.child(node, t))?
            }
        };
        self.terminal(node)
    }

    /// All stored keywords as left-to-right token sequences, sorted by id.
    pub fn keywords(&self) -> Vec<(KeywordId, Vec<TokenId>)> {
        let mut out = Vec::with_capacity(self.keyword_count());
        let mut stack = vec![(NodeId::ROOT, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if let Some(kw) = self.terminal(node) {
                let tokens = match self.direction {
                    Direction::Forward => path,
                    Direction::Reversed => path[1..].iter().rev().copied().collect(),
                };
                out.push((kw, tokens));
                continue;
            }
            for (label, child) in self.children_of(node).iter() {
                let mut p = path.clone();
                p.push(label);
                stack.push((child, p));
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.vocab_checksum);
        w.u64(self.node_count() as u64);
        w.u8(match self.direction {
            Direction::Forward => 0,
            Direction::Reversed => 1,
        });
        for pair in self.offsets.windows(2) {
            w.varint(u64::from(pair[1] - pair[0]));
        }
        for &label in &self.labels {
            w.varint(u64::from(label));
        }
        w.varint(self.terminals.len() as u64);
        let mut prev = 0u32;
        for &(node, kw) in &self.terminals {
            w.varint(u64::from(node - prev));
            w.varint(u64::from(kw.0));
            prev = node;
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrieError> {
        let corrupt = |m: &str| TrieError::Codec(CodecError::Corrupt(m.to_string()));
        let mut r = Reader::open(bytes, MAGIC)?;
        r.expect_version(VERSION)?;
        let vocab_checksum = r.u64()?;
        let node_count = r.u64()?;
        if node_count == 0 || node_count > u64::from(u32::MAX) {
            return Err(corrupt("node count out of range"));
        }
        // Each node needs at least one byte for its degree.
        if node_count as usize > r.remaining() {
            return Err(CodecError::Truncated.into());
        }
        let node_count = node_count as usize;
        let direction = match r.u8()? {
            0 => Direction::Forward,
            1 => Direction::Reversed,
            _ => return Err(corrupt("unknown direction")),
        };
        let mut offsets = Vec::with_capacity(node_count + 1);
        offsets.push(0u32);
        let mut edges = 0u64;
        for _ in 0..node_count {
            edges += r.varint()?;
            if edges >= node_count as u64 {
                return Err(corrupt("edge count exceeds node count"));
            }
            offsets.push(edges as u32);
        }
        if edges + 1 != node_count as u64 {
            return Err(corrupt("edge count does not match node count"));
        }
        let mut labels = Vec::with_capacity(edges as usize);
        for _ in 0..edges {
            labels.push(r.varint_u32()?);
        }
        for pair in offsets.windows(2) {
            let ls = &labels[pair[0] as usize..pair[1] as usize];
            if ls.windows(2).any(|w| w[0] >= w[1]) {
                return Err(corrupt("child labels not strictly increasing"));
            }
        }
        // Edge e must come from a node numbered at most e, or the layout is
        // not breadth-first and some node would be unreachable.
        for n in 0..node_count {
            if offsets[n] < offsets[n + 1] && (offsets[n] as usize) < n {
                return Err(corrupt("edge layout is not breadth-first"));
            }
        }
        let count = r.varint()? as usize;
        if count > node_count {
            return Err(corrupt("too many terminals"));
        }
        let mut terminals = Vec::with_capacity(count);
        let mut node = 0u64;
        for i in 0..count {
            let delta = r.varint()?;
            if i > 0 && delta == 0 {
                return Err(corrupt("terminal nodes not strictly increasing"));
            }
            node += delta;
            if node >= node_count as u64 {
                return Err(corrupt("terminal node out of range"));
            }
            terminals.push((node as u32, KeywordId(r.varint_u32()?)));
        }
        r.expect_end()?;
        let leaves = (1..node_count)
            .filter(|&n| offsets[n] == offsets[n + 1])
            .count();
        let all_leaves = terminals
            .iter()
            .all(|&(n, _)| n != 0 && offsets[n as usize] == offsets[n as usize + 1]);
        if !all_leaves || leaves != terminals.len() {
            return Err(corrupt("terminals must be exactly the non-root leaves"));
        }
        Ok(Self {
            direction,
            vocab_checksum,
            offsets,
            labels,
            terminals,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrieError> {
        fs::write(path, self.to_bytes()).map_err(|source| TrieError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrieError> {
        let bytes = fs::read(path).map_err(|source| TrieError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn memory_stats(&self) -> MemoryStats {
        let serialized_bytes = self.to_bytes().len();
        let keywords = self.keyword_count();
        MemoryStats {
            nodes: self.node_count(),
            edges: self.edge_count(),
            keywords,
            serialized_bytes,
            bytes_per_keyword: if keywords == 0 {
                0.0
            } else {
                serialized_bytes as f64 / keywords as f64
            },
            resident_bytes: self.offsets.len() * 4 + self.labels.len() * 4 + self.terminals.len() * 8,
        }
    }
}
