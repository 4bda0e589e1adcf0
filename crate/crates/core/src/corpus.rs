//! Tokenization, vocabulary construction and corpus ingestion.
//!
//! Text is lowercased and split on whitespace. Ids 0..3 are reserved for
//! [`PAD`], [`UNK`] and [`EOW`]; every keyword sequence ends with exactly one
//! `EOW`, which lets the generative head learn keyword length as an ordinary
//! token and makes trie terminals ordinary edges.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::crc64;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
/// End-of-keyword sentinel.
pub const EOW: TokenId = 2;
/// First id handed out to a surface token.
pub const FIRST_TOKEN_ID: TokenId = 3;

const RESERVED_NAMES: [&str; 3] = ["<pad>", "<unk>", "<eow>"];

/// Default maximum sequence length M.
pub const DEFAULT_MAX_LEN: usize = 16;

/// Allowed fraction of malformed lines in a pairs file.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

/// Line number of a keyword in the catalog file.
#[derive(
    Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct KeywordId(pub u32);

impl fmt::Display for KeywordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl KeywordId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{malformed} of {total} lines malformed (limit is 10%)")]
    TooManyMalformed { malformed: usize, total: usize },
    #[error("invalid vocab file: {0}")]
    BadVocab(String),
}

pub(crate) fn read_text(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Lowercase and whitespace-split.
pub fn normalize_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Canonical form used to match keyword text across files.
pub fn normalize_text(text: &str) -> String {
    normalize_tokens(text).collect::<Vec<_>>().join(" ")
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Role {
    Query,
    Keyword,
}

/// Keyword tokens without the trailing `EOW`, or `[UNK]` if nothing is left.
pub fn keyword_surface(ids: &[TokenId]) -> &[TokenId] {
    let ids = match ids.last() {
        Some(&EOW) => &ids[..ids.len() - 1],
        _ => ids,
    };
    if ids.is_empty() {
        &[UNK]
    } else {
        ids
    }
}

/// Token ids for one query or keyword.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Surface tokens of a keyword: everything before the trailing `EOW`.
    /// Falls back to `[UNK]` so the dense head always has something to pool.
    pub fn surface(&self) -> &[TokenId] {
        keyword_surface(&self.0)
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

/// Shared query/keyword vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Counts whitespace tokens over `lines` and assigns ids to every token
    /// seen at least `min_count` times, by descending count then
    /// lexicographically.
    pub fn from_lines<'a, I>(lines: I, min_count: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in normalize_tokens(line) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    /// Builds a vocab whose surface tokens take ids 3, 4, ... in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut id_to_token: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for tok in tokens {
            if token_to_id.contains_key(&tok) {
                continue;
            }
            token_to_id.insert(tok.clone(), id_to_token.len() as TokenId);
            id_to_token.push(tok);
        }
        Self {
            token_to_id,
            id_to_token,
        }
    }

    /// Vocabulary size V, reserved ids included.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == FIRST_TOKEN_ID as usize
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Surface tokens in id order.
    pub fn surface_tokens(&self) -> &[String] {
        &self.id_to_token[FIRST_TOKEN_ID as usize..]
    }

    pub fn tokenize(&self, text: &str, role: Role, max_len: usize) -> TokenSeq {
        let limit = match role {
            Role::Query => max_len,
            Role::Keyword => max_len.saturating_sub(1),
        };
        let mut ids: Vec<TokenId> = normalize_tokens(text)
            .take(limit)
            .map(|t| self.id(&t))
            .collect();
        match role {
            Role::Keyword => ids.push(EOW),
            Role::Query if ids.is_empty() => ids.push(UNK),
            Role::Query => {}
        }
        TokenSeq(ids)
    }

    /// Space-joined surface form; `EOW` and `PAD` are dropped.
    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        seq.ids()
            .iter()
            .filter(|&&id| id != EOW && id != PAD)
            .map(|&id| self.token(id).unwrap_or(RESERVED_NAMES[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Vocab file body: one surface token per line in id order from id 3.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for tok in self.surface_tokens() {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.split_whitespace().count() != 1 || line.trim() != line {
                return Err(CorpusError::BadVocab(format!("line {}: {line:?}", n + 1)));
            }
            tokens.push(line.to_string());
        }
        let vocab = Self::from_tokens(tokens.iter().cloned());
        if vocab.len() != tokens.len() + FIRST_TOKEN_ID as usize {
            return Err(CorpusError::BadVocab("duplicate token".into()));
        }
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::parse(&read_text(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_file_string()).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// CRC-64 of the vocab file body; stamped into tries and checkpoints.
    pub fn checksum(&self) -> u64 {
        crc64(self.to_file_string().as_bytes())
    }
}

/// Builds a vocab from a keyword catalog file and a query/keyword TSV.
pub fn build_vocab(
    keyword_file: &Path,
    pairs_file: &Path,
    min_count: usize,
) -> Result<Vocab, CorpusError> {
    let keywords = read_text(keyword_file)?;
    let pairs = read_text(pairs_file)?;
    Vocab::from_lines(keywords.lines().chain(pairs.lines()), min_count)
}

/// Keyword catalog: one keyword per line, the 0-based line number is its id.
#[derive(Clone, Debug, Default)]
pub struct Catalog {
    keywords: Vec<String>,
    by_text: HashMap<String, KeywordId>,
}

impl Catalog {
    pub fn from_lines<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut catalog = Self::default();
        for line in lines {
            let text: String = line.into();
            let id = KeywordId(catalog.keywords.len() as u32);
            catalog.by_text.entry(normalize_text(&text)).or_insert(id);
            catalog.keywords.push(text);
        }
        catalog
    }

    pub fn parse(text: &str) -> Self {
        Self::from_lines(text.lines())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Ok(Self::parse(&read_text(path)?))
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for k in &self.keywords {
            out.push_str(k);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn text(&self, id: KeywordId) -> Option<&str> {
        self.keywords.get(id.index()).map(String::as_str)
    }

    /// First keyword whose normalized text equals `text`'s.
    pub fn id_of(&self, text: &str) -> Option<KeywordId> {
        self.by_text.get(&normalize_text(text)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (KeywordId, &str)> {
        self.keywords
            .iter()
            .enumerate()
            .map(|(i, k)| (KeywordId(i as u32), k.as_str()))
    }

    pub fn tokenize(&self, vocab: &Vocab, max_len: usize) -> Vec<(KeywordId, TokenSeq)> {
        self.iter()
            .map(|(id, text)| (id, vocab.tokenize(text, Role::Keyword, max_len)))
            .collect()
    }

    /// Tokenized keywords with later token-level duplicates removed. The
    /// second list maps each dropped id to the id that kept its sequence.
    pub fn tokenize_unique(
        &self,
        vocab: &Vocab,
        max_len: usize,
    ) -> (Vec<(KeywordId, TokenSeq)>, Vec<(KeywordId, KeywordId)>) {
        let mut first: HashMap<Vec<TokenId>, KeywordId> = HashMap::new();
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for (id, seq) in self.tokenize(vocab, max_len) {
            match first.get(seq.ids()) {
                Some(&orig) => dropped.push((id, orig)),
                None => {
                    first.insert(seq.ids().to_vec(), id);
                    kept.push((id, seq));
                }
            }
        }
        (kept, dropped)
    }

    pub fn checksum(&self) -> u64 {
        crc64(self.to_file_string().as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub query_text: String,
    pub query: TokenSeq,
    pub keyword_text: String,
    pub keyword: TokenSeq,
    pub keyword_id: KeywordId,
}

#[derive(Clone, Debug)]
pub struct LoadedPairs {
    pub pairs: Vec<TrainingPair>,
    /// Lines skipped: wrong column count, blank fields, or a keyword that is
    /// not in the catalog.
    pub malformed: usize,
    /// Non-blank lines seen.
    pub total: usize,
}

pub fn parse_pairs(
    text: &str,
    vocab: &Vocab,
    catalog: &Catalog,
    max_len: usize,
) -> Result<LoadedPairs, CorpusError> {
    let mut pairs = Vec::new();
    let mut malformed = 0;
    let mut total = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        let parsed = match cols.as_slice() {
            [q, k] if !q.trim().is_empty() && !k.trim().is_empty() => {
                catalog.id_of(k).map(|id| (q, k, id))
            }
            _ => None,
        };
        let Some((q, k, keyword_id)) = parsed else {
            malformed += 1;
            continue;
        };
        pairs.push(TrainingPair {
            query_text: q.to_string(),
            query: vocab.tokenize(q, Role::Query, max_len),
            keyword_text: k.to_string(),
            keyword: vocab.tokenize(k, Role::Keyword, max_len),
            keyword_id,
        });
    }
    if malformed as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(CorpusError::TooManyMalformed { malformed, total });
    }
    Ok(LoadedPairs {
        pairs,
        malformed,
        total,
    })
}

/// Loads a `query<TAB>keyword` TSV, resolving keywords against the catalog.
pub fn load_pairs(
    path: &Path,
    vocab: &Vocab,
    catalog: &Catalog,
    max_len: usize,
) -> Result<LoadedPairs, CorpusError> {
    parse_pairs(&read_text(path)?, vocab, catalog, max_len)
}
