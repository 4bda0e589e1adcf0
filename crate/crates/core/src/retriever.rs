//! Unified inference: one encoder pass feeds trie decoding and dense
//! search, and the two result lists are merged by keyword id.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{keyword_surface, Catalog, CorpusError, KeywordId, Role, TokenSeq, Vocab};
use crate::decoder::{permutation_decode, DecodeConfig, DecodeError, Scored};
use crate::dense_index::{
    cluster_keywords, clusters_to_string, parse_clusters, DenseIndex, GraphParams, IndexError,
    IndexKind, Neighbor, DEFAULT_SEARCH_LIST, DEFAULT_TOP_K,
};
use crate::encoder::{Encoder, EncoderError, EncoderParams};
use crate::trie::{Direction, KeywordTrie, TrieError};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const KEYWORDS_FILE: &str = "keywords.txt";
pub const MODEL_FILE: &str = "model.kenc";
pub const FORWARD_TRIE_FILE: &str = "trie.fwd.ktri";
pub const REVERSED_TRIE_FILE: &str = "trie.rev.ktri";
pub const EMBEDDINGS_FILE: &str = "embeddings.kemb";
pub const GRAPH_FILE: &str = "index.kgph";
pub const CLUSTERS_FILE: &str = "clusters.tsv";
pub const MANIFEST_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("{component} checksum mismatch: expected {expected:016x}, found {found:016x}")]
    ChecksumMismatch {
        component: &'static str,
        expected: u64,
        found: u64,
    },
    #[error("inconsistent bundle: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Trie(#[from] TrieError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Nlg,
    Dr,
    Both,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Nlg => "NLG",
            Source::Dr => "DR",
            Source::Both => "BOTH",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub id: KeywordId,
    pub text: String,
    pub nlg_score: Option<f64>,
    pub dr_score: Option<f64>,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieveConfig {
    pub decode: DecodeConfig,
    /// Neighbors fetched from the dense index.
    pub top_k: usize,
    pub search_list: usize,
    /// Drops NLG hits scoring below this log-probability.
    pub nlg_floor: Option<f64>,
    /// Drops DR hits scoring below this similarity.
    pub dr_floor: Option<f64>,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::default(),
            top_k: DEFAULT_TOP_K,
            search_list: DEFAULT_SEARCH_LIST,
            nlg_floor: None,
            dr_floor: None,
        }
    }
}

#[derive(Copy, Clone, Debug, Default)]
pub struct StageTimes {
    pub encode: Duration,
    pub nlg: Duration,
    pub dr: Duration,
}

/// Merged results plus the raw per-channel lists after floors.
#[derive(Clone, Debug)]
pub struct Retrieval {
    pub results: Vec<RetrievalResult>,
    pub nlg: Vec<Scored>,
    pub dr: Vec<Neighbor>,
    pub times: StageTimes,
}

impl Retrieval {
    pub fn ids(&self) -> BTreeSet<KeywordId> {
        self.results.iter().map(|r| r.id).collect()
    }

    pub fn nlg_ids(&self) -> BTreeSet<KeywordId> {
        self.nlg.iter().map(|s| s.keyword).collect()
    }

    pub fn dr_ids(&self) -> BTreeSet<KeywordId> {
        self.dr.iter().map(|n| n.id).collect()
    }
}

/// Merges the two channels. Keywords found by both come first by DR score,
/// then DR-only by DR score, then NLG-only by NLG score; ties go to the
/// smaller id.
pub fn merge(catalog: &Catalog, nlg: &[Scored], dr: &[Neighbor]) -> Vec<RetrievalResult> {
    let mut by_id: BTreeMap<KeywordId, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for s in nlg {
        by_id.entry(s.keyword).or_default().0 = Some(s.score);
    }
    for n in dr {
        by_id.entry(n.id).or_default().1 = Some(n.score);
    }
    let mut out: Vec<RetrievalResult> = by_id
        .into_iter()
        .map(|(id, (nlg_score, dr_score))| RetrievalResult {
            id,
            text: catalog.text(id).unwrap_or_default().to_string(),
            nlg_score,
            dr_score,
            source: match (nlg_score, dr_score) {
                (Some(_), Some(_)) => Source::Both,
                (None, Some(_)) => Source::Dr,
                _ => Source::Nlg,
            },
        })
        .collect();
    let rank = |r: &RetrievalResult| match r.source {
        Source::Both => 0,
        Source::Dr => 1,
        Source::Nlg => 2,
    };
    out.sort_by(|a, b| {
        let key = |r: &RetrievalResult| match r.source {
            Source::Nlg => r.nlg_score.unwrap_or(f64::NEG_INFINITY),
            _ => r.dr_score.unwrap_or(f64::NEG_INFINITY),
        };
        rank(a)
            .cmp(&rank(b))
            .then(key(b).total_cmp(&key(a)))
            .then(a.id.cmp(&b.id))
    });
    out
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub unique_to_a_fraction: f64,
    pub unique_to_b_fraction: f64,
    pub jaccard: f64,
}

pub fn overlap_stats<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> OverlapStats {
    let frac = |x: &BTreeSet<T>, y: &BTreeSet<T>| {
        if x.is_empty() {
            0.0
        } else {
            x.difference(y).count() as f64 / x.len() as f64
        }
    };
    let union = a.union(b).count();
    OverlapStats {
        unique_to_a_fraction: frac(a, b),
        unique_to_b_fraction: frac(b, a),
        jaccard: if union == 0 {
            1.0
        } else {
            a.intersection(b).count() as f64 / union as f64
        },
    }
}

/// Build-time description of a bundle, stored next to its artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub vocab_checksum: u64,
    pub catalog_checksum: u64,
    pub max_len: usize,
    pub kind: IndexKind,
    pub graph: Option<GraphParams>,
    pub cluster_threshold: Option<f64>,
    /// Keywords in the tries after token-level deduplication.
    pub trie_keywords: usize,
    pub indexed_keywords: usize,
    /// Catalog ids dropped as token-level duplicates, with the id kept.
    pub duplicates: Vec<(KeywordId, KeywordId)>,
    pub retrieve: RetrieveConfig,
}

#[derive(Clone, Debug)]
pub struct BundleOptions {
    pub kind: IndexKind,
    pub graph: GraphParams,
    pub cluster_threshold: Option<f64>,
    pub retrieve: RetrieveConfig,
}

impl Default for BundleOptions {
    fn default() -> Self {
        Self {
            kind: IndexKind::Graph,
            graph: GraphParams::default(),
            cluster_threshold: None,
            retrieve: RetrieveConfig::default(),
        }
    }
}

/// Everything [`EngineBundle::retrieve`] needs, built over one catalog and
/// one vocabulary.
#[derive(Debug)]
pub struct EngineBundle {
    pub encoder: Encoder,
    pub vocab: Vocab,
    pub catalog: Catalog,
    pub forward: KeywordTrie,
    pub reversed: KeywordTrie,
    pub index: DenseIndex,
    /// Keyword to representative, when the index holds representatives only.
    pub clusters: Option<BTreeMap<KeywordId, KeywordId>>,
    members: BTreeMap<KeywordId, Vec<KeywordId>>,
    pub manifest: Manifest,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RetrieveError + '_ {
    move |source| RetrieveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn group_members(clusters: &Option<BTreeMap<KeywordId, KeywordId>>) -> BTreeMap<KeywordId, Vec<KeywordId>> {
    let mut members: BTreeMap<KeywordId, Vec<KeywordId>> = BTreeMap::new();
    if let Some(map) = clusters {
        for (&kw, &rep) in map {
            members.entry(rep).or_default().push(kw);
        }
    }
    members
}

impl EngineBundle {
    /// Tokenizes and deduplicates the catalog, builds both tries, embeds
    /// every keyword and indexes either all keywords or, with a cluster
    /// threshold, one representative per cluster.
    pub fn build(
        params: EncoderParams,
        vocab: Vocab,
        catalog: Catalog,
        options: &BundleOptions,
    ) -> Result<Self, RetrieveError> {
        if params.vocab_checksum != vocab.checksum() {
            return Err(RetrieveError::ChecksumMismatch {
                component: "checkpoint vocab",
                expected: vocab.checksum(),
                found: params.vocab_checksum,
            });
        }
        let max_len = params.dims.max_len;
        let (keywords, duplicates) = catalog.tokenize_unique(&vocab, max_len);
        let entries = || keywords.iter().map(|(id, seq)| (*id, seq.ids()));
        let forward = KeywordTrie::build(entries(), Direction::Forward, vocab.checksum())?;
        let reversed = KeywordTrie::build(entries(), Direction::Reversed, vocab.checksum())?;

        let vectors: Vec<Vec<f64>> = keywords
            .par_iter()
            .map(|(_, seq)| params.embed(keyword_surface(seq.ids())))
            .collect::<Result<_, _>>()?;
        let ids: Vec<KeywordId> = keywords.iter().map(|(id, _)| *id).collect();
        let clusters = options
            .cluster_threshold
            .map(|t| cluster_keywords(&vectors, &ids, t))
            .transpose()?;
        let (vectors, ids): (Vec<Vec<f64>>, Vec<KeywordId>) = match &clusters {
            Some(map) => vectors
                .into_iter()
                .zip(ids)
                .filter(|(_, id)| map[id] == *id)
                .unzip(),
            None => (vectors, ids),
        };
        let index = match options.kind {
            IndexKind::Exact => DenseIndex::build_exact(&vectors, &ids)?,
            IndexKind::Graph => DenseIndex::build_graph(&vectors, &ids, options.graph)?,
        };
        let manifest = Manifest {
            vocab_checksum: vocab.checksum(),
            catalog_checksum: catalog.checksum(),
            max_len,
            kind: options.kind,
            graph: index.graph_params(),
            cluster_threshold: options.cluster_threshold,
            trie_keywords: forward.keyword_count(),
            indexed_keywords: index.len(),
            duplicates,
            retrieve: options.retrieve.clone(),
        };
        Ok(Self {
            encoder: Encoder::new(params),
            vocab,
            catalog,
            forward,
            reversed,
            index,
            members: group_members(&clusters),
            clusters,
            manifest,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), RetrieveError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let kw = dir.join(KEYWORDS_FILE);
        fs::write(&kw, self.catalog.to_file_string()).map_err(io_err(&kw))?;
        self.encoder.params().save(&dir.join(MODEL_FILE))?;
        self.forward.save(&dir.join(FORWARD_TRIE_FILE))?;
        self.reversed.save(&dir.join(REVERSED_TRIE_FILE))?;
        let graph = dir.join(GRAPH_FILE);
        self.index.save(
            &dir.join(EMBEDDINGS_FILE),
            (self.index.kind() == IndexKind::Graph).then_some(graph.as_path()),
        )?;
        if let Some(map) = &self.clusters {
            let path = dir.join(CLUSTERS_FILE);
            fs::write(&path, clusters_to_string(map)).map_err(io_err(&path))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(io_err(&path))?;
        Ok(())
    }

    /// Loads a bundle directory and checks that every component was built
    /// over the same vocabulary and catalog.
    pub fn load(dir: &Path) -> Result<Self, RetrieveError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| RetrieveError::Manifest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let catalog = Catalog::load(&dir.join(KEYWORDS_FILE))?;
        let params = EncoderParams::load(&dir.join(MODEL_FILE))?;
        let forward = KeywordTrie::load(&dir.join(FORWARD_TRIE_FILE))?;
        let reversed = KeywordTrie::load(&dir.join(REVERSED_TRIE_FILE))?;
        let graph = dir.join(GRAPH_FILE);
        let index = DenseIndex::load(
            &dir.join(EMBEDDINGS_FILE),
            (manifest.kind == IndexKind::Graph).then_some(graph.as_path()),
        )?;
        let clusters = if manifest.cluster_threshold.is_some() {
            let path = dir.join(CLUSTERS_FILE);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            Some(parse_clusters(&text)?)
        } else {
            None
        };

        let vocab_sum = vocab.checksum();
        for (component, found) in [
            ("manifest vocab", manifest.vocab_checksum),
            ("checkpoint vocab", params.vocab_checksum),
            ("forward trie vocab", forward.vocab_checksum()),
            ("reversed trie vocab", reversed.vocab_checksum()),
        ] {
            if found != vocab_sum {
                return Err(RetrieveError::ChecksumMismatch {
                    component,
                    expected: vocab_sum,
                    found,
                });
            }
        }
        if manifest.catalog_checksum != catalog.checksum() {
            return Err(RetrieveError::ChecksumMismatch {
                component: "catalog",
                expected: manifest.catalog_checksum,
                found: catalog.checksum(),
            });
        }
        let bad = |m: String| Err(RetrieveError::Inconsistent(m));
        if forward.direction() != Direction::Forward || reversed.direction() != Direction::Reversed {
            return bad("trie directions".into());
        }
        if forward.keyword_count() != manifest.trie_keywords || reversed.keyword_count() != manifest.trie_keywords {
            return bad("trie keyword counts differ from the manifest".into());
        }
        if index.len() != manifest.indexed_keywords || (!index.is_empty() && index.dim() != params.dims.dense_dim) {
            return bad("dense index does not match the checkpoint".into());
        }
        if let Some(id) = index.ids().iter().find(|id| id.index() >= catalog.len()) {
            return bad(format!("indexed keyword {id} is not in the catalog"));
        }
        if manifest.max_len != params.dims.max_len {
            return bad("max_len differs from the checkpoint".into());
        }
        Ok(Self {
            encoder: Encoder::new(params),
            vocab,
            catalog,
            forward,
            reversed,
            index,
            members: group_members(&clusters),
            clusters,
            manifest,
        })
    }

    pub fn config(&self) -> &RetrieveConfig {
        &self.manifest.retrieve
    }

    pub fn tokenize_query(&self, query: &str) -> TokenSeq {
        self.vocab.tokenize(query, Role::Query, self.manifest.max_len)
    }

    /// Retrieves with the bundle's stored configuration.
    pub fn retrieve(&self, query: &str) -> Result<Retrieval, RetrieveError> {
        self.retrieve_with(query, self.config())
    }

    pub fn retrieve_with(&self, query: &str, config: &RetrieveConfig) -> Result<Retrieval, RetrieveError> {
        let tokens = self.tokenize_query(query);
        let start = Instant::now();
        let out = self.encoder.encode(tokens.ids())?;
        let encode = start.elapsed();

        let (nlg, dr) = rayon::join(
            || {
                let t = Instant::now();
                let r = permutation_decode(&out.logprobs, &self.forward, Some(&self.reversed), &config.decode);
                (r, t.elapsed())
            },
            || {
                let t = Instant::now();
                let k = config.top_k.min(self.index.len());
                let r = self.index.search(&out.dense, k, config.search_list.max(k));
                (r, t.elapsed())
            },
        );
        let (mut nlg, nlg_time) = (nlg.0?, nlg.1);
        let (hits, dr_time) = (dr.0?, dr.1);
        let mut dr = self.expand(hits);
        if let Some(floor) = config.nlg_floor {
            nlg.retain(|s| s.score >= floor);
        }
        if let Some(floor) = config.dr_floor {
            dr.retain(|n| n.score >= floor);
        }
        Ok(Retrieval {
            results: merge(&self.catalog, &nlg, &dr),
            nlg,
            dr,
            times: StageTimes {
                encode,
                nlg: nlg_time,
                dr: dr_time,
            },
        })
    }

    /// Replaces each representative hit by all members of its cluster,
    /// each carrying the representative's score.
    fn expand(&self, hits: Vec<Neighbor>) -> Vec<Neighbor> {
        if self.clusters.is_none() {
            return hits;
        }
        let mut out = Vec::with_capacity(hits.len());
        for h in hits {
            match self.members.get(&h.id) {
                Some(group) => out.extend(group.iter().map(|&id| Neighbor { id, score: h.score })),
                None => out.push(h),
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
        out
    }
}

/// Latency and forward-pass accounting for one beam size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamBench {
    pub beam: usize,
    pub queries: usize,
    pub repeat: usize,
    pub forward_passes: u64,
    pub forward_passes_per_query: f64,
    pub total_ms: Percentiles,
    pub decode_ms: Percentiles,
    pub mean_nlg_results: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub mean: f64,
}

impl Percentiles {
    pub fn of(samples: &mut [f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_by(f64::total_cmp);
        let at = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
        Self {
            p50: at(0.5),
            p90: at(0.9),
            p99: at(0.99),
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
        }
    }
}

/// Runs every query `repeat` times per beam size sequentially and counts
/// encoder passes through the bundle's counter.
pub fn bench(
    bundle: &EngineBundle,
    queries: &[String],
    beams: &[usize],
    repeat: usize,
) -> Result<Vec<BeamBench>, RetrieveError> {
    let mut out = Vec::with_capacity(beams.len());
    for &beam in beams {
        let mut cfg = bundle.config().clone();
        cfg.decode.beam = beam;
        bundle.encoder.reset_counter();
        let mut total = Vec::new();
        let mut decode = Vec::new();
        let mut nlg_results = 0usize;
        for _ in 0..repeat.max(1) {
            for q in queries {
                let t = Instant::now();
                let r = bundle.retrieve_with(q, &cfg)?;
                total.push(t.elapsed().as_secs_f64() * 1e3);
                decode.push(r.times.nlg.as_secs_f64() * 1e3);
                nlg_results += r.nlg.len();
            }
        }
        let passes = bundle.encoder.forward_passes();
        let runs = total.len();
        out.push(BeamBench {
            beam,
            queries: queries.len(),
            repeat: repeat.max(1),
            forward_passes: passes,
            forward_passes_per_query: if runs == 0 { 0.0 } else { passes as f64 / runs as f64 },
            total_ms: Percentiles::of(&mut total),
            decode_ms: Percentiles::of(&mut decode),
            mean_nlg_results: if runs == 0 { 0.0 } else { nlg_results as f64 / runs as f64 },
        });
    }
    Ok(out)
}

/// One JSON line of retrieval output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub query: String,
    pub results: Vec<ResultEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub keyword: String,
    pub id: u32,
    pub source: Source,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nlg_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dr_score: Option<f64>,
}

impl ResultLine {
    pub fn new(query: &str, results: &[RetrievalResult]) -> Self {
        Self {
            query: query.to_string(),
            results: results
                .iter()
                .map(|r| ResultEntry {
                    keyword: r.text.clone(),
                    id: r.id.0,
                    source: r.source,
                    nlg_score: r.nlg_score,
                    dr_score: r.dr_score,
                })
                .collect(),
        }
    }

    pub fn ids(&self) -> BTreeSet<KeywordId> {
        self.results.iter().map(|r| KeywordId(r.id)).collect()
    }
}
