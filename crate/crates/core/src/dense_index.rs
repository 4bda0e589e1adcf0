//! Nearest-neighbor search over unit-norm keyword embeddings.
//!
//! Two index kinds share one vector store: an exhaustive scan, and a
//! Vamana-style proximity graph searched best-first from a medoid entry
//! point. Distance on the graph is `1 - <x, y>`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::corpus::KeywordId;

const EMB_MAGIC: &[u8; 4] = b"KEMB";
const GRAPH_MAGIC: &[u8; 4] = b"KGPH";
const VERSION: u32 = 1;

/// Norm below which a vector cannot be normalized.
const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("vector {0} has zero norm")]
    ZeroVector(usize),
    #[error("vector {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("{vectors} vectors but {ids} ids")]
    LengthMismatch { vectors: usize, ids: usize },
    #[error("k = {k} exceeds index size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("search list {l} is smaller than k = {k}")]
    SearchListTooSmall { l: usize, k: usize },
    #[error("invalid graph parameters: {0}")]
    InvalidParams(String),
    #[error("similarity threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("graph file describes {graph} points, embeddings hold {vectors}")]
    GraphMismatch { graph: usize, vectors: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Exact,
    Graph,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphParams {
    /// Maximum out-degree.
    pub max_degree: usize,
    pub build_list: usize,
    /// Pruning slack, at least 1.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            max_degree: 32,
            build_list: 64,
            alpha: 1.2,
            seed: 0,
        }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<(), IndexError> {
        if self.max_degree < 2 {
            return Err(IndexError::InvalidParams("max_degree must be >= 2".into()));
        }
        if self.build_list < self.max_degree {
            return Err(IndexError::InvalidParams(
                "build_list must be >= max_degree".into(),
            ));
        }
        if !(self.alpha >= 1.0) {
            return Err(IndexError::InvalidParams("alpha must be >= 1".into()));
        }
        Ok(())
    }
}

pub const DEFAULT_SEARCH_LIST: usize = 100;
pub const DEFAULT_TOP_K: usize = 100;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub id: KeywordId,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Graph {
    params: GraphParams,
    entry: u32,
    offsets: Vec<u32>,
    neighbors: Vec<u32>,
}

impl Graph {
    fn out(&self, node: u32) -> &[u32] {
        let n = node as usize;
        &self.neighbors[self.offsets[n] as usize..self.offsets[n + 1] as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    vectors: Vec<f32>,
    ids: Vec<KeywordId>,
    graph: Option<Graph>,
}

fn normalized(vectors: &[Vec<f64>], dim: usize) -> Result<Vec<f32>, IndexError> {
    let mut out = Vec::with_capacity(vectors.len() * dim);
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(IndexError::DimensionMismatch {
                index: i,
                expected: dim,
                found: v.len(),
            });
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > MIN_NORM) {
            return Err(IndexError::ZeroVector(i));
        }
        out.extend(v.iter().map(|x| (x / norm) as f32));
    }
    Ok(out)
}

fn by_score_then_id(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

impl DenseIndex {
    pub fn build_exact(vectors: &[Vec<f64>], ids: &[KeywordId]) -> Result<Self, IndexError> {
        if vectors.len() != ids.len() {
            return Err(IndexError::LengthMismatch {
                vectors: vectors.len(),
                ids: ids.len(),
            });
        }
        let dim = vectors.first().map_or(0, Vec::len);
        Ok(Self {
            dim,
            vectors: normalized(vectors, dim)?,
            ids: ids.to_vec(),
            graph: None,
        })
    }

    pub fn build_graph(
        vectors: &[Vec<f64>],
        ids: &[KeywordId],
        params: GraphParams,
    ) -> Result<Self, IndexError> {
        params.validate()?;
        let mut index = Self::build_exact(vectors, ids)?;
        index.graph = Some(index.vamana(params));
        Ok(index)
    }

    pub fn kind(&self) -> IndexKind {
        match self.graph {
            Some(_) => IndexKind::Graph,
            None => IndexKind::Exact,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[KeywordId] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn graph_params(&self) -> Option<GraphParams> {
        self.graph.as_ref().map(|g| g.params)
    }

    pub fn entry_point(&self) -> Option<usize> {
        self.graph.as_ref().map(|g| g.entry as usize)
    }

    /// Out-neighbors of point `i` in the graph, empty for exact indexes.
    pub fn out_neighbors(&self, i: usize) -> &[u32] {
        match &self.graph {
            Some(g) => g.out(i as u32),
            None => &[],
        }
    }

    fn ip(&self, i: usize, q: &[f64]) -> f64 {
        self.vector(i)
            .iter()
            .zip(q)
            .map(|(&x, y)| f64::from(x) * y)
            .sum()
    }

    fn ip_points(&self, i: usize, j: usize) -> f64 {
        self.vector(i)
            .iter()
            .zip(self.vector(j))
            .map(|(&x, &y)| f64::from(x) * f64::from(y))
            .sum()
    }

    fn dist_points(&self, i: usize, j: usize) -> f64 {
        1.0 - self.ip_points(i, j)
    }

    fn point_f64(&self, i: usize) -> Vec<f64> {
        self.vector(i).iter().map(|&x| f64::from(x)).collect()
    }

    /// Top `k` by inner product, ties by smaller id. `search_list` only
    /// matters for graph indexes.
    pub fn search(&self, query: &[f64], k: usize, search_list: usize) -> Result<Vec<Neighbor>, IndexError> {
        let n = self.len();
        if k > n {
            return Err(IndexError::KTooLarge { k, n });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                index: 0,
                expected: self.dim,
                found: query.len(),
            });
        }
        match &self.graph {
            None => Ok(self.scan(query, k)),
            Some(g) => {
                if search_list < k {
                    return Err(IndexError::SearchListTooSmall { l: search_list, k });
                }
                let (list, _) = self.greedy(g.entry, |u| g.out(u), query, search_list);
                let mut out: Vec<Neighbor> = list
                    .into_iter()
                    .map(|(_, i)| Neighbor {
                        id: self.ids[i as usize],
                        score: self.ip(i as usize, query),
                    })
                    .collect();
                out.sort_by(by_score_then_id);
                out.truncate(k);
                Ok(out)
            }
        }
    }

    fn scan(&self, query: &[f64], k: usize) -> Vec<Neighbor> {
        let mut out: Vec<Neighbor> = (0..self.len())
            .map(|i| Neighbor {
                id: self.ids[i],
                score: self.ip(i, query),
            })
            .collect();
        if k < out.len() {
            out.select_nth_unstable_by(k - 1, by_score_then_id);
            out.truncate(k);
        }
        out.sort_by(by_score_then_id);
        out
    }

    /// Best-first search with a bounded candidate list. Returns the final
    /// list as (distance, point) sorted ascending and every expanded point.
    fn greedy<'g, F>(&self, entry: u32, out: F, query: &[f64], l: usize) -> (Vec<(f64, u32)>, Vec<u32>)
    where
        F: Fn(u32) -> &'g [u32],
    {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut expanded = Vec::new();
        seen[entry as usize] = true;
        let mut list: Vec<(f64, u32, bool)> = vec![(1.0 - self.ip(entry as usize, query), entry, false)];
        let cmp = |a: &(f64, u32, bool), b: &(f64, u32, bool)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        while let Some(pos) = list.iter().position(|c| !c.2) {
            list[pos].2 = true;
            let node = list[pos].1;
            expanded.push(node);
            for &nb in out(node) {
                if seen[nb as usize] {
                    continue;
                }
                seen[nb as usize] = true;
                let cand = (1.0 - self.ip(nb as usize, query), nb, false);
                if list.len() < l || cmp(&cand, list.last().unwrap()) == Ordering::Less {
                    let at = list.partition_point(|c| cmp(c, &cand) == Ordering::Less);
                    list.insert(at, cand);
                    list.truncate(l);
                }
            }
        }
        (list.into_iter().map(|(d, i, _)| (d, i)).collect(), expanded)
    }

    fn medoid(&self) -> u32 {
        let mut centroid = vec![0.0f64; self.dim];
        for i in 0..self.len() {
            for (c, &x) in centroid.iter_mut().zip(self.vector(i)) {
                *c += f64::from(x);
            }
        }
        (0..self.len())
            .map(|i| (self.ip(i, &centroid), i))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
            .map_or(0, |(_, i)| i as u32)
    }

    /// Keeps at most `r` candidates, dropping any candidate that is much
    /// closer to an already kept neighbor than to `p`.
    fn robust_prune(&self, p: usize, candidates: &mut Vec<u32>, alpha: f64, r: usize) -> Vec<u32> {
        candidates.retain(|&c| c as usize != p);
        candidates.sort_unstable();
        candidates.dedup();
        let mut pool: Vec<(f64, u32)> = candidates
            .iter()
            .map(|&c| (self.dist_points(p, c as usize), c))
            .collect();
        pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut kept = Vec::with_capacity(r);
        let mut alive = vec![true; pool.len()];
        for i in 0..pool.len() {
            if !alive[i] {
                continue;
            }
            let star = pool[i].1 as usize;
            kept.push(pool[i].1);
            if kept.len() == r {
                break;
            }
            for j in i + 1..pool.len() {
                if alive[j] && alpha * self.dist_points(star, pool[j].1 as usize) < pool[j].0 {
                    alive[j] = false;
                }
            }
        }
        kept
    }

    fn vamana(&self, params: GraphParams) -> Graph {
        let n = self.len();
        let r = params.max_degree.min(n.saturating_sub(1));
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut adj: Vec<Vec<u32>> = (0..n)
            .map(|i| {
                index::sample(&mut rng, n.max(1), (r + 1).min(n))
                    .into_iter()
                    .filter(|&j| j != i)
                    .take(r)
                    .map(|j| j as u32)
                    .collect()
            })
            .collect();
        let entry = self.medoid();
        if n > 1 {
            for alpha in [1.0, params.alpha] {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                for &p in &order {
                    let (_, visited) =
                        self.greedy(entry, |u| &adj[u as usize], &self.point_f64(p), params.build_list);
                    let mut cand: Vec<u32> = visited;
                    cand.extend_from_slice(&adj[p]);
                    adj[p] = self.robust_prune(p, &mut cand, alpha, r);
                    for j in adj[p].clone() {
                        let j = j as usize;
                        if adj[j].contains(&(p as u32)) {
                            continue;
                        }
                        adj[j].push(p as u32);
                        if adj[j].len() > r {
                            let mut cand = std::mem::take(&mut adj[j]);
                            adj[j] = self.robust_prune(j, &mut cand, alpha, r);
                        }
                    }
                }
            }
            self.repair_connectivity(&mut adj, entry, r);
        }
        csr(&adj, entry, params)
    }

    /// Links every point unreachable from the entry to its nearest
    /// reachable point that still has spare degree.
    fn repair_connectivity(&self, adj: &mut [Vec<u32>], entry: u32, r: usize) {
        let n = self.len();
        loop {
            let reach = reachable(adj, entry);
            let Some(lost) = (0..n).find(|&i| !reach[i]) else {
                return;
            };
            let best = (0..n)
                .filter(|&i| reach[i])
                .map(|i| (self.dist_points(i, lost), adj[i].len() < r, i))
                .min_by(|a, b| b.1.cmp(&a.1).then(a.0.total_cmp(&b.0)).then(a.2.cmp(&b.2)))
                .map(|(_, _, i)| i)
                .expect("entry is reachable");
            if adj[best].len() >= r {
                // Replace the farthest neighbor; the evicted point is
                // revisited by the next iteration if it becomes unreachable.
                let far = (0..adj[best].len())
                    .max_by(|&a, &b| {
                        self.dist_points(best, adj[best][a] as usize)
                            .total_cmp(&self.dist_points(best, adj[best][b] as usize))
                    })
                    .expect("full list is non-empty");
                adj[best].swap_remove(far);
            }
            adj[best].push(lost as u32);
        }
    }

    pub fn emb_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(EMB_MAGIC);
        w.u32(VERSION);
        w.u64(self.len() as u64);
        w.u64(self.dim as u64);
        for &x in &self.vectors {
            w.f32(x);
        }
        for id in &self.ids {
            w.u64(u64::from(id.0));
        }
        w.finish()
    }

    pub fn graph_bytes(&self) -> Option<Vec<u8>> {
        let g = self.graph.as_ref()?;
        let mut w = Writer::new();
        w.bytes(GRAPH_MAGIC);
        w.u32(VERSION);
        w.u64(self.len() as u64);
        w.u64(g.params.max_degree as u64);
        w.u64(g.params.build_list as u64);
        w.f64(g.params.alpha);
        w.u64(g.params.seed);
        w.u64(u64::from(g.entry));
        for pair in g.offsets.windows(2) {
            w.varint(u64::from(pair[1] - pair[0]));
        }
        for &nb in &g.neighbors {
            w.varint(u64::from(nb));
        }
        Some(w.finish())
    }

    pub fn from_bytes(emb: &[u8], graph: Option<&[u8]>) -> Result<Self, IndexError> {
        let mut r = Reader::open(emb, EMB_MAGIC)?;
        r.expect_version(VERSION)?;
        let n = usize::try_from(r.u64()?).map_err(|_| CodecError::Truncated)?;
        let dim = usize::try_from(r.u64()?).map_err(|_| CodecError::Truncated)?;
        let cells = n.checked_mul(dim).ok_or(CodecError::Truncated)?;
        if r.remaining() < cells.saturating_mul(4).saturating_add(n.saturating_mul(8)) {
            return Err(CodecError::Truncated.into());
        }
        let mut vectors = Vec::with_capacity(cells);
        for _ in 0..cells {
            vectors.push(r.f32()?);
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let id = u32::try_from(r.u64()?)
                .map_err(|_| CodecError::Corrupt("keyword id exceeds u32".into()))?;
            ids.push(KeywordId(id));
        }
        r.expect_end()?;
        let mut index = Self {
            dim,
            vectors,
            ids,
            graph: None,
        };
        if let Some(bytes) = graph {
            index.graph = Some(read_graph(bytes, n)?);
        }
        Ok(index)
    }

    /// Writes the embeddings and, for graph indexes, the adjacency file.
    pub fn save(&self, emb_path: &Path, graph_path: Option<&Path>) -> Result<(), IndexError> {
        write(emb_path, &self.emb_bytes())?;
        if let (Some(path), Some(bytes)) = (graph_path, self.graph_bytes()) {
            write(path, &bytes)?;
        }
        Ok(())
    }

    pub fn load(emb_path: &Path, graph_path: Option<&Path>) -> Result<Self, IndexError> {
        let emb = read(emb_path)?;
        let graph = graph_path.map(read).transpose()?;
        Self::from_bytes(&emb, graph.as_deref())
    }
}

fn csr(adj: &[Vec<u32>], entry: u32, params: GraphParams) -> Graph {
    let mut offsets = Vec::with_capacity(adj.len() + 1);
    let mut neighbors = Vec::new();
    offsets.push(0);
    for list in adj {
        neighbors.extend_from_slice(list);
        offsets.push(neighbors.len() as u32);
    }
    Graph {
        params,
        entry,
        offsets,
        neighbors,
    }
}

fn reachable(adj: &[Vec<u32>], entry: u32) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    if adj.is_empty() {
        return seen;
    }
    let mut stack = vec![entry];
    seen[entry as usize] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u as usize] {
            if !seen[v as usize] {
                seen[v as usize] = true;
                stack.push(v);
            }
        }
    }
    seen
}

fn read_graph(bytes: &[u8], vectors: usize) -> Result<Graph, IndexError> {
    let corrupt = |m: &str| IndexError::Codec(CodecError::Corrupt(m.into()));
    let mut r = Reader::open(bytes, GRAPH_MAGIC)?;
    r.expect_version(VERSION)?;
    let n = r.u64()? as usize;
    if n != vectors {
        return Err(IndexError::GraphMismatch { graph: n, vectors });
    }
    let params = GraphParams {
        max_degree: r.u64()? as usize,
        build_list: r.u64()? as usize,
        alpha: r.f64()?,
        seed: r.u64()?,
    };
    let entry = r.u64()?;
    if n > 0 && entry >= n as u64 {
        return Err(corrupt("entry point out of range"));
    }
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0u32);
    for _ in 0..n {
        let deg = r.varint_u32()?;
        if deg as usize > params.max_degree {
            return Err(corrupt("out-degree exceeds max_degree"));
        }
        offsets.push(offsets.last().unwrap() + deg);
    }
    let total = *offsets.last().unwrap() as usize;
    let mut neighbors = Vec::with_capacity(total);
    for _ in 0..total {
        let nb = r.varint_u32()?;
        if nb as usize >= n {
            return Err(corrupt("neighbor out of range"));
        }
        neighbors.push(nb);
    }
    r.expect_end()?;
    Ok(Graph {
        params,
        entry: entry as u32,
        offsets,
        neighbors,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), IndexError> {
    fs::write(path, bytes).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read(path: &Path) -> Result<Vec<u8>, IndexError> {
    fs::read(path).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Greedy leader clustering in id order. A keyword joins the first
/// representative whose inner product with it reaches `threshold`;
/// otherwise it becomes a representative. Inputs need not be normalized.
pub fn cluster_keywords(
    vectors: &[Vec<f64>],
    ids: &[KeywordId],
    threshold: f64,
) -> Result<BTreeMap<KeywordId, KeywordId>, IndexError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(IndexError::InvalidThreshold(threshold));
    }
    if vectors.len() != ids.len() {
        return Err(IndexError::LengthMismatch {
            vectors: vectors.len(),
            ids: ids.len(),
        });
    }
    let dim = vectors.first().map_or(0, Vec::len);
    let unit: Vec<Vec<f64>> = normalized(vectors, dim)?
        .chunks(dim.max(1))
        .map(|c| c.iter().map(|&x| f64::from(x)).collect())
        .collect();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    let mut leaders: Vec<usize> = Vec::new();
    let mut map = BTreeMap::new();
    for i in order {
        let rep = leaders.iter().copied().find(|&l| {
            let ip: f64 = unit[l].iter().zip(&unit[i]).map(|(a, b)| a * b).sum();
            ip >= threshold
        });
        match rep {
            Some(l) => {
                map.insert(ids[i], ids[l]);
            }
            None => {
                leaders.push(i);
                map.insert(ids[i], ids[i]);
            }
        }
    }
    Ok(map)
}

/// Reads `id<TAB>representative` lines.
pub fn parse_clusters(text: &str) -> Result<BTreeMap<KeywordId, KeywordId>, IndexError> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || IndexError::Codec(CodecError::Corrupt(format!("cluster line {}", n + 1)));
        let (a, b) = line.split_once('\t').ok_or_else(bad)?;
        let a: u32 = a.trim().parse().map_err(|_| bad())?;
        let b: u32 = b.trim().parse().map_err(|_| bad())?;
        map.insert(KeywordId(a), KeywordId(b));
    }
    Ok(map)
}

pub fn clusters_to_string(map: &BTreeMap<KeywordId, KeywordId>) -> String {
    map.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
}
