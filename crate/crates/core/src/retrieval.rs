//! Model scoring over the catalog, a 4-layer HNSW graph on entity vectors, and
//! model-scored beam search over that graph.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unimatch_tape::Tensor;

use crate::backbone;
use crate::encoder::{ad_network, encode, encode_catalog, encode_user, EncodedEntity, EncodedUser};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Binder;
use crate::synthdata::{Catalog, UserContext};

/// Frozen model plus hashed catalog features.
pub struct Scorer<'a> {
    pub model: &'a Model,
    pub entities: Cow<'a, [EncodedEntity]>,
    pub chunk: usize,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, catalog: &Catalog) -> Self {
        Self {
            model,
            entities: Cow::Owned(encode_catalog(&model.config, catalog)),
            chunk: 1024,
        }
    }

    /// Reuses an already encoded catalog.
    pub fn with_entities(model: &'a Model, entities: &'a [EncodedEntity]) -> Self {
        Self {
            model,
            entities: Cow::Borrowed(entities),
            chunk: 1024,
        }
    }

    pub fn catalog_len(&self) -> usize {
        self.entities.len()
    }

    pub fn encode_user(&self, ctx: &UserContext) -> EncodedUser {
        encode_user(&self.model.config, ctx)
    }

    /// Domain-`domain` tower logit for each `(user, id)` pair.
    pub fn score(&self, user: &EncodedUser, domain: usize, ids: &[u32]) -> Result<Vec<f64>> {
        if domain >= self.model.config.domains {
            return Err(Error::Contract(format!(
                "domain {domain} outside 0..{}",
                self.model.config.domains
            )));
        }
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(self.chunk.max(1)) {
            let cands: Vec<&EncodedEntity> = chunk
                .iter()
                .map(|&id| {
                    self.entities
                        .get(id as usize)
                        .ok_or_else(|| Error::Contract(format!("unknown entity {id}")))
                })
                .collect::<Result<_>>()?;
            let mut b = Binder::new(&self.model.params, false);
            let bundle = encode(&mut b, &self.model.config, &[user], &cands, cands.len())?;
            let domains = vec![domain; cands.len()];
            let bb = backbone::forward(&mut b, &self.model.config, bundle.repr, &domains)?;
            out.extend_from_slice(b.tape.value(bb.logits).data());
        }
        Ok(out)
    }

    /// Ad-network output for every catalog entity, `[catalog, embed_dim]`.
    pub fn entity_vectors(&self) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(self.entities.len() * self.model.config.embed_dim);
        for chunk in self.entities.chunks(self.chunk.max(1)) {
            let cands: Vec<&EncodedEntity> = chunk.iter().collect();
            let mut b = Binder::new(&self.model.params, false);
            let v = ad_network(&mut b, &self.model.config, &cands)?;
            rows.extend_from_slice(b.tape.value(v).data());
        }
        Ok(Tensor::new(self.entities.len(), self.model.config.embed_dim, rows)?)
    }
}

/// Sorts `(id, score)` by score descending, then id ascending.
pub fn rank(scored: &mut [(u32, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Exact top-`n` by model score over the whole catalog.
pub fn brute_force_topk(scorer: &Scorer<'_>, user: &EncodedUser, domain: usize, n: usize) -> Result<Vec<(u32, f64)>> {
    let ids: Vec<u32> = (0..scorer.catalog_len() as u32).collect();
    let scores = scorer.score(user, domain, &ids)?;
    let mut scored: Vec<(u32, f64)> = ids.into_iter().zip(scores).collect();
    rank(&mut scored);
    scored.truncate(n);
    Ok(scored)
}

pub const INDEX_LAYERS: usize = 4;
const INDEX_MAGIC: &[u8; 8] = b"UMHNSW01";
pub const INDEX_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswConfig {
    pub max_neighbors: usize,
    pub ef_construction: usize,
    pub seed: u64,
}

impl Default for HnswConfig {
    fn default() -> Self {
        Self {
            max_neighbors: 16,
            ef_construction: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HnswIndex {
    pub config: HnswConfig,
    /// Highest layer of every node.
    pub levels: Vec<u8>,
    /// `adjacency[layer][node]`, id-sorted; empty for nodes above their level.
    pub adjacency: Vec<Vec<Vec<u32>>>,
    pub entry: u32,
    pub vectors: Tensor,
    /// Set when the catalog was smaller than `max_neighbors`.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Cand {
    dist: f64,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl HnswIndex {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    fn dist(&self, q: &[f64], id: u32) -> f64 {
        l2(q, self.vectors.row_slice(id as usize))
    }

    pub fn neighbors(&self, layer: usize, id: u32) -> &[u32] {
        &self.adjacency[layer][id as usize]
    }

    pub fn build(vectors: Tensor, config: HnswConfig) -> Result<Self> {
        let n = vectors.rows();
        if n == 0 {
            return Err(Error::Contract("cannot index an empty catalog".into()));
        }
        if config.max_neighbors < 2 || config.ef_construction == 0 {
            return Err(Error::Config("max_neighbors >= 2 and ef_construction >= 1 are required".into()));
        }
        let m = config.max_neighbors;
        let mut index = Self {
            config,
            levels: vec![0; n],
            adjacency: vec![vec![Vec::new(); n]; INDEX_LAYERS],
            entry: 0,
            vectors,
            degenerate: n < m,
        };
        if index.degenerate {
            log::warn!("catalog of {n} entities is smaller than max_neighbors {m}; using a complete graph");
            for i in 0..n {
                index.adjacency[0][i] = (0..n as u32).filter(|&j| j as usize != i).collect();
            }
            return Ok(index);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let ml = 1.0 / (m as f64).ln();
        for level in index.levels.iter_mut() {
            let u: f64 = 1.0 - rng.gen::<f64>();
            *level = ((-u.ln() * ml).floor() as usize).min(INDEX_LAYERS - 1) as u8;
        }
        let mut top = index.levels[0] as usize;
        for q in 1..n as u32 {
            let query = index.vectors.row_slice(q as usize).to_vec();
            let lq = index.levels[q as usize] as usize;
            let mut eps = vec![index.entry];
            for layer in (lq + 1..=top).rev() {
                let w = index.search_layer(&query, &eps, 1, layer);
                eps = vec![w[0].id];
            }
            for layer in (0..=lq.min(top)).rev() {
                let w = index.search_layer(&query, &eps, config.ef_construction, layer);
                let cap = if layer == 0 { 2 * m } else { m };
                let chosen: Vec<u32> = w.iter().take(m).map(|c| c.id).collect();
                index.adjacency[layer][q as usize] = chosen.clone();
                for e in chosen {
                    let list = &mut index.adjacency[layer][e as usize];
                    list.push(q);
                    if list.len() > cap {
                        let base = index.vectors.row_slice(e as usize).to_vec();
                        let mut ranked: Vec<Cand> = index.adjacency[layer][e as usize]
                            .iter()
                            .map(|&id| Cand {
                                dist: l2(&base, index.vectors.row_slice(id as usize)),
                                id,
                            })
                            .collect();
                        ranked.sort();
                        ranked.truncate(cap);
                        index.adjacency[layer][e as usize] = ranked.into_iter().map(|c| c.id).collect();
                    }
                }
                eps = w.iter().map(|c| c.id).collect();
            }
            if lq > top {
                top = lq;
                index.entry = q;
            }
        }
        // The graph always has four layers: lift the entry point if no node reached the top.
        let entry = index.entry as usize;
        index.levels[entry] = (INDEX_LAYERS - 1) as u8;
        index.repair();
        Ok(index)
    }

    /// Symmetrizes every layer, reconnects unreachable nodes, sorts lists.
    fn repair(&mut self) {
        let n = self.len();
        for layer in 0..INDEX_LAYERS {
            let mut sets: Vec<BTreeSet<u32>> = self.adjacency[layer]
                .iter()
                .map(|l| l.iter().copied().collect())
                .collect();
            for i in 0..n {
                for j in sets[i].clone() {
                    sets[j as usize].insert(i as u32);
                }
            }
            let members: Vec<u32> = (0..n as u32)
                .filter(|&i| self.levels[i as usize] as usize >= layer)
                .collect();
            let mut reached = vec![false; n];
            let mut reached_list = Vec::new();
            let flood = |start: u32, sets: &Vec<BTreeSet<u32>>, reached: &mut Vec<bool>, list: &mut Vec<u32>| {
                let mut queue = VecDeque::from([start]);
                reached[start as usize] = true;
                list.push(start);
                while let Some(u) = queue.pop_front() {
                    for &v in &sets[u as usize] {
                        if !reached[v as usize] {
                            reached[v as usize] = true;
                            list.push(v);
                            queue.push_back(v);
                        }
                    }
                }
            };
            flood(self.entry, &sets, &mut reached, &mut reached_list);
            for &u in &members {
                if reached[u as usize] {
                    continue;
                }
                let q = self.vectors.row_slice(u as usize);
                let nearest = reached_list
                    .iter()
                    .map(|&v| Cand {
                        dist: l2(q, self.vectors.row_slice(v as usize)),
                        id: v,
                    })
                    .min()
                    .expect("entry is reached");
                sets[u as usize].insert(nearest.id);
                sets[nearest.id as usize].insert(u);
                flood(u, &sets, &mut reached, &mut reached_list);
            }
            self.adjacency[layer] = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        }
    }

    /// Best-first search in one layer; returns up to `ef` nodes nearest first.
    fn search_layer(&self, q: &[f64], eps: &[u32], ef: usize, layer: usize) -> Vec<Cand> {
        let mut visited: HashSet<u32> = eps.iter().copied().collect();
        let mut frontier: BinaryHeap<std::cmp::Reverse<Cand>> = BinaryHeap::new();
        let mut best: BinaryHeap<Cand> = BinaryHeap::new();
        for &e in eps {
            let c = Cand { dist: self.dist(q, e), id: e };
            frontier.push(std::cmp::Reverse(c));
            best.push(c);
            if best.len() > ef {
                best.pop();
            }
        }
        while let Some(std::cmp::Reverse(c)) = frontier.pop() {
            if best.len() >= ef && c > *best.peek().expect("non-empty") {
                break;
            }
            for &nb in &self.adjacency[layer][c.id as usize] {
                if !visited.insert(nb) {
                    continue;
                }
                let cand = Cand { dist: self.dist(q, nb), id: nb };
                if best.len() < ef || cand < *best.peek().expect("non-empty") {
                    frontier.push(std::cmp::Reverse(cand));
                    best.push(cand);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out = best.into_vec();
        out.sort();
        out
    }

    /// Approximate L2 `k` nearest neighbors of `q`, nearest first.
    pub fn knn(&self, q: &[f64], k: usize, ef: usize) -> Vec<(u32, f64)> {
        let mut eps = vec![self.entry];
        for layer in (1..INDEX_LAYERS).rev() {
            let w = self.search_layer(q, &eps, 1, layer);
            eps = vec![w[0].id];
        }
        self.search_layer(q, &eps, ef.max(k), 0)
            .into_iter()
            .take(k)
            .map(|c| (c.id, c.dist))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(INDEX_LAYERS as u32).to_le_bytes())?;
        w.write_all(&(self.config.max_neighbors as u32).to_le_bytes())?;
        w.write_all(&(self.config.ef_construction as u32).to_le_bytes())?;
        w.write_all(&self.config.seed.to_le_bytes())?;
        w.write_all(&self.entry.to_le_bytes())?;
        w.write_all(&[self.degenerate as u8])?;
        w.write_all(&(self.vectors.rows() as u64).to_le_bytes())?;
        w.write_all(&(self.vectors.cols() as u64).to_le_bytes())?;
        w.write_all(&self.levels)?;
        for layer in &self.adjacency {
            for list in layer {
                w.write_all(&(list.len() as u32).to_le_bytes())?;
                for id in list {
                    w.write_all(&id.to_le_bytes())?;
                }
            }
        }
        for v in self.vectors.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format(format!("{} is not an index file", path.display())));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut u32_ = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4))
        };
        let version = u32_(&mut r)?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let layers = u32_(&mut r)? as usize;
        if layers != INDEX_LAYERS {
            return Err(Error::Format(format!("index has {layers} layers, expected {INDEX_LAYERS}")));
        }
        let max_neighbors = u32_(&mut r)? as usize;
        let ef_construction = u32_(&mut r)? as usize;
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let entry = u32_(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let dim = u64::from_le_bytes(b8) as usize;
        let mut levels = vec![0u8; n];
        r.read_exact(&mut levels)?;
        let mut adjacency = vec![vec![Vec::new(); n]; layers];
        for layer in adjacency.iter_mut() {
            for list in layer.iter_mut() {
                let len = u32_(&mut r)? as usize;
                if len > n {
                    return Err(Error::Format(format!("adjacency list of {len} exceeds {n} nodes")));
                }
                for _ in 0..len {
                    list.push(u32_(&mut r)?);
                }
            }
        }
        let mut data = vec![0.0; n * dim];
        for v in data.iter_mut() {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        Ok(Self {
            config: HnswConfig {
                max_neighbors,
                ef_construction,
                seed,
            },
            levels,
            adjacency,
            entry,
            vectors: Tensor::new(n, dim, data)?,
            degenerate: flag[0] != 0,
        })
    }
}

/// Builds the graph over the model's ad-network vectors.
pub fn build_index(scorer: &Scorer<'_>, config: HnswConfig) -> Result<HnswIndex> {
    HnswIndex::build(scorer.entity_vectors()?, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub user: UserContext,
    pub domain: usize,
    pub k_top: usize,
    /// Beam width kept per layer.
    pub beam: usize,
    /// Cap on expansion rounds per layer; unlimited when absent.
    #[serde(default)]
    pub ef_search: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ids: Vec<u32>,
    pub scores: Vec<f64>,
    /// Set when `k_top` exceeded the catalog and everything was returned.
    pub truncated: bool,
    /// Number of distinct entities the model scored.
    pub scored: usize,
}

/// Model-scored descent: per layer, expand graph neighbors of the beam until
/// every beam member has been expanded, keeping the best `beam` by model
/// score. The union of the final beams of all layers is ranked and cut to `k_top`.
pub fn retrieve(index: &HnswIndex, scorer: &Scorer<'_>, query: &RetrievalQuery) -> Result<RetrievalResult> {
    let user = scorer.encode_user(&query.user);
    let opts = SearchOptions {
        k_top: query.k_top,
        beam: query.beam,
        max_rounds: query.ef_search,
    };
    retrieve_with(index, scorer, &user, query.domain, opts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchOptions {
    pub k_top: usize,
    pub beam: usize,
    pub max_rounds: Option<usize>,
}

pub fn retrieve_encoded(
    index: &HnswIndex,
    scorer: &Scorer<'_>,
    user: &EncodedUser,
    domain: usize,
    k_top: usize,
    beam: usize,
) -> Result<RetrievalResult> {
    let opts = SearchOptions {
        k_top,
        beam,
        max_rounds: None,
    };
    retrieve_with(index, scorer, user, domain, opts)
}

pub fn retrieve_with(
    index: &HnswIndex,
    scorer: &Scorer<'_>,
    user: &EncodedUser,
    domain: usize,
    opts: SearchOptions,
) -> Result<RetrievalResult> {
    let SearchOptions { k_top, beam, max_rounds } = opts;
    if index.len() != scorer.catalog_len() {
        return Err(Error::Contract(format!(
            "index covers {} entities, catalog has {}",
            index.len(),
            scorer.catalog_len()
        )));
    }
    if beam < k_top.min(index.len()) || beam == 0 {
        return Err(Error::Contract(format!("beam {beam} is narrower than k_top {k_top}")));
    }
    let truncated = k_top > index.len();
    let mut cache: HashMap<u32, f64> = HashMap::new();
    let score_new = |ids: &[u32], cache: &mut HashMap<u32, f64>| -> Result<()> {
        let fresh: Vec<u32> = ids.iter().copied().filter(|id| !cache.contains_key(id)).collect();
        if !fresh.is_empty() {
            let s = scorer.score(user, domain, &fresh)?;
            cache.extend(fresh.into_iter().zip(s));
        }
        Ok(())
    };
    let by_score = |cache: &HashMap<u32, f64>, ids: &mut Vec<u32>| {
        ids.sort_by(|a, b| cache[b].total_cmp(&cache[a]).then(a.cmp(b)));
    };

    let mut current = vec![index.entry];
    score_new(&current, &mut cache)?;
    let mut union: BTreeSet<u32> = BTreeSet::new();
    for layer in (0..INDEX_LAYERS).rev() {
        let mut seen: HashSet<u32> = current.iter().copied().collect();
        let mut expanded: HashSet<u32> = HashSet::new();
        let mut rounds = 0;
        while max_rounds.map_or(true, |m| rounds < m) {
            rounds += 1;
            let todo: Vec<u32> = current.iter().copied().filter(|id| !expanded.contains(id)).collect();
            if todo.is_empty() {
                break;
            }
            let mut fresh = Vec::new();
            for id in todo {
                expanded.insert(id);
                for &nb in index.neighbors(layer, id) {
                    if seen.insert(nb) {
                        fresh.push(nb);
                    }
                }
            }
            score_new(&fresh, &mut cache)?;
            current.extend(fresh);
            by_score(&cache, &mut current);
            current.truncate(beam);
        }
        union.extend(current.iter().copied());
    }
    let mut ranked: Vec<(u32, f64)> = union.into_iter().map(|id| (id, cache[&id])).collect();
    rank(&mut ranked);
    ranked.truncate(k_top);
    Ok(RetrievalResult {
        ids: ranked.iter().map(|r| r.0).collect(),
        scores: ranked.iter().map(|r| r.1).collect(),
        truncated,
        scored: cache.len(),
    })
}

/// Ground-truth-free helper: exact L2 `k` nearest neighbors.
pub fn brute_force_l2(vectors: &Tensor, q: &[f64], k: usize) -> Vec<u32> {
    let mut all: Vec<Cand> = (0..vectors.rows() as u32)
        .map(|id| Cand {
            dist: l2(q, vectors.row_slice(id as usize)),
            id,
        })
        .collect();
    all.sort();
    all.into_iter().take(k).map(|c| c.id).collect()
}

/// Node count per layer, for diagnostics.
pub fn layer_sizes(index: &HnswIndex) -> BTreeMap<usize, usize> {
    (0..INDEX_LAYERS)
        .map(|l| (l, index.levels.iter().filter(|&&v| v as usize >= l).count()))
        .collect()
}
