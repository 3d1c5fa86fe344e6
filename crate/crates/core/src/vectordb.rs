//! Dense-vector store with exact and inverted-list cosine retrieval.
//!
//! Vectors are normalized and rounded to `f32` precision on insert, so an
//! index saved to disk and loaded back answers queries bit-for-bit the same.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::embed::Embedding;
use crate::lora::{read_f32, read_u32};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"VDB1";

/// Relevance floor applied before prompt assembly.
pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("dimension mismatch: index has {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cannot build {requested} clusters over {size} entries")]
    TooManyClusters { requested: usize, size: usize },
    #[error("index is not clustered")]
    NotClustered,
    #[error("nprobe {nprobe} outside 1..={n_clusters}")]
    NProbe { nprobe: usize, n_clusters: usize },
    #[error("index io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub id: String,
    pub vector: Embedding<T>,
    pub payload: String,
    norm: T,
}

#[derive(Debug, Clone, PartialEq)]
struct Clusters<T> {
    centroids: Vec<Embedding<T>>,
    lists: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit<T> {
    pub id: String,
    pub score: T,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult<T> {
    pub hits: Vec<Hit<T>>,
    pub k: usize,
}

impl<T: Scalar> SearchResult<T> {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.id.as_str()).collect()
    }
}

/// Objective trace of one clustering run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterReport {
    /// Σ (1 − cos(x, centroid)) after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex<T> {
    dim: usize,
    entries: Vec<Entry<T>>,
    by_id: HashMap<String, usize>,
    clusters: Option<Clusters<T>>,
}

fn stored<T: Scalar>(v: &Embedding<T>) -> Embedding<T> {
    Embedding::new(v.normalized().values().iter().map(|x| x.round_f32()).collect())
}

fn cosine_with_norms<T: Scalar>(q: &Embedding<T>, qn: T, v: &Embedding<T>, vn: T) -> T {
    if qn.is_zero() || vn.is_zero() {
        return T::zero();
    }
    let dot: T = q.values().iter().zip(v.values()).map(|(&a, &b)| a * b).sum();
    (dot / (qn * vn)).max(-T::one()).min(T::one())
}

/// Score descending, then id ascending.
fn rank_order<T: Scalar>(a: &Hit<T>, b: &Hit<T>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.id.cmp(&b.id))
}

impl<T: Scalar> VectorIndex<T> {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: Vec::new(), by_id: HashMap::new(), clusters: None }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn is_clustered(&self) -> bool {
        self.clusters.is_some()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.as_ref().map_or(0, |c| c.centroids.len())
    }

    pub fn centroids(&self) -> Option<&[Embedding<T>]> {
        self.clusters.as_ref().map(|c| c.centroids.as_slice())
    }

    /// Entry positions per inverted list.
    pub fn inverted_lists(&self) -> Option<&[Vec<usize>]> {
        self.clusters.as_ref().map(|c| c.lists.as_slice())
    }

    fn check_dim(&self, v: &Embedding<T>) -> Result<(), IndexError> {
        if v.dim() != self.dim {
            return Err(IndexError::Dimension { expected: self.dim, got: v.dim() });
        }
        Ok(())
    }

    pub fn add(&mut self, id: impl Into<String>, vector: &Embedding<T>, payload: impl Into<String>) -> Result<(), IndexError> {
        let id = id.into();
        self.check_dim(vector)?;
        if self.by_id.contains_key(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        let vector = stored(vector);
        let norm = vector.norm();
        let pos = self.entries.len();
        if let Some(cl) = self.clusters.as_mut() {
            let c = nearest_centroid(&cl.centroids, &vector, norm);
            cl.lists[c].push(pos);
        }
        self.by_id.insert(id.clone(), pos);
        self.entries.push(Entry { id, vector, payload: payload.into(), norm });
        Ok(())
    }

    fn score_positions(&self, query: &Embedding<T>, positions: impl Iterator<Item = usize>, k: usize) -> SearchResult<T> {
        let qn = query.norm();
        let mut hits: Vec<Hit<T>> = positions
            .map(|i| {
                let e = &self.entries[i];
                Hit {
                    id: e.id.clone(),
                    score: cosine_with_norms(query, qn, &e.vector, e.norm),
                    payload: e.payload.clone(),
                }
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        SearchResult { hits, k }
    }

    /// Exact top-k by cosine over every entry.
    pub fn search_exact(&self, query: &Embedding<T>, k: usize) -> Result<SearchResult<T>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        self.check_dim(query)?;
        Ok(self.score_positions(query, 0..self.entries.len(), k))
    }

    /// Top-k over the inverted lists of the `nprobe` closest centroids.
    pub fn search_clustered(
        &self,
        query: &Embedding<T>,
        k: usize,
        nprobe: usize,
    ) -> Result<SearchResult<T>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        self.check_dim(query)?;
        let cl = self.clusters.as_ref().ok_or(IndexError::NotClustered)?;
        let n_clusters = cl.centroids.len();
        if nprobe == 0 || nprobe > n_clusters {
            return Err(IndexError::NProbe { nprobe, n_clusters });
        }
        let qn = query.norm();
        let mut order: Vec<(usize, T)> = cl
            .centroids
            .iter()
            .enumerate()
            .map(|(i, c)| (i, cosine_with_norms(query, qn, c, c.norm())))
            .collect();
        order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        let positions = order[..nprobe].iter().flat_map(|&(c, _)| cl.lists[c].iter().copied());
        Ok(self.score_positions(query, positions, k))
    }

    /// Spherical k-means with k-means++ seeding. Deterministic under `seed`.
    pub fn build_clusters(&mut self, n_clusters: usize, iters: usize, seed: u64) -> Result<ClusterReport, IndexError> {
        let n = self.entries.len();
        if n_clusters == 0 || n_clusters > n {
            return Err(IndexError::TooManyClusters { requested: n_clusters, size: n });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = self.seed_centroids(n_clusters, &mut rng);
        let mut assign: Vec<usize> = Vec::new();
        let mut objective = Vec::new();
        let mut iterations = 0;
        for t in 0..=iters {
            let next: Vec<usize> = self
                .entries
                .iter()
                .map(|e| nearest_centroid(&centroids, &e.vector, e.norm))
                .collect();
            let obj: f64 = self
                .entries
                .iter()
                .zip(&next)
                .map(|(e, &c)| 1.0 - cosine_with_norms(&e.vector, e.norm, &centroids[c], centroids[c].norm()).as_f64())
                .sum();
            objective.push(obj);
            let converged = next == assign;
            assign = next;
            if converged || t == iters {
                break;
            }
            iterations += 1;
            centroids = self.update_centroids(&assign, centroids);
        }
        let mut lists = vec![Vec::new(); n_clusters];
        for (i, &c) in assign.iter().enumerate() {
            lists[c].push(i);
        }
        self.clusters = Some(Clusters { centroids, lists });
        Ok(ClusterReport { objective, iterations })
    }

    fn seed_centroids(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<Embedding<T>> {
        let n = self.entries.len();
        let mut chosen = vec![rng.random_range(0..n)];
        let mut dist: Vec<f64> = vec![f64::INFINITY; n];
        while chosen.len() < k {
            let last = &self.entries[*chosen.last().unwrap()];
            for (i, e) in self.entries.iter().enumerate() {
                let d = 1.0 - cosine_with_norms(&e.vector, e.norm, &last.vector, last.norm).as_f64();
                dist[i] = dist[i].min(d.max(0.0));
            }
            for &c in &chosen {
                dist[c] = 0.0;
            }
            let total: f64 = dist.iter().sum();
            let pick = if total > 0.0 {
                let mut r = rng.random::<f64>() * total;
                let mut pick = None;
                for (i, &d) in dist.iter().enumerate() {
                    if d > 0.0 {
                        pick = Some(i);
                        if r < d {
                            break;
                        }
                        r -= d;
                    }
                }
                pick.expect("positive mass")
            } else {
                // All remaining points coincide with a chosen centroid.
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            };
            chosen.push(pick);
        }
        chosen.iter().map(|&i| self.entries[i].vector.clone()).collect()
    }

    fn update_centroids(&self, assign: &[usize], old: Vec<Embedding<T>>) -> Vec<Embedding<T>> {
        let mut sums = vec![vec![T::zero(); self.dim]; old.len()];
        let mut counts = vec![0usize; old.len()];
        for (e, &c) in self.entries.iter().zip(assign) {
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(e.vector.values()) {
                *s += v;
            }
        }
        old.into_iter()
            .zip(sums)
            .zip(counts)
            .map(|((prev, sum), count)| {
                let mean = Embedding::new(sum);
                if count == 0 || mean.is_zero() {
                    prev
                } else {
                    stored(&mean)
                }
            })
            .collect()
    }

    /// `VDB1`, dim, count, n_clusters (u32 LE), centroids as f32 LE, then
    /// per entry: length-prefixed id and payload, the vector, and its list
    /// number when clustered.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), IndexError> {
        w.write_all(MAGIC)?;
        for v in [self.dim, self.entries.len(), self.n_clusters()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut list_of = vec![0u32; self.entries.len()];
        if let Some(cl) = &self.clusters {
            for c in &cl.centroids {
                write_f32s(&mut w, c.values())?;
            }
            for (li, list) in cl.lists.iter().enumerate() {
                for &i in list {
                    list_of[i] = li as u32;
                }
            }
        }
        for (i, e) in self.entries.iter().enumerate() {
            write_str(&mut w, &e.id)?;
            write_str(&mut w, &e.payload)?;
            write_f32s(&mut w, e.vector.values())?;
            if self.clusters.is_some() {
                w.write_all(&list_of[i].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, IndexError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(IndexError::Corrupt("bad magic".into()));
        }
        let dim = read_u32(&mut r)? as usize;
        let count = read_u32(&mut r)? as usize;
        let n_clusters = read_u32(&mut r)? as usize;
        let mut centroids = Vec::with_capacity(n_clusters);
        for _ in 0..n_clusters {
            centroids.push(read_vector(&mut r, dim)?);
        }
        let mut idx = Self::new(dim);
        let mut lists = vec![Vec::new(); n_clusters];
        for pos in 0..count {
            let id = read_str(&mut r)?;
            let payload = read_str(&mut r)?;
            let vector: Embedding<T> = read_vector(&mut r, dim)?;
            if n_clusters > 0 {
                let li = read_u32(&mut r)? as usize;
                lists
                    .get_mut(li)
                    .ok_or_else(|| IndexError::Corrupt(format!("list {li} out of range")))?
                    .push(pos);
            }
            if idx.by_id.insert(id.clone(), pos).is_some() {
                return Err(IndexError::DuplicateId(id));
            }
            let norm = vector.norm();
            idx.entries.push(Entry { id, vector, payload, norm });
        }
        if n_clusters > 0 {
            idx.clusters = Some(Clusters { centroids, lists });
        }
        Ok(idx)
    }
}

fn nearest_centroid<T: Scalar>(centroids: &[Embedding<T>], v: &Embedding<T>, vn: T) -> usize {
    let mut best = 0;
    let mut best_score = T::neg_infinity();
    for (i, c) in centroids.iter().enumerate() {
        let s = cosine_with_norms(v, vn, c, c.norm());
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

fn write_f32s<W: Write, T: Scalar>(w: &mut W, xs: &[T]) -> io::Result<()> {
    for x in xs {
        w.write_all(&x.as_f32().to_le_bytes())?;
    }
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String, IndexError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| IndexError::Corrupt(e.to_string()))
}

fn read_vector<T: Scalar, R: Read>(r: &mut R, dim: usize) -> Result<Embedding<T>, IndexError> {
    let mut v = Vec::with_capacity(dim);
    for _ in 0..dim {
        v.push(T::from_f32(read_f32(r)?).unwrap());
    }
    Ok(Embedding::new(v))
}
