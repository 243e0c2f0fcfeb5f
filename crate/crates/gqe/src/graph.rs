//! Exact K-nearest-neighbor graph over an embedding store.
//!
//! Neighbors are found by brute-force cosine scan. On unit vectors ranking by
//! descending cosine is the same as ranking by ascending Euclidean distance,
//! so no separate metric is needed. Lists exclude the node itself, hold
//! exactly `k` entries sorted by descending similarity with ties broken by
//! ascending id, and are cached on disk bound to the store's content digest.
//!
//! Cache layout (`KNN1`):
//!
//! ```text
//! magic "KNN1" | k u32 | n u32 | store digest (32 bytes)
//! n records of k pairs: neighbor id u32, similarity f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{GqeError, Result};
use crate::io;
use crate::math;
use crate::store::EmbeddingStore;

const MAGIC: &[u8; 4] = b"KNN1";

/// Precomputed neighbor lists for every database item.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    k: usize,
    n: usize,
    store_digest: [u8; 32],
    /// Flat `n * k` (id, similarity) pairs, row per node.
    entries: Vec<(u32, f32)>,
}

/// Fresh top-k result for a query vector: (database id, cosine similarity),
/// descending similarity, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryNeighbors {
    entries: Vec<(u32, f64)>,
}

impl QueryNeighbors {
    /// Build from an explicit ranked list. Entries must already be sorted by
    /// descending similarity with ties broken by ascending id.
    pub fn from_entries(entries: Vec<(u32, f64)>) -> Result<Self> {
        for w in entries.windows(2) {
            let ordered = w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0);
            if !ordered {
                return Err(GqeError::InvalidInput(
                    "neighbor entries must be sorted by descending similarity, ties by id".into(),
                ));
            }
        }
        Ok(QueryNeighbors { entries })
    }

    /// Adopt a database node's cached neighbor list, truncated to `k`.
    pub fn from_graph(graph: &KnnGraph, id: u32, k: usize) -> Result<Self> {
        if k == 0 || k > graph.k() {
            return Err(GqeError::InvalidInput(format!(
                "requested {k} neighbors from a graph built with k={}",
                graph.k()
            )));
        }
        let entries = graph
            .neighbors(id)
            .iter()
            .take(k)
            .map(|&(j, sim)| (j, sim as f64))
            .collect();
        Ok(QueryNeighbors { entries })
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(id, _)| id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn store_digest(&self) -> &[u8; 32] {
        &self.store_digest
    }

    pub fn neighbors(&self, id: u32) -> &[(u32, f32)] {
        let i = id as usize;
        &self.entries[i * self.k..(i + 1) * self.k]
    }

    /// Digest over the graph's own serialized content, used to bind derived
    /// caches (precomputed levels) to a specific graph.
    pub fn digest(&self) -> [u8; 32] {
        let mut bytes = Vec::with_capacity(44 + self.entries.len() * 8);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(self.k as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.n as u32).to_le_bytes());
        bytes.extend_from_slice(&self.store_digest);
        for &(id, sim) in &self.entries {
            bytes.extend_from_slice(&id.to_le_bytes());
            bytes.extend_from_slice(&sim.to_le_bytes());
        }
        io::sha256(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        io::write_u32(&mut w, self.k as u32)?;
        io::write_u32(&mut w, self.n as u32)?;
        w.write_all(&self.store_digest)?;
        for &(id, sim) in &self.entries {
            io::write_u32(&mut w, id)?;
            io::write_f32(&mut w, sim)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load a cached graph, rejecting caches whose digest or `k` do not match
    /// the store and requested neighborhood size.
    pub fn load(path: &Path, store: &EmbeddingStore, k: usize) -> Result<KnnGraph> {
        let g = Self::load_any(path, store)?;
        if g.k != k {
            return Err(GqeError::StaleCache(format!(
                "graph cache was built with k={}, requested k={k}",
                g.k
            )));
        }
        Ok(g)
    }

    /// Load a cached graph with whatever `k` it was built with, still
    /// validating it against the store.
    pub fn load_any(path: &Path, store: &EmbeddingStore) -> Result<KnnGraph> {
        let mut r = BufReader::new(File::open(path)?);
        io::expect_magic(&mut r, MAGIC, "knn graph")?;
        let k = io::read_u32(&mut r)? as usize;
        let n = io::read_u32(&mut r)? as usize;
        let mut store_digest = [0u8; 32];
        r.read_exact(&mut store_digest)?;
        if store_digest != store.digest() {
            return Err(GqeError::StaleCache(
                "graph cache digest does not match the store".into(),
            ));
        }
        if n != store.count() {
            return Err(GqeError::StaleCache(format!(
                "graph cache covers {n} nodes, store has {}",
                store.count()
            )));
        }
        let mut entries = Vec::with_capacity(n * k);
        for _ in 0..n * k {
            let id = io::read_u32(&mut r)?;
            let mut sim_bytes = [0u8; 4];
            r.read_exact(&mut sim_bytes)?;
            entries.push((id, f32::from_le_bytes(sim_bytes)));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(GqeError::Format("knn graph has trailing bytes".into()));
        }
        Ok(KnnGraph { k, n, store_digest, entries })
    }
}

/// Build the exact k-NN graph by brute force. `k` must satisfy `1 <= k < N`.
pub fn build_graph(store: &EmbeddingStore, k: usize) -> Result<KnnGraph> {
    let n = store.count();
    if k == 0 {
        return Err(GqeError::InvalidInput("graph k must be positive".into()));
    }
    if k >= n {
        return Err(GqeError::InvalidInput(format!(
            "graph k={k} must be smaller than the store size {n}"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n as u32).map(|id| store.row_f64(id)).collect();
    let norms: Vec<f64> = rows.iter().map(|r| math::norm(r)).collect();
    if let Some(z) = norms.iter().position(|&x| x < 1e-12) {
        return Err(GqeError::ZeroVector(z));
    }

    let lists: Vec<Vec<(u32, f32)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cands: Vec<(u32, f32)> = Vec::with_capacity(n - 1);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let sim = math::dot(&rows[i], &rows[j]) / (norms[i] * norms[j]);
                cands.push((j as u32, sim as f32));
            }
            // Descending similarity, ascending id on exact ties.
            cands.sort_unstable_by(|a, b| {
                b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0))
            });
            cands.truncate(k);
            cands
        })
        .collect();

    let mut entries = Vec::with_capacity(n * k);
    for list in lists {
        entries.extend(list);
    }
    Ok(KnnGraph { k, n, store_digest: store.digest(), entries })
}

/// Load the cache at `path` if it matches `(store, k)`, otherwise rebuild and
/// overwrite it.
pub fn build_graph_cached(store: &EmbeddingStore, k: usize, path: &Path) -> Result<KnnGraph> {
    if path.exists() {
        match KnnGraph::load(path, store, k) {
            Ok(g) => return Ok(g),
            Err(GqeError::StaleCache(_)) | Err(GqeError::Format(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let g = build_graph(store, k)?;
    g.save(path)?;
    Ok(g)
}

/// Fresh top-k cosine search for an external query vector.
pub fn query_neighbors(store: &EmbeddingStore, k: usize, q: &[f64]) -> Result<QueryNeighbors> {
    if q.len() != store.dim() {
        return Err(GqeError::DimensionMismatch { expected: store.dim(), found: q.len() });
    }
    let n = store.count();
    if k == 0 || k > n {
        return Err(GqeError::InvalidInput(format!(
            "query k={k} must be in 1..={n} for a store of {n} items"
        )));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(GqeError::NonFinite("query vector".into()));
    }
    let nq = math::norm(q);
    if nq < 1e-12 {
        return Err(GqeError::ZeroVector(0));
    }
    let mut cands: Vec<(u32, f64)> = (0..n as u32)
        .map(|id| {
            let row = store.row_f64(id);
            let sim = math::dot(q, &row) / (nq * math::norm(&row));
            (id, sim)
        })
        .collect();
    cands.sort_unstable_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    cands.truncate(k);
    Ok(QueryNeighbors { entries: cands })
}
