//! Exhaustive cosine nearest-neighbour search and Recall@K.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{CgdError, Result};
use crate::tensor::{read_u32, Tensor};

const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Row-major `count x dim` float32 embeddings with labels and stable ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub data: Vec<f32>,
    pub labels: Vec<u32>,
    pub ids: Vec<u64>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, data: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        if dim == 0 || data.len() != dim * labels.len() {
            return Err(CgdError::Shape(format!(
                "embedding set: {} values for {} rows of dim {dim}",
                data.len(),
                labels.len()
            )));
        }
        let ids = (0..labels.len() as u64).collect();
        Ok(Self {
            dim,
            data,
            labels,
            ids,
        })
    }

    pub fn from_tensor(t: &Tensor, labels: &[usize]) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(CgdError::Shape(format!(
                "embedding tensor {s:?} does not match {} labels",
                labels.len()
            )));
        }
        Self::new(
            s[1],
            t.data().iter().map(|&x| x as f32).collect(),
            labels.iter().map(|&l| l as u32).collect(),
        )
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Drops row `i`, keeping ids of the rest.
    pub fn without_row(&self, i: usize) -> Self {
        let mut out = self.clone();
        out.data.drain(i * self.dim..(i + 1) * self.dim);
        out.labels.remove(i);
        out.ids.remove(i);
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(EMB_MAGIC)?;
        w.write_all(&(self.count() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        for l in &self.labels {
            w.write_all(&l.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != EMB_MAGIC {
            return Err(CgdError::Format("not an EMB1 embedding file".into()));
        }
        let count = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let mut buf = vec![0u8; count * dim * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            labels.push(read_u32(r)?);
        }
        Self::new(dim, data, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)
            .map_err(|e| CgdError::Data(format!("cannot open embeddings {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Ranked gallery indices for one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryRanking {
    pub order: Vec<usize>,
    /// Gallery index removed because it shares the query's id.
    pub excluded: Option<usize>,
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Top-`k` gallery items per query by descending cosine similarity, ties by
/// ascending gallery id. `k` is clamped to the effective gallery size.
pub fn knn_search(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    k: usize,
    exclude_self: bool,
) -> Result<Vec<QueryRanking>> {
    rank_gallery(queries, gallery, Some(k), exclude_self)
}

fn rank_gallery(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    k: Option<usize>,
    exclude_self: bool,
) -> Result<Vec<QueryRanking>> {
    if queries.dim != gallery.dim {
        return Err(CgdError::Shape(format!(
            "query dim {} differs from gallery dim {}",
            queries.dim, gallery.dim
        )));
    }
    let mut warned = false;
    let mut out = Vec::with_capacity(queries.count());
    for q in 0..queries.count() {
        let excluded = if exclude_self {
            gallery.ids.iter().position(|&id| id == queries.ids[q])
        } else {
            None
        };
        let mut scored: Vec<(f64, u64, usize)> = (0..gallery.count())
            .filter(|&j| Some(j) != excluded)
            .map(|j| (cosine(queries.row(q), gallery.row(j)), gallery.ids[j], j))
            .collect();
        let kk = k.unwrap_or(usize::MAX).min(scored.len());
        if let Some(k) = k.filter(|&k| k > kk && !warned) {
            log::warn!("K={k} exceeds effective gallery size {}; clamped", scored.len());
            warned = true;
        }
        let cmp = |a: &(f64, u64, usize), b: &(f64, u64, usize)| {
            b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
        };
        if kk > 0 && kk < scored.len() {
            scored.select_nth_unstable_by(kk - 1, cmp);
            scored.truncate(kk);
        }
        scored.sort_by(cmp);
        scored.truncate(kk);
        out.push(QueryRanking {
            order: scored.into_iter().map(|s| s.2).collect(),
            excluded,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallReport {
    pub k_list: Vec<usize>,
    pub recall_at_k: BTreeMap<usize, f64>,
    /// 1-based rank of the first same-class item, if it appears in the ranking.
    pub per_query_first_relevant_rank: Vec<Option<usize>>,
    /// Queries without any same-class gallery item; left out of the averages.
    pub excluded_queries: usize,
}

impl RecallReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at_k.get(&k).copied()
    }
}

/// Fraction of queries whose top-K list holds at least one same-class item.
pub fn recall_at_k(
    rankings: &[QueryRanking],
    query_labels: &[u32],
    gallery_labels: &[u32],
    k_list: &[usize],
) -> Result<RecallReport> {
    if rankings.len() != query_labels.len() {
        return Err(CgdError::Shape(format!(
            "{} rankings for {} queries",
            rankings.len(),
            query_labels.len()
        )));
    }
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(CgdError::InvalidArgument(format!("bad K list {k_list:?}")));
    }
    let mut hits = vec![0usize; k_list.len()];
    let mut first_ranks = Vec::with_capacity(rankings.len());
    let mut excluded = 0;
    for (r, &ql) in rankings.iter().zip(query_labels) {
        let has_relevant = gallery_labels
            .iter()
            .enumerate()
            .any(|(j, &gl)| gl == ql && Some(j) != r.excluded);
        let first = r.order.iter().position(|&j| gallery_labels[j] == ql).map(|p| p + 1);
        first_ranks.push(first);
        if !has_relevant {
            excluded += 1;
            continue;
        }
        if let Some(rank) = first {
            for (h, &k) in hits.iter_mut().zip(k_list) {
                if rank <= k {
                    *h += 1;
                }
            }
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} queries have no same-class gallery item and were excluded");
    }
    let evaluated = rankings.len() - excluded;
    let recall_at_k = k_list
        .iter()
        .zip(&hits)
        .map(|(&k, &h)| (k, if evaluated == 0 { 0.0 } else { h as f64 / evaluated as f64 }))
        .collect();
    Ok(RecallReport {
        k_list: k_list.to_vec(),
        recall_at_k,
        per_query_first_relevant_rank: first_ranks,
        excluded_queries: excluded,
    })
}

/// Full ranking of the gallery for every query, then Recall@K.
pub fn evaluate(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    k_list: &[usize],
    exclude_self: bool,
) -> Result<RecallReport> {
    let rankings = rank_gallery(queries, gallery, None, exclude_self)?;
    recall_at_k(&rankings, &queries.labels, &gallery.labels, k_list)
}
