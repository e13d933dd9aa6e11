//! Exact nearest-neighbor ranking with CMC top-k and mAP.
//!
//! Distances are computed block-wise from precomputed norms
//! (`‖q‖² + ‖g‖² − 2 q·g` for l2), one query block per parallel task.
//! Each pairwise distance is a pure function of the two vectors, so results
//! do not depend on block placement or worker count. Rankings sort by
//! `(distance, gallery index)`.
//!
//! l2 rankings report squared Euclidean distances.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    L2,
    Cosine,
}

/// Queries per parallel task.
const QUERY_BLOCK: usize = 32;
/// Gallery rows per inner tile.
const GALLERY_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankOptions {
    pub distance: DistanceKind,
    /// Skip the gallery record whose id equals the query's id.
    pub exclude_same_id: bool,
    /// Neighbors stored per query.
    pub depth: usize,
    /// Rank the whole gallery and record every same-label position (needed for mAP).
    pub full_ranking: bool,
}

impl RankOptions {
    pub fn new(distance: DistanceKind, depth: usize) -> Self {
        Self {
            distance,
            exclude_same_id: true,
            depth,
            full_ranking: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    /// Gallery indices, nearest first.
    pub neighbors: Vec<u32>,
    pub distances: Vec<f64>,
    /// Zero-based rank of the first same-label gallery item, if any was seen.
    pub first_hit: Option<u32>,
    /// Zero-based ranks of all same-label items (full rankings only).
    pub relevant_ranks: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub depth: usize,
    pub full_ranking: bool,
    pub queries: Vec<QueryRanking>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn widen(set: &FeatureSet) -> Vec<f64> {
    set.data().iter().map(|&v| v as f64).collect()
}

/// Ranks `gallery` for every record of `query`.
pub fn rank(
    gallery: &FeatureSet,
    query: &FeatureSet,
    opts: &RankOptions,
) -> Result<RetrievalResult> {
    if gallery.dim() != query.dim() {
        return Err(Error::Dimension {
            expected: gallery.dim(),
            got: query.dim(),
        });
    }
    if opts.depth == 0 || opts.depth > gallery.len() {
        return Err(Error::invalid(format!(
            "depth {} out of range for a gallery of {}",
            opts.depth,
            gallery.len()
        )));
    }
    let d = gallery.dim();
    let g = widen(gallery);
    let q = widen(query);
    let g_norms: Vec<f64> = g.chunks_exact(d).map(|r| dot(r, r)).collect();
    let q_norms: Vec<f64> = q.chunks_exact(d).map(|r| dot(r, r)).collect();
    if opts.distance == DistanceKind::Cosine {
        if let Some(i) = g_norms.iter().position(|&n| n == 0.0) {
            return Err(Error::invalid(format!(
                "cosine distance on zero gallery vector {i}"
            )));
        }
        if let Some(i) = q_norms.iter().position(|&n| n == 0.0) {
            return Err(Error::invalid(format!(
                "cosine distance on zero query vector {i}"
            )));
        }
    }
    let g_scale: Vec<f64> = g_norms.iter().map(|n| 1.0 / n.sqrt()).collect();
    let id_to_gallery: HashMap<u64, u32> = gallery
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i as u32))
        .collect();
    let n_g = gallery.len();
    let g_labels = gallery.labels();

    let blocks: Vec<Vec<QueryRanking>> = (0..query.len())
        .collect::<Vec<_>>()
        .par_chunks(QUERY_BLOCK)
        .map(|block| {
            let nb = block.len();
            let mut dist = vec![0.0f64; nb * n_g];
            for g0 in (0..n_g).step_by(GALLERY_BLOCK) {
                let g1 = (g0 + GALLERY_BLOCK).min(n_g);
                for (bi, &qi) in block.iter().enumerate() {
                    let qv = &q[qi * d..(qi + 1) * d];
                    let row = &mut dist[bi * n_g..(bi + 1) * n_g];
                    for gi in g0..g1 {
                        let gv = &g[gi * d..(gi + 1) * d];
                        let ip = dot(qv, gv);
                        row[gi] = match opts.distance {
                            DistanceKind::L2 => (q_norms[qi] + g_norms[gi] - 2.0 * ip).max(0.0),
                            DistanceKind::Cosine => 1.0 - ip * g_scale[gi] / q_norms[qi].sqrt(),
                        };
                    }
                }
            }
            block
                .iter()
                .enumerate()
                .map(|(bi, &qi)| {
                    let skip = if opts.exclude_same_id {
                        id_to_gallery.get(&query.ids()[qi]).copied()
                    } else {
                        None
                    };
                    rank_one(
                        &dist[bi * n_g..(bi + 1) * n_g],
                        skip,
                        query.labels()[qi],
                        g_labels,
                        opts,
                    )
                })
                .collect()
        })
        .collect();

    Ok(RetrievalResult {
        depth: opts.depth,
        full_ranking: opts.full_ranking,
        queries: blocks.into_iter().flatten().collect(),
    })
}

fn cmp_pair(a: &(f64, u32), b: &(f64, u32)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn rank_one(
    dist: &[f64],
    skip: Option<u32>,
    label: u32,
    g_labels: &[u32],
    opts: &RankOptions,
) -> QueryRanking {
    let mut cand: Vec<(f64, u32)> = dist
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i as u32) != skip)
        .map(|(i, &d)| (d, i as u32))
        .collect();
    let keep = opts.depth.min(cand.len());
    let mut relevant_ranks = Vec::new();
    let first_hit = if opts.full_ranking {
        cand.sort_unstable_by(cmp_pair);
        for (r, &(_, gi)) in cand.iter().enumerate() {
            if g_labels[gi as usize] == label {
                relevant_ranks.push(r as u32);
            }
        }
        relevant_ranks.first().copied()
    } else {
        if keep < cand.len() {
            cand.select_nth_unstable_by(keep, cmp_pair);
            cand.truncate(keep);
        }
        cand.sort_unstable_by(cmp_pair);
        cand.iter()
            .position(|&(_, gi)| g_labels[gi as usize] == label)
            .map(|p| p as u32)
    };
    cand.truncate(keep);
    QueryRanking {
        neighbors: cand.iter().map(|c| c.1).collect(),
        distances: cand.iter().map(|c| c.0).collect(),
        first_hit,
        relevant_ranks,
    }
}

fn check_k(result: &RetrievalResult, k: usize) -> Result<()> {
    if k == 0 || k > result.depth {
        return Err(Error::invalid(format!(
            "k = {k} outside 1..={} of the ranking",
            result.depth
        )));
    }
    Ok(())
}

/// Per query: does a same-label item appear in the top `k`?
pub fn hits_at(result: &RetrievalResult, k: usize) -> Result<Vec<bool>> {
    check_k(result, k)?;
    Ok(result
        .queries
        .iter()
        .map(|q| q.first_hit.is_some_and(|r| (r as usize) < k))
        .collect())
}

/// Fraction of queries with a same-label item in their top `k`.
pub fn cmc_top_k(result: &RetrievalResult, k: usize) -> Result<f64> {
    let hits = hits_at(result, k)?;
    if hits.is_empty() {
        return Ok(0.0);
    }
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Average precision per query; `None` when the query has no relevant item.
pub fn average_precisions(result: &RetrievalResult) -> Result<Vec<Option<f64>>> {
    if !result.full_ranking {
        return Err(Error::invalid("mAP needs a full-depth ranking"));
    }
    Ok(result
        .queries
        .iter()
        .map(|q| {
            if q.relevant_ranks.is_empty() {
                return None;
            }
            let sum: f64 = q
                .relevant_ranks
                .iter()
                .enumerate()
                .map(|(j, &r)| (j + 1) as f64 / (r + 1) as f64)
                .sum();
            Some(sum / q.relevant_ranks.len() as f64)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub value: f64,
    /// Queries that contributed an AP.
    pub evaluated: usize,
    /// Queries without any relevant gallery item.
    pub skipped: usize,
}

/// Mean of per-query AP over the queries that have at least one relevant item.
pub fn mean_average_precision(result: &RetrievalResult) -> Result<MapSummary> {
    Ok(summarize_ap(average_precisions(result)?.into_iter()))
}

pub(crate) fn summarize_ap(aps: impl Iterator<Item = Option<f64>>) -> MapSummary {
    let (mut sum, mut evaluated, mut skipped) = (0.0, 0, 0);
    for ap in aps {
        match ap {
            Some(v) => {
                sum += v;
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    MapSummary {
        value: if evaluated == 0 {
            0.0
        } else {
            sum / evaluated as f64
        },
        evaluated,
        skipped,
    }
}

/// A retrieval metric by name: `cmc_top<k>` or `map`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    CmcTop(usize),
    Map,
}

impl Metric {
    pub fn needs_full_ranking(self) -> bool {
        self == Metric::Map
    }

    /// Depth the ranking needs to evaluate this metric.
    pub fn depth(self) -> usize {
        match self {
            Metric::CmcTop(k) => k,
            Metric::Map => 1,
        }
    }

    pub fn evaluate(self, result: &RetrievalResult) -> Result<f64> {
        match self {
            Metric::CmcTop(k) => cmc_top_k(result, k),
            Metric::Map => Ok(mean_average_precision(result)?.value),
        }
    }

    /// Per-query score whose mean over queries is the metric (AP is `None`
    /// for queries without relevant items).
    pub fn per_query(self, result: &RetrievalResult) -> Result<Vec<Option<f64>>> {
        match self {
            Metric::CmcTop(k) => Ok(hits_at(result, k)?
                .into_iter()
                .map(|h| Some(if h { 1.0 } else { 0.0 }))
                .collect()),
            Metric::Map => average_precisions(result),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::CmcTop(k) => write!(f, "cmc_top{k}"),
            Metric::Map => write!(f, "map"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "map" {
            return Ok(Metric::Map);
        }
        if let Some(k) = s.strip_prefix("cmc_top") {
            if let Ok(k) = k.parse::<usize>() {
                if k > 0 {
                    return Ok(Metric::CmcTop(k));
                }
            }
        }
        Err(Error::config("metrics", format!("unknown metric `{s}`")))
    }
}

impl Serialize for Metric {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Options that evaluate every metric in `metrics` from one ranking.
pub fn options_for(metrics: &[Metric], distance: DistanceKind, gallery_len: usize) -> RankOptions {
    let depth = metrics
        .iter()
        .map(|m| m.depth())
        .max()
        .unwrap_or(1)
        .min(gallery_len.max(1));
    RankOptions {
        distance,
        exclude_same_id: true,
        depth,
        full_ranking: metrics.iter().any(|m| m.needs_full_ranking()),
    }
}
