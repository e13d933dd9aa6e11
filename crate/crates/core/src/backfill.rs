//! Backfilling orders, partially backfilled galleries and evaluation along
//! the backfilling trajectory.
//!
//! A [`BackfillPlan`] pairs an ordering of gallery ids with a grid of
//! fractions α. At fraction α the first `⌊α·n⌋` ids of the ordering carry
//! new-model vectors and every other record keeps its transformed old
//! vector. Queries always use new-model features.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{item_losses, predict_log_var, transform, AlignNet, ClassifierHead};
use crate::error::{Error, Result};
use crate::features::{FeatureSet, PairedFeatureSet};
use crate::losses::softmax;
use crate::retrieval::{options_for, rank, summarize_ap, DistanceKind, Metric};

/// How gallery items are ordered for backfilling.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum OrderingPolicy {
    /// Uniform shuffle. `None` takes the seed supplied with the inputs.
    Random(Option<u64>),
    /// Largest predicted σ² first.
    SigmaDesc,
    /// Largest true per-item `L_l2 + L_disc` first. Needs new gallery features.
    CheatLossDesc,
    /// Largest softmax entropy of the head on transformed features first.
    EntropyDesc,
    /// Smallest gap between the two largest class probabilities first.
    MarginConfAsc,
    /// Smallest top class probability first.
    LeastConfAsc,
    /// Whitespace separated gallery ids read from a file.
    File(PathBuf),
}

impl OrderingPolicy {
    /// Name used for report files.
    pub fn slug(&self) -> String {
        self.to_string().replace([':', '/', '\\', '.'], "_")
    }
}

impl fmt::Display for OrderingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderingPolicy::Random(None) => write!(f, "random"),
            OrderingPolicy::Random(Some(s)) => write!(f, "random:{s}"),
            OrderingPolicy::SigmaDesc => write!(f, "sigma_desc"),
            OrderingPolicy::CheatLossDesc => write!(f, "cheat_loss_desc"),
            OrderingPolicy::EntropyDesc => write!(f, "entropy_desc"),
            OrderingPolicy::MarginConfAsc => write!(f, "margin_conf_asc"),
            OrderingPolicy::LeastConfAsc => write!(f, "least_conf_asc"),
            OrderingPolicy::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for OrderingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("policies", format!("unknown ordering policy `{s}`"));
        Ok(match s {
            "random" => OrderingPolicy::Random(None),
            "sigma_desc" => OrderingPolicy::SigmaDesc,
            "cheat_loss_desc" => OrderingPolicy::CheatLossDesc,
            "entropy_desc" => OrderingPolicy::EntropyDesc,
            "margin_conf_asc" => OrderingPolicy::MarginConfAsc,
            "least_conf_asc" => OrderingPolicy::LeastConfAsc,
            _ => {
                if let Some(seed) = s.strip_prefix("random:") {
                    OrderingPolicy::Random(Some(seed.parse().map_err(|_| bad())?))
                } else if let Some(path) = s.strip_prefix("file:") {
                    if path.is_empty() {
                        return Err(bad());
                    }
                    OrderingPolicy::File(PathBuf::from(path))
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

impl Serialize for OrderingPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OrderingPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Everything an ordering policy may look at.
#[derive(Debug, Clone, Copy)]
pub struct OrderingInputs<'a> {
    pub gallery_old: &'a FeatureSet,
    pub net: Option<&'a AlignNet>,
    pub head: Option<&'a ClassifierHead>,
    /// Old and new gallery features, for the cheating policy only.
    pub cheat_pairs: Option<&'a PairedFeatureSet>,
    /// Seed for `random` without an explicit seed.
    pub seed: u64,
    /// Label smoothing used for the cheating policy's per-item loss.
    pub label_smoothing_eps: f64,
}

impl<'a> OrderingInputs<'a> {
    pub fn new(gallery_old: &'a FeatureSet, seed: u64) -> Self {
        Self {
            gallery_old,
            net: None,
            head: None,
            cheat_pairs: None,
            seed,
            label_smoothing_eps: 0.1,
        }
    }
}

fn require<'a, T>(v: Option<&'a T>, policy: &OrderingPolicy, what: &str) -> Result<&'a T> {
    v.ok_or_else(|| Error::invalid(format!("policy `{policy}` needs {what}")))
}

/// Ids ordered by score (descending or ascending); ties by ascending id.
pub fn order_by_score(ids: &[u64], scores: &[f64], descending: bool) -> Result<Vec<u64>> {
    if ids.len() != scores.len() {
        return Err(Error::Dimension {
            expected: ids.len(),
            got: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::invalid(format!("score of id {} is NaN", ids[i])));
    }
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    idx.sort_by(|&a, &b| {
        let by_score = if descending {
            scores[b].total_cmp(&scores[a])
        } else {
            scores[a].total_cmp(&scores[b])
        };
        by_score.then(ids[a].cmp(&ids[b]))
    });
    Ok(idx.into_iter().map(|i| ids[i]).collect())
}

/// Class probabilities of the head on transformed old features, one row per record.
fn head_probs(net: &AlignNet, head: &ClassifierHead, old: &FeatureSet) -> Result<Vec<Vec<f64>>> {
    let h = transform(net, old)?;
    let logits = head.logits(h.to_matrix().view())?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|r| softmax(&r.to_vec()).0)
        .collect())
}

fn top_two(p: &[f64]) -> (f64, f64) {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in p {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    (first, if second.is_finite() { second } else { 0.0 })
}

fn read_ordering_file(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<u64>().map_err(|_| {
                Error::invalid(format!("{}: `{t}` is not a gallery id", path.display()))
            })
        })
        .collect()
}

/// Checks that `order` is a permutation of `ids`.
pub fn check_permutation(order: &[u64], ids: &[u64]) -> Result<()> {
    if order.len() != ids.len() {
        return Err(Error::invalid(format!(
            "ordering has {} ids, gallery has {}",
            order.len(),
            ids.len()
        )));
    }
    let universe: HashSet<u64> = ids.iter().copied().collect();
    let mut seen = HashSet::with_capacity(order.len());
    for &id in order {
        if !universe.contains(&id) {
            return Err(Error::invalid(format!("ordering names unknown id {id}")));
        }
        if !seen.insert(id) {
            return Err(Error::invalid(format!("ordering repeats id {id}")));
        }
    }
    Ok(())
}

/// Backfilling order of the gallery ids under `policy`.
pub fn make_ordering(policy: &OrderingPolicy, inputs: &OrderingInputs<'_>) -> Result<Vec<u64>> {
    let gallery = inputs.gallery_old;
    let ids = gallery.ids();
    let order = match policy {
        OrderingPolicy::Random(seed) => {
            let mut order = ids.to_vec();
            order.sort_unstable();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.unwrap_or(inputs.seed)));
            order
        }
        OrderingPolicy::SigmaDesc => {
            let net = require(inputs.net, policy, "an alignment net")?;
            // exp is monotone, so log σ² orders identically to σ².
            order_by_score(ids, &predict_log_var(net, gallery)?, true)?
        }
        OrderingPolicy::CheatLossDesc => {
            let net = require(inputs.net, policy, "an alignment net")?;
            let head = require(inputs.head, policy, "a classifier head")?;
            let pairs = require(inputs.cheat_pairs, policy, "new gallery features")?;
            pairs.validate()?;
            if pairs.old.ids() != ids {
                return Err(Error::invalid(
                    "cheat pairs are not aligned with the gallery",
                ));
            }
            let losses = item_losses(net, head, pairs, inputs.label_smoothing_eps)?;
            order_by_score(ids, &losses.combined, true)?
        }
        OrderingPolicy::EntropyDesc
        | OrderingPolicy::MarginConfAsc
        | OrderingPolicy::LeastConfAsc => {
            let net = require(inputs.net, policy, "an alignment net")?;
            let head = require(inputs.head, policy, "a classifier head")?;
            let probs = head_probs(net, head, gallery)?;
            let (scores, descending): (Vec<f64>, bool) = match policy {
                OrderingPolicy::EntropyDesc => (
                    probs
                        .iter()
                        .map(|p| {
                            -p.iter()
                                .filter(|&&v| v > 0.0)
                                .map(|&v| v * v.ln())
                                .sum::<f64>()
                        })
                        .collect(),
                    true,
                ),
                OrderingPolicy::MarginConfAsc => (
                    probs
                        .iter()
                        .map(|p| {
                            let (a, b) = top_two(p);
                            a - b
                        })
                        .collect(),
                    false,
                ),
                _ => (probs.iter().map(|p| top_two(p).0).collect(), false),
            };
            order_by_score(ids, &scores, descending)?
        }
        OrderingPolicy::File(path) => read_ordering_file(path)?,
    };
    check_permutation(&order, ids)?;
    Ok(order)
}

/// Evenly spaced grid `i / (points − 1)`, `i = 0..points`.
pub fn uniform_alpha_grid(points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::config(
            "alpha_grid_size",
            "need at least 2 grid points",
        ));
    }
    Ok((0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .collect())
}

/// `⌊α·n⌋`, robust to the binary representation of grid values like 0.29.
pub fn n_alpha(alpha: f64, n: usize) -> usize {
    ((alpha * n as f64 + 1e-9).floor() as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackfillPlan {
    pub ordering: Vec<u64>,
    pub alpha_grid: Vec<f64>,
}

impl BackfillPlan {
    pub fn new(ordering: Vec<u64>, alpha_grid: Vec<f64>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ordering.len());
        if let Some(dup) = ordering.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::invalid(format!("ordering repeats id {dup}")));
        }
        if alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("alpha grid values must lie in [0, 1]"));
        }
        if alpha_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("alpha grid must be strictly increasing"));
        }
        if alpha_grid.first() != Some(&0.0) || alpha_grid.last() != Some(&1.0) {
            return Err(Error::invalid("alpha grid must include 0 and 1"));
        }
        Ok(Self {
            ordering,
            alpha_grid,
        })
    }

    pub fn uniform(ordering: Vec<u64>, points: usize) -> Result<Self> {
        Self::new(ordering, uniform_alpha_grid(points)?)
    }

    pub fn len(&self) -> usize {
        self.ordering.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordering.is_empty()
    }

    /// Ids backfilled at fraction `alpha`.
    pub fn backfilled(&self, alpha: f64) -> &[u64] {
        &self.ordering[..n_alpha(alpha, self.len())]
    }
}

fn check_aligned(transformed_old: &FeatureSet, new: &FeatureSet) -> Result<()> {
    if transformed_old.dim() != new.dim() {
        return Err(Error::Dimension {
            expected: new.dim(),
            got: transformed_old.dim(),
        });
    }
    if transformed_old.ids() != new.ids() || transformed_old.labels() != new.labels() {
        return Err(Error::invalid(
            "transformed old and new gallery are not aligned by id",
        ));
    }
    Ok(())
}

/// Gallery where the first `⌊α·n⌋` ids of the plan carry new vectors.
pub fn partial_gallery(
    plan: &BackfillPlan,
    alpha: f64,
    transformed_old: &FeatureSet,
    new: &FeatureSet,
) -> Result<FeatureSet> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    check_aligned(transformed_old, new)?;
    check_permutation(&plan.ordering, new.ids())?;
    let index: HashMap<u64, usize> = new
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let mut out = transformed_old.clone();
    for id in plan.backfilled(alpha) {
        let i = index[id];
        out.set_row(i, new.row(i));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flips {
    pub positive: usize,
    pub negative: usize,
}

/// Queries that turned correct (positive) or incorrect (negative) relative to the baseline.
pub fn count_flips(baseline_correct: &[bool], current_correct: &[bool]) -> Result<Flips> {
    if baseline_correct.len() != current_correct.len() {
        return Err(Error::Dimension {
            expected: baseline_correct.len(),
            got: current_correct.len(),
        });
    }
    let mut flips = Flips {
        positive: 0,
        negative: 0,
    };
    for (&b, &c) in baseline_correct.iter().zip(current_correct) {
        match (b, c) {
            (false, true) => flips.positive += 1,
            (true, false) => flips.negative += 1,
            _ => {}
        }
    }
    Ok(flips)
}

fn merge_count(v: &mut [usize], buf: &mut Vec<usize>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            buf.push(v[i]);
            i += 1;
        } else {
            inv += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

/// Kendall-Tau between two total orders of the same ids.
pub fn kendall_tau(order_a: &[u64], order_b: &[u64]) -> Result<f64> {
    check_permutation(order_b, order_a)?;
    let n = order_a.len();
    if n < 2 {
        return Err(Error::invalid("Kendall-Tau needs at least two items"));
    }
    let pos_b: HashMap<u64, usize> = order_b.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut seq: Vec<usize> = order_a.iter().map(|id| pos_b[id]).collect();
    let inversions = merge_count(&mut seq, &mut Vec::with_capacity(n));
    let pairs = (n as u64) * (n as u64 - 1) / 2;
    Ok((pairs as i64 - 2 * inversions as i64) as f64 / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupValue {
    pub subgroup: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub metric: Metric,
    pub value: f64,
    /// Flips relative to α = 0 (top-k metrics only).
    pub flips: Option<Flips>,
    /// Metric restricted to each subgroup's queries.
    pub subgroups: Vec<SubgroupValue>,
    /// Majority minus minority subgroup value.
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub backfilled: usize,
    pub metrics: Vec<MetricPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupFraction {
    pub subgroup: u32,
    /// Share of this subgroup's gallery items already backfilled.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionPoint {
    pub alpha: f64,
    pub subgroups: Vec<SubgroupFraction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackfillReport {
    pub alpha_grid: Vec<f64>,
    pub metrics: Vec<Metric>,
    pub points: Vec<CurvePoint>,
    /// Mean of each metric over the α grid.
    pub m_tilde: BTreeMap<Metric, f64>,
    pub num_queries: usize,
    /// Queries without any same-label gallery item (excluded from mAP).
    pub map_skipped: usize,
    /// Majority and minority subgroup tags, by query count.
    pub majority_subgroup: Option<u32>,
    pub minority_subgroup: Option<u32>,
    /// Backfilled share of each gallery subgroup along the grid.
    pub backfilled_fractions: Vec<FractionPoint>,
    /// Rank correlations attached by analyses, keyed by comparison name.
    pub correlations: BTreeMap<String, f64>,
}

impl BackfillReport {
    pub fn value(&self, alpha_index: usize, metric: Metric) -> Option<&MetricPoint> {
        self.points
            .get(alpha_index)?
            .metrics
            .iter()
            .find(|m| m.metric == metric)
    }

    /// Index of the grid point equal to `alpha`, if any.
    pub fn alpha_index(&self, alpha: f64) -> Option<usize> {
        self.alpha_grid
            .iter()
            .position(|&a| (a - alpha).abs() < 1e-12)
    }

    pub fn curve(&self, metric: Metric) -> Vec<f64> {
        self.points
            .iter()
            .filter_map(|p| p.metrics.iter().find(|m| m.metric == metric))
            .map(|m| m.value)
            .collect()
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    summarize_ap(values).value
}

/// Majority and minority subgroup tags by record count; ties go to the lower tag.
fn majority_minority(tags: &[u32]) -> Option<(u32, u32)> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &t in tags {
        *counts.entry(t).or_default() += 1;
    }
    if counts.len() < 2 {
        return None;
    }
    let majority = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))?
        .0;
    let minority = counts
        .iter()
        .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)))?
        .0;
    Some((*majority, *minority))
}

/// Backfilled share of each gallery subgroup at every α of the plan.
pub fn backfilled_fractions(
    plan: &BackfillPlan,
    gallery: &FeatureSet,
) -> Result<Vec<FractionPoint>> {
    let tags = gallery
        .subgroups()
        .ok_or_else(|| Error::invalid("gallery has no subgroup tags"))?;
    check_permutation(&plan.ordering, gallery.ids())?;
    let tag_of: HashMap<u64, u32> = gallery
        .ids()
        .iter()
        .copied()
        .zip(tags.iter().copied())
        .collect();
    let mut totals: BTreeMap<u32, usize> = BTreeMap::new();
    for &t in tags {
        *totals.entry(t).or_default() += 1;
    }
    Ok(plan
        .alpha_grid
        .iter()
        .map(|&alpha| {
            let mut done: BTreeMap<u32, usize> = totals.keys().map(|&t| (t, 0)).collect();
            for id in plan.backfilled(alpha) {
                *done.get_mut(&tag_of[id]).expect("tag counted") += 1;
            }
            FractionPoint {
                alpha,
                subgroups: done
                    .into_iter()
                    .map(|(t, c)| SubgroupFraction {
                        subgroup: t,
                        fraction: c as f64 / totals[&t] as f64,
                    })
                    .collect(),
            }
        })
        .collect())
}

struct PointEval {
    alpha: f64,
    backfilled: usize,
    values: Vec<f64>,
    per_query: Vec<Vec<Option<f64>>>,
    map_skipped: usize,
}

/// Evaluates every metric at every α of the plan. Grid points run in parallel.
pub fn backfill_curve(
    plan: &BackfillPlan,
    transformed_old: &FeatureSet,
    new_gallery: &FeatureSet,
    new_query: &FeatureSet,
    metrics: &[Metric],
    distance: DistanceKind,
) -> Result<BackfillReport> {
    if metrics.is_empty() {
        return Err(Error::invalid("no metrics requested"));
    }
    check_aligned(transformed_old, new_gallery)?;
    check_permutation(&plan.ordering, new_gallery.ids())?;
    let opts = options_for(metrics, distance, new_gallery.len());

    let evals: Vec<PointEval> = plan
        .alpha_grid
        .par_iter()
        .map(|&alpha| {
            let gallery = partial_gallery(plan, alpha, transformed_old, new_gallery)?;
            let result = rank(&gallery, new_query, &opts)?;
            let mut values = Vec::with_capacity(metrics.len());
            let mut per_query = Vec::with_capacity(metrics.len());
            for &m in metrics {
                values.push(m.evaluate(&result)?);
                per_query.push(m.per_query(&result)?);
            }
            let map_skipped = if opts.full_ranking {
                result
                    .queries
                    .iter()
                    .filter(|q| q.relevant_ranks.is_empty())
                    .count()
            } else {
                0
            };
            Ok(PointEval {
                alpha,
                backfilled: n_alpha(alpha, plan.len()),
                values,
                per_query,
                map_skipped,
            })
        })
        .collect::<Result<_>>()?;

    let groups = new_query.subgroups().and_then(majority_minority);
    let query_tags = new_query.subgroups();
    let tag_list: Vec<u32> = query_tags
        .map(|t| {
            t.iter()
                .copied()
                .collect::<std::collections::BTreeSet<u32>>()
                .into_iter()
                .collect()
        })
        .unwrap_or_default();

    let base = &evals[0];
    let mut points = Vec::with_capacity(evals.len());
    for ev in &evals {
        let mut mps = Vec::with_capacity(metrics.len());
        for (mi, &m) in metrics.iter().enumerate() {
            let flips = match m {
                Metric::CmcTop(_) => {
                    let to_bool =
                        |v: &[Option<f64>]| v.iter().map(|x| *x == Some(1.0)).collect::<Vec<_>>();
                    Some(count_flips(
                        &to_bool(&base.per_query[mi]),
                        &to_bool(&ev.per_query[mi]),
                    )?)
                }
                Metric::Map => None,
            };
            let subgroups: Vec<SubgroupValue> = match query_tags {
                Some(tags) => tag_list
                    .iter()
                    .map(|&t| SubgroupValue {
                        subgroup: t,
                        value: mean(
                            ev.per_query[mi]
                                .iter()
                                .zip(tags)
                                .filter(|(_, &qt)| qt == t)
                                .map(|(v, _)| *v),
                        ),
                    })
                    .collect(),
                None => Vec::new(),
            };
            let gap = groups.map(|(maj, min)| {
                let v = |t: u32| {
                    subgroups
                        .iter()
                        .find(|s| s.subgroup == t)
                        .map_or(0.0, |s| s.value)
                };
                v(maj) - v(min)
            });
            mps.push(MetricPoint {
                metric: m,
                value: ev.values[mi],
                flips,
                subgroups,
                gap,
            });
        }
        points.push(CurvePoint {
            alpha: ev.alpha,
            backfilled: ev.backfilled,
            metrics: mps,
        });
    }

    let m_tilde = metrics
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let sum: f64 = evals.iter().map(|e| e.values[mi]).sum();
            (m, sum / evals.len() as f64)
        })
        .collect();

    let backfilled_fractions = if new_gallery.subgroups().is_some() {
        backfilled_fractions(plan, new_gallery)?
    } else {
        Vec::new()
    };

    Ok(BackfillReport {
        alpha_grid: plan.alpha_grid.clone(),
        metrics: metrics.to_vec(),
        points,
        m_tilde,
        num_queries: new_query.len(),
        map_skipped: base.map_skipped,
        majority_subgroup: groups.map(|g| g.0),
        minority_subgroup: groups.map(|g| g.1),
        backfilled_fractions,
        correlations: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub alpha: f64,
    pub subgroups: Vec<SubgroupValue>,
    pub gap: f64,
    pub backfilled: Vec<SubgroupFraction>,
}

/// Per-subgroup metric, majority-minus-minority gap and backfilled shares along the plan.
pub fn subgroup_gap_curve(
    plan: &BackfillPlan,
    transformed_old: &FeatureSet,
    new_gallery: &FeatureSet,
    new_query: &FeatureSet,
    metric: Metric,
    distance: DistanceKind,
) -> Result<Vec<GapPoint>> {
    let tags = new_query
        .subgroups()
        .ok_or_else(|| Error::invalid("query set has no subgroup tags"))?;
    if majority_minority(tags).is_none() {
        return Err(Error::invalid("query set needs at least two subgroups"));
    }
    if new_gallery.subgroups().is_none() {
        return Err(Error::invalid("gallery has no subgroup tags"));
    }
    let report = backfill_curve(
        plan,
        transformed_old,
        new_gallery,
        new_query,
        &[metric],
        distance,
    )?;
    Ok(report
        .points
        .iter()
        .zip(&report.backfilled_fractions)
        .map(|(p, f)| {
            let mp = &p.metrics[0];
            GapPoint {
                alpha: p.alpha,
                subgroups: mp.subgroups.clone(),
                gap: mp.gap.expect("two subgroups present"),
                backfilled: f.subgroups.clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SetRole;
    use proptest::prelude::*;

    fn set(
        dim: usize,
        labels: Vec<u32>,
        subgroups: Option<Vec<u32>>,
        data: Vec<f32>,
    ) -> FeatureSet {
        let ids = (0..labels.len() as u64).map(|i| 100 + i).collect();
        FeatureSet::new(dim, SetRole::Gallery, ids, labels, subgroups, data).unwrap()
    }

    fn pair_sets() -> (FeatureSet, FeatureSet, FeatureSet) {
        // New gallery: clean clusters at 0 and 10. Old: labels scrambled in space.
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let new_g: Vec<f32> = (0..10)
            .map(|i| {
                if i < 5 {
                    i as f32 * 0.1
                } else {
                    10.0 + i as f32 * 0.1
                }
            })
            .collect();
        let old_g: Vec<f32> = (0..10)
            .map(|i| {
                if i % 2 == 0 {
                    0.2 * i as f32 + 0.05
                } else {
                    10.0 + 0.2 * i as f32
                }
            })
            .collect();
        let q = FeatureSet::new(
            1,
            SetRole::Query,
            vec![1, 2, 3, 4],
            vec![0, 0, 1, 1],
            None,
            vec![0.05, 0.15, 10.55, 10.65],
        )
        .unwrap();
        (
            set(1, labels.clone(), None, old_g),
            set(1, labels, None, new_g),
            q,
        )
    }

    #[test]
    fn policy_names_round_trip() {
        for s in [
            "random",
            "random:17",
            "sigma_desc",
            "cheat_loss_desc",
            "entropy_desc",
            "margin_conf_asc",
            "least_conf_asc",
            "file:orders/a.txt",
        ] {
            let p: OrderingPolicy = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(serde_json::from_str::<OrderingPolicy>(&json).unwrap(), p);
        }
        assert!("sigma".parse::<OrderingPolicy>().is_err());
        assert!("random:x".parse::<OrderingPolicy>().is_err());
        assert_eq!(OrderingPolicy::Random(Some(3)).slug(), "random_3");
    }

    #[test]
    fn score_order_breaks_ties_by_id() {
        assert_eq!(
            order_by_score(&[7, 3], &[5.0, 1.0], true).unwrap(),
            vec![7, 3]
        );
        assert_eq!(
            order_by_score(&[9, 2, 5], &[1.0, 1.0, 1.0], true).unwrap(),
            vec![2, 5, 9]
        );
        assert_eq!(
            order_by_score(&[9, 2, 5], &[3.0, 1.0, 2.0], false).unwrap(),
            vec![2, 5, 9]
        );
        assert!(order_by_score(&[1], &[f64::NAN], true).is_err());
    }

    #[test]
    fn uniform_head_gives_id_order_for_entropy() {
        let g = set(2, vec![0, 1, 0], None, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = AlignNet::init(2, 2, &[], &mut rng);
        net.set_params(&vec![0.0; net.param_count()]).unwrap();
        let head = ClassifierHead {
            weights: ndarray::Array2::zeros((2, 2)),
            bias: ndarray::Array1::zeros(2),
        };
        let mut inputs = OrderingInputs::new(&g, 0);
        inputs.net = Some(&net);
        inputs.head = Some(&head);
        for p in [
            OrderingPolicy::EntropyDesc,
            OrderingPolicy::MarginConfAsc,
            OrderingPolicy::LeastConfAsc,
            OrderingPolicy::SigmaDesc,
        ] {
            assert_eq!(make_ordering(&p, &inputs).unwrap(), vec![100, 101, 102]);
        }
    }

    #[test]
    fn missing_inputs_are_named() {
        let g = set(1, vec![0, 1], None, vec![0.0, 1.0]);
        let inputs = OrderingInputs::new(&g, 0);
        for p in [
            OrderingPolicy::SigmaDesc,
            OrderingPolicy::CheatLossDesc,
            OrderingPolicy::EntropyDesc,
        ] {
            let e = make_ordering(&p, &inputs).unwrap_err().to_string();
            assert!(e.contains(&p.to_string()), "{e}");
        }
    }

    #[test]
    fn random_and_file_orderings() {
        let g = set(1, vec![0, 1, 0, 1], None, vec![0.0, 1.0, 2.0, 3.0]);
        let a = make_ordering(&OrderingPolicy::Random(None), &OrderingInputs::new(&g, 5)).unwrap();
        let b = make_ordering(
            &OrderingPolicy::Random(Some(5)),
            &OrderingInputs::new(&g, 9),
        )
        .unwrap();
        assert_eq!(a, b);
        check_permutation(&a, g.ids()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("order.txt");
        std::fs::write(&path, "103 100\n102 101\n").unwrap();
        let o = make_ordering(
            &OrderingPolicy::File(path.clone()),
            &OrderingInputs::new(&g, 0),
        )
        .unwrap();
        assert_eq!(o, vec![103, 100, 102, 101]);
        std::fs::write(&path, "103 100 102").unwrap();
        assert!(make_ordering(
            &OrderingPolicy::File(path.clone()),
            &OrderingInputs::new(&g, 0)
        )
        .is_err());
        std::fs::write(&path, "103 100 102 102").unwrap();
        assert!(make_ordering(&OrderingPolicy::File(path), &OrderingInputs::new(&g, 0)).is_err());
    }

    #[test]
    fn plan_validation() {
        assert!(BackfillPlan::new(vec![1, 2], vec![0.0, 0.5]).is_err());
        assert!(BackfillPlan::new(vec![1, 2], vec![0.0, 0.7, 0.5, 1.0]).is_err());
        assert!(BackfillPlan::new(vec![1, 1], vec![0.0, 1.0]).is_err());
        assert!(BackfillPlan::uniform(vec![1], 1).is_err());
        let p = BackfillPlan::uniform(vec![1, 2], 21).unwrap();
        assert_eq!(p.alpha_grid.len(), 21);
        assert_eq!(p.alpha_grid[5], 0.25);
    }

    #[test]
    fn floor_of_alpha_n() {
        assert_eq!(n_alpha(0.25, 10), 2);
        assert_eq!(n_alpha(0.0, 10), 0);
        assert_eq!(n_alpha(1.0, 10), 10);
        // 0.29 * 100 is 28.999999999999996 in binary.
        assert_eq!(n_alpha(0.29, 100), 29);
        for i in 0..=20 {
            assert_eq!(n_alpha(i as f64 / 20.0, 2000), i * 100);
        }
    }

    #[test]
    fn partial_gallery_endpoints_and_count() {
        let (old, new, _) = pair_sets();
        let plan = BackfillPlan::uniform(vec![109, 100, 108, 101, 107, 102, 106, 103, 105, 104], 5)
            .unwrap();
        assert_eq!(partial_gallery(&plan, 0.0, &old, &new).unwrap(), old);
        assert_eq!(partial_gallery(&plan, 1.0, &old, &new).unwrap(), new);
        let p = partial_gallery(&plan, 0.25, &old, &new).unwrap();
        let changed: Vec<u64> = (0..10)
            .filter(|&i| p.row(i) != old.row(i))
            .map(|i| p.ids()[i])
            .collect();
        assert_eq!(changed, vec![100, 109]);
        assert_eq!(p.labels(), new.labels());
        let shifted = set(1, vec![1; 10], None, vec![0.0; 10]);
        assert!(partial_gallery(&plan, 0.5, &shifted, &new).is_err());
        assert!(partial_gallery(&plan, 1.5, &old, &new).is_err());
    }

    #[test]
    fn flips_hand_cases() {
        let f = count_flips(&[true, false], &[false, true]).unwrap();
        assert_eq!((f.positive, f.negative), (1, 1));
        let f = count_flips(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((f.positive, f.negative), (0, 0));
        assert!(count_flips(&[true], &[]).is_err());
    }

    #[test]
    fn curve_endpoints_and_flip_identity() {
        let (old, new, q) = pair_sets();
        let metrics = [Metric::CmcTop(1), Metric::CmcTop(5), Metric::Map];
        let cross = {
            let opts = options_for(&metrics, DistanceKind::L2, old.len());
            rank(&old, &q, &opts).unwrap()
        };
        let single = {
            let opts = options_for(&metrics, DistanceKind::L2, new.len());
            rank(&new, &q, &opts).unwrap()
        };
        let orders = [
            vec![100, 101, 102, 103, 104, 105, 106, 107, 108, 109],
            vec![109, 108, 107, 106, 105, 104, 103, 102, 101, 100],
        ];
        let mut ends = Vec::new();
        for o in orders {
            let plan = BackfillPlan::uniform(o, 11).unwrap();
            let r = backfill_curve(&plan, &old, &new, &q, &metrics, DistanceKind::L2).unwrap();
            for m in metrics {
                assert_eq!(r.value(0, m).unwrap().value, m.evaluate(&cross).unwrap());
                assert_eq!(r.value(10, m).unwrap().value, m.evaluate(&single).unwrap());
                let mean: f64 = r.curve(m).iter().sum::<f64>() / 11.0;
                assert_eq!(r.m_tilde[&m], mean);
            }
            for (i, p) in r.points.iter().enumerate() {
                let top1 = r.value(i, Metric::CmcTop(1)).unwrap();
                let f = top1.flips.unwrap();
                let lhs = top1.value - r.value(0, Metric::CmcTop(1)).unwrap().value;
                let rhs = (f.positive as f64 - f.negative as f64) / q.len() as f64;
                assert!((lhs - rhs).abs() < 1e-15, "alpha {}", p.alpha);
            }
            ends.push(r.curve(Metric::Map)[10]);
        }
        assert_eq!(ends[0], ends[1]);
    }

    #[test]
    fn identity_case_curve_is_flat() {
        let (_, new, q) = pair_sets();
        let plan = BackfillPlan::uniform(new.ids().to_vec(), 21).unwrap();
        let r = backfill_curve(&plan, &new, &new, &q, &[Metric::Map], DistanceKind::L2).unwrap();
        let c = r.curve(Metric::Map);
        assert!(c.iter().all(|&v| v == c[0]));
        assert_eq!(r.m_tilde[&Metric::Map], c[0]);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<BackfillReport>(&json).unwrap(), r);
    }

    #[test]
    fn subgroup_gap_and_fractions() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        let tags = vec![0, 0, 0, 0, 1, 1];
        let new = set(
            1,
            labels.clone(),
            Some(tags.clone()),
            vec![0.0, 0.1, 5.0, 5.1, 10.0, 10.1],
        );
        // Old: the minority class sits far from its queries.
        let old = set(1, labels, Some(tags), vec![0.0, 0.1, 5.0, 5.1, 2.0, 2.1]);
        let q = FeatureSet::new(
            1,
            SetRole::Query,
            vec![1, 2, 3, 4, 5],
            vec![0, 1, 1, 2, 2],
            Some(vec![0, 0, 0, 1, 1]),
            vec![0.05, 5.05, 5.0, 10.05, 10.0],
        )
        .unwrap();
        let plan =
            BackfillPlan::new(vec![104, 105, 100, 101, 102, 103], vec![0.0, 0.5, 1.0]).unwrap();
        let curve =
            subgroup_gap_curve(&plan, &old, &new, &q, Metric::CmcTop(1), DistanceKind::L2).unwrap();
        assert!(curve[0].gap > 0.0);
        assert_eq!(curve[1].gap, 0.0);
        assert_eq!(curve[1].backfilled[1].fraction, 1.0);
        assert_eq!(curve[1].backfilled[0].fraction, 0.25);
        let untagged = set(1, vec![0, 1], None, vec![0.0, 1.0]);
        let uq = FeatureSet::new(1, SetRole::Query, vec![1], vec![0], None, vec![0.0]).unwrap();
        let p = BackfillPlan::uniform(vec![100, 101], 2).unwrap();
        assert!(subgroup_gap_curve(
            &p,
            &untagged,
            &untagged,
            &uq,
            Metric::CmcTop(1),
            DistanceKind::L2
        )
        .is_err());
        assert!(backfilled_fractions(&p, &untagged).is_err());
    }

    #[test]
    fn kendall_tau_hand_values() {
        assert_eq!(kendall_tau(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1, 2, 3, 4], &[4, 3, 2, 1]).unwrap(), -1.0);
        assert!(kendall_tau(&[1], &[1]).is_err());
        assert!(kendall_tau(&[1, 2], &[1, 3]).is_err());
        assert!(kendall_tau(&[1, 2, 3], &[1, 2]).is_err());
    }

    fn oracle_tau(a: &[u64], b: &[u64]) -> f64 {
        let pos = |o: &[u64], id: u64| o.iter().position(|&x| x == id).unwrap() as i64;
        let n = a.len();
        let (mut c, mut d) = (0i64, 0i64);
        for i in 0..n {
            for j in i + 1..n {
                let sa = pos(a, a[i]) - pos(a, a[j]);
                let sb = pos(b, a[i]) - pos(b, a[j]);
                if sa * sb > 0 {
                    c += 1;
                } else {
                    d += 1;
                }
            }
        }
        (c - d) as f64 / (n * (n - 1) / 2) as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn tau_matches_pair_counting(n in 2usize..50, s1 in any::<u64>(), s2 in any::<u64>()) {
            let mut a: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
            let mut b = a.clone();
            a.shuffle(&mut ChaCha8Rng::seed_from_u64(s1));
            b.shuffle(&mut ChaCha8Rng::seed_from_u64(s2));
            let t = kendall_tau(&a, &b).unwrap();
            prop_assert_eq!(t, oracle_tau(&a, &b));
            let rev: Vec<u64> = b.iter().rev().copied().collect();
            prop_assert_eq!(kendall_tau(&a, &rev).unwrap(), -t);
            prop_assert_eq!(kendall_tau(&b, &a).unwrap(), t);
        }

        #[test]
        fn partial_gallery_backfills_floor(n in 1usize..40, i in 0usize..=20, seed in any::<u64>()) {
            let data: Vec<f32> = (0..n).map(|v| v as f32).collect();
            let old = set(1, vec![0; n], None, data.iter().map(|v| -v - 1.0).collect());
            let new = set(1, vec![0; n], None, data);
            let mut order = old.ids().to_vec();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let plan = BackfillPlan::uniform(order.clone(), 21).unwrap();
            let alpha = plan.alpha_grid[i];
            let p = partial_gallery(&plan, alpha, &old, &new).unwrap();
            let swapped: HashSet<u64> = (0..n).filter(|&r| p.row(r) == new.row(r)).map(|r| p.ids()[r]).collect();
            let expect: HashSet<u64> = order[..(i * n) / 20].iter().copied().collect();
            prop_assert_eq!(swapped, expect);
        }
    }
}
