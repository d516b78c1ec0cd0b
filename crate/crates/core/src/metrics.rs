//! Accuracy, average precision, per-level summaries, rank correlation and
//! the derived analyses built on them.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, LabelId, TwoLevelMap};
use crate::scoring::{argmax, cosine, ClassEmbeddingTable};
use crate::tensor_store::{ImageRecord, ScoreMatrix};

pub fn top1_accuracy(pred: &[LabelId], gold: &[LabelId]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() {
        return Err(Error::Empty);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Ranking used by every AP computation: descending score, ties kept in
/// original index order. NaN scores rank last.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let key = |i: usize| if scores[i].is_nan() { f64::NEG_INFINITY } else { scores[i] };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
    order
}

/// Non-interpolated average precision: the mean, over the rank `k` of each
/// positive, of the fraction of positives among the top `k`.
pub fn average_precision(scores: &[f64], relevance: &[bool]) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(Error::LengthMismatch(scores.len(), relevance.len()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if relevance[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoPositives);
    }
    Ok(sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: LabelId,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub class: LabelId,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub per_class: Vec<ClassAp>,
    /// Unweighted mean over `per_class`; `None` when every class was excluded.
    pub map: Option<f64>,
    pub excluded: Vec<Exclusion>,
}

impl MapReport {
    pub fn ap_of(&self, class: &str) -> Option<f64> {
        self.per_class.iter().find(|c| c.class.as_str() == class).map(|c| c.ap)
    }
}

/// Per-class AP over the image axis and their mean. `gold[i]` holds the
/// labels of image row `i`. Classes without positive images are excluded
/// and listed.
pub fn multilabel_map(scores: &ScoreMatrix, gold: &[HashSet<LabelId>], classes: &[LabelId]) -> Result<MapReport> {
    if gold.len() != scores.n_images() {
        return Err(Error::LengthMismatch(gold.len(), scores.n_images()));
    }
    let index = scores.text_index();
    let cols = classes
        .iter()
        .map(|c| {
            index
                .get(c.as_str())
                .copied()
                .ok_or_else(|| Error::MissingClassColumn(c.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let results: Vec<std::result::Result<ClassAp, Exclusion>> = classes
        .par_iter()
        .zip(cols.par_iter())
        .map(|(class, &c)| {
            let col: Vec<f64> = (0..scores.n_images()).map(|i| scores.get(i, c) as f64).collect();
            let rel: Vec<bool> = gold.iter().map(|g| g.contains(class)).collect();
            match average_precision(&col, &rel) {
                Ok(ap) => Ok(ClassAp {
                    class: class.clone(),
                    ap,
                }),
                Err(_) => Err(Exclusion {
                    class: class.clone(),
                    reason: "no positive images".into(),
                }),
            }
        })
        .collect();

    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for r in results {
        match r {
            Ok(c) => per_class.push(c),
            Err(e) => excluded.push(e),
        }
    }
    let map = mean(per_class.iter().map(|c| c.ap));
    Ok(MapReport {
        per_class,
        map,
        excluded,
    })
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// A direct and a propagated value of the same metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub direct: f64,
    pub propagated: f64,
    pub delta: f64,
}

impl Delta {
    pub fn new(direct: f64, propagated: f64) -> Self {
        Delta {
            direct,
            propagated,
            delta: propagated - direct,
        }
    }
}

/// Linear interpolation between closest ranks on sorted data
/// (position `(n - 1) * p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile_sorted(&v, 0.5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary of per-class values, grouped by hierarchy level.
pub fn level_stats(values: &[(LabelId, f64)], h: &Hierarchy) -> Result<Vec<LevelStats>> {
    let mut by_level: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for (class, v) in values {
        by_level.entry(h.level_of(class.as_str())?).or_default().push(*v);
    }
    Ok(by_level
        .into_iter()
        .map(|(level, mut v)| {
            v.sort_by(f64::total_cmp);
            LevelStats {
                level,
                count: v.len(),
                min: v[0],
                q1: quantile_sorted(&v, 0.25),
                median: quantile_sorted(&v, 0.5),
                q3: quantile_sorted(&v, 0.75),
                max: v[v.len() - 1],
            }
        })
        .collect())
}

/// Largest sample size for which Spearman p-values are computed by exact
/// enumeration of all permutations; above it the t approximation is used.
pub const EXACT_PERMUTATION_MAX_N: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

/// 1-based ranks, tied values sharing their average rank.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Ranks centered and doubled, so every entry is an exact integer in f64.
fn centered_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    fractional_ranks(x).iter().map(|r| 2.0 * r - (n + 1.0)).collect()
}

/// Spearman's rank correlation with a two-sided p-value.
///
/// `rho` is the Pearson correlation of fractional ranks. For
/// `n <= EXACT_PERMUTATION_MAX_N` the p-value is the exact permutation
/// probability `P(|rho_perm| >= |rho|)`; for larger `n` it comes from
/// `t = rho * sqrt((n - 2) / (1 - rho^2))` against Student's t with `n - 2`
/// degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::TooFewValues { needed: 3, got: n });
    }
    let cx = centered_ranks(x);
    let cy = centered_ranks(y);
    let sxx: f64 = cx.iter().map(|v| v * v).sum();
    let syy: f64 = cy.iter().map(|v| v * v).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateConstantInput);
    }
    let sxy: f64 = cx.iter().zip(&cy).map(|(a, b)| a * b).sum();
    let denom = (sxx * syy).sqrt();
    let rho = (sxy / denom).clamp(-1.0, 1.0);

    let p_value = if n <= EXACT_PERMUTATION_MAX_N {
        exact_permutation_p(&cx, &cy, sxy.abs())
    } else if rho.abs() == 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Spearman { rho, p_value, n })
}

/// Share of permutations of `cy` whose |sum cx*cy| reaches `observed`
/// (Heap's algorithm; sums of integers, so the comparison is exact).
fn exact_permutation_p(cx: &[f64], cy: &[f64], observed: f64) -> f64 {
    let n = cy.len();
    let mut perm = cy.to_vec();
    let mut c = vec![0usize; n];
    let stat = |p: &[f64]| cx.iter().zip(p).map(|(a, b)| a * b).sum::<f64>().abs();
    let mut total = 1u64;
    let mut extreme = u64::from(stat(&perm) >= observed);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            total += 1;
            extreme += u64::from(stat(&perm) >= observed);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    extreme as f64 / total as f64
}

/// Classifies every fine-grained class row to its most similar coarse
/// class row and scores the result against the map's parenthood.
pub fn fg_to_cg_text_classification(
    fg_table: &ClassEmbeddingTable,
    cg_table: &ClassEmbeddingTable,
    map: &TwoLevelMap,
) -> Result<f64> {
    let cg_rows = map
        .cg_classes()
        .iter()
        .map(|c| cg_table.row(c.as_str()).ok_or_else(|| Error::MissingEmbedding(c.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for fg in map.fg_classes() {
        let row = fg_table
            .row(fg.as_str())
            .ok_or_else(|| Error::MissingEmbedding(fg.to_string()))?;
        let best = argmax(cg_rows.iter().map(|c| cosine(row, c).unwrap_or(f64::NAN) as f32))
            .ok_or_else(|| Error::MissingEmbedding(fg.to_string()))?;
        pred.push(map.cg_classes()[best].clone());
        gold.push(map.parent_of(fg.as_str()).unwrap().clone());
    }
    top1_accuracy(&pred, &gold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCorrelation {
    pub class: LabelId,
    pub n: usize,
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaCorrelation {
    pub per_class: Vec<ClassCorrelation>,
    /// Mean of the defined per-class coefficients.
    pub mean_rho: Option<f64>,
    /// Spearman over all (image, label) pairs pooled.
    pub pooled: Option<Spearman>,
    /// Classes with rho > 0.5 and p < 0.05.
    pub strong_classes: usize,
}

/// Rank correlation between single-label prompt scores and the image area
/// fraction of that label, per class. `scores[image_id][label]`.
pub fn area_score_correlation(
    records: &[ImageRecord],
    scores: &HashMap<String, HashMap<LabelId, f64>>,
) -> Result<AreaCorrelation> {
    let mut classes: Vec<LabelId> = Vec::new();
    let mut pairs: HashMap<LabelId, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for rec in records {
        let Some(per_label) = scores.get(&rec.image_id) else { continue };
        for label in &rec.labels {
            let Some(&score) = per_label.get(label) else { continue };
            let area = rec.area_fraction(label.as_str()).ok_or_else(|| Error::MissingBoxes {
                image: rec.image_id.clone(),
                label: label.to_string(),
            })?;
            let entry = pairs.entry(label.clone()).or_insert_with(|| {
                classes.push(label.clone());
                Default::default()
            });
            entry.0.push(area);
            entry.1.push(score);
        }
    }

    let mut per_class = Vec::with_capacity(classes.len());
    let (mut all_area, mut all_score) = (Vec::new(), Vec::new());
    for class in classes {
        let (area, score) = &pairs[&class];
        all_area.extend_from_slice(area);
        all_score.extend_from_slice(score);
        let (rho, p_value, error) = match spearman(area, score) {
            Ok(s) => (Some(s.rho), Some(s.p_value), None),
            Err(e) => (None, None, Some(e.to_string())),
        };
        per_class.push(ClassCorrelation {
            class,
            n: area.len(),
            rho,
            p_value,
            error,
        });
    }
    let mean_rho = mean(per_class.iter().filter_map(|c| c.rho));
    let strong_classes = per_class
        .iter()
        .filter(|c| c.rho.is_some_and(|r| r > 0.5) && c.p_value.is_some_and(|p| p < 0.05))
        .count();
    Ok(AreaCorrelation {
        per_class,
        mean_rho,
        pooled: spearman(&all_area, &all_score).ok(),
        strong_classes,
    })
}

/// Fixed-width histogram over `[lo, hi]`; values outside are clamped into
/// the edge bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if v.is_nan() {
            continue;
        }
        let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}
