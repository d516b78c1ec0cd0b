//! Cross-modality scores, class prompt embeddings, and hierarchy
//! propagation of scores and labels.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{read_text, Hierarchy, LabelId, TwoLevelMap};
use crate::tensor_store::{EmbeddingMatrix, ScoreMatrix};

pub const DEFAULT_TEMPLATE: &str = "a photo of a {}";

/// Separator between class id and template index in per-template text keys
/// (`n02128385#3`).
pub const TEMPLATE_KEY_SEP: char = '#';

const UNIT_NORM_TOL: f64 = 1e-5;

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity of two vectors; `None` if either has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn row_norms(m: &EmbeddingMatrix, side: &'static str) -> Result<Vec<f64>> {
    (0..m.rows())
        .map(|i| match norm(m.row(i)) {
            n if n > 0.0 && n.is_finite() => Ok(n),
            _ => Err(Error::ZeroNormRow { side, row: i }),
        })
        .collect()
}

/// Cosine score of every image row against every text row.
pub fn cosine_scores(img: &EmbeddingMatrix, txt: &EmbeddingMatrix) -> Result<ScoreMatrix> {
    if img.dim() != txt.dim() {
        return Err(Error::DimMismatch {
            left: img.dim(),
            right: txt.dim(),
        });
    }
    let img_norms = row_norms(img, "image")?;
    let txt_norms = row_norms(txt, "text")?;
    let n_txt = txt.rows();
    let mut data = vec![0f32; img.rows() * n_txt];
    if n_txt > 0 {
        data.par_chunks_mut(n_txt).enumerate().for_each(|(i, out)| {
            let a = img.row(i);
            for (j, o) in out.iter_mut().enumerate() {
                let s = dot(a, txt.row(j)) / (img_norms[i] * txt_norms[j]);
                *o = s.clamp(-1.0, 1.0) as f32;
            }
        });
    }
    ScoreMatrix::new(img.keys().to_vec(), txt.keys().to_vec(), data)
}

/// Ordered prompt templates, each with exactly one `{}` placeholder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        PromptTemplateSet {
            templates: vec![DEFAULT_TEMPLATE.to_string()],
        }
    }
}

impl PromptTemplateSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::BadTemplate(String::new()));
        }
        if let Some(bad) = templates.iter().find(|t| t.matches("{}").count() != 1) {
            return Err(Error::BadTemplate(bad.clone()));
        }
        Ok(PromptTemplateSet { templates })
    }

    /// One template per non-blank line.
    pub fn parse(text: &str) -> Result<Self> {
        PromptTemplateSet::new(
            text.lines()
                .map(|l| l.trim_end_matches('\r'))
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        PromptTemplateSet::parse(&read_text(path)?)
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn render(&self, template: usize, name: &str) -> String {
        self.templates[template].replacen("{}", name, 1)
    }

    pub fn render_all(&self, name: &str) -> Vec<String> {
        (0..self.templates.len()).map(|t| self.render(t, name)).collect()
    }

    /// Prompt naming several labels at once: the first template with an
    /// indefinite article directly before the placeholder dropped, so
    /// `a photo of a {}` yields `a photo of dog, person, ball`.
    pub fn render_multi(&self, names: &[&str]) -> String {
        let t = &self.templates[0];
        let at = t.find("{}").expect("validated template");
        let head = &t[..at];
        let stripped = ["a ", "an ", "A ", "An "]
            .iter()
            .find_map(|art| {
                head.strip_suffix(art).filter(|rest| {
                    rest.is_empty() || rest.ends_with(|c: char| !c.is_alphanumeric())
                })
            })
            .unwrap_or(head);
        format!("{stripped}{}{}", names.join(", "), &t[at + 2..])
    }
}

/// Arithmetic mean of `rows`, renormalized to unit length when `renorm`.
pub fn class_embedding(rows: &[&[f32]], renorm: bool, label: &str) -> Result<Vec<f32>> {
    let first = rows.first().ok_or_else(|| Error::MissingEmbedding(label.to_string()))?;
    let dim = first.len();
    let mut mean = vec![0f64; dim];
    for r in rows {
        if r.len() != dim {
            return Err(Error::DimMismatch {
                left: dim,
                right: r.len(),
            });
        }
        for (m, &x) in mean.iter_mut().zip(r.iter()) {
            *m += x as f64;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let len = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = rows.iter().map(|r| norm(r)).fold(0.0, f64::max);
    if !(len > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::ZeroNormMean(label.to_string()));
    }
    let div = if renorm { len } else { 1.0 };
    Ok(mean.iter().map(|&m| (m / div) as f32).collect())
}

/// One embedding row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingTable {
    class_ids: Vec<LabelId>,
    matrix: EmbeddingMatrix,
}

impl ClassEmbeddingTable {
    /// Wraps a matrix whose keys are class ids; rows must be unit-norm.
    pub fn new(matrix: EmbeddingMatrix) -> Result<Self> {
        for i in 0..matrix.rows() {
            let n = norm(matrix.row(i));
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidMatrix(format!(
                    "class row `{}` has norm {n}, expected 1",
                    matrix.keys()[i]
                )));
            }
        }
        Ok(ClassEmbeddingTable::unchecked(matrix))
    }

    /// Accepts rows of any nonzero norm (the `--no-renorm` path).
    pub fn unchecked(matrix: EmbeddingMatrix) -> Self {
        ClassEmbeddingTable {
            class_ids: matrix.keys().iter().map(|k| LabelId::new(k.as_str())).collect(),
            matrix,
        }
    }

    /// Builds class rows from per-template text embeddings. Keys of the form
    /// `class#t` are grouped by class (first-appearance order) and averaged;
    /// any other key is its own class. Rows are renormalized when `renorm`.
    pub fn ensemble(per_template: &EmbeddingMatrix, renorm: bool) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, key) in per_template.keys().iter().enumerate() {
            let class = key
                .rsplit_once(TEMPLATE_KEY_SEP)
                .map_or(key.as_str(), |(c, _)| c)
                .to_string();
            groups
                .entry(class.clone())
                .or_insert_with(|| {
                    order.push(class);
                    Vec::new()
                })
                .push(i);
        }
        let mut rows = Vec::with_capacity(order.len());
        for class in &order {
            let members: Vec<&[f32]> = groups[class].iter().map(|&i| per_template.row(i)).collect();
            rows.push(class_embedding(&members, renorm, class)?);
        }
        let m = EmbeddingMatrix::from_rows(order, &rows)?;
        Ok(ClassEmbeddingTable::unchecked(m))
    }

    pub fn class_ids(&self) -> &[LabelId] {
        &self.class_ids
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    pub fn row(&self, class: &str) -> Option<&[f32]> {
        self.matrix.row_by_key(class)
    }
}

/// Coarse class rows as the mean of their fine-grained children's rows.
pub fn cg_embedding_from_fg(
    map: &TwoLevelMap,
    fg_table: &ClassEmbeddingTable,
    renorm: bool,
) -> Result<ClassEmbeddingTable> {
    let mut rows = Vec::with_capacity(map.cg_classes().len());
    for (ci, cg) in map.cg_classes().iter().enumerate() {
        let kids = map.fg_children(ci);
        if kids.is_empty() {
            return Err(Error::MissingFgEmbedding(format!("{cg} (no fine-grained children)")));
        }
        let members = kids
            .iter()
            .map(|fg| {
                fg_table
                    .row(fg.as_str())
                    .ok_or_else(|| Error::MissingFgEmbedding(fg.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(class_embedding(&members, renorm, cg.as_str())?);
    }
    let keys = map.cg_classes().iter().map(|c| c.to_string()).collect();
    Ok(ClassEmbeddingTable::unchecked(EmbeddingMatrix::from_rows(keys, &rows)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Raw,
    Child,
    Leaf,
    LeafSelf,
    FgLabel,
    FgEmb,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PropagationResult {
    Scores { strategy: Strategy, scores: ScoreMatrix },
    Labels { strategy: Strategy, labels: Vec<LabelId> },
}

impl PropagationResult {
    pub fn strategy(&self) -> Strategy {
        match self {
            PropagationResult::Scores { strategy, .. } | PropagationResult::Labels { strategy, .. } => *strategy,
        }
    }

    pub fn scores(&self) -> Option<&ScoreMatrix> {
        match self {
            PropagationResult::Scores { scores, .. } => Some(scores),
            PropagationResult::Labels { .. } => None,
        }
    }

    pub fn labels(&self) -> Option<&[LabelId]> {
        match self {
            PropagationResult::Labels { labels, .. } => Some(labels),
            PropagationResult::Scores { .. } => None,
        }
    }
}

/// Column index of every hierarchy node in `s`.
fn node_columns(s: &ScoreMatrix, h: &Hierarchy) -> Result<Vec<usize>> {
    let index = s.text_index();
    h.ids()
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::MissingClassColumn(id.to_string()))
        })
        .collect()
}

/// Replaces each hierarchy column of `s` by its propagated score. Columns
/// not in the hierarchy pass through unchanged.
///
/// * `Child`: max raw score over direct children.
/// * `Leaf`: max propagated score over direct children (= max raw over leaf
///   descendants).
/// * `LeafSelf`: as `Leaf`, with the node's own raw score in the max.
///
/// Leaves keep their raw score under every strategy.
pub fn propagate_scores(s: &ScoreMatrix, h: &Hierarchy, strategy: Strategy) -> Result<ScoreMatrix> {
    let cols = node_columns(s, h)?;
    let bottom_up: Vec<usize> = h.topological_order().iter().rev().copied().collect();
    let n_txt = s.n_texts();
    let mut data = s.data().to_vec();
    if n_txt > 0 {
        data.par_chunks_mut(n_txt).for_each(|row| {
            let raw: Vec<f32> = cols.iter().map(|&c| row[c]).collect();
            let mut agg = raw.clone();
            for &v in &bottom_up {
                let kids = h.children(v);
                if kids.is_empty() {
                    continue;
                }
                agg[v] = match strategy {
                    Strategy::Child => kids.iter().map(|&c| raw[c]).fold(f32::NEG_INFINITY, f32::max),
                    Strategy::Leaf => kids.iter().map(|&c| agg[c]).fold(f32::NEG_INFINITY, f32::max),
                    Strategy::LeafSelf => kids.iter().map(|&c| agg[c]).fold(raw[v], f32::max),
                    _ => raw[v],
                };
            }
            for (v, &c) in cols.iter().enumerate() {
                row[c] = agg[v];
            }
        });
    }
    ScoreMatrix::new(s.image_keys().to_vec(), s.text_keys().to_vec(), data)
}

fn propagate(s: &ScoreMatrix, h: &Hierarchy, strategy: Strategy) -> Result<PropagationResult> {
    Ok(PropagationResult::Scores {
        strategy,
        scores: propagate_scores(s, h, strategy)?,
    })
}

pub fn propagate_child(s: &ScoreMatrix, h: &Hierarchy) -> Result<PropagationResult> {
    propagate(s, h, Strategy::Child)
}

pub fn propagate_leaf(s: &ScoreMatrix, h: &Hierarchy) -> Result<PropagationResult> {
    propagate(s, h, Strategy::Leaf)
}

pub fn propagate_leaf_self(s: &ScoreMatrix, h: &Hierarchy) -> Result<PropagationResult> {
    propagate(s, h, Strategy::LeafSelf)
}

/// Index of the largest value; ties go to the lowest index and NaN never wins.
pub fn argmax(values: impl IntoIterator<Item = f32>) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Top-scoring text key per image, restricted to `candidates` columns
/// (all columns when `None`).
pub fn predict_labels(s: &ScoreMatrix, candidates: Option<&[usize]>) -> Vec<LabelId> {
    let all: Vec<usize>;
    let cols = match candidates {
        Some(c) => c,
        None => {
            all = (0..s.n_texts()).collect();
            &all
        }
    };
    (0..s.n_images())
        .into_par_iter()
        .map(|i| {
            let row = s.row(i);
            let best = argmax(cols.iter().map(|&c| row[c])).map_or("", |k| s.text_keys()[cols[k]].as_str());
            LabelId::new(best)
        })
        .collect()
}

/// Fine-grained argmax per image (ties to the lowest column), mapped to
/// the coarse parent. Returns `(fg predictions, cg predictions)`.
pub fn fg_then_parent(fg_scores: &ScoreMatrix, map: &TwoLevelMap) -> Result<(Vec<LabelId>, Vec<LabelId>)> {
    let index = fg_scores.text_index();
    for fg in map.fg_classes() {
        if !index.contains_key(fg.as_str()) {
            return Err(Error::MissingClassColumn(fg.to_string()));
        }
    }
    let cols: Vec<usize> = (0..fg_scores.n_texts())
        .filter(|&c| map.parent_index(&fg_scores.text_keys()[c]).is_some())
        .collect();
    let fg = predict_labels(fg_scores, Some(&cols));
    let cg = fg
        .iter()
        .map(|f| map.parent_of(f.as_str()).cloned().unwrap_or_else(|| LabelId::new("")))
        .collect();
    Ok((fg, cg))
}

pub fn propagate_labels_two_level(fg_scores: &ScoreMatrix, map: &TwoLevelMap) -> Result<PropagationResult> {
    let (_, labels) = fg_then_parent(fg_scores, map)?;
    Ok(PropagationResult::Labels {
        strategy: Strategy::FgLabel,
        labels,
    })
}
