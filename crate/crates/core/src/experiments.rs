//! End-to-end evaluations: two-level coarse/fine classification and
//! multi-level multi-label propagation.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, LabelId, TwoLevelMap};
use crate::metrics::{fg_to_cg_text_classification, level_stats, multilabel_map, top1_accuracy, Delta, LevelStats, MapReport};
use crate::scoring::{cg_embedding_from_fg, cosine_scores, fg_then_parent, predict_labels, propagate_scores, ClassEmbeddingTable, Strategy};
use crate::tensor_store::{EmbeddingMatrix, ImageRecord, ScoreMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoLevelReport {
    pub n_images: usize,
    pub fg_direct: f64,
    pub cg_direct: f64,
    /// `CG_FG-label` against `CG_direct`.
    pub cg_fg_label: Delta,
    /// `CG_FG-emb` against `CG_direct`.
    pub cg_fg_emb: Delta,
    /// Share of fine-grained prompt rows closest to their own coarse row.
    pub text_fg_to_cg: f64,
}

impl TwoLevelReport {
    pub fn to_table(&self) -> String {
        format!(
            "images        {}\nFG_direct     {:.4}\nCG_direct     {:.4}\nCG_FG-label   {:.4} ({:+.4})\nCG_FG-emb     {:.4} ({:+.4})\ntext FG->CG   {:.4}\n",
            self.n_images,
            self.fg_direct,
            self.cg_direct,
            self.cg_fg_label.propagated,
            self.cg_fg_label.delta,
            self.cg_fg_emb.propagated,
            self.cg_fg_emb.delta,
            self.text_fg_to_cg,
        )
    }
}

/// The fine-grained gold label of each record: its first label that is a
/// fine-grained class of `map`.
pub fn fg_gold(records: &[ImageRecord], map: &TwoLevelMap) -> Result<Vec<LabelId>> {
    records
        .iter()
        .map(|r| {
            r.labels
                .iter()
                .find(|l| map.parent_index(l.as_str()).is_some())
                .cloned()
                .ok_or_else(|| Error::InvalidRecord(format!("image `{}` has no fine-grained label", r.image_id)))
        })
        .collect()
}

fn columns(s: &ScoreMatrix, classes: &[LabelId]) -> Result<Vec<usize>> {
    let index = s.text_index();
    classes
        .iter()
        .map(|c| index.get(c.as_str()).copied().ok_or_else(|| Error::MissingClassColumn(c.to_string())))
        .collect()
}

pub fn evaluate_two_level(
    images: &EmbeddingMatrix,
    fg_table: &ClassEmbeddingTable,
    cg_table: &ClassEmbeddingTable,
    map: &TwoLevelMap,
    gold_fg: &[LabelId],
    renorm: bool,
) -> Result<TwoLevelReport> {
    if gold_fg.len() != images.rows() {
        return Err(Error::LengthMismatch(gold_fg.len(), images.rows()));
    }
    let gold_cg = gold_fg
        .iter()
        .map(|f| map.parent_of(f.as_str()).cloned().ok_or_else(|| Error::UnknownLabel(f.to_string())))
        .collect::<Result<Vec<_>>>()?;

    let fg_scores = cosine_scores(images, fg_table.matrix())?;
    let cg_scores = cosine_scores(images, cg_table.matrix())?;
    let fg_pred = predict_labels(&fg_scores, Some(&columns(&fg_scores, map.fg_classes())?));
    let cg_pred = predict_labels(&cg_scores, Some(&columns(&cg_scores, map.cg_classes())?));
    let (_, cg_via_fg) = fg_then_parent(&fg_scores, map)?;

    let emb_table = cg_embedding_from_fg(map, fg_table, renorm)?;
    let emb_scores = cosine_scores(images, emb_table.matrix())?;
    let emb_pred = predict_labels(&emb_scores, None);

    let cg_direct = top1_accuracy(&cg_pred, &gold_cg)?;
    Ok(TwoLevelReport {
        n_images: images.rows(),
        fg_direct: top1_accuracy(&fg_pred, gold_fg)?,
        cg_direct,
        cg_fg_label: Delta::new(cg_direct, top1_accuracy(&cg_via_fg, &gold_cg)?),
        cg_fg_emb: Delta::new(cg_direct, top1_accuracy(&emb_pred, &gold_cg)?),
        text_fg_to_cg: fg_to_cg_text_classification(fg_table, cg_table, map)?,
    })
}

/// Per-class AP under each strategy; `None` where the class was excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: LabelId,
    pub level: usize,
    pub leaf: bool,
    pub raw: Option<f64>,
    pub child: Option<f64>,
    pub leaf_prop: Option<f64>,
    pub leaf_self: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultilevelReport {
    pub n_images: usize,
    pub leaves: MapReport,
    pub ancestor_raw: MapReport,
    pub ancestor_child: MapReport,
    pub ancestor_leaf: MapReport,
    pub ancestor_leaf_self: MapReport,
    pub delta_child: Option<Delta>,
    pub delta_leaf: Option<Delta>,
    pub delta_leaf_self: Option<Delta>,
    pub classes: Vec<ClassRow>,
    /// Per-level AP distribution with raw scores, over all classes.
    pub levels_raw: Vec<LevelStats>,
    /// Per-level AP distribution after leaf propagation.
    pub levels_leaf: Vec<LevelStats>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

impl MultilevelReport {
    /// `AP_leaf - AP_raw` per ancestor with both defined.
    pub fn ancestor_delta_leaf(&self) -> Vec<(LabelId, f64)> {
        self.classes
            .iter()
            .filter(|c| !c.leaf)
            .filter_map(|c| Some((c.class.clone(), c.leaf_prop? - c.raw?)))
            .collect()
    }

    pub fn to_table(&self) -> String {
        let d = |d: &Option<Delta>| d.map_or_else(|| "-".into(), |d| format!("{:+.4}", d.delta));
        format!(
            "images             {}\nleaves mAP         {}\nAncestor_raw       {}\nAncestor_child     {} ({})\nAncestor_leaf      {} ({})\nAncestor_leaf+self {} ({})\nexcluded classes   {}\n",
            self.n_images,
            fmt_opt(self.leaves.map),
            fmt_opt(self.ancestor_raw.map),
            fmt_opt(self.ancestor_child.map),
            d(&self.delta_child),
            fmt_opt(self.ancestor_leaf.map),
            d(&self.delta_leaf),
            fmt_opt(self.ancestor_leaf_self.map),
            d(&self.delta_leaf_self),
            self.leaves.excluded.len() + self.ancestor_raw.excluded.len(),
        )
    }

    pub fn classes_csv(&self) -> String {
        let mut out = String::from("class,level,leaf,ap_raw,ap_child,ap_leaf,ap_leaf_self\n");
        let f = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for c in &self.classes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.class,
                c.level,
                c.leaf,
                f(c.raw),
                f(c.child),
                f(c.leaf_prop),
                f(c.leaf_self)
            ));
        }
        out
    }
}

pub fn level_stats_csv(stats: &[LevelStats]) -> String {
    let mut out = String::from("level,count,min,q1,median,q3,max\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.level, s.count, s.min, s.q1, s.median, s.q3, s.max
        ));
    }
    out
}

/// Gold label sets aligned with the image rows of `scores`, closed upward
/// under `h`. Labels outside the hierarchy are kept as they are.
pub fn expanded_gold(scores: &ScoreMatrix, records: &[ImageRecord], h: &Hierarchy) -> Result<Vec<HashSet<LabelId>>> {
    let by_id: HashMap<&str, &ImageRecord> = records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    scores
        .image_keys()
        .iter()
        .enumerate()
        .map(|(i, key)| {
            let rec = by_id.get(key.as_str()).ok_or_else(|| Error::KeyMismatch {
                index: i,
                matrix: key.clone(),
                record: String::from("<none>"),
            })?;
            let mut gold = HashSet::new();
            for l in &rec.labels {
                gold.insert(l.clone());
                if let Ok(node) = h.index_of(l.as_str()) {
                    gold.extend(h.ancestors_of(node).into_iter().map(|a| h.id(a).clone()));
                }
            }
            Ok(gold)
        })
        .collect()
}

pub fn evaluate_multilevel(scores: &ScoreMatrix, h: &Hierarchy, records: &[ImageRecord]) -> Result<MultilevelReport> {
    let gold = expanded_gold(scores, records, h)?;
    let leaves: Vec<LabelId> = h.leaves().map(|i| h.id(i).clone()).collect();
    let ancestors: Vec<LabelId> = (0..h.len()).filter(|&i| !h.is_leaf(i)).map(|i| h.id(i).clone()).collect();
    let all: Vec<LabelId> = h.ids().to_vec();

    let child = propagate_scores(scores, h, Strategy::Child)?;
    let leaf = propagate_scores(scores, h, Strategy::Leaf)?;
    let leaf_self = propagate_scores(scores, h, Strategy::LeafSelf)?;

    let all_raw = multilabel_map(scores, &gold, &all)?;
    let all_child = multilabel_map(&child, &gold, &all)?;
    let all_leaf = multilabel_map(&leaf, &gold, &all)?;
    let all_leaf_self = multilabel_map(&leaf_self, &gold, &all)?;

    let classes: Vec<ClassRow> = (0..h.len())
        .map(|i| {
            let id = h.id(i);
            ClassRow {
                class: id.clone(),
                level: h.level(i),
                leaf: h.is_leaf(i),
                raw: all_raw.ap_of(id.as_str()),
                child: all_child.ap_of(id.as_str()),
                leaf_prop: all_leaf.ap_of(id.as_str()),
                leaf_self: all_leaf_self.ap_of(id.as_str()),
            }
        })
        .collect();

    let ancestor_raw = multilabel_map(scores, &gold, &ancestors)?;
    let ancestor_child = multilabel_map(&child, &gold, &ancestors)?;
    let ancestor_leaf = multilabel_map(&leaf, &gold, &ancestors)?;
    let ancestor_leaf_self = multilabel_map(&leaf_self, &gold, &ancestors)?;
    let delta = |r: &MapReport| Some(Delta::new(ancestor_raw.map?, r.map?));

    let raw_values: Vec<(LabelId, f64)> = classes.iter().filter_map(|c| Some((c.class.clone(), c.raw?))).collect();
    let leaf_values: Vec<(LabelId, f64)> = classes
        .iter()
        .filter_map(|c| Some((c.class.clone(), c.leaf_prop?)))
        .collect();

    Ok(MultilevelReport {
        n_images: scores.n_images(),
        leaves: multilabel_map(scores, &gold, &leaves)?,
        delta_child: delta(&ancestor_child),
        delta_leaf: delta(&ancestor_leaf),
        delta_leaf_self: delta(&ancestor_leaf_self),
        ancestor_raw,
        ancestor_child,
        ancestor_leaf,
        ancestor_leaf_self,
        classes,
        levels_raw: level_stats(&raw_values, h)?,
        levels_leaf: level_stats(&leaf_values, h)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, labels: &[&str]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            width: 10,
            height: 10,
            labels: labels.iter().map(|l| LabelId::new(*l)).collect(),
            boxes: vec![],
            captions: vec![],
            entity_spans: None,
        }
    }

    #[test]
    fn multilevel_toy() {
        let (h, _) = Hierarchy::build(&[("cat", "animal"), ("dog", "animal"), ("car", "thing")], &[] as &[(&str, &str)]).unwrap();
        let keys: Vec<String> = ["cat", "dog", "car", "animal", "thing"].iter().map(|s| s.to_string()).collect();
        let scores = ScoreMatrix::new(
            vec!["i0".into(), "i1".into(), "i2".into()],
            keys,
            vec![
                0.9, 0.1, 0.1, 0.1, 0.5, //
                0.1, 0.8, 0.2, 0.2, 0.3, //
                0.1, 0.1, 0.7, 0.6, 0.1,
            ],
        )
        .unwrap();
        let records = [rec("i0", &["cat"]), rec("i1", &["dog"]), rec("i2", &["car"])];
        let r = evaluate_multilevel(&scores, &h, &records).unwrap();
        assert_eq!(r.leaves.map, Some(1.0));
        assert_eq!(r.ancestor_leaf.map, Some(1.0));
        assert!(r.ancestor_raw.map.unwrap() < 1.0);
        assert!(r.delta_leaf.unwrap().delta > 0.0);
        assert_eq!(r.ancestor_delta_leaf().len(), 2);
        assert!(r.classes_csv().starts_with("class,level"));

        let missing = [rec("i0", &["cat"])];
        assert!(matches!(evaluate_multilevel(&scores, &h, &missing), Err(Error::KeyMismatch { .. })));
    }

    #[test]
    fn gold_is_closed_upward() {
        let (h, _) = Hierarchy::build(&[("a", "b"), ("b", "c")], &[] as &[(&str, &str)]).unwrap();
        let s = ScoreMatrix::new(vec!["x".into()], vec!["a".into()], vec![0.0]).unwrap();
        let g = expanded_gold(&s, &[rec("x", &["a", "other"])], &h).unwrap();
        assert_eq!(g[0].len(), 4);
    }
}
