//! Image-to-text retrieval with hard positives and hard negatives.
//!
//! Every query image gets three positive sets (its captions, one prompt
//! per label, one prompt naming all labels) and three negative sets
//! (captions of random other images, captions of images sharing a label,
//! and its own captions with one entity swapped for an absent label).
//! Negatives are drawn once per query and shared by all positive kinds.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hierarchy::LabelId;
use crate::lexicon::{Lexicon, Matcher};
use crate::metrics::{average_precision, histogram, mean, median};
use crate::rng;
use crate::scoring::{cosine, PromptTemplateSet};
use crate::tensor_store::{EmbeddingMatrix, ImageRecord, ScoreMatrix};

pub const DEFAULT_K: usize = 100;
pub const DEFAULT_SEED: u64 = 42;
pub const HISTOGRAM_BINS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    CapPos,
    PromptSingle,
    PromptMulti,
    CapRandom,
    CapRelevant,
    CapError,
}

impl TextKind {
    pub const ALL: [TextKind; 6] = [
        TextKind::CapPos,
        TextKind::PromptMulti,
        TextKind::PromptSingle,
        TextKind::CapRandom,
        TextKind::CapRelevant,
        TextKind::CapError,
    ];

    pub fn short(self) -> &'static str {
        match self {
            TextKind::CapPos => "Cap+",
            TextKind::PromptSingle => "Prompt+s",
            TextKind::PromptMulti => "Prompt+m",
            TextKind::CapRandom => "Cap-rd",
            TextKind::CapRelevant => "Cap-rl",
            TextKind::CapError => "Cap-er",
        }
    }
}

impl fmt::Display for TextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveMode {
    Captions,
    PromptMulti,
    PromptSingle,
}

impl PositiveMode {
    /// Table order: captions, multi-label prompts, single-label prompts.
    pub const ALL: [PositiveMode; 3] = [PositiveMode::Captions, PositiveMode::PromptMulti, PositiveMode::PromptSingle];

    pub fn kind(self) -> TextKind {
        match self {
            PositiveMode::Captions => TextKind::CapPos,
            PositiveMode::PromptSingle => TextKind::PromptSingle,
            PositiveMode::PromptMulti => TextKind::PromptMulti,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    Random,
    Relevant,
    Error,
}

impl NegativeMode {
    pub const ALL: [NegativeMode; 3] = [NegativeMode::Random, NegativeMode::Relevant, NegativeMode::Error];

    pub fn kind(self) -> TextKind {
        match self {
            NegativeMode::Random => TextKind::CapRandom,
            NegativeMode::Relevant => TextKind::CapRelevant,
            NegativeMode::Error => TextKind::CapError,
        }
    }

    fn tag(self) -> u64 {
        match self {
            NegativeMode::Random => 1,
            NegativeMode::Relevant => 2,
            NegativeMode::Error => 3,
        }
    }
}

/// Where a poisoned caption came from: the byte span `[start, end)` of the
/// original caption held `original` and now holds `replacement`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub start: usize,
    pub end: usize,
    pub original: String,
    pub replacement_label: LabelId,
    pub replacement: String,
}

impl Perturbation {
    /// Restores the original caption from the perturbed one.
    pub fn revert(&self, perturbed: &str) -> String {
        let end = self.start + self.replacement.len();
        format!("{}{}{}", &perturbed[..self.start], self.original, &perturbed[end..])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextItem {
    pub id: String,
    pub text: String,
    pub kind: TextKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_image: Option<String>,
    /// Labels named by a prompt, or the labels of the source image for
    /// captions.
    pub labels: Vec<LabelId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Perturbation>,
}

/// Content-derived text id: `t` + first 16 hex digits of SHA-256.
pub fn text_id(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(17);
    out.push('t');
    for b in &digest[..8] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl TextItem {
    fn new(text: String, kind: TextKind, source_image: Option<&str>, labels: Vec<LabelId>) -> Self {
        TextItem {
            id: text_id(&text),
            text,
            kind,
            source_image: source_image.map(str::to_string),
            labels,
            provenance: None,
        }
    }
}

/// Display names for labels; unknown labels fall back to their id.
#[derive(Clone, Debug, Default)]
pub struct LabelNames(HashMap<LabelId, String>);

impl LabelNames {
    pub fn from_lexicon(lexicon: &Lexicon) -> Self {
        LabelNames(
            lexicon
                .labels()
                .iter()
                .enumerate()
                .map(|(i, l)| (l.clone(), lexicon.name(i).to_string()))
                .collect(),
        )
    }

    pub fn insert(&mut self, label: LabelId, name: String) {
        self.0.insert(label, name);
    }

    pub fn get<'a>(&'a self, label: &'a LabelId) -> &'a str {
        self.0.get(label).map_or(label.as_str(), String::as_str)
    }
}

pub fn build_positives(
    rec: &ImageRecord,
    mode: PositiveMode,
    templates: &PromptTemplateSet,
    names: &LabelNames,
) -> Result<Vec<TextItem>> {
    let src = Some(rec.image_id.as_str());
    match mode {
        PositiveMode::Captions => {
            if rec.captions.is_empty() {
                return Err(Error::NoCaptions(rec.image_id.clone()));
            }
            Ok(rec
                .captions
                .iter()
                .map(|c| TextItem::new(c.clone(), TextKind::CapPos, src, rec.labels.clone()))
                .collect())
        }
        PositiveMode::PromptSingle => {
            if rec.labels.is_empty() {
                return Err(Error::NoLabels(rec.image_id.clone()));
            }
            Ok(rec
                .labels
                .iter()
                .map(|l| TextItem::new(templates.render(0, names.get(l)), TextKind::PromptSingle, src, vec![l.clone()]))
                .collect())
        }
        PositiveMode::PromptMulti => {
            if rec.labels.is_empty() {
                return Err(Error::NoLabels(rec.image_id.clone()));
            }
            let label_names: Vec<&str> = rec.labels.iter().map(|l| names.get(l)).collect();
            Ok(vec![TextItem::new(
                templates.render_multi(&label_names),
                TextKind::PromptMulti,
                src,
                rec.labels.clone(),
            )])
        }
    }
}

/// Lexicon-driven entity replacement.
pub struct Perturber<'a> {
    lexicon: &'a Lexicon,
    matcher: Matcher,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Perturbed {
    pub text: String,
    pub provenance: Perturbation,
}

impl<'a> Perturber<'a> {
    pub fn new(lexicon: &'a Lexicon) -> Self {
        Perturber {
            lexicon,
            matcher: Matcher::new(lexicon),
        }
    }

    pub fn lexicon(&self) -> &Lexicon {
        self.lexicon
    }

    /// Candidate spans with the labels each may be replaced by.
    fn candidates(
        &self,
        caption: &str,
        image_labels: &[LabelId],
        spans: Option<&[[usize; 2]]>,
    ) -> Result<Vec<(usize, usize, Vec<usize>)>> {
        let found: Vec<(usize, usize, Vec<usize>)> = match spans {
            Some(spans) => spans.iter().map(|&[s, e]| (s, e, Vec::new())).collect(),
            None => self.matcher.find(caption).into_iter().map(|m| (m.start, m.end, m.labels)).collect(),
        };
        if found.is_empty() {
            return Err(Error::NoReplaceableSpan(caption.to_string()));
        }
        let excluded: HashSet<&str> = image_labels.iter().map(LabelId::as_str).collect();
        let pool: Vec<usize> = (0..self.lexicon.len())
            .filter(|&l| !excluded.contains(self.lexicon.labels()[l].as_str()))
            .collect();
        if pool.is_empty() {
            return Err(Error::EmptyReplacementPool);
        }
        let with_pool: Vec<(usize, usize, Vec<usize>)> = found
            .into_iter()
            .map(|(s, e, owners)| {
                let span = caption[s..e].to_lowercase();
                let choices = pool
                    .iter()
                    .copied()
                    .filter(|l| !owners.contains(l) && self.lexicon.name(*l).to_lowercase() != span)
                    .collect::<Vec<_>>();
                (s, e, choices)
            })
            .filter(|(_, _, choices)| !choices.is_empty())
            .collect();
        if with_pool.is_empty() {
            return Err(Error::EmptyReplacementPool);
        }
        Ok(with_pool)
    }

    /// Whether `caption` has at least one span that can be replaced.
    pub fn can_perturb(&self, caption: &str, image_labels: &[LabelId], spans: Option<&[[usize; 2]]>) -> bool {
        self.candidates(caption, image_labels, spans).is_ok()
    }

    /// Replaces one uniformly drawn entity span by the name of a uniformly
    /// drawn lexicon label absent from `image_labels`. `spans` overrides
    /// lexicon matching with pre-annotated byte ranges.
    pub fn perturb(
        &self,
        caption: &str,
        image_labels: &[LabelId],
        seed: u64,
        spans: Option<&[[usize; 2]]>,
    ) -> Result<Perturbed> {
        let candidates = self.candidates(caption, image_labels, spans)?;
        let mut rng = rng::seeded(seed);
        let (start, end, choices) = &candidates[rng.random_range(0..candidates.len())];
        let label = choices[rng.random_range(0..choices.len())];
        let replacement = self.lexicon.name(label).to_string();
        let text = format!("{}{}{}", &caption[..*start], replacement, &caption[*end..]);
        Ok(Perturbed {
            text,
            provenance: Perturbation {
                start: *start,
                end: *end,
                original: caption[*start..*end].to_string(),
                replacement_label: self.lexicon.labels()[label].clone(),
                replacement,
            },
        })
    }
}

pub fn perturb_caption(caption: &str, image_labels: &[LabelId], lexicon: &Lexicon, seed: u64) -> Result<TextItem> {
    let p = Perturber::new(lexicon).perturb(caption, image_labels, seed, None)?;
    let mut item = TextItem::new(p.text, TextKind::CapError, None, image_labels.to_vec());
    item.provenance = Some(p.provenance);
    Ok(item)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSample {
    pub items: Vec<TextItem>,
    /// Fewer than `k` negatives were available.
    pub pool_too_small: bool,
}

/// Draws `k` negatives for `rec` (deterministic in `seed`).
///
/// `Random` and `Relevant` sample uniformly without replacement from the
/// captions of other images in `pool` (for `Relevant`, only images sharing a
/// label with `rec`); captions identical to one of `rec`'s own are skipped.
/// `Error` perturbs `rec`'s own captions, cycling through the replaceable
/// ones with a fresh sub-seed per negative.
pub fn sample_negatives(
    rec: &ImageRecord,
    pool: &[ImageRecord],
    mode: NegativeMode,
    k: usize,
    seed: u64,
    perturber: &Perturber<'_>,
) -> Result<NegativeSample> {
    let own: HashSet<&str> = rec.captions.iter().map(String::as_str).collect();
    let seed = rng::derive(seed, &[mode.tag()]);
    match mode {
        NegativeMode::Random | NegativeMode::Relevant => {
            let labels: HashSet<&LabelId> = rec.labels.iter().collect();
            let candidates: Vec<(&ImageRecord, &String)> = pool
                .iter()
                .filter(|other| other.image_id != rec.image_id)
                .filter(|other| mode == NegativeMode::Random || other.labels.iter().any(|l| labels.contains(l)))
                .flat_map(|other| other.captions.iter().map(move |c| (other, c)))
                .filter(|(_, c)| !own.contains(c.as_str()))
                .collect();
            let chosen: Vec<usize> = if candidates.len() <= k {
                (0..candidates.len()).collect()
            } else {
                sample(&mut rng::seeded(seed), candidates.len(), k).into_vec()
            };
            let items = chosen
                .into_iter()
                .map(|i| {
                    let (other, c) = candidates[i];
                    TextItem::new(c.clone(), mode.kind(), Some(&other.image_id), other.labels.clone())
                })
                .collect();
            Ok(NegativeSample {
                items,
                pool_too_small: candidates.len() < k,
            })
        }
        NegativeMode::Error => {
            let spans = |i: usize| rec.entity_spans.as_ref().map(|s| s[i].as_slice());
            let usable: Vec<usize> = (0..rec.captions.len())
                .filter(|&i| perturber.can_perturb(&rec.captions[i], &rec.labels, spans(i)))
                .collect();
            if usable.is_empty() {
                return Err(Error::NoReplaceableSpan(rec.captions.first().cloned().unwrap_or_default()));
            }
            let mut items = Vec::with_capacity(k);
            for j in 0..k {
                let c = usable[j % usable.len()];
                let p = perturber.perturb(&rec.captions[c], &rec.labels, rng::derive(seed, &[j as u64]), spans(c))?;
                if own.contains(p.text.as_str()) {
                    continue;
                }
                let mut item = TextItem::new(p.text, TextKind::CapError, Some(&rec.image_id), rec.labels.clone());
                item.provenance = Some(p.provenance);
                items.push(item);
            }
            let pool_too_small = items.len() < k;
            Ok(NegativeSample { items, pool_too_small })
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridConfig {
    pub k: usize,
    pub seed: u64,
    pub templates: PromptTemplateSet,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            k: DEFAULT_K,
            seed: DEFAULT_SEED,
            templates: PromptTemplateSet::default(),
        }
    }
}

/// All texts built for one query image. Failures are kept as messages so
/// the grid can count dropped queries per cell.
#[derive(Clone, Debug)]
pub struct QueryTask {
    pub image_id: String,
    pub positives: Vec<(PositiveMode, std::result::Result<Vec<TextItem>, String>)>,
    pub negatives: Vec<(NegativeMode, std::result::Result<NegativeSample, String>)>,
}

impl QueryTask {
    pub fn positives(&self, mode: PositiveMode) -> std::result::Result<&[TextItem], &str> {
        let (_, r) = self.positives.iter().find(|(m, _)| *m == mode).expect("all modes built");
        r.as_deref().map_err(String::as_str)
    }

    pub fn negatives(&self, mode: NegativeMode) -> std::result::Result<&NegativeSample, &str> {
        let (_, r) = self.negatives.iter().find(|(m, _)| *m == mode).expect("all modes built");
        r.as_ref().map_err(String::as_str)
    }

    pub fn items(&self) -> impl Iterator<Item = &TextItem> {
        let pos = self.positives.iter().filter_map(|(_, r)| r.as_ref().ok()).flatten();
        let neg = self
            .negatives
            .iter()
            .filter_map(|(_, r)| r.as_ref().ok())
            .flat_map(|s| s.items.iter());
        pos.chain(neg)
    }
}

/// Builds every query's positives and negatives. Query `i` draws from the
/// sub-seed `derive(seed, [i])`, so results do not depend on scheduling.
pub fn build_tasks(
    records: &[ImageRecord],
    config: &GridConfig,
    lexicon: &Lexicon,
    names: &LabelNames,
) -> Vec<QueryTask> {
    let perturber = Perturber::new(lexicon);
    records
        .par_iter()
        .enumerate()
        .map(|(qi, rec)| {
            let seed = rng::derive(config.seed, &[qi as u64]);
            QueryTask {
                image_id: rec.image_id.clone(),
                positives: PositiveMode::ALL
                    .iter()
                    .map(|&m| (m, build_positives(rec, m, &config.templates, names).map_err(|e| e.to_string())))
                    .collect(),
                negatives: NegativeMode::ALL
                    .iter()
                    .map(|&m| {
                        (
                            m,
                            sample_negatives(rec, records, m, config.k, seed, &perturber).map_err(|e| e.to_string()),
                        )
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Unique `(text_id, text)` pairs across tasks, in first-use order.
pub fn texts_to_embed(tasks: &[QueryTask]) -> Vec<(String, String)> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for item in tasks.iter().flat_map(QueryTask::items) {
        if seen.insert(item.id.clone()) {
            out.push((item.id.clone(), item.text.clone()));
        }
    }
    out
}

/// Manifest file contents: `text_id<TAB>text` per line. Tabs and line
/// breaks inside a text are written as spaces.
pub fn manifest_to_string(entries: &[(String, String)]) -> String {
    let mut out = String::new();
    for (id, text) in entries {
        let clean: String = text
            .chars()
            .map(|c| if matches!(c, '\t' | '\n' | '\r') { ' ' } else { c })
            .collect();
        out.push_str(&format!("{id}\t{clean}\n"));
    }
    out
}

/// Score of a text against a query image.
pub trait TextScorer: Sync {
    fn score(&self, image_id: &str, item: &TextItem) -> Result<f64>;
}

/// Cosine of image and text embeddings looked up by key (text id).
pub struct EmbeddingScorer<'a> {
    pub images: &'a EmbeddingMatrix,
    pub texts: &'a EmbeddingMatrix,
}

impl TextScorer for EmbeddingScorer<'_> {
    fn score(&self, image_id: &str, item: &TextItem) -> Result<f64> {
        let img = self
            .images
            .row_by_key(image_id)
            .ok_or_else(|| Error::MissingEmbedding(image_id.to_string()))?;
        let txt = self
            .texts
            .row_by_key(&item.id)
            .ok_or_else(|| Error::MissingEmbedding(item.id.clone()))?;
        if img.len() != txt.len() {
            return Err(Error::DimMismatch {
                left: img.len(),
                right: txt.len(),
            });
        }
        cosine(img, txt).ok_or_else(|| Error::MissingEmbedding(item.id.clone()))
    }
}

/// Lookup into a precomputed image x text score matrix.
pub struct PrecomputedScorer<'a> {
    scores: &'a ScoreMatrix,
    images: HashMap<&'a str, usize>,
    texts: HashMap<&'a str, usize>,
}

impl<'a> PrecomputedScorer<'a> {
    pub fn new(scores: &'a ScoreMatrix) -> Self {
        PrecomputedScorer {
            scores,
            images: scores
                .image_keys()
                .iter()
                .enumerate()
                .map(|(i, k)| (k.as_str(), i))
                .collect(),
            texts: scores.text_index(),
        }
    }
}

impl TextScorer for PrecomputedScorer<'_> {
    fn score(&self, image_id: &str, item: &TextItem) -> Result<f64> {
        let i = self
            .images
            .get(image_id)
            .ok_or_else(|| Error::MissingEmbedding(image_id.to_string()))?;
        let j = self
            .texts
            .get(item.id.as_str())
            .ok_or_else(|| Error::MissingEmbedding(item.id.clone()))?;
        Ok(self.scores.get(*i, *j) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub positive: PositiveMode,
    pub negative: NegativeMode,
    pub map: Option<f64>,
    pub evaluated: usize,
    pub dropped: usize,
    /// Evaluated queries that had fewer than k negatives.
    pub short_pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindHistogram {
    pub kind: TextKind,
    pub count: usize,
    pub median: Option<f64>,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub n_queries: usize,
    pub k: usize,
    pub seed: u64,
    pub cells: Vec<GridCell>,
    pub histograms: Vec<KindHistogram>,
}

impl GridReport {
    pub fn cell(&self, positive: PositiveMode, negative: NegativeMode) -> &GridCell {
        self.cells
            .iter()
            .find(|c| c.positive == positive && c.negative == negative)
            .expect("all cells present")
    }

    pub fn histogram(&self, kind: TextKind) -> &KindHistogram {
        self.histograms.iter().find(|h| h.kind == kind).expect("all kinds present")
    }

    /// `kind,bin_lo,bin_hi,count` rows over [-1, 1].
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("kind,bin_lo,bin_hi,count\n");
        let width = 2.0 / HISTOGRAM_BINS as f64;
        for h in &self.histograms {
            for (b, c) in h.counts.iter().enumerate() {
                let lo = -1.0 + b as f64 * width;
                out.push_str(&format!("{},{:.3},{:.3},{}\n", h.kind.short(), lo, lo + width, c));
            }
        }
        out
    }
}

/// Scores of each text in a task, keyed by text id.
type TaskScores = HashMap<String, f64>;

fn score_task(task: &QueryTask, scorer: &dyn TextScorer) -> Result<TaskScores> {
    task.items()
        .map(|item| Ok((item.id.clone(), scorer.score(&task.image_id, item)?)))
        .collect()
}

/// Grid result plus the per-(image, label) single-prompt scores used by
/// the area correlation.
pub struct GridRun {
    pub report: GridReport,
    pub single_label_scores: HashMap<String, HashMap<LabelId, f64>>,
}

/// Runs the full 3 x 3 grid of positive and negative kinds.
///
/// For each query and cell, AP ranks positives (first) and negatives by
/// score; equal scores keep that order, so a positive tied with a negative
/// ranks above it. Negatives whose text equals a positive's are left out of
/// that cell. Queries whose positives or negatives could not be built, or
/// that end up with no negatives, are counted as dropped for the cell.
pub fn run_grid(tasks: &[QueryTask], scorer: &dyn TextScorer, k: usize, seed: u64) -> Result<GridRun> {
    let scored: Vec<TaskScores> = tasks
        .par_iter()
        .map(|t| score_task(t, scorer))
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::with_capacity(9);
    for &pm in &PositiveMode::ALL {
        for &nm in &NegativeMode::ALL {
            let per_query: Vec<Option<(f64, bool)>> = tasks
                .par_iter()
                .zip(scored.par_iter())
                .map(|(task, scores)| {
                    let (Ok(pos), Ok(neg)) = (task.positives(pm), task.negatives(nm)) else {
                        return None;
                    };
                    let pos_text: HashSet<&str> = pos.iter().map(|p| p.text.as_str()).collect();
                    let negs: Vec<&TextItem> = neg.items.iter().filter(|n| !pos_text.contains(n.text.as_str())).collect();
                    if negs.is_empty() {
                        return None;
                    }
                    let mut s: Vec<f64> = pos.iter().map(|p| scores[&p.id]).collect();
                    s.extend(negs.iter().map(|n| scores[&n.id]));
                    let mut rel = vec![true; pos.len()];
                    rel.resize(s.len(), false);
                    let ap = average_precision(&s, &rel).ok()?;
                    Some((ap, neg.pool_too_small))
                })
                .collect();
            let evaluated: Vec<(f64, bool)> = per_query.iter().flatten().copied().collect();
            cells.push(GridCell {
                positive: pm,
                negative: nm,
                map: mean(evaluated.iter().map(|e| e.0)),
                evaluated: evaluated.len(),
                dropped: tasks.len() - evaluated.len(),
                short_pool: evaluated.iter().filter(|e| e.1).count(),
            });
        }
    }

    let mut by_kind: HashMap<TextKind, Vec<f64>> = HashMap::new();
    for (task, scores) in tasks.iter().zip(&scored) {
        for item in task.items() {
            by_kind.entry(item.kind).or_default().push(scores[&item.id]);
        }
    }
    let histograms = TextKind::ALL
        .iter()
        .map(|&kind| {
            let values = by_kind.remove(&kind).unwrap_or_default();
            KindHistogram {
                kind,
                count: values.len(),
                median: median(&values),
                counts: histogram(&values, -1.0, 1.0, HISTOGRAM_BINS),
            }
        })
        .collect();

    let mut single_label_scores: HashMap<String, HashMap<LabelId, f64>> = HashMap::new();
    for (task, scores) in tasks.iter().zip(&scored) {
        if let Ok(pos) = task.positives(PositiveMode::PromptSingle) {
            let entry = single_label_scores.entry(task.image_id.clone()).or_default();
            for p in pos {
                entry.insert(p.labels[0].clone(), scores[&p.id]);
            }
        }
    }

    Ok(GridRun {
        report: GridReport {
            n_queries: tasks.len(),
            k,
            seed,
            cells,
            histograms,
        },
        single_label_scores,
    })
}
