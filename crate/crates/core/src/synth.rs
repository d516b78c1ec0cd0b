//! Synthetic worlds with known answers.
//!
//! A two-level world places every fine-grained class at its own orthonormal
//! center. Coarse prompts sit at the renormalized mean of their children's
//! centers, pushed off by `epsilon` times a fixed Gaussian direction per
//! coarse class, so coarse prompts degrade as `epsilon` grows while
//! fine-grained prompts (and thus fine-then-parent predictions) do not.
//!
//! A retrieval world gives every label an orthonormal direction. An image
//! is the normalized sum of its label directions; a text is
//! `w * dir(labels it names) + sqrt(1 - w^2) * u` with `u` a unit vector
//! orthogonal to every label direction and `w` set by the text kind. At
//! zero image noise a text naming the set `T` scores
//! `w * |L & T| / sqrt(|L| |T|)` against an image with labels `L`.
//!
//! Every Gaussian draw is standard normal per coordinate. Coarse prompt
//! noise is used as drawn; image noise is scaled by `1 / sqrt(dim)` so
//! that `sigma` is its expected length. Each purpose has its own derived
//! ChaCha8 stream.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, LabelId, TwoLevelMap};
use crate::lexicon::{Lexicon, Matcher};
use crate::retrieval::{build_tasks, texts_to_embed, GridConfig, LabelNames, QueryTask, TextKind};
use crate::rng::{self, tag, Rng};
use crate::scoring::ClassEmbeddingTable;
use crate::tensor_store::{records_to_string, write_matrix, BoundingBox, EmbeddingMatrix, ImageRecord};

pub const HIERARCHY_FILE: &str = "hierarchy.tsv";
pub const NAMES_FILE: &str = "names.tsv";
pub const MAP_FILE: &str = "map.tsv";
pub const FG_FILE: &str = "fg_prompts.vleb";
pub const CG_FILE: &str = "cg_prompts.vleb";
pub const PROMPTS_FILE: &str = "prompts.vleb";
pub const IMAGES_FILE: &str = "images.vleb";
pub const TEXTS_FILE: &str = "texts.vleb";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const SPEC_FILE: &str = "world.json";
pub const SHARD_MANIFEST_FILE: &str = "shards.tsv";
pub const RETRIEVED_FILE: &str = "retrieved.tsv";

const IMAGE_SIDE: u32 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_cg: usize,
    pub fg_per_cg: usize,
    pub images_per_fg: usize,
    pub dim: usize,
    pub epsilon: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_cg: 4,
            fg_per_cg: 4,
            images_per_fg: 50,
            dim: 64,
            epsilon: 0.0,
            sigma: 0.3,
            seed: 7,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cg == 0 || self.fg_per_cg == 0 || self.images_per_fg == 0 || self.dim == 0 {
            return Err(Error::InvalidSpec("all counts must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite() && self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidSpec("noise levels must be finite and non-negative".into()));
        }
        let needed = self.n_cg * self.fg_per_cg;
        if self.dim < needed {
            return Err(Error::DimTooSmall { dim: self.dim, needed });
        }
        Ok(())
    }
}

fn gaussian(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Subtracts the projection of `v` on each (orthonormal) basis vector,
/// twice for numerical safety.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let p = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
}

/// `count` orthonormal vectors from Gram-Schmidt over Gaussian draws.
fn orthonormal(rng: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        orthogonalize(&mut v, &basis);
        if dot(&v, &v).sqrt() > 1e-6 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// `normalize(center + sigma * noise / sqrt(dim))`.
fn noisy(center: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f32> {
    let scale = sigma / (center.len() as f64).sqrt();
    let mut v: Vec<f64> = gaussian(rng, center.len())
        .into_iter()
        .zip(center)
        .map(|(n, c)| c + scale * n)
        .collect();
    normalize(&mut v);
    to_f32(&v)
}

fn random_box(label: &LabelId, rng: &mut Rng) -> BoundingBox {
    let side = IMAGE_SIDE as f64;
    let w = rng.random_range(5..=IMAGE_SIDE) as f64;
    let h = rng.random_range(5..=IMAGE_SIDE) as f64;
    BoundingBox {
        label: label.clone(),
        x: rng.random_range(0..=(side - w) as u32) as f64,
        y: rng.random_range(0..=(side - h) as u32) as f64,
        w,
        h,
    }
}

pub fn fg_id(c: usize, f: usize) -> String {
    format!("fg_{c}_{f}")
}

pub fn cg_id(c: usize) -> String {
    format!("cg_{c}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    pub spec: WorldSpec,
    pub map: TwoLevelMap,
    pub hierarchy: Hierarchy,
    pub names: Vec<(String, String)>,
    pub fg_table: ClassEmbeddingTable,
    pub cg_table: ClassEmbeddingTable,
    pub images: EmbeddingMatrix,
    pub records: Vec<ImageRecord>,
}

pub fn make_world(spec: &WorldSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let n_fg = spec.n_cg * spec.fg_per_cg;
    let centers = orthonormal(&mut rng::derived(spec.seed, &[tag("centers")]), n_fg, spec.dim);

    let mut assignments = Vec::new();
    let mut names = Vec::new();
    let mut fg_keys = Vec::new();
    let mut cg_keys = Vec::new();
    let mut cg_rows = Vec::new();
    for c in 0..spec.n_cg {
        cg_keys.push(cg_id(c));
        names.push((cg_id(c), format!("coarse{c}")));
        let mut mean = vec![0.0; spec.dim];
        for f in 0..spec.fg_per_cg {
            let id = fg_id(c, f);
            assignments.push((cg_id(c), Some(id.clone())));
            names.push((id.clone(), format!("fine{c}x{f}")));
            fg_keys.push(id);
            mean.iter_mut()
                .zip(&centers[c * spec.fg_per_cg + f])
                .for_each(|(m, x)| *m += x);
        }
        normalize(&mut mean);
        let noise = gaussian(&mut rng::derived(spec.seed, &[tag("cg"), c as u64]), spec.dim);
        let mut row: Vec<f64> = mean.iter().zip(&noise).map(|(m, n)| m + spec.epsilon * n).collect();
        normalize(&mut row);
        cg_rows.push(to_f32(&row));
    }
    let (map, _) = TwoLevelMap::from_assignments(&assignments)?;
    let hierarchy = map.to_hierarchy(&names)?;
    let fg_rows: Vec<Vec<f32>> = centers.iter().map(|c| to_f32(c)).collect();

    let mut image_keys = Vec::new();
    let mut image_rows = Vec::new();
    let mut records = Vec::new();
    for (k, center) in centers.iter().enumerate() {
        let (c, f) = (k / spec.fg_per_cg, k % spec.fg_per_cg);
        let label = LabelId::new(fg_id(c, f));
        for j in 0..spec.images_per_fg {
            let i = k * spec.images_per_fg + j;
            let id = format!("img{i:05}");
            image_rows.push(noisy(center, spec.sigma, &mut rng::derived(spec.seed, &[tag("image"), i as u64])));
            records.push(ImageRecord {
                image_id: id.clone(),
                width: IMAGE_SIDE,
                height: IMAGE_SIDE,
                labels: vec![label.clone()],
                boxes: vec![random_box(&label, &mut rng::derived(spec.seed, &[tag("box"), i as u64]))],
                captions: vec![format!("a photo of a fine{c}x{f}")],
                entity_spans: None,
            });
            image_keys.push(id);
        }
    }

    Ok(SynthWorld {
        spec: spec.clone(),
        map,
        hierarchy,
        names,
        fg_table: ClassEmbeddingTable::new(EmbeddingMatrix::from_rows(fg_keys, &fg_rows)?)?,
        cg_table: ClassEmbeddingTable::new(EmbeddingMatrix::from_rows(cg_keys, &cg_rows)?)?,
        images: EmbeddingMatrix::from_rows(image_keys, &image_rows)?,
        records,
    })
}

fn write(dir: &Path, file: &str, contents: &str) -> Result<()> {
    let path = dir.join(file);
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn names_file(names: &[(String, String)]) -> String {
    names.iter().map(|(id, n)| format!("{id}\t{n}\n")).collect()
}

fn lexicon_of(names: &[(String, String)]) -> Lexicon {
    Lexicon::from_pairs(names)
}

impl SynthWorld {
    pub fn lexicon(&self) -> Lexicon {
        lexicon_of(&self.names)
    }

    /// Fine and coarse prompt rows in one matrix, keyed by class id.
    pub fn all_prompts(&self) -> Result<EmbeddingMatrix> {
        let (fg, cg) = (self.fg_table.matrix(), self.cg_table.matrix());
        let keys = fg.keys().iter().chain(cg.keys()).cloned().collect();
        let data = fg.data().iter().chain(cg.data()).copied().collect();
        EmbeddingMatrix::new(keys, fg.dim(), data)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(dir, HIERARCHY_FILE, &self.hierarchy.to_edge_file())?;
        write(dir, NAMES_FILE, &names_file(&self.names))?;
        write(dir, MAP_FILE, &self.map.to_file())?;
        write(dir, LEXICON_FILE, &self.lexicon().to_file())?;
        write(dir, RECORDS_FILE, &records_to_string(&self.records))?;
        write(dir, SPEC_FILE, &(serde_json::to_string_pretty(&self.spec).expect("spec serializes") + "\n"))?;
        write_matrix(self.fg_table.matrix(), &dir.join(FG_FILE))?;
        write_matrix(self.cg_table.matrix(), &dir.join(CG_FILE))?;
        write_matrix(&self.all_prompts()?, &dir.join(PROMPTS_FILE))?;
        write_matrix(&self.images, &dir.join(IMAGES_FILE))
    }
}

/// Text-to-image alignment per text kind (all in `[0, 1]`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InformativenessWeights {
    pub single: f64,
    pub multi: f64,
    pub caption: f64,
}

impl Default for InformativenessWeights {
    fn default() -> Self {
        InformativenessWeights {
            single: 0.3,
            multi: 0.6,
            caption: 0.9,
        }
    }
}

impl InformativenessWeights {
    fn of(&self, kind: TextKind) -> f64 {
        match kind {
            TextKind::PromptSingle => self.single,
            TextKind::PromptMulti => self.multi,
            _ => self.caption,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSpec {
    pub n_labels: usize,
    pub n_images: usize,
    pub labels_per_image: usize,
    pub captions_per_image: usize,
    pub dim: usize,
    pub weights: InformativenessWeights,
    pub sigma: f64,
    pub seed: u64,
    /// Grid parameters whose texts the world embeds.
    pub k: usize,
    pub grid_seed: u64,
}

impl Default for RetrievalSpec {
    fn default() -> Self {
        RetrievalSpec {
            n_labels: 12,
            n_images: 60,
            labels_per_image: 3,
            captions_per_image: 2,
            dim: 32,
            weights: InformativenessWeights::default(),
            sigma: 0.0,
            seed: 7,
            k: 20,
            grid_seed: 42,
        }
    }
}

impl RetrievalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_labels == 0 || self.n_images == 0 || self.labels_per_image == 0 || self.captions_per_image == 0 {
            return Err(Error::InvalidSpec("all counts must be at least 1".into()));
        }
        if self.labels_per_image > self.n_labels {
            return Err(Error::InvalidSpec("more labels per image than labels".into()));
        }
        let w = self.weights;
        let in_range = [w.single, w.multi, w.caption].iter().all(|x| (0.0..=1.0).contains(x));
        if !in_range || w.single > w.multi || w.multi > w.caption {
            return Err(Error::InvalidSpec("weights must lie in [0, 1] and be non-decreasing".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidSpec("sigma must be finite and non-negative".into()));
        }
        if self.dim <= self.n_labels {
            return Err(Error::DimTooSmall {
                dim: self.dim,
                needed: self.n_labels + 1,
            });
        }
        Ok(())
    }

    pub fn grid_config(&self) -> GridConfig {
        GridConfig {
            k: self.k,
            seed: self.grid_seed,
            ..Default::default()
        }
    }
}

pub struct RetrievalWorld {
    pub spec: RetrievalSpec,
    pub lexicon: Lexicon,
    pub records: Vec<ImageRecord>,
    pub images: EmbeddingMatrix,
    directions: Vec<Vec<f64>>,
}

fn label_name(l: usize) -> String {
    format!("thing{l}")
}

pub fn make_retrieval_world(spec: &RetrievalSpec) -> Result<RetrievalWorld> {
    spec.validate()?;
    let directions = orthonormal(&mut rng::derived(spec.seed, &[tag("labels")]), spec.n_labels, spec.dim);
    let pairs: Vec<(String, String)> = (0..spec.n_labels).map(|l| (format!("l{l}"), label_name(l))).collect();
    let lexicon = Lexicon::from_pairs(&pairs);

    let mut keys = Vec::new();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for i in 0..spec.n_images {
        let mut r = rng::derived(spec.seed, &[tag("image"), i as u64]);
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut r, spec.n_labels, spec.labels_per_image).into_vec();
        chosen.sort_unstable();
        let mut center = vec![0.0; spec.dim];
        for &l in &chosen {
            center.iter_mut().zip(&directions[l]).for_each(|(c, d)| *c += d);
        }
        normalize(&mut center);
        let id = format!("img{i:05}");
        rows.push(noisy(&center, spec.sigma, &mut r));
        let names: Vec<String> = chosen.iter().map(|&l| label_name(l)).collect();
        let captions = (0..spec.captions_per_image)
            .map(|c| match c % 2 {
                0 => format!("photo {i} version {c} with {}", names.join(" and ")),
                _ => format!("image {i} version {c} shows {}", names.join(", ")),
            })
            .collect();
        records.push(ImageRecord {
            image_id: id.clone(),
            width: IMAGE_SIDE,
            height: IMAGE_SIDE,
            labels: chosen.iter().map(|&l| LabelId::new(format!("l{l}"))).collect(),
            boxes: vec![],
            captions,
            entity_spans: None,
        });
        keys.push(id);
    }
    Ok(RetrievalWorld {
        spec: spec.clone(),
        lexicon,
        records,
        images: EmbeddingMatrix::from_rows(keys, &rows)?,
        directions,
    })
}

impl RetrievalWorld {
    pub fn names(&self) -> LabelNames {
        LabelNames::from_lexicon(&self.lexicon)
    }

    pub fn tasks(&self) -> Vec<QueryTask> {
        build_tasks(&self.records, &self.spec.grid_config(), &self.lexicon, &self.names())
    }

    /// Embedding of one text: a function of its content and kind only.
    pub fn embed_text(&self, text: &str, kind: TextKind, matcher: &Matcher) -> Vec<f32> {
        let mentioned: BTreeSet<usize> = matcher.find(text).into_iter().flat_map(|m| m.labels).collect();
        let id = crate::retrieval::text_id(text);
        let mut u = gaussian(&mut rng::derived(self.spec.seed, &[tag("text"), tag(&id)]), self.spec.dim);
        orthogonalize(&mut u, &self.directions);
        normalize(&mut u);
        if mentioned.is_empty() {
            return to_f32(&u);
        }
        let mut dir = vec![0.0; self.spec.dim];
        for &l in &mentioned {
            dir.iter_mut().zip(&self.directions[l]).for_each(|(d, x)| *d += x);
        }
        normalize(&mut dir);
        let w = self.spec.weights.of(kind);
        let rest = (1.0 - w * w).max(0.0).sqrt();
        let v: Vec<f64> = dir.iter().zip(&u).map(|(d, u)| w * d + rest * u).collect();
        to_f32(&v)
    }

    /// Embeddings of every text in `tasks`, keyed by text id.
    pub fn embed_tasks(&self, tasks: &[QueryTask]) -> Result<EmbeddingMatrix> {
        let matcher = Matcher::new(&self.lexicon);
        let kind_of: HashMap<&str, TextKind> = tasks.iter().flat_map(QueryTask::items).map(|t| (t.id.as_str(), t.kind)).collect();
        let entries = texts_to_embed(tasks);
        let rows: Vec<Vec<f32>> = entries
            .iter()
            .map(|(id, text)| self.embed_text(text, kind_of[id.as_str()], &matcher))
            .collect();
        EmbeddingMatrix::from_rows(entries.into_iter().map(|(id, _)| id).collect(), &rows)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(dir, LEXICON_FILE, &self.lexicon.to_file())?;
        write(dir, RECORDS_FILE, &records_to_string(&self.records))?;
        write(dir, SPEC_FILE, &(serde_json::to_string_pretty(&self.spec).expect("spec serializes") + "\n"))?;
        write_matrix(&self.images, &dir.join(IMAGES_FILE))?;
        write_matrix(&self.embed_tasks(&self.tasks())?, &dir.join(TEXTS_FILE))
    }
}

/// A caption corpus over a hierarchy in which each leaf name is mentioned
/// `ratio` times as often as the names of its ancestors, per leaf.
pub struct FreqCorpus {
    pub lexicon: Lexicon,
    pub captions: Vec<String>,
    pub retrieved: HashMap<LabelId, u64>,
}

/// For each leaf: `per_leaf * ratio` captions naming it. For each ancestor:
/// `per_leaf` captions naming it per leaf descendant. Plus `per_leaf`
/// captions naming nothing; everything shuffled. Each leaf retrieved
/// `10 * per_leaf` images.
pub fn make_freq_corpus(h: &Hierarchy, per_leaf: usize, ratio: usize, seed: u64) -> FreqCorpus {
    let names: Vec<(String, String)> = (0..h.len()).map(|i| (h.id(i).to_string(), format!("term{i}"))).collect();
    let mut captions = Vec::new();
    let mut retrieved = HashMap::new();
    for i in 0..h.len() {
        let count = if h.is_leaf(i) {
            retrieved.insert(h.id(i).clone(), 10 * per_leaf as u64);
            per_leaf * ratio
        } else {
            per_leaf * h.leaf_descendants_of(i).len()
        };
        captions.extend((0..count).map(|k| format!("picture {k} of a {} here", names[i].1)));
    }
    captions.extend((0..per_leaf).map(|k| format!("picture {k} of nothing")));
    captions.shuffle(&mut rng::derived(seed, &[tag("corpus")]));
    FreqCorpus {
        lexicon: lexicon_of(&names),
        captions,
        retrieved,
    }
}

impl FreqCorpus {
    /// Writes `shards` caption files, their manifest, the lexicon and the
    /// retrieved-image counts.
    pub fn write_dir(&self, dir: &Path, h: &Hierarchy, shards: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(dir, HIERARCHY_FILE, &h.to_edge_file())?;
        write(dir, LEXICON_FILE, &self.lexicon.to_file())?;
        let mut retrieved: Vec<_> = self.retrieved.iter().collect();
        retrieved.sort();
        write(dir, RETRIEVED_FILE, &retrieved.iter().map(|(l, n)| format!("{l}\t{n}\n")).collect::<String>())?;
        let per = self.captions.len().div_ceil(shards.max(1)).max(1);
        let mut manifest = String::new();
        for (s, chunk) in self.captions.chunks(per).enumerate() {
            let name = format!("shard{s:03}.txt");
            write(dir, &name, &(chunk.join("\n") + "\n"))?;
            manifest.push_str(&format!("{name}\t{}\n", chunk.len()));
        }
        write(dir, SHARD_MANIFEST_FILE, &manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{evaluate_two_level, fg_gold};
    use crate::freq::{ancestor_aggregate, count_mentions, frequency_gap, ClassCounts};
    use crate::retrieval::{run_grid, EmbeddingScorer, NegativeMode, PositiveMode};
    use crate::scoring::cg_embedding_from_fg;

    fn small(epsilon: f64, sigma: f64) -> WorldSpec {
        WorldSpec {
            images_per_fg: 10,
            epsilon,
            sigma,
            ..Default::default()
        }
    }

    fn norms_ok(m: &EmbeddingMatrix) -> bool {
        (0..m.rows()).all(|i| {
            let n: f64 = m.row(i).iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            (n - 1.0).abs() < 1e-6
        })
    }

    #[test]
    fn noiseless_world_is_exact() {
        let w = make_world(&small(0.0, 0.0)).unwrap();
        let gold = fg_gold(&w.records, &w.map).unwrap();
        let r = evaluate_two_level(&w.images, &w.fg_table, &w.cg_table, &w.map, &gold, true).unwrap();
        assert_eq!(r.fg_direct, 1.0);
        assert_eq!(r.cg_fg_label.propagated, 1.0);
        assert_eq!(r.cg_fg_label.delta, 0.0);
        assert_eq!(r.cg_fg_emb.delta, 0.0);
        let emb = cg_embedding_from_fg(&w.map, &w.fg_table, true).unwrap();
        for (a, b) in emb.matrix().data().iter().zip(w.cg_table.matrix().data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(norms_ok(&w.images) && norms_ok(w.fg_table.matrix()) && norms_ok(w.cg_table.matrix()));
    }

    #[test]
    fn worlds_are_deterministic() {
        let a = make_world(&small(0.5, 0.3)).unwrap();
        let b = make_world(&small(0.5, 0.3)).unwrap();
        assert_eq!(a, b);
        let c = make_world(&WorldSpec { seed: 8, ..small(0.5, 0.3) }).unwrap();
        assert_ne!(a.images, c.images);
        for r in &a.records {
            r.validate().unwrap();
        }
    }

    #[test]
    fn spec_errors() {
        assert!(matches!(
            make_world(&WorldSpec { dim: 8, ..Default::default() }),
            Err(Error::DimTooSmall { dim: 8, needed: 16 })
        ));
        assert!(matches!(
            make_world(&WorldSpec { n_cg: 0, ..Default::default() }),
            Err(Error::InvalidSpec(_))
        ));
        let bad = RetrievalSpec {
            weights: InformativenessWeights { single: 0.7, multi: 0.6, caption: 0.9 },
            ..Default::default()
        };
        assert!(matches!(make_retrieval_world(&bad), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn retrieval_world_orders_kinds() {
        let w = make_retrieval_world(&RetrievalSpec::default()).unwrap();
        let tasks = w.tasks();
        let texts = w.embed_tasks(&tasks).unwrap();
        assert!(norms_ok(&texts) && norms_ok(&w.images));
        let scorer = EmbeddingScorer { images: &w.images, texts: &texts };
        let run = run_grid(&tasks, &scorer, w.spec.k, w.spec.grid_seed).unwrap();
        let med = |k| run.report.histogram(k).median.unwrap();
        assert!(med(TextKind::PromptSingle) < med(TextKind::PromptMulti));
        assert!(med(TextKind::PromptMulti) < med(TextKind::CapPos));
        let corner = |p, n| run.report.cell(p, n).map.unwrap();
        assert!(corner(PositiveMode::PromptSingle, NegativeMode::Error) < corner(PositiveMode::Captions, NegativeMode::Random));
    }

    #[test]
    fn equal_weights_score_alike() {
        let spec = RetrievalSpec {
            labels_per_image: 1,
            weights: InformativenessWeights { single: 0.5, multi: 0.5, caption: 0.5 },
            ..Default::default()
        };
        let w = make_retrieval_world(&spec).unwrap();
        let tasks = w.tasks();
        let texts = w.embed_tasks(&tasks).unwrap();
        let scorer = EmbeddingScorer { images: &w.images, texts: &texts };
        let run = run_grid(&tasks, &scorer, spec.k, spec.grid_seed).unwrap();
        let h = |k| run.report.histogram(k).counts.clone();
        assert_eq!(h(TextKind::PromptSingle).iter().sum::<u64>(), 60);
        let med = |k| run.report.histogram(k).median.unwrap();
        assert!((med(TextKind::PromptSingle) - 0.5).abs() < 1e-6);
        assert!((med(TextKind::PromptMulti) - 0.5).abs() < 1e-6);
        assert!((med(TextKind::CapPos) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn planted_corpus_has_positive_gaps() {
        let (h, _) = Hierarchy::build(
            &[("a", "x"), ("b", "x"), ("b", "y"), ("c", "y"), ("x", "r"), ("y", "r")],
            &[] as &[(&str, &str)],
        )
        .unwrap();
        let corpus = make_freq_corpus(&h, 4, 3, 1);
        let m = count_mentions(&[corpus.captions.join("\n")], &corpus.lexicon).unwrap().by_label(&corpus.lexicon);
        let leaves = ClassCounts::leaves(&h, &corpus.retrieved, &m).unwrap();
        let counts = ancestor_aggregate(&h, &leaves, &m).unwrap();
        let gap = frequency_gap(&h, &counts, false).unwrap();
        assert_eq!(gap.entries.len(), 3);
        assert!(gap.entries.iter().all(|e| e.delta_freq > 0.0));
    }
}
