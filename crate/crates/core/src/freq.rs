//! Class-name frequencies in caption corpora.
//!
//! `m` counts captions mentioning a label (any synonym, once per caption),
//! `n` is the number of images retrieved for a class. Ancestors aggregate
//! `n` and `m` over their leaf descendants and keep their own-name count
//! as `m_self`. The frequency gap of an ancestor is
//! `(sum of leaf m - m_self) / n`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{read_text, Hierarchy, LabelId};
use crate::lexicon::{Lexicon, Matcher};
use crate::metrics::{mean, spearman, Exclusion, Spearman};

/// Per-lexicon-label caption counts over a set of captions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MentionCounts {
    pub captions: u64,
    pub per_label: Vec<u64>,
}

impl MentionCounts {
    pub fn zeros(n_labels: usize) -> Self {
        MentionCounts {
            captions: 0,
            per_label: vec![0; n_labels],
        }
    }

    pub fn merge(mut self, other: &MentionCounts) -> Self {
        self.captions += other.captions;
        for (a, b) in self.per_label.iter_mut().zip(&other.per_label) {
            *a += b;
        }
        self
    }

    /// `label -> m` for every lexicon label.
    pub fn by_label(&self, lexicon: &Lexicon) -> HashMap<LabelId, u64> {
        lexicon.labels().iter().cloned().zip(self.per_label.iter().copied()).collect()
    }
}

/// Counts one shard: one caption per line; blank lines are still captions.
pub fn count_shard(matcher: &Matcher, text: &str) -> MentionCounts {
    let mut counts = MentionCounts::zeros(matcher.n_labels());
    let mut hits = vec![false; matcher.n_labels()];
    for line in text.lines() {
        counts.captions += 1;
        hits.iter_mut().for_each(|h| *h = false);
        matcher.mark_mentions(line, &mut hits);
        for (c, &h) in counts.per_label.iter_mut().zip(&hits) {
            *c += h as u64;
        }
    }
    counts
}

pub fn count_mentions<S: AsRef<str> + Sync>(shards: &[S], lexicon: &Lexicon) -> Result<MentionCounts> {
    if lexicon.is_empty() {
        return Err(Error::EmptyLexicon);
    }
    let matcher = Matcher::new(lexicon);
    let zero = MentionCounts::zeros(lexicon.len());
    Ok(shards
        .par_iter()
        .map(|s| count_shard(&matcher, s.as_ref()))
        .reduce(|| zero.clone(), |a, b| a.merge(&b)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardEntry {
    pub path: PathBuf,
    pub declared: u64,
}

/// Shard manifest: `path<TAB>caption_count` per line; relative paths are
/// resolved against `base`.
pub fn parse_shard_manifest(text: &str, source: &str, base: &Path) -> Result<Vec<ShardEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (p, c) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(source, lineno + 1, "expected `path<TAB>count`"))?;
        let declared = c
            .trim()
            .parse()
            .map_err(|_| Error::parse(source, lineno + 1, format!("bad caption count `{c}`")))?;
        out.push(ShardEntry {
            path: base.join(p),
            declared,
        });
    }
    Ok(out)
}

pub fn load_shard_manifest(path: &Path) -> Result<Vec<ShardEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    parse_shard_manifest(&read_text(path)?, &path.display().to_string(), base)
}

/// Counts every shard file, checking each against its declared size.
pub fn count_shard_files(shards: &[ShardEntry], lexicon: &Lexicon) -> Result<MentionCounts> {
    if lexicon.is_empty() {
        return Err(Error::EmptyLexicon);
    }
    let matcher = Matcher::new(lexicon);
    let per_shard = shards
        .par_iter()
        .map(|s| {
            let counts = count_shard(&matcher, &read_text(&s.path)?);
            if counts.captions != s.declared {
                return Err(Error::ShardCountMismatch {
                    path: s.path.display().to_string(),
                    declared: s.declared,
                    actual: counts.captions,
                });
            }
            Ok(counts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_shard
        .iter()
        .fold(MentionCounts::zeros(lexicon.len()), |a, b| a.merge(b)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub n: u64,
    pub m: u64,
    pub m_self: u64,
}

/// Counts per class, ordered by label id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(pub BTreeMap<LabelId, ClassCount>);

impl ClassCounts {
    pub fn get(&self, label: &str) -> Option<&ClassCount> {
        self.0.get(label)
    }

    /// Leaf counts: `n` from `retrieved`, `m = m_self` from `mentions`
    /// (zero for labels the lexicon does not cover).
    pub fn leaves(h: &Hierarchy, retrieved: &HashMap<LabelId, u64>, mentions: &HashMap<LabelId, u64>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for leaf in h.leaves() {
            let id = h.id(leaf);
            let n = *retrieved
                .get(id)
                .ok_or_else(|| Error::MissingLeafCount(id.to_string()))?;
            let m = mentions.get(id).copied().unwrap_or(0);
            out.insert(id.clone(), ClassCount { n, m, m_self: m });
        }
        Ok(ClassCounts(out))
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::parse(source, lineno + 1, "expected `label<TAB>n<TAB>m<TAB>m_self`"));
            }
            let num = |s: &str| {
                s.parse::<u64>()
                    .map_err(|_| Error::parse(source, lineno + 1, format!("bad count `{s}`")))
            };
            out.insert(
                LabelId::new(fields[0]),
                ClassCount {
                    n: num(fields[1])?,
                    m: num(fields[2])?,
                    m_self: num(fields[3])?,
                },
            );
        }
        Ok(ClassCounts(out))
    }

    pub fn load(path: &Path) -> Result<Self> {
        ClassCounts::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn to_file(&self) -> String {
        self.0
            .iter()
            .map(|(l, c)| format!("{l}\t{}\t{}\t{}\n", c.n, c.m, c.m_self))
            .collect()
    }
}

/// `label<TAB>n` lines giving retrieved-image counts.
pub fn parse_retrieved(text: &str, source: &str) -> Result<HashMap<LabelId, u64>> {
    crate::hierarchy::parse_pairs(text, source)?
        .into_iter()
        .map(|(l, n)| {
            let n = n
                .trim()
                .parse()
                .map_err(|_| Error::parse(source, 0, format!("bad count `{n}` for `{l}`")))?;
            Ok((LabelId::new(l), n))
        })
        .collect()
}

/// Extends leaf counts to every non-leaf node. An ancestor's `n` and `m`
/// sum over its distinct leaf descendants; `m_self` is its own-name count.
pub fn ancestor_aggregate(h: &Hierarchy, leaves: &ClassCounts, self_mentions: &HashMap<LabelId, u64>) -> Result<ClassCounts> {
    let mut out = BTreeMap::new();
    for leaf in h.leaves() {
        let id = h.id(leaf);
        let c = leaves
            .get(id.as_str())
            .ok_or_else(|| Error::MissingLeafCount(id.to_string()))?;
        out.insert(id.clone(), *c);
    }
    for i in 0..h.len() {
        if h.is_leaf(i) {
            continue;
        }
        let mut c = ClassCount {
            m_self: self_mentions.get(h.id(i)).copied().unwrap_or(0),
            ..Default::default()
        };
        for &leaf in h.leaf_descendants_of(i) {
            let lc = &out[h.id(leaf)];
            c.n += lc.n;
            c.m += lc.m;
        }
        out.insert(h.id(i).clone(), c);
    }
    Ok(ClassCounts(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFrequency {
    pub class: LabelId,
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub per_class: Vec<ClassFrequency>,
    pub excluded: Vec<Exclusion>,
}

/// `q = m / n` for each leaf of `h`; leaves with `n = 0` are excluded.
pub fn class_frequency(h: &Hierarchy, counts: &ClassCounts) -> Result<FrequencyReport> {
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for leaf in h.leaves() {
        let id = h.id(leaf);
        let c = counts
            .get(id.as_str())
            .ok_or_else(|| Error::MissingLeafCount(id.to_string()))?;
        if c.n == 0 {
            excluded.push(Exclusion {
                class: id.clone(),
                reason: "no retrieved images".into(),
            });
        } else {
            per_class.push(ClassFrequency {
                class: id.clone(),
                q: c.m as f64 / c.n as f64,
            });
        }
    }
    Ok(FrequencyReport { per_class, excluded })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelFrequency {
    pub level: usize,
    pub classes: usize,
    pub mean_q: f64,
}

/// Mean own-name frequency `m_self / n` per hierarchy level, over classes
/// with `n > 0`.
pub fn level_frequency(h: &Hierarchy, counts: &ClassCounts) -> Vec<LevelFrequency> {
    let mut by_level: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for i in 0..h.len() {
        if let Some(c) = counts.get(h.id(i).as_str()).filter(|c| c.n > 0) {
            by_level.entry(h.level(i)).or_default().push(c.m_self as f64 / c.n as f64);
        }
    }
    by_level
        .into_iter()
        .map(|(level, qs)| LevelFrequency {
            level,
            classes: qs.len(),
            mean_q: mean(qs.iter().copied()).unwrap_or(0.0),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub class: LabelId,
    pub level: usize,
    pub delta_freq: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_leaf: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqGapReport {
    /// Whether the gap used `(sum n_i - n_j) / m_j` instead of the default.
    pub literal: bool,
    pub entries: Vec<GapEntry>,
    pub undefined: Vec<Exclusion>,
}

impl FreqGapReport {
    pub fn get(&self, class: &str) -> Option<&GapEntry> {
        self.entries.iter().find(|e| e.class.as_str() == class)
    }
}

/// Frequency gap of every non-leaf class of `h`, in hierarchy order.
///
/// Default: `(sum_i m_i - m_self_j) / n_j` over leaf descendants `i`.
/// With `literal`: `(sum_i n_i - n_j) / m_j`, which is zero whenever
/// `n_j` is itself the sum. A zero denominator leaves the entry undefined.
pub fn frequency_gap(h: &Hierarchy, counts: &ClassCounts, literal: bool) -> Result<FreqGapReport> {
    let mut entries = Vec::new();
    let mut undefined = Vec::new();
    for i in 0..h.len() {
        if h.is_leaf(i) {
            continue;
        }
        let id = h.id(i);
        let c = counts
            .get(id.as_str())
            .ok_or_else(|| Error::MissingLeafCount(id.to_string()))?;
        let mut sum_m = 0i128;
        let mut sum_n = 0i128;
        for &leaf in h.leaf_descendants_of(i) {
            let lc = counts
                .get(h.id(leaf).as_str())
                .ok_or_else(|| Error::MissingLeafCount(h.id(leaf).to_string()))?;
            sum_m += lc.m as i128;
            sum_n += lc.n as i128;
        }
        let (num, den, what) = if literal {
            (sum_n - c.n as i128, c.m, "no mentions (m = 0)")
        } else {
            (sum_m - c.m_self as i128, c.n, "no retrieved images (n = 0)")
        };
        if den == 0 {
            undefined.push(Exclusion {
                class: id.clone(),
                reason: what.into(),
            });
            continue;
        }
        entries.push(GapEntry {
            class: id.clone(),
            level: h.level(i),
            delta_freq: num as f64 / den as f64,
            delta_leaf: None,
        });
    }
    Ok(FreqGapReport {
        literal,
        entries,
        undefined,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCorrelation {
    pub spearman: Spearman,
    /// Ancestors with a gap but no supplied performance delta.
    pub unpaired: Vec<LabelId>,
}

/// Attaches `deltas` to the report entries and correlates the pairs.
pub fn correlate_gap_vs_delta(report: &mut FreqGapReport, deltas: &HashMap<LabelId, f64>) -> Result<GapCorrelation> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut unpaired = Vec::new();
    for e in &mut report.entries {
        e.delta_leaf = deltas.get(&e.class).copied().filter(|d| d.is_finite());
        match e.delta_leaf {
            Some(d) => {
                x.push(e.delta_freq);
                y.push(d);
            }
            None => unpaired.push(e.class.clone()),
        }
    }
    if x.len() < 3 {
        return Err(Error::TooFewValues { needed: 3, got: x.len() });
    }
    Ok(GapCorrelation {
        spearman: spearman(&x, &y)?,
        unpaired,
    })
}

/// `class,level,delta_freq,delta_leaf` rows for paired entries.
pub fn scatter_csv(report: &FreqGapReport) -> String {
    let mut out = String::from("class,level,delta_freq,delta_leaf\n");
    for e in &report.entries {
        if let Some(d) = e.delta_leaf {
            out.push_str(&format!("{},{},{},{}\n", e.class, e.level, e.delta_freq, d));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn lex(pairs: &[(&str, &str)]) -> Lexicon {
        Lexicon::from_pairs(pairs)
    }

    #[test]
    fn plural_needs_explicit_synonym() {
        let caps = "a leopard\ntwo leopards running\n";
        let one = count_mentions(&[caps], &lex(&[("leopard", "leopard")])).unwrap();
        assert_eq!(one.per_label, vec![1]);
        let two = count_mentions(&[caps], &lex(&[("leopard", "leopard"), ("leopard", "leopards")])).unwrap();
        assert_eq!(two.per_label, vec![2]);
        assert_eq!(two.captions, 2);
    }

    #[test]
    fn repeated_hits_count_once() {
        let c = count_mentions(&["dog and dog and puppy"], &lex(&[("dog", "dog"), ("dog", "puppy")])).unwrap();
        assert_eq!(c.per_label, vec![1]);
    }

    #[test]
    fn empty_inputs() {
        let l = lex(&[("a", "a")]);
        assert_eq!(count_mentions(&[""], &l).unwrap().per_label, vec![0]);
        assert!(matches!(count_mentions(&["x"], &Lexicon::default()), Err(Error::EmptyLexicon)));
    }

    #[test]
    fn shard_split_is_additive() {
        let l = lex(&[("cat", "cat"), ("dog", "dog"), ("hd", "hot dog")]);
        let mut r = rng::seeded(3);
        let words = ["cat", "dog", "hot", "a", "the", "runs"];
        let lines: Vec<String> = (0..400)
            .map(|_| (0..6).map(|_| words[r.random_range(0..words.len())]).collect::<Vec<_>>().join(" "))
            .collect();
        let whole = count_mentions(&[lines.join("\n")], &l).unwrap();
        let parts: Vec<String> = lines.chunks(100).map(|c| c.join("\n")).collect();
        assert_eq!(count_mentions(&parts, &l).unwrap(), whole);
    }

    fn diamond() -> Hierarchy {
        Hierarchy::build(
            &[("l1", "a"), ("l2", "a"), ("l2", "b"), ("l3", "b"), ("a", "r"), ("b", "r")],
            &[] as &[(&str, &str)],
        )
        .unwrap()
        .0
    }

    #[test]
    fn aggregate_over_distinct_leaves() {
        let h = diamond();
        let retrieved: HashMap<LabelId, u64> =
            [("l1", 10), ("l2", 10), ("l3", 5)].map(|(l, n)| (LabelId::new(l), n)).into();
        let mentions: HashMap<LabelId, u64> = [("l1", 5), ("l2", 3), ("l3", 1), ("r", 2)]
            .map(|(l, n)| (LabelId::new(l), n))
            .into();
        let leaves = ClassCounts::leaves(&h, &retrieved, &mentions).unwrap();
        let all = ancestor_aggregate(&h, &leaves, &mentions).unwrap();
        assert_eq!(all.get("a").unwrap(), &ClassCount { n: 20, m: 8, m_self: 0 });
        assert_eq!(all.get("r").unwrap(), &ClassCount { n: 25, m: 9, m_self: 2 });
        assert_eq!(ClassCounts::parse(&all.to_file(), "x").unwrap(), all);

        let gap = frequency_gap(&h, &all, false).unwrap();
        assert_eq!(gap.get("a").unwrap().delta_freq, 8.0 / 20.0);
        assert_eq!(gap.get("r").unwrap().delta_freq, 7.0 / 25.0);
        let literal = frequency_gap(&h, &all, true).unwrap();
        assert_eq!(literal.get("r").unwrap().delta_freq, 0.0);
        assert!(literal.entries.iter().all(|e| e.delta_freq == 0.0));

        let missing: HashMap<LabelId, u64> = [(LabelId::new("l1"), 1)].into();
        assert!(matches!(
            ClassCounts::leaves(&h, &missing, &mentions),
            Err(Error::MissingLeafCount(_))
        ));
    }

    #[test]
    fn gap_examples() {
        let h = Hierarchy::build(&[("x", "j"), ("y", "j")], &[] as &[(&str, &str)]).unwrap().0;
        let mk = |mx, my, ms| {
            ClassCounts(
                [
                    (LabelId::new("x"), ClassCount { n: 10, m: mx, m_self: mx }),
                    (LabelId::new("y"), ClassCount { n: 10, m: my, m_self: my }),
                    (LabelId::new("j"), ClassCount { n: 20, m: mx + my, m_self: ms }),
                ]
                .into(),
            )
        };
        assert_eq!(frequency_gap(&h, &mk(5, 3, 2), false).unwrap().entries[0].delta_freq, 0.3);
        assert_eq!(frequency_gap(&h, &mk(5, 3, 8), false).unwrap().entries[0].delta_freq, 0.0);
        assert!(frequency_gap(&h, &mk(5, 3, 9), false).unwrap().entries[0].delta_freq < 0.0);
        let mut zero = mk(0, 0, 0);
        zero.0.get_mut("j").unwrap().n = 0;
        let r = frequency_gap(&h, &zero, false).unwrap();
        assert!(r.entries.is_empty());
        assert_eq!(r.undefined.len(), 1);
    }

    #[test]
    fn gap_is_homogeneous_under_duplication() {
        let h = diamond();
        let l = lex(&[("l1", "alpha"), ("l2", "beta"), ("l3", "gamma"), ("r", "root")]);
        let corpus = "alpha beta\nroot gamma\nbeta\nalpha root\n";
        let run = |copies: usize, scale: u64| {
            let shards = vec![corpus; copies];
            let m = count_mentions(&shards, &l).unwrap().by_label(&l);
            let retrieved: HashMap<LabelId, u64> =
                [("l1", 3), ("l2", 4), ("l3", 2)].map(|(k, v)| (LabelId::new(k), v * scale)).into();
            let leaves = ClassCounts::leaves(&h, &retrieved, &m).unwrap();
            frequency_gap(&h, &ancestor_aggregate(&h, &leaves, &m).unwrap(), false).unwrap()
        };
        assert_eq!(run(1, 1), run(2, 2));
    }

    #[test]
    fn frequencies_and_exclusions() {
        let h = Hierarchy::build(&[("x", "j"), ("y", "j")], &[] as &[(&str, &str)]).unwrap().0;
        let counts = ClassCounts(
            [
                (LabelId::new("x"), ClassCount { n: 10, m: 5, m_self: 5 }),
                (LabelId::new("y"), ClassCount { n: 0, m: 0, m_self: 0 }),
                (LabelId::new("j"), ClassCount { n: 10, m: 5, m_self: 1 }),
            ]
            .into(),
        );
        let f = class_frequency(&h, &counts).unwrap();
        assert_eq!(f.per_class, vec![ClassFrequency { class: LabelId::new("x"), q: 0.5 }]);
        assert_eq!(f.excluded[0].class.as_str(), "y");
        let lv = level_frequency(&h, &counts);
        assert_eq!(lv.len(), 2);
        assert_eq!(lv[0].mean_q, 0.1);
    }

    #[test]
    fn identical_deltas_correlate_perfectly() {
        let mut report = FreqGapReport {
            literal: false,
            entries: (0..5)
                .map(|i| GapEntry {
                    class: LabelId::new(format!("c{i}")),
                    level: 0,
                    delta_freq: i as f64 * 0.1,
                    delta_leaf: None,
                })
                .collect(),
            undefined: vec![],
        };
        let deltas: HashMap<LabelId, f64> = report.entries.iter().map(|e| (e.class.clone(), e.delta_freq)).collect();
        let c = correlate_gap_vs_delta(&mut report, &deltas).unwrap();
        assert_eq!(c.spearman.rho, 1.0);
        assert!(scatter_csv(&report).lines().count() == 6);
        let few: HashMap<LabelId, f64> = deltas.into_iter().take(2).collect();
        assert!(matches!(
            correlate_gap_vs_delta(&mut report, &few),
            Err(Error::TooFewValues { .. })
        ));
    }

    #[test]
    fn independent_pairs_rarely_correlate() {
        let trials = 400;
        let mut strong = 0;
        for t in 0..trials {
            let mut r = rng::derived(11, &[t]);
            let x: Vec<f64> = (0..50).map(|_| r.random()).collect();
            let y: Vec<f64> = (0..50).map(|_| r.random()).collect();
            if spearman(&x, &y).unwrap().rho.abs() >= 0.4 {
                strong += 1;
            }
        }
        assert!(strong as f64 / trials as f64 <= 0.01, "{strong}");
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_shard_manifest("a.txt\t3\n# c\nsub/b.txt\t0\n", "m", Path::new("/d")).unwrap();
        assert_eq!(m[1].path, Path::new("/d/sub/b.txt"));
        assert_eq!(m[0].declared, 3);
        assert!(parse_shard_manifest("a.txt\tx\n", "m", Path::new(".")).is_err());
    }
}
