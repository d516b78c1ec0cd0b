//! Command-line front end.
//!
//! Every subcommand that takes `--out` writes `report.json`, `report.txt`,
//! any CSV/TSV side files, and `config.json` (resolved parameters plus
//! SHA-256 digests of every input file).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::{evaluate_multilevel, evaluate_two_level, fg_gold, level_stats_csv};
use crate::freq::{
    ancestor_aggregate, class_frequency, correlate_gap_vs_delta, count_shard_files, frequency_gap, level_frequency,
    load_shard_manifest, parse_retrieved, scatter_csv, ClassCounts,
};
use crate::hierarchy::{parse_pairs, read_text, Hierarchy, LabelId, TwoLevelMap};
use crate::lexicon::Lexicon;
use crate::metrics::area_score_correlation;
use crate::retrieval::{
    build_tasks, manifest_to_string, run_grid, texts_to_embed, EmbeddingScorer, GridConfig, GridReport, LabelNames,
    NegativeMode, Perturber, PositiveMode, PrecomputedScorer, TextScorer, DEFAULT_K,
};
use crate::rng;
use crate::scoring::{cosine_scores, ClassEmbeddingTable, PromptTemplateSet};
use crate::synth::{self, make_freq_corpus, make_retrieval_world, make_world, RetrievalSpec, WorldSpec};
use crate::tensor_store::{check_alignment, read_matrix, read_records, read_scores, score_sidecar, write_scores, ScoreMatrix};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "zsprobe", version, about = "Granularity and specificity probes for vision-language embeddings")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Hierarchy utilities.
    #[command(subcommand)]
    Hierarchy(HierarchyCommand),
    /// Fine vs coarse top-1 accuracy with label and embedding propagation.
    TwoLevel(TwoLevelArgs),
    /// Multi-label mAP over a hierarchy with raw and propagated scores.
    Multilevel(MultilevelArgs),
    /// Image-to-text retrieval grid with hard positives and negatives.
    Retrieval(RetrievalArgs),
    /// Entity-swap perturbation of captions.
    Perturb(PerturbArgs),
    /// Class-name frequencies and frequency gaps in caption shards.
    Freq(FreqArgs),
    /// Generate a synthetic world directory.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Cosine score matrix between image and text embeddings.
    Score(ScoreArgs),
}

#[derive(Debug, Subcommand)]
pub enum HierarchyCommand {
    /// Check a hierarchy for cycles and print summary statistics.
    Validate {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        names: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TwoLevelArgs {
    #[arg(long)]
    pub images: PathBuf,
    /// Fine-grained prompt embeddings, keyed `class` or `class#t`.
    #[arg(long)]
    pub fg: PathBuf,
    /// Coarse prompt embeddings, keyed `class` or `class#t`.
    #[arg(long)]
    pub cg: PathBuf,
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep template means unnormalized.
    #[arg(long)]
    pub no_renorm: bool,
}

#[derive(Debug, Args)]
pub struct MultilevelArgs {
    #[arg(long)]
    pub hierarchy: PathBuf,
    #[arg(long)]
    pub names: Option<PathBuf>,
    #[arg(long)]
    pub records: PathBuf,
    /// Precomputed image x class score matrix.
    #[arg(long, conflicts_with_all = ["images", "texts"])]
    pub scores: Option<PathBuf>,
    #[arg(long, requires = "texts")]
    pub images: Option<PathBuf>,
    /// Class prompt embeddings, keyed `class` or `class#t`.
    #[arg(long, requires = "images")]
    pub texts: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_renorm: bool,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
    /// One prompt template per line; the first is used.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, conflicts_with = "scores", requires = "texts")]
    pub images: Option<PathBuf>,
    /// Text embeddings keyed by text id.
    #[arg(long)]
    pub texts: Option<PathBuf>,
    /// Precomputed image x text-id score matrix.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Only write the texts-to-embed manifest.
    #[arg(long)]
    pub manifest_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub lexicon: PathBuf,
    /// Perturb every caption of these records.
    #[arg(long, conflicts_with = "caption", required_unless_present = "caption")]
    pub records: Option<PathBuf>,
    /// Perturb a single caption (printed as JSON).
    #[arg(long, requires = "labels")]
    pub caption: Option<String>,
    /// Comma-separated labels of the image the caption describes.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    /// Perturbations per caption.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, required_unless_present = "caption")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FreqArgs {
    #[arg(long)]
    pub hierarchy: PathBuf,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Shard manifest: `path<TAB>caption_count` per line.
    #[arg(long, requires_all = ["lexicon", "retrieved"], conflicts_with = "counts")]
    pub shards: Option<PathBuf>,
    /// Retrieved-image counts: `label<TAB>n` per leaf.
    #[arg(long)]
    pub retrieved: Option<PathBuf>,
    /// Precomputed counts file: `label<TAB>n<TAB>m<TAB>m_self`.
    #[arg(long, required_unless_present = "shards")]
    pub counts: Option<PathBuf>,
    /// Per-ancestor performance deltas: `class<TAB>delta`.
    #[arg(long)]
    pub deltas: Option<PathBuf>,
    /// Use `(sum n_i - n_j) / m_j` as the gap.
    #[arg(long)]
    pub literal_freq_gap: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Two-level world: orthonormal fine classes, noisy coarse prompts.
    TwoLevel {
        #[arg(long, default_value_t = 4)]
        n_cg: usize,
        #[arg(long, default_value_t = 4)]
        fg_per_cg: usize,
        #[arg(long, default_value_t = 50)]
        images_per_fg: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.3)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval world with text informativeness set per kind.
    Retrieval {
        #[arg(long, default_value_t = 12)]
        n_labels: usize,
        #[arg(long, default_value_t = 60)]
        n_images: usize,
        #[arg(long, default_value_t = 3)]
        labels_per_image: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0.3)]
        w_single: f64,
        #[arg(long, default_value_t = 0.6)]
        w_multi: f64,
        #[arg(long, default_value_t = 0.9)]
        w_caption: f64,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Negatives per query of the grid the texts are embedded for.
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption shards over a two-level hierarchy, leaf names `ratio` times
    /// as frequent as ancestor names.
    Freq {
        #[arg(long, default_value_t = 4)]
        n_cg: usize,
        #[arg(long, default_value_t = 4)]
        fg_per_cg: usize,
        #[arg(long, default_value_t = 20)]
        per_leaf: usize,
        #[arg(long, default_value_t = 3)]
        ratio: usize,
        #[arg(long, default_value_t = 4)]
        shards: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub texts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Records resolved parameters and input digests for `config.json`.
struct RunConfig {
    command: &'static str,
    seed: u64,
    threads: usize,
    params: BTreeMap<String, Value>,
    inputs: BTreeMap<String, Value>,
}

fn digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunConfig {
    fn new(command: &'static str, cli: &Cli) -> Self {
        RunConfig {
            command,
            seed: cli.seed,
            threads: cli.threads,
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    fn param(&mut self, name: &str, value: impl Serialize) -> &mut Self {
        self.params.insert(name.into(), serde_json::to_value(value).expect("serializable"));
        self
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        self.inputs.insert(
            name.into(),
            json!({ "path": path.display().to_string(), "sha256": digest(path)? }),
        );
        Ok(self)
    }

    fn input_opt(&mut self, name: &str, path: Option<&Path>) -> Result<&mut Self> {
        if let Some(p) = path {
            self.input(name, p)?;
        }
        Ok(self)
    }

    fn to_json(&self) -> Value {
        json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "threads": self.threads,
            "params": self.params,
            "inputs": self.inputs,
        })
    }
}

/// Files of one run, written together.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: &str, contents: String) -> &mut Self {
        self.files.push((name.into(), contents));
        self
    }

    fn write(&self, config: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for (name, contents) in &self.files {
            let path = self.dir.join(name);
            fs::write(&path, contents).map_err(|e| Error::io(path, e))?;
        }
        let path = self.dir.join("config.json");
        fs::write(&path, pretty(&config.to_json())).map_err(|e| Error::io(path, e))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Hierarchy(HierarchyCommand::Validate { edges, names, out }) => {
            cmd_validate(cli, edges, names.as_deref(), out.as_deref())
        }
        Command::TwoLevel(a) => cmd_two_level(cli, a),
        Command::Multilevel(a) => cmd_multilevel(cli, a),
        Command::Retrieval(a) => cmd_retrieval(cli, a),
        Command::Perturb(a) => cmd_perturb(cli, a),
        Command::Freq(a) => cmd_freq(cli, a),
        Command::Synth(s) => cmd_synth(cli, s),
        Command::Score(a) => cmd_score(cli, a),
    })
}

fn cmd_validate(cli: &Cli, edges: &Path, names: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (h, warnings) = Hierarchy::load(edges, names)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let leaves = h.leaves().count();
    let report = json!({
        "nodes": h.len(),
        "edges": h.edges().count(),
        "roots": h.roots().len(),
        "leaves": leaves,
        "max_level": h.max_level(),
        "warnings": warnings.iter().map(ToString::to_string).collect::<Vec<_>>(),
    });
    let text = format!(
        "nodes     {}\nedges     {}\nroots     {}\nleaves    {}\nmax level {}\nwarnings  {}\n",
        h.len(),
        h.edges().count(),
        h.roots().len(),
        leaves,
        h.max_level(),
        warnings.len()
    );
    match out {
        Some(dir) => {
            let mut config = RunConfig::new("hierarchy validate", cli);
            config.input("edges", edges)?.input_opt("names", names)?;
            let mut o = Outputs::new(dir);
            o.add("report.json", pretty(&report)).add("report.txt", text);
            o.write(&config)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn class_table(path: &Path, renorm: bool) -> Result<ClassEmbeddingTable> {
    ClassEmbeddingTable::ensemble(&read_matrix(path)?, renorm)
}

fn cmd_two_level(cli: &Cli, a: &TwoLevelArgs) -> Result<()> {
    let renorm = !a.no_renorm;
    let images = read_matrix(&a.images)?;
    let fg = class_table(&a.fg, renorm)?;
    let cg = class_table(&a.cg, renorm)?;
    let (map, warnings) = TwoLevelMap::load(&a.map)?;
    warnings.iter().for_each(|w| log::warn!("{w}"));
    let records = read_records(&a.records)?;
    check_alignment(&images, &records)?;
    let gold = fg_gold(&records, &map)?;
    let report = evaluate_two_level(&images, &fg, &cg, &map, &gold, renorm)?;

    let mut config = RunConfig::new("two-level", cli);
    config.param("renorm", renorm);
    config
        .input("images", &a.images)?
        .input("fg", &a.fg)?
        .input("cg", &a.cg)?
        .input("map", &a.map)?
        .input("records", &a.records)?;
    let mut o = Outputs::new(&a.out);
    o.add("report.json", pretty(&report)).add("report.txt", report.to_table());
    o.write(&config)
}

fn cmd_multilevel(cli: &Cli, a: &MultilevelArgs) -> Result<()> {
    let renorm = !a.no_renorm;
    let (h, warnings) = Hierarchy::load(&a.hierarchy, a.names.as_deref())?;
    warnings.iter().for_each(|w| log::warn!("{w}"));
    let records = read_records(&a.records)?;
    let mut config = RunConfig::new("multilevel", cli);
    config.param("renorm", renorm);
    config
        .input("hierarchy", &a.hierarchy)?
        .input_opt("names", a.names.as_deref())?
        .input("records", &a.records)?;
    let scores = match (&a.scores, &a.images, &a.texts) {
        (Some(s), _, _) => {
            config.input("scores", s)?.input("scores_columns", &score_sidecar(s))?;
            read_scores(s)?
        }
        (None, Some(i), Some(t)) => {
            config.input("images", i)?.input("texts", t)?;
            cosine_scores(&read_matrix(i)?, class_table(t, renorm)?.matrix())?
        }
        _ => return Err(Error::Usage("give --scores or both --images and --texts".into())),
    };
    let report = evaluate_multilevel(&scores, &h, &records)?;
    let deltas: String = report
        .ancestor_delta_leaf()
        .iter()
        .map(|(c, d)| format!("{c}\t{d}\n"))
        .collect();
    let mut o = Outputs::new(&a.out);
    o.add("report.json", pretty(&report))
        .add("report.txt", report.to_table())
        .add("classes.csv", report.classes_csv())
        .add("levels_raw.csv", level_stats_csv(&report.levels_raw))
        .add("levels_leaf.csv", level_stats_csv(&report.levels_leaf))
        .add("ancestor_delta_leaf.tsv", deltas);
    o.write(&config)
}

fn grid_table(r: &GridReport) -> String {
    let mut out = format!("queries {}  k {}  seed {}\n\n{:<10}", r.n_queries, r.k, r.seed, "");
    for n in NegativeMode::ALL {
        out.push_str(&format!("{:>20}", n.kind().short()));
    }
    out.push('\n');
    for p in PositiveMode::ALL {
        out.push_str(&format!("{:<10}", p.kind().short()));
        for n in NegativeMode::ALL {
            let c = r.cell(p, n);
            let v = c.map.map_or_else(|| "-".to_string(), |m| format!("{:.2}", m * 100.0));
            out.push_str(&format!("{:>20}", format!("{v} ({} dropped)", c.dropped)));
        }
        out.push('\n');
    }
    out.push_str("\nmedian score per kind\n");
    for h in &r.histograms {
        let m = h.median.map_or_else(|| "-".to_string(), |m| format!("{m:.4}"));
        out.push_str(&format!("{:<10}{:>10}  (n = {})\n", h.kind.short(), m, h.count));
    }
    out
}

fn cmd_retrieval(cli: &Cli, a: &RetrievalArgs) -> Result<()> {
    let records = read_records(&a.records)?;
    let lexicon = Lexicon::load(&a.lexicon)?;
    let templates = match &a.templates {
        Some(p) => PromptTemplateSet::load(p)?,
        None => PromptTemplateSet::default(),
    };
    let mut config = RunConfig::new("retrieval", cli);
    config.param("k", a.k).param("manifest_only", a.manifest_only);
    config
        .input("records", &a.records)?
        .input("lexicon", &a.lexicon)?
        .input_opt("templates", a.templates.as_deref())?;

    let grid = GridConfig {
        k: a.k,
        seed: cli.seed,
        templates,
    };
    let tasks = build_tasks(&records, &grid, &lexicon, &LabelNames::from_lexicon(&lexicon));
    let manifest = manifest_to_string(&texts_to_embed(&tasks));
    let mut o = Outputs::new(&a.out);
    o.add("texts_to_embed.tsv", manifest);
    if a.manifest_only {
        return o.write(&config);
    }

    let owned_images;
    let owned_texts;
    let owned_scores;
    let scorer: Box<dyn TextScorer> = match (&a.scores, &a.images, &a.texts) {
        (Some(s), _, _) => {
            config.input("scores", s)?.input("scores_columns", &score_sidecar(s))?;
            owned_scores = read_scores(s)?;
            Box::new(PrecomputedScorer::new(&owned_scores))
        }
        (None, Some(i), Some(t)) => {
            config.input("images", i)?.input("texts", t)?;
            owned_images = read_matrix(i)?;
            owned_texts = read_matrix(t)?;
            Box::new(EmbeddingScorer {
                images: &owned_images,
                texts: &owned_texts,
            })
        }
        _ => {
            return Err(Error::Usage(
                "give --scores, or --images and --texts, or --manifest-only".into(),
            ))
        }
    };
    let result = match run_grid(&tasks, scorer.as_ref(), a.k, cli.seed) {
        Ok(r) => r,
        Err(e) => {
            // Leave the manifest behind so missing texts can be embedded.
            o.write(&config)?;
            return Err(e);
        }
    };
    let area = if records.iter().any(|r| !r.boxes.is_empty()) {
        Some(area_score_correlation(&records, &result.single_label_scores)?)
    } else {
        None
    };
    let report = json!({ "grid": result.report, "area_correlation": area });
    let mut text = grid_table(&result.report);
    if let Some(a) = &area {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        text.push_str(&format!(
            "\narea vs single-prompt score: mean rho {}  pooled rho {}  strong classes {}\n",
            f(a.mean_rho),
            f(a.pooled.map(|s| s.rho)),
            a.strong_classes
        ));
    }
    o.add("report.json", pretty(&report))
        .add("report.txt", text)
        .add("histograms.csv", result.report.histogram_csv());
    o.write(&config)
}

fn cmd_perturb(cli: &Cli, a: &PerturbArgs) -> Result<()> {
    let lexicon = Lexicon::load(&a.lexicon)?;
    let perturber = Perturber::new(&lexicon);
    if let Some(caption) = &a.caption {
        let labels: Vec<LabelId> = a.labels.iter().map(|l| LabelId::new(l.trim())).collect();
        for j in 0..a.count {
            let p = perturber.perturb(caption, &labels, rng::derive(cli.seed, &[j as u64]), None)?;
            println!("{}", json!({ "text": p.text, "provenance": p.provenance }));
        }
        return Ok(());
    }
    let (Some(records_path), Some(out)) = (&a.records, &a.out) else {
        return Err(Error::Usage("--records needs --out".into()));
    };
    let records = read_records(records_path)?;
    let mut lines = String::new();
    let mut ok = 0usize;
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    for (ri, rec) in records.iter().enumerate() {
        for (ci, caption) in rec.captions.iter().enumerate() {
            let spans = rec.entity_spans.as_ref().map(|s| s[ci].as_slice());
            for j in 0..a.count {
                let seed = rng::derive(cli.seed, &[ri as u64, ci as u64, j as u64]);
                match perturber.perturb(caption, &rec.labels, seed, spans) {
                    Ok(p) => {
                        ok += 1;
                        lines.push_str(&serde_json::to_string(&json!({
                            "image_id": rec.image_id,
                            "caption_index": ci,
                            "text": p.text,
                            "provenance": p.provenance,
                        })).expect("serializable"));
                        lines.push('\n');
                    }
                    Err(e) => {
                        let kind = match e {
                            Error::NoReplaceableSpan(_) => "no_replaceable_span",
                            Error::EmptyReplacementPool => "empty_replacement_pool",
                            _ => return Err(e),
                        };
                        *failures.entry(kind.into()).or_default() += 1;
                    }
                }
            }
        }
    }
    let mut config = RunConfig::new("perturb", cli);
    config.param("count", a.count);
    config.input("lexicon", &a.lexicon)?.input("records", records_path)?;
    let report = json!({ "perturbed": ok, "failed": failures });
    let mut text = format!("perturbed {ok}\n");
    for (k, v) in &failures {
        text.push_str(&format!("{k} {v}\n"));
    }
    let mut o = Outputs::new(out);
    o.add("report.json", pretty(&report))
        .add("report.txt", text)
        .add("perturbed.jsonl", lines);
    o.write(&config)
}

fn cmd_freq(cli: &Cli, a: &FreqArgs) -> Result<()> {
    let (h, warnings) = Hierarchy::load(&a.hierarchy, None)?;
    warnings.iter().for_each(|w| log::warn!("{w}"));
    let mut config = RunConfig::new("freq", cli);
    config.param("literal_freq_gap", a.literal_freq_gap);
    config.input("hierarchy", &a.hierarchy)?;

    let counts = match (&a.counts, &a.shards, &a.lexicon, &a.retrieved) {
        (Some(c), _, _, _) => {
            config.input("counts", c)?;
            ClassCounts::load(c)?
        }
        (None, Some(s), Some(l), Some(r)) => {
            config.input("shards", s)?.input("lexicon", l)?.input("retrieved", r)?;
            let lexicon = Lexicon::load(l)?;
            let shards = load_shard_manifest(s)?;
            for shard in &shards {
                config.input(&format!("shard:{}", shard.path.display()), &shard.path)?;
            }
            let mentions = count_shard_files(&shards, &lexicon)?.by_label(&lexicon);
            let retrieved = parse_retrieved(&read_text(r)?, &r.display().to_string())?;
            let leaves = ClassCounts::leaves(&h, &retrieved, &mentions)?;
            ancestor_aggregate(&h, &leaves, &mentions)?
        }
        _ => return Err(Error::Usage("give --counts, or --shards with --lexicon and --retrieved".into())),
    };

    let frequencies = class_frequency(&h, &counts)?;
    let levels = level_frequency(&h, &counts);
    let mut gap = frequency_gap(&h, &counts, a.literal_freq_gap)?;
    let correlation = match &a.deltas {
        Some(d) => {
            config.input("deltas", d)?;
            let source = d.display().to_string();
            let deltas = parse_pairs(&read_text(d)?, &source)?
                .into_iter()
                .map(|(c, v)| {
                    let v: f64 = v.trim().parse().map_err(|_| Error::parse(&source, 0, format!("bad delta `{v}`")))?;
                    Ok((LabelId::new(c), v))
                })
                .collect::<Result<HashMap<_, _>>>()?;
            // A degenerate pairing is reported, not fatal: the gaps are
            // still meaningful on their own.
            Some(correlate_gap_vs_delta(&mut gap, &deltas).map_err(|e| e.to_string()))
        }
        None => None,
    };

    let mut text = String::from("level  classes  mean own-name frequency\n");
    for l in &levels {
        text.push_str(&format!("{:>5}  {:>7}  {:.4}\n", l.level, l.classes, l.mean_q));
    }
    let positive = gap.entries.iter().filter(|e| e.delta_freq > 0.0).count();
    text.push_str(&format!(
        "\nancestors with a gap {}  positive {}  undefined {}\n",
        gap.entries.len(),
        positive,
        gap.undefined.len()
    ));
    match &correlation {
        Some(Ok(c)) => text.push_str(&format!(
            "gap vs delta: rho {:.4}  p {:.4e}  n {}\n",
            c.spearman.rho, c.spearman.p_value, c.spearman.n
        )),
        Some(Err(e)) => text.push_str(&format!("gap vs delta: undefined ({e})\n")),
        None => {}
    }
    let levels_csv: String = std::iter::once("level,classes,mean_q\n".to_string())
        .chain(levels.iter().map(|l| format!("{},{},{}\n", l.level, l.classes, l.mean_q)))
        .collect();
    let report = json!({
        "frequencies": frequencies,
        "levels": levels,
        "gap": gap,
        "correlation": match &correlation {
            Some(Ok(c)) => json!(c),
            Some(Err(e)) => json!({ "error": e }),
            None => Value::Null,
        },
    });
    let mut o = Outputs::new(&a.out);
    o.add("report.json", pretty(&report))
        .add("report.txt", text)
        .add("counts.tsv", counts.to_file())
        .add("level_frequency.csv", levels_csv);
    if correlation.is_some() {
        o.add("scatter.csv", scatter_csv(&gap));
    }
    o.write(&config)
}

fn cmd_synth(cli: &Cli, s: &SynthCommand) -> Result<()> {
    match *s {
        SynthCommand::TwoLevel {
            n_cg,
            fg_per_cg,
            images_per_fg,
            dim,
            epsilon,
            sigma,
            ref out,
        } => {
            let spec = WorldSpec {
                n_cg,
                fg_per_cg,
                images_per_fg,
                dim,
                epsilon,
                sigma,
                seed: cli.seed,
            };
            make_world(&spec)?.write_dir(out)?;
            let mut config = RunConfig::new("synth two-level", cli);
            config.param("spec", &spec);
            Outputs::new(out).write(&config)
        }
        SynthCommand::Retrieval {
            n_labels,
            n_images,
            labels_per_image,
            dim,
            w_single,
            w_multi,
            w_caption,
            sigma,
            k,
            ref out,
        } => {
            let spec = RetrievalSpec {
                n_labels,
                n_images,
                labels_per_image,
                dim,
                weights: synth::InformativenessWeights {
                    single: w_single,
                    multi: w_multi,
                    caption: w_caption,
                },
                sigma,
                seed: cli.seed,
                k,
                grid_seed: cli.seed,
                ..Default::default()
            };
            make_retrieval_world(&spec)?.write_dir(out)?;
            let mut config = RunConfig::new("synth retrieval", cli);
            config.param("spec", &spec);
            Outputs::new(out).write(&config)
        }
        SynthCommand::Freq {
            n_cg,
            fg_per_cg,
            per_leaf,
            ratio,
            shards,
            ref out,
        } => {
            let spec = WorldSpec {
                n_cg,
                fg_per_cg,
                dim: n_cg * fg_per_cg,
                images_per_fg: 1,
                seed: cli.seed,
                ..Default::default()
            };
            let world = make_world(&spec)?;
            make_freq_corpus(&world.hierarchy, per_leaf, ratio, cli.seed).write_dir(out, &world.hierarchy, shards)?;
            let mut config = RunConfig::new("synth freq", cli);
            config
                .param("n_cg", n_cg)
                .param("fg_per_cg", fg_per_cg)
                .param("per_leaf", per_leaf)
                .param("ratio", ratio)
                .param("shards", shards);
            Outputs::new(out).write(&config)
        }
    }
}

fn cmd_score(cli: &Cli, a: &ScoreArgs) -> Result<()> {
    let scores: ScoreMatrix = cosine_scores(&read_matrix(&a.images)?, &read_matrix(&a.texts)?)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_scores(&scores, &a.out.join("scores.vleb"))?;
    let mut config = RunConfig::new("score", cli);
    config.input("images", &a.images)?.input("texts", &a.texts)?;
    let report = json!({ "images": scores.n_images(), "texts": scores.n_texts() });
    let mut o = Outputs::new(&a.out);
    o.add("report.json", pretty(&report)).add(
        "report.txt",
        format!("images {}\ntexts  {}\n", scores.n_images(), scores.n_texts()),
    );
    o.write(&config)
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["zsprobe", "no-such-command"]), 1);
        assert_eq!(main_with_args(["zsprobe", "score"]), 1);
    }

    #[test]
    fn data_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let edges = dir.path().join("e.tsv");
        fs::write(&edges, "a\tb\nb\ta\n").unwrap();
        assert_eq!(
            main_with_args(["zsprobe", "hierarchy", "validate", "--edges", edges.to_str().unwrap()]),
            2
        );
    }
}
