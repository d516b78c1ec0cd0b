//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Set `ZSPROBE_BLESS=1` to rewrite the granularity golden file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use itertools::Itertools;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zsprobe_core::experiments::{evaluate_two_level, fg_gold};
use zsprobe_core::freq::{ancestor_aggregate, count_mentions, count_shard_files, frequency_gap, load_shard_manifest, ClassCounts};
use zsprobe_core::hierarchy::{Hierarchy, LabelId};
use zsprobe_core::lexicon::Lexicon;
use zsprobe_core::metrics::{average_precision, spearman};
use zsprobe_core::retrieval::{run_grid, EmbeddingScorer, NegativeMode, PositiveMode, Perturber, TextKind, TextScorer};
use zsprobe_core::scoring::{propagate_scores, Strategy};
use zsprobe_core::synth::{make_freq_corpus, make_retrieval_world, make_world, RetrievalSpec, WorldSpec};
use zsprobe_core::tensor_store::{read_matrix, read_scores, score_sidecar, write_matrix, write_scores, EmbeddingMatrix, ScoreMatrix};

type Check = Result<String, String>;

fn within(start: Instant, limit: Duration, detail: String) -> Check {
    let took = start.elapsed();
    if took > limit {
        Err(format!("{detail}; took {took:.2?} > {limit:?}"))
    } else {
        Ok(format!("{detail}; {took:.2?}"))
    }
}

// ---------------------------------------------------------------- AP

/// AP from its definition: rank_i = 1 + #{j ranked above i}, where j is
/// above i if it scores higher, or equal with a smaller index.
fn ap_oracle(scores: &[f64], rel: &[bool]) -> f64 {
    let n = scores.len();
    let rank = |i: usize| 1 + (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let positives: Vec<usize> = (0..n).filter(|&i| rel[i]).collect();
    let sum: f64 = positives
        .iter()
        .map(|&i| {
            let k = rank(i);
            let hits = positives.iter().filter(|&&j| rank(j) <= k).count();
            hits as f64 / k as f64
        })
        .sum();
    sum / positives.len() as f64
}

fn ap_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    let mut worst = 0.0f64;
    for n in 1..=8usize {
        for pattern in 1u32..(1 << n) {
            let rel: Vec<bool> = (0..n).map(|i| pattern >> i & 1 == 1).collect();
            for draw in 0..3 {
                let scores: Vec<f64> = (0..n)
                    .map(|_| {
                        let x: f64 = rng.random();
                        // the last draw is coarse so ties occur
                        if draw == 2 { (x * 4.0).floor() / 4.0 } else { x }
                    })
                    .collect();
                let got = average_precision(&scores, &rel).map_err(|e| e.to_string())?;
                let want = ap_oracle(&scores, &rel);
                worst = worst.max((got - want).abs());
                if (got - want).abs() > 1e-12 {
                    return Err(format!("n={n} rel={rel:?} scores={scores:?}: {got} vs {want}"));
                }
                cases += 1;
            }
        }
    }
    within(start, Duration::from_secs(10), format!("{cases} cases, max |diff| {worst:e}"))
}

// ---------------------------------------------------------------- propagation

fn random_dag(rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<(String, String)>) {
    let n = rng.random_range(2..=20usize);
    let names: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let mut edges = Vec::new();
    for child in 1..n {
        let k = rng.random_range(1..=3usize.min(child));
        let mut parents: Vec<usize> = (0..child).collect();
        parents.shuffle(rng);
        for &p in &parents[..k] {
            edges.push((names[child].clone(), names[p].clone()));
        }
    }
    (names, edges)
}

fn propagation_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut values = 0usize;
    for dag in 0..200 {
        let (nodes, edges) = random_dag(&mut rng);
        let (h, _) = Hierarchy::build(&edges, &[] as &[(String, String)]).map_err(|e| e.to_string())?;
        let children: HashMap<&str, Vec<&str>> = nodes
            .iter()
            .map(|v| (v.as_str(), edges.iter().filter(|(_, p)| p == v).map(|(c, _)| c.as_str()).collect()))
            .collect();
        let mut leaf_desc: HashMap<&str, HashSet<&str>> = HashMap::new();
        for v in &nodes {
            let mut stack = vec![v.as_str()];
            let mut seen = HashSet::new();
            let mut leaves = HashSet::new();
            while let Some(u) = stack.pop() {
                if !seen.insert(u) {
                    continue;
                }
                if children[u].is_empty() {
                    leaves.insert(u);
                }
                stack.extend(&children[u]);
            }
            leaf_desc.insert(v, leaves);
        }

        let mut names = nodes.clone();
        names.shuffle(&mut rng);
        let n_img = 3;
        let data: Vec<f32> = (0..n_img * names.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let keys = (0..n_img).map(|i| format!("img{i}")).collect();
        let s = ScoreMatrix::new(keys, names.clone(), data).map_err(|e| e.to_string())?;
        let leaf = propagate_scores(&s, &h, Strategy::Leaf).map_err(|e| e.to_string())?;
        let leaf_self = propagate_scores(&s, &h, Strategy::LeafSelf).map_err(|e| e.to_string())?;
        let col: HashMap<&str, usize> = names.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
        for img in 0..n_img {
            for (c, v) in names.iter().enumerate() {
                let brute = leaf_desc[v.as_str()]
                    .iter()
                    .map(|l| s.get(img, col[l]))
                    .fold(f32::NEG_INFINITY, f32::max);
                if leaf.get(img, c) != brute {
                    return Err(format!("dag {dag}, {v}: leaf {} vs brute force {brute}", leaf.get(img, c)));
                }
                let floor = s.get(img, c).max(leaf.get(img, c));
                if leaf_self.get(img, c) < floor {
                    return Err(format!("dag {dag}, {v}: leaf_self {} < {floor}", leaf_self.get(img, c)));
                }
                values += 1;
            }
        }
    }
    within(start, Duration::from_secs(10), format!("200 DAGs, {values} values"))
}

// ---------------------------------------------------------------- granularity

const EPSILONS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/granularity.json")
}

fn granularity_bias() -> Check {
    let start = Instant::now();
    let mut reports = BTreeMap::new();
    let mut deltas = Vec::new();
    for &epsilon in &EPSILONS {
        let spec = WorldSpec {
            n_cg: 4,
            fg_per_cg: 4,
            images_per_fg: 50,
            dim: 64,
            epsilon,
            sigma: 0.3,
            seed: 7,
        };
        let w = make_world(&spec).map_err(|e| e.to_string())?;
        let gold = fg_gold(&w.records, &w.map).map_err(|e| e.to_string())?;
        let r = evaluate_two_level(&w.images, &w.fg_table, &w.cg_table, &w.map, &gold, true).map_err(|e| e.to_string())?;
        deltas.push(r.cg_fg_label.delta);
        reports.insert(format!("{epsilon}"), r);
    }
    let text = serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n";
    let path = golden_path();
    if std::env::var_os("ZSPROBE_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        fs::write(&path, &text).map_err(|e| e.to_string())?;
    }
    if deltas[0] != 0.0 {
        return Err(format!("delta at epsilon 0 is {}, not 0", deltas[0]));
    }
    if !deltas.windows(2).all(|w| w[0] < w[1]) {
        return Err(format!("deltas not strictly increasing: {deltas:?}"));
    }
    let golden = fs::read_to_string(&path).map_err(|e| format!("golden {}: {e}", path.display()))?;
    if golden != text {
        return Err("reports differ from the committed golden file".into());
    }
    within(start, Duration::from_secs(60), format!("deltas {deltas:?} match golden"))
}

// ---------------------------------------------------------------- informativeness

fn informativeness_bias() -> Check {
    let start = Instant::now();
    let spec = RetrievalSpec::default();
    let w = make_retrieval_world(&spec).map_err(|e| e.to_string())?;
    let tasks = w.tasks();
    let texts = w.embed_tasks(&tasks).map_err(|e| e.to_string())?;
    let scorer = EmbeddingScorer { images: &w.images, texts: &texts };
    let run = run_grid(&tasks, &scorer, spec.k, spec.grid_seed).map_err(|e| e.to_string())?;

    let mut by_kind: HashMap<TextKind, Vec<f64>> = HashMap::new();
    for t in &tasks {
        for mode in PositiveMode::ALL {
            for item in t.positives(mode).unwrap_or(&[]) {
                let s = scorer.score(&t.image_id, item).map_err(|e| e.to_string())?;
                by_kind.entry(item.kind).or_default().push(s);
            }
        }
    }
    let range = |k: TextKind| {
        let v = &by_kind[&k];
        (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    };
    let med = |k: TextKind| run.report.histogram(k).median.unwrap_or(f64::NAN);
    let (ms, mm, mc) = (med(TextKind::PromptSingle), med(TextKind::PromptMulti), med(TextKind::CapPos));
    if !(ms < mm && mm < mc) {
        return Err(format!("medians not ordered: {ms} {mm} {mc}"));
    }
    let (s, m, c) = (range(TextKind::PromptSingle), range(TextKind::PromptMulti), range(TextKind::CapPos));
    if !(s.1 < m.0 && m.1 < c.0) {
        return Err(format!("score ranges overlap: {s:?} {m:?} {c:?}"));
    }
    let low = run.report.cell(PositiveMode::PromptSingle, NegativeMode::Error).map;
    let high = run.report.cell(PositiveMode::Captions, NegativeMode::Random).map;
    match (low, high) {
        (Some(l), Some(h)) if l < h => within(
            start,
            Duration::from_secs(60),
            format!("medians {ms:.4} < {mm:.4} < {mc:.4}, no overlap; mAP Prompt+s|Cap-er {l:.4} < Cap+|Cap-rd {h:.4}"),
        ),
        _ => Err(format!("corner cells not ordered: {low:?} vs {high:?}")),
    }
}

// ---------------------------------------------------------------- perturbation

fn perturbation_contract() -> Check {
    let lexicon = Lexicon::from_pairs(&[
        ("dog", "dog"),
        ("dog", "puppy"),
        ("cat", "cat"),
        ("cat", "kitten"),
        ("person", "person"),
        ("person", "man"),
        ("person", "woman"),
        ("hot_dog", "hot dog"),
        ("ball", "ball"),
        ("frisbee", "frisbee"),
        ("car", "car"),
        ("car", "sports car"),
        ("bench", "park bench"),
        ("tree", "tree"),
    ]);
    let words = [
        ("dog", ["dog", "Puppy"]),
        ("cat", ["cat", "kitten"]),
        ("person", ["man", "Woman"]),
        ("hot_dog", ["hot dog", "Hot Dog"]),
        ("ball", ["ball", "ball"]),
        ("frisbee", ["frisbee", "Frisbee"]),
        ("car", ["sports car", "car"]),
        ("bench", ["park bench", "park bench"]),
        ("tree", ["tree", "tree"]),
    ];
    let frames = [
        "A {} chasing a {} near the {}.",
        "{} and {} sitting by a {}",
        "the {}, the {} and one {} - in the sun",
        "Photo: {} next to {}; {} behind.",
    ];
    let perturber = Perturber::new(&lexicon);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut done = 0;
    let mut violations = Vec::new();
    while done < 1000 {
        let picks: Vec<usize> = (0..words.len()).collect::<Vec<_>>().choose_multiple(&mut rng, 3).copied().collect();
        let frame = frames[rng.random_range(0..frames.len())];
        let mut caption = frame.to_string();
        for &p in &picks {
            let w = words[p].1[rng.random_range(0..2)];
            caption = caption.replacen("{}", w, 1);
        }
        let labels: Vec<LabelId> = picks.iter().map(|&p| LabelId::new(words[p].0)).collect();
        let seed: u64 = rng.random();
        let out = perturber.perturb(&caption, &labels, seed, None).map_err(|e| e.to_string())?;
        let p = &out.provenance;
        let end_new = p.start + p.replacement.len();
        let one_span = out.text.len() >= end_new
            && out.text.get(..p.start) == caption.get(..p.start)
            && out.text.get(p.start..end_new) == Some(p.replacement.as_str())
            && out.text.get(end_new..) == caption.get(p.end..)
            && caption.get(p.start..p.end) == Some(p.original.as_str())
            && p.original.to_lowercase() != p.replacement.to_lowercase();
        if !one_span {
            violations.push(format!("span: {caption:?} -> {:?}", out.text));
        }
        if labels.contains(&p.replacement_label) {
            violations.push(format!("replacement label {} is on the image", p.replacement_label));
        }
        if p.revert(&out.text) != caption {
            violations.push(format!("revert: {:?} != {caption:?}", p.revert(&out.text)));
        }
        done += 1;
    }
    if violations.is_empty() {
        Ok(format!("{done} perturbations, 0 violations"))
    } else {
        Err(format!("{} violations, first: {}", violations.len(), violations[0]))
    }
}

// ---------------------------------------------------------------- spearman

fn ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Exact two-sided permutation p-value over all orderings of y's ranks.
fn permutation_p(x: &[f64], y: &[f64]) -> (f64, f64) {
    let rx = ranks(x);
    let ry = ranks(y);
    let rho = pearson(&rx, &ry);
    let mut total = 0usize;
    let mut extreme = 0usize;
    for perm in ry.iter().copied().permutations(ry.len()) {
        total += 1;
        if pearson(&rx, &perm).abs() >= rho.abs() - 1e-9 {
            extreme += 1;
        }
    }
    (rho, extreme as f64 / total as f64)
}

fn spearman_calibration() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 3..=7usize {
        for trial in 0..40 {
            let coarse = trial % 4 == 0;
            let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..n)
                    .map(|_| {
                        let v: f64 = rng.random();
                        if coarse { (v * 3.0).floor() } else { v }
                    })
                    .collect()
            };
            let x = draw(&mut rng);
            let y = draw(&mut rng);
            if ranks(&x).iter().all_equal() || ranks(&y).iter().all_equal() {
                continue;
            }
            let s = spearman(&x, &y).map_err(|e| e.to_string())?;
            let (rho, p) = permutation_p(&x, &y);
            if (s.rho - rho).abs() > 1e-12 {
                return Err(format!("rho {} vs oracle {rho} on {x:?} {y:?}", s.rho));
            }
            worst = worst.max((s.p_value - p).abs());
            if (s.p_value - p).abs() > 0.05 {
                return Err(format!("p {} vs oracle {p} on {x:?} {y:?}", s.p_value));
            }
            cases += 1;
        }
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let up: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let down: Vec<f64> = x.iter().map(|v| -3.0 * v).collect();
        let r_up = spearman(&x, &up).map_err(|e| e.to_string())?.rho;
        let r_down = spearman(&x, &down).map_err(|e| e.to_string())?.rho;
        if r_up != 1.0 || r_down != -1.0 {
            return Err(format!("monotone n={n}: rho {r_up}, {r_down}"));
        }
    }
    Ok(format!("{cases} cases, max |p diff| {worst:.2e}, monotone rho exact"))
}

// ---------------------------------------------------------------- determinism

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).expect("output dir") {
        let path = entry.expect("entry").path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let mut bytes = fs::read(&path).expect("output file");
        if name == "config.json" {
            let mut v: serde_json::Value = serde_json::from_slice(&bytes).expect("config json");
            v.as_object_mut().expect("object").remove("threads");
            bytes = serde_json::to_vec(&v).expect("config json");
        }
        out.insert(name, bytes);
    }
    out
}

fn run_cli(threads: usize, args: &[String], out: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| e.to_string())?;
    }
    let status = Command::new(env!("CARGO_BIN_EXE_zsprobe"))
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    Ok(snapshot(out))
}

fn parallel_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let p = |d: &str, f: &str| root.join(d).join(f).to_string_lossy().into_owned();
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<String>>();

    let synth: Vec<(&str, &str, Vec<String>)> = vec![
        ("w", "synth two-level", s(&["--seed", "7", "synth", "two-level", "--epsilon", "1"])),
        ("r", "synth retrieval", s(&["synth", "retrieval"])),
        ("f", "synth freq", s(&["synth", "freq"])),
    ];
    let mut subcommands = Vec::new();
    for (dir, name, args) in &synth {
        let a = run_cli(1, args, &root.join(format!("{dir}_1")))?;
        let b = run_cli(8, args, &root.join(dir))?;
        if a != b {
            return Err(format!("{args:?} differs between 1 and 8 threads"));
        }
        subcommands.push(name.to_string());
    }

    let runs: Vec<(&str, Vec<String>)> = vec![
        ("hierarchy validate", vec!["hierarchy".into(), "validate".into(), "--edges".into(), p("w", "hierarchy.tsv"), "--names".into(), p("w", "names.tsv")]),
        ("two-level", vec!["two-level".into(), "--images".into(), p("w", "images.vleb"), "--fg".into(), p("w", "fg_prompts.vleb"), "--cg".into(), p("w", "cg_prompts.vleb"), "--map".into(), p("w", "map.tsv"), "--records".into(), p("w", "records.jsonl")]),
        ("multilevel", vec!["multilevel".into(), "--hierarchy".into(), p("w", "hierarchy.tsv"), "--names".into(), p("w", "names.tsv"), "--records".into(), p("w", "records.jsonl"), "--images".into(), p("w", "images.vleb"), "--texts".into(), p("w", "prompts.vleb")]),
        ("score", vec!["score".into(), "--images".into(), p("w", "images.vleb"), "--texts".into(), p("w", "prompts.vleb")]),
        ("retrieval", vec!["retrieval".into(), "--records".into(), p("r", "records.jsonl"), "--lexicon".into(), p("r", "lexicon.tsv"), "--k".into(), "20".into(), "--images".into(), p("r", "images.vleb"), "--texts".into(), p("r", "texts.vleb")]),
        ("retrieval --manifest-only", vec!["retrieval".into(), "--records".into(), p("r", "records.jsonl"), "--lexicon".into(), p("r", "lexicon.tsv"), "--manifest-only".into()]),
        ("perturb", vec!["perturb".into(), "--lexicon".into(), p("r", "lexicon.tsv"), "--records".into(), p("r", "records.jsonl")]),
        ("freq", vec!["freq".into(), "--hierarchy".into(), p("f", "hierarchy.tsv"), "--shards".into(), p("f", "shards.tsv"), "--lexicon".into(), p("f", "lexicon.tsv"), "--retrieved".into(), p("f", "retrieved.tsv")]),
    ];
    for (name, args) in &runs {
        let out = root.join("out");
        let a = run_cli(1, args, &out)?;
        let b = run_cli(8, args, &out)?;
        if a.is_empty() {
            return Err(format!("{name} wrote nothing"));
        }
        if a != b {
            let differ: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
            return Err(format!("{name}: {differ:?} differ between 1 and 8 threads"));
        }
        subcommands.push(name.to_string());
    }
    Ok(format!("byte-identical: {}", subcommands.join(", ")))
}

// ---------------------------------------------------------------- format

fn random_key(rng: &mut ChaCha8Rng) -> String {
    let alphabet: Vec<char> = "abcXYZ019_-/ é漢🙂".chars().collect();
    (0..rng.random_range(0..12)).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

fn format_round_trip() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..100 {
        let rows = rng.random_range(0..12usize);
        let dim = rng.random_range(0..9usize);
        let data: Vec<f32> = (0..rows * dim)
            .map(|_| if rng.random_bool(0.2) { f32::from_bits(rng.random()) } else { rng.random_range(-2.0..2.0) })
            .collect();
        let a = tmp.path().join(format!("m{i}.vleb"));
        let b = tmp.path().join(format!("m{i}b.vleb"));
        if i % 4 == 3 {
            let cols = (0..dim).map(|j| format!("{}{j}", random_key(&mut rng))).collect();
            let images = (0..rows).map(|r| format!("{}{r}", random_key(&mut rng))).collect();
            let s = ScoreMatrix::new(images, cols, data).map_err(|e| e.to_string())?;
            write_scores(&s, &a).map_err(|e| e.to_string())?;
            let back = read_scores(&a).map_err(|e| e.to_string())?;
            write_scores(&back, &b).map_err(|e| e.to_string())?;
            let sidecar = |p: &Path| fs::read(score_sidecar(p)).ok();
            if sidecar(&a).is_none() || sidecar(&a) != sidecar(&b) {
                return Err(format!("score matrix {i}: column sidecar differs"));
            }
        } else {
            let keys = (0..rows).map(|r| format!("{}{r}", random_key(&mut rng))).collect();
            let m = EmbeddingMatrix::new(keys, dim, data).map_err(|e| e.to_string())?;
            write_matrix(&m, &a).map_err(|e| e.to_string())?;
            let back = read_matrix(&a).map_err(|e| e.to_string())?;
            write_matrix(&back, &b).map_err(|e| e.to_string())?;
        }
        let (x, y) = (fs::read(&a).map_err(|e| e.to_string())?, fs::read(&b).map_err(|e| e.to_string())?);
        if x != y {
            return Err(format!("matrix {i} ({rows}x{dim}) not byte-identical"));
        }
    }
    Ok("100 matrices byte-identical after write -> read -> write".into())
}

// ---------------------------------------------------------------- freq

fn freq_additivity() -> Check {
    let edges = [
        ("a", "x"), ("b", "x"), ("b", "y"), ("c", "y"), ("d", "z"),
        ("x", "r"), ("y", "r"), ("z", "r"), ("e", "z"), ("f", "r"),
    ];
    let (h, _) = Hierarchy::build(&edges, &[] as &[(&str, &str)]).map_err(|e| e.to_string())?;
    let corpus = make_freq_corpus(&h, 25, 3, 11);
    let err = |e: zsprobe_core::Error| e.to_string();

    let single = count_mentions(&[corpus.captions.join("\n")], &corpus.lexicon).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cuts: Vec<usize> = (0..3).map(|_| rng.random_range(0..=corpus.captions.len())).collect();
    cuts.sort();
    let bounds: Vec<usize> = std::iter::once(0).chain(cuts).chain(std::iter::once(corpus.captions.len())).collect();
    let shards: Vec<String> = bounds.windows(2).map(|w| corpus.captions[w[0]..w[1]].join("\n")).collect();
    let merged = shards
        .iter()
        .map(|s| count_mentions(&[s], &corpus.lexicon))
        .try_fold(None::<zsprobe_core::freq::MentionCounts>, |acc, c| {
            let c = c?;
            Ok::<_, zsprobe_core::Error>(Some(match acc {
                Some(a) => a.merge(&c),
                None => c,
            }))
        })
        .map_err(err)?
        .expect("four shards");
    if merged != single {
        return Err(format!("merged {merged:?} != single {single:?}"));
    }

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    corpus.write_dir(tmp.path(), &h, 4).map_err(err)?;
    let manifest = load_shard_manifest(&tmp.path().join("shards.tsv")).map_err(err)?;
    let from_files = count_shard_files(&manifest, &corpus.lexicon).map_err(err)?;
    if manifest.len() != 4 || from_files != single {
        return Err(format!("file shards ({}) disagree with single pass", manifest.len()));
    }

    let m = single.by_label(&corpus.lexicon);
    let leaves = ClassCounts::leaves(&h, &corpus.retrieved, &m).map_err(err)?;
    let counts = ancestor_aggregate(&h, &leaves, &m).map_err(err)?;
    let gap = frequency_gap(&h, &counts, false).map_err(err)?;
    let ancestors = (0..h.len()).filter(|&i| !h.is_leaf(i)).count();
    if gap.entries.len() != ancestors || !gap.entries.iter().all(|e| e.delta_freq > 0.0) {
        return Err(format!("gaps {:?}, undefined {:?}", gap.entries, gap.undefined));
    }
    let shown = gap.entries.iter().map(|e| format!("{}={:.2}", e.class, e.delta_freq)).join(" ");
    Ok(format!("{} captions, 4-way split equals single pass; gaps {shown}", single.captions))
}

fn main() {
    let checks: [(&str, fn() -> Check); 9] = [
        ("ap_oracle_equivalence", ap_equivalence),
        ("propagation_equivalence", propagation_equivalence),
        ("planted_granularity_bias", granularity_bias),
        ("planted_informativeness_bias", informativeness_bias),
        ("perturbation_contract", perturbation_contract),
        ("spearman_calibration", spearman_calibration),
        ("determinism_under_parallelism", parallel_determinism),
        ("format_round_trip", format_round_trip),
        ("freq_shard_additivity", freq_additivity),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
