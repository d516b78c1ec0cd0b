//! Python bindings: hierarchy queries, scoring, propagation, metrics,
//! caption perturbation, matrix files and synthetic worlds.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use zsprobe_core::experiments::{evaluate_two_level, fg_gold};
use zsprobe_core::hierarchy::{Hierarchy, LabelId};
use zsprobe_core::lexicon::Lexicon;
use zsprobe_core::metrics;
use zsprobe_core::retrieval;
use zsprobe_core::scoring::{self, Strategy};
use zsprobe_core::synth::{make_world as core_make_world, WorldSpec};
use zsprobe_core::tensor_store::{self, EmbeddingMatrix, ScoreMatrix};
use zsprobe_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f32>], prefix: &str) -> PyResult<EmbeddingMatrix> {
    let keys = (0..rows.len()).map(|i| format!("{prefix}{i}")).collect();
    EmbeddingMatrix::from_rows(keys, rows).map_err(py_err)
}

fn unflatten(data: &[f32], cols: usize) -> Vec<Vec<f32>> {
    if cols == 0 {
        return Vec::new();
    }
    data.chunks(cols).map(<[f32]>::to_vec).collect()
}

/// A label DAG.
#[pyclass(name = "Hierarchy", frozen)]
struct PyHierarchy {
    inner: Hierarchy,
}

#[pymethods]
impl PyHierarchy {
    /// `edges` are `(child, parent)` pairs; `names` optional `(id, name)`.
    #[new]
    #[pyo3(signature = (edges, names = None))]
    fn new(edges: Vec<(String, String)>, names: Option<Vec<(String, String)>>) -> PyResult<Self> {
        let (inner, _) = Hierarchy::build(&edges, &names.unwrap_or_default()).map_err(py_err)?;
        Ok(PyHierarchy { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (edges_path, names_path = None))]
    fn load(edges_path: PathBuf, names_path: Option<PathBuf>) -> PyResult<Self> {
        let (inner, _) = Hierarchy::load(&edges_path, names_path.as_deref()).map_err(py_err)?;
        Ok(PyHierarchy { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids().iter().map(ToString::to_string).collect()
    }

    fn leaves(&self) -> Vec<String> {
        self.inner.leaves().map(|i| self.inner.id(i).to_string()).collect()
    }

    fn level(&self, id: &str) -> PyResult<usize> {
        self.inner.level_of(id).map_err(py_err)
    }

    fn leaf_descendants(&self, id: &str) -> PyResult<Vec<String>> {
        Ok(self
            .inner
            .leaf_descendants(id)
            .map_err(py_err)?
            .into_iter()
            .map(ToString::to_string)
            .collect())
    }

    fn parents(&self, id: &str) -> PyResult<Vec<String>> {
        let i = self.inner.index_of(id).map_err(py_err)?;
        Ok(self.inner.parents(i).iter().map(|&p| self.inner.id(p).to_string()).collect())
    }

    fn children(&self, id: &str) -> PyResult<Vec<String>> {
        let i = self.inner.index_of(id).map_err(py_err)?;
        Ok(self.inner.children(i).iter().map(|&c| self.inner.id(c).to_string()).collect())
    }

    fn to_edge_file(&self) -> String {
        self.inner.to_edge_file()
    }
}

/// Cosine similarity of every image row with every text row.
#[pyfunction]
fn cosine_scores(images: Vec<Vec<f32>>, texts: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    let s = scoring::cosine_scores(&matrix(&images, "i")?, &matrix(&texts, "t")?).map_err(py_err)?;
    Ok(unflatten(s.data(), s.n_texts()))
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, relevance: Vec<bool>) -> PyResult<f64> {
    metrics::average_precision(&scores, &relevance).map_err(py_err)
}

/// `(rho, p_value)`.
#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    let s = metrics::spearman(&x, &y).map_err(py_err)?;
    Ok((s.rho, s.p_value))
}

/// Propagates an image x class score matrix (columns named by `columns`)
/// with strategy `child`, `leaf` or `leaf_self`.
#[pyfunction]
fn propagate(
    scores: Vec<Vec<f32>>,
    columns: Vec<String>,
    hierarchy: &PyHierarchy,
    strategy: &str,
) -> PyResult<Vec<Vec<f32>>> {
    let strategy = match strategy {
        "child" => Strategy::Child,
        "leaf" => Strategy::Leaf,
        "leaf_self" => Strategy::LeafSelf,
        other => return Err(PyValueError::new_err(format!("unknown strategy `{other}`"))),
    };
    let n = scores.len();
    let data: Vec<f32> = scores.into_iter().flatten().collect();
    let cols = columns.len();
    let s = ScoreMatrix::new((0..n).map(|i| format!("i{i}")).collect(), columns, data).map_err(py_err)?;
    let out = scoring::propagate_scores(&s, &hierarchy.inner, strategy).map_err(py_err)?;
    Ok(unflatten(out.data(), cols))
}

/// Replaces one entity of `caption`; returns `(text, start, end, original,
/// replacement, replacement_label)`.
#[pyfunction]
fn perturb_caption(
    caption: &str,
    labels: Vec<String>,
    lexicon: Vec<(String, String)>,
    seed: u64,
) -> PyResult<(String, usize, usize, String, String, String)> {
    let lex = Lexicon::from_pairs(&lexicon);
    let labels: Vec<LabelId> = labels.into_iter().map(LabelId::new).collect();
    let item = retrieval::perturb_caption(caption, &labels, &lex, seed).map_err(py_err)?;
    let p = item.provenance.expect("perturbed items carry provenance");
    Ok((item.text, p.start, p.end, p.original, p.replacement, p.replacement_label.to_string()))
}

/// `(keys, rows)` of a matrix file.
#[pyfunction]
fn read_matrix(path: PathBuf) -> PyResult<(Vec<String>, Vec<Vec<f32>>)> {
    let m = tensor_store::read_matrix(&path).map_err(py_err)?;
    Ok((m.keys().to_vec(), unflatten(m.data(), m.dim())))
}

#[pyfunction]
fn write_matrix(path: PathBuf, keys: Vec<String>, rows: Vec<Vec<f32>>) -> PyResult<()> {
    let m = EmbeddingMatrix::from_rows(keys, &rows).map_err(py_err)?;
    tensor_store::write_matrix(&m, &path).map_err(py_err)
}

/// Builds a two-level synthetic world, optionally writes it to `out_dir`,
/// and returns its two-level evaluation as a JSON string.
#[pyfunction]
#[pyo3(signature = (n_cg = 4, fg_per_cg = 4, images_per_fg = 50, dim = 64, epsilon = 0.0, sigma = 0.3, seed = 7, out_dir = None))]
#[allow(clippy::too_many_arguments)]
fn make_world(
    n_cg: usize,
    fg_per_cg: usize,
    images_per_fg: usize,
    dim: usize,
    epsilon: f64,
    sigma: f64,
    seed: u64,
    out_dir: Option<PathBuf>,
) -> PyResult<String> {
    let spec = WorldSpec {
        n_cg,
        fg_per_cg,
        images_per_fg,
        dim,
        epsilon,
        sigma,
        seed,
    };
    let w = core_make_world(&spec).map_err(py_err)?;
    if let Some(dir) = out_dir {
        w.write_dir(&dir).map_err(py_err)?;
    }
    let gold = fg_gold(&w.records, &w.map).map_err(py_err)?;
    let report = evaluate_two_level(&w.images, &w.fg_table, &w.cg_table, &w.map, &gold, true).map_err(py_err)?;
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

#[pymodule]
fn zsprobe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHierarchy>()?;
    m.add_function(wrap_pyfunction!(cosine_scores, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_caption, m)?)?;
    m.add_function(wrap_pyfunction!(read_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(write_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(make_world, m)?)?;
    Ok(())
}
