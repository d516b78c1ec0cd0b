//! Label hierarchies: a rooted DAG of label nodes (WordNet-style, multiple
//! parents allowed) and the flat two-level coarse/fine mapping.
//!
//! A [`Hierarchy`] is immutable once built. Levels and leaf-descendant sets
//! are computed eagerly at construction so every query is a lookup.

use std::borrow::Borrow;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque label identifier (e.g. a WordNet synset id such as `n02128385`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(String);

impl LabelId {
    pub fn new(id: impl Into<String>) -> Self {
        LabelId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Borrow<str> for LabelId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LabelId {
    fn from(s: &str) -> Self {
        LabelId(s.to_string())
    }
}

impl From<String> for LabelId {
    fn from(s: String) -> Self {
        LabelId(s)
    }
}

/// Non-fatal findings raised while loading hierarchy inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HierarchyWarning {
    DuplicateEdge { child: String, parent: String },
    EmptyCgClass(String),
}

impl fmt::Display for HierarchyWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HierarchyWarning::DuplicateEdge { child, parent } => {
                write!(f, "duplicate edge {child} -> {parent} ignored")
            }
            HierarchyWarning::EmptyCgClass(cg) => write!(f, "coarse class {cg} has no children"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    ids: Vec<LabelId>,
    index: HashMap<LabelId, usize>,
    names: Vec<String>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    /// Deduplicated edges `(child, parent)` in input order.
    edges: Vec<(usize, usize)>,
    roots: Vec<usize>,
    /// Every node after all of its parents.
    topo: Vec<usize>,
    levels: Vec<usize>,
    /// Sorted node indices of the leaves below each node.
    leaf_sets: Vec<Vec<usize>>,
}

impl Hierarchy {
    /// Builds and validates a hierarchy from `(child, parent)` edges.
    ///
    /// Node order is first appearance in the edge list (child before parent
    /// within an edge). Ids without a name entry are named by their id.
    pub fn build<S: AsRef<str>>(
        edges: &[(S, S)],
        names: &[(S, S)],
    ) -> Result<(Hierarchy, Vec<HierarchyWarning>)> {
        if edges.is_empty() {
            return Err(Error::EmptyEdges);
        }
        let mut ids: Vec<LabelId> = Vec::new();
        let mut index: HashMap<LabelId, usize> = HashMap::new();
        let mut intern = |id: &str| -> usize {
            if let Some(&i) = index.get(id) {
                return i;
            }
            let i = ids.len();
            ids.push(LabelId::new(id));
            index.insert(LabelId::new(id), i);
            i
        };

        let mut seen = HashSet::new();
        let mut edge_list = Vec::with_capacity(edges.len());
        let mut warnings = Vec::new();
        for (child, parent) in edges {
            let (child, parent) = (child.as_ref(), parent.as_ref());
            if child.is_empty() || parent.is_empty() {
                return Err(Error::UnknownLabel(String::new()));
            }
            let c = intern(child);
            let p = intern(parent);
            if c == p {
                return Err(Error::CycleDetected(vec![child.to_string(), child.to_string()]));
            }
            if seen.insert((c, p)) {
                edge_list.push((c, p));
            } else {
                log::warn!("duplicate edge {child} -> {parent} ignored");
                warnings.push(HierarchyWarning::DuplicateEdge {
                    child: child.to_string(),
                    parent: parent.to_string(),
                });
            }
        }

        let n = ids.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for &(c, p) in &edge_list {
            parents[c].push(p);
            children[p].push(c);
        }

        let mut node_names: Vec<String> = ids.iter().map(|id| id.0.clone()).collect();
        for (id, name) in names {
            let i = *index
                .get(id.as_ref())
                .ok_or_else(|| Error::UnknownLabel(id.as_ref().to_string()))?;
            node_names[i] = name.as_ref().to_string();
        }

        let topo = topological_order(&parents, &children)
            .map_err(|cycle| Error::CycleDetected(cycle.iter().map(|&i| ids[i].0.clone()).collect()))?;

        let roots: Vec<usize> = (0..n).filter(|&i| parents[i].is_empty()).collect();

        let mut levels = vec![0usize; n];
        for &v in &topo {
            levels[v] = parents[v].iter().map(|&p| levels[p] + 1).max().unwrap_or(0);
        }

        let mut leaf_sets: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &v in topo.iter().rev() {
            if children[v].is_empty() {
                leaf_sets[v] = vec![v];
            } else {
                let mut acc: Vec<usize> = Vec::new();
                for &c in &children[v] {
                    acc = merge_sorted(&acc, &leaf_sets[c]);
                }
                leaf_sets[v] = acc;
            }
        }

        Ok((
            Hierarchy {
                ids,
                index,
                names: node_names,
                parents,
                children,
                edges: edge_list,
                roots,
                topo,
                levels,
                leaf_sets,
            },
            warnings,
        ))
    }

    /// Loads an edge file and an optional names file.
    pub fn load(edges: &Path, names: Option<&Path>) -> Result<(Hierarchy, Vec<HierarchyWarning>)> {
        let edge_pairs = parse_pairs(&read_text(edges)?, &edges.display().to_string())?;
        let name_pairs = match names {
            Some(p) => parse_pairs(&read_text(p)?, &p.display().to_string())?,
            None => Vec::new(),
        };
        Hierarchy::build(&edge_pairs, &name_pairs)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[LabelId] {
        &self.ids
    }

    pub fn id(&self, node: usize) -> &LabelId {
        &self.ids[node]
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn name(&self, node: usize) -> &str {
        &self.names[node]
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.children[node].is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.is_leaf(i))
    }

    /// Nodes ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    /// Sorted indices of all leaves reachable downward from `node`.
    pub fn leaf_descendants_of(&self, node: usize) -> &[usize] {
        &self.leaf_sets[node]
    }

    pub fn leaf_descendants(&self, id: &str) -> Result<Vec<&LabelId>> {
        let node = self.index_of(id)?;
        Ok(self.leaf_sets[node].iter().map(|&i| &self.ids[i]).collect())
    }

    /// Longest parent path from any root; roots sit at level 0.
    pub fn level_of(&self, id: &str) -> Result<usize> {
        Ok(self.levels[self.index_of(id)?])
    }

    pub fn level(&self, node: usize) -> usize {
        self.levels[node]
    }

    pub fn max_level(&self) -> usize {
        self.levels.iter().copied().max().unwrap_or(0)
    }

    /// All strict ancestors of `node`, sorted by index.
    pub fn ancestors_of(&self, node: usize) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        let mut stack: Vec<usize> = self.parents[node].clone();
        let mut out = Vec::new();
        while let Some(v) = stack.pop() {
            if !seen[v] {
                seen[v] = true;
                out.push(v);
                stack.extend_from_slice(&self.parents[v]);
            }
        }
        out.sort_unstable();
        out
    }

    pub fn edges(&self) -> impl Iterator<Item = (&LabelId, &LabelId)> + '_ {
        self.edges.iter().map(|&(c, p)| (&self.ids[c], &self.ids[p]))
    }

    /// Edge file contents (`child<TAB>parent`), in the order edges were built.
    pub fn to_edge_file(&self) -> String {
        let mut out = String::new();
        for (c, p) in self.edges() {
            out.push_str(c.as_str());
            out.push('\t');
            out.push_str(p.as_str());
            out.push('\n');
        }
        out
    }

    pub fn to_names_file(&self) -> String {
        let mut out = String::new();
        for (id, name) in self.ids.iter().zip(&self.names) {
            out.push_str(id.as_str());
            out.push('\t');
            out.push_str(name);
            out.push('\n');
        }
        out
    }
}

fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Kahn's algorithm from the roots down. On failure returns one cycle as a
/// closed node path `[a, b, ..., a]`.
fn topological_order(
    parents: &[Vec<usize>],
    children: &[Vec<usize>],
) -> std::result::Result<Vec<usize>, Vec<usize>> {
    let n = parents.len();
    let mut pending: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut queue: std::collections::VecDeque<usize> =
        (0..n).filter(|&i| pending[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &c in &children[v] {
            pending[c] -= 1;
            if pending[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }

    // Every unprocessed node has an unprocessed parent; walk parents until a
    // node repeats.
    let start = (0..n).find(|&i| pending[i] > 0).expect("unprocessed node");
    let mut pos: HashMap<usize, usize> = HashMap::new();
    let mut path = Vec::new();
    let mut v = start;
    loop {
        if let Some(&at) = pos.get(&v) {
            let mut cycle: Vec<usize> = path[at..].to_vec();
            // Walked child -> parent; report parent -> child order.
            cycle.reverse();
            cycle.push(cycle[0]);
            return Err(cycle);
        }
        pos.insert(v, path.len());
        path.push(v);
        v = *parents[v]
            .iter()
            .find(|&&p| pending[p] > 0)
            .expect("unprocessed parent");
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses `a<TAB>b` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(source, lineno + 1, "expected two tab-separated fields"))?;
        if a.is_empty() || b.is_empty() {
            return Err(Error::parse(source, lineno + 1, "empty field"));
        }
        out.push((a.to_string(), b.to_string()));
    }
    Ok(out)
}

/// Coarse-grained classes, each with its ordered fine-grained children.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TwoLevelMap {
    cg_classes: Vec<LabelId>,
    fg_children: Vec<Vec<LabelId>>,
    fg_order: Vec<LabelId>,
    fg_parent: HashMap<LabelId, usize>,
}

impl TwoLevelMap {
    /// Builds a map from `(cg, Some(fg))` assignments or bare `(cg, None)`
    /// declarations, keeping first-appearance order for both levels.
    pub fn from_assignments<S: AsRef<str>>(
        rows: &[(S, Option<S>)],
    ) -> Result<(TwoLevelMap, Vec<HierarchyWarning>)> {
        let mut cg_classes: Vec<LabelId> = Vec::new();
        let mut cg_index: HashMap<LabelId, usize> = HashMap::new();
        let mut fg_children: Vec<Vec<LabelId>> = Vec::new();
        let mut fg_order = Vec::new();
        let mut fg_parent: HashMap<LabelId, usize> = HashMap::new();
        let mut warnings = Vec::new();

        for (cg, fg) in rows {
            let cg = cg.as_ref();
            let ci = *cg_index.entry(LabelId::new(cg)).or_insert_with(|| {
                cg_classes.push(LabelId::new(cg));
                fg_children.push(Vec::new());
                cg_classes.len() - 1
            });
            let Some(fg) = fg else { continue };
            let fg = fg.as_ref();
            match fg_parent.get(fg) {
                Some(&prev) if prev == ci => warnings.push(HierarchyWarning::DuplicateEdge {
                    child: fg.to_string(),
                    parent: cg.to_string(),
                }),
                Some(&prev) => {
                    return Err(Error::DuplicateFgAssignment {
                        fg: fg.to_string(),
                        first: cg_classes[prev].0.clone(),
                        second: cg.to_string(),
                    })
                }
                None => {
                    fg_parent.insert(LabelId::new(fg), ci);
                    fg_children[ci].push(LabelId::new(fg));
                    fg_order.push(LabelId::new(fg));
                }
            }
        }
        for (cg, kids) in cg_classes.iter().zip(&fg_children) {
            if kids.is_empty() {
                log::warn!("coarse class {cg} has no children");
                warnings.push(HierarchyWarning::EmptyCgClass(cg.0.clone()));
            }
        }
        Ok((
            TwoLevelMap {
                cg_classes,
                fg_children,
                fg_order,
                fg_parent,
            },
            warnings,
        ))
    }

    /// Parses a `cg<TAB>fg` map file. A line holding only a cg id declares
    /// that class without children.
    pub fn parse(text: &str, source: &str) -> Result<(TwoLevelMap, Vec<HierarchyWarning>)> {
        let mut rows: Vec<(String, Option<String>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let cg = fields.next().unwrap_or_default();
            let fg = fields.next().filter(|s| !s.is_empty());
            if cg.is_empty() || fields.next().is_some() {
                return Err(Error::parse(source, lineno + 1, "expected `cg<TAB>fg`"));
            }
            rows.push((cg.to_string(), fg.map(str::to_string)));
        }
        TwoLevelMap::from_assignments(&rows)
    }

    pub fn load(path: &Path) -> Result<(TwoLevelMap, Vec<HierarchyWarning>)> {
        TwoLevelMap::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn cg_classes(&self) -> &[LabelId] {
        &self.cg_classes
    }

    pub fn fg_children(&self, cg: usize) -> &[LabelId] {
        &self.fg_children[cg]
    }

    /// Fine-grained classes in file order.
    pub fn fg_classes(&self) -> &[LabelId] {
        &self.fg_order
    }

    pub fn parent_index(&self, fg: &str) -> Option<usize> {
        self.fg_parent.get(fg).copied()
    }

    pub fn parent_of(&self, fg: &str) -> Option<&LabelId> {
        self.parent_index(fg).map(|i| &self.cg_classes[i])
    }

    pub fn to_file(&self) -> String {
        let mut out = String::new();
        for (cg, kids) in self.cg_classes.iter().zip(&self.fg_children) {
            if kids.is_empty() {
                out.push_str(&format!("{cg}\n"));
            }
            for fg in kids {
                out.push_str(&format!("{cg}\t{fg}\n"));
            }
        }
        out
    }

    /// The map as a two-level hierarchy (fg -> cg edges).
    pub fn to_hierarchy(&self, names: &[(String, String)]) -> Result<Hierarchy> {
        let edges: Vec<(String, String)> = self
            .fg_order
            .iter()
            .map(|fg| (fg.0.clone(), self.parent_of(fg.as_str()).unwrap().0.clone()))
            .collect();
        let names: Vec<(String, String)> = names
            .iter()
            .filter(|(id, _)| {
                self.fg_parent.contains_key(id.as_str())
                    || self.cg_classes.iter().any(|c| c.as_str() == id)
            })
            .cloned()
            .collect();
        Hierarchy::build(&edges, &names).map(|(h, _)| h)
    }
}
