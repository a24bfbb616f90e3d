//! Datasets: loading, the canonical JSON format, preprocessing and splits.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseMatrix, SparseMatrix};
use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Raw `n × F` features, stored sparse.
    pub features: SparseMatrix,
    pub labels: Vec<usize>,
    pub graph: Graph,
    pub class_names: Vec<String>,
    pub node_ids: Vec<String>,
}

impl Dataset {
    /// Validates shapes and label ranges.
    pub fn new(
        name: impl Into<String>,
        features: SparseMatrix,
        labels: Vec<usize>,
        graph: Graph,
        class_names: Vec<String>,
        node_ids: Vec<String>,
    ) -> Result<Self> {
        let n = graph.node_count();
        if features.rows() != n || labels.len() != n || node_ids.len() != n {
            return Err(Error::invalid(format!(
                "dataset sizes disagree: graph {n}, features {}, labels {}, ids {}",
                features.rows(),
                labels.len(),
                node_ids.len()
            )));
        }
        let c = class_names.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} outside [0, {c})")));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            graph,
            class_names,
            node_ids,
        })
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn edge_count(&self) -> usize {
        self.graph.edge_count()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.class_count()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// `"<n> nodes <m> edges <F> features <C> classes"`.
    pub fn stats_line(&self) -> String {
        format!(
            "{} nodes {} edges {} features {} classes",
            self.node_count(),
            self.edge_count(),
            self.feature_dim(),
            self.class_count()
        )
    }

    /// Same dataset over a different graph.
    pub fn with_graph(&self, graph: Graph) -> Result<Self> {
        if graph.node_count() != self.node_count() {
            return Err(Error::invalid("replacement graph has a different node count"));
        }
        Ok(Self {
            graph,
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// `<name>.content` and `<name>.cites`.
    CitationText,
    /// Single JSON file.
    CanonicalJson,
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::CitationText => "citation-text",
            DatasetFormat::CanonicalJson => "canonical-json",
        })
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "citation-text" | "citation" | "text" => Ok(DatasetFormat::CitationText),
            "canonical-json" | "json" => Ok(DatasetFormat::CanonicalJson),
            _ => Err(Error::invalid(format!(
                "unknown dataset format {s:?}; valid formats: citation-text, canonical-json"
            ))),
        }
    }
}

/// Loads a dataset. For citation-text, `path` may be the `.content` file, the
/// shared `<dir>/<name>` prefix, or a directory holding one `.content` file.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    let path = path.as_ref();
    match format {
        DatasetFormat::CanonicalJson => load_canonical_json(path),
        DatasetFormat::CitationText => {
            let (content, cites) = citation_paths(path)?;
            load_citation_text(&content, &cites)
        }
    }
}

/// Finds dataset `name` under `dir`: `<name>.json`, `<name>/<name>.json`,
/// `<name>.content` or `<name>/<name>.content`. An explicit format restricts
/// the search.
pub fn resolve_dataset(dir: &Path, name: &str, format: Option<DatasetFormat>) -> Result<(PathBuf, DatasetFormat)> {
    let mut candidates = Vec::new();
    if format != Some(DatasetFormat::CitationText) {
        candidates.push((dir.join(format!("{name}.json")), DatasetFormat::CanonicalJson));
        candidates.push((dir.join(name).join(format!("{name}.json")), DatasetFormat::CanonicalJson));
    }
    if format != Some(DatasetFormat::CanonicalJson) {
        candidates.push((dir.join(format!("{name}.content")), DatasetFormat::CitationText));
        candidates.push((dir.join(name).join(format!("{name}.content")), DatasetFormat::CitationText));
    }
    candidates
        .into_iter()
        .find(|(p, _)| p.is_file())
        .ok_or_else(|| Error::DatasetNotFound(format!("{name} under {}", dir.display())))
}

fn citation_paths(path: &Path) -> Result<(PathBuf, PathBuf)> {
    let prefix = if path.is_dir() {
        let mut found: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "content"))
            .collect();
        match found.len() {
            1 => found.pop().unwrap().with_extension(""),
            0 => return Err(Error::DatasetNotFound(format!("no .content file in {}", path.display()))),
            _ => return Err(Error::invalid(format!("several .content files in {}", path.display()))),
        }
    } else if path.extension().is_some_and(|x| x == "content" || x == "cites") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    let content = prefix.with_extension("content");
    let cites = prefix.with_extension("cites");
    for p in [&content, &cites] {
        if !p.is_file() {
            return Err(Error::DatasetNotFound(p.display().to_string()));
        }
    }
    Ok((content, cites))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses the two citation-text files. Class ids follow sorted class names;
/// nodes keep file order.
pub fn load_citation_text(content: &Path, cites: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(content).map_err(|e| Error::io(content, e))?;
    let mut ids = Vec::new();
    let mut raw_labels = Vec::new();
    let mut triplets = Vec::new();
    let mut index = HashMap::new();
    let mut width = None;
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() < 2 {
            return Err(parse_error(content, ln, "expected a node id, features and a label"));
        }
        let f = tokens.len() - 2;
        match width {
            None => width = Some(f),
            Some(w) if w != f => {
                return Err(parse_error(content, ln, format!("{f} features, earlier lines have {w}")));
            }
            _ => {}
        }
        let row = ids.len();
        for (col, tok) in tokens[1..=f].iter().enumerate() {
            match *tok {
                "0" | "0.0" => {}
                "1" | "1.0" => triplets.push((row, col, 1.0)),
                other => return Err(parse_error(content, ln, format!("non-binary feature {other:?}"))),
            }
        }
        let id = tokens[0].to_string();
        if index.insert(id.clone(), row).is_some() {
            return Err(parse_error(content, ln, format!("duplicate node id {id:?}")));
        }
        ids.push(id);
        raw_labels.push(tokens[f + 1].to_string());
    }
    let n = ids.len();
    if n == 0 {
        return Err(parse_error(content, 0, "no nodes"));
    }
    let class_names: Vec<String> = raw_labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let labels = raw_labels
        .iter()
        .map(|l| class_names.binary_search(l).expect("label collected above"))
        .collect();
    let features = SparseMatrix::from_triplets(n, width.unwrap_or(0), &triplets)?;

    let text = fs::read_to_string(cites).map_err(|e| Error::io(cites, e))?;
    let mut edges = Vec::new();
    let mut unknown = 0usize;
    for (ln, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            [a, b] => match (index.get(*a), index.get(*b)) {
                (Some(&i), Some(&j)) => edges.push((i, j)),
                _ => unknown += 1,
            },
            _ => return Err(parse_error(cites, ln + 1, "expected two node ids")),
        }
    }
    if unknown > 0 {
        log::warn!("{}: dropped {unknown} edges with unknown endpoints", cites.display());
    }
    let raw = edges.len();
    let graph = Graph::new(n, edges)?;
    log::debug!("{}: {raw} citations, {} undirected edges", cites.display(), graph.edge_count());
    let name = content
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, features, labels, graph, class_names, ids)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum FeatureRepr {
    Dense(Vec<Vec<f64>>),
    Sparse {
        rows: Vec<usize>,
        cols: Vec<usize>,
        vals: Vec<f64>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CanonicalDataset {
    name: String,
    n: usize,
    f: usize,
    c: usize,
    features: FeatureRepr,
    labels: Vec<usize>,
    edges: Vec<[usize; 2]>,
    node_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
}

pub fn to_canonical_json(d: &Dataset) -> Result<String> {
    let (rows, cols, vals) = d.features.triplets().into_iter().fold(
        (Vec::new(), Vec::new(), Vec::new()),
        |(mut r, mut c, mut v), (i, j, x)| {
            r.push(i);
            c.push(j);
            v.push(x);
            (r, c, v)
        },
    );
    let doc = CanonicalDataset {
        name: d.name.clone(),
        n: d.node_count(),
        f: d.feature_dim(),
        c: d.class_count(),
        features: FeatureRepr::Sparse { rows, cols, vals },
        labels: d.labels.clone(),
        edges: d.graph.edges().iter().map(|&(i, j)| [i, j]).collect(),
        node_ids: d.node_ids.clone(),
        class_names: Some(d.class_names.clone()),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn from_canonical_json(text: &str) -> Result<Dataset> {
    let doc: CanonicalDataset = serde_json::from_str(text)?;
    let features = match doc.features {
        FeatureRepr::Dense(rows) => {
            if rows.len() != doc.n || rows.iter().any(|r| r.len() != doc.f) {
                return Err(Error::invalid(format!("dense features must be {} x {}", doc.n, doc.f)));
            }
            SparseMatrix::from_dense(&DenseMatrix::from_rows(&rows)?)
        }
        FeatureRepr::Sparse { rows, cols, vals } => {
            if rows.len() != cols.len() || rows.len() != vals.len() {
                return Err(Error::invalid("sparse feature arrays differ in length"));
            }
            let t: Vec<_> = rows.into_iter().zip(cols).zip(vals).map(|((r, c), v)| (r, c, v)).collect();
            SparseMatrix::from_triplets(doc.n, doc.f, &t)?
        }
    };
    let class_names = match doc.class_names {
        Some(names) if names.len() == doc.c => names,
        Some(names) => {
            return Err(Error::invalid(format!("{} class names for {} classes", names.len(), doc.c)));
        }
        None => (0..doc.c).map(|i| i.to_string()).collect(),
    };
    let graph = Graph::new(doc.n, doc.edges.iter().map(|e| (e[0], e[1])))?;
    Dataset::new(doc.name, features, doc.labels, graph, class_names, doc.node_ids)
}

pub fn load_canonical_json(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::DatasetNotFound(path.display().to_string()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_canonical_json(&text)
}

pub fn save_canonical_json(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_canonical_json(d)?).map_err(|e| Error::io(path, e))
}

fn l1_scales(rows: usize, row_abs_sum: impl Fn(usize) -> f64) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            let s = row_abs_sum(i);
            if s > 0.0 {
                1.0 / s
            } else {
                1.0
            }
        })
        .collect()
}

/// Divides every row by its L1 norm; zero rows stay zero.
pub fn row_normalize_features(x: &DenseMatrix) -> DenseMatrix {
    let scales = l1_scales(x.rows(), |i| x.row(i).iter().map(|v| v.abs()).sum());
    let mut out = x.clone();
    for (i, s) in scales.into_iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// Sparse counterpart of [`row_normalize_features`].
pub fn row_normalize_sparse(x: &SparseMatrix) -> SparseMatrix {
    let p = x.pattern();
    let scales = l1_scales(x.rows(), |i| x.values()[p.row_range(i)].iter().map(|v| v.abs()).sum());
    let mut values = x.values().to_vec();
    for (i, s) in scales.into_iter().enumerate() {
        values[p.row_range(i)].iter_mut().for_each(|v| *v *= s);
    }
    x.with_values(values).expect("same pattern")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitSize {
    Total(usize),
    PerClass(usize),
    Rest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitProtocol {
    pub train_per_class: usize,
    pub val: SplitSize,
    pub test: SplitSize,
}

impl SplitProtocol {
    /// 20 labels per class, 500 validation and 1000 test nodes.
    pub const CITATION: SplitProtocol = SplitProtocol {
        train_per_class: 20,
        val: SplitSize::Total(500),
        test: SplitSize::Total(1000),
    };

    /// 20 labels and 30 validation nodes per class; the rest is test.
    pub const PER_CLASS: SplitProtocol = SplitProtocol {
        train_per_class: 20,
        val: SplitSize::PerClass(30),
        test: SplitSize::Rest,
    };

    pub fn with_train_per_class(self, t: usize) -> Self {
        Self {
            train_per_class: t,
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn take_per_class(
    d: &Dataset,
    pools: &mut [Vec<usize>],
    count: usize,
    out: &mut Vec<usize>,
) -> Result<()> {
    for (c, pool) in pools.iter_mut().enumerate() {
        if pool.len() < count {
            return Err(Error::ClassTooSmall {
                class: d.class_names[c].clone(),
                available: pool.len(),
                required: count,
            });
        }
        out.extend(pool.drain(..count));
    }
    Ok(())
}

fn take_total(rest: &mut Vec<usize>, size: SplitSize, what: &str) -> Result<Vec<usize>> {
    let count = match size {
        SplitSize::Total(k) => k,
        SplitSize::Rest => rest.len(),
        SplitSize::PerClass(_) => unreachable!("handled per class"),
    };
    if count > rest.len() {
        return Err(Error::invalid(format!(
            "{what} set needs {count} nodes but only {} remain",
            rest.len()
        )));
    }
    Ok(rest.drain(..count).collect())
}

/// Random split: `train_per_class` nodes of every class, then validation and
/// test nodes from what remains. Index lists come back sorted.
pub fn random_split(d: &Dataset, protocol: SplitProtocol, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = vec![Vec::new(); d.class_count()];
    for (i, &l) in d.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut train = Vec::new();
    take_per_class(d, &mut pools, protocol.train_per_class, &mut train)?;
    let mut val = Vec::new();
    if let SplitSize::PerClass(v) = protocol.val {
        take_per_class(d, &mut pools, v, &mut val)?;
    }
    let mut test = Vec::new();
    if let SplitSize::PerClass(t) = protocol.test {
        take_per_class(d, &mut pools, t, &mut test)?;
    }
    let mut rest: Vec<usize> = pools.concat();
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    if !matches!(protocol.val, SplitSize::PerClass(_)) {
        val = take_total(&mut rest, protocol.val, "validation")?;
    }
    if !matches!(protocol.test, SplitSize::PerClass(_)) {
        test = take_total(&mut rest, protocol.test, "test")?;
    }
    for v in [&mut train, &mut val, &mut test] {
        v.sort_unstable();
    }
    Ok(Split { train, val, test })
}

/// Drops nodes of classes with fewer than `min_count` members, along with
/// their edges, and renumbers nodes and classes densely in original order.
pub fn filter_small_classes(d: &Dataset, min_count: usize) -> Result<Dataset> {
    let sizes = d.class_sizes();
    let mut class_map = vec![None; sizes.len()];
    let mut class_names = Vec::new();
    for (c, &s) in sizes.iter().enumerate() {
        if s >= min_count {
            class_map[c] = Some(class_names.len());
            class_names.push(d.class_names[c].clone());
        }
    }
    if class_names.is_empty() {
        return Err(Error::invalid(format!("no class has at least {min_count} nodes")));
    }
    let mut node_map = vec![None; d.node_count()];
    let mut kept = Vec::new();
    for (i, &l) in d.labels.iter().enumerate() {
        if class_map[l].is_some() {
            node_map[i] = Some(kept.len());
            kept.push(i);
        }
    }
    let labels = kept.iter().map(|&i| class_map[d.labels[i]].unwrap()).collect();
    let node_ids = kept.iter().map(|&i| d.node_ids[i].clone()).collect();
    let triplets: Vec<_> = d
        .features
        .triplets()
        .into_iter()
        .filter_map(|(r, c, v)| node_map[r].map(|r| (r, c, v)))
        .collect();
    let features = SparseMatrix::from_triplets(kept.len(), d.feature_dim(), &triplets)?;
    let edges = d
        .graph
        .edges()
        .iter()
        .filter_map(|&(a, b)| Some((node_map[a]?, node_map[b]?)));
    let graph = Graph::new(kept.len(), edges)?;
    Dataset::new(d.name.clone(), features, labels, graph, class_names, node_ids)
}

/// Parameters of a planted-partition dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub classes: usize,
    pub features: usize,
    /// Expected same-class neighbours per node.
    pub degree_in: f64,
    /// Expected other-class neighbours per node.
    pub degree_out: f64,
    /// Probability of a class-topic feature being on.
    pub topic_rate: f64,
    /// Probability of any other feature being on.
    pub noise_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            nodes: 300,
            classes: 3,
            features: 60,
            degree_in: 3.0,
            degree_out: 1.0,
            topic_rate: 0.2,
            noise_rate: 0.05,
        }
    }
}

/// Binary-feature planted-partition graph. Node `i` belongs to class
/// `i mod C`; features are split into `C` topic blocks.
pub fn synthetic_dataset(spec: SyntheticSpec, seed: u64) -> Result<Dataset> {
    let SyntheticSpec {
        nodes: n,
        classes: c,
        features: f,
        ..
    } = spec;
    if c == 0 || n < c || f < c {
        return Err(Error::invalid("synthetic dataset needs n >= C, F >= C and C >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let per_class = (n / c).max(1) as f64;
    let p_in = (spec.degree_in / per_class).min(1.0);
    let p_out = (spec.degree_out / (n as f64 - per_class).max(1.0)).min(1.0);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let block = f / c;
    let mut triplets = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        for j in 0..f {
            let topic = j / block == l;
            if rng.gen_bool(if topic { spec.topic_rate } else { spec.noise_rate }) {
                triplets.push((i, j, 1.0));
            }
        }
    }
    let features = SparseMatrix::from_triplets(n, f, &triplets)?;
    let graph = Graph::new(n, edges)?;
    let class_names = (0..c).map(|k| format!("class{k}")).collect();
    let node_ids = (0..n).map(|i| format!("n{i}")).collect();
    Dataset::new("synthetic", features, labels, graph, class_names, node_ids)
}
