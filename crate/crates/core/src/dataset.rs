//! Citation-graph datasets in the portable directory format.
//!
//! ```text
//! meta.json       {format_version, name, num_nodes, num_features, num_classes,
//!                  feature_nnz, num_undirected_edges[, class_names]}
//! edges.csv       u,v        (u < v, each undirected edge once, no self-loops)
//! features.csv    node,feature_index,value   (sorted by node then feature)
//! labels.csv      node,class_id               (every node once)
//! splits.json     {train: [...], val: [...], test: [...]}
//! checksums.json  {file name: sha-256 hex}    (covers the five files above)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{Graph, GraphError};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const DATA_FILES: [&str; 5] = ["meta.json", "edges.csv", "features.csv", "labels.csv", "splits.json"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {message}")]
    Schema { file: String, message: String },
    #[error("{file}: checksum mismatch (expected {expected}, found {actual})")]
    Checksum {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("{file} line {line}: {message}")]
    Record {
        file: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn schema(file: &str, message: impl Into<String>) -> DatasetError {
    DatasetError::Schema {
        file: file.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub format_version: u32,
    pub name: String,
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub feature_nnz: usize,
    pub num_undirected_edges: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

/// A transductive node-classification problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graph: Graph,
    /// Dense `num_nodes × num_features` bag-of-words matrix.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: Splits,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn feature_nnz(&self) -> usize {
        self.features.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn labels_of(&self, nodes: &[usize]) -> Vec<usize> {
        nodes.iter().map(|&n| self.labels[n]).collect()
    }

    /// Checks every in-memory invariant.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let n = self.num_nodes();
        if self.features.rank() != 2 || self.features.rows() != n {
            return Err(schema(
                "features.csv",
                format!("feature matrix has shape {:?} for {n} nodes", self.features.shape()),
            ));
        }
        if let Some(v) = self.features.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(schema("features.csv", format!("feature value {v} is not a finite non-negative number")));
        }
        if self.labels.len() != n {
            return Err(schema("labels.csv", format!("{} labels for {n} nodes", self.labels.len())));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(schema(
                "labels.csv",
                format!("class_id {l} out of range for {} classes", self.num_classes),
            ));
        }
        let mut owner = vec![None; n];
        for split in [Split::Train, Split::Val, Split::Test] {
            for &id in self.splits.get(split) {
                if id >= n {
                    return Err(schema(
                        "splits.json",
                        format!("{} id {id} out of range for {n} nodes", split.name()),
                    ));
                }
                if let Some(prev) = owner[id].replace(split) {
                    return Err(schema(
                        "splits.json",
                        format!("node {id} appears in both {} and {}", prev.name(), split.name()),
                    ));
                }
            }
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(schema("meta.json", "class_names length differs from num_classes"));
            }
        }
        Ok(())
    }

    /// Per-class counts of the training split.
    pub fn train_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &n in &self.splits.train {
            counts[self.labels[n]] += 1;
        }
        counts
    }
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>, DatasetError> {
    let path = dir.join(name);
    fs::read(&path).map_err(|source| DatasetError::Io { path, source })
}

fn as_text<'a>(name: &str, bytes: &'a [u8]) -> Result<&'a str, DatasetError> {
    std::str::from_utf8(bytes).map_err(|e| schema(name, format!("not UTF-8: {e}")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

/// Parses `expected_fields` comma-separated values per non-empty line.
fn parse_lines<'a>(
    file: &'a str,
    text: &'a str,
    expected_fields: usize,
) -> impl Iterator<Item = Result<(usize, Vec<&'a str>), DatasetError>> + 'a {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(move |(i, line)| {
            let fields: Vec<&str> = line.trim_end_matches('\r').split(',').map(str::trim).collect();
            if fields.len() != expected_fields {
                return Err(DatasetError::Record {
                    file: file.to_string(),
                    line: i + 1,
                    message: format!("expected {expected_fields} fields, found {}", fields.len()),
                });
            }
            Ok((i + 1, fields))
        })
}

fn parse_index(file: &str, line: usize, field: &str, raw: &str, bound: usize) -> Result<usize, DatasetError> {
    let v: usize = raw.parse().map_err(|_| DatasetError::Record {
        file: file.to_string(),
        line,
        message: format!("{field} {raw:?} is not a non-negative integer"),
    })?;
    if v >= bound {
        return Err(DatasetError::Record {
            file: file.to_string(),
            line,
            message: format!("{field} {v} out of range (must be < {bound})"),
        });
    }
    Ok(v)
}

/// Reads and validates a portable dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let dir = dir.as_ref();
    let checksum_bytes = read_file(dir, "checksums.json")?;
    let checksums: BTreeMap<String, String> = serde_json::from_slice(&checksum_bytes)
        .map_err(|e| schema("checksums.json", e.to_string()))?;

    let mut contents = BTreeMap::new();
    for name in DATA_FILES {
        let bytes = read_file(dir, name)?;
        let expected = checksums
            .get(name)
            .ok_or_else(|| schema("checksums.json", format!("missing entry for {name}")))?;
        let actual = sha256_hex(&bytes);
        if !expected.eq_ignore_ascii_case(&actual) {
            return Err(DatasetError::Checksum {
                file: name.to_string(),
                expected: expected.clone(),
                actual,
            });
        }
        contents.insert(name, bytes);
    }

    let meta: Meta =
        serde_json::from_slice(&contents["meta.json"]).map_err(|e| schema("meta.json", e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(schema(
            "meta.json",
            format!("format_version {} is not supported (expected {FORMAT_VERSION})", meta.format_version),
        ));
    }
    let n = meta.num_nodes;
    if n == 0 || meta.num_classes == 0 {
        return Err(schema("meta.json", "num_nodes and num_classes must be at least 1"));
    }

    let edges_text = as_text("edges.csv", &contents["edges.csv"])?;
    let mut edges = Vec::new();
    for rec in parse_lines("edges.csv", edges_text, 2) {
        let (line, f) = rec?;
        let u = parse_index("edges.csv", line, "u", f[0], n)?;
        let v = parse_index("edges.csv", line, "v", f[1], n)?;
        if u >= v {
            return Err(DatasetError::Record {
                file: "edges.csv".into(),
                line,
                message: format!("edge ({u},{v}) must satisfy u < v"),
            });
        }
        edges.push((u, v));
    }
    let mut sorted = edges.clone();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(schema("edges.csv", format!("duplicate edge {:?}", w[0])));
    }
    if edges.len() != meta.num_undirected_edges {
        return Err(schema(
            "meta.json",
            format!(
                "num_undirected_edges is {} but edges.csv has {} edges",
                meta.num_undirected_edges,
                edges.len()
            ),
        ));
    }

    let features_text = as_text("features.csv", &contents["features.csv"])?;
    let mut features = Tensor::zeros(&[n, meta.num_features]);
    let mut nnz = 0;
    let mut last: Option<(usize, usize)> = None;
    for rec in parse_lines("features.csv", features_text, 3) {
        let (line, f) = rec?;
        let node = parse_index("features.csv", line, "node", f[0], n)?;
        let col = parse_index("features.csv", line, "feature_index", f[1], meta.num_features)?;
        let value: f64 = f[2].parse().map_err(|_| DatasetError::Record {
            file: "features.csv".into(),
            line,
            message: format!("value {:?} is not a number", f[2]),
        })?;
        if !value.is_finite() || value < 0.0 {
            return Err(DatasetError::Record {
                file: "features.csv".into(),
                line,
                message: format!("value {value} must be finite and non-negative"),
            });
        }
        if last.is_some_and(|prev| prev >= (node, col)) {
            return Err(DatasetError::Record {
                file: "features.csv".into(),
                line,
                message: "triples must be strictly sorted by (node, feature_index)".into(),
            });
        }
        last = Some((node, col));
        features.data_mut()[node * meta.num_features + col] = value;
        nnz += 1;
    }
    if nnz != meta.feature_nnz {
        return Err(schema(
            "meta.json",
            format!("feature_nnz is {} but features.csv has {nnz} triples", meta.feature_nnz),
        ));
    }

    let labels_text = as_text("labels.csv", &contents["labels.csv"])?;
    let mut labels = vec![None; n];
    for rec in parse_lines("labels.csv", labels_text, 2) {
        let (line, f) = rec?;
        let node = parse_index("labels.csv", line, "node", f[0], n)?;
        let class = parse_index("labels.csv", line, "class_id", f[1], meta.num_classes)?;
        if labels[node].replace(class).is_some() {
            return Err(DatasetError::Record {
                file: "labels.csv".into(),
                line,
                message: format!("node {node} labeled twice"),
            });
        }
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| schema("labels.csv", format!("node {i} has no label"))))
        .collect::<Result<Vec<_>, _>>()?;

    let splits: Splits =
        serde_json::from_slice(&contents["splits.json"]).map_err(|e| schema("splits.json", e.to_string()))?;

    let dataset = Dataset {
        name: meta.name,
        graph: Graph::build(n, &edges)?,
        features,
        labels,
        num_classes: meta.num_classes,
        splits,
        class_names: meta.class_names,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes `ds` in canonical form (sorted edges and triples) with checksums.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
    ds.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let meta = Meta {
        format_version: FORMAT_VERSION,
        name: ds.name.clone(),
        num_nodes: ds.num_nodes(),
        num_features: ds.num_features(),
        num_classes: ds.num_classes,
        feature_nnz: ds.feature_nnz(),
        num_undirected_edges: ds.graph.num_undirected_edges(),
        class_names: ds.class_names.clone(),
    };

    let mut edges = String::new();
    for (u, v) in ds.graph.edges() {
        writeln!(edges, "{u},{v}").unwrap();
    }
    let mut features = String::new();
    let f = ds.num_features();
    for node in 0..ds.num_nodes() {
        for (col, &v) in ds.features.row(node).iter().enumerate().take(f) {
            if v != 0.0 {
                writeln!(features, "{node},{col},{v}").unwrap();
            }
        }
    }
    let mut labels = String::new();
    for (node, l) in ds.labels.iter().enumerate() {
        writeln!(labels, "{node},{l}").unwrap();
    }

    let files: [(&str, Vec<u8>); 5] = [
        ("meta.json", to_json_bytes(&meta)),
        ("edges.csv", edges.into_bytes()),
        ("features.csv", features.into_bytes()),
        ("labels.csv", labels.into_bytes()),
        ("splits.json", to_json_bytes(&ds.splits)),
    ];
    let mut checksums = BTreeMap::new();
    for (name, bytes) in &files {
        checksums.insert(name.to_string(), sha256_hex(bytes));
        write_file(dir, name, bytes)?;
    }
    write_file(dir, "checksums.json", &to_json_bytes(&checksums))
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), DatasetError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| DatasetError::Io { path, source })
}

/// Counts compared by [`verify_stats`]. `None` fields are not checked.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedStats {
    pub nodes: Option<usize>,
    pub edges: Option<usize>,
    pub features: Option<usize>,
    pub classes: Option<usize>,
    pub train: Option<usize>,
    pub val: Option<usize>,
    pub test: Option<usize>,
}

impl ExpectedStats {
    /// Published statistics of the three citation benchmarks.
    pub fn citation(name: &str) -> Option<Self> {
        let (nodes, edges, features, classes, train) = match name.to_ascii_lowercase().as_str() {
            "cora" => (2708, 5429, 1433, 7, 140),
            "citeseer" => (3327, 4732, 3703, 6, 120),
            "pubmed" => (19717, 44338, 500, 3, 60),
            _ => return None,
        };
        Some(Self {
            nodes: Some(nodes),
            edges: Some(edges),
            features: Some(features),
            classes: Some(classes),
            train: Some(train),
            val: None,
            test: Some(1000),
        })
    }

    /// The exact counts of `ds`.
    pub fn of(ds: &Dataset) -> Self {
        Self {
            nodes: Some(ds.num_nodes()),
            edges: Some(ds.graph.num_undirected_edges()),
            features: Some(ds.num_features()),
            classes: Some(ds.num_classes),
            train: Some(ds.splits.train.len()),
            val: Some(ds.splits.val.len()),
            test: Some(ds.splits.test.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatCheck {
    pub field: &'static str,
    pub expected: usize,
    pub actual: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatsReport {
    pub checks: Vec<StatCheck>,
}

impl StatsReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.field).collect()
    }
}

/// Compares the dataset's counts with `expected`, one entry per set field.
pub fn verify_stats(ds: &Dataset, expected: &ExpectedStats) -> StatsReport {
    let actual = ExpectedStats::of(ds);
    let pairs = [
        ("nodes", expected.nodes, actual.nodes),
        ("edges", expected.edges, actual.edges),
        ("features", expected.features, actual.features),
        ("classes", expected.classes, actual.classes),
        ("train", expected.train, actual.train),
        ("val", expected.val, actual.val),
        ("test", expected.test, actual.test),
    ];
    let checks = pairs
        .into_iter()
        .filter_map(|(field, want, got)| {
            let (want, got) = (want?, got.unwrap_or(0));
            Some(StatCheck {
                field,
                expected: want,
                actual: got,
                pass: want == got,
            })
        })
        .collect();
    StatsReport { checks }
}

/// Parameters of [`synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub num_features: usize,
    /// Expected number of same-class neighbors per node.
    pub intra_degree: f64,
    /// Expected number of other-class neighbors per node.
    pub inter_degree: f64,
    /// Active words per document.
    pub words_per_node: usize,
    /// Probability that an active word is drawn from the class vocabulary.
    pub topic_purity: f64,
    pub train_per_class: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_nodes: 300,
            num_classes: 3,
            num_features: 60,
            intra_degree: 3.0,
            inter_degree: 0.5,
            words_per_node: 6,
            topic_purity: 0.4,
            train_per_class: 10,
            val: 60,
            test: 120,
        }
    }
}

/// Planted-partition citation-like graph with class-dependent binary
/// bag-of-words features. Node `i` belongs to class `i % num_classes`.
pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, f) = (spec.num_nodes, spec.num_classes, spec.num_features);
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();

    let per_class = n as f64 / c as f64;
    let p_in = (spec.intra_degree / per_class).min(1.0);
    let p_out = (spec.inter_degree / (n as f64 - per_class).max(1.0)).min(1.0);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let vocab = (f / c).max(1);
    let mut features = Tensor::zeros(&[n, f]);
    for (node, &label) in labels.iter().enumerate() {
        for _ in 0..spec.words_per_node {
            let word = if rng.random::<f64>() < spec.topic_purity {
                (label * vocab + rng.random_range(0..vocab)) % f
            } else {
                rng.random_range(0..f)
            };
            features.data_mut()[node * f + word] = 1.0;
        }
    }

    // class-balanced training nodes first, then validation and test ranges
    let mut train = Vec::new();
    for class in 0..c {
        train.extend((0..n).filter(|&i| labels[i] == class).take(spec.train_per_class));
    }
    train.sort_unstable();
    let rest: Vec<usize> = (0..n).filter(|i| train.binary_search(i).is_err()).collect();
    let val = rest.iter().copied().take(spec.val).collect();
    let test = rest.iter().copied().skip(spec.val).take(spec.test).collect();

    Dataset {
        name: format!("synthetic-{seed}"),
        graph: Graph::build(n, &edges).expect("valid ids"),
        features,
        labels,
        num_classes: c,
        splits: Splits { train, val, test },
        class_names: None,
    }
}
