//! Datasets: multigraphs with raw node features, relation texts, labels and
//! splits. Covers on-disk I/O, the stochastic-block generator, k-hop
//! subgraphs, label centroids and triplet construction.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

/// Attempts per negative before tail corruption gives up.
pub const MAX_CORRUPTION_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{file}: missing")]
    MissingFile { file: String },
    #[error("{file}:{line}: {message}")]
    Malformed { file: String, line: usize, message: String },
    #[error("{file}:{line}: reference to {what} {index} but only {len} exist")]
    Dangling { file: String, line: usize, what: &'static str, index: usize, len: usize },
    #[error("{file}:{line}: {what} {index} assigned to more than one split")]
    SplitOverlap { file: String, line: usize, what: &'static str, index: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("class {class} (`{text}`) has no training samples")]
    EmptyClass { class: usize, text: String },
    #[error("node {center} out of range for {len} nodes")]
    CenterOutOfRange { center: usize, len: usize },
    #[error("could not sample a negative for edge ({src}, {relation}, {dst}) after {attempts} attempts")]
    ResamplingExhausted { src: usize, relation: usize, dst: usize, attempts: usize },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Node,
    Link,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationKind {
    Edge,
    Classification,
}

impl RelationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::Edge => "edge",
            RelationKind::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "edge" => Some(RelationKind::Edge),
            "classification" => Some(RelationKind::Classification),
            _ => None,
        }
    }
}

/// A relation known to one dataset. Edges and the classification relation
/// refer to entries of [`GraphDataset::relations`] by position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalRelation {
    pub text: String,
    pub kind: RelationKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    pub id: String,
    pub description: String,
    pub task: TaskKind,
    /// `node_count × d_raw`.
    pub features: Tensor,
    pub relations: Vec<LocalRelation>,
    pub edges: Vec<Edge>,
    pub labels: Option<Vec<usize>>,
    pub class_texts: Vec<String>,
    pub cls_relation: Option<usize>,
    pub node_splits: Option<Vec<Split>>,
    pub edge_splits: Option<Vec<Split>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelNode {
    pub class_index: usize,
    pub centroid: Vec<f64>,
    pub dataset_id: String,
}

/// Either side of a triplet. Label nodes live in their own id space, so they
/// can never carry edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Counterpart {
    Node(usize),
    Label(usize),
}

/// `⟨head, relation, tail⟩` with a binary target. `relation` indexes the
/// owning dataset's relation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub head: usize,
    pub relation: usize,
    pub tail: Counterpart,
    pub positive: bool,
}

impl Triplet {
    pub fn target(&self) -> f64 {
        if self.positive {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subgraph {
    pub center: usize,
    /// Sorted ascending.
    pub members: Vec<usize>,
    /// Indices into the dataset's edge list; both endpoints are members.
    pub edges: Vec<usize>,
}

#[derive(Deserialize, Serialize)]
struct Meta {
    id: String,
    description: String,
    #[serde(default)]
    class_texts: Vec<String>,
    #[serde(default)]
    cls_relation_text: Option<String>,
    task: TaskKind,
}

impl GraphDataset {
    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    pub fn class_count(&self) -> usize {
        self.class_texts.len()
    }

    pub fn relation_index(&self, text: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.text == text)
    }

    /// Nodes assigned to `split`, ascending.
    pub fn nodes_in(&self, split: Split) -> Vec<usize> {
        self.node_splits
            .as_ref()
            .map(|s| (0..s.len()).filter(|&i| s[i] == split).collect())
            .unwrap_or_default()
    }

    /// Edge indices assigned to `split`, ascending.
    pub fn edges_in(&self, split: Split) -> Vec<usize> {
        self.edge_splits
            .as_ref()
            .map(|s| (0..s.len()).filter(|&i| s[i] == split).collect())
            .unwrap_or_default()
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.node_count();
        let invalid = |m: String| Err(GraphError::Invalid(format!("{}: {m}", self.id)));
        if self.id.is_empty() || self.id.chars().any(char::is_whitespace) {
            return invalid("dataset id must be non-empty without whitespace".into());
        }
        if !self.features.is_finite() {
            return invalid("non-finite feature".into());
        }
        for r in &self.relations {
            if r.text.is_empty() {
                return invalid("empty relation text".into());
            }
        }
        for (k, e) in self.edges.iter().enumerate() {
            if e.src >= n || e.dst >= n {
                return invalid(format!("edge {k} endpoint out of range"));
            }
            if e.relation >= self.relations.len() {
                return invalid(format!("edge {k} relation out of range"));
            }
        }
        if let Some(c) = self.cls_relation {
            if c >= self.relations.len() {
                return invalid("classification relation out of range".into());
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return invalid("label count differs from node count".into());
            }
            if let Some(l) = labels.iter().find(|&&l| l >= self.class_count()) {
                return invalid(format!("label {l} without class text"));
            }
        }
        if let Some(s) = &self.node_splits {
            if s.len() != n {
                return invalid("node split count differs from node count".into());
            }
        }
        if let Some(s) = &self.edge_splits {
            if s.len() != self.edges.len() {
                return invalid("edge split count differs from edge count".into());
            }
        }
        match self.task {
            TaskKind::Node => {
                if self.labels.is_none() || self.node_splits.is_none() || self.cls_relation.is_none() {
                    return invalid("node task needs labels, node splits and a classification relation".into());
                }
            }
            TaskKind::Link => {
                if self.edge_splits.is_none() {
                    return invalid("link task needs edge splits".into());
                }
            }
        }
        Ok(())
    }

    /// In-neighbour lists per local relation: `groups[r][i]` holds `src` for
    /// every retained edge `(src, i, r)`. Rows beyond `node_count` (label
    /// nodes) get empty groups.
    pub fn in_neighbors(&self, keep: impl Fn(usize) -> bool, total_rows: usize) -> BTreeMap<usize, Vec<Vec<usize>>> {
        let mut out: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
        for (k, e) in self.edges.iter().enumerate() {
            if !keep(k) {
                continue;
            }
            out.entry(e.relation).or_insert_with(|| vec![Vec::new(); total_rows])[e.dst].push(e.src);
        }
        out
    }

    pub fn with_node_splits(&self, splits: Vec<Split>) -> GraphDataset {
        GraphDataset { node_splits: Some(splits), ..self.clone() }
    }
}

fn read_file(dir: &Path, name: &str) -> Result<String, GraphError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(GraphError::MissingFile { file: path.display().to_string() });
    }
    fs::read_to_string(&path).map_err(|e| GraphError::Io(path.display().to_string(), e))
}

fn parse_index(file: &str, line: usize, tok: &str, what: &str) -> Result<usize, GraphError> {
    tok.trim().parse::<usize>().map_err(|_| GraphError::Malformed {
        file: file.into(),
        line,
        message: format!("{what} `{tok}` is not a non-negative integer"),
    })
}

/// Non-empty lines with their 1-based numbers.
fn rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split('\t').collect()))
}

/// Reads the directory layout written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<GraphDataset, GraphError> {
    let meta_text = read_file(dir, "meta.json")?;
    let meta: Meta = serde_json::from_str(&meta_text).map_err(|e| GraphError::Malformed {
        file: "meta.json".into(),
        line: e.line(),
        message: e.to_string(),
    })?;

    let nodes_text = read_file(dir, "nodes.tsv")?;
    let mut feature_rows: Vec<Vec<f64>> = Vec::new();
    for (ln, fields) in rows(&nodes_text) {
        let id = parse_index("nodes.tsv", ln, fields[0], "node id")?;
        if id != feature_rows.len() {
            return Err(GraphError::Malformed {
                file: "nodes.tsv".into(),
                line: ln,
                message: format!("node ids must be dense and ordered; expected {}, found {id}", feature_rows.len()),
            });
        }
        let feats = fields[1..]
            .iter()
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| GraphError::Malformed { file: "nodes.tsv".into(), line: ln, message: "malformed float".into() })?;
        if let Some(first) = feature_rows.first() {
            if first.len() != feats.len() {
                return Err(GraphError::Malformed {
                    file: "nodes.tsv".into(),
                    line: ln,
                    message: format!("expected {} features, found {}", first.len(), feats.len()),
                });
            }
        }
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::Malformed { file: "nodes.tsv".into(), line: ln, message: "non-finite feature".into() });
        }
        feature_rows.push(feats);
    }
    let n = feature_rows.len();
    if n == 0 {
        return Err(GraphError::Malformed { file: "nodes.tsv".into(), line: 0, message: "no nodes".into() });
    }
    let features = Tensor::from_rows(&feature_rows).map_err(|e| GraphError::Invalid(e.to_string()))?;

    let mut relations: Vec<LocalRelation> = Vec::new();
    let mut edges = Vec::new();
    let edges_text = read_file(dir, "edges.tsv")?;
    for (ln, fields) in rows(&edges_text) {
        if fields.len() != 3 || fields[2].is_empty() {
            return Err(GraphError::Malformed {
                file: "edges.tsv".into(),
                line: ln,
                message: "expected `src<TAB>dst<TAB>relation_text`".into(),
            });
        }
        let src = parse_index("edges.tsv", ln, fields[0], "src")?;
        let dst = parse_index("edges.tsv", ln, fields[1], "dst")?;
        for v in [src, dst] {
            if v >= n {
                return Err(GraphError::Dangling { file: "edges.tsv".into(), line: ln, what: "node", index: v, len: n });
            }
        }
        let text = fields[2];
        let relation = match relations.iter().position(|r| r.text == text) {
            Some(i) => i,
            None => {
                relations.push(LocalRelation { text: text.to_string(), kind: RelationKind::Edge });
                relations.len() - 1
            }
        };
        edges.push(Edge { src, dst, relation });
    }

    let cls_relation = match &meta.cls_relation_text {
        Some(text) if !text.is_empty() => Some(match relations.iter().position(|r| &r.text == text) {
            Some(i) => i,
            None => {
                relations.push(LocalRelation { text: text.clone(), kind: RelationKind::Classification });
                relations.len() - 1
            }
        }),
        _ => None,
    };

    let labels = if meta.task == TaskKind::Node || dir.join("labels.tsv").exists() {
        let text = read_file(dir, "labels.tsv")?;
        let mut labels = vec![None; n];
        for (ln, fields) in rows(&text) {
            if fields.len() != 2 {
                return Err(GraphError::Malformed {
                    file: "labels.tsv".into(),
                    line: ln,
                    message: "expected `node_id<TAB>class_index`".into(),
                });
            }
            let node = parse_index("labels.tsv", ln, fields[0], "node id")?;
            let class = parse_index("labels.tsv", ln, fields[1], "class index")?;
            if node >= n {
                return Err(GraphError::Dangling { file: "labels.tsv".into(), line: ln, what: "node", index: node, len: n });
            }
            if class >= meta.class_texts.len() {
                return Err(GraphError::Dangling {
                    file: "labels.tsv".into(),
                    line: ln,
                    what: "class",
                    index: class,
                    len: meta.class_texts.len(),
                });
            }
            if labels[node].replace(class).is_some() {
                return Err(GraphError::Malformed {
                    file: "labels.tsv".into(),
                    line: ln,
                    message: format!("node {node} labelled twice"),
                });
            }
        }
        let missing = labels.iter().position(Option::is_none);
        if let Some(m) = missing {
            return Err(GraphError::Malformed { file: "labels.tsv".into(), line: 0, message: format!("node {m} has no label") });
        }
        Some(labels.into_iter().map(Option::unwrap).collect())
    } else {
        None
    };

    let split_text = read_file(dir, "splits.tsv")?;
    let (what, len) = match meta.task {
        TaskKind::Node => ("node", n),
        TaskKind::Link => ("edge", edges.len()),
    };
    let mut assigned: Vec<Option<Split>> = vec![None; len];
    for (ln, fields) in rows(&split_text) {
        if fields.len() != 2 {
            return Err(GraphError::Malformed {
                file: "splits.tsv".into(),
                line: ln,
                message: "expected `index<TAB>split`".into(),
            });
        }
        let idx = parse_index("splits.tsv", ln, fields[0], what)?;
        if idx >= len {
            return Err(GraphError::Dangling { file: "splits.tsv".into(), line: ln, what, index: idx, len });
        }
        let split = Split::parse(fields[1].trim()).ok_or_else(|| GraphError::Malformed {
            file: "splits.tsv".into(),
            line: ln,
            message: format!("unknown split `{}`", fields[1]),
        })?;
        if assigned[idx].replace(split).is_some() {
            return Err(GraphError::SplitOverlap { file: "splits.tsv".into(), line: ln, what, index: idx });
        }
    }
    if let Some(m) = assigned.iter().position(Option::is_none) {
        return Err(GraphError::Malformed { file: "splits.tsv".into(), line: 0, message: format!("{what} {m} has no split") });
    }
    let assigned: Vec<Split> = assigned.into_iter().map(Option::unwrap).collect();
    let (node_splits, edge_splits) = match meta.task {
        TaskKind::Node => (Some(assigned), None),
        TaskKind::Link => (None, Some(assigned)),
    };

    let ds = GraphDataset {
        id: meta.id,
        description: meta.description,
        task: meta.task,
        features,
        relations,
        edges,
        labels,
        class_texts: meta.class_texts,
        cls_relation,
        node_splits,
        edge_splits,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the on-disk layout read by [`load_dataset`]. Output bytes depend
/// only on the dataset contents.
pub fn write_dataset(ds: &GraphDataset, dir: &Path) -> Result<(), GraphError> {
    let io = |e: std::io::Error| GraphError::Io(dir.display().to_string(), e);
    fs::create_dir_all(dir).map_err(io)?;
    let meta = Meta {
        id: ds.id.clone(),
        description: ds.description.clone(),
        class_texts: ds.class_texts.clone(),
        cls_relation_text: ds.cls_relation.map(|c| ds.relations[c].text.clone()),
        task: ds.task,
    };
    let meta_json = serde_json::to_string_pretty(&meta).map_err(|e| GraphError::Invalid(e.to_string()))?;
    fs::write(dir.join("meta.json"), meta_json + "\n").map_err(io)?;

    let mut nodes = String::new();
    for r in 0..ds.node_count() {
        let _ = write!(nodes, "{r}");
        for v in ds.features.row(r) {
            let _ = write!(nodes, "\t{v:?}");
        }
        nodes.push('\n');
    }
    fs::write(dir.join("nodes.tsv"), nodes).map_err(io)?;

    let mut edges = String::new();
    for e in &ds.edges {
        let _ = writeln!(edges, "{}\t{}\t{}", e.src, e.dst, ds.relations[e.relation].text);
    }
    fs::write(dir.join("edges.tsv"), edges).map_err(io)?;

    if let Some(labels) = &ds.labels {
        let mut out = String::new();
        for (i, l) in labels.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{l}");
        }
        fs::write(dir.join("labels.tsv"), out).map_err(io)?;
    }
    let splits = match ds.task {
        TaskKind::Node => ds.node_splits.as_ref(),
        TaskKind::Link => ds.edge_splits.as_ref(),
    };
    let mut out = String::new();
    for (i, s) in splits.into_iter().flatten().enumerate() {
        let _ = writeln!(out, "{i}\t{}", s.as_str());
    }
    fs::write(dir.join("splits.tsv"), out).map_err(io)?;
    Ok(())
}

/// Parameters of the stochastic-block generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub id: String,
    pub description: String,
    pub task: TaskKind,
    pub n_nodes: usize,
    pub n_classes: usize,
    /// Edge relation texts; every relation is sampled independently.
    pub relations: Vec<String>,
    pub intra_p: f64,
    pub inter_p: f64,
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian added to each class mean.
    pub noise: f64,
    pub class_texts: Vec<String>,
    pub cls_relation_text: String,
    /// Fractions for train and validation; the rest is test.
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            id: "synthetic".into(),
            description: "synthetic stochastic block graph".into(),
            task: TaskKind::Node,
            n_nodes: 200,
            n_classes: 2,
            relations: vec!["relation a".into(), "relation b".into()],
            intra_p: 0.3,
            inter_p: 0.02,
            feature_dim: 32,
            noise: 0.5,
            class_texts: Vec::new(),
            cls_relation_text: "node category".into(),
            train_frac: 0.6,
            val_frac: 0.2,
        }
    }
}

/// Stochastic-block multigraph. Nodes get balanced class blocks; each
/// relation samples every unordered pair once and, when present, stores it
/// in both directions. Features are a per-class Gaussian mean plus noise.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<GraphDataset, GraphError> {
    for (name, p) in [("intra_p", spec.intra_p), ("inter_p", spec.inter_p)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(GraphError::Invalid(format!("{name} = {p} is not a probability")));
        }
    }
    if spec.n_classes < 2 {
        return Err(GraphError::Invalid("n_classes must be at least 2".into()));
    }
    if spec.n_nodes < spec.n_classes {
        return Err(GraphError::Invalid("n_nodes must be at least n_classes".into()));
    }
    if spec.feature_dim == 0 || !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(GraphError::Invalid("feature_dim must be positive and noise non-negative".into()));
    }
    if !(spec.train_frac > 0.0 && spec.val_frac >= 0.0 && spec.train_frac + spec.val_frac <= 1.0) {
        return Err(GraphError::Invalid("split fractions must satisfy 0 < train, 0 <= val, train + val <= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n_nodes;
    let c = spec.n_classes;

    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);

    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..spec.feature_dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| GraphError::Invalid(e.to_string()))?;
    let mut features = Tensor::zeros(n, spec.feature_dim);
    for i in 0..n {
        for (f, m) in features.row_mut(i).iter_mut().zip(&means[labels[i]]) {
            *f = m + noise.sample(&mut rng);
        }
    }

    let mut relations: Vec<LocalRelation> =
        spec.relations.iter().map(|t| LocalRelation { text: t.clone(), kind: RelationKind::Edge }).collect();
    let mut edges = Vec::new();
    for r in 0..relations.len() {
        for u in 0..n {
            for v in (u + 1)..n {
                let p = if labels[u] == labels[v] { spec.intra_p } else { spec.inter_p };
                if rng.random::<f64>() < p {
                    edges.push(Edge { src: u, dst: v, relation: r });
                    edges.push(Edge { src: v, dst: u, relation: r });
                }
            }
        }
    }

    let class_texts = if spec.class_texts.is_empty() {
        (0..c).map(|k| format!("category {k}")).collect()
    } else if spec.class_texts.len() == c {
        spec.class_texts.clone()
    } else {
        return Err(GraphError::Invalid("class_texts length differs from n_classes".into()));
    };

    let assign = |len: usize, rng: &mut ChaCha8Rng| -> Vec<Split> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        let n_train = ((len as f64) * spec.train_frac).round() as usize;
        let n_val = ((len as f64) * spec.val_frac).round() as usize;
        let mut s = vec![Split::Test; len];
        for (rank, &i) in order.iter().enumerate() {
            s[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        s
    };

    let (cls_relation, node_splits, edge_splits) = match spec.task {
        TaskKind::Node => {
            let idx = match relations.iter().position(|r| r.text == spec.cls_relation_text) {
                Some(i) => i,
                None => {
                    relations.push(LocalRelation {
                        text: spec.cls_relation_text.clone(),
                        kind: RelationKind::Classification,
                    });
                    relations.len() - 1
                }
            };
            (Some(idx), Some(stratified_splits(&labels, c, spec.train_frac, spec.val_frac, &mut rng)), None)
        }
        TaskKind::Link => {
            let s = assign(edges.len(), &mut rng);
            (None, None, Some(s))
        }
    };

    let ds = GraphDataset {
        id: spec.id.clone(),
        description: spec.description.clone(),
        task: spec.task,
        features,
        relations,
        edges,
        labels: Some(labels),
        class_texts,
        cls_relation,
        node_splits,
        edge_splits,
    };
    ds.validate()?;
    Ok(ds)
}

/// Per-class shuffled split so every class appears in the training split.
fn stratified_splits(labels: &[usize], classes: usize, train: f64, val: f64, rng: &mut ChaCha8Rng) -> Vec<Split> {
    let mut out = vec![Split::Test; labels.len()];
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(rng);
        let m = members.len();
        let n_train = (((m as f64) * train).round() as usize).max(1).min(m);
        let n_val = (((m as f64) * val).round() as usize).min(m - n_train);
        for (rank, &i) in members.iter().enumerate() {
            out[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out
}

/// Ball of radius `k` around `center`, edges taken as undirected, with the
/// induced edge set.
pub fn extract_k_hop_subgraph(ds: &GraphDataset, center: usize, k: usize) -> Result<Subgraph, GraphError> {
    let n = ds.node_count();
    if center >= n {
        return Err(GraphError::CenterOutOfRange { center, len: n });
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in &ds.edges {
        adj[e.src].push(e.dst);
        adj[e.dst].push(e.src);
    }
    let mut dist = vec![usize::MAX; n];
    dist[center] = 0;
    let mut queue = VecDeque::from([center]);
    while let Some(u) = queue.pop_front() {
        if dist[u] == k {
            continue;
        }
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let members: Vec<usize> = (0..n).filter(|&i| dist[i] != usize::MAX).collect();
    let edges = ds
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| dist[e.src] != usize::MAX && dist[e.dst] != usize::MAX)
        .map(|(i, _)| i)
        .collect();
    Ok(Subgraph { center, members, edges })
}

/// One label node per class: the mean of `aligned` rows over the training
/// nodes of that class.
pub fn compute_label_centroids(ds: &GraphDataset, aligned: &Tensor) -> Result<Vec<LabelNode>, GraphError> {
    let labels = ds.labels.as_ref().ok_or_else(|| GraphError::Invalid(format!("{}: no labels", ds.id)))?;
    if ds.node_splits.is_none() {
        return Err(GraphError::Invalid(format!("{}: no node splits", ds.id)));
    }
    if aligned.rows() != ds.node_count() {
        return Err(GraphError::Invalid(format!(
            "aligned features have {} rows for {} nodes",
            aligned.rows(),
            ds.node_count()
        )));
    }
    let d = aligned.cols();
    let mut sums = vec![vec![0.0; d]; ds.class_count()];
    let mut counts = vec![0usize; ds.class_count()];
    for i in ds.nodes_in(Split::Train) {
        counts[labels[i]] += 1;
        for (s, v) in sums[labels[i]].iter_mut().zip(aligned.row(i)) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(class, (sum, count))| {
            if count == 0 {
                return Err(GraphError::EmptyClass { class, text: ds.class_texts[class].clone() });
            }
            Ok(LabelNode {
                class_index: class,
                centroid: sum.into_iter().map(|s| s / count as f64).collect(),
                dataset_id: ds.id.clone(),
            })
        })
        .collect()
}

/// A positive `⟨node, cls, true label⟩` per node of `split` followed by
/// `neg_per_pos` negatives with a uniformly drawn wrong label.
pub fn build_classification_triplets(
    ds: &GraphDataset,
    split: Split,
    neg_per_pos: usize,
    seed: u64,
) -> Result<Vec<Triplet>, GraphError> {
    let labels = ds.labels.as_ref().ok_or_else(|| GraphError::Invalid(format!("{}: no labels", ds.id)))?;
    let relation = ds
        .cls_relation
        .ok_or_else(|| GraphError::Invalid(format!("{}: no classification relation", ds.id)))?;
    let c = ds.class_count();
    if c < 2 {
        return Err(GraphError::Invalid(format!("{}: classification needs at least 2 classes", ds.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for node in ds.nodes_in(split) {
        let truth = labels[node];
        out.push(Triplet { head: node, relation, tail: Counterpart::Label(truth), positive: true });
        for _ in 0..neg_per_pos {
            let mut wrong = rng.random_range(0..c - 1);
            if wrong >= truth {
                wrong += 1;
            }
            out.push(Triplet { head: node, relation, tail: Counterpart::Label(wrong), positive: false });
        }
    }
    Ok(out)
}

/// Positive `⟨u, r, v⟩` per edge of `split` plus `neg_per_pos` tail
/// corruptions `⟨u, r, v′⟩`, with `v′ ≠ u` and `(u, r, v′)` never an
/// observed edge of any split.
pub fn build_link_triplets(
    ds: &GraphDataset,
    split: Split,
    neg_per_pos: usize,
    seed: u64,
) -> Result<Vec<Triplet>, GraphError> {
    let n = ds.node_count();
    if n < 2 {
        return Err(GraphError::Invalid(format!("{}: link corruption needs at least 2 nodes", ds.id)));
    }
    if ds.edge_splits.is_none() {
        return Err(GraphError::Invalid(format!("{}: no edge splits", ds.id)));
    }
    let observed: HashSet<(usize, usize, usize)> = ds.edges.iter().map(|e| (e.src, e.relation, e.dst)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for k in ds.edges_in(split) {
        let e = ds.edges[k];
        out.push(Triplet { head: e.src, relation: e.relation, tail: Counterpart::Node(e.dst), positive: true });
        for _ in 0..neg_per_pos {
            let mut found = None;
            for _ in 0..MAX_CORRUPTION_ATTEMPTS {
                let v = rng.random_range(0..n);
                if v != e.src && !observed.contains(&(e.src, e.relation, v)) {
                    found = Some(v);
                    break;
                }
            }
            let v = found.ok_or(GraphError::ResamplingExhausted {
                src: e.src,
                relation: e.relation,
                dst: e.dst,
                attempts: MAX_CORRUPTION_ATTEMPTS,
            })?;
            out.push(Triplet { head: e.src, relation: e.relation, tail: Counterpart::Node(v), positive: false });
        }
    }
    Ok(out)
}

/// Unordered node pairs `(min, max)` joined by an edge of the given relation.
pub fn undirected_pairs(ds: &GraphDataset, relation: usize) -> BTreeSet<(usize, usize)> {
    ds.edges
        .iter()
        .filter(|e| e.relation == relation)
        .map(|e| (e.src.min(e.dst), e.src.max(e.dst)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        fs::write(dir.join(name), text).unwrap();
    }

    fn node_meta(dir: &Path) {
        write(
            dir,
            "meta.json",
            r#"{"id":"tiny","description":"tiny graph","class_texts":["a","b"],"cls_relation_text":"kind","task":"node"}"#,
        );
    }

    #[test]
    fn minimal_dataset_loads() {
        let d = tempfile::tempdir().unwrap();
        node_meta(d.path());
        write(d.path(), "nodes.tsv", "0\t1.5\t-2\n");
        write(d.path(), "edges.tsv", "");
        write(d.path(), "labels.tsv", "0\t1\n");
        write(d.path(), "splits.tsv", "0\ttrain\n");
        let ds = load_dataset(d.path()).unwrap();
        assert_eq!(ds.node_count(), 1);
        assert!(ds.edges.is_empty());
        assert_eq!(ds.labels, Some(vec![1]));
        assert_eq!(ds.relations[ds.cls_relation.unwrap()].kind, RelationKind::Classification);
    }

    #[test]
    fn parallel_edges_are_kept() {
        let d = tempfile::tempdir().unwrap();
        node_meta(d.path());
        write(d.path(), "nodes.tsv", "0\t1\n1\t2\n2\t3\n");
        write(d.path(), "edges.tsv", "0\t1\tcites\n0\t1\tcites\n1\t2\tcites\n");
        write(d.path(), "labels.tsv", "0\t0\n1\t1\n2\t0\n");
        write(d.path(), "splits.tsv", "0\ttrain\n1\ttrain\n2\tval\n");
        let ds = load_dataset(d.path()).unwrap();
        assert_eq!(ds.edges.len(), 3);
        assert_eq!(ds.edges[0], ds.edges[1]);
    }

    #[test]
    fn dangling_edge_names_row() {
        let d = tempfile::tempdir().unwrap();
        node_meta(d.path());
        write(d.path(), "nodes.tsv", &(0..10).map(|i| format!("{i}\t0\n")).collect::<String>());
        write(d.path(), "edges.tsv", "0\t1\tcites\n3\t99\tcites\n");
        let err = load_dataset(d.path()).unwrap_err();
        match err {
            GraphError::Dangling { file, line, index, .. } => {
                assert_eq!((file.as_str(), line, index), ("edges.tsv", 2, 99));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn split_overlap_and_missing_file() {
        let d = tempfile::tempdir().unwrap();
        node_meta(d.path());
        write(d.path(), "nodes.tsv", "0\t1\n1\t1\n");
        write(d.path(), "edges.tsv", "");
        write(d.path(), "labels.tsv", "0\t0\n1\t1\n");
        assert!(matches!(load_dataset(d.path()), Err(GraphError::MissingFile { .. })));
        write(d.path(), "splits.tsv", "0\ttrain\n1\tval\n0\ttest\n");
        assert!(matches!(load_dataset(d.path()), Err(GraphError::SplitOverlap { line: 3, .. })));
        write(d.path(), "nodes.tsv", "0\t1\n1\tx\n");
        assert!(matches!(load_dataset(d.path()), Err(GraphError::Malformed { line: 2, .. })));
    }

    fn spec(n: usize, intra: f64, inter: f64) -> SyntheticSpec {
        SyntheticSpec { n_nodes: n, intra_p: intra, inter_p: inter, feature_dim: 4, ..SyntheticSpec::default() }
    }

    #[test]
    fn degenerate_block_probabilities_give_cliques() {
        let ds = generate_synthetic(&SyntheticSpec { relations: vec!["r".into()], ..spec(4, 1.0, 0.0) }, 3).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        for e in &ds.edges {
            assert_eq!(labels[e.src], labels[e.dst]);
        }
        // two classes of two nodes, one relation: one pair per class, both directions
        assert_eq!(ds.edges.len(), 4);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(&spec(40, 0.3, 0.05), 42).unwrap();
        let b = generate_synthetic(&spec(40, 0.3, 0.05), 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec(40, 0.3, 0.05), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn intra_block_density_concentrates() {
        let ds = generate_synthetic(&SyntheticSpec { relations: vec!["r".into()], ..spec(200, 0.5, 0.0) }, 8).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        let pairs = undirected_pairs(&ds, 0);
        let mut possible = 0usize;
        for u in 0..200 {
            for v in (u + 1)..200 {
                if labels[u] == labels[v] {
                    possible += 1;
                }
            }
        }
        let density = pairs.len() as f64 / possible as f64;
        assert!((density - 0.5).abs() < 0.1, "density {density}");
    }

    #[test]
    fn invalid_probability_rejected() {
        assert!(generate_synthetic(&spec(10, 1.5, 0.0), 0).is_err());
        assert!(generate_synthetic(&spec(10, 0.5, -0.1), 0).is_err());
    }

    fn path_graph() -> GraphDataset {
        GraphDataset {
            id: "path".into(),
            description: "path".into(),
            task: TaskKind::Link,
            features: Tensor::zeros(3, 1),
            relations: vec![LocalRelation { text: "next".into(), kind: RelationKind::Edge }],
            edges: vec![Edge { src: 0, dst: 1, relation: 0 }, Edge { src: 1, dst: 2, relation: 0 }],
            labels: None,
            class_texts: vec![],
            cls_relation: None,
            node_splits: None,
            edge_splits: Some(vec![Split::Train, Split::Train]),
        }
    }

    #[test]
    fn k_hop_basics() {
        let ds = path_graph();
        let s0 = extract_k_hop_subgraph(&ds, 0, 0).unwrap();
        assert_eq!(s0.members, vec![0]);
        assert!(s0.edges.is_empty());
        let s1 = extract_k_hop_subgraph(&ds, 0, 1).unwrap();
        assert_eq!(s1.members, vec![0, 1]);
        assert_eq!(s1.edges, vec![0]);
        assert!(matches!(extract_k_hop_subgraph(&ds, 5, 1), Err(GraphError::CenterOutOfRange { .. })));
    }

    fn labelled(features: Tensor, labels: Vec<usize>, splits: Vec<Split>, classes: usize) -> GraphDataset {
        GraphDataset {
            id: "lab".into(),
            description: "labelled".into(),
            task: TaskKind::Node,
            features,
            relations: vec![LocalRelation { text: "kind".into(), kind: RelationKind::Classification }],
            edges: vec![],
            labels: Some(labels),
            class_texts: (0..classes).map(|c| format!("c{c}")).collect(),
            cls_relation: Some(0),
            node_splits: Some(splits),
            edge_splits: None,
        }
    }

    #[test]
    fn centroid_edge_cases() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, -2.0], vec![1.0, 2.0], vec![7.0, 7.0]]).unwrap();
        let ds = labelled(x.clone(), vec![0, 0, 1, 1], vec![Split::Train, Split::Train, Split::Train, Split::Test], 2);
        let c = compute_label_centroids(&ds, &x).unwrap();
        assert_eq!(c[0].centroid, vec![0.0, 0.0]);
        assert_eq!(c[1].centroid, vec![1.0, 2.0]);

        let ds = labelled(x.clone(), vec![0, 0, 0, 1], vec![Split::Train, Split::Train, Split::Train, Split::Test], 2);
        assert!(matches!(compute_label_centroids(&ds, &x), Err(GraphError::EmptyClass { class: 1, .. })));
    }

    #[test]
    fn classification_triplets_two_classes() {
        let ds = labelled(Tensor::zeros(4, 1), vec![0, 1, 0, 1], vec![Split::Train; 4], 2);
        let t = build_classification_triplets(&ds, Split::Train, 1, 0).unwrap();
        assert_eq!(t.len(), 8);
        for pair in t.chunks(2) {
            assert!(pair[0].positive && !pair[1].positive);
            let (Counterpart::Label(a), Counterpart::Label(b)) = (pair[0].tail, pair[1].tail) else { panic!() };
            assert_eq!(a + b, 1);
        }
        assert_eq!(build_classification_triplets(&ds, Split::Train, 0, 0).unwrap().len(), 4);
        let one = labelled(Tensor::zeros(1, 1), vec![0], vec![Split::Train], 1);
        assert!(build_classification_triplets(&one, Split::Train, 1, 0).is_err());
    }

    #[test]
    fn link_corruption_exhaustion() {
        let mut ds = path_graph();
        ds.features = Tensor::zeros(2, 1);
        ds.edges = vec![Edge { src: 0, dst: 1, relation: 0 }];
        ds.edge_splits = Some(vec![Split::Train]);
        assert!(matches!(
            build_link_triplets(&ds, Split::Train, 1, 0),
            Err(GraphError::ResamplingExhausted { .. })
        ));
        assert_eq!(build_link_triplets(&ds, Split::Train, 0, 0).unwrap().len(), 1);
    }

    #[test]
    fn write_then_load_round_trips() {
        let ds = generate_synthetic(&spec(30, 0.4, 0.1), 5).unwrap();
        let d = tempfile::tempdir().unwrap();
        write_dataset(&ds, d.path()).unwrap();
        let back = load_dataset(d.path()).unwrap();
        assert_eq!(back, ds);
    }
}
