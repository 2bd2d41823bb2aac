//! The relation-token model.
//!
//! Every relation token carries an embedding `h_r`. Two-layer hypernetworks
//! turn `h_r` into a per-layer aggregator matrix and a classifier vector, and
//! turn a dataset's description embedding `h_t` into a per-layer self
//! projector and an additive feature bias. Node states are updated as
//!
//! ```text
//! h_i' = ReLU( P_G h_i + Σ_r mean_{j ∈ N_i^r} A_r h_j )
//! ```
//!
//! and a triplet `⟨i, r, j⟩` is scored `sigmoid(c_r · (h_i ∘ h_j))`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::align::{align, fit_alignment, AlignError, AlignmentBasis};
use crate::graph::{Counterpart, GraphDataset, GraphError, RelationKind, Split, TaskKind, Triplet};
use crate::numerics::{read_tensor_file, write_tensor_file, NumericsError, ParamStore, RowGroups, Tape, Tensor, Var};
use crate::seed::derive_seed;
use crate::text::{fnv1a64, TextEncoder, TextError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("text embedding has length {found}, model expects {expected}")]
    EmbeddingWidth { expected: usize, found: usize },
    #[error("dataset `{0}` is not registered with the model")]
    UnknownDataset(String),
    #[error("relation `{0}` has no aggregator")]
    UnbuiltRelation(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_x: usize,
    pub d_h: usize,
    pub d_t: usize,
    pub d_hyp: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Add the generated dataset feature bias to initial node states.
    pub feature_bias: bool,
    /// Generate the self projector from the dataset embedding. When off, each
    /// layer uses one shared plain linear self transform.
    pub projector: bool,
    pub learnable_relations: bool,
    /// Draw relation embeddings from `N(0, 1/d_t)` instead of encoding their text.
    pub random_relation_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_x: 128,
            d_h: 64,
            d_t: 128,
            d_hyp: 64,
            layers: 2,
            dropout: 0.5,
            feature_bias: true,
            projector: true,
            learnable_relations: false,
            random_relation_init: false,
        }
    }
}

impl ModelConfig {
    /// Width of node states entering layer `l` (0-based) and leaving it.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let d_in = if l == 0 { self.d_x } else { self.d_h };
        (d_in, self.d_h)
    }

    pub fn manifest_entries(&self) -> Vec<(String, String)> {
        vec![
            ("d_x".into(), self.d_x.to_string()),
            ("d_h".into(), self.d_h.to_string()),
            ("d_t".into(), self.d_t.to_string()),
            ("d_hyp".into(), self.d_hyp.to_string()),
            ("layers".into(), self.layers.to_string()),
            ("dropout".into(), format!("{:?}", self.dropout)),
            ("no_feature_bias".into(), (!self.feature_bias).to_string()),
            ("no_projector".into(), (!self.projector).to_string()),
            ("learnable_relation_embeddings".into(), self.learnable_relations.to_string()),
            ("no_lm_init".into(), self.random_relation_init.to_string()),
        ]
    }

    fn from_manifest(m: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T, ModelError> {
            m.get(k)
                .ok_or_else(|| ModelError::Checkpoint(format!("manifest lacks `{k}`")))?
                .parse()
                .map_err(|_| ModelError::Checkpoint(format!("manifest value for `{k}` is malformed")))
        }
        Ok(Self {
            d_x: get(m, "d_x")?,
            d_h: get(m, "d_h")?,
            d_t: get(m, "d_t")?,
            d_hyp: get(m, "d_hyp")?,
            layers: get(m, "layers")?,
            dropout: get(m, "dropout")?,
            feature_bias: !get::<bool>(m, "no_feature_bias")?,
            projector: !get::<bool>(m, "no_projector")?,
            learnable_relations: get(m, "learnable_relation_embeddings")?,
            random_relation_init: get(m, "no_lm_init")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationToken {
    pub id: usize,
    pub text: String,
    pub kind: RelationKind,
}

/// Relation tokens in id order. Row `i` of the `vocab.embeddings` parameter
/// belongs to token `i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelationVocabulary {
    tokens: Vec<RelationToken>,
    index: BTreeMap<String, usize>,
}

impl RelationVocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[RelationToken] {
        &self.tokens
    }

    pub fn id(&self, text: &str) -> Option<usize> {
        self.index.get(text).copied()
    }

    fn push(&mut self, text: &str, kind: RelationKind) -> usize {
        let id = self.tokens.len();
        self.tokens.push(RelationToken { id, text: text.to_string(), kind });
        self.index.insert(text.to_string(), id);
        id
    }
}

pub const VOCAB_PARAM: &str = "vocab.embeddings";

pub fn context_param(dataset_id: &str) -> String {
    format!("context.{dataset_id}")
}

/// A dataset ready for message passing: aligned features, label-node
/// centroids and the mapping from its relation table to vocabulary ids.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub dataset: Arc<GraphDataset>,
    /// `node_count × d_x`.
    pub aligned: Tensor,
    /// `C × d_x`; empty for datasets without labels.
    pub centroids: Tensor,
    /// Vocabulary id of each local relation.
    pub relation_ids: Vec<usize>,
}

impl PreparedDataset {
    pub fn id(&self) -> &str {
        &self.dataset.id
    }

    /// Rows of the state matrix: graph nodes followed by label nodes.
    pub fn total_rows(&self) -> usize {
        self.dataset.node_count() + self.centroids.rows()
    }

    pub fn row_of(&self, c: Counterpart) -> usize {
        match c {
            Counterpart::Node(i) => i,
            Counterpart::Label(k) => self.dataset.node_count() + k,
        }
    }

    /// Initial states before the feature bias: aligned features stacked over centroids.
    pub fn initial_states(&self) -> Tensor {
        self.aligned.vstack(&self.centroids).expect("same width")
    }
}

/// Which edges of a dataset take part in message passing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeView {
    keep: Vec<bool>,
}

impl EdgeView {
    /// Every edge for node tasks; the training edges for link tasks.
    pub fn base(ds: &GraphDataset) -> Self {
        let keep = match (ds.task, &ds.edge_splits) {
            (TaskKind::Link, Some(s)) => s.iter().map(|&x| x == Split::Train).collect(),
            _ => vec![true; ds.edges.len()],
        };
        Self { keep }
    }

    pub fn all(ds: &GraphDataset) -> Self {
        Self { keep: vec![true; ds.edges.len()] }
    }

    pub fn from_mask(keep: Vec<bool>) -> Self {
        Self { keep }
    }

    pub fn keeps(&self, edge: usize) -> bool {
        self.keep[edge]
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Logical AND with an augmentation mask.
    pub fn intersect(&self, mask: &[bool]) -> Self {
        Self { keep: self.keep.iter().zip(mask).map(|(a, b)| *a && *b).collect() }
    }

    /// Drops every edge joining the endpoints of a positive node-to-node
    /// triplet under the triplet's relation, in either direction.
    pub fn excluding_positives(&self, ds: &GraphDataset, triplets: &[Triplet]) -> Self {
        let scored: std::collections::HashSet<(usize, usize, usize)> = triplets
            .iter()
            .filter(|t| t.positive)
            .filter_map(|t| match t.tail {
                Counterpart::Node(v) => Some((t.head.min(v), t.head.max(v), t.relation)),
                Counterpart::Label(_) => None,
            })
            .collect();
        if scored.is_empty() {
            return self.clone();
        }
        let keep = ds
            .edges
            .iter()
            .zip(&self.keep)
            .map(|(e, &k)| k && !scored.contains(&(e.src.min(e.dst), e.src.max(e.dst), e.relation)))
            .collect();
        Self { keep }
    }
}

/// Weights for one message-passing layer: the self map and, per relation,
/// its in-neighbour groups with the aggregator matrix (`d_out × d_in`).
pub struct LayerWeights {
    pub self_map: Var,
    pub relations: Vec<(RowGroups, Var)>,
}

/// Runs the layer stack from `h0`. ReLU follows every layer; dropout follows
/// every layer but the last when `training`.
pub fn propagate(
    tape: &mut Tape,
    h0: Var,
    layers: &[LayerWeights],
    dropout: f64,
    training: bool,
    seed: u64,
) -> Result<Var, ModelError> {
    let mut h = h0;
    for (l, layer) in layers.iter().enumerate() {
        let mut acc = tape.matmul_t(h, layer.self_map)?;
        for (groups, phi) in &layer.relations {
            let mean = tape.mean_rows(h, groups.clone())?;
            let msg = tape.matmul_t(mean, *phi)?;
            acc = tape.add(acc, msg)?;
        }
        h = tape.relu(acc);
        if l + 1 < layers.len() {
            h = tape.dropout(h, dropout, derive_seed(seed, &[l as u64]), training)?;
        }
    }
    Ok(h)
}

/// `sigmoid(Σ_k c_k · a_k · b_k)` per row; all inputs `B × d`.
pub fn score(tape: &mut Tape, heads: Var, tails: Var, classifiers: Var) -> Result<Var, ModelError> {
    let joint = tape.hadamard(heads, tails)?;
    let weighted = tape.hadamard(joint, classifiers)?;
    let logits = tape.row_sum(weighted);
    Ok(tape.sigmoid(logits))
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reef {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vocab: RelationVocabulary,
    /// Alignment basis per registered dataset id.
    pub alignments: BTreeMap<String, AlignmentBasis>,
    pub init_seed: u64,
}

fn hyper_names(prefix: &str) -> [String; 4] {
    ["w1", "b1", "w2", "b2"].map(|s| format!("{prefix}.{s}"))
}

impl Reef {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1417]));
        let mut params = ParamStore::new();
        let (d_t, d_hyp) = (config.d_t, config.d_hyp);
        let hyper = |params: &mut ParamStore, prefix: &str, d_out: usize, fan: usize, rng: &mut ChaCha8Rng| {
            let [w1, b1, w2, b2] = hyper_names(prefix);
            params.insert(&w1, gaussian(rng, d_t, d_hyp, 1.0));
            params.insert(&b1, Tensor::zeros(1, d_hyp));
            params.insert(&w2, gaussian(rng, d_hyp, d_out, 1.0 / ((d_hyp * fan) as f64).sqrt()));
            params.insert(&b2, Tensor::zeros(1, d_out));
        };
        for l in 0..config.layers {
            let (d_in, d_out) = config.layer_dims(l);
            hyper(&mut params, &format!("agg.{l}"), d_out * d_in, d_in, &mut rng);
        }
        hyper(&mut params, "cls", config.d_h, config.d_h, &mut rng);
        for l in 0..config.layers {
            let (d_in, d_out) = config.layer_dims(l);
            if config.projector {
                hyper(&mut params, &format!("proj.{l}"), d_out * d_in, d_in, &mut rng);
            } else {
                params.insert(&format!("self.{l}.w"), gaussian(&mut rng, d_out, d_in, 1.0 / (d_in as f64).sqrt()));
            }
        }
        if config.feature_bias {
            hyper(&mut params, "feat", config.d_x, config.d_x, &mut rng);
        }
        params.insert(VOCAB_PARAM, Tensor::zeros(0, d_t));
        Self { config, params, vocab: RelationVocabulary::default(), alignments: BTreeMap::new(), init_seed: seed }
    }

    /// Same layout as [`Reef::new`] with every hypernetwork and self-map
    /// weight set to zero.
    pub fn zeroed(config: ModelConfig) -> Self {
        let mut model = Self::new(config, 0);
        let names: Vec<String> =
            model.params.names().filter(|n| *n != VOCAB_PARAM && !n.starts_with("context.")).map(String::from).collect();
        for n in names {
            let t = model.params.get_mut(&n).expect("listed");
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        model
    }

    /// Vocabulary id for `text`, appending a new token when absent.
    pub fn register_relation(
        &mut self,
        text: &str,
        kind: RelationKind,
        encoder: &TextEncoder,
    ) -> Result<usize, ModelError> {
        if let Some(id) = self.vocab.id(text) {
            return Ok(id);
        }
        let d_t = self.config.d_t;
        let row = if self.config.random_relation_init {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.init_seed, &[fnv1a64(text.as_bytes())]));
            let normal = Normal::new(0.0, 1.0 / (d_t as f64).sqrt()).expect("positive std");
            (0..d_t).map(|_| normal.sample(&mut rng)).collect()
        } else {
            encoder.encode(text)?.vector
        };
        if row.len() != d_t {
            return Err(ModelError::EmbeddingWidth { expected: d_t, found: row.len() });
        }
        for tok in self.vocab.tokens() {
            let existing = self.params.get(VOCAB_PARAM).expect("vocab").row(tok.id);
            if existing == row.as_slice() {
                log::warn!("relation `{text}` has the same embedding as `{}`", tok.text);
            }
        }
        let emb = self.params.get(VOCAB_PARAM).expect("vocab");
        let grown = emb.vstack(&Tensor::row_vector(&row))?;
        self.params.insert(VOCAB_PARAM, grown);
        Ok(self.vocab.push(text, kind))
    }

    /// Registers the dataset's relations, creates its context embedding (or
    /// replaces it when `fresh_context`), fits its alignment basis when none
    /// is stored, and computes label-node centroids from its training split.
    pub fn prepare(
        &mut self,
        ds: &GraphDataset,
        encoder: &TextEncoder,
        align_seed: u64,
        fresh_context: bool,
    ) -> Result<PreparedDataset, ModelError> {
        ds.validate()?;
        let relation_ids = ds
            .relations
            .iter()
            .map(|r| self.register_relation(&r.text, r.kind, encoder))
            .collect::<Result<Vec<_>, _>>()?;

        let ctx = context_param(&ds.id);
        if fresh_context || !self.params.contains(&ctx) {
            let h = encoder.encode(&ds.description)?.vector;
            if h.len() != self.config.d_t {
                return Err(ModelError::EmbeddingWidth { expected: self.config.d_t, found: h.len() });
            }
            self.params.insert(&ctx, Tensor::row_vector(&h));
        }
        if fresh_context || !self.alignments.contains_key(&ds.id) {
            let basis = fit_alignment(&ds.features, self.config.d_x, align_seed)?;
            self.alignments.insert(ds.id.clone(), basis);
        }
        self.prepared_view(ds, relation_ids)
    }

    /// Recomputes aligned features and centroids for an already registered dataset.
    pub fn prepared_view(&self, ds: &GraphDataset, relation_ids: Vec<usize>) -> Result<PreparedDataset, ModelError> {
        let basis = self.alignments.get(&ds.id).ok_or_else(|| ModelError::UnknownDataset(ds.id.clone()))?;
        let aligned = align(&ds.features, basis)?;
        let centroids = if ds.labels.is_some() && ds.node_splits.is_some() && ds.task == TaskKind::Node {
            let nodes = crate::graph::compute_label_centroids(ds, &aligned)?;
            Tensor::from_rows(&nodes.into_iter().map(|n| n.centroid).collect::<Vec<_>>())?
        } else {
            Tensor::zeros(0, self.config.d_x)
        };
        Ok(PreparedDataset { dataset: Arc::new(ds.clone()), aligned, centroids, relation_ids })
    }

    /// Places every parameter on `tape`. Relation embeddings are constants
    /// unless configured learnable.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if name == VOCAB_PARAM && !self.config.learnable_relations {
                    tape.constant(t.clone())
                } else {
                    tape.param(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    fn mlp(&self, tape: &mut Tape, bound: &Bound, prefix: &str, input: Var) -> Result<Var, ModelError> {
        let [w1, b1, w2, b2] = hyper_names(prefix).map(|n| bound.var(&n).expect("hypernetwork parameter"));
        let z = tape.matmul(input, w1)?;
        let z = tape.add(z, b1)?;
        let hidden = tape.relu(z);
        let out = tape.matmul(hidden, w2)?;
        Ok(tape.add(out, b2)?)
    }

    fn relation_rows(&self, tape: &mut Tape, bound: &Bound, ids: &[usize]) -> Result<Var, ModelError> {
        let emb = bound.var(VOCAB_PARAM).expect("vocabulary");
        Ok(tape.gather_rows(emb, ids)?)
    }

    /// Aggregator matrices (`d_out × d_in`) for layer `l`, one per vocabulary id.
    pub fn build_aggregators(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ids: &[usize],
        l: usize,
    ) -> Result<Vec<Var>, ModelError> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let (d_in, d_out) = self.config.layer_dims(l);
        let rows = self.relation_rows(tape, bound, ids)?;
        let flat = self.mlp(tape, bound, &format!("agg.{l}"), rows)?;
        (0..ids.len())
            .map(|k| {
                let row = tape.gather_rows(flat, &[k])?;
                Ok(tape.reshape(row, d_out, d_in)?)
            })
            .collect()
    }

    /// Classifier vectors stacked as rows: `ids.len() × d_h`.
    pub fn build_classifiers(&self, tape: &mut Tape, bound: &Bound, ids: &[usize]) -> Result<Var, ModelError> {
        let rows = self.relation_rows(tape, bound, ids)?;
        self.mlp(tape, bound, "cls", rows)
    }

    /// Self map of layer `l` for the dataset whose embedding is `h_t`.
    pub fn build_projector(&self, tape: &mut Tape, bound: &Bound, h_t: Var, l: usize) -> Result<Var, ModelError> {
        if !self.config.projector {
            return Ok(bound.var(&format!("self.{l}.w")).expect("self map"));
        }
        let (d_in, d_out) = self.config.layer_dims(l);
        let flat = self.mlp(tape, bound, &format!("proj.{l}"), h_t)?;
        Ok(tape.reshape(flat, d_out, d_in)?)
    }

    /// `1 × d_x` feature bias, or `None` when the bias is disabled.
    pub fn feature_bias(&self, tape: &mut Tape, bound: &Bound, h_t: Var) -> Result<Option<Var>, ModelError> {
        if !self.config.feature_bias {
            return Ok(None);
        }
        Ok(Some(self.mlp(tape, bound, "feat", h_t)?))
    }

    /// Final-layer states for every node and label node of `prep`.
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prep: &PreparedDataset,
        view: &EdgeView,
        training: bool,
        seed: u64,
    ) -> Result<Var, ModelError> {
        let ds = &prep.dataset;
        let h_t = bound.var(&context_param(&ds.id)).ok_or_else(|| ModelError::UnknownDataset(ds.id.clone()))?;
        let mut h = tape.constant(prep.initial_states());
        if let Some(bias) = self.feature_bias(tape, bound, h_t)? {
            h = tape.add(h, bias)?;
        }
        let groups = ds.in_neighbors(|k| view.keeps(k), prep.total_rows());
        let local: Vec<usize> = groups.keys().copied().collect();
        let ids: Vec<usize> = local.iter().map(|&r| prep.relation_ids[r]).collect();
        let shared: Vec<RowGroups> = groups.into_values().map(Arc::new).collect();

        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let self_map = self.build_projector(tape, bound, h_t, l)?;
            let phis = self.build_aggregators(tape, bound, &ids, l)?;
            layers.push(LayerWeights { self_map, relations: shared.iter().cloned().zip(phis).collect() });
        }
        propagate(tape, h, &layers, self.config.dropout, training, seed)
    }

    /// Probabilities (`B × 1`) for a batch of triplets on one dataset.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prep: &PreparedDataset,
        triplets: &[Triplet],
        view: &EdgeView,
        training: bool,
        seed: u64,
    ) -> Result<Var, ModelError> {
        let h = self.encode_graph(tape, bound, prep, view, training, seed)?;
        let heads: Vec<usize> = triplets.iter().map(|t| t.head).collect();
        let tails: Vec<usize> = triplets.iter().map(|t| prep.row_of(t.tail)).collect();
        let hi = tape.gather_rows(h, &heads)?;
        let hj = tape.gather_rows(h, &tails)?;

        let mut used: Vec<usize> = triplets.iter().map(|t| prep.relation_ids[t.relation]).collect();
        used.sort_unstable();
        used.dedup();
        let psi_all = self.build_classifiers(tape, bound, &used)?;
        let pick: Vec<usize> = triplets
            .iter()
            .map(|t| used.binary_search(&prep.relation_ids[t.relation]).expect("collected above"))
            .collect();
        let psi = tape.gather_rows(psi_all, &pick)?;
        score(tape, hi, hj, psi)
    }

    /// Evaluation-mode probabilities, no gradient tracking.
    pub fn predict(&self, prep: &PreparedDataset, triplets: &[Triplet], view: &EdgeView) -> Result<Vec<f64>, ModelError> {
        if triplets.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let p = self.forward_batch(&mut tape, &bound, prep, triplets, view, false, 0)?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Evaluation-mode final states (`(node_count + C) × d_h`).
    pub fn node_representations(&self, prep: &PreparedDataset, view: &EdgeView) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let h = self.encode_graph(&mut tape, &bound, prep, view, false, 0)?;
        Ok(tape.value(h).clone())
    }

    fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.params.iter().map(|(n, t)| (n.to_string(), tape.constant(t.clone()))).collect() }
    }

    /// Names of parameters the optimiser may update.
    pub fn is_trainable(&self, name: &str) -> bool {
        name != VOCAB_PARAM || self.config.learnable_relations
    }

    /// Writes `tensors.txt`, `vocab.tsv` and `manifest.txt` into `dir`.
    pub fn save(&self, dir: &Path, extra_manifest: &[(String, String)]) -> Result<(), ModelError> {
        let io = |e: std::io::Error| ModelError::Io(dir.display().to_string(), e);
        fs::create_dir_all(dir).map_err(io)?;
        let mut all = self.params.clone();
        for (id, b) in &self.alignments {
            all.insert(&format!("align.{id}.basis"), b.basis.clone());
            all.insert(&format!("align.{id}.singulars"), Tensor::row_vector(&b.singulars));
        }
        write_tensor_file(&dir.join("tensors.txt"), &all)?;

        let emb = self.params.get(VOCAB_PARAM).expect("vocab");
        let mut vocab = String::new();
        for tok in self.vocab.tokens() {
            let _ = write!(vocab, "{}\t{}", tok.text, tok.kind.as_str());
            for v in emb.row(tok.id) {
                let _ = write!(vocab, "\t{v:?}");
            }
            vocab.push('\n');
        }
        fs::write(dir.join("vocab.tsv"), vocab).map_err(io)?;

        let mut manifest = String::new();
        let _ = writeln!(manifest, "init_seed = {}", self.init_seed);
        for (k, v) in self.config.manifest_entries().iter().chain(extra_manifest) {
            let _ = writeln!(manifest, "{k} = {v}");
        }
        fs::write(dir.join("manifest.txt"), manifest).map_err(io)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| ModelError::Io(p.display().to_string(), e))
        };
        let manifest: BTreeMap<String, String> = read("manifest.txt")?
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        let config = ModelConfig::from_manifest(&manifest)?;
        let init_seed = manifest
            .get("init_seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ModelError::Checkpoint("manifest lacks `init_seed`".into()))?;

        let mut all = read_tensor_file(&dir.join("tensors.txt"))?;
        let mut alignments = BTreeMap::new();
        let align_ids: Vec<String> = all
            .names()
            .filter_map(|n| n.strip_prefix("align.").and_then(|r| r.strip_suffix(".basis")))
            .map(String::from)
            .collect();
        for id in align_ids {
            let basis = all.remove(&format!("align.{id}.basis")).expect("listed");
            let singulars = all
                .remove(&format!("align.{id}.singulars"))
                .ok_or_else(|| ModelError::Checkpoint(format!("alignment `{id}` lacks singular values")))?;
            alignments.insert(id, AlignmentBasis { basis, singulars: singulars.into_data(), d_x_target: config.d_x });
        }

        let mut vocab = RelationVocabulary::default();
        for (ln, line) in read("vocab.tsv")?.lines().enumerate() {
            let mut f = line.split('\t');
            let (Some(text), Some(kind)) = (f.next(), f.next().and_then(RelationKind::parse)) else {
                return Err(ModelError::Checkpoint(format!("vocab.tsv:{}: malformed row", ln + 1)));
            };
            vocab.push(text, kind);
        }
        let emb_rows = all.get(VOCAB_PARAM).map_or(0, Tensor::rows);
        if emb_rows != vocab.len() {
            return Err(ModelError::Checkpoint(format!(
                "vocabulary has {} tokens but {emb_rows} embedding rows",
                vocab.len()
            )));
        }
        Ok(Self { config, params: all, vocab, alignments, init_seed })
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect()).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, LocalRelation};

    fn tiny_config() -> ModelConfig {
        ModelConfig { d_x: 4, d_h: 3, d_t: 8, d_hyp: 5, layers: 2, dropout: 0.0, ..ModelConfig::default() }
    }

    fn toy_dataset() -> GraphDataset {
        let features = Tensor::from_rows(&[
            vec![1.0, 0.2, -0.3],
            vec![0.5, -1.0, 0.8],
            vec![-0.7, 0.4, 0.1],
            vec![0.3, 0.9, -0.6],
        ])
        .unwrap();
        GraphDataset {
            id: "toy".into(),
            description: "toy citation graph".into(),
            task: TaskKind::Node,
            features,
            relations: vec![
                LocalRelation { text: "cites".into(), kind: RelationKind::Edge },
                LocalRelation { text: "paper topic".into(), kind: RelationKind::Classification },
            ],
            edges: vec![
                Edge { src: 0, dst: 1, relation: 0 },
                Edge { src: 2, dst: 1, relation: 0 },
                Edge { src: 3, dst: 0, relation: 0 },
            ],
            labels: Some(vec![0, 1, 0, 1]),
            class_texts: vec!["a".into(), "b".into()],
            cls_relation: Some(1),
            node_splits: Some(vec![Split::Train; 4]),
            edge_splits: None,
        }
    }

    fn hyper_forward(model: &Reef, prefix: &str, input: &[f64]) -> Vec<f64> {
        let p = |s: &str| model.params.get(&format!("{prefix}.{s}")).unwrap();
        let (w1, b1, w2, b2) = (p("w1"), p("b1"), p("w2"), p("b2"));
        let hidden: Vec<f64> = (0..w1.cols())
            .map(|j| (0..w1.rows()).map(|i| input[i] * w1.get(i, j)).sum::<f64>() + b1.get(0, j))
            .map(|v| v.max(0.0))
            .collect();
        (0..w2.cols())
            .map(|j| (0..w2.rows()).map(|i| hidden[i] * w2.get(i, j)).sum::<f64>() + b2.get(0, j))
            .collect()
    }

    #[test]
    fn zero_hypernetworks_give_zero_maps_and_half_probability() {
        let mut model = Reef::zeroed(tiny_config());
        let enc = TextEncoder::hashing(8).unwrap();
        let prep = model.prepare(&toy_dataset(), &enc, 1, false).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let phis = model.build_aggregators(&mut tape, &bound, &[0], 0).unwrap();
        assert!(tape.value(phis[0]).data().iter().all(|&v| v == 0.0));
        let ctx = bound.var("context.toy").unwrap();
        let bias = model.feature_bias(&mut tape, &bound, ctx).unwrap().unwrap();
        assert!(tape.value(bias).data().iter().all(|&v| v == 0.0));

        let triplets = crate::graph::build_classification_triplets(&prep.dataset, Split::Train, 1, 3).unwrap();
        let p = model.predict(&prep, &triplets, &EdgeView::base(&prep.dataset)).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hypernetworks_match_hand_evaluation() {
        let mut model = Reef::new(tiny_config(), 4);
        let enc = TextEncoder::hashing(8).unwrap();
        let prep = model.prepare(&toy_dataset(), &enc, 1, false).unwrap();
        let emb = model.params.get(VOCAB_PARAM).unwrap().clone();
        let h_t = model.params.get("context.toy").unwrap().row(0).to_vec();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let phis = model.build_aggregators(&mut tape, &bound, &[0, 1], 1).unwrap();
        for (k, phi) in phis.iter().enumerate() {
            let hand = hyper_forward(&model, "agg.1", emb.row(k));
            assert_eq!(tape.shape(*phi), (3, 3));
            for (a, b) in tape.value(*phi).data().iter().zip(&hand) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_ne!(tape.value(phis[0]), tape.value(phis[1]));

        let psi = model.build_classifiers(&mut tape, &bound, &[1]).unwrap();
        let hand = hyper_forward(&model, "cls", emb.row(1));
        for (a, b) in tape.value(psi).data().iter().zip(&hand) {
            assert!((a - b).abs() < 1e-12);
        }

        let ctx = bound.var("context.toy").unwrap();
        let proj = model.build_projector(&mut tape, &bound, ctx, 0).unwrap();
        assert_eq!(tape.shape(proj), (3, 4));
        for (a, b) in tape.value(proj).data().iter().zip(hyper_forward(&model, "proj.0", &h_t)) {
            assert!((a - b).abs() < 1e-12);
        }
        let bias = model.feature_bias(&mut tape, &bound, ctx).unwrap().unwrap();
        for (a, b) in tape.value(bias).data().iter().zip(hyper_forward(&model, "feat", &h_t)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(prep.relation_ids, vec![0, 1]);
    }

    #[test]
    fn identical_descriptions_give_identical_bias() {
        let mut model = Reef::new(tiny_config(), 2);
        let enc = TextEncoder::hashing(8).unwrap();
        let a = toy_dataset();
        let b = GraphDataset { id: "toy2".into(), ..toy_dataset() };
        model.prepare(&a, &enc, 1, false).unwrap();
        model.prepare(&b, &enc, 1, false).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let ba = model.feature_bias(&mut tape, &bound, bound.var("context.toy").unwrap()).unwrap().unwrap();
        let bb = model.feature_bias(&mut tape, &bound, bound.var("context.toy2").unwrap()).unwrap().unwrap();
        assert_eq!(tape.value(ba), tape.value(bb));
    }

    #[test]
    fn score_analytic_points() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(1, 3));
        let other = tape.constant(Tensor::row_vector(&[5.0, -2.0, 1.0]));
        let psi = tape.constant(Tensor::row_vector(&[0.3, 7.0, -1.0]));
        let p = score(&mut tape, zero, other, psi).unwrap();
        assert_eq!(tape.value(p).item(), 0.5);

        let x = 3f64.ln();
        let hi = tape.constant(Tensor::row_vector(&[x, 2.0]));
        let hj = tape.constant(Tensor::row_vector(&[1.0, 4.0]));
        let psi = tape.constant(Tensor::row_vector(&[1.0, 0.0]));
        let p = score(&mut tape, hi, hj, psi).unwrap();
        assert!((tape.value(p).item() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn edgeless_identity_propagation_is_identity() {
        let mut tape = Tape::new();
        let h0 = tape.constant(Tensor::from_rows(&[vec![0.5, 1.0], vec![2.0, 0.1]]).unwrap());
        let eye = tape.constant(Tensor::identity(2));
        let layers = vec![
            LayerWeights { self_map: eye, relations: vec![] },
            LayerWeights { self_map: eye, relations: vec![] },
        ];
        let h = propagate(&mut tape, h0, &layers, 0.5, false, 0).unwrap();
        assert_eq!(tape.value(h), tape.value(h0));
    }

    #[test]
    fn self_loop_single_message() {
        let mut tape = Tape::new();
        let x = Tensor::row_vector(&[0.4, -1.2]);
        let phi = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let h0 = tape.constant(x.clone());
        let zero = tape.constant(Tensor::zeros(2, 2));
        let phi_v = tape.constant(phi.clone());
        let layers = vec![LayerWeights { self_map: zero, relations: vec![(Arc::new(vec![vec![0]]), phi_v)] }];
        let h = propagate(&mut tape, h0, &layers, 0.0, false, 0).unwrap();
        let expected = phi.matmul_t(&x).unwrap().map(|v| v.max(0.0));
        assert_eq!(tape.value(h).data(), expected.data());
    }

    #[test]
    fn frozen_vocabulary_gets_no_gradient() {
        let mut model = Reef::new(tiny_config(), 9);
        let enc = TextEncoder::hashing(8).unwrap();
        let prep = model.prepare(&toy_dataset(), &enc, 1, false).unwrap();
        let triplets = crate::graph::build_classification_triplets(&prep.dataset, Split::Train, 1, 3).unwrap();
        let targets = Tensor::from_vec(triplets.len(), 1, triplets.iter().map(Triplet::target).collect()).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let p = model.forward_batch(&mut tape, &bound, &prep, &triplets, &EdgeView::base(&prep.dataset), false, 0).unwrap();
        let loss = tape.bce_loss(p, &targets).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(!grads.is_connected(bound.var(VOCAB_PARAM).unwrap()));
        for name in ["cls.w2", "agg.1.w2", "proj.1.w2"] {
            let g = grads.get(bound.var(name).unwrap());
            assert!(g.data().iter().any(|&v| v != 0.0), "{name}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = Reef::new(ModelConfig { projector: false, ..tiny_config() }, 5);
        let enc = TextEncoder::hashing(8).unwrap();
        model.prepare(&toy_dataset(), &enc, 1, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), &[("seed".into(), "5".into())]).unwrap();
        let back = Reef::load(dir.path()).unwrap();
        assert_eq!(back, model);
    }
}
