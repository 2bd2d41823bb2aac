//! Finite-difference checking of the model's analytic gradients.
//!
//! The loss is re-evaluated by a plain-loop reference forward that shares no
//! code with the tape. Hypernetwork intermediates are cached so that
//! perturbing one weight only updates the generated maps it feeds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::graph::{Counterpart, Edge, GraphDataset, LocalRelation, RelationKind, Split, TaskKind, Triplet};
use crate::model::{context_param, EdgeView, ModelConfig, ModelError, PreparedDataset, Reef, VOCAB_PARAM};
use crate::numerics::{Tape, Tensor, BCE_CLAMP};
use crate::seed::derive_seed;
use crate::text::TextEncoder;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub failures: Vec<GradMismatch>,
    /// `|reference loss - tape loss|` at the unperturbed point.
    pub forward_gap: f64,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over
    /// entries above the absolute floor.
    pub worst_relative: f64,
    /// Largest analytic gradient magnitude seen; guards against a vacuous check.
    pub largest_gradient: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty() && self.forward_gap <= 1e-10
    }

    fn merge(&mut self, other: GradcheckReport) {
        self.checked += other.checked;
        self.failures.extend(other.failures);
        self.forward_gap = self.forward_gap.max(other.forward_gap);
        self.worst_relative = self.worst_relative.max(other.worst_relative);
        self.largest_gradient = self.largest_gradient.max(other.largest_gradient);
    }
}

/// A random node-classification instance with `nodes` nodes, two edge
/// relations and two classes, every node in the training split. The model's
/// biases are jittered so no weight sits at a special value.
pub fn random_instance(
    config: &ModelConfig,
    nodes: usize,
    seed: u64,
) -> Result<(Reef, PreparedDataset, Vec<Triplet>), ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_raw = 5;
    let features = Tensor::from_vec(nodes, d_raw, (0..nodes * d_raw).map(|_| rng.sample(StandardNormal)).collect())?;
    let mut edges = Vec::new();
    for relation in 0..2 {
        for src in 0..nodes {
            for dst in 0..nodes {
                if src != dst && rng.random::<f64>() < 0.3 {
                    edges.push(Edge { src, dst, relation });
                }
            }
        }
    }
    let mut labels: Vec<usize> = (0..nodes).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let ds = GraphDataset {
        id: format!("gradcheck{seed}"),
        description: "random relational graph for gradient checking".into(),
        task: TaskKind::Node,
        features,
        relations: vec![
            LocalRelation { text: "links to".into(), kind: RelationKind::Edge },
            LocalRelation { text: "co occurs with".into(), kind: RelationKind::Edge },
            LocalRelation { text: "node class".into(), kind: RelationKind::Classification },
        ],
        edges,
        labels: Some(labels.clone()),
        class_texts: vec!["first".into(), "second".into()],
        cls_relation: Some(2),
        node_splits: Some(vec![Split::Train; nodes]),
        edge_splits: None,
    };
    let encoder = TextEncoder::hashing(config.d_t).map_err(ModelError::Text)?;
    let mut model = Reef::new(config.clone(), derive_seed(seed, &[1]));
    let prep = model.prepare(&ds, &encoder, seed, false)?;
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for name in names {
        if name.ends_with(".b1") || name.ends_with(".b2") {
            for v in model.params.get_mut(&name).expect("listed").data_mut() {
                *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    let mut triplets = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        triplets.push(Triplet { head: i, relation: 2, tail: Counterpart::Label(y), positive: true });
        triplets.push(Triplet { head: i, relation: 2, tail: Counterpart::Label(1 - y), positive: false });
    }
    for _ in 0..4 {
        let head = rng.random_range(0..nodes);
        let tail = rng.random_range(0..nodes);
        triplets.push(Triplet { head, relation: rng.random_range(0..2), tail: Counterpart::Node(tail), positive: rng.random() });
    }
    Ok((model, prep, triplets))
}

/// Cached two-layer MLP evaluation over a set of input rows.
#[derive(Clone)]
struct MlpCache {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    out: Vec<Vec<f64>>,
}

impl MlpCache {
    fn new(params: &crate::numerics::ParamStore, prefix: &str, inputs: Vec<Vec<f64>>) -> Self {
        let get = |s: &str| params.get(&format!("{prefix}.{s}")).expect("hypernetwork parameter").clone();
        let mut cache = Self { w1: get("w1"), b1: get("b1"), w2: get("w2"), b2: get("b2"), inputs, pre: vec![], out: vec![] };
        cache.recompute();
        cache
    }

    fn recompute(&mut self) {
        let (d_in, d_hid, d_out) = (self.w1.rows(), self.w1.cols(), self.w2.cols());
        self.pre.clear();
        self.out.clear();
        for x in &self.inputs {
            let pre: Vec<f64> =
                (0..d_hid).map(|j| (0..d_in).map(|i| x[i] * self.w1.get(i, j)).sum::<f64>() + self.b1.get(0, j)).collect();
            let out: Vec<f64> = (0..d_out)
                .map(|k| (0..d_hid).map(|j| pre[j].max(0.0) * self.w2.get(j, k)).sum::<f64>() + self.b2.get(0, k))
                .collect();
            self.pre.push(pre);
            self.out.push(out);
        }
    }

    /// Outputs after adding `delta` to entry `index` of weight `which`.
    fn perturbed(&self, which: &str, index: usize, delta: f64) -> Vec<Vec<f64>> {
        let mut out = self.out.clone();
        let d_out = self.w2.cols();
        for (row, x) in self.inputs.iter().enumerate() {
            match which {
                "w1" | "b1" => {
                    let (i, j) = if which == "w1" { (index / self.w1.cols(), index % self.w1.cols()) } else { (0, index) };
                    let scale = if which == "w1" { x[i] } else { 1.0 };
                    let before = self.pre[row][j].max(0.0);
                    let after = (self.pre[row][j] + delta * scale).max(0.0);
                    for k in 0..d_out {
                        out[row][k] += (after - before) * self.w2.get(j, k);
                    }
                }
                "w2" => {
                    let (j, k) = (index / d_out, index % d_out);
                    out[row][k] += delta * self.pre[row][j].max(0.0);
                }
                "b2" => out[row][index] += delta,
                _ => unreachable!("unknown hypernetwork weight {which}"),
            }
        }
        out
    }
}

/// Maps generated for one forward pass, indexed by local relation.
#[derive(Clone)]
struct Generated {
    /// `[layer][relation]`, row-major `d_out × d_in`.
    agg: Vec<Vec<Vec<f64>>>,
    /// `[relation]`, length `d_h`.
    cls: Vec<Vec<f64>>,
    /// `[layer]`, row-major `d_out × d_in`.
    self_maps: Vec<Vec<f64>>,
    feat: Option<Vec<f64>>,
}

struct Reference<'a> {
    model: &'a Reef,
    prep: &'a PreparedDataset,
    triplets: &'a [Triplet],
    /// `groups[relation][row]` holds in-neighbour rows.
    groups: Vec<Vec<Vec<usize>>>,
    agg: Vec<MlpCache>,
    cls: MlpCache,
    proj: Vec<Option<MlpCache>>,
    feat: Option<MlpCache>,
}

impl<'a> Reference<'a> {
    fn new(model: &'a Reef, prep: &'a PreparedDataset, triplets: &'a [Triplet], view: &EdgeView) -> Self {
        let ds = &prep.dataset;
        let rows = prep.total_rows();
        let mut groups = vec![vec![Vec::new(); rows]; ds.relations.len()];
        for (k, e) in ds.edges.iter().enumerate() {
            if view.keeps(k) {
                groups[e.relation][e.dst].push(e.src);
            }
        }
        let vocab = model.params.get(VOCAB_PARAM).expect("vocabulary");
        let rel_rows: Vec<Vec<f64>> = prep.relation_ids.iter().map(|&id| vocab.row(id).to_vec()).collect();
        let h_t = model.params.get(&context_param(&ds.id)).expect("context").row(0).to_vec();
        let cfg = &model.config;
        Self {
            model,
            prep,
            triplets,
            groups,
            agg: (0..cfg.layers).map(|l| MlpCache::new(&model.params, &format!("agg.{l}"), rel_rows.clone())).collect(),
            cls: MlpCache::new(&model.params, "cls", rel_rows),
            proj: (0..cfg.layers)
                .map(|l| cfg.projector.then(|| MlpCache::new(&model.params, &format!("proj.{l}"), vec![h_t.clone()])))
                .collect(),
            feat: cfg.feature_bias.then(|| MlpCache::new(&model.params, "feat", vec![h_t.clone()])),
        }
    }

    fn generated(&self) -> Generated {
        let self_maps = self
            .proj
            .iter()
            .enumerate()
            .map(|(l, p)| match p {
                Some(c) => c.out[0].clone(),
                None => self.model.params.get(&format!("self.{l}.w")).expect("self map").data().to_vec(),
            })
            .collect();
        Generated {
            agg: self.agg.iter().map(|c| c.out.clone()).collect(),
            cls: self.cls.out.clone(),
            self_maps,
            feat: self.feat.as_ref().map(|c| c.out[0].clone()),
        }
    }

    fn loss(&self, g: &Generated) -> f64 {
        let cfg = &self.model.config;
        let init = self.prep.initial_states();
        let rows = init.rows();
        let mut h: Vec<Vec<f64>> = (0..rows)
            .map(|i| {
                let mut r = init.row(i).to_vec();
                if let Some(b) = &g.feat {
                    for (x, bi) in r.iter_mut().zip(b) {
                        *x += bi;
                    }
                }
                r
            })
            .collect();
        for l in 0..cfg.layers {
            let (d_in, d_out) = cfg.layer_dims(l);
            let mut next = vec![vec![0.0; d_out]; rows];
            for i in 0..rows {
                for o in 0..d_out {
                    let mut s = 0.0;
                    for k in 0..d_in {
                        s += g.self_maps[l][o * d_in + k] * h[i][k];
                    }
                    for (r, groups) in self.groups.iter().enumerate() {
                        let nb = &groups[i];
                        if nb.is_empty() {
                            continue;
                        }
                        let mut m = 0.0;
                        for &j in nb {
                            for k in 0..d_in {
                                m += g.agg[l][r][o * d_in + k] * h[j][k];
                            }
                        }
                        s += m / nb.len() as f64;
                    }
                    next[i][o] = s.max(0.0);
                }
            }
            h = next;
        }
        let mut total = 0.0;
        for t in self.triplets {
            let j = self.prep.row_of(t.tail);
            let logit: f64 = (0..cfg.d_h).map(|k| g.cls[t.relation][k] * h[t.head][k] * h[j][k]).sum();
            let p = (1.0 / (1.0 + (-logit).exp())).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= if t.positive { p.ln() } else { (1.0 - p).ln() };
        }
        total / self.triplets.len() as f64
    }

    /// Loss with entry `index` of parameter `name` shifted by `delta`.
    fn shifted_loss(&self, base: &Generated, name: &str, index: usize, delta: f64) -> f64 {
        let mut g = base.clone();
        let (prefix, which) = name.rsplit_once('.').expect("dotted name");
        if let Some(l) = prefix.strip_prefix("agg.").and_then(|s| s.parse::<usize>().ok()) {
            g.agg[l] = self.agg[l].perturbed(which, index, delta);
        } else if prefix == "cls" {
            g.cls = self.cls.perturbed(which, index, delta);
        } else if let Some(l) = prefix.strip_prefix("proj.").and_then(|s| s.parse::<usize>().ok()) {
            g.self_maps[l] = self.proj[l].as_ref().expect("projector").perturbed(which, index, delta).swap_remove(0);
        } else if prefix == "feat" {
            g.feat = Some(self.feat.as_ref().expect("feature bias").perturbed(which, index, delta).swap_remove(0));
        } else if let Some(l) = prefix.strip_prefix("self.").and_then(|s| s.parse::<usize>().ok()) {
            g.self_maps[l][index] += delta;
        } else if name == VOCAB_PARAM {
            let d_t = self.model.config.d_t;
            let (id, col) = (index / d_t, index % d_t);
            for (local, &gid) in self.prep.relation_ids.iter().enumerate() {
                if gid != id {
                    continue;
                }
                for (l, cache) in self.agg.iter().enumerate() {
                    g.agg[l][local] = shifted_input(cache, local, col, delta);
                }
                g.cls[local] = shifted_input(&self.cls, local, col, delta);
            }
        } else if name.starts_with("context.") {
            for (l, p) in self.proj.iter().enumerate() {
                if let Some(c) = p {
                    g.self_maps[l] = shifted_input(c, 0, index, delta);
                }
            }
            if let Some(c) = &self.feat {
                g.feat = Some(shifted_input(c, 0, index, delta));
            }
        } else {
            unreachable!("parameter {name} has no reference path");
        }
        self.loss(&g)
    }
}

fn shifted_input(cache: &MlpCache, row: usize, col: usize, delta: f64) -> Vec<f64> {
    let mut c = cache.clone();
    c.inputs = vec![cache.inputs[row].clone()];
    c.inputs[0][col] += delta;
    c.recompute();
    c.out.swap_remove(0)
}

/// Compares tape gradients of the mean triplet BCE (evaluation mode) with
/// central differences. `sample` limits the number of scalar entries
/// checked; `None` checks every trainable entry.
pub fn check_gradients(
    model: &Reef,
    prep: &PreparedDataset,
    triplets: &[Triplet],
    sample: Option<usize>,
    seed: u64,
) -> Result<GradcheckReport, ModelError> {
    let view = EdgeView::base(&prep.dataset).excluding_positives(&prep.dataset, triplets);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let p = model.forward_batch(&mut tape, &bound, prep, triplets, &view, false, 0)?;
    let targets = Tensor::from_vec(triplets.len(), 1, triplets.iter().map(Triplet::target).collect())?;
    let loss = tape.bce_loss(p, &targets)?;
    let grads = tape.backward(loss)?;

    let reference = Reference::new(model, prep, triplets, &view);
    let base = reference.generated();
    let forward_gap = (reference.loss(&base) - tape.value(loss).item()).abs();

    let foreign_context = |name: &str| name.starts_with("context.") && name != context_param(prep.id());
    let mut entries: Vec<(String, usize)> = bound
        .iter()
        .filter(|(name, _)| model.is_trainable(name) && !foreign_context(name))
        .flat_map(|(name, var)| (0..tape.value(var).len()).map(move |i| (name.to_string(), i)))
        .collect();
    if let Some(k) = sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        entries.shuffle(&mut rng);
        entries.truncate(k);
    }
    let analytic: BTreeMap<&str, Tensor> =
        bound.iter().map(|(name, var)| (name, grads.get(var))).collect();

    let mut report = GradcheckReport { forward_gap, ..GradcheckReport::default() };
    for (name, index) in entries {
        let a = analytic[name.as_str()].data()[index];
        let plus = reference.shifted_loss(&base, &name, index, FD_STEP);
        let minus = reference.shifted_loss(&base, &name, index, -FD_STEP);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let scale = a.abs().max(numeric.abs());
        report.largest_gradient = report.largest_gradient.max(a.abs());
        let err = (a - numeric).abs();
        if err > ABS_FLOOR {
            report.worst_relative = report.worst_relative.max(err / scale);
        }
        if err > (REL_TOL * scale).max(ABS_FLOOR) {
            report.failures.push(GradMismatch { param: name, index, analytic: a, numeric });
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Runs [`check_gradients`] over `instances` random graphs.
pub fn gradcheck_suite(
    config: &ModelConfig,
    instances: usize,
    nodes: usize,
    sample: Option<usize>,
    seed: u64,
) -> Result<GradcheckReport, ModelError> {
    let mut total = GradcheckReport::default();
    for k in 0..instances {
        let s = derive_seed(seed, &[k as u64]);
        let (model, prep, triplets) = random_instance(config, nodes, s)?;
        total.merge(check_gradients(&model, &prep, &triplets, sample, s)?);
    }
    Ok(total)
}
