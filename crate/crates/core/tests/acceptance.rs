//! Acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! `cargo test -p reef-core --test acceptance` runs all of them; numeric
//! arguments (`-- 2 5`) select a subset.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use reef::align::fit_alignment;
use reef::gradcheck::gradcheck_suite;
use reef::graph::{
    build_classification_triplets, extract_k_hop_subgraph, generate_synthetic, Edge, GraphDataset, LocalRelation,
    RelationKind, Split, SyntheticSpec, TaskKind,
};
use reef::harness::{
    gen_synth, pretrain_datasets, pretrain_run, sweep_run, transfer_over_seeds, Ablation, RunConfig, SweepAxis,
};
use reef::metrics::{binary_metrics, classification_metrics, Metrics};
use reef::model::{propagate, EdgeView, LayerWeights, ModelConfig, PreparedDataset, Reef};
use reef::numerics::{Tape, Tensor};
use reef::train::evaluate_triplets;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect()).unwrap()
}

fn mean(v: &[Metrics]) -> f64 {
    v.iter().map(|m| m.acc).sum::<f64>() / v.len() as f64
}

fn bare_graph(features: Tensor, relations: usize, edges: Vec<Edge>) -> GraphDataset {
    GraphDataset {
        id: "g".into(),
        description: "random graph".into(),
        task: TaskKind::Node,
        features,
        relations: (0..relations)
            .map(|r| LocalRelation { text: format!("relation {r}"), kind: RelationKind::Edge })
            .collect(),
        edges,
        labels: None,
        class_texts: Vec::new(),
        cls_relation: None,
        node_splits: None,
        edge_splits: None,
    }
}

fn gradient_fidelity() -> Outcome {
    let config = ModelConfig { d_x: 8, d_h: 4, ..ModelConfig::default() };
    let start = Instant::now();
    let report = match gradcheck_suite(&config, 20, 6, None, 2024) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let elapsed = start.elapsed();
    outcome(
        report.passed() && elapsed < Duration::from_secs(60),
        format!(
            "{} entries over 20 instances, {} mismatches, worst relative {:.2e} above the 1e-7 floor, largest gradient {:.3}, forward gap {:.1e}, {:.1}s (limit 60s)",
            report.checked,
            report.failures.len(),
            report.worst_relative,
            report.largest_gradient,
            report.forward_gap,
            elapsed.as_secs_f64()
        ),
    )
}

/// Layer by layer, node by node, straight from the edge list.
fn naive_propagate(h0: &Tensor, edges: &[Edge], layers: &[(Tensor, Vec<Tensor>)]) -> Tensor {
    let n = h0.rows();
    let mut h = h0.clone();
    for (p, phis) in layers {
        let d_out = p.rows();
        let mut next = Tensor::zeros(n, d_out);
        for i in 0..n {
            let mut acc = vec![0.0; d_out];
            for o in 0..d_out {
                acc[o] = (0..h.cols()).map(|c| p.get(o, c) * h.get(i, c)).sum();
            }
            for (r, phi) in phis.iter().enumerate() {
                let sources: Vec<usize> =
                    edges.iter().filter(|e| e.dst == i && e.relation == r).map(|e| e.src).collect();
                if sources.is_empty() {
                    continue;
                }
                for o in 0..d_out {
                    let mut s = 0.0;
                    for &j in &sources {
                        for c in 0..h.cols() {
                            s += phi.get(o, c) * h.get(j, c);
                        }
                    }
                    acc[o] += s / sources.len() as f64;
                }
            }
            for (o, v) in acc.into_iter().enumerate() {
                next.set(i, o, v.max(0.0));
            }
        }
        h = next;
    }
    h
}

fn message_passing_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut active = 0usize;
    for _ in 0..100 {
        let n = rng.random_range(1..=32);
        let relations = rng.random_range(1..=4);
        let m = rng.random_range(0..=4 * n);
        // Self-loops and parallel edges are allowed on purpose.
        let edges: Vec<Edge> = (0..m)
            .map(|_| Edge {
                src: rng.random_range(0..n),
                dst: rng.random_range(0..n),
                relation: rng.random_range(0..relations),
            })
            .collect();
        let layers = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(1..=6)];
        for _ in 0..layers {
            dims.push(rng.random_range(1..=6));
        }
        let h0 = gaussian(&mut rng, n, dims[0]);
        let weights: Vec<(Tensor, Vec<Tensor>)> = (0..layers)
            .map(|l| {
                let p = gaussian(&mut rng, dims[l + 1], dims[l]);
                let phis = (0..relations).map(|_| gaussian(&mut rng, dims[l + 1], dims[l])).collect();
                (p, phis)
            })
            .collect();
        let expected = naive_propagate(&h0, &edges, &weights);

        let ds = bare_graph(h0.clone(), relations, edges);
        let groups = ds.in_neighbors(|_| true, n);
        let mut tape = Tape::new();
        let h = tape.constant(h0);
        let stack: Vec<LayerWeights> = weights
            .iter()
            .map(|(p, phis)| LayerWeights {
                self_map: tape.constant(p.clone()),
                relations: groups.iter().map(|(&r, g)| (Arc::new(g.clone()), tape.constant(phis[r].clone()))).collect(),
            })
            .collect();
        let out = match propagate(&mut tape, h, &stack, 0.5, false, 0) {
            Ok(v) => tape.value(v).clone(),
            Err(e) => return outcome(false, format!("error: {e}")),
        };
        active += out.data().iter().filter(|&&v| v > 0.0).count();
        for (a, b) in out.data().iter().zip(expected.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-10 && active > 0 && elapsed < Duration::from_secs(30),
        format!("100 graphs, max abs difference {worst:.2e} (limit 1e-10), {:.2}s (limit 30s)", elapsed.as_secs_f64()),
    )
}

/// Restricts `prep` to the members of a subgraph, keeping the aligned rows and
/// label centroids computed on the whole graph.
fn restrict(prep: &PreparedDataset, members: &[usize], edges: &[usize]) -> PreparedDataset {
    let ds = &prep.dataset;
    let local: BTreeMap<usize, usize> = members.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let sub = GraphDataset {
        features: ds.features.select_rows(members),
        edges: edges
            .iter()
            .map(|&k| {
                let e = ds.edges[k];
                Edge { src: local[&e.src], dst: local[&e.dst], relation: e.relation }
            })
            .collect(),
        labels: ds.labels.as_ref().map(|l| members.iter().map(|&i| l[i]).collect()),
        node_splits: ds.node_splits.as_ref().map(|s| members.iter().map(|&i| s[i]).collect()),
        edge_splits: None,
        ..(**ds).clone()
    };
    PreparedDataset {
        dataset: Arc::new(sub),
        aligned: prep.aligned.select_rows(members),
        centroids: prep.centroids.clone(),
        relation_ids: prep.relation_ids.clone(),
    }
}

fn subgraph_locality() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut proper = 0;
    let mut nonzero = 0;
    for (layers, seed) in [(1usize, 1u64), (2, 2), (3, 3)] {
        let spec = SyntheticSpec { n_nodes: 80, intra_p: 0.04, inter_p: 0.005, feature_dim: 12, ..SyntheticSpec::default() };
        let ds = generate_synthetic(&spec, seed).unwrap();
        let config = ModelConfig { d_x: 12, d_h: 16, layers, ..ModelConfig::default() };
        let encoder = reef::text::TextEncoder::hashing(config.d_t).unwrap();
        let mut model = Reef::new(config, seed);
        let prep = model.prepare(&ds, &encoder, seed, false).unwrap();
        let full = model.node_representations(&prep, &EdgeView::base(&ds)).unwrap();
        for center in 0..ds.node_count() {
            let sub = extract_k_hop_subgraph(&ds, center, layers).unwrap();
            let local = sub.members.binary_search(&center).unwrap();
            let sprep = restrict(&prep, &sub.members, &sub.edges);
            let part = model.node_representations(&sprep, &EdgeView::all(&sprep.dataset)).unwrap();
            for (a, b) in full.row(center).iter().zip(part.row(local)) {
                worst = worst.max((a - b).abs());
            }
            checked += 1;
            proper += usize::from(sub.members.len() < ds.node_count());
            nonzero += usize::from(full.row(center).iter().any(|&v| v != 0.0));
        }
    }
    outcome(
        worst <= 1e-10 && proper > 0 && nonzero > 0,
        format!(
            "{checked} centers for L = 1, 2, 3 ({proper} with a proper subgraph), max abs difference {worst:.2e} (limit 1e-10), {:.2}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn svd_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut compared = 0;
    let mut rank_ok = true;
    for trial in 0..50u64 {
        let n = rng.random_range(1..=40);
        let d = rng.random_range(1..=30);
        let k = rng.random_range(1..=n.min(d));
        // Column scales spread the spectrum so leading values are well separated.
        let mut x = gaussian(&mut rng, n, d);
        for c in 0..d {
            let s = 0.8f64.powi(c as i32);
            for r in 0..n {
                x.set(r, c, x.get(r, c) * s);
            }
        }
        let basis = match fit_alignment(&x, k, trial) {
            Ok(b) => b,
            Err(e) => return outcome(false, format!("error: {e}")),
        };
        let mut oracle: Vec<f64> = nalgebra::DMatrix::from_row_slice(n, d, x.data()).singular_values().iter().copied().collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        rank_ok &= basis.d_eff() == k;
        for (a, b) in basis.singulars.iter().zip(&oracle) {
            worst = worst.max((a - b).abs() / b.abs());
            compared += 1;
        }
    }
    outcome(
        worst <= 1e-6 && rank_ok,
        format!("50 matrices, {compared} singular values, max relative error {worst:.2e} (limit 1e-6), all ranks full: {rank_ok}"),
    )
}

fn brute_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// F1 from precision and recall of one class; zero without a true positive.
fn brute_f1(predicted: &[bool], truth: &[bool]) -> f64 {
    let tp = predicted.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / predicted.iter().filter(|&&p| p).count() as f64;
    let recall = tp / truth.iter().filter(|&&t| t).count() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn random_score(rng: &mut ChaCha8Rng, coarse: bool) -> f64 {
    let s: f64 = rng.random();
    if coarse {
        (s * 4.0).round() / 4.0
    } else {
        s
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let n = rng.random_range(1..=50);
        let coarse = trial % 3 == 0;
        if trial % 2 == 0 {
            let scores: Vec<f64> = (0..n).map(|_| random_score(&mut rng, coarse)).collect();
            let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let got = binary_metrics(&scores, &truth);
            let predicted: Vec<bool> = scores.iter().map(|&s| s > 0.5).collect();
            let acc = predicted.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / n as f64;
            let auc = brute_auc(&scores, &truth).unwrap_or(0.5);
            let f1 = brute_f1(&predicted, &truth);
            worst = worst.max((got.acc - acc).abs()).max((got.auc - auc).abs()).max((got.f1 - f1).abs());
        } else {
            let c = rng.random_range(2..=5);
            let probs = Tensor::from_vec(n, c, (0..n * c).map(|_| random_score(&mut rng, coarse)).collect()).unwrap();
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let got = classification_metrics(&probs, &truth);
            let predicted: Vec<usize> = (0..n)
                .map(|i| {
                    let row = probs.row(i);
                    let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.iter().position(|&v| v == top).unwrap()
                })
                .collect();
            let acc = predicted.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / n as f64;
            let mut f1s = Vec::new();
            let mut aucs = Vec::new();
            for k in 0..c {
                let pk: Vec<bool> = predicted.iter().map(|&p| p == k).collect();
                let tk: Vec<bool> = truth.iter().map(|&t| t == k).collect();
                if pk.iter().chain(&tk).any(|&b| b) {
                    f1s.push(brute_f1(&pk, &tk));
                }
                let column: Vec<f64> = (0..n).map(|i| probs.get(i, k)).collect();
                aucs.extend(brute_auc(&column, &tk));
            }
            let f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
            let auc = if aucs.is_empty() { 0.5 } else { aucs.iter().sum::<f64>() / aucs.len() as f64 };
            worst = worst.max((got.acc - acc).abs()).max((got.auc - auc).abs()).max((got.f1 - f1).abs());
        }
    }
    outcome(worst <= 1e-12, format!("100 score sets, max difference {worst:.2e} (limit 1e-12)"))
}

fn pretraining_signal() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec {
        n_nodes: 200,
        n_classes: 2,
        intra_p: 0.3,
        inter_p: 0.02,
        noise: 0.5,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec, 1).unwrap();
    let cfg = RunConfig { seed: 1, ..RunConfig::default() };
    let result = (|| -> Result<f64, Box<dyn std::error::Error>> {
        let out = pretrain_datasets(&cfg, std::slice::from_ref(&ds))?;
        let encoder = cfg.encoder()?;
        let mut model = out.best_model;
        let prep = model.prepare(&ds, &encoder, 0, false)?;
        let triplets = build_classification_triplets(&ds, Split::Val, 1, 5)?;
        Ok(evaluate_triplets(&model, &prep, &triplets)?.acc)
    })();
    let elapsed = start.elapsed();
    match result {
        Ok(acc) => outcome(
            acc >= 0.95 && elapsed < Duration::from_secs(600),
            format!(
                "validation triplet accuracy {acc:.4} (need 0.95) after {} epochs, {:.1}s (limit 600s)",
                cfg.epochs,
                elapsed.as_secs_f64()
            ),
        ),
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

/// Source A and target B: same relation texts, different graphs, features
/// only weakly informative so structure carries the signal.
fn transfer_pair() -> (GraphDataset, GraphDataset) {
    let spec = |id: &str, description: &str| SyntheticSpec {
        id: id.into(),
        description: description.into(),
        n_nodes: 200,
        n_classes: 3,
        intra_p: 0.1,
        inter_p: 0.01,
        noise: 2.0,
        feature_dim: 16,
        ..SyntheticSpec::default()
    };
    (
        generate_synthetic(&spec("source", "synthetic block graph alpha"), 11).unwrap(),
        generate_synthetic(&spec("target", "synthetic block graph beta"), 12).unwrap(),
    )
}

struct TransferResults {
    scratch: Vec<Metrics>,
    variants: Vec<(&'static str, Vec<Metrics>)>,
    elapsed: Duration,
}

fn transfer_results() -> Result<TransferResults, Box<dyn std::error::Error>> {
    let start = Instant::now();
    let (a, b) = transfer_pair();
    let cfg = RunConfig { sweep_seeds: 5, ..RunConfig::default() };
    let scratch = transfer_over_seeds(&cfg, &[], &b)?;
    let mut variants = Vec::new();
    for (name, c) in [
        ("full", cfg.clone()),
        ("no feature bias", cfg.clone().with_ablation(Ablation::Fb)),
        ("no projector", cfg.clone().with_ablation(Ablation::Fp)),
        ("no augmentation", cfg.clone().with_ablation(Ablation::Agu)),
    ] {
        variants.push((name, transfer_over_seeds(&c, std::slice::from_ref(&a), &b)?));
    }
    Ok(TransferResults { scratch, variants, elapsed: start.elapsed() })
}

fn per_seed(v: &[Metrics]) -> String {
    v.iter().map(|m| format!("{:.3}", m.acc)).collect::<Vec<_>>().join(" ")
}

fn transfer_benefit(r: &TransferResults) -> Outcome {
    let scratch = mean(&r.scratch);
    let full = mean(&r.variants[0].1);
    outcome(
        full - scratch >= 0.05,
        format!(
            "fine-tuned {full:.4} [{}] vs scratch {scratch:.4} [{}], gain {:+.1} points (need +5.0)",
            per_seed(&r.variants[0].1),
            per_seed(&r.scratch),
            100.0 * (full - scratch)
        ),
    )
}

fn ablation_ordering(r: &TransferResults) -> Outcome {
    let full = mean(&r.variants[0].1);
    let mut pass = true;
    let mut parts = vec![format!("full {full:.4}")];
    for (name, v) in &r.variants[1..] {
        let m = mean(v);
        pass &= full + 0.01 >= m;
        parts.push(format!("{name} {m:.4}"));
    }
    outcome(pass, format!("{} (ties within 1 point), {:.0}s for criteria 7 and 8", parts.join(", "), r.elapsed.as_secs_f64()))
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    if let Err(e) = gen_synth(&SyntheticSpec::default(), 3, &data) {
        return outcome(false, format!("error: {e}"));
    }
    let cfg = RunConfig { seed: 9, epochs: 10, datasets: vec![data], ..RunConfig::default() };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        if let Err(e) = pretrain_run(&cfg, dir) {
            return outcome(false, format!("error: {e}"));
        }
    }
    let (ta, tb) = (tree(&a), tree(&b));
    let same = ta == tb && ta.contains_key(Path::new("metrics.csv")) && ta.contains_key(Path::new("checkpoint/tensors.txt"));
    outcome(same, format!("{} files compared byte for byte, identical: {same}", ta.len()))
}

fn scaling_harness() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let spec = |id: &str, description: &str, classes: usize| SyntheticSpec {
        id: id.into(),
        description: description.into(),
        n_nodes: 200,
        n_classes: classes,
        intra_p: 0.1,
        inter_p: 0.01,
        noise: 2.0,
        feature_dim: 16,
        ..SyntheticSpec::default()
    };
    let specs = [
        (spec("source1", "synthetic block graph alpha", 3), 11),
        (spec("source2", "synthetic block graph gamma", 2), 13),
        (spec("source3", "synthetic block graph delta", 4), 14),
        (spec("target", "synthetic block graph beta", 3), 12),
    ];
    let mut paths = Vec::new();
    for (s, seed) in &specs {
        let p = tmp.path().join(&s.id);
        if let Err(e) = gen_synth(s, *seed, &p) {
            return outcome(false, format!("error: {e}"));
        }
        paths.push(p);
    }
    let target = paths.pop();
    let cfg = RunConfig { sweep_seeds: 5, datasets: paths, target, ..RunConfig::default() };
    let out = tmp.path().join("sweep");
    let report = match sweep_run(&cfg, SweepAxis::Datasets, &out) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let (ok, steps) = report.nondecreasing_steps();
    let means: Vec<String> = report.rows.iter().map(|r| format!("{}: {:.4}", r.value, r.mean().acc)).collect();
    let summary = fs::read_to_string(out.join("sweep_summary.txt")).unwrap_or_default();
    outcome(
        steps == 3 && ok >= 2 && out.join("sweep.csv").exists(),
        format!(
            "mean accuracy by collection size [{}]; {} ({:.0}s)",
            means.join(", "),
            summary.trim(),
            start.elapsed().as_secs_f64()
        ),
    )
}

const NAMES: [&str; 10] = [
    "gradient fidelity",
    "message-passing oracle",
    "subgraph locality",
    "singular values",
    "metric oracles",
    "synthetic pretraining signal",
    "transfer benefit",
    "ablation ordering",
    "determinism",
    "scaling harness",
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).filter(|n| (1..=10).contains(n)).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);

    let mut transfer: Option<Result<TransferResults, String>> = None;
    let mut failures = 0;
    for n in 1..=10 {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let result = match n {
            1 => gradient_fidelity(),
            2 => message_passing_oracle(),
            3 => subgraph_locality(),
            4 => svd_oracle(),
            5 => metric_oracles(),
            6 => pretraining_signal(),
            7 | 8 => {
                let r = transfer.get_or_insert_with(|| transfer_results().map_err(|e| e.to_string()));
                match r {
                    Ok(r) if n == 7 => transfer_benefit(r),
                    Ok(r) => ablation_ordering(r),
                    Err(e) => outcome(false, format!("error: {e}")),
                }
            }
            9 => determinism(),
            _ => scaling_harness(),
        };
        failures += usize::from(!result.pass);
        println!(
            "[{}] {n:>2} {}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            NAMES[n - 1],
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
