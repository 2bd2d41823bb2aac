//! Run configuration and the experiment commands behind the CLI.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::gradcheck::{gradcheck_suite, GradcheckReport};
use crate::graph::{generate_synthetic, load_dataset, write_dataset, GraphDataset, GraphError, Split, SyntheticSpec, TaskKind};
use crate::metrics::Metrics;
use crate::model::{EdgeView, ModelConfig, ModelError, Reef, VOCAB_PARAM, context_param};
use crate::numerics::DEFAULT_LR;
use crate::text::{load_embeddings, TextEncoder, TextError};
use crate::train::{evaluate, finetune, pretrain, write_metrics_csv, FinetuneOutcome, PretrainOutcome, TrainConfig, TrainError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<ConfigIssue>),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("output directory {0} exists and is not empty")]
    OutputNotEmpty(String),
    #[error("{0}")]
    Missing(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

/// One rejected configuration line or value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: `{}`: {}", self.key, self.message),
            None => write!(f, "`{}`: {}", self.key, self.message),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(path.display().to_string(), e)
}

/// Reads `key = value` lines. `#` starts a comment; blank lines are skipped.
fn parse_pairs(text: &str) -> (Vec<(usize, String, String)>, Vec<ConfigIssue>) {
    let mut pairs = Vec::new();
    let mut issues = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => pairs.push((ln + 1, k.trim().to_string(), v.trim().to_string())),
            None => issues.push(ConfigIssue {
                line: Some(ln + 1),
                key: line.to_string(),
                message: "expected `key = value`".into(),
            }),
        }
    }
    (pairs, issues)
}

fn parse_value<T: std::str::FromStr>(v: &str, what: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got `{v}`"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, what: &str) -> Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_value(s, what)).collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Every knob of a run. Text form is flat `key = value`; unknown keys are errors.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub d_x: usize,
    pub d_h: usize,
    pub d_t: usize,
    pub d_hyp: usize,
    pub layers: usize,
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub p_mask: f64,
    pub neg_per_pos: usize,
    pub shots: usize,
    pub finetune_lr_scale: f64,
    pub finetune_epochs: usize,
    pub patience: usize,
    pub no_lm_init: bool,
    pub no_feature_bias: bool,
    pub no_projector: bool,
    pub no_augment: bool,
    pub learnable_relation_embeddings: bool,
    /// Pretraining datasets; for the dataset sweep, nested prefixes of this list.
    pub datasets: Vec<PathBuf>,
    /// Fine-tuning target.
    pub target: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub sweep_seeds: usize,
    pub sweep_hidden_dims: Vec<usize>,
    pub gradcheck_instances: usize,
    pub gradcheck_nodes: usize,
    /// Scalar entries sampled per gradient-check instance; 0 checks all.
    pub gradcheck_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_x: 128,
            d_h: 64,
            d_t: 128,
            d_hyp: 64,
            layers: 2,
            lr: DEFAULT_LR,
            dropout: 0.5,
            batch_size: 128,
            epochs: 100,
            p_mask: 0.2,
            neg_per_pos: 1,
            shots: 1,
            finetune_lr_scale: 0.1,
            finetune_epochs: 200,
            patience: 20,
            no_lm_init: false,
            no_feature_bias: false,
            no_projector: false,
            no_augment: false,
            learnable_relation_embeddings: false,
            datasets: Vec::new(),
            target: None,
            embeddings: None,
            sweep_seeds: 5,
            sweep_hidden_dims: vec![8, 16, 32, 64],
            gradcheck_instances: 3,
            gradcheck_nodes: 6,
            gradcheck_samples: 2000,
        }
    }
}

/// Ablation switches named after the variants they produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Ablation {
    /// Relation embeddings drawn at random instead of encoded from text.
    Lm,
    /// No dataset feature bias.
    Fb,
    /// Plain shared self transform instead of the generated projector.
    Fp,
    /// No edge-drop augmentation.
    Agu,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lm" => Some(Self::Lm),
            "fb" => Some(Self::Fb),
            "fp" => Some(Self::Fp),
            "agu" => Some(Self::Agu),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lm => "lm",
            Self::Fb => "fb",
            Self::Fp => "fp",
            Self::Agu => "agu",
        }
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = parse_value(v, "an unsigned integer")?,
            "d_x" => self.d_x = parse_value(v, "a positive integer")?,
            "d_h" => self.d_h = parse_value(v, "a positive integer")?,
            "d_t" => self.d_t = parse_value(v, "a positive integer")?,
            "d_hyp" => self.d_hyp = parse_value(v, "a positive integer")?,
            "layers" => self.layers = parse_value(v, "a positive integer")?,
            "lr" => self.lr = parse_value(v, "a number")?,
            "dropout" => self.dropout = parse_value(v, "a number")?,
            "batch_size" => self.batch_size = parse_value(v, "a positive integer")?,
            "epochs" => self.epochs = parse_value(v, "an unsigned integer")?,
            "p_mask" => self.p_mask = parse_value(v, "a number")?,
            "neg_per_pos" => self.neg_per_pos = parse_value(v, "a positive integer")?,
            "shots" => self.shots = parse_value(v, "a positive integer")?,
            "finetune_lr_scale" => self.finetune_lr_scale = parse_value(v, "a number")?,
            "finetune_epochs" => self.finetune_epochs = parse_value(v, "an unsigned integer")?,
            "patience" => self.patience = parse_value(v, "a positive integer")?,
            "no_lm_init" => self.no_lm_init = parse_bool(v)?,
            "no_feature_bias" => self.no_feature_bias = parse_bool(v)?,
            "no_projector" => self.no_projector = parse_bool(v)?,
            "no_augment" => self.no_augment = parse_bool(v)?,
            "learnable_relation_embeddings" => self.learnable_relation_embeddings = parse_bool(v)?,
            "datasets" => self.datasets = parse_list(v, "a path")?,
            "target" => self.target = (!v.is_empty()).then(|| PathBuf::from(v)),
            "embeddings" => self.embeddings = (!v.is_empty()).then(|| PathBuf::from(v)),
            "sweep_seeds" => self.sweep_seeds = parse_value(v, "a positive integer")?,
            "sweep_hidden_dims" => self.sweep_hidden_dims = parse_list(v, "a positive integer")?,
            "gradcheck_instances" => self.gradcheck_instances = parse_value(v, "a positive integer")?,
            "gradcheck_nodes" => self.gradcheck_nodes = parse_value(v, "a positive integer")?,
            "gradcheck_samples" => self.gradcheck_samples = parse_value(v, "an unsigned integer")?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Parses the text form. Relative paths are resolved against `base`.
    /// Every problem is reported, not just the first.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, HarnessError> {
        let (pairs, mut issues) = parse_pairs(text);
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (line, key, value) in pairs {
            if !seen.insert(key.clone()) {
                issues.push(ConfigIssue { line: Some(line), key, message: "given more than once".into() });
                continue;
            }
            if let Err(message) = cfg.set(&key, &value) {
                issues.push(ConfigIssue { line: Some(line), key, message });
            }
        }
        if let Some(base) = base {
            let resolve = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            cfg.datasets.iter_mut().for_each(resolve);
            cfg.target.iter_mut().for_each(resolve);
            cfg.embeddings.iter_mut().for_each(resolve);
        }
        issues.extend(cfg.range_issues());
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(HarnessError::Config(issues))
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let issues = self.range_issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(issues))
        }
    }

    fn range_issues(&self) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        let mut check = |ok: bool, key: &str, message: &str| {
            if !ok {
                issues.push(ConfigIssue { line: None, key: key.into(), message: message.into() });
            }
        };
        for (key, v) in [
            ("d_x", self.d_x),
            ("d_h", self.d_h),
            ("d_hyp", self.d_hyp),
            ("layers", self.layers),
            ("batch_size", self.batch_size),
            ("neg_per_pos", self.neg_per_pos),
            ("shots", self.shots),
            ("patience", self.patience),
            ("sweep_seeds", self.sweep_seeds),
            ("gradcheck_instances", self.gradcheck_instances),
        ] {
            check(v >= 1, key, "must be at least 1");
        }
        check(self.d_t >= 8, "d_t", "must be at least 8");
        check(self.gradcheck_nodes >= 2, "gradcheck_nodes", "must be at least 2");
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive");
        check(self.finetune_lr_scale > 0.0 && self.finetune_lr_scale.is_finite(), "finetune_lr_scale", "must be positive");
        check((0.0..1.0).contains(&self.dropout), "dropout", "must lie in [0, 1)");
        check((0.0..1.0).contains(&self.p_mask), "p_mask", "must lie in [0, 1)");
        check(self.sweep_hidden_dims.iter().all(|&d| d >= 1), "sweep_hidden_dims", "entries must be at least 1");
        issues
    }

    /// Full text form with every key, suitable for reproducing the run.
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let paths: Vec<String> = self.datasets.iter().map(|p| p.display().to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("d_x", self.d_x.to_string());
        kv("d_h", self.d_h.to_string());
        kv("d_t", self.d_t.to_string());
        kv("d_hyp", self.d_hyp.to_string());
        kv("layers", self.layers.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("dropout", format!("{:?}", self.dropout));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("p_mask", format!("{:?}", self.p_mask));
        kv("neg_per_pos", self.neg_per_pos.to_string());
        kv("shots", self.shots.to_string());
        kv("finetune_lr_scale", format!("{:?}", self.finetune_lr_scale));
        kv("finetune_epochs", self.finetune_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("no_lm_init", self.no_lm_init.to_string());
        kv("no_feature_bias", self.no_feature_bias.to_string());
        kv("no_projector", self.no_projector.to_string());
        kv("no_augment", self.no_augment.to_string());
        kv("learnable_relation_embeddings", self.learnable_relation_embeddings.to_string());
        kv("datasets", paths.join(","));
        kv("target", opt(&self.target));
        kv("embeddings", opt(&self.embeddings));
        kv("sweep_seeds", self.sweep_seeds.to_string());
        kv("sweep_hidden_dims", join(&self.sweep_hidden_dims));
        kv("gradcheck_instances", self.gradcheck_instances.to_string());
        kv("gradcheck_nodes", self.gradcheck_nodes.to_string());
        kv("gradcheck_samples", self.gradcheck_samples.to_string());
        s
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        match a {
            Ablation::Lm => self.no_lm_init = true,
            Ablation::Fb => self.no_feature_bias = true,
            Ablation::Fp => self.no_projector = true,
            Ablation::Agu => self.no_augment = true,
        }
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_x: self.d_x,
            d_h: self.d_h,
            d_t: self.d_t,
            d_hyp: self.d_hyp,
            layers: self.layers,
            dropout: self.dropout,
            feature_bias: !self.no_feature_bias,
            projector: !self.no_projector,
            learnable_relations: self.learnable_relation_embeddings,
            random_relation_init: self.no_lm_init,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            p_mask: self.p_mask,
            augment: !self.no_augment,
            neg_per_pos: self.neg_per_pos,
            shots: self.shots,
            finetune_lr_scale: self.finetune_lr_scale,
            finetune_epochs: self.finetune_epochs,
            patience: self.patience,
        }
    }

    /// Encoder of width `d_t`: the embedding table when configured, hashing otherwise.
    pub fn encoder(&self) -> Result<TextEncoder, HarnessError> {
        encoder_for(self.embeddings.as_deref(), self.d_t)
    }
}

fn encoder_for(embeddings: Option<&Path>, d_t: usize) -> Result<TextEncoder, HarnessError> {
    match embeddings {
        None => Ok(TextEncoder::hashing(d_t)?),
        Some(path) => {
            let enc = TextEncoder::with_table(load_embeddings(path)?, d_t)?;
            if enc.dim() != d_t {
                return Err(HarnessError::Config(vec![ConfigIssue {
                    line: None,
                    key: "embeddings".into(),
                    message: format!("vectors have length {}, d_t is {d_t}", enc.dim()),
                }]));
            }
            Ok(enc)
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes the run manifest: code version followed by the full configuration.
pub fn write_manifest(dir: &Path, cfg: &RunConfig, command: &str) -> Result<(), HarnessError> {
    ensure_dir(dir)?;
    let text = format!("command = {command}\nversion = {VERSION}\n{}", cfg.to_text());
    let path = dir.join("manifest.txt");
    fs::write(&path, text).map_err(io_err(&path))
}

fn checkpoint_extras(cfg: &RunConfig) -> Vec<(String, String)> {
    vec![("seed".into(), cfg.seed.to_string()), ("version".into(), VERSION.into())]
}

/// Parses a synthetic dataset spec in the same `key = value` format. The
/// `seed` key, when present, is returned alongside.
pub fn parse_synthetic_spec(text: &str) -> Result<(SyntheticSpec, Option<u64>), HarnessError> {
    let (pairs, mut issues) = parse_pairs(text);
    let mut spec = SyntheticSpec::default();
    let mut seed = None;
    for (line, key, v) in pairs {
        let result: Result<(), String> = (|| {
            match key.as_str() {
                "id" => spec.id = v.clone(),
                "description" => spec.description = v.clone(),
                "task" => {
                    spec.task = match v.as_str() {
                        "node" => TaskKind::Node,
                        "link" => TaskKind::Link,
                        _ => return Err(format!("expected node or link, got `{v}`")),
                    }
                }
                "n_nodes" => spec.n_nodes = parse_value(&v, "a positive integer")?,
                "n_classes" => spec.n_classes = parse_value(&v, "a positive integer")?,
                "relations" => spec.relations = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
                "intra_p" => spec.intra_p = parse_value(&v, "a probability")?,
                "inter_p" => spec.inter_p = parse_value(&v, "a probability")?,
                "feature_dim" => spec.feature_dim = parse_value(&v, "a positive integer")?,
                "noise" => spec.noise = parse_value(&v, "a number")?,
                "class_texts" => spec.class_texts = v.split(',').map(|s| s.trim().to_string()).collect(),
                "cls_relation_text" => spec.cls_relation_text = v.clone(),
                "train_frac" => spec.train_frac = parse_value(&v, "a fraction")?,
                "val_frac" => spec.val_frac = parse_value(&v, "a fraction")?,
                "seed" => seed = Some(parse_value(&v, "an unsigned integer")?),
                _ => return Err("unknown key".into()),
            }
            Ok(())
        })();
        if let Err(message) = result {
            issues.push(ConfigIssue { line: Some(line), key, message });
        }
    }
    if issues.is_empty() {
        Ok((spec, seed))
    } else {
        Err(HarnessError::Config(issues))
    }
}

/// Generates a synthetic dataset into `out`, which must be absent or empty.
pub fn gen_synth(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<GraphDataset, HarnessError> {
    if out.exists() && fs::read_dir(out).map_err(io_err(out))?.next().is_some() {
        return Err(HarnessError::OutputNotEmpty(out.display().to_string()));
    }
    let ds = generate_synthetic(spec, seed)?;
    write_dataset(&ds, out)?;
    Ok(ds)
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<GraphDataset>, HarnessError> {
    paths.iter().map(|p| load_dataset(p).map_err(HarnessError::from)).collect()
}

/// A fresh model with every dataset registered and ready for training.
fn initialised(
    cfg: &RunConfig,
    datasets: &[GraphDataset],
    encoder: &TextEncoder,
) -> Result<(Reef, Vec<crate::model::PreparedDataset>), HarnessError> {
    let mut model = Reef::new(cfg.model_config(), cfg.seed);
    let preps = datasets
        .iter()
        .map(|ds| model.prepare(ds, encoder, cfg.seed, false))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((model, preps))
}

/// Pretrains on in-memory datasets.
pub fn pretrain_datasets(cfg: &RunConfig, datasets: &[GraphDataset]) -> Result<PretrainOutcome, HarnessError> {
    cfg.validate()?;
    let encoder = cfg.encoder()?;
    let (model, preps) = initialised(cfg, datasets, &encoder)?;
    Ok(pretrain(model, &preps, &cfg.train_config())?)
}

/// Pretrains on `cfg.datasets` and writes `checkpoint/` (best validation
/// epoch), `final/`, `metrics.csv` and `manifest.txt` into `out`.
pub fn pretrain_run(cfg: &RunConfig, out: &Path) -> Result<PretrainOutcome, HarnessError> {
    if cfg.datasets.is_empty() {
        return Err(HarnessError::Missing("pretraining needs at least one entry in `datasets`".into()));
    }
    let datasets = load_all(&cfg.datasets)?;
    let outcome = pretrain_datasets(cfg, &datasets)?;
    write_manifest(out, cfg, "pretrain")?;
    outcome.best_model.save(&out.join("checkpoint"), &checkpoint_extras(cfg))?;
    outcome.final_model.save(&out.join("final"), &checkpoint_extras(cfg))?;
    write_metrics_csv(&out.join("metrics.csv"), &outcome.history)?;
    Ok(outcome)
}

/// Fine-tunes a checkpoint on `target` and writes `checkpoint/`,
/// `metrics.csv`, the target with its few-shot splits under `target/`, and
/// `manifest.txt`.
pub fn finetune_run(cfg: &RunConfig, checkpoint: &Path, target: &Path, out: &Path) -> Result<FinetuneOutcome, HarnessError> {
    cfg.validate()?;
    let model = Reef::load(checkpoint)?;
    let ds = load_dataset(target)?;
    let encoder = encoder_for(cfg.embeddings.as_deref(), model.config.d_t)?;
    let outcome = finetune(&model, &ds, &encoder, &cfg.train_config())?;
    write_manifest(out, cfg, "finetune")?;
    outcome.model.save(&out.join("checkpoint"), &checkpoint_extras(cfg))?;
    write_metrics_csv(&out.join("metrics.csv"), &outcome.history)?;
    let split_dir = out.join("target");
    if split_dir.exists() {
        fs::remove_dir_all(&split_dir).map_err(io_err(&split_dir))?;
    }
    write_dataset(&outcome.prepared.dataset, &split_dir)?;
    Ok(outcome)
}

/// Evaluates a checkpoint on a dataset split. Datasets unknown to the
/// checkpoint are registered on the fly.
pub fn eval_run(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, split: Split) -> Result<Metrics, HarnessError> {
    let mut model = Reef::load(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let encoder = encoder_for(cfg.embeddings.as_deref(), model.config.d_t)?;
    let prep = model.prepare(&ds, &encoder, cfg.seed, false)?;
    Ok(evaluate(&model, &prep, split, &cfg.train_config())?)
}

/// Writes final-layer representations for every node and label node, then
/// the relation and dataset embeddings, one `kind<TAB>key<TAB>values` row each.
pub fn export_embeddings(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: &Path) -> Result<usize, HarnessError> {
    let mut model = Reef::load(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let encoder = encoder_for(cfg.embeddings.as_deref(), model.config.d_t)?;
    let prep = model.prepare(&ds, &encoder, cfg.seed, false)?;
    let h = model.node_representations(&prep, &EdgeView::all(&ds))?;
    let mut text = String::new();
    let mut row = |kind: &str, key: &str, values: &[f64]| {
        let _ = write!(text, "{kind}\t{key}");
        for v in values {
            let _ = write!(text, "\t{v:?}");
        }
        text.push('\n');
    };
    for i in 0..ds.node_count() {
        row("node", &i.to_string(), h.row(i));
    }
    for (k, name) in ds.class_texts.iter().enumerate().take(prep.centroids.rows()) {
        row("label", name, h.row(ds.node_count() + k));
    }
    let vocab = model.params.get(VOCAB_PARAM).expect("vocabulary");
    for tok in model.vocab.tokens() {
        row("relation", &tok.text, vocab.row(tok.id));
    }
    if let Some(ctx) = model.params.get(&context_param(&ds.id)) {
        row("dataset", &ds.id, ctx.row(0));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    fs::write(out, &text).map_err(io_err(out))?;
    Ok(text.lines().count())
}

/// Finite-difference check on random graphs at the configured dimensions.
pub fn gradcheck_run(cfg: &RunConfig) -> Result<GradcheckReport, HarnessError> {
    cfg.validate()?;
    let sample = (cfg.gradcheck_samples > 0).then_some(cfg.gradcheck_samples);
    Ok(gradcheck_suite(&cfg.model_config(), cfg.gradcheck_instances, cfg.gradcheck_nodes, sample, cfg.seed)?)
}

/// Test metrics of one transfer run: pretrain on `sources` (skipped when
/// empty, giving the from-scratch baseline), then fine-tune on `target`.
pub fn transfer_run(cfg: &RunConfig, sources: &[GraphDataset], target: &GraphDataset) -> Result<Metrics, HarnessError> {
    cfg.validate()?;
    let encoder = cfg.encoder()?;
    let start = if sources.is_empty() {
        Reef::new(cfg.model_config(), cfg.seed)
    } else {
        pretrain_datasets(cfg, sources)?.best_model
    };
    Ok(finetune(&start, target, &encoder, &cfg.train_config())?.test)
}

/// Transfer test metrics for seeds `cfg.seed + i`, `i < cfg.sweep_seeds`.
pub fn transfer_over_seeds(
    cfg: &RunConfig,
    sources: &[GraphDataset],
    target: &GraphDataset,
) -> Result<Vec<Metrics>, HarnessError> {
    (0..cfg.sweep_seeds as u64)
        .map(|i| transfer_run(&RunConfig { seed: cfg.seed + i, ..cfg.clone() }, sources, target))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Nested prefixes of `datasets`, starting from none (from scratch).
    Datasets,
    HiddenDim,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "datasets" => Some(Self::Datasets),
            "hidden_dim" => Some(Self::HiddenDim),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Datasets => "datasets",
            Self::HiddenDim => "hidden_dim",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub per_seed: Vec<Metrics>,
}

impl SweepRow {
    pub fn mean(&self) -> Metrics {
        let n = self.per_seed.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| self.per_seed.iter().map(f).sum::<f64>() / n;
        Metrics { acc: sum(|m| m.acc), auc: sum(|m| m.auc), f1: sum(|m| m.f1) }
    }

    pub fn acc_std(&self) -> f64 {
        let m = self.mean().acc;
        let n = self.per_seed.len().max(1) as f64;
        (self.per_seed.iter().map(|x| (x.acc - m).powi(2)).sum::<f64>() / n).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Consecutive row pairs whose mean accuracy does not decrease, and the
    /// number of pairs.
    pub fn nondecreasing_steps(&self) -> (usize, usize) {
        let accs: Vec<f64> = self.rows.iter().map(|r| r.mean().acc).collect();
        let ok = accs.windows(2).filter(|w| w[1] >= w[0]).count();
        (ok, accs.len().saturating_sub(1))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,value,seeds,mean_acc,std_acc,mean_auc,mean_f1\n");
        for r in &self.rows {
            let m = r.mean();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                self.axis.as_str(),
                r.value,
                r.per_seed.len(),
                m.acc,
                r.acc_std(),
                m.auc,
                m.f1
            );
        }
        s
    }
}

/// Runs the transfer experiment along one axis and writes `sweep.csv`,
/// `sweep_summary.txt` and `manifest.txt` into `out`.
pub fn sweep_run(cfg: &RunConfig, axis: SweepAxis, out: &Path) -> Result<SweepReport, HarnessError> {
    let target_path = cfg
        .target
        .as_ref()
        .ok_or_else(|| HarnessError::Missing("sweeps need a `target` dataset".into()))?;
    let target = load_dataset(target_path)?;
    let sources = load_all(&cfg.datasets)?;
    let report = sweep_datasets(cfg, axis, &sources, &target)?;
    write_manifest(out, cfg, &format!("sweep {}", axis.as_str()))?;
    let csv = out.join("sweep.csv");
    fs::write(&csv, report.to_csv()).map_err(io_err(&csv))?;
    let (ok, steps) = report.nondecreasing_steps();
    let summary = out.join("sweep_summary.txt");
    let verdict = format!("nondecreasing mean accuracy in {ok} of {steps} steps\n");
    if ok < steps {
        log::warn!("sweep over {}: accuracy decreases in {} step(s)", axis.as_str(), steps - ok);
    }
    fs::write(&summary, verdict).map_err(io_err(&summary))?;
    Ok(report)
}

/// In-memory sweep over already loaded datasets.
pub fn sweep_datasets(
    cfg: &RunConfig,
    axis: SweepAxis,
    sources: &[GraphDataset],
    target: &GraphDataset,
) -> Result<SweepReport, HarnessError> {
    cfg.validate()?;
    let rows = match axis {
        SweepAxis::Datasets => (0..=sources.len())
            .map(|k| {
                log::info!("dataset sweep: {k} pretraining datasets");
                Ok(SweepRow { value: k, per_seed: transfer_over_seeds(cfg, &sources[..k], target)? })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?,
        SweepAxis::HiddenDim => {
            if sources.is_empty() {
                return Err(HarnessError::Missing("the hidden-dimension sweep needs `datasets`".into()));
            }
            cfg.sweep_hidden_dims
                .iter()
                .map(|&d| {
                    log::info!("hidden-dimension sweep: d_h = {d}");
                    let c = RunConfig { d_h: d, ..cfg.clone() };
                    Ok(SweepRow { value: d, per_seed: transfer_over_seeds(&c, sources, target)? })
                })
                .collect::<Result<Vec<_>, HarnessError>>()?
        }
    };
    Ok(SweepReport { axis, rows })
}
