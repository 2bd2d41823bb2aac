use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use reef::graph::Split;
use reef::harness::{
    self, export_embeddings, finetune_run, gen_synth, gradcheck_run, parse_synthetic_spec, pretrain_run, sweep_run,
    write_manifest, Ablation, RunConfig, SweepAxis,
};

#[derive(Parser)]
#[command(name = "reef", version, about = "Relation-token graph model: pretraining, transfer and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Disable model components: lm, fb, fp, agu. Repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<AblateArg>,
    /// Precomputed text embeddings (TSV), overriding the configured file.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    Lm,
    Fb,
    Fp,
    Agu,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Datasets,
    HiddenDim,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stochastic-block dataset from a spec file.
    GenSynth {
        /// Dataset spec (`key = value` lines).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on the configured datasets.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-shot fine-tune a checkpoint on a target dataset.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target dataset; defaults to the configured `target`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write node, label, relation and dataset embeddings as TSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transfer accuracy along the dataset-collection or hidden-size axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(e) = &common.embeddings {
        cfg.embeddings = Some(e.clone());
    }
    for a in &common.ablate {
        let a = match a {
            AblateArg::Lm => Ablation::Lm,
            AblateArg::Fb => Ablation::Fb,
            AblateArg::Fp => Ablation::Fp,
            AblateArg::Agu => Ablation::Agu,
        };
        cfg = cfg.with_ablation(a);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth { config, seed, out } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let (spec, spec_seed) = parse_synthetic_spec(&text)?;
            let seed = seed.or(spec_seed).unwrap_or(0);
            let ds = gen_synth(&spec, seed, &out)?;
            println!("{}: {} nodes, {} edges -> {}", ds.id, ds.node_count(), ds.edges.len(), out.display());
        }
        Command::Pretrain { common, out } => {
            let cfg = run_config(&common)?;
            let outcome = pretrain_run(&cfg, &out)?;
            match outcome.best_epoch {
                Some(e) => println!("best epoch {e}; checkpoint in {}", out.join("checkpoint").display()),
                None => println!("no epochs run; checkpoint in {}", out.join("checkpoint").display()),
            }
        }
        Command::Finetune { common, checkpoint, dataset, out } => {
            let cfg = run_config(&common)?;
            let Some(target) = dataset.or_else(|| cfg.target.clone()) else {
                bail!("no target dataset: pass --dataset or set `target` in the config");
            };
            let outcome = finetune_run(&cfg, &checkpoint, &target, &out)?;
            let m = outcome.test;
            println!("test acc {} auc {} f1 {} (best epoch {})", m.acc, m.auc, m.f1, outcome.best_epoch);
        }
        Command::Eval { common, checkpoint, dataset, split, out } => {
            let cfg = run_config(&common)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let m = harness::eval_run(&cfg, &checkpoint, &dataset, split)?;
            let row = format!("dataset,split,acc,auc,f1\n{},{},{},{},{}\n", dataset.display(), split.as_str(), m.acc, m.auc, m.f1);
            print!("{row}");
            if let Some(out) = out {
                write_manifest(&out, &cfg, "eval")?;
                write_file(&out.join("eval.csv"), &row)?;
            }
        }
        Command::ExportEmbeddings { common, checkpoint, dataset, out } => {
            let cfg = run_config(&common)?;
            write_manifest(&out, &cfg, "export-embeddings")?;
            let path = out.join("embeddings.tsv");
            let rows = export_embeddings(&cfg, &checkpoint, &dataset, &path)?;
            println!("{rows} rows -> {}", path.display());
        }
        Command::Gradcheck { common, out } => {
            let cfg = run_config(&common)?;
            let report = gradcheck_run(&cfg)?;
            let passed = report.passed();
            let text = format!(
                "{}: {} of {} entries within tolerance; worst relative error {:e}; forward gap {:e}\n",
                if passed { "PASS" } else { "FAIL" },
                report.checked - report.failures.len(),
                report.checked,
                report.worst_relative,
                report.forward_gap
            );
            print!("{text}");
            for f in report.failures.iter().take(20) {
                println!("  {}[{}]: analytic {:e}, numeric {:e}", f.param, f.index, f.analytic, f.numeric);
            }
            if let Some(out) = out {
                write_manifest(&out, &cfg, "gradcheck")?;
                write_file(&out.join("gradcheck.txt"), &text)?;
            }
            if !passed {
                bail!("gradient check failed");
            }
        }
        Command::Sweep { common, axis, out } => {
            let cfg = run_config(&common)?;
            let axis = match axis {
                AxisArg::Datasets => SweepAxis::Datasets,
                AxisArg::HiddenDim => SweepAxis::HiddenDim,
            };
            let report = sweep_run(&cfg, axis, &out)?;
            print!("{}", report.to_csv());
            let (ok, steps) = report.nondecreasing_steps();
            println!("nondecreasing mean accuracy in {ok} of {steps} steps");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REEF_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
