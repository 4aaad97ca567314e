//! Command-line front end. Every subcommand reads and writes the file
//! formats of the library inside one output directory.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};

use crate::association::{associate, association_quality, AssociationQuality, PseudoLabeling};
use crate::config::RunConfig;
use crate::dataset::{generate_benchmark, Dataset};
use crate::evaluation::{MetricsReport, StageTraces};
use crate::losses::{LossTrace, RUN_LOG_HEADER};
use crate::memory::MemoryBank;
use crate::model::EmbeddingModel;
use crate::pipeline::{self, Variant};

pub const TRAIN_FILE: &str = "train.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const INTRA_MODEL_FILE: &str = "intra_model.txt";
pub const BANK_FILE: &str = "bank.txt";
pub const PSEUDO_LABEL_FILE: &str = "pseudo_labels.tsv";
pub const ASSOCIATION_FILE: &str = "association.json";
pub const INTER_MODEL_FILE: &str = "inter_model.txt";
pub const RUN_LOG_FILE: &str = "run_log.tsv";
pub const METRICS_FILE: &str = "metrics.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const REPORT_FILE: &str = "report.json";

/// Environment variable holding the log filter, e.g. `info`.
pub const LOG_ENV: &str = "ICSREID_LOG";

#[derive(Debug, Parser)]
#[command(name = "icsreid", version, about = "Intra-camera supervised re-ID on synthetic data")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed overriding every component seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: `output_dir` from the config, else `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the training and test sample files.
    Generate,
    /// Stage 1 on the training file; writes the model and the memory bank.
    TrainIntra,
    /// Associate IDs across cameras from a memory bank.
    Associate {
        /// Bank snapshot (default: the one in the output directory).
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Stage 2 on the pseudo labels.
    TrainInter,
    /// Score a model on the test file.
    Evaluate {
        /// Model checkpoint (default: the stage-2 model).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train and score every ablation variant.
    Ablate,
    /// The whole pipeline; writes report.json.
    RunAll,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Fails with a hint naming the subcommand that produces `name`.
    fn input(&self, name: &str, producer: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!("{} not found; run `icsreid {producer}` first", p.display());
        }
        Ok(p)
    }

    fn write(&self, name: &str, text: &str) -> anyhow::Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn create_out(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<Ctx> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    cfg.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Ctx {
        cfg: cfg.resolved(),
        out,
    })
}

/// Parses `args` and runs the subcommand.
pub fn run_from<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    run(&cli)
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let ctx = load_config(cli)?;
    match &cli.command {
        Command::Generate => cmd_generate(&ctx),
        Command::TrainIntra => cmd_train_intra(&ctx),
        Command::Associate { bank } => cmd_associate(&ctx, bank.as_deref()),
        Command::TrainInter => cmd_train_inter(&ctx),
        Command::Evaluate { model } => cmd_evaluate(&ctx, model.as_deref()),
        Command::Ablate => cmd_ablate(&ctx),
        Command::RunAll => cmd_run_all(&ctx),
    }
}

fn cmd_generate(ctx: &Ctx) -> anyhow::Result<()> {
    let bench = generate_benchmark(&ctx.cfg.generator)?;
    ctx.create_out()?;
    bench.train.save(ctx.path(TRAIN_FILE))?;
    bench.test.save(ctx.path(TEST_FILE))?;
    log::info!(
        "{} training samples over {} IDs, {} test samples",
        bench.train.len(),
        bench.train.layout().num_ids(),
        bench.test.len()
    );
    Ok(())
}

fn log_text(stage: &str, trace: &LossTrace) -> String {
    format!("{RUN_LOG_HEADER}{}", trace.to_tsv(stage))
}

fn cmd_train_intra(ctx: &Ctx) -> anyhow::Result<()> {
    let train = Dataset::load(ctx.input(TRAIN_FILE, "generate")?)?;
    let out = pipeline::stage_one(&train, &ctx.cfg, crate::intrastage::IntraObjective::CameraMemoryQuintuplet)?;
    out.model.save(ctx.path(INTRA_MODEL_FILE))?;
    out.bank.as_ref().expect("memory objective").save(ctx.path(BANK_FILE))?;
    ctx.write("intra_log.tsv", &log_text("intra", &out.trace))
}

#[derive(Serialize)]
struct AssociationSummary {
    threshold: Option<f64>,
    requested_s: usize,
    used_s: usize,
    edges: usize,
    pseudo_classes: usize,
    same_camera_conflicts: usize,
    quality: Option<AssociationQuality>,
}

fn cmd_associate(ctx: &Ctx, bank: Option<&Path>) -> anyhow::Result<()> {
    let bank_path = match bank {
        Some(p) => p.to_path_buf(),
        None => ctx.input(BANK_FILE, "train-intra")?,
    };
    let bank = MemoryBank::load(&bank_path)?;
    let a = associate(&bank, ctx.cfg.association.s.count())?;
    // Truth is read from the training file when it matches the bank.
    let quality = match Dataset::load(ctx.path(TRAIN_FILE)) {
        Ok(train) if train.layout().ids_per_camera() == bank.layout().ids_per_camera() => Some(
            association_quality(&a.labeling, bank.layout(), Some(&train.truth().per_id))?,
        ),
        _ => None,
    };
    ctx.create_out()?;
    a.labeling.save(ctx.path(PSEUDO_LABEL_FILE))?;
    let summary = AssociationSummary {
        threshold: a.threshold.value.is_finite().then_some(a.threshold.value),
        requested_s: a.threshold.requested_s,
        used_s: a.threshold.used_s,
        edges: a.graph.edges().len(),
        pseudo_classes: a.labeling.num_classes(),
        same_camera_conflicts: a.labeling.same_camera_conflicts(bank.layout()),
        quality,
    };
    ctx.write(ASSOCIATION_FILE, &(serde_json::to_string_pretty(&summary)? + "\n"))
}

fn cmd_train_inter(ctx: &Ctx) -> anyhow::Result<()> {
    let train = Dataset::load(ctx.input(TRAIN_FILE, "generate")?)?;
    let init = EmbeddingModel::load(ctx.input(INTRA_MODEL_FILE, "train-intra")?)?;
    let labels = PseudoLabeling::load(ctx.input(PSEUDO_LABEL_FILE, "associate")?)?;
    let out = pipeline::stage_two(&train, &labels, &init, &ctx.cfg)?;
    out.model.save(ctx.path(INTER_MODEL_FILE))?;
    ctx.write("inter_log.tsv", &log_text("inter", &out.trace))
}

fn cmd_evaluate(ctx: &Ctx, model: Option<&Path>) -> anyhow::Result<()> {
    let test = Dataset::load(ctx.input(TEST_FILE, "generate")?)?;
    let model_path = match model {
        Some(p) => p.to_path_buf(),
        None => ctx.input(INTER_MODEL_FILE, "train-inter")?,
    };
    let model = EmbeddingModel::load(&model_path)?;
    let report = pipeline::report(&model, &test, &ctx.cfg, None, StageTraces::default())?;
    ctx.write(METRICS_FILE, &(report.to_json() + "\n"))?;
    let r = &report.retrieval;
    println!(
        "mAP {:.4}  rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}  ({} queries, {} dropped)",
        r.map, r.cmc[0], r.cmc[1], r.cmc[2], r.queries, r.dropped_queries
    );
    Ok(())
}

fn load_benchmark(ctx: &Ctx) -> anyhow::Result<crate::dataset::Benchmark> {
    Ok(crate::dataset::Benchmark {
        train: Dataset::load(ctx.input(TRAIN_FILE, "generate")?)?,
        test: Dataset::load(ctx.input(TEST_FILE, "generate")?)?,
    })
}

fn cmd_ablate(ctx: &Ctx) -> anyhow::Result<()> {
    let bench = load_benchmark(ctx)?;
    let table = pipeline::run_ablation(&bench, &ctx.cfg, &Variant::ALL)?;
    ctx.write(ABLATION_FILE, &(table.to_json() + "\n"))?;
    let text = table.to_text();
    ctx.write("ablation.txt", &text)?;
    print!("{text}");
    Ok(())
}

/// Final document of `run-all`.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub seed: u64,
    pub intra_only: MetricsReport,
    pub full: MetricsReport,
}

fn cmd_run_all(ctx: &Ctx) -> anyhow::Result<()> {
    cmd_generate(ctx)?;
    let bench = load_benchmark(ctx)?;
    cmd_train_intra(ctx)?;
    cmd_associate(ctx, None)?;
    cmd_train_inter(ctx)?;

    let intra_model = EmbeddingModel::load(ctx.path(INTRA_MODEL_FILE))?;
    let inter_model = EmbeddingModel::load(ctx.path(INTER_MODEL_FILE))?;
    let labels = PseudoLabeling::load(ctx.path(PSEUDO_LABEL_FILE))?;
    let quality = association_quality(
        &labels,
        bench.train.layout(),
        Some(&bench.train.truth().per_id),
    )?;
    let intra_trace = read_trace(&ctx.path("intra_log.tsv"))?;
    let inter_trace = read_trace(&ctx.path("inter_log.tsv"))?;
    let intra_only = pipeline::report(
        &intra_model,
        &bench.test,
        &ctx.cfg,
        None,
        StageTraces {
            intra: intra_trace.epoch_means(),
            inter: Vec::new(),
        },
    )?;
    let full = pipeline::report(
        &inter_model,
        &bench.test,
        &ctx.cfg,
        Some(quality),
        StageTraces {
            intra: intra_trace.epoch_means(),
            inter: inter_trace.epoch_means(),
        },
    )?;
    let mut log = log_text("intra", &intra_trace);
    log.push_str(&inter_trace.to_tsv("inter"));
    ctx.write(RUN_LOG_FILE, &log)?;
    println!(
        "mAP intra-only {:.4}, full {:.4}",
        intra_only.map(),
        full.map()
    );
    let report = RunReport {
        seed: ctx.cfg.generator.seed,
        config: ctx.cfg.clone(),
        intra_only,
        full,
    };
    ctx.write(REPORT_FILE, &(serde_json::to_string_pretty(&report)? + "\n"))
}

/// Reads back a stage log written by `train-intra` or `train-inter`.
fn read_trace(path: &Path) -> anyhow::Result<LossTrace> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut trace = LossTrace::default();
    for (k, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            bail!("{}: line {}: expected 6 fields", path.display(), k + 1);
        }
        let epoch: usize = f[2].parse()?;
        trace.push(epoch, f[3].parse()?, f[4].parse()?);
    }
    Ok(trace)
}
