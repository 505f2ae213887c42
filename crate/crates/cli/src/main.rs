use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use jpu_core::corpus::{build_world, pretrain_base, world_to_tsv};
use jpu_core::harness::{evaluate, prepare, report, run_variant, ExperimentConfig, Variant, METRICS_HEADER};
use jpu_core::lm::ModelState;
use jpu_core::pathfinder::LayerStrategy;

/// Jailbreak path unlearning on a synthetic world.
#[derive(Parser)]
#[command(name = "jpu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic world and write it as TSV.
    InitWorld(Common),
    /// Pretrain the aligned base model and check the alignment premise.
    Pretrain(Common),
    /// Run one variant end to end and write its artifacts.
    Train(Common),
    /// Evaluate a checkpoint (or a freshly pretrained base) on the world.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model to evaluate; defaults to the configured base.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aggregate completed runs under a directory into figure-data files.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// key=value settings, one per line, nested keys dot-separated.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    layers: Option<String>,
}

impl Common {
    /// Defaults, then the config file, then the command-line flags.
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(v) = &self.variant {
            cfg.variant = Variant::parse(v)?;
        }
        if let Some(l) = &self.layers {
            cfg.train.layers = LayerStrategy::parse(l)?;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_logging() -> Result<()> {
    let level = match std::env::var("JPU_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => bail!("JPU_LOG must be quiet, info or debug, got {other:?}"),
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    Ok(())
}

fn out_dir(cfg: &ExperimentConfig) -> Option<&Path> {
    cfg.out_dir.as_deref()
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn print_metrics(rows: &[jpu_core::harness::MetricsRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.line());
        s.push('\n');
    }
    s
}

fn main() -> Result<()> {
    init_logging()?;
    match Cli::parse().command {
        Command::InitWorld(common) => {
            let cfg = common.config()?;
            let world = build_world(cfg.world_seed, &cfg.sizes)?;
            if let Some(dir) = out_dir(&cfg) {
                write(dir, "world.tsv", &world_to_tsv(&world))?;
                write(dir, "config.txt", &cfg.to_text())?;
            }
            println!(
                "world seed {}: {} forget, {} retain, {} holdout, {} benign, {} templates, {} eval templates, {} eval queries",
                world.seed,
                world.forget.len(),
                world.retain.len(),
                world.retain_holdout.len(),
                world.benign.len(),
                world.templates.len(),
                world.eval_templates.len(),
                world.eval_queries.len()
            );
        }
        Command::Pretrain(common) => {
            let cfg = common.config()?;
            let world = build_world(cfg.world_seed, &cfg.sizes)?;
            let model = ModelState::new(cfg.model.clone())?;
            let pre = pretrain_base(&model, &world, &cfg.pretrain)?;
            if let Some(dir) = out_dir(&cfg) {
                fs::create_dir_all(dir)?;
                pre.model.save_checkpoint(dir.join("base.ckpt"))?;
                write(dir, "world.tsv", &world_to_tsv(&world))?;
                write(dir, "config.txt", &cfg.to_text())?;
                write(dir, "premise.txt", &format!("{}\nmet={}\n", pre.report, pre.report.met()))?;
            }
            println!("{}", pre.report);
            if !pre.report.met() {
                bail!("alignment premise not met");
            }
        }
        Command::Train(common) => {
            let cfg = common.config()?;
            let run = run_variant(&cfg)?;
            print!("{}", print_metrics(&run.metrics().cloned().collect::<Vec<_>>()));
            println!("variant {} status {} work units {}", cfg.variant.name(), run.status, run.work_units);
        }
        Command::Eval { common, checkpoint } => {
            let mut cfg = common.config()?;
            if checkpoint.is_some() {
                cfg.base_checkpoint = checkpoint;
            }
            let (world, model) = prepare(&cfg)?;
            let rows = evaluate(&model, &world, "eval")?;
            let table = print_metrics(&rows);
            if let Some(dir) = out_dir(&cfg) {
                write(dir, "metrics.tsv", &table)?;
            }
            print!("{table}");
        }
        Command::Report { out } => {
            let r = report(&out)?;
            for f in &r.files {
                println!("wrote {}", f.display());
            }
            println!("{} runs, {} expected settings absent", r.runs, r.absent.len());
        }
    }
    Ok(())
}
