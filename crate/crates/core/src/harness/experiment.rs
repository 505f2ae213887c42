use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::diagnostics::iou_curve;
use super::format::fmt_sig;
use super::metrics::{eval_asr, eval_false_refusal, eval_utility};
use crate::buffer::{init_buffer_with, BufferInit, MiningMode};
use crate::corpus::{build_world, pretrain_base, AttackType, PretrainConfig, World, WorldSizes};
use crate::error::{config_err, input_err, JpuError, Result};
use crate::lm::{ModelConfig, ModelState};
use crate::pathfinder::{LayerStrategy, SparseMask, FLOW_CSV_HEADER};
use crate::rectifier::{train, train_baseline, BaselineConfig, IterationRecord, MaskSource, TrainConfig, ITERATION_HEADER};

/// The method and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Jpu,
    /// Random mask of the same size.
    JpRandom,
    /// Fixed buffer, no mining.
    JpPolicy,
    /// SNIP-ranked mask.
    JpSnip,
    /// No anchor alignment (`beta = 0`).
    JpRep,
    /// No utility term (`lambda = 0`).
    JpUtil,
    /// Static unlearning with full-parameter updates.
    BaselineEq1,
    /// The pretrained model, untouched.
    Base,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Jpu,
        Variant::JpRandom,
        Variant::JpPolicy,
        Variant::JpSnip,
        Variant::JpRep,
        Variant::JpUtil,
        Variant::BaselineEq1,
        Variant::Base,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Jpu => "jpu",
            Self::JpRandom => "jp_random",
            Self::JpPolicy => "jp_policy",
            Self::JpSnip => "jp_snip",
            Self::JpRep => "jp_rep",
            Self::JpUtil => "jp_util",
            Self::BaselineEq1 => "baseline_eq1",
            Self::Base => "base",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| config_err(format!("unknown variant {s:?}")))
    }

    /// The training configuration this variant runs with.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Self::JpRandom => cfg.mask_source = MaskSource::Random,
            Self::JpPolicy => cfg.mining = MiningMode::Static,
            Self::JpSnip => cfg.mask_source = MaskSource::Snip,
            Self::JpRep => cfg.beta = 0.0,
            Self::JpUtil => cfg.lambda = 0.0,
            Self::Jpu | Self::BaselineEq1 | Self::Base => {}
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world_seed: u64,
    pub sizes: WorldSizes,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    /// Work budget for the baseline; 0 means "what the jpu variant spends".
    pub baseline_budget: u64,
    pub variant: Variant,
    /// Buffer restricted to these attack types; `None` keeps all.
    pub attack_types: Option<Vec<AttackType>>,
    pub base_checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world_seed: 0,
            sizes: WorldSizes::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            baseline_budget: 0,
            variant: Variant::Jpu,
            attack_types: None,
            base_checkpoint: None,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Defaults with every seed set to `seed`.
    pub fn with_seed(seed: u64) -> Self {
        let mut c = Self::default();
        c.set_seed(seed);
        c
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.world_seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.baseline.seed = seed;
    }

    /// Applies one `key=value` setting; nested keys are dot-separated.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.split_once('.') {
            Some(("world", "seed")) => {
                self.world_seed = value.parse().map_err(|_| config_err(format!("world.seed: bad value {value:?}")))?
            }
            Some(("world", k)) => self.sizes.set(k, value)?,
            Some(("model", k)) => self.model.set(k, value)?,
            Some(("pretrain", k)) => self.pretrain.set(k, value)?,
            Some(("train", k)) => self.train.set(k, value)?,
            Some(("baseline", k)) => {
                let bad = || config_err(format!("baseline.{k}: bad value {value:?}"));
                match k {
                    "eta" => self.baseline.eta = value.parse().map_err(|_| bad())?,
                    "lambda" => self.baseline.lambda = value.parse().map_err(|_| bad())?,
                    "forget_batch" => self.baseline.forget_batch = value.parse().map_err(|_| bad())?,
                    "retain_batch" => self.baseline.retain_batch = value.parse().map_err(|_| bad())?,
                    "seed" => self.baseline.seed = value.parse().map_err(|_| bad())?,
                    "max_steps" => self.baseline.max_steps = value.parse().map_err(|_| bad())?,
                    "work_budget" => self.baseline_budget = value.parse().map_err(|_| bad())?,
                    _ => return Err(config_err(format!("unknown baseline key {k:?}"))),
                }
            }
            None => match key {
                "seed" => self.set_seed(value.parse().map_err(|_| config_err(format!("seed: bad value {value:?}")))?),
                "variant" => self.variant = Variant::parse(value)?,
                "layers" => self.train.layers = LayerStrategy::parse(value)?,
                "attack_types" => {
                    self.attack_types = if value == "all" { None } else { Some(AttackType::parse_set(value)?) };
                }
                "base_checkpoint" => self.base_checkpoint = Some(PathBuf::from(value)),
                "out" => self.out_dir = Some(PathBuf::from(value)),
                _ => return Err(config_err(format!("unknown config key {key:?}"))),
            },
            Some((section, _)) => return Err(config_err(format!("unknown config section {section:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| JpuError::Parse { line: i + 1, msg: format!("expected key=value, got {line:?}") })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.sizes.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()
    }

    /// The resolved configuration as `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "world.seed={}", self.world_seed).unwrap();
        for (k, v) in self.sizes.fields() {
            writeln!(s, "world.{k}={v}").unwrap();
        }
        for line in self.model.to_kv().lines() {
            writeln!(s, "model.{line}").unwrap();
        }
        let p = &self.pretrain;
        for (k, v) in [
            ("steps", p.steps.to_string()),
            ("batch_size", p.batch_size.to_string()),
            ("learning_rate", format!("{:?}", p.learning_rate)),
            ("refusal_share", format!("{:?}", p.refusal_share)),
            ("templated_share", format!("{:?}", p.templated_share)),
            ("refusal_floor", format!("{:?}", p.refusal_floor)),
            ("asr_floor", format!("{:?}", p.asr_floor)),
        ] {
            writeln!(s, "pretrain.{k}={v}").unwrap();
        }
        let t = &self.train;
        for (k, v) in [
            ("eta", format!("{:?}", t.eta)),
            ("beta", format!("{:?}", t.beta)),
            ("lambda", format!("{:?}", t.lambda)),
            ("p", format!("{:?}", t.sparsity)),
            ("threshold", format!("{:?}", t.threshold)),
            ("max_iterations", t.max_iterations.to_string()),
            ("convergence_rate", format!("{:?}", t.convergence_rate)),
            ("patience", t.patience.to_string()),
            ("utility_batch", t.utility_batch.to_string()),
            ("mining_batch", t.mining_batch.to_string()),
            ("offspring_per_parent", t.offspring_per_parent.to_string()),
            ("mining", t.mining.name().to_string()),
            ("mask_source", t.mask_source.name().to_string()),
            ("seed", t.seed.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("work_budget", t.work_budget.to_string()),
        ] {
            writeln!(s, "train.{k}={v}").unwrap();
        }
        let b = &self.baseline;
        for (k, v) in [
            ("eta", format!("{:?}", b.eta)),
            ("lambda", format!("{:?}", b.lambda)),
            ("forget_batch", b.forget_batch.to_string()),
            ("retain_batch", b.retain_batch.to_string()),
            ("seed", b.seed.to_string()),
            ("max_steps", b.max_steps.to_string()),
            ("work_budget", self.baseline_budget.to_string()),
        ] {
            writeln!(s, "baseline.{k}={v}").unwrap();
        }
        writeln!(s, "variant={}", self.variant.name()).unwrap();
        writeln!(s, "layers={}", self.train.layers.name()).unwrap();
        let types = match &self.attack_types {
            None => "all".to_string(),
            Some(ts) => ts.iter().map(|t| t.name()).collect(),
        };
        writeln!(s, "attack_types={types}").unwrap();
        if let Some(p) = &self.base_checkpoint {
            writeln!(s, "base_checkpoint={}", p.display()).unwrap();
        }
        if let Some(p) = &self.out_dir {
            writeln!(s, "out={}", p.display()).unwrap();
        }
        s
    }
}

pub const METRICS_HEADER: &str = "split\tasr_proxy\trefusal_rate\tfalse_refusal_rate\tutility_nll\tiou_curve";

/// Evaluation of one model on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub split: String,
    pub asr_proxy: f64,
    pub refusal_rate: f64,
    pub false_refusal_rate: f64,
    pub utility_nll: f64,
    pub iou_curve: Vec<f64>,
}

impl MetricsRecord {
    pub fn line(&self) -> String {
        let iou: Vec<String> = self.iou_curve.iter().map(|&x| fmt_sig(x)).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.split,
            fmt_sig(self.asr_proxy),
            fmt_sig(self.refusal_rate),
            fmt_sig(self.false_refusal_rate),
            fmt_sig(self.utility_nll),
            iou.join(",")
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 6 {
            return Err(input_err(format!("metrics line has {} fields", c.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| input_err(format!("bad metric {s:?}")));
        let iou = if c[5].is_empty() { Vec::new() } else { c[5].split(',').map(num).collect::<Result<_>>()? };
        Ok(Self {
            split: c[0].to_string(),
            asr_proxy: num(c[1])?,
            refusal_rate: num(c[2])?,
            false_refusal_rate: num(c[3])?,
            utility_nll: num(c[4])?,
            iou_curve: iou,
        })
    }
}

/// `phase` row over all attacks, then one `phase.T` row per attack type.
/// Refusal, false refusal and utility do not depend on the attack type and
/// repeat on every row.
pub fn evaluate(model: &ModelState, world: &World, phase: &str) -> Result<Vec<MetricsRecord>> {
    let v = &world.vocab;
    let bare: Vec<Vec<usize>> = world.forget.iter().map(|p| p.prompt.clone()).collect();
    let benign: Vec<Vec<usize>> = world.benign.iter().map(|p| p.prompt.clone()).collect();
    let holdout: Vec<(Vec<usize>, Vec<usize>)> = world.retain_holdout.iter().map(|p| (p.prompt.clone(), p.response.clone())).collect();
    let refusal_rate = eval_false_refusal(model, &bare, v.refuse)?;
    let false_refusal_rate = eval_false_refusal(model, &benign, v.refuse)?;
    let utility_nll = eval_utility(model, &holdout)?;

    let mut per_type = Vec::new();
    for kind in AttackType::ALL {
        let prompts = world.attack_prompts(Some(kind));
        if prompts.is_empty() {
            continue;
        }
        per_type.push(MetricsRecord {
            split: format!("{phase}.{}", kind.name()),
            asr_proxy: eval_asr(model, &prompts, v.sure)?,
            refusal_rate,
            false_refusal_rate,
            utility_nll,
            iou_curve: iou_curve(model, world, Some(kind))?,
        });
    }
    let nl = model.config.num_layers;
    let mean_iou: Vec<f64> = (0..nl).map(|l| per_type.iter().map(|r| r.iou_curve[l]).sum::<f64>() / per_type.len().max(1) as f64).collect();
    let mut out = vec![MetricsRecord {
        split: phase.to_string(),
        asr_proxy: eval_asr(model, &world.attack_prompts(None), v.sure)?,
        refusal_rate,
        false_refusal_rate,
        utility_nll,
        iou_curve: mean_iou,
    }];
    out.extend(per_type);
    Ok(out)
}

/// Everything one variant run produced.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub config: ExperimentConfig,
    pub base_metrics: Vec<MetricsRecord>,
    pub post_metrics: Vec<MetricsRecord>,
    pub train_log: Vec<IterationRecord>,
    pub model: ModelState,
    pub status: String,
    pub work_units: u64,
    pub last_mask: Option<SparseMask>,
}

impl VariantRun {
    pub fn metrics(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.base_metrics.iter().chain(&self.post_metrics)
    }

    /// The overall post-training row.
    pub fn post(&self) -> &MetricsRecord {
        &self.post_metrics[0]
    }

    pub fn base(&self) -> &MetricsRecord {
        &self.base_metrics[0]
    }
}

/// World and pretrained base model for a configuration. The base comes
/// from `base_checkpoint` when set.
pub fn prepare(config: &ExperimentConfig) -> Result<(World, ModelState)> {
    config.validate()?;
    let world = build_world(config.world_seed, &config.sizes)?;
    let base = match &config.base_checkpoint {
        Some(path) => {
            let m = ModelState::load_checkpoint(path)?;
            if m.config.vocab_size != world.vocab.size {
                return Err(config_err("checkpoint vocabulary does not match the world"));
            }
            m
        }
        None => {
            let model = ModelState::new(config.model.clone())?;
            let pre = pretrain_base(&model, &world, &config.pretrain)?;
            if !pre.report.met() {
                log::warn!("alignment premise not met: {}", pre.report);
            }
            pre.model
        }
    };
    Ok((world, base))
}

pub fn run_variant(config: &ExperimentConfig) -> Result<VariantRun> {
    let (world, base) = prepare(config)?;
    let base_metrics = evaluate(&base, &world, "base")?;
    run_variant_on(config, &world, &base, base_metrics)
}

/// Runs the variant from an already prepared base model.
pub fn run_variant_on(config: &ExperimentConfig, world: &World, base: &ModelState, base_metrics: Vec<MetricsRecord>) -> Result<VariantRun> {
    config.validate()?;
    let mut run = VariantRun {
        config: config.clone(),
        base_metrics,
        post_metrics: Vec::new(),
        train_log: Vec::new(),
        model: base.clone(),
        status: "untrained".into(),
        work_units: 0,
        last_mask: None,
    };
    let ckpt_dir = config.out_dir.as_ref().map(|d| d.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        if config.train.checkpoint_every > 0 {
            fs::create_dir_all(d)?;
        }
    }
    match config.variant {
        Variant::Base => {}
        Variant::BaselineEq1 => {
            let budget = if config.baseline_budget > 0 {
                config.baseline_budget
            } else {
                let mut reference = config.clone();
                reference.variant = Variant::Jpu;
                reference.out_dir = None;
                let r = run_variant_on(&reference, world, base, Vec::new())?;
                r.work_units
            };
            let out = train_baseline(base, world, &config.baseline, budget)?;
            run.model = out.model;
            run.work_units = out.work_units;
            run.status = format!("{} steps{}", out.steps, if out.diverged { ", diverged" } else { "" });
        }
        v => {
            let tc = v.apply(&config.train);
            let init = BufferInit {
                attack_types: config.attack_types.clone(),
                max_prompt_len: base.config.max_seq_len - world.vocab.refusal_target().len(),
                ..BufferInit::default()
            };
            let mut buffer = init_buffer_with(world, config.train.seed, &init)?;
            let out = train(base, world, &mut buffer, &tc, ckpt_dir.as_deref())?;
            run.model = out.model;
            run.train_log = out.records;
            run.work_units = out.work_units;
            run.last_mask = out.last_mask;
            run.status = format!("{:?}", out.status);
        }
    }
    run.post_metrics = evaluate(&run.model, world, "post")?;
    if let Some(dir) = &config.out_dir {
        write_run(&run, dir)?;
    }
    Ok(run)
}

/// Writes `config.txt`, `run.txt`, `metrics.tsv`, `train_log.tsv`,
/// `mask.csv` (when a mask exists) and `model.ckpt` into `dir`.
pub fn write_run(run: &VariantRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let c = &run.config;
    fs::write(dir.join("config.txt"), c.to_text())?;
    let effective = c.variant.apply(&c.train);
    let window = c.train.layers.window(c.model.num_layers);
    let types = c.attack_types.as_ref().map_or("ABC".to_string(), |ts| ts.iter().map(|t| t.name()).collect());
    let run_txt = format!(
        "variant={}\nseed={}\nlayers={}\nwindow={}\np={}\nmining={}\nattack_types={}\nstatus={}\nwork_units={}\n",
        c.variant.name(),
        c.world_seed,
        c.train.layers.name(),
        window,
        fmt_sig(effective.sparsity),
        effective.mining.name(),
        types,
        run.status,
        run.work_units
    );
    fs::write(dir.join("run.txt"), run_txt)?;
    let mut metrics = format!("{METRICS_HEADER}\n");
    for r in run.metrics() {
        metrics.push_str(&r.line());
        metrics.push('\n');
    }
    fs::write(dir.join("metrics.tsv"), metrics)?;
    let mut log = format!("{ITERATION_HEADER}\n");
    for r in &run.train_log {
        log.push_str(&r.line());
        log.push('\n');
    }
    fs::write(dir.join("train_log.tsv"), log)?;
    if let Some(m) = &run.last_mask {
        let iteration = run.train_log.last().map_or(0, |r| r.iteration as usize);
        fs::write(dir.join("mask.csv"), format!("{FLOW_CSV_HEADER}\n{}", m.csv_rows(iteration)))?;
    }
    run.model.save_checkpoint(dir.join("model.ckpt"))?;
    Ok(())
}
