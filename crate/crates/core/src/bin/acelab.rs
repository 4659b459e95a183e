//! Command-line front end. Every subcommand runs a (usually one-stage)
//! pipeline, so each invocation leaves artifacts plus a manifest.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde::de::DeserializeOwned;

use acelab::attack::{parse_fraction, ObjectiveKind};
use acelab::defenses::{default_grid, DefenseSpec, VictimPipeline};
use acelab::nn::MemoryMode;
use acelab::patterns::PatternKind;
use acelab::pipeline::{replay, run_pipeline, EditSource, PipelineConfig, Stage, TrainSet};
use acelab::{Error, Result};

#[derive(Parser)]
#[command(name = "acelab", version, about = "Protective perturbations against diffusion-model mimicry, on a toy latent diffusion stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Base TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for artifacts and the manifest.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Models {
    /// Full backbone checkpoint; pretrained from the config when omitted.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Finetuned adapter or full checkpoint.
    #[arg(long)]
    victim: Option<PathBuf>,
    /// Dataset directory; generated from the config when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Identity whose images are protected.
    #[arg(long)]
    group: Option<usize>,
    #[arg(long)]
    protected: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural identity dataset.
    Dataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        per_group: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Pretrain a backbone on a disjoint identity set.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render a target pattern.
    Pattern {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_enum::<PatternKind>)]
        kind: Option<PatternKind>,
        #[arg(long)]
        repetition: Option<usize>,
        #[arg(long)]
        contrast: Option<f64>,
    },
    /// Craft protective perturbations for one identity.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long, value_parser = parse_enum::<ObjectiveKind>)]
        objective: Option<ObjectiveKind>,
        /// Target pattern image; rendered from the config when omitted.
        #[arg(long)]
        target: Option<PathBuf>,
        /// l-infinity budget, e.g. `4/255`.
        #[arg(long)]
        zeta: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        pgd_steps: Option<usize>,
        #[arg(long)]
        finetune_steps: Option<usize>,
        #[arg(long, value_parser = parse_enum::<MemoryMode>)]
        memory: Option<MemoryMode>,
    },
    /// Personalize the backbone on adversarial (or clean) images.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        /// Directory of adversarial images.
        #[arg(long)]
        adversarial: Option<PathBuf>,
        /// Train on the clean protected images instead.
        #[arg(long)]
        clean: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Draw samples from the victim (or the backbone).
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// SDEdit images with the victim (or the backbone).
    Sdedit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long, value_parser = parse_enum::<EditSource>)]
        source: Option<EditSource>,
        #[arg(long)]
        adversarial: Option<PathBuf>,
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Estimate adversarial error fields and, with a victim, sampling error.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        adversarial: Option<PathBuf>,
        #[arg(long)]
        mc: Option<usize>,
    },
    /// Sample, SDEdit and score a model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
    },
    /// Purify adversarial images and re-run a victim pipeline.
    Defend {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        adversarial: Option<PathBuf>,
        /// Run the full seven-configuration grid.
        #[arg(long)]
        grid: bool,
        /// A defense such as `gaussian:4`, `jpeg:70`, `resize:0.5` or `sr:toy-sr`.
        #[arg(long = "spec", value_parser = parse_defense)]
        specs: Vec<DefenseSpec>,
        #[arg(long, value_parser = parse_enum::<VictimPipeline>)]
        pipeline: Option<VictimPipeline>,
    },
    /// Run the stages of a TOML pipeline config.
    Pipeline {
        config: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Re-run a manifest and compare every output hash.
    Replay {
        manifest: PathBuf,
        /// Defaults to `replay/` next to the manifest.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_defense(s: &str) -> std::result::Result<DefenseSpec, String> {
    let (kind, arg) = s.split_once(':').ok_or("expected kind:value")?;
    let num = |a: &str| a.parse::<f64>().map_err(|e| e.to_string());
    let spec = match kind {
        "gaussian" => DefenseSpec::Gaussian { sigma: num(arg)? },
        "jpeg" => DefenseSpec::Jpeg {
            quality: arg.parse().map_err(|e: std::num::ParseIntError| e.to_string())?,
        },
        "resize" => DefenseSpec::Resize { factor: num(arg)? },
        "sr" => DefenseSpec::Sr { provider: arg.to_string() },
        other => return Err(format!("unknown defense `{other}`")),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn set<T: std::fmt::Debug>(slot: &mut T, value: Option<T>, name: &str) {
    if let Some(v) = value {
        info!("override {name} = {v:?}");
        *slot = v;
    }
}

fn base_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.seed, common.seed, "seed");
    Ok(cfg)
}

fn apply_models(cfg: &mut PipelineConfig, m: Models) {
    set(&mut cfg.inputs.backbone, m.backbone.map(Some), "inputs.backbone");
    set(&mut cfg.inputs.victim, m.victim.map(Some), "inputs.victim");
    set(&mut cfg.inputs.dataset, m.dataset.map(Some), "inputs.dataset");
    set(&mut cfg.attack.group, m.group, "attack.group");
    set(&mut cfg.attack.protected, m.protected, "attack.protected");
}

fn run(command: Command) -> Result<()> {
    let (common, cfg, stages, name) = match command {
        Command::Pipeline { config, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let m = run_pipeline(&cfg, &out, "pipeline")?;
            println!("{} stages completed; manifest in {}", m.stages.len(), out.display());
            return Ok(());
        }
        Command::Replay { manifest, out } => {
            let out = out.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("replay"));
            let r = replay(&manifest, &out)?;
            for m in &r.mismatches {
                println!("MISMATCH {}: expected {:?}, got {:?}", m.path, m.expected, m.actual);
            }
            if r.is_exact() {
                println!("replay identical: {} output hashes match", r.compared);
                return Ok(());
            }
            return Err(Error::Stage {
                stage: "replay".into(),
                source: Box::new(Error::Checksum(format!("{} artifacts differ", r.mismatches.len()))),
            });
        }
        Command::Dataset { common, groups, per_group, size } => {
            let mut cfg = base_config(&common)?;
            set(&mut cfg.dataset.groups, groups, "dataset.groups");
            set(&mut cfg.dataset.per_group, per_group, "dataset.per_group");
            set(&mut cfg.dataset.size, size, "dataset.size");
            if let Some(p) = per_group {
                cfg.attack.protected = cfg.attack.protected.min(p);
            }
            (common, cfg, vec![Stage::Dataset], "dataset")
        }
        Command::Pretrain { common, steps } => {
            let mut cfg = base_config(&common)?;
            set(&mut cfg.pretrain.steps, steps, "pretrain.steps");
            (common, cfg, vec![Stage::Pretrain], "pretrain")
        }
        Command::Pattern { common, kind, repetition, contrast } => {
            let mut cfg = base_config(&common)?;
            set(&mut cfg.pattern.kind, kind, "pattern.kind");
            set(&mut cfg.pattern.repetition, repetition, "pattern.repetition");
            set(&mut cfg.pattern.contrast, contrast, "pattern.contrast");
            (common, cfg, vec![Stage::Pattern], "pattern")
        }
        Command::Attack {
            common,
            models,
            objective,
            target,
            zeta,
            alpha,
            epochs,
            pgd_steps,
            finetune_steps,
            memory,
        } => {
            let mut cfg = base_config(&common)?;
            apply_models(&mut cfg, models);
            set(&mut cfg.attack.objective, objective, "attack.objective");
            set(&mut cfg.inputs.target, target.map(Some), "inputs.target");
            set(&mut cfg.attack.budget.zeta, zeta.as_deref().map(parse_fraction).transpose()?, "attack.budget.zeta");
            set(&mut cfg.attack.alpha, alpha, "attack.alpha");
            set(&mut cfg.attack.budget.epochs, epochs, "attack.budget.epochs");
            set(&mut cfg.attack.budget.pgd_steps, pgd_steps, "attack.budget.pgd_steps");
            set(&mut cfg.attack.budget.finetune_steps, finetune_steps, "attack.budget.finetune_steps");
            set(&mut cfg.attack.memory, memory, "attack.memory");
            (common, cfg, vec![Stage::Attack], "attack")
        }
        Command::Finetune { common, models, adversarial, clean, steps, lr } => {
            let mut cfg = base_config(&common)?;
            apply_models(&mut cfg, models);
            set(&mut cfg.inputs.adversarial, adversarial.map(Some), "inputs.adversarial");
            if clean {
                set(&mut cfg.finetune.train_on, Some(TrainSet::Clean), "finetune.train_on");
            }
            set(&mut cfg.finetune.config.steps, steps, "finetune.config.steps");
            set(&mut cfg.finetune.config.lr, lr, "finetune.config.lr");
            (common, cfg, vec![Stage::Finetune], "finetune")
        }
        Command::Sample { common, models, count, steps } => {
            let mut cfg = base_config(&common)?;
            apply_models(&mut cfg, models);
            set(&mut cfg.sample.count, count, "sample.count");
            set(&mut cfg.sample.steps, steps, "sample.steps");
            (common, cfg, vec![Stage::Sample], "sample")
        }
        Command::Sdedit { common, models, source, adversarial, strength, steps } => {
            let mut cfg = base_config(&common)?;
            apply_models(&mut cfg, models);
            set(&mut cfg.sdedit.source, source, "sdedit.source");
            set(&mut cfg.inputs.adversarial, adversarial.map(Some), "inputs.adversarial");
            set(&mut cfg.sdedit.strength, strength, "sdedit.strength");
            set(&mut cfg.sdedit.steps, steps, "sdedit.steps");
            (common, cfg, vec![Stage::Sdedit], "sdedit")
        }
        Command::Analyze { common, models, adversarial, mc } => {
            let mut cfg = base_config(&common)?;
            apply_models(&mut cfg, models);
            set(&mut cfg.inputs.adversarial, adversarial.map(Some), "inputs.adversarial");
            set(&mut cfg.analysis.mc, mc, "analysis.mc");
            (common, cfg, vec![Stage::Analyze], "analyze")
        }
        Command::Evaluate { common, models } => {
            let mut cfg = base_config(&common)?;
            apply_models(&mut cfg, models);
            (common, cfg, vec![Stage::Sample, Stage::Sdedit, Stage::Evaluate], "evaluate")
        }
        Command::Defend { common, models, adversarial, grid, specs, pipeline } => {
            let mut cfg = base_config(&common)?;
            apply_models(&mut cfg, models);
            set(&mut cfg.inputs.adversarial, adversarial.map(Some), "inputs.adversarial");
            if grid {
                cfg.defend.specs = default_grid();
            } else if !specs.is_empty() {
                cfg.defend.specs = specs;
            }
            set(&mut cfg.defend.pipeline, pipeline, "defend.pipeline");
            (common, cfg, vec![Stage::Defend], "defend")
        }
    };
    let mut cfg = cfg;
    cfg.stages = stages;
    let m = run_pipeline(&cfg, &common.out, name)?;
    let files: usize = m.stages.iter().map(|s| s.outputs.len()).sum();
    println!("{name}: wrote {files} files; manifest in {}", common.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Stage { .. }) => {
            error!("{e}");
            ExitCode::from(3)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(2)
        }
    }
}
