//! Staged experiment pipeline driven by a TOML config.
//!
//! Stages run in the declared order and share state in memory. A stage whose
//! input was neither produced earlier nor supplied under `[inputs]` derives
//! it from the config (generating the dataset, pretraining a backbone, ...).
//! Every written file is hashed into the run's [`ExperimentManifest`], and
//! [`replay`] re-runs a manifest's config and compares those hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{accumulate_sampling_error, estimate_eps_adv, estimate_sampling_bias, heatmap, mean_pairwise_cosine, PROBE_TIMESTEPS};
use crate::attack::{export_8bit, run_attack, AttackBudget, AttackConfig, AttackObjective, ObjectiveKind};
use crate::autoencoder::AutoencoderBackend;
use crate::dataset::{generate_dataset, generate_images, load_dataset, split_protected, ToyDatasetSpec, ToyImage};
use crate::defenses::{default_grid, robustness_run, DefenseRegistry, DefenseSpec, VictimPipeline};
use crate::diffusion::{sample, sdedit};
use crate::error::{Error, Result};
use crate::finetune::{finetune, FinetuneConfig, FinetuneMode};
use crate::io::{encode_array, load_adapters, load_checkpoint, read_png, save_adapters, save_checkpoint, sha256_hex, write_png};
use crate::manifest::{Artifact, ExperimentManifest, RunStatus, StageRecord, MANIFEST_FILE};
use crate::metrics::{clip_iqa, clip_sim, ms_ssim, MsSsimConfig, ProjectionProvider, NEGATIVE_PROMPT};
use crate::nn::{MemoryMode, OptimizerKind};
use crate::patterns::{encode_target, generate_pattern, PatternSpec, TargetLatent};
use crate::recipe::{pretrain_backbone, PretrainConfig, IDENTITY_COND};
use crate::rng::{derive_indexed, derive_seed};
use crate::schedule::NoiseSchedule;
use crate::study::{StudyConfig, ToyWorld};
use crate::tensor::{ImageTensor, Tensor3};
use crate::unet::ToyUnet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Dataset,
    Pretrain,
    Pattern,
    Attack,
    Finetune,
    Sample,
    Sdedit,
    Analyze,
    Evaluate,
    Defend,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dataset => "dataset",
            Self::Pretrain => "pretrain",
            Self::Pattern => "pattern",
            Self::Attack => "attack",
            Self::Finetune => "finetune",
            Self::Sample => "sample",
            Self::Sdedit => "sdedit",
            Self::Analyze => "analyze",
            Self::Evaluate => "evaluate",
            Self::Defend => "defend",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Files consumed instead of being produced by an earlier stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineInputs {
    /// Directory written by the dataset stage.
    pub dataset: Option<PathBuf>,
    /// Full checkpoint of the backbone.
    pub backbone: Option<PathBuf>,
    /// Target pattern image.
    pub target: Option<PathBuf>,
    /// Directory of `adv_XX.png` files in protected-set order.
    pub adversarial: Option<PathBuf>,
    /// Adapter or full checkpoint of a finetuned model.
    pub victim: Option<PathBuf>,
}

impl PipelineInputs {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.dataset, &mut self.backbone, &mut self.target, &mut self.adversarial, &mut self.victim]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    fn named(&self) -> Vec<(&'static str, &PathBuf)> {
        [
            ("dataset", &self.dataset),
            ("backbone", &self.backbone),
            ("target", &self.target),
            ("adversarial", &self.adversarial),
            ("victim", &self.victim),
        ]
        .into_iter()
        .filter_map(|(n, p)| p.as_ref().map(|p| (n, p)))
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackStage {
    pub objective: ObjectiveKind,
    /// Encoder-term weight for `ace-plus`.
    pub alpha: f64,
    pub mc: usize,
    pub budget: AttackBudget,
    pub finetune: FinetuneConfig,
    pub memory: MemoryMode,
    /// Identity whose first `protected` images are attacked.
    pub group: usize,
    pub protected: usize,
}

impl Default for AttackStage {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Ace,
            alpha: 0.0,
            mc: 4,
            budget: AttackBudget::default(),
            finetune: FinetuneConfig {
                lr: 1e-3,
                optimizer: OptimizerKind::adam(),
                batch: 4,
                ..Default::default()
            },
            memory: MemoryMode::Standard,
            group: 0,
            protected: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainSet {
    #[default]
    Adversarial,
    Clean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneStage {
    pub train_on: TrainSet,
    pub config: FinetuneConfig,
}

impl Default for FinetuneStage {
    fn default() -> Self {
        Self {
            train_on: TrainSet::Adversarial,
            config: StudyConfig::default().victim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleStage {
    pub count: usize,
    pub steps: usize,
}

impl Default for SampleStage {
    fn default() -> Self {
        Self { count: 4, steps: 50 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditSource {
    #[default]
    Holdout,
    Protected,
    Adversarial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdeditStage {
    pub source: EditSource,
    pub strength: f64,
    pub steps: usize,
}

impl Default for SdeditStage {
    fn default() -> Self {
        Self {
            source: EditSource::Holdout,
            strength: 0.3,
            steps: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisStage {
    pub probes: Vec<usize>,
    pub mc: usize,
}

impl Default for AnalysisStage {
    fn default() -> Self {
        Self {
            probes: PROBE_TIMESTEPS.to_vec(),
            mc: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefendStage {
    pub specs: Vec<DefenseSpec>,
    pub pipeline: VictimPipeline,
}

impl Default for DefendStage {
    fn default() -> Self {
        Self {
            specs: default_grid(),
            pipeline: VictimPipeline::FinetuneSample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub inputs: PipelineInputs,
    pub dataset: ToyDatasetSpec,
    pub pretrain: PretrainConfig,
    pub pattern: PatternSpec,
    pub attack: AttackStage,
    pub finetune: FinetuneStage,
    pub sample: SampleStage,
    pub sdedit: SdeditStage,
    pub analysis: AnalysisStage,
    pub defend: DefendStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stages: vec![Stage::Dataset],
            inputs: PipelineInputs::default(),
            dataset: ToyDatasetSpec::default(),
            pretrain: PretrainConfig::default(),
            pattern: PatternSpec::default(),
            attack: AttackStage::default(),
            finetune: FinetuneStage::default(),
            sample: SampleStage::default(),
            sdedit: SdeditStage::default(),
            analysis: AnalysisStage::default(),
            defend: DefendStage::default(),
        }
    }
}

impl PipelineConfig {
    /// Parse TOML; relative input paths resolve against `base`.
    pub fn from_toml(s: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.inputs.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("no stages declared".into()));
        }
        self.dataset.validate()?;
        self.pattern.validate()?;
        self.attack.budget.validate()?;
        self.attack.finetune.validate()?;
        self.finetune.config.validate()?;
        let a = &self.attack;
        if a.group >= self.dataset.groups || a.protected == 0 || a.protected > self.dataset.per_group {
            return Err(Error::Config(format!(
                "attack.group must be < {} and attack.protected in 1..={}",
                self.dataset.groups, self.dataset.per_group
            )));
        }
        if a.mc == 0 || self.analysis.mc == 0 {
            return Err(Error::Config("monte-carlo counts must be at least 1".into()));
        }
        if !(a.alpha >= 0.0 && a.alpha.is_finite()) {
            return Err(Error::Config("attack.alpha must be finite and >= 0".into()));
        }
        let t = NoiseSchedule::default().timesteps();
        if self.analysis.probes.is_empty() || self.analysis.probes.iter().any(|&p| p >= t) {
            return Err(Error::Config(format!("analysis.probes must be non-empty and below {t}")));
        }
        if !(self.sdedit.strength > 0.0 && self.sdedit.strength <= 1.0) || self.sdedit.steps == 0 {
            return Err(Error::Config("sdedit needs strength in (0, 1] and at least one step".into()));
        }
        if self.sample.count == 0 || self.sample.steps == 0 {
            return Err(Error::Config("sample needs count and steps >= 1".into()));
        }
        for spec in &self.defend.specs {
            spec.validate()?;
        }
        let generated = self.stages.contains(&Stage::Dataset) || self.inputs.dataset.is_none();
        let pattern_used = self.stages.contains(&Stage::Pattern) && self.stages.contains(&Stage::Attack);
        let (p, d) = (&self.pattern, &self.dataset);
        if generated && pattern_used && (p.height != d.size || p.width != d.size) {
            return Err(Error::Config(format!(
                "pattern is {}x{} but dataset images are {}x{}",
                p.height, p.width, d.size, d.size
            )));
        }
        Ok(())
    }

    /// The named seed of a stage.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, stage.name())
    }
}

#[derive(Default)]
struct State {
    backend: Option<AutoencoderBackend>,
    sched: Option<NoiseSchedule>,
    images: Option<Vec<ToyImage>>,
    backbone: Option<ToyUnet>,
    target: Option<TargetLatent>,
    adversarial: Option<Vec<ImageTensor>>,
    victim: Option<ToyUnet>,
    samples: Option<Vec<ImageTensor>>,
    edits: Option<Vec<(ImageTensor, ImageTensor)>>,
    eta_norms: Option<Vec<f64>>,
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
    state: State,
    outputs: Vec<Artifact>,
    peak: Option<usize>,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// Sorted files under `dir`, recursively, as paths relative to it.
fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let abs = dir.join(&rel);
        for entry in fs::read_dir(&abs).map_err(|e| Error::io(&abs, e))? {
            let entry = entry.map_err(|e| Error::io(&abs, e))?;
            let child = rel.join(entry.file_name());
            if entry.path().is_dir() {
                stack.push(child);
            } else {
                out.push(child);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a PipelineConfig, out: &'a Path) -> Self {
        Self {
            cfg,
            out,
            state: State::default(),
            outputs: Vec::new(),
            peak: None,
        }
    }

    fn record(&mut self, rel: &str, sha256: String) {
        self.outputs.push(Artifact {
            path: rel.to_string(),
            sha256,
        });
    }

    fn write_image(&mut self, rel: &str, img: &ImageTensor) -> Result<()> {
        let path = self.out.join(rel);
        ensure_parent(&path)?;
        let sha = write_png(img, &path)?;
        self.record(rel, sha);
        Ok(())
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(rel);
        ensure_parent(&path)?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.record(rel, sha256_hex(bytes));
        Ok(())
    }

    fn backend(&mut self) -> Result<AutoencoderBackend> {
        if self.state.backend.is_none() {
            self.state.backend = Some(AutoencoderBackend::analytic(2, 3)?);
        }
        Ok(self.state.backend.clone().expect("set above"))
    }

    fn sched(&mut self) -> NoiseSchedule {
        self.state.sched.get_or_insert_with(NoiseSchedule::default).clone()
    }

    fn images(&mut self) -> Result<Vec<ToyImage>> {
        if self.state.images.is_none() {
            self.state.images = Some(match &self.cfg.inputs.dataset {
                Some(dir) => load_dataset(dir)?,
                None => generate_images(&self.cfg.dataset)?,
            });
        }
        Ok(self.state.images.clone().expect("set above"))
    }

    /// Protected and held-out images of the attacked identity.
    fn split(&mut self) -> Result<(Vec<ImageTensor>, Vec<ImageTensor>)> {
        let group = self.cfg.attack.group;
        let members: Vec<ToyImage> = self.images()?.into_iter().filter(|i| i.group == group).collect();
        if members.is_empty() {
            return Err(Error::Config(format!("dataset has no images for group {group}")));
        }
        let (p, h) = split_protected(&members, self.cfg.attack.protected);
        Ok((p.into_iter().map(|i| i.image).collect(), h.into_iter().map(|i| i.image).collect()))
    }

    fn holdout(&mut self) -> Result<Vec<ImageTensor>> {
        let (_, h) = self.split()?;
        if h.is_empty() {
            return Err(Error::Config("no held-out images: attack.protected covers the whole group".into()));
        }
        Ok(h)
    }

    fn backbone(&mut self) -> Result<ToyUnet> {
        if self.state.backbone.is_none() {
            let model = match &self.cfg.inputs.backbone {
                Some(path) => {
                    let ck = load_checkpoint(path)?;
                    self.state.backend = Some(ck.backend);
                    self.state.sched = Some(ck.schedule);
                    ck.model
                }
                None => {
                    info!("no backbone given, pretraining one from the config");
                    let (backend, sched) = (self.backend()?, self.sched());
                    pretrain_backbone(&self.cfg.pretrain, &backend, &sched)?.0
                }
            };
            self.state.backbone = Some(model);
        }
        Ok(self.state.backbone.clone().expect("set above"))
    }

    fn target(&mut self) -> Result<TargetLatent> {
        if self.state.target.is_none() {
            let img = match &self.cfg.inputs.target {
                Some(path) => read_png(path)?,
                None => {
                    // the rendered target follows the size of the images it is paired with
                    let (h, w, _) = self.images()?[0].image.shape();
                    generate_pattern(&PatternSpec {
                        height: h,
                        width: w,
                        ..self.cfg.pattern.clone()
                    })?
                }
            };
            let backend = self.backend()?;
            self.state.target = Some(encode_target(&img, &backend)?);
        }
        Ok(self.state.target.clone().expect("set above"))
    }

    fn adversarial(&mut self) -> Result<Vec<ImageTensor>> {
        if self.state.adversarial.is_none() {
            let dir = self.cfg.inputs.adversarial.clone().ok_or_else(|| {
                Error::Config("no adversarial images: run the attack stage first or set inputs.adversarial".into())
            })?;
            let files: Vec<PathBuf> = list_files(&dir)?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            if files.is_empty() {
                return Err(Error::Config(format!("no png files under {}", dir.display())));
            }
            self.state.adversarial = Some(files.iter().map(|f| read_png(&dir.join(f))).collect::<Result<_>>()?);
        }
        Ok(self.state.adversarial.clone().expect("set above"))
    }

    fn victim(&mut self) -> Result<Option<ToyUnet>> {
        if self.state.victim.is_none() {
            if let Some(path) = self.cfg.inputs.victim.clone() {
                let base = self.backbone()?;
                let model = match load_adapters(&base, &path, false) {
                    Err(Error::Format(_)) => load_checkpoint(&path)?.model,
                    other => other?,
                };
                self.state.victim = Some(model);
            }
        }
        Ok(self.state.victim.clone())
    }

    /// The finetuned model when there is one, otherwise the backbone.
    fn generator(&mut self) -> Result<ToyUnet> {
        match self.victim()? {
            Some(m) => Ok(m),
            None => self.backbone(),
        }
    }

    fn run(&mut self, stage: Stage) -> Result<()> {
        let seed = self.cfg.stage_seed(stage);
        match stage {
            Stage::Dataset => self.dataset(),
            Stage::Pretrain => self.pretrain(),
            Stage::Pattern => self.pattern(),
            Stage::Attack => self.attack(seed),
            Stage::Finetune => self.finetune(seed),
            Stage::Sample => self.sample(seed),
            Stage::Sdedit => self.sdedit(seed),
            Stage::Analyze => self.analyze(seed),
            Stage::Evaluate => self.evaluate(),
            Stage::Defend => self.defend(seed),
        }
    }

    fn dataset(&mut self) -> Result<()> {
        let dir = self.out.join("dataset");
        let index = generate_dataset(&self.cfg.dataset, &dir)?;
        for e in &index.entries {
            self.record(&format!("dataset/{}", e.file), e.sha256.clone());
        }
        self.outputs.push(Artifact::hash_file(&dir.join(crate::dataset::INDEX_FILE), "dataset/index.json".into())?);
        self.state.images = Some(load_dataset(&dir)?);
        Ok(())
    }

    fn pretrain(&mut self) -> Result<()> {
        let (backend, sched) = (self.backend()?, self.sched());
        let (model, report) = pretrain_backbone(&self.cfg.pretrain, &backend, &sched)?;
        if let Some(l) = report.losses.last() {
            info!("pretrain: final minibatch loss {l:.2}");
        }
        let path = self.out.join("pretrain/backbone.ckpt");
        ensure_parent(&path)?;
        let sha = save_checkpoint(&model, &sched, &backend, &path)?;
        self.record("pretrain/backbone.ckpt", sha);
        self.state.backbone = Some(model);
        Ok(())
    }

    fn pattern(&mut self) -> Result<()> {
        let img = generate_pattern(&self.cfg.pattern)?;
        self.write_image("pattern/target.png", &img)?;
        let backend = self.backend()?;
        self.state.target = Some(encode_target(&img, &backend)?);
        Ok(())
    }

    fn objective(&mut self) -> Result<AttackObjective> {
        let a = &self.cfg.attack;
        let (kind, alpha, mc) = (a.objective, a.alpha, a.mc);
        let mut obj = if kind.needs_target() {
            let t = self.target()?.latent;
            match kind {
                ObjectiveKind::EncoderTarget => AttackObjective::encoder_target(t),
                ObjectiveKind::Ace => AttackObjective::ace(t),
                ObjectiveKind::AcePlus => AttackObjective::ace_plus(t, alpha),
                ObjectiveKind::DiffusionTarget => AttackObjective::diffusion_target(t),
                ObjectiveKind::Advdm => unreachable!("advdm has no target"),
            }
        } else {
            AttackObjective::advdm()
        };
        obj.mc = mc;
        Ok(obj)
    }

    fn attack(&mut self, seed: u64) -> Result<()> {
        let (protected, _) = self.split()?;
        let model = self.backbone()?;
        let obj = self.objective()?;
        let (backend, sched) = (self.backend()?, self.sched());
        let a = &self.cfg.attack;
        let cfg = AttackConfig {
            budget: a.budget.clone(),
            finetune: a.finetune.clone(),
            memory: a.memory,
        };
        let data: Vec<_> = protected.iter().map(|x| (x.clone(), IDENTITY_COND)).collect();
        let run = run_attack(&data, &model, &obj, &cfg, &backend, &sched, seed)?;
        self.peak = Some(run.counters.peak_activation_bytes);
        let adv = run
            .examples
            .iter()
            .map(|e| export_8bit(&e.x_adv, &e.x_clean, cfg.budget.zeta))
            .collect::<Result<Vec<_>>>()?;
        for (i, x) in adv.iter().enumerate() {
            self.write_image(&format!("attack/adv_{i:02}.png"), x)?;
        }
        self.state.adversarial = Some(adv);
        Ok(())
    }

    fn finetune(&mut self, seed: u64) -> Result<()> {
        let train = match self.cfg.finetune.train_on {
            TrainSet::Adversarial => self.adversarial()?,
            TrainSet::Clean => self.split()?.0,
        };
        let base = self.backbone()?;
        let (backend, sched) = (self.backend()?, self.sched());
        let data: Vec<_> = train.into_iter().map(|x| (x, IDENTITY_COND)).collect();
        let ft = &self.cfg.finetune.config;
        let (model, report) = finetune(&base, &data, ft, &backend, &sched, seed)?;
        if let Some(l) = report.losses.last() {
            info!("finetune: final minibatch loss {l:.2}");
        }
        let path = self.out.join("finetune/victim.ckpt");
        ensure_parent(&path)?;
        let sha = match ft.mode {
            FinetuneMode::Adapter => save_adapters(&model, &sched, &backend, &path)?,
            FinetuneMode::Full => save_checkpoint(&model, &sched, &backend, &path)?,
        };
        self.record("finetune/victim.ckpt", sha);
        self.state.victim = Some(model);
        Ok(())
    }

    fn sample(&mut self, seed: u64) -> Result<()> {
        let model = self.generator()?;
        let (backend, sched) = (self.backend()?, self.sched());
        let side = self.cfg.dataset.size / backend.factor();
        let mut out = Vec::with_capacity(self.cfg.sample.count);
        for i in 0..self.cfg.sample.count {
            let z = sample(&model, &sched, self.cfg.sample.steps, IDENTITY_COND, (side, side), derive_indexed(seed, "sample", i as u64))?;
            let img = backend.decode(&z)?.quantize_8bit();
            self.write_image(&format!("sample/sample_{i:02}.png"), &img)?;
            out.push(img);
        }
        self.state.samples = Some(out);
        Ok(())
    }

    fn sdedit(&mut self, seed: u64) -> Result<()> {
        let inputs = match self.cfg.sdedit.source {
            EditSource::Holdout => self.holdout()?,
            EditSource::Protected => self.split()?.0,
            EditSource::Adversarial => self.adversarial()?,
        };
        let model = self.generator()?;
        let (backend, sched) = (self.backend()?, self.sched());
        let s = &self.cfg.sdedit;
        let (strength, steps) = (s.strength, s.steps);
        let mut edits = Vec::with_capacity(inputs.len());
        for (i, x) in inputs.into_iter().enumerate() {
            let out = sdedit(&model, &backend, &sched, &x, strength, Some(steps), IDENTITY_COND, derive_indexed(seed, "sdedit", i as u64))?
                .quantize_8bit();
            self.write_image(&format!("sdedit/edit_{i:02}.png"), &out)?;
            edits.push((x, out));
        }
        self.state.edits = Some(edits);
        Ok(())
    }

    fn analyze(&mut self, seed: u64) -> Result<()> {
        let (protected, _) = self.split()?;
        let adversarial = self.adversarial()?;
        let theta = self.backbone()?;
        let (backend, sched) = (self.backend()?, self.sched());
        let (probes, mc) = (self.cfg.analysis.probes.clone(), self.cfg.analysis.mc);
        let mut summary = BTreeMap::<String, f64>::new();
        for &t in &probes {
            let mut fields = Vec::with_capacity(protected.len());
            for (i, (x, xa)) in protected.iter().zip(&adversarial).enumerate() {
                let f = estimate_eps_adv(&theta, x, xa, t, mc, IDENTITY_COND, &backend, &sched, derive_indexed(seed, "eps-adv", i as u64))?;
                self.write_bytes(&format!("analyze/eps_adv_t{t:03}_i{i:02}.acearr"), &encode_array(&f)?)?;
                if i == 0 {
                    self.write_image(&format!("analyze/eps_adv_t{t:03}_i00.png"), &heatmap(&f.data))?;
                }
                fields.push(f.data);
            }
            let refs: Vec<&Tensor3> = fields.iter().collect();
            if refs.len() > 1 {
                summary.insert(format!("eps_adv_consistency_t{t:03}"), mean_pairwise_cosine(&refs)?.mean);
            }
        }
        if let Some(phi) = self.victim()? {
            let holdout = self.holdout()?;
            let mut norms = Vec::with_capacity(holdout.len());
            for (j, x) in holdout.iter().enumerate() {
                let mut per_t = BTreeMap::new();
                for &t in &probes {
                    let f = estimate_sampling_bias(&phi, x, t, mc, IDENTITY_COND, &backend, &sched, derive_indexed(seed, "sampling-bias", j as u64))?;
                    self.write_bytes(&format!("analyze/sampling_bias_t{t:03}_j{j:02}.acearr"), &encode_array(&f)?)?;
                    per_t.insert(t, f);
                }
                let eta = accumulate_sampling_error(&per_t, &sched)?;
                self.write_bytes(&format!("analyze/sampling_error_j{j:02}.acearr"), &encode_array(&eta)?)?;
                if j == 0 {
                    self.write_image("analyze/sampling_error_j00.png", &heatmap(&eta.data))?;
                }
                norms.push(eta.norm());
            }
            summary.insert("eta_norm".into(), norms.iter().sum::<f64>() / norms.len() as f64);
            self.state.eta_norms = Some(norms);
        }
        self.write_bytes("analyze/summary.json", &serde_json::to_vec_pretty(&summary)?)?;
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        let provider = ProjectionProvider::default();
        let mut metrics = BTreeMap::<String, f64>::new();
        if let Some(edits) = &self.state.edits {
            let (h, w, _) = edits[0].0.shape();
            let cfg = MsSsimConfig::for_size(h.min(w));
            let scores = edits.iter().map(|(x, y)| ms_ssim(y, x, &cfg)).collect::<Result<Vec<_>>>()?;
            metrics.insert("sdedit_ms_ssim".into(), scores.iter().sum::<f64>() / scores.len() as f64);
            let outs: Vec<ImageTensor> = edits.iter().map(|(_, y)| y.clone()).collect();
            metrics.insert("sdedit_clip_iqa".into(), clip_iqa(&outs, NEGATIVE_PROMPT, &provider)?);
        }
        if let Some(samples) = self.state.samples.clone() {
            metrics.insert("sample_clip_iqa".into(), clip_iqa(&samples, NEGATIVE_PROMPT, &provider)?);
            let reference = self.holdout()?;
            let mut sims = Vec::new();
            for s in &samples {
                for r in &reference {
                    sims.push(100.0 * clip_sim(s, r, &provider)?);
                }
            }
            metrics.insert("sample_clip_sim".into(), sims.iter().sum::<f64>() / sims.len() as f64);
        }
        if let Some(norms) = &self.state.eta_norms {
            metrics.insert("eta_norm".into(), norms.iter().sum::<f64>() / norms.len() as f64);
        }
        if metrics.is_empty() {
            return Err(Error::Config("evaluate needs an sdedit, sample or analyze stage before it".into()));
        }
        self.write_bytes("evaluate/metrics.json", &serde_json::to_vec_pretty(&metrics)?)
    }

    fn defend(&mut self, seed: u64) -> Result<()> {
        let (clean, holdout) = self.split()?;
        let adversarial = self.adversarial()?;
        let world = ToyWorld {
            backend: self.backend()?,
            sched: self.sched(),
            theta: self.backbone()?,
            images: self.images()?,
            target: self.target()?,
        };
        let study = StudyConfig {
            victim: self.cfg.finetune.config.clone(),
            analysis_mc: self.cfg.analysis.mc,
            probes: self.cfg.analysis.probes.clone(),
            sdedit_strength: self.cfg.sdedit.strength,
            sdedit_steps: self.cfg.sdedit.steps,
            seed,
            ..Default::default()
        };
        let d = &self.cfg.defend;
        let report = robustness_run(
            &clean,
            &adversarial,
            &holdout,
            &d.specs,
            d.pipeline,
            &DefenseRegistry::with_toy_sr(),
            &study,
            &world,
        )?;
        let table = report.table();
        info!("defense grid:\n{table}");
        self.write_bytes("defend/report.json", &serde_json::to_vec_pretty(&report)?)?;
        self.write_bytes("defend/table.txt", table.as_bytes())
    }
}

fn hash_inputs(cfg: &PipelineConfig) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    for (name, path) in cfg.inputs.named() {
        if path.is_dir() {
            for rel in list_files(path)? {
                out.push(Artifact::hash_file(&path.join(&rel), format!("{name}/{}", rel_string(&rel)))?);
            }
        } else {
            out.push(Artifact::hash_file(path, name.to_string())?);
        }
    }
    Ok(out)
}

/// Run every declared stage, writing artifacts and `manifest.json` under `out`.
///
/// On a stage failure the manifest still records the completed stages and
/// the failure, and the error comes back wrapped in [`Error::Stage`].
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, command: &str) -> Result<ExperimentManifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = ExperimentManifest::new(command, cfg.clone());
    manifest.inputs = hash_inputs(cfg)?;
    manifest.seeds.insert("base".into(), cfg.seed);
    manifest.seeds.insert("dataset".into(), cfg.dataset.seed);
    manifest.seeds.insert("pretrain".into(), cfg.pretrain.seed);
    for &stage in &cfg.stages {
        manifest.seeds.insert(stage.name().into(), cfg.stage_seed(stage));
    }
    let mut runner = Runner::new(cfg, out);
    for &stage in &cfg.stages {
        info!("stage {stage}");
        let start = Instant::now();
        runner.outputs.clear();
        runner.peak = None;
        let result = runner.run(stage);
        manifest.stages.push(StageRecord {
            stage,
            outputs: std::mem::take(&mut runner.outputs),
            elapsed_ms: start.elapsed().as_millis() as u64,
            peak_activation_bytes: runner.peak,
            error: result.as_ref().err().map(|e| e.to_string()),
        });
        if let Err(e) = result {
            manifest.status = RunStatus::Failed {
                stage,
                error: e.to_string(),
            };
            manifest.save(&out.join(MANIFEST_FILE))?;
            return Err(Error::Stage {
                stage: stage.name().into(),
                source: Box::new(e),
            });
        }
    }
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub path: String,
    pub expected: Option<String>,
    pub actual: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub manifest: ExperimentManifest,
    pub compared: usize,
    pub mismatches: Vec<Mismatch>,
}

impl ReplayReport {
    pub fn is_exact(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn diff(expected: &[Artifact], actual: &[Artifact], prefix: &str) -> Vec<Mismatch> {
    let e: BTreeMap<&str, &str> = expected.iter().map(|a| (a.path.as_str(), a.sha256.as_str())).collect();
    let a: BTreeMap<&str, &str> = actual.iter().map(|a| (a.path.as_str(), a.sha256.as_str())).collect();
    let mut keys: Vec<&str> = e.keys().chain(a.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .filter(|k| e.get(k) != a.get(k))
        .map(|k| Mismatch {
            path: format!("{prefix}{k}"),
            expected: e.get(k).map(|s| s.to_string()),
            actual: a.get(k).map(|s| s.to_string()),
        })
        .collect()
}

/// Re-run the config recorded in `manifest_path` into `out` and compare
/// every input and output hash with the recorded ones.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<ReplayReport> {
    let recorded = ExperimentManifest::load(manifest_path)?;
    let mut mismatches = diff(&recorded.inputs, &hash_inputs(&recorded.config)?, "input:");
    let manifest = match run_pipeline(&recorded.config, out, "replay") {
        Ok(m) => m,
        Err(Error::Stage { .. }) => ExperimentManifest::load(&out.join(MANIFEST_FILE))?,
        Err(e) => return Err(e),
    };
    let expected: Vec<Artifact> = recorded.outputs().cloned().collect();
    let actual: Vec<Artifact> = manifest.outputs().cloned().collect();
    mismatches.extend(diff(&expected, &actual, ""));
    Ok(ReplayReport {
        compared: expected.len(),
        manifest,
        mismatches,
    })
}
