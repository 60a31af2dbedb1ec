//! Experiment configuration: one TOML document with a section per stage.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use bap_core::alignment::{AlignConfig, ControlConfig, FinetuneConfig};
use bap_core::evaluation::ProbeConfig;
use bap_core::scene::{Degradation, WorldConfig};
use serde::{Deserialize, Serialize};

/// Every method the run matrix knows.
pub const METHODS: [&str; 7] = ["native-zs", "native-lp", "lp-ft", "control", "bap-lp", "bap-zs", "ortho"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Global seed; per-run seeds are derived from it and the run index.
    pub seed: u64,
    /// Number of independent runs per (method, ρ).
    pub runs: usize,
    pub world_seed: u64,
    pub methods: Vec<String>,
    pub rhos: Vec<f64>,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub teacher: TeacherConfig,
    pub data: DataConfig,
    pub bap: BapConfig,
    pub control: ControlConfig,
    pub probe: ProbeConfig,
    /// Probe for the background-retention check.
    pub retention: RetentionConfig,
    pub finetune: FinetuneConfig,
    pub ortho: OrthoConfig,
    pub additivity: AdditivityConfig,
    pub k_ablation: KAblationConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            runs: 5,
            world_seed: 2024,
            methods: METHODS.iter().map(|s| s.to_string()).collect(),
            rhos: vec![1.0, 0.95],
            out_dir: PathBuf::from("runs"),
            world: WorldConfig::default(),
            teacher: TeacherConfig::default(),
            data: DataConfig::default(),
            bap: BapConfig::default(),
            control: ControlConfig::default(),
            probe: ProbeConfig::default(),
            retention: RetentionConfig::default(),
            finetune: FinetuneConfig::default(),
            ortho: OrthoConfig::default(),
            additivity: AdditivityConfig::default(),
            k_ablation: KAblationConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    /// Fixed random linear map plus the `alpha` non-additive term.
    #[default]
    Planted,
    /// An mlp pre-trained with cross-entropy on background-randomized
    /// composites, then frozen.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub mode: TeacherMode,
    pub seed: u64,
    pub alpha: f32,
    pub embed_dim: usize,
    pub learned: LearnedTeacherConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { mode: TeacherMode::Planted, seed: 1, alpha: 0.0, embed_dim: 64, learned: LearnedTeacherConfig::default() }
    }
}

/// Pre-training of the learned teacher. Foregrounds come from every world
/// class; backgrounds from the pool groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnedTeacherConfig {
    pub per_class: usize,
    pub train: AlignConfig,
}

impl Default for LearnedTeacherConfig {
    fn default() -> Self {
        LearnedTeacherConfig { per_class: 100, train: AlignConfig { epochs: 15, ..AlignConfig::default() } }
    }
}

/// The grouped downstream task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// World classes used as labels 0 and 1.
    pub classes: [usize; 2],
    /// World background groups used as groups 0 and 1.
    pub groups: [usize; 2],
    pub fg_train_frac: f64,
    pub bg_train_frac: f64,
    pub train_per_class: usize,
    pub test_per_cell: usize,
    /// Prototype exemplars per class for the zero-shot analog.
    pub prototype_exemplars: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: [0, 1],
            groups: [0, 1],
            fg_train_frac: 0.8,
            bg_train_frac: 0.8,
            train_per_class: 800,
            test_per_cell: 160,
            prototype_exemplars: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BapConfig {
    /// Distinct foregrounds (split evenly over the task classes).
    pub n_foregrounds: usize,
    pub k: usize,
    pub degradation: Degradation,
    /// Background groups forming the generic anchor/training pool.
    pub pool_groups: Vec<usize>,
    pub align: AlignConfig,
}

impl Default for BapConfig {
    fn default() -> Self {
        BapConfig {
            n_foregrounds: 200,
            k: 10,
            degradation: Degradation::Perfect,
            pool_groups: (2..8).collect(),
            align: AlignConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetentionConfig {
    /// Backgrounds drawn per group, split 80/20 for the probe.
    pub per_group: usize,
    pub probe: ProbeConfig,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        // unit-norm background embeddings differ only slightly between
        // groups; the downstream probe rate leaves this probe underfit
        RetentionConfig { per_group: 300, probe: ProbeConfig { lr: 1e-2, ..ProbeConfig::default() } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrthoConfig {
    /// Classes never seen while training toward the orthogonal targets.
    pub heldout_classes: [usize; 2],
    pub target_seed: u64,
}

impl Default for OrthoConfig {
    fn default() -> Self {
        OrthoConfig { heldout_classes: [2, 3], target_seed: 17 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdditivityConfig {
    pub n: usize,
    pub alphas: Vec<f32>,
    /// `standard` or `disjoint`.
    pub mode: String,
}

impl Default for AdditivityConfig {
    fn default() -> Self {
        AdditivityConfig { n: 10_000, alphas: vec![0.0, 0.5, 2.0], mode: "standard".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KAblationConfig {
    pub ks: Vec<usize>,
    pub n_foregrounds: usize,
    pub mu_backgrounds: usize,
    pub var_trials: usize,
}

impl Default for KAblationConfig {
    fn default() -> Self {
        KAblationConfig { ks: bap_core::anchors::K_GRID.to_vec(), n_foregrounds: 50, mu_backgrounds: 20_000, var_trials: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub seg_modes: Vec<Degradation>,
    pub n_sweep: Vec<usize>,
    pub m_sweep_n: Vec<usize>,
    pub m_sweep_m: Vec<usize>,
    pub k_train_sweep: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seg_modes: Degradation::ALL.to_vec(),
            n_sweep: vec![20, 50, 100, 200],
            m_sweep_n: vec![50, 100],
            m_sweep_m: vec![2, 4, 8, 16, 32],
            k_train_sweep: vec![1, 2, 4, 8, 16],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if let Some(m) = self.methods.iter().find(|m| !METHODS.contains(&m.as_str())) {
            bail!("unknown method `{m}`; expected one of {METHODS:?}");
        }
        if self.runs == 0 {
            bail!("runs must be >= 1");
        }
        if let Some(r) = self.rhos.iter().find(|r| !(0.5..=1.0).contains(*r)) {
            bail!("rho {r} outside [0.5, 1]");
        }
        if self.bap.n_foregrounds < 2 || self.bap.align.m_per_fg == 0 || self.bap.k == 0 {
            bail!("bap needs N >= 2, M >= 1 and K >= 1");
        }
        let n = self.world.num_classes;
        if self.data.classes.iter().chain(&self.ortho.heldout_classes).any(|&c| c >= n) {
            bail!("class index beyond the world's {n} classes");
        }
        let g = self.world.num_bg_groups;
        if self.data.groups.iter().chain(&self.bap.pool_groups).any(|&x| x >= g) {
            bail!("background group beyond the world's {g} groups");
        }
        if self.bap.pool_groups.iter().any(|x| self.data.groups.contains(x)) {
            bail!("pool groups must not overlap the downstream groups");
        }
        Ok(())
    }

    /// Seed of run `index`.
    pub fn run_seed(&self, index: usize) -> u64 {
        bap_core::seed::derive(self.seed, &[0x52, index as u64])
    }
}
