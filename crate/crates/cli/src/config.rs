//! Experiment configuration: one JSON document describing data, model,
//! training, forging, attacks and probes.

use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use repudiate_core::attacks::{Attack, LiraThreshold, SuiteConfig};
use repudiate_core::forge::ForgeConfig;
use repudiate_core::model::{steps_for, Hyperparams, LrSchedule, ModelSpec};
use repudiate_core::pol::RecordConfig;
use repudiate_core::rng::{self, Domain};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian blobs generated from the data seed.
    Synthetic { dim: usize, classes: usize, separation: f64 },
    /// IDX image/label files; relative paths resolve against the config file.
    Idx { images: PathBuf, labels: PathBuf },
    /// A dataset container written by `write_container`.
    Container { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training set size `n`.
    pub train: usize,
    /// Held-out samples visible to the attacker.
    pub validation: usize,
    /// Non-members used to set the EnhancedMIA threshold.
    pub population: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub step_size: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "constant")]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "one")]
    pub checkpoint_interval: u64,
}

fn constant() -> LrSchedule {
    LrSchedule::Constant
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeSection {
    pub candidates: usize,
    pub splits: usize,
    pub group_size: usize,
    /// Sample flip flags for candidates and use the log's weight decay.
    #[serde(default)]
    pub full: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    #[serde(default = "all_attacks")]
    pub roster: Vec<Attack>,
    #[serde(default = "sixteen")]
    pub shadows: usize,
    #[serde(default)]
    pub lira_threshold: LiraThreshold,
    #[serde(default = "tenth")]
    pub enhanced_fpr: f64,
}

fn all_attacks() -> Vec<Attack> {
    Attack::ALL.to_vec()
}

fn sixteen() -> usize {
    16
}

fn tenth() -> f64 {
    0.1
}

impl Default for AttackSection {
    fn default() -> Self {
        Self { roster: all_attacks(), shadows: 16, lira_threshold: LiraThreshold::MaxAccuracy, enhanced_fpr: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSection {
    /// Number of groups reconstructed and evaluated.
    pub groups: usize,
    /// Samples per Common / Validation probe.
    #[serde(default = "five")]
    pub size: usize,
}

fn five() -> usize {
    5
}

/// Per-component seeds; any omitted seed is derived from the master seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: Option<u64>,
    pub split: Option<u64>,
    pub init: Option<u64>,
    pub schedule: Option<u64>,
    pub forge: Option<u64>,
    pub shadows: Option<u64>,
    pub probes: Option<u64>,
}

/// Seeds with every component resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ResolvedSeeds {
    pub data: u64,
    pub split: u64,
    pub init: u64,
    pub schedule: u64,
    pub forge: u64,
    pub shadows: u64,
    pub probes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub seeds: Seeds,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub training: TrainingConfig,
    pub forge: ForgeSection,
    #[serde(default)]
    pub attacks: AttackSection,
    pub probe: ProbeSection,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Checkpoint spacing of reconstructed PoR logs.
    #[serde(default = "one")]
    pub por_checkpoint_interval: u64,
    /// Directory against which relative data paths resolve.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_epsilon() -> f64 {
    1e-3
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn seeds(&self) -> ResolvedSeeds {
        let mut rng = rng::stream(self.seed, Domain::Synthetic, u64::MAX);
        let mut pick = |s: Option<u64>| {
            let derived = rng.next_u64();
            s.unwrap_or(derived)
        };
        let s = &self.seeds;
        ResolvedSeeds {
            data: pick(s.data),
            split: pick(s.split),
            init: pick(s.init),
            schedule: pick(s.schedule),
            forge: pick(s.forge),
            shadows: pick(s.shadows),
            probes: pick(s.probes),
        }
    }

    pub fn hyper(&self) -> Hyperparams {
        let t = &self.training;
        Hyperparams {
            step_size: t.step_size,
            batch_size: t.batch_size,
            epochs: t.epochs,
            total_steps: steps_for(self.data.train, t.batch_size, t.epochs),
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            schedule: t.schedule,
        }
    }

    pub fn record_config(&self) -> RecordConfig {
        let seeds = self.seeds();
        RecordConfig {
            model: self.model.clone(),
            hyper: self.hyper(),
            init_seed: seeds.init,
            schedule_seed: seeds.schedule,
            augment: self.training.augment,
            checkpoint_interval: self.training.checkpoint_interval,
        }
    }

    pub fn forge_config(&self) -> ForgeConfig {
        ForgeConfig {
            candidates: self.forge.candidates,
            splits: self.forge.splits,
            group_size: self.forge.group_size,
            seed: self.seeds().forge,
            augment: self.forge.full && self.training.augment,
            count_costs: true,
        }
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig { lira_threshold: self.attacks.lira_threshold, enhanced_fpr: self.attacks.enhanced_fpr }
    }

    /// Checks every cross-field constraint that does not need the data itself.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::usage(m));
        let n = self.data.train;
        let t = &self.training;
        if n == 0 || t.batch_size == 0 || n % t.batch_size != 0 {
            return bad(format!("batch size {} must divide the training set size {n}", t.batch_size));
        }
        self.hyper().validate().map_err(CliError::from_core_usage)?;
        self.forge_config().validate(n).map_err(CliError::from_core_usage)?;
        if t.batch_size > n - n / self.forge.splits {
            return bad(format!("batch size {} exceeds the forging candidate pool of {}", t.batch_size, n - n / self.forge.splits));
        }
        if t.checkpoint_interval == 0 || self.por_checkpoint_interval == 0 {
            return bad("checkpoint intervals must be >= 1".into());
        }
        let groups = n / self.forge.group_size;
        if self.probe.groups == 0 || self.probe.groups > groups {
            return bad(format!("probe.groups must lie in 1..={groups}"));
        }
        if self.probe.size == 0 || self.probe.size > self.data.validation || self.probe.size + self.forge.group_size > n {
            return bad(format!("probe size {} does not fit the data splits", self.probe.size));
        }
        if self.attacks.shadows < 2 {
            return bad("at least two shadow models are required".into());
        }
        if !(self.attacks.enhanced_fpr > 0.0 && self.attacks.enhanced_fpr < 1.0) {
            return bad("attacks.enhanced_fpr must lie in (0, 1)".into());
        }
        if self.attacks.roster.is_empty() {
            return bad("attack roster is empty".into());
        }
        if self.data.population == 0 {
            return bad("population set must be nonempty".into());
        }
        if (n + self.data.validation) / 2 < t.batch_size {
            return bad("shadow training sets would be smaller than one batch".into());
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be >= 0".into());
        }
        if let DataSource::Synthetic { dim, classes, .. } = self.data.source {
            if self.model.input_dim() != dim || self.model.classes() != classes {
                return bad("model dimensions do not match the synthetic data".into());
            }
        }
        Ok(())
    }
}
