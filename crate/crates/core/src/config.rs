//! Experiment configuration: one TOML file with a section per stage.
//!
//! Every stochastic stage draws its seed from `experiment.seed` through a
//! labelled derivation (see [`crate::rng::derive_seed`]), so a resolved
//! config is a complete manifest of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_synthetic, planted_weights, stratified_split, DatasetSplits, StratKey, SynthConfig,
    DEFAULT_STRAT_BUCKETS,
};
use crate::error::{Error, Result};
use crate::objective::{Objective, ObjectiveKind, DEFAULT_BETA};
use crate::policy::{Arch, ModelConfig};
use crate::rng::derive_seed;
use crate::selection::SelectionBand;
use crate::trainer::{Optimizer, TrainOpts};

pub const SEED_LABELS: &[&str] = &[
    "data/reward",
    "data/pool",
    "data/test",
    "data/split",
    "model/init",
    "noise/val",
    "shuffle/sft",
    "shuffle/warmup",
    "shuffle/aux",
    "shuffle/retrain",
    "shuffle/dynamics",
    "shuffle/dynamics/continue",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub sft: StageOpts,
    pub warmup: StageOpts,
    pub aux: StageOpts,
    pub retrain: RetrainSection,
    pub selection: SelectionSection,
    pub dynamics: DynamicsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    pub objective: Objective,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub vocab: usize,
    pub prompt_len: usize,
    pub response_len: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub flip_rate: f64,
    pub score_noise: f64,
    pub strat_key: StratKey,
    pub strat_buckets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    pub hidden_dims: Vec<usize>,
    pub init_scale: f64,
}

/// Training options of one stage; the shuffle seed is derived from the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
}

impl Default for StageOpts {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 16,
            learning_rate: 0.05,
            optimizer: Optimizer::Adam,
        }
    }
}

impl StageOpts {
    pub fn to_train_opts(&self, root_seed: u64, stage: &str) -> TrainOpts {
        TrainOpts {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            shuffle_seed: derive_seed(root_seed, &format!("shuffle/{stage}")),
            checkpoint_every_epoch: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainStart {
    /// Restart from the SFT reference model.
    Sft,
    /// Continue from the warm-up checkpoint.
    Warmup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainSection {
    #[serde(flatten)]
    pub opts: StageOpts,
    pub start: RetrainStart,
}

impl Default for RetrainSection {
    fn default() -> Self {
        Self {
            opts: StageOpts {
                epochs: 2,
                ..StageOpts::default()
            },
            start: RetrainStart::Sft,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub xi: SelectionBand,
    pub tau: SelectionBand,
    pub tif: SelectionBand,
    /// Also compute exact influence (and the TIF flag) for every train pair.
    pub score_if: bool,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            xi: SelectionBand::default(),
            tau: SelectionBand::default(),
            tif: SelectionBand::default(),
            score_if: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsSection {
    /// Alignment epochs producing the checkpoints.
    #[serde(flatten)]
    pub opts: StageOpts,
    /// Checkpoints (epoch indices) at which influence partitions are formed.
    pub checkpoints: Vec<usize>,
    pub continue_epochs: usize,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            opts: StageOpts {
                epochs: 5,
                ..StageOpts::default()
            },
            checkpoints: vec![1],
            continue_epochs: 2,
        }
    }
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seed: 7,
            objective: Objective::Dpo,
            beta: DEFAULT_BETA,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            vocab: 8,
            prompt_len: 4,
            response_len: 6,
            n_train: 512,
            n_val: 256,
            n_test: 64,
            flip_rate: 0.2,
            score_noise: 0.5,
            strat_key: StratKey::ScoreMargin,
            strat_buckets: DEFAULT_STRAT_BUCKETS,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Arch::LogLinear,
            hidden_dims: vec![16],
            init_scale: 0.05,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            sft: StageOpts::default(),
            warmup: StageOpts::default(),
            aux: StageOpts::default(),
            retrain: RetrainSection::default(),
            selection: SelectionSection::default(),
            dynamics: DynamicsSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn seed(&self, label: &str) -> u64 {
        derive_seed(self.experiment.seed, label)
    }

    /// Every labelled seed the experiment recipes derive from the root.
    pub fn derived_seeds(&self) -> Vec<(&'static str, u64)> {
        SEED_LABELS.iter().map(|&l| (l, self.seed(l))).collect()
    }

    pub fn objective(&self) -> Result<ObjectiveKind> {
        ObjectiveKind::new(self.experiment.objective, self.experiment.beta)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            arch: self.model.arch,
            vocab_size: self.data.vocab,
            hidden_dims: match self.model.arch {
                Arch::LogLinear => Vec::new(),
                Arch::Mlp => self.model.hidden_dims.clone(),
            },
            init_scale: self.model.init_scale,
            seed: self.seed("model/init"),
        }
    }

    pub fn stage_opts(&self, stage: &str) -> Result<TrainOpts> {
        let opts = match stage {
            "sft" => &self.sft,
            "warmup" => &self.warmup,
            "aux" => &self.aux,
            "retrain" => &self.retrain.opts,
            "dynamics" => &self.dynamics.opts,
            other => return Err(Error::InvalidArgument(format!("unknown stage `{other}`"))),
        };
        Ok(opts.to_train_opts(self.experiment.seed, stage))
    }

    /// Generator settings of the (noisy) train+validation pool.
    pub fn pool_synth_config(&self) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            vocab: d.vocab,
            prompt_len: d.prompt_len,
            response_len: d.response_len,
            n_pairs: d.n_train + d.n_val,
            reward_weights: planted_weights(d.vocab, self.seed("data/reward")),
            label_flip_rate: d.flip_rate,
            score_noise: d.score_noise,
            seed: self.seed("data/pool"),
            id_prefix: "pair".into(),
        }
    }

    /// Generator settings of the clean held-out test set.
    pub fn test_synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_pairs: self.data.n_test,
            label_flip_rate: 0.0,
            seed: self.seed("data/test"),
            id_prefix: "test".into(),
            ..self.pool_synth_config()
        }
    }

    /// Noisy pool split into train/validation by stratified sampling, plus a
    /// clean test set from the same planted reward.
    pub fn build_splits(&self) -> Result<DatasetSplits> {
        let pool = gen_synthetic(&self.pool_synth_config())?;
        let frac = self.data.n_val as f64 / pool.len() as f64;
        let split = stratified_split(
            &pool,
            frac,
            self.data.strat_key,
            self.data.strat_buckets,
            self.seed("data/split"),
        )?;
        let splits = DatasetSplits {
            train: split.train,
            val: split.val,
            test: gen_synthetic(&self.test_synth_config())?,
        };
        splits.validate()?;
        Ok(splits)
    }
}
