//! Experiment configuration: one JSON document describing the world, model,
//! corpora, both training stages and the evaluation sets.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::augment::AugmentPolicy;
use crate::datapipe::synth::WorldConfig;
use crate::datapipe::{CorpusSpec, Role};
use crate::rng;
use crate::task::Task;
use crate::trainer::{FreezePolicy, ModelConfig, StageConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; world, corpus, model and training seeds derive from it.
    #[serde(default)]
    pub seed: u64,
    /// Experiment directory, relative to the config file.
    #[serde(default = "default_out")]
    pub out_dir: String,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub corpora: Vec<CorpusSpec>,
    #[serde(default)]
    pub pretrain: StageConfig,
    #[serde(default)]
    pub finetune: StageConfig,
    #[serde(default)]
    pub freeze: FreezePolicy,
    /// Student-input augmentation (both stages).
    #[serde(default)]
    pub augment: AugmentPolicy,
}

fn default_out() -> String {
    "run".into()
}

/// Seed domains split off the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedUse {
    World,
    Encoder,
    Heads,
    Pretrain,
    Finetune,
}

impl ExperimentConfig {
    /// Parses JSON, reporting the path of the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            format!("at '{path}': {}", e.inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let cfg = Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let root = base.join(&cfg.out_dir);
        Ok((cfg, root))
    }

    pub fn derived_seed(&self, what: SeedUse) -> u64 {
        rng::mix(self.seed, &[0xE7, what as u64])
    }

    /// Model configuration with encoder/head seeds folded with the master seed.
    pub fn seeded_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.encoder.seed = rng::mix(self.derived_seed(SeedUse::Encoder), &[m.encoder.seed]);
        m.heads.seed = rng::mix(self.derived_seed(SeedUse::Heads), &[m.heads.seed]);
        m
    }

    pub fn validate(&self) -> Result<(), String> {
        self.world.validate().map_err(|e| format!("world: {e}"))?;
        self.model.validate().map_err(|e| format!("model: {e}"))?;
        self.pretrain.validate().map_err(|e| format!("pretrain: {e}"))?;
        self.finetune.validate().map_err(|e| format!("finetune: {e}"))?;
        self.freeze.validate().map_err(|e| format!("freeze: {e}"))?;
        let (w, m) = (&self.world, &self.model);
        let pairs = [
            ("world.feature_dim", w.feature_dim, "model.encoder.input_dim", m.encoder.input_dim),
            ("world.vocab_size", w.vocab_size, "model.heads.vocab_size", m.heads.vocab_size),
            ("world.num_events", w.num_events, "model.heads.num_events", m.heads.num_events),
            ("world.teacher_dim", w.teacher_dim, "model.heads.teacher_dim", m.heads.teacher_dim),
            ("world.spk_dim", w.spk_dim, "model.heads.spk_dim", m.heads.spk_dim),
        ];
        for (a, x, b, y) in pairs {
            if x != y {
                return Err(format!("{a} = {x} but {b} = {y}"));
            }
        }
        let mut names = HashSet::new();
        for c in &self.corpora {
            c.validate()?;
            if !names.insert(&c.name) {
                return Err(format!("corpus name '{}' is used twice", c.name));
            }
            if c.speakers[1] > w.num_speakers {
                return Err(format!(
                    "corpus '{}': speakers {:?} exceed world.num_speakers = {}",
                    c.name, c.speakers, w.num_speakers
                ));
            }
            if c.frames[0] < m.encoder.min_input_frames().max(w.frame_multiple) {
                return Err(format!(
                    "corpus '{}': minimum length {} is below the encoder's {} frames",
                    c.name,
                    c.frames[0],
                    m.encoder.min_input_frames().max(w.frame_multiple)
                ));
            }
            let trains_sv = c.role == Role::Finetune && (c.task == Task::Sv || c.all_labels);
            if trains_sv && c.speakers[1] > m.heads.num_speakers {
                return Err(format!(
                    "corpus '{}': fine-tune speakers {:?} exceed model.heads.num_speakers = {}",
                    c.name, c.speakers, m.heads.num_speakers
                ));
            }
        }
        Ok(())
    }

    pub fn corpora_with(&self, role: Role) -> impl Iterator<Item = &CorpusSpec> {
        self.corpora.iter().filter(move |c| c.role == role)
    }

    /// The test corpus evaluated for `task`: the first `test` corpus of that
    /// task, else the first all-labels test corpus.
    pub fn test_corpus(&self, task: Task) -> Option<&CorpusSpec> {
        self.corpora_with(Role::Test)
            .find(|c| c.task == task)
            .or_else(|| self.corpora_with(Role::Test).find(|c| c.all_labels))
    }
}
