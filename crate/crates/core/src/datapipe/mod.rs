//! Corpus and teacher-label plumbing: on-disk formats, synthetic data and
//! teachers, augmentation and the multi-corpus sampler.

pub mod augment;
pub mod sampler;
pub mod shard;
pub mod synth;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::task::Task;
use crate::tensor::Tensor;
use shard::{Shard, ShardKind};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("{path}: {inner}")]
    InFile { path: PathBuf, inner: Box<DataError> },
    #[error("duplicate record id '{0}'")]
    DuplicateId(String),
    #[error("missing record '{0}'")]
    MissingRecord(String),
    #[error("task mismatch: expected {expected}, found {found}")]
    TaskMismatch { expected: Task, found: Task },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {detail}")]
    Json { path: PathBuf, detail: String },
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn in_file(self, path: &Path) -> Self {
        DataError::InFile {
            path: path.to_path_buf(),
            inner: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

/// What a corpus is used for in the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Unlabelled data for teacher-label distillation.
    Pretrain,
    /// Small labelled set for supervised fine-tuning.
    Finetune,
    /// Held-out evaluation data.
    Test,
}

/// One corpus in the experiment, with the knobs used to synthesise it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub name: String,
    pub task: Task,
    pub role: Role,
    pub size: usize,
    #[serde(default = "one")]
    pub repeat: usize,
    /// Manifest path relative to the experiment directory; defaults to `data/<name>.json`.
    #[serde(default)]
    pub path: Option<String>,
    /// Inclusive input-frame range of generated utterances.
    #[serde(default = "default_frames")]
    pub frames: [usize; 2],
    /// Half-open range of world speaker ids drawn from.
    #[serde(default = "default_speakers")]
    pub speakers: [usize; 2],
    /// Store every latent label instead of only the corpus task's.
    #[serde(default)]
    pub all_labels: bool,
}

fn one() -> usize {
    1
}

fn default_frames() -> [usize; 2] {
    [48, 96]
}

fn default_speakers() -> [usize; 2] {
    [0, 16]
}

impl CorpusSpec {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(format!("corpus name '{}' is empty or contains a path separator", self.name));
        }
        if self.repeat == 0 {
            return Err(format!("corpus '{}': repeat must be >= 1", self.name));
        }
        if self.frames[0] == 0 || self.frames[0] > self.frames[1] {
            return Err(format!("corpus '{}': bad frame range {:?}", self.name, self.frames));
        }
        if self.speakers[0] >= self.speakers[1] {
            return Err(format!("corpus '{}': empty speaker range {:?}", self.name, self.speakers));
        }
        Ok(())
    }

    pub fn manifest_path(&self, root: &Path) -> PathBuf {
        match &self.path {
            Some(p) => root.join(p),
            None => root.join("data").join(format!("{}.json", self.name)),
        }
    }

    pub fn label_path(&self, root: &Path, task: Task) -> PathBuf {
        root.join("labels").join(format!("{}.{}.mtkd", self.name, task))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub task: Task,
    /// `[T x F]`
    pub features: Tensor,
    pub transcript: Option<Vec<usize>>,
    /// Multi-hot `[K]`.
    pub events: Option<Vec<f64>>,
    pub speaker: Option<usize>,
}

impl UtteranceRecord {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UttMeta {
    id: String,
    frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transcript: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    events: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    speaker: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    task: Task,
    feature_dim: usize,
    utterances: Vec<UttMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub task: Task,
    pub feature_dim: usize,
    pub utts: Vec<UtteranceRecord>,
}

fn features_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("feats")
}

impl Corpus {
    /// Writes `<manifest>` (JSON) and the companion `.feats` record file.
    /// Features are stored as `f32`.
    pub fn save(&self, manifest: &Path) -> Result<()> {
        let mut feats = Shard::new(ShardKind::Features, vec![self.feature_dim]);
        let mut metas = Vec::with_capacity(self.utts.len());
        for u in &self.utts {
            feats.push(u.id.clone(), u.features.shape().to_vec(), u.features.data().to_vec());
            metas.push(UttMeta {
                id: u.id.clone(),
                frames: u.frames(),
                transcript: u.transcript.clone(),
                events: u.events.as_ref().map(|e| e.iter().map(|&v| v as u8).collect()),
                speaker: u.speaker,
            });
        }
        let m = Manifest {
            name: self.name.clone(),
            task: self.task,
            feature_dim: self.feature_dim,
            utterances: metas,
        };
        let mut json = serde_json::to_string_pretty(&m).expect("manifest serialises");
        json.push('\n');
        write_file(manifest, json.as_bytes())?;
        feats.write(&features_path(manifest))
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| DataError::io(manifest, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| DataError::Json {
            path: manifest.to_path_buf(),
            detail: format!("at '{}': {}", e.path(), e.inner()),
        })?;
        let fpath = features_path(manifest);
        let feats = Shard::read(&fpath)?;
        feats.expect_kind(ShardKind::Features)?;
        if feats.dims[0] != m.feature_dim {
            return Err(DataError::Invalid(format!(
                "{}: feature dim {} does not match manifest {}",
                fpath.display(),
                feats.dims[0],
                m.feature_dim
            )));
        }
        let mut by_id: HashMap<String, shard::Record> = feats.records.into_iter().map(|r| (r.id.clone(), r)).collect();
        let mut utts = Vec::with_capacity(m.utterances.len());
        for meta in m.utterances {
            let rec = by_id.remove(&meta.id).ok_or_else(|| DataError::MissingRecord(meta.id.clone()))?;
            if rec.shape[0] != meta.frames {
                return Err(DataError::Invalid(format!(
                    "utterance '{}': manifest says {} frames, features have {}",
                    meta.id, meta.frames, rec.shape[0]
                )));
            }
            let features = Tensor::new(rec.shape, rec.data).map_err(|e| DataError::Invalid(e.to_string()))?;
            utts.push(UtteranceRecord {
                id: meta.id,
                task: m.task,
                features,
                transcript: meta.transcript,
                events: meta.events.map(|e| e.into_iter().map(f64::from).collect()),
                speaker: meta.speaker,
            });
        }
        Ok(Corpus {
            name: m.name,
            task: m.task,
            feature_dim: m.feature_dim,
            utts,
        })
    }

    pub fn total_frames(&self) -> usize {
        self.utts.iter().map(|u| u.frames()).sum()
    }
}

/// Teacher targets for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherTarget {
    /// Frame-paired embeddings `[T' x 2 D_t]`.
    Asr(Tensor),
    /// Event logits `[K]`.
    At(Tensor),
    /// Speaker vector `[J]`.
    Sv(Tensor),
}

impl TeacherTarget {
    pub fn task(&self) -> Task {
        match self {
            TeacherTarget::Asr(_) => Task::Asr,
            TeacherTarget::At(_) => Task::At,
            TeacherTarget::Sv(_) => Task::Sv,
        }
    }
}

/// Concatenates successive teacher frames `(2k, 2k+1)`; an odd last frame is dropped.
pub fn concat_teacher_frames(te: &Tensor) -> Result<Tensor> {
    if te.rank() != 2 {
        return Err(DataError::Invalid(format!("teacher frames must be a matrix, got {:?}", te.shape())));
    }
    let (t, d) = (te.rows(), te.cols());
    if t < 2 {
        return Err(DataError::Invalid(format!("need at least 2 teacher frames to pair, got {t}")));
    }
    let out_rows = t / 2;
    // rows 2k and 2k+1 are contiguous in row-major storage
    let data = te.data()[..out_rows * 2 * d].to_vec();
    Ok(Tensor::new(vec![out_rows, 2 * d], data).expect("shape"))
}

/// Per-task teacher labels keyed by utterance id.
#[derive(Debug, Clone, Default)]
pub struct LabelSet {
    by_task: HashMap<Task, HashMap<String, Tensor>>,
}

impl LabelSet {
    pub fn insert_shard(&mut self, task: Task, shard: Shard) -> Result<()> {
        let want = match task {
            Task::Asr => ShardKind::Asr,
            Task::At => ShardKind::At,
            Task::Sv => ShardKind::Sv,
        };
        shard.expect_kind(want)?;
        let map = self.by_task.entry(task).or_default();
        for r in shard.records {
            let t = Tensor::new(r.shape, r.data).map_err(|e| DataError::Invalid(e.to_string()))?;
            if map.insert(r.id.clone(), t).is_some() {
                return Err(DataError::DuplicateId(r.id));
            }
        }
        Ok(())
    }

    pub fn has_task(&self, task: Task) -> bool {
        self.by_task.contains_key(&task)
    }

    pub fn contains(&self, task: Task, id: &str) -> bool {
        self.by_task.get(&task).is_some_and(|m| m.contains_key(id))
    }

    /// Teacher target for `id`, frame-paired for ASR.
    pub fn target(&self, task: Task, id: &str) -> Result<TeacherTarget> {
        let raw = self
            .by_task
            .get(&task)
            .and_then(|m| m.get(id))
            .ok_or_else(|| DataError::MissingRecord(format!("{task} teacher label for '{id}'")))?;
        Ok(match task {
            Task::Asr => TeacherTarget::Asr(concat_teacher_frames(raw)?),
            Task::At => TeacherTarget::At(raw.clone()),
            Task::Sv => TeacherTarget::Sv(raw.clone()),
        })
    }
}
