//! Experiment lifecycle: data generation, teacher-label extraction, the two
//! training stages, checkpoint averaging and evaluation. Each function here
//! backs one CLI command.
//!
//! Layout under the experiment root:
//! `data/` corpora, `labels/` teacher shards, `pretrain/` and `finetune/`
//! checkpoints plus `log.jsonl`.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, SeedUse};
use crate::datapipe::shard::Shard;
use crate::datapipe::synth::World;
use crate::datapipe::{Corpus, CorpusSpec, DataError, LabelSet, Role};
use crate::metrics::{self, EerReport, EvalReport, MetricError};
use crate::params::ParamStore;
use crate::task::Task;
use crate::tensor::Tape;
use crate::trainer::{
    average_checkpoints, run_stage, LogLine, LossMode, Model, StageData, StageOutput, StageSource, TrainError,
    TrainState,
};
use crate::{losses, trainer};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("metric: {0}")]
    Metric(#[from] MetricError),
}

impl PipelineError {
    /// 1 for usage/config problems, 2 for runtime/data failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Train(TrainError::Config(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate().map_err(PipelineError::Config)?;
        Ok(Experiment { cfg, root: root.into() })
    }

    pub fn world(&self) -> World {
        World::new(&self.cfg.world, self.cfg.derived_seed(SeedUse::World))
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn finetune_dir(&self) -> PathBuf {
        self.root.join("finetune")
    }

    pub fn averaged_path(&self) -> PathBuf {
        self.pretrain_dir().join("averaged.mtkd")
    }

    fn spec(&self, name: &str) -> Result<&CorpusSpec> {
        self.cfg
            .corpora
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| PipelineError::Config(format!("no corpus named '{name}'")))
    }

    /// Writes every configured corpus. Returns the manifest paths.
    pub fn gen_data(&self) -> Result<Vec<PathBuf>> {
        let world = self.world();
        let mut out = Vec::new();
        for spec in &self.cfg.corpora {
            let path = spec.manifest_path(&self.root);
            world.corpus(spec).save(&path)?;
            out.push(path);
        }
        Ok(out)
    }

    pub fn load_corpus(&self, spec: &CorpusSpec) -> Result<Corpus> {
        let c = Corpus::load(&spec.manifest_path(&self.root))?;
        if c.task != spec.task || c.name != spec.name {
            return Err(PipelineError::Config(format!(
                "manifest for '{}' holds corpus '{}' ({})",
                spec.name, c.name, c.task
            )));
        }
        Ok(c)
    }

    /// Runs the `task` teacher over the corpora of that task (and over
    /// all-labels corpora). With `corpus`, only that corpus is labelled and a
    /// task mismatch is an error.
    pub fn extract(&self, task: Task, corpus: Option<&str>) -> Result<Vec<PathBuf>> {
        let world = self.world();
        let teacher = world.teacher(task);
        let specs: Vec<&CorpusSpec> = match corpus {
            Some(name) => vec![self.spec(name)?],
            None => self.cfg.corpora.iter().filter(|c| c.task == task || c.all_labels).collect(),
        };
        let mut out = Vec::new();
        for spec in specs {
            let c = self.load_corpus(spec)?;
            let shard = teacher.extract(&c, spec.all_labels)?;
            let path = spec.label_path(&self.root, task);
            shard.write(&path)?;
            out.push(path);
        }
        Ok(out)
    }

    /// Loads every label shard that exists for `specs`; the corpus task's own
    /// labels are required when `required` is set.
    fn labels_for(&self, specs: &[&CorpusSpec], required: impl Fn(&CorpusSpec, Task) -> bool) -> Result<LabelSet> {
        let mut labels = LabelSet::default();
        for spec in specs {
            for task in Task::ALL {
                let path = spec.label_path(&self.root, task);
                if path.exists() {
                    labels.insert_shard(task, Shard::read(&path)?)?;
                } else if required(spec, task) {
                    return Err(DataError::MissingRecord(format!(
                        "{task} teacher labels for corpus '{}' ({}); run extract first",
                        spec.name,
                        path.display()
                    ))
                    .into());
                }
            }
        }
        Ok(labels)
    }

    fn stage_data(&self, role: Role, labels_required: impl Fn(&CorpusSpec, Task) -> bool) -> Result<StageData> {
        let specs: Vec<&CorpusSpec> = self.cfg.corpora_with(role).collect();
        if specs.is_empty() {
            return Err(PipelineError::Config(format!("no {role:?} corpora configured")));
        }
        let mut data = StageData {
            labels: self.labels_for(&specs, labels_required)?,
            augment: self.cfg.augment,
            ..Default::default()
        };
        for spec in &specs {
            data.sources.push(StageSource {
                corpus: self.load_corpus(spec)?,
                repeat: spec.repeat,
            });
        }
        if let Some(n) = &self.cfg.augment.noise {
            data.noise_bank = self.world().noise_bank(n.clips, n.clip_frames);
        }
        Ok(data)
    }

    fn open_log(dir: &Path, append: bool) -> Result<BufWriter<std::fs::File>> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let path = dir.join("log.jsonl");
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| DataError::io(&path, e))?;
        Ok(BufWriter::new(f))
    }

    fn check_fresh(dir: &Path) -> Result<()> {
        if dir.exists() && !TrainState::list_checkpoints(dir)?.is_empty() {
            return Err(PipelineError::Config(format!(
                "{} already holds checkpoints; pass --resume or choose another --out",
                dir.display()
            )));
        }
        Ok(())
    }

    /// Stage 1: multi-teacher distillation from a fresh model.
    pub fn pretrain(
        &self,
        out: Option<&Path>,
        resume: Option<&Path>,
        on_step: &mut dyn FnMut(&TrainState, &LogLine) -> bool,
    ) -> Result<TrainState> {
        let dir = out.map_or_else(|| self.pretrain_dir(), Path::to_path_buf);
        let all = self.cfg.pretrain.loss_mode == LossMode::AllTasks;
        let data = self.stage_data(Role::Pretrain, |c, t| c.task == t && !all)?;
        let model_cfg = self.cfg.seeded_model();
        let (mut state, model) = match resume {
            Some(p) => {
                let st = TrainState::load(p)?;
                if st.stage != trainer::Stage::Pretrain {
                    return Err(PipelineError::Config(format!("{} is not a pre-training checkpoint", p.display())));
                }
                let model = Model::attach(&model_cfg, &st.store)?;
                (st, model)
            }
            None => {
                Self::check_fresh(&dir)?;
                let mut store = ParamStore::new();
                let model = Model::init(&model_cfg, &mut store, false);
                let seed = self.cfg.derived_seed(SeedUse::Pretrain);
                (TrainState::fresh(store, trainer::Stage::Pretrain, seed), model)
            }
        };
        let mut log = Self::open_log(&dir, resume.is_some())?;
        let freeze = self.cfg.freeze;
        run_stage(
            &mut state,
            &model,
            &data,
            &self.cfg.pretrain,
            &freeze,
            StageOutput {
                ckpt_dir: Some(&dir),
                log: Some(&mut log),
            },
            on_step,
        )?;
        log.flush().map_err(|e| DataError::io(&dir, e))?;
        Ok(state)
    }

    /// Averages the last `k` checkpoints in `dir` into `out`.
    pub fn average(&self, dir: &Path, k: usize, out: &Path) -> Result<TrainState> {
        average_dir(dir, k, out)
    }

    /// Stage 2: supervised multi-task fine-tuning. Without `init` the model
    /// starts from scratch (no encoder warm-up, full encoder rate).
    pub fn finetune(
        &self,
        init: Option<&Path>,
        out: Option<&Path>,
        resume: Option<&Path>,
        on_step: &mut dyn FnMut(&TrainState, &LogLine) -> bool,
    ) -> Result<TrainState> {
        let dir = out.map_or_else(|| self.finetune_dir(), Path::to_path_buf);
        let kd = self.cfg.finetune.kd_aux;
        let data = self.stage_data(Role::Finetune, |c, t| c.task == t && kd.get(t))?;
        let model_cfg = self.cfg.seeded_model();
        let seed = self.cfg.derived_seed(SeedUse::Finetune);
        let (mut state, model) = match resume {
            Some(p) => {
                let st = TrainState::load(p)?;
                if st.stage != trainer::Stage::Finetune {
                    return Err(PipelineError::Config(format!("{} is not a fine-tuning checkpoint", p.display())));
                }
                let model = Model::attach(&model_cfg, &st.store)?;
                (st, model)
            }
            None => {
                Self::check_fresh(&dir)?;
                let mut store = match init {
                    Some(p) => TrainState::load(p)?.store,
                    None => {
                        let mut s = ParamStore::new();
                        Model::init(&model_cfg, &mut s, false);
                        s
                    }
                };
                let mut model = Model::attach(&model_cfg, &store)?;
                model.ensure_finetune_heads(&mut store);
                let mut st = TrainState::fresh(store, trainer::Stage::Finetune, seed);
                st.scratch = init.is_none();
                (st, model)
            }
        };
        let mut log = Self::open_log(&dir, resume.is_some())?;
        run_stage(
            &mut state,
            &model,
            &data,
            &self.cfg.finetune,
            &self.cfg.freeze,
            StageOutput {
                ckpt_dir: Some(&dir),
                log: Some(&mut log),
            },
            on_step,
        )?;
        log.flush().map_err(|e| DataError::io(&dir, e))?;
        Ok(state)
    }

    /// Evaluates `store` on the test corpora for the requested metrics
    /// (`Asr` = WER, `At` = mAP, `Sv` = EER; `kd` adds the ASR KD L1 distance).
    pub fn evaluate(&self, store: &ParamStore, tasks: &[Task], kd: bool) -> Result<EvalReport> {
        let model = Model::attach(&self.cfg.seeded_model(), store)?;
        let test = |task: Task| -> Result<Corpus> {
            let spec = self
                .cfg
                .test_corpus(task)
                .ok_or_else(|| PipelineError::Config(format!("no test corpus for {task}")))?;
            self.load_corpus(spec)
        };
        let mut report = EvalReport::default();
        for &task in tasks {
            let corpus = test(task)?;
            match task {
                Task::Asr => report.wer = Some(eval_wer(&model, store, &corpus.utts)?.into()),
                Task::At => report.map = Some(eval_map(&model, store, &corpus.utts)?),
                Task::Sv => report.eer = Some(eval_eer(&model, store, &corpus.utts)?),
            }
        }
        if kd {
            let spec = self
                .cfg
                .test_corpus(Task::Asr)
                .ok_or_else(|| PipelineError::Config("no ASR test corpus for KD L1".into()))?;
            let corpus = self.load_corpus(spec)?;
            let labels = self.labels_for(&[spec], |_, t| t == Task::Asr)?;
            report.kd_l1 = Some(kd_l1_eval(&model, store, &corpus, &labels)?);
        }
        Ok(report)
    }
}

pub fn average_dir(dir: &Path, k: usize, out: &Path) -> Result<TrainState> {
    if k == 0 {
        return Err(PipelineError::Config("k must be >= 1".into()));
    }
    let all = TrainState::list_checkpoints(dir)?;
    if all.is_empty() {
        return Err(PipelineError::Config(format!("no checkpoints in {}", dir.display())));
    }
    let chosen = &all[all.len().saturating_sub(k)..];
    let states = chosen.iter().map(|p| TrainState::load(p)).collect::<std::result::Result<Vec<_>, _>>()?;
    let avg = average_checkpoints(&states)?;
    avg.save(out)?;
    Ok(avg)
}

pub fn eval_wer(model: &Model, store: &ParamStore, utts: &[crate::datapipe::UtteranceRecord]) -> Result<metrics::WerCounts> {
    let mut pairs = Vec::new();
    for u in utts {
        let Some(y) = &u.transcript else { continue };
        pairs.push((y.clone(), model.greedy_decode(store, &u.features)?));
    }
    Ok(metrics::corpus_wer(&pairs)?)
}

pub fn eval_map(model: &Model, store: &ParamStore, utts: &[crate::datapipe::UtteranceRecord]) -> Result<metrics::MapReport> {
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for u in utts {
        let Some(y) = &u.events else { continue };
        let s = model.at_logits(store, &u.features)?;
        scores.push(s.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect());
        labels.push(y.clone());
    }
    Ok(metrics::mean_average_precision(&scores, &labels)?)
}

/// EER over every pair of utterances with a speaker label.
pub fn eval_eer(model: &Model, store: &ParamStore, utts: &[crate::datapipe::UtteranceRecord]) -> Result<EerReport> {
    let mut emb = HashMap::new();
    let mut ids = Vec::new();
    for u in utts {
        let Some(s) = u.speaker else { continue };
        emb.insert(u.id.clone(), model.sv_embedding(store, &u.features)?);
        ids.push((u.id.clone(), s));
    }
    let trials = metrics::sv_trials_build(&emb, &metrics::all_pairs(&ids))?;
    Ok(metrics::eer(&trials)?)
}

/// Frame-weighted mean of the per-utterance ASR KD L1 loss.
pub fn kd_l1_eval(model: &Model, store: &ParamStore, corpus: &Corpus, labels: &LabelSet) -> Result<f64> {
    let mut per = Vec::new();
    for u in &corpus.utts {
        let crate::datapipe::TeacherTarget::Asr(te) = labels.target(Task::Asr, &u.id)? else {
            unreachable!("ASR lookup yields an ASR target")
        };
        let proj = model.asr_projection(store, &u.features)?;
        let mut tape = Tape::new();
        let s = tape.constant(proj);
        let l = losses::kd_asr_l1(&mut tape, &te, s).map_err(TrainError::from)?;
        per.push((tape.value(l).item(), te.rows()));
    }
    Ok(metrics::kd_l1_aggregate(&per)?)
}
