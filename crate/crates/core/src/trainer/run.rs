//! The training loop shared by both stages.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, Objective};
use super::optim::{adam_update, lr_schedule, Adam};
use super::state::{Stage, TrainState};
use super::{FreezePolicy, LossMode, Result, StageConfig, TrainError};
use crate::datapipe::augment::{noise_mix, spec_augment, AugmentPolicy};
use crate::datapipe::sampler::{Draw, Sampler, Source};
use crate::datapipe::{Corpus, LabelSet, UtteranceRecord};
use crate::losses;
use crate::params::Group;
use crate::rng;
use crate::task::Task;
use crate::tensor::{Tape, Tensor};

/// One corpus in a stage's training mix.
#[derive(Debug, Clone)]
pub struct StageSource {
    pub corpus: Corpus,
    pub repeat: usize,
}

#[derive(Debug, Clone, Default)]
pub struct StageData {
    pub sources: Vec<StageSource>,
    pub labels: LabelSet,
    pub augment: AugmentPolicy,
    pub noise_bank: Vec<Tensor>,
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub stage: String,
    pub epoch: u64,
    pub lr: f64,
    pub losses: BTreeMap<Task, f64>,
    pub counts: BTreeMap<Task, usize>,
    pub total: f64,
}

/// Learning rate for `group` at the step about to be taken (`state_step`
/// steps already done in this stage), or `None` if the group is frozen.
/// `scratch` marks a fine-tune that did not start from a pre-trained encoder;
/// the freeze policy does not apply to it.
#[allow(clippy::too_many_arguments)]
pub fn group_lr(
    group: Group,
    stage: Stage,
    state_step: u64,
    lr: f64,
    cfg: &StageConfig,
    freeze: &FreezePolicy,
    scratch: bool,
    sv_tap: usize,
) -> Option<f64> {
    if stage == Stage::Pretrain {
        return Some(lr);
    }
    if group == Group::HeadAsr && !cfg.kd_aux.asr {
        return None;
    }
    // freezing protects pre-trained weights; a scratch run has none
    if scratch {
        return Some(lr);
    }
    if freeze.freeze_sv {
        let on_sv_path = match group {
            Group::Frontend | Group::HeadSv | Group::SvClassifier => true,
            Group::Block(i) => i <= sv_tap,
            _ => false,
        };
        if on_sv_path {
            return None;
        }
    }
    if group.is_encoder() {
        if state_step < freeze.encoder_warmup_steps {
            return None;
        }
        return Some(lr * freeze.encoder_lr_scale);
    }
    Some(lr)
}

fn supervised(utt: &UtteranceRecord, task: Task) -> Option<Objective> {
    match task {
        Task::Asr => utt.transcript.clone().map(Objective::Transcript),
        Task::At => utt.events.clone().map(Objective::Events),
        Task::Sv => utt.speaker.map(Objective::Speaker),
    }
}

fn objectives(stage: Stage, cfg: &StageConfig, corpus_task: Task, utt: &UtteranceRecord, labels: &LabelSet) -> Result<Vec<Objective>> {
    let tasks: Vec<Task> = match cfg.loss_mode {
        LossMode::PerSampleTask => vec![corpus_task],
        LossMode::AllTasks => Task::ALL.to_vec(),
    };
    let strict = cfg.loss_mode == LossMode::PerSampleTask;
    let mut out = Vec::new();
    for t in tasks {
        let obj = match stage {
            Stage::Pretrain => {
                if !strict && !labels.contains(t, &utt.id) {
                    continue;
                }
                Objective::Kd(labels.target(t, &utt.id)?)
            }
            Stage::Finetune => match supervised(utt, t) {
                None if strict => {
                    return Err(TrainError::Config(format!("utterance '{}' has no {t} label", utt.id)));
                }
                None => continue,
                Some(_) if cfg.kd_aux.get(t) => Objective::Kd(labels.target(t, &utt.id)?),
                Some(o) => o,
            },
        };
        out.push(obj);
    }
    Ok(out)
}

fn student_input(data: &StageData, utt: &UtteranceRecord, seed: u64) -> Result<Tensor> {
    let mut x = utt.features.clone();
    if let Some(p) = &data.augment.noise {
        x = noise_mix(&x, &data.noise_bank, Some(p.snr_db), rng::mix(seed, &[1]))?;
    }
    if let Some(p) = &data.augment.spec_augment {
        x = spec_augment(&x, p, rng::mix(seed, &[2]));
    }
    Ok(x)
}

/// Forward, backward and one optimizer update on `batch`.
pub fn train_step(
    state: &mut TrainState,
    model: &Model,
    data: &StageData,
    batch: &[Draw],
    cfg: &StageConfig,
    freeze: &FreezePolicy,
) -> Result<LogLine> {
    let lr = lr_schedule(state.step + 1, cfg.base_lr, cfg.warmup_steps);
    let rates: Vec<Option<f64>> = state
        .store
        .iter()
        .map(|p| group_lr(p.group, state.stage, state.step, lr, cfg, freeze, state.scratch, model.cfg.taps.sv))
        .collect();

    let mut tape = Tape::new();
    let vars: Vec<_> = state
        .store
        .iter()
        .zip(&rates)
        .map(|(p, r)| tape.leaf(p.value.clone(), r.is_some()))
        .collect();
    let bind = crate::params::Binding::from_vars(vars);

    let mut sample_losses = Vec::new();
    for d in batch {
        let src = &data.sources[d.corpus];
        let utt = &src.corpus.utts[d.utt];
        let objs = objectives(state.stage, cfg, src.corpus.task, utt, &data.labels)?;
        let x = if data.augment.is_identity() {
            utt.features.clone()
        } else {
            student_input(data, utt, rng::mix(state.seed, &[state.step, d.corpus as u64, d.position as u64]))?
        };
        sample_losses.extend(model.sample_losses(&mut tape, &bind, &x, &objs)?);
    }
    let (total, report) = losses::combine(&mut tape, &sample_losses, &cfg.loss_weights)?;
    tape.backward(total)?;

    let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(rates.len());
    for ((p, r), &v) in state.store.iter().zip(&rates).zip(bind.vars()) {
        let g = if r.is_some() { tape.grad(v).map(|g| g.to_vec()) } else { None };
        if let Some(g) = &g {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFinite {
                    group: p.group,
                    param: p.name.clone(),
                });
            }
        }
        grads.push(g);
    }
    if let Some(clip) = cfg.grad_clip {
        let norm = grads.iter().flatten().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if norm > clip {
            let s = clip / norm;
            grads.iter_mut().flatten().flatten().for_each(|x| *x *= s);
        }
    }

    let opt = Adam::default();
    for (i, p) in state.store.iter_mut().enumerate() {
        if let (Some(r), Some(g)) = (rates[i], &grads[i]) {
            adam_update(&opt, p.value.data_mut(), g, &mut state.m[i], &mut state.v[i], &mut state.counts[i], r);
        }
    }
    state.step += 1;

    Ok(LogLine {
        step: state.step,
        stage: state.stage.name().to_string(),
        epoch: state.epoch(),
        lr,
        losses: report.per_task.iter().map(|(t, l)| (*t, l.value)).collect(),
        counts: report.per_task.iter().map(|(t, l)| (*t, l.count)).collect(),
        total: report.total,
    })
}

/// Where a stage writes its artifacts.
pub struct StageOutput<'a> {
    pub ckpt_dir: Option<&'a Path>,
    pub log: Option<&'a mut dyn Write>,
}

/// Runs a stage until `cfg.epochs` epochs or `cfg.max_steps` steps are done,
/// whichever comes first. Checkpoints every `ckpt_every` steps and at the end.
/// `on_step` may stop training early by returning `false`.
pub fn run_stage(
    state: &mut TrainState,
    model: &Model,
    data: &StageData,
    cfg: &StageConfig,
    freeze: &FreezePolicy,
    mut out: StageOutput<'_>,
    on_step: &mut dyn FnMut(&TrainState, &LogLine) -> bool,
) -> Result<()> {
    cfg.validate().map_err(TrainError::Config)?;
    freeze.validate().map_err(TrainError::Config)?;
    if data.sources.is_empty() {
        return Err(TrainError::Config("stage has no training corpora".into()));
    }
    let sources = data
        .sources
        .iter()
        .map(|s| Source {
            repeat: s.repeat,
            frames: s.corpus.utts.iter().map(|u| u.frames()).collect(),
        })
        .collect();
    let mut sampler = Sampler::new(sources, cfg.batch_frames, rng::mix(state.seed, &[0x5A, state.stage as u64]))?;
    if let Some(s) = &state.sampler {
        sampler.restore(s.clone())?;
    }
    let mut last_saved = None;
    loop {
        if cfg.max_steps.is_some_and(|m| state.step >= m) {
            break;
        }
        let Some(batch) = sampler.next_batch() else {
            if sampler.state().epoch + 1 >= cfg.epochs {
                state.sampler = Some(sampler.state().clone());
                break;
            }
            sampler.next_epoch();
            continue;
        };
        state.sampler = Some(sampler.state().clone());
        let line = train_step(state, model, data, &batch, cfg, freeze)?;
        if let Some(w) = out.log.as_deref_mut() {
            let json = serde_json::to_string(&line).expect("log line serializes");
            writeln!(w, "{json}").map_err(|e| TrainError::Checkpoint(format!("writing log: {e}")))?;
        }
        if let Some(dir) = out.ckpt_dir {
            if state.step % cfg.ckpt_every == 0 {
                state.save(&dir.join(TrainState::checkpoint_name(state.step)))?;
                last_saved = Some(state.step);
            }
        }
        if !on_step(state, &line) {
            break;
        }
    }
    if let Some(dir) = out.ckpt_dir {
        if last_saved != Some(state.step) {
            state.save(&dir.join(TrainState::checkpoint_name(state.step)))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::synth::{World, WorldConfig};
    use crate::datapipe::{CorpusSpec, Role};
    use crate::encoder::EncoderConfig;
    use crate::heads::HeadsConfig;
    use crate::trainer::{ModelConfig, Taps};

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                num_blocks: 2,
                model_dim: 16,
                ffn_dim: 32,
                attn_heads: 2,
                input_dim: 12,
                ..Default::default()
            },
            heads: HeadsConfig {
                teacher_dim: 4,
                num_events: 3,
                spk_dim: 4,
                sv_channels: 8,
                pred_dim: 8,
                joiner_dim: 8,
                vocab_size: 5,
                num_speakers: 4,
                ..Default::default()
            },
            taps: Taps { asr: 2, at: 2, sv: 1 },
        }
    }

    fn world() -> World {
        World::new(
            &WorldConfig {
                feature_dim: 12,
                vocab_size: 5,
                num_events: 3,
                num_speakers: 8,
                speaker_rank: 4,
                teacher_dim: 4,
                spk_dim: 4,
                token_frames: [4, 6],
                ..Default::default()
            },
            3,
        )
    }

    fn data(stage: Stage) -> StageData {
        let w = world();
        let mut d = StageData::default();
        for task in Task::ALL {
            let spec = CorpusSpec {
                name: format!("c{task}"),
                task,
                role: if stage == Stage::Pretrain { Role::Pretrain } else { Role::Finetune },
                size: 3,
                repeat: 1,
                path: None,
                frames: [16, 24],
                speakers: [0, 4],
                all_labels: false,
            };
            let c = w.corpus(&spec);
            d.labels.insert_shard(task, w.teacher(task).extract(&c, false).unwrap()).unwrap();
            d.sources.push(StageSource { corpus: c, repeat: 1 });
        }
        d
    }

    fn stage_cfg() -> StageConfig {
        StageConfig {
            base_lr: 3e-3,
            warmup_steps: 0,
            batch_frames: 48,
            ckpt_every: 2,
            ..Default::default()
        }
    }

    #[test]
    fn lr_policy_table() {
        let cfg = StageConfig::default();
        let f = FreezePolicy {
            encoder_warmup_steps: 5,
            freeze_sv: false,
            encoder_lr_scale: 0.2,
        };
        let lr = |g, step, scratch| group_lr(g, Stage::Finetune, step, 1.0, &cfg, &f, scratch, 3);
        assert_eq!(lr(Group::Block(2), 4, false), None);
        assert_eq!(lr(Group::Block(2), 5, false), Some(0.2));
        assert_eq!(lr(Group::Frontend, 0, true), Some(1.0));
        assert_eq!(lr(Group::Transducer, 0, false), Some(1.0));
        assert_eq!(lr(Group::HeadAsr, 9, false), None);
        assert_eq!(group_lr(Group::HeadAsr, Stage::Pretrain, 0, 1.0, &cfg, &f, false, 3), Some(1.0));
        let fs = FreezePolicy { freeze_sv: true, ..f };
        let lr = |g| group_lr(g, Stage::Finetune, 100, 1.0, &cfg, &fs, false, 3);
        assert_eq!(lr(Group::HeadSv), None);
        assert_eq!(lr(Group::SvClassifier), None);
        assert_eq!(lr(Group::Block(3)), None);
        assert_eq!(lr(Group::Block(4)), Some(0.2));
        assert_eq!(lr(Group::HeadAt), Some(1.0));
        assert_eq!(group_lr(Group::HeadSv, Stage::Finetune, 0, 1.0, &cfg, &fs, true, 3), Some(1.0));
        assert_eq!(group_lr(Group::Block(1), Stage::Finetune, 0, 1.0, &cfg, &fs, true, 3), Some(1.0));
    }

    #[test]
    fn zero_lr_leaves_state_unchanged() {
        let cfg = tiny_model_cfg();
        let mut store = crate::params::ParamStore::new();
        let model = Model::init(&cfg, &mut store, false);
        let mut st = TrainState::fresh(store, Stage::Pretrain, 7);
        let before = st.store.clone();
        let d = data(Stage::Pretrain);
        let sc = StageConfig { base_lr: 0.0, ..stage_cfg() };
        let batch = [Draw { corpus: 0, utt: 0, position: 0 }, Draw { corpus: 2, utt: 1, position: 0 }];
        for _ in 0..2 {
            train_step(&mut st, &model, &d, &batch, &sc, &FreezePolicy::default()).unwrap();
        }
        assert_eq!(st.store, before);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn warmup_freezes_encoder_but_trains_heads() {
        let cfg = tiny_model_cfg();
        let mut store = crate::params::ParamStore::new();
        let model = Model::init(&cfg, &mut store, true);
        let mut st = TrainState::fresh(store, Stage::Finetune, 7);
        let before = st.store.clone();
        let d = data(Stage::Finetune);
        let f = FreezePolicy {
            encoder_warmup_steps: 3,
            ..Default::default()
        };
        let batch = [Draw { corpus: 0, utt: 0, position: 0 }, Draw { corpus: 1, utt: 0, position: 0 }, Draw { corpus: 2, utt: 0, position: 0 }];
        for _ in 0..3 {
            train_step(&mut st, &model, &d, &batch, &stage_cfg(), &f).unwrap();
        }
        for (a, b) in st.store.iter().zip(before.iter()) {
            let same = a.value == b.value;
            match a.group {
                g if g.is_encoder() || g == Group::HeadAsr => assert!(same, "{}", a.key()),
                _ => assert!(!same, "{} did not move", a.key()),
            }
        }
        train_step(&mut st, &model, &d, &batch, &stage_cfg(), &f).unwrap();
        assert_ne!(st.store.iter().next().unwrap().value, before.iter().next().unwrap().value);
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let cfg = tiny_model_cfg();
        let mut store = crate::params::ParamStore::new();
        let model = Model::init(&cfg, &mut store, false);
        let d = data(Stage::Pretrain);
        let sc = StageConfig { max_steps: Some(6), epochs: 5, ..stage_cfg() };
        let f = FreezePolicy::default();

        let full_dir = tempfile::tempdir().unwrap();
        let mut full = TrainState::fresh(store.clone(), Stage::Pretrain, 11);
        let out = StageOutput { ckpt_dir: Some(full_dir.path()), log: None };
        run_stage(&mut full, &model, &d, &sc, &f, out, &mut |_, _| true).unwrap();

        let split_dir = tempfile::tempdir().unwrap();
        let mut first = TrainState::fresh(store, Stage::Pretrain, 11);
        let out = StageOutput { ckpt_dir: Some(split_dir.path()), log: None };
        run_stage(&mut first, &model, &d, &sc, &f, out, &mut |s, _| s.step < 2).unwrap();
        let mut resumed = TrainState::load(&split_dir.path().join(TrainState::checkpoint_name(2))).unwrap();
        let out = StageOutput { ckpt_dir: Some(split_dir.path()), log: None };
        run_stage(&mut resumed, &model, &d, &sc, &f, out, &mut |_, _| true).unwrap();

        assert_eq!(resumed, full);
        let name = TrainState::checkpoint_name(6);
        assert_eq!(
            std::fs::read(full_dir.path().join(&name)).unwrap(),
            std::fs::read(split_dir.path().join(&name)).unwrap()
        );
    }

    #[test]
    fn missing_teacher_label_is_an_error() {
        let cfg = tiny_model_cfg();
        let mut store = crate::params::ParamStore::new();
        let model = Model::init(&cfg, &mut store, false);
        let mut st = TrainState::fresh(store, Stage::Pretrain, 7);
        let mut d = data(Stage::Pretrain);
        d.labels = LabelSet::default();
        let batch = [Draw { corpus: 0, utt: 0, position: 0 }];
        assert!(train_step(&mut st, &model, &d, &batch, &stage_cfg(), &FreezePolicy::default()).is_err());
    }
}
