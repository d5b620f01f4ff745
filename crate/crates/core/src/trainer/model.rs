//! The student model: encoder plus every task head, with the per-sample loss
//! wiring shared by both training stages.

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::datapipe::TeacherTarget;
use crate::encoder::{Encoder, EncoderConfig};
use crate::heads::{AsrProjectionHead, AtHead, HeadsConfig, SvClassifier, SvHead, TransducerHead};
use crate::losses;
use crate::params::{Binding, Group, ParamStore};
use crate::task::Task;
use crate::tensor::{Tape, Tensor, Var};

/// Encoder block (1-based) feeding each task head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Taps {
    pub asr: usize,
    pub at: usize,
    pub sv: usize,
}

impl Default for Taps {
    fn default() -> Self {
        Self { asr: 6, at: 6, sv: 3 }
    }
}

impl Taps {
    pub fn get(&self, task: Task) -> usize {
        match task {
            Task::Asr => self.asr,
            Task::At => self.at,
            Task::Sv => self.sv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadsConfig,
    pub taps: Taps,
}

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        self.encoder.validate()?;
        self.heads.validate()?;
        for t in Task::ALL {
            let i = self.taps.get(t);
            if i == 0 || i > self.encoder.num_blocks {
                return Err(format!("taps.{t} = {i} is outside 1..={}", self.encoder.num_blocks));
            }
        }
        Ok(())
    }
}

/// What one sample is trained against for one task.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Kd(TeacherTarget),
    Transcript(Vec<usize>),
    Events(Vec<f64>),
    Speaker(usize),
}

impl Objective {
    pub fn task(&self) -> Task {
        match self {
            Objective::Kd(t) => t.task(),
            Objective::Transcript(_) => Task::Asr,
            Objective::Events(_) => Task::At,
            Objective::Speaker(_) => Task::Sv,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub asr_proj: AsrProjectionHead,
    pub at: AtHead,
    pub sv: SvHead,
    pub transducer: Option<TransducerHead>,
    pub sv_cls: Option<SvClassifier>,
}

impl Model {
    /// Fresh parameters. Fine-tuning heads are created only when asked for.
    pub fn init(cfg: &ModelConfig, store: &mut ParamStore, finetune_heads: bool) -> Self {
        let d = cfg.encoder.model_dim;
        let encoder = Encoder::init(&cfg.encoder, store);
        let asr_proj = AsrProjectionHead::init(d, &cfg.heads, store);
        let at = AtHead::init(d, &cfg.heads, store);
        let sv = SvHead::init(d, &cfg.heads, store);
        let mut m = Model {
            cfg: cfg.clone(),
            encoder,
            asr_proj,
            at,
            sv,
            transducer: None,
            sv_cls: None,
        };
        if finetune_heads {
            m.ensure_finetune_heads(store);
        }
        m
    }

    /// Binds to parameters already in `store` (e.g. loaded from a checkpoint).
    pub fn attach(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let d = cfg.encoder.model_dim;
        let wrap = |e: String| TrainError::Checkpoint(e);
        let encoder = Encoder::attach(&cfg.encoder, store).map_err(wrap)?;
        let asr_proj = AsrProjectionHead::attach(d, &cfg.heads, store).map_err(wrap)?;
        let at = AtHead::attach(d, &cfg.heads, store).map_err(wrap)?;
        let sv = SvHead::attach(d, &cfg.heads, store).map_err(wrap)?;
        let transducer = if store.has_group(Group::Transducer) {
            Some(TransducerHead::attach(d, &cfg.heads, store).map_err(wrap)?)
        } else {
            None
        };
        let sv_cls = if store.has_group(Group::SvClassifier) {
            Some(SvClassifier::attach(&cfg.heads, store).map_err(wrap)?)
        } else {
            None
        };
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            asr_proj,
            at,
            sv,
            transducer,
            sv_cls,
        })
    }

    pub fn ensure_finetune_heads(&mut self, store: &mut ParamStore) {
        let d = self.cfg.encoder.model_dim;
        if self.transducer.is_none() {
            self.transducer = Some(TransducerHead::init(d, &self.cfg.heads, store));
        }
        if self.sv_cls.is_none() {
            self.sv_cls = Some(SvClassifier::init(&self.cfg.heads, store));
        }
    }

    fn transducer(&self) -> Result<&TransducerHead> {
        self.transducer
            .as_ref()
            .ok_or_else(|| TrainError::Config("transducer head is not initialised".into()))
    }

    fn classifier(&self) -> Result<&SvClassifier> {
        self.sv_cls
            .as_ref()
            .ok_or_else(|| TrainError::Config("speaker classifier is not initialised".into()))
    }

    /// Per-task losses of one utterance, in objective order.
    pub fn sample_losses(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        features: &Tensor,
        objectives: &[Objective],
    ) -> Result<Vec<(Task, Var)>> {
        if objectives.is_empty() {
            return Ok(Vec::new());
        }
        let depth = objectives.iter().map(|o| self.cfg.taps.get(o.task())).max().unwrap_or(1);
        let x = tape.constant(features.clone());
        let outs = self.encoder.forward_to(tape, bind, x, depth)?;
        let mut losses = Vec::with_capacity(objectives.len());
        for obj in objectives {
            let task = obj.task();
            let rep = outs.tap(self.cfg.taps.get(task))?;
            let loss = match obj {
                Objective::Kd(TeacherTarget::Asr(te)) => {
                    if te.rows() != outs.frame_count {
                        return Err(TrainError::Config(format!(
                            "paired teacher frames ({}) disagree with student frames ({}); frame alignment is broken",
                            te.rows(),
                            outs.frame_count
                        )));
                    }
                    let proj = self.asr_proj.project(tape, bind, rep)?;
                    losses::kd_asr_l1(tape, te, proj)?
                }
                Objective::Kd(TeacherTarget::At(z)) => {
                    let s = self.at.logits(tape, bind, rep)?;
                    losses::kd_at_bce(tape, z, s)?
                }
                Objective::Kd(TeacherTarget::Sv(v)) => {
                    let e = self.sv.embed(tape, bind, rep)?;
                    losses::kd_sv_cosine(tape, v, e)?
                }
                Objective::Transcript(y) => {
                    let head = self.transducer()?;
                    let pred = head.predictor(tape, bind, y)?;
                    let lp = head.joint(tape, bind, rep, pred)?;
                    losses::transducer_loss(tape, lp, y)?
                }
                Objective::Events(y) => {
                    let s = self.at.logits(tape, bind, rep)?;
                    losses::at_bce_supervised(tape, s, y)?
                }
                Objective::Speaker(spk) => {
                    let e = self.sv.embed(tape, bind, rep)?;
                    let logits = self.classifier()?.logits(tape, bind, e)?;
                    losses::sv_cross_entropy(tape, logits, *spk)?
                }
            };
            losses.push((task, loss));
        }
        Ok(losses)
    }

    /// Speaker embedding of one utterance (no gradients).
    pub fn sv_embedding(&self, store: &ParamStore, features: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, |_| false);
        let x = tape.constant(features.clone());
        let outs = self.encoder.forward_to(&mut tape, &bind, x, self.cfg.taps.sv)?;
        let e = self.sv.embed(&mut tape, &bind, outs.tap(self.cfg.taps.sv)?)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Utterance-level event logits.
    pub fn at_logits(&self, store: &ParamStore, features: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, |_| false);
        let x = tape.constant(features.clone());
        let outs = self.encoder.forward_to(&mut tape, &bind, x, self.cfg.taps.at)?;
        let s = self.at.logits(&mut tape, &bind, outs.tap(self.cfg.taps.at)?)?;
        Ok(tape.value(s).data().to_vec())
    }

    /// ASR projection output `[T' x 2 D_t]`.
    pub fn asr_projection(&self, store: &ParamStore, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, |_| false);
        let x = tape.constant(features.clone());
        let outs = self.encoder.forward_to(&mut tape, &bind, x, self.cfg.taps.asr)?;
        let p = self.asr_proj.project(&mut tape, &bind, outs.tap(self.cfg.taps.asr)?)?;
        Ok(tape.value(p).clone())
    }

    /// Greedy transducer hypothesis for one utterance.
    pub fn greedy_decode(&self, store: &ParamStore, features: &Tensor) -> Result<Vec<usize>> {
        let head = self.transducer()?;
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, |_| false);
        let x = tape.constant(features.clone());
        let outs = self.encoder.forward_to(&mut tape, &bind, x, self.cfg.taps.asr)?;
        let enc = outs.tap(self.cfg.taps.asr)?;
        let frames = outs.frame_count;
        let enc_rows = tape.value(enc).clone();
        let mut step = |t: usize, prev: usize| -> Result<Vec<f64>> {
            let row = tape.constant(Tensor::new(vec![1, enc_rows.cols()], enc_rows.row(t).to_vec())?);
            let pred = head.predictor(&mut tape, &bind, &[prev])?;
            // predictor output row 1 is the state after `prev`; row 0 is the start state
            let last = tape.gather_rows(pred, &[if prev == 0 { 0 } else { 1 }])?;
            let lp = head.joint(&mut tape, &bind, row, last)?;
            Ok(tape.value(lp).data().to_vec())
        };
        crate::metrics::greedy_search(frames, head.vocab_size(), &mut step)
    }
}
