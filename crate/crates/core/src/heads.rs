//! Task modules appended to encoder taps: the three distillation heads
//! (ASR projection, AT classifier, SV attentive-pooling embedder) and the
//! fine-tuning heads (transducer predictor + joiner, speaker classifier).

use serde::{Deserialize, Serialize};

use crate::params::{Binding, Group, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{ReduceKind, Result, Tape, TensorError, Var};

/// Variance floor inside the weighted standard deviation.
pub const SV_STD_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    /// ASR teacher frame-embedding width; the projection head emits twice this.
    pub teacher_dim: usize,
    pub num_events: usize,
    pub spk_dim: usize,
    pub sv_channels: usize,
    pub sv_kernel: usize,
    pub pred_dim: usize,
    pub joiner_dim: usize,
    /// Number of non-blank output tokens; token ids are `1..=vocab_size`.
    pub vocab_size: usize,
    pub num_speakers: usize,
    pub seed: u64,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            teacher_dim: 16,
            num_events: 8,
            spk_dim: 16,
            sv_channels: 32,
            sv_kernel: 1,
            pred_dim: 32,
            joiner_dim: 32,
            vocab_size: 32,
            num_speakers: 16,
            seed: 1,
        }
    }
}

impl HeadsConfig {
    pub fn kd_dim(&self) -> usize {
        2 * self.teacher_dim
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let fields = [
            ("teacher_dim", self.teacher_dim),
            ("num_events", self.num_events),
            ("spk_dim", self.spk_dim),
            ("sv_channels", self.sv_channels),
            ("sv_kernel", self.sv_kernel),
            ("pred_dim", self.pred_dim),
            ("joiner_dim", self.joiner_dim),
            ("vocab_size", self.vocab_size),
            ("num_speakers", self.num_speakers),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(format!("{name} must be positive")),
            None => Ok(()),
        }
    }
}

fn shape_err(op: &'static str, got: &[usize], want: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: got.to_vec(),
        right: want.to_vec(),
    }
}

/// Linear map from student frames to paired teacher frames (`D_s -> 2 * D_teacher`).
#[derive(Debug, Clone)]
pub struct AsrProjectionHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl AsrProjectionHead {
    pub fn init(model_dim: usize, cfg: &HeadsConfig, store: &mut ParamStore) -> Self {
        let mut r = rng::stream(cfg.seed, &[0xA5]);
        let g = Group::HeadAsr;
        Self {
            weight: store.add_uniform(g, "proj.w", &[model_dim, cfg.kd_dim()], model_dim, &mut r),
            bias: store.add_uniform(g, "proj.b", &[cfg.kd_dim()], model_dim, &mut r),
        }
    }

    pub fn attach(model_dim: usize, cfg: &HeadsConfig, store: &ParamStore) -> std::result::Result<Self, String> {
        Ok(Self {
            weight: store.expect(Group::HeadAsr, "proj.w", &[model_dim, cfg.kd_dim()])?,
            bias: store.expect(Group::HeadAsr, "proj.b", &[cfg.kd_dim()])?,
        })
    }

    /// `rep [T' x D_s] -> [T' x D_kd]`
    pub fn project(&self, tape: &mut Tape, bind: &Binding, rep: Var) -> Result<Var> {
        tape.linear(rep, bind.var(self.weight), Some(bind.var(self.bias)))
    }
}

/// Frame-wise event classifier with mean pooling of logits over time.
#[derive(Debug, Clone)]
pub struct AtHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl AtHead {
    pub fn init(model_dim: usize, cfg: &HeadsConfig, store: &mut ParamStore) -> Self {
        let mut r = rng::stream(cfg.seed, &[0xA7]);
        let g = Group::HeadAt;
        Self {
            weight: store.add_uniform(g, "cls.w", &[model_dim, cfg.num_events], model_dim, &mut r),
            bias: store.add_uniform(g, "cls.b", &[cfg.num_events], model_dim, &mut r),
        }
    }

    pub fn attach(model_dim: usize, cfg: &HeadsConfig, store: &ParamStore) -> std::result::Result<Self, String> {
        Ok(Self {
            weight: store.expect(Group::HeadAt, "cls.w", &[model_dim, cfg.num_events])?,
            bias: store.expect(Group::HeadAt, "cls.b", &[cfg.num_events])?,
        })
    }

    /// Utterance-level pre-sigmoid logits `[K]`.
    pub fn logits(&self, tape: &mut Tape, bind: &Binding, rep: Var) -> Result<Var> {
        if tape.shape(rep).first() == Some(&0) {
            return Err(TensorError::SequenceTooShort {
                op: "at_logits",
                len: 0,
                needed: 1,
            });
        }
        let frames = tape.linear(rep, bind.var(self.weight), Some(bind.var(self.bias)))?;
        tape.reduce(ReduceKind::Mean, frames, Some(0))
    }
}

/// Attentive statistics pooling speaker embedder.
///
/// `h = relu(conv1(rep))`, channel-wise attention `a = softmax_t(conv2(h))`,
/// weighted mean `mu` and weighted std `sigma` of `h`, then
/// `proj([mu; sigma]) + bias`.
#[derive(Debug, Clone)]
pub struct SvHead {
    pub conv1: ParamId,
    pub conv1_b: ParamId,
    pub conv2: ParamId,
    pub conv2_b: ParamId,
    pub proj: ParamId,
    pub bias: ParamId,
    kernel: usize,
}

impl SvHead {
    pub fn init(model_dim: usize, cfg: &HeadsConfig, store: &mut ParamStore) -> Self {
        let mut r = rng::stream(cfg.seed, &[0x5F]);
        let (w, c, j) = (cfg.sv_kernel, cfg.sv_channels, cfg.spk_dim);
        let g = Group::HeadSv;
        Self {
            conv1: store.add_uniform(g, "conv1.w", &[w, model_dim, c], w * model_dim, &mut r),
            conv1_b: store.add_uniform(g, "conv1.b", &[c], w * model_dim, &mut r),
            conv2: store.add_uniform(g, "conv2.w", &[w, c, c], w * c, &mut r),
            conv2_b: store.add_uniform(g, "conv2.b", &[c], w * c, &mut r),
            proj: store.add_uniform(g, "proj.w", &[2 * c, j], 2 * c, &mut r),
            bias: store.add_uniform(g, "proj.b", &[j], 2 * c, &mut r),
            kernel: w,
        }
    }

    pub fn attach(model_dim: usize, cfg: &HeadsConfig, store: &ParamStore) -> std::result::Result<Self, String> {
        let (w, c, j) = (cfg.sv_kernel, cfg.sv_channels, cfg.spk_dim);
        let g = Group::HeadSv;
        Ok(Self {
            conv1: store.expect(g, "conv1.w", &[w, model_dim, c])?,
            conv1_b: store.expect(g, "conv1.b", &[c])?,
            conv2: store.expect(g, "conv2.w", &[w, c, c])?,
            conv2_b: store.expect(g, "conv2.b", &[c])?,
            proj: store.expect(g, "proj.w", &[2 * c, j])?,
            bias: store.expect(g, "proj.b", &[j])?,
            kernel: w,
        })
    }

    /// Attention-weighted statistics `[mu; sigma]` (length `2 * sv_channels`).
    pub fn pooled_stats(&self, tape: &mut Tape, bind: &Binding, rep: Var) -> Result<Var> {
        let frames = tape.shape(rep)[0];
        if frames < self.kernel {
            return Err(TensorError::SequenceTooShort {
                op: "sv_embed",
                len: frames,
                needed: self.kernel,
            });
        }
        let h = tape.conv1d(rep, bind.var(self.conv1), 1)?;
        let h = tape.add_row(h, bind.var(self.conv1_b))?;
        let h = tape.relu(h);
        let left = (self.kernel - 1) / 2;
        let right = self.kernel - 1 - left;
        let hp = if self.kernel > 1 { tape.pad_rows(h, left, right)? } else { h };
        let scores = tape.conv1d(hp, bind.var(self.conv2), 1)?;
        let scores = tape.add_row(scores, bind.var(self.conv2_b))?;
        // softmax over time, independently per channel
        let st = tape.transpose(scores)?;
        let at = tape.softmax(st);
        let a = tape.transpose(at)?;

        let ah = tape.mul(a, h)?;
        let mu = tape.reduce(ReduceKind::Sum, ah, Some(0))?;
        let ahh = tape.mul(ah, h)?;
        let m2 = tape.reduce(ReduceKind::Sum, ahh, Some(0))?;
        let mu2 = tape.mul(mu, mu)?;
        let var = tape.sub(m2, mu2)?;
        let var = tape.clamp_min(var, 0.0);
        let var = tape.affine(var, 1.0, SV_STD_EPS);
        let sigma = tape.sqrt(var)?;
        tape.concat(&[mu, sigma])
    }

    /// Speaker embedding `[J]`.
    pub fn embed(&self, tape: &mut Tape, bind: &Binding, rep: Var) -> Result<Var> {
        let stats = self.pooled_stats(tape, bind, rep)?;
        let n = tape.shape(stats)[0];
        let row = tape.reshape(stats, &[1, n])?;
        let out = tape.matmul(row, bind.var(self.proj))?;
        let j = tape.shape(out)[1];
        let out = tape.reshape(out, &[j])?;
        tape.add(out, bind.var(self.bias))
    }
}

/// Stateless-bigram transducer predictor plus additive joiner.
///
/// Output index 0 is blank; it also serves as the start-of-sequence context.
#[derive(Debug, Clone)]
pub struct TransducerHead {
    pub embed: ParamId,
    pub pred_w: ParamId,
    pub pred_b: ParamId,
    pub enc_proj: ParamId,
    pub join_b: ParamId,
    pub pred_proj: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    vocab_size: usize,
}

impl TransducerHead {
    pub fn init(model_dim: usize, cfg: &HeadsConfig, store: &mut ParamStore) -> Self {
        let mut r = rng::stream(cfg.seed, &[0x7D]);
        let g = Group::Transducer;
        let (v1, p, h) = (cfg.vocab_size + 1, cfg.pred_dim, cfg.joiner_dim);
        Self {
            embed: store.add_uniform(g, "pred.embed", &[v1, p], 1, &mut r),
            pred_w: store.add_uniform(g, "pred.w", &[p, p], p, &mut r),
            pred_b: store.add_uniform(g, "pred.b", &[p], p, &mut r),
            enc_proj: store.add_uniform(g, "join.enc.w", &[model_dim, h], model_dim, &mut r),
            join_b: store.add_uniform(g, "join.b", &[h], model_dim, &mut r),
            pred_proj: store.add_uniform(g, "join.pred.w", &[p, h], p, &mut r),
            out_w: store.add_uniform(g, "join.out.w", &[h, v1], h, &mut r),
            out_b: store.add_uniform(g, "join.out.b", &[v1], h, &mut r),
            vocab_size: cfg.vocab_size,
        }
    }

    pub fn attach(model_dim: usize, cfg: &HeadsConfig, store: &ParamStore) -> std::result::Result<Self, String> {
        let g = Group::Transducer;
        let (v1, p, h) = (cfg.vocab_size + 1, cfg.pred_dim, cfg.joiner_dim);
        Ok(Self {
            embed: store.expect(g, "pred.embed", &[v1, p])?,
            pred_w: store.expect(g, "pred.w", &[p, p])?,
            pred_b: store.expect(g, "pred.b", &[p])?,
            enc_proj: store.expect(g, "join.enc.w", &[model_dim, h])?,
            join_b: store.expect(g, "join.b", &[h])?,
            pred_proj: store.expect(g, "join.pred.w", &[p, h])?,
            out_w: store.expect(g, "join.out.w", &[h, v1])?,
            out_b: store.expect(g, "join.out.b", &[v1])?,
            vocab_size: cfg.vocab_size,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Predictor states for contexts `[blank, y_1, ..., y_U]` → `[(U+1) x D_p]`.
    pub fn predictor(&self, tape: &mut Tape, bind: &Binding, targets: &[usize]) -> Result<Var> {
        let mut ctx = Vec::with_capacity(targets.len() + 1);
        ctx.push(0);
        ctx.extend_from_slice(targets);
        let e = tape.gather_rows(bind.var(self.embed), &ctx)?;
        let h = tape.linear(e, bind.var(self.pred_w), Some(bind.var(self.pred_b)))?;
        Ok(tape.tanh(h))
    }

    /// Joint log-probabilities `[T' x (U+1) x (V+1)]`.
    pub fn joint(&self, tape: &mut Tape, bind: &Binding, enc: Var, pred: Var) -> Result<Var> {
        let (t, u1) = (tape.shape(enc)[0], tape.shape(pred)[0]);
        let e = tape.linear(enc, bind.var(self.enc_proj), Some(bind.var(self.join_b)))?;
        let p = tape.matmul(pred, bind.var(self.pred_proj))?;
        let z = tape.outer_add(e, p)?;
        let z = tape.tanh(z);
        let logits = tape.linear(z, bind.var(self.out_w), Some(bind.var(self.out_b)))?;
        let lp = tape.log_softmax(logits);
        tape.reshape(lp, &[t, u1, self.vocab_size + 1])
    }
}

/// Linear speaker classifier on top of the SV embedding (no bias).
#[derive(Debug, Clone)]
pub struct SvClassifier {
    pub weight: ParamId,
}

impl SvClassifier {
    pub fn init(cfg: &HeadsConfig, store: &mut ParamStore) -> Self {
        let mut r = rng::stream(cfg.seed, &[0xC1]);
        Self {
            weight: store.add_uniform(Group::SvClassifier, "w", &[cfg.spk_dim, cfg.num_speakers], cfg.spk_dim, &mut r),
        }
    }

    pub fn attach(cfg: &HeadsConfig, store: &ParamStore) -> std::result::Result<Self, String> {
        Ok(Self {
            weight: store.expect(Group::SvClassifier, "w", &[cfg.spk_dim, cfg.num_speakers])?,
        })
    }

    /// `emb [J] -> logits [S]`
    pub fn logits(&self, tape: &mut Tape, bind: &Binding, emb: Var) -> Result<Var> {
        let w = bind.var(self.weight);
        let (j, s) = (tape.shape(w)[0], tape.shape(w)[1]);
        if tape.shape(emb) != [j] {
            return Err(shape_err("sv_classify", tape.shape(emb), &[j]));
        }
        let row = tape.reshape(emb, &[1, j])?;
        let out = tape.matmul(row, w)?;
        tape.reshape(out, &[s])
    }
}
