//! Synthetic stand-ins for speech, sound-event and speaker corpora, and the
//! frozen teachers that label them.
//!
//! A shared [`World`] fixes token templates, a low-rank speaker subspace and
//! event spectral bumps. An utterance frame is
//! `template(token_t) + speaker_signature + sum(active bumps) + noise`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::shard::{Shard, ShardKind};
use super::{Corpus, CorpusSpec, DataError, Result, UtteranceRecord};
use crate::rng;
use crate::task::Task;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub num_events: usize,
    pub num_speakers: usize,
    pub speaker_rank: usize,
    /// ASR teacher embedding width.
    pub teacher_dim: usize,
    /// SV teacher embedding width.
    pub spk_dim: usize,
    /// Inclusive range of input frames per token.
    pub token_frames: [usize; 2],
    pub template_scale: f64,
    pub speaker_scale: f64,
    pub event_scale: f64,
    pub event_prob: f64,
    pub noise_std: f64,
    /// Generated utterance lengths are rounded down to a multiple of this.
    pub frame_multiple: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            feature_dim: 80,
            vocab_size: 32,
            num_events: 8,
            num_speakers: 64,
            speaker_rank: 8,
            teacher_dim: 16,
            spk_dim: 16,
            token_frames: [8, 12],
            template_scale: 1.0,
            speaker_scale: 1.0,
            event_scale: 1.0,
            event_prob: 0.25,
            noise_std: 1.0,
            frame_multiple: 4,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("vocab_size", self.vocab_size),
            ("num_events", self.num_events),
            ("num_speakers", self.num_speakers),
            ("speaker_rank", self.speaker_rank),
            ("teacher_dim", self.teacher_dim),
            ("spk_dim", self.spk_dim),
            ("frame_multiple", self.frame_multiple),
        ];
        if let Some((n, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("world.{n} must be positive"));
        }
        if self.vocab_size < 2 {
            return Err("world.vocab_size must be at least 2".into());
        }
        if self.speaker_rank > self.feature_dim {
            return Err("world.speaker_rank exceeds feature_dim".into());
        }
        if self.token_frames[0] == 0 || self.token_frames[0] > self.token_frames[1] {
            return Err(format!("world.token_frames {:?} is not a valid range", self.token_frames));
        }
        if !(0.0..=1.0).contains(&self.event_prob) {
            return Err("world.event_prob must be in [0, 1]".into());
        }
        Ok(())
    }
}

fn gaussian(r: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct World {
    pub cfg: WorldConfig,
    seed: u64,
    /// `[V x F]`, row `v - 1` for token `v`.
    templates: Vec<f64>,
    /// Orthonormal rows `[r x F]`.
    spk_basis: Vec<f64>,
    /// `[S x r]`
    spk_coef: Vec<f64>,
    /// `[K x F]`
    bumps: Vec<f64>,
    // teacher parameters
    asr_proj: Vec<f64>,
    sv_mix: Vec<f64>,
}

impl World {
    pub fn new(cfg: &WorldConfig, seed: u64) -> Self {
        let (f, v, k, s, r) = (cfg.feature_dim, cfg.vocab_size, cfg.num_events, cfg.num_speakers, cfg.speaker_rank);
        let mut g = rng::stream(seed, &[0x3011]);
        let templates = gaussian(&mut g, v * f, cfg.template_scale);

        // Gram-Schmidt on Gaussian rows
        let mut spk_basis = gaussian(&mut g, r * f, 1.0);
        for i in 0..r {
            for j in 0..i {
                let (head, tail) = spk_basis.split_at_mut(i * f);
                let p = dot(&tail[..f], &head[j * f..(j + 1) * f]);
                for c in 0..f {
                    tail[c] -= p * head[j * f + c];
                }
            }
            let row = &mut spk_basis[i * f..(i + 1) * f];
            let n = dot(row, row).sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        let spk_coef = gaussian(&mut g, s * r, cfg.speaker_scale);

        let mut bumps = vec![0.0; k * f];
        for e in 0..k {
            // evenly spread centres keep the bumps nearly orthogonal
            let spacing = f as f64 / k as f64;
            let centre = (e as f64 + 0.5) * spacing + g.gen_range(-0.2..0.2) * spacing;
            let width = g.gen_range(0.1..0.2) * spacing;
            for c in 0..f {
                let d = c as f64 - centre;
                bumps[e * f + c] = cfg.event_scale * (-d * d / (2.0 * width * width)).exp();
            }
        }
        let asr_proj = gaussian(&mut g, v * cfg.teacher_dim, 1.0);
        let sv_mix = gaussian(&mut g, cfg.spk_dim * r, 1.0);
        World {
            cfg: cfg.clone(),
            seed,
            templates,
            spk_basis,
            spk_coef,
            bumps,
            asr_proj,
            sv_mix,
        }
    }

    fn template(&self, token: usize) -> &[f64] {
        let f = self.cfg.feature_dim;
        &self.templates[(token - 1) * f..token * f]
    }

    pub fn speaker_signature(&self, speaker: usize) -> Vec<f64> {
        let (f, r) = (self.cfg.feature_dim, self.cfg.speaker_rank);
        let mut sig = vec![0.0; f];
        for i in 0..r {
            let c = self.spk_coef[speaker * r + i];
            for (s, b) in sig.iter_mut().zip(&self.spk_basis[i * f..(i + 1) * f]) {
                *s += c * b;
            }
        }
        sig
    }

    fn bump(&self, event: usize) -> &[f64] {
        let f = self.cfg.feature_dim;
        &self.bumps[event * f..(event + 1) * f]
    }

    /// Generates one utterance with all latent labels.
    pub fn utterance(&self, spec: &CorpusSpec, index: usize) -> UtteranceRecord {
        let cfg = &self.cfg;
        let f = cfg.feature_dim;
        let mut g = rng::stream(rng::mix_str(self.seed, &spec.name), &[index as u64]);
        let raw_t = g.gen_range(spec.frames[0]..=spec.frames[1]);
        let t_len = (raw_t / cfg.frame_multiple * cfg.frame_multiple).max(cfg.frame_multiple);

        let mut tokens = Vec::new();
        let mut frame_tok = Vec::with_capacity(t_len);
        let min_tail = cfg.token_frames[0].div_ceil(2);
        while frame_tok.len() < t_len {
            let remaining = t_len - frame_tok.len();
            let mut dur = g.gen_range(cfg.token_frames[0]..=cfg.token_frames[1]).min(remaining);
            // fold a stub that would be too short to hear into this token
            if remaining - dur < min_tail {
                dur = remaining;
            }
            let prev = tokens.last().copied();
            let tok = loop {
                let c = g.gen_range(1..=cfg.vocab_size);
                if Some(c) != prev {
                    break c;
                }
            };
            tokens.push(tok);
            frame_tok.extend(std::iter::repeat_n(tok, dur));
        }
        let speaker = g.gen_range(spec.speakers[0]..spec.speakers[1]);
        let events: Vec<f64> = (0..cfg.num_events)
            .map(|_| if g.gen_bool(cfg.event_prob) { 1.0 } else { 0.0 })
            .collect();

        let sig = self.speaker_signature(speaker);
        let mut base = sig;
        for (e, &on) in events.iter().enumerate() {
            if on > 0.0 {
                for (b, v) in base.iter_mut().zip(self.bump(e)) {
                    *b += v;
                }
            }
        }
        let mut data = Vec::with_capacity(t_len * f);
        for &tok in &frame_tok {
            let tpl = self.template(tok);
            for c in 0..f {
                let n: f64 = g.sample(StandardNormal);
                // storage is f32; round here so in-memory and on-disk corpora agree
                data.push((tpl[c] + base[c] + cfg.noise_std * n) as f32 as f64);
            }
        }
        let all = spec.all_labels;
        UtteranceRecord {
            id: format!("{}-{index:05}", spec.name),
            task: spec.task,
            features: Tensor::new(vec![t_len, f], data).expect("shape"),
            transcript: (all || spec.task == Task::Asr).then_some(tokens),
            events: (all || spec.task == Task::At).then_some(events),
            speaker: (all || spec.task == Task::Sv).then_some(speaker),
        }
    }

    pub fn corpus(&self, spec: &CorpusSpec) -> Corpus {
        Corpus {
            name: spec.name.clone(),
            task: spec.task,
            feature_dim: self.cfg.feature_dim,
            utts: (0..spec.size).map(|i| self.utterance(spec, i)).collect(),
        }
    }

    /// Coloured-noise clips used by feature-space noise mixing.
    pub fn noise_bank(&self, clips: usize, frames: usize) -> Vec<Tensor> {
        let f = self.cfg.feature_dim;
        (0..clips)
            .map(|i| {
                let mut g = rng::stream(self.seed, &[0x401E, i as u64]);
                let env: Vec<f64> = (0..f).map(|_| g.gen_range(0.2..1.5)).collect();
                let data = (0..frames * f)
                    .map(|j| env[j % f] * g.sample::<f64, _>(StandardNormal))
                    .collect();
                Tensor::new(vec![frames, f], data).expect("shape")
            })
            .collect()
    }

    pub fn teacher(&self, task: Task) -> Teacher<'_> {
        Teacher { world: self, task }
    }
}

fn time_mean(x: &Tensor) -> Vec<f64> {
    let (t, f) = (x.rows(), x.cols());
    let mut m = vec![0.0; f];
    for r in 0..t {
        for (a, v) in m.iter_mut().zip(x.row(r)) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= t.max(1) as f64);
    m
}

/// Frozen task teacher derived from the world.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'w> {
    world: &'w World,
    pub task: Task,
}

/// Inverse temperature of the ASR teacher's template matching.
const ASR_SHARPNESS: f64 = 0.1;
/// AT teacher logit gain.
const AT_GAIN: f64 = 8.0;

impl Teacher<'_> {
    /// Teacher output for one utterance `[T x F]`:
    /// ASR `[floor(T/2) x D_t]`, AT `[K]` logits, SV unit vector `[J]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.world;
        let cfg = &w.cfg;
        if x.rank() != 2 || x.cols() != cfg.feature_dim {
            return Err(DataError::Invalid(format!(
                "teacher expects [T x {}] features, got {:?}",
                cfg.feature_dim,
                x.shape()
            )));
        }
        Ok(match self.task {
            Task::Asr => {
                // 2:1 frame-rate reduction, then soft template matching.
                let (v, d, f) = (cfg.vocab_size, cfg.teacher_dim, cfg.feature_dim);
                let frames = x.rows() / 2;
                let mut out = Vec::with_capacity(frames * d);
                for j in 0..frames {
                    let z: Vec<f64> = x.row(2 * j).iter().zip(x.row(2 * j + 1)).map(|(a, b)| 0.5 * (a + b)).collect();
                    let scores: Vec<f64> = (1..=v).map(|tok| ASR_SHARPNESS * dot(&z, w.template(tok))).collect();
                    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z_sum: f64 = ex.iter().sum();
                    for c in 0..d {
                        let mut acc = 0.0;
                        for (tok, e) in ex.iter().enumerate() {
                            acc += e / z_sum * w.asr_proj[tok * d + c];
                        }
                        out.push(acc);
                    }
                    debug_assert_eq!(z.len(), f);
                }
                Tensor::new(vec![frames, d], out).expect("shape")
            }
            Task::At => {
                let m = time_mean(x);
                let logits = (0..cfg.num_events)
                    .map(|e| {
                        let b = w.bump(e);
                        let nb2 = dot(b, b);
                        AT_GAIN * (dot(&m, b) / nb2 - 0.5)
                    })
                    .collect();
                Tensor::vector(logits)
            }
            Task::Sv => {
                let (f, r, j) = (cfg.feature_dim, cfg.speaker_rank, cfg.spk_dim);
                let m = time_mean(x);
                let coef: Vec<f64> = (0..r).map(|i| dot(&m, &w.spk_basis[i * f..(i + 1) * f])).collect();
                let mut e: Vec<f64> = (0..j).map(|o| dot(&coef, &w.sv_mix[o * r..(o + 1) * r])).collect();
                let n = dot(&e, &e).sqrt();
                if n > 0.0 {
                    e.iter_mut().for_each(|v| *v /= n);
                }
                Tensor::vector(e)
            }
        })
    }

    /// Runs the teacher over a corpus, producing one shard record per utterance.
    /// Cross-task labelling (e.g. an AT teacher on a speech corpus) must be
    /// requested explicitly.
    pub fn extract(&self, corpus: &Corpus, allow_cross_task: bool) -> Result<Shard> {
        if corpus.task != self.task && !allow_cross_task {
            return Err(DataError::TaskMismatch {
                expected: self.task,
                found: corpus.task,
            });
        }
        let cfg = &self.world.cfg;
        let (kind, dim) = match self.task {
            Task::Asr => (ShardKind::Asr, cfg.teacher_dim),
            Task::At => (ShardKind::At, cfg.num_events),
            Task::Sv => (ShardKind::Sv, cfg.spk_dim),
        };
        let mut shard = Shard::new(kind, vec![dim]);
        for u in &corpus.utts {
            if shard.get(&u.id).is_some() {
                return Err(DataError::DuplicateId(u.id.clone()));
            }
            let out = self.apply(&u.features)?;
            shard.push(u.id.clone(), out.shape().to_vec(), out.into_data());
        }
        Ok(shard)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::Role;

    fn spec(name: &str, task: Task, size: usize) -> CorpusSpec {
        CorpusSpec {
            name: name.into(),
            task,
            role: Role::Pretrain,
            size,
            repeat: 1,
            path: None,
            frames: [48, 96],
            speakers: [0, 8],
            all_labels: true,
        }
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = WorldConfig::default();
        let a = World::new(&cfg, 7).corpus(&spec("x", Task::Asr, 4));
        let b = World::new(&cfg, 7).corpus(&spec("x", Task::Asr, 4));
        assert_eq!(a, b);
        let c = World::new(&cfg, 8).corpus(&spec("x", Task::Asr, 4));
        assert_ne!(a, c);
        assert!(World::new(&cfg, 7).corpus(&spec("x", Task::Asr, 0)).utts.is_empty());
    }

    #[test]
    fn utterances_are_well_formed() {
        let cfg = WorldConfig::default();
        let w = World::new(&cfg, 1);
        for u in w.corpus(&spec("u", Task::Asr, 20)).utts {
            assert_eq!(u.frames() % 4, 0);
            assert!(u.frames() >= 48 && u.frames() <= 96);
            let tr = u.transcript.clone().unwrap();
            assert!(tr.windows(2).all(|p| p[0] != p[1]));
            assert!(tr.iter().all(|&t| (1..=cfg.vocab_size).contains(&t)));
            assert!(tr.len() <= u.frames() / cfg.token_frames[0] + 1);
        }
    }

    #[test]
    fn speaker_signature_is_recoverable_from_feature_means() {
        let cfg = WorldConfig::default();
        let w = World::new(&cfg, 2);
        let c = w.corpus(&spec("s", Task::Sv, 200));
        let means: Vec<Vec<f64>> = c.utts.iter().map(|u| time_mean(&u.features)).collect();
        let (mut same, mut diff, mut ns, mut nd) = (0.0, 0.0, 0, 0);
        for i in 0..100 {
            for j in (i + 1)..200 {
                let s = cos(&means[i], &means[j]);
                if c.utts[i].speaker == c.utts[j].speaker {
                    same += s;
                    ns += 1;
                } else if nd < 100 * ns.max(1) {
                    diff += s;
                    nd += 1;
                }
            }
        }
        assert!(ns >= 100);
        assert!(same / ns as f64 > diff / nd as f64);
    }

    #[test]
    fn teachers_are_frozen_and_shaped() {
        let cfg = WorldConfig::default();
        let w = World::new(&cfg, 3);
        let c = w.corpus(&spec("t", Task::Sv, 120));
        let u = &c.utts[0];
        for task in Task::ALL {
            let t = w.teacher(task);
            assert_eq!(t.apply(&u.features).unwrap(), t.apply(&u.features).unwrap());
        }
        let te = w.teacher(Task::Asr).apply(&u.features).unwrap();
        assert_eq!(te.shape(), &[u.frames() / 2, cfg.teacher_dim]);
        // student frame count is T/4, so the teacher runs at twice that rate
        assert_eq!(te.rows(), 2 * (u.frames() / 4));
        assert_eq!(w.teacher(Task::At).apply(&u.features).unwrap().shape(), &[cfg.num_events]);

        let sv = w.teacher(Task::Sv);
        let embs: Vec<Tensor> = c.utts.iter().map(|u| sv.apply(&u.features).unwrap()).collect();
        let (mut same, mut diff, mut ns, mut nd) = (0.0, 0.0, 0, 0);
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let s = dot(embs[i].data(), embs[j].data());
                if c.utts[i].speaker == c.utts[j].speaker {
                    same += s;
                    ns += 1;
                } else {
                    diff += s;
                    nd += 1;
                }
            }
        }
        assert!(same / ns as f64 > diff / nd as f64 + 0.2);
    }

    #[test]
    fn at_teacher_tracks_events() {
        let cfg = WorldConfig::default();
        let w = World::new(&cfg, 4);
        let c = w.corpus(&spec("a", Task::At, 60));
        let t = w.teacher(Task::At);
        let (mut agree, mut total) = (0, 0);
        for u in &c.utts {
            let logits = t.apply(&u.features).unwrap();
            for (l, y) in logits.data().iter().zip(u.events.as_ref().unwrap()) {
                agree += usize::from((*l > 0.0) == (*y > 0.5));
                total += 1;
            }
        }
        assert!(agree as f64 / total as f64 > 0.9, "{agree}/{total}");
    }

    #[test]
    fn extract_checks_task_and_counts() {
        let cfg = WorldConfig::default();
        let w = World::new(&cfg, 5);
        let c = w.corpus(&spec("e", Task::At, 3));
        assert!(matches!(w.teacher(Task::Asr).extract(&c, false), Err(DataError::TaskMismatch { .. })));
        let s = w.teacher(Task::At).extract(&c, false).unwrap();
        assert_eq!(s.records.len(), 3);
        assert_eq!(w.teacher(Task::Sv).extract(&c, true).unwrap().records.len(), 3);
    }
}
