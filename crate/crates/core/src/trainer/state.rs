//! Training state and its checkpoint encoding.
//!
//! A checkpoint is a record file of kind `Checkpoint` holding, per parameter
//! `group/name`: `param:`, `m:`, `v:` tensors and a `count:` scalar (Adam
//! update count), plus `meta:` records for version, stage, step, seed and the
//! sampler cursor.

use std::path::{Path, PathBuf};

use super::{Result, TrainError};
use crate::datapipe::sampler::SamplerState;
use crate::datapipe::shard::{Shard, ShardKind};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub store: ParamStore,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
    pub step: u64,
    pub stage: Stage,
    pub seed: u64,
    pub sampler: Option<SamplerState>,
    /// Fine-tune started without a pre-trained encoder.
    pub scratch: bool,
}

impl TrainState {
    /// Zero moments, step 0.
    pub fn fresh(store: ParamStore, stage: Stage, seed: u64) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let n = store.len();
        TrainState {
            v: m.clone(),
            m,
            counts: vec![0; n],
            store,
            step: 0,
            stage,
            seed,
            sampler: None,
            scratch: false,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.sampler.as_ref().map_or(0, |s| s.epoch)
    }

    pub fn to_shard(&self) -> Shard {
        let mut s = Shard::new(ShardKind::Checkpoint, vec![]);
        s.push("meta:version", vec![1], vec![CHECKPOINT_VERSION as f64]);
        s.push(
            "meta:stage",
            vec![1],
            vec![match self.stage {
                Stage::Pretrain => 0.0,
                Stage::Finetune => 1.0,
            }],
        );
        s.push("meta:step", vec![1], vec![self.step as f64]);
        s.push("meta:scratch", vec![1], vec![if self.scratch { 1.0 } else { 0.0 }]);
        s.push("meta:seed", vec![2], vec![(self.seed >> 32) as f64, (self.seed & 0xFFFF_FFFF) as f64]);
        if let Some(sm) = &self.sampler {
            let mut d = vec![sm.epoch as f64, sm.draws as f64, if sm.ended { 1.0 } else { 0.0 }];
            d.extend(sm.consumed.iter().map(|&c| c as f64));
            s.push("meta:sampler", vec![d.len()], d);
        }
        for (i, p) in self.store.iter().enumerate() {
            let key = p.key();
            let shape = p.value.shape().to_vec();
            s.push(format!("param:{key}"), shape.clone(), p.value.data().to_vec());
            s.push(format!("m:{key}"), shape.clone(), self.m[i].clone());
            s.push(format!("v:{key}"), shape, self.v[i].clone());
            s.push(format!("count:{key}"), vec![1], vec![self.counts[i] as f64]);
        }
        s
    }

    pub fn from_shard(shard: &Shard) -> Result<Self> {
        let bad = |msg: String| TrainError::Checkpoint(msg);
        if shard.kind != ShardKind::Checkpoint {
            return Err(bad(format!("expected a checkpoint file, found a {:?} shard", shard.kind)));
        }
        let meta = |name: &str| -> Result<&[f64]> {
            shard
                .get(&format!("meta:{name}"))
                .map(|r| r.data.as_slice())
                .ok_or_else(|| bad(format!("missing meta:{name}")))
        };
        let version = meta("version")?.first().copied().unwrap_or(0.0);
        if version != CHECKPOINT_VERSION as f64 {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let stage = match meta("stage")?.first() {
            Some(&x) if x == 0.0 => Stage::Pretrain,
            Some(&x) if x == 1.0 => Stage::Finetune,
            other => return Err(bad(format!("bad stage {other:?}"))),
        };
        let step = meta("step")?.first().copied().unwrap_or(0.0) as u64;
        let scratch = meta("scratch")?.first().is_some_and(|&x| x != 0.0);
        let seed_parts = meta("seed")?;
        if seed_parts.len() != 2 {
            return Err(bad("bad seed record".into()));
        }
        let seed = ((seed_parts[0] as u64) << 32) | seed_parts[1] as u64;
        let sampler = shard.get("meta:sampler").map(|r| {
            let d = &r.data;
            SamplerState {
                epoch: d[0] as u64,
                draws: d[1] as u64,
                ended: d[2] != 0.0,
                consumed: d[3..].iter().map(|&c| c as usize).collect(),
            }
        });

        let mut store = ParamStore::new();
        let (mut m, mut v, mut counts) = (Vec::new(), Vec::new(), Vec::new());
        for r in &shard.records {
            let Some(key) = r.id.strip_prefix("param:") else {
                continue;
            };
            let (group, name) = key.split_once('/').ok_or_else(|| bad(format!("malformed key '{key}'")))?;
            let group: Group = group.parse().map_err(bad)?;
            let value = Tensor::new(r.shape.clone(), r.data.clone()).map_err(|e| bad(e.to_string()))?;
            let take = |prefix: &str| -> Result<Vec<f64>> {
                let rec = shard
                    .get(&format!("{prefix}:{key}"))
                    .ok_or_else(|| bad(format!("missing {prefix}:{key}")))?;
                if rec.shape != r.shape {
                    return Err(bad(format!("{prefix}:{key} shape does not match the parameter")));
                }
                Ok(rec.data.clone())
            };
            m.push(take("m")?);
            v.push(take("v")?);
            let c = shard
                .get(&format!("count:{key}"))
                .ok_or_else(|| bad(format!("missing count:{key}")))?;
            counts.push(c.data.first().copied().unwrap_or(0.0) as u64);
            if store.find(group, name).is_some() {
                return Err(bad(format!("duplicate parameter {key}")));
            }
            store.add(group, name, value);
        }
        Ok(TrainState {
            store,
            m,
            v,
            counts,
            step,
            stage,
            seed,
            sampler,
            scratch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_shard().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let shard = Shard::read(path)?;
        Self::from_shard(&shard).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// `ckpt-<step>.mtkd` files in `dir`, oldest first.
    pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
        let rd = std::fs::read_dir(dir).map_err(|e| crate::datapipe::DataError::io(dir, e))?;
        let mut found: Vec<(u64, PathBuf)> = rd
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let step = name.strip_prefix("ckpt-")?.strip_suffix(".mtkd")?.parse().ok()?;
                Some((step, e.path()))
            })
            .collect();
        found.sort();
        Ok(found.into_iter().map(|(_, p)| p).collect())
    }

    pub fn checkpoint_name(step: u64) -> String {
        format!("ckpt-{step:07}.mtkd")
    }
}

/// Element-wise mean of the parameters of `states` (oldest first). Moments
/// and update counts are reset; step, stage, seed and sampler come from the
/// newest state.
pub fn average_checkpoints(states: &[TrainState]) -> Result<TrainState> {
    let newest = states.last().ok_or_else(|| TrainError::Checkpoint("nothing to average".into()))?;
    let mut store = states[0].store.clone();
    // running mean, exact when all inputs agree
    for (n, s) in states.iter().enumerate().skip(1) {
        if s.store.len() != store.len() {
            return Err(TrainError::Checkpoint("checkpoints hold different parameter sets".into()));
        }
        for (acc, p) in store.iter_mut().zip(s.store.iter()) {
            if acc.key() != p.key() || acc.value.shape() != p.value.shape() {
                return Err(TrainError::Checkpoint(format!(
                    "incompatible parameter {} {:?} vs {} {:?}",
                    acc.key(),
                    acc.value.shape(),
                    p.key(),
                    p.value.shape()
                )));
            }
            for (a, b) in acc.value.data_mut().iter_mut().zip(p.value.data()) {
                *a += (b - *a) / (n + 1) as f64;
            }
        }
    }
    let mut out = TrainState::fresh(store, newest.stage, newest.seed);
    out.step = newest.step;
    out.sampler = newest.sampler.clone();
    out.scratch = newest.scratch;
    Ok(out)
}
