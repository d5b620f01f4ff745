//! Size-proportional multi-corpus batch sampler.
//!
//! Each corpus is expanded `repeat` times and shuffled once per epoch. Every
//! draw picks a source corpus with probability proportional to its remaining
//! (not yet drawn) expanded items, so within an epoch the mix tracks the
//! relative sizes and all sources drain at about the same time. The epoch ends
//! as soon as any source runs out.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{DataError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Source {
    pub repeat: usize,
    /// Input frame count of every utterance, in corpus order.
    pub frames: Vec<usize>,
}

impl Source {
    fn expanded(&self) -> usize {
        self.repeat * self.frames.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub corpus: usize,
    /// Utterance index within the corpus.
    pub utt: usize,
    /// Position in the corpus's expanded sequence for this epoch.
    pub position: usize,
}

/// Resumable cursor state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerState {
    pub epoch: u64,
    pub consumed: Vec<usize>,
    pub draws: u64,
    /// Set once any source is exhausted; cleared by [`Sampler::next_epoch`].
    pub ended: bool,
}

#[derive(Debug, Clone)]
pub struct Sampler {
    sources: Vec<Source>,
    budget: usize,
    seed: u64,
    state: SamplerState,
    orders: Vec<Vec<usize>>,
}

impl Sampler {
    pub fn new(sources: Vec<Source>, budget: usize, seed: u64) -> Result<Self> {
        if sources.is_empty() {
            return Err(DataError::Invalid("sampler needs at least one corpus".into()));
        }
        if let Some(i) = sources.iter().position(|s| s.frames.is_empty() || s.repeat == 0) {
            return Err(DataError::Invalid(format!("sampler source {i} is empty")));
        }
        let smallest = sources.iter().flat_map(|s| s.frames.iter().copied()).min().unwrap_or(0);
        if budget < smallest {
            return Err(DataError::Invalid(format!(
                "batch budget of {budget} frames is smaller than the shortest utterance ({smallest} frames)"
            )));
        }
        let n = sources.len();
        let mut s = Sampler {
            sources,
            budget,
            seed,
            state: SamplerState {
                epoch: 0,
                consumed: vec![0; n],
                draws: 0,
                ended: false,
            },
            orders: Vec::new(),
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        let epoch = self.state.epoch;
        self.orders = self
            .sources
            .iter()
            .enumerate()
            .map(|(i, src)| {
                let mut order: Vec<usize> = (0..src.expanded()).collect();
                order.shuffle(&mut rng::stream(self.seed, &[0x5A3F, epoch, i as u64]));
                order
            })
            .collect();
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn restore(&mut self, state: SamplerState) -> Result<()> {
        if state.consumed.len() != self.sources.len()
            || state.consumed.iter().zip(&self.sources).any(|(&c, s)| c > s.expanded())
        {
            return Err(DataError::Invalid("sampler state does not match the configured corpora".into()));
        }
        self.state = state;
        self.shuffle();
        Ok(())
    }

    pub fn next_epoch(&mut self) {
        self.state.epoch += 1;
        self.state.consumed.iter_mut().for_each(|c| *c = 0);
        self.state.draws = 0;
        self.state.ended = false;
        self.shuffle();
    }

    fn exhausted(&self) -> bool {
        self.state.consumed.iter().zip(&self.sources).any(|(&c, s)| c >= s.expanded())
    }

    /// Source of the next draw, without consuming it.
    fn pick(&self) -> Draw {
        let remaining: Vec<usize> = self
            .state
            .consumed
            .iter()
            .zip(&self.sources)
            .map(|(&c, s)| s.expanded() - c)
            .collect();
        let total: usize = remaining.iter().sum();
        let mut g = rng::stream(self.seed, &[0xD4A7, self.state.epoch, self.state.draws]);
        let mut x = g.gen_range(0..total);
        let mut corpus = 0;
        for (i, &r) in remaining.iter().enumerate() {
            if x < r {
                corpus = i;
                break;
            }
            x -= r;
        }
        let position = self.state.consumed[corpus];
        let utt = self.orders[corpus][position] % self.sources[corpus].frames.len();
        Draw { corpus, utt, position }
    }

    /// Next batch whose input-frame total stays within the budget (an
    /// utterance longer than the budget is emitted on its own). `None` marks
    /// the end of the epoch; call [`Sampler::next_epoch`] to continue.
    pub fn next_batch(&mut self) -> Option<Vec<Draw>> {
        let mut batch = Vec::new();
        let mut frames = 0;
        loop {
            if self.state.ended || self.exhausted() {
                self.state.ended = true;
                return (!batch.is_empty()).then_some(batch);
            }
            let d = self.pick();
            let len = self.sources[d.corpus].frames[d.utt];
            if !batch.is_empty() && frames + len > self.budget {
                return Some(batch);
            }
            self.state.consumed[d.corpus] += 1;
            self.state.draws += 1;
            frames += len;
            batch.push(d);
            if frames >= self.budget {
                return Some(batch);
            }
        }
    }
}
