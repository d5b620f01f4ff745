//! Student audio encoder: strided convolutional front-end followed by a stack
//! of pre-norm transformer blocks. Every block output is exposed so task heads
//! can tap intermediate depths.

use serde::{Deserialize, Serialize};

use crate::params::{Binding, Group, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const FRONTEND_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub attn_heads: usize,
    /// Input-frame to block-frame ratio; a power of two.
    pub frontend_subsample: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 6,
            model_dim: 64,
            ffn_dim: 128,
            attn_heads: 4,
            frontend_subsample: 4,
            input_dim: 80,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.num_blocks < 1 {
            return Err("num_blocks must be >= 1".into());
        }
        if self.model_dim == 0 || self.attn_heads == 0 || self.model_dim % self.attn_heads != 0 {
            return Err(format!(
                "model_dim {} must be a positive multiple of attn_heads {}",
                self.model_dim, self.attn_heads
            ));
        }
        if self.frontend_subsample == 0 || !self.frontend_subsample.is_power_of_two() {
            return Err(format!(
                "frontend_subsample {} must be a power of two >= 1",
                self.frontend_subsample
            ));
        }
        if self.input_dim == 0 || self.ffn_dim == 0 {
            return Err("input_dim and ffn_dim must be positive".into());
        }
        Ok(())
    }

    fn conv_layers(&self) -> usize {
        self.frontend_subsample.trailing_zeros() as usize
    }

    /// Output frame count for `frames` input frames.
    ///
    /// Each front-end layer left-pads one zero frame and applies a width-3,
    /// stride-2 valid convolution, so `L` frames become
    /// `floor((L + 1 - 3) / 2) + 1 = floor(L / 2)`. Composing the layers gives
    /// `floor(T / frontend_subsample)`.
    pub fn output_frames(&self, frames: usize) -> usize {
        frames / self.frontend_subsample
    }

    /// Shortest input the front-end accepts.
    pub fn min_input_frames(&self) -> usize {
        self.frontend_subsample.max(1)
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (f, d, h) = (self.input_dim, self.model_dim, self.ffn_dim);
        let mut frontend = 0;
        for layer in 0..self.conv_layers() {
            let d_in = if layer == 0 { f } else { d };
            frontend += FRONTEND_KERNEL * d_in * d + d;
        }
        let proj_in = if self.conv_layers() == 0 { f } else { d };
        frontend += proj_in * d + d;
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        frontend + self.num_blocks * block
    }
}

#[derive(Debug, Clone)]
struct FrontendParams {
    convs: Vec<(ParamId, ParamId)>,
    proj_w: ParamId,
    proj_b: ParamId,
}

#[derive(Debug, Clone)]
struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter layout of the encoder inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    frontend: FrontendParams,
    blocks: Vec<BlockParams>,
}

/// Per-block representations of one utterance.
#[derive(Debug, Clone)]
pub struct LayerOutputs {
    pub reps: Vec<Var>,
    pub frame_count: usize,
}

impl LayerOutputs {
    /// Representation after block `layer` (1-based).
    pub fn tap(&self, layer: usize) -> Result<Var> {
        if layer == 0 || layer > self.reps.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "tap",
                index: layer,
                len: self.reps.len(),
            });
        }
        Ok(self.reps[layer - 1])
    }
}

impl Encoder {
    /// Registers freshly initialised encoder parameters in `store`.
    pub fn init(cfg: &EncoderConfig, store: &mut ParamStore) -> Self {
        let mut rng = rng::stream(cfg.seed, &[0xE1C0]);
        let (f, d, h) = (cfg.input_dim, cfg.model_dim, cfg.ffn_dim);
        let g = Group::Frontend;
        let mut convs = Vec::new();
        for layer in 0..cfg.conv_layers() {
            let d_in = if layer == 0 { f } else { d };
            let fan_in = FRONTEND_KERNEL * d_in;
            let w = store.add_uniform(g, &format!("conv{layer}.w"), &[FRONTEND_KERNEL, d_in, d], fan_in, &mut rng);
            let b = store.add_uniform(g, &format!("conv{layer}.b"), &[d], fan_in, &mut rng);
            convs.push((w, b));
        }
        let proj_in = if convs.is_empty() { f } else { d };
        let frontend = FrontendParams {
            convs,
            proj_w: store.add_uniform(g, "proj.w", &[proj_in, d], proj_in, &mut rng),
            proj_b: store.add_uniform(g, "proj.b", &[d], proj_in, &mut rng),
        };
        let blocks = (1..=cfg.num_blocks)
            .map(|i| {
                let g = Group::Block(i);
                let mut lin = |name: &str, d_in: usize, d_out: usize| {
                    (
                        store.add_uniform(g, &format!("{name}.w"), &[d_in, d_out], d_in, &mut rng),
                        store.add_uniform(g, &format!("{name}.b"), &[d_out], d_in, &mut rng),
                    )
                };
                let (wq, bq) = lin("attn.q", d, d);
                let (wk, bk) = lin("attn.k", d, d);
                let (wv, bv) = lin("attn.v", d, d);
                let (wo, bo) = lin("attn.o", d, d);
                let (w1, b1) = lin("ffn.1", d, h);
                let (w2, b2) = lin("ffn.2", h, d);
                BlockParams {
                    ln1_g: store.add_full(g, "ln1.g", &[d], 1.0),
                    ln1_b: store.add_zeros(g, "ln1.b", &[d]),
                    ln2_g: store.add_full(g, "ln2.g", &[d], 1.0),
                    ln2_b: store.add_zeros(g, "ln2.b", &[d]),
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                    w1,
                    b1,
                    w2,
                    b2,
                }
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            frontend,
            blocks,
        }
    }

    /// Re-attaches to encoder parameters already present in `store`
    /// (e.g. after loading a checkpoint).
    pub fn attach(cfg: &EncoderConfig, store: &ParamStore) -> std::result::Result<Self, String> {
        let (f, d, h) = (cfg.input_dim, cfg.model_dim, cfg.ffn_dim);
        let find = |g: Group, name: &str, shape: &[usize]| -> std::result::Result<ParamId, String> {
            let id = store
                .find(g, name)
                .ok_or_else(|| format!("missing parameter {g}/{name}"))?;
            let actual = store.get(id).value.shape();
            if actual != shape {
                return Err(format!(
                    "parameter {g}/{name} has shape {actual:?}, encoder config expects {shape:?}"
                ));
            }
            Ok(id)
        };
        let mut convs = Vec::new();
        for layer in 0..cfg.conv_layers() {
            let d_in = if layer == 0 { f } else { d };
            convs.push((
                find(Group::Frontend, &format!("conv{layer}.w"), &[FRONTEND_KERNEL, d_in, d])?,
                find(Group::Frontend, &format!("conv{layer}.b"), &[d])?,
            ));
        }
        let proj_in = if convs.is_empty() { f } else { d };
        let frontend = FrontendParams {
            convs,
            proj_w: find(Group::Frontend, "proj.w", &[proj_in, d])?,
            proj_b: find(Group::Frontend, "proj.b", &[d])?,
        };
        let mut blocks = Vec::new();
        for i in 1..=cfg.num_blocks {
            let g = Group::Block(i);
            blocks.push(BlockParams {
                ln1_g: find(g, "ln1.g", &[d])?,
                ln1_b: find(g, "ln1.b", &[d])?,
                wq: find(g, "attn.q.w", &[d, d])?,
                bq: find(g, "attn.q.b", &[d])?,
                wk: find(g, "attn.k.w", &[d, d])?,
                bk: find(g, "attn.k.b", &[d])?,
                wv: find(g, "attn.v.w", &[d, d])?,
                bv: find(g, "attn.v.b", &[d])?,
                wo: find(g, "attn.o.w", &[d, d])?,
                bo: find(g, "attn.o.b", &[d])?,
                ln2_g: find(g, "ln2.g", &[d])?,
                ln2_b: find(g, "ln2.b", &[d])?,
                w1: find(g, "ffn.1.w", &[d, h])?,
                b1: find(g, "ffn.1.b", &[h])?,
                w2: find(g, "ffn.2.w", &[h, d])?,
                b2: find(g, "ffn.2.b", &[d])?,
            });
        }
        if store.find(Group::Block(cfg.num_blocks + 1), "ln1.g").is_some() {
            return Err(format!(
                "checkpoint has more than the configured {} encoder blocks",
                cfg.num_blocks
            ));
        }
        Ok(Self {
            cfg: cfg.clone(),
            frontend,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Runs the encoder on `features [T x F]`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, features: Var) -> Result<LayerOutputs> {
        self.forward_to(tape, bind, features, self.blocks.len())
    }

    /// Runs the front-end and the first `depth` blocks only.
    pub fn forward_to(&self, tape: &mut Tape, bind: &Binding, features: Var, depth: usize) -> Result<LayerOutputs> {
        if depth == 0 || depth > self.blocks.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "encoder_forward",
                index: depth,
                len: self.blocks.len(),
            });
        }
        let shape = tape.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "encoder_forward",
                left: shape,
                right: vec![0, self.cfg.input_dim],
            });
        }
        if shape[0] < self.cfg.min_input_frames() {
            return Err(TensorError::SequenceTooShort {
                op: "encoder_forward",
                len: shape[0],
                needed: self.cfg.min_input_frames(),
            });
        }
        let mut x = features;
        for &(w, b) in &self.frontend.convs {
            let padded = tape.pad_rows(x, 1, 0)?;
            let c = tape.conv1d(padded, bind.var(w), 2)?;
            let c = tape.add_row(c, bind.var(b))?;
            x = tape.relu(c);
        }
        let x = tape.linear(x, bind.var(self.frontend.proj_w), Some(bind.var(self.frontend.proj_b)))?;
        let frames = tape.shape(x)[0];
        debug_assert_eq!(frames, self.cfg.output_frames(shape[0]));
        let pe = tape.constant(sinusoidal_positions(frames, self.cfg.model_dim));
        let mut x = tape.add(x, pe)?;

        let mut reps = Vec::with_capacity(depth);
        for block in &self.blocks[..depth] {
            x = self.block_forward(tape, bind, block, x)?;
            reps.push(x);
        }
        Ok(LayerOutputs {
            reps,
            frame_count: frames,
        })
    }

    fn block_forward(&self, tape: &mut Tape, bind: &Binding, p: &BlockParams, x: Var) -> Result<Var> {
        let v = |id: ParamId| bind.var(id);
        let heads = self.cfg.attn_heads;
        let dh = self.cfg.model_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let h = tape.layer_norm(x, v(p.ln1_g), v(p.ln1_b), LAYER_NORM_EPS)?;
        let q = tape.linear(h, v(p.wq), Some(v(p.bq)))?;
        let k = tape.linear(h, v(p.wk), Some(v(p.bk)))?;
        let val = tape.linear(h, v(p.wv), Some(v(p.bv)))?;
        let mut ctx = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(val, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores);
            ctx.push(tape.matmul(attn, vh)?);
        }
        let ctx = if heads == 1 { ctx[0] } else { tape.concat(&ctx)? };
        let attn_out = tape.linear(ctx, v(p.wo), Some(v(p.bo)))?;
        let x = tape.add(x, attn_out)?;

        let h = tape.layer_norm(x, v(p.ln2_g), v(p.ln2_b), LAYER_NORM_EPS)?;
        let f = tape.linear(h, v(p.w1), Some(v(p.b1)))?;
        let f = tape.relu(f);
        let f = tape.linear(f, v(p.w2), Some(v(p.b2)))?;
        tape.add(x, f)
    }

    /// Parameters of the attention output projection and second feed-forward
    /// layer of every block (the residual-branch outputs).
    pub fn residual_output_params(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [b.wo, b.bo, b.w2, b.b2])
            .collect()
    }
}

/// Fixed sinusoidal position encodings `[frames x dim]`.
pub fn sinusoidal_positions(frames: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; frames * dim];
    for t in 0..frames {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![frames, dim], data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            num_blocks: 2,
            model_dim: 8,
            ffn_dim: 12,
            attn_heads: 2,
            frontend_subsample: 4,
            input_dim: 5,
            seed: 7,
        }
    }

    fn random_features(t: usize, f: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        Tensor::new(vec![t, f], (0..t * f).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn same_seed_same_params_different_seed_differs() {
        let cfg = small_cfg();
        let (mut a, mut b, mut c) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
        Encoder::init(&cfg, &mut a);
        Encoder::init(&cfg, &mut b);
        Encoder::init(&EncoderConfig { seed: 8, ..cfg }, &mut c);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn param_count_matches_store_and_hand_count() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        Encoder::init(&cfg, &mut store);
        assert_eq!(store.numel(), cfg.param_count());
        // Hand count for F=5, D=8, H=12, two conv layers, two blocks:
        // conv0 3*5*8+8=128, conv1 3*8*8+8=200, proj 8*8+8=72 → 400
        // block: ln 16 + attn 4*(64+8)=288 + ln 16 + ffn (96+12)+(96+8)=212 → 532
        assert_eq!(cfg.param_count(), 400 + 2 * 532);
    }

    #[test]
    fn frame_arithmetic() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.output_frames(16), 4);
        let small = small_cfg();
        let mut store = ParamStore::new();
        let enc = Encoder::init(&small, &mut store);
        for t in [4usize, 5, 7, 16, 17, 30] {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape, |_| false);
            let x = tape.constant(random_features(t, small.input_dim, t as u64));
            let out = enc.forward(&mut tape, &bind, x).unwrap();
            assert_eq!(out.frame_count, t / 4);
            assert_eq!(out.reps.len(), 2);
            for r in &out.reps {
                assert_eq!(tape.shape(*r), &[t / 4, small.model_dim]);
            }
        }
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, |_| false);
        let x = tape.constant(random_features(3, small.input_dim, 0));
        assert!(matches!(
            enc.forward(&mut tape, &bind, x),
            Err(TensorError::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn zero_residual_branches_are_identity() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let enc = Encoder::init(&cfg, &mut store);
        for id in enc.residual_output_params() {
            let p = store.get_mut(id);
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, |_| false);
        let x = tape.constant(random_features(16, cfg.input_dim, 3));
        let out = enc.forward(&mut tape, &bind, x).unwrap();
        // The front-end output is the input to block 1; with zeroed branches
        // every block is the identity on it.
        let first = tape.value(out.reps[0]).clone();
        for r in &out.reps {
            assert_eq!(tape.value(*r), &first);
        }
    }

    #[test]
    fn tap_indices() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 2]));
        let out = LayerOutputs {
            reps: vec![a, b],
            frame_count: 1,
        };
        assert_eq!(out.tap(2).unwrap(), out.reps[1]);
        assert!(out.tap(0).is_err());
        assert!(out.tap(3).is_err());
    }

    #[test]
    fn gradient_check_two_block_encoder() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let enc = Encoder::init(&cfg, &mut store);
        let feats = random_features(12, cfg.input_dim, 11);
        let n_params = store.len();
        let mut inputs: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
        inputs.push(feats);
        let check = gradcheck::check(&inputs, |tape, vars| {
            let bind = Binding::from_vars(vars[..n_params].to_vec());
            let out = enc.forward(tape, &bind, vars[n_params])?;
            let last = out.tap(2)?;
            let w = tape.constant(random_features(3, cfg.model_dim, 5));
            let sq = tape.mul(last, last)?;
            let a = tape.mul(sq, w)?;
            let b = tape.tanh(last);
            let c = tape.mul(b, w)?;
            let tot = tape.add(a, c)?;
            Ok(tape.sum(tot))
        })
        .unwrap();
        assert!(check.max_rel_error() < 1e-4, "{:?}", check.rel_errors);
    }
}
