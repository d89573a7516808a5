//! The conditional noise-prediction U-Net `f(x_delta, y_t, gamma)`.
//!
//! The two inputs are stacked as feature planes over the `(channels x time)`
//! grid, so one epoch is treated as a single-plane 2-D image. The network is
//! a pre-activation residual U-Net: norm -> SiLU -> conv blocks with a
//! learned 1x1 shortcut on width changes, stride-2 convolution downsampling,
//! nearest-neighbour + convolution upsampling, and additive skip merges
//! scaled by `1/sqrt(2)`. Self-attention runs at every stage whose grid has
//! shrunk to `attention_resolution` or below on both axes.
//!
//! The noise level enters through sinusoidal features of `sqrt(gamma)` that
//! feed a small MLP; each residual block applies a learned per-channel affine
//! (scale and shift) derived from that embedding.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array4, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EegEpoch, LabeledDataset};
use crate::diffusion::{self, DiffusionConfig, NoisePredictor};
use crate::error::{Error, Result};
use crate::nn::{he_normal, Adam, ParamId, ParamStore, Session, Tape, Tensor, TensorIndexEntry, Var};
use crate::rng;
use crate::schedule::NoiseSchedule;

/// Hyperparameters of the U-Net.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DenoiserConfig {
    /// Feature count of the first stage; stage `s` has
    /// `base_width * channel_multipliers[s]` features.
    pub base_width: usize,
    /// Number of resolution stages; the grid halves per stage.
    pub depth: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Self-attention activates at stages whose grid is at most this size on
    /// both axes.
    pub attention_resolution: usize,
    pub dropout: f64,
    pub gamma_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_width: 32,
            depth: 4,
            channel_multipliers: vec![1, 2, 4, 8],
            blocks_per_stage: 2,
            attention_resolution: 16,
            dropout: 0.2,
            gamma_embed_dim: 128,
        }
    }
}

impl DenoiserConfig {
    /// A small configuration suitable for 2-channel toy corpora.
    pub fn toy() -> Self {
        DenoiserConfig {
            base_width: 16,
            depth: 2,
            channel_multipliers: vec![1, 2],
            blocks_per_stage: 1,
            attention_resolution: 16,
            dropout: 0.1,
            gamma_embed_dim: 32,
        }
    }

    pub fn validate(&self, (channels, timesteps): (usize, usize)) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.channel_multipliers.len() != self.depth {
            return Err(Error::config(format!(
                "{} channel multipliers for depth {}",
                self.channel_multipliers.len(),
                self.depth
            )));
        }
        if self.channel_multipliers.iter().any(|&m| m == 0) || self.base_width == 0 {
            return Err(Error::config("widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.gamma_embed_dim == 0 || self.gamma_embed_dim % 2 != 0 {
            return Err(Error::config("gamma_embed_dim must be even and positive"));
        }
        let div = 1usize << (self.depth - 1);
        if channels % div != 0 || timesteps % div != 0 {
            return Err(Error::config(format!(
                "grid {channels}x{timesteps} not divisible by 2^(depth-1) = {div}"
            )));
        }
        Ok(())
    }

    /// Which stages run self-attention for a given epoch shape.
    pub fn attention_stages(&self, (channels, timesteps): (usize, usize)) -> Vec<bool> {
        (0..self.depth)
            .map(|s| {
                let h = channels >> s;
                let w = timesteps >> s;
                h.max(w) <= self.attention_resolution
            })
            .collect()
    }
}

/// Sinusoidal features of `sqrt(gamma)` at geometrically spaced frequencies.
///
/// The lowest frequency is 1 rad, which keeps the first coordinate monotonic
/// in `sqrt(gamma)` on (0, 1] and therefore makes the embedding injective.
pub fn gamma_embedding(gamma: f64, dim: usize) -> Result<Array1<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!("embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let root = gamma.sqrt();
    let mut out = Array1::zeros(dim);
    for j in 0..half {
        let expo = if half == 1 {
            0.0
        } else {
            j as f64 / (half - 1) as f64
        };
        let freq = 5000f64.powf(expo);
        out[j] = (freq * root).sin();
        out[half + j] = (freq * root).cos();
    }
    Ok(out)
}

struct ConvP {
    w: ParamId,
    b: ParamId,
}

struct LinearP {
    w: ParamId,
    b: ParamId,
}

struct NormP {
    g: ParamId,
    b: ParamId,
}

struct ResP {
    gn1: NormP,
    conv1: ConvP,
    scale: LinearP,
    shift: LinearP,
    gn2: NormP,
    conv2: ConvP,
    shortcut: Option<ConvP>,
    cin: usize,
    cout: usize,
}

struct AttnP {
    gn: NormP,
    q: ConvP,
    k: ConvP,
    v: ConvP,
    proj: ConvP,
    width: usize,
}

struct StageDown {
    blocks: Vec<ResP>,
    attn: Vec<AttnP>,
    down: Option<ConvP>,
}

struct StageUp {
    blocks: Vec<ResP>,
    attn: Vec<AttnP>,
    up: Option<ConvP>,
}

struct Layout {
    emb_lin1: LinearP,
    emb_lin2: LinearP,
    stem: ConvP,
    down: Vec<StageDown>,
    mid1: ResP,
    mid_attn: Option<AttnP>,
    mid2: ResP,
    up: Vec<StageUp>,
    out_gn: NormP,
    out_conv: ConvP,
}

/// The trained (or training) noise-prediction network.
pub struct Denoiser {
    config: DenoiserConfig,
    epoch_shape: (usize, usize),
    store: ParamStore,
    layout: Layout,
    attn_flags: Vec<bool>,
}

fn norm_groups(c: usize) -> usize {
    let mut g = c.min(32);
    while c % g != 0 {
        g -= 1;
    }
    g
}

struct Builder<'r> {
    store: ParamStore,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, kh: usize, kw: usize) -> ConvP {
        let fan_in = cin * kh * kw;
        let w = self.store.add(
            format!("{name}.w"),
            he_normal(&[cout, cin, kh, kw], fan_in, self.rng),
        );
        let b = self
            .store
            .add(format!("{name}.b"), Tensor::zeros(IxDyn(&[cout])));
        ConvP { w, b }
    }

    // Zero init keeps new residual branches (and the output head) silent at
    // the start of training.
    fn conv_zero(&mut self, name: &str, cout: usize, cin: usize, kh: usize, kw: usize) -> ConvP {
        let w = self
            .store
            .add(format!("{name}.w"), Tensor::zeros(IxDyn(&[cout, cin, kh, kw])));
        let b = self
            .store
            .add(format!("{name}.b"), Tensor::zeros(IxDyn(&[cout])));
        ConvP { w, b }
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> LinearP {
        let w = self
            .store
            .add(format!("{name}.w"), he_normal(&[out, inp], inp, self.rng));
        let b = self
            .store
            .add(format!("{name}.b"), Tensor::zeros(IxDyn(&[out])));
        LinearP { w, b }
    }

    fn linear_zero(&mut self, name: &str, out: usize, inp: usize) -> LinearP {
        let w = self
            .store
            .add(format!("{name}.w"), Tensor::zeros(IxDyn(&[out, inp])));
        let b = self
            .store
            .add(format!("{name}.b"), Tensor::zeros(IxDyn(&[out])));
        LinearP { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormP {
        let g = self
            .store
            .add(format!("{name}.g"), Tensor::from_elem(IxDyn(&[c]), 1.0));
        let b = self
            .store
            .add(format!("{name}.b"), Tensor::zeros(IxDyn(&[c])));
        NormP { g, b }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, emb: usize) -> ResP {
        ResP {
            gn1: self.norm(&format!("{name}.gn1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cout, cin, 3, 3),
            scale: self.linear_zero(&format!("{name}.scale"), cout, emb),
            shift: self.linear_zero(&format!("{name}.shift"), cout, emb),
            gn2: self.norm(&format!("{name}.gn2"), cout),
            conv2: self.conv_zero(&format!("{name}.conv2"), cout, cout, 3, 3),
            shortcut: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cout, cin, 1, 1)),
            cin,
            cout,
        }
    }

    fn attn(&mut self, name: &str, c: usize) -> AttnP {
        AttnP {
            gn: self.norm(&format!("{name}.gn"), c),
            q: self.conv(&format!("{name}.q"), c, c, 1, 1),
            k: self.conv(&format!("{name}.k"), c, c, 1, 1),
            v: self.conv(&format!("{name}.v"), c, c, 1, 1),
            proj: self.conv_zero(&format!("{name}.proj"), c, c, 1, 1),
            width: c,
        }
    }
}

impl Denoiser {
    /// Builds an untrained network; the parameter layout (and count) is a
    /// pure function of `(config, epoch_shape)`, and initial values are a
    /// pure function of those plus `init_seed`.
    pub fn build(
        config: DenoiserConfig,
        epoch_shape: (usize, usize),
        init_seed: u64,
    ) -> Result<Self> {
        config.validate(epoch_shape)?;
        let attn_flags = config.attention_stages(epoch_shape);
        let mut init_rng = rng::stream(init_seed, 0xD1FF);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut init_rng,
        };
        let e = config.gamma_embed_dim;
        let widths: Vec<usize> = config
            .channel_multipliers
            .iter()
            .map(|m| m * config.base_width)
            .collect();

        let emb_lin1 = b.linear("emb.lin1", e, e);
        let emb_lin2 = b.linear("emb.lin2", e, e);
        let stem = b.conv("stem", config.base_width, 2, 3, 3);

        let mut down = Vec::new();
        let mut prev = config.base_width;
        for (s, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for k in 0..config.blocks_per_stage {
                blocks.push(b.res_block(&format!("down.{s}.{k}"), prev, w, e));
                prev = w;
                if attn_flags[s] {
                    attn.push(b.attn(&format!("down.{s}.{k}.attn"), w));
                }
            }
            let down_conv =
                (s + 1 < config.depth).then(|| b.conv(&format!("down.{s}.pool"), w, w, 3, 3));
            down.push(StageDown {
                blocks,
                attn,
                down: down_conv,
            });
        }

        let deepest = *widths.last().unwrap();
        let mid1 = b.res_block("mid.0", deepest, deepest, e);
        let mid_attn = attn_flags[config.depth - 1].then(|| b.attn("mid.attn", deepest));
        let mid2 = b.res_block("mid.1", deepest, deepest, e);

        let mut up = Vec::new();
        for s in (0..config.depth).rev() {
            let w = widths[s];
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for k in 0..config.blocks_per_stage {
                blocks.push(b.res_block(&format!("up.{s}.{k}"), w, w, e));
                if attn_flags[s] {
                    attn.push(b.attn(&format!("up.{s}.{k}.attn"), w));
                }
            }
            let up_conv = (s > 0).then(|| b.conv(&format!("up.{s}.grow"), widths[s - 1], w, 3, 3));
            up.push(StageUp {
                blocks,
                attn,
                up: up_conv,
            });
        }

        let out_gn = b.norm("out.gn", widths[0]);
        let out_conv = b.conv_zero("out.conv", 1, widths[0], 3, 3);

        Ok(Denoiser {
            config,
            epoch_shape,
            store: b.store,
            layout: Layout {
                emb_lin1,
                emb_lin2,
                stem,
                down,
                mid1,
                mid_attn,
                mid2,
                up,
                out_gn,
                out_conv,
            },
            attn_flags,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn epoch_shape(&self) -> (usize, usize) {
        self.epoch_shape
    }

    pub fn param_count(&self) -> usize {
        self.store.total_elements()
    }

    pub fn attention_flags(&self) -> &[bool] {
        &self.attn_flags
    }

    /// Overwrites all parameters with `N(0, std^2)` draws. Calibration and
    /// test hook; a zero-initialized output head would otherwise hide
    /// conditioning effects.
    pub fn randomize_parameters(&mut self, std: f64, seed: u64) {
        self.store.randomize(std, &mut rng::stream(seed, 0xAB));
    }

    pub(crate) fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn res_block_fwd(
        &self,
        sess: &mut Session,
        x: Var,
        emb: Var,
        p: &ResP,
        dropout_mask: Option<Tensor>,
    ) -> Var {
        let gn1 = (sess.param(p.gn1.g), sess.param(p.gn1.b));
        let h = sess.tape.group_norm(x, gn1.0, gn1.1, norm_groups(p.cin), 1e-5);
        let h = sess.tape.silu(h);
        let (w1, b1) = (sess.param(p.conv1.w), sess.param(p.conv1.b));
        let h = sess.tape.conv2d(h, w1, Some(b1), (1, 1), (1, 1), 1);

        let (sw, sb) = (sess.param(p.scale.w), sess.param(p.scale.b));
        let scale = sess.tape.linear(emb, sw, Some(sb));
        let (tw, tb) = (sess.param(p.shift.w), sess.param(p.shift.b));
        let shift = sess.tape.linear(emb, tw, Some(tb));
        let h = sess.tape.film(h, scale, shift);

        let gn2 = (sess.param(p.gn2.g), sess.param(p.gn2.b));
        let h = sess.tape.group_norm(h, gn2.0, gn2.1, norm_groups(p.cout), 1e-5);
        let mut h = sess.tape.silu(h);
        if let Some(mask) = dropout_mask {
            h = sess.tape.mul_mask(h, mask);
        }
        let (w2, b2) = (sess.param(p.conv2.w), sess.param(p.conv2.b));
        let h = sess.tape.conv2d(h, w2, Some(b2), (1, 1), (1, 1), 1);

        let short = match &p.shortcut {
            Some(sc) => {
                let (w, bb) = (sess.param(sc.w), sess.param(sc.b));
                sess.tape.conv2d(x, w, Some(bb), (1, 1), (0, 0), 1)
            }
            None => x,
        };
        sess.tape.add(h, short)
    }

    fn attn_fwd(&self, sess: &mut Session, x: Var, p: &AttnP) -> Var {
        let shape = sess.tape.value(x).shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        debug_assert_eq!(c, p.width);
        let gn = (sess.param(p.gn.g), sess.param(p.gn.b));
        let hnorm = sess.tape.group_norm(x, gn.0, gn.1, norm_groups(c), 1e-5);
        let mut qkv = Vec::new();
        for conv in [&p.q, &p.k, &p.v] {
            let (wv, bv) = (sess.param(conv.w), sess.param(conv.b));
            let t = sess.tape.conv2d(hnorm, wv, Some(bv), (1, 1), (0, 0), 1);
            qkv.push(sess.tape.reshape(t, &[n, c, h * w]));
        }
        let qt = sess.tape.permute_last2(qkv[0]);
        let scores = sess.tape.bmm(qt, qkv[1]);
        let scores = sess.tape.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = sess.tape.softmax_last(scores);
        let at = sess.tape.permute_last2(attn);
        let mixed = sess.tape.bmm(qkv[2], at);
        let mixed = sess.tape.reshape(mixed, &[n, c, h, w]);
        let (pw, pb) = (sess.param(p.proj.w), sess.param(p.proj.b));
        let proj = sess.tape.conv2d(mixed, pw, Some(pb), (1, 1), (0, 0), 1);
        sess.tape.add(x, proj)
    }

    /// Skip merge used on the up path: `(skip + h) / sqrt(2)`.
    fn merge_skip(tape: &mut Tape, skip: Var, h: Var) -> Var {
        let sum = tape.add(skip, h);
        tape.scale(sum, FRAC_1_SQRT_2)
    }

    fn dropout_mask(&self, shape: &[usize], rng: &mut Option<&mut ChaCha8Rng>) -> Option<Tensor> {
        let rng = rng.as_deref_mut()?;
        let p = self.config.dropout;
        if p <= 0.0 {
            return None;
        }
        let keep = 1.0 - p;
        Some(Tensor::from_shape_simple_fn(IxDyn(shape), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        }))
    }

    /// Builds the full forward graph for a batch.
    ///
    /// `input` is `[N, 2, C, L]` (condition plane then noisy-target plane),
    /// `gammas` has length `N`. Pass a dropout rng only when training.
    pub fn forward_batch(
        &self,
        sess: &mut Session,
        input: Var,
        gammas: &[f64],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let shape = sess.tape.value(input).shape().to_vec();
        if shape.len() != 4
            || shape[0] != gammas.len()
            || shape[1] != 2
            || (shape[2], shape[3]) != self.epoch_shape
        {
            return Err(Error::shape(format!(
                "denoiser input {:?} does not match contract [N, 2, {}, {}]",
                shape, self.epoch_shape.0, self.epoch_shape.1
            )));
        }
        let n = shape[0];

        // Noise-level embedding MLP, shared by all blocks.
        let mut emb0 = Array2::zeros((n, self.config.gamma_embed_dim));
        for (i, &g) in gammas.iter().enumerate() {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::config(format!("gamma {g} outside (0, 1]")));
            }
            emb0.row_mut(i)
                .assign(&gamma_embedding(g, self.config.gamma_embed_dim)?);
        }
        let emb = sess.tape.leaf(emb0.into_dyn());
        let (w1, b1) = (
            sess.param(self.layout.emb_lin1.w),
            sess.param(self.layout.emb_lin1.b),
        );
        let emb = sess.tape.linear(emb, w1, Some(b1));
        let emb = sess.tape.silu(emb);
        let (w2, b2) = (
            sess.param(self.layout.emb_lin2.w),
            sess.param(self.layout.emb_lin2.b),
        );
        let emb = sess.tape.linear(emb, w2, Some(b2));

        let (sw, sb) = (sess.param(self.layout.stem.w), sess.param(self.layout.stem.b));
        let mut h = sess.tape.conv2d(input, sw, Some(sb), (1, 1), (1, 1), 1);

        let mut skips: Vec<Var> = Vec::with_capacity(self.config.depth);
        for stage in &self.layout.down {
            for (k, block) in stage.blocks.iter().enumerate() {
                let mask = {
                    let s = sess.tape.value(h).shape();
                    let out_shape = vec![s[0], block.cout, s[2], s[3]];
                    self.dropout_mask(&out_shape, &mut dropout_rng)
                };
                h = self.res_block_fwd(sess, h, emb, block, mask);
                if let Some(attn) = stage.attn.get(k) {
                    h = self.attn_fwd(sess, h, attn);
                }
            }
            skips.push(h);
            if let Some(pool) = &stage.down {
                let (w, bb) = (sess.param(pool.w), sess.param(pool.b));
                h = sess.tape.conv2d(h, w, Some(bb), (2, 2), (1, 1), 1);
            }
        }

        for (i, block) in [&self.layout.mid1, &self.layout.mid2].into_iter().enumerate() {
            let mask = {
                let s = sess.tape.value(h).shape().to_vec();
                self.dropout_mask(&s, &mut dropout_rng)
            };
            h = self.res_block_fwd(sess, h, emb, block, mask);
            if i == 0 {
                if let Some(attn) = &self.layout.mid_attn {
                    h = self.attn_fwd(sess, h, attn);
                }
            }
        }

        for (i, stage) in self.layout.up.iter().enumerate() {
            let skip = skips[self.config.depth - 1 - i];
            h = Self::merge_skip(&mut sess.tape, skip, h);
            for (k, block) in stage.blocks.iter().enumerate() {
                let mask = {
                    let s = sess.tape.value(h).shape().to_vec();
                    self.dropout_mask(&s, &mut dropout_rng)
                };
                h = self.res_block_fwd(sess, h, emb, block, mask);
                if let Some(attn) = stage.attn.get(k) {
                    h = self.attn_fwd(sess, h, attn);
                }
            }
            if let Some(grow) = &stage.up {
                h = sess.tape.upsample_nearest2(h);
                let (w, bb) = (sess.param(grow.w), sess.param(grow.b));
                h = sess.tape.conv2d(h, w, Some(bb), (1, 1), (1, 1), 1);
            }
        }

        let first_width = self.config.base_width * self.config.channel_multipliers[0];
        let gn = (
            sess.param(self.layout.out_gn.g),
            sess.param(self.layout.out_gn.b),
        );
        let h = sess.tape.group_norm(h, gn.0, gn.1, norm_groups(first_width), 1e-5);
        let h = sess.tape.silu(h);
        let (ow, ob) = (
            sess.param(self.layout.out_conv.w),
            sess.param(self.layout.out_conv.b),
        );
        Ok(sess.tape.conv2d(h, ow, Some(ob), (1, 1), (1, 1), 1))
    }

    /// Inference forward over a batch of `(x_delta, y_t, gamma)` triples.
    pub fn predict_many(
        &self,
        x_deltas: &[Array2<f64>],
        y_ts: &[Array2<f64>],
        gammas: &[f64],
    ) -> Result<Vec<Array2<f64>>> {
        let n = x_deltas.len();
        if y_ts.len() != n || gammas.len() != n {
            return Err(Error::shape("predict_many inputs must have equal length"));
        }
        let (c, l) = self.epoch_shape;
        let mut input = Array4::zeros((n, 2, c, l));
        for i in 0..n {
            if x_deltas[i].dim() != (c, l) || y_ts[i].dim() != (c, l) {
                return Err(Error::shape(format!(
                    "input grid {:?} does not match model shape ({c}, {l})",
                    x_deltas[i].dim()
                )));
            }
            input
                .slice_mut(ndarray::s![i, 0, .., ..])
                .assign(&x_deltas[i]);
            input.slice_mut(ndarray::s![i, 1, .., ..]).assign(&y_ts[i]);
        }
        let mut sess = Session::new(&self.store);
        let inp = sess.tape.leaf(input.into_dyn());
        let out = self.forward_batch(&mut sess, inp, gammas, None)?;
        let out = sess.tape.value(out);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let out4 = out.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        Ok((0..n)
            .map(|i| out4.slice(ndarray::s![i, 0, .., ..]).to_owned())
            .collect())
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x_delta: &Array2<f64>, y_t: &Array2<f64>, gamma: f64) -> Result<Array2<f64>> {
        Ok(self
            .predict_many(
                std::slice::from_ref(x_delta),
                std::slice::from_ref(y_t),
                &[gamma],
            )?
            .remove(0))
    }
}

/// Settings for the denoiser training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub loss_p: u8,
    /// Perturbation scale applied to the conditioning epoch during training.
    pub delta: f64,
    pub seed: u64,
    /// Record one loss-curve point every this many steps (plus the last).
    pub log_interval: usize,
    /// Invoke the checkpoint callback every this many steps (0 disables).
    pub checkpoint_interval: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 1_000_000,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 10_000,
            loss_p: 2,
            delta: 0.01,
            seed: 0,
            log_interval: 100,
            checkpoint_interval: 0,
        }
    }
}

// Stream domains for seed derivation.
const DOMAIN_BATCH: u64 = 1;
const DOMAIN_ITEM: u64 = 2;
const DOMAIN_DROPOUT: u64 = 3;

/// Trains the denoiser in place with Adam and linear warmup.
///
/// Each step draws `batch_size` epochs uniformly with replacement, samples a
/// fresh `(gamma, epsilon, delta Z)` per item, and descends on the mean
/// `|f(x_delta, y_tilde, gamma) - epsilon|^p`. Returns the recorded loss
/// curve as `(step, loss)` pairs. Aborts with [`Error::Diverged`] on a
/// non-finite loss.
pub fn train_denoiser(
    model: &mut Denoiser,
    dataset: &LabeledDataset,
    schedule: &NoiseSchedule,
    opts: &TrainOptions,
    adam: &mut Adam,
    start_step: usize,
    mut on_checkpoint: impl FnMut(&Denoiser, &Adam, usize) -> Result<()>,
) -> Result<Vec<(usize, f64)>> {
    if dataset.is_empty() {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    let (c, l) = dataset.epoch_shape().unwrap();
    if (c, l) != model.epoch_shape() {
        return Err(Error::shape(format!(
            "dataset epochs are {c}x{l}, model expects {:?}",
            model.epoch_shape()
        )));
    }
    if opts.loss_p != 1 && opts.loss_p != 2 {
        return Err(Error::config("loss_p must be 1 or 2"));
    }
    let n = opts.batch_size.max(1);
    let mut curve = Vec::new();

    for step in start_step..opts.steps {
        let mut pick = rng::stream2(opts.seed, DOMAIN_BATCH, step as u64);
        let indices: Vec<usize> = (0..n)
            .map(|_| pick.random_range(0..dataset.len()))
            .collect();

        // Per-(step, slot) streams keep the batch reproducible under any
        // parallel schedule.
        let items: Vec<diffusion::DiffusionTrainingItem> = indices
            .iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let epoch = &dataset.epochs()[idx];
                let pair = diffusion::ConditionPair::new(
                    epoch.clone(),
                    epoch.clone(),
                    dataset.labels()[idx],
                    opts.delta,
                )?;
                let mut item_rng = rng::stream2(
                    rng::derive_seed(opts.seed, DOMAIN_ITEM),
                    step as u64,
                    slot as u64,
                );
                diffusion::DiffusionTrainingItem::sample(&pair, schedule, &mut item_rng)
            })
            .collect::<Result<_>>()?;

        let mut input = Array4::zeros((n, 2, c, l));
        let mut target = Array4::zeros((n, 1, c, l));
        let mut gammas = Vec::with_capacity(n);
        for (i, item) in items.iter().enumerate() {
            input
                .slice_mut(ndarray::s![i, 0, .., ..])
                .assign(&item.x_delta.data);
            input
                .slice_mut(ndarray::s![i, 1, .., ..])
                .assign(&item.y_tilde.data);
            target
                .slice_mut(ndarray::s![i, 0, .., ..])
                .assign(&item.epsilon.data);
            gammas.push(item.gamma);
        }

        let mut dropout_rng = rng::stream2(opts.seed, DOMAIN_DROPOUT, step as u64);
        let mut sess = Session::new(model.store());
        let inp = sess.tape.leaf(input.into_dyn());
        let pred = model.forward_batch(&mut sess, inp, &gammas, Some(&mut dropout_rng))?;
        let root = sess.tape.pnorm_loss(pred, target.into_dyn(), opts.loss_p);
        let loss = sess.tape.scalar(root);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grads = sess.param_grads(root)?;
        drop(sess);
        adam.apply(model.store_mut(), &grads);

        if step % opts.log_interval.max(1) == 0 || step + 1 == opts.steps {
            curve.push((step, loss));
        }
        if opts.checkpoint_interval > 0
            && (step + 1) % opts.checkpoint_interval == 0
            && step + 1 != opts.steps
        {
            on_checkpoint(model, adam, step + 1)?;
        }
    }
    Ok(curve)
}

/// Writes a loss curve as `step,loss` CSV.
pub fn write_loss_curve(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (step, loss) in curve {
        out.push_str(&format!("{step},{loss}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: DenoiserConfig,
    epoch_shape: (usize, usize),
    diffusion: DiffusionConfig,
    step: usize,
    seed: u64,
    params: Vec<TensorIndexEntry>,
    optimizer: Option<Vec<TensorIndexEntry>>,
}

/// A loaded checkpoint: the model plus its training bookkeeping.
pub struct Checkpoint {
    pub denoiser: Denoiser,
    pub diffusion: DiffusionConfig,
    pub step: usize,
    pub seed: u64,
    optimizer_blob: Option<Vec<u8>>,
    optimizer_index: Option<Vec<TensorIndexEntry>>,
}

impl Checkpoint {
    /// Restores saved optimizer state into `adam`; true when state existed.
    pub fn restore_optimizer(&self, adam: &mut Adam) -> Result<bool> {
        match (&self.optimizer_blob, &self.optimizer_index) {
            (Some(blob), Some(index)) => {
                adam.load_blob(blob, index)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }
}

/// Persists weights (and optionally optimizer state) to `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &Denoiser,
    diffusion: &DiffusionConfig,
    adam: Option<&Adam>,
    step: usize,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (blob, params) = model.store.to_blob();
    fs::write(dir.join("weights.bin"), &blob)?;
    let optimizer = match adam {
        Some(a) => {
            let (oblob, oindex) = a.to_blob();
            fs::write(dir.join("optimizer.bin"), &oblob)?;
            Some(oindex)
        }
        None => None,
    };
    let meta = CheckpointMeta {
        config: model.config.clone(),
        epoch_shape: model.epoch_shape,
        diffusion: diffusion.clone(),
        step,
        seed,
        params,
        optimizer,
    };
    fs::write(
        dir.join("checkpoint.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

/// Loads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta: CheckpointMeta =
        serde_json::from_str(&fs::read_to_string(dir.join("checkpoint.json"))?)?;
    let mut denoiser = Denoiser::build(meta.config.clone(), meta.epoch_shape, meta.seed)?;
    let blob = fs::read(dir.join("weights.bin"))?;
    denoiser.store.load_blob(&blob, &meta.params)?;
    let (optimizer_blob, optimizer_index) = match meta.optimizer {
        Some(index) => (Some(fs::read(dir.join("optimizer.bin"))?), Some(index)),
        None => (None, None),
    };
    Ok(Checkpoint {
        denoiser,
        diffusion: meta.diffusion,
        step: meta.step,
        seed: meta.seed,
        optimizer_blob,
        optimizer_index,
    })
}

/// Generates synthetic epochs for a batch of conditions.
///
/// Epoch `i` draws every random quantity from the stream `(seed, i)`, so the
/// result is independent of batching and worker count, and identical to
/// calling [`diffusion::generate`] per epoch with that stream.
pub fn generate_many(
    model: &Denoiser,
    conditions: &[EegEpoch],
    delta: f64,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<EegEpoch>> {
    if steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    let grid;
    let sched = if steps == schedule.t_max() {
        schedule
    } else {
        grid = schedule.regrid(steps)?;
        &grid
    };
    let m = conditions.len();
    let mut out = Vec::with_capacity(m);
    const CHUNK: usize = 16;
    for (chunk_idx, chunk) in conditions.chunks(CHUNK).enumerate() {
        let base = chunk_idx * CHUNK;
        let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
            .map(|i| rng::stream(seed, (base + i) as u64))
            .collect();
        let mut x_deltas = Vec::with_capacity(chunk.len());
        let mut ys: Vec<Array2<f64>> = Vec::with_capacity(chunk.len());
        for (i, cond) in chunk.iter().enumerate() {
            if cond.shape() != model.epoch_shape() {
                return Err(Error::shape("condition shape differs from model"));
            }
            let xd = diffusion::augment_condition(cond, delta, &mut rngs[i])?;
            x_deltas.push(xd.data);
            ys.push(diffusion::standard_normal_like(cond, &mut rngs[i]).data);
        }
        for t in (1..=sched.t_max()).rev() {
            let gamma_t = sched.gamma(t);
            let alpha_t = sched.alpha(t);
            let gammas = vec![gamma_t; chunk.len()];
            let eps_hats = model.predict_many(&x_deltas, &ys, &gammas)?;
            for (i, eps_hat) in eps_hats.into_iter().enumerate() {
                let mut next = diffusion::refinement_mean(&ys[i], &eps_hat, alpha_t, gamma_t);
                if t > 1 {
                    let sigma = (1.0 - alpha_t).sqrt();
                    let noise = diffusion::standard_normal_like(&chunk[i], &mut rngs[i]).data;
                    next = next + noise * sigma;
                }
                ys[i] = next;
            }
        }
        for y in ys {
            out.push(EegEpoch::new(y)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;
    use approx::assert_relative_eq;

    #[test]
    fn attention_triggers_at_small_stages() {
        let cfg = DenoiserConfig::default();
        // (32, 128) with depth 4: stages (32,128), (16,64), (8,32), (4,16);
        // only the bottleneck fits inside 16x16.
        assert_eq!(
            cfg.attention_stages((32, 128)),
            vec![false, false, false, true]
        );
        let one = DenoiserConfig {
            depth: 1,
            channel_multipliers: vec![1],
            ..DenoiserConfig::default()
        };
        assert_eq!(one.attention_stages((32, 128)), vec![false]);
        // A 16x16 input attends already at the first stage.
        assert_eq!(one.attention_stages((16, 16)), vec![true]);
    }

    #[test]
    fn build_validates_divisibility() {
        let cfg = DenoiserConfig::default();
        assert!(Denoiser::build(cfg.clone(), (32, 128), 0).is_ok());
        assert!(Denoiser::build(cfg.clone(), (30, 128), 0).is_err());
        let bad = DenoiserConfig {
            channel_multipliers: vec![1, 2],
            ..cfg
        };
        assert!(Denoiser::build(bad, (32, 128), 0).is_err());
    }

    #[test]
    fn param_count_is_deterministic() {
        let cfg = DenoiserConfig::toy();
        let a = Denoiser::build(cfg.clone(), (2, 64), 0).unwrap();
        let b = Denoiser::build(cfg, (2, 64), 99).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert!(a.param_count() > 0);
    }

    #[test]
    fn gamma_embedding_bounds_and_injectivity() {
        assert!(gamma_embedding(0.5, 7).is_err());
        let e = gamma_embedding(1.0, 16).unwrap();
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(e, gamma_embedding(1.0, 16).unwrap());

        // Sweep 10^4 gamma values; embeddings of distinct levels must differ.
        let n = 10_000;
        let embs: Vec<Array1<f64>> = (1..=n)
            .map(|i| gamma_embedding(i as f64 / n as f64, 16).unwrap())
            .collect();
        for w in embs.windows(2) {
            let max_diff = w[0]
                .iter()
                .zip(w[1].iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff > 1e-9);
        }
    }

    #[test]
    fn forward_shape_and_finiteness() {
        let model = Denoiser::build(DenoiserConfig::toy(), (2, 64), 0).unwrap();
        let x = Array2::zeros((2, 64));
        let y = Array2::zeros((2, 64));
        let out = model.predict(&x, &y, 0.5).unwrap();
        assert_eq!(out.dim(), (2, 64));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deap_shaped_forward_smoke() {
        let cfg = DenoiserConfig {
            base_width: 8,
            blocks_per_stage: 1,
            gamma_embed_dim: 32,
            ..DenoiserConfig::default()
        };
        let model = Denoiser::build(cfg, (32, 128), 0).unwrap();
        assert_eq!(model.attention_flags(), &[false, false, false, true]);
        let x = Array2::zeros((32, 128));
        let out = model.predict(&x, &x, 0.3).unwrap();
        assert_eq!(out.dim(), (32, 128));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn output_depends_on_gamma() {
        let mut model = Denoiser::build(DenoiserConfig::toy(), (2, 16), 0).unwrap();
        model.randomize_parameters(0.05, 7);
        let mut r = crate::rng::stream(1, 2);
        let x = diffusion::standard_normal_like(&EegEpoch::zeros(2, 16), &mut r).data;
        let y = diffusion::standard_normal_like(&EegEpoch::zeros(2, 16), &mut r).data;
        let a = model.predict(&x, &y, 0.1).unwrap();
        let b = model.predict(&x, &y, 0.9).unwrap();
        let diff = (&a - &b).mapv(f64::abs).sum();
        assert!(diff > 1e-9, "gamma had no effect (diff {diff})");
    }

    #[test]
    fn skip_merge_scaling() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_elem(IxDyn(&[1, 2, 2, 2]), 3.0));
        let b = tape.leaf(Tensor::from_elem(IxDyn(&[1, 2, 2, 2]), 1.0));
        let merged = Denoiser::merge_skip(&mut tape, a, b);
        for v in tape.value(merged).iter() {
            assert_relative_eq!(*v, 4.0 * FRAC_1_SQRT_2, max_relative = 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Denoiser::build(DenoiserConfig::toy(), (2, 16), 3).unwrap();
        model.randomize_parameters(0.1, 5);
        let diff_cfg = DiffusionConfig {
            t: 32,
            inference_steps: 8,
            ..DiffusionConfig::default()
        };
        let adam = Adam::new(model.store(), 1e-3, 10);
        save_checkpoint(dir.path(), &model, &diff_cfg, Some(&adam), 17, 3).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.step, 17);
        assert_eq!(ck.diffusion, diff_cfg);

        let mut r = crate::rng::stream(2, 2);
        let x = diffusion::standard_normal_like(&EegEpoch::zeros(2, 16), &mut r).data;
        let y = diffusion::standard_normal_like(&EegEpoch::zeros(2, 16), &mut r).data;
        let a = model.predict(&x, &y, 0.4).unwrap();
        let b = ck.denoiser.predict(&x, &y, 0.4).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    fn one_epoch_dataset() -> LabeledDataset {
        let mut r = crate::rng::stream(21, 0);
        let mut d = LabeledDataset::new(
            crate::dataset::TargetName::Arousal,
            16.0,
            vec!["a".into(), "b".into()],
        );
        let e = diffusion::standard_normal_like(&EegEpoch::zeros(2, 8), &mut r);
        d.push(e, 0, 0, crate::dataset::Provenance::Real).unwrap();
        d
    }

    #[test]
    fn overfit_single_sample() {
        let dataset = one_epoch_dataset();
        let schedule = NoiseSchedule::linear(16, 0.02, 0.4, 1.0).unwrap();
        let cfg = DenoiserConfig {
            base_width: 8,
            depth: 1,
            channel_multipliers: vec![1],
            blocks_per_stage: 1,
            attention_resolution: 16,
            dropout: 0.0,
            gamma_embed_dim: 16,
        };
        let mut model = Denoiser::build(cfg, (2, 8), 0).unwrap();
        let opts = TrainOptions {
            steps: 200,
            batch_size: 4,
            lr: 2e-3,
            warmup_steps: 20,
            log_interval: 10,
            delta: 0.0,
            ..TrainOptions::default()
        };
        let mut adam = Adam::new(model.store(), opts.lr, opts.warmup_steps);
        let curve = train_denoiser(
            &mut model,
            &dataset,
            &schedule,
            &opts,
            &mut adam,
            0,
            |_, _, _| Ok(()),
        )
        .unwrap();
        let first = curve.first().unwrap().1;
        let last = curve.last().unwrap().1;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let dataset = one_epoch_dataset();
        let schedule = NoiseSchedule::linear(16, 0.02, 0.4, 1.0).unwrap();
        let cfg = DenoiserConfig {
            base_width: 8,
            depth: 1,
            channel_multipliers: vec![1],
            blocks_per_stage: 1,
            attention_resolution: 16,
            dropout: 0.1,
            gamma_embed_dim: 16,
        };
        let opts = TrainOptions {
            steps: 30,
            batch_size: 2,
            log_interval: 1,
            seed: 9,
            ..TrainOptions::default()
        };
        let run = || {
            let mut model = Denoiser::build(cfg.clone(), (2, 8), 1).unwrap();
            let mut adam = Adam::new(model.store(), opts.lr, opts.warmup_steps);
            train_denoiser(
                &mut model,
                &dataset,
                &schedule,
                &opts,
                &mut adam,
                0,
                |_, _, _| Ok(()),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for ((s1, l1), (s2, l2)) in a.iter().zip(b.iter()) {
            assert_eq!(s1, s2);
            assert_eq!(l1.to_bits(), l2.to_bits());
        }
    }

    #[test]
    fn generate_many_matches_per_epoch_generate() {
        let mut model = Denoiser::build(DenoiserConfig::toy(), (2, 16), 0).unwrap();
        model.randomize_parameters(0.02, 3);
        let schedule = NoiseSchedule::linear(8, 0.05, 0.5, 1.0).unwrap();
        let mut r = crate::rng::stream(14, 0);
        let conds: Vec<EegEpoch> = (0..3)
            .map(|_| diffusion::standard_normal_like(&EegEpoch::zeros(2, 16), &mut r))
            .collect();
        let batch = generate_many(&model, &conds, 0.01, &schedule, 8, 42).unwrap();
        for (i, cond) in conds.iter().enumerate() {
            let single = diffusion::generate(
                &model,
                cond,
                0.01,
                &schedule,
                8,
                &mut rng::stream(42, i as u64),
            )
            .unwrap();
            for (a, b) in batch[i].data.iter().zip(single.data.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "epoch {i}");
            }
        }
    }
}
