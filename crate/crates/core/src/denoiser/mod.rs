//! The conditional denoiser: a small dense U-Net that sees the noisy target
//! concatenated with the degraded condition and is told the noise level
//! through an embedding of `γ`.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{
    init_denoiser, read_checkpoint, write_checkpoint, AdamState, DenoiserCheckpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, GradCheckBatch, GradCheckReport};

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RngStream;
use crate::nn::{Float, Graph, NodeId, ParamId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    #[default]
    X0,
    Epsilon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks_per_scale: usize,
    /// Downsampling factors (1, 2, 4, ...) whose levels get self-attention.
    pub attention_scales: BTreeSet<usize>,
    pub gamma_embed_dim: usize,
    /// Upper bound on GroupNorm groups; the actual count is `gcd(norm_groups, channels)`.
    pub norm_groups: usize,
    pub prediction_target: PredictionTarget,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            out_channels: 3,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            num_res_blocks_per_scale: 2,
            attention_scales: BTreeSet::from([4]),
            gamma_embed_dim: 128,
            norm_groups: 8,
            prediction_target: PredictionTarget::X0,
        }
    }
}

impl DenoiserConfig {
    /// Network for `channels`-channel images, other fields at their defaults.
    pub fn for_channels(channels: usize) -> Self {
        Self {
            in_channels: 2 * channels,
            out_channels: channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.out_channels == 0 || self.in_channels != 2 * self.out_channels {
            return fail(format!(
                "in_channels ({}) must be twice out_channels ({})",
                self.in_channels, self.out_channels
            ));
        }
        if self.base_channels == 0 || self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return fail("base_channels and channel_multipliers must be positive".into());
        }
        if self.gamma_embed_dim < 2 || self.gamma_embed_dim % 2 != 0 {
            return fail(format!("gamma_embed_dim must be even and >= 2, got {}", self.gamma_embed_dim));
        }
        if self.norm_groups == 0 {
            return fail("norm_groups must be positive".into());
        }
        let levels = self.channel_multipliers.len();
        for &s in &self.attention_scales {
            if !s.is_power_of_two() || s.trailing_zeros() as usize >= levels {
                return fail(format!("attention scale {s} is not one of the U-Net's downsampling factors"));
            }
        }
        Ok(())
    }

    /// Factor by which input height and width must be divisible.
    pub fn total_downsampling(&self) -> usize {
        1 << (self.channel_multipliers.len() - 1)
    }

    pub fn image_channels(&self) -> usize {
        self.out_channels
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    k: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
    groups: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Conv,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: Norm,
    qkv: Conv,
    proj: Conv,
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<(ResBlock, Option<AttnBlock>)>,
    resample: Option<Conv>,
}

struct Builder {
    specs: Vec<ParamSpec>,
    norm_groups: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.specs.push(ParamSpec { name, shape, init });
        ParamId(self.specs.len() - 1)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Conv {
        let init = if zero { Init::Zeros } else { Init::FanIn(cin * k * k) };
        let w = self.param(format!("{name}.weight"), vec![cout, cin, k, k], init);
        let b = self.param(format!("{name}.bias"), vec![cout], Init::Zeros);
        Conv { w, b, k, stride }
    }

    fn norm(&mut self, name: &str, ch: usize) -> Norm {
        let g = self.param(format!("{name}.weight"), vec![ch], Init::Ones);
        let b = self.param(format!("{name}.bias"), vec![ch], Init::Zeros);
        Norm {
            g,
            b,
            groups: gcd(self.norm_groups, ch),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, emb_dim: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false),
            emb: self.conv(&format!("{name}.emb"), emb_dim, cout, 1, 1, false),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)),
        }
    }

    fn attn(&mut self, name: &str, ch: usize) -> AttnBlock {
        AttnBlock {
            norm: self.norm(&format!("{name}.norm"), ch),
            qkv: self.conv(&format!("{name}.qkv"), ch, 3 * ch, 1, 1, false),
            proj: self.conv(&format!("{name}.proj"), ch, ch, 1, 1, false),
        }
    }
}

/// Static wiring of the U-Net; parameters are referenced by index into the
/// checkpoint's parameter list.
#[derive(Debug, Clone)]
pub struct UNet {
    config: DenoiserConfig,
    specs: Vec<ParamSpec>,
    embed1: Conv,
    embed2: Conv,
    conv_in: Conv,
    down: Vec<Stage>,
    mid: (ResBlock, Option<AttnBlock>, ResBlock),
    up: Vec<Stage>,
    out_norm: Norm,
    out_conv: Conv,
}

impl UNet {
    pub fn new(config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut bld = Builder {
            specs: Vec::new(),
            norm_groups: config.norm_groups,
        };
        let base = config.base_channels;
        let emb_dim = 4 * base;
        let embed1 = bld.conv("gamma_embed.0", config.gamma_embed_dim, emb_dim, 1, 1, false);
        let embed2 = bld.conv("gamma_embed.1", emb_dim, emb_dim, 1, 1, false);
        let conv_in = bld.conv("conv_in", config.in_channels, base, 3, 1, false);

        let levels = config.channel_multipliers.len();
        let nres = config.num_res_blocks_per_scale;
        let mut skip_channels = vec![base];
        let mut ch = base;
        let mut down = Vec::with_capacity(levels);
        for (lvl, &mult) in config.channel_multipliers.iter().enumerate() {
            let attn_here = config.attention_scales.contains(&(1 << lvl));
            let mut blocks = Vec::new();
            for j in 0..nres {
                let name = format!("down.{lvl}.{j}");
                let res = bld.res(&format!("{name}.res"), ch, mult * base, emb_dim);
                ch = mult * base;
                let attn = attn_here.then(|| bld.attn(&format!("{name}.attn"), ch));
                blocks.push((res, attn));
                skip_channels.push(ch);
            }
            let resample = (lvl + 1 < levels).then(|| {
                skip_channels.push(ch);
                bld.conv(&format!("down.{lvl}.downsample"), ch, ch, 3, 2, false)
            });
            down.push(Stage { blocks, resample });
        }

        let mid_attn = config.attention_scales.contains(&(1 << (levels - 1)));
        let mid = (
            bld.res("mid.res1", ch, ch, emb_dim),
            mid_attn.then(|| bld.attn("mid.attn", ch)),
            bld.res("mid.res2", ch, ch, emb_dim),
        );

        let mut up = Vec::with_capacity(levels);
        for (lvl, &mult) in config.channel_multipliers.iter().enumerate().rev() {
            let attn_here = config.attention_scales.contains(&(1 << lvl));
            let mut blocks = Vec::new();
            for j in 0..=nres {
                let name = format!("up.{lvl}.{j}");
                let skip = skip_channels.pop().expect("skip bookkeeping");
                let res = bld.res(&format!("{name}.res"), ch + skip, mult * base, emb_dim);
                ch = mult * base;
                let attn = attn_here.then(|| bld.attn(&format!("{name}.attn"), ch));
                blocks.push((res, attn));
            }
            let resample = (lvl > 0).then(|| bld.conv(&format!("up.{lvl}.upsample"), ch, ch, 3, 1, false));
            up.push(Stage { blocks, resample });
        }
        debug_assert!(skip_channels.is_empty());

        let out_norm = bld.norm("out.norm", ch);
        let out_conv = bld.conv("out.conv", ch, config.out_channels, 3, 1, true);
        Ok(Self {
            config: config.clone(),
            specs: bld.specs,
            embed1,
            embed2,
            conv_in,
            down,
            mid,
            up,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Fan-in scaled uniform weights, zero biases, unit norm gains and a
    /// zero output head. Each tensor draws from its own child stream.
    pub fn init_params(&self, rng: RngStream) -> Vec<Vec<f32>> {
        self.specs
            .iter()
            .enumerate()
            .map(|(i, spec)| match spec.init {
                Init::Zeros => vec![0.0; spec.numel()],
                Init::Ones => vec![1.0; spec.numel()],
                Init::FanIn(fan_in) => {
                    let bound = (3.0 / fan_in as f64).sqrt();
                    let mut r = rng.child(i as u64).rng();
                    (0..spec.numel()).map(|_| r.random_range(-bound..bound) as f32).collect()
                }
            })
            .collect()
    }

    /// Index of the output head's bias, for closed-form checks.
    pub fn head_bias(&self) -> ParamId {
        self.out_conv.b
    }

    pub fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        let f = self.config.total_downsampling();
        if c != self.config.out_channels {
            return Err(Error::Shape(format!(
                "network expects {} channels, got {c}",
                self.config.out_channels
            )));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible by the U-Net factor {f}")));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. `noisy` and `cond` are `C × B × H × W`
    /// in model range; `gammas` has one entry per batch item.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, noisy: NodeId, cond: NodeId, gammas: &[f64]) -> NodeId {
        let feats = g.input(gamma_features(gammas, self.config.gamma_embed_dim));
        let e = conv(g, feats, self.embed1);
        let e = g.silu(e);
        let e = conv(g, e, self.embed2);
        let emb = g.silu(e);

        let x = g.concat(noisy, cond);
        let mut h = conv(g, x, self.conv_in);
        let mut skips = vec![h];
        for stage in &self.down {
            for (res, attn) in &stage.blocks {
                h = res_block(g, h, emb, res);
                if let Some(a) = attn {
                    h = attn_block(g, h, a);
                }
                skips.push(h);
            }
            if let Some(ds) = stage.resample {
                h = conv(g, h, ds);
                skips.push(h);
            }
        }
        h = res_block(g, h, emb, &self.mid.0);
        if let Some(a) = &self.mid.1 {
            h = attn_block(g, h, a);
        }
        h = res_block(g, h, emb, &self.mid.2);
        for stage in &self.up {
            for (res, attn) in &stage.blocks {
                let skip = skips.pop().expect("skip bookkeeping");
                let cat = g.concat(h, skip);
                h = res_block(g, cat, emb, res);
                if let Some(a) = attn {
                    h = attn_block(g, h, a);
                }
            }
            if let Some(us) = stage.resample {
                let u = g.upsample2x(h);
                h = conv(g, u, us);
            }
        }
        let n = norm(g, h, self.out_norm);
        let n = g.silu(n);
        conv(g, n, self.out_conv)
    }

    /// Inference-only forward in `f32`.
    pub fn predict(&self, params: &[Vec<f32>], noisy: &Tensor<f32>, cond: &Tensor<f32>, gammas: &[f64]) -> Result<Tensor<f32>> {
        self.check_pair(noisy, cond, gammas)?;
        let mut g = Graph::new(params);
        let a = g.input(noisy.clone());
        let b = g.input(cond.clone());
        let out = self.forward(&mut g, a, b, gammas);
        let out = g.into_value(out);
        if !out.all_finite() {
            return Err(Error::Numeric("denoiser produced a non-finite output".into()));
        }
        Ok(out)
    }

    pub(crate) fn check_pair<F: Float>(&self, noisy: &Tensor<F>, cond: &Tensor<F>, gammas: &[f64]) -> Result<()> {
        if noisy.shape() != cond.shape() {
            return Err(Error::Shape(format!(
                "noisy {:?} and condition {:?} differ",
                noisy.shape(),
                cond.shape()
            )));
        }
        if gammas.len() != noisy.b {
            return Err(Error::Shape(format!("{} gammas for batch of {}", gammas.len(), noisy.b)));
        }
        if let Some(bad) = gammas.iter().find(|&&gm| !(gm > 0.0 && gm <= 1.0)) {
            return Err(Error::Parameter(format!("gamma {bad} outside (0, 1]")));
        }
        self.check_input(noisy.c, noisy.h, noisy.w)
    }
}

fn conv<F: Float>(g: &mut Graph<F>, x: NodeId, c: Conv) -> NodeId {
    g.conv2d(x, c.w, c.b, c.k, c.stride, c.k / 2)
}

fn norm<F: Float>(g: &mut Graph<F>, x: NodeId, n: Norm) -> NodeId {
    g.group_norm(x, n.g, n.b, n.groups)
}

fn res_block<F: Float>(g: &mut Graph<F>, x: NodeId, emb: NodeId, r: &ResBlock) -> NodeId {
    let h = norm(g, x, r.norm1);
    let h = g.silu(h);
    let h = conv(g, h, r.conv1);
    let e = conv(g, emb, r.emb);
    let h = g.add_broadcast(h, e);
    let h = norm(g, h, r.norm2);
    let h = g.silu(h);
    let h = conv(g, h, r.conv2);
    let skip = match r.skip {
        Some(s) => conv(g, x, s),
        None => x,
    };
    g.add(h, skip)
}

fn attn_block<F: Float>(g: &mut Graph<F>, x: NodeId, a: &AttnBlock) -> NodeId {
    let h = norm(g, x, a.norm);
    let qkv = conv(g, h, a.qkv);
    let h = g.attention(qkv);
    let h = conv(g, h, a.proj);
    g.add(x, h)
}

/// Sinusoidal features of `-ln γ` (scaled so the training range spans a few
/// hundred units), laid out `dim × B × 1 × 1`.
pub fn gamma_features<F: Float>(gammas: &[f64], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let b = gammas.len();
    let mut t = Tensor::zeros(dim, b, 1, 1);
    for (bi, &gm) in gammas.iter().enumerate() {
        let u = -gm.ln() * 100.0;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            t.data[i * b + bi] = F::of((u * freq).sin());
            t.data[(half + i) * b + bi] = F::of((u * freq).cos());
        }
    }
    t
}

/// Mean `|f − target|^p` and its gradient with respect to every parameter.
pub fn loss_and_grad<F: Float>(
    net: &UNet,
    params: &[Vec<F>],
    noisy: &Tensor<F>,
    cond: &Tensor<F>,
    gammas: &[f64],
    target: &Tensor<F>,
    p_norm: u8,
) -> Result<(f64, Vec<Vec<F>>)> {
    net.check_pair(noisy, cond, gammas)?;
    let mut g = Graph::new(params);
    let a = g.input(noisy.clone());
    let b = g.input(cond.clone());
    let out = net.forward(&mut g, a, b, gammas);
    let pred = g.value(out);
    if !pred.all_finite() {
        return Err(Error::Numeric("denoiser produced a non-finite output".into()));
    }
    let (loss, seed) = lp_loss(pred, target, p_norm)?;
    let grads = g.backward(out, seed);
    Ok((loss, grads))
}

/// `mean |pred − target|^p` and `∂/∂pred`.
pub fn lp_loss<F: Float>(pred: &Tensor<F>, target: &Tensor<F>, p_norm: u8) -> Result<(f64, Tensor<F>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let n = pred.len() as f64;
    let scale = F::of(1.0 / n);
    let mut seed = Tensor::zeros(pred.c, pred.b, pred.h, pred.w);
    let mut total = 0.0f64;
    for ((d, &p), &t) in seed.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let r = p - t;
        match p_norm {
            1 => {
                total += r.abs().f64();
                *d = if r > F::zero() {
                    scale
                } else if r < F::zero() {
                    -scale
                } else {
                    F::zero()
                };
            }
            2 => {
                total += (r * r).f64();
                *d = F::of(2.0) * r * scale;
            }
            other => return Err(Error::Config(format!("p_norm must be 1 or 2, got {other}"))),
        }
    }
    Ok((total / n, seed))
}
