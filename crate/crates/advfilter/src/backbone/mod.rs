//! Denoising network backbones: the 8-block encoder–decoder (U shape), the
//! dual-decoder Y shape, the four-head variant, and the output heads.
//!
//! Topology: 5 encoder blocks (3 convs each, the last conv of blocks 2–5 has
//! stride 2, giving a ×16 bottleneck) and 3 decoder blocks (nearest ×2
//! upsample, skip concat, 3 convs). Decoder block i concatenates encoder
//! block (6−i)'s pre-downsample features. The output head performs the final
//! ×2 upsample followed by one 3×3 conv to the head's channel count.

pub mod checkpoint;

use crate::error::{Error, Result};
use crate::filtering;
use crate::imaging::ImageTensor;
use crate::nn::conv::Conv2d;
use crate::nn::ops::{
    concat_channels, relu_backward, relu_forward, split_channels, upsample2x_backward,
    upsample2x_forward,
};
use crate::nn::{fingerprint_params, seed_rng, Param, Tensor};
use rand_chacha::ChaCha8Rng;

pub const ENCODER_BLOCKS: usize = 5;
pub const DECODER_BLOCKS: usize = 3;
pub const DOWNSAMPLE_FACTOR: usize = 16;

/// Channel plan and structural constants of the 8-block backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub bottleneck_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // bottleneck 128 for 32x32 inputs (512 at 224-scale)
        BackboneConfig {
            base_channels: 32,
            bottleneck_channels: 128,
        }
    }
}

impl BackboneConfig {
    /// Encoder output channels per block: base doubling, capped at the
    /// bottleneck width.
    pub fn encoder_channels(&self) -> [usize; ENCODER_BLOCKS] {
        let b = self.base_channels;
        let cap = self.bottleneck_channels;
        [
            b.min(cap),
            (2 * b).min(cap),
            (4 * b).min(cap),
            (8 * b).min(cap),
            cap,
        ]
    }

    /// Decoder output channels mirror encoder blocks 4, 3, 2.
    pub fn decoder_channels(&self) -> [usize; DECODER_BLOCKS] {
        let e = self.encoder_channels();
        [e[3], e[2], e[1]]
    }
}

/// Output-head kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Additive,
    Filtering,
}

/// Output-head configuration; `filter_size` is K for filtering heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub filter_size: usize,
}

pub const DEFAULT_FILTER_SIZE: usize = 5;

impl HeadConfig {
    pub fn additive() -> Self {
        HeadConfig {
            kind: HeadKind::Additive,
            filter_size: 0,
        }
    }

    pub fn filtering(k: usize) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::Config(format!("filter size {k} must be odd")));
        }
        Ok(HeadConfig {
            kind: HeadKind::Filtering,
            filter_size: k,
        })
    }

    pub fn output_channels(&self) -> usize {
        match self.kind {
            HeadKind::Additive => 3,
            HeadKind::Filtering => 3 * self.filter_size * self.filter_size,
        }
    }
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct EncBlock {
    convs: [Conv2d; 3],
}

struct EncActs {
    x: Tensor,
    h1: Tensor,
    /// Pre-downsample features (skip source).
    h2: Tensor,
    out: Tensor,
}

impl EncBlock {
    fn new(name: &str, in_c: usize, out_c: usize, downsample: bool, rng: &mut ChaCha8Rng) -> Self {
        let s = if downsample { 2 } else { 1 };
        EncBlock {
            convs: [
                Conv2d::new(&format!("{name}.c0"), in_c, out_c, 3, 1, 1, rng),
                Conv2d::new(&format!("{name}.c1"), out_c, out_c, 3, 1, 1, rng),
                Conv2d::new(&format!("{name}.c2"), out_c, out_c, 3, s, 1, rng),
            ],
        }
    }

    fn forward(&self, x: &Tensor) -> EncActs {
        let h1 = relu_forward(&self.convs[0].forward(x));
        let h2 = relu_forward(&self.convs[1].forward(&h1));
        let out = relu_forward(&self.convs[2].forward(&h2));
        EncActs {
            x: x.clone(),
            h1,
            h2,
            out,
        }
    }

    /// `d_h2_extra` carries the skip-connection gradient into the
    /// pre-downsample features.
    fn backward(&mut self, acts: &EncActs, dout: &Tensor, d_h2_extra: Option<&Tensor>) -> Tensor {
        let d = relu_backward(&acts.out, dout);
        let mut dh2 = self.convs[2].backward(&acts.h2, &d);
        if let Some(extra) = d_h2_extra {
            for (a, b) in dh2.data.iter_mut().zip(&extra.data) {
                *a += *b;
            }
        }
        let dh2 = relu_backward(&acts.h2, &dh2);
        let dh1 = self.convs[1].backward(&acts.h1, &dh2);
        let dh1 = relu_backward(&acts.h1, &dh1);
        self.convs[0].backward(&acts.x, &dh1)
    }

    fn params(&self) -> Vec<&Param> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

#[derive(Debug, Clone)]
struct DecBlock {
    convs: [Conv2d; 3],
}

struct DecActs {
    /// Upsampled-and-concatenated input.
    x: Tensor,
    h1: Tensor,
    h2: Tensor,
    out: Tensor,
}

impl DecBlock {
    fn new(name: &str, in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        DecBlock {
            convs: [
                Conv2d::new(&format!("{name}.c0"), in_c, out_c, 3, 1, 1, rng),
                Conv2d::new(&format!("{name}.c1"), out_c, out_c, 3, 1, 1, rng),
                Conv2d::new(&format!("{name}.c2"), out_c, out_c, 3, 1, 1, rng),
            ],
        }
    }

    fn forward(&self, x: Tensor) -> DecActs {
        let h1 = relu_forward(&self.convs[0].forward(&x));
        let h2 = relu_forward(&self.convs[1].forward(&h1));
        let out = relu_forward(&self.convs[2].forward(&h2));
        DecActs { x, h1, h2, out }
    }

    fn backward(&mut self, acts: &DecActs, dout: &Tensor) -> Tensor {
        let d = relu_backward(&acts.out, dout);
        let dh2 = self.convs[2].backward(&acts.h2, &d);
        let dh2 = relu_backward(&acts.h2, &dh2);
        let dh1 = self.convs[1].backward(&acts.h1, &dh2);
        let dh1 = relu_backward(&acts.h1, &dh1);
        self.convs[0].backward(&acts.x, &dh1)
    }

    fn params(&self) -> Vec<&Param> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

#[derive(Debug, Clone)]
struct Head {
    conv: Conv2d,
}

struct HeadActs {
    up: Tensor,
}

impl Head {
    fn new(name: &str, in_c: usize, cfg: HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut conv = Conv2d::new(&format!("{name}.c"), in_c, cfg.output_channels(), 3, 1, 1, rng);
        if cfg.kind == HeadKind::Filtering {
            // identity-leaning start: center tap logit dominant, so the
            // untrained filter roughly passes the image through
            let k = cfg.filter_size;
            let center = (k / 2) * k + k / 2;
            for c in 0..3 {
                conv.bias.data[c * k * k + center] = 4.0;
            }
        }
        Head { conv }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, HeadActs) {
        let up = upsample2x_forward(x);
        let out = self.conv.forward(&up);
        (out, HeadActs { up })
    }

    fn backward(&mut self, acts: &HeadActs, dout: &Tensor) -> Tensor {
        let dup = self.conv.backward(&acts.up, dout);
        upsample2x_backward(&dup)
    }

    fn params(&self) -> Vec<&Param> {
        self.conv.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.conv.params_mut()
    }
}

// ---------------------------------------------------------------------------
// Encoder / decoder assemblies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Encoder {
    blocks: Vec<EncBlock>,
}

struct EncoderActs {
    blocks: Vec<EncActs>,
}

impl Encoder {
    fn new(prefix: &str, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let ch = cfg.encoder_channels();
        let mut blocks = Vec::with_capacity(ENCODER_BLOCKS);
        let mut in_c = 3;
        for (i, &out_c) in ch.iter().enumerate() {
            blocks.push(EncBlock::new(
                &format!("{prefix}.b{i}"),
                in_c,
                out_c,
                i > 0,
                rng,
            ));
            in_c = out_c;
        }
        Encoder { blocks }
    }

    fn forward(&self, x: &Tensor) -> EncoderActs {
        let mut acts = Vec::with_capacity(ENCODER_BLOCKS);
        let mut cur = x.clone();
        for b in &self.blocks {
            let a = b.forward(&cur);
            cur = a.out.clone();
            acts.push(a);
        }
        EncoderActs { blocks: acts }
    }

    /// `d_bottleneck` is the gradient into block 5's output; `d_skips` are
    /// gradients into the pre-downsample features of blocks 5, 4, 3 (one per
    /// decoder block, in decoder order).
    fn backward(
        &mut self,
        acts: &EncoderActs,
        d_bottleneck: &Tensor,
        d_skips: [Option<&Tensor>; DECODER_BLOCKS],
    ) -> Tensor {
        let mut grad = d_bottleneck.clone();
        for i in (0..ENCODER_BLOCKS).rev() {
            // decoder block j consumes encoder block (5 - j)'s h2:
            // enc index 4 -> skip 0, 3 -> skip 1, 2 -> skip 2
            let extra = if i >= 2 { d_skips[4 - i] } else { None };
            grad = self.blocks[i].backward(&acts.blocks[i], &grad, extra);
        }
        grad
    }

    fn params(&self) -> Vec<&Param> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    blocks: Vec<DecBlock>,
}

struct DecoderActs {
    blocks: Vec<DecActs>,
    /// Channel counts of (upsampled, skip) pairs for gradient splitting.
    concat_channels: Vec<(usize, usize)>,
}

impl Decoder {
    fn new(prefix: &str, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let e = cfg.encoder_channels();
        let d = cfg.decoder_channels();
        // inputs: up(bottleneck)+e5.pre, up(d1)+e4.pre, up(d2)+e3.pre
        let ins = [e[4] + e[4], d[0] + e[3], d[1] + e[2]];
        let blocks = (0..DECODER_BLOCKS)
            .map(|i| DecBlock::new(&format!("{prefix}.b{i}"), ins[i], d[i], rng))
            .collect();
        Decoder { blocks }
    }

    fn forward(&self, enc: &EncoderActs) -> DecoderActs {
        let mut cur = enc.blocks[ENCODER_BLOCKS - 1].out.clone();
        let mut acts = Vec::with_capacity(DECODER_BLOCKS);
        let mut cc = Vec::with_capacity(DECODER_BLOCKS);
        for (j, b) in self.blocks.iter().enumerate() {
            let up = upsample2x_forward(&cur);
            let skip = &enc.blocks[ENCODER_BLOCKS - 1 - j].h2;
            cc.push((up.c, skip.c));
            let x = concat_channels(&up, skip);
            let a = b.forward(x);
            cur = a.out.clone();
            acts.push(a);
        }
        DecoderActs {
            blocks: acts,
            concat_channels: cc,
        }
    }

    /// Returns (gradient into the bottleneck, skip gradients in decoder
    /// order for encoder blocks 5, 4, 3).
    fn backward(
        &mut self,
        acts: &DecoderActs,
        dout: &Tensor,
    ) -> (Tensor, [Option<Tensor>; DECODER_BLOCKS]) {
        let mut skips: [Option<Tensor>; DECODER_BLOCKS] = [None, None, None];
        let mut grad = dout.clone();
        for j in (0..DECODER_BLOCKS).rev() {
            let dx = self.blocks[j].backward(&acts.blocks[j], &grad);
            let (up_c, skip_c) = acts.concat_channels[j];
            let (d_up, d_skip) = split_channels(&dx, up_c, skip_c);
            skips[j] = Some(d_skip);
            grad = upsample2x_backward(&d_up);
        }
        (grad, skips)
    }

    fn params(&self) -> Vec<&Param> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}

// ---------------------------------------------------------------------------
// Denoiser models
// ---------------------------------------------------------------------------

/// Single-branch U-shape denoiser with an additive or filtering head.
#[derive(Debug, Clone)]
pub struct UNetDenoiser {
    enc: Encoder,
    dec: Decoder,
    head: Head,
    pub backbone: BackboneConfig,
    pub head_cfg: HeadConfig,
}

pub struct UActs {
    enc: EncoderActs,
    dec: DecoderActs,
    head: HeadActs,
    pad: PadInfo,
}

/// Four filtering heads sharing one encoder–decoder body.
#[derive(Debug, Clone)]
pub struct MultiHeadDenoiser {
    enc: Encoder,
    dec: Decoder,
    heads: Vec<Head>,
    pub backbone: BackboneConfig,
    pub head_cfg: HeadConfig,
}

pub const MULTIHEAD_COUNT: usize = 4;

/// One encoder, two decoders with filtering heads: the Y-shape backbone of
/// predictive perturbation-aware filtering. Branch `sl` targets small and
/// large strengths, branch `m` median strengths.
#[derive(Debug, Clone)]
pub struct YNetDenoiser {
    enc: Encoder,
    dec_sl: Decoder,
    head_sl: Head,
    dec_m: Decoder,
    head_m: Head,
    pub backbone: BackboneConfig,
    pub head_cfg: HeadConfig,
}

#[derive(Debug, Clone, Copy)]
struct PadInfo {
    orig_h: usize,
    orig_w: usize,
    pad_h: usize,
    pad_w: usize,
}

/// Pad to a multiple of 16 with edge replication (bottom/right).
fn pad_input(x: &Tensor) -> (Tensor, PadInfo) {
    let target_h = x.h.div_ceil(DOWNSAMPLE_FACTOR) * DOWNSAMPLE_FACTOR;
    let target_w = x.w.div_ceil(DOWNSAMPLE_FACTOR) * DOWNSAMPLE_FACTOR;
    let info = PadInfo {
        orig_h: x.h,
        orig_w: x.w,
        pad_h: target_h,
        pad_w: target_w,
    };
    if target_h == x.h && target_w == x.w {
        return (x.clone(), info);
    }
    let mut out = Tensor::zeros(x.b, x.c, target_h, target_w);
    for b in 0..x.b {
        let src = x.image(b);
        let dst = out.image_mut(b);
        for c in 0..x.c {
            for y in 0..target_h {
                let sy = y.min(x.h - 1);
                for xx in 0..target_w {
                    let sx = xx.min(x.w - 1);
                    dst[(c * target_h + y) * target_w + xx] = src[(c * x.h + sy) * x.w + sx];
                }
            }
        }
    }
    (out, info)
}

fn crop_output(y: &Tensor, pad: &PadInfo) -> Tensor {
    if pad.pad_h == pad.orig_h && pad.pad_w == pad.orig_w {
        return y.clone();
    }
    let mut out = Tensor::zeros(y.b, y.c, pad.orig_h, pad.orig_w);
    for b in 0..y.b {
        let src = y.image(b);
        let dst = out.image_mut(b);
        for c in 0..y.c {
            for yy in 0..pad.orig_h {
                let s = (c * pad.pad_h + yy) * pad.pad_w;
                let d = (c * pad.orig_h + yy) * pad.orig_w;
                dst[d..d + pad.orig_w].copy_from_slice(&src[s..s + pad.orig_w]);
            }
        }
    }
    out
}

/// Re-embed an output-sized gradient into the padded size (zeros in the pad
/// margin).
fn uncrop_grad(d: &Tensor, pad: &PadInfo) -> Tensor {
    if pad.pad_h == pad.orig_h && pad.pad_w == pad.orig_w {
        return d.clone();
    }
    let mut out = Tensor::zeros(d.b, d.c, pad.pad_h, pad.pad_w);
    for b in 0..d.b {
        let src = d.image(b);
        let dst = out.image_mut(b);
        for c in 0..d.c {
            for yy in 0..pad.orig_h {
                let s = (c * pad.orig_h + yy) * pad.orig_w;
                let dd = (c * pad.pad_h + yy) * pad.pad_w;
                dst[dd..dd + pad.orig_w].copy_from_slice(&src[s..s + pad.orig_w]);
            }
        }
    }
    out
}

impl UNetDenoiser {
    pub fn new(head_cfg: HeadConfig, backbone: BackboneConfig, seed: u64) -> Self {
        let mut rng = seed_rng(seed, "unet-init");
        let enc = Encoder::new("enc", &backbone, &mut rng);
        let dec = Decoder::new("dec", &backbone, &mut rng);
        let head = Head::new("head", backbone.decoder_channels()[2], head_cfg, &mut rng);
        UNetDenoiser {
            enc,
            dec,
            head,
            backbone,
            head_cfg,
        }
    }

    /// Head output for a padded batch, with activations for backward.
    pub fn forward_full(&self, images: &Tensor) -> (Tensor, UActs) {
        let (x, pad) = pad_input(images);
        let enc = self.enc.forward(&x);
        let dec = self.dec.forward(&enc);
        let (out, head) = self.head.forward(&dec.blocks[DECODER_BLOCKS - 1].out);
        (
            crop_output(&out, &pad),
            UActs {
                enc,
                dec,
                head,
                pad,
            },
        )
    }

    /// Head output only: H×W×3 residual for additive heads, H×W×3K² kernel
    /// logits for filtering heads.
    pub fn forward(&self, images: &Tensor) -> Tensor {
        self.forward_full(images).0
    }

    pub fn backward(&mut self, acts: &UActs, d_out: &Tensor) {
        let d_out = uncrop_grad(d_out, &acts.pad);
        let d_dec = self.head.backward(&acts.head, &d_out);
        let (d_bot, skips) = self.dec.backward(&acts.dec, &d_dec);
        let skip_refs = [skips[0].as_ref(), skips[1].as_ref(), skips[2].as_ref()];
        self.enc.backward(&acts.enc, &d_bot, skip_refs);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.enc.params();
        v.extend(self.dec.params());
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.enc.params_mut();
        v.extend(self.dec.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    /// Apply the denoiser to a batch of images in [0,1].
    pub fn denoise_batch(&self, images: &Tensor) -> Tensor {
        let out = self.forward(images);
        match self.head_cfg.kind {
            HeadKind::Additive => {
                let mut y = images.clone();
                for (v, r) in y.data.iter_mut().zip(&out.data) {
                    *v = (*v + *r).clamp(0.0, 1.0);
                }
                y
            }
            HeadKind::Filtering => {
                filtering::filter_forward_batch(images, &out, self.head_cfg.filter_size).0
            }
        }
    }
}

impl MultiHeadDenoiser {
    pub fn new(head_cfg: HeadConfig, backbone: BackboneConfig, seed: u64) -> Self {
        assert_eq!(head_cfg.kind, HeadKind::Filtering, "heads are filtering");
        let mut rng = seed_rng(seed, "multihead-init");
        let enc = Encoder::new("enc", &backbone, &mut rng);
        let dec = Decoder::new("dec", &backbone, &mut rng);
        // identical initialization across heads: clone one RNG state
        let head_rng = seed_rng(seed, "multihead-heads-init");
        let heads = (0..MULTIHEAD_COUNT)
            .map(|i| {
                let mut r = head_rng.clone();
                Head::new(
                    &format!("head{}", i + 1),
                    backbone.decoder_channels()[2],
                    head_cfg,
                    &mut r,
                )
            })
            .collect();
        MultiHeadDenoiser {
            enc,
            dec,
            heads,
            backbone,
            head_cfg,
        }
    }

    pub fn forward_full(&self, images: &Tensor, head_index: usize) -> Result<(Tensor, UActs)> {
        if head_index == 0 || head_index > MULTIHEAD_COUNT {
            return Err(Error::Config(format!(
                "head index {head_index} outside 1..={MULTIHEAD_COUNT}"
            )));
        }
        let (x, pad) = pad_input(images);
        let enc = self.enc.forward(&x);
        let dec = self.dec.forward(&enc);
        let (out, head) = self.heads[head_index - 1].forward(&dec.blocks[DECODER_BLOCKS - 1].out);
        Ok((
            crop_output(&out, &pad),
            UActs {
                enc,
                dec,
                head,
                pad,
            },
        ))
    }

    /// Kernel logits from the selected head (1-based index).
    pub fn forward(&self, images: &Tensor, head_index: usize) -> Result<Tensor> {
        Ok(self.forward_full(images, head_index)?.0)
    }

    pub fn backward(&mut self, acts: &UActs, head_index: usize, d_out: &Tensor) {
        let d_out = uncrop_grad(d_out, &acts.pad);
        let d_dec = self.heads[head_index - 1].backward(&acts.head, &d_out);
        let (d_bot, skips) = self.dec.backward(&acts.dec, &d_dec);
        let skip_refs = [skips[0].as_ref(), skips[1].as_ref(), skips[2].as_ref()];
        self.enc.backward(&acts.enc, &d_bot, skip_refs);
    }

    pub fn denoise_batch(&self, images: &Tensor, head_index: usize) -> Result<Tensor> {
        let logits = self.forward(images, head_index)?;
        Ok(filtering::filter_forward_batch(images, &logits, self.head_cfg.filter_size).0)
    }

    pub fn body_params(&self) -> Vec<&Param> {
        let mut v = self.enc.params();
        v.extend(self.dec.params());
        v
    }

    pub fn head_params(&self, head_index: usize) -> Vec<&Param> {
        self.heads[head_index - 1].params()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.body_params();
        for h in &self.heads {
            v.extend(h.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.enc.params_mut();
        v.extend(self.dec.params_mut());
        for h in &mut self.heads {
            v.extend(h.params_mut());
        }
        v
    }
}

pub struct YActs {
    enc: EncoderActs,
    dec_sl: DecoderActs,
    head_sl: HeadActs,
    dec_m: Option<DecoderActs>,
    head_m: Option<HeadActs>,
    pad: PadInfo,
}

impl YNetDenoiser {
    pub fn new(head_cfg: HeadConfig, backbone: BackboneConfig, seed: u64) -> Self {
        assert_eq!(head_cfg.kind, HeadKind::Filtering, "Y branches are filtering");
        let mut rng = seed_rng(seed, "ynet-init");
        let enc = Encoder::new("enc", &backbone, &mut rng);
        // decoders are initialized independently (separate draws)
        let dec_sl = Decoder::new("dec_sl", &backbone, &mut rng);
        let head_sl = Head::new("head_sl", backbone.decoder_channels()[2], head_cfg, &mut rng);
        let dec_m = Decoder::new("dec_m", &backbone, &mut rng);
        let head_m = Head::new("head_m", backbone.decoder_channels()[2], head_cfg, &mut rng);
        YNetDenoiser {
            enc,
            dec_sl,
            head_sl,
            dec_m,
            head_m,
            backbone,
            head_cfg,
        }
    }

    /// Both branches' kernel logits over one shared encoding. `want_m` can
    /// skip the median branch when a training batch does not route to it.
    pub fn forward_full(&self, images: &Tensor, want_m: bool) -> (Tensor, Option<Tensor>, YActs) {
        let (x, pad) = pad_input(images);
        let enc = self.enc.forward(&x);
        let dec_sl = self.dec_sl.forward(&enc);
        let (out_sl, head_sl) = self.head_sl.forward(&dec_sl.blocks[DECODER_BLOCKS - 1].out);
        let (out_m, dec_m, head_m) = if want_m {
            let dec_m = self.dec_m.forward(&enc);
            let (out_m, head_m) = self.head_m.forward(&dec_m.blocks[DECODER_BLOCKS - 1].out);
            (Some(crop_output(&out_m, &pad)), Some(dec_m), Some(head_m))
        } else {
            (None, None, None)
        };
        (
            crop_output(&out_sl, &pad),
            out_m,
            YActs {
                enc,
                dec_sl,
                head_sl,
                dec_m,
                head_m,
                pad,
            },
        )
    }

    /// The spec-level forward: (φ_sl, φ_m) kernel logits.
    pub fn forward(&self, images: &Tensor) -> (Tensor, Tensor) {
        let (sl, m, _) = self.forward_full(images, true);
        (sl, m.expect("m branch requested"))
    }

    /// Backward through whichever branches received gradients. The encoder
    /// accumulates from both.
    pub fn backward(&mut self, acts: &YActs, d_sl: Option<&Tensor>, d_m: Option<&Tensor>) {
        let mut d_bot_sum: Option<Tensor> = None;
        let mut skip_sum: [Option<Tensor>; DECODER_BLOCKS] = [None, None, None];
        if let Some(d) = d_sl {
            let d = uncrop_grad(d, &acts.pad);
            let d_dec = self.head_sl.backward(&acts.head_sl, &d);
            let (d_bot, skips) = self.dec_sl.backward(&acts.dec_sl, &d_dec);
            d_bot_sum = Some(d_bot);
            skip_sum = skips;
        }
        if let Some(d) = d_m {
            let d = uncrop_grad(d, &acts.pad);
            let acts_m = acts.dec_m.as_ref().expect("m branch was run forward");
            let head_m_acts = acts.head_m.as_ref().expect("m branch was run forward");
            let d_dec = self.head_m.backward(head_m_acts, &d);
            let (d_bot, skips) = self.dec_m.backward(acts_m, &d_dec);
            match &mut d_bot_sum {
                Some(t) => {
                    for (a, b) in t.data.iter_mut().zip(&d_bot.data) {
                        *a += *b;
                    }
                }
                None => d_bot_sum = Some(d_bot),
            }
            for (dst, src) in skip_sum.iter_mut().zip(skips.into_iter()) {
                match (dst.as_mut(), src) {
                    (Some(d), Some(s)) => {
                        for (a, b) in d.data.iter_mut().zip(&s.data) {
                            *a += *b;
                        }
                    }
                    (None, Some(s)) => *dst = Some(s),
                    _ => {}
                }
            }
        }
        if let Some(d_bot) = d_bot_sum {
            let skip_refs = [
                skip_sum[0].as_ref(),
                skip_sum[1].as_ref(),
                skip_sum[2].as_ref(),
            ];
            self.enc.backward(&acts.enc, &d_bot, skip_refs);
        }
    }

    pub fn encoder_params(&self) -> Vec<&Param> {
        self.enc.params()
    }

    pub fn branch_sl_params(&self) -> Vec<&Param> {
        let mut v = self.dec_sl.params();
        v.extend(self.head_sl.params());
        v
    }

    pub fn branch_m_params(&self) -> Vec<&Param> {
        let mut v = self.dec_m.params();
        v.extend(self.head_m.params());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.enc.params();
        v.extend(self.dec_sl.params());
        v.extend(self.head_sl.params());
        v.extend(self.dec_m.params());
        v.extend(self.head_m.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.enc.params_mut();
        v.extend(self.dec_sl.params_mut());
        v.extend(self.head_sl.params_mut());
        v.extend(self.dec_m.params_mut());
        v.extend(self.head_m.params_mut());
        v
    }

    /// Denoised outputs of the two branches.
    pub fn denoise_branches_batch(&self, images: &Tensor) -> (Tensor, Tensor) {
        let (sl, m) = self.forward(images);
        let k = self.head_cfg.filter_size;
        (
            filtering::filter_forward_batch(images, &sl, k).0,
            filtering::filter_forward_batch(images, &m, k).0,
        )
    }
}

/// Tagged denoiser backbone: which architecture a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchTag {
    UAdd,
    UFilt,
    UMultihead,
    YDual,
}

impl std::fmt::Display for ArchTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ArchTag::UAdd => "u_add",
            ArchTag::UFilt => "u_filt",
            ArchTag::UMultihead => "u_multihead",
            ArchTag::YDual => "y_dual",
        };
        f.write_str(s)
    }
}

/// A denoiser backbone of any architecture with its configs; the unit that
/// checkpoints store.
pub enum DenoiserModel {
    UAdd(UNetDenoiser),
    UFilt(UNetDenoiser),
    UMultihead(MultiHeadDenoiser),
    YDual(YNetDenoiser),
}

impl DenoiserModel {
    pub fn new(arch: ArchTag, k: usize, backbone: BackboneConfig, seed: u64) -> Result<Self> {
        Ok(match arch {
            ArchTag::UAdd => {
                DenoiserModel::UAdd(UNetDenoiser::new(HeadConfig::additive(), backbone, seed))
            }
            ArchTag::UFilt => DenoiserModel::UFilt(UNetDenoiser::new(
                HeadConfig::filtering(k)?,
                backbone,
                seed,
            )),
            ArchTag::UMultihead => DenoiserModel::UMultihead(MultiHeadDenoiser::new(
                HeadConfig::filtering(k)?,
                backbone,
                seed,
            )),
            ArchTag::YDual => {
                DenoiserModel::YDual(YNetDenoiser::new(HeadConfig::filtering(k)?, backbone, seed))
            }
        })
    }

    pub fn arch(&self) -> ArchTag {
        match self {
            DenoiserModel::UAdd(_) => ArchTag::UAdd,
            DenoiserModel::UFilt(_) => ArchTag::UFilt,
            DenoiserModel::UMultihead(_) => ArchTag::UMultihead,
            DenoiserModel::YDual(_) => ArchTag::YDual,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        match self {
            DenoiserModel::UAdd(m) | DenoiserModel::UFilt(m) => m.backbone,
            DenoiserModel::UMultihead(m) => m.backbone,
            DenoiserModel::YDual(m) => m.backbone,
        }
    }

    pub fn head_cfg(&self) -> HeadConfig {
        match self {
            DenoiserModel::UAdd(m) | DenoiserModel::UFilt(m) => m.head_cfg,
            DenoiserModel::UMultihead(m) => m.head_cfg,
            DenoiserModel::YDual(m) => m.head_cfg,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            DenoiserModel::UAdd(m) | DenoiserModel::UFilt(m) => m.params(),
            DenoiserModel::UMultihead(m) => m.params(),
            DenoiserModel::YDual(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            DenoiserModel::UAdd(m) | DenoiserModel::UFilt(m) => m.params_mut(),
            DenoiserModel::UMultihead(m) => m.params_mut(),
            DenoiserModel::YDual(m) => m.params_mut(),
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_params(self.params().into_iter())
    }
}

/// Spec-level op: head output of a single-branch U-shape model.
pub fn forward_u(model: &DenoiserModel, image: &ImageTensor) -> Result<Tensor> {
    let batch = ImageTensor::batch(&[image]);
    match model {
        DenoiserModel::UAdd(m) | DenoiserModel::UFilt(m) => Ok(m.forward(&batch)),
        _ => Err(Error::Config(format!(
            "forward_u expects u_add or u_filt, got {}",
            model.arch()
        ))),
    }
}

/// Spec-level op: both kernel-logit outputs of a Y-shape model.
pub fn forward_y(model: &DenoiserModel, image: &ImageTensor) -> Result<(Tensor, Tensor)> {
    let batch = ImageTensor::batch(&[image]);
    match model {
        DenoiserModel::YDual(m) => Ok(m.forward(&batch)),
        _ => Err(Error::Config(format!(
            "forward_y expects y_dual, got {}",
            model.arch()
        ))),
    }
}

/// Spec-level op: the selected head's kernel logits (1-based head index).
pub fn forward_multihead(
    model: &DenoiserModel,
    image: &ImageTensor,
    head_index: usize,
) -> Result<Tensor> {
    let batch = ImageTensor::batch(&[image]);
    match model {
        DenoiserModel::UMultihead(m) => m.forward(&batch, head_index),
        _ => Err(Error::Config(format!(
            "forward_multihead expects u_multihead, got {}",
            model.arch()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seed_rng;
    use ndarray::Array3;
    use rand::Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            base_channels: 4,
            bottleneck_channels: 16,
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = seed_rng(seed, "bb-img");
        ImageTensor::new(Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn additive_head_output_shape_matches_input() {
        let model = DenoiserModel::new(ArchTag::UAdd, 0, small_cfg(), 1).unwrap();
        let img = random_image(32, 32, 2);
        let out = forward_u(&model, &img).unwrap();
        assert_eq!((out.c, out.h, out.w), (3, 32, 32));
        assert!(!out.has_nan());
    }

    #[test]
    fn filtering_head_channel_count() {
        let model = DenoiserModel::new(ArchTag::UFilt, 5, small_cfg(), 1).unwrap();
        let img = random_image(32, 32, 3);
        let out = forward_u(&model, &img).unwrap();
        assert_eq!(out.c, 75);
        assert!(!out.has_nan());
    }

    #[test]
    fn non_multiple_of_16_inputs_are_padded_and_cropped() {
        let model = DenoiserModel::new(ArchTag::UFilt, 3, small_cfg(), 1).unwrap();
        let img = random_image(24, 40, 4);
        let out = forward_u(&model, &img).unwrap();
        assert_eq!((out.h, out.w), (24, 40));
    }

    #[test]
    fn ynet_branches_share_encoder_but_not_decoders() {
        let model = YNetDenoiser::new(HeadConfig::filtering(3).unwrap(), small_cfg(), 7);
        let img = random_image(32, 32, 5);
        let batch = ImageTensor::batch(&[&img]);
        let (sl0, m0) = model.forward(&batch);
        assert!(sl0.same_shape(&m0));

        // perturbing decoder-m parameters changes only the m output
        let mut pm = model.clone();
        for p in pm.params_mut() {
            if p.name.starts_with("dec_m.") {
                for v in p.data.iter_mut() {
                    *v += 0.05;
                }
            }
        }
        let (sl1, m1) = pm.forward(&batch);
        assert_eq!(sl0.data, sl1.data);
        assert_ne!(m0.data, m1.data);

        // perturbing encoder parameters changes both outputs
        let mut pe = model.clone();
        for p in pe.params_mut() {
            if p.name.starts_with("enc.") {
                for v in p.data.iter_mut() {
                    *v += 0.05;
                }
            }
        }
        let (sl2, m2) = pe.forward(&batch);
        assert_ne!(sl0.data, sl2.data);
        assert_ne!(m0.data, m2.data);
    }

    #[test]
    fn ynet_parameter_count_accounting() {
        let cfg = small_cfg();
        let head = HeadConfig::filtering(3).unwrap();
        let y = YNetDenoiser::new(head, cfg, 1);
        let u = UNetDenoiser::new(head, cfg, 1);
        let count = |ps: Vec<&Param>| ps.iter().map(|p| p.data.len()).sum::<usize>();
        let enc_n = count(y.encoder_params());
        let branch = count(u.params()) - count(u.enc.params());
        assert_eq!(count(y.params()), enc_n + 2 * branch);
    }

    #[test]
    fn multihead_identical_init_gives_identical_outputs() {
        let model = MultiHeadDenoiser::new(HeadConfig::filtering(3).unwrap(), small_cfg(), 9);
        let img = random_image(32, 32, 6);
        let batch = ImageTensor::batch(&[&img]);
        let out1 = model.forward(&batch, 1).unwrap();
        for h in 2..=MULTIHEAD_COUNT {
            let out = model.forward(&batch, h).unwrap();
            assert_eq!(out1.data, out.data, "head {h} differs at identical init");
        }
        assert!(model.forward(&batch, 0).is_err());
        assert!(model.forward(&batch, 5).is_err());
        // four distinct head parameter sets exist
        let names: std::collections::HashSet<&str> = model
            .params()
            .iter()
            .map(|p| p.name.as_str())
            .filter(|n| n.starts_with("head"))
            .collect();
        assert_eq!(names.len(), 2 * MULTIHEAD_COUNT);
    }

    #[test]
    fn deterministic_construction_and_inference() {
        let a = DenoiserModel::new(ArchTag::UFilt, 3, small_cfg(), 11).unwrap();
        let b = DenoiserModel::new(ArchTag::UFilt, 3, small_cfg(), 11).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let img = random_image(32, 32, 7);
        let oa = forward_u(&a, &img).unwrap();
        let ob = forward_u(&b, &img).unwrap();
        assert_eq!(oa.data, ob.data);
    }

    #[test]
    fn gradient_reaches_every_parameter_group() {
        // image-level loss at init: every group gets a nonzero gradient
        let mut model = UNetDenoiser::new(HeadConfig::filtering(3).unwrap(), small_cfg(), 13);
        let img = random_image(32, 32, 8);
        let clean = random_image(32, 32, 9);
        let batch = ImageTensor::batch(&[&img]);
        let target = ImageTensor::batch(&[&clean]);
        let (logits, acts) = model.forward_full(&batch);
        let (out, probs) = filtering::filter_forward_batch(&batch, &logits, 3);
        let (_, d_out) = crate::nn::ops::l1_loss_grad(&out, &target);
        let d_logits = filtering::filter_backward_logits_batch(&batch, &probs, &out, &d_out, 3);
        for p in model.params_mut() {
            p.zero_grad();
        }
        model.backward(&acts, &d_logits);
        let mut by_prefix: std::collections::HashMap<String, f32> = Default::default();
        for p in model.params() {
            let prefix = p.name.split('.').next().unwrap_or("").to_string();
            let norm: f32 = p.grad.iter().map(|g| g.abs()).sum();
            *by_prefix.entry(prefix).or_insert(0.0) += norm;
        }
        for group in ["enc", "dec", "head"] {
            assert!(
                by_prefix.get(group).copied().unwrap_or(0.0) > 0.0,
                "dead branch: {group}"
            );
        }
    }
}
