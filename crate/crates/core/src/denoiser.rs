//! Noise predictor: a small UNet over all views in the forward pass plus the
//! clean input image, with self-attention spanning every token of every view.

use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::conditioning::{embedding_tensor, FrustumVolume, EMBED_FEATURES};
use crate::error::{Error, Result};
use crate::nn::{softmax_last, Conv2d, GroupNorm, Linear, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// One sequence over every view and the input image.
    Joint,
    /// Each view attends to its own tokens only.
    PerView,
    /// Attention blocks are skipped.
    Off,
}

impl FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "per-view" => Ok(Self::PerView),
            "off" => Ok(Self::Off),
            _ => Err(Error::Config(format!("unknown attention mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::PerView => "per-view",
            Self::Off => "off",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    /// Attention runs at every level whose side is at most this.
    pub attention_max_size: usize,
    pub attention: AttentionMode,
}

/// Source of a token in the joint sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSource {
    View(usize),
    Input,
}

/// Flattened tokens of all views followed by those of the input image.
#[derive(Debug, Clone)]
pub struct ViewTokenSequence {
    /// `(tokens, C)`.
    pub tokens: Tensor,
    pub sources: Vec<TokenSource>,
    pub positions: Vec<(usize, usize)>,
}

impl ViewTokenSequence {
    /// Flattens `(k + 1, C, r, r)` features; the last item is the input image.
    pub fn from_maps(maps: &Tensor) -> Result<Self> {
        let (b, c, h, w) = maps.dims4()?;
        let tokens = maps.reshape((b, c, h * w))?.transpose(1, 2)?.reshape((b * h * w, c))?;
        let mut sources = Vec::with_capacity(b * h * w);
        let mut positions = Vec::with_capacity(b * h * w);
        for n in 0..b {
            let src = if n + 1 == b { TokenSource::Input } else { TokenSource::View(n) };
            for i in 0..h {
                for j in 0..w {
                    sources.push(src);
                    positions.push((i, j));
                }
            }
        }
        Ok(Self { tokens, sources, positions })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn to_maps(&self, items: usize, h: usize, w: usize) -> Result<Tensor> {
        let c = self.tokens.dims2()?.1;
        Ok(self.tokens.reshape((items, h * w, c))?.transpose(1, 2)?.reshape((items, c, h, w))?)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl AttentionParams {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        pb.push(name);
        let out = (|| {
            Ok(Self {
                query: Linear::new(pb, "query", channels, channels)?,
                key: Linear::new(pb, "key", channels, channels)?,
                value: Linear::new(pb, "value", channels, channels)?,
                out: Linear::with_gain(pb, "out", channels, channels, 0.5)?,
            })
        })();
        pb.pop();
        out
    }

    /// Row-stochastic attention weights for `(.., n, C)` tokens.
    pub fn weights(&self, tokens: &Tensor) -> Result<Tensor> {
        let c = *tokens.dims().last().unwrap_or(&1);
        let q = self.query.forward(tokens)?;
        let k = self.key.forward(tokens)?;
        let logits = (q.matmul(&k.transpose(D::Minus2, D::Minus1)?)? / (c as f64).sqrt())?;
        softmax_last(&logits)
    }

    fn attend(&self, tokens: &Tensor) -> Result<Tensor> {
        let w = self.weights(tokens)?;
        self.out.forward(&w.matmul(&self.value.forward(tokens)?)?)
    }
}

/// Scaled dot-product self-attention across the whole sequence.
pub fn joint_view_attention(seq: &ViewTokenSequence, params: &AttentionParams) -> Result<ViewTokenSequence> {
    if seq.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    Ok(ViewTokenSequence {
        tokens: params.attend(&seq.tokens)?,
        sources: seq.sources.clone(),
        positions: seq.positions.clone(),
    })
}

#[derive(Debug, Clone)]
struct AttentionBlock {
    norm: GroupNorm,
    position: candle_core::Var,
    params: AttentionParams,
}

impl AttentionBlock {
    fn new(pb: &mut ParamBuilder, name: &str, channels: usize, size: usize) -> Result<Self> {
        pb.push(name);
        let out = (|| {
            Ok(Self {
                norm: GroupNorm::new(pb, "norm", channels)?,
                position: pb.normal("position", &[size * size, channels], 0.02)?,
                params: AttentionParams::new(pb, "attn", channels)?,
            })
        })();
        pb.pop();
        out
    }

    fn forward(&self, h: &Tensor, mode: AttentionMode) -> Result<Tensor> {
        let (b, c, r, _) = h.dims4()?;
        let seq = ViewTokenSequence::from_maps(&self.norm.forward(h)?)?;
        let tokens = seq.tokens.reshape((b, r * r, c))?.broadcast_add(self.position.as_tensor())?;
        let out = match mode {
            AttentionMode::Joint => {
                let joint = ViewTokenSequence { tokens: tokens.reshape((b * r * r, c))?, ..seq };
                joint_view_attention(&joint, &self.params)?.tokens
            }
            AttentionMode::PerView => self.params.attend(&tokens)?.reshape((b * r * r, c))?,
            AttentionMode::Off => return Ok(h.clone()),
        };
        let out = out.reshape((b, r * r, c))?.transpose(1, 2)?.reshape((b, c, r, r))?;
        Ok((h + out)?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    embed: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize, embed: usize) -> Result<Self> {
        pb.push(name);
        let out = (|| {
            Ok(Self {
                norm1: GroupNorm::new(pb, "norm1", input)?,
                conv1: Conv2d::new(pb, "conv1", input, output, 3)?,
                embed: Linear::new(pb, "embed", embed, output)?,
                norm2: GroupNorm::new(pb, "norm2", output)?,
                conv2: Conv2d::with_gain(pb, "conv2", output, output, 3, 0.5)?,
                skip: if input != output { Some(Conv2d::new(pb, "skip", input, output, 1)?) } else { None },
            })
        })();
        pb.pop();
        out
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let (b, _, _, _) = x.dims4()?;
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let e = self.embed.forward(emb)?;
        let c = e.dims2()?.1;
        let h = h.broadcast_add(&e.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Projection that merges one depth-averaged frustum level into a stage.
#[derive(Debug, Clone)]
pub struct Injection {
    pub condition: Linear,
    pub merge: Conv2d,
}

impl Injection {
    pub fn new(pb: &mut ParamBuilder, name: &str, stage: usize, level: usize) -> Result<Self> {
        pb.push(name);
        let condition = Linear::no_bias(pb, "condition", level, stage);
        let merge = Conv2d::new(pb, "merge", 2 * stage, stage, 1);
        pb.pop();
        Ok(Self { condition: condition?, merge: merge? })
    }
}

/// Concatenates the projected, depth-averaged condition and applies a 1x1 merge.
///
/// `level` is `(B, D, r, r, C_r)`, aligned with `stage` `(B, C, r, r)`.
pub fn inject_condition(stage: &Tensor, level: &Tensor, params: &Injection) -> Result<Tensor> {
    let (b, _, r, w) = stage.dims4()?;
    let (lb, _, lr, lw, _) = level.dims5()?;
    if (lb, lr, lw) != (b, r, w) {
        return Err(Error::shape((b, r, w), (lb, lr, lw)));
    }
    let cond = params.condition.forward(&level.mean(1)?)?.permute((0, 3, 1, 2))?;
    params.merge.forward(&Tensor::cat(&[stage, &cond], 1)?)
}

/// Depth-averaged frustum level widened with a zero item for the input image.
fn pad_level(level: &Tensor) -> Result<Tensor> {
    let dims = level.dims5()?;
    let zero = Tensor::zeros((1, dims.1, dims.2, dims.3, dims.4), level.dtype(), level.device())?;
    Ok(Tensor::cat(&[level, &zero], 0)?)
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    image_size: usize,
    embed1: Linear,
    embed2: Linear,
    input_tag: candle_core::Var,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    up: Vec<ResBlock>,
    down_attn: Vec<Option<AttentionBlock>>,
    up_attn: Vec<Option<AttentionBlock>>,
    injections: Vec<Option<(usize, Injection)>>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

pub const LEVELS: usize = 3;

impl Denoiser {
    /// `frustum_levels` lists `(side, channels)` of each conditioning level.
    pub fn new(pb: &mut ParamBuilder, cfg: &DenoiserConfig, image_size: usize, frustum_levels: &[(usize, usize)]) -> Result<Self> {
        if image_size % (1 << (LEVELS - 1)) != 0 || cfg.base_channels == 0 {
            return Err(Error::Config(format!("image size {image_size} must be divisible by 4")));
        }
        let b = cfg.base_channels;
        let chans = [b, 2 * b, 2 * b];
        let sizes: Vec<usize> = (0..LEVELS).map(|l| image_size >> l).collect();
        for (side, _) in frustum_levels {
            if !sizes.contains(side) {
                return Err(Error::Config(format!("frustum level of side {side} matches no denoiser resolution {sizes:?}")));
            }
        }
        let e = 2 * b;

        let mut injections = Vec::new();
        pb.push("inject");
        for (l, &s) in sizes.iter().enumerate() {
            injections.push(match frustum_levels.iter().position(|(side, _)| *side == s) {
                Some(i) => Some((i, Injection::new(pb, &format!("l{l}"), chans[l], frustum_levels[i].1)?)),
                None => None,
            });
        }
        pb.pop();

        pb.push("backbone");
        let out = (|| {
            let attn = |pb: &mut ParamBuilder, name: String, l: usize| -> Result<Option<AttentionBlock>> {
                if sizes[l] <= cfg.attention_max_size {
                    Ok(Some(AttentionBlock::new(pb, &name, chans[l], sizes[l])?))
                } else {
                    Ok(None)
                }
            };
            let embed1 = Linear::new(pb, "embed1", EMBED_FEATURES, e)?;
            let embed2 = Linear::new(pb, "embed2", e, e)?;
            let input_tag = pb.normal("input_tag", &[e], 1.0)?;
            let conv_in = Conv2d::new(pb, "conv_in", cfg.image_channels, b, 3)?;
            let mut down = Vec::new();
            let mut down_attn = Vec::new();
            let mut prev = b;
            for l in 0..LEVELS {
                down.push(ResBlock::new(pb, &format!("down{l}"), prev, chans[l], e)?);
                down_attn.push(attn(pb, format!("down{l}_attn"), l)?);
                prev = chans[l];
            }
            let mut up = Vec::new();
            let mut up_attn = Vec::new();
            for l in (0..LEVELS - 1).rev() {
                up.push(ResBlock::new(pb, &format!("up{l}"), prev + chans[l], chans[l], e)?);
                up_attn.push(attn(pb, format!("up{l}_attn"), l)?);
                prev = chans[l];
            }
            let out_norm = GroupNorm::new(pb, "out_norm", b)?;
            let conv_out = Conv2d::with_gain(pb, "conv_out", b, cfg.image_channels, 3, 0.5)?;
            Ok(Self {
                cfg: cfg.clone(),
                image_size,
                embed1,
                embed2,
                input_tag,
                conv_in,
                down,
                up,
                down_attn,
                up_attn,
                injections,
                out_norm,
                conv_out,
            })
        })();
        pb.pop();
        out
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn set_attention(&mut self, mode: AttentionMode) {
        self.cfg.attention = mode;
    }

    /// Predicts noise for `k` views `(k, C, S, S)` in one joint pass. `y` is
    /// the clean `(1, C, S, S)` input image seen from `y_pose`.
    pub fn predict_noise(
        &self,
        x_t: &Tensor,
        y: &Tensor,
        fvf: &FrustumVolume,
        t: usize,
        poses: &[CameraPose],
        y_pose: &CameraPose,
    ) -> Result<Tensor> {
        let (k, c, h, w) = x_t.dims4()?;
        if k == 0 || poses.len() != k {
            return Err(Error::shape(k, poses.len()));
        }
        let s = self.image_size;
        if (c, h, w) != (self.cfg.image_channels, s, s) || y.dims() != [1, c, s, s] {
            return Err(Error::shape((c, s, s), (x_t.dims(), y.dims())));
        }
        for level in &fvf.levels {
            if level.dims5()?.0 != k {
                return Err(Error::shape(k, level.dims()));
            }
        }
        let dtype = x_t.dtype();
        let mut ts = vec![t; k];
        ts.push(0);
        let mut all_poses = poses.to_vec();
        all_poses.push(*y_pose);
        let e = self.embed1.forward(&embedding_tensor(&ts, &all_poses, dtype)?)?.silu()?;
        let e = self.embed2.forward(&e)?;
        let tag = Tensor::cat(
            &[Tensor::zeros((k, e.dims2()?.1), dtype, &Device::Cpu)?, self.input_tag.as_tensor().unsqueeze(0)?],
            0,
        )?;
        let emb = (e + tag)?.silu()?;
        let levels: Vec<Tensor> = fvf.levels.iter().map(pad_level).collect::<Result<_>>()?;

        let mut h = self.conv_in.forward(&Tensor::cat(&[x_t, y], 0)?)?;
        let mut skips = Vec::new();
        for l in 0..LEVELS {
            if l > 0 {
                h = h.avg_pool2d(2)?;
            }
            h = self.down[l].forward(&h, &emb)?;
            if let Some((i, inj)) = &self.injections[l] {
                h = inject_condition(&h, &levels[*i], inj)?;
            }
            if let Some(a) = &self.down_attn[l] {
                h = a.forward(&h, self.cfg.attention)?;
            }
            skips.push(h.clone());
        }
        skips.pop();
        for (n, l) in (0..LEVELS - 1).rev().enumerate() {
            let r = s >> l;
            h = h.upsample_nearest2d(r, r)?;
            h = self.up[n].forward(&Tensor::cat(&[&h, &skips[l]], 1)?, &emb)?;
            if let Some(a) = &self.up_attn[n] {
                h = a.forward(&h, self.cfg.attention)?;
            }
        }
        let out = self.conv_out.forward(&self.out_norm.forward(&h)?.silu()?)?;
        Ok(out.narrow(0, 0, k)?)
    }

    pub fn dtype(&self) -> DType {
        self.conv_in.weight.dtype()
    }
}
