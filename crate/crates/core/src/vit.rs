//! The frozen image transformer: patch embedding, class token, positional
//! embeddings, multi-head self-attention, MLP and the pre-norm block.
//!
//! Token tensors are laid out `[sequences, tokens, width]`. In the video
//! models a sequence is one frame, so the leading extent is `batch * frames`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{AttentionKind, Forward, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub frames: usize,
    pub num_classes: usize,
    pub stochastic_depth_rate: f64,
}

impl VitConfig {
    pub fn vit_b16(num_classes: usize, frames: usize) -> Self {
        VitConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            width: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            frames,
            num_classes,
            stochastic_depth_rate: 0.0,
        }
    }

    pub fn vit_l14(num_classes: usize, frames: usize) -> Self {
        VitConfig {
            image_size: 224,
            patch_size: 14,
            channels: 3,
            width: 1024,
            depth: 24,
            heads: 16,
            mlp_ratio: 4,
            frames,
            num_classes,
            stochastic_depth_rate: 0.0,
        }
    }

    /// Desk-scale backbone used by the toy tasks: 12x12 single-channel
    /// frames cut into nine 4x4 patches.
    pub fn tiny(num_classes: usize, frames: usize) -> Self {
        VitConfig {
            image_size: 12,
            patch_size: 4,
            channels: 1,
            width: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            frames,
            num_classes,
            stochastic_depth_rate: 0.0,
        }
    }

    /// Smallest sensible backbone, for gradient checks.
    pub fn micro(num_classes: usize, frames: usize) -> Self {
        VitConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            width: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            frames,
            num_classes,
            stochastic_depth_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("width", self.width),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("frames", self.frames),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width < 2 {
            return Err(Error::Config("width must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.stochastic_depth_rate) {
            return Err(Error::Config(format!(
                "stochastic depth rate {} outside [0, 1)",
                self.stochastic_depth_rate
            )));
        }
        Ok(())
    }

    /// Patches per frame, `(H / P)^2`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_width(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Every frozen backbone parameter plus the classification head, with shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.width;
        let mut out = vec![
            ("patch_embed.weight".into(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".into(), vec![d]),
            ("cls_token".into(), vec![1, d]),
            ("pos_embed".into(), vec![self.tokens(), d]),
        ];
        for i in 0..self.depth {
            let p = block_prefix(i);
            out.push((format!("{p}.norm1.weight"), vec![d]));
            out.push((format!("{p}.norm1.bias"), vec![d]));
            out.push((format!("{p}.attn.qkv.weight"), vec![d, 3 * d]));
            out.push((format!("{p}.attn.qkv.bias"), vec![3 * d]));
            out.push((format!("{p}.attn.proj.weight"), vec![d, d]));
            out.push((format!("{p}.attn.proj.bias"), vec![d]));
            out.push((format!("{p}.norm2.weight"), vec![d]));
            out.push((format!("{p}.norm2.bias"), vec![d]));
            out.push((format!("{p}.mlp.fc1.weight"), vec![d, self.mlp_width()]));
            out.push((format!("{p}.mlp.fc1.bias"), vec![self.mlp_width()]));
            out.push((format!("{p}.mlp.fc2.weight"), vec![self.mlp_width(), d]));
            out.push((format!("{p}.mlp.fc2.bias"), vec![d]));
        }
        out.push(("head.weight".into(), vec![d, self.num_classes]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }
}

pub fn block_prefix(i: usize) -> String {
    format!("blocks.{i}")
}

fn normal_tensor<E: Element>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<E> {
    let dist = Normal::new(0.0, std).expect("positive std");
    // truncated at two standard deviations
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break E::of(v);
        }
    })
}

fn xavier_tensor<E: Element>(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<E> {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    Tensor::from_fn(&[fan_in, fan_out], |_| E::of(rng.gen_range(-bound..bound)))
}

/// Random backbone and head. Stands in for pre-trained weights at toy scale.
pub fn init_backbone<E: Element>(config: &VitConfig, rng: &mut Rng) -> Result<ParamStore<E>> {
    config.validate()?;
    let mut store = ParamStore::new();
    for (name, shape) in config.param_shapes() {
        let t = if name == "pos_embed" || name == "head.weight" {
            normal_tensor(&shape, 0.02, rng)
        } else if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") {
            Tensor::full(&shape, E::one())
        } else if name.ends_with(".weight") {
            xavier_tensor(shape[0], shape[1], rng)
        } else {
            Tensor::zeros(&shape)
        };
        store.insert(name, t);
    }
    Ok(store)
}

/// Cuts `[B, T, C, H, W]` frames into `[B*T, N, P*P*C]` flattened patches.
/// Patches are row-major over the grid; each patch is flattened channel,
/// then row, then column.
pub fn extract_patches<E: Element>(video: &Tensor<E>, config: &VitConfig) -> Result<Tensor<E>> {
    let s = video.shape();
    if s.len() != 5 || s[2] != config.channels {
        return Err(Error::Shape {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: vec![config.channels, config.image_size, config.image_size],
        });
    }
    let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let p = config.patch_size;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "frame {h}x{w} is not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let n = gh * gw;
    let pd = p * p * c;
    let src = video.data();
    let mut data = Vec::with_capacity(b * t * n * pd);
    for frame in 0..b * t {
        let base = frame * c * h * w;
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for py in 0..p {
                        let row = base + ch * h * w + (gy * p + py) * w + gx * p;
                        data.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b * t, n, pd], data)
}

/// `x W + b` over the last axis using `{prefix}.weight` / `{prefix}.bias`.
pub fn linear<E: Element>(ctx: &mut Forward<'_, E>, x: Var, prefix: &str) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    let y = ctx.graph.matmul(x, w)?;
    ctx.graph.add_broadcast(y, b)
}

pub fn layer_norm<E: Element>(ctx: &mut Forward<'_, E>, x: Var, prefix: &str) -> Result<Var> {
    let g = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    ctx.graph.layer_norm(x, g, b, E::of(LN_EPS))
}

/// Patch embeddings `[B*T, N, D]` of a `[B, T, C, H, W]` clip.
pub fn patchify<E: Element>(
    ctx: &mut Forward<'_, E>,
    video: &Tensor<E>,
    config: &VitConfig,
) -> Result<Var> {
    let patches = extract_patches(video, config)?;
    let x = ctx.graph.constant(patches);
    linear(ctx, x, "patch_embed")
}

/// Prepends the class token to every sequence and adds positional embeddings.
pub fn prepend_class_and_pos<E: Element>(ctx: &mut Forward<'_, E>, xp: Var) -> Result<Var> {
    let sequences = ctx.graph.shape(xp)[0];
    let cls = ctx.param("cls_token")?;
    let pos = ctx.param("pos_embed")?;
    let cls = ctx.graph.repeat_leading(cls, sequences);
    let x0 = ctx.graph.concat(&[cls, xp], 1)?;
    ctx.graph.add_broadcast(x0, pos)
}

/// Multi-head self-attention over axis 1 of `z: [S, L, D]`, using the fused
/// `{prefix}.qkv` and `{prefix}.proj` projections.
pub fn msa<E: Element>(
    ctx: &mut Forward<'_, E>,
    z: Var,
    prefix: &str,
    heads: usize,
    record: Option<(usize, AttentionKind)>,
) -> Result<Var> {
    let shape = ctx.graph.shape(z).to_vec();
    if shape.len() != 3 || shape[2] % heads != 0 {
        return Err(Error::Shape {
            op: "msa",
            lhs: shape,
            rhs: vec![heads],
        });
    }
    let (s, l, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let qkv = linear(ctx, z, &format!("{prefix}.qkv"))?;
    let g2 = &mut ctx.graph;
    let qkv = g2.reshape(qkv, &[s, l, 3, heads, dh])?;
    let qkv = g2.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g2.reshape(qkv, &[3, s * heads, l, dh])?;
    let q = g2.narrow(qkv, 0, 0, 1)?;
    let k = g2.narrow(qkv, 0, 1, 1)?;
    let v = g2.narrow(qkv, 0, 2, 1)?;
    let q = g2.reshape(q, &[s * heads, l, dh])?;
    let k = g2.reshape(k, &[s * heads, l, dh])?;
    let v = g2.reshape(v, &[s * heads, l, dh])?;
    let q = g2.scale(q, E::one() / E::of(dh as f64).sqrt());
    let scores = g2.bmm(q, k, true)?;
    let attn = g2.softmax(scores)?;
    if let Some((block, kind)) = record {
        if ctx.recording() {
            let w = ctx.graph.value(attn).reshape(&[s, heads, l, l])?;
            ctx.record(block, kind, w);
        }
    }
    let g3 = &mut ctx.graph;
    let out = g3.bmm(attn, v, false)?;
    let out = g3.reshape(out, &[s, heads, l, dh])?;
    let out = g3.permute(out, &[0, 2, 1, 3])?;
    let out = g3.reshape(out, &[s, l, d])?;
    linear(ctx, out, &format!("{prefix}.proj"))
}

pub fn mlp<E: Element>(ctx: &mut Forward<'_, E>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(ctx, x, &format!("{prefix}.fc1"))?;
    let h = ctx.graph.gelu(h);
    linear(ctx, h, &format!("{prefix}.fc2"))
}

/// Residual-branch drop (stochastic depth) per leading-axis sequence.
/// Identity unless the pass was built with an RNG and `rate > 0`.
pub fn drop_path<E: Element>(ctx: &mut Forward<'_, E>, branch: Var, rate: f64) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(branch);
    }
    let shape = ctx.graph.shape(branch).to_vec();
    let Some(rng) = ctx.drop_rng() else {
        return Ok(branch);
    };
    let keep = 1.0 - rate;
    let per_seq: usize = shape[1..].iter().product();
    let flags: Vec<bool> = (0..shape[0]).map(|_| rng.gen_bool(keep)).collect();
    let scale = E::of(1.0 / keep);
    let mask = Tensor::from_fn(&shape, |i| if flags[i / per_seq] { scale } else { E::zero() });
    ctx.graph.mul_const(branch, &mask)
}

/// Linearly increasing drop rate over depth, ending at `config.stochastic_depth_rate`.
pub fn block_drop_rate(config: &VitConfig, block: usize) -> f64 {
    if config.depth <= 1 {
        return config.stochastic_depth_rate;
    }
    config.stochastic_depth_rate * block as f64 / (config.depth - 1) as f64
}

/// Standard pre-norm block: `z' = z + MSA(LN(z))`, `out = z' + MLP(LN(z'))`.
pub fn vit_block<E: Element>(
    ctx: &mut Forward<'_, E>,
    z: Var,
    config: &VitConfig,
    block: usize,
) -> Result<Var> {
    let p = block_prefix(block);
    let rate = block_drop_rate(config, block);
    let h = layer_norm(ctx, z, &format!("{p}.norm1"))?;
    let h = msa(ctx, h, &format!("{p}.attn"), config.heads, Some((block, AttentionKind::Spatial)))?;
    let h = drop_path(ctx, h, rate)?;
    let z = ctx.graph.add(z, h)?;
    let h = layer_norm(ctx, z, &format!("{p}.norm2"))?;
    let h = mlp(ctx, h, &format!("{p}.mlp"))?;
    let h = drop_path(ctx, h, rate)?;
    ctx.graph.add(z, h)
}

/// Averages the per-frame class tokens of `z: [B*T, N+1, D]` and applies the head.
pub fn pool_and_classify<E: Element>(
    ctx: &mut Forward<'_, E>,
    z: Var,
    frames: usize,
) -> Result<Var> {
    let shape = ctx.graph.shape(z).to_vec();
    if shape[0] % frames != 0 {
        return Err(Error::Shape {
            op: "pool_and_classify",
            lhs: shape,
            rhs: vec![frames],
        });
    }
    let batch = shape[0] / frames;
    let cls = ctx.graph.narrow(z, 1, 0, 1)?;
    let cls = ctx.graph.reshape(cls, &[batch, frames, shape[2]])?;
    let pooled = ctx.graph.mean_axis(cls, 1)?;
    linear(ctx, pooled, "head")
}

/// Space-only video model: frames go through the image model independently
/// and their final class tokens are averaged before the head.
pub fn space_only_forward<E: Element>(
    ctx: &mut Forward<'_, E>,
    video: &Tensor<E>,
    config: &VitConfig,
) -> Result<Var> {
    let frames = video.shape().get(1).copied().unwrap_or(0);
    let xp = patchify(ctx, video, config)?;
    let mut z = prepend_class_and_pos(ctx, xp)?;
    for i in 0..config.depth {
        z = vit_block(ctx, z, config, i)?;
    }
    pool_and_classify(ctx, z, frames)
}
