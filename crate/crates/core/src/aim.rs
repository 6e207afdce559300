//! The adapted block.
//!
//! One frozen attention layer is evaluated twice per block: first across the
//! frames of each token position (temporal), then across the tokens of each
//! frame (spatial). Adapters sit after both uses and in parallel with the MLP:
//!
//! ```text
//! zT  = z  + Adapter(T-MSA(LN1(z)))                     no internal skip
//! zS  = zT + Adapter(S-MSA(LN1(zT)))                    internal skip
//! out = zS + MLP(LN2(zS)) + s * Adapter(LN2(zS))        no internal skip
//! ```
//!
//! Fresh adapters have a zero up-projection, so at initialization the block
//! reproduces the frozen image block exactly.

use alloc::format;
use alloc::vec;

use crate::adapter::adapter_forward;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{AttentionKind, Forward};
use crate::tensor::Tensor;
use crate::vit::{block_drop_rate, block_prefix, drop_path, layer_norm, mlp, msa, VitConfig};

pub const TEMPORAL_POS_EMBED: &str = "temporal_pos_embed";

/// Which adaptations one block carries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptedBlockConfig {
    pub spatial_adapter: bool,
    pub temporal_adapter: bool,
    pub joint_adapter: bool,
    pub pre_temporal_adapter: bool,
    /// Weight of the joint adapter term.
    pub scale: f64,
    pub temporal_pos_embed: bool,
}

impl AdaptedBlockConfig {
    pub fn plain() -> Self {
        AdaptedBlockConfig {
            spatial_adapter: false,
            temporal_adapter: false,
            joint_adapter: false,
            pre_temporal_adapter: false,
            scale: 0.5,
            temporal_pos_embed: false,
        }
    }

    pub fn is_plain(&self) -> bool {
        !(self.spatial_adapter || self.temporal_adapter || self.joint_adapter)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pre_temporal_adapter && !self.temporal_adapter {
            return Err(Error::Config(
                "a pre-temporal adapter needs temporal adaptation".into(),
            ));
        }
        if self.temporal_pos_embed && !self.temporal_adapter {
            return Err(Error::Config(
                "temporal positional embeddings need temporal adaptation".into(),
            ));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("joint adapter scale must be finite".into()));
        }
        Ok(())
    }

    /// Adapter names of block `block`, in evaluation order.
    pub fn adapter_prefixes(&self, block: usize) -> impl Iterator<Item = (alloc::string::String, bool)> {
        let p = block_prefix(block);
        let list = [
            (self.pre_temporal_adapter, "pre_t_adapter", true),
            (self.temporal_adapter, "t_adapter", false),
            (self.spatial_adapter, "s_adapter", true),
            (self.joint_adapter, "mlp_adapter", false),
        ];
        list.into_iter()
            .filter(|(on, _, _)| *on)
            .map(move |(_, name, skip)| (format!("{p}.{name}"), skip))
    }
}

/// `[N+1, B*T, D] -> [T, B*(N+1), D]`: element `(n, b*T + t, d)` moves to
/// `(t, b*(N+1) + n, d)`.
pub fn temporal_reshape<E: Element>(z: &Tensor<E>, frames: usize) -> Result<Tensor<E>> {
    let s = z.shape();
    if s.len() != 3 || frames == 0 || s[1] % frames != 0 {
        return Err(Error::Shape {
            op: "temporal_reshape",
            lhs: s.to_vec(),
            rhs: vec![frames],
        });
    }
    let (n, b, d) = (s[0], s[1] / frames, s[2]);
    z.reshape(&[n, b, frames, d])?
        .permute(&[2, 1, 0, 3])?
        .reshape(&[frames, b * n, d])
}

/// Inverse of [`temporal_reshape`]: `[T, B*(N+1), D] -> [N+1, B*T, D]`.
pub fn temporal_restore<E: Element>(x: &Tensor<E>, tokens: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 3 || tokens == 0 || s[1] % tokens != 0 {
        return Err(Error::Shape {
            op: "temporal_restore",
            lhs: s.to_vec(),
            rhs: vec![tokens],
        });
    }
    let (t, b, d) = (s[0], s[1] / tokens, s[2]);
    x.reshape(&[t, b, tokens, d])?
        .permute(&[2, 1, 0, 3])?
        .reshape(&[tokens, b * t, d])
}

/// Frame-major tokens `[B*T, N+1, D]` to per-position frame sequences `[B*(N+1), T, D]`.
fn frames_to_tracks<E: Element>(ctx: &mut Forward<'_, E>, x: Var, frames: usize) -> Result<Var> {
    let s = ctx.graph.shape(x).to_vec();
    if s[0] % frames != 0 {
        return Err(Error::Shape {
            op: "temporal_reshape",
            lhs: s,
            rhs: vec![frames],
        });
    }
    let b = s[0] / frames;
    let x = ctx.graph.reshape(x, &[b, frames, s[1], s[2]])?;
    let x = ctx.graph.permute(x, &[0, 2, 1, 3])?;
    ctx.graph.reshape(x, &[b * s[1], frames, s[2]])
}

fn tracks_to_frames<E: Element>(ctx: &mut Forward<'_, E>, x: Var, tokens: usize) -> Result<Var> {
    let s = ctx.graph.shape(x).to_vec();
    let b = s[0] / tokens;
    let x = ctx.graph.reshape(x, &[b, tokens, s[1], s[2]])?;
    let x = ctx.graph.permute(x, &[0, 2, 1, 3])?;
    ctx.graph.reshape(x, &[b * s[1], tokens, s[2]])
}

/// Adapted block on frame-major tokens `[B*T, N+1, D]`.
///
/// Taps `blocks.{i}.temporal_branch` and `blocks.{i}.spatial_branch` are
/// recorded on the pass for inspection.
pub fn aim_block<E: Element>(
    ctx: &mut Forward<'_, E>,
    z: Var,
    config: &VitConfig,
    block: usize,
    adapted: &AdaptedBlockConfig,
    frames: usize,
) -> Result<Var> {
    adapted.validate()?;
    let p = block_prefix(block);
    let rate = block_drop_rate(config, block);
    let tokens = ctx.graph.shape(z)[1];
    let mut z = z;

    if adapted.temporal_adapter {
        let mut xt = frames_to_tracks(ctx, z, frames)?;
        if adapted.temporal_pos_embed {
            let tpe = ctx.param(TEMPORAL_POS_EMBED)?;
            xt = ctx.graph.add_broadcast(xt, tpe)?;
        }
        let mut h = layer_norm(ctx, xt, &format!("{p}.norm1"))?;
        if adapted.pre_temporal_adapter {
            h = adapter_forward(ctx, h, &format!("{p}.pre_t_adapter"), true)?;
        }
        let h = msa(ctx, h, &format!("{p}.attn"), config.heads, Some((block, AttentionKind::Temporal)))?;
        let h = adapter_forward(ctx, h, &format!("{p}.t_adapter"), false)?;
        let h = tracks_to_frames(ctx, h, tokens)?;
        ctx.tap(format!("{p}.temporal_branch"), h);
        let h = drop_path(ctx, h, rate)?;
        z = ctx.graph.add(z, h)?;
    }

    let h = layer_norm(ctx, z, &format!("{p}.norm1"))?;
    let mut h = msa(ctx, h, &format!("{p}.attn"), config.heads, Some((block, AttentionKind::Spatial)))?;
    if adapted.spatial_adapter {
        h = adapter_forward(ctx, h, &format!("{p}.s_adapter"), true)?;
    }
    ctx.tap(format!("{p}.spatial_branch"), h);
    let h = drop_path(ctx, h, rate)?;
    z = ctx.graph.add(z, h)?;

    let n = layer_norm(ctx, z, &format!("{p}.norm2"))?;
    let mut h = mlp(ctx, n, &format!("{p}.mlp"))?;
    if adapted.joint_adapter {
        let j = adapter_forward(ctx, n, &format!("{p}.mlp_adapter"), false)?;
        let j = ctx.graph.scale(j, E::of(adapted.scale));
        h = ctx.graph.add(h, j)?;
    }
    let h = drop_path(ctx, h, rate)?;
    ctx.graph.add(z, h)
}

/// Adapted block on sequence-first tokens `[N+1, B*T, D]`.
pub fn aim_block_forward<E: Element>(
    ctx: &mut Forward<'_, E>,
    z: Var,
    config: &VitConfig,
    block: usize,
    adapted: &AdaptedBlockConfig,
    frames: usize,
) -> Result<Var> {
    let x = ctx.graph.permute(z, &[1, 0, 2])?;
    let y = aim_block(ctx, x, config, block, adapted, frames)?;
    ctx.graph.permute(y, &[1, 0, 2])
}
