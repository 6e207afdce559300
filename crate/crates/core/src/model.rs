//! Whole-model assembly: adaptation policies, the freeze partition, parameter
//! accounting and classification.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::adapter::{bottleneck, AdapterConfig, AdapterParams};
use crate::aim::{aim_block, AdaptedBlockConfig, TEMPORAL_POS_EMBED};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{AttentionMap, Forward, ParamStore, Trainable};
use crate::rng::{seeded_rng, Rng};
use crate::tensor::Tensor;
use crate::vit::{init_backbone, patchify, pool_and_classify, prepend_class_and_pos, vit_block, VitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Linear probe: only the head trains.
    FrozenSpaceOnly,
    /// Every parameter trains, no adapters.
    FullFinetuneSpaceOnly,
    Spatial,
    SpatialTemporal,
    Aim,
}

impl Mode {
    pub fn uses_adapters(self) -> bool {
        matches!(self, Mode::Spatial | Mode::SpatialTemporal | Mode::Aim)
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, Mode::SpatialTemporal | Mode::Aim)
    }
}

/// Blocks that receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positions {
    All,
    /// The `k` blocks closest to the output.
    Top(usize),
    /// The `k` blocks closest to the input.
    Bottom(usize),
    /// Blocks 0, 2, 4, ...
    EveryOther,
}

impl Positions {
    pub fn resolve(self, depth: usize) -> Result<Vec<usize>> {
        let picked: Vec<usize> = match self {
            Positions::All => (0..depth).collect(),
            Positions::Top(k) | Positions::Bottom(k) if k > depth => {
                return Err(Error::Config(format!("{k} adapter positions requested but depth is {depth}")))
            }
            Positions::Top(k) => (depth - k..depth).collect(),
            Positions::Bottom(k) => (0..k).collect(),
            Positions::EveryOther => (0..depth).step_by(2).collect(),
        };
        Ok(picked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationPolicy {
    pub mode: Mode,
    pub ratio: f64,
    pub positions: Positions,
    pub pre_temporal_adapter: bool,
    pub scale: f64,
    pub temporal_pos_embed: bool,
}

impl Default for AdaptationPolicy {
    fn default() -> Self {
        AdaptationPolicy {
            mode: Mode::Aim,
            ratio: 0.25,
            positions: Positions::All,
            pre_temporal_adapter: false,
            scale: 0.5,
            temporal_pos_embed: false,
        }
    }
}

impl AdaptationPolicy {
    pub fn with_mode(mode: Mode) -> Self {
        AdaptationPolicy {
            mode,
            ..Default::default()
        }
    }

    pub fn validate(&self, config: &VitConfig) -> Result<()> {
        if self.pre_temporal_adapter && !self.mode.is_temporal() {
            return Err(Error::Config(
                "--pre-temporal-adapter needs a temporal mode (spatial-temporal or aim)".into(),
            ));
        }
        if self.temporal_pos_embed && !self.mode.is_temporal() {
            return Err(Error::Config(
                "--temporal-pos-embed needs a temporal mode (spatial-temporal or aim)".into(),
            ));
        }
        if self.mode.uses_adapters() {
            AdapterConfig::new(config.width, self.ratio, true)?;
            if self.positions.resolve(config.depth)?.is_empty() {
                return Err(Error::Config("adaptation enabled but no block selected".into()));
            }
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("scale must be finite".into()));
        }
        Ok(())
    }

    /// Configuration of an adapted block, or `None` for backbone-only modes.
    pub fn block_config(&self) -> Option<AdaptedBlockConfig> {
        if !self.mode.uses_adapters() {
            return None;
        }
        let temporal = self.mode.is_temporal();
        Some(AdaptedBlockConfig {
            spatial_adapter: true,
            temporal_adapter: temporal,
            joint_adapter: self.mode == Mode::Aim,
            pre_temporal_adapter: temporal && self.pre_temporal_adapter,
            scale: self.scale,
            temporal_pos_embed: temporal && self.temporal_pos_embed,
        })
    }

    pub fn adapters_per_block(&self) -> usize {
        self.block_config()
            .map(|b| {
                [b.spatial_adapter, b.temporal_adapter, b.joint_adapter, b.pre_temporal_adapter]
                    .iter()
                    .filter(|&&on| on)
                    .count()
            })
            .unwrap_or(0)
    }

    /// Per-block plan: `Some` where adapters go.
    pub fn plan(&self, depth: usize) -> Result<Vec<Option<AdaptedBlockConfig>>> {
        let mut plan = alloc::vec![None; depth];
        if let Some(block) = self.block_config() {
            for i in self.positions.resolve(depth)? {
                plan[i] = Some(block);
            }
        }
        Ok(plan)
    }
}

/// Disjoint, exhaustive split of parameter names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePartition {
    pub tunable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl FreezePartition {
    pub fn for_policy<'n>(names: impl IntoIterator<Item = &'n str>, mode: Mode) -> Self {
        let mut tunable = BTreeSet::new();
        let mut frozen = BTreeSet::new();
        for name in names {
            if is_tunable(name, mode) {
                tunable.insert(name.to_string());
            } else {
                frozen.insert(name.to_string());
            }
        }
        FreezePartition { tunable, frozen }
    }

    pub fn is_tunable(&self, name: &str) -> bool {
        self.tunable.contains(name)
    }

    /// True when the two sets are disjoint and together name exactly `store`'s entries.
    pub fn partitions<E: Element>(&self, store: &ParamStore<E>) -> bool {
        self.tunable.is_disjoint(&self.frozen)
            && self.tunable.len() + self.frozen.len() == store.len()
            && store.names().all(|n| self.tunable.contains(n) || self.frozen.contains(n))
    }
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

fn is_adapter(name: &str) -> bool {
    name.contains("adapter.")
}

fn is_tunable(name: &str, mode: Mode) -> bool {
    match mode {
        Mode::FrozenSpaceOnly => is_head(name),
        Mode::FullFinetuneSpaceOnly => true,
        Mode::Spatial | Mode::SpatialTemporal | Mode::Aim => {
            is_head(name) || is_adapter(name) || name == TEMPORAL_POS_EMBED
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub tunable: usize,
}

/// Closed-form parameter counts. The reused attention layer is counted once.
pub fn count_params(config: &VitConfig, policy: &AdaptationPolicy) -> Result<ParamCount> {
    config.validate()?;
    policy.validate(config)?;
    let d = config.width;
    let m = config.mlp_width();
    let head = d * config.num_classes + config.num_classes;
    let per_block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
    let backbone = config.patch_dim() * d + d + d + config.tokens() * d + config.depth * per_block;

    let adapters = if policy.mode.uses_adapters() {
        let b = bottleneck(d, policy.ratio);
        let blocks = policy.positions.resolve(config.depth)?.len();
        blocks * policy.adapters_per_block() * (2 * d * b + b + d)
    } else {
        0
    };
    let tpe = if policy.mode.is_temporal() && policy.temporal_pos_embed {
        config.frames * d
    } else {
        0
    };
    let total = backbone + head + adapters + tpe;
    let tunable = match policy.mode {
        Mode::FrozenSpaceOnly => head,
        Mode::FullFinetuneSpaceOnly => total,
        _ => head + adapters + tpe,
    };
    Ok(ParamCount { total, tunable })
}

/// Every parameter name and shape a model built from `config` and `policy` holds.
pub fn param_shapes(config: &VitConfig, policy: &AdaptationPolicy) -> Result<Vec<(String, Vec<usize>)>> {
    config.validate()?;
    policy.validate(config)?;
    let mut out = config.param_shapes();
    for (i, block) in policy.plan(config.depth)?.iter().enumerate() {
        if let Some(block) = block {
            for (prefix, skip) in block.adapter_prefixes(i) {
                out.extend(AdapterConfig::new(config.width, policy.ratio, skip)?.param_shapes(&prefix));
            }
        }
    }
    if policy.mode.is_temporal() && policy.temporal_pos_embed {
        out.push((TEMPORAL_POS_EMBED.to_string(), alloc::vec![config.frames, config.width]));
    }
    Ok(out)
}

/// Parameter count in millions, one decimal, half-up.
pub fn millions(count: usize) -> f64 {
    libm::floor(count as f64 / 1e5 + 0.5) / 10.0
}

/// A backbone with adapters inserted according to a policy.
#[derive(Debug, Clone)]
pub struct AimModel<E: Element> {
    pub config: VitConfig,
    pub policy: AdaptationPolicy,
    pub params: ParamStore<E>,
    plan: Vec<Option<AdaptedBlockConfig>>,
}

impl<E: Element> AimModel<E> {
    /// Fresh random backbone, then adapters, both drawn from `rng`.
    pub fn init(config: &VitConfig, policy: &AdaptationPolicy, rng: &mut Rng) -> Result<Self> {
        policy.validate(config)?;
        let backbone = init_backbone(config, rng)?;
        Self::from_backbone(config, policy, backbone, rng)
    }

    /// Wraps an existing backbone, inserting freshly initialized adapters
    /// (zero up-projections) at the policy's positions.
    pub fn from_backbone(
        config: &VitConfig,
        policy: &AdaptationPolicy,
        mut params: ParamStore<E>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        policy.validate(config)?;
        for (name, shape) in config.param_shapes() {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape {
                        op: "from_backbone",
                        lhs: t.shape().to_vec(),
                        rhs: shape,
                    })
                }
                None => return Err(Error::Config(format!("backbone lacks `{name}`"))),
            }
        }
        let plan = policy.plan(config.depth)?;
        for (i, block) in plan.iter().enumerate() {
            if let Some(block) = block {
                for (prefix, skip) in block.adapter_prefixes(i) {
                    let cfg = AdapterConfig::new(config.width, policy.ratio, skip)?;
                    AdapterParams::<E>::init(&cfg, rng).insert_into(&mut params, &prefix);
                }
            }
        }
        if policy.mode.is_temporal() && policy.temporal_pos_embed {
            let std = 0.02;
            let t = Tensor::from_fn(&[config.frames, config.width], |_| {
                E::of(rand_distr::Distribution::sample(&rand_distr::Normal::new(0.0, std).unwrap(), rng))
            });
            params.insert(TEMPORAL_POS_EMBED, t);
        }
        Ok(AimModel {
            config: config.clone(),
            policy: *policy,
            params,
            plan,
        })
    }

    pub fn partition(&self) -> FreezePartition {
        FreezePartition::for_policy(self.params.names(), self.policy.mode)
    }

    pub fn block_plan(&self) -> &[Option<AdaptedBlockConfig>] {
        &self.plan
    }

    /// Logits `[B, classes]` for a `[B, T, C, H, W]` clip, recorded on `ctx`.
    pub fn forward(&self, ctx: &mut Forward<'_, E>, video: &Tensor<E>) -> Result<Var> {
        let frames = *video
            .shape()
            .get(1)
            .ok_or_else(|| Error::Shape {
                op: "classify",
                lhs: video.shape().to_vec(),
                rhs: alloc::vec![5],
            })?;
        if self.policy.temporal_pos_embed && self.policy.mode.is_temporal() && frames != self.config.frames {
            return Err(Error::Config(format!(
                "model has temporal embeddings for {} frames, clip has {frames}",
                self.config.frames
            )));
        }
        let xp = patchify(ctx, video, &self.config)?;
        let mut z = prepend_class_and_pos(ctx, xp)?;
        for (i, block) in self.plan.iter().enumerate() {
            z = match block {
                Some(b) => aim_block(ctx, z, &self.config, i, b, frames)?,
                None => vit_block(ctx, z, &self.config, i)?,
            };
        }
        pool_and_classify(ctx, z, frames)
    }

    /// Inference-only logits.
    pub fn classify(&self, video: &Tensor<E>) -> Result<Tensor<E>> {
        let mut ctx = Forward::new(&self.params, Trainable::Nothing);
        let logits = self.forward(&mut ctx, video)?;
        Ok(ctx.graph.value(logits).clone())
    }

    /// Logits plus every attention map computed on the way.
    pub fn classify_with_attention(&self, video: &Tensor<E>) -> Result<(Tensor<E>, Vec<AttentionMap<E>>)> {
        let mut ctx = Forward::new(&self.params, Trainable::Nothing).with_attention_recording();
        let logits = self.forward(&mut ctx, video)?;
        let out = ctx.graph.value(logits).clone();
        Ok((out, ctx.take_attention()))
    }

    pub fn cast<F: Element>(&self) -> AimModel<F> {
        AimModel {
            config: self.config.clone(),
            policy: self.policy,
            params: self.params.cast(),
            plan: self.plan.clone(),
        }
    }
}

/// Builds a model and its freeze partition from a seed.
pub fn build_model<E: Element>(
    config: &VitConfig,
    policy: &AdaptationPolicy,
    seed: u64,
) -> Result<(AimModel<E>, FreezePartition)> {
    let model = AimModel::init(config, policy, &mut seeded_rng(seed))?;
    let partition = model.partition();
    Ok((model, partition))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::space_only_forward;

    fn policy(mode: Mode) -> AdaptationPolicy {
        AdaptationPolicy::with_mode(mode)
    }

    #[test]
    fn positions_resolve() {
        assert_eq!(Positions::Top(6).resolve(12).unwrap(), (6..12).collect::<Vec<_>>());
        assert_eq!(Positions::Bottom(6).resolve(12).unwrap(), (0..6).collect::<Vec<_>>());
        assert_eq!(Positions::EveryOther.resolve(12).unwrap(), alloc::vec![0, 2, 4, 6, 8, 10]);
        assert!(Positions::Top(13).resolve(12).is_err());
    }

    #[test]
    fn empty_positions_with_adaptation_is_rejected() {
        let cfg = VitConfig::micro(2, 2);
        let mut p = policy(Mode::Aim);
        p.positions = Positions::Top(0);
        assert!(matches!(p.validate(&cfg), Err(Error::Config(_))));
        p.mode = Mode::FrozenSpaceOnly;
        assert!(p.validate(&cfg).is_ok());
    }

    #[test]
    fn frozen_mode_tunes_only_the_head() {
        let cfg = VitConfig::micro(3, 2);
        let (model, part) = build_model::<f32>(&cfg, &policy(Mode::FrozenSpaceOnly), 1).unwrap();
        let want: BTreeSet<String> = ["head.bias", "head.weight"].iter().map(|s| s.to_string()).collect();
        assert_eq!(part.tunable, want);
        assert!(part.partitions(&model.params));
    }

    #[test]
    fn partition_law_holds_for_every_mode() {
        let cfg = VitConfig::micro(3, 2);
        for mode in [Mode::FrozenSpaceOnly, Mode::FullFinetuneSpaceOnly, Mode::Spatial, Mode::SpatialTemporal, Mode::Aim] {
            for (pre, tpe) in [(false, false), (true, true)] {
                let mut p = policy(mode);
                if mode.is_temporal() {
                    p.pre_temporal_adapter = pre;
                    p.temporal_pos_embed = tpe;
                }
                let (model, part) = build_model::<f32>(&cfg, &p, 2).unwrap();
                assert!(part.partitions(&model.params), "{mode:?}");
                if mode.uses_adapters() {
                    for name in &part.tunable {
                        assert!(is_head(name) || is_adapter(name) || name == TEMPORAL_POS_EMBED);
                    }
                    assert!(part.frozen.iter().all(|n| !is_adapter(n)));
                }
            }
        }
    }

    #[test]
    fn closed_form_matches_built_model() {
        let cfg = VitConfig::micro(5, 3);
        for mode in [Mode::FrozenSpaceOnly, Mode::FullFinetuneSpaceOnly, Mode::Spatial, Mode::SpatialTemporal, Mode::Aim] {
            for positions in [Positions::All, Positions::Top(1), Positions::EveryOther] {
                let mut p = policy(mode);
                p.positions = positions;
                p.temporal_pos_embed = mode.is_temporal();
                p.pre_temporal_adapter = mode.is_temporal();
                let counted = count_params(&cfg, &p).unwrap();
                let (model, part) = build_model::<f32>(&cfg, &p, 3).unwrap();
                assert_eq!(counted.total, model.params.numel());
                let tunable: usize = part.tunable.iter().map(|n| model.params.get(n).unwrap().len()).sum();
                assert_eq!(counted.tunable, tunable);
                let shapes: usize = param_shapes(&cfg, &p).unwrap().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
                assert_eq!(shapes, counted.total);
            }
        }
    }

    #[test]
    fn aim_minus_spatial_is_exactly_the_extra_adapters() {
        let cfg = VitConfig::vit_b16(400, 8);
        let spatial = count_params(&cfg, &policy(Mode::Spatial)).unwrap();
        let aim = count_params(&cfg, &policy(Mode::Aim)).unwrap();
        let per = AdapterConfig::new(768, 0.25, false).unwrap().param_count();
        assert_eq!(aim.total - spatial.total, 2 * 12 * per);
        assert_eq!(aim.tunable - spatial.tunable, 2 * 12 * per);
    }

    #[test]
    fn millions_rounds_half_up() {
        assert_eq!(millions(3_684_270), 3.7);
        assert_eq!(millions(3_649_999), 3.6);
        assert_eq!(millions(3_650_000), 3.7);
    }

    #[test]
    fn none_policy_matches_space_only_backbone() {
        let cfg = VitConfig::micro(3, 2);
        let (model, _) = build_model::<f64>(&cfg, &policy(Mode::FrozenSpaceOnly), 7).unwrap();
        let video = Tensor::<f64>::from_fn(&[2, 2, 1, 4, 4], |i| (i as f64 * 0.13).sin());
        let mut ctx = Forward::new(&model.params, Trainable::Nothing);
        let l = space_only_forward(&mut ctx, &video, &cfg).unwrap();
        assert_eq!(&model.classify(&video).unwrap(), ctx.graph.value(l));
    }

    #[test]
    fn class_tokens_are_averaged_before_the_head() {
        let mut params = ParamStore::<f64>::new();
        params.insert("head.weight", Tensor::new(&[2, 2], alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        params.insert("head.bias", Tensor::zeros(&[2]));
        let mut ctx = Forward::new(&params, Trainable::Nothing);
        // two frames, class token first, one patch token each
        let z = ctx.graph.constant(
            Tensor::new(&[2, 2, 2], alloc::vec![1.0, 2.0, 9.0, 9.0, 3.0, 4.0, -9.0, 9.0]).unwrap(),
        );
        let logits = pool_and_classify(&mut ctx, z, 2).unwrap();
        assert_eq!(ctx.graph.value(logits).data(), &[2.0, 3.0]);
    }
}
