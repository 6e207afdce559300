//! Without temporal position embeddings the adapted model cannot see frame order.

use aim_core::gradcheck::perturbed_model;
use aim_core::model::{AdaptationPolicy, Mode};
use aim_core::toy::{permute_frames, reverse_frames, TaskKind};
use aim_core::train::ToyRun;
use aim_core::{seeded_rng, Tensor, VitConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn clip(cfg: &VitConfig, batch: usize, seed: u64) -> Tensor<f32> {
    let mut rng = seeded_rng(seed);
    let shape = [batch, cfg.frames, cfg.channels, cfg.image_size, cfg.image_size];
    Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0))
}

fn random_perm(t: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..t).collect();
    p.shuffle(&mut seeded_rng(seed));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_models_ignore_frame_order(seed in 0u64..1_000, mode_ix in 0usize..4, frames in 2usize..5) {
        let mode = [Mode::FrozenSpaceOnly, Mode::Spatial, Mode::SpatialTemporal, Mode::Aim][mode_ix];
        let policy = AdaptationPolicy {
            pre_temporal_adapter: mode == Mode::Aim,
            ..AdaptationPolicy::with_mode(mode)
        };
        let cfg = VitConfig::micro(3, frames);
        let model = perturbed_model(&cfg, &policy, seed).unwrap().cast::<f32>();
        let x = clip(&cfg, 2, seed ^ 1);
        let y = permute_frames(&x, &random_perm(frames, seed ^ 2));
        let diff = model.classify(&x).unwrap().max_abs_diff(&model.classify(&y).unwrap()).unwrap();
        prop_assert!(diff <= 1e-5, "diff {}", diff);
    }
}

#[test]
fn trained_model_ignores_frame_order() {
    let mut run = ToyRun::recipe(TaskKind::MatchAcrossFrames, Mode::Aim, false, 3);
    run.train.steps = 40;
    let out = run.execute().unwrap();
    let x = clip(&run.vit, 4, 9);
    let base = out.model.classify(&x).unwrap();
    for s in 0..5 {
        let y = permute_frames(&x, &random_perm(run.vit.frames, s));
        assert!(base.max_abs_diff(&out.model.classify(&y).unwrap()).unwrap() <= 1e-5);
    }
}

#[test]
fn temporal_embedding_breaks_the_symmetry() {
    let cfg = VitConfig::micro(2, 3);
    let policy = AdaptationPolicy {
        temporal_pos_embed: true,
        ..AdaptationPolicy::default()
    };
    let model = perturbed_model(&cfg, &policy, 4).unwrap().cast::<f32>();
    let x = clip(&cfg, 1, 5);
    let diff = model.classify(&x).unwrap().max_abs_diff(&model.classify(&reverse_frames(&x)).unwrap()).unwrap();
    assert!(diff > 1e-4, "diff {diff}");
}
