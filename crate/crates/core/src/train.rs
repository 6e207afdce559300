//! Training loop and evaluation for the toy tasks.

use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::{AdaptationPolicy, AimModel, FreezePartition, Mode};
use crate::optim::{lr_at, AdamW, AdamWConfig, ScheduleConfig};
use crate::params::{Forward, Trainable};
use crate::rng::{derive_seed, seeded_rng};
use crate::tensor::Tensor;
use crate::toy::{Batch, TaskKind, ToyGenerator, ToyVideoTask};
use crate::vit::VitConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub adamw: AdamWConfig,
    pub label_smoothing: f64,
    /// Evaluate every this many steps (and after the last); 0 disables.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_frac: 0.1,
            adamw: AdamWConfig::default(),
            label_smoothing: 0.0,
            eval_every: 0,
            eval_samples: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<ScheduleConfig> {
        ScheduleConfig::with_warmup_fraction(self.base_lr, self.steps, self.warmup_frac)
    }

    /// Seed of the model initialization.
    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, 0)
    }

    /// Seed of the training sample stream.
    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    /// Seed of the held-out evaluation stream.
    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    pub fn drop_seed(&self) -> u64 {
        derive_seed(self.seed, 3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_acc: Option<f64>,
}

/// Anything that maps a clip batch `[B, T, C, H, W]` to class predictions.
pub trait Classifier {
    fn predict(&self, videos: &Tensor<f32>) -> Result<Vec<usize>>;
}

impl Classifier for AimModel<f32> {
    fn predict(&self, videos: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.classify(videos)?;
        Ok(argmax_rows(&logits))
    }
}

pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Accuracy on `samples` clips drawn from the stream seeded by `eval_seed`.
pub fn evaluate<C: Classifier + ?Sized>(
    model: &C,
    task: &ToyVideoTask,
    samples: usize,
    eval_seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Config("evaluation needs at least one sample".into()));
    }
    let mut gen = ToyGenerator::new(*task, eval_seed)?;
    let chunk = 64;
    let mut correct = 0usize;
    let mut seen = 0usize;
    while seen < samples {
        let n = chunk.min(samples - seen);
        let b = gen.next_batch(n);
        let pred = model.predict(&b.videos)?;
        correct += pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
        seen += n;
    }
    Ok(correct as f64 / samples as f64)
}

/// One optimization step; returns the loss before the update.
pub fn train_step(
    model: &mut AimModel<f32>,
    partition: &FreezePartition,
    opt: &mut AdamW,
    batch: &Batch,
    lr: f64,
    smoothing: f64,
    drop_rng: Option<&mut crate::rng::Rng>,
    step: usize,
) -> Result<f64> {
    let (grads, value) = {
        let mut ctx = Forward::new(&model.params, Trainable::Only(&partition.tunable));
        if let Some(rng) = drop_rng {
            ctx = ctx.with_stochastic_depth(rng);
        }
        let diverged = |e: Error| match e {
            Error::Numeric { .. } => Error::Divergence { step },
            other => other,
        };
        let logits = model.forward(&mut ctx, &batch.videos).map_err(diverged)?;
        let loss = ctx
            .graph
            .cross_entropy(logits, &batch.labels, smoothing as f32)
            .map_err(diverged)?;
        let value = ctx.graph.value(loss).item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence { step });
        }
        ctx.graph.backward(loss)?;
        let mut grads = ctx.take_grads();
        for name in &partition.tunable {
            if !grads.contains_key(name) {
                // parameter did not reach the loss on this pass
                let n = model.params.get(name).map_or(0, |t| t.len());
                grads.insert(name.clone(), vec![0.0; n]);
            }
        }
        (grads, value)
    };
    if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence { step });
    }
    opt.step(&mut model.params, &grads, lr)?;
    Ok(value)
}

/// Trains the tunable partition on `batches`; `on_step` sees every record
/// as it is produced. Returns the full log (empty when `steps == 0`).
pub fn train<I, F>(
    model: &mut AimModel<f32>,
    partition: &FreezePartition,
    batches: I,
    config: &TrainConfig,
    eval_task: Option<&ToyVideoTask>,
    mut on_step: F,
) -> Result<Vec<StepRecord>>
where
    I: IntoIterator<Item = Batch>,
    F: FnMut(&StepRecord),
{
    let schedule = config.schedule()?;
    let mut opt = AdamW::new(config.adamw, &model.params, partition)?;
    let mut drop_rng = seeded_rng(config.drop_seed());
    let use_drop = model.config.stochastic_depth_rate > 0.0;
    let mut log = Vec::with_capacity(config.steps);
    let mut source = batches.into_iter();
    for step in 0..config.steps {
        let batch = source
            .next()
            .ok_or_else(|| Error::Contract("batch source ran dry".into()))?;
        let lr = lr_at(step, &schedule)?;
        let rng = if use_drop { Some(&mut drop_rng) } else { None };
        let loss = train_step(model, partition, &mut opt, &batch, lr, config.label_smoothing, rng, step)?;
        let last = step + 1 == config.steps;
        let eval_acc = match eval_task {
            Some(task) if config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || last) => {
                Some(evaluate(&*model, task, config.eval_samples, config.eval_seed())?)
            }
            _ => None,
        };
        let rec = StepRecord {
            step,
            lr,
            loss,
            eval_acc,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Endless batches of `batch_size` clips from `task`.
pub fn toy_batches(task: &ToyVideoTask, batch_size: usize, seed: u64) -> Result<impl Iterator<Item = Batch>> {
    let mut gen = ToyGenerator::new(*task, seed)?;
    Ok(core::iter::from_fn(move || Some(gen.next_batch(batch_size))))
}

/// A complete toy experiment: task, backbone, adaptation policy and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRun {
    pub task: ToyVideoTask,
    pub vit: VitConfig,
    pub policy: AdaptationPolicy,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub accuracy: f64,
    pub log: Vec<StepRecord>,
    pub model: AimModel<f32>,
    pub partition: FreezePartition,
}

/// Glyph bank size of the reference toy recipe.
pub const RECIPE_GLYPHS: usize = 256;
/// Appearance cue of the reference toy recipe.
pub const RECIPE_CUE: f64 = 1.0;
pub const RECIPE_STEPS: usize = 600;
pub const RECIPE_BATCH: usize = 32;
pub const RECIPE_LR: f64 = 1e-2;
pub const RECIPE_EVAL_SAMPLES: usize = 1000;

impl ToyRun {
    /// Reference recipe: tiny backbone, four frames, two classes.
    pub fn recipe(kind: TaskKind, mode: Mode, temporal_pos_embed: bool, seed: u64) -> Self {
        let frames = 4;
        let vit = VitConfig::tiny(2, frames);
        let mut task = ToyVideoTask::new(kind, vit.image_size, frames, seed);
        task.glyphs = RECIPE_GLYPHS;
        task.appearance_cue = RECIPE_CUE;
        let policy = AdaptationPolicy {
            temporal_pos_embed,
            ..AdaptationPolicy::with_mode(mode)
        };
        let train = TrainConfig {
            steps: RECIPE_STEPS,
            batch_size: RECIPE_BATCH,
            base_lr: RECIPE_LR,
            label_smoothing: if kind == TaskKind::OrderedMotion { 0.1 } else { 0.0 },
            eval_samples: RECIPE_EVAL_SAMPLES,
            seed,
            ..TrainConfig::default()
        };
        ToyRun { task, vit, policy, train }
    }

    pub fn execute(&self) -> Result<ToyOutcome> {
        let mut model = AimModel::<f32>::init(&self.vit, &self.policy, &mut seeded_rng(self.train.model_seed()))?;
        let partition = model.partition();
        let batches = toy_batches(&self.task, self.train.batch_size, self.train.data_seed())?;
        let log = train(&mut model, &partition, batches, &self.train, None, |_| {})?;
        let accuracy = evaluate(&model, &self.task, self.train.eval_samples, self.train.eval_seed())?;
        Ok(ToyOutcome {
            accuracy,
            log,
            model,
            partition,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    struct Constant(usize);

    impl Classifier for Constant {
        fn predict(&self, videos: &Tensor<f32>) -> Result<Vec<usize>> {
            Ok(vec![self.0; videos.shape()[0]])
        }
    }

    fn micro() -> (VitConfig, ToyVideoTask) {
        let cfg = VitConfig::micro(2, 3);
        let task = ToyVideoTask::new(TaskKind::MatchAcrossFrames, cfg.image_size, 3, 1);
        (cfg, task)
    }

    #[test]
    fn constant_classifier_scores_half() {
        let (_, task) = micro();
        assert_eq!(evaluate(&Constant(0), &task, 100, 5).unwrap(), 0.5);
        assert_eq!(evaluate(&Constant(1), &task, 101, 5).unwrap() * 101.0, 50.0);
    }

    #[test]
    fn zero_steps_leave_model_untouched() {
        let (cfg, task) = micro();
        let (mut model, part) = build_model::<f32>(&cfg, &AdaptationPolicy::default(), 3).unwrap();
        let before = model.params.clone();
        let tc = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let log = train(&mut model, &part, toy_batches(&task, 4, 1).unwrap(), &tc, None, |_| {}).unwrap();
        assert!(log.is_empty());
        assert_eq!(model.params, before);
    }

    #[test]
    fn frozen_weights_stay_bitwise_equal() {
        let (cfg, task) = micro();
        let (mut model, part) = build_model::<f32>(&cfg, &AdaptationPolicy::default(), 3).unwrap();
        let before = model.params.clone();
        let tc = TrainConfig {
            steps: 5,
            batch_size: 4,
            base_lr: 1e-2,
            eval_every: 5,
            eval_samples: 8,
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let log = train(&mut model, &part, toy_batches(&task, 4, 1).unwrap(), &tc, Some(&task), |_| seen += 1).unwrap();
        assert_eq!(seen, 5);
        assert!(log[4].eval_acc.is_some() && log[3].eval_acc.is_none());
        for name in &part.frozen {
            assert_eq!(model.params.get(name), before.get(name), "{name}");
        }
        assert!(part.tunable.iter().any(|n| model.params.get(n) != before.get(n)));
    }

    #[test]
    fn divergence_is_reported_with_its_step() {
        let (cfg, task) = micro();
        let (mut model, part) = build_model::<f32>(&cfg, &AdaptationPolicy::with_mode(Mode::FullFinetuneSpaceOnly), 3).unwrap();
        let tc = TrainConfig {
            steps: 50,
            batch_size: 4,
            base_lr: 1e30,
            warmup_frac: 0.0,
            ..TrainConfig::default()
        };
        let err = train(&mut model, &part, toy_batches(&task, 4, 1).unwrap(), &tc, None, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Divergence { step } if step >= 1), "{err:?}");
    }

    #[test]
    fn run_is_reproducible() {
        let (cfg, task) = micro();
        let tc = TrainConfig {
            steps: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut model, part) = build_model::<f32>(&cfg, &AdaptationPolicy::default(), 9).unwrap();
            let log = train(&mut model, &part, toy_batches(&task, 4, tc.data_seed()).unwrap(), &tc, None, |_| {}).unwrap();
            (log, model.params)
        };
        assert_eq!(run(), run());
    }
}
