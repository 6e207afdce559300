//! Synthetic video classification tasks.
//!
//! * `MatchAcrossFrames`: class 1 shows one glyph in every frame, class 0
//!   shows independently drawn glyphs (never all identical). The label does
//!   not depend on frame order but does depend on comparing frames.
//! * `OrderedMotion`: a dot moves at constant speed, left to right (class 0)
//!   or right to left (class 1). Reversing the frames flips the label.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    MatchAcrossFrames,
    OrderedMotion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyVideoTask {
    pub kind: TaskKind,
    /// Frames are `canvas x canvas`, one channel.
    pub canvas: usize,
    pub frames: usize,
    pub classes: usize,
    /// Seeds the glyph bank; sample streams are seeded separately.
    pub seed: u64,
    /// Size of the glyph bank for `MatchAcrossFrames`.
    pub glyphs: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Probability that a matching clip takes its glyph from the cue family
    /// (even bank indices) rather than from the whole bank. Gives single
    /// frames a weak hint of the label; 0 makes frames uninformative alone.
    pub appearance_cue: f64,
}

impl ToyVideoTask {
    pub fn new(kind: TaskKind, canvas: usize, frames: usize, seed: u64) -> Self {
        ToyVideoTask {
            kind,
            canvas,
            frames,
            classes: 2,
            seed,
            glyphs: 16,
            noise: 0.05,
            appearance_cue: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes != 2 {
            return Err(Error::Config("toy tasks are binary".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("toy tasks need at least two frames".into()));
        }
        match self.kind {
            TaskKind::MatchAcrossFrames if self.glyphs < 2 => {
                Err(Error::Config("need at least two glyphs".into()))
            }
            _ if !(0.0..=1.0).contains(&self.appearance_cue) => Err(Error::Config(alloc::format!(
                "appearance cue {} outside [0, 1]",
                self.appearance_cue
            ))),
            TaskKind::OrderedMotion if self.canvas < self.frames + 1 => Err(Error::Config(
                alloc::format!("canvas {} too small for {} frames of motion", self.canvas, self.frames),
            )),
            _ if self.canvas < 4 => Err(Error::Config("canvas too small".into())),
            _ => Ok(()),
        }
    }
}

/// Labeled clips, `videos: [B, T, 1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub videos: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Deterministic sample stream for one task.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    task: ToyVideoTask,
    bank: Vec<Vec<f32>>,
    rng: Rng,
}

const DOT: usize = 2;
const BACKGROUND_DENSITY: f64 = 0.15;

/// Sparse random pixels plus one four-pixel stamp: a 2x2 square for the cue
/// family, a 1x4 bar otherwise. Both stamps light the same number of pixels.
fn glyph(rng: &mut Rng, canvas: usize, square: bool) -> Vec<f32> {
    let mut g: Vec<f32> = (0..canvas * canvas)
        .map(|_| if rng.gen_bool(BACKGROUND_DENSITY) { 1.0 } else { 0.0 })
        .collect();
    let cells: [(usize, usize); 4] = if square {
        [(0, 0), (0, 1), (1, 0), (1, 1)]
    } else if rng.gen_bool(0.5) {
        [(0, 0), (0, 1), (0, 2), (0, 3)]
    } else {
        [(0, 0), (1, 0), (2, 0), (3, 0)]
    };
    let h = cells.iter().map(|c| c.0).max().unwrap() + 1;
    let w = cells.iter().map(|c| c.1).max().unwrap() + 1;
    let (r0, c0) = (rng.gen_range(0..=canvas - h.min(canvas)), rng.gen_range(0..=canvas - w.min(canvas)));
    for (dr, dc) in cells {
        if r0 + dr < canvas && c0 + dc < canvas {
            g[(r0 + dr) * canvas + c0 + dc] = 1.0;
        }
    }
    g
}

impl ToyGenerator {
    pub fn new(task: ToyVideoTask, stream_seed: u64) -> Result<Self> {
        task.validate()?;
        let mut bank_rng = seeded_rng(derive_seed(task.seed, 0x61_79_70_68));
        let mut bank: Vec<Vec<f32>> = Vec::with_capacity(task.glyphs);
        while bank.len() < task.glyphs {
            let g = glyph(&mut bank_rng, task.canvas, bank.len() % 2 == 0);
            if !bank.contains(&g) {
                bank.push(g);
            }
        }
        Ok(ToyGenerator {
            task,
            bank,
            rng: seeded_rng(stream_seed),
        })
    }

    pub fn task(&self) -> &ToyVideoTask {
        &self.task
    }

    /// Next `batch` clips; classes are balanced to within one sample.
    pub fn next_batch(&mut self, batch: usize) -> Batch {
        let t = self.task;
        let mut labels: Vec<usize> = (0..batch).map(|i| i % t.classes).collect();
        labels.shuffle(&mut self.rng);
        let frame = t.canvas * t.canvas;
        let mut data = vec![0.0f32; batch * t.frames * frame];
        for (i, &label) in labels.iter().enumerate() {
            let clip = &mut data[i * t.frames * frame..(i + 1) * t.frames * frame];
            match t.kind {
                TaskKind::MatchAcrossFrames => self.draw_glyphs(clip, label),
                TaskKind::OrderedMotion => self.draw_motion(clip, label),
            }
        }
        if self.task.noise > 0.0 {
            let n = Normal::new(0.0, self.task.noise).unwrap();
            for v in data.iter_mut() {
                *v += n.sample(&mut self.rng) as f32;
            }
        }
        let videos = Tensor::new(&[batch, t.frames, 1, t.canvas, t.canvas], data).expect("consistent shape");
        Batch { videos, labels }
    }

    fn draw_glyphs(&mut self, clip: &mut [f32], label: usize) {
        let t = self.task.frames;
        let g = self.bank.len();
        let picks: Vec<usize> = if label == 1 {
            let k = if self.rng.gen_bool(self.task.appearance_cue) {
                2 * self.rng.gen_range(0..(g + 1) / 2)
            } else {
                self.rng.gen_range(0..g)
            };
            vec![k; t]
        } else {
            loop {
                let p: Vec<usize> = (0..t).map(|_| self.rng.gen_range(0..g)).collect();
                if p.iter().any(|&x| x != p[0]) {
                    break p;
                }
            }
        };
        let frame = self.task.canvas * self.task.canvas;
        for (f, &k) in picks.iter().enumerate() {
            clip[f * frame..(f + 1) * frame].copy_from_slice(&self.bank[k]);
        }
    }

    fn draw_motion(&mut self, clip: &mut [f32], label: usize) {
        let (t, c) = (self.task.frames, self.task.canvas);
        let span = c - DOT.min(c);
        let max_speed = (span / (t - 1)).max(1);
        let speed = self.rng.gen_range(1..=max_speed);
        let travel = speed * (t - 1);
        let start = self.rng.gen_range(0..=span.saturating_sub(travel));
        let row = self.rng.gen_range(0..=c - DOT.min(c));
        for f in 0..t {
            let step = if label == 0 { f } else { t - 1 - f };
            let x = start + speed * step;
            for dy in 0..DOT.min(c) {
                for dx in 0..DOT.min(c) {
                    clip[f * c * c + (row + dy) * c + x + dx] = 1.0;
                }
            }
        }
    }
}

impl Iterator for ToyGenerator {
    type Item = Batch;

    /// Endless stream of single-clip batches; use [`ToyGenerator::next_batch`] for larger ones.
    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch(1))
    }
}

/// One batch from a fresh stream seeded by `seed`.
pub fn generate_toy_batch(task: &ToyVideoTask, batch: usize, seed: u64) -> Result<Batch> {
    Ok(ToyGenerator::new(*task, seed)?.next_batch(batch))
}

/// Reverses the frame order of every clip.
pub fn reverse_frames(videos: &Tensor<f32>) -> Tensor<f32> {
    let t = videos.shape()[1];
    let perm: Vec<usize> = (0..t).rev().collect();
    permute_frames(videos, &perm)
}

/// Applies a frame permutation (`out[f] = in[perm[f]]`) to every clip.
pub fn permute_frames(videos: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let s = videos.shape();
    let t = s[1];
    let frame: usize = s[2..].iter().product();
    Tensor::from_fn(s, |i| {
        let clip = i / (t * frame);
        let f = (i / frame) % t;
        videos.data()[(clip * t + perm[f]) * frame + i % frame]
    })
}
