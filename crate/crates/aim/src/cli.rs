//! `aim` subcommands: count-params, gradcheck, train, attention-dump.
//!
//! Exit codes: 0 success, 1 runtime or check failure, 2 usage error.
//! `--config FILE` splices `key = value` lines in as flags; flags given on the
//! command line win.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use aim_core::gradcheck::{check_model, ModelCheck};
use aim_core::model::{count_params, millions, AdaptationPolicy, AimModel, Mode, Positions};
use aim_core::optim::AdamWConfig;
use aim_core::toy::{TaskKind, ToyGenerator, ToyVideoTask};
use aim_core::train::{evaluate, train, TrainConfig};
use aim_core::{seeded_rng, ParamStore, VitConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::conf;
use crate::dump;
use crate::metrics::MetricsWriter;
use crate::prefetch::Prefetch;
use crate::{AimError, Result};

#[derive(Parser, Debug)]
#[command(name = "aim", version, about = "Adapt a frozen image transformer to video", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print total and tunable parameter counts.
    CountParams(Flags),
    /// Finite-difference check of a tiny model in double precision.
    Gradcheck(Flags),
    /// Train on a synthetic video task; writes a JSON-lines log and a checkpoint.
    Train(Flags),
    /// Write attention maps of one clip as CSV and PGM files.
    AttentionDump(Flags),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Vitb16,
    Vitl14,
    Tiny,
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Frozen,
    Finetune,
    Spatial,
    SpatialTemporal,
    Aim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Match,
    Ordered,
}

fn value_name<V: ValueEnum>(v: &V) -> String {
    v.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default()
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Frozen => Mode::FrozenSpaceOnly,
            ModeArg::Finetune => Mode::FullFinetuneSpaceOnly,
            ModeArg::Spatial => Mode::Spatial,
            ModeArg::SpatialTemporal => Mode::SpatialTemporal,
            ModeArg::Aim => Mode::Aim,
        }
    }
}

/// `all`, `top:K`, `bottom:K` or `every-other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionsArg(pub Positions);

impl std::str::FromStr for PositionsArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let count = |k: &str| k.parse::<usize>().map_err(|_| format!("bad block count `{k}`"));
        let p = match s {
            "all" => Positions::All,
            "every-other" => Positions::EveryOther,
            _ => match s.split_once(':') {
                Some(("top", k)) => Positions::Top(count(k)?),
                Some(("bottom", k)) => Positions::Bottom(count(k)?),
                _ => return Err(format!("expected all, top:K, bottom:K or every-other, got `{s}`")),
            },
        };
        Ok(PositionsArg(p))
    }
}

impl fmt::Display for PositionsArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Positions::All => write!(f, "all"),
            Positions::EveryOther => write!(f, "every-other"),
            Positions::Top(k) => write!(f, "top:{k}"),
            Positions::Bottom(k) => write!(f, "bottom:{k}"),
        }
    }
}

/// Flags shared by every subcommand. Defaults marked "per command" are:
/// count-params vitb16 / 400 classes / 8 frames, gradcheck tiny / 2 classes /
/// 2 frames, train and attention-dump tiny / 2 classes / 4 frames.
#[derive(Args, Debug, Clone)]
pub struct Flags {
    /// Backbone preset [default: per command]
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, value_enum, default_value = "aim")]
    pub mode: ModeArg,
    /// Adapter bottleneck ratio
    #[arg(long, default_value_t = 0.25)]
    pub ratio: f64,
    /// Blocks that receive adapters
    #[arg(long, default_value = "all")]
    pub positions: PositionsArg,
    /// Extra skip adapter before the temporal attention
    #[arg(long)]
    pub pre_temporal_adapter: bool,
    /// Weight of the adapter beside the MLP
    #[arg(long, default_value_t = 0.5)]
    pub scale: f64,
    /// Learnable per-frame embedding on the temporal path
    #[arg(long)]
    pub temporal_pos_embed: bool,
    /// Number of classes [default: per command]
    #[arg(long)]
    pub classes: Option<usize>,
    /// Frames per clip [default: per command]
    #[arg(long)]
    pub frames: Option<usize>,
    /// Stochastic depth rate at the last block
    #[arg(long, default_value_t = 0.0)]
    pub drop_path: f64,

    #[arg(long, value_enum, default_value = "match")]
    pub task: TaskArg,
    /// Glyph bank size for the match task
    #[arg(long, default_value_t = 256)]
    pub glyphs: usize,
    /// Chance that a matching clip shows a square-stamped glyph
    #[arg(long, default_value_t = 1.0)]
    pub cue: f64,
    /// Pixel noise standard deviation
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 600)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Peak learning rate
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub warmup_frac: f64,
    #[arg(long, default_value_t = 5e-2)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// [default: 0.1 for the ordered task, 0 otherwise]
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    /// Evaluate every N steps (0: only after training)
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 1000)]
    pub eval_samples: usize,
    /// Batches generated ahead of the optimizer
    #[arg(long, default_value_t = 2)]
    pub prefetch: usize,

    #[arg(long, default_value = "run.aimc")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "run.jsonl")]
    pub log: PathBuf,
    /// Save only the tunable parameters
    #[arg(long)]
    pub adapter_only: bool,
    /// Blocks to dump, comma separated, or `all`
    #[arg(long, default_value = "all")]
    pub blocks: String,
    /// Output directory for attention dumps
    #[arg(long, default_value = "attention")]
    pub out: PathBuf,

    /// Coordinates sampled by gradcheck
    #[arg(long, default_value_t = 240)]
    pub coordinates: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Skew one analytic gradient so gradcheck must fail
    #[arg(long)]
    pub corrupt: bool,

    /// `key = value` file of flags; explicit flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
}

struct Defaults {
    preset: Preset,
    classes: usize,
    frames: usize,
}

impl Flags {
    fn vit(&self, d: Defaults) -> Result<VitConfig> {
        let classes = self.classes.unwrap_or(d.classes);
        let frames = self.frames.unwrap_or(d.frames);
        let mut cfg = match self.preset.unwrap_or(d.preset) {
            Preset::Vitb16 => VitConfig::vit_b16(classes, frames),
            Preset::Vitl14 => VitConfig::vit_l14(classes, frames),
            Preset::Tiny => VitConfig::tiny(classes, frames),
            Preset::Micro => VitConfig::micro(classes, frames),
        };
        cfg.stochastic_depth_rate = self.drop_path;
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }

    fn policy(&self, cfg: &VitConfig) -> Result<AdaptationPolicy> {
        let p = AdaptationPolicy {
            mode: self.mode.into(),
            ratio: self.ratio,
            positions: self.positions.0,
            pre_temporal_adapter: self.pre_temporal_adapter,
            scale: self.scale,
            temporal_pos_embed: self.temporal_pos_embed,
        };
        p.validate(cfg).map_err(usage)?;
        Ok(p)
    }

    fn task(&self, cfg: &VitConfig) -> Result<ToyVideoTask> {
        if cfg.channels != 1 {
            return Err(AimError::Usage("synthetic tasks need a single-channel preset".into()));
        }
        let kind = match self.task {
            TaskArg::Match => TaskKind::MatchAcrossFrames,
            TaskArg::Ordered => TaskKind::OrderedMotion,
        };
        let mut t = ToyVideoTask::new(kind, cfg.image_size, cfg.frames, self.seed);
        t.classes = cfg.num_classes;
        t.glyphs = self.glyphs;
        t.appearance_cue = self.cue;
        t.noise = self.noise;
        t.validate().map_err(usage)?;
        Ok(t)
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let tc = TrainConfig {
            steps: self.steps,
            batch_size: self.batch,
            base_lr: self.lr,
            warmup_frac: self.warmup_frac,
            adamw: AdamWConfig {
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            label_smoothing: self.label_smoothing.unwrap_or(match self.task {
                TaskArg::Ordered => 0.1,
                TaskArg::Match => 0.0,
            }),
            eval_every: self.eval_every,
            eval_samples: self.eval_samples,
            seed: self.seed,
        };
        tc.schedule().map_err(usage)?;
        if tc.batch_size == 0 || tc.eval_samples == 0 {
            return Err(AimError::Usage("batch and eval-samples must be positive".into()));
        }
        if !(0.0..1.0).contains(&tc.label_smoothing) {
            return Err(AimError::Usage("label smoothing must lie in [0, 1)".into()));
        }
        Ok(tc)
    }

    /// Settings that reproduce this run, as written next to the checkpoint.
    fn run_file(&self, cfg: &VitConfig) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("preset", value_name(&self.preset.unwrap_or(Preset::Tiny)));
        put("mode", value_name(&self.mode));
        put("ratio", self.ratio.to_string());
        put("positions", self.positions.to_string());
        put("pre-temporal-adapter", self.pre_temporal_adapter.to_string());
        put("scale", self.scale.to_string());
        put("temporal-pos-embed", self.temporal_pos_embed.to_string());
        put("classes", cfg.num_classes.to_string());
        put("frames", cfg.frames.to_string());
        put("drop-path", self.drop_path.to_string());
        put("task", value_name(&self.task));
        put("glyphs", self.glyphs.to_string());
        put("cue", self.cue.to_string());
        put("noise", self.noise.to_string());
        put("steps", self.steps.to_string());
        put("seed", self.seed.to_string());
        put("lr", self.lr.to_string());
        put("warmup-frac", self.warmup_frac.to_string());
        put("weight-decay", self.weight_decay.to_string());
        put("batch", self.batch.to_string());
        if let Some(ls) = self.label_smoothing {
            put("label-smoothing", ls.to_string());
        }
        m
    }
}

fn usage(e: aim_core::Error) -> AimError {
    AimError::Usage(e.to_string())
}

/// Path of the run file written beside a checkpoint.
pub fn run_file_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".conf");
    PathBuf::from(s)
}

/// Replaces `--config FILE` with the file's flags, placed right after the
/// subcommand so later command-line flags override them.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut file = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let p = it
                .next()
                .ok_or_else(|| AimError::Usage("--config needs a file".into()))?;
            file = Some(PathBuf::from(p));
        } else if let Some(p) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            file = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(file) = file else { return Ok(rest) };
    let text = std::fs::read_to_string(&file)
        .map_err(|e| AimError::Usage(format!("cannot read {}: {e}", file.display())))?;
    let extra = conf::to_args(&conf::parse(&text)?);
    let at = rest.len().min(2);
    rest.splice(at..at, extra);
    Ok(rest)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::CountParams(f) => cmd_count_params(&f, out),
        Command::Gradcheck(f) => cmd_gradcheck(&f, out),
        Command::Train(f) => cmd_train(&f, out),
        Command::AttentionDump(f) => cmd_attention_dump(&f, out),
    }
}

pub fn cmd_count_params(f: &Flags, out: &mut dyn Write) -> Result<()> {
    let cfg = f.vit(Defaults {
        preset: Preset::Vitb16,
        classes: 400,
        frames: 8,
    })?;
    let policy = f.policy(&cfg)?;
    let c = count_params(&cfg, &policy).map_err(usage)?;
    writeln!(out, "preset   {}", value_name(&f.preset.unwrap_or(Preset::Vitb16)))?;
    writeln!(out, "mode     {}", value_name(&f.mode))?;
    writeln!(out, "classes  {}", cfg.num_classes)?;
    writeln!(out, "total    {:>12}  {:>7.1}M", c.total, millions(c.total))?;
    writeln!(out, "tunable  {:>12}  {:>7.1}M", c.tunable, millions(c.tunable))?;
    writeln!(out, "frozen   {:>12}  {:>7.1}M", c.total - c.tunable, millions(c.total - c.tunable))?;
    Ok(())
}

pub fn cmd_gradcheck(f: &Flags, out: &mut dyn Write) -> Result<()> {
    let cfg = f.vit(Defaults {
        preset: Preset::Tiny,
        classes: 2,
        frames: 2,
    })?;
    if cfg.width > 32 || cfg.depth > 2 || cfg.frames > 3 {
        return Err(AimError::Usage(format!(
            "gradcheck needs width <= 32, depth <= 2, frames <= 3 (got {}, {}, {})",
            cfg.width, cfg.depth, cfg.frames
        )));
    }
    let policy = f.policy(&cfg)?;
    let opts = ModelCheck {
        coordinates: f.coordinates,
        tolerance: f.tolerance,
        seed: f.seed,
        corrupt: f.corrupt,
        ..ModelCheck::default()
    };
    let report = check_model(&cfg, &policy, &opts)?;
    writeln!(
        out,
        "checked {} coordinates in f64, max relative error {:.3e} (tolerance {:.0e})",
        report.checked, report.max_rel_error, report.tolerance
    )?;
    let worst = report
        .worst
        .as_ref()
        .map(|w| {
            format!(
                "{}[{}] analytic {:.6e} numeric {:.6e} relative error {:.3e}",
                w.coordinate.name, w.coordinate.index, w.analytic, w.numeric, w.rel_error
            )
        })
        .unwrap_or_else(|| "none".into());
    writeln!(out, "worst    {worst}")?;
    if report.passed {
        writeln!(out, "PASS")?;
        Ok(())
    } else {
        writeln!(out, "FAIL")?;
        Err(AimError::CheckFailed(worst))
    }
}

fn build(f: &Flags, cfg: &VitConfig, tc: &TrainConfig) -> Result<AimModel<f32>> {
    let policy = f.policy(cfg)?;
    Ok(AimModel::init(cfg, &policy, &mut seeded_rng(tc.model_seed()))?)
}

fn clip_defaults() -> Defaults {
    Defaults {
        preset: Preset::Tiny,
        classes: 2,
        frames: 4,
    }
}

pub fn cmd_train(f: &Flags, out: &mut dyn Write) -> Result<()> {
    let cfg = f.vit(clip_defaults())?;
    let task = f.task(&cfg)?;
    let tc = f.train_config()?;
    let mut model = build(f, &cfg, &tc)?;
    let partition = model.partition();
    let batches = Prefetch::new(ToyGenerator::new(task, tc.data_seed())?, tc.batch_size, tc.steps, f.prefetch);
    let mut log = MetricsWriter::create(&f.log)?;
    let mut write_err = None;
    let result = train(&mut model, &partition, batches, &tc, Some(&task), |rec| {
        if write_err.is_none() {
            write_err = log.write(rec).err();
        }
    });
    log.finish()?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let records = result?;
    if f.adapter_only {
        checkpoint::save_subset(&f.checkpoint, &model.params, partition.tunable.iter().map(String::as_str))?;
    } else {
        checkpoint::save(&f.checkpoint, &model.params)?;
    }
    std::fs::write(run_file_path(&f.checkpoint), conf::render(&f.run_file(&cfg)))?;
    let acc = match records.last().and_then(|r| r.eval_acc) {
        Some(a) => a,
        None => evaluate(&model, &task, tc.eval_samples, tc.eval_seed())?,
    };
    let loss = records.last().map_or(f64::NAN, |r| r.loss);
    writeln!(out, "steps {}  final loss {loss:.4}  eval accuracy {acc:.4}", records.len())?;
    writeln!(out, "checkpoint {}", f.checkpoint.display())?;
    Ok(())
}

fn parse_blocks(spec: &str, depth: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..depth).collect());
    }
    spec.split(',')
        .map(|s| {
            let b: usize = s
                .trim()
                .parse()
                .map_err(|_| AimError::Usage(format!("bad block index `{s}`")))?;
            if b >= depth {
                return Err(AimError::Usage(format!("block {b} out of range for depth {depth}")));
            }
            Ok(b)
        })
        .collect()
}

pub fn cmd_attention_dump(f: &Flags, out: &mut dyn Write) -> Result<()> {
    let cfg = f.vit(clip_defaults())?;
    let blocks = parse_blocks(&f.blocks, cfg.depth)?;
    let task = f.task(&cfg)?;
    let tc = f.train_config()?;
    let mut model = build(f, &cfg, &tc)?;
    let saved: ParamStore<f32> = checkpoint::load(&f.checkpoint)?;
    model.params.overwrite_from(&saved)?;
    let clip = ToyGenerator::new(task, tc.eval_seed())?.next_batch(1);
    let (_, maps) = model.classify_with_attention(&clip.videos)?;
    let chosen: Vec<_> = maps.into_iter().filter(|m| blocks.contains(&m.block)).collect();
    let written = dump::write_maps(&f.out, &chosen)?;
    writeln!(out, "wrote {} files to {}", written.len(), f.out.display())?;
    Ok(())
}

/// Applies `AIM_THREADS` to the global rayon pool.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("AIM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| AimError::Usage(format!("AIM_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| AimError::Usage(e.to_string()))?;
    }
    Ok(())
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let args = match expand_config(args.into_iter().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = configure_threads().and_then(|_| run(cli, &mut std::io::stdout().lock()));
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
