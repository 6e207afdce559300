//! Baseline runs behind the toy acceptance thresholds.
//!
//! cargo run --release -p aim-core --features parallel --example calibrate -- [match|ordered] [seeds]

use std::time::Instant;

use aim_core::model::Mode;
use aim_core::toy::TaskKind;
use aim_core::train::ToyRun;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = match args.get(1).map(String::as_str) {
        Some("ordered") => TaskKind::OrderedMotion,
        _ => TaskKind::MatchAcrossFrames,
    };
    let seeds: Vec<u64> = args
        .get(2)
        .map(|s| s.split(',').map(|x| x.parse().expect("seed list")).collect())
        .unwrap_or(vec![0, 1, 2]);
    let arms: Vec<(Mode, bool)> = match kind {
        TaskKind::MatchAcrossFrames => vec![
            (Mode::FrozenSpaceOnly, false),
            (Mode::Spatial, false),
            (Mode::SpatialTemporal, false),
            (Mode::Aim, false),
        ],
        TaskKind::OrderedMotion => vec![(Mode::Aim, false), (Mode::Aim, true)],
    };
    for &seed in &seeds {
        for &(mode, tpe) in &arms {
            let start = Instant::now();
            let out = ToyRun::recipe(kind, mode, tpe, seed).execute().expect("run");
            let tail = out.log.iter().rev().take(20).map(|r| r.loss).sum::<f64>() / 20.0;
            println!(
                "{kind:?} seed={seed} mode={mode:?} temporal_pos_embed={tpe} accuracy={:.3} final_loss={tail:.4} seconds={:.0}",
                out.accuracy,
                start.elapsed().as_secs_f64()
            );
        }
    }
}
