//! Attention maps as CSV grids and binary PGM images.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use aim_core::params::{AttentionKind, AttentionMap};

use crate::Result;

fn stem(map: &AttentionMap<f32>) -> String {
    let kind = match map.kind {
        AttentionKind::Spatial => "spatial",
        AttentionKind::Temporal => "temporal",
    };
    format!("block{}_{kind}", map.block)
}

/// One row per (sequence, head, query): spatial sequences are frames,
/// temporal sequences are token tracks.
pub fn to_csv(map: &AttentionMap<f32>) -> String {
    let s = map.weights.shape();
    let (seqs, heads, q, k) = (s[0], s[1], s[2], s[3]);
    let lead = match map.kind {
        AttentionKind::Spatial => "frame",
        AttentionKind::Temporal => "token",
    };
    let mut out = format!("{lead},head,query");
    for j in 0..k {
        let _ = write!(out, ",k{j}");
    }
    out.push('\n');
    let w = map.weights.data();
    for a in 0..seqs {
        for h in 0..heads {
            for i in 0..q {
                let _ = write!(out, "{a},{h},{i}");
                let row = &w[((a * heads + h) * q + i) * k..][..k];
                for v in row {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Head `h` rendered as a `k x (seqs * q)` binary graymap, sequences stacked
/// top to bottom.
pub fn to_pgm(map: &AttentionMap<f32>, head: usize) -> Vec<u8> {
    let s = map.weights.shape();
    let (seqs, heads, q, k) = (s[0], s[1], s[2], s[3]);
    let mut out = format!("P5\n{k} {}\n255\n", seqs * q).into_bytes();
    let w = map.weights.data();
    for a in 0..seqs {
        for i in 0..q {
            let row = &w[((a * heads + head) * q + i) * k..][..k];
            out.extend(row.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    out
}

/// Writes `<stem>.csv` and `<stem>_head<h>.pgm` for each map; returns the paths.
pub fn write_maps(dir: &Path, maps: &[AttentionMap<f32>]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for map in maps {
        let stem = stem(map);
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, to_csv(map))?;
        written.push(csv);
        for h in 0..map.weights.shape()[1] {
            let pgm = dir.join(format!("{stem}_head{h}.pgm"));
            fs::write(&pgm, to_pgm(map, h))?;
            written.push(pgm);
        }
    }
    Ok(written)
}
