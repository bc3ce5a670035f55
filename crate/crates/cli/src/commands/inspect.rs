use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use ultrasync_core::dsp::{self, derive_mfcc_timing};
use ultrasync_core::media_io::{self, UltrasoundSequence};
use ultrasync_core::pipeline::{self, PreprocessConfig, FRAMES_PER_WINDOW};

use crate::commands::train::write;
use crate::{merge_fields, user, write_snapshot, Resolved};

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Utterance id inside the corpus.
    #[arg(long)]
    pub id: Option<String>,
    /// Alignment offset to preprocess at (default: the recorded one).
    #[arg(long, allow_negative_numbers = true)]
    pub offset_ms: Option<f64>,
}

merge_fields!(InspectArgs { corpus, id, offset_ms });

#[derive(Debug, Serialize)]
struct Options {
    corpus: PathBuf,
    id: String,
    offset_ms: f64,
}

/// Binary P5 greyscale: one row per scanline, one column per point.
pub fn pgm(frame: &[f32], scanlines: usize, points: usize) -> Vec<u8> {
    let mut out = format!("P5\n{points} {scanlines}\n255\n").into_bytes();
    out.extend(frame.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    out
}

fn write_frames(dir: &Path, ultra: &UltrasoundSequence) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for k in 0..ultra.n_frames() {
        let path = dir.join(format!("frame_{k:05}.pgm"));
        fs::write(&path, pgm(ultra.frame(k), ultra.scanlines(), ultra.points()))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn run(global: &Resolved, args: InspectArgs) -> anyhow::Result<()> {
    let corpus = args.corpus.clone().ok_or_else(|| user("inspect needs --corpus"))?;
    let id = args.id.clone().ok_or_else(|| user("inspect needs --id"))?;
    let bundle = media_io::load_bundle(&corpus, &id)?;
    let offset = args.offset_ms.unwrap_or(bundle.params.true_offset_ms);
    let cfg = PreprocessConfig::default();
    let pre = pipeline::preprocess(&bundle, offset, &cfg)?;
    let ultra = &pre.bundle.ultra;
    let timing = derive_mfcc_timing(ultra.fps(), FRAMES_PER_WINDOW)?;
    let mfcc = dsp::mfcc(&pre.bundle.audio, &cfg.mfcc.with_timing(timing))?;

    let out = &global.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_frames(&out.join("frames"), ultra)?;
    write(out, "mfcc.csv", &mfcc.to_csv())?;

    let sr = f64::from(bundle.audio.sample_rate);
    let mut s = String::new();
    let _ = writeln!(s, "id\t{id}");
    let _ = writeln!(s, "type\t{}", bundle.params.utterance_type);
    let _ = writeln!(s, "speaker\t{}", bundle.params.speaker_id);
    let _ = writeln!(s, "session\t{}", bundle.params.session_id);
    let _ = writeln!(s, "offset_ms\t{offset}");
    let _ = writeln!(s, "raw_audio_s\t{}", bundle.audio.duration_s());
    let _ = writeln!(s, "raw_frames\t{}", bundle.ultra.n_frames());
    let _ = writeln!(s, "raw_fps\t{}", bundle.ultra.fps());
    let _ = writeln!(s, "raw_geometry\t{}x{}", bundle.ultra.scanlines(), bundle.ultra.points());
    let _ = writeln!(s, "decimated_frames\t{}", bundle.ultra.n_frames().div_ceil(cfg.keep_every));
    let _ = writeln!(s, "frames\t{}", ultra.n_frames());
    let _ = writeln!(s, "fps\t{}", ultra.fps());
    let _ = writeln!(s, "geometry\t{}x{}", ultra.scanlines(), ultra.points());
    let _ = writeln!(s, "audio_s\t{}", pre.bundle.audio.duration_s());
    let _ = writeln!(s, "mfcc_frames\t{}", mfcc.n_frames());
    let _ = writeln!(s, "mfcc_hop_s\t{}", timing.hop_s);
    let _ = writeln!(s, "zero_regions\t{}", pre.strip_log.runs.len());
    for (a, b) in &pre.strip_log.runs {
        let _ = writeln!(s, "zero_region_s\t{}\t{}", *a as f64 / sr, *b as f64 / sr);
    }
    write(out, "summary.txt", &s)?;
    write_snapshot(
        out,
        global,
        "inspect",
        &Options {
            corpus,
            id,
            offset_ms: offset,
        },
    )
}
