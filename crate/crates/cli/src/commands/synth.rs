use std::fs;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use ultrasync_core::synth::{self, SynthConfig};

use crate::{merge_fields, user, write_snapshot, Resolved};

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    #[arg(long)]
    pub speakers: Option<usize>,
    /// Utterances per speaker.
    #[arg(long)]
    pub utterances: Option<usize>,
    /// Sessions per speaker.
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long)]
    pub min_duration_s: Option<f64>,
    #[arg(long)]
    pub max_duration_s: Option<f64>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
    /// Comma-separated list of true offsets (ms) to draw from.
    #[arg(long, value_delimiter = ',')]
    pub offsets_ms: Option<Vec<f64>>,
    #[arg(long)]
    pub speckle_std: Option<f64>,
    #[arg(long)]
    pub snr_db: Option<f64>,
    #[arg(long)]
    pub articulatory_fraction: Option<f64>,
    #[arg(long)]
    pub gap_probability: Option<f64>,
}

merge_fields!(SynthArgs {
    speakers,
    utterances,
    sessions,
    min_duration_s,
    max_duration_s,
    fps,
    sample_rate,
    offsets_ms,
    speckle_std,
    snr_db,
    articulatory_fraction,
    gap_probability,
});

#[derive(Debug, Clone, Serialize)]
struct Options {
    speakers: usize,
    utterances: usize,
    sessions: usize,
    min_duration_s: f64,
    max_duration_s: f64,
    fps: f64,
    sample_rate: u32,
    scanlines: usize,
    points: usize,
    offsets_ms: Vec<f64>,
    speckle_std: f64,
    snr_db: f64,
    articulatory_fraction: f64,
    gap_probability: f64,
}

impl SynthArgs {
    pub fn to_config(&self, seed: u64) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            n_speakers: self.speakers.unwrap_or(d.n_speakers),
            n_utterances_per_speaker: self.utterances.unwrap_or(d.n_utterances_per_speaker),
            n_sessions_per_speaker: self.sessions.unwrap_or(d.n_sessions_per_speaker),
            duration_range_s: (
                self.min_duration_s.unwrap_or(d.duration_range_s.0),
                self.max_duration_s.unwrap_or(d.duration_range_s.1),
            ),
            fps: self.fps.unwrap_or(d.fps),
            sample_rate: self.sample_rate.unwrap_or(d.sample_rate),
            offsets_ms: self.offsets_ms.clone().unwrap_or(d.offsets_ms.clone()),
            speckle_std: self.speckle_std.unwrap_or(d.speckle_std),
            audio_snr_db: self.snr_db.unwrap_or(d.audio_snr_db),
            articulatory_fraction: self.articulatory_fraction.unwrap_or(d.articulatory_fraction),
            gap_probability: self.gap_probability.unwrap_or(d.gap_probability),
            seed,
            ..d
        }
    }
}

pub fn run(global: &Resolved, args: SynthArgs) -> anyhow::Result<()> {
    let cfg = args.to_config(global.seed);
    cfg.validate()?;
    let dir = &global.out;
    if dir.exists() && !dir.is_dir() {
        return Err(user(format!("output path {} is not a directory", dir.display())));
    }
    // stale manifests from an earlier run must not survive a failure
    let manifest = dir.join("manifest.tsv");
    if manifest.exists() {
        fs::remove_file(&manifest).with_context(|| format!("removing {}", manifest.display()))?;
    }
    log::info!("generating {} utterances into {}", cfg.total_utterances(), dir.display());
    let entries = synth::gen_corpus(&cfg, dir)?;
    let total: f64 = entries.iter().map(|e| e.duration_s).sum();
    log::info!("wrote {} utterances, {:.1} min of audio", entries.len(), total / 60.0);
    let opts = Options {
        speakers: cfg.n_speakers,
        utterances: cfg.n_utterances_per_speaker,
        sessions: cfg.n_sessions_per_speaker,
        min_duration_s: cfg.duration_range_s.0,
        max_duration_s: cfg.duration_range_s.1,
        fps: cfg.fps,
        sample_rate: cfg.sample_rate,
        scanlines: cfg.scanlines,
        points: cfg.points,
        offsets_ms: cfg.offsets_ms.clone(),
        speckle_std: cfg.speckle_std,
        snr_db: cfg.audio_snr_db,
        articulatory_fraction: cfg.articulatory_fraction,
        gap_probability: cfg.gap_probability,
    };
    write_snapshot(dir, global, "synth", &opts)
}
