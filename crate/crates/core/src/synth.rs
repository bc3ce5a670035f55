//! Synthetic corpus with a known audio-lead offset per utterance.
//!
//! A slowly varying latent `z ∈ [0, 1]` drives both modalities: it sets the
//! depth of a bright ridge in every ultrasound scanline, and the pitch and
//! loudness of a harmonic tone. Offsets are realised by prepending
//! noise-only audio.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::media_io::{self, AudioSignal, UltrasoundSequence, UtteranceBundle, UtteranceParams, UtteranceType};
use crate::seed::derive_seed;

/// Largest allowed frame-to-frame change of the latent.
pub const MAX_STEP: f64 = 0.09;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub n_utterances_per_speaker: usize,
    pub n_sessions_per_speaker: usize,
    pub duration_range_s: (f64, f64),
    pub fps: f64,
    pub sample_rate: u32,
    pub scanlines: usize,
    pub points: usize,
    /// Drawn uniformly per utterance.
    pub offsets_ms: Vec<f64>,
    /// Std of the multiplicative ultrasound speckle.
    pub speckle_std: f64,
    pub audio_snr_db: f64,
    /// Share of small-movement (type D) utterances; the rest are split over A, B and C.
    pub articulatory_fraction: f64,
    /// Probability that an utterance receives an exact-zero audio gap.
    pub gap_probability: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 12,
            n_utterances_per_speaker: 20,
            n_sessions_per_speaker: 2,
            duration_range_s: (4.0, 8.0),
            fps: 121.5,
            sample_rate: 22050,
            scanlines: media_io::DEFAULT_SCANLINES,
            points: media_io::DEFAULT_POINTS,
            offsets_ms: (0..12).map(|k| 45.0 * f64::from(k)).collect(),
            speckle_std: 0.25,
            audio_snr_db: 20.0,
            articulatory_fraction: 0.1,
            gap_probability: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.duration_range_s;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("bad duration range {lo}..{hi}")));
        }
        if self.offsets_ms.is_empty() || self.offsets_ms.iter().any(|o| !(*o >= 0.0)) {
            return Err(Error::Config("offsets must be a non-empty list of non-negative values".into()));
        }
        if !(self.fps > 0.0) || self.sample_rate == 0 || self.scanlines == 0 || self.points < 8 {
            return Err(Error::Config("bad frame rate, sample rate or frame geometry".into()));
        }
        if self.n_sessions_per_speaker == 0 {
            return Err(Error::Config("need at least one session per speaker".into()));
        }
        for (name, p) in [
            ("articulatory fraction", self.articulatory_fraction),
            ("gap probability", self.gap_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.speckle_std >= 0.0) {
            return Err(Error::Config("speckle std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn total_utterances(&self) -> usize {
        self.n_speakers * self.n_utterances_per_speaker
    }
}

// ---------------------------------------------------------------------------
// Latent

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub z: Vec<f64>,
    pub fps: f64,
}

impl LatentTrajectory {
    /// Tone amplitude implied by the latent.
    pub fn envelope(&self) -> Vec<f64> {
        self.z.iter().map(|&z| amplitude(z)).collect()
    }

    pub fn duration_s(&self) -> f64 {
        self.z.len() as f64 / self.fps
    }

    /// Linear interpolation at time `t` seconds, clamped at the ends.
    pub fn at(&self, t: f64) -> f64 {
        let x = (t * self.fps).max(0.0);
        let i = x.floor() as usize;
        match (self.z.get(i), self.z.get(i + 1)) {
            (Some(&a), Some(&b)) => a + (b - a) * (x - i as f64),
            (Some(&a), None) => a,
            _ => self.z.last().copied().unwrap_or(0.0),
        }
    }
}

pub fn amplitude(z: f64) -> f64 {
    0.1 + 0.8 * z
}

pub fn fundamental_hz(z: f64) -> f64 {
    120.0 + 180.0 * z
}

fn raised_cosine(x: f64) -> f64 {
    0.5 - 0.5 * (PI * x.clamp(0.0, 1.0)).cos()
}

/// Full-range latent.
pub fn gen_trajectory(duration_s: f64, fps: f64, seed: u64) -> Result<LatentTrajectory> {
    gen_trajectory_in(duration_s, fps, (0.0, 1.0), seed)
}

/// Sum of 3–6 sinusoids (0.5–4 Hz, equal amplitudes), min–max mapped onto
/// `range`, with a few rest segments where the latent eases down to the
/// bottom of the range and holds.
pub fn gen_trajectory_in(duration_s: f64, fps: f64, range: (f64, f64), seed: u64) -> Result<LatentTrajectory> {
    if !(duration_s > 0.0) || !(fps > 0.0) {
        return Err(Error::Domain(format!("duration {duration_s} s at {fps} fps")));
    }
    let (lo, hi) = range;
    if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
        return Err(Error::Domain(format!("latent range {lo}..{hi} outside [0, 1]")));
    }
    let n = ((duration_s * fps).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(3..=6);
    let comps: Vec<(f64, f64, f64)> = (0..k)
        .map(|_| {
            let f = rng.random_range(0.5..4.0);
            (f, 1.0, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fps;
            comps.iter().map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum()
        })
        .collect();
    let (mn, mx) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (mx - mn).max(1e-12);
    let mut u: Vec<f64> = raw.iter().map(|v| (v - mn) / span).collect();

    // rest segments: ease to 0, hold, ease back
    let n_rest = rng.random_range(0..=2usize);
    let ramp = 0.25 * fps;
    for _ in 0..n_rest {
        let len = rng.random_range(0.3..0.8) * fps;
        if (n as f64) < len + 2.0 * ramp {
            break;
        }
        let start = rng.random_range(0.0..(n as f64 - len - 2.0 * ramp));
        for (i, v) in u.iter_mut().enumerate() {
            let x = i as f64 - start;
            let w = if x < 0.0 || x > len + 2.0 * ramp {
                0.0
            } else if x < ramp {
                raised_cosine(x / ramp)
            } else if x > len + ramp {
                raised_cosine((len + 2.0 * ramp - x) / ramp)
            } else {
                1.0
            };
            *v *= 1.0 - w;
        }
    }

    let mut z: Vec<f64> = u.iter().map(|v| lo + (hi - lo) * v).collect();
    let max_step = z.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    if max_step > MAX_STEP {
        // shrink towards the bottom of the range until the step bound holds
        let s = MAX_STEP / max_step;
        for v in &mut z {
            *v = lo + (*v - lo) * s;
        }
    }
    Ok(LatentTrajectory { z, fps })
}

// ---------------------------------------------------------------------------
// Rendering

/// Per-speaker rendering geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerStyle {
    /// Ridge depth (points) at z = 0 on the middle scanline.
    pub base_depth: f64,
    /// Ridge travel (points) from z = 0 to z = 1.
    pub travel: f64,
    /// Extra depth at the outermost scanlines.
    pub curvature: f64,
    pub ridge_width: f64,
    pub ridge_gain: f64,
    pub background: f64,
    /// First point and height of the static artefact band.
    pub artefact: (usize, usize),
    pub artefact_gain: f64,
}

impl Default for SpeakerStyle {
    fn default() -> Self {
        Self {
            base_depth: 120.0,
            travel: 150.0,
            curvature: 40.0,
            ridge_width: 7.0,
            ridge_gain: 190.0,
            background: 25.0,
            artefact: (18, 6),
            artefact_gain: 150.0,
        }
    }
}

impl SpeakerStyle {
    pub fn for_speaker(seed: u64, speaker: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("style/{speaker}")));
        Self {
            base_depth: rng.random_range(105.0..135.0),
            travel: 150.0,
            curvature: rng.random_range(20.0..60.0),
            ridge_width: rng.random_range(5.0..9.0),
            ridge_gain: rng.random_range(160.0..210.0),
            background: rng.random_range(15.0..35.0),
            artefact: (rng.random_range(10..30), rng.random_range(4..8)),
            artefact_gain: rng.random_range(120.0..170.0),
        }
    }

    /// Depth in points of the ridge on scanline `j` of `scanlines`.
    pub fn ridge_centre(&self, z: f64, j: usize, scanlines: usize) -> f64 {
        let mid = (scanlines as f64 - 1.0) / 2.0;
        let x = if mid > 0.0 { (j as f64 - mid) / mid } else { 0.0 };
        self.base_depth + self.travel * z + self.curvature * x * x
    }
}

/// One 8-bit frame per latent sample: Gaussian ridge plus background and a
/// static artefact band, all multiplied by speckle.
pub fn render_ultrasound(
    z: &LatentTrajectory,
    scanlines: usize,
    points: usize,
    style: &SpeakerStyle,
    speckle_std: f64,
    seed: u64,
) -> Result<UltrasoundSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame_len = scanlines * points;
    let mut data = Vec::with_capacity(z.z.len() * frame_len);
    let (a0, ah) = style.artefact;
    let inv2s2 = 1.0 / (2.0 * style.ridge_width * style.ridge_width);
    let mut clean = vec![0.0f64; points];
    for &zk in &z.z {
        for j in 0..scanlines {
            let c = style.ridge_centre(zk, j, scanlines);
            for (p, v) in clean.iter_mut().enumerate() {
                let d = p as f64 - c;
                let mut x = style.background + style.ridge_gain * (-d * d * inv2s2).exp();
                if (a0..a0 + ah).contains(&p) {
                    x += style.artefact_gain;
                }
                *v = x;
            }
            for &v in &clean {
                let x = if speckle_std > 0.0 {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    v * (1.0 + speckle_std * n).max(0.0)
                } else {
                    v
                };
                data.push(x.round().clamp(0.0, 255.0) as f32);
            }
        }
    }
    UltrasoundSequence::new(data, scanlines, points, z.fps)
}

/// Harmonic tone (partials 1–4 at 1/h) following the latent's pitch and
/// loudness at audio rate, plus white noise at `snr_db` relative to the tone.
pub fn render_audio(z: &LatentTrajectory, sample_rate: u32, snr_db: f64, seed: u64) -> Result<AudioSignal> {
    let sr = f64::from(sample_rate);
    let n = (z.duration_s() * sr).round() as usize;
    let norm: f64 = (1..=4).map(|h| 1.0 / f64::from(h)).sum();
    let mut phase = 0.0f64;
    let mut tone = Vec::with_capacity(n);
    for i in 0..n {
        let zt = z.at(i as f64 / sr);
        let s: f64 = (1..=4).map(|h| (f64::from(h) * phase).sin() / f64::from(h)).sum();
        tone.push(amplitude(zt) * s / norm);
        phase = (phase + 2.0 * PI * fundamental_hz(zt) / sr) % (2.0 * PI);
    }
    let noise_std = noise_std_for(&tone, snr_db);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = tone
        .into_iter()
        .map(|x| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (x + noise_std * n).clamp(-1.0, 1.0)
        })
        .collect();
    AudioSignal::new(samples, sample_rate)
}

fn noise_std_for(signal: &[f64], snr_db: f64) -> f64 {
    if !snr_db.is_finite() || signal.is_empty() {
        return 0.0;
    }
    let rms = (signal.iter().map(|x| x * x).sum::<f64>() / signal.len() as f64).sqrt();
    rms / 10f64.powf(snr_db / 20.0)
}

// ---------------------------------------------------------------------------
// Corpus

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: String,
    pub session: String,
    pub utterance_type: UtteranceType,
    pub offset_ms: f64,
    /// Ultrasound duration.
    pub duration_s: f64,
    /// Exact-zero audio regions as `[start, end)` seconds on the final audio timeline.
    pub gap_log: Vec<(f64, f64)>,
}

pub const MANIFEST_HEADER: &str = "id\tspeaker\tsession\ttype\toffset_ms\tduration_s\tgap_log";

fn format_gaps(g: &[(f64, f64)]) -> String {
    if g.is_empty() {
        return "-".into();
    }
    g.iter().map(|(a, b)| format!("{a:.6}-{b:.6}")).collect::<Vec<_>>().join(";")
}

fn parse_gaps(s: &str) -> Result<Vec<(f64, f64)>> {
    if s == "-" || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|g| {
            let (a, b) = g
                .split_once('-')
                .ok_or_else(|| Error::Format(format!("bad gap `{g}`")))?;
            let p = |v: &str| v.parse::<f64>().map_err(|_| Error::Format(format!("bad gap `{g}`")));
            Ok((p(a)?, p(b)?))
        })
        .collect()
}

pub fn manifest_tsv(entries: &[ManifestEntry]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for e in entries {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}",
            e.id,
            e.speaker,
            e.session,
            e.utterance_type,
            e.offset_ms,
            e.duration_s,
            format_gaps(&e.gap_log)
        );
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == MANIFEST_HEADER => {}
        _ => return Err(Error::Format("manifest header missing".into())),
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("manifest row `{l}` needs 7 columns")));
            }
            let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{v}`")));
            Ok(ManifestEntry {
                id: f[0].into(),
                speaker: f[1].into(),
                session: f[2].into(),
                utterance_type: f[3].parse()?,
                offset_ms: num(f[4])?,
                duration_s: num(f[5])?,
                gap_log: parse_gaps(f[6])?,
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// What to generate for one utterance, before any rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct UtterancePlan {
    pub id: String,
    pub speaker: String,
    pub session: String,
    pub utterance_type: UtteranceType,
    pub offset_ms: f64,
    pub duration_s: f64,
    pub seed: u64,
}

pub fn speaker_name(i: usize) -> String {
    format!("spk{:02}", i + 1)
}

pub fn utterance_id(speaker: usize, utt: usize) -> String {
    format!("{}_u{:03}", speaker_name(speaker), utt + 1)
}

/// Plans every utterance. Each plan depends only on the corpus seed and the id.
pub fn corpus_plan(cfg: &SynthConfig) -> Result<Vec<UtterancePlan>> {
    cfg.validate()?;
    let mut plans = Vec::with_capacity(cfg.total_utterances());
    for s in 0..cfg.n_speakers {
        for u in 0..cfg.n_utterances_per_speaker {
            plans.push(plan_utterance(cfg, s, u));
        }
    }
    Ok(plans)
}

pub fn plan_utterance(cfg: &SynthConfig, speaker: usize, utt: usize) -> UtterancePlan {
    let id = utterance_id(speaker, utt);
    let seed = derive_seed(cfg.seed, &id);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "plan"));
    let (lo, hi) = cfg.duration_range_s;
    let duration_s = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let offset_ms = cfg.offsets_ms[rng.random_range(0..cfg.offsets_ms.len())];
    let utterance_type = if rng.random::<f64>() < cfg.articulatory_fraction {
        UtteranceType::D
    } else {
        [UtteranceType::A, UtteranceType::B, UtteranceType::C][rng.random_range(0..3)]
    };
    UtterancePlan {
        speaker: speaker_name(speaker),
        session: format!("s{}", utt % cfg.n_sessions_per_speaker + 1),
        id,
        utterance_type,
        offset_ms,
        duration_s,
        seed,
    }
}

/// Latent range used for an utterance type.
pub fn latent_range(t: UtteranceType) -> (f64, f64) {
    match t {
        UtteranceType::D => (0.45, 0.55),
        _ => (0.0, 1.0),
    }
}

/// Renders one planned utterance.
pub fn generate_utterance(cfg: &SynthConfig, plan: &UtterancePlan) -> Result<(UtteranceBundle, ManifestEntry)> {
    let traj = gen_trajectory_in(
        plan.duration_s,
        cfg.fps,
        latent_range(plan.utterance_type),
        derive_seed(plan.seed, "latent"),
    )?;
    let style = SpeakerStyle::for_speaker(cfg.seed, &plan.speaker);
    let ultra = render_ultrasound(
        &traj,
        cfg.scanlines,
        cfg.points,
        &style,
        cfg.speckle_std,
        derive_seed(plan.seed, "ultra"),
    )?;
    let body = render_audio(&traj, cfg.sample_rate, cfg.audio_snr_db, derive_seed(plan.seed, "audio"))?;

    // noise-only lead-in realising the offset
    let sr = f64::from(cfg.sample_rate);
    let lead = (plan.offset_ms * sr / 1000.0).round() as usize;
    let noise_std = noise_std_for(&body.samples, cfg.audio_snr_db).max(1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, "lead"));
    let mut samples: Vec<f64> = (0..lead)
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (noise_std * n).clamp(-1.0, 1.0)
        })
        .collect();
    samples.extend_from_slice(&body.samples);

    let mut gap_log = Vec::new();
    if rng.random::<f64>() < cfg.gap_probability {
        let len = (rng.random_range(0.15..0.4) * sr) as usize;
        if samples.len() > len + 2 {
            let start = rng.random_range(0..samples.len() - len);
            samples[start..start + len].fill(0.0);
            gap_log.push((start as f64 / sr, (start + len) as f64 / sr));
        }
    }

    let params = UtteranceParams {
        true_offset_ms: plan.offset_ms,
        fps: cfg.fps,
        utterance_type: plan.utterance_type,
        speaker_id: plan.speaker.clone(),
        session_id: plan.session.clone(),
        scanlines: cfg.scanlines,
        points: cfg.points,
    };
    let entry = ManifestEntry {
        id: plan.id.clone(),
        speaker: plan.speaker.clone(),
        session: plan.session.clone(),
        utterance_type: plan.utterance_type,
        offset_ms: plan.offset_ms,
        duration_s: ultra.duration_s(),
        gap_log,
    };
    let bundle = UtteranceBundle {
        id: plan.id.clone(),
        audio: AudioSignal::new(samples, cfg.sample_rate)?,
        ultra,
        params,
    };
    Ok((bundle, entry))
}

/// Writes every bundle and then `manifest.tsv` into `dir`.
///
/// The manifest is written last (via a temporary file), so a failed run never
/// leaves a manifest behind.
pub fn gen_corpus(cfg: &SynthConfig, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let plans = corpus_plan(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = plans
        .par_iter()
        .map(|p| {
            let (bundle, entry) = generate_utterance(cfg, p)?;
            media_io::write_bundle(dir, &bundle)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let tmp = dir.join("manifest.tsv.tmp");
    let path = dir.join("manifest.tsv");
    fs::write(&tmp, manifest_tsv(&entries)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}
