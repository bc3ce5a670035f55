//! From utterance bundles to model-ready windows and labelled pairs.
//!
//! The per-utterance chain is: frame decimation, per-frame max downsampling,
//! offset alignment (crop leading audio, end-trim the longer modality),
//! zero-region removal, then windowing into 5-frame ultrasound windows and the
//! matching 20-hop MFCC windows.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{self, MfccConfig, MfccTiming};
use crate::error::{Error, Result};
use crate::media_io::{AudioSignal, UltrasoundSequence, UtteranceBundle, UtteranceParams};

pub const FRAMES_PER_WINDOW: usize = 5;
pub const MFCC_FRAMES_PER_WINDOW: usize = FRAMES_PER_WINDOW * dsp::HOPS_PER_FRAME;

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    /// Keep one ultrasound frame out of every `keep_every`.
    pub keep_every: usize,
    /// Max-pooling factor along the points of each scanline.
    pub downsample_factor: usize,
    /// Shortest run of exact-zero audio treated as an anonymised region.
    pub min_zero_run_s: f64,
    pub mfcc: MfccConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            keep_every: 5,
            downsample_factor: 3,
            min_zero_run_s: 0.1,
            mfcc: MfccConfig::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Per-utterance transforms

/// Aligns the modalities for an audio-lead offset of `offset_ms`.
///
/// Positive offsets crop leading audio; negative offsets crop leading
/// ultrasound frames. The longer modality is then end-trimmed so durations
/// agree to within one ultrasound frame period. The returned bundle records
/// an offset of zero.
pub fn align(bundle: &UtteranceBundle, offset_ms: f64) -> Result<UtteranceBundle> {
    let sr = f64::from(bundle.audio.sample_rate);
    let fps = bundle.ultra.fps();
    let mut samples: &[f64] = &bundle.audio.samples;
    let mut ultra = bundle.ultra.clone();
    if offset_ms >= 0.0 {
        let crop = (offset_ms * sr / 1000.0).round() as usize;
        if crop >= samples.len() {
            return Err(Error::EmptyAudio { offset_ms });
        }
        samples = &samples[crop..];
    } else {
        ultra.drop_leading((-offset_ms * fps / 1000.0).round() as usize);
    }

    let audio_s = samples.len() as f64 / sr;
    let ultra_s = ultra.duration_s();
    let mut samples = samples.to_vec();
    if audio_s > ultra_s {
        samples.truncate((ultra_s * sr).round() as usize);
    } else {
        ultra.truncate((audio_s * fps + 1e-9).floor() as usize);
    }

    Ok(UtteranceBundle {
        id: bundle.id.clone(),
        audio: AudioSignal {
            samples,
            sample_rate: bundle.audio.sample_rate,
        },
        ultra,
        params: UtteranceParams {
            true_offset_ms: 0.0,
            ..bundle.params.clone()
        },
    })
}

/// Applies the bundle's recorded offset.
pub fn apply_offset(bundle: &UtteranceBundle) -> Result<UtteranceBundle> {
    align(bundle, bundle.params.true_offset_ms)
}

/// Retains frames `0, k, 2k, …` and divides the frame rate by `k`.
pub fn decimate_frames(ultra: &UltrasoundSequence, keep_every: usize) -> Result<UltrasoundSequence> {
    if keep_every == 0 {
        return Err(Error::Config("keep_every must be at least 1".into()));
    }
    let keep: Vec<usize> = (0..ultra.n_frames()).step_by(keep_every).collect();
    let picked = ultra.select(&keep);
    UltrasoundSequence::new(
        picked.into_data(),
        ultra.scanlines(),
        ultra.points(),
        ultra.fps() / keep_every as f64,
    )
}

/// Max over non-overlapping groups of `factor` points on each scanline.
///
/// A trailing partial group (412 = 137·3 + 1) contributes its own column.
pub fn downsample_frame(frame: &[f32], scanlines: usize, points: usize, factor: usize) -> Result<Vec<f32>> {
    if frame.len() != scanlines * points {
        return Err(Error::Shape(format!(
            "frame has {} values, expected {scanlines}x{points}",
            frame.len()
        )));
    }
    if factor == 0 {
        return Err(Error::Config("downsample factor must be at least 1".into()));
    }
    let out_points = points.div_ceil(factor);
    let mut out = Vec::with_capacity(scanlines * out_points);
    for line in frame.chunks_exact(points) {
        out.extend(
            line.chunks(factor)
                .map(|g| g.iter().copied().fold(f32::NEG_INFINITY, f32::max)),
        );
    }
    Ok(out)
}

pub fn downsample_sequence(ultra: &UltrasoundSequence, factor: usize) -> Result<UltrasoundSequence> {
    let (s, p) = (ultra.scanlines(), ultra.points());
    let mut data = Vec::with_capacity(ultra.n_frames() * s * p.div_ceil(factor.max(1)));
    for frame in ultra.frames() {
        data.extend(downsample_frame(frame, s, p, factor)?);
    }
    UltrasoundSequence::new(data, s, p.div_ceil(factor), ultra.fps())
}

/// What [`strip_zero_regions`] found and removed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ZeroStripLog {
    /// Detected exact-zero runs as half-open sample ranges of the input audio.
    pub runs: Vec<(usize, usize)>,
    /// Input frame indices that survive, in order.
    pub kept_frames: Vec<usize>,
    /// Input audio sample ranges that survive, in order.
    pub kept_audio: Vec<(usize, usize)>,
    /// Set when nothing but zeros remained.
    pub fully_zero: bool,
}

impl ZeroStripLog {
    pub fn removed_samples(&self, total: usize) -> usize {
        total - self.kept_audio.iter().map(|(a, b)| b - a).sum::<usize>()
    }
}

/// Maximal runs of exact zeros of at least `min_len` samples.
pub fn find_zero_runs(samples: &[f64], min_len: usize) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &s) in samples.iter().enumerate() {
        match (s == 0.0, start) {
            (true, None) => start = Some(i),
            (false, Some(s0)) => {
                if i - s0 >= min_len {
                    runs.push((s0, i));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s0) = start {
        if samples.len() - s0 >= min_len {
            runs.push((s0, samples.len()));
        }
    }
    runs
}

/// Removes exact-zero audio runs of at least `min_run_s` and the ultrasound
/// frames whose centre time `(k + 0.5) / fps` falls inside one.
///
/// The audio cut for each run is snapped to the edges of the removed frames so
/// that the surviving audio and frames stay on a common timeline; a run that
/// covers no frame centre (only possible past the last frame) is cut exactly.
pub fn strip_zero_regions(bundle: &UtteranceBundle, min_run_s: f64) -> (UtteranceBundle, ZeroStripLog) {
    let sr = f64::from(bundle.audio.sample_rate);
    let fps = bundle.ultra.fps();
    let n_samples = bundle.audio.len();
    let n_frames = bundle.ultra.n_frames();
    let min_len = ((min_run_s * sr).round() as usize).max(1);
    let runs = find_zero_runs(&bundle.audio.samples, min_len);

    let mut frame_removed = vec![false; n_frames];
    let mut cuts: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
    for &(s0, s1) in &runs {
        let (t0, t1) = (s0 as f64 / sr, s1 as f64 / sr);
        let inside: Vec<usize> = (0..n_frames)
            .filter(|&k| {
                let c = (k as f64 + 0.5) / fps;
                c >= t0 && c < t1
            })
            .collect();
        match (inside.first(), inside.last()) {
            (Some(&k1), Some(&k2)) => {
                for &k in &inside {
                    frame_removed[k] = true;
                }
                let a0 = ((k1 as f64 * sr / fps).round() as usize).min(n_samples);
                let a1 = if k2 + 1 == n_frames {
                    n_samples.max(s1)
                } else {
                    ((((k2 + 1) as f64) * sr / fps).round() as usize).min(n_samples)
                };
                cuts.push((a0, a1));
            }
            _ => cuts.push((s0, s1)),
        }
    }
    cuts.sort_unstable();

    let mut kept_audio = Vec::new();
    let mut cursor = 0;
    for (a0, a1) in cuts {
        if a0 > cursor {
            kept_audio.push((cursor, a0));
        }
        cursor = cursor.max(a1);
    }
    if cursor < n_samples {
        kept_audio.push((cursor, n_samples));
    }
    let kept_frames: Vec<usize> = (0..n_frames).filter(|&k| !frame_removed[k]).collect();

    let mut samples = Vec::with_capacity(n_samples);
    for &(a, b) in &kept_audio {
        samples.extend_from_slice(&bundle.audio.samples[a..b]);
    }
    let fully_zero = samples.iter().all(|&s| s == 0.0);
    if fully_zero && !runs.is_empty() {
        log::warn!("utterance `{}` is entirely zero after region removal", bundle.id);
    }
    let out = UtteranceBundle {
        id: bundle.id.clone(),
        audio: AudioSignal {
            samples,
            sample_rate: bundle.audio.sample_rate,
        },
        ultra: bundle.ultra.select(&kept_frames),
        params: bundle.params.clone(),
    };
    (
        out,
        ZeroStripLog {
            runs,
            kept_frames,
            kept_audio,
            fully_zero,
        },
    )
}

/// Decimation and downsampling; independent of the alignment offset.
pub fn reduce_ultrasound(bundle: &UtteranceBundle, cfg: &PreprocessConfig) -> Result<UtteranceBundle> {
    let decimated = decimate_frames(&bundle.ultra, cfg.keep_every)?;
    let ultra = downsample_sequence(&decimated, cfg.downsample_factor)?;
    Ok(UtteranceBundle {
        id: bundle.id.clone(),
        audio: bundle.audio.clone(),
        params: UtteranceParams {
            fps: ultra.fps(),
            points: ultra.points(),
            ..bundle.params.clone()
        },
        ultra,
    })
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub bundle: UtteranceBundle,
    pub strip_log: ZeroStripLog,
}

/// Alignment and zero-region removal on an already reduced bundle.
pub fn finish_preprocess(reduced: &UtteranceBundle, offset_ms: f64, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let aligned = align(reduced, offset_ms)?;
    let (bundle, strip_log) = strip_zero_regions(&aligned, cfg.min_zero_run_s);
    Ok(Preprocessed { bundle, strip_log })
}

/// Full chain for a raw bundle at the given alignment offset.
pub fn preprocess(bundle: &UtteranceBundle, offset_ms: f64, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    finish_preprocess(&reduce_ultrasound(bundle, cfg)?, offset_ms, cfg)
}

// ---------------------------------------------------------------------------
// Windows and pairs

#[derive(Debug, Clone, PartialEq)]
pub struct UltrasoundWindow {
    /// `[frames × scanlines × points]`, row-major.
    pub data: Vec<f32>,
    pub shape: [usize; 3],
    pub utterance_id: String,
    pub window_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfccWindow {
    /// `[hops × coefficients]`, row-major.
    pub data: Vec<f32>,
    pub shape: [usize; 2],
    pub utterance_id: String,
    pub window_index: usize,
}

#[derive(Debug, Clone)]
pub struct SamplePair {
    pub ultra: Arc<UltrasoundWindow>,
    pub mfcc: Arc<MfccWindow>,
    /// 1 for a synchronised pair, 0 otherwise.
    pub label: u8,
}

impl SamplePair {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

#[derive(Debug, Clone)]
pub struct WindowSet {
    pub ultra: Vec<Arc<UltrasoundWindow>>,
    pub mfcc: Vec<Arc<MfccWindow>>,
    pub timing: MfccTiming,
    pub framing: dsp::Framing,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.ultra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ultra.is_empty()
    }
}

/// Cuts a preprocessed bundle into non-overlapping 5-frame ultrasound windows
/// anchored at time zero and the MFCC windows covering the same spans.
///
/// MFCCs use the timing derived from the bundle's frame rate; the audio is
/// zero-padded by one analysis window so the last window's final hop is
/// available. Both sequences are truncated to the shorter.
pub fn make_windows(bundle: &UtteranceBundle, mfcc_cfg: &MfccConfig) -> Result<WindowSet> {
    let timing = dsp::derive_mfcc_timing(bundle.ultra.fps(), FRAMES_PER_WINDOW)?;
    let cfg = mfcc_cfg.with_timing(timing);
    let framing = cfg.framing(bundle.audio.sample_rate)?;

    let n_ultra = bundle.ultra.n_frames() / FRAMES_PER_WINDOW;
    let mut ultra = Vec::new();
    let mut mfcc_windows = Vec::new();
    if n_ultra > 0 {
        let mut samples = bundle.audio.samples.clone();
        samples.resize(samples.len() + framing.window_samples, 0.0);
        let padded = AudioSignal {
            samples,
            sample_rate: bundle.audio.sample_rate,
        };
        let m = dsp::mfcc(&padded, &cfg)?;
        let n = n_ultra.min(m.n_frames() / MFCC_FRAMES_PER_WINDOW);
        let frame_len = bundle.ultra.frame_len();
        let block = FRAMES_PER_WINDOW * frame_len;
        let coeffs = m.n_coeffs();
        for w in 0..n {
            ultra.push(Arc::new(UltrasoundWindow {
                data: bundle.ultra.data()[w * block..(w + 1) * block].to_vec(),
                shape: [FRAMES_PER_WINDOW, bundle.ultra.scanlines(), bundle.ultra.points()],
                utterance_id: bundle.id.clone(),
                window_index: w,
            }));
            let rows = &m.data()[w * MFCC_FRAMES_PER_WINDOW * coeffs..(w + 1) * MFCC_FRAMES_PER_WINDOW * coeffs];
            mfcc_windows.push(Arc::new(MfccWindow {
                data: rows.iter().map(|&v| v as f32).collect(),
                shape: [MFCC_FRAMES_PER_WINDOW, coeffs],
                utterance_id: bundle.id.clone(),
                window_index: w,
            }));
        }
    }
    Ok(WindowSet {
        ultra,
        mfcc: mfcc_windows,
        timing,
        framing,
    })
}

/// A uniformly random permutation of `0..n` without fixed points (n >= 2).
pub fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(n >= 2, "no derangement of {n} elements");
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// Index-matched positives plus, for n >= 2, the same number of negatives whose
/// MFCC windows are a seeded derangement of the ultrasound windows.
pub fn make_pairs(
    ultra: &[Arc<UltrasoundWindow>],
    mfcc: &[Arc<MfccWindow>],
    seed: u64,
) -> Result<Vec<SamplePair>> {
    if ultra.len() != mfcc.len() {
        return Err(Error::Shape(format!(
            "{} ultrasound windows vs {} MFCC windows",
            ultra.len(),
            mfcc.len()
        )));
    }
    let n = ultra.len();
    let mut pairs: Vec<SamplePair> = ultra
        .iter()
        .zip(mfcc)
        .map(|(u, m)| SamplePair {
            ultra: Arc::clone(u),
            mfcc: Arc::clone(m),
            label: 1,
        })
        .collect();
    match n {
        0 => {}
        1 => log::warn!(
            "utterance `{}` has a single window; no negative pair possible",
            ultra[0].utterance_id
        ),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (i, j) in derangement(n, &mut rng).into_iter().enumerate() {
                pairs.push(SamplePair {
                    ultra: Arc::clone(&ultra[i]),
                    mfcc: Arc::clone(&mfcc[j]),
                    label: 0,
                });
            }
        }
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitSet {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

impl FromStr for SplitSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Format(format!("unknown split set `{other}`"))),
        }
    }
}

/// How a key was routed: by a whole-speaker rule or an exact session rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HoldOut {
    Speaker,
    Session,
}

impl HoldOut {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Speaker => "new-speaker",
            Self::Session => "new-session",
        }
    }
}

pub trait SplitKey {
    fn speaker(&self) -> &str;
    fn session(&self) -> &str;
}

impl SplitKey for UtteranceParams {
    fn speaker(&self) -> &str {
        &self.speaker_id
    }
    fn session(&self) -> &str {
        &self.session_id
    }
}

impl SplitKey for UtteranceBundle {
    fn speaker(&self) -> &str {
        &self.params.speaker_id
    }
    fn session(&self) -> &str {
        &self.params.session_id
    }
}

impl<T: SplitKey> SplitKey for &T {
    fn speaker(&self) -> &str {
        (*self).speaker()
    }
    fn session(&self) -> &str {
        (*self).session()
    }
}

/// Routing rules over `(speaker, session)`.
///
/// An exact `(speaker, session)` rule beats `(speaker, *)`, which beats the
/// catch-all `(*, *)`. Two rules for the same pattern are rejected at parse time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitSpec {
    exact: HashMap<(String, String), SplitSet>,
    speaker: HashMap<String, SplitSet>,
    fallback: Option<SplitSet>,
}

impl SplitSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_rule(&mut self, set: SplitSet, speaker: &str, session: &str) -> Result<()> {
        let clash = match (speaker, session) {
            ("*", "*") => self.fallback.replace(set).is_some(),
            ("*", _) => {
                return Err(Error::Format(format!(
                    "speaker wildcard requires session wildcard (got session `{session}`)"
                )))
            }
            (spk, "*") => self.speaker.insert(spk.to_string(), set).is_some(),
            (spk, ses) => self.exact.insert((spk.to_string(), ses.to_string()), set).is_some(),
        };
        if clash {
            return Err(Error::Format(format!("duplicate split rule for `{speaker}` `{session}`")));
        }
        Ok(())
    }

    pub fn with_rule(mut self, set: SplitSet, speaker: &str, session: &str) -> Result<Self> {
        self.add_rule(set, speaker, session)?;
        Ok(self)
    }

    /// Parses `set<TAB>speaker<TAB>session` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            let [set, speaker, session] = fields[..] else {
                return Err(Error::Format(format!(
                    "split line {}: expected 3 tab-separated fields, got {}",
                    n + 1,
                    fields.len()
                )));
            };
            spec.add_rule(set.parse()?, speaker, session)?;
        }
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        let mut exact: Vec<_> = self.exact.iter().collect();
        exact.sort();
        let mut speaker: Vec<_> = self.speaker.iter().collect();
        speaker.sort();
        for (spk, set) in speaker {
            lines.push(format!("{set}\t{spk}\t*"));
        }
        for ((spk, ses), set) in exact {
            lines.push(format!("{set}\t{spk}\t{ses}"));
        }
        if let Some(set) = self.fallback {
            lines.push(format!("{set}\t*\t*"));
        }
        lines.join("\n") + "\n"
    }

    pub fn route(&self, speaker: &str, session: &str) -> Result<(SplitSet, HoldOut)> {
        if let Some(&set) = self.exact.get(&(speaker.to_string(), session.to_string())) {
            return Ok((set, HoldOut::Session));
        }
        if let Some(&set) = self.speaker.get(speaker) {
            return Ok((set, HoldOut::Speaker));
        }
        if let Some(set) = self.fallback {
            return Ok((set, HoldOut::Speaker));
        }
        Err(Error::Routing {
            speaker: speaker.to_string(),
            session: session.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> CorpusSplit<T> {
    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }

    pub fn get(&self, set: SplitSet) -> &[T] {
        match set {
            SplitSet::Train => &self.train,
            SplitSet::Val => &self.val,
            SplitSet::Test => &self.test,
        }
    }
}

/// Routes every item by its `(speaker, session)` key. Fails on the first uncovered key.
pub fn split_corpus<T: SplitKey>(items: impl IntoIterator<Item = T>, spec: &SplitSpec) -> Result<CorpusSplit<T>> {
    let mut out = CorpusSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for item in items {
        match spec.route(item.speaker(), item.session())?.0 {
            SplitSet::Train => out.train.push(item),
            SplitSet::Val => out.val.push(item),
            SplitSet::Test => out.test.push(item),
        }
    }
    log::info!(
        "split: {} train, {} val, {} test",
        out.train.len(),
        out.val.len(),
        out.test.len()
    );
    Ok(out)
}

// ---------------------------------------------------------------------------
// Batching

/// Shuffled batches with equal numbers of positive and negative pairs.
///
/// Each full batch holds `batch_size / 2` of each class. Once either class
/// runs short the leftovers are interleaved into trailing batches. The order
/// depends only on `(seed, epoch)`.
pub fn batch_iter(pairs: &[SamplePair], batch_size: usize, seed: u64, epoch: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Config(format!("batch size must be even and positive, got {batch_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::splitmix64(seed ^ epoch.wrapping_mul(0x9e37_79b9)));
    let mut pos: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].is_positive()).collect();
    let mut neg: Vec<usize> = (0..pairs.len()).filter(|&i| !pairs[i].is_positive()).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let half = batch_size / 2;
    let mut batches = Vec::new();
    let (mut p, mut q) = (pos.as_slice(), neg.as_slice());
    while p.len() >= half && q.len() >= half {
        let mut b: Vec<usize> = p[..half].iter().chain(&q[..half]).copied().collect();
        b.shuffle(&mut rng);
        batches.push(b);
        p = &p[half..];
        q = &q[half..];
    }
    let mut rest = Vec::with_capacity(p.len() + q.len());
    for i in 0..p.len().max(q.len()) {
        rest.extend(p.get(i));
        rest.extend(q.get(i));
    }
    for chunk in rest.chunks(batch_size) {
        batches.push(chunk.to_vec());
    }
    Ok(BatchIter {
        pairs,
        batches: batches.into_iter(),
    })
}

pub struct BatchIter<'a> {
    pairs: &'a [SamplePair],
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Vec<&'a SamplePair>;

    fn next(&mut self) -> Option<Self::Item> {
        self.batches
            .next()
            .map(|b| b.into_iter().map(|i| &self.pairs[i]).collect())
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.batches.size_hint()
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

// ---------------------------------------------------------------------------
// Pair cache

const PAIR_CACHE_MAGIC: &[u8; 4] = b"USPC";
const PAIR_CACHE_VERSION: u8 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn put_f32s(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes a binary record stream of pairs: magic, version byte, then per record
/// the label, utterance id, both window indices, shapes and `f32` payloads.
pub fn write_pair_cache(w: &mut impl Write, pairs: &[SamplePair]) -> std::io::Result<()> {
    w.write_all(PAIR_CACHE_MAGIC)?;
    w.write_all(&[PAIR_CACHE_VERSION])?;
    w.write_all(&(pairs.len() as u64).to_le_bytes())?;
    for p in pairs {
        w.write_all(&[p.label])?;
        let id = p.ultra.utterance_id.as_bytes();
        put_u32(w, id.len())?;
        w.write_all(id)?;
        put_u32(w, p.ultra.window_index)?;
        put_u32(w, p.mfcc.window_index)?;
        for &d in &p.ultra.shape {
            put_u32(w, d)?;
        }
        put_f32s(w, &p.ultra.data)?;
        for &d in &p.mfcc.shape {
            put_u32(w, d)?;
        }
        put_f32s(w, &p.mfcc.data)?;
    }
    Ok(())
}

struct CacheReader<'r, R: Read>(&'r mut R);

impl<R: Read> CacheReader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("pair cache truncated: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| Ok(f32::from_le_bytes(self.bytes()?))).collect()
    }
}

pub fn read_pair_cache(r: &mut impl Read) -> Result<Vec<SamplePair>> {
    let mut rd = CacheReader(r);
    if &rd.bytes::<4>()? != PAIR_CACHE_MAGIC {
        return Err(Error::Format("not a pair cache".into()));
    }
    let [version] = rd.bytes::<1>()?;
    if version != PAIR_CACHE_VERSION {
        return Err(Error::Format(format!("pair cache version {version} unsupported")));
    }
    let n = u64::from_le_bytes(rd.bytes()?) as usize;
    let mut pairs = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let [label] = rd.bytes::<1>()?;
        let id_len = rd.u32()?;
        let id = String::from_utf8(
            (0..id_len)
                .map(|_| rd.bytes::<1>().map(|b| b[0]))
                .collect::<Result<Vec<u8>>>()?,
        )
        .map_err(|_| Error::Format("pair cache id is not UTF-8".into()))?;
        let (ui, mi) = (rd.u32()?, rd.u32()?);
        let ushape = [rd.u32()?, rd.u32()?, rd.u32()?];
        let udata = rd.f32s(ushape.iter().product())?;
        let mshape = [rd.u32()?, rd.u32()?];
        let mdata = rd.f32s(mshape.iter().product())?;
        pairs.push(SamplePair {
            ultra: Arc::new(UltrasoundWindow {
                data: udata,
                shape: ushape,
                utterance_id: id.clone(),
                window_index: ui,
            }),
            mfcc: Arc::new(MfccWindow {
                data: mdata,
                shape: mshape,
                utterance_id: id,
                window_index: mi,
            }),
            label,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(n: usize, s: usize, p: usize, fps: f64) -> UltrasoundSequence {
        let data = (0..n * s * p).map(|i| (i % 251) as f32).collect();
        UltrasoundSequence::new(data, s, p, fps).unwrap()
    }

    fn bundle(samples: Vec<f64>, sr: u32, ultra: UltrasoundSequence, offset: f64) -> UtteranceBundle {
        UtteranceBundle {
            id: "u".into(),
            audio: AudioSignal::new(samples, sr).unwrap(),
            params: UtteranceParams {
                scanlines: ultra.scanlines(),
                points: ultra.points(),
                ..UtteranceParams::new(offset, ultra.fps())
            },
            ultra,
        }
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.01..0.5) * if rng.random() { 1.0 } else { -1.0 }).collect()
    }

    #[test]
    fn offset_crops_leading_audio() {
        let b = bundle(noise(3 * 22050, 1), 22050, seq(300, 2, 3, 121.5), 1000.0);
        let out = apply_offset(&b).unwrap();
        assert_eq!(out.audio.samples[0], b.audio.samples[22050]);
        assert_eq!(out.params.true_offset_ms, 0.0);
        // 2 s of audio remain; ultrasound trimmed from 300 to floor(2 * 121.5) frames
        assert_eq!(out.ultra.n_frames(), 243);
        assert!((out.audio.duration_s() - out.ultra.duration_s()).abs() < 1.0 / 121.5);
    }

    #[test]
    fn zero_offset_only_trims() {
        let b = bundle(noise(22050, 2), 22050, seq(100, 2, 3, 121.5), 0.0);
        let out = apply_offset(&b).unwrap();
        assert_eq!(out.ultra.n_frames(), 100);
        let expect = (100.0 / 121.5 * 22050.0f64).round() as usize;
        assert_eq!(out.audio.samples, b.audio.samples[..expect]);
    }

    #[test]
    fn offset_past_end_is_error() {
        let b = bundle(noise(1000, 3), 22050, seq(10, 2, 3, 121.5), 50.0);
        assert!(matches!(apply_offset(&b), Err(Error::EmptyAudio { .. })));
    }

    #[test]
    fn negative_offset_crops_frames() {
        let b = bundle(noise(22050, 3), 22050, seq(121, 1, 2, 121.5), 0.0);
        let out = align(&b, -100.0).unwrap();
        assert_eq!(out.ultra.frame(0), b.ultra.frame(12));
    }

    #[test]
    fn decimation() {
        let s = seq(100, 2, 2, 121.5);
        let d = decimate_frames(&s, 5).unwrap();
        assert_eq!(d.n_frames(), 20);
        assert!((d.fps() - 24.3).abs() < 1e-12);
        assert_eq!(d.frame(3), s.frame(15));
        assert_eq!(decimate_frames(&s, 1).unwrap(), s);
        let d = decimate_frames(&seq(7, 1, 1, 10.0), 5).unwrap();
        assert_eq!(d.n_frames(), 2);
        assert_eq!(d.data(), &[0.0, 5.0]);
    }

    #[test]
    fn downsample_corpus_geometry() {
        let frame = vec![9.0f32; 63 * 412];
        let out = downsample_frame(&frame, 63, 412, 3).unwrap();
        assert_eq!(out.len(), 63 * 138);
        assert!(out.iter().all(|&v| v == 9.0));
        let mut frame = vec![0.0f32; 63 * 412];
        frame[5 * 412 + 411] = 200.0;
        let out = downsample_frame(&frame, 63, 412, 3).unwrap();
        assert_eq!(out[5 * 138 + 137], 200.0);
        assert_eq!(out.iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(matches!(downsample_frame(&frame[1..], 63, 412, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn strip_zero_run() {
        let sr = 22050;
        let fps = 24.3;
        let mut audio = noise(3 * sr, 4);
        audio[sr..sr + sr / 2].fill(0.0);
        let n_frames = (3.0 * fps) as usize;
        let b = bundle(audio, sr as u32, seq(n_frames, 2, 2, fps), 0.0);
        let (out, log) = strip_zero_regions(&b, 0.1);
        assert_eq!(log.runs, vec![(sr, sr + sr / 2)]);
        let shorter = b.audio.duration_s() - out.audio.duration_s();
        assert!((shorter - 0.5).abs() <= 1.0 / fps, "shorter by {shorter}");
        let removed = n_frames - out.ultra.n_frames();
        assert!((removed as f64 - (0.5 * fps).round()).abs() <= 1.0);
        assert!((out.audio.duration_s() - out.ultra.duration_s()).abs() < 1.0 / fps);
    }

    #[test]
    fn strip_without_zeros_is_identity() {
        let b = bundle(noise(22050, 5), 22050, seq(24, 2, 2, 24.3), 0.0);
        let (out, log) = strip_zero_regions(&b, 0.1);
        assert_eq!(out, b);
        assert!(log.runs.is_empty());
        assert!(!log.fully_zero);
    }

    #[test]
    fn strip_fully_zero() {
        let b = bundle(vec![0.0; 22050], 22050, seq(24, 2, 2, 24.3), 0.0);
        let (out, log) = strip_zero_regions(&b, 0.1);
        assert!(log.fully_zero);
        assert!(out.audio.is_empty());
        assert_eq!(out.ultra.n_frames(), 0);
    }

    #[test]
    fn short_zero_runs_survive() {
        let mut audio = noise(22050, 6);
        audio[100..200].fill(0.0);
        let b = bundle(audio, 22050, seq(24, 2, 2, 24.3), 0.0);
        assert!(strip_zero_regions(&b, 0.1).1.runs.is_empty());
    }

    #[test]
    fn window_counts_and_shapes() {
        let fps = 24.3;
        let b = bundle(noise((23.0 / fps * 22050.0) as usize + 10, 7), 22050, seq(23, 63, 138, fps), 0.0);
        let w = make_windows(&b, &MfccConfig::default()).unwrap();
        assert_eq!(w.ultra.len(), 4);
        assert_eq!(w.mfcc.len(), 4);
        for (u, m) in w.ultra.iter().zip(&w.mfcc) {
            assert_eq!(u.shape, [5, 63, 138]);
            assert_eq!(u.data.len(), 5 * 63 * 138);
            assert_eq!(m.shape, [20, 13]);
            assert_eq!(m.data.len(), 260);
        }
        assert_eq!(w.ultra[2].data[..63 * 138], *b.ultra.frame(10));
    }

    #[test]
    fn window_spans_agree() {
        let fps = 24.3;
        let b = bundle(noise(22050 * 2, 8), 22050, seq(48, 2, 3, fps), 0.0);
        let w = make_windows(&b, &MfccConfig::default()).unwrap();
        let sr = 22050.0;
        for k in 0..w.len() {
            let ultra_start = (k * FRAMES_PER_WINDOW) as f64 / fps;
            let ultra_end = ((k + 1) * FRAMES_PER_WINDOW) as f64 / fps;
            let mfcc_start = w.framing.frame_start(k * MFCC_FRAMES_PER_WINDOW) as f64 / sr;
            let mfcc_next = w.framing.frame_start((k + 1) * MFCC_FRAMES_PER_WINDOW) as f64 / sr;
            assert!((ultra_start - mfcc_start).abs() <= w.timing.hop_s);
            assert!((ultra_end - mfcc_next).abs() <= w.timing.hop_s);
        }
    }

    #[test]
    fn too_few_frames_gives_no_windows() {
        let b = bundle(noise(22050, 9), 22050, seq(4, 2, 3, 24.3), 0.0);
        assert!(make_windows(&b, &MfccConfig::default()).unwrap().is_empty());
    }

    fn fake_windows(n: usize) -> (Vec<Arc<UltrasoundWindow>>, Vec<Arc<MfccWindow>>) {
        let u = (0..n)
            .map(|w| {
                Arc::new(UltrasoundWindow {
                    data: vec![w as f32],
                    shape: [1, 1, 1],
                    utterance_id: "x".into(),
                    window_index: w,
                })
            })
            .collect();
        let m = (0..n)
            .map(|w| {
                Arc::new(MfccWindow {
                    data: vec![w as f32],
                    shape: [1, 1],
                    utterance_id: "x".into(),
                    window_index: w,
                })
            })
            .collect();
        (u, m)
    }

    #[test]
    fn pairs_balanced_and_labelled() {
        let (u, m) = fake_windows(4);
        let pairs = make_pairs(&u, &m, 1).unwrap();
        assert_eq!(pairs.len(), 8);
        assert_eq!(pairs.iter().filter(|p| p.label == 1).count(), 4);
        for p in &pairs {
            assert_eq!(p.label == 1, p.ultra.window_index == p.mfcc.window_index);
        }
    }

    #[test]
    fn two_windows_swap() {
        let (u, m) = fake_windows(2);
        let pairs = make_pairs(&u, &m, 99).unwrap();
        let neg: Vec<_> = pairs.iter().filter(|p| p.label == 0).map(|p| (p.ultra.window_index, p.mfcc.window_index)).collect();
        assert_eq!(neg, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn single_and_empty() {
        let (u, m) = fake_windows(1);
        assert_eq!(make_pairs(&u, &m, 0).unwrap().len(), 1);
        assert!(make_pairs(&[], &[], 0).unwrap().is_empty());
        let (u, _) = fake_windows(2);
        let (_, m) = fake_windows(3);
        assert!(matches!(make_pairs(&u, &m, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn derangement_seeding() {
        let perm = |seed| derangement(10, &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(perm(5), perm(5));
        let first = perm(0);
        let differing = (1..=100).filter(|&s| perm(s) != first).count();
        // 1334961 derangements of 10; a collision is ~1e-4 likely per seed.
        assert!(differing >= 99, "{differing} of 100 seeds differ");
    }

    #[test]
    fn split_routing() {
        let spec = SplitSpec::parse("train\t*\t*\ntest\tS\t*\nval\tP\tMid\n").unwrap();
        let keys = [("S", "a"), ("S", "b"), ("P", "Mid"), ("P", "BL1"), ("Q", "x")];
        let params: Vec<UtteranceParams> = keys
            .iter()
            .map(|(spk, ses)| UtteranceParams {
                speaker_id: spk.to_string(),
                session_id: ses.to_string(),
                ..UtteranceParams::new(0.0, 1.0)
            })
            .collect();
        let split = split_corpus(&params, &spec).unwrap();
        assert!(split.train.iter().all(|p| p.speaker_id != "S"));
        assert_eq!(split.test.len(), 2);
        assert_eq!(split.val.len(), 1);
        assert!(split.train.iter().any(|p| p.speaker_id == "P" && p.session_id == "BL1"));
        assert_eq!(split.counts().iter().sum::<usize>(), params.len());
        assert_eq!(spec.route("P", "Mid").unwrap(), (SplitSet::Val, HoldOut::Session));
        assert_eq!(spec.route("S", "z").unwrap(), (SplitSet::Test, HoldOut::Speaker));
    }

    #[test]
    fn split_uncovered_key() {
        let spec = SplitSpec::parse("train\tA\t*\n").unwrap();
        let p = UtteranceParams {
            speaker_id: "B".into(),
            session_id: "s1".into(),
            ..UtteranceParams::new(0.0, 1.0)
        };
        match split_corpus([&p], &spec) {
            Err(Error::Routing { speaker, session }) => assert_eq!((speaker.as_str(), session.as_str()), ("B", "s1")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(SplitSpec::parse("train\tA\t*\nval\tA\t*\n").is_err());
        assert!(SplitSpec::parse("holdout\tA\t*\n").is_err());
        let spec = SplitSpec::parse("val\tA\tx\ntest\tB\t*\ntrain\t*\t*\n").unwrap();
        assert_eq!(SplitSpec::parse(&spec.to_text()).unwrap(), spec);
    }

    fn labelled(n_pos: usize, n_neg: usize) -> Vec<SamplePair> {
        let (u, m) = fake_windows(1);
        (0..n_pos + n_neg)
            .map(|i| SamplePair {
                ultra: Arc::clone(&u[0]),
                mfcc: Arc::clone(&m[0]),
                label: u8::from(i < n_pos),
            })
            .collect()
    }

    #[test]
    fn one_full_batch() {
        let pairs = labelled(32, 32);
        let batches: Vec<_> = batch_iter(&pairs, 64, 0, 0).unwrap().collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].iter().filter(|p| p.is_positive()).count(), 32);
    }

    #[test]
    fn balanced_remainder_enumeration() {
        let pairs = labelled(100, 100);
        let batches: Vec<_> = batch_iter(&pairs, 64, 3, 1).unwrap().collect();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        let pos: Vec<usize> = batches.iter().map(|b| b.iter().filter(|p| p.is_positive()).count()).collect();
        assert_eq!(sizes, vec![64, 64, 64, 8]);
        assert_eq!(pos, vec![32, 32, 32, 4]);
    }

    #[test]
    fn batches_deterministic() {
        let (u, m) = fake_windows(50);
        let pairs = make_pairs(&u, &m, 4).unwrap();
        let order = |seed, epoch| -> Vec<(usize, usize)> {
            batch_iter(&pairs, 16, seed, epoch)
                .unwrap()
                .flatten()
                .map(|p| (p.ultra.window_index, p.mfcc.window_index))
                .collect()
        };
        assert_eq!(order(1, 2), order(1, 2));
        assert_ne!(order(1, 2), order(1, 3));
        assert!(matches!(batch_iter(&pairs, 63, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn pair_cache_roundtrip() {
        let (u, m) = fake_windows(3);
        let pairs = make_pairs(&u, &m, 2).unwrap();
        let mut buf = Vec::new();
        write_pair_cache(&mut buf, &pairs).unwrap();
        let back = read_pair_cache(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), pairs.len());
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(*a.ultra, *b.ultra);
            assert_eq!(*a.mfcc, *b.mfcc);
        }
        buf[4] = 9;
        assert!(read_pair_cache(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn decimate_downsample_commute(n in 0usize..20, k in 1usize..6, s in 1usize..4, p in 1usize..14, f in 1usize..4) {
            let x = seq(n, s, p, 100.0);
            let a = downsample_sequence(&decimate_frames(&x, k).unwrap(), f).unwrap();
            let b = decimate_frames(&downsample_sequence(&x, f).unwrap(), k).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn negatives_never_match(n in 2usize..40, seed in any::<u64>()) {
            let (u, m) = fake_windows(n);
            let pairs = make_pairs(&u, &m, seed).unwrap();
            prop_assert_eq!(pairs.len(), 2 * n);
            for p in &pairs {
                prop_assert_eq!(p.ultra.utterance_id.as_str(), p.mfcc.utterance_id.as_str());
                prop_assert_eq!(p.is_positive(), p.ultra.window_index == p.mfcc.window_index);
            }
        }
    }
}
