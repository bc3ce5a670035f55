//! On-disk utterance representation.
//!
//! Each utterance is three files sharing a stem: `<id>.wav` (mono 16-bit PCM),
//! `<id>.ult` (headerless unsigned bytes, frame-major, then scanline, then point)
//! and `<id>.param` (line-oriented `key=value` sidecar carrying the offset,
//! frame rate, geometry and speaker metadata).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const DEFAULT_SCANLINES: usize = 63;
pub const DEFAULT_POINTS: usize = 412;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Domain(format!("non-finite audio sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// A sequence of equally shaped ultrasound frames stored contiguously.
///
/// Frame `k` is the `scanlines × points` row-major slab starting at
/// `k * scanlines * points`. Values are raw byte intensities when loaded
/// and stay in `[0, 255]` through the max-based preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct UltrasoundSequence {
    data: Vec<f32>,
    n_frames: usize,
    scanlines: usize,
    points: usize,
    fps: f64,
}

impl UltrasoundSequence {
    pub fn new(data: Vec<f32>, scanlines: usize, points: usize, fps: f64) -> Result<Self> {
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::Domain(format!("frame rate must be positive, got {fps}")));
        }
        let frame_len = scanlines * points;
        if frame_len == 0 {
            return Err(Error::Shape("ultrasound frame geometry must be non-empty".into()));
        }
        if data.len() % frame_len != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form whole {scanlines}x{points} frames",
                data.len()
            )));
        }
        Ok(Self {
            n_frames: data.len() / frame_len,
            data,
            scanlines,
            points,
            fps,
        })
    }

    pub fn empty(scanlines: usize, points: usize, fps: f64) -> Result<Self> {
        Self::new(Vec::new(), scanlines, points, fps)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn scanlines(&self) -> usize {
        self.scanlines
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frame_len(&self) -> usize {
        self.scanlines * self.points
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames as f64 / self.fps
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.frame_len())
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Keeps the first `n` frames.
    pub fn truncate(&mut self, n: usize) {
        if n < self.n_frames {
            self.data.truncate(n * self.frame_len());
            self.n_frames = n;
        }
    }

    /// Drops the first `n` frames.
    pub fn drop_leading(&mut self, n: usize) {
        let n = n.min(self.n_frames);
        self.data.drain(..n * self.frame_len());
        self.n_frames -= n;
    }

    /// Builds a new sequence from the listed frames, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &k in indices {
            data.extend_from_slice(self.frame(k));
        }
        Self {
            data,
            n_frames: indices.len(),
            scanlines: self.scanlines,
            points: self.points,
            fps: self.fps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UtteranceType {
    /// Words.
    A,
    /// Non-words.
    B,
    /// Sentences.
    C,
    /// Articulatory: isolated or repeated phones.
    D,
    /// Non-speech (coughs, swallows); excluded from training and reporting.
    E,
    /// Conversation.
    F,
}

impl UtteranceType {
    pub const ALL: [UtteranceType; 6] = [Self::A, Self::B, Self::C, Self::D, Self::E, Self::F];

    pub fn label(self) -> &'static str {
        match self {
            Self::A => "Words",
            Self::B => "Non-words",
            Self::C => "Sentence",
            Self::D => "Articulatory",
            Self::E => "Non-speech",
            Self::F => "Conversation",
        }
    }
}

impl fmt::Display for UtteranceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
            Self::E => "E",
            Self::F => "F",
        };
        f.write_str(c)
    }
}

impl FromStr for UtteranceType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            "C" | "c" => Ok(Self::C),
            "D" | "d" => Ok(Self::D),
            "E" | "e" => Ok(Self::E),
            "F" | "f" => Ok(Self::F),
            other => Err(Error::Format(format!("unknown utterance type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceParams {
    /// Audio-lead offset; positive means the audio leads the video.
    pub true_offset_ms: f64,
    pub fps: f64,
    pub utterance_type: UtteranceType,
    pub speaker_id: String,
    pub session_id: String,
    pub scanlines: usize,
    pub points: usize,
}

impl UtteranceParams {
    pub fn new(true_offset_ms: f64, fps: f64) -> Self {
        Self {
            true_offset_ms,
            fps,
            utterance_type: UtteranceType::A,
            speaker_id: "unknown".into(),
            session_id: "unknown".into(),
            scanlines: DEFAULT_SCANLINES,
            points: DEFAULT_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceBundle {
    pub id: String,
    pub audio: AudioSignal,
    pub ultra: UltrasoundSequence,
    pub params: UtteranceParams,
}

// ---------------------------------------------------------------------------
// WAV

const PCM_FORMAT_TAG: u16 = 1;

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a mono 16-bit PCM RIFF/WAVE byte buffer.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioSignal> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "chunk `{}` claims {size} bytes past end of file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Format(format!("fmt chunk too short ({size} bytes)")));
                }
                let tag = le_u16(bytes, body);
                let channels = le_u16(bytes, body + 2);
                let rate = le_u32(bytes, body + 4);
                let bits = le_u16(bytes, body + 14);
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) =
                    fmt.ok_or_else(|| Error::Format("data chunk before fmt chunk".into()))?;
                if tag != PCM_FORMAT_TAG {
                    return Err(Error::UnsupportedFormat(format!(
                        "format tag {tag} (only integer PCM is supported)"
                    )));
                }
                if channels != 1 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{channels} channels (only mono is supported)"
                    )));
                }
                if bits != 16 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{bits}-bit samples (only 16-bit is supported)"
                    )));
                }
                if rate == 0 {
                    return Err(Error::Format("sample rate of zero".into()));
                }
                let data = &bytes[body..end];
                if data.len() % 2 != 0 {
                    return Err(Error::Format("odd byte count in 16-bit data chunk".into()));
                }
                let samples = data
                    .chunks_exact(2)
                    .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
                    .collect();
                return AudioSignal::new(samples, rate);
            }
            _ => {}
        }
        // Chunks are padded to even length.
        pos = end + (size & 1);
    }
    Err(Error::Format(
        if fmt.is_some() {
            "no data chunk"
        } else {
            "no fmt chunk"
        }
        .into(),
    ))
}

fn quantise_sample(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Serialises a signal as mono 16-bit PCM. Samples are scaled by 32768 and clamped.
pub fn encode_wav(signal: &AudioSignal) -> Vec<u8> {
    let data_len = signal.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT_TAG.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&signal.sample_rate.to_le_bytes());
    out.extend_from_slice(&(signal.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &signal.samples {
        out.extend_from_slice(&quantise_sample(s).to_le_bytes());
    }
    out
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

pub fn write_wav(signal: &AudioSignal, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(signal)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Raw ultrasound

pub fn parse_ultrasound(bytes: &[u8], scanlines: usize, points: usize, fps: f64) -> Result<UltrasoundSequence> {
    let frame_bytes = scanlines * points;
    if frame_bytes == 0 {
        return Err(Error::Shape("ultrasound frame geometry must be non-empty".into()));
    }
    if bytes.len() % frame_bytes != 0 {
        return Err(Error::TruncatedFile {
            len: bytes.len() as u64,
            frame_bytes,
        });
    }
    let data = bytes.iter().map(|&b| f32::from(b)).collect();
    UltrasoundSequence::new(data, scanlines, points, fps)
}

/// Values are rounded and clamped into `0..=255`.
pub fn encode_ultrasound(seq: &UltrasoundSequence) -> Vec<u8> {
    seq.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect()
}

pub fn read_ultrasound(path: impl AsRef<Path>, scanlines: usize, points: usize, fps: f64) -> Result<UltrasoundSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ultrasound(&bytes, scanlines, points, fps)
}

pub fn write_ultrasound(seq: &UltrasoundSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ultrasound(seq)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Parameter sidecar

fn parse_number<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("cannot parse `{value}` as a number for key `{key}`")))
}

/// Parses a `key=value` sidecar.
///
/// `offset_ms` and `fps` are required. `type` defaults to `A`, `speaker` and
/// `session` to `unknown`, `scanlines`/`points` to 63/412. Unknown keys are ignored.
pub fn parse_params(text: &str) -> Result<UtteranceParams> {
    let mut offset = None;
    let mut fps = None;
    let mut params = UtteranceParams::new(0.0, 1.0);
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "offset_ms" => offset = Some(parse_number::<f64>(key, value)?),
            "fps" => fps = Some(parse_number::<f64>(key, value)?),
            "type" => params.utterance_type = value.parse()?,
            "speaker" => params.speaker_id = value.to_string(),
            "session" => params.session_id = value.to_string(),
            "scanlines" => params.scanlines = parse_number(key, value)?,
            "points" => params.points = parse_number(key, value)?,
            _ => log::debug!("ignoring unknown parameter key `{key}`"),
        }
    }
    params.true_offset_ms = offset.ok_or_else(|| Error::MissingField("offset_ms".into()))?;
    params.fps = fps.ok_or_else(|| Error::MissingField("fps".into()))?;
    if !params.true_offset_ms.is_finite() {
        return Err(Error::Format("offset_ms must be finite".into()));
    }
    if !(params.fps > 0.0) || !params.fps.is_finite() {
        return Err(Error::Domain(format!("fps must be positive, got {}", params.fps)));
    }
    Ok(params)
}

pub fn format_params(params: &UtteranceParams) -> String {
    format!(
        "offset_ms={}\nfps={}\ntype={}\nspeaker={}\nsession={}\nscanlines={}\npoints={}\n",
        params.true_offset_ms,
        params.fps,
        params.utterance_type,
        params.speaker_id,
        params.session_id,
        params.scanlines,
        params.points
    )
}

pub fn read_params(path: impl AsRef<Path>) -> Result<UtteranceParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_params(&text)
}

pub fn write_params(params: &UtteranceParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_params(params)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Bundles

pub fn bundle_paths(dir: &Path, id: &str) -> [PathBuf; 3] {
    [
        dir.join(format!("{id}.wav")),
        dir.join(format!("{id}.ult")),
        dir.join(format!("{id}.param")),
    ]
}

/// Loads `<id>.wav`, `<id>.ult` and `<id>.param` from `dir`.
///
/// All three files are checked for existence before anything is parsed.
pub fn load_bundle(dir: impl AsRef<Path>, id: &str) -> Result<UtteranceBundle> {
    let dir = dir.as_ref();
    let [wav, ult, param] = bundle_paths(dir, id);
    for p in [&wav, &ult, &param] {
        if !p.is_file() {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            return Err(Error::BundleIncomplete(name));
        }
    }
    let params = read_params(&param)?;
    let audio = read_wav(&wav)?;
    let ultra = read_ultrasound(&ult, params.scanlines, params.points, params.fps)?;
    Ok(UtteranceBundle {
        id: id.to_string(),
        audio,
        ultra,
        params,
    })
}

pub fn write_bundle(dir: impl AsRef<Path>, bundle: &UtteranceBundle) -> Result<()> {
    let dir = dir.as_ref();
    let [wav, ult, param] = bundle_paths(dir, &bundle.id);
    write_wav(&bundle.audio, wav)?;
    write_ultrasound(&bundle.ultra, ult)?;
    write_params(&bundle.params, param)
}
