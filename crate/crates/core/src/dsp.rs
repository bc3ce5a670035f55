//! MFCC features with framing tied to the ultrasound frame rate.
//!
//! For `l` ultrasound frames per window at an effective rate `r`, one window
//! spans `t = l / r` seconds; the MFCC analysis window is `t / 2l` and the hop
//! `t / 4l`, so exactly `4l` hops (20 for `l = 5`) cover one ultrasound window.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::{Arc, OnceLock, RwLock};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::media_io::AudioSignal;

/// MFCC hops per ultrasound frame.
pub const HOPS_PER_FRAME: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfccTiming {
    /// Time spanned by one ultrasound window, `l / r`.
    pub span_s: f64,
    pub window_s: f64,
    pub hop_s: f64,
}

pub fn derive_mfcc_timing(ultra_fps_effective: f64, frames_per_window: usize) -> Result<MfccTiming> {
    if !(ultra_fps_effective > 0.0) || !ultra_fps_effective.is_finite() {
        return Err(Error::Domain(format!(
            "effective ultrasound frame rate must be positive, got {ultra_fps_effective}"
        )));
    }
    if frames_per_window == 0 {
        return Err(Error::Domain("frames per window must be at least 1".into()));
    }
    let l = frames_per_window as f64;
    let span_s = l / ultra_fps_effective;
    let hop_s = span_s / (HOPS_PER_FRAME as f64 * l);
    Ok(MfccTiming {
        span_s,
        window_s: 2.0 * hop_s,
        hop_s,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub n_coeffs: usize,
    pub n_mel_filters: usize,
    pub pre_emphasis: f64,
    pub window_s: f64,
    pub hop_s: f64,
    /// `None` picks the smallest power of two covering the window.
    pub fft_size: Option<usize>,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_coeffs: 13,
            n_mel_filters: 26,
            pre_emphasis: 0.97,
            window_s: 0.02,
            hop_s: 0.01,
            fft_size: None,
            log_floor: 1e-10,
        }
    }
}

/// Sample-domain framing resolved for one sample rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Framing {
    pub window_samples: usize,
    /// Hop in samples; fractional hops are allowed and frame starts are rounded.
    pub hop_samples: f64,
    pub fft_size: usize,
}

impl Framing {
    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.window_samples {
            return 0;
        }
        let span = (n_samples - self.window_samples) as f64;
        (span / self.hop_samples + 1e-9).floor() as usize + 1
    }

    pub fn frame_start(&self, k: usize) -> usize {
        (k as f64 * self.hop_samples).round() as usize
    }
}

impl MfccConfig {
    pub fn with_timing(&self, timing: MfccTiming) -> Self {
        Self {
            window_s: timing.window_s,
            hop_s: timing.hop_s,
            ..self.clone()
        }
    }

    pub fn framing(&self, sample_rate: u32) -> Result<Framing> {
        if self.n_coeffs == 0 || self.n_coeffs > self.n_mel_filters {
            return Err(Error::Config(format!(
                "need 1 <= n_coeffs ({}) <= n_mel_filters ({})",
                self.n_coeffs, self.n_mel_filters
            )));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return Err(Error::Config(format!("pre-emphasis {} outside [0, 1)", self.pre_emphasis)));
        }
        if !(self.hop_s > 0.0 && self.window_s > self.hop_s) {
            return Err(Error::Config(format!(
                "need window_s ({}) > hop_s ({}) > 0",
                self.window_s, self.hop_s
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        let sr = f64::from(sample_rate);
        let window_samples = (self.window_s * sr).round() as usize;
        if window_samples < 2 {
            return Err(Error::Config(format!("window of {window_samples} samples is too short")));
        }
        let fft_size = self.fft_size.unwrap_or_else(|| window_samples.next_power_of_two());
        if !fft_size.is_power_of_two() || fft_size < window_samples {
            return Err(Error::Config(format!(
                "fft size {fft_size} must be a power of two >= window length {window_samples}"
            )));
        }
        Ok(Framing {
            window_samples,
            hop_samples: self.hop_s * sr,
            fft_size,
        })
    }
}

/// Time-major cepstral frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccMatrix {
    data: Vec<f64>,
    n_frames: usize,
    n_coeffs: usize,
    pub hop_s: f64,
    pub window_s: f64,
    pub start_time_s: f64,
}

impl MfccMatrix {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_coeffs..(k + 1) * self.n_coeffs]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Start time of frame `k` in seconds.
    pub fn frame_time(&self, k: usize) -> f64 {
        self.start_time_s + k as f64 * self.hop_s
    }

    /// One frame per row, nine significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for k in 0..self.n_frames {
            for (i, v) in self.frame(k).iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v:.8e}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_filters: usize,
    pub n_bins: usize,
    pub centres_hz: Vec<f64>,
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n_bins..(i + 1) * self.n_bins]
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Triangular filters with centres equally spaced in mel between 0 Hz and Nyquist,
/// evaluated at the FFT bin frequencies `k * sr / fft_size`.
pub fn mel_filterbank(n_filters: usize, fft_size: usize, sample_rate: u32) -> Result<MelFilterbank> {
    if n_filters == 0 {
        return Err(Error::Config("need at least one mel filter".into()));
    }
    if !fft_size.is_power_of_two() || fft_size < 2 {
        return Err(Error::Config(format!("fft size {fft_size} is not a power of two")));
    }
    let sr = f64::from(sample_rate);
    let n_bins = fft_size / 2 + 1;
    let mel_max = hz_to_mel(sr / 2.0);
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_filters + 1) as f64))
        .collect();
    let mut weights = vec![0.0; n_filters * n_bins];
    for i in 0..n_filters {
        let (lo, centre, hi) = (edges[i], edges[i + 1], edges[i + 2]);
        let row = &mut weights[i * n_bins..(i + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * sr / fft_size as f64;
            *w = if f > lo && f <= centre {
                (f - lo) / (centre - lo)
            } else if f > centre && f < hi {
                (hi - f) / (hi - centre)
            } else {
                0.0
            };
        }
        if row.iter().all(|&w| w <= 0.0) {
            return Err(Error::Config(format!(
                "mel filter {i} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; {n_filters} filters is too many for fft size {fft_size}"
            )));
        }
    }
    Ok(MelFilterbank {
        n_filters,
        n_bins,
        centres_hz: edges[1..=n_filters].to_vec(),
        weights,
    })
}

type FilterbankKey = (usize, usize, u32);

fn cached_filterbank(n_filters: usize, fft_size: usize, sample_rate: u32) -> Result<Arc<MelFilterbank>> {
    static CACHE: OnceLock<RwLock<HashMap<FilterbankKey, Arc<MelFilterbank>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (n_filters, fft_size, sample_rate);
    if let Some(fb) = cache.read().unwrap_or_else(|e| e.into_inner()).get(&key) {
        return Ok(Arc::clone(fb));
    }
    let fb = Arc::new(mel_filterbank(n_filters, fft_size, sample_rate)?);
    cache
        .write()
        .unwrap_or_else(|e| e.into_inner())
        .entry(key)
        .or_insert_with(|| Arc::clone(&fb));
    Ok(fb)
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

pub fn pre_emphasise(x: &[f64], alpha: f64) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        y.push(first);
    }
    y.extend(x.windows(2).map(|w| w[1] - alpha * w[0]));
    y
}

/// Orthonormal DCT-II, keeping the first `out.len()` coefficients.
fn dct2_ortho(input: &[f64], out: &mut [f64]) {
    let n = input.len() as f64;
    for (k, o) in out.iter_mut().enumerate() {
        let s: f64 = input
            .iter()
            .enumerate()
            .map(|(i, x)| x * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
            .sum();
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        *o = s * scale;
    }
}

/// Computes MFCCs over the whole signal with global framing.
///
/// Frame `k` starts at sample `round(k * hop_samples)`; a signal shorter than one
/// window yields zero frames.
pub fn mfcc(signal: &AudioSignal, config: &MfccConfig) -> Result<MfccMatrix> {
    let framing = config.framing(signal.sample_rate)?;
    let fb = cached_filterbank(config.n_mel_filters, framing.fft_size, signal.sample_rate)?;
    let emphasised = pre_emphasise(&signal.samples, config.pre_emphasis);
    let n_frames = framing.n_frames(emphasised.len());
    let window = hamming(framing.window_samples);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(framing.fft_size);

    let mut data = Vec::with_capacity(n_frames * config.n_coeffs);
    let mut buf = vec![Complex::new(0.0, 0.0); framing.fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; fb.n_bins];
    let mut energies = vec![0.0; fb.n_filters];
    let mut coeffs = vec![0.0; config.n_coeffs];
    for k in 0..n_frames {
        let start = framing.frame_start(k);
        let frame = &emphasised[start..start + framing.window_samples];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = match frame.get(i) {
                Some(x) => Complex::new(x * window[i], 0.0),
                None => Complex::new(0.0, 0.0),
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        fb.apply(&power, &mut energies);
        for e in energies.iter_mut() {
            *e = e.max(config.log_floor).ln();
        }
        dct2_ortho(&energies, &mut coeffs);
        data.extend_from_slice(&coeffs);
    }
    Ok(MfccMatrix {
        data,
        n_frames,
        n_coeffs: config.n_coeffs,
        hop_s: config.hop_s,
        window_s: config.window_s,
        start_time_s: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn timing_at_corpus_rate() {
        let t = derive_mfcc_timing(24.3, 5).unwrap();
        assert!((t.span_s - 0.205_761).abs() < 1e-6);
        assert!((t.window_s - 0.020_576).abs() < 1e-6);
        assert!((t.hop_s - 0.010_288).abs() < 1e-6);
        assert_eq!(t.window_s, 2.0 * t.hop_s);
    }

    #[test]
    fn timing_round_numbers() {
        let t = derive_mfcc_timing(25.0, 5).unwrap();
        assert_eq!(t.span_s, 0.2);
        assert_eq!(t.window_s, 0.02);
        assert_eq!(t.hop_s, 0.01);
        assert_eq!(20.0 * t.hop_s, t.span_s);
    }

    #[test]
    fn timing_rejects_bad_rate() {
        assert!(matches!(derive_mfcc_timing(0.0, 5), Err(Error::Domain(_))));
        assert!(matches!(derive_mfcc_timing(-3.0, 5), Err(Error::Domain(_))));
    }

    #[test]
    fn filterbank_well_formed() {
        let fb = mel_filterbank(26, 512, 22050).unwrap();
        for i in 0..26 {
            let row = fb.row(i);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().any(|&w| w > 0.0));
        }
        assert!(fb.centres_hz.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn first_centre_matches_hand_mel_inversion() {
        // mel(11025) = 2595 log10(1 + 11025/700); first centre at 1/27 of that.
        let mel_nyq = 2595.0 * (1.0f64 + 11025.0 / 700.0).log10();
        let hz = 700.0 * (10f64.powf(mel_nyq / 27.0 / 2595.0) - 1.0);
        let bin_hz = 22050.0 / 512.0;
        let fb = mel_filterbank(26, 512, 22050).unwrap();
        let row = fb.row(0);
        let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert!((peak as f64 - hz / bin_hz).abs() <= 1.0, "peak bin {peak}, expected {}", hz / bin_hz);
    }

    #[test]
    fn filterbank_degenerate() {
        assert!(matches!(mel_filterbank(200, 64, 22050), Err(Error::Config(_))));
        assert!(matches!(mel_filterbank(26, 500, 22050), Err(Error::Config(_))));
        assert!(matches!(mel_filterbank(0, 512, 22050), Err(Error::Config(_))));
    }

    #[test]
    fn frame_count_formula() {
        let cfg = MfccConfig::default();
        let framing = cfg.framing(16000).unwrap();
        assert_eq!(framing.window_samples, 320);
        assert_eq!(framing.hop_samples, 160.0);
        assert_eq!(framing.fft_size, 512);
        for n in [0usize, 319, 320, 479, 480, 16000] {
            let expect = if n >= 320 { (n - 320) / 160 + 1 } else { 0 };
            assert_eq!(framing.n_frames(n), expect, "n = {n}");
        }
    }

    #[test]
    fn zero_signal_constant_frames() {
        let sig = AudioSignal::new(vec![0.0; 22050], 22050).unwrap();
        let m = mfcc(&sig, &MfccConfig::default()).unwrap();
        // window 441, hop 220.5: floor(21609 / 220.5) + 1
        assert_eq!(m.n_frames(), 99);
        let first = m.frame(0).to_vec();
        for k in 0..m.n_frames() {
            assert_eq!(m.frame(k), &first[..]);
        }
        assert!(m.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn short_signal_gives_no_frames() {
        let sig = AudioSignal::new(vec![0.1; 100], 22050).unwrap();
        assert_eq!(mfcc(&sig, &MfccConfig::default()).unwrap().n_frames(), 0);
    }

    #[test]
    fn one_hop_delay_shifts_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..8000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut delayed = vec![0.0; 160];
        delayed.extend_from_slice(&x);
        let cfg = MfccConfig::default();
        let a = mfcc(&AudioSignal::new(x, 16000).unwrap(), &cfg).unwrap();
        let b = mfcc(&AudioSignal::new(delayed, 16000).unwrap(), &cfg).unwrap();
        assert_eq!(b.n_frames(), a.n_frames() + 1);
        for k in 1..a.n_frames() {
            for (u, v) in a.frame(k).iter().zip(b.frame(k + 1)) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tone_peaks_at_nearest_filter_hand_dft() {
        let sr = 22050u32;
        let timing = derive_mfcc_timing(24.3, 5).unwrap();
        let cfg = MfccConfig::default().with_timing(timing);
        let framing = cfg.framing(sr).unwrap();
        let x: Vec<f64> = (0..framing.window_samples)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / f64::from(sr)).sin())
            .collect();
        let windowed: Vec<f64> = pre_emphasise(&x, cfg.pre_emphasis)
            .iter()
            .zip(hamming(framing.window_samples))
            .map(|(a, w)| a * w)
            .collect();
        let power = ultrasync_testkit::naive_power_spectrum(&windowed, framing.fft_size);
        let fb = mel_filterbank(cfg.n_mel_filters, framing.fft_size, sr).unwrap();
        let mut energies = vec![0.0; fb.n_filters];
        fb.apply(&power, &mut energies);
        let loudest = (0..energies.len()).max_by(|&a, &b| energies[a].total_cmp(&energies[b])).unwrap();
        let nearest = (0..fb.n_filters)
            .min_by(|&a, &b| (fb.centres_hz[a] - 1000.0).abs().total_cmp(&(fb.centres_hz[b] - 1000.0).abs()))
            .unwrap();
        assert_eq!(loudest, nearest);
    }

    #[test]
    fn csv_has_thirteen_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..4000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let m = mfcc(&AudioSignal::new(x, 22050).unwrap(), &MfccConfig::default()).unwrap();
        let csv = m.to_csv();
        assert_eq!(csv.lines().count(), m.n_frames());
        assert!(csv.lines().all(|l| l.split(',').count() == 13));
    }
}
