//! Straight-line reference implementations used only as test oracles.
//!
//! Nothing here shares code with `ultrasync-core`: transforms are direct
//! O(n²) sums and loops are written out longhand so that they can be checked
//! by eye against textbook definitions.

use std::f64::consts::PI;

/// |X_k|² for k in 0..=n/2 of the zero-padded input, by direct summation.
pub fn naive_power_spectrum(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n / 2 + 1);
    for k in 0..=n / 2 {
        let mut re = 0.0;
        let mut im = 0.0;
        for (t, &v) in x.iter().enumerate().take(n) {
            let ang = -2.0 * PI * (k as f64) * (t as f64) / (n as f64);
            re += v * ang.cos();
            im += v * ang.sin();
        }
        out.push(re * re + im * im);
    }
    out
}

pub struct NaiveMfccParams {
    pub sample_rate: f64,
    pub n_coeffs: usize,
    pub n_filters: usize,
    pub pre_emphasis: f64,
    pub window_samples: usize,
    pub hop_samples: f64,
    pub fft_size: usize,
    pub log_floor: f64,
}

/// MFCC by the book: pre-emphasis, Hamming, direct DFT power, HTK-mel triangles
/// evaluated at bin frequencies, natural log with floor, orthonormal DCT-II.
pub fn naive_mfcc(x: &[f64], p: &NaiveMfccParams) -> Vec<Vec<f64>> {
    let mut y = vec![0.0; x.len()];
    for i in 0..x.len() {
        y[i] = if i == 0 { x[0] } else { x[i] - p.pre_emphasis * x[i - 1] };
    }

    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(p.sample_rate / 2.0);
    let mut edges = Vec::new();
    for i in 0..p.n_filters + 2 {
        edges.push(hz(top * i as f64 / (p.n_filters + 1) as f64));
    }

    let mut frames = Vec::new();
    if x.len() < p.window_samples {
        return frames;
    }
    let mut k = 0usize;
    loop {
        let pos = k as f64 * p.hop_samples;
        if pos > (x.len() - p.window_samples) as f64 + 1e-9 {
            break;
        }
        let start = pos.round() as usize;
        let mut seg = Vec::new();
        for i in 0..p.window_samples {
            let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (p.window_samples - 1) as f64).cos();
            seg.push(y[start + i] * w);
        }
        let power = naive_power_spectrum(&seg, p.fft_size);

        let mut logs = Vec::new();
        for m in 0..p.n_filters {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut e = 0.0;
            for (b, pw) in power.iter().enumerate() {
                let f = b as f64 * p.sample_rate / p.fft_size as f64;
                let w = if f > lo && f <= c {
                    (f - lo) / (c - lo)
                } else if f > c && f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                };
                e += w * pw;
            }
            logs.push(if e > p.log_floor { e.ln() } else { p.log_floor.ln() });
        }

        let n = logs.len() as f64;
        let mut cep = Vec::new();
        for q in 0..p.n_coeffs {
            let mut s = 0.0;
            for (i, l) in logs.iter().enumerate() {
                s += l * (PI * q as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos();
            }
            let scale = if q == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            cep.push(s * scale);
        }
        frames.push(cep);
        k += 1;
    }
    frames
}

/// Valid, stride-1 cross-correlation of one `[c][h][w]` input with `[f][c][kh][kw]` weights.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    f: usize,
    kh: usize,
    kw: usize,
    bias: &[f64],
) -> Vec<f64> {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    let mut out = vec![0.0; f * oh * ow];
    for fi in 0..f {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[fi];
                for ci in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            acc += input[(ci * h + y + dy) * w + x + dx]
                                * weights[((fi * c + ci) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(fi * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

/// Normalised cross-correlation of `a` against `b` shifted by `lag` (b[i + lag]).
pub fn normalised_xcorr(a: &[f64], b: &[f64], lag: isize) -> f64 {
    let mut pairs = Vec::new();
    for i in 0..a.len() {
        let j = i as isize + lag;
        if j >= 0 && (j as usize) < b.len() {
            pairs.push((a[i], b[j as usize]));
        }
    }
    if pairs.len() < 2 {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Lag in `lags` maximising [`normalised_xcorr`]; the first maximum wins.
pub fn best_lag(a: &[f64], b: &[f64], lags: std::ops::RangeInclusive<isize>) -> isize {
    let mut best = (*lags.start(), f64::NEG_INFINITY);
    for lag in lags {
        let r = normalised_xcorr(a, b, lag);
        if r > best.1 {
            best = (lag, r);
        }
    }
    best.0
}
