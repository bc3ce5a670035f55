//! `dsp::mfcc` against the longhand reference in the test kit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ultrasync_core::dsp::{derive_mfcc_timing, mfcc, MfccConfig};
use ultrasync_core::AudioSignal;
use ultrasync_testkit::{naive_mfcc, naive_power_spectrum, NaiveMfccParams};

fn compare(x: &[f64], sr: u32, cfg: &MfccConfig) -> f64 {
    let framing = cfg.framing(sr).unwrap();
    let ours = mfcc(&AudioSignal::new(x.to_vec(), sr).unwrap(), cfg).unwrap();
    let reference = naive_mfcc(
        x,
        &NaiveMfccParams {
            sample_rate: f64::from(sr),
            n_coeffs: cfg.n_coeffs,
            n_filters: cfg.n_mel_filters,
            pre_emphasis: cfg.pre_emphasis,
            window_samples: framing.window_samples,
            hop_samples: framing.hop_samples,
            fft_size: framing.fft_size,
            log_floor: cfg.log_floor,
        },
    );
    assert_eq!(ours.n_frames(), reference.len());
    let mut worst = 0.0f64;
    for (k, want) in reference.iter().enumerate() {
        assert_eq!(ours.frame(k).len(), want.len());
        for (g, w) in ours.frame(k).iter().zip(want) {
            worst = worst.max((g - w).abs() / w.abs().max(1e-3));
        }
    }
    worst
}

#[test]
fn reference_transform_matches_hand_dft() {
    // x = [1, 0, -1, 0] over 4 points: X = 0, 2, 0
    let p = naive_power_spectrum(&[1.0, 0.0, -1.0, 0.0], 4);
    assert!(p.iter().zip([0.0, 4.0, 0.0]).all(|(a, b)| (a - b).abs() < 1e-12), "{p:?}");
}

#[test]
fn default_config_on_noise() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..8000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = compare(&x, 16000, &MfccConfig::default());
        assert!(e < 1e-6, "seed {seed}: {e:e}");
    }
}

#[test]
fn derived_timing_with_fractional_hops() {
    let cfg = MfccConfig::default().with_timing(derive_mfcc_timing(24.3, 5).unwrap());
    assert!(cfg.framing(22050).unwrap().hop_samples.fract() != 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..22050)
        .map(|i| 0.4 * (i as f64 * 0.07).sin() + rng.random_range(-0.1..0.1))
        .collect();
    let e = compare(&x, 22050, &cfg);
    assert!(e < 1e-6, "{e:e}");
}

#[test]
fn silence_hits_the_log_floor_in_both() {
    let x = vec![0.0; 4000];
    let e = compare(&x, 16000, &MfccConfig::default());
    assert!(e < 1e-9, "{e:e}");
}
