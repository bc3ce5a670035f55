//! Seeded fixtures shared by the benchmarks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ultrasync_core::synth::{self, SynthConfig};
use ultrasync_core::{AudioSignal, MfccWindow, SamplePair, UltrasoundWindow, UtteranceBundle};

pub fn noise_signal(seconds: f64, sample_rate: u32, seed: u64) -> AudioSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * f64::from(sample_rate)) as usize;
    AudioSignal::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), sample_rate).unwrap()
}

/// `batch` random pairs shaped like real model inputs, half of them positive.
pub fn random_pairs(batch: usize, seed: u64) -> Vec<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|i| SamplePair {
            ultra: Arc::new(UltrasoundWindow {
                data: (0..5 * 63 * 138).map(|_| rng.random_range(0.0..255.0)).collect(),
                shape: [5, 63, 138],
                utterance_id: "bench".into(),
                window_index: i,
            }),
            mfcc: Arc::new(MfccWindow {
                data: (0..20 * 13).map(|_| rng.random_range(-5.0..5.0)).collect(),
                shape: [20, 13],
                utterance_id: "bench".into(),
                window_index: i,
            }),
            label: (i % 2) as u8,
        })
        .collect()
}

/// One synthetic utterance of the default geometry.
pub fn utterance(duration_s: f64, seed: u64) -> UtteranceBundle {
    let cfg = SynthConfig {
        duration_range_s: (duration_s, duration_s),
        seed,
        ..SynthConfig::default()
    };
    let plan = synth::plan_utterance(&cfg, 0, 0);
    synth::generate_utterance(&cfg, &plan).unwrap().0
}
