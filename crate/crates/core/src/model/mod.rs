//! The two-stream synchronisation model: architecture, training, candidate
//! offset search and evaluation.

mod eval;
mod predict;
mod train;

pub use eval::{is_correct, random_baseline, BaselineStats, GroupStats, SyncRecord, SyncReport, Truth};
pub use predict::{build_candidate_set, predict_offset, select_offset, CandidateSet, SyncPrediction, CANDIDATE_STEP_MS};
pub use train::{evaluate_pairs, train, EpochRecord, PairMetrics, TrainConfig, TrainOutcome};

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint, CheckpointMeta, LayerSpec, NetworkSpec, Tensor, TwoStreamNet};
use crate::pipeline::{self, MfccWindow, PreprocessConfig, SamplePair, UltrasoundWindow};
use crate::seed::derive_seed;
use crate::UtteranceBundle;

/// Embedding width of both streams.
pub const EMBEDDING_DIM: usize = 64;
/// Windows per forward pass when embedding outside training.
pub const EMBED_BATCH: usize = 32;

fn conv(filters: usize, k: usize) -> LayerSpec {
    LayerSpec::Conv {
        filters,
        kernel_h: k,
        kernel_w: k,
        bias: false,
    }
}

fn fc(units: usize) -> LayerSpec {
    LayerSpec::Linear { units, bias: false }
}

/// conv → bn → relu [→ pool], repeated, then flatten and fc → bn → relu twice.
fn stream(input: Vec<usize>, convs: &[(usize, usize, bool)], fcs: &[usize]) -> NetworkSpec {
    let mut layers = Vec::new();
    for &(f, k, pool) in convs {
        layers.extend([conv(f, k), LayerSpec::BatchNorm, LayerSpec::Relu]);
        if pool {
            layers.push(LayerSpec::MaxPool { factor: 2 });
        }
    }
    layers.push(LayerSpec::Flatten);
    for &u in fcs {
        layers.extend([fc(u), LayerSpec::BatchNorm, LayerSpec::Relu]);
    }
    NetworkSpec::new(input, layers)
}

/// Visual stream: 5 frames of 63×138 as channels, three 5×5 convolutions each pooled.
pub fn visual_spec() -> NetworkSpec {
    stream(
        vec![pipeline::FRAMES_PER_WINDOW, 63, 138],
        &[(23, 5, true), (64, 5, true), (128, 5, true)],
        &[EMBEDDING_DIM, EMBEDDING_DIM],
    )
}

/// Audio stream: one 20×13 MFCC window, three 3×3 convolutions, the last two pooled.
pub fn audio_spec() -> NetworkSpec {
    stream(
        vec![1, pipeline::MFCC_FRAMES_PER_WINDOW, 13],
        &[(23, 3, false), (64, 3, true), (128, 3, true)],
        &[EMBEDDING_DIM, EMBEDDING_DIM],
    )
}

/// A scaled-down pair of streams (inputs 5×16×24 and 1×20×13) with the same
/// layer pattern, small enough for exhaustive finite-difference checks.
pub fn miniature_specs() -> (NetworkSpec, NetworkSpec) {
    (
        stream(vec![5, 16, 24], &[(3, 3, true), (4, 3, true)], &[6, 4]),
        stream(vec![1, 20, 13], &[(3, 3, false), (4, 3, true)], &[6, 4]),
    )
}

#[derive(Debug, Clone)]
pub struct UltraSyncModel {
    pub net: TwoStreamNet<f32>,
    pub seed: u64,
}

/// The full model with freshly initialised parameters.
pub fn build_model(seed: u64) -> Result<UltraSyncModel> {
    UltraSyncModel::from_specs(&visual_spec(), &audio_spec(), seed)
}

impl UltraSyncModel {
    pub fn from_specs(visual: &NetworkSpec, audio: &NetworkSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            net: TwoStreamNet::build(visual, audio, seed)?,
            seed,
        })
    }

    pub fn visual_input(&self) -> &[usize] {
        &self.net.visual.spec().input
    }

    pub fn audio_input(&self) -> &[usize] {
        &self.net.audio.spec().input
    }

    pub fn param_count(&self) -> usize {
        self.net.visual.param_count() + self.net.audio.param_count()
    }

    /// Stacks ultrasound windows into a network input; pixels are scaled to [0, 1].
    pub fn ultra_tensor(&self, windows: &[&UltrasoundWindow]) -> Result<Tensor<f32>> {
        let want = self.visual_input();
        let mut data = Vec::with_capacity(windows.len() * want.iter().product::<usize>());
        for w in windows {
            if w.shape[..] != want[..] {
                return Err(Error::Shape(format!(
                    "ultrasound window {:?} does not match model input {want:?}",
                    w.shape
                )));
            }
            data.extend(w.data.iter().map(|&v| v / 255.0));
        }
        let mut shape = vec![windows.len()];
        shape.extend_from_slice(want);
        Tensor::new(shape, data)
    }

    /// Stacks MFCC windows into a single-channel network input.
    pub fn mfcc_tensor(&self, windows: &[&MfccWindow]) -> Result<Tensor<f32>> {
        let want = self.audio_input();
        let mut data = Vec::with_capacity(windows.len() * want.iter().product::<usize>());
        for w in windows {
            if want.len() != 3 || want[0] != 1 || w.shape[..] != want[1..] {
                return Err(Error::Shape(format!(
                    "MFCC window {:?} does not match model input {want:?}",
                    w.shape
                )));
            }
            data.extend_from_slice(&w.data);
        }
        let mut shape = vec![windows.len()];
        shape.extend_from_slice(want);
        Tensor::new(shape, data)
    }

    fn rows(t: Tensor<f32>) -> Vec<Vec<f32>> {
        (0..t.batch()).map(|b| t.sample(b).to_vec()).collect()
    }

    /// Eval-mode visual embeddings.
    pub fn embed_ultrasound(&self, windows: &[&UltrasoundWindow]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(EMBED_BATCH) {
            out.extend(Self::rows(self.net.visual.infer(&self.ultra_tensor(chunk)?)?));
        }
        Ok(out)
    }

    /// Eval-mode audio embeddings.
    pub fn embed_mfcc(&self, windows: &[&MfccWindow]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(EMBED_BATCH) {
            out.extend(Self::rows(self.net.audio.infer(&self.mfcc_tensor(chunk)?)?));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        save_checkpoint(path, &self.net, meta)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (net, meta) = load_checkpoint(path)?;
        Ok((Self { net, seed: meta.seed }, meta))
    }
}

/// Training pairs for one raw utterance: preprocessed at its recorded offset,
/// windowed, with negatives seeded from `(seed, id)`.
pub fn utterance_pairs(bundle: &UtteranceBundle, cfg: &PreprocessConfig, seed: u64) -> Result<Vec<SamplePair>> {
    let pre = pipeline::preprocess(bundle, bundle.params.true_offset_ms, cfg)?;
    let ws = pipeline::make_windows(&pre.bundle, &cfg.mfcc)?;
    pipeline::make_pairs(&ws.ultra, &ws.mfcc, derive_seed(seed, &bundle.id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn full_shape_trace() {
        let v = visual_spec().shape_trace().unwrap();
        let chain: Vec<Vec<usize>> = v.iter().filter(|s| s.len() == 3).cloned().collect();
        assert!(chain.contains(&vec![23, 59, 134]));
        assert!(chain.contains(&vec![23, 29, 67]));
        assert!(chain.contains(&vec![64, 25, 63]));
        assert!(chain.contains(&vec![64, 12, 31]));
        assert!(chain.contains(&vec![128, 8, 27]));
        assert!(chain.contains(&vec![128, 4, 13]));
        assert!(v.contains(&vec![6656]));
        assert_eq!(v.last().unwrap(), &vec![64]);

        let a = audio_spec().shape_trace().unwrap();
        for s in [[23, 18, 11], [64, 16, 9], [64, 8, 4], [128, 6, 2], [128, 3, 1]] {
            assert!(a.contains(&s.to_vec()), "missing {s:?}");
        }
        assert!(a.contains(&vec![384]));
        assert_eq!(a.last().unwrap(), &vec![64]);
    }

    #[test]
    fn miniature_shapes() {
        let (v, a) = miniature_specs();
        assert_eq!(v.output_shape().unwrap(), a.output_shape().unwrap());
    }

    fn mini_model(seed: u64) -> UltraSyncModel {
        let (v, a) = miniature_specs();
        UltraSyncModel::from_specs(&v, &a, seed).unwrap()
    }

    fn uw(i: usize) -> Arc<UltrasoundWindow> {
        Arc::new(UltrasoundWindow {
            data: (0..5 * 16 * 24).map(|k| ((k * 7 + i * 31) % 256) as f32).collect(),
            shape: [5, 16, 24],
            utterance_id: "u".into(),
            window_index: i,
        })
    }

    #[test]
    fn eval_embedding_independent_of_batch() {
        let m = mini_model(2);
        let ws: Vec<_> = (0..5).map(uw).collect();
        let refs: Vec<&UltrasoundWindow> = ws.iter().map(|w| w.as_ref()).collect();
        let all = m.embed_ultrasound(&refs).unwrap();
        let one = m.embed_ultrasound(&refs[2..3]).unwrap();
        assert_eq!(all[2], one[0]);
        assert_eq!(m.embed_ultrasound(&refs[2..3]).unwrap(), one);
        assert!(all.iter().all(|e| e.len() == 4 && e.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn wrong_window_shape() {
        let m = mini_model(0);
        let bad = MfccWindow {
            data: vec![0.0; 20 * 12],
            shape: [20, 12],
            utterance_id: "x".into(),
            window_index: 0,
        };
        assert!(matches!(m.embed_mfcc(&[&bad]), Err(Error::Shape(_))));
    }

    #[test]
    fn same_seed_same_model() {
        let a = build_model(9).unwrap();
        let b = build_model(9).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        assert_eq!(a.param_count(), b.param_count());
    }
}
