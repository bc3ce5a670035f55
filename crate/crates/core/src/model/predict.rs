use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pipeline::{self, MfccWindow, PreprocessConfig, UltrasoundWindow, WindowSet};
use crate::UtteranceBundle;

use super::UltraSyncModel;

pub const CANDIDATE_STEP_MS: f64 = 45.0;

/// Offsets considered at prediction time. Each is the lower edge of a grid
/// bin that held at least one training offset.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    offsets_ms: Vec<f64>,
    pub step_ms: f64,
    pub source_range_ms: (f64, f64),
}

impl CandidateSet {
    /// Explicit list; must be non-empty and strictly increasing.
    pub fn from_offsets(offsets_ms: Vec<f64>, step_ms: f64) -> Result<Self> {
        if offsets_ms.is_empty() {
            return Err(Error::Domain("empty candidate set".into()));
        }
        if offsets_ms.iter().any(|o| !o.is_finite()) || offsets_ms.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("candidate offsets must be finite and strictly increasing".into()));
        }
        let range = (offsets_ms[0], offsets_ms[offsets_ms.len() - 1]);
        Ok(Self {
            offsets_ms,
            step_ms,
            source_range_ms: range,
        })
    }

    pub fn offsets_ms(&self) -> &[f64] {
        &self.offsets_ms
    }

    pub fn len(&self) -> usize {
        self.offsets_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets_ms.is_empty()
    }

    pub fn contains(&self, ms: f64) -> bool {
        self.offsets_ms.contains(&ms)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# step_ms\t{}\n# range_ms\t{}\t{}\noffset_ms\n",
            self.step_ms, self.source_range_ms.0, self.source_range_ms.1
        );
        for o in &self.offsets_ms {
            s.push_str(&format!("{o}\n"));
        }
        s
    }

    /// Reads the `to_tsv` layout. A bare column of numbers (with or without
    /// the header) is also accepted.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut step = CANDIDATE_STEP_MS;
        let mut range = None;
        let mut offsets = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix('#') {
                let f: Vec<&str> = rest.split_whitespace().collect();
                let num = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok());
                match f.first().copied() {
                    Some("step_ms") => step = num(1).ok_or_else(|| Error::Format(format!("bad line `{line}`")))?,
                    Some("range_ms") => {
                        range = Some((
                            num(1).ok_or_else(|| Error::Format(format!("bad line `{line}`")))?,
                            num(2).ok_or_else(|| Error::Format(format!("bad line `{line}`")))?,
                        ))
                    }
                    _ => {}
                }
                continue;
            }
            if line == "offset_ms" {
                continue;
            }
            offsets.push(
                line.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad candidate offset `{line}`")))?,
            );
        }
        let mut set = Self::from_offsets(offsets, step)?;
        if let Some(r) = range {
            set.source_range_ms = r;
        }
        Ok(set)
    }
}

/// Bins training offsets on a grid of `step_ms` steps starting at their
/// minimum and keeps the lower edge of every non-empty bin. Bin `k` covers
/// `[min + k·step, min + (k+1)·step)`; the last bin also holds the maximum.
pub fn build_candidate_set(training_offsets_ms: &[f64], step_ms: f64) -> Result<CandidateSet> {
    if training_offsets_ms.is_empty() {
        return Err(Error::Domain("no training offsets to build candidates from".into()));
    }
    if !(step_ms > 0.0) || training_offsets_ms.iter().any(|o| !o.is_finite()) {
        return Err(Error::Domain("offsets and step must be finite, step positive".into()));
    }
    let min = training_offsets_ms.iter().copied().fold(f64::INFINITY, f64::min);
    let max = training_offsets_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bin = |o: f64| ((o - min) / step_ms + 1e-9).floor() as usize;
    let n_grid = bin(max) + 1;
    let mut used = vec![false; n_grid];
    for &o in training_offsets_ms {
        used[bin(o).min(n_grid - 1)] = true;
    }
    let offsets_ms = used
        .iter()
        .enumerate()
        .filter(|(_, &u)| u)
        .map(|(k, _)| min + k as f64 * step_ms)
        .collect();
    Ok(CandidateSet {
        offsets_ms,
        step_ms,
        source_range_ms: (min, max),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncPrediction {
    pub utterance_id: String,
    pub predicted_offset_ms: f64,
    /// Per candidate, in candidate order; `None` where the candidate produced no windows.
    pub mean_distances: Vec<Option<f64>>,
    /// Windows averaged for the chosen candidate.
    pub n_windows: usize,
}

/// Picks the candidate with the smallest score; ties go to the smaller offset.
/// `scores[i]` is `(mean distance, windows)` or `None` to exclude candidate `i`.
pub fn select_offset(id: &str, candidates: &CandidateSet, scores: Vec<Option<(f64, usize)>>) -> Result<SyncPrediction> {
    if scores.len() != candidates.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    let mut best: Option<(usize, f64, usize)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some((d, n)) = *s {
            if !d.is_finite() {
                return Err(Error::Domain(format!("non-finite mean distance for `{id}`")));
            }
            if best.is_none_or(|(_, bd, _)| d < bd) {
                best = Some((i, d, n));
            }
        }
    }
    let (i, _, n) = best.ok_or_else(|| Error::Unsyncable(id.to_string()))?;
    Ok(SyncPrediction {
        utterance_id: id.to_string(),
        predicted_offset_ms: candidates.offsets_ms()[i],
        mean_distances: scores.into_iter().map(|s| s.map(|(d, _)| d)).collect(),
        n_windows: n,
    })
}

fn candidate_windows(reduced: &UtteranceBundle, offset_ms: f64, cfg: &PreprocessConfig) -> Result<Option<WindowSet>> {
    let pre = match pipeline::finish_preprocess(reduced, offset_ms, cfg) {
        Ok(p) => p,
        Err(Error::EmptyAudio { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let ws = pipeline::make_windows(&pre.bundle, &cfg.mfcc)?;
    Ok((!ws.is_empty()).then_some(ws))
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean embedding distance per candidate offset, then [`select_offset`].
///
/// The bundle must be raw (its recorded offset is not applied). Each
/// candidate crops its own offset from the audio and runs the usual
/// preprocessing; MFCCs are recomputed per candidate. Ultrasound windows that
/// are identical across candidates are embedded once.
pub fn predict_offset(
    model: &UltraSyncModel,
    bundle: &UtteranceBundle,
    candidates: &CandidateSet,
    cfg: &PreprocessConfig,
) -> Result<SyncPrediction> {
    let reduced = pipeline::reduce_ultrasound(bundle, cfg)?;
    let sets: Vec<Option<WindowSet>> = candidates
        .offsets_ms()
        .par_iter()
        .map(|&c| candidate_windows(&reduced, c, cfg))
        .collect::<Result<_>>()?;

    // unique ultrasound windows, grouped by window index
    let mut unique: Vec<Arc<UltrasoundWindow>> = Vec::new();
    let mut by_index: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut slot: Vec<Vec<usize>> = Vec::with_capacity(sets.len());
    for set in &sets {
        let mut slots = Vec::new();
        for w in set.iter().flat_map(|s| &s.ultra) {
            let group = by_index.entry(w.window_index).or_default();
            let found = group.iter().copied().find(|&u| unique[u].data == w.data);
            slots.push(found.unwrap_or_else(|| {
                unique.push(Arc::clone(w));
                group.push(unique.len() - 1);
                unique.len() - 1
            }));
        }
        slot.push(slots);
    }
    let refs: Vec<&UltrasoundWindow> = unique.iter().map(|w| w.as_ref()).collect();
    let visual = model.embed_ultrasound(&refs)?;

    let scores = sets
        .iter()
        .zip(&slot)
        .map(|(set, slots)| -> Result<Option<(f64, usize)>> {
            let Some(set) = set else { return Ok(None) };
            let mf: Vec<&MfccWindow> = set.mfcc.iter().map(|w| w.as_ref()).collect();
            let audio = model.embed_mfcc(&mf)?;
            let total: f64 = slots.iter().zip(&audio).map(|(&u, a)| distance(&visual[u], a)).sum();
            Ok(Some((total / audio.len() as f64, audio.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    select_offset(&bundle.id, candidates, scores)
}
