//! Reading corpus directories without loading media.

use std::fs;
use std::path::Path;

use anyhow::Context;
use ultrasync_core::media_io::{self, UtteranceParams};
use ultrasync_core::pipeline::{HoldOut, SplitSet};
use ultrasync_core::synth::{self, ManifestEntry};
use ultrasync_core::{SplitSpec, UtteranceType};

use crate::user;

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub id: String,
    pub params: UtteranceParams,
}

/// Every utterance in `dir`, sorted by id.
///
/// Uses `manifest.tsv` when present (its offsets and types override the
/// sidecars), otherwise every `<id>.param` file.
pub fn list(dir: &Path) -> anyhow::Result<Vec<CorpusItem>> {
    if !dir.is_dir() {
        return Err(user(format!("corpus directory {} does not exist", dir.display())));
    }
    let manifest = dir.join("manifest.tsv");
    let mut items = Vec::new();
    if manifest.is_file() {
        for e in synth::read_manifest(&manifest)? {
            let [_, _, param] = media_io::bundle_paths(dir, &e.id);
            let mut params = media_io::read_params(&param)?;
            params.true_offset_ms = e.offset_ms;
            params.utterance_type = e.utterance_type;
            items.push(CorpusItem { id: e.id, params });
        }
    } else {
        for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.extension().is_some_and(|x| x == "param") {
                let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let params = media_io::read_params(&path)?;
                items.push(CorpusItem { id, params });
            }
        }
    }
    if items.is_empty() {
        return Err(user(format!("no utterances found in {}", dir.display())));
    }
    items.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(items)
}

/// Ground truth from a manifest file, a corpus directory, or both.
pub fn manifest_entries(path: &Path) -> anyhow::Result<Vec<ManifestEntry>> {
    if path.is_dir() {
        return Ok(list(path)?
            .into_iter()
            .map(|c| ManifestEntry {
                id: c.id,
                speaker: c.params.speaker_id,
                session: c.params.session_id,
                utterance_type: c.params.utterance_type,
                offset_ms: c.params.true_offset_ms,
                duration_s: f64::NAN,
                gap_log: Vec::new(),
            })
            .collect());
    }
    Ok(synth::read_manifest(path)?)
}

pub fn read_split(path: &Path) -> anyhow::Result<SplitSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading split file {}", path.display()))?;
    Ok(SplitSpec::parse(&text)?)
}

/// Items of `set`, excluding type E, in id order.
pub fn select<'a>(
    items: &'a [CorpusItem],
    split: &SplitSpec,
    set: SplitSet,
) -> anyhow::Result<Vec<(&'a CorpusItem, HoldOut)>> {
    let mut out = Vec::new();
    for item in items {
        let (s, how) = split.route(&item.params.speaker_id, &item.params.session_id)?;
        if s == set && item.params.utterance_type != UtteranceType::E {
            out.push((item, how));
        }
    }
    Ok(out)
}

/// Round-trip formatting for TSV output; NaN becomes `NA`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else {
        format!("{x}")
    }
}
