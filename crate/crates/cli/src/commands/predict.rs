use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use ultrasync_core::media_io;
use ultrasync_core::model::{build_candidate_set, predict_offset, select_offset, CANDIDATE_STEP_MS};
use ultrasync_core::pipeline::{PreprocessConfig, SplitSet};
use ultrasync_core::{CandidateSet, Error, SyncPrediction, UltraSyncModel};

use crate::commands::train::write;
use crate::corpus::{self, fmt_f64, CorpusItem};
use crate::{merge_fields, user, write_snapshot, Resolved};

pub const PREDICTIONS_FILE: &str = "predictions.tsv";

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated utterance ids (default: the split's test set, or the whole corpus).
    #[arg(long, value_delimiter = ',')]
    pub ids: Option<Vec<String>>,
    /// Split file; picks the test set and builds candidates from the training set.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Candidate offsets file (overrides the split and the checkpoint's candidates.tsv).
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Score candidates by their distance to the true offset instead of the model.
    #[arg(long)]
    pub oracle_distance: bool,
}

merge_fields!(PredictArgs { checkpoint, corpus, ids, split, candidates }, flags { oracle_distance });

#[derive(Debug, Serialize)]
struct Options {
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    corpus: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<PathBuf>,
    oracle_distance: bool,
    ids: Vec<String>,
    candidates_ms: Vec<f64>,
}

fn candidate_set(args: &PredictArgs, items: &[CorpusItem]) -> anyhow::Result<CandidateSet> {
    if let Some(p) = &args.candidates {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        return Ok(CandidateSet::parse_tsv(&text)?);
    }
    if let Some(p) = &args.split {
        let split = corpus::read_split(p)?;
        let offsets: Vec<f64> = corpus::select(items, &split, SplitSet::Train)?
            .iter()
            .map(|(c, _)| c.params.true_offset_ms)
            .collect();
        if !offsets.is_empty() {
            return Ok(build_candidate_set(&offsets, CANDIDATE_STEP_MS)?);
        }
    }
    if let Some(dir) = args.checkpoint.as_deref().and_then(Path::parent) {
        let p = dir.join("candidates.tsv");
        if p.is_file() {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            return Ok(CandidateSet::parse_tsv(&text)?);
        }
    }
    Err(user("no candidate set: pass --candidates, --split, or a checkpoint with candidates.tsv beside it"))
}

pub fn predictions_tsv(candidates: &CandidateSet, rows: &[(String, Option<SyncPrediction>)]) -> String {
    let mut s = String::from("id\tstatus\tpredicted_ms\tn_windows");
    for c in candidates.offsets_ms() {
        let _ = write!(s, "\tdist_{c}");
    }
    s.push('\n');
    for (id, p) in rows {
        match p {
            Some(p) => {
                let _ = write!(s, "{id}\tok\t{}\t{}", p.predicted_offset_ms, p.n_windows);
                for d in &p.mean_distances {
                    s.push('\t');
                    s.push_str(&d.map_or("NA".into(), fmt_f64));
                }
            }
            None => {
                let _ = write!(s, "{id}\tunsyncable\tNA\t0");
                for _ in candidates.offsets_ms() {
                    s.push_str("\tNA");
                }
            }
        }
        s.push('\n');
    }
    s
}

pub fn run(global: &Resolved, args: PredictArgs) -> anyhow::Result<()> {
    let corpus_dir = args.corpus.clone().ok_or_else(|| user("predict needs --corpus"))?;
    let items = corpus::list(&corpus_dir)?;
    let candidates = candidate_set(&args, &items)?;

    let ids: Vec<String> = match (&args.ids, &args.split) {
        (Some(ids), _) => ids.clone(),
        (None, Some(p)) => corpus::select(&items, &corpus::read_split(p)?, SplitSet::Test)?
            .iter()
            .map(|(c, _)| c.id.clone())
            .collect(),
        (None, None) => items.iter().map(|c| c.id.clone()).collect(),
    };
    let lookup = |id: &str| items.iter().find(|c| c.id == id);
    if let Some(missing) = ids.iter().find(|id| lookup(id).is_none()) {
        return Err(user(format!("utterance `{missing}` is not in {}", corpus_dir.display())));
    }

    let model = if args.oracle_distance {
        None
    } else {
        let p = args.checkpoint.as_ref().ok_or_else(|| user("predict needs --checkpoint (or --oracle-distance)"))?;
        Some(UltraSyncModel::load(p).with_context(|| format!("loading {}", p.display()))?.0)
    };

    let cfg = PreprocessConfig::default();
    let mut rows = Vec::with_capacity(ids.len());
    for id in &ids {
        let item = lookup(id).expect("checked above");
        let result = match &model {
            None => {
                let t = item.params.true_offset_ms;
                let scores = candidates.offsets_ms().iter().map(|c| Some(((c - t).abs(), 0))).collect();
                select_offset(id, &candidates, scores)
            }
            Some(m) => {
                let mut bundle = media_io::load_bundle(&corpus_dir, id)?;
                bundle.params.true_offset_ms = item.params.true_offset_ms;
                predict_offset(m, &bundle, &candidates, &cfg)
            }
        };
        match result {
            Ok(p) => {
                log::info!("{id}: predicted {} ms (true {})", p.predicted_offset_ms, item.params.true_offset_ms);
                rows.push((id.clone(), Some(p)));
            }
            Err(Error::Unsyncable(_)) => {
                log::warn!("{id}: no candidate yields windows");
                rows.push((id.clone(), None));
            }
            Err(e) => return Err(anyhow::Error::new(e).context(format!("predicting {id}"))),
        }
    }

    let out = &global.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(out, PREDICTIONS_FILE, &predictions_tsv(&candidates, &rows))?;
    let opts = Options {
        checkpoint: args.checkpoint.clone(),
        corpus: corpus_dir,
        split: args.split.clone(),
        oracle_distance: args.oracle_distance,
        ids,
        candidates_ms: candidates.offsets_ms().to_vec(),
    };
    write_snapshot(out, global, "predict", &opts)
}

/// Rows of a predictions file: id, prediction (None when unsyncable) and the
/// candidate offsets named by the `dist_` columns.
pub fn parse_predictions(text: &str) -> anyhow::Result<(Vec<(String, Option<f64>)>, Vec<f64>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| user("empty predictions file"))?.split('\t').collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let (id_col, pred_col) = match (col("id"), col("predicted_ms")) {
        (Some(i), Some(p)) => (i, p),
        _ => return Err(user("predictions file needs `id` and `predicted_ms` columns")),
    };
    let candidates = header
        .iter()
        .filter_map(|h| h.strip_prefix("dist_"))
        .map(|c| c.parse::<f64>().map_err(|_| user(format!("bad candidate column `dist_{c}`"))))
        .collect::<anyhow::Result<Vec<f64>>>()?;
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != header.len() {
            return Err(user(format!("predictions line {}: {} fields, expected {}", n + 2, f.len(), header.len())));
        }
        let pred = match f[pred_col] {
            "NA" => None,
            v => Some(v.parse::<f64>().map_err(|_| user(format!("bad prediction `{v}`")))?),
        };
        rows.push((f[id_col].to_string(), pred));
    }
    Ok((rows, candidates))
}
