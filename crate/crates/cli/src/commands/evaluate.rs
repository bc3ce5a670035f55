use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use ultrasync_core::model::{random_baseline, Truth, CANDIDATE_STEP_MS};
use ultrasync_core::pipeline::SplitSet;
use ultrasync_core::seed::derive_seed;
use ultrasync_core::{CandidateSet, SyncReport, UtteranceType};

use crate::commands::predict::parse_predictions;
use crate::commands::train::write;
use crate::corpus;
use crate::{merge_fields, user, write_snapshot, Resolved};

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    /// predictions.tsv written by `predict`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// manifest.tsv, or a corpus directory.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split file; tags each utterance with how its set was held out.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Runs of the uniform random-candidate baseline.
    #[arg(long)]
    pub baseline_runs: Option<usize>,
}

merge_fields!(EvaluateArgs {
    predictions,
    manifest,
    split,
    baseline_runs,
});

#[derive(Debug, Serialize)]
struct Options {
    predictions: PathBuf,
    manifest: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<PathBuf>,
    baseline_runs: usize,
}

pub fn run(global: &Resolved, args: EvaluateArgs) -> anyhow::Result<()> {
    let pred_path = args.predictions.clone().ok_or_else(|| user("evaluate needs --predictions"))?;
    let manifest = args.manifest.clone().ok_or_else(|| user("evaluate needs --manifest"))?;
    let text = fs::read_to_string(&pred_path).with_context(|| format!("reading {}", pred_path.display()))?;
    let (outcomes, candidate_ms) = parse_predictions(&text)?;
    let entries = corpus::manifest_entries(&manifest)?;
    let split = args.split.as_deref().map(corpus::read_split).transpose()?;

    let mut truths = Vec::with_capacity(entries.len());
    for e in &entries {
        let set_tag = match &split {
            Some(s) => match s.route(&e.speaker, &e.session)? {
                (SplitSet::Test, how) => how.tag().to_string(),
                (set, _) => set.to_string(),
            },
            None => "all".to_string(),
        };
        truths.push(Truth {
            id: e.id.clone(),
            true_offset_ms: e.offset_ms,
            utterance_type: e.utterance_type,
            set_tag,
        });
    }
    let report = SyncReport::from_outcomes(&outcomes, &truths)?;

    let runs = args.baseline_runs.unwrap_or(0);
    let baseline = if runs > 0 {
        if candidate_ms.is_empty() {
            return Err(user("the baseline needs the dist_ candidate columns in the predictions file"));
        }
        let candidates = CandidateSet::from_offsets(candidate_ms, CANDIDATE_STEP_MS)?;
        let truth_ms: Vec<f64> = report.records.iter().map(|r| r.true_ms).collect();
        Some(random_baseline(&candidates, &truth_ms, runs, derive_seed(global.seed, "baseline"))?)
    } else {
        None
    };

    let out = &global.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(out, "report.tsv", &report.to_tsv())?;
    write(out, "groups.tsv", &report.groups_tsv())?;
    if let Some(b) = &baseline {
        let mut s = String::from("runs\tmean_accuracy\tstd_accuracy\tmean_discrepancy_ms\tstd_discrepancy_ms\n");
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            b.runs, b.mean_accuracy, b.std_accuracy, b.mean_discrepancy_ms, b.std_discrepancy_ms
        );
        write(out, "baseline.tsv", &s)?;
    }
    let summary = report.summary_text(baseline.as_ref());
    write(out, "summary.txt", &summary)?;
    print!("{summary}");
    let excluded = outcomes
        .iter()
        .filter(|(id, _)| truths.iter().any(|t| &t.id == id && t.utterance_type == UtteranceType::E))
        .count();
    if excluded > 0 {
        log::info!("{excluded} non-speech utterances left out of the report");
    }
    let opts = Options {
        predictions: pred_path,
        manifest,
        split: args.split.clone(),
        baseline_runs: runs,
    };
    write_snapshot(out, global, "evaluate", &opts)
}
