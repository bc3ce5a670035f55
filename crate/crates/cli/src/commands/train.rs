use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ultrasync_core::media_io;
use ultrasync_core::model::{self, build_candidate_set, EpochRecord, TrainConfig, CANDIDATE_STEP_MS};
use ultrasync_core::nn::CheckpointMeta;
use ultrasync_core::pipeline::{PreprocessConfig, SplitSet};
use ultrasync_core::{Error, SamplePair};

use crate::corpus::{self, fmt_f64, CorpusItem};
use crate::{merge_fields, user, write_snapshot, Resolved};

pub const LOG_HEADER: &str = "epoch\ttrain_loss\tval_loss\tlr\tval_acc_at_0.5";

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Corpus directory.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Split file; one `set<TAB>speaker<TAB>session` rule per line.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub plateau_factor: Option<f64>,
    #[arg(long)]
    pub plateau_patience: Option<usize>,
    #[arg(long)]
    pub plateau_threshold: Option<f64>,
    /// Distance below which a pair counts as synchronised in the log.
    #[arg(long)]
    pub distance_threshold: Option<f64>,
    #[arg(long)]
    pub candidate_step_ms: Option<f64>,
}

merge_fields!(TrainArgs {
    corpus,
    split,
    lr,
    batch_size,
    epochs,
    plateau_factor,
    plateau_patience,
    plateau_threshold,
    distance_threshold,
    candidate_step_ms,
});

#[derive(Debug, Serialize)]
struct Options {
    corpus: PathBuf,
    split: PathBuf,
    lr: f64,
    batch_size: usize,
    epochs: usize,
    plateau_factor: f64,
    plateau_patience: usize,
    plateau_threshold: f64,
    distance_threshold: f64,
    candidate_step_ms: f64,
}

impl TrainArgs {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            seed,
            plateau_factor: self.plateau_factor.unwrap_or(d.plateau_factor),
            plateau_patience: self.plateau_patience.unwrap_or(d.plateau_patience),
            plateau_threshold: self.plateau_threshold.unwrap_or(d.plateau_threshold),
            distance_threshold: self.distance_threshold.unwrap_or(d.distance_threshold),
        }
    }
}

pub fn log_tsv(log: &[EpochRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in log {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            r.epoch,
            fmt_f64(r.train_loss),
            fmt_f64(r.val_loss),
            fmt_f64(r.lr),
            fmt_f64(r.val_accuracy)
        );
    }
    s
}

/// Loads each bundle, cuts its pairs and drops the media.
pub(crate) fn corpus_pairs(dir: &Path, items: &[&CorpusItem], seed: u64) -> anyhow::Result<Vec<SamplePair>> {
    let cfg = PreprocessConfig::default();
    let per: Vec<Vec<SamplePair>> = items
        .par_iter()
        .map(|item| {
            let mut bundle = media_io::load_bundle(dir, &item.id)?;
            bundle.params.true_offset_ms = item.params.true_offset_ms;
            match model::utterance_pairs(&bundle, &cfg, seed) {
                Err(Error::EmptyAudio { .. }) => {
                    log::warn!("{}: offset consumes the audio; skipped", item.id);
                    Ok(Vec::new())
                }
                other => other.with_context(|| format!("preparing {}", item.id)),
            }
        })
        .collect::<anyhow::Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn run(global: &Resolved, args: TrainArgs) -> anyhow::Result<()> {
    let corpus_dir = args.corpus.clone().ok_or_else(|| user("train needs --corpus"))?;
    let split_path = args.split.clone().ok_or_else(|| user("train needs --split"))?;
    let cfg = args.to_config(global.seed);
    let step = args.candidate_step_ms.unwrap_or(CANDIDATE_STEP_MS);
    if cfg.batch_size == 0 || cfg.batch_size % 2 != 0 {
        return Err(user(format!("batch size must be even and positive, got {}", cfg.batch_size)));
    }

    let items = corpus::list(&corpus_dir)?;
    let split = corpus::read_split(&split_path)?;
    let train_items: Vec<&CorpusItem> = corpus::select(&items, &split, SplitSet::Train)?.into_iter().map(|x| x.0).collect();
    let val_items: Vec<&CorpusItem> = corpus::select(&items, &split, SplitSet::Val)?.into_iter().map(|x| x.0).collect();
    if train_items.is_empty() {
        return Err(user("the split routes no utterances to the training set"));
    }
    let offsets: Vec<f64> = train_items.iter().map(|c| c.params.true_offset_ms).collect();
    let candidates = build_candidate_set(&offsets, step)?;

    let train_pairs = corpus_pairs(&corpus_dir, &train_items, cfg.seed)?;
    let val_pairs = corpus_pairs(&corpus_dir, &val_items, cfg.seed)?;
    log::info!(
        "{} training pairs from {} utterances, {} validation pairs from {}",
        train_pairs.len(),
        train_items.len(),
        val_pairs.len(),
        val_items.len()
    );

    let mut net = model::build_model(cfg.seed)?;
    let outcome = model::train(&mut net, &train_pairs, &val_pairs, &cfg)?;

    let out = &global.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let meta = |epoch: usize| CheckpointMeta {
        seed: cfg.seed,
        step: outcome.steps,
        epoch: epoch as u32,
        lr: outcome.final_lr,
    };
    outcome.best.save(&out.join("best.ckpt"), &meta(outcome.best_epoch))?;
    net.save(&out.join("final.ckpt"), &meta(outcome.log.len()))?;
    write(out, "train_log.tsv", &log_tsv(&outcome.log))?;
    write(out, "candidates.tsv", &candidates.to_tsv())?;
    write(out, "split.tsv", &split.to_text())?;
    let opts = Options {
        corpus: corpus_dir,
        split: split_path,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        plateau_factor: cfg.plateau_factor,
        plateau_patience: cfg.plateau_patience,
        plateau_threshold: cfg.plateau_threshold,
        distance_threshold: cfg.distance_threshold,
        candidate_step_ms: step,
    };
    write_snapshot(out, global, "train", &opts)?;
    if let Some((epoch, step)) = outcome.diverged {
        return Err(Error::TrainingDiverged { epoch, step }.into());
    }
    Ok(())
}

pub(crate) fn write(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
