use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::UtteranceType;

use super::{CandidateSet, SyncPrediction};

/// Lower (audio lag) detectability bound, exclusive.
pub const LAG_LIMIT_MS: f64 = -125.0;
/// Upper (audio lead) detectability bound, exclusive.
pub const LEAD_LIMIT_MS: f64 = 45.0;

/// `discrepancy = true − predicted` is acceptable strictly inside (−125, +45).
pub fn is_correct(discrepancy_ms: f64) -> bool {
    discrepancy_ms > LAG_LIMIT_MS && discrepancy_ms < LEAD_LIMIT_MS
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub id: String,
    pub true_offset_ms: f64,
    pub utterance_type: UtteranceType,
    /// Free-form test-set tag, e.g. a hold-out kind.
    pub set_tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncRecord {
    pub id: String,
    pub utterance_type: UtteranceType,
    pub set_tag: String,
    pub true_ms: f64,
    /// `None` for an utterance that could not be synchronised; counted as incorrect.
    pub predicted_ms: Option<f64>,
    pub discrepancy_ms: Option<f64>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub key: String,
    pub n: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    /// Over records with a prediction; population standard deviation.
    pub mean_discrepancy_ms: f64,
    pub std_discrepancy_ms: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

impl GroupStats {
    fn from_records<'a>(key: String, recs: impl IntoIterator<Item = &'a SyncRecord>) -> Self {
        let (mut n, mut n_correct, mut ds) = (0, 0, Vec::new());
        for r in recs {
            n += 1;
            n_correct += usize::from(r.correct);
            ds.extend(r.discrepancy_ms);
        }
        let (mean, std) = mean_std(&ds);
        Self {
            key,
            n,
            n_correct,
            accuracy: if n == 0 { f64::NAN } else { n_correct as f64 / n as f64 },
            mean_discrepancy_ms: mean,
            std_discrepancy_ms: std,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncReport {
    pub records: Vec<SyncRecord>,
    pub overall: GroupStats,
    pub by_type: Vec<GroupStats>,
    pub by_set: Vec<GroupStats>,
    /// Keyed `set/type`.
    pub by_set_and_type: Vec<GroupStats>,
}

impl SyncReport {
    /// Joins predicted offsets with truths by id. Every outcome needs a truth;
    /// non-speech utterances are left out of the report.
    pub fn from_outcomes(outcomes: &[(String, Option<f64>)], truths: &[Truth]) -> Result<Self> {
        let index: HashMap<&str, &Truth> = truths.iter().map(|t| (t.id.as_str(), t)).collect();
        let missing: Vec<&str> = outcomes
            .iter()
            .map(|(id, _)| id.as_str())
            .filter(|id| !index.contains_key(id))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Join(format!("no ground truth for: {}", missing.join(", "))));
        }
        let mut seen = HashMap::new();
        for (id, _) in outcomes {
            if seen.insert(id.as_str(), ()).is_some() {
                return Err(Error::Join(format!("duplicate prediction for `{id}`")));
            }
        }
        let records: Vec<SyncRecord> = outcomes
            .iter()
            .filter_map(|(id, pred)| {
                let t = index[id.as_str()];
                (t.utterance_type != UtteranceType::E).then(|| {
                    let d = pred.map(|p| t.true_offset_ms - p);
                    SyncRecord {
                        id: id.clone(),
                        utterance_type: t.utterance_type,
                        set_tag: t.set_tag.clone(),
                        true_ms: t.true_offset_ms,
                        predicted_ms: *pred,
                        discrepancy_ms: d,
                        correct: d.is_some_and(is_correct),
                    }
                })
            })
            .collect();

        let group = |key: &dyn Fn(&SyncRecord) -> String| -> Vec<GroupStats> {
            let mut m: BTreeMap<String, Vec<&SyncRecord>> = BTreeMap::new();
            for r in &records {
                m.entry(key(r)).or_default().push(r);
            }
            m.into_iter().map(|(k, v)| GroupStats::from_records(k, v)).collect()
        };
        let by_type = group(&|r| r.utterance_type.to_string());
        let by_set = group(&|r| r.set_tag.clone());
        let by_set_and_type = group(&|r| format!("{}/{}", r.set_tag, r.utterance_type));
        Ok(Self {
            overall: GroupStats::from_records("all".into(), &records),
            records,
            by_type,
            by_set,
            by_set_and_type,
        })
    }

    pub fn evaluate(predictions: &[SyncPrediction], truths: &[Truth]) -> Result<Self> {
        let outcomes: Vec<(String, Option<f64>)> = predictions
            .iter()
            .map(|p| (p.utterance_id.clone(), Some(p.predicted_offset_ms)))
            .collect();
        Self::from_outcomes(&outcomes, truths)
    }

    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x}"));
        let mut s = String::from("id\ttype\tset\ttrue_ms\tpredicted_ms\tdiscrepancy_ms\tcorrect\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.id,
                r.utterance_type,
                r.set_tag,
                r.true_ms,
                opt(r.predicted_ms),
                opt(r.discrepancy_ms),
                u8::from(r.correct)
            );
        }
        s
    }

    /// `group\tkey\tn\tcorrect\taccuracy\tmean_discrepancy_ms\tstd_discrepancy_ms`.
    pub fn groups_tsv(&self) -> String {
        let mut s = String::from("group\tkey\tn\tcorrect\taccuracy\tmean_discrepancy_ms\tstd_discrepancy_ms\n");
        let mut put = |g: &str, st: &GroupStats| {
            let _ = writeln!(
                s,
                "{g}\t{}\t{}\t{}\t{:.6}\t{:.3}\t{:.3}",
                st.key, st.n, st.n_correct, st.accuracy, st.mean_discrepancy_ms, st.std_discrepancy_ms
            );
        };
        put("overall", &self.overall);
        for st in &self.by_type {
            put("type", st);
        }
        for st in &self.by_set {
            put("set", st);
        }
        for st in &self.by_set_and_type {
            put("set_type", st);
        }
        s
    }

    pub fn summary_text(&self, baseline: Option<&BaselineStats>) -> String {
        let row = |name: &str, st: &GroupStats| {
            format!(
                "{name:<24} {:>5} {:>9.1}% {:>9.0} ± {:<6.0}\n",
                st.n,
                100.0 * st.accuracy,
                st.mean_discrepancy_ms,
                st.std_discrepancy_ms
            )
        };
        let header = format!("{:<24} {:>5} {:>10} {:>18}\n", "", "n", "accuracy", "discrepancy (ms)");
        let mut s = String::new();
        s.push_str("Synchronisation accuracy, correct iff -125 < true - predicted < +45 ms\n\n");
        s.push_str(&header);
        s.push_str(&row("Overall", &self.overall));
        s.push_str("\nBy utterance type\n");
        s.push_str(&header);
        for st in &self.by_type {
            let label = st
                .key
                .parse::<UtteranceType>()
                .map(|t| format!("{} ({})", t.label(), st.key))
                .unwrap_or_else(|_| st.key.clone());
            s.push_str(&row(&label, st));
        }
        s.push_str("\nBy test set\n");
        s.push_str(&header);
        for st in &self.by_set {
            s.push_str(&row(&st.key, st));
        }
        s.push_str("\nBy test set and type\n");
        s.push_str(&header);
        for st in &self.by_set_and_type {
            s.push_str(&row(&st.key, st));
        }
        if let Some(b) = baseline {
            let _ = write!(
                s,
                "\nRandom baseline ({} runs): {:.1}% ± {:.1}%, discrepancy {:.0} ± {:.0} ms\n",
                b.runs,
                100.0 * b.mean_accuracy,
                100.0 * b.std_accuracy,
                b.mean_discrepancy_ms,
                b.std_discrepancy_ms
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineStats {
    pub runs: usize,
    pub mean_accuracy: f64,
    /// Spread of per-run accuracy.
    pub std_accuracy: f64,
    /// Per-run discrepancy mean and std, averaged over runs.
    pub mean_discrepancy_ms: f64,
    pub std_discrepancy_ms: f64,
}

/// Uniformly random candidate per utterance per run, scored with [`is_correct`].
pub fn random_baseline(candidates: &CandidateSet, truths_ms: &[f64], runs: usize, seed: u64) -> Result<BaselineStats> {
    if runs == 0 {
        return Err(Error::Domain("baseline needs at least one run".into()));
    }
    if truths_ms.is_empty() {
        return Err(Error::Domain("baseline needs at least one utterance".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = candidates.offsets_ms();
    let (mut accs, mut means, mut stds) = (Vec::new(), Vec::new(), Vec::new());
    let mut ds = vec![0.0; truths_ms.len()];
    for _ in 0..runs {
        let mut correct = 0;
        for (d, &t) in ds.iter_mut().zip(truths_ms) {
            *d = t - c[rng.random_range(0..c.len())];
            correct += usize::from(is_correct(*d));
        }
        accs.push(correct as f64 / truths_ms.len() as f64);
        let (m, s) = mean_std(&ds);
        means.push(m);
        stds.push(s);
    }
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    Ok(BaselineStats {
        runs,
        mean_accuracy,
        std_accuracy,
        mean_discrepancy_ms: mean_std(&means).0,
        std_discrepancy_ms: mean_std(&stds).0,
    })
}
