//! Acceptance criteria 1 to 10, one test each.
//!
//! Every test prints a single `criterion N ... PASS|FAIL` line with the
//! measured numbers, then asserts. The tests take a shared lock so that the
//! timed ones are not measured while another criterion hogs the cores.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tempfile::TempDir;
use ultrasync_core::dsp::{derive_mfcc_timing, mfcc, MfccConfig};
use ultrasync_core::model::{
    self, audio_spec, build_candidate_set, build_model, is_correct, miniature_specs, predict_offset, random_baseline,
    visual_spec, SyncReport, TrainConfig, Truth, CANDIDATE_STEP_MS, EMBEDDING_DIM,
};
use ultrasync_core::nn::{contrastive_loss, grad_check, LayerSpec, NetworkSpec, Tensor, TwoStreamNet};
use ultrasync_core::pipeline::{decimate_frames, downsample_frame, downsample_sequence, PreprocessConfig};
use ultrasync_core::synth::{self, plan_utterance, SynthConfig, UtterancePlan};
use ultrasync_core::{AudioSignal, MfccWindow, UltrasoundSequence, UltrasoundWindow, UtteranceType};
use ultrasync_testkit::{naive_mfcc, naive_power_spectrum, NaiveMfccParams};

static SERIAL: Mutex<()> = Mutex::new(());

/// Writes straight to the stdout handle, which libtest does not capture, so
/// the verdicts show up in a plain `cargo test` log.
macro_rules! say {
    ($($t:tt)*) => {{
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out);
        let _ = writeln!(out, $($t)*);
        let _ = out.flush();
    }};
}

fn verdict(n: u32, name: &str, ok: bool, detail: String) {
    say!("criterion {n:>2} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn criterion_01_gradient_correctness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (v, a) = miniature_specs();
    let net = TwoStreamNet::<f64>::build(&v, &a, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let b = 6;
    let u = random(vec![b, 5, 16, 24], &mut rng, 0.0, 1.0);
    let m = random(vec![b, 1, 20, 13], &mut rng, -2.0, 2.0);
    let labels: Vec<u8> = (0..b).map(|i| (i % 2) as u8).collect();
    let mini = grad_check(&net, &u, &m, &labels, 1e-5).unwrap();
    let total: usize = net.params().iter().map(|p| p.len()).sum();

    let affine = |d: usize| NetworkSpec::new(vec![d], vec![LayerSpec::Linear { units: 4, bias: true }]);
    let anet = TwoStreamNet::<f64>::build(&affine(7), &affine(5), 22).unwrap();
    let au = random(vec![8, 7], &mut rng, -0.3, 0.3);
    let am = random(vec![8, 5], &mut rng, -0.3, 0.3);
    let aff = grad_check(&anet, &au, &am, &[1, 0, 1, 0, 1, 0, 1, 0], 1e-6).unwrap();
    let secs = start.elapsed().as_secs_f64();

    let ok = mini.max_rel_error < 1e-4 && mini.n_checked == total && aff.max_rel_error < 1e-6 && secs < 120.0;
    verdict(
        1,
        "gradient correctness",
        ok,
        format!(
            "miniature max rel {:.2e} over {} params, affine {:.2e}, {secs:.1} s",
            mini.max_rel_error, mini.n_checked, aff.max_rel_error
        ),
    );
}

#[test]
fn criterion_02_loss_analytics() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let row = |xs: &[f64]| Tensor::new(vec![1, xs.len()], xs.to_vec()).unwrap();
    let z = row(&[0.3, -0.7, 0.1]);
    let pos0 = contrastive_loss(&z, &z, &[1]).unwrap().loss;
    let neg0 = contrastive_loss(&z, &z, &[0]).unwrap().loss;
    let neg1 = contrastive_loss(&z, &row(&[1.3, -0.7, 0.1]), &[0]).unwrap().loss;
    let neg2 = contrastive_loss(&z, &row(&[0.3, -0.7, 2.6]), &[0]).unwrap().loss;

    // distances 0.5, 0.25, 2, 0.6 along one axis
    let v = Tensor::new(vec![4, 2], vec![0.0, 0.0, 1.0, 1.0, -1.0, 0.5, 0.2, 0.2]).unwrap();
    let a = Tensor::new(vec![4, 2], vec![0.5, 0.0, 1.0, 1.25, 1.0, 0.5, 0.2, 0.8]).unwrap();
    let labels = [1, 0, 0, 1];
    let hand = (0.25 + 0.75f64.powi(2) + 0.0 + 0.36) / 4.0;
    let mixed = contrastive_loss(&v, &a, &labels).unwrap().loss;

    let ok = pos0 == 0.0 && neg0 == 1.0 && neg1 == 0.0 && neg2 == 0.0 && (mixed - hand).abs() < 1e-12;
    verdict(
        2,
        "loss analytics",
        ok,
        format!("(1,0)->{pos0} (0,0)->{neg0} (0,1)->{neg1} (0,2.5)->{neg2} mixed {mixed} vs {hand}"),
    );
}

#[test]
fn criterion_03_shape_chain() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let visual: Vec<Vec<usize>> = vec![
        vec![5, 63, 138],
        vec![23, 59, 134],
        vec![23, 59, 134],
        vec![23, 59, 134],
        vec![23, 29, 67],
        vec![64, 25, 63],
        vec![64, 25, 63],
        vec![64, 25, 63],
        vec![64, 12, 31],
        vec![128, 8, 27],
        vec![128, 8, 27],
        vec![128, 8, 27],
        vec![128, 4, 13],
        vec![6656],
        vec![64],
        vec![64],
        vec![64],
        vec![64],
        vec![64],
        vec![64],
    ];
    let audio: Vec<Vec<usize>> = vec![
        vec![1, 20, 13],
        vec![23, 18, 11],
        vec![23, 18, 11],
        vec![23, 18, 11],
        vec![64, 16, 9],
        vec![64, 16, 9],
        vec![64, 16, 9],
        vec![64, 8, 4],
        vec![128, 6, 2],
        vec![128, 6, 2],
        vec![128, 6, 2],
        vec![128, 3, 1],
        vec![384],
        vec![64],
        vec![64],
        vec![64],
        vec![64],
        vec![64],
        vec![64],
    ];
    let vt = visual_spec().shape_trace().unwrap();
    let at = audio_spec().shape_trace().unwrap();

    let model = build_model(3).unwrap();
    let uw = UltrasoundWindow {
        data: vec![128.0; 5 * 63 * 138],
        shape: [5, 63, 138],
        utterance_id: "x".into(),
        window_index: 0,
    };
    let mw = MfccWindow {
        data: vec![0.5; 20 * 13],
        shape: [20, 13],
        utterance_id: "x".into(),
        window_index: 0,
    };
    let ev = model.embed_ultrasound(&[&uw]).unwrap();
    let ea = model.embed_mfcc(&[&mw]).unwrap();

    let ok = vt == visual && at == audio && ev[0].len() == EMBEDDING_DIM && ea[0].len() == EMBEDDING_DIM;
    verdict(
        3,
        "shape-chain conformance",
        ok,
        format!(
            "visual flatten {:?}, audio flatten {:?}, embeddings {}/{}",
            vt[13],
            at[12],
            ev[0].len(),
            ea[0].len()
        ),
    );
}

#[test]
fn criterion_04_preprocessing_arithmetic() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let frame: Vec<f32> = (0..63 * 412).map(|i| (i % 251) as f32).collect();
    let small = downsample_frame(&frame, 63, 412, 3).unwrap();
    let seq = UltrasoundSequence::new(frame.repeat(10), 63, 412, 121.5).unwrap();
    let dec = decimate_frames(&seq, 5).unwrap();
    let down = downsample_sequence(&dec, 3).unwrap();
    let t = derive_mfcc_timing(dec.fps(), 5).unwrap();

    let ok = small.len() == 63 * 138
        && down.scanlines() == 63
        && down.points() == 138
        && dec.fps() == 24.3
        && dec.n_frames() == 2
        && t.window_s == 2.0 * t.hop_s
        && 20.0 * t.hop_s == t.span_s;
    verdict(
        4,
        "preprocessing arithmetic",
        ok,
        format!(
            "{}x{} at {} fps, window {} s = 2 x hop {} s, 20 hops = {} s",
            down.scanlines(),
            down.points(),
            dec.fps(),
            t.window_s,
            t.hop_s,
            20.0 * t.hop_s
        ),
    );
}

#[test]
fn criterion_05_candidate_set() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dense: Vec<f64> = (0..=1789).map(f64::from).collect();
    let c = build_candidate_set(&dense, CANDIDATE_STEP_MS).unwrap();
    let grid: Vec<f64> = (0..40).map(|k| 45.0 * f64::from(k)).collect();
    // oracles enumerated by hand
    let sparse = build_candidate_set(&[460.0, 0.0, 10.0, 100.0, 200.0], 45.0).unwrap();
    let shifted = build_candidate_set(&[80.0, 30.0, 300.0], 45.0).unwrap();

    let ok = c.offsets_ms() == &grid[..]
        && sparse.offsets_ms() == [0.0, 90.0, 180.0, 450.0]
        && shifted.offsets_ms() == [30.0, 75.0, 300.0];
    verdict(
        5,
        "candidate-set reproduction",
        ok,
        format!(
            "{} dense candidates; sparse {:?}; shifted {:?}",
            c.len(),
            sparse.offsets_ms(),
            shifted.offsets_ms()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criteria 6 and 7 share one trained model.

/// Epochs run for the end-to-end criteria. Twenty epochs of the default corpus
/// take hours on one core; the loss and held-out accuracy settle much earlier.
const E2E_EPOCHS: usize = 2;
const E2E_SEED: u64 = 2024;

struct Trained {
    model: model::UltraSyncModel,
    cfg: SynthConfig,
    candidates: ultrasync_core::CandidateSet,
    test_plans: Vec<UtterancePlan>,
    train_secs: f64,
}

fn pairs_for(cfg: &SynthConfig, plans: &[&UtterancePlan]) -> Vec<ultrasync_core::SamplePair> {
    let pcfg = PreprocessConfig::default();
    let per: Vec<Vec<_>> = plans
        .par_iter()
        .map(|p| {
            let (bundle, _) = synth::generate_utterance(cfg, p).unwrap();
            model::utterance_pairs(&bundle, &pcfg, cfg.seed).unwrap()
        })
        .collect();
    per.into_iter().flatten().collect()
}

fn train_default_corpus() -> Trained {
    let start = Instant::now();
    let cfg = SynthConfig {
        seed: E2E_SEED,
        ..SynthConfig::default()
    };
    let plans = synth::corpus_plan(&cfg).unwrap();
    let test = synth::speaker_name(cfg.n_speakers - 1);
    let val = synth::speaker_name(cfg.n_speakers - 2);
    let train_plans: Vec<&UtterancePlan> = plans.iter().filter(|p| p.speaker != test && p.speaker != val).collect();
    let val_plans: Vec<&UtterancePlan> = plans.iter().filter(|p| p.speaker == val).collect();
    let test_plans: Vec<UtterancePlan> = plans.iter().filter(|p| p.speaker == test).cloned().collect();

    let minutes: f64 = plans.iter().map(|p| p.duration_s).sum::<f64>() / 60.0;
    let train_pairs = pairs_for(&cfg, &train_plans);
    let val_pairs = pairs_for(&cfg, &val_plans);
    say!(
        "default corpus: {:.1} min audio, {} train pairs, {} val pairs, generated in {:.0} s",
        minutes,
        train_pairs.len(),
        val_pairs.len(),
        start.elapsed().as_secs_f64()
    );
    let offsets: Vec<f64> = train_plans.iter().map(|p| p.offset_ms).collect();
    let candidates = build_candidate_set(&offsets, CANDIDATE_STEP_MS).unwrap();

    let tc = TrainConfig {
        epochs: E2E_EPOCHS,
        seed: E2E_SEED,
        ..TrainConfig::default()
    };
    assert_eq!((tc.lr, tc.batch_size), (0.001, 64));
    let mut net = build_model(E2E_SEED).unwrap();
    let outcome = model::train(&mut net, &train_pairs, &val_pairs, &tc).unwrap();
    drop(train_pairs);
    for r in &outcome.log {
        say!(
            "epoch {}: train {:.4} val {:.4} lr {}",
            r.epoch, r.train_loss, r.val_loss, r.lr
        );
    }
    Trained {
        model: outcome.best,
        cfg,
        candidates,
        test_plans,
        train_secs: start.elapsed().as_secs_f64(),
    }
}

fn predict_plans(t: &Trained, cfg: &SynthConfig, plans: &[UtterancePlan]) -> Vec<(String, Option<f64>)> {
    let pcfg = PreprocessConfig::default();
    plans
        .iter()
        .map(|p| {
            let (bundle, _) = synth::generate_utterance(cfg, p).unwrap();
            let pred = predict_offset(&t.model, &bundle, &t.candidates, &pcfg).ok();
            (p.id.clone(), pred.map(|x| x.predicted_offset_ms))
        })
        .collect()
}

fn truths(plans: &[UtterancePlan]) -> Vec<Truth> {
    plans
        .iter()
        .map(|p| Truth {
            id: p.id.clone(),
            true_offset_ms: p.offset_ms,
            utterance_type: p.utterance_type,
            set_tag: "new-speaker".into(),
        })
        .collect()
}

/// 30 type A and 30 type D utterances from speakers never seen in training.
fn hard_case_plans(cfg: &SynthConfig) -> (SynthConfig, Vec<UtterancePlan>) {
    let ecfg = SynthConfig {
        articulatory_fraction: 0.5,
        ..cfg.clone()
    };
    let (mut a, mut d) = (Vec::new(), Vec::new());
    'outer: for spk in cfg.n_speakers..cfg.n_speakers + 20 {
        for utt in 0..ecfg.n_utterances_per_speaker {
            let p = plan_utterance(&ecfg, spk, utt);
            match p.utterance_type {
                UtteranceType::A if a.len() < 30 => a.push(p),
                UtteranceType::D if d.len() < 30 => d.push(p),
                _ => {}
            }
            if a.len() == 30 && d.len() == 30 {
                break 'outer;
            }
        }
    }
    assert_eq!((a.len(), d.len()), (30, 30));
    a.extend(d);
    (ecfg, a)
}

#[test]
fn criteria_06_07_end_to_end_and_hard_cases() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let t = train_default_corpus();

    // criterion 6: held-out speaker
    let outcomes = predict_plans(&t, &t.cfg, &t.test_plans);
    let report = SyncReport::from_outcomes(&outcomes, &truths(&t.test_plans)).unwrap();
    let truth_ms: Vec<f64> = t.test_plans.iter().map(|p| p.offset_ms).collect();
    let runs = 1000;
    let base = random_baseline(&t.candidates, &truth_ms, runs, E2E_SEED).unwrap();
    let c = t.candidates.offsets_ms();
    let p: Vec<f64> = truth_ms
        .iter()
        .map(|tm| c.iter().filter(|&&x| is_correct(tm - x)).count() as f64 / c.len() as f64)
        .collect();
    let n = p.len() as f64;
    let expect = p.iter().sum::<f64>() / n;
    let sigma = (p.iter().map(|q| q * (1.0 - q)).sum::<f64>() / (n * n) / runs as f64).sqrt();
    let total_secs = start.elapsed().as_secs_f64();
    let acc = report.overall.accuracy;
    let ok6 = acc >= 0.85 && (base.mean_accuracy - expect).abs() <= 3.0 * sigma;

    // criterion 7: small-movement versus full-range utterances
    let (ecfg, hard) = hard_case_plans(&t.cfg);
    let hard_outcomes = predict_plans(&t, &ecfg, &hard);
    let hard_report = SyncReport::from_outcomes(&hard_outcomes, &truths(&hard)).unwrap();
    let group = |k: &str| hard_report.by_type.iter().find(|g| g.key == k).cloned().unwrap();
    let (ga, gd) = (group("A"), group("D"));
    let ok7 = ga.n >= 30 && gd.n >= 30 && gd.accuracy < ga.accuracy;

    say!(
        "end-to-end: {E2E_EPOCHS} epochs, training {:.0} s, held-out prediction done at {total_secs:.0} s",
        t.train_secs
    );
    let d6 = format!(
        "{}/{} = {:.1}% correct on the held-out speaker, discrepancy {:.0} +- {:.0} ms; baseline {:.4} vs expected {:.4} +- 3x{:.4} over {} candidates",
        report.overall.n_correct,
        report.overall.n,
        100.0 * acc,
        report.overall.mean_discrepancy_ms,
        report.overall.std_discrepancy_ms,
        base.mean_accuracy,
        expect,
        sigma,
        c.len()
    );
    let d7 = format!(
        "A {}/{} = {:.1}%, D {}/{} = {:.1}%",
        ga.n_correct,
        ga.n,
        100.0 * ga.accuracy,
        gd.n_correct,
        gd.n,
        100.0 * gd.accuracy
    );
    say!("criterion  6 end-to-end synthetic sync: {} ({d6})", if ok6 { "PASS" } else { "FAIL" });
    verdict(7, "hard-case differential", ok7, d7);
    assert!(ok6, "criterion 6 failed: {d6}");
}

#[test]
fn criterion_08_determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let tmp = TempDir::new().unwrap();
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let synth_into = |d: &Path| {
        ultrasync_cli::run([
            "ultrasync", "synth", "--seed", "42", "--strict-deterministic", "--speakers", "3", "--utterances", "3",
            "--min-duration-s", "1.5", "--max-duration-s", "2.5", "--out", &p(d),
        ])
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(synth_into(&a), 0);
    assert_eq!(synth_into(&b), 0);
    let files = |d: &Path| {
        let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(d)
            .unwrap()
            .map(|e| {
                let path = e.unwrap().path();
                (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
            })
            .collect();
        v.sort();
        v
    };
    let (fa, fb) = (files(&a), files(&b));
    let corpora_equal = fa == fb && fa.len() == 9 * 3 + 2;

    let split = tmp.path().join("split.tsv");
    fs::write(&split, "train\tspk01\t*\ntrain\tspk02\t*\nval\tspk03\t*\n").unwrap();
    let train_into = |d: &Path| {
        ultrasync_cli::run([
            "ultrasync", "train", "--seed", "9", "--strict-deterministic", "--corpus", &p(&a), "--split", &p(&split),
            "--epochs", "3", "--batch-size", "16", "--out", &p(d),
        ])
    };
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    assert_eq!(train_into(&r1), 0);
    assert_eq!(train_into(&r2), 0);
    let l1 = fs::read_to_string(r1.join("train_log.tsv")).unwrap();
    let l2 = fs::read_to_string(r2.join("train_log.tsv")).unwrap();
    let ck_equal = fs::read(r1.join("final.ckpt")).unwrap() == fs::read(r2.join("final.ckpt")).unwrap();
    let traces_equal = l1 == l2 && l1.lines().count() == 4;

    verdict(
        8,
        "determinism",
        corpora_equal && traces_equal && ck_equal,
        format!(
            "{} corpus files identical: {corpora_equal}; loss traces identical: {traces_equal}; checkpoints identical: {ck_equal}",
            fa.len()
        ),
    );
}

#[test]
fn criterion_09_evaluation_boundaries() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cases = [(45.0, false), (-125.0, false), (44.999_999, true), (-124.999_999, true), (44.9, true), (-124.9, true)];
    let rule_ok = cases.iter().all(|&(d, want)| is_correct(d) == want);

    // the same discrepancies through the report join
    let truths: Vec<Truth> = cases
        .iter()
        .enumerate()
        .map(|(i, &(d, _))| Truth {
            id: format!("u{i}"),
            true_offset_ms: 200.0 + d,
            utterance_type: UtteranceType::A,
            set_tag: "t".into(),
        })
        .collect();
    let outcomes: Vec<(String, Option<f64>)> = (0..cases.len()).map(|i| (format!("u{i}"), Some(200.0))).collect();
    let report = SyncReport::from_outcomes(&outcomes, &truths).unwrap();
    let report_ok = report
        .records
        .iter()
        .zip(&cases)
        .all(|(r, &(d, want))| r.correct == want && (r.discrepancy_ms.unwrap() - d).abs() < 1e-9);

    verdict(
        9,
        "evaluation boundary semantics",
        rule_ok && report_ok,
        format!("+45 and -125 incorrect, +44.9.. and -124.9.. correct: rule {rule_ok}, report {report_ok}"),
    );
}

#[test]
fn criterion_10_mfcc_oracle() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    // the reference's transform against a DFT worked by hand:
    // x = [1, 2] padded to 4 gives X = 3, 1 - 2i, -1
    let hand = naive_power_spectrum(&[1.0, 2.0], 4);
    let hand_ok = hand.len() == 3 && (hand[0] - 9.0).abs() < 1e-12 && (hand[1] - 5.0).abs() < 1e-12 && (hand[2] - 1.0).abs() < 1e-12;

    let cfg = MfccConfig::default();
    let mut worst = 0.0f64;
    let mut frames = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sr = [16000u32, 22050, 44100][seed as usize % 3];
        let n = rng.random_range(sr as usize / 4..sr as usize / 2);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let framing = cfg.framing(sr).unwrap();
        let ours = mfcc(&AudioSignal::new(x.clone(), sr).unwrap(), &cfg).unwrap();
        let reference = naive_mfcc(
            &x,
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
        assert_eq!(ours.n_frames(), reference.len(), "seed {seed}");
        for (k, want) in reference.iter().enumerate() {
            for (got, want) in ours.frame(k).iter().zip(want) {
                worst = worst.max((got - want).abs() / want.abs().max(1e-3));
            }
        }
        frames += reference.len();
    }
    verdict(
        10,
        "DSP oracle equivalence",
        hand_ok && worst < 1e-6,
        format!("hand DFT {hand:?}; worst relative error {worst:.2e} over {frames} frames of 10 signals"),
    );
}
