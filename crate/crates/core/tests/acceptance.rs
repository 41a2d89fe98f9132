mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use common::{composed_loss, events, op_grad_suite, random_tensor, rng, tiny_model};
use tsl_core::data::{
    load_annotations, parse_annotations, parse_predictions, save_annotations, FeatureSequence,
    Modality, SyntheticSpec,
};
use tsl_core::decode::Interval;
use tsl_core::eval::{average_precision, oracle_ap, percent, EvalReport, DEFAULT_THRESHOLDS};
use tsl_core::loss::{diou_loss, focal_term, LossConfig};
use tsl_core::model::{build_pyramid, BackboneConfig, Localizer, ParamStore};
use tsl_core::pipeline::{evaluate, gen_data, predict_dir, FEATURES_DIR};
use tsl_core::tensor::{grad_check_many, Tape, Tensor, DEFAULT_STEP};
use tsl_core::train::{train, TrainConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    for seed in 0..4 {
        for (name, err) in op_grad_suite(seed) {
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    let (cfg, store) = tiny_model(4, 8, &[1, 2], 3, false, 31);
    let x = random_tensor(&mut rng(32), &[12, 4], 1.0);
    let gt = events(&[(0, 1.0, 5.0), (1, 4.0, 9.0), (2, 8.0, 11.5)]);
    let loss_cfg = LossConfig::default();
    let mut inputs = vec![x];
    inputs.extend(store.values().iter().cloned());
    let composed = grad_check_many(
        |tape, vars| composed_loss(tape, &cfg, &store, vars[0], &vars[1..], &gt, &loss_cfg),
        &inputs,
        DEFAULT_STEP,
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(
        worst.1 <= 1e-4 && composed <= 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "worst op {} {:.2e}, composed 2-block {:.2e}, {:.1}s",
            worst.0,
            worst.1,
            composed,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_loss_oracles() -> Outcome {
    let focal = |y: bool| focal_term(0.0, y, 0.25, 2.0).0;
    let ln2 = std::f64::consts::LN_2;
    let (pos, neg) = (focal(true), focal(false));
    let pos_ok = (pos - 0.043322).abs() <= 1e-6 && (pos - 0.25 * 0.25 * ln2).abs() <= 1e-15;
    let neg_ok = (neg - 0.129965).abs() <= 1e-6 && (neg - 0.75 * 0.25 * ln2).abs() <= 1e-15;
    let d = diou_loss((1.0, 3.0), (2.0, 4.0));
    let d_ok = (d - 7.0 / 9.0).abs() <= 1e-9;
    let mut r = rng(41);
    let mut identical_ok = true;
    let mut worst_scale = 0.0f64;
    for _ in 0..100 {
        let s = r.random_range(-50.0..50.0);
        let g = (s, s + r.random_range(0.01..20.0));
        let p = (r.random_range(-50.0..50.0), 0.0);
        let p = (p.0, p.0 + r.random_range(0.01..20.0));
        identical_ok &= diou_loss(g, g) == 0.0;
        let k = 10f64.powf(r.random_range(-3.0..3.0));
        let scaled = diou_loss((k * p.0, k * p.1), (k * g.0, k * g.1));
        worst_scale = worst_scale.max((scaled - diou_loss(p, g)).abs());
    }
    check(
        pos_ok && neg_ok && d_ok && identical_ok && worst_scale <= 1e-9,
        format!("focal {pos:.6}/{neg:.6}, diou {d:.10}, identical 0: {identical_ok}, scale drift {worst_scale:.1e}"),
    )
}

fn criterion_ap_oracle() -> Outcome {
    let mut r = rng(51);
    let mut mismatches = 0;
    let mut comparisons = 0;
    for _ in 0..100 {
        let classes = r.random_range(1..=4);
        let videos = r.random_range(1..=3);
        let make = |n: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<Interval> {
            (0..n)
                .map(|_| {
                    let s = r.random_range(0.0..60.0);
                    Interval::new(
                        format!("v{}", r.random_range(0..videos)),
                        r.random_range(0..classes),
                        (r.random_range(0..20) as f64) / 20.0,
                        s,
                        s + r.random_range(0.5..20.0),
                    )
                })
                .collect()
        };
        let n_gt = r.random_range(1..=20);
        let n_pred = r.random_range(0..=50);
        let gts = make(n_gt, &mut r);
        let preds = make(n_pred, &mut r);
        for c in 0..classes {
            let pc: Vec<Interval> = preds.iter().filter(|p| p.label == c).cloned().collect();
            let gc: Vec<Interval> = gts.iter().filter(|g| g.label == c).cloned().collect();
            for tau in DEFAULT_THRESHOLDS {
                comparisons += 1;
                if average_precision(&pc, &gc, tau) != oracle_ap(&pc, &gc, tau) {
                    mismatches += 1;
                }
            }
        }
    }
    let audio =
        EvalReport::from_per_threshold(&DEFAULT_THRESHOLDS, &[0.162, 0.135, 0.108, 0.084, 0.058]);
    let baseline =
        EvalReport::from_per_threshold(&DEFAULT_THRESHOLDS, &[0.188, 0.176, 0.159, 0.139, 0.113]);
    let (a, b) = (percent(audio.average_map), percent(baseline.average_map));
    check(
        mismatches == 0 && a == "10.9" && b == "15.5",
        format!("{mismatches}/{comparisons} AP mismatches, table rows average to {a} and {b}"),
    )
}

fn criterion_shapes() -> Outcome {
    let cfg = BackboneConfig {
        d_model: 4,
        num_heads: 1,
        mlp_ratio: 1,
        ..BackboneConfig::default()
    };
    let store = ParamStore::initialize(&cfg.param_specs(2), 0);
    let expected_strides: Vec<usize> = vec![1, 2, 4, 8, 16, 32, 64];
    let mut violations = Vec::new();
    for t in 8..=512 {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[t, 2]));
        let pyr =
            build_pyramid(&mut tape, &p, &cfg, x, &vec![true; t]).map_err(|e| e.to_string())?;
        let lens = pyr.lengths();
        let law = lens[0] == t && lens.windows(2).all(|w| w[1] == w[0].div_ceil(2));
        if !law || pyr.strides() != expected_strides {
            violations.push(t);
        }
    }

    let mut leaks = 0;
    for residual in [false, true] {
        let cfg = BackboneConfig {
            d_model: 8,
            num_heads: 2,
            window: 3,
            num_blocks: 1,
            stride_schedule: vec![1],
            msa_residual: residual,
            layerscale_init: 0.5,
            ..BackboneConfig::default()
        };
        let store = ParamStore::initialize(&cfg.param_specs(4), 61);
        let run = |x: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let pyr = build_pyramid(&mut tape, &p, &cfg, xv, &[true; 40]).unwrap();
            tape.value(pyr.levels[0].features).data().to_vec()
        };
        let x = random_tensor(&mut rng(62), &[40, 4], 1.0);
        let mut y = x.clone();
        y.data_mut()[20 * 4..21 * 4]
            .iter_mut()
            .for_each(|v| *v += 3.0);
        let (a, b) = (run(&x), run(&y));
        // reach: two kernel-3 embedding convs plus one window-3 attention hop
        for t in (0..40usize).filter(|t| t.abs_diff(20) > 3) {
            if (0..8).any(|c| a[t * 8 + c] != b[t * 8 + c]) {
                leaks += 1;
            }
        }
    }
    check(
        violations.is_empty() && leaks == 0,
        format!(
            "{} lengths violate the law, {leaks} positions changed outside the window",
            violations.len()
        ),
    )
}

struct PipelineRun {
    predictions: Vec<u8>,
    report: Vec<u8>,
    trained: f64,
    baseline: f64,
    elapsed: Duration,
}

fn pipeline(root: &Path) -> tsl_core::Result<PipelineRun> {
    let data = root.join("data");
    let spec = SyntheticSpec {
        num_videos: 80,
        num_classes: 5,
        d_visual: 32,
        d_audio: 8,
        snr: 5.0,
        seed: 7,
        ..SyntheticSpec::default()
    };
    gen_data(&spec, &data, false)?;
    let mut cfg = TrainConfig::desk(spec.d_visual + spec.d_audio, spec.num_classes);
    cfg.data_dir = Some(data.clone());
    cfg.train_splits = vec!["train".into(), "val".into()];
    cfg.val_split = None;
    let start = Instant::now();
    let manifest = train(&cfg, &root.join("run"))?;
    let elapsed = start.elapsed();

    let test_ann = load_annotations(data.join("annotations_test.json"))?;
    let test_ids: Vec<String> = test_ann.videos.iter().map(|v| v.video_id.clone()).collect();
    let features = data.join(FEATURES_DIR);
    let model = Localizer::from_params(
        cfg.model.clone(),
        ParamStore::load(&manifest.final_checkpoint)?,
    )?;
    let preds = predict_dir(&model, &features, Some(&test_ids), &cfg.decode)?;
    let report = evaluate(&preds, &test_ann)?;
    let untrained = Localizer::new(cfg.model.clone(), cfg.seed)?;
    let base_preds = predict_dir(&untrained, &features, Some(&test_ids), &cfg.decode)?;
    let baseline = evaluate(&base_preds, &test_ann)?.average_map;
    Ok(PipelineRun {
        predictions: serde_json::to_vec_pretty(&preds)?,
        report: serde_json::to_vec_pretty(&report)?,
        trained: report.average_map,
        baseline,
        elapsed,
    })
}

fn criterion_learning(run: &PipelineRun) -> Outcome {
    let ratio = run.trained / run.baseline.max(f64::MIN_POSITIVE);
    check(
        run.trained >= 0.50
            && run.baseline <= 0.15
            && run.trained >= 3.0 * run.baseline
            && run.elapsed <= Duration::from_secs(600),
        format!(
            "test mAP {:.3}, untrained {:.3} ({:.1}x), training {:.0}s",
            run.trained,
            run.baseline,
            ratio,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_determinism(first: &PipelineRun, second: &PipelineRun) -> Outcome {
    let same_preds = first.predictions == second.predictions;
    let same_report = first.report == second.report;
    check(
        same_preds && same_report,
        format!("prediction JSON identical: {same_preds}, report identical: {same_report}"),
    )
}

#[derive(Default)]
struct FuzzTally {
    panics: usize,
    errors: usize,
    faithful: usize,
    misreads: usize,
}

fn criterion_fuzz(root: &Path) -> Outcome {
    let mut r = rng(71);
    let mut tally = FuzzTally::default();
    let mut seeds = Vec::new();
    for i in 0..4 {
        let t = r.random_range(1..12);
        let d = r.random_range(1..6);
        let data: Vec<f32> = (0..t * d).map(|_| r.random_range(-5.0..5.0)).collect();
        let modality = if i % 2 == 0 {
            Modality::Visual
        } else {
            Modality::Audio
        };
        seeds.push(
            FeatureSequence::new(format!("vid_{i}"), modality, 0.5, t, d, data)
                .unwrap()
                .to_bytes(),
        );
    }
    let ann_dir = root.join("fuzz");
    gen_data(
        &SyntheticSpec {
            num_videos: 3,
            duration_sec: 32.0,
            event_length_sec: (2.0, 8.0),
            ..SyntheticSpec::default()
        },
        &ann_dir,
        false,
    )
    .map_err(|e| e.to_string())?;
    let ann_text = std::fs::read_to_string(ann_dir.join("annotations.json")).unwrap();
    let pred_text = "{\"videos\":[{\"video_id\":\"vid_0000\",\"detections\":[{\"label\":1,\"score\":0.5,\"start_sec\":1.0,\"end_sec\":4.5}]}]}";

    let mutate = |bytes: &[u8], r: &mut rand_chacha::ChaCha8Rng| -> Vec<u8> {
        let mut out = bytes.to_vec();
        if r.random_bool(0.5) {
            out.truncate(r.random_range(0..bytes.len()));
        } else {
            for _ in 0..r.random_range(1..=4) {
                let i = r.random_range(0..out.len());
                out[i] ^= 1 << r.random_range(0..8);
            }
        }
        out
    };

    for case in 0..1000 {
        let outcome = match case % 3 {
            0 => {
                let original = &seeds[case % seeds.len()];
                let bytes = mutate(original, &mut r);
                catch_unwind(AssertUnwindSafe(|| {
                    match FeatureSequence::from_bytes(&bytes) {
                        Err(_) => None,
                        // no checksum: a successful read must decode exactly the bytes given
                        Ok(seq) => Some(
                            seq.to_bytes() == bytes && seq.data().iter().all(|v| v.is_finite()),
                        ),
                    }
                }))
            }
            1 => {
                let bytes = mutate(ann_text.as_bytes(), &mut r);
                let text = String::from_utf8_lossy(&bytes).into_owned();
                catch_unwind(AssertUnwindSafe(|| match parse_annotations(&text) {
                    Err(_) => None,
                    Ok(ann) => Some(
                        ann.validate().is_ok() && {
                            let path = ann_dir.join(format!("case_{case}.json"));
                            save_annotations(&ann, &path).is_ok()
                                && load_annotations(&path).ok() == Some(ann)
                        },
                    ),
                }))
            }
            _ => {
                let bytes = mutate(pred_text.as_bytes(), &mut r);
                let text = String::from_utf8_lossy(&bytes).into_owned();
                catch_unwind(AssertUnwindSafe(|| match parse_predictions(&text) {
                    Err(_) => None,
                    Ok(p) => Some(
                        p.validate().is_ok()
                            && parse_predictions(&serde_json::to_string(&p).unwrap()).ok()
                                == Some(p),
                    ),
                }))
            }
        };
        match outcome {
            Err(_) => tally.panics += 1,
            Ok(None) => tally.errors += 1,
            Ok(Some(true)) => tally.faithful += 1,
            Ok(Some(false)) => tally.misreads += 1,
        }
    }
    let FuzzTally {
        panics,
        errors,
        faithful,
        misreads,
    } = tally;
    check(
        panics == 0 && misreads == 0,
        format!("1000 cases: {errors} typed errors, {faithful} faithful reads, {misreads} misreads, {panics} panics"),
    )
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut failures = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {n} ({name}): {detail}");
    };

    report(1, "gradient suite", criterion_gradients());
    report(2, "loss oracles", criterion_loss_oracles());
    report(3, "AP oracle and table averaging", criterion_ap_oracle());
    report(4, "pyramid shape law and locality", criterion_shapes());
    let first = pipeline(&root.path().join("a"));
    let second = pipeline(&root.path().join("b"));
    match (&first, &second) {
        (Ok(a), Ok(b)) => {
            report(5, "end-to-end learning", criterion_learning(a));
            report(6, "determinism", criterion_determinism(a, b));
        }
        _ => {
            let msg = first
                .as_ref()
                .err()
                .or(second.as_ref().err())
                .map(|e| e.to_string())
                .unwrap_or_default();
            report(5, "end-to-end learning", Err(msg.clone()));
            report(6, "determinism", Err(msg));
        }
    }
    report(7, "format fuzz", criterion_fuzz(root.path()));

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
