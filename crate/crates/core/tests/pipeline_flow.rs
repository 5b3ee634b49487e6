use std::path::Path;

use nightlift::detector::{BoxSet, DetectConfig, Detector, EvalConfig, TinyDetector, TinyDetectorConfig};
use nightlift::kpn::{KpnConfig, KpnModel};
use nightlift::losses::l_pix;
use nightlift::manifest::{boxes_to_rows, write_manifest, write_predictions, ManifestRecord};
use nightlift::pipeline::*;
use nightlift::stylemix::{generate_pair, StatsStylizer, StylePool};
use nightlift::toy::{generate, ToyConfig};
use nightlift::{Error, Image};
use proptest::prelude::*;

fn toy(n: usize, size: usize) -> (Vec<(Image, BoxSet)>, StylePool) {
    let ds = generate(&ToyConfig {
        n_images: n,
        size,
        ..Default::default()
    })
    .unwrap();
    let days = ds.train.iter().map(|s| (s.day.clone(), s.gt.clone())).collect();
    (days, StylePool::new(ds.styles).unwrap())
}

fn small_config(lambda: f64) -> TrainConfig {
    let mut cfg = TrainConfig {
        kpn_lr: 0.01,
        kpn_epochs: 3,
        pairs_per_epoch: 8,
        batch_size: 2,
        kpn: KpnConfig {
            k: 3,
            base_channels: 3,
            depth: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.loss.lambda = lambda;
    cfg
}

fn frozen_detector() -> TinyDetector {
    let mut det = TinyDetector::new(TinyDetectorConfig {
        base_channels: 2,
        ..Default::default()
    })
    .unwrap();
    det.freeze();
    det
}

#[test]
fn lambda_zero_identity_model_measures_mixed_image_error() {
    let (days, pool) = toy(4, 32);
    let mut cfg = small_config(0.0);
    cfg.kpn_lr = 0.0;
    cfg.max_steps = Some(2);
    let trainer = KpnTrainer::new(cfg.clone(), &days, &pool, &StatsStylizer, None).unwrap();
    let model = KpnModel::identity(cfg.kpn.clone()).unwrap();
    let mut state = TrainState::new(model.clone());
    let mut records = Vec::new();
    trainer.run(&mut state, None, |r| records.push(*r)).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(state.model.params(), model.params());

    for (step, rec) in records.iter().enumerate() {
        let (mut lp, mut lc) = (0.0, 0.0);
        let batch = trainer.batch(step);
        for &(day, seed) in &batch {
            let pair = generate_pair(&days[day].0, &cfg.stylemix, &pool, &StatsStylizer, seed).unwrap();
            lp += 0.5 * (l_pix(&pair.mn1, &days[day].0).unwrap() + l_pix(&pair.mn2, &days[day].0).unwrap());
            lc += l_pix(&pair.mn1, &pair.mn2).unwrap();
        }
        let n = batch.len() as f64;
        assert!((rec.loss.l_pix - lp / n).abs() < 1e-12);
        assert!((rec.loss.l_pix_cons - lc / n).abs() < 1e-12);
        assert_eq!(rec.loss.l_det, 0.0);
        assert!((rec.loss.total - (lp + lc) / n).abs() < 1e-12);
    }
}

#[test]
fn same_seed_gives_the_same_first_loss() {
    let (days, pool) = toy(4, 32);
    let cfg = small_config(0.0);
    let run = || {
        let trainer = KpnTrainer::new(cfg.clone(), &days, &pool, &StatsStylizer, None).unwrap();
        trainer.step_loss(&KpnModel::new(cfg.kpn.clone()).unwrap(), 0).unwrap().total
    };
    assert!((run() - run()).abs() <= 1e-6);
}

#[test]
fn batches_cover_each_epoch_and_change_between_epochs() {
    let (days, pool) = toy(4, 32);
    let trainer = KpnTrainer::new(small_config(0.0), &days, &pool, &StatsStylizer, None).unwrap();
    assert_eq!(trainer.steps_per_epoch(), 2);
    let epoch = |e: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..2).flat_map(|s| trainer.batch(2 * e + s)).map(|(d, _)| d).collect();
        v.sort();
        v
    };
    assert_eq!(epoch(0), vec![0, 1, 2, 3]);
    assert_eq!(epoch(1), vec![0, 1, 2, 3]);
    let seeds: std::collections::HashSet<u64> = (0..6).flat_map(|s| trainer.batch(s)).map(|(_, s)| s).collect();
    assert_eq!(seeds.len(), 12);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let (days, pool) = toy(4, 32);
    let cfg = small_config(0.0);
    let trainer = KpnTrainer::new(cfg.clone(), &days, &pool, &StatsStylizer, None).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut full = TrainState::new(KpnModel::new(cfg.kpn.clone()).unwrap());
    let mut full_log = Vec::new();
    trainer.run(&mut full, None, |r| full_log.push(r.loss.total)).unwrap();
    assert_eq!(full_log.len(), 6);

    let mut short_cfg = cfg.clone();
    short_cfg.max_steps = Some(3);
    let short = KpnTrainer::new(short_cfg, &days, &pool, &StatsStylizer, None).unwrap();
    let mut part = TrainState::new(KpnModel::new(cfg.kpn.clone()).unwrap());
    short.run(&mut part, Some(dir.path()), |_| {}).unwrap();
    let mut resumed = TrainState::load(dir.path().join("checkpoints/latest.ckpt")).unwrap();
    assert_eq!(resumed.step, 3);
    let mut tail = Vec::new();
    trainer.run(&mut resumed, None, |r| tail.push(r.loss.total)).unwrap();
    assert_eq!(tail.len(), 3);
    assert!((tail[0] - full_log[3]).abs() <= 1e-5);
    assert_eq!(resumed.model, full.model);
}

#[test]
fn output_layout_and_training_log() {
    let (days, pool) = toy(4, 32);
    let trainer = KpnTrainer::new(small_config(0.0), &days, &pool, &StatsStylizer, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(KpnModel::new(small_config(0.0).kpn).unwrap());
    let summary = trainer.run(&mut state, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(summary.checkpoints.len(), 3);
    let log = std::fs::read_to_string(dir.path().join("logs/train.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l["total"].is_number() && l["l_pix"].is_number()));
    assert_eq!(KpnModel::load(dir.path().join("checkpoints/kpn.ckpt")).unwrap(), state.model);
}

#[test]
fn detector_is_untouched_by_kpn_training() {
    let (days, pool) = toy(4, 32);
    let mut cfg = small_config(10.0);
    cfg.max_steps = Some(3);
    let det = frozen_detector();
    let before = det.param_digest();
    let params_before = det.params().to_vec();
    let trainer = KpnTrainer::new(cfg.clone(), &days, &pool, &StatsStylizer, Some(&det)).unwrap();
    let mut state = TrainState::new(KpnModel::new(cfg.kpn.clone()).unwrap());
    let summary = trainer.run(&mut state, None, |r| assert!(r.loss.l_det > 0.0)).unwrap();
    assert_eq!(summary.detector_digest_before.as_deref(), Some(before.as_str()));
    assert_eq!(summary.detector_digest_after, summary.detector_digest_before);
    assert_eq!(det.params(), &params_before[..]);
    assert_ne!(state.model.params(), KpnModel::new(cfg.kpn).unwrap().params());
}

#[test]
fn detection_terms_need_a_frozen_detector() {
    let (days, pool) = toy(2, 32);
    let cfg = small_config(10.0);
    assert!(matches!(
        KpnTrainer::new(cfg.clone(), &days, &pool, &StatsStylizer, None),
        Err(Error::State(_))
    ));
    let mut det = frozen_detector();
    det.unfreeze();
    assert!(matches!(
        KpnTrainer::new(cfg.clone(), &days, &pool, &StatsStylizer, Some(&det)),
        Err(Error::State(_))
    ));
    assert!(matches!(
        KpnTrainer::new(cfg, &[], &pool, &StatsStylizer, None),
        Err(Error::Data(_))
    ));
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_checkpoint() {
    let (days, pool) = toy(4, 32);
    let mut cfg = small_config(0.0);
    cfg.max_steps = Some(2);
    let trainer = KpnTrainer::new(cfg.clone(), &days, &pool, &StatsStylizer, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(KpnModel::new(cfg.kpn.clone()).unwrap());
    trainer.run(&mut state, Some(dir.path()), |_| {}).unwrap();
    let saved = std::fs::read(dir.path().join("checkpoints/latest.ckpt")).unwrap();

    cfg.max_steps = Some(4);
    let trainer = KpnTrainer::new(cfg, &days, &pool, &StatsStylizer, None).unwrap();
    state.model.params_mut()[0] = f64::NAN;
    let err = trainer.run(&mut state, Some(dir.path()), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert_eq!(std::fs::read(dir.path().join("checkpoints/latest.ckpt")).unwrap(), saved);
}

#[test]
fn identity_translation_is_transparent_to_the_detector() {
    let (days, _) = toy(3, 32);
    let det = frozen_detector();
    let kpn = KpnModel::identity(small_config(0.0).kpn).unwrap();
    let cfg = DetectConfig {
        score_threshold: 0.0,
        ..Default::default()
    };
    let night: Vec<Image> = days.iter().map(|(d, _)| d.map(|v| 0.2 * v)).collect();
    let results = infer_night(&night, &kpn, &det, &ContrastConfig::default(), &cfg).unwrap();
    assert_eq!(results.len(), 3);
    for (r, img) in results.iter().zip(&night) {
        assert_eq!(r.translated.data(), img.data());
        assert_eq!(r.detections, det.detect(img, &cfg).unwrap());
    }
    assert_eq!(results[0].id, days[0].0.meta.id.clone().unwrap());
}

#[test]
fn kernel_size_mismatch_is_a_compatibility_error() {
    let model = KpnModel::new(small_config(0.0).kpn).unwrap();
    let expected = KpnConfig {
        k: 5,
        ..small_config(0.0).kpn
    };
    assert!(matches!(check_kpn_compat(&model, &expected), Err(Error::Compatibility(_))));
    check_kpn_compat(&model, &small_config(0.0).kpn).unwrap();
}

#[test]
fn results_are_written_to_the_output_layout() {
    let (days, _) = toy(2, 32);
    let det = frozen_detector();
    let kpn = KpnModel::identity(small_config(0.0).kpn).unwrap();
    let imgs: Vec<Image> = days.iter().map(|(d, _)| d.clone()).collect();
    let results = infer_night(&imgs, &kpn, &det, &ContrastConfig::default(), &DetectConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let dump = write_results(dir.path(), &results).unwrap();
    assert!(dir.path().join("translated/0000.png").is_file());
    assert_eq!(nightlift::manifest::read_predictions(dump).unwrap().len(), 2);
}

fn write_gt(dir: &Path, sets: &[(&str, BoxSet)]) -> std::path::PathBuf {
    let path = dir.join("gt.jsonl");
    let records: Vec<ManifestRecord> = sets
        .iter()
        .map(|(id, s)| ManifestRecord {
            image: format!("imgs/{id}.png"),
            boxes: boxes_to_rows(s),
        })
        .collect();
    write_manifest(&path, &records).unwrap();
    path
}

#[test]
fn eval_map_file_cases() {
    let (days, _) = toy(3, 32);
    let dir = tempfile::tempdir().unwrap();
    let sets: Vec<(&str, BoxSet)> = vec![("0000", days[0].1.clone()), ("0001", days[1].1.clone()), ("0002", days[2].1.clone())];
    let gt = write_gt(dir.path(), &sets);
    let cfg = EvalConfig::default();

    let perfect: Vec<(String, BoxSet)> = sets
        .iter()
        .map(|(id, s)| {
            let mut p = s.clone();
            p.scores = Some(vec![1.0; s.len()]);
            (id.to_string(), p)
        })
        .collect();
    let pred = dir.path().join("pred.jsonl");
    write_predictions(&pred, &perfect).unwrap();
    let report = eval_map(&pred, &gt, &cfg).unwrap();
    assert_eq!(report.map, 1.0);
    write_report(dir.path().join("report.json"), &report).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["map"], 1.0);
    assert!(json["per_class"]["0"]["pr_curve"].is_array());

    write_predictions(&pred, &[]).unwrap();
    assert_eq!(eval_map(&pred, &gt, &cfg).unwrap().map, 0.0);

    write_predictions(&pred, &[("9999".into(), BoxSet::default()), ("bogus".into(), BoxSet::default())]).unwrap();
    match eval_map(&pred, &gt, &cfg) {
        Err(Error::Data(m)) => assert!(m.contains("9999") && m.contains("bogus")),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn toy_data_is_byte_identical_for_a_seed() {
    let cfg = ToyConfig {
        n_images: 4,
        size: 32,
        seed: 9,
        ..Default::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&cfg).unwrap().write(a.path()).unwrap();
    generate(&cfg).unwrap().write(b.path()).unwrap();
    let mut files = Vec::new();
    for entry in walk(a.path()) {
        let rel = entry.strip_prefix(a.path()).unwrap().to_path_buf();
        assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.path().join(&rel)).unwrap(), "{rel:?}");
        files.push(rel);
    }
    assert!(files.len() >= 4 * 2 + 2 + 5 + 5);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.path().join("dataset.json")).unwrap()).unwrap();
    assert_eq!(meta["night"]["gamma"], 2.2);
    assert_eq!(meta["night"]["noise"], 0.02);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn generated_boxes_are_in_bounds_and_large() {
    let ds = generate(&ToyConfig {
        n_images: 400,
        ..Default::default()
    })
    .unwrap();
    for s in ds.train.iter().chain(&ds.test) {
        for b in &s.gt.boxes {
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
            assert!(b.area() >= 64.0);
        }
    }
}

proptest! {
    #[test]
    fn contrast_is_monotone_on_the_unit_interval(
        t in 0.01f64..0.99,
        g in 1.0f64..5.0,
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
        gamma in any::<bool>(),
    ) {
        prop_assume!(t * g <= 1.0);
        let cfg = ContrastConfig {
            threshold: t,
            gain: g,
            enabled: true,
            mode: if gamma { ContrastMode::Gamma } else { ContrastMode::Linear },
        };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(cfg.map(lo) <= cfg.map(hi) + 1e-12);
        for v in [lo, hi] {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&cfg.map(v)));
        }
        prop_assert!(cfg.map(0.0).abs() < 1e-12 && (cfg.map(1.0) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn contrast_lower_segment_example() {
    let cfg = ContrastConfig {
        enabled: true,
        ..Default::default()
    };
    let img = Image::filled(2, 2, 3, 0.1).unwrap();
    let out = contrast_enhance(&img, &cfg).unwrap();
    assert!(out.data().iter().all(|v| (v - 0.15).abs() < 1e-12));
}
