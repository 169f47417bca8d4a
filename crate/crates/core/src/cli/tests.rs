use std::collections::HashSet;

use super::*;
use crate::metrics::evaluate_video;

fn tiny() -> RunConfig {
    RunConfig {
        seed: 5,
        net: NetConfig {
            encoder_channels: vec![4, 8, 8],
            input_size: (16, 16),
            ..NetConfig::default()
        },
        train: TrainConfig {
            batch_size: 3,
            steps: 4,
            ..TrainConfig::default()
        },
        online: OnlineConfig {
            pairs_k: 4,
            ..OnlineConfig::default()
        },
        meta: MetaConfig {
            inner_steps_m: 2,
            pairs_k: 3,
            meta_steps: 2,
            ..MetaConfig::default()
        },
        synth: SynthConfig {
            frames: 5,
            baseline_train: 3,
            meta_train: 2,
            test_inside: 2,
            test_outside: 2,
        },
        ..RunConfig::default()
    }
}

/// Every file under `dir`, relative path to bytes, sorted by path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn pipeline(cfg: &RunConfig, dir: &Path) -> (Manifest, EvalOutcome, EvalOutcome) {
    let m = cmd_synth(cfg, &dir.join("data")).unwrap();
    let runs = dir.join("runs");
    cmd_train(cfg, &m, &runs).unwrap();
    cmd_meta_train(cfg, &m, &runs.join(BASELINE_CHECKPOINT), &runs).unwrap();
    let none = cmd_eval(cfg, &m, &runs.join(META_CHECKPOINT), AdaptMode::None, &runs).unwrap();
    let foal = cmd_eval(cfg, &m, &runs.join(META_CHECKPOINT), AdaptMode::Foal, &runs).unwrap();
    (m, none, foal)
}

#[test]
fn config_round_trips_through_json() {
    let cfg = tiny();
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
}

#[test]
fn config_rejects_unknown_keys_at_every_level() {
    for text in [
        r#"{"sed": 1}"#,
        r#"{"meta": {"meta_step": 10}}"#,
        r#"{"net": {"channels": [4]}}"#,
        r#"{"online": {"seed": 3}}"#,
    ] {
        assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn config_validates_sub_configs() {
    assert!(RunConfig::from_json(r#"{"online": {"learning_rate": 0.0}}"#).is_err());
    assert!(RunConfig::from_json(r#"{"net": {"input_size": [32, 16]}}"#).is_err());
    assert!(RunConfig::from_json(r#"{"synth": {"frames": 1}}"#).is_err());
}

#[test]
fn derived_seeds_differ_by_stream_and_master() {
    let seeds: HashSet<u64> = (0..4).flat_map(|m| (1..7).map(move |s| derive_seed(m, s))).collect();
    assert_eq!(seeds.len(), 24);
    assert_eq!(derive_seed(9, 3), derive_seed(9, 3));
}

#[test]
fn adapt_mode_parses_both_names_only() {
    assert_eq!("none".parse::<AdaptMode>().unwrap(), AdaptMode::None);
    assert_eq!("foal".parse::<AdaptMode>().unwrap(), AdaptMode::Foal);
    assert!("FOAL".parse::<AdaptMode>().is_err());
}

#[test]
fn mean_std_uses_sample_convention() {
    let s = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(MeanStd::of(&[7.0]).std, 0.0);
}

#[test]
fn synth_writes_four_disjoint_splits_with_unique_ids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let m = cmd_synth(&cfg, dir.path()).unwrap();
    let loaded = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.entries, m.entries);
    for split in Split::ALL {
        assert_eq!(m.split(split).count(), cfg.synth.count(split), "{split}");
    }
    let ids: HashSet<&str> = m.entries.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids.len(), m.entries.len());
    for e in &m.entries {
        let expected = if e.split == Split::TestOutside { "outside" } else { "inside" };
        assert_eq!(e.category, expected);
        assert_eq!(e.mask_frames, vec![0, 2]);
    }
    let s = m.load_sample(&m.entries[0]).unwrap();
    assert_eq!(s.video.dims(), (5, 16, 16));
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let cfg = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(&cfg, a.path());
    pipeline(&cfg, b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let names: Vec<&PathBuf> = sa.iter().map(|(p, _)| p).collect();
    for f in ["runs/baseline.fckp", "runs/meta.fckp", "runs/eval_foal.csv", "runs/eval_none_summary.csv"] {
        assert!(names.contains(&&PathBuf::from(f)), "{f} missing from {names:?}");
    }
    assert_eq!(sa, sb);
}

#[test]
fn different_seed_changes_outputs() {
    let cfg = tiny();
    let other = RunConfig { seed: 6, ..tiny() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_synth(&cfg, a.path()).unwrap();
    cmd_synth(&other, b.path()).unwrap();
    assert_ne!(snapshot(a.path()), snapshot(b.path()));
}

#[test]
fn eval_without_adaptation_is_direct_evaluation() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let (m, none, _) = pipeline(&cfg, dir.path());
    let net = TrackerNet::new(cfg.net.clone()).unwrap();
    let params = read_checkpoint(&dir.path().join("runs").join(META_CHECKPOINT)).unwrap();
    let tests: Vec<&ManifestEntry> = m
        .entries
        .iter()
        .filter(|e| matches!(e.split, Split::TestInside | Split::TestOutside))
        .collect();
    assert_eq!(none.rows.len(), tests.len());
    for (row, entry) in none.rows.iter().zip(tests) {
        let s = m.load_sample(entry).unwrap();
        let direct = evaluate_video(&net, &params, &s.video, &s.masks[0].1, &s.masks[1].1, 0, 2).unwrap();
        assert_eq!(row.id, entry.id);
        assert_eq!(row.report, direct);
        assert_eq!(row.adapt_seconds, 0.0);
    }
}

#[test]
fn summary_rows_are_mean_and_std_of_video_rows() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let (_, _, foal) = pipeline(&cfg, dir.path());
    for split in [Split::TestInside, Split::TestOutside] {
        let rows: Vec<&EvalRow> = foal.rows.iter().filter(|r| r.split == split).collect();
        for label in LABELS {
            let dice: Vec<f64> = rows.iter().map(|r| r.report.get(label).unwrap().dice).collect();
            assert_eq!(foal.summary_for(split, Some(label)).unwrap().dice, MeanStd::of(&dice));
        }
        let mean: Vec<f64> = rows.iter().map(|r| r.report.mean_dice()).collect();
        assert_eq!(foal.summary_for(split, None).unwrap().dice, MeanStd::of(&mean));
    }
    assert!(foal.summary_for(Split::BaselineTrain, None).is_none());
    assert!(foal.rows.iter().all(|r| r.heldout.is_some()));
}

#[test]
fn zero_meta_lr_reproduces_the_baseline_checkpoint() {
    let cfg = RunConfig {
        meta: MetaConfig {
            meta_lr: 0.0,
            ..tiny().meta
        },
        ..tiny()
    };
    let dir = tempfile::tempdir().unwrap();
    let m = cmd_synth(&cfg, &dir.path().join("data")).unwrap();
    let runs = dir.path().join("runs");
    cmd_train(&cfg, &m, &runs).unwrap();
    cmd_meta_train(&cfg, &m, &runs.join(BASELINE_CHECKPOINT), &runs).unwrap();
    assert_eq!(
        fs::read(runs.join(BASELINE_CHECKPOINT)).unwrap(),
        fs::read(runs.join(META_CHECKPOINT)).unwrap()
    );
    let progress = fs::read_to_string(runs.join(META_PROGRESS_CSV)).unwrap();
    assert_eq!(progress.lines().count(), 1 + cfg.meta.meta_steps);
}

#[test]
fn training_loss_trends_down_over_a_smoke_run() {
    let cfg = RunConfig {
        train: TrainConfig {
            batch_size: 4,
            steps: 200,
            ..TrainConfig::default()
        },
        ..tiny()
    };
    let dir = tempfile::tempdir().unwrap();
    let m = cmd_synth(&cfg, &dir.path().join("data")).unwrap();
    let runs = dir.path().join("runs");
    let params = cmd_train(&cfg, &m, &runs).unwrap();
    let mut rdr = csv::Reader::from_path(runs.join(TRAIN_LOSS_CSV)).unwrap();
    let totals: Vec<f64> = rdr.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(totals.len(), 200);
    // Batches are random, so compare 40-step window means.
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let windows: Vec<f64> = totals.chunks(40).map(mean).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    let loaded = read_checkpoint(&runs.join(BASELINE_CHECKPOINT)).unwrap();
    assert!(loaded.bitwise_eq(&params));
    let net = TrackerNet::new(cfg.net.clone()).unwrap();
    let v = &m.load_sample(&m.entries[0]).unwrap().video;
    assert!(net.predict_flow(&loaded, &v.frame(0), &v.frame(1)).unwrap().is_finite());
}

#[test]
fn empty_split_and_mismatched_checkpoint_are_errors() {
    let cfg = RunConfig {
        synth: SynthConfig {
            baseline_train: 0,
            ..tiny().synth
        },
        ..tiny()
    };
    let dir = tempfile::tempdir().unwrap();
    let m = cmd_synth(&cfg, dir.path()).unwrap();
    assert!(matches!(cmd_train(&cfg, &m, dir.path()), Err(Error::InvalidArgument(_))));

    let bigger = RunConfig {
        net: NetConfig {
            encoder_channels: vec![4, 8, 16],
            ..tiny().net
        },
        ..tiny()
    };
    let ckpt = dir.path().join("other.fckp");
    write_checkpoint(&ckpt, &TrackerNet::new(bigger.net).unwrap().init_params(0)).unwrap();
    assert!(matches!(
        cmd_eval(&cfg, &m, &ckpt, AdaptMode::None, dir.path()),
        Err(Error::Config(_))
    ));
}
