mod common;

use std::collections::VecDeque;
use std::path::Path;

use proptest::prelude::*;
use protoseg::harness::episodes::{generate_dataset, kfold_split, sample_episode, training_pool, Setting, Supervision};
use protoseg::harness::phantom::{generate_phantom, NUM_CLASSES};
use protoseg::harness::slic::{pseudo_labels, slic, SlicParams, Superpixels};
use protoseg::harness::{self, pgm, Benchmark, RunConfig};
use protoseg::Error;

fn small_run(out_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out_dir = out_dir.to_path_buf();
    cfg.encoder.channels = 8;
    cfg.bcma.pool_window = [2, 2];
    cfg.data.count = 30;
    cfg.data.height = 32;
    cfg.data.width = 32;
    cfg.train.steps = 12;
    cfg.train.checkpoint_every = 5;
    cfg
}

fn is_connected(sp: &Superpixels, label: usize) -> bool {
    let (h, w) = (sp.height, sp.width);
    let cells: Vec<usize> = (0..h * w).filter(|&i| sp.labels[i] == label).collect();
    let Some(&start) = cells.first() else { return false };
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut reached = 0;
    while let Some(i) = queue.pop_front() {
        reached += 1;
        let (y, x) = (i / w, i % w);
        let mut next = Vec::new();
        if y > 0 {
            next.push(i - w);
        }
        if y + 1 < h {
            next.push(i + w);
        }
        if x > 0 {
            next.push(i - 1);
        }
        if x + 1 < w {
            next.push(i + 1);
        }
        for j in next {
            if !seen[j] && sp.labels[j] == label {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    reached == cells.len()
}

#[test]
fn setting_two_training_images_never_show_test_classes() {
    let (sampled, violations) = common::setting_two_violations(200);
    assert_eq!(sampled, 1000);
    assert_eq!(violations, 0);
}

#[test]
fn support_and_query_differ_when_possible() {
    let phantoms = generate_dataset(1, 60, 32, 32).unwrap();
    let folds = kfold_split(60, 5, 1).unwrap();
    let pool = training_pool(&phantoms, &folds, 0, Setting::One, NUM_CLASSES).unwrap();
    let mut r = common::rng(4);
    for _ in 0..300 {
        let spec = sample_episode(&pool, &phantoms, &mut r).unwrap();
        assert_ne!(spec.support, spec.query);
        assert!(phantoms[spec.support].contains(spec.class) && phantoms[spec.query].contains(spec.class));
        assert!(!folds[0].contains(&spec.support) && !folds[0].contains(&spec.query));
    }
}

proptest! {
    #[test]
    fn kfold_is_a_near_equal_partition(n in 1usize..300, k in 1usize..12, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let folds = kfold_split(n, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(folds, kfold_split(n, k, seed).unwrap());
    }
}

#[test]
fn kfold_rejects_more_folds_than_slices() {
    assert!(kfold_split(3, 5, 0).is_err());
}

#[test]
fn superpixels_are_connected_on_phantoms() {
    for id in 0..6 {
        let p = generate_phantom(2, id, 64, 64).unwrap();
        let sp = slic(&p.image, &SlicParams::default());
        assert!(sp.count > 16, "only {} superpixels", sp.count);
        assert!(sp.labels.iter().all(|&l| l < sp.count));
        for label in 0..sp.count {
            assert!(is_connected(&sp, label), "phantom {id} label {label}");
        }
    }
}

#[test]
fn pseudo_label_is_one_superpixel() {
    let p = generate_phantom(5, 1, 64, 64).unwrap();
    let params = SlicParams::default();
    let sp = slic(&p.image, &params);
    for seed in 0..10 {
        let m = pseudo_labels(&p.image, seed, &params);
        let on = m.on_indices();
        assert!(!on.is_empty() && on.len() < 64 * 64);
        let label = sp.labels[on[0]];
        assert!(on.iter().all(|&i| sp.labels[i] == label));
        assert_eq!(on.len(), sp.areas()[label]);
    }
}

#[test]
fn training_is_deterministic_and_writes_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run_a = harness::train(&small_run(a.path()), Some(a.path())).unwrap();
    let run_b = harness::train(&small_run(b.path()), Some(b.path())).unwrap();
    assert_eq!(run_a.trace, run_b.trace);
    assert_eq!(run_a.trace.len(), 12);
    for name in ["loss.csv", "checkpoint_000005.bin", "checkpoint_000010.bin", "params.bin"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name}");
    }
    let header = std::fs::read_to_string(a.path().join("loss.csv")).unwrap();
    assert!(header.starts_with("step,total,seg,reg,class,support,query\n"));
    assert_eq!(run_a.checkpoint.as_deref(), Some(a.path().join("params.bin").as_path()));
}

#[test]
fn evaluation_is_pure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    let params = protoseg::pipeline::init_params(&cfg.model()).unwrap();
    let bench = Benchmark::from_config(&cfg).unwrap();
    let first = harness::evaluate::evaluate_on(&params, &cfg, &bench).unwrap();
    let second = harness::evaluate(&params, &cfg).unwrap();
    assert_eq!(first, second);
    assert!(!first.episodes.is_empty());
    assert!(first.episodes.iter().all(|e| (0.0..=100.0).contains(&e.dice) && e.class == 1));
    first.write_summary_csv(&dir.path().join("s.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert!(text.starts_with("fold,class,episodes,mean_dice\n"));
    assert!(first.table().contains("mean"));
}

#[test]
fn superpixel_supervision_trains() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run(dir.path());
    cfg.data.supervision = Supervision::Superpixels;
    cfg.train.steps = 4;
    let out = harness::train(&cfg, None).unwrap();
    assert_eq!(out.trace.len(), 4);
    assert!(out.trace.iter().all(|r| r.class == 0 && r.support == r.query && r.total.is_finite()));
}

#[test]
fn setting_two_pool_without_held_out_class_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run(dir.path());
    cfg.data.count = 5;
    cfg.data.folds = 5;
    cfg.data.setting = Setting::Two;
    match harness::train(&cfg, None) {
        Err(Error::EmptyPool { class }) => assert!((2..=4).contains(&class)),
        other => panic!("expected an empty pool, got {:?}", other.map(|o| o.trace.len())),
    }
}

#[test]
fn phantom_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = generate_phantom(9, 3, 64, 48).unwrap();
    let img = dir.path().join("p.pgm");
    pgm::write_image(&img, &p.image).unwrap();
    let back = pgm::read_image(&img).unwrap();
    assert_eq!((back.height(), back.width()), (64, 48));
    for (a, b) in back.pixels().iter().zip(p.image.pixels()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
    for (class, mask) in &p.masks {
        let path = dir.path().join(format!("m{class}.pgm"));
        pgm::write_mask(&path, mask).unwrap();
        assert_eq!(&pgm::read_mask(&path).unwrap(), mask);
    }
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"bcma": {"beta": 0.5}, "train": {"steps": 7}}"#).unwrap();
    let cfg = RunConfig::load_with_overrides(
        Some(&path),
        &[("train.steps".into(), "9".into()), ("data.setting".into(), "2".into())],
    )
    .unwrap();
    assert_eq!(cfg.bcma.beta, 0.5);
    assert_eq!(cfg.train.steps, 9);
    assert_eq!(cfg.data.setting, Setting::Two);
    assert!(RunConfig::load_with_overrides(Some(&path), &[("bcma.gamma".into(), "1".into())]).is_err());
    std::fs::write(&path, r#"{"train": {"stepz": 7}}"#).unwrap();
    assert!(RunConfig::load(&path).is_err());
}
