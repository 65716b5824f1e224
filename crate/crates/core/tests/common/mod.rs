#![allow(dead_code)]

pub mod oracle;

use protoseg::encoder::Image;
use protoseg::features::{FeatureMap, Mask};
use protoseg::numerics::{ParamStore, Tape, Tensor};
use protoseg::pipeline::{self, Episode, EpisodeDecisions, Mode, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(random_tensor(rng, &[d, h, w])).unwrap()
}

pub fn random_binary_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let on: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.5)).collect();
    Mask::from_bools(h, w, &on).unwrap()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn textured_image(rng: &mut ChaCha8Rng, size: usize, blob: &Mask) -> Image {
    let (fx, fy) = (rng.random_range(0.3..1.2), rng.random_range(0.3..1.2));
    let px = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let base = if blob.values()[i] > 0.0 {
                0.5 + 0.3 * (fx * x + fy * y).sin()
            } else {
                0.4 + 0.2 * (0.5 * fy * x - fx * y).cos()
            };
            (base + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
        })
        .collect();
    Image::new(size, size, px).unwrap()
}

fn disc(size: usize, cy: f64, cx: f64, r: f64) -> Mask {
    let on: Vec<bool> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            (y - cy).powi(2) + (x - cx).powi(2) <= r * r
        })
        .collect();
    Mask::from_bools(size, size, &on).unwrap()
}

/// D=4 episode on 24×24 images (6×6 features), 3×3 background grid.
pub fn small_episode(seed: u64) -> (ModelConfig, Episode) {
    let mut cfg = ModelConfig::default();
    cfg.encoder.channels = 4;
    cfg.encoder.seed = seed;
    cfg.fspa.num_clusters = 3;
    cfg.bcma.pool_window = [2, 2];
    let mut r = rng(seed);
    let sm = disc(24, 10.0, 11.0, 6.0);
    let qm = disc(24, 13.0, 12.0, 5.5);
    let episode = Episode {
        support: textured_image(&mut r, 24, &sm),
        support_mask: sm,
        query: textured_image(&mut r, 24, &qm),
        query_mask: Some(qm),
    };
    (cfg, episode)
}

pub fn total_loss(params: &ParamStore, cfg: &ModelConfig, episode: &Episode, decisions: &EpisodeDecisions) -> f64 {
    let mut tape = Tape::new();
    let out = pipeline::forward_episode(&mut tape, params, cfg, episode, Mode::Train, Some(decisions)).unwrap();
    pipeline::loss_value(&tape, out.total_loss.unwrap())
}

#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    /// (parameter, flat index, analytic, numeric, relative error)
    pub worst: Option<(String, usize, f64, f64, f64)>,
    pub failures: usize,
}

/// Compare the tape gradient of the total loss with central differences for
/// every coordinate of every named parameter, decisions held fixed.
pub fn check_total_loss_gradient(
    params: &ParamStore,
    cfg: &ModelConfig,
    episode: &Episode,
    names: &[&str],
    tolerance: f64,
) -> FdReport {
    let mut tape = Tape::new();
    let out = pipeline::forward_episode(&mut tape, params, cfg, episode, Mode::Train, None).unwrap();
    let decisions = out.decisions.clone();
    let grads = tape.backward(out.total_loss.unwrap(), params).unwrap();

    let coords: Vec<(String, usize)> = names
        .iter()
        .flat_map(|&n| (0..params.get(n).unwrap().len()).map(move |i| (n.to_string(), i)))
        .collect();
    let results: Vec<(String, usize, f64, f64, f64)> = coords
        .par_iter()
        .map(|(name, i)| {
            let base = params.get(name).unwrap();
            let perturbed = |delta: f64| {
                let mut data = base.data().to_vec();
                data[*i] += delta;
                let mut p = params.clone();
                p.set(name, Tensor::new(base.shape().to_vec(), data).unwrap()).unwrap();
                total_loss(&p, cfg, episode, &decisions)
            };
            let numeric = (perturbed(FD_STEP) - perturbed(-FD_STEP)) / (2.0 * FD_STEP);
            let analytic = grads.get(params.index_of(name).unwrap()).data()[*i];
            (name.clone(), *i, analytic, numeric, relative_error(analytic, numeric))
        })
        .collect();
    let failures = results.iter().filter(|r| !(r.4 <= tolerance)).count();
    let worst = results
        .iter()
        .max_by(|a, b| a.4.total_cmp(&b.4))
        .cloned();
    FdReport {
        checked: results.len(),
        max_rel: worst.as_ref().map_or(0.0, |w| w.4),
        worst,
        failures,
    }
}

/// Sample `per_fold` Setting-2 training episodes for every fold of a 5-fold
/// split and count images that contain a held-out class pixel.
pub fn setting_two_violations(per_fold: usize) -> (usize, usize) {
    use protoseg::harness::episodes::{generate_dataset, kfold_split, sample_episode, test_classes, training_pool, Setting};
    use protoseg::harness::phantom::NUM_CLASSES;

    let phantoms = generate_dataset(1, 200, 64, 64).unwrap();
    let folds = kfold_split(phantoms.len(), 5, 1).unwrap();
    let mut sampled = 0;
    let mut violations = 0;
    for fold in 0..5 {
        let pool = training_pool(&phantoms, &folds, fold, Setting::Two, NUM_CLASSES).unwrap();
        let held_out = test_classes(fold, NUM_CLASSES);
        let mut r = rng(fold as u64);
        for _ in 0..per_fold {
            let spec = sample_episode(&pool, &phantoms, &mut r).unwrap();
            assert_eq!(spec.setting, Setting::Two);
            for id in [spec.support, spec.query] {
                let labels = phantoms[id].label_map();
                if labels.iter().any(|l| held_out.contains(l)) || folds[fold].contains(&id) {
                    violations += 1;
                }
            }
            sampled += 1;
        }
    }
    (sampled, violations)
}
