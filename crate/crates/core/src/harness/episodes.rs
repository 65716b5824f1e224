//! Slice pools, k-fold splits and 1-way 1-shot episode sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::phantom::{generate_phantom, Phantom};
use super::slic::Superpixels;
use crate::encoder::Image;
use crate::error::{Error, Result};
use crate::pipeline::Episode;

/// Setting-1 lets test classes appear unlabeled in training images;
/// Setting-2 drops every training image that contains a test class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Setting {
    One,
    Two,
}

impl TryFrom<u8> for Setting {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Setting::One),
            2 => Ok(Setting::Two),
            _ => Err(format!("setting must be 1 or 2, got {v}")),
        }
    }
}

impl From<Setting> for u8 {
    fn from(s: Setting) -> u8 {
        match s {
            Setting::One => 1,
            Setting::Two => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Ground-truth class masks of the training classes.
    Labels,
    /// One random superpixel per image as pseudo-foreground.
    Superpixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub support: usize,
    pub query: usize,
    /// 0 for superpixel episodes.
    pub class: u8,
    pub setting: Setting,
    pub fold: usize,
}

pub fn generate_dataset(seed: u64, count: usize, height: usize, width: usize) -> Result<Vec<Phantom>> {
    (0..count as u64)
        .map(|id| generate_phantom(seed, id, height, width))
        .collect()
}

/// Shuffle slice ids with `seed` and cut them into `k` near-equal folds.
pub fn kfold_split(slices: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > slices {
        return Err(Error::InvalidArgument(format!("{k} folds over {slices} slices")));
    }
    let mut ids: Vec<usize> = (0..slices).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (slices / k, slices % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = ids[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

/// Classes held out in `fold`: one class per fold, cycling through the
/// classes.
pub fn test_classes(fold: usize, num_classes: u8) -> Vec<u8> {
    vec![(fold % num_classes as usize) as u8 + 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePool {
    pub slices: Vec<usize>,
    pub classes: Vec<u8>,
    pub setting: Setting,
    pub fold: usize,
}

/// Training slices and classes for `fold`.
pub fn training_pool(
    phantoms: &[Phantom],
    folds: &[Vec<usize>],
    fold: usize,
    setting: Setting,
    num_classes: u8,
) -> Result<EpisodePool> {
    let test = folds
        .get(fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} of {}", folds.len())))?;
    let held_out = test_classes(fold, num_classes);
    let slices = (0..phantoms.len())
        .filter(|i| !test.contains(i))
        .filter(|&i| setting == Setting::One || !held_out.iter().any(|&c| phantoms[i].contains(c)))
        .collect();
    let classes = (1..=num_classes).filter(|c| !held_out.contains(c)).collect();
    Ok(EpisodePool {
        slices,
        classes,
        setting,
        fold,
    })
}

/// A class drawn uniformly from the pool, then distinct support and query
/// slices containing it (the same slice only when it is the only one).
pub fn sample_episode(pool: &EpisodePool, phantoms: &[Phantom], rng: &mut ChaCha8Rng) -> Result<EpisodeSpec> {
    if pool.classes.is_empty() {
        return Err(Error::InvalidArgument("episode pool has no classes".into()));
    }
    let class = pool.classes[rng.random_range(0..pool.classes.len())];
    let candidates: Vec<usize> = pool
        .slices
        .iter()
        .copied()
        .filter(|&i| phantoms[i].contains(class))
        .collect();
    let (support, query) = pick_pair(&candidates, rng).ok_or(Error::EmptyPool { class })?;
    Ok(EpisodeSpec {
        support,
        query,
        class,
        setting: pool.setting,
        fold: pool.fold,
    })
}

fn pick_pair(candidates: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    match candidates.len() {
        0 => None,
        1 => Some((candidates[0], candidates[0])),
        n => {
            let s = rng.random_range(0..n);
            let q = (s + rng.random_range(1..n)) % n;
            Some((candidates[s], candidates[q]))
        }
    }
}

/// A slice from the pool paired with a perturbed copy of itself.
pub fn sample_superpixel_episode(pool: &EpisodePool, rng: &mut ChaCha8Rng) -> Result<EpisodeSpec> {
    if pool.slices.is_empty() {
        return Err(Error::EmptyPool { class: 0 });
    }
    let s = pool.slices[rng.random_range(0..pool.slices.len())];
    Ok(EpisodeSpec {
        support: s,
        query: s,
        class: 0,
        setting: pool.setting,
        fold: pool.fold,
    })
}

/// Gamma and noise jitter for the query side of a superpixel episode.
pub fn jitter(image: &Image, rng: &mut ChaCha8Rng) -> Image {
    let gamma: f64 = rng.random_range(0.8..1.25);
    let px = image
        .pixels()
        .iter()
        .map(|&v| (v.powf(gamma) + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0))
        .collect();
    Image::new(image.height(), image.width(), px).expect("clamped pixels")
}

/// Labelled episode: masks are the class masks of both slices.
pub fn labelled_episode(spec: &EpisodeSpec, phantoms: &[Phantom]) -> Result<Episode> {
    let s = &phantoms[spec.support];
    let q = &phantoms[spec.query];
    let missing = || Error::EmptyPool { class: spec.class };
    Ok(Episode {
        support: s.image.clone(),
        support_mask: s.mask(spec.class).ok_or_else(missing)?.clone(),
        query: q.image.clone(),
        query_mask: Some(q.mask(spec.class).ok_or_else(missing)?.clone()),
    })
}

/// Superpixel episode from precomputed superpixels of the support slice.
pub fn superpixel_episode(
    spec: &EpisodeSpec,
    phantoms: &[Phantom],
    superpixels: &Superpixels,
    rng: &mut ChaCha8Rng,
) -> Episode {
    let img = &phantoms[spec.support].image;
    let mask = superpixels.region(rng.random_range(0..superpixels.count));
    Episode {
        support: img.clone(),
        support_mask: mask.clone(),
        query: jitter(img, rng),
        query_mask: Some(mask),
    }
}

/// Every test-fold slice containing a held-out class is a query once; its
/// support is another such slice drawn with `seed`.
pub fn evaluation_specs(
    phantoms: &[Phantom],
    folds: &[Vec<usize>],
    fold: usize,
    setting: Setting,
    num_classes: u8,
    seed: u64,
) -> Result<Vec<EpisodeSpec>> {
    let test = folds
        .get(fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} of {}", folds.len())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::new();
    for class in test_classes(fold, num_classes) {
        let slices: Vec<usize> = test.iter().copied().filter(|&i| phantoms[i].contains(class)).collect();
        if slices.len() < 2 {
            log::warn!("fold {fold}: fewer than two test slices contain class {class}");
            continue;
        }
        for (k, &query) in slices.iter().enumerate() {
            let other = (k + rng.random_range(1..slices.len())) % slices.len();
            specs.push(EpisodeSpec {
                support: slices[other],
                query,
                class,
                setting,
                fold,
            });
        }
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_slices_five_folds() {
        let folds = kfold_split(10, 5, 3).unwrap();
        assert!(folds.iter().all(|f| f.len() == 2));
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(folds, kfold_split(10, 5, 3).unwrap());
        assert!(kfold_split(4, 5, 0).is_err());
    }

    #[test]
    fn uneven_split_is_near_equal() {
        let sizes: Vec<usize> = kfold_split(12, 5, 1).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2, 2]);
    }

    #[test]
    fn setting_tags() {
        assert_eq!(Setting::try_from(2).unwrap(), Setting::Two);
        assert!(Setting::try_from(3).is_err());
        assert_eq!(serde_json::to_string(&Setting::One).unwrap(), "1");
    }

    #[test]
    fn empty_class_pool_names_the_class() {
        let phantoms = generate_dataset(1, 6, 32, 32).unwrap();
        let pool = EpisodePool {
            slices: vec![],
            classes: vec![3],
            setting: Setting::One,
            fold: 0,
        };
        let err = sample_episode(&pool, &phantoms, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("class 3"), "{err}");
    }
}
