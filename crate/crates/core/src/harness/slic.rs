//! Grayscale SLIC superpixels and superpixel pseudo-labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Image;
use crate::features::Mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlicParams {
    pub superpixels: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            superpixels: 64,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

/// Intensities are scaled to [0, 100] before mixing with spatial distance.
const INTENSITY_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Superpixels {
    pub height: usize,
    pub width: usize,
    /// Label per pixel, `0..count`, each label one 4-connected region.
    pub labels: Vec<usize>,
    pub count: usize,
}

impl Superpixels {
    pub fn region(&self, label: usize) -> Mask {
        let on: Vec<bool> = self.labels.iter().map(|&l| l == label).collect();
        Mask::from_bools(self.height, self.width, &on).expect("label extents")
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.count];
        self.labels.iter().for_each(|&l| a[l] += 1);
        a
    }
}

#[derive(Debug, Clone, Copy)]
struct Center {
    y: f64,
    x: f64,
    v: f64,
}

pub fn slic(image: &Image, params: &SlicParams) -> Superpixels {
    let (h, w) = (image.height(), image.width());
    let k = params.superpixels.clamp(1, h * w);
    let step = ((h * w) as f64 / k as f64).sqrt();
    let ny = ((h as f64 / step).round() as usize).max(1);
    let nx = ((w as f64 / step).round() as usize).max(1);
    let (sy, sx) = (h as f64 / ny as f64, w as f64 / nx as f64);
    let value = |y: usize, x: usize| image.get(y, x) * INTENSITY_SCALE;

    let mut centers: Vec<Center> = (0..ny)
        .flat_map(|i| (0..nx).map(move |j| (i, j)))
        .map(|(i, j)| {
            let y = (i as f64 + 0.5) * sy - 0.5;
            let x = (j as f64 + 0.5) * sx - 0.5;
            let (py, px) = (y.round() as usize, x.round() as usize);
            Center { y, x, v: value(py.min(h - 1), px.min(w - 1)) }
        })
        .collect();

    let weight = (params.compactness / step).powi(2);
    let reach = (2.0 * step).ceil() as isize;
    let mut labels = vec![0usize; h * w];
    let mut dist = vec![f64::INFINITY; h * w];
    for _ in 0..params.iterations.max(1) {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let (cy, cx) = (c.y.round() as isize, c.x.round() as isize);
            for y in (cy - reach).max(0)..(cy + reach + 1).min(h as isize) {
                for x in (cx - reach).max(0)..(cx + reach + 1).min(w as isize) {
                    let (yu, xu) = (y as usize, x as usize);
                    let dv = value(yu, xu) - c.v;
                    let ds = (y as f64 - c.y).powi(2) + (x as f64 - c.x).powi(2);
                    let d = dv * dv + weight * ds;
                    let i = yu * w + xu;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = ci;
                    }
                }
            }
        }
        let mut sums = vec![(0.0, 0.0, 0.0, 0usize); centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let s = &mut sums[l];
            s.0 += (i / w) as f64;
            s.1 += (i % w) as f64;
            s.2 += value(i / w, i % w);
            s.3 += 1;
        }
        for (c, s) in centers.iter_mut().zip(sums) {
            if s.3 > 0 {
                let n = s.3 as f64;
                *c = Center { y: s.0 / n, x: s.1 / n, v: s.2 / n };
            }
        }
    }
    enforce_connectivity(&labels, h, w, ((step * step) / 4.0) as usize)
}

/// Relabel 4-connected components in raster order; components smaller than
/// `min_size` join the neighbouring label found at their first pixel.
fn enforce_connectivity(labels: &[usize], h: usize, w: usize, min_size: usize) -> Superpixels {
    const UNSET: usize = usize::MAX;
    let mut out = vec![UNSET; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..h * w {
        if out[start] != UNSET {
            continue;
        }
        let (sy, sx) = (start / w, start % w);
        let adjacent = [
            (sx > 0).then(|| start - 1),
            (sy > 0).then(|| start - w),
        ]
        .into_iter()
        .flatten()
        .map(|i| out[i])
        .find(|&l| l != UNSET);

        component.clear();
        stack.push(start);
        out[start] = next;
        while let Some(i) = stack.pop() {
            component.push(i);
            let (y, x) = (i / w, i % w);
            let neighbours = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for j in neighbours.into_iter().flatten() {
                if out[j] == UNSET && labels[j] == labels[start] {
                    out[j] = next;
                    stack.push(j);
                }
            }
        }
        match adjacent {
            Some(adj) if component.len() < min_size => component.iter().for_each(|&i| out[i] = adj),
            _ => next += 1,
        }
    }
    Superpixels {
        height: h,
        width: w,
        labels: out,
        count: next,
    }
}

/// One superpixel of `image`, drawn uniformly with `seed`.
pub fn pseudo_labels(image: &Image, seed: u64, params: &SlicParams) -> Mask {
    let sp = slic(image, params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sp.region(rng.random_range(0..sp.count))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(h: usize, w: usize) -> Image {
        Image::new(h, w, vec![0.4; h * w]).unwrap()
    }

    #[test]
    fn constant_image_gives_even_cells() {
        let sp = slic(&constant(64, 64), &SlicParams::default());
        assert_eq!(sp.count, 64);
        for a in sp.areas() {
            assert!((a as f64 - 64.0).abs() <= 0.3 * 64.0, "area {a}");
        }
    }

    #[test]
    fn labels_partition_the_image() {
        let img = Image::new(32, 32, (0..1024).map(|i| ((i * 37 % 101) as f64) / 100.0).collect()).unwrap();
        let sp = slic(&img, &SlicParams::default());
        assert!(sp.labels.iter().all(|&l| l < sp.count));
        assert_eq!(sp.areas().iter().sum::<usize>(), 1024);
        assert!(sp.areas().iter().all(|&a| a > 0));
    }

    #[test]
    fn pseudo_label_is_proper_subset() {
        let img = Image::new(32, 32, (0..1024).map(|i| ((i % 32) as f64) / 31.0).collect()).unwrap();
        let m = pseudo_labels(&img, 4, &SlicParams::default());
        assert!(m.count_on() > 0 && m.count_on() < 1024);
    }
}
