//! Synthetic "organ" slices: 2–4 disjoint textured blobs on a textured
//! background.
//!
//! Each class has its own grating orientation and period, so blobs differ
//! from one another and from the background in texture rather than in mean
//! intensity.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::Image;
use crate::error::{Error, Result};
use crate::features::Mask;

pub const NUM_CLASSES: u8 = 4;
/// Blob area as a fraction of the image.
pub const AREA_BOUNDS: (f64, f64) = (0.02, 0.20);
const GAP: usize = 2;
const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub seed: u64,
    pub id: u64,
    pub image: Image,
    /// One binary mask per class present, ordered by class id.
    pub masks: Vec<(u8, Mask)>,
}

impl Phantom {
    pub fn classes(&self) -> Vec<u8> {
        self.masks.iter().map(|(c, _)| *c).collect()
    }

    pub fn contains(&self, class: u8) -> bool {
        self.masks.iter().any(|(c, _)| *c == class)
    }

    pub fn mask(&self, class: u8) -> Option<&Mask> {
        self.masks.iter().find(|(c, _)| *c == class).map(|(_, m)| m)
    }

    /// Class id per pixel, 0 for background.
    pub fn label_map(&self) -> Vec<u8> {
        let mut labels = vec![0u8; self.image.height() * self.image.width()];
        for (c, m) in &self.masks {
            for i in m.on_indices() {
                labels[i] = *c;
            }
        }
        labels
    }
}

/// (orientation, period in pixels, mean offset) of each class's grating.
fn class_grating(class: u8) -> (f64, f64, f64) {
    match class {
        1 => (0.0, 4.0, 0.2),
        2 => (PI / 2.0, 4.0, -0.2),
        3 => (PI / 4.0, 6.0, 0.1),
        _ => (3.0 * PI / 4.0, 8.0, -0.1),
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    angle: f64,
    /// (amplitude, phase) of the 2nd and 3rd boundary harmonics.
    harmonics: [(f64, f64); 2],
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let side = h.min(w) as f64;
        let a = rng.random_range(0.08..0.21) * side;
        let b = rng.random_range(0.08..0.21) * side;
        let reach = a.max(b) * 1.25 + GAP as f64;
        // reach < side / 2 for every side >= 32
        let cy = rng.random_range(reach..h as f64 - reach);
        let cx = rng.random_range(reach..w as f64 - reach);
        Self {
            cy,
            cx,
            a,
            b,
            angle: rng.random_range(0.0..PI),
            harmonics: [
                (rng.random_range(-0.12..0.12), rng.random_range(0.0..2.0 * PI)),
                (rng.random_range(-0.12..0.12), rng.random_range(0.0..2.0 * PI)),
            ],
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let theta = v.atan2(u);
        let [(a2, p2), (a3, p3)] = self.harmonics;
        let r = 1.0 + a2 * (2.0 * theta + p2).cos() + a3 * (3.0 * theta + p3).cos();
        (u * u + v * v).sqrt() <= r
    }

    fn rasterize(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w)
            .map(|i| self.contains((i / w) as f64, (i % w) as f64))
            .collect()
    }
}

/// Pixels within `GAP` (Chebyshev) of any set pixel.
fn dilate(on: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !on[y * w + x] {
                continue;
            }
            for ny in y.saturating_sub(GAP)..(y + GAP + 1).min(h) {
                for nx in x.saturating_sub(GAP)..(x + GAP + 1).min(w) {
                    out[ny * w + nx] = true;
                }
            }
        }
    }
    out
}

pub fn phantom_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate_phantom(seed: u64, id: u64, height: usize, width: usize) -> Result<Phantom> {
    if height < 32 || width < 32 || height % 4 != 0 || width % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "phantom size {height}x{width} must be a multiple of 4 and at least 32"
        )));
    }
    let mut rng = phantom_rng(seed, id);
    let n = height * width;
    let (lo, hi) = (AREA_BOUNDS.0 * n as f64, AREA_BOUNDS.1 * n as f64);

    let count = rng.random_range(2..=4usize);
    let mut classes: Vec<u8> = (1..=NUM_CLASSES).collect();
    for i in (1..classes.len()).rev() {
        classes.swap(i, rng.random_range(0..=i));
    }
    classes.truncate(count);
    classes.sort_unstable();

    let mut occupied = vec![false; n];
    let mut masks = Vec::with_capacity(count);
    for &class in &classes {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let blob = Blob::random(&mut rng, height, width);
            let on = blob.rasterize(height, width);
            let area = on.iter().filter(|&&b| b).count() as f64;
            if area < lo || area > hi || on.iter().zip(&occupied).any(|(&a, &b)| a && b) {
                continue;
            }
            placed = Some(on);
            break;
        }
        // Crowded images simply end up with fewer blobs.
        let Some(on) = placed else { break };
        for (o, d) in occupied.iter_mut().zip(dilate(&on, height, width)) {
            *o |= d;
        }
        masks.push((class, Mask::from_bools(height, width, &on)?));
    }
    if masks.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "could not place two blobs in a {height}x{width} phantom"
        )));
    }

    let image = render(&mut rng, height, width, &masks);
    Ok(Phantom {
        seed,
        id,
        image,
        masks,
    })
}

fn render(rng: &mut ChaCha8Rng, h: usize, w: usize, masks: &[(u8, Mask)]) -> Image {
    // background: two slow waves with per-image directions
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.0..PI),
                rng.random_range(14.0..24.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let phases: Vec<f64> = masks.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut owner = vec![usize::MAX; h * w];
    for (k, (_, m)) in masks.iter().enumerate() {
        for i in m.on_indices() {
            owner[i] = k;
        }
    }
    let px = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let base = match owner[i] {
                usize::MAX => {
                    0.5 + waves
                        .iter()
                        .map(|&(o, p, ph)| 0.05 * (2.0 * PI * (x * o.cos() + y * o.sin()) / p + ph).sin())
                        .sum::<f64>()
                }
                k => {
                    let (o, p, offset) = class_grating(masks[k].0);
                    0.5 + offset + 0.2 * (2.0 * PI * (x * o.cos() + y * o.sin()) / p + phases[k]).sin()
                }
            };
            (base + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
        })
        .collect();
    Image::new(h, w, px).expect("pixels clamped to [0, 1]")
}
