//! Small convolutional feature extractor.
//!
//! Three 3×3 convolutions (1→16→32→D channels, zero padding 1) with ReLU
//! after the first two and stride 2 on the first two, so an H×W image maps
//! to D×(H/4)×(W/4) features.

mod dspf;

pub use dspf::{load_features, read_features, save_features, write_features, FEATURE_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{map_to_rows, FeatureMap};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Spatial reduction factor of the encoder.
pub const STRIDE: usize = 4;

const HIDDEN: [usize; 2] = [16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels D.
    pub channels: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channels: 32, seed: 7 }
    }
}

/// One gray channel, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} with {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("image intensities must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

fn layer_names(layer: usize) -> (String, String) {
    (format!("encoder.conv{layer}.weight"), format!("encoder.conv{layer}.bias"))
}

/// Add freshly initialized encoder weights to `store`: every entry uniform in
/// `[-s, s]` with `s = sqrt(1 / fan_in)`.
pub fn init_encoder_params(store: &mut ParamStore, config: &EncoderConfig) -> Result<()> {
    if config.channels < 2 {
        return Err(Error::InvalidArgument("encoder needs at least 2 output channels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let widths = [1, HIDDEN[0], HIDDEN[1], config.channels];
    for layer in 0..3 {
        let (cin, cout) = (widths[layer], widths[layer + 1]);
        let fan_in = cin * 9;
        let s = (1.0 / fan_in as f64).sqrt();
        let w = (0..cout * fan_in).map(|_| rng.random_range(-s..=s)).collect();
        let b = (0..cout).map(|_| rng.random_range(-s..=s)).collect();
        let (wn, bn) = layer_names(layer + 1);
        store.insert(&wn, Tensor::new(vec![cout, cin, 3, 3], w)?)?;
        store.insert(&bn, Tensor::new(vec![cout], b)?)?;
    }
    Ok(())
}

/// Output channel count stored in `params`.
pub fn encoder_channels(params: &ParamStore) -> Result<usize> {
    params
        .get("encoder.conv3.weight")
        .map(|w| w.shape()[0])
        .ok_or_else(|| Error::InvalidArgument("parameters have no encoder".into()))
}

/// Record the encoder on `tape`; returns the D×(H/4)×(W/4) feature map.
pub fn encode_on(tape: &mut Tape, image: &Image, params: &ParamStore) -> Result<Var> {
    if image.height % STRIDE != 0 || image.width % STRIDE != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is not a multiple of {STRIDE}",
            image.height, image.width
        )));
    }
    let x = tape.constant(Tensor::new(vec![1, image.height, image.width], image.pixels.clone())?);
    let mut h = x;
    for (layer, stride) in [(1, 2), (2, 2), (3, 1)] {
        let (wn, bn) = layer_names(layer);
        let w = tape.param(params, &wn)?;
        let b = tape.param(params, &bn)?;
        h = tape.conv2d(h, w, b, stride, 1)?;
        if layer < 3 {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// [`encode_on`] followed by the pixel-row view used by the attention modules.
pub fn encode_rows_on(tape: &mut Tape, image: &Image, params: &ParamStore) -> Result<(Var, Var)> {
    let map = encode_on(tape, image, params)?;
    let rows = map_to_rows(tape, map)?;
    Ok((map, rows))
}

pub fn encode(image: &Image, params: &ParamStore) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let v = encode_on(&mut tape, image, params)?;
    tape.check_finite()?;
    FeatureMap::new(tape.value(v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(d: usize) -> ParamStore {
        let mut p = ParamStore::new();
        init_encoder_params(&mut p, &EncoderConfig { channels: d, seed: 3 }).unwrap();
        p
    }

    fn image(h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w).map(|i| ((i as f64) * 0.173).sin() * 0.5 + 0.5).collect()).unwrap()
    }

    #[test]
    fn output_shape_is_quarter_resolution() {
        let fm = encode(&image(64, 64), &params(32)).unwrap();
        assert_eq!(fm.tensor().shape(), &[32, 16, 16]);
        let fm = encode(&image(8, 12), &params(4)).unwrap();
        assert_eq!(fm.tensor().shape(), &[4, 2, 3]);
    }

    #[test]
    fn deterministic() {
        let p = params(8);
        assert_eq!(encode(&image(16, 16), &p).unwrap(), encode(&image(16, 16), &p).unwrap());
        assert_eq!(params(8), p);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(encode(&image(10, 16), &params(4)).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = params(4);
        let w = p.get("encoder.conv2.weight").unwrap();
        let s = (1.0f64 / 144.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= s));
        assert_eq!(p.numel(), 16 * 9 + 16 + 32 * 16 * 9 + 32 + 4 * 32 * 9 + 4);
    }
}
