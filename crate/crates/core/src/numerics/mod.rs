//! Dense `f64` tensors and a reverse-mode gradient tape.

mod params;
mod tape;
mod tensor;

pub use params::{ParamGrads, ParamStore, CHECKPOINT_MAGIC};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Lower bound applied to every vector norm used as a divisor.
pub const NORM_FLOOR: f64 = 1e-8;

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = v.to_vec();
    tape::softmax_in_place(&mut out);
    Ok(out)
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    tape::norm(v)
}

/// Cosine similarity with the norm floor. The flag is set when either input
/// has norm below [`NORM_FLOOR`]; a zero vector then yields exactly 0.
pub fn cosine_flagged(u: &[f64], v: &[f64]) -> (f64, bool) {
    assert_eq!(u.len(), v.len(), "cosine of vectors with different lengths");
    let (nu, nv) = (norm(u), norm(v));
    let degenerate = nu < NORM_FLOOR || nv < NORM_FLOOR;
    (dot(u, v) / (nu.max(NORM_FLOOR) * nv.max(NORM_FLOOR)), degenerate)
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    cosine_flagged(u, v).0
}

/// Mean pooling of an H×W map with stride equal to the window. The window
/// must divide both extents.
pub fn avg_pool2d(map: &Tensor, window: (usize, usize)) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    let mut tape = Tape::new();
    let x = tape.constant(map.reshape(vec![1, h, w])?);
    let y = tape.avg_pool2d(x, window)?;
    tape.value(y).reshape(vec![h / window.0, w / window.1])
}
