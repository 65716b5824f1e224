//! Resemblance attention: reweight support features by their affinity with
//! the query.
//!
//! Support and query pixel features are L2-normalized per pixel, giving a
//! cosine affinity between every query position and every support position.
//! Each query row is softmaxed over support positions and the rows are
//! averaged, yielding one convex weight per support position. The weighted
//! sum of support features is then added back to every support pixel as a
//! residual.

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::numerics::{Tape, Tensor, Var};

/// Fuse N×D support rows with N×D query rows; returns the fused N×D rows.
pub fn fuse_on(tape: &mut Tape, support: Var, query: Var) -> Result<Var> {
    let weights = support_weights_on(tape, support, query)?;
    let context = tape.matmul(weights, support)?;
    tape.add_row_broadcast(support, context)
}

/// The 1×N convex weights over support positions.
pub fn support_weights_on(tape: &mut Tape, support: Var, query: Var) -> Result<Var> {
    if tape.shape(support) != tape.shape(query) {
        return Err(Error::Shape(format!(
            "support {:?} and query {:?} features differ",
            tape.shape(support),
            tape.shape(query)
        )));
    }
    let s = tape.row_normalize(support)?;
    let q = tape.row_normalize(query)?;
    let st = tape.transpose(s)?;
    let affinity = tape.matmul(q, st)?;
    let per_query = tape.softmax_rows(affinity)?;
    tape.mean_rows(per_query)
}

pub fn fuse(support: &FeatureMap, query: &FeatureMap) -> Result<FeatureMap> {
    if support.tensor().shape() != query.tensor().shape() {
        return Err(Error::Shape(format!(
            "support {:?} and query {:?} features differ",
            support.tensor().shape(),
            query.tensor().shape()
        )));
    }
    let mut tape = Tape::new();
    let s = tape.constant(support.pixel_rows());
    let q = tape.constant(query.pixel_rows());
    let out = fuse_on(&mut tape, s, q)?;
    tape.check_finite()?;
    FeatureMap::from_pixel_rows(tape.value(out), support.height(), support.width())
}

/// Convex weights over support pixels (sum to one).
pub fn support_weights(support: &FeatureMap, query: &FeatureMap) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant(support.pixel_rows());
    let q = tape.constant(query.pixel_rows());
    let w = support_weights_on(&mut tape, s, q)?;
    Ok(tape.value(w).clone())
}
