//! Prototype matching head, losses and the Dice score.
//!
//! Every query pixel is compared with the foreground prototype and with the
//! background prototypes by cosine similarity. The background score is the
//! best (or mean) match among the background prototypes. The two scores,
//! scaled by a temperature, are softmaxed into background/foreground
//! probabilities and bilinearly upsampled to image resolution.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, Mask, Prototype};
use crate::numerics::{Tape, Tensor, Var};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BgAggregation {
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub temperature: f64,
    pub bg_aggregation: BgAggregation,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            temperature: 20.0,
            bg_aggregation: BgAggregation::Max,
        }
    }
}

/// Background (channel 0) and foreground (channel 1) probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilityMap {
    /// 2×h×w at feature resolution.
    pub feature: Tensor,
    /// 2×H×W at image resolution.
    pub image: Tensor,
}

impl ClassProbabilityMap {
    pub fn foreground(&self, y: usize, x: usize) -> f64 {
        self.image.at3(1, y, x)
    }

    pub fn background(&self, y: usize, x: usize) -> f64 {
        self.image.at3(0, y, x)
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    /// Foreground wherever its probability strictly beats background.
    pub fn argmax(&self) -> Mask {
        let (h, w) = self.image_size();
        let on: Vec<bool> = (0..h * w)
            .map(|i| self.image.data()[h * w + i] > self.image.data()[i])
            .collect();
        Mask::from_bools(h, w, &on).expect("argmax mask")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    pub probabilities: ClassProbabilityMap,
    pub mask: Mask,
    /// N×1 cosine with the foreground prototype, one row per query pixel.
    pub fg_similarity: Tensor,
    /// N×B cosine with every background prototype.
    pub bg_similarity: Tensor,
}

/// Tape handles produced by [`segment_on`].
#[derive(Debug, Clone)]
pub struct SegmentVars {
    pub fg_similarity: Var,
    pub bg_similarity: Var,
    /// 2×h×w.
    pub feature_probs: Var,
    /// 2×H×W.
    pub probs: Var,
    /// Winning background prototype per pixel under max aggregation.
    pub bg_choice: Option<Vec<usize>>,
}

/// Per-pixel argmax over columns, lowest index on ties.
pub fn row_argmax(t: &Tensor) -> Result<Vec<usize>> {
    let (_, c) = t.dims2()?;
    Ok(t.rows()
        .map(|r| (1..c).fold(0, |best, j| if r[j] > r[best] { j } else { best }))
        .collect())
}

/// Segment N×D query rows of an `h×w` feature map against the 1×D
/// foreground prototype and B×D background prototypes, upsampling to
/// `image_size`. `bg_choice` freezes the max-aggregation winners.
#[allow(clippy::too_many_arguments)]
pub fn segment_on(
    tape: &mut Tape,
    query: Var,
    fg: Var,
    bg: Var,
    feature_size: (usize, usize),
    image_size: (usize, usize),
    config: &SegConfig,
    bg_choice: Option<&[usize]>,
) -> Result<SegmentVars> {
    let (n, d) = tape.value(query).dims2()?;
    let (h, w) = feature_size;
    if n != h * w {
        return Err(Error::Shape(format!("{n} query rows for a {h}x{w} map")));
    }
    if tape.shape(fg) != [1, d] {
        return Err(Error::Shape(format!("foreground prototype {:?} for D={d}", tape.shape(fg))));
    }
    let (b, bd) = tape.value(bg).dims2()?;
    if b == 0 {
        return Err(Error::NoBackground);
    }
    if bd != d {
        return Err(Error::Shape(format!("background prototypes have {bd} channels, query {d}")));
    }

    let q = tape.row_normalize(query)?;
    let f = tape.row_normalize(fg)?;
    let bgn = tape.row_normalize(bg)?;
    let ft = tape.transpose(f)?;
    let bt = tape.transpose(bgn)?;
    let s_f = tape.matmul(q, ft)?;
    let s_all = tape.matmul(q, bt)?;

    let (s_b, choice) = match config.bg_aggregation {
        BgAggregation::Max => {
            let choice = match bg_choice {
                Some(c) => c.to_vec(),
                None => row_argmax(tape.value(s_all))?,
            };
            (tape.pick_per_row(s_all, &choice)?, Some(choice))
        }
        BgAggregation::Mean => {
            let avg = tape.constant(Tensor::full(&[b, 1], 1.0 / b as f64));
            (tape.matmul(s_all, avg)?, None)
        }
    };

    let scores = tape.concat_cols(s_b, s_f)?;
    let logits = tape.scale(scores, config.temperature);
    let p = tape.softmax_rows(logits)?;
    let pt = tape.transpose(p)?;
    let feature_probs = tape.reshape(pt, vec![2, h, w])?;
    let probs = tape.upsample_bilinear(feature_probs, image_size.0, image_size.1)?;
    Ok(SegmentVars {
        fg_similarity: s_f,
        bg_similarity: s_all,
        feature_probs,
        probs,
        bg_choice: choice,
    })
}

pub fn bundle_from(tape: &Tape, vars: &SegmentVars) -> PredictionBundle {
    let probabilities = ClassProbabilityMap {
        feature: tape.value(vars.feature_probs).clone(),
        image: tape.value(vars.probs).clone(),
    };
    PredictionBundle {
        mask: probabilities.argmax(),
        probabilities,
        fg_similarity: tape.value(vars.fg_similarity).clone(),
        bg_similarity: tape.value(vars.bg_similarity).clone(),
    }
}

pub fn segment(
    query: &FeatureMap,
    fg: &Prototype,
    bg: &[Prototype],
    config: &SegConfig,
    image_size: (usize, usize),
) -> Result<PredictionBundle> {
    if bg.is_empty() {
        return Err(Error::NoBackground);
    }
    let d = query.channels();
    if fg.dim() != d || bg.iter().any(|p| p.dim() != d) {
        return Err(Error::Shape(format!("prototype dimension differs from D={d}")));
    }
    let mut tape = Tape::new();
    let q = tape.constant(query.pixel_rows());
    let f = tape.constant(Tensor::new(vec![1, d], fg.0.clone())?);
    let rows: Vec<Vec<f64>> = bg.iter().map(|p| p.0.clone()).collect();
    let b = tape.constant(Tensor::from_rows(&rows)?);
    let vars = segment_on(
        &mut tape,
        q,
        f,
        b,
        (query.height(), query.width()),
        image_size,
        config,
        None,
    )?;
    tape.check_finite()?;
    Ok(bundle_from(&tape, &vars))
}

/// Two-channel one-hot target: background = 1 − m, foreground = m.
pub fn one_hot_target(mask: &Mask) -> Tensor {
    let fg = mask.values();
    let data = fg.iter().map(|m| 1.0 - m).chain(fg.iter().copied()).collect();
    Tensor::new(vec![2, mask.height(), mask.width()], data).expect("mask extents")
}

pub fn seg_loss_on(tape: &mut Tape, probs: Var, mask: &Mask) -> Result<Var> {
    tape.cross_entropy(probs, Arc::new(one_hot_target(mask)), PROB_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegLoss {
    pub value: f64,
    /// Some probability fell below the log floor.
    pub clamped: bool,
}

pub fn seg_loss(probs: &ClassProbabilityMap, mask: &Mask) -> Result<SegLoss> {
    if probs.image_size() != (mask.height(), mask.width()) {
        return Err(Error::Shape(format!(
            "probabilities {:?} for a {}x{} mask",
            probs.image_size(),
            mask.height(),
            mask.width()
        )));
    }
    let mut tape = Tape::new();
    let p = tape.constant(probs.image.clone());
    let l = seg_loss_on(&mut tape, p, mask)?;
    let clamped = probs.image.data().iter().any(|&v| v < PROB_FLOOR || v > 1.0);
    if clamped {
        log::warn!("probabilities outside (0, 1) clamped at {PROB_FLOOR}");
    }
    Ok(SegLoss {
        value: tape.value(l).data()[0],
        clamped,
    })
}

/// Dice overlap in [0, 100]; two empty masks score 100.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "dice of {}x{} and {}x{} masks",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let a = pred.count_on();
    let b = gt.count_on();
    if a + b == 0 {
        return Ok(100.0);
    }
    let both = pred
        .values()
        .iter()
        .zip(gt.values())
        .filter(|(&p, &g)| p > 0.0 && g > 0.0)
        .count();
    Ok(200.0 * both as f64 / (a + b) as f64)
}
