//! One episode end to end: encode, resemblance attention, foreground and
//! background prototypes, matching head, and the symmetric training loss.

use serde::{Deserialize, Serialize};

use crate::bcma::{self, AttentionBank, BcmaConfig, ATTENTION_PARAM};
use crate::encoder::{self, EncoderConfig, Image};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, Mask};
use crate::fspa::{self, ClusterAssignment, FspaConfig};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::ran;
use crate::segmenter::{self, PredictionBundle, SegConfig, SegmentVars};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Use the support features unchanged instead of the resemblance fusion.
    pub no_ran: bool,
    /// Masked average of the fused support features instead of clustering.
    pub no_fspa: bool,
    /// Raw grid prototypes instead of refined ones.
    pub no_bcma: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fspa: FspaConfig,
    pub bcma: BcmaConfig,
    pub seg: SegConfig,
    pub ablation: AblationConfig,
}

/// Encoder weights plus the attention bank, initialized from the config.
pub fn init_params(config: &ModelConfig) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    encoder::init_encoder_params(&mut store, &config.encoder)?;
    let d = config.encoder.channels;
    let bank = if config.bcma.random_init {
        bcma::random_attention_bank(d, config.encoder.seed.wrapping_add(1))
    } else {
        bcma::init_attention_bank(&config.bcma.pattern()?, d)?
    };
    store.insert(ATTENTION_PARAM, bank.0)?;
    if config.bcma.freeze_a {
        store.set_trainable(ATTENTION_PARAM, false)?;
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Image,
    pub support_mask: Mask,
    pub query: Image,
    /// Required for training; used for the reported loss when present.
    pub query_mask: Option<Mask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Both directions and the total loss.
    Train,
    /// Forward direction only.
    Eval,
}

/// Discrete choices made in one direction. Feeding them back in reproduces
/// the same graph with those choices held fixed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DirectionDecisions {
    pub clusters: Option<ClusterAssignment>,
    pub bg_choice: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeDecisions {
    pub forward: DirectionDecisions,
    pub reverse: Option<DirectionDecisions>,
}

#[derive(Debug, Clone)]
pub struct DirectionVars {
    /// N×D support rows after resemblance fusion.
    pub fused_support: Var,
    /// 1×D.
    pub fg_prototype: Var,
    /// G×D raw grid prototypes.
    pub raw_grid: Var,
    /// G×D grid prototypes fed to selection (refined unless ablated).
    pub refined_grid: Var,
    /// B×D selected background prototypes.
    pub bg_prototypes: Var,
    pub bg_rows: Vec<usize>,
    pub seg: SegmentVars,
    pub decisions: DirectionDecisions,
}

/// Support/query roles for one direction of an episode.
pub struct DirectionInputs<'a> {
    /// N×D support pixel rows.
    pub support: Var,
    /// N×D query pixel rows.
    pub query: Var,
    pub feature_size: (usize, usize),
    /// Support mask at image resolution.
    pub support_mask: &'a Mask,
    /// Resolution of the predicted query mask.
    pub image_size: (usize, usize),
}

fn check_features(d: usize, feature_size: (usize, usize)) -> Result<()> {
    if d < 2 || feature_size.0 < 2 || feature_size.1 < 2 {
        return Err(Error::Shape(format!(
            "features {d}x{}x{} need at least 2 channels and 2x2 pixels",
            feature_size.0, feature_size.1
        )));
    }
    Ok(())
}

/// Area-average an image mask down to feature resolution.
pub fn feature_mask(mask: &Mask, feature_size: (usize, usize)) -> Result<Mask> {
    let (fh, fw) = feature_size;
    if mask.height() % fh != 0 || mask.width() % fw != 0 {
        return Err(Error::Shape(format!(
            "mask {}x{} is not a multiple of features {fh}x{fw}",
            mask.height(),
            mask.width()
        )));
    }
    mask.downsample(mask.height() / fh, mask.width() / fw)
}

/// Prototypes from the support side, then segmentation of the query side.
pub fn direction_on(
    tape: &mut Tape,
    inputs: &DirectionInputs,
    bank: Option<Var>,
    config: &ModelConfig,
    decisions: Option<&DirectionDecisions>,
) -> Result<DirectionVars> {
    let (_, d) = tape.value(inputs.support).dims2()?;
    check_features(d, inputs.feature_size)?;
    let (fh, fw) = inputs.feature_size;
    let fmask = feature_mask(inputs.support_mask, inputs.feature_size)?;

    let fused_support = if config.ablation.no_ran {
        inputs.support
    } else {
        ran::fuse_on(tape, inputs.support, inputs.query)?
    };

    let (fg_prototype, clusters) = if config.ablation.no_fspa {
        (fspa::masked_average_on(tape, fused_support, &fmask)?, None)
    } else {
        let assignment = match decisions.and_then(|d| d.clusters.clone()) {
            Some(a) => a,
            None => {
                let rows = tape.value(fused_support).clone();
                fspa::assign_clusters(&rows, &fmask.threshold(0.0), &config.fspa)?
            }
        };
        let (_, pf) = fspa::foreground_on(tape, fused_support, &fmask, &assignment)?;
        (pf, Some(assignment))
    };

    let window = config.bcma.window();
    let raw_grid = bcma::raw_prototypes_from_rows_on(tape, fused_support, fh, fw, window)?;
    let refined_grid = if config.ablation.no_bcma {
        raw_grid
    } else {
        let bank = bank.ok_or_else(|| Error::InvalidArgument("attention bank missing".into()))?;
        bcma::refine_on(tape, raw_grid, bank, &config.bcma.pattern()?)?
    };
    let pooled = bcma::pooled_mask(&fmask, window)?;
    let bg_rows = bcma::background_rows(&pooled, config.bcma.bg_threshold)?;
    let bg_prototypes = tape.gather_rows(refined_grid, &bg_rows)?;

    let bg_choice = decisions.and_then(|d| d.bg_choice.as_deref());
    let seg = segmenter::segment_on(
        tape,
        inputs.query,
        fg_prototype,
        bg_prototypes,
        inputs.feature_size,
        inputs.image_size,
        &config.seg,
        bg_choice,
    )?;
    let decisions = DirectionDecisions {
        clusters,
        bg_choice: seg.bg_choice.clone(),
    };
    Ok(DirectionVars {
        fused_support,
        fg_prototype,
        raw_grid,
        refined_grid,
        bg_prototypes,
        bg_rows,
        seg,
        decisions,
    })
}

#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    pub forward: DirectionVars,
    pub reverse: Option<DirectionVars>,
    /// Query prediction against the query mask.
    pub seg_loss: Option<Var>,
    /// Support prediction from query prototypes against the support mask.
    pub reg_loss: Option<Var>,
    pub total_loss: Option<Var>,
    pub decisions: EpisodeDecisions,
}

/// Encode both images on the tape and run the episode.
pub fn forward_episode(
    tape: &mut Tape,
    params: &ParamStore,
    config: &ModelConfig,
    episode: &Episode,
    mode: Mode,
    decisions: Option<&EpisodeDecisions>,
) -> Result<EpisodeOutput> {
    let (_, s_rows) = encoder::encode_rows_on(tape, &episode.support, params)?;
    let (q_map, q_rows) = encoder::encode_rows_on(tape, &episode.query, params)?;
    let (s_size, q_size) = (tape.shape(s_rows).to_vec(), tape.shape(q_rows).to_vec());
    if s_size != q_size {
        return Err(Error::Shape(format!(
            "support {}x{} and query {}x{} images differ",
            episode.support.height(),
            episode.support.width(),
            episode.query.height(),
            episode.query.width()
        )));
    }
    let (_, fh, fw) = tape.value(q_map).dims3()?;
    let bank = if config.ablation.no_bcma {
        None
    } else {
        Some(tape.param(params, ATTENTION_PARAM)?)
    };
    run_episode(
        tape,
        EpisodeFeatures {
            support: s_rows,
            query: q_rows,
            feature_size: (fh, fw),
        },
        bank,
        config,
        episode,
        mode,
        decisions,
    )
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeFeatures {
    pub support: Var,
    pub query: Var,
    pub feature_size: (usize, usize),
}

/// Run an episode on features already on the tape.
pub fn run_episode(
    tape: &mut Tape,
    features: EpisodeFeatures,
    bank: Option<Var>,
    config: &ModelConfig,
    episode: &Episode,
    mode: Mode,
    decisions: Option<&EpisodeDecisions>,
) -> Result<EpisodeOutput> {
    let image_size = (episode.query.height(), episode.query.width());
    let forward = direction_on(
        tape,
        &DirectionInputs {
            support: features.support,
            query: features.query,
            feature_size: features.feature_size,
            support_mask: &episode.support_mask,
            image_size,
        },
        bank,
        config,
        decisions.map(|d| &d.forward),
    )?;
    let seg_loss = match &episode.query_mask {
        Some(m) => Some(segmenter::seg_loss_on(tape, forward.seg.probs, m)?),
        None => None,
    };

    let (reverse, reg_loss, total_loss) = match mode {
        Mode::Eval => (None, None, None),
        Mode::Train => {
            let query_mask = episode
                .query_mask
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("training needs a query mask".into()))?;
            let reverse = direction_on(
                tape,
                &DirectionInputs {
                    support: features.query,
                    query: features.support,
                    feature_size: features.feature_size,
                    support_mask: query_mask,
                    image_size: (episode.support.height(), episode.support.width()),
                },
                bank,
                config,
                decisions.and_then(|d| d.reverse.as_ref()),
            )?;
            let reg = segmenter::seg_loss_on(tape, reverse.seg.probs, &episode.support_mask)?;
            let seg = seg_loss.expect("query mask present");
            let total = tape.add(seg, reg)?;
            (Some(reverse), Some(reg), Some(total))
        }
    };
    let decisions = EpisodeDecisions {
        forward: forward.decisions.clone(),
        reverse: reverse.as_ref().map(|r| r.decisions.clone()),
    };
    Ok(EpisodeOutput {
        forward,
        reverse,
        seg_loss,
        reg_loss,
        total_loss,
        decisions,
    })
}

/// Forward-only prediction from images.
pub fn predict(params: &ParamStore, config: &ModelConfig, episode: &Episode) -> Result<(PredictionBundle, Option<f64>)> {
    let mut tape = Tape::new();
    let out = forward_episode(&mut tape, params, config, episode, Mode::Eval, None)?;
    tape.check_finite()?;
    let loss = out.seg_loss.map(|l| tape.value(l).data()[0]);
    Ok((segmenter::bundle_from(&tape, &out.forward.seg), loss))
}

/// Forward-only prediction from precomputed support and query features.
pub fn predict_from_features(
    support: &FeatureMap,
    query: &FeatureMap,
    support_mask: &Mask,
    image_size: (usize, usize),
    bank: &AttentionBank,
    config: &ModelConfig,
) -> Result<PredictionBundle> {
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
    let b = tape.constant(bank.0.clone());
    let vars = direction_on(
        &mut tape,
        &DirectionInputs {
            support: s,
            query: q,
            feature_size: (query.height(), query.width()),
            support_mask,
            image_size,
        },
        Some(b),
        config,
        None,
    )?;
    tape.check_finite()?;
    Ok(segmenter::bundle_from(&tape, &vars.seg))
}

/// The attention bank stored in `params`, or the configured initialization
/// when `params` is absent.
pub fn attention_bank(params: Option<&ParamStore>, config: &ModelConfig, d: usize) -> Result<AttentionBank> {
    match params.and_then(|p| p.get(ATTENTION_PARAM)) {
        Some(a) if a.shape() == [d, d] => Ok(AttentionBank(a.clone())),
        Some(a) => Err(Error::Shape(format!("attention bank {:?} for D={d}", a.shape()))),
        None => bcma::init_attention_bank(&config.bcma.pattern()?, d),
    }
}

/// Scalar value of a loss handle.
pub fn loss_value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

pub fn identity_bank(d: usize) -> AttentionBank {
    AttentionBank(Tensor::identity(d))
}
