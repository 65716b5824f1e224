//! Foreground semantic prototype attention.
//!
//! Foreground pixel features are clustered into `N_s` prototypes. Every
//! pixel's cosine similarity to each prototype is softmaxed over the
//! prototypes, and the pixel is replaced by the resulting mixture of
//! prototypes. Masked average pooling of the fused map gives the single
//! foreground prototype.
//!
//! Slicing the prototypes channel by channel and convolving each slice with
//! the probability maps is the same computation as the per-pixel mixture, so
//! the mixture is computed directly as one matrix product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, Mask, Prototype};
use crate::kmeans::{kmeans, KMeansParams};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FspaConfig {
    pub num_clusters: usize,
    pub kmeans_max_iters: usize,
    pub seed: u64,
}

impl Default for FspaConfig {
    fn default() -> Self {
        Self {
            num_clusters: 5,
            kmeans_max_iters: 50,
            seed: 11,
        }
    }
}

pub const KMEANS_TOLERANCE: f64 = 1e-6;

/// Cluster membership of foreground pixels; frozen for differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Flat pixel indices of the clustered foreground pixels.
    pub pixels: Vec<usize>,
    /// Cluster of each entry of `pixels`.
    pub cluster: Vec<usize>,
    pub num_clusters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPrototypes {
    /// N_s×D, one prototype per row.
    pub prototypes: Tensor,
    pub assignment: ClusterAssignment,
    pub requested: usize,
    /// Set when fewer foreground pixels than requested clusters forced a
    /// smaller N_s.
    pub reduced: bool,
}

impl ClusterPrototypes {
    pub fn len(&self) -> usize {
        self.assignment.num_clusters
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Prototype {
        Prototype(self.prototypes.row(i).to_vec())
    }
}

/// Cluster the rows of `features` (N×D) at the nonzero entries of
/// `feature_mask` (N values at feature resolution).
pub fn assign_clusters(features: &Tensor, feature_mask: &Mask, config: &FspaConfig) -> Result<ClusterAssignment> {
    let (n, _) = features.dims2()?;
    if feature_mask.values().len() != n {
        return Err(Error::Shape(format!(
            "mask has {} pixels, features {n}",
            feature_mask.values().len()
        )));
    }
    if config.num_clusters == 0 {
        return Err(Error::InvalidArgument("num_clusters must be at least 1".into()));
    }
    let pixels = feature_mask.on_indices();
    if pixels.is_empty() {
        return Err(Error::NoForeground);
    }
    let k = config.num_clusters.min(pixels.len());
    if k < config.num_clusters {
        log::debug!("only {} foreground pixels; using {k} clusters", pixels.len());
    }
    let points: Vec<Vec<f64>> = pixels.iter().map(|&i| features.row(i).to_vec()).collect();
    let result = kmeans(
        &points,
        &KMeansParams {
            k,
            max_iters: config.kmeans_max_iters,
            tolerance: KMEANS_TOLERANCE,
            seed: config.seed,
        },
    )?;
    Ok(ClusterAssignment {
        pixels,
        cluster: result.assignment,
        num_clusters: k,
    })
}

/// N_s×D cluster means of `rows` under a frozen assignment.
pub fn cluster_means_on(tape: &mut Tape, rows: Var, assignment: &ClusterAssignment) -> Result<Var> {
    let (n, _) = tape.value(rows).dims2()?;
    let k = assignment.num_clusters;
    let mut counts = vec![0usize; k];
    assignment.cluster.iter().for_each(|&c| counts[c] += 1);
    if counts.contains(&0) {
        return Err(Error::InvalidArgument("cluster assignment has an empty cluster".into()));
    }
    let mut avg = vec![0.0; k * n];
    for (&p, &c) in assignment.pixels.iter().zip(&assignment.cluster) {
        avg[c * n + p] = 1.0 / counts[c] as f64;
    }
    let avg = tape.constant(Tensor::new(vec![k, n], avg)?);
    tape.matmul(avg, rows)
}

/// N×N_s cosine similarity of every pixel row with every prototype row.
pub fn similarity_maps_on(tape: &mut Tape, rows: Var, prototypes: Var) -> Result<Var> {
    let f = tape.row_normalize(rows)?;
    let p = tape.row_normalize(prototypes)?;
    let pt = tape.transpose(p)?;
    tape.matmul(f, pt)
}

/// Softmax over prototypes per pixel, then the prototype mixture (N×D).
pub fn fuse_channelwise_on(tape: &mut Tape, similarity: Var, prototypes: Var) -> Result<Var> {
    let (_, ns) = tape.value(similarity).dims2()?;
    let (np, _) = tape.value(prototypes).dims2()?;
    if ns != np {
        return Err(Error::Shape(format!("{ns} similarity maps for {np} prototypes")));
    }
    let weights = tape.softmax_rows(similarity)?;
    tape.matmul(weights, prototypes)
}

/// Weighted mean of `rows` with the (possibly fractional) mask as weights; 1×D.
pub fn masked_average_on(tape: &mut Tape, rows: Var, feature_mask: &Mask) -> Result<Var> {
    let (n, _) = tape.value(rows).dims2()?;
    if feature_mask.values().len() != n {
        return Err(Error::Shape(format!(
            "mask has {} pixels, features {n}",
            feature_mask.values().len()
        )));
    }
    let total = feature_mask.total();
    if total <= 0.0 {
        return Err(Error::NoForeground);
    }
    let w = feature_mask.values().iter().map(|m| m / total).collect();
    let w = tape.constant(Tensor::new(vec![1, n], w)?);
    tape.matmul(w, rows)
}

/// Full FSPA on pixel rows with a frozen assignment: returns the fused
/// N×D map and the 1×D foreground prototype.
pub fn foreground_on(
    tape: &mut Tape,
    rows: Var,
    feature_mask: &Mask,
    assignment: &ClusterAssignment,
) -> Result<(Var, Var)> {
    let protos = cluster_means_on(tape, rows, assignment)?;
    let sim = similarity_maps_on(tape, rows, protos)?;
    let fused = fuse_channelwise_on(tape, sim, protos)?;
    let pf = masked_average_on(tape, fused, feature_mask)?;
    Ok((fused, pf))
}

// ---- value-level API --------------------------------------------------------

pub fn cluster_prototypes(features: &FeatureMap, feature_mask: &Mask, config: &FspaConfig) -> Result<ClusterPrototypes> {
    check_mask(features, feature_mask)?;
    let rows_t = features.pixel_rows();
    let assignment = assign_clusters(&rows_t, feature_mask, config)?;
    let mut tape = Tape::new();
    let rows = tape.constant(rows_t);
    let p = cluster_means_on(&mut tape, rows, &assignment)?;
    Ok(ClusterPrototypes {
        prototypes: tape.value(p).clone(),
        reduced: assignment.num_clusters < config.num_clusters,
        requested: config.num_clusters,
        assignment,
    })
}

/// (H·W)×N_s similarity stack.
pub fn similarity_maps(features: &FeatureMap, prototypes: &ClusterPrototypes) -> Result<Tensor> {
    let (_, d) = prototypes.prototypes.dims2()?;
    if d != features.channels() {
        return Err(Error::Shape(format!("prototypes have {d} channels, features {}", features.channels())));
    }
    let mut tape = Tape::new();
    let rows = tape.constant(features.pixel_rows());
    let p = tape.constant(prototypes.prototypes.clone());
    let s = similarity_maps_on(&mut tape, rows, p)?;
    Ok(tape.value(s).clone())
}

/// Fused map F̄ from a similarity stack and the prototypes it was built from.
pub fn fuse_channelwise(similarity: &Tensor, prototypes: &Tensor, height: usize, width: usize) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let s = tape.constant(similarity.clone());
    let p = tape.constant(prototypes.clone());
    let f = fuse_channelwise_on(&mut tape, s, p)?;
    FeatureMap::from_pixel_rows(tape.value(f), height, width)
}

pub fn foreground_prototype(fused: &FeatureMap, feature_mask: &Mask) -> Result<Prototype> {
    check_mask(fused, feature_mask)?;
    let mut tape = Tape::new();
    let rows = tape.constant(fused.pixel_rows());
    let p = masked_average_on(&mut tape, rows, feature_mask)?;
    Ok(Prototype(tape.value(p).data().to_vec()))
}

fn check_mask(features: &FeatureMap, mask: &Mask) -> Result<()> {
    if mask.height() != features.height() || mask.width() != features.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} for features {}x{}",
            mask.height(),
            mask.width(),
            features.height(),
            features.width()
        )));
    }
    Ok(())
}
