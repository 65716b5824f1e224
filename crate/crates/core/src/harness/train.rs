//! Episodic SGD training, one episode per step.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::episodes::{
    generate_dataset, kfold_split, labelled_episode, sample_episode, sample_superpixel_episode, superpixel_episode,
    training_pool, EpisodePool, EpisodeSpec, Supervision,
};
use super::phantom::{Phantom, NUM_CLASSES};
use super::slic::{slic, Superpixels};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape};
use crate::pipeline::{self, Episode, Mode, ModelConfig};

/// Episodes whose masks leave no foreground or background are redrawn at
/// most this many times per step.
const MAX_REDRAWS: usize = 20;

/// Phantom slices and their fold split.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub phantoms: Vec<Phantom>,
    pub folds: Vec<Vec<usize>>,
}

impl Benchmark {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let phantoms = generate_dataset(d.seed, d.count, d.height, d.width)?;
        let folds = kfold_split(d.count, d.folds, d.seed)?;
        Ok(Self { phantoms, folds })
    }

    pub fn training_pool(&self, cfg: &RunConfig) -> Result<EpisodePool> {
        training_pool(&self.phantoms, &self.folds, cfg.data.fold, cfg.data.setting, NUM_CLASSES)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub seg: f64,
    pub reg: f64,
    pub class: u8,
    pub support: usize,
    pub query: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub trace: Vec<LossRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.total).collect()
    }
}

/// Mean of the `window` losses ending at 1-based `step`.
pub fn smoothed_loss(losses: &[f64], step: usize, window: usize) -> f64 {
    let end = step.min(losses.len());
    let start = end.saturating_sub(window);
    losses[start..end].iter().sum::<f64>() / (end - start).max(1) as f64
}

struct EpisodeSource<'a> {
    bench: &'a Benchmark,
    pool: EpisodePool,
    supervision: Supervision,
    superpixels: HashMap<usize, Superpixels>,
}

impl<'a> EpisodeSource<'a> {
    fn new(bench: &'a Benchmark, cfg: &RunConfig) -> Result<Self> {
        let pool = bench.training_pool(cfg)?;
        let superpixels = match cfg.data.supervision {
            Supervision::Labels => HashMap::new(),
            Supervision::Superpixels => pool
                .slices
                .iter()
                .map(|&i| (i, slic(&bench.phantoms[i].image, &cfg.data.slic)))
                .collect(),
        };
        Ok(Self {
            bench,
            pool,
            supervision: cfg.data.supervision,
            superpixels,
        })
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(EpisodeSpec, Episode)> {
        let phantoms = &self.bench.phantoms;
        match self.supervision {
            Supervision::Labels => {
                let spec = sample_episode(&self.pool, phantoms, rng)?;
                Ok((spec, labelled_episode(&spec, phantoms)?))
            }
            Supervision::Superpixels => {
                let spec = sample_superpixel_episode(&self.pool, rng)?;
                let ep = superpixel_episode(&spec, phantoms, &self.superpixels[&spec.support], rng);
                Ok((spec, ep))
            }
        }
    }
}

fn write_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let bench = Benchmark::from_config(cfg)?;
    let params = pipeline::init_params(&cfg.model())?;
    train_from(cfg, &bench, params, out_dir)
}

/// Train `params` on `bench`. With `out_dir`, writes `loss.csv`, periodic
/// `checkpoint_<step>.bin` files and the final `params.bin`.
pub fn train_from(
    cfg: &RunConfig,
    bench: &Benchmark,
    mut params: ParamStore,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let model: ModelConfig = cfg.model();
    let source = EpisodeSource::new(bench, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut trace = Vec::with_capacity(cfg.train.steps);
    let mut last_checkpoint = None;

    for step in 1..=cfg.train.steps {
        let mut redraws = 0;
        let (spec, tape, out) = loop {
            let (spec, episode) = source.draw(&mut rng)?;
            let mut tape = Tape::new();
            match pipeline::forward_episode(&mut tape, &params, &model, &episode, Mode::Train, None) {
                Ok(out) => break (spec, tape, out),
                Err(e @ (Error::NoForeground | Error::NoBackground)) if redraws < MAX_REDRAWS => {
                    log::debug!("step {step}: redrawing episode ({e})");
                    redraws += 1;
                }
                Err(e) => return Err(e),
            }
        };
        let loss = out.total_loss.expect("training mode");
        let total = pipeline::loss_value(&tape, loss);
        if !total.is_finite() || tape.check_finite().is_err() {
            return Err(Error::NonFiniteLoss {
                step,
                last_checkpoint,
            });
        }
        let grads = tape.backward(loss, &params)?;
        params.sgd_step(&grads, cfg.train.learning_rate)?;
        trace.push(LossRecord {
            step,
            total,
            seg: pipeline::loss_value(&tape, out.seg_loss.expect("training mode")),
            reg: pipeline::loss_value(&tape, out.reg_loss.expect("training mode")),
            class: spec.class,
            support: spec.support,
            query: spec.query,
        });
        if step % 100 == 0 {
            log::info!("step {step}: loss {:.4}", smoothed_loss(&trace.iter().map(|r| r.total).collect::<Vec<_>>(), step, 100));
        }
        if let Some(dir) = out_dir {
            if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint_{step:06}.bin"));
                params.save(&path)?;
                last_checkpoint = Some(path);
            }
        }
    }

    let checkpoint = match out_dir {
        Some(dir) => {
            write_trace(&dir.join("loss.csv"), &trace)?;
            let path = dir.join("params.bin");
            params.save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        params,
        trace,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_window() {
        let l = [4.0, 2.0, 3.0, 1.0];
        assert_eq!(smoothed_loss(&l, 4, 2), 2.0);
        assert_eq!(smoothed_loss(&l, 1, 100), 4.0);
        assert_eq!(smoothed_loss(&l, 4, 100), 2.5);
    }
}
