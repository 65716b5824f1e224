//! Dice evaluation on the held-out fold.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::RunConfig;
use super::episodes::{evaluation_specs, labelled_episode};
use super::phantom::NUM_CLASSES;
use super::train::Benchmark;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::pipeline;
use crate::segmenter::dice;

pub const THREADS_ENV: &str = "PROTOSEG_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub fold: usize,
    pub class: u8,
    pub support: usize,
    pub query: usize,
    pub dice: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummary {
    pub fold: usize,
    pub class: u8,
    pub episodes: usize,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeResult>,
    pub classes: Vec<ClassSummary>,
    /// Mean over the per-class means.
    pub mean_dice: f64,
}

impl EvalReport {
    pub fn write_episodes_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.episodes)
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.classes)
    }

    pub fn table(&self) -> String {
        let mut s = String::from("fold  class  episodes   dice\n");
        for c in &self.classes {
            let _ = writeln!(s, "{:>4}  {:>5}  {:>8}  {:>6.2}", c.fold, c.class, c.episodes, c.mean_dice);
        }
        let _ = writeln!(s, "mean                     {:>6.2}", self.mean_dice);
        s
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Worker count from `PROTOSEG_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        Err(_) => Ok(None),
    }
}

pub fn evaluate(params: &ParamStore, cfg: &RunConfig) -> Result<EvalReport> {
    evaluate_on(params, cfg, &Benchmark::from_config(cfg)?)
}

pub fn evaluate_on(params: &ParamStore, cfg: &RunConfig, bench: &Benchmark) -> Result<EvalReport> {
    let specs = evaluation_specs(
        &bench.phantoms,
        &bench.folds,
        cfg.data.fold,
        cfg.data.setting,
        NUM_CLASSES,
        cfg.eval.seed,
    )?;
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no evaluation episodes in the test fold".into()));
    }
    let model = cfg.model();
    let run = |(id, spec): (usize, &super::episodes::EpisodeSpec)| -> Result<EpisodeResult> {
        let episode = labelled_episode(spec, &bench.phantoms)?;
        let (bundle, loss) = pipeline::predict(params, &model, &episode)?;
        let gt = episode.query_mask.as_ref().expect("labelled episode");
        Ok(EpisodeResult {
            episode: id,
            fold: spec.fold,
            class: spec.class,
            support: spec.support,
            query: spec.query,
            dice: dice(&bundle.mask, gt)?,
            loss: loss.expect("query mask present"),
        })
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let episodes: Vec<EpisodeResult> =
        pool.install(|| specs.par_iter().enumerate().map(run).collect::<Result<_>>())?;

    let mut classes: Vec<ClassSummary> = Vec::new();
    for r in &episodes {
        match classes.iter_mut().find(|c| c.fold == r.fold && c.class == r.class) {
            Some(c) => {
                c.mean_dice += r.dice;
                c.episodes += 1;
            }
            None => classes.push(ClassSummary {
                fold: r.fold,
                class: r.class,
                episodes: 1,
                mean_dice: r.dice,
            }),
        }
    }
    classes.iter_mut().for_each(|c| c.mean_dice /= c.episodes as f64);
    classes.sort_by_key(|c| (c.fold, c.class));
    let mean_dice = classes.iter().map(|c| c.mean_dice).sum::<f64>() / classes.len() as f64;
    Ok(EvalReport {
        episodes,
        classes,
        mean_dice,
    })
}
