use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use protoseg::encoder::load_features;
use protoseg::harness::{self, pgm, phantom, RunConfig};
use protoseg::numerics::ParamStore;
use protoseg::pipeline::{self, Episode};

/// Few-shot prototype segmentation: training, evaluation and inference.
///
/// Any config key can be overridden as `--section.key value`
/// (e.g. `--bcma.beta 0.5`).
#[derive(Parser)]
#[command(name = "protoseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the phantom benchmark.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the held-out fold.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        params: PathBuf,
    },
    /// Segment one query image from one annotated support image.
    Segment(SegmentArgs),
    /// Write phantom slices and their class masks as PGM files.
    Phantoms {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use support features unchanged (no resemblance attention).
    #[arg(long)]
    no_ran: bool,
    /// Plain masked average for the foreground prototype.
    #[arg(long)]
    no_fspa: bool,
    /// Raw grid background prototypes.
    #[arg(long)]
    no_bcma: bool,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    support: PathBuf,
    #[arg(long)]
    support_mask: PathBuf,
    #[arg(long)]
    query: PathBuf,
    /// Query features (DSPF) used instead of the encoder.
    #[arg(long, requires = "support_features")]
    features: Option<PathBuf>,
    /// Support features (DSPF), required with --features.
    #[arg(long, requires = "features")]
    support_features: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint; the configured initialization is used without one.
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

/// Pull `--section.key value` / `--section.key=value` pairs out of argv.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().unwrap_or("").contains('.')) else {
            rest.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().with_context(|| format!("--{flag} needs a value"))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn load_config(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut all = overrides.to_vec();
    for (flag, key) in [
        (args.no_ran, "ablation.no_ran"),
        (args.no_fspa, "ablation.no_fspa"),
        (args.no_bcma, "ablation.no_bcma"),
    ] {
        if flag {
            all.push((key.to_string(), "true".to_string()));
        }
    }
    Ok(RunConfig::load_with_overrides(args.config.as_deref(), &all)?)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args, overrides)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            std::fs::write(cfg.out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            let out = harness::train(&cfg, Some(&cfg.out_dir))?;
            let losses = out.losses();
            println!(
                "trained {} steps; smoothed loss {:.4} -> {:.4}",
                losses.len(),
                harness::train::smoothed_loss(&losses, 100, 100),
                harness::train::smoothed_loss(&losses, losses.len(), 100)
            );
            if let Some(p) = out.checkpoint {
                println!("parameters written to {}", p.display());
            }
        }
        Command::Eval { config, params } => {
            let cfg = load_config(&config, overrides)?;
            let store = ParamStore::load(&params).with_context(|| format!("loading {}", params.display()))?;
            let report = harness::evaluate(&store, &cfg)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            report.write_episodes_csv(&cfg.out_dir.join("eval_episodes.csv"))?;
            report.write_summary_csv(&cfg.out_dir.join("eval_summary.csv"))?;
            print!("{}", report.table());
        }
        Command::Segment(args) => segment(&args, overrides)?,
        Command::Phantoms {
            seed,
            count,
            out,
            height,
            width,
        } => {
            std::fs::create_dir_all(&out)?;
            for id in 0..count {
                let p = phantom::generate_phantom(seed, id, height, width)?;
                pgm::write_image(&out.join(format!("phantom_{id:04}.pgm")), &p.image)?;
                for (class, mask) in &p.masks {
                    pgm::write_mask(&out.join(format!("phantom_{id:04}_class{class}.pgm")), mask)?;
                }
            }
            println!("wrote {count} phantoms to {}", out.display());
        }
    }
    Ok(())
}

fn segment(args: &SegmentArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(&args.config, overrides)?;
    let model = cfg.model();
    let support = pgm::read_image(&args.support)?;
    let support_mask = pgm::read_mask(&args.support_mask)?;
    let query = pgm::read_image(&args.query)?;
    if (support.height(), support.width()) != (support_mask.height(), support_mask.width()) {
        bail!("support image and mask sizes differ");
    }
    let params = args.params.as_deref().map(ParamStore::load).transpose()?;

    let bundle = match (&args.features, &args.support_features) {
        (Some(qf), Some(sf)) => {
            let fq = load_features(qf)?;
            let fs = load_features(sf)?;
            let bank = pipeline::attention_bank(params.as_ref(), &model, fq.channels())?;
            pipeline::predict_from_features(&fs, &fq, &support_mask, (query.height(), query.width()), &bank, &model)?
        }
        _ => {
            let params = match params {
                Some(p) => p,
                None => pipeline::init_params(&model)?,
            };
            let episode = Episode {
                support,
                support_mask,
                query,
                query_mask: None,
            };
            pipeline::predict(&params, &model, &episode)?.0
        }
    };
    write_prediction(&args.out, &bundle.mask)?;
    println!(
        "foreground pixels: {} of {}",
        bundle.mask.count_on(),
        bundle.mask.values().len()
    );
    Ok(())
}

fn write_prediction(path: &Path, mask: &protoseg::features::Mask) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    pgm::write_mask(path, mask)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<protoseg::Error>() {
                Some(protoseg::Error::Features(f)) => f.code(),
                _ => 1,
            };
            ExitCode::from(code as u8)
        }
    }
}
