use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use adapterlab_core::adapters::ArchFamily;
use adapterlab_core::backbones::BackboneKind;
use adapterlab_core::corpus::{generate_corpus, read_clip_dir, write_corpus, CorpusConfig, Genre};
use adapterlab_core::frechet::{fad_features, ClipFeatures, EXTRACTOR_ID};
use adapterlab_core::sweep::{
    load_grid, placement_study, pretrain_backbones, run_sweep, LabContext, RunOptions, SweepGrid, SweepProfile,
    AR_CHECKPOINT, UNET_CHECKPOINT,
};

const SEED_ENV: &str = "ADAPTERLAB_SEED";

#[derive(Parser)]
#[command(name = "adapterlab", version, about = "Adapter fine-tuning lab on toy generative backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-genre synthetic corpus.
    GenCorpus {
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = CorpusConfig::default().groups_per_genre)]
        groups_per_genre: usize,
        #[arg(long, default_value_t = CorpusConfig::default().clips_per_group)]
        clips_per_group: usize,
    },
    /// Pretrain and freeze both backbones, writing their checkpoints.
    PretrainBackbones {
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Pretraining steps per backbone.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run an experiment grid.
    Sweep {
        /// TOML grid file; omitted keys take the defaults.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Skip cells already present in the output CSV.
        #[arg(long)]
        resume: bool,
        /// Comma-separated seed list replacing the grid's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Compare placement plans on one backbone at the 200k budget.
    PlacementStudy {
        #[arg(long)]
        backbone: BackboneKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "conv")]
        arch: ArchFamily,
        /// Grid file supplying the profile (corpus, training, scoring).
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        resume: bool,
    },
    /// Print the FAD between two clip directories.
    Fad {
        reference: PathBuf,
        candidate: PathBuf,
        /// Do not read or write feature sidecars.
        #[arg(long)]
        no_cache: bool,
    },
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not a seed"))?)),
        Err(_) => Ok(None),
    }
}

fn grid_and_profile(path: Option<&Path>) -> Result<(SweepGrid, SweepProfile)> {
    let seed = env_seed()?;
    match path {
        Some(p) => Ok(load_grid(p, seed).with_context(|| format!("reading grid {}", p.display()))?),
        None => Ok((
            SweepGrid {
                seeds: vec![seed.unwrap_or(0)],
                ..SweepGrid::default()
            },
            SweepProfile::with_seed(seed.unwrap_or(0)),
        )),
    }
}

fn features(dir: &Path, cache: bool) -> Result<ClipFeatures> {
    let clips = read_clip_dir(dir).with_context(|| format!("reading clips from {}", dir.display()))?;
    if cache {
        let sidecar = dir.join(format!("features.{EXTRACTOR_ID}.alab"));
        Ok(ClipFeatures::cached(&sidecar, &clips)?)
    } else {
        Ok(ClipFeatures::extract(&clips)?)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenCorpus {
            seed,
            out,
            groups_per_genre,
            clips_per_group,
        } => {
            let corpus = generate_corpus(&CorpusConfig {
                seed,
                groups_per_genre,
                clips_per_group,
            })?;
            write_corpus(&out, &corpus)?;
            println!("wrote {} clips to {}", corpus.clips.len(), out.display());
        }
        Command::PretrainBackbones { seed, out, steps } => {
            let mut profile = SweepProfile::with_seed(seed);
            if let Some(s) = steps {
                profile.pretrain.steps = s;
            }
            let (ar, unet) = pretrain_backbones(&profile)?;
            std::fs::create_dir_all(&out)?;
            ar.save(&out.join(AR_CHECKPOINT))?;
            unet.save(&out.join(UNET_CHECKPOINT))?;
            println!("wrote backbones to {}", out.display());
        }
        Command::Sweep {
            grid,
            out,
            workers,
            resume,
            seeds,
        } => {
            let (mut grid, profile) = grid_and_profile(grid.as_deref())?;
            if let Some(s) = seeds {
                grid.seeds = s;
            }
            let cells = grid.cells().len();
            log::info!("{cells} cells, {workers} workers");
            let ctx = LabContext::prepare(profile)?;
            let opts = RunOptions {
                workers,
                resume,
                report_dir: None,
            };
            let summary = run_sweep(&ctx, &grid, &out, &opts)?;
            println!(
                "{} rows ({} run, {} resumed), {} failed, {:.1} s; results in {}",
                summary.records.len(),
                summary.executed,
                summary.skipped,
                summary.failures(),
                summary.wall_seconds,
                out.display()
            );
            if summary.failures() > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::PlacementStudy {
            backbone,
            out,
            arch,
            grid,
            workers,
            resume,
        } => {
            let (grid, profile) = grid_and_profile(grid.as_deref())?;
            let seed = grid.seeds.first().copied().unwrap_or(0);
            let genres = if grid.genres.is_empty() { Genre::ALL.to_vec() } else { grid.genres };
            let ctx = LabContext::prepare(profile)?;
            let opts = RunOptions {
                workers,
                resume,
                report_dir: None,
            };
            let summary = placement_study(&ctx, backbone, arch, &genres, seed, &out, &opts)?;
            for r in &summary.records {
                let plan = r.key.placement.map_or("none".into(), |p| p.to_string());
                println!(
                    "{:<28} {:<7} params {:>7}  FAD {:>10.4}  FD {:>10.4}  [{}]",
                    plan,
                    r.key.genre.name(),
                    r.realized_params,
                    r.fad,
                    r.fd,
                    r.points
                );
            }
            if summary.failures() > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Fad {
            reference,
            candidate,
            no_cache,
        } => {
            let r = features(&reference, !no_cache)?;
            let c = features(&candidate, !no_cache)?;
            println!("{}", fad_features(&r, &c)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
