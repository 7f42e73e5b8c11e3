//! Experiment grid runner: one trained-and-scored adapter configuration per
//! cell, a worker pool over cells, append-only CSV results, plots and a
//! summary table.

mod record;
mod report;
#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::Deserialize;

use crate::adapters::{ArchFamily, DEFAULT_TOLERANCE};
use crate::backbones::{
    ar_generate, build_ar_backbone_with, build_unet_backbone_with, diffusion_sample, latent_to_clip, AdapterMap,
    ArBackbone, ArConfig, ArExample, ArTask, Backbone, BackboneKind, DiffusionExample, PretrainConfig, UNetBackbone,
    UNetConfig, UNetTask,
};
use crate::corpus::codec::TOKENS_PER_CLIP;
use crate::corpus::{detokenize, embed_prompt, generate_corpus, read_corpus, Corpus, CorpusConfig, Genre};
use crate::error::{LabError, Result};
use crate::frechet::{fad_features, fd_features, ClipFeatures};
use crate::placement::{size_plan, PlacementPlan};
use crate::rng::RngState;
use crate::train::{make_splits, train_adapters, SplitManifest, TrainConfig, TrainReport};

pub use record::{
    format_sig6, read_results, CellKey, CellStatus, ExperimentRecord, ResultWriter, COLUMNS, TIMING_COLUMNS,
};
pub use report::{plot_svg, summary_table, write_reports};

pub const DEFAULT_BUDGETS: [usize; 5] = [20_000, 80_000, 200_000, 400_000, 700_000];
/// Budget used by the placement study.
pub const PLACEMENT_BUDGET: usize = 200_000;
pub const AR_CHECKPOINT: &str = "ar_backbone.alab";
pub const UNET_CHECKPOINT: &str = "unet_backbone.alab";
pub const RESULTS_FILE: &str = "results.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub backbones: Vec<BackboneKind>,
    pub architectures: Vec<ArchFamily>,
    pub budgets: Vec<usize>,
    pub placements: Vec<PlacementPlan>,
    pub genres: Vec<Genre>,
    pub seeds: Vec<u64>,
    /// Adds one adapter-free row per backbone, genre and seed.
    pub baseline: bool,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            backbones: BackboneKind::ALL.to_vec(),
            architectures: ArchFamily::ALL.to_vec(),
            budgets: DEFAULT_BUDGETS.to_vec(),
            placements: vec![PlacementPlan::ArLate, PlacementPlan::UNetPerBlock],
            genres: Genre::ALL.to_vec(),
            seeds: vec![0],
            baseline: true,
        }
    }
}

impl SweepGrid {
    pub fn empty() -> Self {
        SweepGrid {
            backbones: Vec::new(),
            architectures: Vec::new(),
            budgets: Vec::new(),
            placements: Vec::new(),
            genres: Vec::new(),
            seeds: Vec::new(),
            baseline: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budgets.contains(&0) {
            return Err(LabError::Config("budget 0 is the baseline row; set baseline = true instead".into()));
        }
        for p in &self.placements {
            if !self.backbones.contains(&p.backbone()) {
                return Err(LabError::Config(format!("placement {p} has no {} backbone in the grid", p.backbone())));
            }
        }
        Ok(())
    }

    /// Every cell in run order: per backbone, its baseline rows, then
    /// architecture × placement × budget × genre × seed. Linear adapters
    /// are skipped on the UNet, and placements only pair with their own
    /// backbone.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &backbone in &self.backbones {
            if self.baseline {
                for &genre in &self.genres {
                    for &seed in &self.seeds {
                        out.push(CellKey::baseline(backbone, genre, seed));
                    }
                }
            }
            for &arch in &self.architectures {
                if arch.kind_for(backbone.is_2d()).is_err() {
                    continue;
                }
                for &plan in self.placements.iter().filter(|p| p.backbone() == backbone) {
                    for &budget in &self.budgets {
                        for &genre in &self.genres {
                            for &seed in &self.seeds {
                                out.push(CellKey {
                                    backbone,
                                    arch: Some(arch),
                                    budget,
                                    placement: Some(plan),
                                    genre,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Everything besides the grid that determines a sweep's numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepProfile {
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub backbone_seed: u64,
    pub diffusion_steps: usize,
    /// Clips generated per cell for scoring.
    pub generated_clips: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub tolerance: f64,
    /// Load the corpus from here instead of generating it.
    pub corpus_dir: Option<PathBuf>,
    /// Load frozen backbones from here instead of pretraining them.
    pub backbone_dir: Option<PathBuf>,
}

impl Default for SweepProfile {
    fn default() -> Self {
        SweepProfile {
            corpus: CorpusConfig::default(),
            pretrain: PretrainConfig::default(),
            backbone_seed: 0,
            diffusion_steps: UNetConfig::default().num_diffusion_steps,
            generated_clips: 100,
            max_epochs: 40,
            patience: 5,
            batch_size: 8,
            tolerance: DEFAULT_TOLERANCE,
            corpus_dir: None,
            backbone_dir: None,
        }
    }
}

impl SweepProfile {
    /// Every default seed replaced by `seed`.
    pub fn with_seed(seed: u64) -> Self {
        let mut p = SweepProfile::default();
        p.corpus.seed = seed;
        p.backbone_seed = seed;
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.generated_clips < 2 {
            return Err(LabError::Config("need at least 2 generated clips per cell to fit a Gaussian".into()));
        }
        if self.diffusion_steps == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(LabError::Config(
                "diffusion_steps, batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(LabError::Config("tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, backbone: BackboneKind, seed: u64) -> TrainConfig {
        let base = match backbone {
            BackboneKind::Ar => TrainConfig::ar_default(),
            BackboneKind::UNet => TrainConfig::diffusion_default(),
        };
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            ..base
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    backbones: Option<Vec<String>>,
    architectures: Option<Vec<String>>,
    budgets: Option<Vec<usize>>,
    placements: Option<Vec<String>>,
    genres: Option<Vec<String>>,
    seeds: Option<Vec<u64>>,
    baseline: Option<bool>,
    #[serde(default)]
    profile: ProfileFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    corpus_seed: Option<u64>,
    groups_per_genre: Option<usize>,
    clips_per_group: Option<usize>,
    backbone_seed: Option<u64>,
    pretrain_steps: Option<usize>,
    diffusion_steps: Option<usize>,
    generated_clips: Option<usize>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    batch_size: Option<usize>,
    tolerance: Option<f64>,
    corpus_dir: Option<PathBuf>,
    backbone_dir: Option<PathBuf>,
}

fn parse_all<T: std::str::FromStr<Err = LabError>>(v: Option<Vec<String>>, default: Vec<T>) -> Result<Vec<T>> {
    match v {
        None => Ok(default),
        Some(v) => v.iter().map(|s| s.parse()).collect(),
    }
}

/// Parses a TOML grid file. Omitted keys take the defaults; `default_seed`
/// (from the environment, say) replaces the default seeds but never an
/// explicit value. Relative paths resolve against `base_dir`.
pub fn parse_grid(text: &str, default_seed: Option<u64>, base_dir: &Path) -> Result<(SweepGrid, SweepProfile)> {
    let file: GridFile = toml::from_str(text).map_err(|e| LabError::Config(format!("grid file: {e}")))?;
    let d = SweepGrid::default();
    let seed = default_seed.unwrap_or(0);
    let backbones: Vec<BackboneKind> = parse_all(file.backbones, d.backbones)?;
    // default placements follow the chosen backbones; explicit ones must fit
    let default_placements = d.placements.into_iter().filter(|p| backbones.contains(&p.backbone())).collect();
    let grid = SweepGrid {
        backbones,
        architectures: parse_all(file.architectures, d.architectures)?,
        budgets: file.budgets.unwrap_or(d.budgets),
        placements: parse_all(file.placements, default_placements)?,
        genres: parse_all(file.genres, d.genres)?,
        seeds: file.seeds.unwrap_or(vec![seed]),
        baseline: file.baseline.unwrap_or(d.baseline),
    };
    grid.validate()?;
    let p = file.profile;
    let mut profile = SweepProfile::with_seed(seed);
    profile.corpus.seed = p.corpus_seed.unwrap_or(profile.corpus.seed);
    profile.corpus.groups_per_genre = p.groups_per_genre.unwrap_or(profile.corpus.groups_per_genre);
    profile.corpus.clips_per_group = p.clips_per_group.unwrap_or(profile.corpus.clips_per_group);
    profile.backbone_seed = p.backbone_seed.unwrap_or(profile.backbone_seed);
    profile.pretrain.steps = p.pretrain_steps.unwrap_or(profile.pretrain.steps);
    profile.diffusion_steps = p.diffusion_steps.unwrap_or(profile.diffusion_steps);
    profile.generated_clips = p.generated_clips.unwrap_or(profile.generated_clips);
    profile.max_epochs = p.max_epochs.unwrap_or(profile.max_epochs);
    profile.patience = p.patience.unwrap_or(profile.patience);
    profile.batch_size = p.batch_size.unwrap_or(profile.batch_size);
    profile.tolerance = p.tolerance.unwrap_or(profile.tolerance);
    profile.corpus_dir = p.corpus_dir.map(|d| base_dir.join(d));
    profile.backbone_dir = p.backbone_dir.map(|d| base_dir.join(d));
    profile.validate()?;
    Ok((grid, profile))
}

pub fn load_grid(path: &Path, default_seed: Option<u64>) -> Result<(SweepGrid, SweepProfile)> {
    let text = fs::read_to_string(path)?;
    parse_grid(&text, default_seed, path.parent().unwrap_or(Path::new(".")))
}

/// Train/val/test membership of one genre, as corpus indices.
#[derive(Debug, Clone)]
pub struct GenreSplit {
    pub manifest: SplitManifest,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Features of the test clips: the reference distribution.
    pub reference: ClipFeatures,
}

/// Shared read-only state of a sweep: corpus, splits and frozen backbones.
pub struct LabContext {
    pub profile: SweepProfile,
    pub corpus: Corpus,
    pub ar: ArBackbone,
    pub unet: UNetBackbone,
    splits: Vec<(Genre, GenreSplit)>,
    checksums: [u64; 2],
}

/// Builds both frozen backbones from scratch.
pub fn pretrain_backbones(profile: &SweepProfile) -> Result<(ArBackbone, UNetBackbone)> {
    let ar = build_ar_backbone_with(ArConfig::default(), &profile.pretrain, profile.backbone_seed)?;
    let unet_config = UNetConfig {
        num_diffusion_steps: profile.diffusion_steps,
        ..UNetConfig::default()
    };
    let unet = build_unet_backbone_with(unet_config, &profile.pretrain, profile.backbone_seed)?;
    Ok((ar, unet))
}

impl LabContext {
    /// Loads or generates the corpus and backbones named by the profile.
    pub fn prepare(profile: SweepProfile) -> Result<Self> {
        profile.validate()?;
        let corpus = match &profile.corpus_dir {
            Some(dir) => read_corpus(dir)?,
            None => generate_corpus(&profile.corpus)?,
        };
        let (ar, unet) = match &profile.backbone_dir {
            Some(dir) => (ArBackbone::load(&dir.join(AR_CHECKPOINT))?, UNetBackbone::load(&dir.join(UNET_CHECKPOINT))?),
            None => pretrain_backbones(&profile)?,
        };
        Self::from_parts(profile, corpus, ar, unet)
    }

    pub fn from_parts(profile: SweepProfile, corpus: Corpus, ar: ArBackbone, unet: UNetBackbone) -> Result<Self> {
        let mut splits = Vec::new();
        let index: HashMap<&str, usize> = corpus.clips.iter().enumerate().map(|(i, c)| (c.id.as_str(), i)).collect();
        for genre in Genre::ALL {
            let members = corpus.genre_indices(genre);
            if members.is_empty() {
                continue;
            }
            let items: Vec<(&str, u32)> = members
                .iter()
                .map(|&i| (corpus.clips[i].id.as_str(), corpus.clips[i].source_group))
                .collect();
            let manifest = make_splits(&items, corpus.config.seed)?;
            let to_idx = |ids: &[String]| ids.iter().map(|id| index[id.as_str()]).collect::<Vec<_>>();
            let (train, val, test) = (to_idx(&manifest.train_ids), to_idx(&manifest.val_ids), to_idx(&manifest.test_ids));
            let waves: Vec<&[f64]> = test.iter().map(|&i| corpus.clips[i].waveform.as_slice()).collect();
            let reference = ClipFeatures::extract(&waves)?;
            splits.push((
                genre,
                GenreSplit {
                    manifest,
                    train,
                    val,
                    test,
                    reference,
                },
            ));
        }
        let checksums = [ar.checksum(), unet.checksum()];
        Ok(LabContext {
            profile,
            corpus,
            ar,
            unet,
            splits,
            checksums,
        })
    }

    pub fn split(&self, genre: Genre) -> Result<&GenreSplit> {
        self.splits
            .iter()
            .find(|(g, _)| *g == genre)
            .map(|(_, s)| s)
            .ok_or_else(|| LabError::Data(format!("corpus has no {} clips", genre.name())))
    }

    pub fn backbone(&self, kind: BackboneKind) -> &dyn Backbone {
        match kind {
            BackboneKind::Ar => &self.ar,
            BackboneKind::UNet => &self.unet,
        }
    }

    /// Errors if either frozen backbone changed since the context was built.
    pub fn verify_backbones(&self) -> Result<()> {
        if [self.ar.checksum(), self.unet.checksum()] != self.checksums {
            return Err(LabError::Contract("a frozen backbone changed during the sweep".into()));
        }
        Ok(())
    }

    fn prompt_text(&self, index: usize) -> &str {
        &self.corpus.prompt_for(index).text
    }

    fn ar_examples(&self, idx: &[usize]) -> Vec<ArExample> {
        idx.iter()
            .map(|&i| ArExample::from_clip(&self.corpus.clips[i].waveform, self.prompt_text(i)))
            .collect()
    }

    fn diffusion_examples(&self, idx: &[usize]) -> Result<Vec<DiffusionExample>> {
        idx.iter()
            .map(|&i| DiffusionExample::from_clip(&self.corpus.clips[i].waveform, self.prompt_text(i)))
            .collect()
    }

    /// Trains `adapters` on the genre's train split, validating on its val split.
    pub fn train(&self, key: &CellKey, adapters: &mut AdapterMap) -> Result<TrainReport> {
        let split = self.split(key.genre)?;
        let cfg = self.profile.train_config(key.backbone, key.seed);
        match key.backbone {
            BackboneKind::Ar => {
                let (train, val) = (self.ar_examples(&split.train), self.ar_examples(&split.val));
                let task = ArTask::new(&self.ar, adapters, &train, &val)?;
                train_adapters(&task, adapters, &cfg)
            }
            BackboneKind::UNet => {
                let task = UNetTask::new(
                    &self.unet,
                    adapters,
                    self.diffusion_examples(&split.train)?,
                    self.diffusion_examples(&split.val)?,
                )?;
                train_adapters(&task, adapters, &cfg)
            }
        }
    }

    /// Generated waveforms, one per test prompt in turn. Clip `i` draws from
    /// its own stream, so adapters are compared on identical noise.
    pub fn generate(&self, key: &CellKey, adapters: &AdapterMap, count: usize) -> Result<Vec<Vec<f64>>> {
        let split = self.split(key.genre)?;
        if split.test.is_empty() {
            return Err(LabError::Data("no test prompts to condition on".into()));
        }
        let root = RngState::new(key.seed).derive_str("generate");
        (0..count)
            .map(|i| {
                let cond = embed_prompt(self.prompt_text(split.test[i % split.test.len()]));
                let mut rng = root.derive(i as u64);
                match key.backbone {
                    BackboneKind::Ar => Ok(detokenize(&ar_generate(&self.ar, &cond, TOKENS_PER_CLIP, adapters, &mut rng)?)),
                    BackboneKind::UNet => latent_to_clip(&diffusion_sample(&self.unet, &cond, adapters, &mut rng)?),
                }
            })
            .collect()
    }
}

/// Result of one cell plus its training history, if it trained.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub record: ExperimentRecord,
    pub report: Option<TrainReport>,
}

fn try_run_cell(ctx: &LabContext, key: &CellKey) -> Result<CellOutcome> {
    let backbone = ctx.backbone(key.backbone);
    let before = backbone.checksum();
    let mut adapters = AdapterMap::new();
    let mut record = ExperimentRecord::failure(*key, "");
    record.status = CellStatus::Ok;
    let mut report = None;
    match (key.arch, key.placement) {
        (None, None) => {
            record.train_wall_s = 0.0;
        }
        (Some(arch), Some(plan)) => {
            if plan.backbone() != key.backbone {
                return Err(LabError::Compatibility(format!("plan {plan} does not fit the {} backbone", key.backbone)));
            }
            let kind = arch.kind_for(key.backbone.is_2d())?;
            let sized = size_plan(plan, backbone, kind, key.budget, ctx.profile.tolerance)?;
            adapters = sized.build(key.seed)?;
            record.points = sized.point_list();
            record.realized_params = sized.realized;
            record.budget_warning = !sized.within_tolerance;
            let r = ctx.train(key, &mut adapters)?;
            record.train_wall_s = r.wall_seconds;
            record.stopped_epoch = r.stopped_epoch;
            record.best_epoch = r.best_epoch;
            record.best_val_loss = r.val_loss.get(r.best_epoch.wrapping_sub(1)).copied().unwrap_or(f64::NAN);
            report = Some(r);
        }
        _ => return Err(LabError::Config(format!("cell {key} needs both an architecture and a placement"))),
    }
    let n = ctx.profile.generated_clips;
    let start = Instant::now();
    let clips = ctx.generate(key, &adapters, n)?;
    record.infer_wall_s_per_clip = start.elapsed().as_secs_f64() / n as f64;
    let features = ClipFeatures::extract(&clips)?;
    let reference = &ctx.split(key.genre)?.reference;
    record.fad = fad_features(reference, &features)?;
    record.fd = fd_features(reference, &features)?;
    if backbone.checksum() != before {
        return Err(LabError::Contract(format!("cell {key} modified the frozen backbone")));
    }
    Ok(CellOutcome { record, report })
}

/// Runs one cell. Errors and panics become a failure row instead of
/// propagating.
pub fn run_cell(ctx: &LabContext, key: &CellKey) -> CellOutcome {
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| try_run_cell(ctx, key)));
    let failure = |msg: String| CellOutcome {
        record: ExperimentRecord::failure(*key, msg),
        report: None,
    };
    match result {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => failure(e.to_string()),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            failure(format!("panic: {msg}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
    /// Keep rows already in the result file and run only missing cells.
    pub resume: bool,
    /// Where per-epoch training histories go, if anywhere.
    pub report_dir: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 1,
            resume: false,
            report_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Rows in the result file after the run, in file order.
    pub records: Vec<ExperimentRecord>,
    pub executed: usize,
    pub skipped: usize,
    pub wall_seconds: f64,
}

impl RunSummary {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.is_ok()).count()
    }
}

fn write_train_report(dir: &Path, key: &CellKey, report: &TrainReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{}.csv", key.slug())), report.epochs_csv())?;
    fs::write(dir.join(format!("{}.json", key.slug())), report.summary_json() + "\n")?;
    Ok(())
}

/// Runs `cells` on a pool of `workers` threads and appends one row per cell
/// to `csv_path`. Rows are written in cell order whatever order workers
/// finish in, so the file does not depend on the pool width.
pub fn run_cells(ctx: &LabContext, cells: &[CellKey], csv_path: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let start = Instant::now();
    let (mut writer, mut records) = if opts.resume {
        ResultWriter::resume(csv_path)?
    } else {
        (ResultWriter::create(csv_path)?, Vec::new())
    };
    let done: HashSet<CellKey> = records.iter().map(|r| r.key).collect();
    let mut seen = HashSet::new();
    let todo: Vec<CellKey> = cells.iter().filter(|k| !done.contains(k) && seen.insert(**k)).copied().collect();
    let skipped = cells.len() - todo.len();
    if skipped > 0 {
        log::info!("resuming: {skipped} cells already recorded");
    }
    let next = AtomicUsize::new(0);
    let total = todo.len();
    let write_result: Result<()> = std::thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<(usize, CellOutcome)>();
        for _ in 0..opts.workers.clamp(1, total.max(1)) {
            let tx = tx.clone();
            let (next, todo) = (&next, &todo);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= todo.len() {
                    break;
                }
                let outcome = run_cell(ctx, &todo[i]);
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut cursor = 0;
        let mut result = Ok(());
        for (i, outcome) in rx {
            let r = &outcome.record;
            if r.is_ok() {
                log::info!("[{}/{total}] {}: FAD {:.4} FD {:.4}", i + 1, r.key, r.fad, r.fd);
            } else {
                log::warn!("[{}/{total}] {} failed: {}", i + 1, r.key, r.error);
            }
            pending.insert(i, outcome);
            while let Some(o) = pending.remove(&cursor) {
                cursor += 1;
                if result.is_err() {
                    continue;
                }
                result = writer.append(&o.record);
                if let (Some(dir), Some(rep)) = (&opts.report_dir, &o.report) {
                    if let Err(e) = write_train_report(dir, &o.record.key, rep) {
                        log::warn!("could not write training history for {}: {e}", o.record.key);
                    }
                }
                records.push(o.record);
            }
        }
        result
    });
    write_result?;
    ctx.verify_backbones()?;
    Ok(RunSummary {
        records,
        executed: total,
        skipped,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs a grid into `out_dir`: `results.csv`, per-cell training histories
/// under `train/`, one FAD and one FD plot per backbone and genre, and
/// `summary.md`.
pub fn run_sweep(ctx: &LabContext, grid: &SweepGrid, out_dir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    grid.validate()?;
    fs::create_dir_all(out_dir)?;
    let opts = RunOptions {
        report_dir: opts.report_dir.clone().or_else(|| Some(out_dir.join("train"))),
        ..opts.clone()
    };
    let summary = run_cells(ctx, &grid.cells(), &out_dir.join(RESULTS_FILE), &opts)?;
    write_reports(out_dir, &summary.records)?;
    Ok(summary)
}

/// Cells of the placement study: every plan of one backbone at one budget
/// and architecture, per genre.
pub fn placement_cells(backbone: BackboneKind, arch: ArchFamily, budget: usize, genres: &[Genre], seed: u64) -> Vec<CellKey> {
    let mut out = Vec::new();
    for plan in PlacementPlan::for_backbone(backbone) {
        for &genre in genres {
            out.push(CellKey {
                backbone,
                arch: Some(arch),
                budget,
                placement: Some(plan),
                genre,
                seed,
            });
        }
    }
    out
}

/// Writes `placement_<backbone>.csv` in `out_dir`.
pub fn placement_study(
    ctx: &LabContext,
    backbone: BackboneKind,
    arch: ArchFamily,
    genres: &[Genre],
    seed: u64,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    arch.kind_for(backbone.is_2d())?;
    fs::create_dir_all(out_dir)?;
    let cells = placement_cells(backbone, arch, PLACEMENT_BUDGET, genres, seed);
    let path = out_dir.join(format!("placement_{}.csv", backbone.name().to_ascii_lowercase()));
    run_cells(ctx, &cells, &path, opts)
}
