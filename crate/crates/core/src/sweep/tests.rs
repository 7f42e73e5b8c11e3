use std::sync::OnceLock;

use proptest::prelude::*;

use super::*;
use crate::backbones::Block;

fn tiny_profile() -> SweepProfile {
    let mut p = SweepProfile::default();
    p.corpus.groups_per_genre = 5;
    p.corpus.clips_per_group = 2;
    p.pretrain.steps = 0;
    p.diffusion_steps = 5;
    p.generated_clips = 3;
    p.max_epochs = 2;
    p.patience = 1;
    p
}

fn tiny_ctx() -> &'static LabContext {
    static CTX: OnceLock<LabContext> = OnceLock::new();
    CTX.get_or_init(|| LabContext::prepare(tiny_profile()).unwrap())
}

fn tiny_grid() -> SweepGrid {
    SweepGrid {
        backbones: vec![BackboneKind::Ar],
        architectures: vec![ArchFamily::Linear],
        budgets: vec![20_000],
        placements: vec![PlacementPlan::ArLate],
        genres: vec![Genre::GenreA],
        seeds: vec![0],
        baseline: true,
    }
}

/// Rows with the machine-dependent columns blanked.
fn deterministic_rows(path: &Path) -> Vec<Vec<String>> {
    let timing: Vec<usize> = TIMING_COLUMNS
        .iter()
        .map(|c| COLUMNS.iter().position(|x| x == c).unwrap())
        .collect();
    read_results(path)
        .unwrap()
        .iter()
        .map(|r| {
            let mut row = r.to_row();
            for &i in &timing {
                row[i].clear();
            }
            row
        })
        .collect()
}

#[test]
fn sig6_formatting() {
    assert_eq!(format_sig6(1.5), "1.5");
    assert_eq!(format_sig6(0.0), "0");
    assert_eq!(format_sig6(123.456789), "123.457");
    assert_eq!(format_sig6(-0.000123456789), "-0.000123457");
    assert_eq!(format_sig6(9.9999996), "10");
    assert_eq!(format_sig6(1234567.0), "1.23457e6");
    assert_eq!(format_sig6(2.5e-7), "2.5e-7");
    assert_eq!(format_sig6(f64::NAN), "NaN");
}

proptest! {
    #[test]
    fn sig6_keeps_six_digits(m in 1.0f64..10.0, e in -12i32..12, neg in any::<bool>()) {
        let v = if neg { -m } else { m } * 10f64.powi(e);
        let s = format_sig6(v);
        let back: f64 = s.parse().unwrap();
        prop_assert!(((back - v) / v).abs() <= 5e-6, "{} -> {}", v, s);
        let digits = s.split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).collect::<String>();
        prop_assert!(digits.trim_start_matches('0').len() <= 6, "{}", s);
    }
}

#[test]
fn default_grid_cardinality() {
    let grid = SweepGrid::default();
    let cells = grid.cells();
    // 2 genres x (3 AR + 2 UNet architectures) x 5 budgets x 1 placement each
    // x 1 seed, plus one baseline per backbone and genre
    assert_eq!(cells.len(), 2 * (3 + 2) * 5 + 2 * 2);
    assert_eq!(cells.iter().filter(|c| c.is_baseline()).count(), 4);
    assert!(!cells
        .iter()
        .any(|c| c.backbone == BackboneKind::UNet && c.arch == Some(ArchFamily::Linear)));
    assert!(cells
        .iter()
        .all(|c| c.placement.map_or(true, |p| p.backbone() == c.backbone)));
    let unique: HashSet<_> = cells.iter().collect();
    assert_eq!(unique.len(), cells.len());
    assert!(SweepGrid::empty().cells().is_empty());
}

#[test]
fn grid_files_parse() {
    let text = r#"
backbones = ["AR", "UNet"]
architectures = ["conv"]
budgets = [80000]
placements = ["AR_Middle", "UNet_PerBlock_Minus(mid)"]
genres = ["GenreB"]
seeds = [1, 2]
baseline = false

[profile]
groups_per_genre = 7
generated_clips = 12
corpus_dir = "corpus"
"#;
    let (grid, profile) = parse_grid(text, None, Path::new("/data")).unwrap();
    assert_eq!(grid.architectures, vec![ArchFamily::Conv]);
    assert_eq!(grid.placements[1], PlacementPlan::UNetPerBlockMinus(Block::Mid));
    assert_eq!(grid.seeds, vec![1, 2]);
    assert_eq!(grid.cells().len(), 2 * 2);
    assert_eq!(profile.corpus.groups_per_genre, 7);
    assert_eq!(profile.generated_clips, 12);
    assert_eq!(profile.corpus_dir, Some(PathBuf::from("/data/corpus")));
    assert_eq!(profile.max_epochs, 40);

    let (grid, profile) = parse_grid("", Some(9), Path::new(".")).unwrap();
    assert_eq!(grid, SweepGrid { seeds: vec![9], ..SweepGrid::default() });
    assert_eq!((profile.corpus.seed, profile.backbone_seed), (9, 9));
    let (_, profile) = parse_grid("[profile]\ncorpus_seed = 3", Some(9), Path::new(".")).unwrap();
    assert_eq!((profile.corpus.seed, profile.backbone_seed), (3, 9));

    let (grid, _) = parse_grid("backbones = [\"UNet\"]", None, Path::new(".")).unwrap();
    assert_eq!(grid.placements, vec![PlacementPlan::UNetPerBlock]);

    for bad in [
        "budget = [1]",
        "budgets = [0]",
        "backbones = [\"AR\"]\nplacements = [\"UNet_PerBlock\"]",
        "architectures = [\"mlp\"]",
        "[profile]\ngenerated_clips = 1",
    ] {
        assert!(parse_grid(bad, None, Path::new(".")).is_err(), "{bad}");
    }
}

#[test]
fn rows_round_trip() {
    let key = CellKey {
        backbone: BackboneKind::UNet,
        arch: Some(ArchFamily::Transformer),
        budget: 200_000,
        placement: Some(PlacementPlan::UNetPerBlockMinus(Block::Down)),
        genre: Genre::GenreB,
        seed: 4,
    };
    let rec = ExperimentRecord {
        key,
        points: "after_block(mid);after_block(up)".into(),
        realized_params: 133_120,
        budget_warning: false,
        fad: 1.25,
        fd: 3.5e-7,
        train_wall_s: 12.0,
        infer_wall_s_per_clip: 0.5,
        stopped_epoch: 9,
        best_epoch: 4,
        best_val_loss: 0.125,
        status: CellStatus::Ok,
        error: String::new(),
    };
    let row = csv::StringRecord::from(rec.to_row());
    assert_eq!(ExperimentRecord::from_row(&row).unwrap(), rec);
    let failed = ExperimentRecord::failure(CellKey::baseline(BackboneKind::Ar, Genre::GenreA, 0), "boom,\nbang");
    let back = ExperimentRecord::from_row(&csv::StringRecord::from(failed.to_row())).unwrap();
    assert_eq!(back.error, "boom, bang");
    assert!(back.fad.is_nan() && !back.is_ok());
}

#[test]
fn columns_are_the_record_fields() {
    // key fields flattened, then the record's own fields in declaration order
    let expected = [
        "backbone", "arch", "budget", "placement", "genre", "seed", "points", "realized_params", "budget_warning",
        "fad", "fd", "train_wall_s", "infer_wall_s_per_clip", "stopped_epoch", "best_epoch", "best_val_loss",
        "status", "error",
    ];
    assert_eq!(COLUMNS, expected);
}

#[test]
fn resume_drops_a_torn_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let mut w = ResultWriter::create(&path).unwrap();
    let a = ExperimentRecord::failure(CellKey::baseline(BackboneKind::Ar, Genre::GenreA, 0), "x");
    w.append(&a).unwrap();
    drop(w);
    let intact = fs::read(&path).unwrap();
    let mut torn = intact.clone();
    torn.extend_from_slice(b"UNet,none,0,none,Gen");
    fs::write(&path, &torn).unwrap();
    assert!(read_results(&path).is_err());
    let (mut w, rows) = ResultWriter::resume(&path).unwrap();
    assert_eq!(rows.iter().map(|r| r.to_row()).collect::<Vec<_>>(), vec![a.to_row()]);
    assert_eq!(fs::read(&path).unwrap(), intact);
    let b = ExperimentRecord::failure(CellKey::baseline(BackboneKind::UNet, Genre::GenreA, 0), "y");
    w.append(&b).unwrap();
    drop(w);
    let rows: Vec<_> = read_results(&path).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].key == b.key);

    fs::write(&path, "not,a,header\n").unwrap();
    assert!(ResultWriter::resume(&path).is_err());
}

#[test]
fn empty_grid_writes_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_sweep(tiny_ctx(), &SweepGrid::empty(), dir.path(), &RunOptions::default()).unwrap();
    assert_eq!((s.records.len(), s.failures()), (0, 0));
    let text = fs::read_to_string(dir.path().join(RESULTS_FILE)).unwrap();
    assert_eq!(text, COLUMNS.join(",") + "\n");
}

#[test]
fn sweep_is_deterministic_and_resumable() {
    let ctx = tiny_ctx();
    let grid = tiny_grid();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s1 = run_sweep(ctx, &grid, d1.path(), &RunOptions::default()).unwrap();
    assert_eq!(s1.records.len(), 2);
    assert_eq!(s1.failures(), 0, "{:?}", s1.records);
    let opts = RunOptions {
        workers: 2,
        ..RunOptions::default()
    };
    run_sweep(ctx, &grid, d2.path(), &opts).unwrap();
    let csv1 = d1.path().join(RESULTS_FILE);
    assert_eq!(deterministic_rows(&csv1), deterministic_rows(&d2.path().join(RESULTS_FILE)));

    let trained = &s1.records[1];
    assert!(trained.realized_params > 0 && !trained.budget_warning);
    assert_eq!(trained.points, "after_layer(5);after_layer(6)");
    assert!(trained.fad.is_finite() && trained.fd.is_finite());
    assert!(d1.path().join("train").join(format!("{}.json", trained.key.slug())).exists());
    assert!(d1.path().join("summary.md").exists());
    assert!(d1.path().join("fad_ar_GenreA.svg").exists());

    let before = fs::read(&csv1).unwrap();
    let resumed = RunOptions {
        resume: true,
        ..RunOptions::default()
    };
    let s3 = run_sweep(ctx, &grid, d1.path(), &resumed).unwrap();
    assert_eq!((s3.executed, s3.skipped), (0, 2));
    assert_eq!(fs::read(&csv1).unwrap(), before);
}

#[test]
fn a_failing_cell_does_not_stop_the_sweep() {
    let ctx = tiny_ctx();
    let grid = SweepGrid {
        budgets: vec![10, 20_000],
        baseline: false,
        ..tiny_grid()
    };
    let dir = tempfile::tempdir().unwrap();
    let s = run_sweep(ctx, &grid, dir.path(), &RunOptions::default()).unwrap();
    assert_eq!(s.records.len(), 2);
    assert_eq!(s.failures(), 1);
    assert!(s.records[0].error.contains("infeasible budget"), "{}", s.records[0].error);
    assert!(s.records[1].is_ok());
    ctx.verify_backbones().unwrap();
}

#[test]
fn baseline_cells_match_bare_generation() {
    let ctx = tiny_ctx();
    for backbone in BackboneKind::ALL {
        let key = CellKey::baseline(backbone, Genre::GenreB, 1);
        let a = run_cell(ctx, &key).record;
        let b = run_cell(ctx, &key).record;
        assert!(a.is_ok(), "{}", a.error);
        assert_eq!((a.fad, a.fd), (b.fad, b.fd));
        let clips = ctx.generate(&key, &AdapterMap::new(), ctx.profile.generated_clips).unwrap();
        let f = ClipFeatures::extract(&clips).unwrap();
        let reference = &ctx.split(Genre::GenreB).unwrap().reference;
        assert_eq!(a.fad, fad_features(reference, &f).unwrap());
        assert_eq!((a.realized_params, a.stopped_epoch), (0, 0));
    }
}

#[test]
fn placement_study_cardinality() {
    let genres = Genre::ALL;
    assert_eq!(placement_cells(BackboneKind::Ar, ArchFamily::Conv, PLACEMENT_BUDGET, &genres, 0).len(), 2 * 2);
    assert_eq!(placement_cells(BackboneKind::UNet, ArchFamily::Conv, PLACEMENT_BUDGET, &genres, 0).len(), 6 * 2);
}

#[test]
fn summary_marks_the_best_budget() {
    let mk = |budget, fad| {
        let mut r = ExperimentRecord::failure(
            CellKey {
                backbone: BackboneKind::Ar,
                arch: Some(ArchFamily::Conv),
                budget,
                placement: Some(PlacementPlan::ArLate),
                genre: Genre::GenreA,
                seed: 0,
            },
            "",
        );
        r.status = CellStatus::Ok;
        r.fad = fad;
        r.fd = fad * 2.0;
        r
    };
    let mut base = mk(0, 9.0);
    base.key = CellKey::baseline(BackboneKind::Ar, Genre::GenreA, 0);
    let records = vec![base, mk(20_000, 5.0), mk(80_000, 3.0), mk(200_000, 4.0)];
    let table = summary_table(&records);
    let starred: Vec<&str> = table.lines().filter(|l| l.ends_with("| * |")).collect();
    assert_eq!(starred.len(), 1);
    assert!(starred[0].contains("| 80000 |"), "{table}");
    assert!(table.contains("no adapters"));

    let dir = tempfile::tempdir().unwrap();
    let written = write_reports(dir.path(), &records).unwrap();
    assert_eq!(written.len(), 3);
    let svg = fs::read_to_string(dir.path().join("fad_ar_GenreA.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert!(svg.contains("stroke-dasharray"));
}
