//! Result rows and their CSV encoding.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom};
use std::path::Path;

use crate::adapters::ArchFamily;
use crate::backbones::BackboneKind;
use crate::corpus::Genre;
use crate::error::{LabError, Result};
use crate::placement::PlacementPlan;

/// Identifies one sweep cell. A cell without an architecture is the
/// identity baseline: the frozen backbone with no adapters attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub backbone: BackboneKind,
    pub arch: Option<ArchFamily>,
    pub budget: usize,
    pub placement: Option<PlacementPlan>,
    pub genre: Genre,
    pub seed: u64,
}

impl CellKey {
    pub fn baseline(backbone: BackboneKind, genre: Genre, seed: u64) -> Self {
        CellKey {
            backbone,
            arch: None,
            budget: 0,
            placement: None,
            genre,
            seed,
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.arch.is_none()
    }

    /// File-name friendly identifier.
    pub fn slug(&self) -> String {
        let placement = self.placement.map_or("none".to_string(), |p| {
            p.to_string().replace(['(', ')'], "_").trim_end_matches('_').to_string()
        });
        format!(
            "{}_{}_{}_{}_{}_s{}",
            self.backbone,
            self.arch.map_or("none", ArchFamily::name),
            self.budget,
            placement,
            self.genre.name(),
            self.seed
        )
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}/{}/seed{}",
            self.backbone,
            self.arch.map_or("none", ArchFamily::name),
            self.budget,
            self.placement.map_or("none".to_string(), |p| p.to_string()),
            self.genre.name(),
            self.seed
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    Failed,
}

/// One CSV row. Field order is the column order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub key: CellKey,
    /// `;`-separated insertion points, empty for a baseline.
    pub points: String,
    pub realized_params: usize,
    /// Set when the realized count misses the solver tolerance.
    pub budget_warning: bool,
    pub fad: f64,
    pub fd: f64,
    pub train_wall_s: f64,
    pub infer_wall_s_per_clip: f64,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub status: CellStatus,
    pub error: String,
}

pub const COLUMNS: [&str; 18] = [
    "backbone",
    "arch",
    "budget",
    "placement",
    "genre",
    "seed",
    "points",
    "realized_params",
    "budget_warning",
    "fad",
    "fd",
    "train_wall_s",
    "infer_wall_s_per_clip",
    "stopped_epoch",
    "best_epoch",
    "best_val_loss",
    "status",
    "error",
];

/// Columns that depend on the machine rather than the inputs.
pub const TIMING_COLUMNS: [&str; 2] = ["train_wall_s", "infer_wall_s_per_clip"];

/// Six significant digits, shortest form: fixed notation for moderate
/// magnitudes, exponent notation otherwise.
pub fn format_sig6(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NaN".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        // round first so 9.999995 does not print seven digits
        let rounded: f64 = format!("{v:.5e}").parse().unwrap_or(v);
        let mag = rounded.abs().log10().floor() as i32;
        let decimals = (5 - mag).max(0) as usize;
        let s = format!("{rounded:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{v:.5e}");
        let (m, e) = s.split_once('e').unwrap_or((&s, "0"));
        let m = if m.contains('.') { m.trim_end_matches('0').trim_end_matches('.') } else { m };
        format!("{m}e{e}")
    }
}

fn parse_field<T: std::str::FromStr>(row: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = row.get(i).unwrap_or("");
    raw.parse()
        .map_err(|_| LabError::Data(format!("column {} has unparsable value {raw:?}", COLUMNS[i])))
}

fn parse_opt<T: std::str::FromStr<Err = LabError>>(raw: &str) -> Result<Option<T>> {
    if raw == "none" {
        Ok(None)
    } else {
        raw.parse().map(Some)
    }
}

impl ExperimentRecord {
    pub fn failure(key: CellKey, error: impl fmt::Display) -> Self {
        ExperimentRecord {
            key,
            points: String::new(),
            realized_params: 0,
            budget_warning: false,
            fad: f64::NAN,
            fd: f64::NAN,
            train_wall_s: f64::NAN,
            infer_wall_s_per_clip: f64::NAN,
            stopped_epoch: 0,
            best_epoch: 0,
            best_val_loss: f64::NAN,
            status: CellStatus::Failed,
            error: error.to_string().replace(['\n', '\r'], " "),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }

    pub fn to_row(&self) -> Vec<String> {
        let k = &self.key;
        vec![
            k.backbone.to_string(),
            k.arch.map_or("none".into(), |a| a.to_string()),
            k.budget.to_string(),
            k.placement.map_or("none".into(), |p| p.to_string()),
            k.genre.name().to_string(),
            k.seed.to_string(),
            self.points.clone(),
            self.realized_params.to_string(),
            self.budget_warning.to_string(),
            format_sig6(self.fad),
            format_sig6(self.fd),
            format_sig6(self.train_wall_s),
            format_sig6(self.infer_wall_s_per_clip),
            self.stopped_epoch.to_string(),
            self.best_epoch.to_string(),
            format_sig6(self.best_val_loss),
            match self.status {
                CellStatus::Ok => "ok".into(),
                CellStatus::Failed => "failed".into(),
            },
            self.error.clone(),
        ]
    }

    pub fn from_row(row: &csv::StringRecord) -> Result<Self> {
        if row.len() != COLUMNS.len() {
            return Err(LabError::Data(format!(
                "result row has {} fields, expected {}",
                row.len(),
                COLUMNS.len()
            )));
        }
        let key = CellKey {
            backbone: row[0].parse()?,
            arch: parse_opt(&row[1])?,
            budget: parse_field(row, 2)?,
            placement: parse_opt(&row[3])?,
            genre: row[4].parse()?,
            seed: parse_field(row, 5)?,
        };
        let status = match &row[16] {
            "ok" => CellStatus::Ok,
            "failed" => CellStatus::Failed,
            other => return Err(LabError::Data(format!("unknown status {other:?}"))),
        };
        Ok(ExperimentRecord {
            key,
            points: row[6].to_string(),
            realized_params: parse_field(row, 7)?,
            budget_warning: parse_field(row, 8)?,
            fad: parse_field(row, 9)?,
            fd: parse_field(row, 10)?,
            train_wall_s: parse_field(row, 11)?,
            infer_wall_s_per_clip: parse_field(row, 12)?,
            stopped_epoch: parse_field(row, 13)?,
            best_epoch: parse_field(row, 14)?,
            best_val_loss: parse_field(row, 15)?,
            status,
            error: row[17].to_string(),
        })
    }
}

/// Append-only result file. Rows are flushed one at a time so a crashed run
/// loses at most the row being written.
pub struct ResultWriter {
    inner: csv::Writer<File>,
}

impl ResultWriter {
    /// Starts a fresh file holding only the header.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut inner = csv::Writer::from_path(path)?;
        inner.write_record(COLUMNS)?;
        inner.flush()?;
        Ok(ResultWriter { inner })
    }

    /// Opens an existing file for appending, after dropping any torn
    /// trailing row. Returns the writer and the intact rows.
    pub fn resume(path: &Path) -> Result<(Self, Vec<ExperimentRecord>)> {
        if !path.exists() {
            return Ok((Self::create(path)?, Vec::new()));
        }
        let (rows, good_len) = read_intact(path)?;
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        if file.metadata()?.len() != good_len {
            log::warn!("dropping a torn trailing row from {}", path.display());
            file.set_len(good_len)?;
        }
        let mut file = file;
        file.seek(SeekFrom::End(0))?;
        let inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        Ok((ResultWriter { inner }, rows))
    }

    pub fn append(&mut self, record: &ExperimentRecord) -> Result<()> {
        self.inner.write_record(record.to_row())?;
        self.inner.flush()?;
        Ok(())
    }
}

fn header_matches(h: &csv::StringRecord) -> bool {
    h.len() == COLUMNS.len() && h.iter().zip(COLUMNS).all(|(a, b)| a == b)
}

/// Rows that parse, plus the byte length of the file up to the last one.
fn read_intact(path: &Path) -> Result<(Vec<ExperimentRecord>, u64)> {
    let bytes = fs::read(path)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes.as_slice());
    let mut rec = csv::StringRecord::new();
    let format_err = |reason: &str| LabError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if !rdr.read_record(&mut rec)? || !header_matches(&rec) {
        return Err(format_err("missing or foreign header"));
    }
    let mut good = rdr.position().byte();
    let mut rows = Vec::new();
    loop {
        match rdr.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {
                let complete = bytes[..rdr.position().byte() as usize].ends_with(b"\n");
                match ExperimentRecord::from_row(&rec) {
                    Ok(r) if complete => {
                        rows.push(r);
                        good = rdr.position().byte();
                    }
                    _ => break,
                }
            }
            Err(_) => break,
        }
    }
    // anything after the last intact row must be the torn tail
    Ok((rows, good))
}

pub fn read_results(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let (rows, good) = read_intact(path)?;
    if good != fs::metadata(path)?.len() {
        return Err(LabError::Format {
            path: path.to_path_buf(),
            reason: "file ends in an unparsable row".into(),
        });
    }
    Ok(rows)
}
