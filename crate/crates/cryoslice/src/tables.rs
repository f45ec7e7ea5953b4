//! CSV tables with fixed headers. Column order is part of each schema.
//!
//! Numbers are written in their shortest round-trip form; absent values are
//! empty cells.

use std::fmt;
use std::path::{Path, PathBuf};

use cryoslice_core::metrics::FscCurve;
use cryoslice_core::physics::CtfParams;
use cryoslice_core::sim::ParticleMeta;
use cryoslice_core::so3::UnitQuaternion;
use cryoslice_core::training::EvalRecord;

use crate::fsio;

pub const METADATA_HEADER: [&str; 12] =
    ["index", "q1", "q2", "q3", "q4", "t1", "t2", "d1_um", "d2_um", "alpha_rad", "sigma", "snr_db"];
pub const POSES_HEADER: [&str; 5] = ["index", "q1", "q2", "q3", "q4"];
pub const METRICS_HEADER: [&str; 5] = ["step", "loss", "pose_mae_raw_deg", "pose_mae_aligned_deg", "fsc_resolution"];
pub const FSC_HEADER: [&str; 3] = ["shell_freq_cyc_per_px", "resolution_A", "fsc"];
pub const REPORT_HEADER: [&str; 5] =
    ["fsc_resolution", "fsc_resolution_unaligned", "pose_mae_raw_deg", "pose_mae_aligned_deg", "gauge_flip"];

/// A table that does not match its schema, located to the offending cell.
#[derive(Debug)]
pub struct SchemaError {
    pub path: PathBuf,
    /// 1-based line number, when the problem is tied to a line.
    pub line: Option<u64>,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.path.display())?;
        if let Some(line) = self.line {
            write!(f, ", line {line}")?;
        }
        if let Some(field) = &self.field {
            write!(f, ", field `{field}`")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for SchemaError {}

#[derive(Debug)]
pub enum TableError {
    Io(std::io::Error),
    Schema(SchemaError),
}

impl fmt::Display for TableError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TableError::Io(e) => write!(f, "{e}"),
            TableError::Schema(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TableError {}

impl From<std::io::Error> for TableError {
    fn from(e: std::io::Error) -> Self {
        TableError::Io(e)
    }
}

impl From<SchemaError> for TableError {
    fn from(e: SchemaError) -> Self {
        TableError::Schema(e)
    }
}

/// Shortest decimal that parses back to `v`.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v != 0.0 && v.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn render(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv write");
    for row in rows {
        w.write_record(&row).expect("in-memory csv write");
    }
    w.into_inner().expect("in-memory csv flush")
}

fn write(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> std::io::Result<()> {
    fsio::write_atomic(path, &render(header, rows))
}

pub fn write_metadata(path: &Path, meta: &[ParticleMeta]) -> std::io::Result<()> {
    write(
        path,
        &METADATA_HEADER,
        meta.iter().map(|m| {
            let q = m.rotation.components();
            let ctf = m.ctf;
            vec![
                m.index.to_string(),
                num(q[0]),
                num(q[1]),
                num(q[2]),
                num(q[3]),
                num(m.shift[0]),
                num(m.shift[1]),
                opt(ctf.map(|c| c.d1_um)),
                opt(ctf.map(|c| c.d2_um)),
                opt(ctf.map(|c| c.alpha_rad)),
                num(m.sigma),
                opt(m.snr_db),
            ]
        }),
    )
}

pub fn write_poses(path: &Path, poses: &[UnitQuaternion]) -> std::io::Result<()> {
    write(
        path,
        &POSES_HEADER,
        poses.iter().enumerate().map(|(i, q)| {
            let c = q.components();
            vec![i.to_string(), num(c[0]), num(c[1]), num(c[2]), num(c[3])]
        }),
    )
}

pub fn write_metrics(path: &Path, log: &[EvalRecord]) -> std::io::Result<()> {
    write(
        path,
        &METRICS_HEADER,
        log.iter().map(|r| {
            vec![
                r.step.to_string(),
                num(r.loss),
                num(r.pose_mae_raw_deg),
                num(r.pose_mae_aligned_deg),
                opt(r.fsc_resolution),
            ]
        }),
    )
}

pub fn write_fsc(path: &Path, curve: &FscCurve) -> std::io::Result<()> {
    write(
        path,
        &FSC_HEADER,
        curve.shells.iter().map(|s| vec![num(s.freq), num(s.resolution), num(s.fsc)]),
    )
}

/// One-row summary written by `eval`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Report {
    pub fsc_resolution: f64,
    pub fsc_resolution_unaligned: f64,
    pub pose_mae_raw_deg: Option<f64>,
    pub pose_mae_aligned_deg: Option<f64>,
    pub gauge_flip: Option<bool>,
}

pub fn write_report(path: &Path, r: &Report) -> std::io::Result<()> {
    write(
        path,
        &REPORT_HEADER,
        [vec![
            num(r.fsc_resolution),
            num(r.fsc_resolution_unaligned),
            opt(r.pose_mae_raw_deg),
            opt(r.pose_mae_aligned_deg),
            r.gauge_flip.map(|b| b.to_string()).unwrap_or_default(),
        ]],
    )
}

/// Rows of a table whose header matched one of the accepted schemas.
struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path, accepted: &[&[&str]]) -> Result<Self, TableError> {
        let err = |line: Option<u64>, message: String| SchemaError { path: path.to_path_buf(), line, field: None, message };
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => TableError::Io(io),
            other => err(None, format!("{other:?}")).into(),
        })?;
        let header: Vec<String> = r.headers().map_err(|e| err(Some(1), e.to_string()))?.iter().map(str::to_owned).collect();
        if !accepted.iter().any(|h| h.iter().eq(header.iter())) {
            let expected = accepted.iter().map(|h| h.join(",")).collect::<Vec<_>>().join(" or ");
            return Err(err(Some(1), format!("header `{}` does not match `{expected}`", header.join(","))).into());
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| err(e.position().map(|p| p.line()), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Table { path: path.to_path_buf(), header, rows })
    }

    fn fail(&self, line: u64, col: usize, message: String) -> SchemaError {
        SchemaError { path: self.path.clone(), line: Some(line), field: Some(self.header[col].clone()), message }
    }

    fn cell<T: std::str::FromStr>(&self, row: usize, col: usize) -> Result<T, SchemaError> {
        self.opt_cell(row, col)?.ok_or_else(|| self.fail(self.rows[row].0, col, "value is required".into()))
    }

    fn opt_cell<T: std::str::FromStr>(&self, row: usize, col: usize) -> Result<Option<T>, SchemaError> {
        let (line, rec) = &self.rows[row];
        let s = rec.get(col).unwrap_or("").trim();
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| self.fail(*line, col, format!("cannot parse `{s}`")))
    }

    /// Checks that row `i` carries index `i`.
    fn index(&self, row: usize) -> Result<usize, SchemaError> {
        let index: usize = self.cell(row, 0)?;
        if index != row {
            return Err(self.fail(self.rows[row].0, 0, format!("expected index {row}, found {index}")));
        }
        Ok(index)
    }

    fn quaternion(&self, row: usize) -> Result<UnitQuaternion, SchemaError> {
        let q = [self.cell(row, 1)?, self.cell(row, 2)?, self.cell(row, 3)?, self.cell(row, 4)?];
        UnitQuaternion::from_stored(q).map_err(|e| self.fail(self.rows[row].0, 1, format!("q1..q4: {e}")))
    }
}

pub fn read_metadata(path: &Path) -> Result<Vec<ParticleMeta>, TableError> {
    let t = Table::read(path, &[&METADATA_HEADER])?;
    let mut out = Vec::with_capacity(t.rows.len());
    for row in 0..t.rows.len() {
        let index = t.index(row)?;
        let rotation = t.quaternion(row)?;
        let shift = [t.cell(row, 5)?, t.cell(row, 6)?];
        let d: [Option<f64>; 3] = [t.opt_cell(row, 7)?, t.opt_cell(row, 8)?, t.opt_cell(row, 9)?];
        let ctf = match d {
            [None, None, None] => None,
            [Some(d1_um), Some(d2_um), Some(alpha_rad)] => {
                let c = CtfParams { d1_um, d2_um, alpha_rad };
                c.validate().map_err(|e| t.fail(t.rows[row].0, 7, e.to_string()))?;
                Some(c)
            }
            _ => return Err(t.fail(t.rows[row].0, 7, "d1_um, d2_um and alpha_rad must be all present or all empty".into()).into()),
        };
        let sigma: f64 = t.cell(row, 10)?;
        if !(sigma >= 0.0) {
            return Err(t.fail(t.rows[row].0, 10, format!("sigma must be non-negative, found {sigma}")).into());
        }
        out.push(ParticleMeta { index, rotation, shift, ctf, sigma, snr_db: t.opt_cell(row, 11)? });
    }
    Ok(out)
}

/// Reads rotations from a poses table or from the pose columns of a
/// metadata table.
pub fn read_poses(path: &Path) -> Result<Vec<UnitQuaternion>, TableError> {
    let t = Table::read(path, &[&POSES_HEADER, &METADATA_HEADER])?;
    (0..t.rows.len())
        .map(|row| {
            t.index(row)?;
            Ok(t.quaternion(row)?)
        })
        .collect()
}

/// Parsed metrics row; `fsc_resolution` is absent when no reference was given.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub pose_mae_raw_deg: f64,
    pub pose_mae_aligned_deg: f64,
    pub fsc_resolution: Option<f64>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TableError> {
    let t = Table::read(path, &[&METRICS_HEADER])?;
    (0..t.rows.len())
        .map(|row| {
            Ok(MetricsRow {
                step: t.cell(row, 0)?,
                loss: t.cell(row, 1)?,
                pose_mae_raw_deg: t.cell(row, 2)?,
                pose_mae_aligned_deg: t.cell(row, 3)?,
                fsc_resolution: t.opt_cell(row, 4)?,
            })
        })
        .collect()
}

pub fn read_report(path: &Path) -> Result<Report, TableError> {
    let t = Table::read(path, &[&REPORT_HEADER])?;
    if t.rows.len() != 1 {
        return Err(SchemaError { path: path.to_path_buf(), line: None, field: None, message: format!("expected one row, found {}", t.rows.len()) }.into());
    }
    Ok(Report {
        fsc_resolution: t.cell(0, 0)?,
        fsc_resolution_unaligned: t.cell(0, 1)?,
        pose_mae_raw_deg: t.opt_cell(0, 2)?,
        pose_mae_aligned_deg: t.opt_cell(0, 3)?,
        gauge_flip: t.opt_cell(0, 4)?,
    })
}
