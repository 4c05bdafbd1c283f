//! CSV tables: localizations, ground truth, PR curves, objective traces and
//! PSF patch lists.
//!
//! Every table has a fixed header row. Floats are written in shortest
//! round-trip form, so reading a written table reproduces it exactly.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{PrCurve, PrPoint};
use crate::localize::{Localization, LocalizationSet};
use crate::sim::{GroundTruth, GtPoint};

pub const LOCALIZATION_HEADER: [&str; 4] = ["frame", "x_px", "z_px", "intensity"];
pub const TRUTH_HEADER: [&str; 4] = ["frame", "x_px", "z_px", "amplitude"];
pub const PR_HEADER: [&str; 7] = ["threshold", "precision", "recall", "f1", "tp", "fp", "fn"];
pub const TRACE_HEADER: [&str; 3] = ["iteration", "objective", "primal_residual"];
pub const PATCH_HEADER: [&str; 4] = ["frame", "x", "z", "half"];

fn csv_err(table: &str, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::parse(table, format!("{kind:?}")),
    }
}

fn writer(w: impl Write, header: &[&str]) -> Result<csv::Writer<impl Write>> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(header).map_err(|e| csv_err("header", e))?;
    Ok(out)
}

fn finish(out: csv::Writer<impl Write>) -> Result<()> {
    out.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?
        .flush()?;
    Ok(())
}

/// Reads all rows of a table after checking its header. Each row is handed
/// to `row` together with its 1-based line number.
fn read_rows(
    r: impl Read,
    table: &str,
    header: &[&str],
    mut row: impl FnMut(usize, &csv::StringRecord) -> Result<()>,
) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(r);
    let found = rdr.headers().map_err(|e| csv_err(table, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::parse(
            format!("{table} header"),
            format!(
                "expected '{}', found '{}'",
                header.join(","),
                found.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(table, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        row(line, &rec)?;
    }
    Ok(())
}

fn cell<V: FromStr>(rec: &csv::StringRecord, line: usize, col: usize, header: &[&str]) -> Result<V> {
    let raw = rec.get(col).unwrap_or("");
    raw.parse().map_err(|_| {
        Error::parse(
            format!("{} (line {line})", header[col]),
            format!("cannot parse '{raw}'"),
        )
    })
}

fn finite(v: f64, line: usize, name: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::parse(format!("{name} (line {line})"), "value must be finite"))
    }
}

pub fn write_localizations_to(w: impl Write, set: &LocalizationSet) -> Result<()> {
    let mut out = writer(w, &LOCALIZATION_HEADER)?;
    for l in &set.locs {
        out.write_record([
            l.frame.to_string(),
            l.x.to_string(),
            l.z.to_string(),
            l.intensity.to_string(),
        ])
        .map_err(|e| csv_err("localizations", e))?;
    }
    finish(out)
}

/// Reads a localization table. The file carries no geometry, so the caller
/// supplies it; `frames` defaults to one past the last frame present.
pub fn read_localizations_from(
    r: impl Read,
    frames: Option<usize>,
    pixel_size_um: f64,
    frame_rate_hz: f64,
) -> Result<LocalizationSet> {
    let mut locs = Vec::new();
    read_rows(r, "localizations", &LOCALIZATION_HEADER, |line, rec| {
        let h = &LOCALIZATION_HEADER;
        locs.push(Localization {
            frame: cell(rec, line, 0, h)?,
            x: finite(cell(rec, line, 1, h)?, line, h[1])?,
            z: finite(cell(rec, line, 2, h)?, line, h[2])?,
            intensity: finite(cell(rec, line, 3, h)?, line, h[3])?,
        });
        Ok(())
    })?;
    let present = locs.iter().map(|l| l.frame + 1).max().unwrap_or(0);
    let set = LocalizationSet {
        pixel_size_um,
        frame_rate_hz,
        frames: frames.unwrap_or(present),
        locs,
    };
    set.validate()?;
    Ok(set)
}

pub fn write_truth_to(w: impl Write, gt: &GroundTruth) -> Result<()> {
    let mut out = writer(w, &TRUTH_HEADER)?;
    for (t, pts) in gt.frames.iter().enumerate() {
        for p in pts {
            out.write_record([t.to_string(), p.x.to_string(), p.z.to_string(), p.amplitude.to_string()])
                .map_err(|e| csv_err("ground truth", e))?;
        }
    }
    finish(out)
}

/// Reads a ground-truth table. Frames without bubbles have no rows, so
/// `frames` pads the result; it defaults to one past the last frame present.
pub fn read_truth_from(r: impl Read, frames: Option<usize>) -> Result<GroundTruth> {
    let mut rows: Vec<(usize, GtPoint)> = Vec::new();
    read_rows(r, "ground truth", &TRUTH_HEADER, |line, rec| {
        let h = &TRUTH_HEADER;
        rows.push((
            cell(rec, line, 0, h)?,
            GtPoint {
                x: finite(cell(rec, line, 1, h)?, line, h[1])?,
                z: finite(cell(rec, line, 2, h)?, line, h[2])?,
                amplitude: finite(cell(rec, line, 3, h)?, line, h[3])?,
            },
        ));
        Ok(())
    })?;
    let present = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let n = frames.unwrap_or(present);
    if present > n {
        return Err(Error::parse(
            "frame",
            format!("ground truth reaches frame {} of a {n}-frame stack", present - 1),
        ));
    }
    let mut gt = GroundTruth {
        frames: vec![Vec::new(); n],
    };
    for (t, p) in rows {
        gt.frames[t].push(p);
    }
    Ok(gt)
}

pub fn write_pr_curve_to(w: impl Write, curve: &PrCurve) -> Result<()> {
    let mut out = writer(w, &PR_HEADER)?;
    for p in &curve.points {
        out.write_record([
            p.threshold.to_string(),
            p.precision.to_string(),
            p.recall.to_string(),
            p.f1.to_string(),
            p.tp.to_string(),
            p.fp.to_string(),
            p.fn_.to_string(),
        ])
        .map_err(|e| csv_err("pr curve", e))?;
    }
    finish(out)
}

pub fn read_pr_curve_from(r: impl Read) -> Result<PrCurve> {
    let mut curve = PrCurve::default();
    read_rows(r, "pr curve", &PR_HEADER, |line, rec| {
        let h = &PR_HEADER;
        curve.points.push(PrPoint {
            threshold: cell(rec, line, 0, h)?,
            precision: cell(rec, line, 1, h)?,
            recall: cell(rec, line, 2, h)?,
            f1: cell(rec, line, 3, h)?,
            tp: cell(rec, line, 4, h)?,
            fp: cell(rec, line, 5, h)?,
            fn_: cell(rec, line, 6, h)?,
        });
        Ok(())
    })?;
    Ok(curve)
}

/// Per-iteration objective and primal residual, iterations counted from 1.
pub fn write_trace_to(w: impl Write, objective: &[f64], primal_residual: &[f64]) -> Result<()> {
    if objective.len() != primal_residual.len() {
        return Err(Error::arg("objective and residual traces differ in length"));
    }
    let mut out = writer(w, &TRACE_HEADER)?;
    for (i, (o, r)) in objective.iter().zip(primal_residual).enumerate() {
        out.write_record([(i + 1).to_string(), o.to_string(), r.to_string()])
            .map_err(|e| csv_err("objective trace", e))?;
    }
    finish(out)
}

/// Where to cut a PSF patch: centre `(x, z)` in frame `frame`, side
/// `2 * half + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub frame: usize,
    pub x: usize,
    pub z: usize,
    pub half: usize,
}

pub fn read_patches_from(r: impl Read) -> Result<Vec<PatchSpec>> {
    let mut out = Vec::new();
    read_rows(r, "patches", &PATCH_HEADER, |line, rec| {
        let h = &PATCH_HEADER;
        out.push(PatchSpec {
            frame: cell(rec, line, 0, h)?,
            x: cell(rec, line, 1, h)?,
            z: cell(rec, line, 2, h)?,
            half: cell(rec, line, 3, h)?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_patches_to(w: impl Write, patches: &[PatchSpec]) -> Result<()> {
    let mut out = writer(w, &PATCH_HEADER)?;
    for p in patches {
        out.write_record([
            p.frame.to_string(),
            p.x.to_string(),
            p.z.to_string(),
            p.half.to_string(),
        ])
        .map_err(|e| csv_err("patches", e))?;
    }
    finish(out)
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    Ok(std::io::BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<std::io::BufReader<File>> {
    Ok(std::io::BufReader::new(File::open(path)?))
}

pub fn write_localizations(path: impl AsRef<Path>, set: &LocalizationSet) -> Result<()> {
    write_localizations_to(create(path.as_ref())?, set)
}

pub fn read_localizations(
    path: impl AsRef<Path>,
    frames: Option<usize>,
    pixel_size_um: f64,
    frame_rate_hz: f64,
) -> Result<LocalizationSet> {
    read_localizations_from(open(path.as_ref())?, frames, pixel_size_um, frame_rate_hz)
}

pub fn write_truth(path: impl AsRef<Path>, gt: &GroundTruth) -> Result<()> {
    write_truth_to(create(path.as_ref())?, gt)
}

pub fn read_truth(path: impl AsRef<Path>, frames: Option<usize>) -> Result<GroundTruth> {
    read_truth_from(open(path.as_ref())?, frames)
}

pub fn write_pr_curve(path: impl AsRef<Path>, curve: &PrCurve) -> Result<()> {
    write_pr_curve_to(create(path.as_ref())?, curve)
}

pub fn read_pr_curve(path: impl AsRef<Path>) -> Result<PrCurve> {
    read_pr_curve_from(open(path.as_ref())?)
}

pub fn write_trace(path: impl AsRef<Path>, objective: &[f64], primal_residual: &[f64]) -> Result<()> {
    write_trace_to(create(path.as_ref())?, objective, primal_residual)
}

pub fn read_patches(path: impl AsRef<Path>) -> Result<Vec<PatchSpec>> {
    read_patches_from(open(path.as_ref())?)
}
