//! Super-resolved density maps and 16-bit PGM export.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::localize::LocalizationSet;

/// What each localization adds to a density map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DensityWeight {
    Count,
    Intensity,
}

impl FromStr for DensityWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(DensityWeight::Count),
            "intensity" => Ok(DensityWeight::Intensity),
            _ => Err(Error::config(format!(
                "unknown density weight '{s}' (expected count or intensity)"
            ))),
        }
    }
}

impl fmt::Display for DensityWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DensityWeight::Count => "count",
            DensityWeight::Intensity => "intensity",
        })
    }
}

/// Accumulated localizations on a grid `upscale` times finer than the
/// stack. Raw sums, before normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DensityMap {
    pub fn get(&self, x: usize, z: usize) -> f64 {
        self.data[x + self.width * z]
    }

    /// Values scaled so the largest is 1; an empty map stays zero.
    pub fn normalized(&self) -> Vec<f64> {
        let max = self.data.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            self.data.iter().map(|v| (v / max).max(0.0)).collect()
        } else {
            vec![0.0; self.data.len()]
        }
    }
}

/// Accumulates `locs` into a `(width * upscale) x (height * upscale)` grid.
/// Pixel `p` covers `[p - 0.5, p + 0.5)`, so super-pixel
/// `floor((x + 0.5) * upscale)` receives a localization at `x`. Points off
/// the grid are dropped.
pub fn render_density_map(
    locs: &LocalizationSet,
    upscale: usize,
    dims: (usize, usize),
    weight: DensityWeight,
) -> Result<DensityMap> {
    if upscale == 0 {
        return Err(Error::arg("upscale must be >= 1"));
    }
    let (w, h) = (dims.0 * upscale, dims.1 * upscale);
    if w == 0 || h == 0 {
        return Err(Error::arg("density map needs a non-empty grid"));
    }
    let mut data = vec![0.0; w * h];
    if locs.is_empty() {
        log::warn!("no localizations to render; the density map is empty");
    }
    let u = upscale as f64;
    let mut dropped = 0usize;
    for l in &locs.locs {
        let (cx, cz) = (((l.x + 0.5) * u).floor(), ((l.z + 0.5) * u).floor());
        if !(cx >= 0.0 && cz >= 0.0 && cx < w as f64 && cz < h as f64) {
            dropped += 1;
            continue;
        }
        data[cx as usize + w * cz as usize] += match weight {
            DensityWeight::Count => 1.0,
            DensityWeight::Intensity => l.intensity,
        };
    }
    if dropped > 0 {
        log::warn!("{dropped} localizations fall outside the grid and were not rendered");
    }
    Ok(DensityMap {
        width: w,
        height: h,
        data,
    })
}

/// Writes values in `[0, 1]` as a binary 16-bit PGM (maxval 65535,
/// most significant byte first).
pub fn write_pgm16_to(mut out: impl Write, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape(format!(
            "{width}x{height} image needs {} values, got {}",
            width * height,
            values.len()
        )));
    }
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    buf.reserve(2 * values.len());
    for v in values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn write_pgm16(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64]) -> Result<()> {
    write_pgm16_to(BufWriter::new(File::create(path)?), width, height, values)
}

/// Normalises and writes a density map.
pub fn write_density_map(path: impl AsRef<Path>, map: &DensityMap) -> Result<()> {
    write_pgm16(path, map.width, map.height, &map.normalized())
}

/// Reads a binary 16-bit PGM written by [`write_pgm16_to`]: returns the
/// width, height and raw samples.
pub fn read_pgm16_from(r: impl Read) -> Result<(usize, usize, Vec<u16>)> {
    let mut r = BufReader::new(r);
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::parse("pgm header", "file ends inside the header"));
        }
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    if tokens[0] != "P5" {
        return Err(Error::parse("pgm magic", format!("expected P5, found {}", tokens[0])));
    }
    let num = |i: usize, name: &str| -> Result<usize> {
        tokens[i]
            .parse()
            .map_err(|_| Error::parse(name, format!("cannot parse '{}'", tokens[i])))
    };
    let (w, h, max) = (num(1, "pgm width")?, num(2, "pgm height")?, num(3, "pgm maxval")?);
    if max != 65535 {
        return Err(Error::parse("pgm maxval", format!("expected 65535, found {max}")));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 2 * w * h {
        return Err(Error::parse(
            "pgm payload",
            format!("expected {} bytes, found {}", 2 * w * h, bytes.len()),
        ));
    }
    let px = bytes
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, px))
}

pub fn read_pgm16(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>)> {
    read_pgm16_from(File::open(path)?)
}
