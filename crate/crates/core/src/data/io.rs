//! JSON-lines dataset files.
//!
//! The first line is a header object (`format`, `version`, `n_samples`,
//! `samples_sha256`, `meta`); each following line holds one sample. Floats
//! are written with 17 significant digits so a load reproduces every value
//! exactly.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetMeta, PoseSample};
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
const FORMAT: &str = "hgn-dataset";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    n_samples: usize,
    samples_sha256: String,
    meta: DatasetMeta,
}

/// Writes floats in scientific notation with 17 significant digits.
struct RoundTrip;

impl serde_json::ser::Formatter for RoundTrip {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        write!(w, "{value:.8e}")
    }
}

fn to_line<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    value.serialize(&mut serde_json::Serializer::with_formatter(&mut buf, RoundTrip))?;
    Ok(buf)
}

fn hex(digest: impl AsRef<[u8]>) -> String {
    digest.as_ref().iter().map(|b| format!("{b:02x}")).collect()
}

fn sample_lines(ds: &Dataset) -> Result<(Vec<Vec<u8>>, String)> {
    let mut hasher = Sha256::new();
    let mut lines = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let mut line = to_line(s)?;
        line.push(b'\n');
        hasher.update(&line);
        lines.push(line);
    }
    Ok((lines, hex(hasher.finalize())))
}

/// The `samples_sha256` a file written from `ds` would carry.
pub fn samples_checksum(ds: &Dataset) -> Result<String> {
    Ok(sample_lines(ds)?.1)
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let (lines, samples_sha256) = sample_lines(ds)?;
    let header = Header {
        format: FORMAT.into(),
        version: DATASET_VERSION,
        n_samples: ds.samples.len(),
        samples_sha256,
        meta: ds.meta.clone(),
    };
    w.write_all(&to_line(&header)?)?;
    w.write_all(b"\n")?;
    for line in lines {
        w.write_all(&line)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(ds, BufWriter::new(File::create(path)?))
}

fn parse_err(line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse { line, msg: e.to_string() }
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.split(b'\n');
    let first = lines.next().ok_or_else(|| parse_err(1, "empty file"))??;
    let raw: serde_json::Value = serde_json::from_slice(&first).map_err(|e| parse_err(1, e))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
        return Err(parse_err(1, "not a dataset file"));
    }
    let version = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| parse_err(1, "missing version"))?;
    if version != DATASET_VERSION as u64 {
        return Err(Error::Version { expected: DATASET_VERSION, found: version.min(u32::MAX as u64) as u32 });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| parse_err(1, e))?;

    let mut hasher = Sha256::new();
    let mut samples = Vec::with_capacity(header.n_samples);
    let mut lines = lines.peekable();
    while let Some(line) = lines.next() {
        let mut line = line?;
        let at_end = lines.peek().is_none();
        if line.is_empty() && at_end {
            break;
        }
        let sample: PoseSample = match serde_json::from_slice(&line) {
            Ok(s) => s,
            // A record cut off at the end of the file is a truncation, not a
            // malformed line.
            Err(_) if at_end => return Err(Error::Truncated { last_good: samples.len() }),
            Err(e) => return Err(parse_err(samples.len() + 2, e)),
        };
        line.push(b'\n');
        hasher.update(&line);
        samples.push(sample);
    }
    if samples.len() < header.n_samples {
        return Err(Error::Truncated { last_good: samples.len() });
    }
    if samples.len() > header.n_samples {
        return Err(parse_err(header.n_samples + 2, "more records than the header declares"));
    }
    let found = hex(hasher.finalize());
    if found != header.samples_sha256 {
        return Err(Error::Checksum { expected: header.samples_sha256, found });
    }
    let ds = Dataset { meta: header.meta, samples };
    ds.validate()?;
    Ok(ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}
