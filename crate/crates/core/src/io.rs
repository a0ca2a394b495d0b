//! Artifact files: 16-bit PGM images with JSON sidecars, CSV tables and a
//! checksummed manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scan::Image;

pub const MANIFEST_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Scaling written next to every PGM so the quantized image maps back to
/// physical units: `value = min + level * (max - min) / 65535`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgmSidecar {
    pub rows: usize,
    pub cols: usize,
    pub channel: String,
    pub units: String,
    pub pass: String,
    pub min: f64,
    pub max: f64,
    /// Pixels that held no finite value; written as level 0.
    pub missing: usize,
}

impl PgmSidecar {
    pub fn value(&self, level: u16) -> f64 {
        if self.max > self.min {
            self.min + level as f64 * (self.max - self.min) / 65535.0
        } else {
            self.min
        }
    }
}

/// Quantize row-major `values` into a binary P5 PGM with maxval 65535.
pub fn encode_pgm16(values: &[f64], rows: usize, cols: usize) -> Result<(Vec<u8>, f64, f64, usize)> {
    if values.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::validation(format!(
            "image of {} values does not fit {rows} x {cols}",
            values.len()
        )));
    }
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let mut out = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    out.reserve(values.len() * 2);
    let mut missing = 0;
    for &v in values {
        let level = if !v.is_finite() {
            missing += 1;
            0
        } else if hi > lo {
            (((v - lo) / (hi - lo)) * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    Ok((out, lo, hi, missing))
}

/// Parse a binary P5 PGM with maxval 65535 into `(rows, cols, levels)`.
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::validation("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let bad = || Error::validation("malformed PGM header");
    if fields[0] != "P5" {
        return Err(Error::validation("not a binary PGM"));
    }
    let cols: usize = fields[1].parse().map_err(|_| bad())?;
    let rows: usize = fields[2].parse().map_err(|_| bad())?;
    if fields[3] != "65535" {
        return Err(Error::validation("only 16-bit PGM is supported"));
    }
    let data = bytes.get(pos..pos + rows * cols * 2).ok_or_else(|| Error::validation("truncated PGM data"))?;
    let levels = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((rows, cols, levels))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub name: String,
    pub experiment: String,
    pub seed: u64,
    /// `ok`, or `crashed` when the run stopped early.
    pub status: String,
    pub message: Option<String>,
    /// Checksum of the resolved scenario that produced the run.
    pub scenario_sha256: String,
    pub outputs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Re-hash every listed file under `dir` and compare.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for e in &self.outputs {
            let bytes = fs::read(dir.join(&e.path))?;
            if sha256_hex(&bytes) != e.sha256 || bytes.len() as u64 != e.bytes {
                return Err(Error::Failed(format!("checksum mismatch for {}", e.path)));
            }
        }
        Ok(())
    }
}

/// Writes files under one directory, all prefixed with the run name, and
/// records each in the manifest.
#[derive(Debug)]
pub struct ArtifactWriter {
    dir: PathBuf,
    prefix: String,
    entries: Vec<ManifestEntry>,
}

impl ArtifactWriter {
    pub fn new(dir: impl Into<PathBuf>, prefix: &str) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            prefix: prefix.to_string(),
            entries: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Write `<prefix>_<suffix>`.
    pub fn bytes(&mut self, suffix: &str, data: &[u8]) -> Result<()> {
        let name = format!("{}_{suffix}", self.prefix);
        fs::write(self.dir.join(&name), data)?;
        self.entries.push(ManifestEntry {
            path: name,
            bytes: data.len() as u64,
            sha256: sha256_hex(data),
        });
        Ok(())
    }

    pub fn text(&mut self, suffix: &str, s: &str) -> Result<()> {
        self.bytes(suffix, s.as_bytes())
    }

    pub fn json<T: Serialize>(&mut self, suffix: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.text(suffix, &s)
    }

    /// One PGM plus sidecar for each pass: `<stem>.pgm` for the forward
    /// buffer and `<stem>_rev.pgm` for the reverse one when it holds data.
    pub fn image(&mut self, image: &Image, units: &str) -> Result<()> {
        let stem = image.channel.suffix();
        let passes = [("forward", &image.forward, stem.clone()), ("reverse", &image.reverse, format!("{stem}_rev"))];
        for (pass, buf, name) in passes {
            if pass == "reverse" && buf.iter().all(|v| !v.is_finite()) {
                continue;
            }
            let (pgm, min, max, missing) = encode_pgm16(buf, image.rows, image.cols)?;
            self.bytes(&format!("{name}.pgm"), &pgm)?;
            self.json(
                &format!("{name}.json"),
                &PgmSidecar {
                    rows: image.rows,
                    cols: image.cols,
                    channel: stem.clone(),
                    units: units.to_string(),
                    pass: pass.to_string(),
                    min,
                    max,
                    missing,
                },
            )?;
        }
        Ok(())
    }

    /// Writes `manifest.json` (not itself listed) and returns the manifest.
    pub fn finish(
        self,
        experiment: &str,
        seed: u64,
        scenario_sha256: String,
        failure: Option<String>,
    ) -> Result<Manifest> {
        let m = Manifest {
            manifest_version: MANIFEST_VERSION,
            name: self.prefix.clone(),
            experiment: experiment.to_string(),
            seed,
            status: if failure.is_some() { "crashed" } else { "ok" }.to_string(),
            message: failure,
            scenario_sha256,
            outputs: self.entries,
        };
        let mut s = serde_json::to_string_pretty(&m)?;
        s.push('\n');
        fs::write(self.dir.join("manifest.json"), s)?;
        Ok(m)
    }
}

/// Row-major image values as `pixel_row,pixel_col,forward,reverse`.
pub fn image_to_csv(image: &Image) -> String {
    let mut s = String::from("pixel_row,pixel_col,forward,reverse\n");
    for r in 0..image.rows {
        for c in 0..image.cols {
            let k = r * image.cols + c;
            let _ = writeln!(s, "{r},{c},{},{}", image.forward[k], image.reverse[k]);
        }
    }
    s
}
