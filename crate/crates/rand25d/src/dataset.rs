//! Dataset index files: a text list of `(scan, mask)` volume pairs.
//!
//! ```text
//! version=1
//! pair=phantom_000_scan.vol phantom_000_mask.vol
//! pair=phantom_001_scan.vol phantom_001_mask.vol
//! ```
//!
//! Paths are relative to the directory holding the index.

use std::path::{Path, PathBuf};

use rand25d_core::pipeline::Sample;

use crate::config::parse_lines;
use crate::error::{Error, Result};
use crate::volume_io::{load_volume, VolumeKind};

pub const INDEX_FILE: &str = "index.txt";

pub fn write_index(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut text = String::from("version=1\n");
    for (s, m) in pairs {
        text.push_str(&format!("pair={s} {m}\n"));
    }
    std::fs::write(path, text).map_err(Error::io(path))
}

/// Resolved `(scan, mask)` paths listed in the index at `path`.
pub fn read_index(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let err = |line: usize, reason: String| Error::Config {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    let mut versioned = false;
    for (line, k, v) in parse_lines(&text).map_err(|(l, r)| err(l, r))? {
        match k.as_str() {
            "version" if v == "1" => versioned = true,
            "version" => return Err(err(line, format!("unsupported index version `{v}`"))),
            "pair" => {
                let mut it = v.split_whitespace();
                match (it.next(), it.next(), it.next()) {
                    (Some(s), Some(m), None) => pairs.push((dir.join(s), dir.join(m))),
                    _ => {
                        return Err(err(
                            line,
                            format!("`pair` expects two file names, found `{v}`"),
                        ))
                    }
                }
            }
            _ => return Err(err(line, format!("unknown index key `{k}`"))),
        }
    }
    if !versioned {
        return Err(err(1, "missing `version=1`".into()));
    }
    Ok(pairs)
}

/// Loads every pair of the index, checking kinds and matching extents.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    read_index(path)?
        .into_iter()
        .map(|(s, m)| {
            let (scan, sk) = load_volume(&s)?;
            let (mask, mk) = load_volume(&m)?;
            if sk != VolumeKind::Scan {
                return Err(Error::format(
                    &s,
                    0,
                    format!("expected a scan volume, found {}", sk.as_str()),
                ));
            }
            if mk != VolumeKind::Mask {
                return Err(Error::format(
                    &m,
                    0,
                    format!("expected a mask volume, found {}", mk.as_str()),
                ));
            }
            Ok(Sample::new(scan, mask)?)
        })
        .collect()
}
