//! Volume files: a magic line, a fixed-order text header, a blank line and
//! the raw payload. See the README for the byte layout.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand25d_core::geometry::Volume;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"R25DVOL\n";
pub const VERSION: u32 = 1;
const KEYS: [&str; 5] = ["version", "kind", "dims", "dtype", "order"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Scan,
    Mask,
    Prob,
}

impl VolumeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VolumeKind::Scan => "scan",
            VolumeKind::Mask => "mask",
            VolumeKind::Prob => "prob",
        }
    }

    pub fn dtype(self) -> &'static str {
        match self {
            VolumeKind::Mask => "u8",
            _ => "f32le",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "scan" => Some(VolumeKind::Scan),
            "mask" => Some(VolumeKind::Mask),
            "prob" => Some(VolumeKind::Prob),
            _ => None,
        }
    }
}

pub fn header(dims: [usize; 3], kind: VolumeKind) -> String {
    format!(
        "version={VERSION}\nkind={}\ndims={}x{}x{}\ndtype={}\norder=abc\n\n",
        kind.as_str(),
        dims[0],
        dims[1],
        dims[2],
        kind.dtype()
    )
}

/// Serialises `vol`. Masks must hold only 0 and 1.
pub fn encode_volume(vol: &Volume, kind: VolumeKind) -> Result<Vec<u8>, String> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(header(vol.dims(), kind).as_bytes());
    match kind {
        VolumeKind::Mask => {
            for (i, &v) in vol.data().iter().enumerate() {
                if v != 0.0 && v != 1.0 {
                    return Err(format!(
                        "mask value {v} at voxel index {i}; masks hold only 0 or 1"
                    ));
                }
                out.push(v as u8);
            }
        }
        _ => vol
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn save_volume(path: &Path, vol: &Volume, kind: VolumeKind) -> Result<()> {
    let bytes = encode_volume(vol, kind).map_err(|r| Error::format(path, 0, r))?;
    let mut f = File::create(path).map_err(Error::io(path))?;
    f.write_all(&bytes).map_err(Error::io(path))
}

pub fn load_volume(path: &Path) -> Result<(Volume, VolumeKind)> {
    let f = File::open(path).map_err(Error::io(path))?;
    read_volume(BufReader::new(f), path)
}

/// Parses the header completely before touching the payload.
pub fn read_volume(mut r: impl BufRead, path: &Path) -> Result<(Volume, VolumeKind)> {
    let err = |offset: usize, reason: String| Error::format(path, offset as u64, reason);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| err(0, "file shorter than the magic line".into()))?;
    if &magic != MAGIC {
        return Err(err(0, "bad magic; not a volume file".into()));
    }
    let mut offset = MAGIC.len();
    let mut values = Vec::with_capacity(KEYS.len());
    for key in KEYS {
        let (line, len) = read_line(&mut r).map_err(Error::io(path))?;
        let value = line
            .strip_prefix(key)
            .and_then(|s| s.strip_prefix('='))
            .ok_or_else(|| {
                err(
                    offset,
                    format!("expected header key `{key}`, found `{line}`"),
                )
            })?;
        values.push((value.to_string(), offset));
        offset += len;
    }
    let (blank, len) = read_line(&mut r).map_err(Error::io(path))?;
    if !blank.is_empty() {
        return Err(err(
            offset,
            format!("expected a blank line ending the header, found `{blank}`"),
        ));
    }
    offset += len;

    let (version, at) = &values[0];
    if version.parse::<u32>().ok() != Some(VERSION) {
        return Err(err(*at, format!("unsupported version `{version}`")));
    }
    let (kind, at) = &values[1];
    let kind = VolumeKind::parse(kind).ok_or_else(|| err(*at, format!("unknown kind `{kind}`")))?;
    let (dims, at) = &values[2];
    let dims = crate::config::parse_dims(dims).map_err(|e| err(*at, e))?;
    let (dtype, at) = &values[3];
    if dtype != kind.dtype() {
        return Err(err(
            *at,
            format!("dtype `{dtype}` does not match kind `{}`", kind.as_str()),
        ));
    }
    let (order, at) = &values[4];
    if order != "abc" {
        return Err(err(*at, format!("unsupported axis order `{order}`")));
    }

    let n: usize = dims.iter().product();
    let size = if kind == VolumeKind::Mask { 1 } else { 4 };
    let mut payload = Vec::with_capacity(n * size);
    r.read_to_end(&mut payload).map_err(Error::io(path))?;
    if payload.len() < n * size {
        return Err(err(
            offset + payload.len(),
            format!(
                "payload truncated: expected {} bytes, found {}",
                n * size,
                payload.len()
            ),
        ));
    }
    if payload.len() > n * size {
        return Err(err(
            offset + n * size,
            format!(
                "{} trailing bytes after the payload",
                payload.len() - n * size
            ),
        ));
    }
    let data: Vec<f32> = if kind == VolumeKind::Mask {
        if let Some(i) = payload.iter().position(|&b| b > 1) {
            return Err(err(
                offset + i,
                format!(
                    "mask value {} at voxel index {i}; masks hold only 0 or 1",
                    payload[i]
                ),
            ));
        }
        payload.iter().map(|&b| b as f32).collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect()
    };
    let vol = Volume::new(dims, data)?;
    let bad = match kind {
        VolumeKind::Scan => vol.first_invalid_intensity(),
        VolumeKind::Prob => vol.data().iter().position(|v| !(0.0..=1.0).contains(v)),
        VolumeKind::Mask => None,
    };
    if let Some(i) = bad {
        return Err(err(
            offset + 4 * i,
            format!(
                "{} value {} at voxel index {i} is out of range",
                kind.as_str(),
                vol.data()[i]
            ),
        ));
    }
    Ok((vol, kind))
}

/// One `\n`-terminated line without the terminator, and its byte length
/// including the terminator.
fn read_line(r: &mut impl BufRead) -> std::io::Result<(String, usize)> {
    let mut buf = Vec::new();
    let len = r.read_until(b'\n', &mut buf)?;
    if buf.last() == Some(&b'\n') {
        buf.pop();
    }
    Ok((String::from_utf8_lossy(&buf).into_owned(), len))
}
