//! The "vraw" on-disk volume format and the dataset manifest.
//!
//! A volume is stored as a structured-text header (`.vraw`) plus a raw
//! little-endian payload file next to it. The header records extents, spacing,
//! origin, dtype, byte order, the payload file name, and a SHA-256 checksum of
//! the payload bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LesionAnnotation, Volume};
use crate::error::{MassegError, Result};

/// Element types storable in a vraw payload.
pub trait VoxelScalar: Copy {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl VoxelScalar for f32 {
    const DTYPE: &'static str = "r32";
    const BYTES: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl VoxelScalar for u8 {
    const DTYPE: &'static str = "u8";
    const BYTES: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

fn io_err(path: &Path, detail: impl Into<String>) -> MassegError {
    MassegError::Io {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

/// Writes a volume as a vraw header plus a sibling `.raw` payload file.
pub fn write_volume<T: VoxelScalar>(volume: &Volume<T>, path: &Path) -> Result<()> {
    let mut payload = Vec::with_capacity(volume.data.len() * T::BYTES);
    for &v in &volume.data {
        v.write_le(&mut payload);
    }
    let checksum = hex(&Sha256::digest(&payload));
    let raw = payload_path(path);
    let raw_name = raw
        .file_name()
        .ok_or_else(|| io_err(path, "path has no file name"))?
        .to_string_lossy()
        .into_owned();
    let header = format!(
        "vraw 1\n\
         extents {} {} {}\n\
         spacing {} {} {}\n\
         origin {} {} {}\n\
         dtype {}\n\
         byteorder little\n\
         payload {}\n\
         checksum sha256 {}\n",
        volume.extents[0],
        volume.extents[1],
        volume.extents[2],
        volume.spacing[0],
        volume.spacing[1],
        volume.spacing[2],
        volume.origin[0],
        volume.origin[1],
        volume.origin[2],
        T::DTYPE,
        raw_name,
        checksum
    );
    fs::write(path, header).map_err(|e| io_err(path, e.to_string()))?;
    fs::write(&raw, payload).map_err(|e| io_err(&raw, e.to_string()))?;
    Ok(())
}

struct Header {
    extents: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: String,
    payload: String,
    checksum: String,
}

fn parse_header(path: &Path, text: &str) -> Result<Header> {
    let mut extents = None;
    let mut spacing = None;
    let mut origin = None;
    let mut dtype = None;
    let mut payload = None;
    let mut checksum = None;
    let mut byte_offset = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let at = format!("line {} (byte offset {byte_offset})", lineno + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["vraw", "1"] if lineno == 0 => {}
            _ if lineno == 0 => {
                return Err(io_err(path, format!("{at}: expected `vraw 1` magic")))
            }
            ["extents", z, y, x] => {
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| io_err(path, format!("{at}: bad extent `{s}`")))
                };
                let e = [parse(z)?, parse(y)?, parse(x)?];
                if e.iter().any(|&v| v == 0) {
                    return Err(io_err(path, format!("{at}: zero extent")));
                }
                extents = Some(e);
            }
            ["spacing", z, y, x] | ["origin", z, y, x] => {
                let parse = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|_| io_err(path, format!("{at}: bad real `{s}`")))
                };
                let v = [parse(z)?, parse(y)?, parse(x)?];
                if fields[0] == "spacing" {
                    if v.iter().any(|&s| !(s > 0.0)) {
                        return Err(io_err(path, format!("{at}: non-positive spacing")));
                    }
                    spacing = Some(v);
                } else {
                    origin = Some(v);
                }
            }
            ["dtype", d] => dtype = Some(d.to_string()),
            ["byteorder", "little"] => {}
            ["byteorder", other] => {
                return Err(io_err(path, format!("{at}: unsupported byte order `{other}`")))
            }
            ["payload", p] => payload = Some(p.to_string()),
            ["checksum", "sha256", c] => checksum = Some(c.to_string()),
            [] => {}
            _ => return Err(io_err(path, format!("{at}: unrecognized header line"))),
        }
        byte_offset += line.len() + 1;
    }
    let missing = |what: &str| io_err(path, format!("header missing `{what}` line"));
    Ok(Header {
        extents: extents.ok_or_else(|| missing("extents"))?,
        spacing: spacing.ok_or_else(|| missing("spacing"))?,
        origin: origin.ok_or_else(|| missing("origin"))?,
        dtype: dtype.ok_or_else(|| missing("dtype"))?,
        payload: payload.ok_or_else(|| missing("payload"))?,
        checksum: checksum.ok_or_else(|| missing("checksum"))?,
    })
}

fn read_volume<T: VoxelScalar>(path: &Path) -> Result<Volume<T>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e.to_string()))?;
    let header = parse_header(path, &text)?;
    if header.dtype != T::DTYPE {
        return Err(io_err(
            path,
            format!("dtype is `{}`, expected `{}`", header.dtype, T::DTYPE),
        ));
    }
    let raw = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.payload);
    let payload = fs::read(&raw).map_err(|e| io_err(&raw, e.to_string()))?;
    let expected = header.extents.iter().product::<usize>() * T::BYTES;
    if payload.len() != expected {
        return Err(io_err(
            &raw,
            format!(
                "payload truncated at byte {}: expected {expected} bytes, found {}",
                payload.len(),
                payload.len()
            ),
        ));
    }
    let checksum = hex(&Sha256::digest(&payload));
    if checksum != header.checksum {
        return Err(io_err(
            &raw,
            format!(
                "checksum mismatch over bytes 0..{}: header {} vs payload {checksum}",
                payload.len(),
                header.checksum
            ),
        ));
    }
    let data = payload
        .chunks_exact(T::BYTES)
        .map(T::read_le)
        .collect();
    Volume::from_data(header.extents, header.spacing, header.origin, data)
}

/// Reads an image volume (dtype r32).
pub fn read_volume_r32(path: &Path) -> Result<Volume<f32>> {
    read_volume::<f32>(path)
}

/// Reads a mask volume (dtype u8) and checks that it is binary.
pub fn read_volume_u8(path: &Path) -> Result<Volume<u8>> {
    let v = read_volume::<u8>(path)?;
    if v.data.iter().any(|&x| x > 1) {
        return Err(io_err(path, "mask volume contains labels other than {0,1}"));
    }
    Ok(v)
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One dataset case: a case id, image and mask paths (relative to the
/// manifest), and lesion annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub lesions: Vec<LesionAnnotation>,
}

/// The dataset manifest, stored as TOML.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub cases: Vec<CaseEntry>,
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(manifest)
        .map_err(|e| io_err(path, format!("manifest serialization failed: {e}")))?;
    fs::write(path, text).map_err(|e| io_err(path, e.to_string()))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e.to_string()))?;
    toml::from_str(&text).map_err(|e| io_err(path, format!("manifest parse error: {e}")))
}
