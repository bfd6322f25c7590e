//! Model checkpoint archive: a single file holding the config as TOML text
//! plus every parameter and batch-norm buffer as named little-endian f32
//! blobs with shape headers. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{MassegError, Result};

const MAGIC: &[u8; 8] = b"MSEGCKPT";
const VERSION: u32 = 1;

fn io_err(path: &Path, detail: impl Into<String>) -> MassegError {
    MassegError::Io { path: path.display().to_string(), detail: detail.into() }
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit_params(&mut |name, shape, data| {
        entries.push((name.to_string(), shape.to_vec(), data.to_vec()));
    });
    let mut m = model.clone();
    m.visit_buffers_mut(&mut |name, data| {
        entries.push((name.to_string(), vec![data.len()], data.to_vec()));
    });

    let file = File::create(path).map_err(|e| io_err(path, e.to_string()))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| io_err(path, e.to_string()))
    };
    write(&mut w, MAGIC)?;
    write(&mut w, &VERSION.to_le_bytes())?;
    let config_text =
        toml::to_string(&model.config).map_err(|e| io_err(path, e.to_string()))?;
    write(&mut w, &(config_text.len() as u64).to_le_bytes())?;
    write(&mut w, config_text.as_bytes())?;
    write(&mut w, &(entries.len() as u64).to_le_bytes())?;
    for (name, shape, data) in &entries {
        write(&mut w, &(name.len() as u16).to_le_bytes())?;
        write(&mut w, name.as_bytes())?;
        write(&mut w, &[shape.len() as u8])?;
        for &d in shape {
            write(&mut w, &(d as u64).to_le_bytes())?;
        }
        for &v in data {
            write(&mut w, &v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let file = File::open(path).map_err(|e| io_err(path, e.to_string()))?;
    let mut r = BufReader::new(file);
    let mut read_exact = |buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf)
            .map_err(|e| io_err(path, format!("reading {what}: {e}")))
    };
    let mut magic = [0u8; 8];
    read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(io_err(path, "not a masseg checkpoint (bad magic)"));
    }
    let mut v4 = [0u8; 4];
    read_exact(&mut v4, "version")?;
    if u32::from_le_bytes(v4) != VERSION {
        return Err(io_err(path, format!("unsupported version {}", u32::from_le_bytes(v4))));
    }
    let mut v8 = [0u8; 8];
    read_exact(&mut v8, "config length")?;
    let clen = u64::from_le_bytes(v8) as usize;
    let mut cbuf = vec![0u8; clen];
    read_exact(&mut cbuf, "config")?;
    let config: ModelConfig = toml::from_str(
        std::str::from_utf8(&cbuf).map_err(|e| io_err(path, e.to_string()))?,
    )
    .map_err(|e| io_err(path, e.to_string()))?;

    read_exact(&mut v8, "entry count")?;
    let count = u64::from_le_bytes(v8) as usize;
    let mut entries: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let mut v2 = [0u8; 2];
        read_exact(&mut v2, "name length")?;
        let nlen = u16::from_le_bytes(v2) as usize;
        let mut nbuf = vec![0u8; nlen];
        read_exact(&mut nbuf, "name")?;
        let name = String::from_utf8(nbuf).map_err(|e| io_err(path, e.to_string()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut rank, "rank")?;
        let mut shape = Vec::new();
        for _ in 0..rank[0] {
            read_exact(&mut v8, "extent")?;
            shape.push(u64::from_le_bytes(v8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        for v in &mut data {
            let mut b = [0u8; 4];
            read_exact(&mut b, "payload")?;
            *v = f32::from_le_bytes(b);
        }
        entries.insert(name, (shape, data));
    }

    let mut model = Model::<f32>::build(&config, 0)?;
    let mut missing = Vec::new();
    model.visit_params_mut(&mut |name, shape, data| {
        match entries.remove(name) {
            Some((s, values)) if s == shape && values.len() == data.len() => {
                data.copy_from_slice(&values);
            }
            _ => missing.push(name.to_string()),
        }
    });
    model.visit_buffers_mut(&mut |name, data| {
        match entries.remove(name) {
            Some((_, values)) if values.len() == data.len() => data.copy_from_slice(&values),
            _ => missing.push(name.to_string()),
        }
    });
    if !missing.is_empty() {
        return Err(io_err(path, format!("missing or mismatched entries: {missing:?}")));
    }
    if !entries.is_empty() {
        let extra: Vec<&String> = entries.keys().collect();
        return Err(io_err(path, format!("unknown entries: {extra:?}")));
    }
    Ok(model)
}
