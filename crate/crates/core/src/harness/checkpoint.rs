//! Single-file checkpoints: a text manifest (name, shape, frozen flag, in
//! store order) followed by the raw parameter bytes as little-endian f64,
//! concatenated in the same order. Reloading into an identically built
//! model reproduces forward outputs bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

const MAGIC: &str = "gcdmoe-checkpoint v1";

pub fn save_checkpoint(store: &ParamStore, config_hash: &str, step: u64, path: &Path) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("config_hash={config_hash}\n"));
    header.push_str(&format!("step={step}\n"));
    header.push_str("dtype=f64,little_endian\n");
    header.push_str(&format!("params={}\n", store.len()));
    for p in store.iter() {
        let p = p.borrow();
        header.push_str(&format!(
            "param={} rows={} cols={} trainable={}\n",
            p.name,
            p.rows,
            p.cols,
            u8::from(p.trainable)
        ));
    }
    header.push_str("end_header\n");

    let mut f = std::fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    for p in store.iter() {
        for v in &p.borrow().values {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load parameter values into an already-built store. The manifest must
/// agree with the store on names and shapes; a differing config hash only
/// warns (the caller may be evaluating under an edited config on purpose).
/// Returns the recorded step.
pub fn load_checkpoint(store: &ParamStore, expected_hash: &str, path: &Path) -> Result<u64> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let marker = b"end_header\n";
    let header_end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .map(|p| p + marker.len())
        .ok_or_else(|| Error::Io(format!("{}: missing end_header", path.display())))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Io("checkpoint header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Io(format!("{}: not a {MAGIC} file", path.display())));
    }
    let mut step = 0u64;
    let mut manifest: Vec<(String, usize, usize)> = Vec::new();
    for line in lines {
        if line == "end_header" {
            break;
        }
        if let Some(hash) = line.strip_prefix("config_hash=") {
            if hash != expected_hash {
                eprintln!(
                    "warning: checkpoint was written under config hash {hash}, expected {expected_hash}"
                );
            }
        } else if let Some(s) = line.strip_prefix("step=") {
            step = s
                .parse()
                .map_err(|_| Error::Io(format!("bad step line: {line}")))?;
        } else if let Some(rest) = line.strip_prefix("param=") {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| Error::Io(format!("bad param line: {line}")))?
                .to_string();
            let mut rows = 0;
            let mut cols = 0;
            for kv in parts {
                if let Some(r) = kv.strip_prefix("rows=") {
                    rows = r.parse().map_err(|_| Error::Io("bad rows".into()))?;
                } else if let Some(c) = kv.strip_prefix("cols=") {
                    cols = c.parse().map_err(|_| Error::Io("bad cols".into()))?;
                }
            }
            manifest.push((name, rows, cols));
        }
    }
    if manifest.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters, model expects {}",
            manifest.len(),
            store.len()
        )));
    }
    let expected_bytes: usize = manifest.iter().map(|(_, r, c)| r * c * 8).sum();
    let body = &bytes[header_end..];
    if body.len() != expected_bytes {
        return Err(Error::Io(format!(
            "checkpoint body holds {} bytes, manifest describes {}",
            body.len(),
            expected_bytes
        )));
    }
    let mut offset = 0;
    for (param, (name, rows, cols)) in store.iter().zip(&manifest) {
        let mut p = param.borrow_mut();
        if p.name != *name || p.rows != *rows || p.cols != *cols {
            return Err(Error::Config(format!(
                "checkpoint entry {name} ({rows}x{cols}) does not match model parameter {} ({}x{})",
                p.name, p.rows, p.cols
            )));
        }
        for v in p.values.iter_mut() {
            *v = f64::from_le_bytes(body[offset..offset + 8].try_into().unwrap());
            offset += 8;
        }
    }
    Ok(step)
}
