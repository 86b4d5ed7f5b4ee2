//! On-disk formats.
//!
//! Checkpoint container (single file, little-endian):
//!
//! ```text
//!   magic   "VTTT"
//!   version u32
//!   mlen    u32           manifest byte length
//!   manifest: mlen bytes of UTF-8, one `name dtype d0xd1x...` line per tensor
//!   payload: concatenated raw f32 arrays in manifest order
//! ```
//!
//! Datasets are directories of single-tensor containers plus a raw
//! little-endian `labels.u32` file.

use crate::backbone::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::ToyDataset;
use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VTTT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "1".to_string()
    } else {
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Io(format!("bad shape component `{p}`")))
        })
        .collect()
}

/// Writes named tensors into the container format.
pub fn write_container(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut manifest = String::new();
    for (name, t) in tensors {
        manifest.push_str(&format!("{name} f32 {}\n", shape_str(t.shape())));
    }
    let mbytes = manifest.as_bytes();
    let mut out = Vec::with_capacity(12 + mbytes.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(mbytes.len() as u32).to_le_bytes());
    out.extend_from_slice(mbytes);
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads a container back as `(name, tensor)` pairs in serialization order.
pub fn read_container(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Io(format!("{}: not a VTTT container", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Io(format!("unsupported container version {version}")));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + mlen {
        return Err(Error::Io("truncated manifest".into()));
    }
    let manifest = std::str::from_utf8(&bytes[12..12 + mlen])
        .map_err(|_| Error::Io("manifest is not UTF-8".into()))?;
    let mut tensors = Vec::new();
    let mut offset = 12 + mlen;
    for line in manifest.lines() {
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::Io("empty manifest line".into()))?;
        let dtype = parts
            .next()
            .ok_or_else(|| Error::Io("manifest line missing dtype".into()))?;
        if dtype != "f32" {
            return Err(Error::Io(format!("unsupported dtype `{dtype}`")));
        }
        let shape = parse_shape(
            parts
                .next()
                .ok_or_else(|| Error::Io("manifest line missing shape".into()))?,
        )?;
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if bytes.len() < end {
            return Err(Error::Io("truncated payload".into()));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let v = f32::from_le_bytes(bytes[offset + 4 * i..offset + 4 * i + 4].try_into().unwrap());
            data.push(v as f64);
        }
        offset = end;
        tensors.push((name.to_string(), Tensor::from_vec(&shape, data)?));
    }
    if offset != bytes.len() {
        return Err(Error::Io("trailing bytes after payload".into()));
    }
    Ok(tensors)
}

/// Saves every model tensor (learnable and buffers) in visit order.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    params.visit(&mut |name, t, _| named.push((name, t)));
    write_container(path, &named)
}

/// Restores a checkpoint into a freshly constructed model of the given
/// config. Every tensor must be present with a matching shape; extras are
/// rejected.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut params = ModelParams::init(cfg, &mut rng)?;
    let loaded = read_container(path)?;
    let mut by_name: HashMap<String, Tensor> = loaded.into_iter().collect();
    let mut missing = Vec::new();
    let mut failed: Option<Error> = None;
    params.visit_mut(&mut |name, t, _| {
        match by_name.remove(&name) {
            Some(loaded) => {
                if loaded.len() != t.len() {
                    failed = Some(Error::Io(format!(
                        "tensor `{name}`: {} elements in file, expected {}",
                        loaded.len(),
                        t.len()
                    )));
                } else {
                    t.data_mut().copy_from_slice(loaded.data());
                }
            }
            None => missing.push(name),
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::Io(format!("checkpoint missing tensors: {missing:?}")));
    }
    if !by_name.is_empty() {
        let extras: Vec<&String> = by_name.keys().collect();
        return Err(Error::Io(format!("checkpoint has unknown tensors: {extras:?}")));
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

pub fn save_dataset_dir(dir: &Path, data: &ToyDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, img) in data.images.iter().enumerate() {
        let path = dir.join(format!("img_{i:05}.vttt"));
        write_container(&path, &[(format!("img_{i:05}"), img)])?;
    }
    let mut bytes = Vec::with_capacity(4 * data.labels.len());
    for &l in &data.labels {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(dir.join("labels.u32"), bytes)?;
    Ok(())
}

pub fn load_dataset_dir(dir: &Path) -> Result<ToyDataset> {
    let labels_raw = fs::read(dir.join("labels.u32"))?;
    if labels_raw.len() % 4 != 0 {
        return Err(Error::Io("labels.u32 length not a multiple of 4".into()));
    }
    let labels: Vec<u32> = labels_raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut images = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        let path = dir.join(format!("img_{i:05}.vttt"));
        let mut tensors = read_container(&path)?;
        if tensors.len() != 1 {
            return Err(Error::Io(format!("{}: expected one tensor", path.display())));
        }
        images.push(tensors.pop().unwrap().1);
    }
    let num_classes = labels.iter().copied().max().map(|m| m as usize + 1).unwrap_or(0);
    Ok(ToyDataset {
        images,
        labels,
        num_classes,
    })
}

// ---------------------------------------------------------------------------
// CSV and PGM exports
// ---------------------------------------------------------------------------

/// Writes a row-major grid as CSV with one line per grid row.
pub fn write_csv_grid(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::Shape(format!(
            "csv grid: {} values for {rows}x{cols}",
            values.len()
        )));
    }
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|c| format!("{:.17e}", values[r * cols + c]))
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes a binary PGM (P5) image; values are scaled so the max maps to 255.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::Shape(format!(
            "pgm: {} values for {rows}x{cols}",
            values.len()
        )));
    }
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for &v in values {
        out.push((v.max(0.0) * scale).round().min(255.0) as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::synthetic_blobs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("vittt-io-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tmpdir("ckpt");
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();

        let p1 = dir.join("a.vttt");
        let p2 = dir.join("b.vttt");
        save_checkpoint(&p1, &params).unwrap();
        let reloaded = load_checkpoint(&p1, &cfg).unwrap();
        save_checkpoint(&p2, &reloaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn checkpoint_rejects_wrong_architecture() {
        let dir = tmpdir("arch");
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let p = dir.join("m.vttt");
        save_checkpoint(&p, &params).unwrap();
        let mut other = cfg.clone();
        other.depth = 1;
        assert!(load_checkpoint(&p, &other).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tmpdir("data");
        let data = synthetic_blobs(8, 8, 3, 12, 5);
        save_dataset_dir(&dir, &data).unwrap();
        let back = load_dataset_dir(&dir).unwrap();
        assert_eq!(back.labels, data.labels);
        assert_eq!(back.num_classes, data.num_classes);
        // values go through f32, so compare with that precision
        for (a, b) in back.images.iter().zip(&data.images) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= (*y as f32).abs() as f64 * 1e-6 + 1e-7);
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pgm_header_and_scaling() {
        let dir = tmpdir("pgm");
        let p = dir.join("m.pgm");
        write_pgm(&p, 2, 3, &[0.0, 1.0, 2.0, 3.0, 4.0, 8.0]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes[bytes.len() - 1], 255); // max value
        fs::remove_dir_all(&dir).unwrap();
    }
}
