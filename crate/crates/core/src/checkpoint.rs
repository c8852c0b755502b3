//! Checkpoint container: named parameter tensors plus a config echo.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "AHCK" | u32 version | u32 kind_len | kind utf-8
//! | u32 cfg_len | config json utf-8
//! | u64 n_params | { u32 name_len | name | u32 rows | u32 cols | f64 data }*
//! ```
//!
//! Loading verifies magic, version, kind and — when the caller supplies
//! an expected config — the exact config echo, so a checkpoint can never
//! be silently loaded into a model of a different shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"AHCK";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub kind: String,
    pub config_json: String,
    pub params: ParamStore,
}

pub fn save(path: &Path, kind: &str, config_json: &str, params: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut w, kind)?;
    write_str(&mut w, config_json)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, value) in params.iter() {
        write_str(&mut w, name)?;
        w.write_all(&(value.nrows() as u32).to_le_bytes())?;
        w.write_all(&(value.ncols() as u32).to_le_bytes())?;
        for v in value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let kind = read_str(&mut r)?;
    let config_json = read_str(&mut r)?;
    let n = read_u64(&mut r)?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = read_str(&mut r)?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        for v in data.iter_mut() {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let arr = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.insert(&name, arr);
    }
    Ok(Checkpoint {
        kind,
        config_json,
        params,
    })
}

/// Load and insist on a specific kind and config echo.
pub fn load_expected(path: &Path, kind: &str, config_json: &str) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    if ckpt.kind != kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint kind {:?} does not match expected {:?}",
            ckpt.kind, kind
        )));
    }
    if ckpt.config_json != config_json {
        return Err(Error::Checkpoint(format!(
            "checkpoint config mismatch:\n  stored:   {}\n  expected: {}",
            ckpt.config_json, config_json
        )));
    }
    Ok(ckpt)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(Error::Checkpoint("oversized string field".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_preserves_bytes_and_rejects_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut params = ParamStore::new();
        params.insert("layer.w", array![[1.5, -2.25], [0.0, 1e-30]]);
        params.insert("layer.b", array![[0.125]]);
        save(&path, "acoustic", "{\"d\":8}", &params).unwrap();

        let ckpt = load_expected(&path, "acoustic", "{\"d\":8}").unwrap();
        assert_eq!(ckpt.params.checksum(""), params.checksum(""));

        assert!(load_expected(&path, "acoustic", "{\"d\":9}").is_err());
        assert!(load_expected(&path, "aggregation", "{\"d\":8}").is_err());
    }
}
