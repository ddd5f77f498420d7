//! Lossless binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"TGRC"
//! version u32 (currently 1)
//! config  u64 length + UTF-8 bytes (canonical config text)
//! count   u64 number of tensor entries
//! entry   u64 name length + UTF-8 name
//!         u8  rank, then u64 per dimension
//!         f64 little-endian per element (row-major)
//! ```
//!
//! Entries are written in sorted-name order; f64 bits round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TGRC";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, config_text: &str, entries: &[(String, &Tensor)]) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::data(format!("cannot create checkpoint {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::data(format!("checkpoint write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(config_text.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(config_text.as_bytes()).map_err(io)?;
    w.write_all(&(entries.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&[tensor.ndim() as u8]).map_err(io)?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{} is not a checkpoint (bad magic bytes)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_len = read_u64(&mut r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    read_exact(&mut r, &mut config_bytes)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| Error::data("checkpoint config text is not valid UTF-8"))?;
    let count = read_u64(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::data("checkpoint entry name is not valid UTF-8"))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push((name, Tensor::new(shape, data)));
    }
    Ok((config_text, entries))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::data(format!("checkpoint truncated or unreadable: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        // Values chosen to stress f64 round-tripping.
        let t1 = Tensor::matrix(2, 3, vec![0.1, -1.0 / 3.0, 1e-300, f64::MAX, 2.0f64.sqrt(), -0.0]);
        let t2 = Tensor::vector(vec![std::f64::consts::PI]);
        let entries = vec![("a.w".to_string(), &t1), ("b.v".to_string(), &t2)];
        save_checkpoint(&path, "seed = 7\n", &entries).unwrap();
        let (config, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(config, "seed = 7\n");
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "a.w");
        assert_eq!(loaded[0].1.shape(), &[2, 3]);
        for (orig, read) in t1.data().iter().zip(loaded[0].1.data()) {
            assert_eq!(orig.to_bits(), read.to_bits());
        }
        assert_eq!(loaded[1].1.data(), t2.data());
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let garbage = dir.path().join("garbage.bin");
        std::fs::write(&garbage, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&garbage).is_err());

        let path = dir.path().join("model.bin");
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        save_checkpoint(&path, "", &[("w".to_string(), &t)]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 4]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let err = load_checkpoint(Path::new("/nonexistent/model.bin")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
