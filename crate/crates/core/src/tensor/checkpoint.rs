//! Flat binary parameter checkpoints.
//!
//! Layout: magic `PSFC`, version u32, param count u32; then per parameter:
//! name length u32, UTF-8 name bytes, rank u32, dims as u64s, and the raw
//! values as little-endian f64s. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::nn::Param;
use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PSFC";
const VERSION: u32 = 1;

/// Write parameters to `path` in declaration order.
pub fn save_params<'a>(
    path: impl AsRef<Path>,
    params: impl IntoIterator<Item = &'a Param>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let params: Vec<&Param> = params.into_iter().collect();
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(params.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Read every `(name, tensor)` pair from a checkpoint.
pub fn load_raw(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, path)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        if name_len > 1 << 20 {
            return Err(bad("implausible name length"));
        }
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, path)?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let rank = read_u32(&mut r, path)? as usize;
        if rank > 8 {
            return Err(bad("implausible rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, path)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        for v in &mut data {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, path)?;
            *v = f64::from_le_bytes(b);
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Load a checkpoint into existing parameters, matched by name.
///
/// Every parameter must be present with an identical shape.
pub fn load_params<'a>(
    path: impl AsRef<Path>,
    params: impl IntoIterator<Item = &'a mut Param>,
) -> Result<()> {
    let entries = load_raw(&path)?;
    let by_name: std::collections::HashMap<&str, &Tensor> =
        entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for p in params {
        let t = by_name.get(p.name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("parameter '{}' missing from checkpoint", p.name))
        })?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{}': checkpoint shape {:?} vs model shape {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = (*t).clone();
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_values_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let a = Param::new(
            "layer.w",
            Tensor::new(vec![2, 3], vec![0.1, -0.25, 1e-300, 3.5, f64::MIN_POSITIVE, 7.0])
                .unwrap(),
        );
        let b = Param::new("layer.b", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        save_params(&path, [&a, &b]).unwrap();

        let mut a2 = Param::new("layer.w", Tensor::zeros(vec![2, 3]));
        let mut b2 = Param::new("layer.b", Tensor::zeros(vec![3]));
        load_params(&path, [&mut a2, &mut b2]).unwrap();
        assert_eq!(a2.value.data(), a.value.data());
        assert_eq!(b2.value.data(), b.value.data());
    }

    #[test]
    fn missing_param_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let a = Param::new("x", Tensor::scalar(1.0));
        save_params(&path, [&a]).unwrap();
        let mut other = Param::new("y", Tensor::scalar(0.0));
        let err = load_params(&path, [&mut other]).unwrap_err();
        assert!(err.to_string().contains("'y'"));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let a = Param::new("x", Tensor::zeros(vec![2, 2]));
        save_params(&path, [&a]).unwrap();
        let mut b = Param::new("x", Tensor::zeros(vec![4]));
        let err = load_params(&path, [&mut b]).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        std::fs::write(&path, b"PSFC\x01\x00").unwrap();
        assert!(load_raw(&path).is_err());
    }
}
