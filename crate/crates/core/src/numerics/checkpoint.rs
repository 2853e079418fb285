//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   b"TKMX"
//! version u32 (currently 1)
//! record* name_len u32, name utf-8 bytes,
//!         rank u32, dims u32 * rank,
//!         data f32 * product(dims)
//! ```
//!
//! Values are stored as f32 regardless of the in-memory scalar type, so a
//! round trip is bit-exact for f32 models and truncating for wider ones.

use crate::error::{Error, Result};
use crate::numerics::optim::ParamStore;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TKMX";
const VERSION: u32 = 1;

pub fn write_checkpoint<S: Scalar>(path: impl AsRef<Path>, params: &ParamStore<S>) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<S>)>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cursor = Cursor {
        bytes: &bytes,
        pos: 0,
    };

    let magic = cursor.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = cursor.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }

    let mut records = Vec::new();
    while !cursor.done() {
        let name_len = cursor.u32()? as usize;
        let name = std::str::from_utf8(cursor.take(name_len)?)
            .map_err(|_| Error::format("parameter name is not valid utf-8"))?
            .to_string();
        let rank = cursor.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cursor.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(S::cast(cursor.f32()? as f64));
        }
        records.push((name, Tensor::new(dims, data)?));
    }
    Ok(records)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "unexpected end of file at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("patch.weight", Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap())
            .unwrap();
        s.add("patch.bias", Tensor::new(vec![3], vec![1.5, -2.5, 3.5]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bit_exact_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tkmx");
        let store = sample_store();
        write_checkpoint(&path, &store).unwrap();
        let records = read_checkpoint::<f32>(&path).unwrap();
        assert_eq!(records.len(), 2);
        for (p, (name, value)) in store.iter().zip(&records) {
            assert_eq!(&p.name, name);
            assert_eq!(p.value.dims(), value.dims());
            assert_eq!(p.value.data(), value.data());
        }

        let mut reloaded = sample_store();
        reloaded.load(records).unwrap();
    }

    #[test]
    fn write_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.tkmx");
        let b = dir.path().join("b.tkmx");
        let store = sample_store();
        write_checkpoint(&a, &store).unwrap();
        write_checkpoint(&b, &store).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tkmx");

        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&path),
            Err(Error::Format(_))
        ));

        let mut bytes = b"TKMX".to_vec();
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&path),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.tkmx");
        let store = sample_store();
        write_checkpoint(&path, &store).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&path),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_checkpoint::<f32>("/definitely/not/here.tkmx"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn load_rejects_mismatches() {
        let mut store = sample_store();
        let records = vec![(
            "patch.weight".to_string(),
            Tensor::<f32>::zeros(vec![2, 3]),
        )];
        assert!(store.load(records).is_err());
    }
}
