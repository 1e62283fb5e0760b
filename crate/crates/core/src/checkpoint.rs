//! Versioned binary checkpoints: a magic string, the run's config echo, and
//! every parameter as name + shape + little-endian doubles.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"SEQLAB-CKPT-v1\n";

pub fn save(path: &Path, config_text: &str, store: &ParamStore) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let config_bytes = config_text.as_bytes();
    buf.extend_from_slice(&(config_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_bytes);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse("checkpoint truncated".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn load(path: &Path) -> Result<(String, ParamStore)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Parse(format!(
            "{} is not a seqlab checkpoint (bad magic)",
            path.display()
        )));
    }
    let config_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| Error::Parse("config echo is not UTF-8".into()))?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Parse("parameter name is not UTF-8".into()))?;
        let ndims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse(
            "trailing bytes after checkpoint payload".into(),
        ));
    }
    Ok((config_text, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn round_trips_params_and_config_bit_exactly() {
        let dir = std::env::temp_dir().join("seqlab-ckpt-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.bin");

        let mut rng = RngStream::new(3);
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::xavier(3, 5, &mut rng));
        store.insert(
            "b",
            Tensor::new(vec![4], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        );
        let config = "family = transformer\nseed = 7\n";

        save(&path, config, &store).unwrap();
        let (config2, store2) = load(&path).unwrap();
        assert_eq!(config, config2);
        assert_eq!(store.len(), store2.len());
        for (name, t) in store.iter() {
            let t2 = store2.get(name).unwrap();
            assert_eq!(t.shape(), t2.shape());
            let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, bits2);
        }
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("seqlab-ckpt-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad-magic.bin");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load(&path).is_err());
        fs::remove_file(&path).unwrap();
    }
}
