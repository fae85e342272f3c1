//! Versioned parameter container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "DDTRCKPT"  version  config_len  config (UTF-8)
//! param_count
//! repeated: name_len  name  ndim  dims[ndim]  values (f32 LE, row-major)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DDTRCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Echo of the run configuration the parameters were trained with.
    pub config: String,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: &str) -> Self {
        Self {
            config: config.to_string(),
            params: store
                .iter()
                .map(|(_, p)| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().iter().map(|&x| x as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let u32le = |b: &mut Vec<u8>, x: usize| b.extend_from_slice(&(x as u32).to_le_bytes());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        u32le(&mut b, self.config.len());
        b.extend_from_slice(self.config.as_bytes());
        u32le(&mut b, self.params.len());
        for p in &self.params {
            u32le(&mut b, p.name.len());
            b.extend_from_slice(p.name.as_bytes());
            u32le(&mut b, p.shape.len());
            for &d in &p.shape {
                u32le(&mut b, d);
            }
            for v in &p.values {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(r.error(0, "bad magic, not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error(8, &format!("unsupported version {version}")));
        }
        let clen = r.u32("config length")? as usize;
        let config = r.string(clen, "config")?;
        let count = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let name = r.string(nlen, "name")?;
            let ndim = r.u32("rank")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| r.error(r.pos as u64, &format!("size of `{name}` overflows")))?;
            let raw = r.take(numel * 4, &format!("values of `{name}`"))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(StoredParam { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, "trailing bytes after last parameter"));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    /// Copies stored values into `store`. Every parameter must be present
    /// with the same shape.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            let missing: Vec<&str> = store
                .iter()
                .filter(|(_, p)| !self.params.iter().any(|s| s.name == p.name))
                .map(|(_, p)| p.name.as_str())
                .collect();
            let extra: Vec<&str> = self
                .params
                .iter()
                .filter(|s| store.find(&s.name).is_none())
                .map(|s| s.name.as_str())
                .collect();
            return Err(Error::Checkpoint(format!(
                "parameter sets differ: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for p in &self.params {
            let id = store
                .find(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", p.name)))?;
            let expect = store.value(id).shape().to_vec();
            if expect != p.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?} in checkpoint but {:?} in model",
                    p.name, p.shape, expect
                )));
            }
            let t = Tensor::new(&p.shape, p.values.iter().map(|&x| f64::from(x)).collect())?;
            store.set(id, t)?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: u64, message: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.error(
                self.pos as u64,
                &format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len().saturating_sub(self.pos)
                ),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.pos as u64;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.error(at, &format!("{what} is not UTF-8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap());
        s.add("a.bias", Tensor::vector(vec![-0.25, 0.125, 8.0]));
        s
    }

    #[test]
    fn round_trip() {
        let s = store();
        let c = Checkpoint::from_store(&s, "d_model = 8\n");
        let back = Checkpoint::from_bytes(Path::new("mem"), &c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let mut t = store();
        t.value_mut(t.find("a.bias").unwrap()).data_mut()[0] = 99.0;
        back.apply(&mut t).unwrap();
        assert_eq!(t.value(t.find("a.bias").unwrap()).data()[0], -0.25);
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let c = Checkpoint::from_store(&store(), "");
        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(&[3, 2]));
        other.add("a.bias", Tensor::zeros(&[3]));
        let err = c.apply(&mut other).unwrap_err().to_string();
        assert!(err.contains("a.weight"), "{err}");
    }

    #[test]
    fn missing_parameter_reported() {
        let c = Checkpoint::from_store(&store(), "");
        let mut other = store();
        other.add("b.extra", Tensor::zeros(&[1]));
        let err = c.apply(&mut other).unwrap_err().to_string();
        assert!(err.contains("b.extra"), "{err}");
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = Checkpoint::from_store(&store(), "x").to_bytes();
        let err = Checkpoint::from_bytes(Path::new("f"), &bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = Checkpoint::from_bytes(Path::new("f"), &bad).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }
}
