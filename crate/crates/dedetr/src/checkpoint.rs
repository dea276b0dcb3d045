//! Binary checkpoint: magic, version, seed, config JSON, then every
//! parameter as name, shape and little-endian f64 data.

use std::io::{Read, Write};
use std::path::Path;

use dedetr_core::nn::ParamStore;
use dedetr_core::Tensor;

use crate::config::RunConfig;
use crate::error::CliError;

const MAGIC: &[u8; 8] = b"DDTRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub params: ParamStore,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CliError::format("checkpoint", "truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, CliError> {
        usize::try_from(self.u64()?).map_err(|_| CliError::format("checkpoint", "length overflow"))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CliError> {
        let n = self.len()?;
        self.take(n)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.seed);
        put_bytes(&mut out, self.config.canonical_json().as_bytes());
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            put_bytes(&mut out, name.as_bytes());
            put_u64(&mut out, t.rank() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CliError::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::format("checkpoint", format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let config: RunConfig = serde_json::from_slice(r.bytes()?)
            .map_err(|e| CliError::format("checkpoint", format!("config: {e}")))?;
        let n = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = std::str::from_utf8(r.bytes()?)
                .map_err(|_| CliError::format("checkpoint", "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let count = count.ok_or_else(|| CliError::format("checkpoint", "shape overflow"))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| CliError::format("checkpoint", "shape overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| CliError::format("checkpoint", e.to_string()))?;
            params.insert(name, t);
        }
        if r.pos != buf.len() {
            return Err(CliError::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint { config, seed, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
