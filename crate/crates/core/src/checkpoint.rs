//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MSSL"            magic
//! u16               format version (1)
//! u32               epoch
//! [u8; 32] u64 u128 generator seed, stream and word position
//! u32 + bytes       UTF-8 config snapshot
//! u32               parameter count
//!   u32 + bytes     UTF-8 parameter name
//!   u32 + u32 * n   rank, then each dimension
//! f32 * Σ numel     payload, parameters concatenated in manifest order
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MSSL";
pub const VERSION: u16 = 1;

/// Resumable state of a `ChaCha8Rng`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: String,
    pub rng: RngState,
    pub epoch: u32,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} at byte {at} is not valid UTF-8")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            params,
            ..Default::default()
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + self.config.len() + self.params.numel() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u32(&mut out, self.config.len(), "config length")?;
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.params.len(), "parameter count")?;
        for (name, t) in self.params.iter() {
            put_u32(&mut out, name.len(), "name length")?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len(), "rank")?;
            for &d in t.shape() {
                put_u32(&mut out, d, "dimension")?;
            }
        }
        for (_, t) in self.params.iter() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic, expected \"MSSL\"".into()));
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let epoch = r.u32("epoch")?;
        let rng = RngState {
            seed: r.array("rng seed")?,
            stream: u64::from_le_bytes(r.array("rng stream")?),
            word_pos: u128::from_le_bytes(r.array("rng word position")?),
        };
        let config = r.string("config snapshot")?;
        let count = r.u32("parameter count")? as usize;
        let mut manifest = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape.is_empty() || shape.contains(&0) {
                return Err(Error::Checkpoint(format!("parameter `{name}` has invalid shape {shape:?}")));
            }
            manifest.push((name, shape));
        }
        let expected: usize = manifest
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() * 4)
            .sum();
        let found = bytes.len() - r.pos;
        if found != expected {
            return Err(Error::PayloadLength { expected, found });
        }
        let mut params = ParamStore::new();
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
            params.insert(name, t);
        }
        Ok(Self {
            params,
            config,
            rng,
            epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
