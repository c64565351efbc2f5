//! Binary checkpoint format.
//!
//! ```text
//! "CODC" | version u32 | stage u8 | seed u64 | config (u32 length + UTF-8)
//! | parameter count u32 | per parameter: name (u16 length + UTF-8),
//!   rank u8, dims u32 each, f32 data
//! ```
//!
//! Integers and floats are little-endian. Parameter names carry their
//! store as a prefix (`encoder/conv0.w`).

use std::path::Path;

use codac_core::nn::ParamStore;
use codac_core::pipeline::{Checkpoint, Stage};
use codac_core::Tensor;

use crate::config_text::{format_config, parse_config};
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"CODC";
pub const VERSION: u32 = 1;

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(ck.stage.tag());
    out.extend_from_slice(&ck.seed.to_le_bytes());
    let cfg = format_config(&ck.config);
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let count: usize = ck.stores().iter().map(|(_, s)| s.len()).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (store, params) in ck.stores() {
        for (name, t) in params.iter() {
            let full = format!("{store}/{name}");
            let len = u16::try_from(full.len()).map_err(|_| CliError::format(format!("parameter name too long: {full}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CliError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn utf8(&mut self, n: usize, what: &'static str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?).map_err(|_| CliError::format(format!("checkpoint {what} is not UTF-8")))
    }
}

/// Parses a whole checkpoint and checks its parameters against the layout
/// implied by the embedded configuration. Nothing is returned unless every
/// check passes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CliError::NotCheckpoint);
    }
    r.pos = 4;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CliError::Version { found: version, expected: VERSION });
    }
    let stage = Stage::from_tag(r.u8("stage tag")?)?;
    let seed = r.u64("seed")?;
    let cfg_len = r.u32("config length")? as usize;
    let config = parse_config(r.utf8(cfg_len, "config")?)?;
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("parameter name length")? as usize;
        let name = r.utf8(name_len, "parameter name")?.to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(CliError::Truncated("data"))?, "data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(CliError::format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }

    let expected = Checkpoint::expected_layout(&config, stage)?;
    if expected.len() != params.len() {
        return Err(CliError::format(format!(
            "checkpoint holds {} parameters, configuration expects {}",
            params.len(),
            expected.len()
        )));
    }
    let mut ck = Checkpoint {
        stage,
        config,
        seed,
        cde: ParamStore::new(),
        encoder: ParamStore::new(),
        weight_head: ParamStore::new(),
        projection: ParamStore::new(),
        classifier: ParamStore::new(),
    };
    for ((store, name, shape), (full, t)) in expected.into_iter().zip(params) {
        let want = format!("{store}/{name}");
        if full != want || t.shape() != shape.as_slice() {
            return Err(CliError::format(format!(
                "parameter `{full}` {:?} does not match configuration (`{want}` {shape:?})",
                t.shape()
            )));
        }
        let target = ck.stores_mut().into_iter().find(|(s, _)| *s == store).expect("known store").1;
        target.insert(name, t)?;
    }
    Ok(ck)
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ck)?).map_err(CliError::io(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    decode(&bytes)
}
