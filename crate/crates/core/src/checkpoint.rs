//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "FSEGCKPT"
//! version    u32
//! height, width, channels_in, stages   u32 each
//! stage widths                          u32 × stages
//! decoder_width                         u32
//! seed                                  u64
//! tensor count                          u32
//! per tensor: name length u32, UTF-8 name, rank u32, dims u32 × rank,
//!             values f64 × numel
//! checksum   u64  FNV-1a over every preceding byte
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a write/read cycle is exact.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, NamedTensor, MAX_STAGES};

pub const MAGIC: &[u8; 8] = b"FSEGCKPT";
pub const VERSION: u32 = 1;
const MAX_NAME: usize = 256;
const MAX_RANK: usize = 8;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(64 + params.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, cfg.height);
    put_u32(&mut out, cfg.width);
    put_u32(&mut out, cfg.channels_in);
    put_u32(&mut out, cfg.stage_widths.len());
    for &w in &cfg.stage_widths {
        put_u32(&mut out, w);
    }
    put_u32(&mut out, cfg.decoder_width);
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    put_u32(&mut out, params.tensors().len());
    for t in params.tensors() {
        put_u32(&mut out, t.name.len());
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.tensor.ndim());
        for &d in t.tensor.shape() {
            put_u32(&mut out, d);
        }
        for v in t.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        msg: msg.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(bad("file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(bad("bad magic number"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let expected = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(body) != expected {
        return Err(bad("checksum mismatch"));
    }
    let height = r.u32("height")?;
    let width = r.u32("width")?;
    let channels_in = r.u32("channels")?;
    let stages = r.u32("stage count")?;
    if stages > MAX_STAGES {
        return Err(bad(format!("{stages} stages")));
    }
    let mut stage_widths = Vec::with_capacity(stages);
    for _ in 0..stages {
        stage_widths.push(r.u32("stage width")?);
    }
    let decoder_width = r.u32("decoder width")?;
    let seed = r.u64("seed")?;
    let config = ModelConfig {
        height,
        width,
        channels_in,
        stage_widths,
        decoder_width,
        seed,
    };
    config.validate().map_err(|e| bad(format!("invalid model config: {e}")))?;

    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u32("name length")?;
        if len > MAX_NAME {
            return Err(bad(format!("tensor name of {len} bytes")));
        }
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(bad(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| bad(format!("{name}: invalid shape {shape:?}")))?;
        let raw = r.take(
            numel.checked_mul(8).ok_or_else(|| bad("tensor too large"))?,
            "tensor data",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if r.pos != body.len() {
        return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
    }
    ModelParams::from_tensors(config, tensors)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            height: 8,
            width: 8,
            stage_widths: vec![3, 5],
            decoder_width: 4,
            seed: 77,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut p = params();
        p.tensors_mut()[1].tensor.data_mut()[0] = -0.0;
        p.tensors_mut()[0].tensor.data_mut()[0] = f64::MIN_POSITIVE / 4.0;
        let back = decode(&encode(&p)).unwrap();
        for (a, b) in p.tensors().iter().zip(back.tensors()) {
            let ab: Vec<u64> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back, p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &p).unwrap();
        assert_eq!(load(&path).unwrap(), p);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&params());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&[]).is_err());
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(decode(&flipped).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
        let mut extra = bytes[..bytes.len() - 8].to_vec();
        extra.push(0);
        let sum = fnv1a(&extra);
        extra.extend_from_slice(&sum.to_le_bytes());
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn every_truncation_fails_cleanly() {
        let bytes = encode(&params());
        for n in 0..bytes.len() {
            assert!(decode(&bytes[..n]).is_err(), "prefix {n}");
        }
    }
}
