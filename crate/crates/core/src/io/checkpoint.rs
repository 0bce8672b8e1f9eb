use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use super::{header_text, read_bytes, split_header, take_f64s, write_atomic};
use crate::error::{FormatError, Result};
use crate::model::{RdfNetConfig, RdfNetParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "RDFCK1";

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn config_pairs(cfg: &RdfNetConfig, count: usize) -> Vec<(&'static str, String)> {
    vec![
        ("phases", cfg.phases.to_string()),
        ("blocks", cfg.blocks.to_string()),
        ("pool_size", cfg.pool_size.to_string()),
        ("in_bands", cfg.in_bands.to_string()),
        ("feat_channels", cfg.feat_channels.to_string()),
        ("rho_init", cfg.rho_init.to_string()),
        ("rho_learnable", cfg.rho_learnable.to_string()),
        ("tau_mode", cfg.tau_mode.to_string()),
        ("momentum_rule", cfg.momentum_rule.to_string()),
        ("init", cfg.init.to_string()),
        ("records", count.to_string()),
    ]
}

fn parse_config(pairs: &[(String, String)]) -> Result<(RdfNetConfig, usize)> {
    let mut cfg = RdfNetConfig::default();
    let mut records = None;
    let mut seen = Vec::new();
    let bad = |k: &str, v: &str| FormatError::BadHeader(format!("invalid {k} = {v:?}"));
    for (k, v) in pairs {
        let n = || v.parse::<usize>().map_err(|_| bad(k, v));
        let b = || v.parse::<bool>().map_err(|_| bad(k, v));
        match k.as_str() {
            "phases" => cfg.phases = n()?,
            "blocks" => cfg.blocks = n()?,
            "pool_size" => cfg.pool_size = n()?,
            "in_bands" => cfg.in_bands = n()?,
            "feat_channels" => cfg.feat_channels = n()?,
            "rho_init" => cfg.rho_init = v.parse().map_err(|_| bad(k, v))?,
            "rho_learnable" => cfg.rho_learnable = b()?,
            "tau_mode" => cfg.tau_mode = v.parse().map_err(|_| bad(k, v))?,
            "momentum_rule" => cfg.momentum_rule = v.parse().map_err(|_| bad(k, v))?,
            "init" => cfg.init = v.parse().map_err(|_| bad(k, v))?,
            "records" => records = Some(n()?),
            _ => return Err(FormatError::BadHeader(format!("unknown key {k:?}")).into()),
        }
        seen.push(k.as_str());
    }
    for key in config_pairs(&cfg, 0).iter().map(|(k, _)| *k) {
        if !seen.contains(&key) {
            return Err(FormatError::BadHeader(format!("missing key {key}")).into());
        }
    }
    cfg.validate().map_err(|e| FormatError::BadHeader(e.to_string()))?;
    Ok((cfg, records.unwrap_or(0)))
}

pub fn encode_checkpoint(params: &RdfNetParams) -> Vec<u8> {
    let store = params.store();
    let mut out = header_text(CHECKPOINT_MAGIC, &config_pairs(params.config(), store.len()));
    let start = out.len();
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out[start..]);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::TruncatedPayload { expected: self.pos.saturating_add(n), found: self.bytes.len() }),
        }
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<RdfNetParams> {
    let (pairs, payload) = split_header(bytes, CHECKPOINT_MAGIC)?;
    let (cfg, count) = parse_config(&pairs)?;
    let mut cur = Cursor { bytes: payload, pos: 0 };
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = cur.u32()? as usize;
        if len == 0 || len > MAX_NAME {
            return Err(FormatError::BadHeader(format!("parameter name length {len}")).into());
        }
        let name = std::str::from_utf8(cur.take(len)?).map_err(|_| FormatError::BadHeader("parameter name is not UTF-8".into()))?.to_string();
        let rank = cur.u32()? as usize;
        if rank > MAX_RANK {
            return Err(FormatError::BadHeader(format!("parameter {name} has rank {rank}")).into());
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = usize::try_from(cur.u64()?).map_err(|_| FormatError::ExtentOverflow(name.clone()))?;
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| FormatError::ExtentOverflow(format!("{name} {shape:?}")))?;
        let data = take_f64s(cur.take(numel * 8)?, numel);
        named.push((name, Tensor::from_parts(shape, data)));
    }
    let body_end = cur.pos;
    let stored = cur.u64()?;
    if cur.pos < payload.len() {
        return Err(FormatError::TrailingBytes(payload.len() - cur.pos).into());
    }
    let computed = fnv1a(&payload[..body_end]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed }.into());
    }
    RdfNetParams::from_named(&cfg, named)
}

pub fn write_checkpoint(path: &Path, params: &RdfNetParams) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn read_checkpoint(path: &Path) -> Result<RdfNetParams> {
    decode_checkpoint(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> RdfNetParams {
        let cfg = RdfNetConfig { phases: 2, blocks: 2, in_bands: 2, feat_channels: 3, ..RdfNetConfig::default() };
        RdfNetParams::init(&cfg, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let p = small();
        let back = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        assert_eq!(back.config(), p.config());
        for ((n1, t1), (n2, t2)) in p.store().iter().zip(back.store().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn corruption_detected() {
        let bytes = encode_checkpoint(&small());
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 12] ^= 0x01;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Format(FormatError::ChecksumMismatch { .. }))));
        assert!(matches!(decode_checkpoint(&bytes[..n - 4]), Err(Error::Format(FormatError::TruncatedPayload { .. }))));
        let mut extra = bytes.clone();
        extra.push(7);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::Format(FormatError::TrailingBytes(1)))));
    }
}
