//! Versioned binary cache for partition plans.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SKPLAN\r\n"
//! version    u16
//! value tag  u8       bytes per stored value (8 or 4)
//! reserved   u8       0
//! payload    ...
//! checksum   u32      CRC-32 of every preceding byte
//! ```
//!
//! The payload holds the mode, shape, partition config, build time, tensor
//! fingerprint and every shard with its range, ISP boundaries and elements.

use super::{ModePartitionPlan, PartitionConfig, Strategy, TensorShard};
use crate::value::{Value, VALUE_BYTES};
use std::fs;
use std::io;
use std::path::Path;
use std::time::Duration;
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"SKPLAN\r\n";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 12;
const MAX_MODES: usize = 64;

#[derive(Debug, Error)]
pub enum PlanCacheError {
    #[error("not a plan cache file")]
    BadMagic,
    #[error("checksum mismatch (file truncated or corrupted)")]
    Checksum,
    #[error(
        "incompatible plan cache: version {found_version} with {found_value_bytes}-byte values, \
         this build reads version {VERSION} with {VALUE_BYTES}-byte values"
    )]
    Version {
        found_version: u16,
        found_value_bytes: u8,
    },
    #[error("corrupt plan cache: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn corrupt(msg: impl Into<String>) -> PlanCacheError {
    PlanCacheError::Corrupt(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn value(&mut self, v: Value) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PlanCacheError> {
        if n > self.buf.len() {
            return Err(corrupt("unexpected end of payload"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, PlanCacheError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, PlanCacheError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, PlanCacheError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, PlanCacheError> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("count overflows usize"))
    }
    /// Checks that `count` items of `width` bytes can still be read, so
    /// allocations are bounded by the input length.
    fn ensure(&self, count: usize, width: usize) -> Result<(), PlanCacheError> {
        match count.checked_mul(width) {
            Some(bytes) if bytes <= self.buf.len() => Ok(()),
            _ => Err(corrupt("length field exceeds payload")),
        }
    }
    fn u64s(&mut self, count: usize) -> Result<Vec<u64>, PlanCacheError> {
        self.ensure(count, 8)?;
        Ok(self
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn values(&mut self, count: usize) -> Result<Vec<Value>, PlanCacheError> {
        self.ensure(count, VALUE_BYTES)?;
        Ok(self
            .take(count * VALUE_BYTES)?
            .chunks_exact(VALUE_BYTES)
            .map(|c| Value::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn strategy_tag(s: Strategy) -> u8 {
    match s {
        Strategy::EqualIndex => 0,
        Strategy::NnzBalanced => 1,
    }
}

/// Serializes a plan into the cache format.
pub fn encode_plan(plan: &ModePartitionPlan) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(64 + plan.nnz() * (plan.num_modes() * 8 + VALUE_BYTES)));
    w.0.extend_from_slice(&MAGIC);
    w.u16(VERSION);
    w.u8(VALUE_BYTES as u8);
    w.u8(0);
    w.u32(plan.mode as u32);
    w.u32(plan.num_modes() as u32);
    for &s in &plan.shape {
        w.u64(s);
    }
    let c = &plan.config;
    w.u64(c.devices as u64);
    w.u64(c.workers_per_device as u64);
    w.u64(c.oversubscription as u64);
    w.u64(c.isp_capacity as u64);
    w.u8(strategy_tag(c.strategy));
    w.u64(plan.build_time.as_nanos().min(u64::MAX as u128) as u64);
    w.u64(plan.fingerprint);
    w.u64(plan.shards.len() as u64);
    for s in &plan.shards {
        w.u64(s.lo);
        w.u64(s.hi);
        w.u64(s.nnz() as u64);
        w.u64(s.isp_count() as u64);
        for &b in &s.isp_boundaries {
            w.u64(b as u64);
        }
        for &i in &s.indices {
            w.u64(i);
        }
        for &v in &s.values {
            w.value(v);
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

/// Parses and validates a plan from cache bytes.
pub fn decode_plan(bytes: &[u8]) -> Result<ModePartitionPlan, PlanCacheError> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(PlanCacheError::BadMagic);
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(PlanCacheError::Checksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(PlanCacheError::Checksum);
    }
    let version = u16::from_le_bytes([body[8], body[9]]);
    let value_bytes = body[10];
    if version != VERSION || value_bytes as usize != VALUE_BYTES {
        return Err(PlanCacheError::Version {
            found_version: version,
            found_value_bytes: value_bytes,
        });
    }
    let mut r = Reader { buf: &body[HEADER_LEN..] };
    let mode = r.u32()? as usize;
    let n = r.u32()? as usize;
    if !(crate::tensor::MIN_MODES..=MAX_MODES).contains(&n) || mode >= n {
        return Err(corrupt(format!("mode {mode} of {n} modes")));
    }
    let shape = r.u64s(n)?;
    if shape.contains(&0) {
        return Err(corrupt("zero-length mode"));
    }
    let config = PartitionConfig {
        devices: r.usize()?,
        workers_per_device: r.usize()?,
        oversubscription: r.usize()?,
        isp_capacity: r.usize()?,
        strategy: match r.u8()? {
            0 => Strategy::EqualIndex,
            1 => Strategy::NnzBalanced,
            t => return Err(corrupt(format!("unknown strategy tag {t}"))),
        },
    };
    config.validate().map_err(|e| corrupt(e.to_string()))?;
    let build_time = Duration::from_nanos(r.u64()?);
    let fingerprint = r.u64()?;
    let shard_count = r.usize()?;
    // Every shard carries at least five u64 fields.
    r.ensure(shard_count, 40)?;
    let len = shape[mode];
    let mut shards = Vec::with_capacity(shard_count);
    let mut expect_lo = 0u64;
    for shard_id in 0..shard_count {
        let lo = r.u64()?;
        let hi = r.u64()?;
        if lo != expect_lo || hi <= lo || hi > len {
            return Err(corrupt(format!("shard {shard_id} range [{lo}, {hi})")));
        }
        expect_lo = hi;
        let nnz = r.usize()?;
        let isps = r.usize()?;
        let bounds = r.u64s(isps.checked_add(1).ok_or_else(|| corrupt("isp count"))?)?;
        let isp_boundaries: Vec<usize> = bounds.iter().map(|&b| b as usize).collect();
        if isp_boundaries[0] != 0
            || *isp_boundaries.last().unwrap() as u64 != nnz as u64
            || isp_boundaries.windows(2).any(|w| w[0] >= w[1])
            || isp_boundaries.windows(2).any(|w| w[1] - w[0] > config.isp_capacity)
        {
            return Err(corrupt(format!("shard {shard_id} ISP boundaries")));
        }
        let count = nnz.checked_mul(n).ok_or_else(|| corrupt("element count"))?;
        let indices = r.u64s(count)?;
        for tuple in indices.chunks_exact(n) {
            if tuple.iter().zip(&shape).any(|(&i, &s)| i >= s) || tuple[mode] < lo || tuple[mode] >= hi {
                return Err(corrupt(format!("shard {shard_id} element out of range")));
            }
        }
        let values = r.values(nnz)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(format!("shard {shard_id} non-finite value")));
        }
        shards.push(TensorShard {
            mode,
            shard_id,
            lo,
            hi,
            num_modes: n,
            indices,
            values,
            isp_boundaries,
        });
    }
    if expect_lo != len {
        return Err(corrupt("shards do not cover the mode"));
    }
    if !r.buf.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(ModePartitionPlan {
        mode,
        shape,
        config,
        shards,
        build_time,
        fingerprint,
    })
}

pub fn save_plan(plan: &ModePartitionPlan, path: impl AsRef<Path>) -> Result<(), PlanCacheError> {
    fs::write(path, encode_plan(plan))?;
    Ok(())
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<ModePartitionPlan, PlanCacheError> {
    decode_plan(&fs::read(path)?)
}
