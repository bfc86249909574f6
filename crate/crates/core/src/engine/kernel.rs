//! Per-nonzero computation and per-shard execution on one device.

use super::{Accumulation, DeviceState, EngineError, PlatformConfig};
use crate::dense::FactorMatrix;
use crate::partition::TensorShard;
use crate::value::{AtomicValue, Value};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Contribution of one nonzero to output row `indices[mode]`:
/// `value * prod_{w != mode} factors[w](indices[w], :)`.
pub fn elementwise_compute(
    indices: &[u64],
    value: Value,
    factors: &[FactorMatrix],
    mode: usize,
) -> (u64, Vec<Value>) {
    let mut out = vec![0.0; factors[0].rank()];
    elementwise_into(indices, value, factors, mode, &mut out);
    (indices[mode], out)
}

/// Writes the contribution into `out`; factors are multiplied in increasing
/// mode order so the rounding matches the reference oracle.
#[inline]
pub(crate) fn elementwise_into(indices: &[u64], value: Value, factors: &[FactorMatrix], mode: usize, out: &mut [Value]) {
    out.fill(value);
    for (w, f) in factors.iter().enumerate() {
        if w == mode {
            continue;
        }
        let row = f.row(indices[w] as usize);
        for (o, &x) in out.iter_mut().zip(row) {
            *o *= x;
        }
    }
}

/// Ordered commit of per-ISP contribution buffers.
///
/// Workers finish ISPs in any order; buffers are applied strictly in ISP
/// order, so every output row is summed in element order regardless of the
/// worker count.
struct OrderedCommit<'a> {
    state: Mutex<(usize, BTreeMap<usize, Vec<Value>>)>,
    shard: &'a TensorShard,
    output: &'a [AtomicValue],
    rank: usize,
    log: Option<Mutex<Vec<u64>>>,
}

impl OrderedCommit<'_> {
    fn deposit(&self, z: usize, contributions: Vec<Value>) {
        let mut guard = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let (next, pending) = &mut *guard;
        pending.insert(z, contributions);
        while let Some(buf) = pending.remove(next) {
            self.apply(*next, &buf);
            *next += 1;
        }
    }

    fn apply(&self, z: usize, buf: &[Value]) {
        let mode = self.shard.mode;
        let mut last_row = u64::MAX;
        for (i, e) in self.shard.isp(z).enumerate() {
            let row = self.shard.element(e).indices[mode];
            let cells = &self.output[row as usize * self.rank..(row as usize + 1) * self.rank];
            for (cell, &c) in cells.iter().zip(&buf[i * self.rank..(i + 1) * self.rank]) {
                cell.store(cell.load() + c);
            }
            if row != last_row {
                if let Some(log) = &self.log {
                    log.lock().unwrap_or_else(|p| p.into_inner()).push(row);
                }
                last_row = row;
            }
        }
    }
}

fn atomic_isp(
    shard: &TensorShard,
    z: usize,
    factors: &[FactorMatrix],
    output: &[AtomicValue],
    cfg: &PlatformConfig,
    scratch: &mut [Value],
    log: &mut Option<Vec<u64>>,
) {
    let mode = shard.mode;
    let rank = cfg.rank;
    let range = shard.isp(z);
    // Quanta of P nonzeros, one per threadblock column.
    let mut offset = range.start;
    while offset < range.end {
        let end = (offset + cfg.column_width).min(range.end);
        for e in offset..end {
            let el = shard.element(e);
            elementwise_into(el.indices, el.value, factors, mode, scratch);
            let row = el.indices[mode] as usize;
            for (cell, &c) in output[row * rank..(row + 1) * rank].iter().zip(scratch.iter()) {
                cell.fetch_add(c);
            }
            if let Some(log) = log {
                if log.last() != Some(&(row as u64)) {
                    log.push(row as u64);
                }
            }
        }
        offset = end;
    }
}

fn deterministic_isp(shard: &TensorShard, z: usize, factors: &[FactorMatrix], cfg: &PlatformConfig) -> Vec<Value> {
    let mode = shard.mode;
    let rank = cfg.rank;
    let range = shard.isp(z);
    let mut buf = vec![0.0; range.len() * rank];
    let mut offset = range.start;
    while offset < range.end {
        let end = (offset + cfg.column_width).min(range.end);
        for e in offset..end {
            let el = shard.element(e);
            let slot = (e - range.start) * rank;
            elementwise_into(el.indices, el.value, factors, mode, &mut buf[slot..slot + rank]);
        }
        offset = end;
    }
    buf
}

/// Runs every ISP of `shard` on `device`'s `g` workers and accumulates into
/// the device's output buffer.
///
/// Workers claim ISPs from a shared counter. In atomic mode each contribution
/// is added with a compare-and-swap per cell; in deterministic mode each ISP
/// fills a private buffer and buffers are committed in ISP order.
pub fn execute_shard(shard: &TensorShard, device: &mut DeviceState, cfg: &PlatformConfig) -> Result<(), EngineError> {
    let mode = device.output_mode.ok_or(EngineError::NoActiveMode)?;
    if shard.mode != mode {
        return Err(EngineError::ShardModeMismatch {
            expected: mode,
            found: shard.mode,
        });
    }
    if shard.num_modes != device.factors.len() || shard.hi as usize > device.output.len() / cfg.rank.max(1) {
        return Err(EngineError::ShardShape { shard: shard.shard_id });
    }
    if shard.is_empty() {
        return Ok(());
    }

    let factors = &device.factors[..];
    let output = &device.output[..];
    let next = AtomicUsize::new(0);
    let isps = shard.isp_count();
    let workers = cfg.workers_per_device.min(isps).max(1);
    let instrument = cfg.instrument;

    let mut rows_written: Vec<u64> = Vec::new();
    match cfg.accumulation {
        Accumulation::Atomic => {
            let worker = || {
                let mut scratch = vec![0.0; cfg.rank];
                let mut log = instrument.then(Vec::new);
                loop {
                    let z = next.fetch_add(1, Ordering::Relaxed);
                    if z >= isps {
                        break;
                    }
                    atomic_isp(shard, z, factors, output, cfg, &mut scratch, &mut log);
                }
                log.unwrap_or_default()
            };
            for log in run_workers(workers, &worker)? {
                rows_written.extend(log);
            }
        }
        Accumulation::Deterministic => {
            let commit = OrderedCommit {
                state: Mutex::new((0, BTreeMap::new())),
                shard,
                output,
                rank: cfg.rank,
                log: instrument.then(|| Mutex::new(Vec::new())),
            };
            let worker = || {
                loop {
                    let z = next.fetch_add(1, Ordering::Relaxed);
                    if z >= isps {
                        break;
                    }
                    commit.deposit(z, deterministic_isp(shard, z, factors, cfg));
                }
                Vec::new()
            };
            run_workers(workers, &worker)?;
            if let Some(log) = commit.log {
                rows_written = log.into_inner().unwrap_or_else(|p| p.into_inner());
            }
        }
    }

    device.nnz_processed += shard.nnz();
    if let Some(log) = device.write_log.as_mut() {
        rows_written.sort_unstable();
        rows_written.dedup();
        log.extend(rows_written);
    }
    Ok(())
}

/// Runs `worker` on `count` threads (inline when `count == 1`) and collects
/// each thread's result.
fn run_workers<F>(count: usize, worker: &F) -> Result<Vec<Vec<u64>>, EngineError>
where
    F: Fn() -> Vec<u64> + Sync,
{
    if count == 1 {
        return std::panic::catch_unwind(std::panic::AssertUnwindSafe(worker))
            .map(|r| vec![r])
            .map_err(|p| EngineError::WorkerPanic(panic_message(&*p)));
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..count).map(|_| s.spawn(worker)).collect();
        let mut out = Vec::with_capacity(count);
        let mut failure = None;
        for h in handles {
            match h.join() {
                Ok(r) => out.push(r),
                Err(p) => failure = Some(EngineError::WorkerPanic(panic_message(&*p))),
            }
        }
        failure.map_or(Ok(out), Err)
    })
}

pub(crate) fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".to_owned()
    }
}
