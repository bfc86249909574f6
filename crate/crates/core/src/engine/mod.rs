//! Simulated multi-device MTTKRP engine.
//!
//! Each device is a group of `g` worker threads with its own replica of the
//! factor matrices and its own output buffer. Shards of a mode plan are
//! staged onto devices (dynamically or statically), executed, and the
//! owned output rows are exchanged with a ring all-gather.

mod kernel;

pub use kernel::{elementwise_compute, execute_shard};

use crate::collective::{record_staging, ring_all_gather, CollectiveError, FactorPartitionSet, TransferLedger};
use crate::dense::{DenseMatrix, FactorMatrix};
use crate::metrics::{DeviceModeMetrics, ModeMetrics, RunMetrics};
use crate::partition::{ModePartitionPlan, TensorShard};
use crate::value::AtomicValue;
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid platform configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("expected {expected} factor matrices, got {found}")]
    FactorCount { expected: usize, found: usize },
    #[error("factor {mode} has rank {found}, configured rank is {expected}")]
    FactorRank { mode: usize, expected: usize, found: usize },
    #[error("factor {mode} has {found} rows, mode length is {expected}")]
    FactorRows { mode: usize, expected: u64, found: usize },
    #[error("plan shape {found:?} does not match engine shape {expected:?}")]
    PlanShape { expected: Vec<u64>, found: Vec<u64> },
    #[error("shard for mode {found} submitted while computing mode {expected}")]
    ShardModeMismatch { expected: usize, found: usize },
    #[error("shard {shard} does not fit the device buffers")]
    ShardShape { shard: usize },
    #[error("no output mode is active on the device")]
    NoActiveMode,
    #[error("worker panicked: {0}")]
    WorkerPanic(String),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
}

/// How workers combine contributions that target the same output row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Accumulation {
    /// Compare-and-swap adds into the device buffer; summation order varies
    /// between runs.
    Atomic,
    /// Per-ISP buffers committed in ISP order; bit-identical for any worker
    /// count.
    #[default]
    Deterministic,
}

/// How shards are assigned to devices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Scheduling {
    /// Idle devices claim the next unprocessed shard.
    #[default]
    Dynamic,
    /// Device `j` gets a contiguous block of `k/m` shards up front.
    Static,
}

/// How device compute time is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Timing {
    /// Devices run at the same time on separate threads.
    #[default]
    Concurrent,
    /// Shards run one at a time, each with the device's own workers; dynamic
    /// scheduling is replayed on the measured times, so each device's time
    /// is free of interference from the other devices.
    Isolated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlatformConfig {
    pub devices: usize,
    pub workers_per_device: usize,
    /// Nonzeros handed to one threadblock column at a time (P).
    pub column_width: usize,
    pub rank: usize,
    pub accumulation: Accumulation,
    pub scheduling: Scheduling,
    pub timing: Timing,
    /// Record which output rows each device writes.
    pub instrument: bool,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            devices: 4,
            workers_per_device: 4,
            column_width: 32,
            rank: 32,
            accumulation: Accumulation::default(),
            scheduling: Scheduling::default(),
            timing: Timing::default(),
            instrument: false,
        }
    }
}

impl PlatformConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.devices == 0 {
            return Err(EngineError::InvalidConfig("device count must be positive"));
        }
        if self.workers_per_device == 0 {
            return Err(EngineError::InvalidConfig("workers per device must be positive"));
        }
        if self.column_width == 0 {
            return Err(EngineError::InvalidConfig("column width must be positive"));
        }
        if self.rank == 0 {
            return Err(EngineError::InvalidConfig("rank must be positive"));
        }
        Ok(())
    }
}

/// One simulated device.
#[derive(Debug)]
pub struct DeviceState {
    pub id: usize,
    factors: Vec<FactorMatrix>,
    output: Vec<AtomicValue>,
    output_mode: Option<usize>,
    /// Compute time summed over every mode run so far.
    pub compute_time: Duration,
    pub shards_processed: usize,
    pub nnz_processed: usize,
    owned: Vec<Range<u64>>,
    write_log: Option<Vec<u64>>,
}

impl DeviceState {
    fn new(id: usize, factors: Vec<FactorMatrix>) -> Self {
        Self {
            id,
            factors,
            output: Vec::new(),
            output_mode: None,
            compute_time: Duration::ZERO,
            shards_processed: 0,
            nnz_processed: 0,
            owned: Vec::new(),
            write_log: None,
        }
    }

    /// Zeroes the output buffer and prepares to receive shards of `mode`.
    pub fn begin_mode(&mut self, mode: usize, rows: usize, rank: usize, instrument: bool) {
        self.output.clear();
        self.output.resize_with(rows * rank, AtomicValue::zero);
        self.output_mode = Some(mode);
        self.owned.clear();
        self.write_log = instrument.then(Vec::new);
    }

    pub fn factors(&self) -> &[FactorMatrix] {
        &self.factors
    }

    /// Output rows covered by the shards this device processed in the
    /// current mode.
    pub fn owned_ranges(&self) -> &[Range<u64>] {
        &self.owned
    }

    /// Output rows written in the current mode (instrumented runs only).
    pub fn write_log(&self) -> Option<&[u64]> {
        self.write_log.as_deref()
    }

    fn output_matrix(&self, rows: usize, rank: usize) -> DenseMatrix {
        let data = self.output.iter().map(AtomicValue::load).collect();
        DenseMatrix::from_vec(rows, rank, data).expect("output buffer sized in begin_mode")
    }

    fn take_shard(&mut self, shard: &TensorShard) {
        self.shards_processed += 1;
        let r = shard.index_range();
        match self.owned.last_mut() {
            Some(last) if last.end == r.start => last.end = r.end,
            _ if r.is_empty() => {}
            _ => self.owned.push(r),
        }
    }
}

/// Result of one mode.
#[derive(Debug, Clone)]
pub struct ModeOutput {
    pub mode: usize,
    pub output: DenseMatrix,
    pub metrics: ModeMetrics,
    /// Per-device sorted output rows written (instrumented runs only).
    pub write_logs: Option<Vec<Vec<u64>>>,
    /// Per-device owned output ranges.
    pub owned: Vec<Vec<Range<u64>>>,
}

/// Result of running every mode in sequence.
#[derive(Debug, Clone)]
pub struct AllModesOutput {
    pub outputs: Vec<DenseMatrix>,
    pub metrics: RunMetrics,
}

#[derive(Debug)]
pub struct Engine {
    config: PlatformConfig,
    shape: Vec<u64>,
    devices: Vec<DeviceState>,
    ledger: TransferLedger,
}

struct ShardTiming {
    device: usize,
    staging: Duration,
    compute: Duration,
    bytes: u64,
}

impl Engine {
    /// Replicates `factors` (one per mode, in mode order) on every device.
    pub fn new(config: PlatformConfig, shape: &[u64], factors: Vec<FactorMatrix>) -> Result<Self, EngineError> {
        config.validate()?;
        check_factor_set(&config, shape, &factors)?;
        let devices = (0..config.devices)
            .map(|id| DeviceState::new(id, factors.clone()))
            .collect();
        Ok(Self {
            config,
            shape: shape.to_vec(),
            devices,
            ledger: TransferLedger::new(),
        })
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    /// Factor matrices as held by device 0 (all replicas agree between modes).
    pub fn factors(&self) -> &[FactorMatrix] {
        &self.devices[0].factors
    }

    pub fn ledger(&self) -> &TransferLedger {
        &self.ledger
    }

    pub fn take_ledger(&mut self) -> TransferLedger {
        std::mem::take(&mut self.ledger)
    }

    /// Replaces factor `mode` on every device.
    pub fn set_factor(&mut self, mode: usize, factor: FactorMatrix) -> Result<(), EngineError> {
        if mode >= self.shape.len() {
            return Err(EngineError::FactorCount {
                expected: self.shape.len(),
                found: mode + 1,
            });
        }
        check_factor(&self.config, mode, self.shape[mode], &factor)?;
        for d in &mut self.devices {
            d.factors[mode] = FactorMatrix { mode, ..factor.clone() };
        }
        Ok(())
    }

    /// Computes MTTKRP for `plan.mode`, all-gathers the result and installs
    /// it as that mode's factor on every device.
    pub fn mttkrp_mode(&mut self, plan: &ModePartitionPlan) -> Result<ModeOutput, EngineError> {
        if plan.shape != self.shape {
            return Err(EngineError::PlanShape {
                expected: self.shape.clone(),
                found: plan.shape.clone(),
            });
        }
        let start = Instant::now();
        let cfg = self.config.clone();
        let mode = plan.mode;
        let rows = self.shape[mode] as usize;
        let m = cfg.devices;
        let k = plan.shards.len();
        if m > k {
            log::warn!("mode {mode}: {m} devices but only {k} shards; {} devices stay idle", m - k);
        }
        for d in &mut self.devices {
            d.begin_mode(mode, rows, cfg.rank, cfg.instrument);
        }

        let timings = match cfg.timing {
            Timing::Concurrent => self.run_concurrent(plan)?,
            Timing::Isolated => self.run_isolated(plan)?,
        };
        let mut barriers = 1;

        let mut per_device: Vec<DeviceModeMetrics> = (0..m)
            .map(|device| DeviceModeMetrics {
                device,
                ..Default::default()
            })
            .collect();
        let mut staging_order: Vec<(usize, &ShardTiming)> = timings.iter().enumerate().collect();
        staging_order.sort_by_key(|(j, _)| *j);
        for (j, t) in staging_order {
            let dm = &mut per_device[t.device];
            dm.compute_time += t.compute;
            dm.staging_time += t.staging;
            dm.staging_bytes += t.bytes;
            dm.shards += 1;
            dm.nnz += plan.shards[j].nnz();
            record_staging(&mut self.ledger, j, t.device, &plan.shards[j]);
        }
        for (d, dm) in self.devices.iter_mut().zip(&per_device) {
            d.compute_time += dm.compute_time;
        }

        let owners: Vec<Vec<Range<u64>>> = self.devices.iter().map(|d| d.owned.clone()).collect();
        let buffers = self.devices.iter().map(|d| d.output_matrix(rows, cfg.rank)).collect();
        let gather_start = Instant::now();
        let mut set = FactorPartitionSet::new(mode, rows, cfg.rank, owners.clone(), buffers)?;
        let mut mode_ledger = TransferLedger::new();
        let stats = ring_all_gather(&mut set, &mut mode_ledger)?;
        let allgather_time = gather_start.elapsed();
        barriers += 1;
        self.ledger.extend(mode_ledger);

        let mut buffers = set.into_buffers();
        let output = buffers[0].clone();
        for (d, buf) in self.devices.iter_mut().zip(buffers.drain(..)) {
            debug_assert_eq!(buf, output);
            d.factors[mode] = FactorMatrix::new(mode, buf);
            d.output_mode = None;
        }
        let write_logs = cfg
            .instrument
            .then(|| self.devices.iter_mut().map(|d| d.write_log.take().unwrap_or_default()).collect());

        let compute_span = per_device.iter().map(|d| d.compute_time).max().unwrap_or_default();
        let metrics = ModeMetrics {
            mode,
            shards: k,
            nnz: plan.nnz(),
            devices: per_device,
            compute_span,
            allgather_time,
            allgather_bytes: stats.total_bytes(),
            allgather_steps: stats.steps,
            barriers,
            preprocessing_time: plan.build_time,
            wall_time: start.elapsed(),
        };
        Ok(ModeOutput {
            mode,
            output,
            metrics,
            write_logs,
            owned: owners,
        })
    }

    /// Runs `plans` in order (normally modes `0..N`).
    pub fn mttkrp_all_modes(&mut self, plans: &[ModePartitionPlan]) -> Result<AllModesOutput, EngineError> {
        let start = Instant::now();
        let mut outputs = Vec::with_capacity(plans.len());
        let mut modes = Vec::with_capacity(plans.len());
        for plan in plans {
            let out = self.mttkrp_mode(plan)?;
            outputs.push(out.output);
            modes.push(out.metrics);
        }
        Ok(AllModesOutput {
            outputs,
            metrics: RunMetrics {
                devices: self.config.devices,
                modes,
                wall_time: start.elapsed(),
            },
        })
    }

    fn static_lists(&self, k: usize) -> Vec<Vec<usize>> {
        let m = self.config.devices;
        let mut lists = vec![Vec::new(); m];
        for j in 0..k {
            lists[static_owner(j, k, m)].push(j);
        }
        lists
    }

    fn run_concurrent(&mut self, plan: &ModePartitionPlan) -> Result<Vec<ShardTiming>, EngineError> {
        let cfg = &self.config;
        let k = plan.shards.len();
        let next = AtomicUsize::new(0);
        let lists = match cfg.scheduling {
            Scheduling::Static => Some(self.static_lists(k)),
            Scheduling::Dynamic => None,
        };
        let slots: Vec<Mutex<Option<ShardTiming>>> = (0..k).map(|_| Mutex::new(None)).collect();
        let result = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .devices
                .iter_mut()
                .map(|device| {
                    let (next, slots, lists) = (&next, &slots, &lists);
                    s.spawn(move || -> Result<(), EngineError> {
                        let mut own = lists.as_ref().map(|l| l[device.id].iter().copied());
                        loop {
                            let j = match own.as_mut() {
                                Some(it) => it.next(),
                                None => Some(next.fetch_add(1, Ordering::Relaxed)).filter(|&j| j < k),
                            };
                            let Some(j) = j else { break };
                            let t = run_shard(device, &plan.shards[j], cfg)?;
                            *slots[j].lock().unwrap_or_else(|p| p.into_inner()) = Some(t);
                        }
                        Ok(())
                    })
                })
                .collect();
            let mut first_err = None;
            for h in handles {
                let r = h
                    .join()
                    .unwrap_or_else(|p| Err(EngineError::WorkerPanic(kernel::panic_message(&*p))));
                if let Err(e) = r {
                    first_err.get_or_insert(e);
                }
            }
            first_err.map_or(Ok(()), Err)
        });
        result?;
        Ok(slots
            .into_iter()
            .map(|s| s.into_inner().unwrap_or_else(|p| p.into_inner()).expect("every shard ran"))
            .collect())
    }

    fn run_isolated(&mut self, plan: &ModePartitionPlan) -> Result<Vec<ShardTiming>, EngineError> {
        let k = plan.shards.len();
        let m = self.config.devices;
        let mut timings: Vec<Option<ShardTiming>> = (0..k).map(|_| None).collect();
        match self.config.scheduling {
            Scheduling::Static => {
                for (id, list) in self.static_lists(k).into_iter().enumerate() {
                    for j in list {
                        timings[j] = Some(run_shard(&mut self.devices[id], &plan.shards[j], &self.config)?);
                    }
                }
            }
            Scheduling::Dynamic => {
                // The device that becomes idle first claims the next shard.
                let mut busy = vec![Duration::ZERO; m];
                for (j, slot) in timings.iter_mut().enumerate() {
                    let id = (0..m).min_by_key(|&i| (busy[i], i)).expect("at least one device");
                    let t = run_shard(&mut self.devices[id], &plan.shards[j], &self.config)?;
                    busy[id] += t.staging + t.compute;
                    *slot = Some(t);
                }
            }
        }
        Ok(timings.into_iter().map(|t| t.expect("every shard ran")).collect())
    }
}

/// Device that statically owns shard `j` of `k` on `m` devices.
pub fn static_owner(j: usize, k: usize, m: usize) -> usize {
    (j * m / k.max(1)).min(m - 1)
}

fn run_shard(device: &mut DeviceState, shard: &TensorShard, cfg: &PlatformConfig) -> Result<ShardTiming, EngineError> {
    let t0 = Instant::now();
    let staged = shard.clone();
    let staging = t0.elapsed();
    let t1 = Instant::now();
    execute_shard(&staged, device, cfg)?;
    let compute = t1.elapsed();
    device.take_shard(&staged);
    Ok(ShardTiming {
        device: device.id,
        staging,
        compute,
        bytes: staged.byte_size(),
    })
}

fn check_factor(cfg: &PlatformConfig, mode: usize, len: u64, f: &FactorMatrix) -> Result<(), EngineError> {
    if f.rank() != cfg.rank {
        return Err(EngineError::FactorRank {
            mode,
            expected: cfg.rank,
            found: f.rank(),
        });
    }
    if f.rows() as u64 != len {
        return Err(EngineError::FactorRows {
            mode,
            expected: len,
            found: f.rows(),
        });
    }
    Ok(())
}

fn check_factor_set(cfg: &PlatformConfig, shape: &[u64], factors: &[FactorMatrix]) -> Result<(), EngineError> {
    if factors.len() != shape.len() {
        return Err(EngineError::FactorCount {
            expected: shape.len(),
            found: factors.len(),
        });
    }
    for (mode, (f, &len)) in factors.iter().zip(shape).enumerate() {
        check_factor(cfg, mode, len, f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
