//! Ring all-gather of output factor rows and transfer accounting.
//!
//! Transfers are buffer copies between device-local matrices. Every copy is
//! logged in a [`TransferLedger`] with its byte count so communication volume
//! can be reported without a real interconnect.

use crate::dense::DenseMatrix;
use crate::partition::TensorShard;
use crate::value::VALUE_BYTES;
use serde::Serialize;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CollectiveError {
    #[error("all-gather needs at least one device")]
    NoDevices,
    #[error("device {device} has no block buffer")]
    MissingBlock { device: usize },
    #[error("device {device} buffer is {found_rows}x{found_cols}, expected {rows}x{cols}")]
    BufferShape {
        device: usize,
        rows: usize,
        cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
    #[error("row {row} is owned by more than one device")]
    Overlap { row: u64 },
    #[error("row {row} is owned by no device")]
    Gap { row: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Host,
    Device(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    Staging,
    Allgather,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransferRecord {
    pub mode: usize,
    pub step: usize,
    pub sender: Endpoint,
    pub receiver: Endpoint,
    pub bytes: u64,
    pub kind: TransferKind,
}

/// Ordered log of simulated transfers. Zero-byte transfers are not logged.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TransferLedger {
    records: Vec<TransferRecord>,
}

impl TransferLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record, returning false when it carries no bytes.
    pub fn push(&mut self, record: TransferRecord) -> bool {
        if record.bytes == 0 {
            return false;
        }
        self.records.push(record);
        true
    }

    pub fn extend(&mut self, other: TransferLedger) {
        self.records.extend(other.records);
    }

    pub fn records(&self) -> &[TransferRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_bytes(&self, kind: TransferKind) -> u64 {
        self.records.iter().filter(|r| r.kind == kind).map(|r| r.bytes).sum()
    }

    pub fn bytes_sent_by(&self, device: usize, kind: TransferKind) -> u64 {
        self.records
            .iter()
            .filter(|r| r.kind == kind && r.sender == Endpoint::Device(device))
            .map(|r| r.bytes)
            .sum()
    }

    pub fn bytes_received_by(&self, device: usize, kind: TransferKind) -> u64 {
        self.records
            .iter()
            .filter(|r| r.kind == kind && r.receiver == Endpoint::Device(device))
            .map(|r| r.bytes)
            .sum()
    }
}

/// Logs the host-to-device copy of a shard; empty shards are not logged.
pub fn record_staging(ledger: &mut TransferLedger, step: usize, device: usize, shard: &TensorShard) -> bool {
    ledger.push(TransferRecord {
        mode: shard.mode,
        step,
        sender: Endpoint::Host,
        receiver: Endpoint::Device(device),
        bytes: shard.byte_size(),
        kind: TransferKind::Staging,
    })
}

/// One device's role in one ring step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingStep {
    pub send_block: usize,
    pub send_to: usize,
    pub recv_block: usize,
    pub recv_from: usize,
}

/// Ring all-gather schedule for device `id` at step `z` of `devices`.
///
/// Each device forwards the block it received in the previous step, so at
/// step `z` device `id` sends block `(id - z) mod M` to `id + 1` and receives
/// block `(id - z - 1) mod M` from `id - 1`. At `z = 0` a device sends its own
/// block.
pub fn ring_step(devices: usize, id: usize, z: usize) -> RingStep {
    let m = devices;
    RingStep {
        send_block: (id + m - z % m) % m,
        send_to: (id + 1) % m,
        recv_block: (id + 2 * m - z % m - 1) % m,
        recv_from: (id + m - 1) % m,
    }
}

/// Row ownership and per-device buffers for one mode's output matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPartitionSet {
    pub mode: usize,
    rows: usize,
    rank: usize,
    owners: Vec<Vec<Range<u64>>>,
    buffers: Vec<DenseMatrix>,
}

impl FactorPartitionSet {
    /// Device `j` owns the rows in `owners[j]` and holds them in `buffers[j]`;
    /// every buffer is a full `rows x rank` matrix.
    pub fn new(
        mode: usize,
        rows: usize,
        rank: usize,
        owners: Vec<Vec<Range<u64>>>,
        buffers: Vec<DenseMatrix>,
    ) -> Result<Self, CollectiveError> {
        if owners.is_empty() {
            return Err(CollectiveError::NoDevices);
        }
        if buffers.len() < owners.len() {
            return Err(CollectiveError::MissingBlock { device: buffers.len() });
        }
        for (device, b) in buffers.iter().enumerate() {
            if b.rows() != rows || b.cols() != rank {
                return Err(CollectiveError::BufferShape {
                    device,
                    rows,
                    cols: rank,
                    found_rows: b.rows(),
                    found_cols: b.cols(),
                });
            }
        }
        let mut all: Vec<Range<u64>> = owners.iter().flatten().filter(|r| !r.is_empty()).cloned().collect();
        all.sort_by_key(|r| r.start);
        let mut next = 0u64;
        for r in &all {
            if r.start < next {
                return Err(CollectiveError::Overlap { row: r.start });
            }
            if r.start > next {
                return Err(CollectiveError::Gap { row: next });
            }
            next = r.end;
        }
        if next != rows as u64 {
            return Err(CollectiveError::Gap { row: next });
        }
        Ok(Self {
            mode,
            rows,
            rank,
            owners,
            buffers,
        })
    }

    /// `M` contiguous, near-equal row blocks; block `j` belongs to device `j`.
    pub fn static_blocks(rows: usize, devices: usize) -> Vec<Vec<Range<u64>>> {
        (0..devices)
            .map(|j| {
                let lo = (j * rows / devices) as u64;
                let hi = ((j + 1) * rows / devices) as u64;
                std::iter::once(lo..hi).collect()
            })
            .collect()
    }

    pub fn devices(&self) -> usize {
        self.owners.len()
    }

    pub fn owners(&self) -> &[Vec<Range<u64>>] {
        &self.owners
    }

    pub fn buffers(&self) -> &[DenseMatrix] {
        &self.buffers
    }

    pub fn into_buffers(self) -> Vec<DenseMatrix> {
        self.buffers
    }

    pub fn block_rows(&self, block: usize) -> u64 {
        self.owners[block].iter().map(|r| r.end - r.start).sum()
    }

    pub fn block_bytes(&self, block: usize) -> u64 {
        self.block_rows(block) * (self.rank * VALUE_BYTES) as u64
    }

    fn copy_block(&self, device: usize, block: usize) -> Vec<Vec<crate::value::Value>> {
        self.owners[block]
            .iter()
            .map(|r| self.buffers[device].rows_slice(r.start as usize, r.end as usize).to_vec())
            .collect()
    }

    fn write_block(&mut self, device: usize, block: usize, payload: Vec<Vec<crate::value::Value>>) {
        for (r, data) in self.owners[block].clone().iter().zip(payload) {
            self.buffers[device]
                .rows_slice_mut(r.start as usize, r.end as usize)
                .copy_from_slice(&data);
        }
    }
}

/// Counters from one all-gather.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AllGatherStats {
    pub steps: usize,
    pub barriers: usize,
    pub sends_per_device: Vec<usize>,
    pub bytes_sent_per_device: Vec<u64>,
}

impl AllGatherStats {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_sent_per_device.iter().sum()
    }
}

/// Runs the `M - 1` step ring all-gather in place.
///
/// All sends of a step are read before any receive is written, which gives
/// the per-step barrier semantics. Afterwards every device buffer holds the
/// complete matrix.
pub fn ring_all_gather(
    set: &mut FactorPartitionSet,
    ledger: &mut TransferLedger,
) -> Result<AllGatherStats, CollectiveError> {
    let m = set.devices();
    if m == 0 {
        return Err(CollectiveError::NoDevices);
    }
    let mut stats = AllGatherStats {
        steps: 0,
        barriers: 0,
        sends_per_device: vec![0; m],
        bytes_sent_per_device: vec![0; m],
    };
    for z in 0..m.saturating_sub(1) {
        let in_flight: Vec<(RingStep, Vec<Vec<crate::value::Value>>)> = (0..m)
            .map(|id| {
                let step = ring_step(m, id, z);
                (step, set.copy_block(id, step.send_block))
            })
            .collect();
        for (id, (step, payload)) in in_flight.into_iter().enumerate() {
            let bytes = set.block_bytes(step.send_block);
            ledger.push(TransferRecord {
                mode: set.mode,
                step: z,
                sender: Endpoint::Device(id),
                receiver: Endpoint::Device(step.send_to),
                bytes,
                kind: TransferKind::Allgather,
            });
            stats.sends_per_device[id] += 1;
            stats.bytes_sent_per_device[id] += bytes;
            set.write_block(step.send_to, step.send_block, payload);
        }
        stats.steps += 1;
        stats.barriers += 1;
    }
    Ok(stats)
}
