//! Output-index sharding of per-mode tensor copies.
//!
//! For each output mode the nonzeros are stably sorted by their index in
//! that mode and cut into `k_d` tensor shards covering disjoint, contiguous
//! output-index ranges. A shard is later processed by exactly one device, so
//! output rows never race across devices. Each shard is cut again into
//! inter-shard partitions (ISPs) of at most `isp_capacity` nonzeros, the unit
//! a device's workers pull.

mod balance;
pub mod cache;

use crate::tensor::{element_bytes, ElementRef, SparseTensor, TensorError};
use crate::value::Value;
use std::ops::Range;
use std::time::{Duration, Instant};
use thiserror::Error;

pub use cache::{decode_plan, encode_plan, load_plan, save_plan, PlanCacheError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("partition config field `{0}` must be positive")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How a mode's index space is cut into shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Strategy {
    /// Equal-width index ranges.
    #[default]
    EqualIndex,
    /// Index ranges chosen so shard nonzero counts are as even as possible
    /// without splitting one output index.
    NnzBalanced,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::EqualIndex => "equal-index",
            Strategy::NnzBalanced => "nnz-balanced",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "equal-index" | "equal" => Ok(Strategy::EqualIndex),
            "nnz-balanced" | "balanced" => Ok(Strategy::NnzBalanced),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PartitionConfig {
    /// Number of devices `m`.
    pub devices: usize,
    /// Workers per device `g`.
    pub workers_per_device: usize,
    /// Shards per device `s`; the plan targets `m * s` shards.
    pub oversubscription: usize,
    /// Maximum nonzeros per inter-shard partition.
    pub isp_capacity: usize,
    pub strategy: Strategy,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            devices: 4,
            workers_per_device: 4,
            oversubscription: 4,
            isp_capacity: 8192,
            strategy: Strategy::EqualIndex,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<(), PartitionError> {
        let fields = [
            ("devices", self.devices),
            ("workers_per_device", self.workers_per_device),
            ("oversubscription", self.oversubscription),
            ("isp_capacity", self.isp_capacity),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(PartitionError::InvalidConfig(name)),
            None => Ok(()),
        }
    }

    /// Requested shard count `m * s`, before clamping to the mode length.
    pub fn target_shards(&self) -> usize {
        self.devices * self.oversubscription
    }
}

/// Nonzeros whose output index lies in one contiguous range.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorShard {
    pub mode: usize,
    pub shard_id: usize,
    /// Owned output indices `[lo, hi)`.
    pub lo: u64,
    pub hi: u64,
    pub num_modes: usize,
    /// Flat 0-based indices, `num_modes` per element, sorted by output index.
    pub indices: Vec<u64>,
    pub values: Vec<Value>,
    /// ISP offsets: strictly increasing, from 0 to `nnz`.
    pub isp_boundaries: Vec<usize>,
}

impl TensorShard {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_range(&self) -> Range<u64> {
        self.lo..self.hi
    }

    pub fn isp_count(&self) -> usize {
        self.isp_boundaries.len() - 1
    }

    pub fn isp(&self, z: usize) -> Range<usize> {
        self.isp_boundaries[z]..self.isp_boundaries[z + 1]
    }

    pub fn element(&self, i: usize) -> ElementRef<'_> {
        ElementRef {
            indices: &self.indices[i * self.num_modes..(i + 1) * self.num_modes],
            value: self.values[i],
        }
    }

    pub fn elements(&self) -> impl ExactSizeIterator<Item = ElementRef<'_>> + '_ {
        self.indices
            .chunks_exact(self.num_modes)
            .zip(&self.values)
            .map(|(indices, &value)| ElementRef { indices, value })
    }

    /// Host-to-device transfer size of the shard's elements.
    pub fn byte_size(&self) -> u64 {
        element_bytes(self.nnz(), self.num_modes)
    }
}

/// One mode's reordered tensor copy, cut into shards and ISPs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModePartitionPlan {
    pub mode: usize,
    pub shape: Vec<u64>,
    pub config: PartitionConfig,
    pub shards: Vec<TensorShard>,
    pub build_time: Duration,
    /// Content fingerprint of the tensor the plan was built from.
    pub fingerprint: u64,
}

impl ModePartitionPlan {
    pub fn num_modes(&self) -> usize {
        self.shape.len()
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    /// `k_d`.
    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    /// `t_{d,j}` for every shard.
    pub fn isp_counts(&self) -> Vec<usize> {
        self.shards.iter().map(TensorShard::isp_count).collect()
    }

    /// `tau_d`.
    pub fn total_isps(&self) -> usize {
        self.shards.iter().map(TensorShard::isp_count).sum()
    }

    pub fn nnz(&self) -> usize {
        self.shards.iter().map(TensorShard::nnz).sum()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(TensorShard::nnz).collect()
    }

    pub fn output_rows(&self) -> u64 {
        self.shape[self.mode]
    }

    /// Rebuilds the tensor from the plan's elements, in plan order.
    pub fn to_tensor(&self, name: &str) -> Result<SparseTensor, TensorError> {
        let mut indices = Vec::with_capacity(self.nnz() * self.num_modes());
        let mut values = Vec::with_capacity(self.nnz());
        for s in &self.shards {
            indices.extend_from_slice(&s.indices);
            values.extend_from_slice(&s.values);
        }
        SparseTensor::from_parts(name, self.shape.clone(), indices, values)
    }
}

/// Content fingerprint over shape, indices and value bits.
pub fn tensor_fingerprint(tensor: &SparseTensor) -> u64 {
    let mut a = crc32fast::Hasher::new();
    let mut b = crc32fast::Hasher::new_with_initial(0x9e37_79b9);
    for s in tensor.shape() {
        a.update(&s.to_le_bytes());
    }
    for i in tensor.indices() {
        a.update(&i.to_le_bytes());
    }
    for v in tensor.values() {
        b.update(&v.to_bits().to_le_bytes());
    }
    b.update(&(tensor.nnz() as u64).to_le_bytes());
    ((a.finalize() as u64) << 32) | b.finalize() as u64
}

fn isp_boundaries(len: usize, capacity: usize) -> Vec<usize> {
    let mut b: Vec<usize> = (0..len).step_by(capacity).collect();
    b.push(len);
    b
}

/// Builds the shard and ISP layout of `tensor` for output mode `mode`.
///
/// The shard count is `m * s`, clamped to the mode length with a warning.
pub fn build_mode_plan(
    tensor: &SparseTensor,
    mode: usize,
    cfg: &PartitionConfig,
) -> Result<ModePartitionPlan, PartitionError> {
    cfg.validate()?;
    tensor.check_mode(mode)?;
    let started = Instant::now();
    let n = tensor.num_modes();
    let len = tensor.shape()[mode];
    let idx = tensor.indices();

    let mut order: Vec<usize> = (0..tensor.nnz()).collect();
    order.sort_by_key(|&e| idx[e * n + mode]);
    let keys: Vec<u64> = order.iter().map(|&e| idx[e * n + mode]).collect();

    let target = cfg.target_shards();
    let k = if target as u64 > len {
        log::warn!(
            "mode {mode}: {target} shards requested but only {len} indices; clamping shard count to {len}"
        );
        len as usize
    } else {
        target
    };

    let equal = balance::equal_index_cuts(len, k);
    let cuts = match cfg.strategy {
        Strategy::EqualIndex => equal,
        Strategy::NnzBalanced => {
            let mut runs: Vec<(u64, u64)> = Vec::new();
            for &key in &keys {
                match runs.last_mut() {
                    Some((i, c)) if *i == key => *c += 1,
                    _ => runs.push((key, 1)),
                }
            }
            let equal_max = equal
                .windows(2)
                .map(|w| (keys.partition_point(|&x| x < w[1]) - keys.partition_point(|&x| x < w[0])) as u64)
                .max();
            balance::balanced_cuts(&runs, len, k, equal_max)
        }
    };

    let shards = cuts
        .windows(2)
        .enumerate()
        .map(|(shard_id, w)| {
            let (lo, hi) = (w[0], w[1]);
            let start = keys.partition_point(|&x| x < lo);
            let end = keys.partition_point(|&x| x < hi);
            let mut indices = Vec::with_capacity((end - start) * n);
            let mut values = Vec::with_capacity(end - start);
            for &e in &order[start..end] {
                indices.extend_from_slice(&idx[e * n..(e + 1) * n]);
                values.push(tensor.values()[e]);
            }
            TensorShard {
                mode,
                shard_id,
                lo,
                hi,
                num_modes: n,
                indices,
                values,
                isp_boundaries: isp_boundaries(end - start, cfg.isp_capacity),
            }
        })
        .collect();

    Ok(ModePartitionPlan {
        mode,
        shape: tensor.shape().to_vec(),
        config: *cfg,
        shards,
        build_time: started.elapsed(),
        fingerprint: tensor_fingerprint(tensor),
    })
}

/// One independent plan per output mode.
pub fn build_all_plans(
    tensor: &SparseTensor,
    cfg: &PartitionConfig,
) -> Result<Vec<ModePartitionPlan>, PartitionError> {
    cfg.validate()?;
    let fingerprint = tensor_fingerprint(tensor);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..tensor.num_modes())
            .map(|mode| s.spawn(move || build_mode_plan_with(tensor, mode, cfg, fingerprint)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("plan builder panicked"))
            .collect()
    })
}

fn build_mode_plan_with(
    tensor: &SparseTensor,
    mode: usize,
    cfg: &PartitionConfig,
    fingerprint: u64,
) -> Result<ModePartitionPlan, PartitionError> {
    let mut plan = build_mode_plan(tensor, mode, cfg)?;
    plan.fingerprint = fingerprint;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_tensor, IndexDistribution, SynthSpec, ValueDistribution};
    use crate::tensor::Nonzero;
    use proptest::prelude::*;
    use super::Strategy;

    fn cfg(m: usize, s: usize, c: usize, strategy: Strategy) -> PartitionConfig {
        PartitionConfig {
            devices: m,
            workers_per_device: 2,
            oversubscription: s,
            isp_capacity: c,
            strategy,
        }
    }

    fn synth(shape: &[u64], nnz: usize, zipf: Option<f64>, seed: u64) -> SparseTensor {
        synth_tensor(&SynthSpec {
            shape: shape.to_vec(),
            nnz,
            indices: zipf.map_or(IndexDistribution::Uniform, |exponent| IndexDistribution::Zipf { exponent }),
            values: ValueDistribution::Uniform,
            seed,
        })
        .unwrap()
    }

    fn check_invariants(t: &SparseTensor, plan: &ModePartitionPlan, c: usize) {
        let d = plan.mode;
        let len = t.shape()[d];
        assert_eq!(plan.nnz(), t.nnz());
        assert_eq!(plan.total_isps(), plan.isp_counts().iter().sum::<usize>());
        assert_eq!(plan.shards[0].lo, 0);
        assert_eq!(plan.shards.last().unwrap().hi, len);
        for w in plan.shards.windows(2) {
            assert_eq!(w[0].hi, w[1].lo);
        }
        for s in &plan.shards {
            assert!(s.lo < s.hi);
            assert!(s.elements().all(|e| s.lo <= e.indices[d] && e.indices[d] < s.hi));
            assert_eq!(s.isp_boundaries[0], 0);
            assert_eq!(*s.isp_boundaries.last().unwrap(), s.nnz());
            assert!(s.isp_boundaries.windows(2).all(|w| w[0] < w[1]));
            for z in 0..s.isp_count() {
                let len = s.isp(z).len();
                assert!(len <= c);
                if z + 1 < s.isp_count() {
                    assert_eq!(len, c);
                }
            }
        }
        // Concatenated shards are a permutation of the input elements.
        let mut got: Vec<(Vec<u64>, u64)> = plan
            .shards
            .iter()
            .flat_map(|s| s.elements().map(|e| (e.indices.to_vec(), e.value.to_bits() as u64)))
            .collect();
        let mut want: Vec<(Vec<u64>, u64)> =
            t.elements().map(|e| (e.indices.to_vec(), e.value.to_bits() as u64)).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn equal_index_ranges() {
        let t = synth(&[8, 3, 3], 40, None, 1);
        let plan = build_mode_plan(&t, 0, &cfg(2, 1, 8192, Strategy::EqualIndex)).unwrap();
        let ranges: Vec<_> = plan.shards.iter().map(|s| s.index_range()).collect();
        assert_eq!(ranges, vec![0..4, 4..8]);
        check_invariants(&t, &plan, 8192);
    }

    #[test]
    fn isp_sizes_use_capacity() {
        let elems: Vec<Nonzero> = (0..10).map(|i| Nonzero::new([0, i, 0], 1.0)).collect();
        let t = SparseTensor::from_elements("t", vec![1, 10, 1], elems).unwrap();
        let plan = build_mode_plan(&t, 0, &cfg(1, 1, 4, Strategy::EqualIndex)).unwrap();
        let s = &plan.shards[0];
        let sizes: Vec<usize> = (0..s.isp_count()).map(|z| s.isp(z).len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(plan.isp_counts(), vec![3]);
    }

    #[test]
    fn clamps_shards_to_mode_length() {
        let t = synth(&[3, 5, 5], 20, None, 2);
        let plan = build_mode_plan(&t, 0, &cfg(4, 4, 16, Strategy::NnzBalanced)).unwrap();
        assert_eq!(plan.shard_count(), 3);
        check_invariants(&t, &plan, 16);
    }

    #[test]
    fn stable_within_an_output_index() {
        let elems = vec![
            Nonzero::new([1, 0, 0], 1.0),
            Nonzero::new([0, 2, 0], 2.0),
            Nonzero::new([1, 1, 1], 3.0),
            Nonzero::new([0, 0, 1], 4.0),
        ];
        let t = SparseTensor::from_elements("t", vec![2, 3, 2], elems).unwrap();
        let plan = build_mode_plan(&t, 0, &cfg(1, 1, 8, Strategy::EqualIndex)).unwrap();
        assert_eq!(plan.shards[0].values, vec![2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn rejects_bad_config_and_mode() {
        let t = synth(&[4, 4, 4], 10, None, 3);
        assert_eq!(
            build_mode_plan(&t, 0, &cfg(0, 1, 1, Strategy::EqualIndex)).unwrap_err(),
            PartitionError::InvalidConfig("devices")
        );
        assert!(matches!(
            build_mode_plan(&t, 3, &PartitionConfig::default()),
            Err(PartitionError::Tensor(TensorError::ModeOutOfRange { .. }))
        ));
    }

    #[test]
    fn one_plan_per_mode_and_deterministic() {
        let t = synth(&[30, 20, 10, 5, 5], 400, None, 4);
        let c = cfg(2, 4, 16, Strategy::NnzBalanced);
        let plans = build_all_plans(&t, &c).unwrap();
        assert_eq!(plans.len(), 5);
        for p in &plans {
            check_invariants(&t, p, 16);
        }
        let again = build_all_plans(&t, &c).unwrap();
        for (a, b) in plans.iter().zip(&again) {
            assert_eq!(encode_plan(&ModePartitionPlan { build_time: Duration::ZERO, ..a.clone() }),
                       encode_plan(&ModePartitionPlan { build_time: Duration::ZERO, ..b.clone() }));
        }
    }

    #[test]
    fn balanced_handles_heavy_head_index() {
        let t = synth(&[1000, 50, 50], 20_000, Some(1.5), 6);
        let c = cfg(4, 4, 256, Strategy::NnzBalanced);
        let plan = build_mode_plan(&t, 0, &c).unwrap();
        check_invariants(&t, &plan, 256);
        let head = t.mode_histogram(0).unwrap()[0] as usize;
        let sizes = plan.shard_sizes();
        let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
        let c_max = *t.mode_histogram(0).unwrap().iter().max().unwrap() as usize;
        assert!(spread <= c_max);
        assert!(sizes[0] >= head);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn plan_invariants_hold(
            seed in any::<u64>(),
            m in 1usize..5,
            s in 1usize..5,
            c in 1usize..40,
            zipf in prop_oneof![Just(None), Just(Some(1.2)), Just(Some(2.0))],
        ) {
            let t = synth(&[40, 12, 9], 300, zipf, seed);
            for strategy in [Strategy::EqualIndex, Strategy::NnzBalanced] {
                for d in 0..3 {
                    let plan = build_mode_plan(&t, d, &cfg(m, s, c, strategy)).unwrap();
                    check_invariants(&t, &plan, c);
                }
            }
            for d in 0..3 {
                let eq = build_mode_plan(&t, d, &cfg(m, s, c, Strategy::EqualIndex)).unwrap();
                let bal = build_mode_plan(&t, d, &cfg(m, s, c, Strategy::NnzBalanced)).unwrap();
                prop_assert!(bal.shard_sizes().iter().max() <= eq.shard_sizes().iter().max());
                let hist = t.mode_histogram(d).unwrap();
                let sizes = bal.shard_sizes();
                let spread = (sizes.iter().max().unwrap() - sizes.iter().min().unwrap()) as u64;
                prop_assert!(spread <= *hist.iter().max().unwrap());
            }
        }
    }
}
