//! Sharded sparse MTTKRP across simulated devices.
//!
//! A sparse tensor is copied once per output mode and each copy is cut into
//! tensor shards by output index, so no two devices ever update the same
//! output row. Shards are cut again into fixed-capacity inter-shard
//! partitions that a device's workers pull dynamically. After every mode the
//! devices exchange their output rows with a ring all-gather.
//!
//! Devices are groups of worker threads; transfers are buffer copies with
//! byte accounting. [`cpd`] builds CP-ALS on top of the engine.

#![cfg_attr(not(feature = "f32"), allow(clippy::unnecessary_cast))]

pub mod collective;
pub mod cpd;
pub mod dense;
pub mod engine;
pub mod metrics;
pub mod oracle;
pub mod partition;
pub mod synth;
pub mod tensor;
pub mod tns;
pub mod value;

pub use dense::{khatri_rao, DenseMatrix, FactorMatrix};
pub use engine::{Accumulation, Engine, PlatformConfig, Scheduling, Timing};

pub use oracle::dense_mttkrp_oracle;
pub use partition::{build_all_plans, build_mode_plan, ModePartitionPlan, PartitionConfig, Strategy};
pub use tensor::{Nonzero, SparseTensor};
pub use value::Value;
