use super::*;
use crate::dense::random_factors;
use crate::oracle::dense_mttkrp_oracle;
use crate::partition::{build_all_plans, build_mode_plan, PartitionConfig};
use crate::synth::{synth_tensor, IndexDistribution, SynthSpec, ValueDistribution};
use crate::tensor::{Nonzero, SparseTensor};
use crate::value::Value;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[u64], nnz: usize, seed: u64) -> SparseTensor {
    synth_tensor(&SynthSpec {
        shape: shape.to_vec(),
        nnz,
        indices: IndexDistribution::Uniform,
        values: ValueDistribution::Uniform,
        seed,
    })
    .unwrap()
}

fn platform(m: usize, g: usize, rank: usize) -> PlatformConfig {
    PlatformConfig {
        devices: m,
        workers_per_device: g,
        rank,
        ..Default::default()
    }
}

fn part(m: usize, g: usize, s: usize, c: usize) -> PartitionConfig {
    PartitionConfig {
        devices: m,
        workers_per_device: g,
        oversubscription: s,
        isp_capacity: c,
        ..Default::default()
    }
}

fn fm(mode: usize, rows: &[&[Value]]) -> FactorMatrix {
    FactorMatrix::new(mode, DenseMatrix::from_rows(rows).unwrap())
}

#[test]
fn elementwise_single_nonzero() {
    let factors = vec![fm(0, &[&[1.0, 2.0]]), fm(1, &[&[0.0, 0.0], &[3.0, 4.0]]), fm(2, &[&[9.0, 9.0], &[9.0, 9.0], &[9.0, 9.0]])];
    assert_eq!(elementwise_compute(&[0, 1, 2], 2.0, &factors, 2), (2, vec![6.0, 16.0]));
    assert_eq!(elementwise_compute(&[0, 1, 2], 0.0, &factors, 2), (2, vec![0.0, 0.0]));
}

#[test]
fn elementwise_five_modes_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = [3u64, 4, 2, 5, 3];
    let factors = random_factors(&shape, 3, &mut rng);
    let idx = [2u64, 1, 0, 4, 2];
    for d in 0..5 {
        let (row, got) = elementwise_compute(&idx, 1.75, &factors, d);
        assert_eq!(row, idx[d]);
        for (r, &g) in got.iter().enumerate() {
            let mut want = 1.75;
            for w in (0..5).filter(|&w| w != d) {
                want *= factors[w].matrix.get(idx[w] as usize, r);
            }
            assert_eq!(g, want);
        }
    }
}

fn ones_tensor() -> SparseTensor {
    let mut els = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                els.push(Nonzero::new(vec![i, j, k], 1.0));
            }
        }
    }
    SparseTensor::from_elements("ones", vec![2, 2, 2], els).unwrap()
}

fn ones_factors(shape: &[u64], rank: usize) -> Vec<FactorMatrix> {
    shape
        .iter()
        .enumerate()
        .map(|(m, &n)| FactorMatrix::new(m, DenseMatrix::filled(n as usize, rank, 1.0)))
        .collect()
}

#[test]
fn execute_shard_counts_with_ones() {
    let t = ones_tensor();
    let cfg = platform(1, 2, 1);
    let plan = build_mode_plan(&t, 0, &part(1, 2, 1, 3)).unwrap();
    let mut dev = DeviceState::new(0, ones_factors(t.shape(), 1));
    dev.begin_mode(0, 2, 1, false);
    for shard in &plan.shards {
        execute_shard(shard, &mut dev, &cfg).unwrap();
    }
    assert_eq!(dev.output_matrix(2, 1).as_slice(), &[4.0, 4.0]);
    assert_eq!(dev.nnz_processed, 8);
}

#[test]
fn execute_empty_shard_leaves_output() {
    let t = ones_tensor();
    let cfg = platform(1, 1, 1);
    let plan = build_mode_plan(&t, 0, &part(1, 1, 1, 4)).unwrap();
    let mut empty = plan.shards[0].clone();
    empty.indices.clear();
    empty.values.clear();
    empty.isp_boundaries = vec![0];
    let mut dev = DeviceState::new(0, ones_factors(t.shape(), 1));
    dev.begin_mode(0, 2, 1, false);
    execute_shard(&empty, &mut dev, &cfg).unwrap();
    assert_eq!(dev.output_matrix(2, 1).as_slice(), &[0.0, 0.0]);
}

#[test]
fn execute_shard_rejects_other_mode() {
    let t = ones_tensor();
    let cfg = platform(1, 1, 1);
    let plan = build_mode_plan(&t, 1, &part(1, 1, 1, 4)).unwrap();
    let mut dev = DeviceState::new(0, ones_factors(t.shape(), 1));
    assert!(matches!(
        execute_shard(&plan.shards[0], &mut dev, &cfg),
        Err(EngineError::NoActiveMode)
    ));
    dev.begin_mode(0, 2, 1, false);
    assert!(matches!(
        execute_shard(&plan.shards[0], &mut dev, &cfg),
        Err(EngineError::ShardModeMismatch { expected: 0, found: 1 })
    ));
}

fn run_shard_g(t: &SparseTensor, factors: &[FactorMatrix], g: usize, acc: Accumulation) -> DenseMatrix {
    let plan = build_mode_plan(t, 0, &part(1, 1, 1, 7)).unwrap();
    let cfg = PlatformConfig {
        accumulation: acc,
        ..platform(1, g, factors[0].rank())
    };
    let mut dev = DeviceState::new(0, factors.to_vec());
    let rows = t.shape()[0] as usize;
    dev.begin_mode(0, rows, cfg.rank, false);
    execute_shard(&plan.shards[0], &mut dev, &cfg).unwrap();
    dev.output_matrix(rows, cfg.rank)
}

#[test]
fn worker_count_invariance() {
    // Few rows, many nonzeros: heavy contention on shared output rows.
    let t = uniform(&[3, 40, 40], 1500, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let factors = random_factors(t.shape(), 8, &mut rng);
    let seq = run_shard_g(&t, &factors, 1, Accumulation::Deterministic);
    assert_eq!(run_shard_g(&t, &factors, 4, Accumulation::Deterministic), seq);
    let atomic = run_shard_g(&t, &factors, 4, Accumulation::Atomic);
    assert!(atomic.max_relative_diff(&seq) <= 1e-10);
}

#[test]
fn single_device_single_worker_is_exact() {
    let t = uniform(&[30, 20, 10], 500, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let factors = random_factors(t.shape(), 8, &mut rng);
    let plans = build_all_plans(&t, &part(1, 1, 1, 16)).unwrap();
    let mut engine = Engine::new(platform(1, 1, 8), t.shape(), factors.clone()).unwrap();
    for plan in &plans {
        let out = engine.mttkrp_mode(plan).unwrap();
        // Oracle sees the factors the engine saw: earlier modes were replaced.
        let want = dense_mttkrp_oracle(&t, engine.factors(), plan.mode);
        let mut inputs = engine.factors().to_vec();
        inputs[plan.mode] = factors[plan.mode].clone();
        let want_inputs = dense_mttkrp_oracle(&t, &inputs, plan.mode).unwrap();
        assert_eq!(out.output, want_inputs);
        assert_eq!(want.unwrap(), want_inputs);
    }
}

#[test]
fn four_devices_match_oracle() {
    let t = uniform(&[30, 20, 10], 500, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let factors = random_factors(t.shape(), 8, &mut rng);
    for acc in [Accumulation::Deterministic, Accumulation::Atomic] {
        for d in 0..3 {
            let plan = build_mode_plan(&t, d, &part(4, 2, 2, 8)).unwrap();
            let cfg = PlatformConfig {
                accumulation: acc,
                ..platform(4, 2, 8)
            };
            let mut engine = Engine::new(cfg, t.shape(), factors.clone()).unwrap();
            let out = engine.mttkrp_mode(&plan).unwrap();
            let want = dense_mttkrp_oracle(&t, &factors, d).unwrap();
            assert!(out.output.max_relative_diff(&want) <= 1e-10, "{acc:?} mode {d}");
            for dev in engine.devices() {
                assert_eq!(dev.factors()[d].matrix, out.output);
            }
        }
    }
}

#[test]
fn write_logs_are_disjoint_and_inside_owned_ranges() {
    let t = uniform(&[64, 50, 40], 4000, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let factors = random_factors(t.shape(), 4, &mut rng);
    let plans = build_all_plans(&t, &part(4, 2, 4, 32)).unwrap();
    for timing in [Timing::Concurrent, Timing::Isolated] {
        let cfg = PlatformConfig {
            instrument: true,
            timing,
            ..platform(4, 2, 4)
        };
        let mut engine = Engine::new(cfg, t.shape(), factors.clone()).unwrap();
        for plan in &plans {
            let out = engine.mttkrp_mode(plan).unwrap();
            let logs = out.write_logs.unwrap();
            let mut writer = vec![None; t.shape()[plan.mode] as usize];
            for (dev, rows) in logs.iter().enumerate() {
                assert!(!rows.is_empty(), "device {dev} idle");
                for &row in rows {
                    assert!(out.owned[dev].iter().any(|r| r.contains(&row)));
                    assert_eq!(writer[row as usize].replace(dev), None, "row {row} written twice");
                }
            }
            let processed: usize = out.metrics.devices.iter().map(|d| d.nnz).sum();
            assert_eq!(processed, t.nnz());
        }
    }
}

#[test]
fn all_modes_accounting() {
    let t = uniform(&[12, 10, 8], 300, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let factors = random_factors(t.shape(), 4, &mut rng);
    let plans = build_all_plans(&t, &part(2, 2, 2, 16)).unwrap();
    let mut engine = Engine::new(platform(2, 2, 4), t.shape(), factors.clone()).unwrap();
    let run = engine.mttkrp_all_modes(&plans).unwrap();
    assert_eq!(run.outputs.len(), 3);
    assert_eq!(run.metrics.modes.iter().map(|m| m.barriers).sum::<usize>(), 6);
    assert_eq!(run.metrics.staging_bytes(), 3 * t.element_bytes());
    // Replay: each mode sees the outputs of the modes before it.
    let mut replay = factors;
    for (d, out) in run.outputs.iter().enumerate() {
        let want = dense_mttkrp_oracle(&t, &replay, d).unwrap();
        assert!(out.max_relative_diff(&want) <= 1e-10);
        replay[d] = FactorMatrix::new(d, out.clone());
    }
    for m in &run.metrics.modes {
        assert!(m.critical_path().as_secs_f64() <= m.wall_time.as_secs_f64() * 1.05 + 1e-6);
    }
    assert!(run.metrics.imbalance_pct() >= 0.0);
}

#[test]
fn static_scheduling_assigns_contiguous_blocks() {
    assert_eq!((0..8).map(|j| static_owner(j, 8, 4)).collect::<Vec<_>>(), [0, 0, 1, 1, 2, 2, 3, 3]);
    assert_eq!((0..3).map(|j| static_owner(j, 3, 4)).collect::<Vec<_>>(), [0, 1, 2]);
    let t = uniform(&[40, 10, 10], 800, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let factors = random_factors(t.shape(), 2, &mut rng);
    let plan = build_mode_plan(&t, 0, &part(4, 1, 2, 64)).unwrap();
    for timing in [Timing::Concurrent, Timing::Isolated] {
        let cfg = PlatformConfig {
            scheduling: Scheduling::Static,
            timing,
            ..platform(4, 1, 2)
        };
        let mut engine = Engine::new(cfg, t.shape(), factors.clone()).unwrap();
        let out = engine.mttkrp_mode(&plan).unwrap();
        for (dev, ranges) in out.owned.iter().enumerate() {
            assert_eq!(ranges.len(), 1);
            assert_eq!(ranges[0].start, plan.shards[2 * dev].lo);
            assert_eq!(ranges[0].end, plan.shards[2 * dev + 1].hi);
        }
        assert_eq!(out.output, dense_mttkrp_oracle(&t, &factors, 0).unwrap());
    }
}

#[test]
fn surplus_devices_stay_idle() {
    let t = uniform(&[2, 5, 5], 20, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let factors = random_factors(t.shape(), 2, &mut rng);
    let plan = build_mode_plan(&t, 0, &part(4, 1, 1, 8)).unwrap();
    assert_eq!(plan.shard_count(), 2);
    let mut engine = Engine::new(platform(4, 1, 2), t.shape(), factors.clone()).unwrap();
    let out = engine.mttkrp_mode(&plan).unwrap();
    assert_eq!(out.output, dense_mttkrp_oracle(&t, &factors, 0).unwrap());
    let busy = out.metrics.devices.iter().filter(|d| d.shards > 0).count();
    assert!(busy <= 2);
}

#[test]
fn config_and_shape_errors() {
    let t = ones_tensor();
    let f = ones_factors(t.shape(), 2);
    assert!(matches!(
        Engine::new(PlatformConfig { devices: 0, ..platform(1, 1, 2) }, t.shape(), f.clone()),
        Err(EngineError::InvalidConfig(_))
    ));
    assert!(matches!(
        Engine::new(platform(1, 1, 3), t.shape(), f.clone()),
        Err(EngineError::FactorRank { .. })
    ));
    assert!(matches!(
        Engine::new(platform(1, 1, 2), &[2, 2], f.clone()),
        Err(EngineError::FactorCount { .. })
    ));
    let mut engine = Engine::new(platform(1, 1, 2), t.shape(), f).unwrap();
    let other = uniform(&[3, 2, 2], 4, 1);
    let plan = build_mode_plan(&other, 0, &part(1, 1, 1, 4)).unwrap();
    assert!(matches!(engine.mttkrp_mode(&plan), Err(EngineError::PlanShape { .. })));
    assert!(engine.set_factor(0, FactorMatrix::new(0, DenseMatrix::zeros(3, 2))).is_err());
}

#[test]
fn ledger_records_staging_and_gather() {
    let t = uniform(&[16, 8, 8], 200, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let factors = random_factors(t.shape(), 2, &mut rng);
    let plan = build_mode_plan(&t, 0, &part(2, 1, 1, 16)).unwrap();
    let mut engine = Engine::new(platform(2, 1, 2), t.shape(), factors).unwrap();
    let out = engine.mttkrp_mode(&plan).unwrap();
    use crate::collective::TransferKind;
    let ledger = engine.ledger();
    assert_eq!(ledger.total_bytes(TransferKind::Staging), t.element_bytes());
    assert_eq!(ledger.total_bytes(TransferKind::Allgather), out.metrics.allgather_bytes);
    assert_eq!(out.metrics.allgather_bytes, 16 * 2 * crate::value::VALUE_BYTES as u64);
    assert!(ledger.records().iter().all(|r| r.bytes > 0));
}
