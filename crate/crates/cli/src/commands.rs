//! Verb implementations.

use crate::output::{human_shape, Sink};
use crate::{CpdArgs, DistArg, ImbalanceArgs, InfoArgs, MttkrpArgs, PartitionArgs, ScalingArgs, SynthArgs, ValuesArg};
use shardkrp::cpd::{cp_als, initial_factors, write_factor_csv, CpdError, CpdOptions, EngineBackend};
use shardkrp::engine::EngineError;
use shardkrp::metrics::{MetricRecord, Unit};
use shardkrp::partition::{
    build_mode_plan, load_plan, save_plan, tensor_fingerprint, PartitionConfig, PartitionError, PlanCacheError,
};
use shardkrp::synth::{synth_tensor, IndexDistribution, SynthError, SynthSpec, ValueDistribution};
use shardkrp::tensor::SparseTensor;
use shardkrp::tns::{parse_tns, write_tns, ParseOptions, TnsError};
use shardkrp::{
    build_all_plans, dense_mttkrp_oracle, Accumulation, Engine, FactorMatrix, ModePartitionPlan, PlatformConfig,
    Timing,
};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Verify(String),
    Io(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Verify(_) => EXIT_VERIFY,
            CliError::Io(_) => EXIT_IO,
            CliError::Failed(_) => EXIT_FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
            CliError::Io(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<PartitionError> for CliError {
    fn from(e: PartitionError) -> Self {
        match e {
            PartitionError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<CpdError> for CliError {
    fn from(e: CpdError) -> Self {
        match e {
            CpdError::Engine(e) => e.into(),
            CpdError::Partition(e) => e.into(),
            CpdError::ZeroRank | CpdError::ZeroIterations => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn load_tensor(path: &Path) -> Result<SparseTensor> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let loaded = parse_tns(BufReader::new(file), &ParseOptions::default())
        .map_err(|e: TnsError| CliError::Io(format!("{}: {e}", path.display())))?;
    if loaded.stats.zero_values > 0 {
        log::warn!("{}: {} explicit zero values", path.display(), loaded.stats.zero_values);
    }
    let mut t = loaded.tensor;
    if t.name().is_empty() {
        if let Some(stem) = path.file_stem() {
            t.set_name(stem.to_string_lossy());
        }
    }
    Ok(t)
}

fn check_platform(cfg: &PlatformConfig) -> Result<()> {
    cfg.validate().map_err(CliError::from)
}

fn check_run(iterations: usize) -> Result<()> {
    if iterations == 0 {
        return Err(CliError::Usage("--iterations must be at least 1".into()));
    }
    Ok(())
}

pub fn info(a: &InfoArgs) -> Result<()> {
    let t = load_tensor(&a.tensor)?;
    let counts = t.mode_index_counts();
    if a.json {
        let obj = serde_json::json!({
            "name": t.name(),
            "shape": t.shape(),
            "shape_human": human_shape(t.shape()),
            "nnz": t.nnz(),
            "density": t.density(),
            "index_counts": counts,
        });
        println!("{obj}");
        return Ok(());
    }
    let mut out = io::stdout().lock();
    writeln!(out, "name: {}", t.name())?;
    writeln!(out, "modes: {}", t.num_modes())?;
    writeln!(
        out,
        "shape: {} ({})",
        human_shape(t.shape()),
        t.shape().iter().map(u64::to_string).collect::<Vec<_>>().join(" x ")
    )?;
    writeln!(out, "nnz: {}", t.nnz())?;
    writeln!(out, "density: {}", t.density())?;
    for (mode, (&len, &used)) in t.shape().iter().zip(&counts).enumerate() {
        writeln!(out, "mode {mode}: {used} of {len} indices used")?;
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        shape: a.shape.clone(),
        nnz: a.nnz,
        indices: match a.dist {
            DistArg::Uniform => IndexDistribution::Uniform,
            DistArg::Zipf => IndexDistribution::Zipf { exponent: a.exponent },
        },
        values: match a.values {
            ValuesArg::Uniform => ValueDistribution::Uniform,
            ValuesArg::Ones => ValueDistribution::Ones,
            ValuesArg::Normal => ValueDistribution::Normal,
        },
        seed: a.seed,
    };
    let t = synth_tensor(&spec).map_err(|e| match e {
        SynthError::Stalled { .. } => CliError::Failed(e.to_string()),
        other => CliError::Usage(other.to_string()),
    })?;
    let mut out = BufWriter::new(File::create(&a.output).map_err(|e| CliError::Io(format!("{}: {e}", a.output.display())))?);
    write_tns(&t, &mut out)?;
    out.flush()?;
    eprintln!("wrote {} ({} nonzeros, shape {})", a.output.display(), t.nnz(), human_shape(t.shape()));
    Ok(())
}

fn plan_path(dir: &Path, mode: usize) -> PathBuf {
    dir.join(format!("mode-{mode}.plan"))
}

fn plan_matches(plan: &ModePartitionPlan, t: &SparseTensor, fingerprint: u64, mode: usize) -> bool {
    plan.mode == mode && plan.shape == t.shape() && plan.fingerprint == fingerprint && plan.nnz() == t.nnz()
}

fn plan_records(plan: &ModePartitionPlan, cached: bool) -> Vec<MetricRecord> {
    let mode = Some(plan.mode);
    let sizes = plan.shard_sizes();
    vec![
        MetricRecord::seconds("preprocessing_time", mode, None, plan.build_time),
        MetricRecord::new("shards", mode, None, plan.shard_count() as f64, Unit::Count),
        MetricRecord::new("isps", mode, None, plan.total_isps() as f64, Unit::Count),
        MetricRecord::new("max_shard_nnz", mode, None, sizes.iter().max().copied().unwrap_or(0) as f64, Unit::Count),
        MetricRecord::new("min_shard_nnz", mode, None, sizes.iter().min().copied().unwrap_or(0) as f64, Unit::Count),
        MetricRecord::new("cache_hit", mode, None, if cached { 1.0 } else { 0.0 }, Unit::Count),
    ]
}

pub fn partition(a: &PartitionArgs) -> Result<()> {
    let t = load_tensor(&a.tensor)?;
    let cfg = a.engine.partition(a.devices);
    cfg.validate()?;
    fs::create_dir_all(&a.cache_dir).map_err(|e| CliError::Io(format!("{}: {e}", a.cache_dir.display())))?;
    let fingerprint = tensor_fingerprint(&t);
    let mut sink = Sink::open("partition", a.engine.out.as_deref())?;
    let mut rebuilt = 0;
    for mode in 0..t.num_modes() {
        let path = plan_path(&a.cache_dir, mode);
        if !a.force && path.exists() {
            match load_plan(&path) {
                Ok(p) if plan_matches(&p, &t, fingerprint, mode) && p.config == cfg => {
                    sink.emit_all(Some(a.devices), None, plan_records(&p, true))?;
                    continue;
                }
                Ok(_) => log::info!("{}: stale plan, rebuilding", path.display()),
                Err(e) => log::warn!("{}: {e}; rebuilding", path.display()),
            }
        }
        let plan = build_mode_plan(&t, mode, &cfg)?;
        save_plan(&plan, &path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        sink.emit_all(Some(a.devices), None, plan_records(&plan, false))?;
        rebuilt += 1;
    }
    sink.finish()?;
    if rebuilt == 0 {
        eprintln!("plans in {} are up to date", a.cache_dir.display());
    } else {
        eprintln!("built {rebuilt} plan(s) in {}", a.cache_dir.display());
    }
    Ok(())
}

fn load_plans(dir: &Path, t: &SparseTensor) -> Result<Vec<ModePartitionPlan>> {
    let fingerprint = tensor_fingerprint(t);
    (0..t.num_modes())
        .map(|mode| {
            let path = plan_path(dir, mode);
            let plan = load_plan(&path).map_err(|e| match e {
                PlanCacheError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
                other => CliError::Io(format!("{}: {other}", path.display())),
            })?;
            if !plan_matches(&plan, t, fingerprint, mode) {
                return Err(CliError::Usage(format!("{} was built for a different tensor", path.display())));
            }
            Ok(plan)
        })
        .collect()
}

/// Largest per-mode relative error against the oracle replayed on the
/// engine's own mode outputs.
fn verify_outputs(t: &SparseTensor, inputs: &[FactorMatrix], outputs: &[shardkrp::DenseMatrix]) -> Result<f64> {
    let mut replay = inputs.to_vec();
    let mut worst = 0.0f64;
    for (d, out) in outputs.iter().enumerate() {
        let want = dense_mttkrp_oracle(t, &replay, d).map_err(|e| CliError::Failed(e.to_string()))?;
        worst = worst.max(out.max_relative_diff(&want));
        replay[d] = FactorMatrix::new(d, out.clone());
    }
    Ok(worst)
}

pub fn mttkrp(a: &MttkrpArgs) -> Result<()> {
    check_run(a.run.iterations)?;
    let t = load_tensor(&a.tensor)?;
    let platform = a.engine.platform(a.devices, a.run.rank, Timing::Concurrent);
    check_platform(&platform)?;
    let plans = match &a.plans {
        Some(dir) => load_plans(dir, &t)?,
        None => {
            let cfg = a.engine.partition(a.devices);
            cfg.validate()?;
            build_all_plans(&t, &cfg)?
        }
    };
    let tolerance = match platform.accumulation {
        Accumulation::Deterministic => 1e-10,
        Accumulation::Atomic => 1e-6,
    };
    let factors = initial_factors(t.shape(), a.run.rank, a.run.seed);
    let mut sink = Sink::open("mttkrp", a.engine.out.as_deref())?;
    let mut failure = None;
    for it in 0..a.run.warmup + a.run.iterations {
        let mut engine = Engine::new(platform.clone(), t.shape(), factors.clone())?;
        let run = engine.mttkrp_all_modes(&plans)?;
        let Some(measured) = it.checked_sub(a.run.warmup) else { continue };
        sink.emit_all(Some(a.devices), Some(measured), run.metrics.records())?;
        if a.verify {
            let err = verify_outputs(&t, &factors, &run.outputs)?;
            sink.emit(
                Some(a.devices),
                Some(measured),
                MetricRecord::new("verify_max_rel_err", None, None, err, Unit::Ratio),
            )?;
            if err > tolerance {
                failure.get_or_insert(format!("relative error {err:e} exceeds {tolerance:e}"));
            }
        }
    }
    sink.finish()?;
    match failure {
        Some(msg) => Err(CliError::Verify(msg)),
        None => Ok(()),
    }
}

/// Runs warm-up plus measured repetitions; returns the measured runs.
fn repeated_runs(
    t: &SparseTensor,
    platform: &PlatformConfig,
    partition: &PartitionConfig,
    run: &crate::RunArgs,
) -> Result<Vec<shardkrp::metrics::RunMetrics>> {
    check_platform(platform)?;
    partition.validate()?;
    let plans = build_all_plans(t, partition)?;
    let factors = initial_factors(t.shape(), run.rank, run.seed);
    let mut out = Vec::with_capacity(run.iterations);
    for it in 0..run.warmup + run.iterations {
        let mut engine = Engine::new(platform.clone(), t.shape(), factors.clone())?;
        let metrics = engine.mttkrp_all_modes(&plans)?.metrics;
        if it >= run.warmup {
            out.push(metrics);
        }
    }
    Ok(out)
}

pub fn scaling(a: &ScalingArgs) -> Result<()> {
    check_run(a.run.iterations)?;
    if !a.devices.contains(&1) {
        return Err(CliError::Usage("--devices must include 1 as the baseline".into()));
    }
    let t = load_tensor(&a.tensor)?;
    let mut sink = Sink::open("scaling", a.engine.out.as_deref())?;
    let mut spans = Vec::new();
    for &m in &a.devices {
        let platform = a.engine.platform(m, a.run.rank, Timing::Concurrent);
        let runs = repeated_runs(&t, &platform, &a.engine.partition(m), &a.run)?;
        let mut total = Duration::ZERO;
        for (i, r) in runs.iter().enumerate() {
            sink.emit(Some(m), Some(i), MetricRecord::seconds("compute_span", None, None, r.compute_span()))?;
            total += r.compute_span();
        }
        spans.push((m, total / runs.len() as u32));
    }
    let base = spans.iter().find(|(m, _)| *m == 1).map(|s| s.1).unwrap_or_default();
    eprintln!("{:>8} {:>14} {:>8}", "devices", "compute (s)", "speedup");
    for &(m, span) in &spans {
        let speedup = base.as_secs_f64() / span.as_secs_f64().max(f64::MIN_POSITIVE);
        sink.emit(Some(m), None, MetricRecord::new("speedup", None, None, speedup, Unit::Ratio))?;
        eprintln!("{m:>8} {:>14.6} {speedup:>8.2}", span.as_secs_f64());
    }
    sink.finish()?;
    Ok(())
}

pub fn imbalance(a: &ImbalanceArgs) -> Result<()> {
    check_run(a.run.iterations)?;
    let t = load_tensor(&a.tensor)?;
    let platform = a.engine.platform(a.devices, a.run.rank, Timing::Isolated);
    let runs = repeated_runs(&t, &platform, &a.engine.partition(a.devices), &a.run)?;
    let mut sink = Sink::open("imbalance", a.engine.out.as_deref())?;
    for (i, r) in runs.iter().enumerate() {
        for (device, time) in r.device_compute_times().into_iter().enumerate() {
            sink.emit(Some(a.devices), Some(i), MetricRecord::seconds("compute_time", None, Some(device), time))?;
        }
        sink.emit(
            Some(a.devices),
            Some(i),
            MetricRecord::new("imbalance", None, None, r.imbalance_pct(), Unit::Percent),
        )?;
    }
    sink.finish()?;
    if let Some(last) = runs.last() {
        for (device, time) in last.device_compute_times().into_iter().enumerate() {
            eprintln!("device {device}: {:.6} s", time.as_secs_f64());
        }
        eprintln!("imbalance: {:.2}%", last.imbalance_pct());
    }
    Ok(())
}

pub fn cpd(a: &CpdArgs) -> Result<()> {
    let t = load_tensor(&a.tensor)?;
    let platform = a.engine.platform(a.devices, a.rank, Timing::Concurrent);
    check_platform(&platform)?;
    let opts = CpdOptions {
        rank: a.rank,
        iterations: a.iterations,
        seed: a.seed,
        tolerance: a.tol,
    };
    let start = Instant::now();
    let mut backend = EngineBackend::new(&t, platform, &a.engine.partition(a.devices))?;
    let model = cp_als(&t, &opts, &mut backend)?;
    let elapsed = start.elapsed();
    let mut sink = Sink::open("cpd", a.engine.out.as_deref())?;
    for (i, &f) in model.fit_history.iter().enumerate() {
        sink.emit(Some(a.devices), Some(i), MetricRecord::new("fit", None, None, f, Unit::Ratio))?;
    }
    sink.emit(Some(a.devices), None, MetricRecord::seconds("wall_time", None, None, elapsed))?;
    sink.finish()?;
    if let Some(dir) = &a.factors_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        for f in &model.factors {
            let path = dir.join(format!("mode-{}.csv", f.mode));
            write_factor_csv(f, BufWriter::new(File::create(&path)?))?;
        }
        let mut w = BufWriter::new(File::create(dir.join("lambdas.csv"))?);
        for l in &model.lambdas {
            writeln!(w, "{l:?}")?;
        }
        w.flush()?;
    }
    if let Some(last) = model.fit_history.last() {
        eprintln!("fit {last:.6} after {} iterations", model.fit_history.len());
    }
    Ok(())
}
