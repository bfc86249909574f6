//! CP decomposition by alternating least squares on top of the MTTKRP engine.

use crate::dense::{DenseMatrix, FactorMatrix};
use crate::engine::{Engine, EngineError, PlatformConfig};
use crate::metrics::ModeMetrics;
use crate::oracle::{dense_mttkrp_oracle, MttkrpError};
use crate::partition::{build_all_plans, ModePartitionPlan, PartitionConfig, PartitionError};
use crate::tensor::SparseTensor;
use crate::value::Value;
use nalgebra::{Cholesky, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CpdError {
    #[error("rank must be positive")]
    ZeroRank,
    #[error("iteration count must be positive")]
    ZeroIterations,
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("tensor has zero norm")]
    ZeroNorm,
    #[error("gram matrices do not match: expected {expected}x{expected}")]
    GramShape { expected: usize },
    #[error("normal equations could not be solved")]
    Singular,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Mttkrp(#[from] MttkrpError),
}

/// `Y^T Y`.
pub fn gram(y: &DenseMatrix) -> DenseMatrix {
    let r = y.cols();
    let mut out = DenseMatrix::zeros(r, r);
    for i in 0..y.rows() {
        let row = y.row(i);
        for a in 0..r {
            let ya = row[a];
            let dst = out.row_mut(a);
            for b in a..r {
                dst[b] += ya * row[b];
            }
        }
    }
    for a in 0..r {
        for b in 0..a {
            let v = out.get(b, a);
            out.set(a, b, v);
        }
    }
    out
}

fn hadamard_all(grams: &[&DenseMatrix], rank: usize) -> Result<DenseMatrix, CpdError> {
    let mut v = DenseMatrix::filled(rank, rank, 1.0);
    for g in grams {
        if g.rows() != rank || g.cols() != rank {
            return Err(CpdError::GramShape { expected: rank });
        }
        for (o, &x) in v.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *o *= x;
        }
    }
    Ok(v)
}

fn to_na(m: &DenseMatrix) -> DMatrix<Value> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_na(m: &DMatrix<Value>) -> DenseMatrix {
    let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    DenseMatrix::from_vec(m.nrows(), m.ncols(), data).expect("dimensions from source")
}

/// Solves `A V = M` for `A` with `V` symmetric positive semidefinite.
///
/// Cholesky first, then with `1e-12 * trace / R` added to the diagonal, then
/// the pseudo-inverse.
pub fn solve_normal_equations(mttkrp_out: &DenseMatrix, v: &DenseMatrix) -> Result<DenseMatrix, CpdError> {
    if !mttkrp_out.is_finite() {
        return Err(CpdError::NonFinite("MTTKRP output"));
    }
    if !v.is_finite() {
        return Err(CpdError::NonFinite("gram matrices"));
    }
    let r = v.rows();
    if v.cols() != r || mttkrp_out.cols() != r {
        return Err(CpdError::GramShape { expected: mttkrp_out.cols() });
    }
    let vm = to_na(v);
    // V symmetric: A = M V^-1  <=>  A^T = V^-1 M^T.
    let rhs = to_na(mttkrp_out).transpose();
    let solved = if let Some(ch) = Cholesky::new(vm.clone()) {
        ch.solve(&rhs)
    } else {
        let trace: Value = (0..r).map(|i| vm[(i, i)]).sum();
        let mut jittered = vm.clone();
        let jitter = 1e-12 * trace / r as Value;
        for i in 0..r {
            jittered[(i, i)] += jitter;
        }
        match Cholesky::new(jittered) {
            Some(ch) => ch.solve(&rhs),
            None => {
                let pinv = vm.pseudo_inverse(Value::EPSILON).map_err(|_| CpdError::Singular)?;
                pinv * rhs
            }
        }
    };
    let out = from_na(&solved.transpose());
    if out.is_finite() {
        Ok(out)
    } else {
        Err(CpdError::Singular)
    }
}

/// Scales each column to unit 2-norm and returns the norms. Zero columns
/// stay zero with weight 0.
pub fn normalize_columns(m: &mut DenseMatrix) -> Vec<Value> {
    let r = m.cols();
    let mut norms = vec![0.0 as Value; r];
    for i in 0..m.rows() {
        for (n, &x) in norms.iter_mut().zip(m.row(i)) {
            *n += x * x;
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    for i in 0..m.rows() {
        for (x, &n) in m.row_mut(i).iter_mut().zip(&norms) {
            if n > 0.0 {
                *x /= n;
            }
        }
    }
    norms
}

/// New factor for `mode` from its MTTKRP output and the grams of all other
/// modes; the column norms are returned as `lambdas`.
pub fn als_update(mode: usize, mttkrp_out: &DenseMatrix, grams: &[&DenseMatrix]) -> Result<FactorMatrix, CpdError> {
    let v = hadamard_all(grams, mttkrp_out.cols())?;
    let mut a = solve_normal_equations(mttkrp_out, &v)?;
    let lambdas = normalize_columns(&mut a);
    let mut f = FactorMatrix::new(mode, a);
    f.lambdas = Some(lambdas);
    Ok(f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpModel {
    pub factors: Vec<FactorMatrix>,
    pub lambdas: Vec<Value>,
    pub fit_history: Vec<f64>,
}

impl CpModel {
    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }

    /// Model value at one coordinate.
    pub fn evaluate(&self, indices: &[u64]) -> f64 {
        let mut acc = 0.0;
        for (r, &l) in self.lambdas.iter().enumerate() {
            let mut p = l as f64;
            for (f, &i) in self.factors.iter().zip(indices) {
                p *= f.matrix.get(i as usize, r) as f64;
            }
            acc += p;
        }
        acc
    }

    /// `||X_hat||^2 = sum_{r,s} l_r l_s prod_w G_w(r, s)`.
    pub fn norm_squared(&self) -> f64 {
        let grams: Vec<DenseMatrix> = self.factors.iter().map(|f| gram(&f.matrix)).collect();
        let r = self.rank();
        let mut total = 0.0;
        for a in 0..r {
            for b in 0..r {
                let mut p = self.lambdas[a] as f64 * self.lambdas[b] as f64;
                for g in &grams {
                    p *= g.get(a, b) as f64;
                }
                total += p;
            }
        }
        total
    }
}

/// `1 - ||X - X_hat|| / ||X||`, using only the nonzeros of `X` and the
/// model grams.
pub fn fit(x: &SparseTensor, model: &CpModel) -> Result<f64, CpdError> {
    let xx = x.norm_squared();
    if xx == 0.0 {
        return Err(CpdError::ZeroNorm);
    }
    // ||X - X_hat||^2 = ||X||^2 - 2<X, X_hat> + ||X_hat||^2, regrouped so the
    // residual at the nonzeros is summed directly.
    let mut on_support = 0.0;
    let mut model_on_support = 0.0;
    for e in x.elements() {
        let m = model.evaluate(e.indices);
        let d = e.value as f64 - m;
        on_support += d * d;
        model_on_support += m * m;
    }
    let off_support = (model.norm_squared() - model_on_support).max(0.0);
    let residual = (on_support + off_support).sqrt();
    let f = 1.0 - residual / xx.sqrt();
    if f.is_finite() {
        Ok(f)
    } else {
        Err(CpdError::NonFinite("fit"))
    }
}

/// Source of MTTKRP results for the ALS sweep.
pub trait MttkrpBackend {
    fn set_factor(&mut self, mode: usize, factor: &FactorMatrix) -> Result<(), CpdError>;
    fn mttkrp(&mut self, mode: usize) -> Result<DenseMatrix, CpdError>;
}

/// Runs MTTKRP on the sharded multi-device engine.
#[derive(Debug)]
pub struct EngineBackend {
    engine: Engine,
    plans: Vec<ModePartitionPlan>,
    pub mode_metrics: Vec<ModeMetrics>,
}

impl EngineBackend {
    pub fn new(x: &SparseTensor, platform: PlatformConfig, partition: &PartitionConfig) -> Result<Self, CpdError> {
        let plans = build_all_plans(x, partition)?;
        Self::from_plans(x.shape(), platform, plans)
    }

    pub fn from_plans(shape: &[u64], platform: PlatformConfig, plans: Vec<ModePartitionPlan>) -> Result<Self, CpdError> {
        let zeros = shape
            .iter()
            .enumerate()
            .map(|(m, &n)| FactorMatrix::new(m, DenseMatrix::zeros(n as usize, platform.rank)))
            .collect();
        Ok(Self {
            engine: Engine::new(platform, shape, zeros)?,
            plans,
            mode_metrics: Vec::new(),
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }
}

impl MttkrpBackend for EngineBackend {
    fn set_factor(&mut self, mode: usize, factor: &FactorMatrix) -> Result<(), CpdError> {
        Ok(self.engine.set_factor(mode, factor.clone())?)
    }

    fn mttkrp(&mut self, mode: usize) -> Result<DenseMatrix, CpdError> {
        let out = self.engine.mttkrp_mode(&self.plans[mode])?;
        self.mode_metrics.push(out.metrics);
        Ok(out.output)
    }
}

/// Runs MTTKRP with the sequential reference implementation.
#[derive(Debug)]
pub struct OracleBackend<'a> {
    tensor: &'a SparseTensor,
    factors: Vec<FactorMatrix>,
}

impl<'a> OracleBackend<'a> {
    pub fn new(tensor: &'a SparseTensor, rank: usize) -> Self {
        let factors = tensor
            .shape()
            .iter()
            .enumerate()
            .map(|(m, &n)| FactorMatrix::new(m, DenseMatrix::zeros(n as usize, rank)))
            .collect();
        Self { tensor, factors }
    }
}

impl MttkrpBackend for OracleBackend<'_> {
    fn set_factor(&mut self, mode: usize, factor: &FactorMatrix) -> Result<(), CpdError> {
        self.factors[mode] = factor.clone();
        Ok(())
    }

    fn mttkrp(&mut self, mode: usize) -> Result<DenseMatrix, CpdError> {
        Ok(dense_mttkrp_oracle(self.tensor, &self.factors, mode)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpdOptions {
    pub rank: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Stop early once the fit improves by less than this.
    pub tolerance: Option<f64>,
}

impl Default for CpdOptions {
    fn default() -> Self {
        Self {
            rank: 8,
            iterations: 25,
            seed: 0,
            tolerance: None,
        }
    }
}

/// Seeded uniform(0, 1) starting factors.
pub fn initial_factors(shape: &[u64], rank: usize, seed: u64) -> Vec<FactorMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    crate::dense::random_factors(shape, rank, &mut rng)
}

pub fn cp_als<B: MttkrpBackend>(x: &SparseTensor, opts: &CpdOptions, backend: &mut B) -> Result<CpModel, CpdError> {
    if opts.rank == 0 {
        return Err(CpdError::ZeroRank);
    }
    if opts.iterations == 0 {
        return Err(CpdError::ZeroIterations);
    }
    let n = x.num_modes();
    let mut factors = initial_factors(x.shape(), opts.rank, opts.seed);
    for f in &factors {
        backend.set_factor(f.mode, f)?;
    }
    let mut grams: Vec<DenseMatrix> = factors.iter().map(|f| gram(&f.matrix)).collect();
    let mut model = CpModel {
        factors: Vec::new(),
        lambdas: vec![1.0; opts.rank],
        fit_history: Vec::with_capacity(opts.iterations),
    };
    for _ in 0..opts.iterations {
        for d in 0..n {
            let m = backend.mttkrp(d)?;
            let others: Vec<&DenseMatrix> = (0..n).filter(|&w| w != d).map(|w| &grams[w]).collect();
            let mut f = als_update(d, &m, &others)?;
            model.lambdas = f.lambdas.take().unwrap_or_default();
            backend.set_factor(d, &f)?;
            grams[d] = gram(&f.matrix);
            factors[d] = f;
        }
        model.factors = factors.clone();
        let current = fit(x, &model)?;
        let previous = model.fit_history.last().copied();
        model.fit_history.push(current);
        if let (Some(tol), Some(prev)) = (opts.tolerance, previous) {
            if (current - prev).abs() < tol {
                break;
            }
        }
    }
    Ok(model)
}

/// Writes one factor as comma-separated rows.
pub fn write_factor_csv<W: Write>(factor: &FactorMatrix, mut out: W) -> io::Result<()> {
    for i in 0..factor.rows() {
        let row: Vec<String> = factor.row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
