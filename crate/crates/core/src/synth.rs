//! Seeded synthetic sparse tensors.

use crate::tensor::{SparseTensor, TensorError, MIN_MODES};
use crate::value::Value;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("{nnz} nonzeros do not fit in an index space of {space}")]
    Infeasible { nnz: u64, space: u128 },
    #[error("index space overflows 128 bits")]
    SpaceOverflow,
    #[error("zipf exponent must be positive and finite, got {0}")]
    BadExponent(f64),
    #[error("gave up after {draws} draws with {found} of {nnz} distinct tuples")]
    Stalled { draws: u64, found: usize, nnz: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How indices are drawn in every mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IndexDistribution {
    Uniform,
    /// Index `k` (0-based) drawn with probability proportional to `(k + 1)^-s`.
    Zipf { exponent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueDistribution {
    /// Uniform on [0, 1).
    #[default]
    Uniform,
    Ones,
    Normal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub shape: Vec<u64>,
    pub nnz: usize,
    pub indices: IndexDistribution,
    pub values: ValueDistribution,
    pub seed: u64,
}

enum ModeSampler {
    Uniform(u64),
    Zipf(Zipf<f64>, u64),
}

impl ModeSampler {
    fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        match self {
            ModeSampler::Uniform(n) => rng.random_range(0..*n),
            // Zipf yields 1..=n as a float.
            ModeSampler::Zipf(z, n) => ((z.sample(rng) as u64).max(1) - 1).min(n - 1),
        }
    }
}

/// Draws `spec.nnz` distinct index tuples, regenerating duplicates, and
/// attaches values. The output is fully determined by `spec`.
pub fn synth_tensor(spec: &SynthSpec) -> Result<SparseTensor, SynthError> {
    let n = spec.shape.len();
    if n < MIN_MODES {
        return Err(TensorError::TooFewModes(n).into());
    }
    if let Some(mode) = spec.shape.iter().position(|&s| s == 0) {
        return Err(TensorError::EmptyMode { mode }.into());
    }
    let space = spec
        .shape
        .iter()
        .try_fold(1u128, |acc, &s| acc.checked_mul(s as u128))
        .ok_or(SynthError::SpaceOverflow)?;
    if spec.nnz as u128 > space {
        return Err(SynthError::Infeasible {
            nnz: spec.nnz as u64,
            space,
        });
    }
    let samplers: Vec<ModeSampler> = spec
        .shape
        .iter()
        .map(|&len| match spec.indices {
            IndexDistribution::Uniform => Ok(ModeSampler::Uniform(len)),
            IndexDistribution::Zipf { exponent } => {
                if !(exponent.is_finite() && exponent > 0.0) {
                    return Err(SynthError::BadExponent(exponent));
                }
                Zipf::new(len as f64, exponent)
                    .map(|z| ModeSampler::Zipf(z, len))
                    .map_err(|_| SynthError::BadExponent(exponent))
            }
        })
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen: HashSet<u128> = HashSet::with_capacity(spec.nnz);
    let mut indices = Vec::with_capacity(spec.nnz * n);
    let mut values = Vec::with_capacity(spec.nnz);
    let mut tuple = vec![0u64; n];
    let budget = 1000 * spec.nnz as u64 + 1_000_000;
    let mut draws = 0u64;
    while values.len() < spec.nnz {
        if draws == budget {
            return Err(SynthError::Stalled {
                draws,
                found: values.len(),
                nnz: spec.nnz,
            });
        }
        draws += 1;
        let mut key = 0u128;
        for ((slot, sampler), &len) in tuple.iter_mut().zip(&samplers).zip(&spec.shape) {
            *slot = sampler.sample(&mut rng);
            key = key * len as u128 + *slot as u128;
        }
        let value: Value = match spec.values {
            ValueDistribution::Uniform => rng.random(),
            ValueDistribution::Ones => 1.0,
            ValueDistribution::Normal => {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as Value
            }
        };
        if seen.insert(key) {
            indices.extend_from_slice(&tuple);
            values.push(value);
        }
    }
    let label = match spec.indices {
        IndexDistribution::Uniform => format!("synth-uniform-{}", spec.seed),
        IndexDistribution::Zipf { exponent } => format!("synth-zipf{exponent}-{}", spec.seed),
    };
    Ok(SparseTensor::from_parts(label, spec.shape.clone(), indices, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: &[u64], nnz: usize, indices: IndexDistribution, seed: u64) -> SynthSpec {
        SynthSpec {
            shape: shape.to_vec(),
            nnz,
            indices,
            values: ValueDistribution::Uniform,
            seed,
        }
    }

    #[test]
    fn saturates_small_shape() {
        let t = synth_tensor(&spec(&[4, 4, 4], 64, IndexDistribution::Uniform, 1)).unwrap();
        assert_eq!(t.nnz(), 64);
        assert!(t.duplicate_groups().is_empty());
    }

    #[test]
    fn same_seed_same_tensor() {
        let s = spec(&[20, 30, 10], 500, IndexDistribution::Uniform, 9);
        assert_eq!(synth_tensor(&s).unwrap(), synth_tensor(&s).unwrap());
        let other = SynthSpec { seed: 10, ..s.clone() };
        assert_ne!(synth_tensor(&s).unwrap(), synth_tensor(&other).unwrap());
    }

    #[test]
    fn infeasible_count() {
        let err = synth_tensor(&spec(&[2, 2, 2], 9, IndexDistribution::Uniform, 0)).unwrap_err();
        assert_eq!(err, SynthError::Infeasible { nnz: 9, space: 8 });
    }

    #[test]
    fn bad_exponent() {
        let err = synth_tensor(&spec(&[5, 5, 5], 3, IndexDistribution::Zipf { exponent: 0.0 }, 0)).unwrap_err();
        assert_eq!(err, SynthError::BadExponent(0.0));
    }

    #[test]
    fn zipf_head_outweighs_median() {
        let t = synth_tensor(&spec(&[1000, 100, 100], 10_000, IndexDistribution::Zipf { exponent: 1.2 }, 5)).unwrap();
        let hist = t.mode_histogram(0).unwrap();
        let mut sorted = hist.clone();
        sorted.sort_unstable();
        let median = sorted[sorted.len() / 2];
        assert!(hist[0] > median, "top {} vs median {}", hist[0], median);
        assert_eq!(*sorted.last().unwrap(), hist[0]);
    }

    #[test]
    fn value_distributions() {
        let mut s = spec(&[10, 10, 10], 50, IndexDistribution::Uniform, 2);
        s.values = ValueDistribution::Ones;
        assert!(synth_tensor(&s).unwrap().values().iter().all(|&v| v == 1.0));
        s.values = ValueDistribution::Normal;
        assert!(synth_tensor(&s).unwrap().values().iter().any(|&v| v < 0.0));
    }
}
