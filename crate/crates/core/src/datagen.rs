//! Synthetic rank-`r` ground truth `X = P·Q` with i.i.d. `N(0, 2)` factors.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::MeasurementOperator;
use crate::seeds;

/// Variance of every factor entry.
pub const FACTOR_VARIANCE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankInstance {
    pub x: DMatrix<f64>,
    pub b: DVector<f64>,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    pub const PAPER: SplitSizes = SplitSizes {
        train: 50_000,
        validation: 10_000,
        test: 1_000,
    };
    pub const DESK: SplitSizes = SplitSizes {
        train: 5_000,
        validation: 1_000,
        test: 1_000,
    };

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationInfo {
    pub dim: usize,
    pub rank: usize,
    pub rows: usize,
    pub master_seed: u64,
    pub operator_seed: u64,
    pub factor_distribution: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub operator: MeasurementOperator,
    pub train: Vec<LowRankInstance>,
    pub validation: Vec<LowRankInstance>,
    pub test: Vec<LowRankInstance>,
    pub info: GenerationInfo,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LowRankInstance] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train.len(),
            validation: self.validation.len(),
            test: self.test.len(),
        }
    }
}

/// Degrees of freedom `r(2d - r)` of a rank-`r` `d × d` matrix.
pub fn degrees_of_freedom(dim: usize, rank: usize) -> usize {
    rank * (2 * dim - rank)
}

/// Measurement count for a given oversampling ratio over the degrees of freedom.
pub fn measurements_for_oversampling(dim: usize, rank: usize, ratio: f64) -> usize {
    (ratio * degrees_of_freedom(dim, rank) as f64).round() as usize
}

/// Measurement counts of the published experiments: oversampling ratio 3 for
/// the lowest rank at each size, a fixed count otherwise.
pub fn reference_measurements(dim: usize, rank: usize) -> Option<usize> {
    match (dim, rank) {
        (10, 1) | (20, 2) => Some(measurements_for_oversampling(dim, rank, 3.0)),
        (10, 2) | (10, 3) => Some(90),
        (20, 4) | (20, 6) => Some(350),
        _ => None,
    }
}

pub fn generate_instance(
    op: &MeasurementOperator,
    rank: usize,
    seed: u64,
) -> Result<LowRankInstance> {
    let d = op.dim();
    if rank == 0 || rank > d {
        return Err(Error::InvalidArgument(format!(
            "rank must be in 1..={d}, got {rank}"
        )));
    }
    let normal = Normal::new(0.0, FACTOR_VARIANCE.sqrt()).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = DMatrix::from_fn(d, rank, |_, _| normal.sample(&mut rng));
    let q = DMatrix::from_fn(rank, d, |_, _| normal.sample(&mut rng));
    let x = p * q;
    let b = op.apply(&x)?;
    Ok(LowRankInstance { x, b, rank })
}

pub fn generate_split(
    op: &MeasurementOperator,
    rank: usize,
    master_seed: u64,
    split: Split,
    count: usize,
) -> Result<Vec<LowRankInstance>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_instance(op, rank, seeds::derive(master_seed, split.name(), i as u64)))
        .collect()
}

pub fn generate_dataset(
    dim: usize,
    rank: usize,
    rows: usize,
    sizes: SplitSizes,
    master_seed: u64,
) -> Result<Dataset> {
    if sizes.train == 0 || sizes.validation == 0 || sizes.test == 0 {
        return Err(Error::InvalidConfig(format!(
            "split sizes must be positive, got {}/{}/{}",
            sizes.train, sizes.validation, sizes.test
        )));
    }
    let operator_seed = seeds::derive(master_seed, "operator", 0);
    let operator = MeasurementOperator::generate(dim, rows, operator_seed)?;
    if rank == 0 || rank > dim {
        return Err(Error::InvalidArgument(format!(
            "rank must be in 1..={dim}, got {rank}"
        )));
    }
    let train = generate_split(&operator, rank, master_seed, Split::Train, sizes.train)?;
    let validation =
        generate_split(&operator, rank, master_seed, Split::Validation, sizes.validation)?;
    let test = generate_split(&operator, rank, master_seed, Split::Test, sizes.test)?;
    Ok(Dataset {
        operator,
        train,
        validation,
        test,
        info: GenerationInfo {
            dim,
            rank,
            rows,
            master_seed,
            operator_seed,
            factor_distribution: format!("normal(mean=0, variance={FACTOR_VARIANCE})"),
        },
    })
}

/// `σ_{r+1}(X) < tol·σ₁(X)` and `b = A(X)`.
pub fn check_instance(op: &MeasurementOperator, inst: &LowRankInstance) -> Result<()> {
    let sigma = crate::lowrank::svd(&inst.x)?.sigma;
    if inst.rank < sigma.len() && sigma[inst.rank] >= 1e-9 * sigma[0] {
        return Err(Error::InvalidArgument(format!(
            "instance exceeds rank {}: σ_(r+1)/σ_1 = {:e}",
            inst.rank,
            sigma[inst.rank] / sigma[0]
        )));
    }
    let b = op.apply(&inst.x)?;
    let scale = 1.0 + b.amax();
    if (b - &inst.b).amax() > 1e-12 * scale {
        return Err(Error::InvalidArgument(
            "stored measurements do not match A(X)".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degrees_of_freedom_values() {
        assert_eq!(degrees_of_freedom(10, 1), 19);
        assert_eq!(degrees_of_freedom(20, 2), 76);
        assert_eq!(measurements_for_oversampling(10, 1, 3.0), 57);
        assert_eq!(measurements_for_oversampling(20, 2, 3.0), 228);
    }

    #[test]
    fn reference_counts() {
        assert_eq!(reference_measurements(10, 1), Some(57));
        assert_eq!(reference_measurements(10, 2), Some(90));
        assert_eq!(reference_measurements(10, 3), Some(90));
        assert_eq!(reference_measurements(20, 2), Some(228));
        assert_eq!(reference_measurements(20, 4), Some(350));
        assert_eq!(reference_measurements(20, 6), Some(350));
        assert_eq!(reference_measurements(7, 1), None);
    }

    #[test]
    fn instances_are_low_rank_and_consistent() {
        let op = MeasurementOperator::generate(10, 90, 1).unwrap();
        for seed in 0..20 {
            let inst = generate_instance(&op, 2, seed).unwrap();
            check_instance(&op, &inst).unwrap();
            assert_eq!(inst.b, op.apply(&inst.x).unwrap());
        }
    }

    #[test]
    fn rank_out_of_range() {
        let op = MeasurementOperator::generate(4, 8, 1).unwrap();
        assert!(matches!(generate_instance(&op, 0, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(generate_instance(&op, 5, 1), Err(Error::InvalidArgument(_))));
        assert!(generate_instance(&op, 4, 1).is_ok());
    }

    #[test]
    fn dataset_is_deterministic_and_sized() {
        let sizes = SplitSizes {
            train: 7,
            validation: 3,
            test: 2,
        };
        let a = generate_dataset(5, 1, 20, sizes, 42).unwrap();
        let b = generate_dataset(5, 1, 20, sizes, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sizes(), sizes);
        assert_eq!(sizes.total(), 12);
        assert_ne!(a.train[0].x, a.validation[0].x);
        assert_ne!(a, generate_dataset(5, 1, 20, sizes, 43).unwrap());
        assert_eq!(SplitSizes::PAPER.total(), 61_000);
    }

    #[test]
    fn empty_split_is_rejected() {
        let sizes = SplitSizes {
            train: 1,
            validation: 0,
            test: 1,
        };
        assert!(generate_dataset(3, 1, 5, sizes, 0).is_err());
    }
}
