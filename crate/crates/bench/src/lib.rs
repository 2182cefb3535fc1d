//! Seeded inputs shared by the benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use incalign::cascade::{absolute_lambda, augment, solve_stage, AdaptiveStage};
use incalign::{ObservationBatch, PcaSubspace, RankRule};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Rank-`rank` subspace in `d` dimensions built from `m` observations.
pub fn subspace(d: usize, rank: usize, m: usize) -> PcaSubspace {
    let basis = random_matrix(d, rank, 1).qr().q();
    let sigma = DVector::from_fn(rank, |i, _| 100.0 / (i + 1) as f64);
    let mean = random_matrix(d, 1, 2).column(0).into_owned();
    PcaSubspace::from_parts(mean, basis, sigma, m, m as f64, RankRule::fixed(rank)).expect("valid subspace")
}

pub fn batch(d: usize, n: usize) -> ObservationBatch {
    ObservationBatch::new(random_matrix(d, n, 3)).expect("non-empty batch")
}

/// Ridge stage over `rows` random samples of `dim` features and 8 targets.
pub fn stage(dim: usize, rows: usize) -> AdaptiveStage {
    let x = augment(&random_matrix(rows, dim, 4));
    let y = random_matrix(rows, 8, 5);
    solve_stage(&x, &y, absolute_lambda(&x, 1e-2)).expect("solvable")
}

/// `n` augmented feature rows and targets matching [`stage`].
pub fn online_rows(dim: usize, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (augment(&random_matrix(n, dim, 6)), random_matrix(n, 8, 7))
}
