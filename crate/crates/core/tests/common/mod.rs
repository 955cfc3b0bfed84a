#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use scl_geometry::batching::BatchSet;
use scl_geometry::geometry::project_feasible;
use scl_geometry::{EmbeddingMatrix, LabelSet};

/// Feasible point: uniform entries, a random subset zeroed to land on
/// faces of the orthant, then projected.
pub fn random_feasible(rng: &mut ChaCha8Rng, d: usize, n: usize, nonneg: bool) -> EmbeddingMatrix {
    let sparse = rng.random_bool(0.5);
    let cols: Vec<DVector<f64>> = (0..n)
        .map(|_| loop {
            let v = DVector::from_fn(d, |_, _| {
                let x: f64 = if nonneg {
                    rng.random()
                } else {
                    rng.random_range(-1.0..1.0)
                };
                if sparse && rng.random_bool(0.4) {
                    0.0
                } else {
                    x
                }
            });
            let p = project_feasible(&v, nonneg);
            if !p.degenerate {
                break p.vector;
            }
        })
        .collect();
    EmbeddingMatrix::from_columns(&cols).unwrap()
}

/// Random labels with every class in `0..k` present `lo..=hi` times,
/// shuffled.
pub fn random_labels(rng: &mut ChaCha8Rng, k: usize, lo: usize, hi: usize) -> LabelSet {
    let mut labels: Vec<usize> = (0..k)
        .flat_map(|c| std::iter::repeat_n(c, rng.random_range(lo..=hi)))
        .collect();
    labels.shuffle(rng);
    LabelSet::new(labels).unwrap()
}

/// Random batches: each is a uniformly random subset of size `lo..=hi`.
pub fn random_batches(
    rng: &mut ChaCha8Rng,
    n: usize,
    count: usize,
    lo: usize,
    hi: usize,
) -> BatchSet {
    let batches = (0..count)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.truncate(rng.random_range(lo..=hi.min(n)));
            idx
        })
        .collect();
    BatchSet::new(n, batches).unwrap()
}

/// Central finite differences of `f` at `h`.
pub fn fd_gradient(
    f: impl Fn(&EmbeddingMatrix) -> f64,
    h: &EmbeddingMatrix,
    step: f64,
) -> DMatrix<f64> {
    let (d, n) = (h.d(), h.n());
    DMatrix::from_fn(d, n, |r, c| {
        let mut plus = h.as_matrix().clone();
        plus[(r, c)] += step;
        let mut minus = h.as_matrix().clone();
        minus[(r, c)] -= step;
        let fp = f(&EmbeddingMatrix::new(plus).unwrap());
        let fm = f(&EmbeddingMatrix::new(minus).unwrap());
        (fp - fm) / (2.0 * step)
    })
}

pub fn relative_error(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).norm() / want.norm().max(1e-300)
}
