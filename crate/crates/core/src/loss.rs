//! Full-batch and mini-batch supervised contrastive loss, their analytic
//! gradients, and the matching lower bounds.
//!
//! Inner products are divided by the temperature while columns stay on the
//! unit sphere. A class with fewer than two members (globally, or inside a
//! batch) has no positive pairs and contributes zero to both the loss and
//! the bound.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::batching::BatchSet;
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{EmbeddingMatrix, LabelSet};

/// Base temperature used for the optional global `τ/τ_b` loss scaling.
pub const DEFAULT_BASE_TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    /// When set, the loss and bound are multiplied by `tau / base_tau`.
    pub base_tau: Option<f64>,
    /// Divide by the number of examples `n`.
    pub per_sample: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            base_tau: None,
            per_sample: false,
        }
    }
}

impl LossConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        if let Some(b) = self.base_tau {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "base_tau must be > 0, got {b}"
                )));
            }
        }
        Ok(())
    }

    /// Global multiplier applied to both the loss and its bound.
    pub fn scale(&self, n: usize) -> f64 {
        let mut s = 1.0;
        if let Some(b) = self.base_tau {
            s *= self.tau / b;
        }
        if self.per_sample {
            s /= n as f64;
        }
        s
    }
}

/// A loss value next to its analytic lower bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub value: f64,
    pub lower_bound: f64,
    pub gap: f64,
    pub achieved: bool,
    pub tau: f64,
    pub per_sample: bool,
}

impl LossReport {
    /// `achieved` holds when `gap <= rel_tol · max(1, |lower_bound|)`.
    pub fn new(value: f64, lower_bound: f64, cfg: &LossConfig, rel_tol: f64) -> Self {
        let gap = value - lower_bound;
        Self {
            value,
            lower_bound,
            gap,
            achieved: gap <= rel_tol * lower_bound.abs().max(1.0),
            tau: cfg.tau,
            per_sample: cfg.per_sample,
        }
    }
}

/// Classes whose single member makes their loss and bound terms vanish.
pub fn zeroed_classes(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .filter_map(|(c, &n)| (n < 2).then_some(c))
        .collect()
}

/// Per-class bound term `n_c log(n_c - 1 + (n - n_c) e^{-1/τ})`, zero for
/// `n_c < 2`.
fn bound_terms(counts: &[usize], tau: f64) -> f64 {
    let n: usize = counts.iter().sum();
    let decay = (-1.0 / tau).exp();
    counts
        .iter()
        .filter(|&&nc| nc >= 2)
        .map(|&nc| {
            let nc_f = nc as f64;
            nc_f * ((nc_f - 1.0) + (n - nc) as f64 * decay).ln()
        })
        .sum()
}

/// Lower bound on the full-batch loss over the non-negative unit sphere.
pub fn full_lower_bound(counts: &[usize], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if counts.is_empty() {
        return Err(Error::InvalidArgument("counts are empty".into()));
    }
    if counts.contains(&0) {
        return Err(Error::InvalidArgument(
            "class counts must be positive".into(),
        ));
    }
    let n: usize = counts.iter().sum();
    Ok(cfg.scale(n) * bound_terms(counts, cfg.tau))
}

/// Sum of per-batch bounds computed from within-batch class counts.
pub fn batch_lower_bound(batches: &BatchSet, y: &LabelSet, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    batches.validate_against(y)?;
    let per_batch: Vec<f64> = exec::map_slice(batches.batches(), |b| {
        let counts: Vec<usize> = batch_counts(b, y).into_iter().filter(|&c| c > 0).collect();
        bound_terms(&counts, cfg.tau)
    });
    Ok(cfg.scale(y.n()) * exec::ordered_sum(&per_batch))
}

pub(crate) fn batch_counts(batch: &[usize], y: &LabelSet) -> Vec<usize> {
    let mut counts = vec![0usize; y.k()];
    for &i in batch {
        counts[y.label(i)] += 1;
    }
    counts
}

/// One member's contribution and, optionally, its coefficient row
/// `∂f_i/∂s_iℓ` over the batch positions.
struct RowTerm {
    value: f64,
    coeffs: Option<Vec<f64>>,
}

/// Evaluates every member of one batch against a precomputed scaled
/// similarity matrix `S = HᵀH / τ`.
fn batch_rows(sim: &DMatrix<f64>, batch: &[usize], y: &LabelSet, grad: bool) -> Vec<RowTerm> {
    let counts = batch_counts(batch, y);
    let m = batch.len();
    exec::map_indexed(m, |a| {
        let i = batch[a];
        let c = y.label(i);
        let positives = counts[c];
        if positives < 2 {
            return RowTerm {
                value: 0.0,
                coeffs: grad.then(|| vec![0.0; m]),
            };
        }
        let col = sim.column(i);
        let mut max = f64::NEG_INFINITY;
        for (b, &l) in batch.iter().enumerate() {
            if b != a {
                max = max.max(col[l]);
            }
        }
        let mut sum_exp = 0.0;
        let mut pos_sum = 0.0;
        for (b, &l) in batch.iter().enumerate() {
            if b == a {
                continue;
            }
            sum_exp += (col[l] - max).exp();
            if y.label(l) == c {
                pos_sum += col[l];
            }
        }
        let inv_pos = 1.0 / (positives - 1) as f64;
        let value = max + sum_exp.ln() - pos_sum * inv_pos;
        let coeffs = grad.then(|| {
            batch
                .iter()
                .enumerate()
                .map(|(b, &l)| {
                    if b == a {
                        return 0.0;
                    }
                    let p = (col[l] - max).exp() / sum_exp;
                    if y.label(l) == c {
                        p - inv_pos
                    } else {
                        p
                    }
                })
                .collect()
        });
        RowTerm { value, coeffs }
    })
}

/// The contrastive objective over either the full batch or a batch set.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub labels: &'a LabelSet,
    pub batches: Option<&'a BatchSet>,
    pub cfg: LossConfig,
}

impl<'a> Objective<'a> {
    pub fn full(labels: &'a LabelSet, cfg: LossConfig) -> Self {
        Self {
            labels,
            batches: None,
            cfg,
        }
    }

    pub fn batched(labels: &'a LabelSet, batches: &'a BatchSet, cfg: LossConfig) -> Self {
        Self {
            labels,
            batches: Some(batches),
            cfg,
        }
    }

    pub fn validate(&self, h: &EmbeddingMatrix) -> Result<()> {
        self.cfg.validate()?;
        if h.n() != self.labels.n() {
            return Err(Error::DimensionMismatch {
                what: "labels vs embedding columns",
                expected: h.n(),
                found: self.labels.n(),
            });
        }
        match self.batches {
            Some(b) => b.validate_against(self.labels),
            None => {
                if self.labels.counts().iter().all(|&c| c < 2) {
                    Err(Error::DegenerateLoss)
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn lower_bound(&self) -> Result<f64> {
        match self.batches {
            Some(b) => batch_lower_bound(b, self.labels, &self.cfg),
            None => full_lower_bound(self.labels.counts(), &self.cfg),
        }
    }

    fn evaluate(&self, h: &EmbeddingMatrix, grad: bool) -> Result<(f64, Option<DMatrix<f64>>)> {
        self.validate(h)?;
        let n = h.n();
        let sim = h.as_matrix().tr_mul(h.as_matrix()) / self.cfg.tau;
        let everything: Vec<usize>;
        let batches: &[Vec<usize>] = match self.batches {
            Some(b) => b.batches(),
            None => {
                everything = (0..n).collect();
                std::slice::from_ref(&everything)
            }
        };
        let mut total = 0.0;
        let mut coeffs = grad.then(|| DMatrix::<f64>::zeros(n, n));
        for batch in batches {
            let rows = batch_rows(&sim, batch, self.labels, grad);
            for (a, row) in rows.iter().enumerate() {
                total += row.value;
                if let (Some(acc), Some(r)) = (coeffs.as_mut(), row.coeffs.as_ref()) {
                    let i = batch[a];
                    for (b, &l) in batch.iter().enumerate() {
                        acc[(i, l)] += r[b];
                    }
                }
            }
        }
        let scale = self.cfg.scale(self.labels.n());
        let gradient = coeffs.map(|a| {
            let sym = &a + a.transpose();
            h.as_matrix() * sym * (scale / self.cfg.tau)
        });
        Ok((scale * total, gradient))
    }

    pub fn value(&self, h: &EmbeddingMatrix) -> Result<f64> {
        Ok(self.evaluate(h, false)?.0)
    }

    pub fn gradient(&self, h: &EmbeddingMatrix) -> Result<DMatrix<f64>> {
        Ok(self.evaluate(h, true)?.1.expect("gradient requested"))
    }

    pub fn value_and_gradient(&self, h: &EmbeddingMatrix) -> Result<(f64, DMatrix<f64>)> {
        let (v, g) = self.evaluate(h, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    pub fn report(&self, h: &EmbeddingMatrix, rel_tol: f64) -> Result<LossReport> {
        Ok(LossReport::new(
            self.value(h)?,
            self.lower_bound()?,
            &self.cfg,
            rel_tol,
        ))
    }
}

pub fn scl_full_loss(h: &EmbeddingMatrix, y: &LabelSet, cfg: &LossConfig) -> Result<f64> {
    Objective::full(y, *cfg).value(h)
}

pub fn scl_batch_loss(
    h: &EmbeddingMatrix,
    y: &LabelSet,
    batches: &BatchSet,
    cfg: &LossConfig,
) -> Result<f64> {
    Objective::batched(y, batches, *cfg).value(h)
}

/// Euclidean gradient of [`scl_full_loss`] with respect to every entry of
/// `H` (no projection onto the constraint set).
pub fn scl_full_gradient(
    h: &EmbeddingMatrix,
    y: &LabelSet,
    cfg: &LossConfig,
) -> Result<DMatrix<f64>> {
    Objective::full(y, *cfg).gradient(h)
}

pub fn scl_batch_gradient(
    h: &EmbeddingMatrix,
    y: &LabelSet,
    batches: &BatchSet,
    cfg: &LossConfig,
) -> Result<DMatrix<f64>> {
    Objective::batched(y, batches, *cfg).gradient(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_of, project_feasible};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct transcription of the double sum with an inner sum over `ℓ`.
    fn naive_loss(h: &DMatrix<f64>, y: &[usize], tau: f64) -> f64 {
        let n = y.len();
        let mut total = 0.0;
        for i in 0..n {
            let nc = y.iter().filter(|&&c| c == y[i]).count();
            if nc < 2 {
                continue;
            }
            for j in 0..n {
                if j == i || y[j] != y[i] {
                    continue;
                }
                let hij = h.column(i).dot(&h.column(j)) / tau;
                let mut inner = 0.0;
                for l in 0..n {
                    if l != i {
                        inner += (h.column(i).dot(&h.column(l)) / tau - hij).exp();
                    }
                }
                total += inner.ln() / (nc - 1) as f64;
            }
        }
        total
    }

    fn random_feasible(rng: &mut ChaCha8Rng, d: usize, n: usize) -> EmbeddingMatrix {
        let cols: Vec<DVector<f64>> = (0..n)
            .map(|_| {
                let v = DVector::from_fn(d, |_, _| rng.random::<f64>());
                project_feasible(&v, true).vector
            })
            .collect();
        EmbeddingMatrix::from_columns(&cols).unwrap()
    }

    #[test]
    fn identical_pair_has_zero_loss() {
        let u = DVector::from_vec(vec![0.6, 0.8]);
        let h = EmbeddingMatrix::from_columns(&[u.clone(), u]).unwrap();
        let y = LabelSet::new(vec![0, 0]).unwrap();
        let v = scl_full_loss(&h, &y, &LossConfig::with_tau(1.0)).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn orthogonal_frame_loss_matches_closed_form() {
        let y = LabelSet::new(vec![0, 0, 1, 1]).unwrap();
        let h = EmbeddingMatrix::collapsed(&make_of(2, 2).unwrap(), &y).unwrap();
        let cfg = LossConfig::with_tau(1.0);
        let expected = 4.0 * (1.0 + 2.0 * (-1f64).exp()).ln();
        assert_relative_eq!(
            scl_full_loss(&h, &y, &cfg).unwrap(),
            expected,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            full_lower_bound(y.counts(), &cfg).unwrap(),
            expected,
            max_relative = 1e-14
        );
        assert_relative_eq!(expected, 2.2057788557282043, max_relative = 1e-15);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_feasible(&mut rng, 4, 8);
        let y = LabelSet::new(vec![0, 1, 0, 1, 1, 0, 0, 1]).unwrap();
        let cfg = LossConfig::default();
        let fast = scl_full_loss(&h, &y, &cfg).unwrap();
        let slow = naive_loss(h.as_matrix(), y.labels(), 0.1);
        assert_relative_eq!(fast, slow, max_relative = 1e-12);
    }

    #[test]
    fn singleton_only_is_degenerate() {
        let h = EmbeddingMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let y = LabelSet::new(vec![0, 1]).unwrap();
        assert!(matches!(
            scl_full_loss(&h, &y, &LossConfig::default()),
            Err(Error::DegenerateLoss)
        ));
    }

    #[test]
    fn bound_examples() {
        let one = LossConfig::with_tau(1.0);
        let e = (-1f64).exp();
        assert_relative_eq!(full_lower_bound(&[8], &one).unwrap(), 8.0 * 7f64.ln());
        let v = full_lower_bound(&[20, 2, 2], &one).unwrap();
        let expected = 20.0 * (19.0 + 4.0 * e).ln() + 4.0 * (1.0 + 22.0 * e).ln();
        assert_relative_eq!(v, expected, max_relative = 1e-14);
        assert!((v - 69.213).abs() < 5e-3);
        assert!(full_lower_bound(&[], &one).is_err());
        // Singleton classes drop out.
        assert_relative_eq!(
            full_lower_bound(&[3, 1], &one).unwrap(),
            3.0 * (2.0 + e).ln(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn scaling_options() {
        let y = LabelSet::new(vec![0, 0, 1, 1]).unwrap();
        let h = EmbeddingMatrix::collapsed(&make_of(2, 3).unwrap(), &y).unwrap();
        let plain = LossConfig::with_tau(0.5);
        let scaled = LossConfig {
            base_tau: Some(DEFAULT_BASE_TAU),
            per_sample: true,
            ..plain
        };
        let a = scl_full_loss(&h, &y, &plain).unwrap();
        let b = scl_full_loss(&h, &y, &scaled).unwrap();
        assert_relative_eq!(b, a * (0.5 / 0.07) / 4.0, max_relative = 1e-14);
        let ba = full_lower_bound(y.counts(), &plain).unwrap();
        let bb = full_lower_bound(y.counts(), &scaled).unwrap();
        assert_relative_eq!(bb, ba * (0.5 / 0.07) / 4.0, max_relative = 1e-14);
        assert!(LossConfig::with_tau(0.0).validate().is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_feasible(&mut rng, 3, 6);
        let y = LabelSet::new(vec![0, 0, 1, 1, 2, 2]).unwrap();
        let cfg = LossConfig::default();
        let g = scl_full_gradient(&h, &y, &cfg).unwrap();
        let step = 1e-6;
        let mut fd = DMatrix::zeros(3, 6);
        for r in 0..3 {
            for c in 0..6 {
                let mut plus = h.as_matrix().clone();
                plus[(r, c)] += step;
                let mut minus = h.as_matrix().clone();
                minus[(r, c)] -= step;
                let lp = scl_full_loss(&EmbeddingMatrix::new(plus).unwrap(), &y, &cfg).unwrap();
                let lm = scl_full_loss(&EmbeddingMatrix::new(minus).unwrap(), &y, &cfg).unwrap();
                fd[(r, c)] = (lp - lm) / (2.0 * step);
            }
        }
        assert!((&g - &fd).norm() / g.norm() < 1e-5);
    }
}
