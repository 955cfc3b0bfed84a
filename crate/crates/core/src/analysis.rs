//! Executable counterparts of the structural results: the imbalanced UFM
//! counterexample to ETF optimality, the non-OF mini-batch optimizers that
//! exist when the batch graph conditions fail, and a pairwise checker for
//! the bound's equality conditions.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::batching::{build_graph, check_cor_conditions, BatchSet};
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{class_means, make_etf, EmbeddingMatrix, LabelSet};
use crate::loss::{batch_counts, batch_lower_bound, scl_batch_loss, scl_full_loss, LossConfig};
use crate::metrics::{beta_nc, delta_gm};

/// Loss of the ETF configuration versus the antipodal configuration on the
/// three-class STEP instance `[R·n_min, n_min, n_min]` at `τ = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleResult {
    pub n_min: usize,
    #[serde(rename = "R")]
    pub ratio: f64,
    pub loss_etf: f64,
    pub loss_tilde: f64,
    pub tilde_wins: bool,
}

fn check_counterexample_args(n_min: usize, ratio: f64) -> Result<usize> {
    if n_min < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_min must be >= 2, got {n_min}"
        )));
    }
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "R must be >= 1, got {ratio}"
        )));
    }
    let major = ratio * n_min as f64;
    if (major - major.round()).abs() > 1e-9 * major {
        return Err(Error::InvalidArgument(format!(
            "R * n_min = {major} is not an integer"
        )));
    }
    Ok(major.round() as usize)
}

/// Closed-form losses of both configurations.
pub fn counterexample_losses(n_min: usize, ratio: f64) -> Result<CounterexampleResult> {
    check_counterexample_args(n_min, ratio)?;
    let n = n_min as f64;
    let r = ratio;
    let e32 = (-1.5f64).exp();
    let e2 = (-2.0f64).exp();
    let loss_etf =
        n * (r * (r * n - 1.0 + 2.0 * n * e32).ln() + 2.0 * (n - 1.0 + n * (r + 1.0) * e32).ln());
    let loss_tilde =
        n * (r * (r * n - 1.0 + 2.0 * n * e2).ln() + 2.0 * (2.0 * n - 1.0 + r * n * e2).ln());
    Ok(CounterexampleResult {
        n_min,
        ratio,
        loss_etf,
        loss_tilde,
        tilde_wins: loss_tilde < loss_etf,
    })
}

pub fn counterexample_labels(n_min: usize, ratio: f64) -> Result<LabelSet> {
    let major = check_counterexample_args(n_min, ratio)?;
    LabelSet::from_counts(&[major, n_min, n_min])
}

/// `(H_ETF, H̃)`: every example on its class's unit ETF vertex, and the
/// majority class on `μ̃ = e_1` with both minorities on `-μ̃`. `H̃` is only
/// feasible for the sign-unconstrained model.
pub fn counterexample_embeddings(
    n_min: usize,
    ratio: f64,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let y = counterexample_labels(n_min, ratio)?;
    let h_etf = EmbeddingMatrix::collapsed(&make_etf(3, 3)?, &y)?;
    let mu = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    let cols: Vec<DVector<f64>> = y
        .labels()
        .iter()
        .map(|&c| if c == 0 { mu.clone() } else { -&mu })
        .collect();
    Ok((h_etf, EmbeddingMatrix::from_columns(&cols)?))
}

/// Largest relative discrepancy between the closed forms and a direct loss
/// evaluation on the explicit embeddings.
pub fn verify_counterexample_formulas(n_min: usize, ratio: f64) -> Result<f64> {
    let closed = counterexample_losses(n_min, ratio)?;
    let y = counterexample_labels(n_min, ratio)?;
    let (h_etf, h_tilde) = counterexample_embeddings(n_min, ratio)?;
    let cfg = LossConfig::with_tau(1.0);
    let direct_etf = scl_full_loss(&h_etf, &y, &cfg)?;
    let direct_tilde = scl_full_loss(&h_tilde, &y, &cfg)?;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    Ok(rel(direct_etf, closed.loss_etf).max(rel(direct_tilde, closed.loss_tilde)))
}

/// One row of the `(n_min, R)` sweep, with the formula cross-check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleRow {
    #[serde(flatten)]
    pub result: CounterexampleResult,
    pub discrepancy: f64,
}

/// Evaluates every `(n_min, R)` pair in the grid, row-major in `n_min`.
pub fn counterexample_grid(n_mins: &[usize], ratios: &[f64]) -> Result<Vec<CounterexampleRow>> {
    let pairs: Vec<(usize, f64)> = n_mins
        .iter()
        .flat_map(|&n| ratios.iter().map(move |&r| (n, r)))
        .collect();
    exec::map_slice(&pairs, |&(n, r)| {
        Ok(CounterexampleRow {
            result: counterexample_losses(n, r)?,
            discrepancy: verify_counterexample_formulas(n, r)?,
        })
    })
    .into_iter()
    .collect()
}

/// `n_min,R,loss_etf,loss_tilde,tilde_wins,discrepancy`.
pub fn write_counterexample_csv<W: Write>(rows: &[CounterexampleRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n_min",
        "R",
        "loss_etf",
        "loss_tilde",
        "tilde_wins",
        "discrepancy",
    ])?;
    for row in rows {
        let r = &row.result;
        w.write_record([
            r.n_min.to_string(),
            r.ratio.to_string(),
            format!("{:.16e}", r.loss_etf),
            format!("{:.16e}", r.loss_tilde),
            r.tilde_wins.to_string(),
            format!("{:.3e}", row.discrepancy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Which failed graph condition the construction exploits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "case")]
pub enum Construction {
    /// Class `class` has a disconnected subgraph; the members of
    /// `component` move to a fresh orthogonal direction.
    SplitClass { class: usize, component: Vec<usize> },
    /// Classes `first` and `second` are never co-batched and share one
    /// direction.
    MergeClasses { first: usize, second: usize },
}

/// A global optimizer of the mini-batch loss whose geometry is not an
/// orthogonal frame with collapse.
#[derive(Clone, Debug, PartialEq)]
pub struct NonOfOptimizer {
    pub embeddings: EmbeddingMatrix,
    pub construction: Construction,
    pub loss: f64,
    pub lower_bound: f64,
    pub delta_gm: f64,
    pub beta_nc: f64,
}

fn basis(d: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(d);
    v[i] = 1.0;
    v
}

/// Builds a certified non-OF optimizer when the batch set violates the
/// graph conditions. Prefers splitting a disconnected class (needs
/// `d >= k + 1`), otherwise merges two classes that never meet (needs
/// `d >= k - 1`).
pub fn build_non_of_optimizer(
    y: &LabelSet,
    batches: &BatchSet,
    d: usize,
) -> Result<NonOfOptimizer> {
    let g = build_graph(batches, y)?;
    let report = check_cor_conditions(&g, y);
    if report.satisfied {
        return Err(Error::ConditionsSatisfied);
    }
    let k = y.k();
    let split = report.disconnected_classes().first().copied();
    let construction = match (split, report.missing_cross_pairs.first()) {
        (Some(c), _) if d > k => {
            let comps = g.class_components(y, c);
            // Move every component except the one holding the class's
            // lowest index.
            let moved = comps[1..].concat();
            Construction::SplitClass {
                class: c,
                component: moved,
            }
        }
        (_, Some(&(c1, c2))) if d + 1 >= k => Construction::MergeClasses {
            first: c1,
            second: c2,
        },
        (Some(_), _) => {
            return Err(Error::InvalidArgument(format!(
                "splitting a class needs d >= k + 1 = {}, got d = {d}",
                k + 1
            )))
        }
        (None, _) => {
            return Err(Error::InvalidArgument(format!(
                "merging classes needs d >= k - 1 = {}, got d = {d}",
                k - 1
            )))
        }
    };

    let cols: Vec<DVector<f64>> = match &construction {
        Construction::SplitClass { component, .. } => (0..y.n())
            .map(|i| {
                if component.contains(&i) {
                    basis(d, k)
                } else {
                    basis(d, y.label(i))
                }
            })
            .collect(),
        Construction::MergeClasses { second, first } => {
            // Directions for every class but `second`, packed in order.
            let slot = |c: usize| if c > *second { c - 1 } else { c };
            (0..y.n())
                .map(|i| {
                    let c = y.label(i);
                    let c = if c == *second { *first } else { c };
                    basis(d, slot(c))
                })
                .collect()
        }
    };
    let h = EmbeddingMatrix::from_columns(&cols)?;
    let cfg = LossConfig::with_tau(1.0);
    let loss = scl_batch_loss(&h, y, batches, &cfg)?;
    let lower_bound = batch_lower_bound(batches, y, &cfg)?;
    let means = class_means(&h, y)?;
    Ok(NonOfOptimizer {
        delta_gm: delta_gm(&means)?,
        beta_nc: if k >= 2 {
            beta_nc(&h, y).unwrap_or(0.0)
        } else {
            0.0
        },
        embeddings: h,
        construction,
        loss,
        lower_bound,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairViolation {
    pub i: usize,
    pub j: usize,
    pub same_class: bool,
    /// Shortfall of `h_iᵀh_j` from its target for a same-class pair (1, or
    /// the largest similarity in a single-class batch), `|h_iᵀh_j|` otherwise.
    pub excess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualityCheck {
    pub holds: bool,
    pub violations: Vec<PairViolation>,
}

fn pairs(batch: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    batch
        .iter()
        .enumerate()
        .flat_map(move |(a, &u)| batch[a + 1..].iter().map(move |&v| (u.min(v), u.max(v))))
}

/// Scans every co-batched pair for the equality conditions of the
/// mini-batch bound: same-class pairs coincide, cross-class pairs are
/// orthogonal. A cross-class pair is exempt in a batch where neither class
/// has two members, since neither endpoint then carries a loss term there.
/// A batch holding a single class has no negatives, so its members need
/// only share one common pairwise similarity rather than coincide.
pub fn equality_conditions_hold(
    h: &EmbeddingMatrix,
    y: &LabelSet,
    batches: &BatchSet,
    tol: f64,
) -> Result<EqualityCheck> {
    if h.n() != y.n() {
        return Err(Error::DimensionMismatch {
            what: "labels vs embedding columns",
            expected: h.n(),
            found: y.n(),
        });
    }
    if batches.n() != y.n() {
        return Err(Error::DimensionMismatch {
            what: "batch universe vs labels",
            expected: y.n(),
            found: batches.n(),
        });
    }
    let gram: DMatrix<f64> = h.as_matrix().tr_mul(h.as_matrix());
    let mut worst: BTreeMap<(usize, usize), PairViolation> = BTreeMap::new();
    for batch in batches.batches() {
        let counts = batch_counts(batch, y);
        let pure = counts.iter().filter(|&&c| c > 0).count() == 1;
        let top = if pure {
            pairs(batch)
                .map(|(i, j)| gram[(i, j)])
                .fold(f64::NEG_INFINITY, f64::max)
        } else {
            1.0
        };
        for (i, j) in pairs(batch) {
            let same = y.label(i) == y.label(j);
            let excess = if same {
                top - gram[(i, j)]
            } else if counts[y.label(i)] >= 2 || counts[y.label(j)] >= 2 {
                gram[(i, j)].abs()
            } else {
                continue;
            };
            if excess > tol {
                let entry = worst.entry((i, j)).or_insert(PairViolation {
                    i,
                    j,
                    same_class: same,
                    excess,
                });
                entry.excess = entry.excess.max(excess);
            }
        }
    }
    let violations: Vec<PairViolation> = worst.into_values().collect();
    Ok(EqualityCheck {
        holds: violations.is_empty(),
        violations,
    })
}
