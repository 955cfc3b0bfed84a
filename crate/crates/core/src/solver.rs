//! Projected gradient descent over the unit sphere (UFM) or the unit sphere
//! intersected with the non-negative orthant (UFM+), with Armijo
//! backtracking and trajectory logging.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batching::BatchSet;
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{class_means, EmbeddingMatrix, LabelSet, FEASIBILITY_TOL};
use crate::loss::{LossConfig, Objective};
use crate::metrics::{beta_nc, delta_gm, mean_pairwise_cosine, GeometryReport};

/// Largest trial step as a multiple of the initial one.
pub const STEP_GROWTH_CAP: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Entries uniform on `[0, 1)`, then projected.
    RandomNonneg,
    /// Standard normal entries, then normalized.
    RandomSphere,
    /// Caller supplies the starting point through [`solve_from`].
    Provided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Optimize over UFM+ (`H >= 0`) rather than UFM.
    pub nonneg: bool,
    /// Initial trial step; `None` means `0.5 · τ`.
    pub step_size: Option<f64>,
    /// Step multiplier applied after a plateau.
    pub decay: f64,
    pub max_iters: usize,
    /// An iteration counts toward a plateau when it improves the loss by
    /// less than `rel_tol · |loss|`.
    pub rel_tol: f64,
    /// Relative gap `(loss - bound) / max(1, |bound|)` at which a UFM+ run
    /// stops as converged to the bound.
    pub bound_tol: f64,
    pub plateau_window: usize,
    /// Plateaus tolerated before the run is declared stationary.
    pub max_decays: usize,
    pub max_halvings: usize,
    /// Trajectory metrics are recorded every this many iterations.
    pub metrics_every: usize,
    pub seed: u64,
    pub init: Init,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            nonneg: true,
            step_size: None,
            decay: 0.5,
            max_iters: 50_000,
            rel_tol: 1e-12,
            bound_tol: 1e-11,
            plateau_window: 200,
            max_decays: 20,
            max_halvings: 30,
            metrics_every: 50,
            seed: 0,
            init: Init::RandomNonneg,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "step_size must be > 0, got {s}"
                )));
            }
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay must be in (0, 1], got {}",
                self.decay
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "max_iters must be at least 1".into(),
            ));
        }
        if self.metrics_every == 0 || self.plateau_window == 0 {
            return Err(Error::InvalidArgument(
                "metrics_every and plateau_window must be positive".into(),
            ));
        }
        Ok(())
    }

    fn initial_step(&self, loss: &LossConfig) -> f64 {
        self.step_size.unwrap_or(0.5 * loss.tau)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum Termination {
    /// UFM+ run reached the analytic lower bound within `bound_tol`.
    ConvergedToBound,
    /// Repeated plateaus exhausted the step decays, or the iterate became a
    /// fixed point of the projected step.
    Stationary,
    /// Backtracking could not find a non-increasing step.
    Stalled,
    MaxIters,
    /// The loss or gradient became non-finite.
    NumericalFailure {
        iter: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iter: usize,
    pub loss: f64,
    pub gap: f64,
    pub delta_gm: f64,
    pub beta_nc: f64,
    pub mean_cos: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub final_embeddings: EmbeddingMatrix,
    pub termination: Termination,
    pub iterations: usize,
    pub final_loss: f64,
    pub lower_bound: f64,
    pub seed: u64,
    /// Columns that hit the degenerate projection fallback, summed over
    /// all accepted steps.
    pub projection_fallbacks: usize,
    pub warnings: Vec<String>,
}

/// Serializable end-of-run digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub termination: Termination,
    pub iterations: usize,
    pub seed: u64,
    pub loss: f64,
    pub lower_bound: f64,
    pub gap: f64,
    pub relative_gap: f64,
    pub achieved: bool,
    pub geometry: GeometryReport,
    pub warnings: Vec<String>,
}

impl Trajectory {
    pub fn gap(&self) -> f64 {
        self.final_loss - self.lower_bound
    }

    /// `gap / max(1, |bound|)`.
    pub fn relative_gap(&self) -> f64 {
        self.gap() / self.lower_bound.abs().max(1.0)
    }

    pub fn converged(&self) -> bool {
        self.termination == Termination::ConvergedToBound
    }

    /// Fails with [`Error::NonFinite`] when the run aborted numerically.
    pub fn check(&self) -> Result<()> {
        match self.termination {
            Termination::NumericalFailure { iter } => Err(Error::NonFinite {
                what: "loss or gradient",
                iter,
            }),
            _ => Ok(()),
        }
    }

    pub fn summary(&self, y: &LabelSet) -> Result<RunSummary> {
        Ok(RunSummary {
            termination: self.termination,
            iterations: self.iterations,
            seed: self.seed,
            loss: self.final_loss,
            lower_bound: self.lower_bound,
            gap: self.gap(),
            relative_gap: self.relative_gap(),
            achieved: self.converged(),
            geometry: GeometryReport::compute(&self.final_embeddings, y)?,
            warnings: self.warnings.clone(),
        })
    }

    /// `iter,loss,gap,delta_gm,beta_nc,mean_cos`, one row per record.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "loss", "gap", "delta_gm", "beta_nc", "mean_cos"])?;
        for r in &self.records {
            w.write_record([
                r.iter.to_string(),
                format!("{:.16e}", r.loss),
                format!("{:.16e}", r.gap),
                format!("{:.16e}", r.delta_gm),
                format!("{:.16e}", r.beta_nc),
                format!("{:.16e}", r.mean_cos),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Random starting point for `cfg.init` (ignored for [`Init::Provided`],
/// which is an error here).
pub fn initial_embeddings(d: usize, n: usize, cfg: &SolverConfig) -> Result<EmbeddingMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw = match cfg.init {
        Init::RandomNonneg => DMatrix::from_fn(d, n, |_, _| rng.random::<f64>()),
        Init::RandomSphere => DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal)),
        Init::Provided => {
            return Err(Error::InvalidArgument(
                "init = provided requires an explicit starting matrix".into(),
            ))
        }
    };
    let nonneg = cfg.nonneg || cfg.init == Init::RandomNonneg;
    Ok(EmbeddingMatrix::new(raw)?.project(nonneg).0)
}

/// Runs projected gradient descent from a seeded random start.
pub fn solve(
    y: &LabelSet,
    d: usize,
    batches: Option<&BatchSet>,
    loss: &LossConfig,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if d == 0 {
        return Err(Error::InvalidArgument("d must be positive".into()));
    }
    let h0 = initial_embeddings(d, y.n(), cfg)?;
    solve_from(y, batches, loss, cfg, h0)
}

/// Runs projected gradient descent from `h0`, which must be feasible.
pub fn solve_from(
    y: &LabelSet,
    batches: Option<&BatchSet>,
    loss: &LossConfig,
    cfg: &SolverConfig,
    h0: EmbeddingMatrix,
) -> Result<Trajectory> {
    cfg.validate()?;
    h0.check_feasible(cfg.nonneg, FEASIBILITY_TOL)?;
    let objective = Objective {
        labels: y,
        batches,
        cfg: *loss,
    };
    objective.validate(&h0)?;
    let mut warnings = Vec::new();
    if h0.d() < y.k() {
        warnings.push(format!(
            "d = {} is smaller than k = {}; an orthogonal frame does not fit",
            h0.d(),
            y.k()
        ));
    }
    let bound = objective.lower_bound()?;
    // Re-project so that every iterate, including the first, is exactly on
    // the feasible set.
    let (mut h, _) = h0.project(cfg.nonneg);
    let bound_scale = bound.abs().max(1.0);

    let mut records = Vec::new();
    let record = |iter: usize, f: f64, h: &EmbeddingMatrix| {
        let means = class_means(h, y).ok();
        TrajectoryRecord {
            iter,
            loss: f,
            gap: f - bound,
            delta_gm: means
                .as_ref()
                .and_then(|m| delta_gm(m).ok())
                .unwrap_or(f64::NAN),
            beta_nc: beta_nc(h, y).unwrap_or(f64::NAN),
            mean_cos: means
                .as_ref()
                .and_then(|m| mean_pairwise_cosine(m).ok())
                .unwrap_or(f64::NAN),
        }
    };

    let (mut f, mut g) = objective.value_and_gradient(&h)?;
    let mut termination = Termination::MaxIters;
    let mut iter = 0;
    let mut fallbacks = 0;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        termination = Termination::NumericalFailure { iter: 0 };
    }
    records.push(record(0, f, &h));

    // The trial step doubles after every first-try acceptance, up to
    // `max_step`; plateaus shrink the cap.
    let initial_step = cfg.initial_step(loss);
    let mut max_step = initial_step * STEP_GROWTH_CAP;
    let mut step = initial_step;
    let mut plateau = 0usize;
    let mut decays = 0usize;

    if termination == Termination::MaxIters {
        loop {
            if cfg.nonneg && f - bound <= cfg.bound_tol * bound_scale {
                termination = Termination::ConvergedToBound;
                break;
            }
            if iter >= cfg.max_iters {
                termination = Termination::MaxIters;
                break;
            }
            iter += 1;

            let mut accepted = None;
            let mut t = step;
            for halving in 0..=cfg.max_halvings {
                let (cand, fb) = EmbeddingMatrix::new(h.as_matrix() - &g * t)
                    .map(|m| m.project(cfg.nonneg))
                    .unwrap_or_else(|_| (h.clone(), 0));
                let diff = cand.as_matrix() - h.as_matrix();
                let fc = objective.value(&cand)?;
                let model = f + g.dot(&diff) + diff.norm_squared() / (2.0 * t);
                if fc.is_finite() && fc <= model && fc <= f {
                    accepted = Some((cand, fc, diff.norm(), halving, fb));
                    break;
                }
                t *= 0.5;
            }
            let Some((cand, fc, moved, halvings, fb)) = accepted else {
                termination = Termination::Stalled;
                break;
            };
            fallbacks += fb;
            step = if halvings == 0 {
                (t * 2.0).min(max_step)
            } else {
                t
            };

            let improvement = f - fc;
            h = cand;
            let (nf, ng) = objective.value_and_gradient(&h)?;
            f = nf;
            g = ng;
            if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
                termination = Termination::NumericalFailure { iter };
                break;
            }
            if iter % cfg.metrics_every == 0 {
                records.push(record(iter, f, &h));
            }
            if moved == 0.0 {
                termination = Termination::Stationary;
                break;
            }
            if improvement < cfg.rel_tol * f.abs() {
                plateau += 1;
                if plateau >= cfg.plateau_window {
                    plateau = 0;
                    decays += 1;
                    if decays > cfg.max_decays {
                        termination = Termination::Stationary;
                        break;
                    }
                    max_step *= cfg.decay;
                    step = step.min(max_step);
                }
            } else {
                plateau = 0;
            }
        }
    }
    if records.last().map(|r| r.iter) != Some(iter) {
        records.push(record(iter, f, &h));
    }
    Ok(Trajectory {
        records,
        final_embeddings: h,
        termination,
        iterations: iter,
        final_loss: f,
        lower_bound: bound,
        seed: cfg.seed,
        projection_fallbacks: fallbacks,
        warnings,
    })
}

/// Independent runs with seeds `cfg.seed, cfg.seed + 1, ...`; start 0 is
/// identical to [`solve`].
pub fn multi_start(
    y: &LabelSet,
    d: usize,
    batches: Option<&BatchSet>,
    loss: &LossConfig,
    cfg: &SolverConfig,
    n_starts: usize,
) -> Result<Vec<Trajectory>> {
    if n_starts == 0 {
        return Err(Error::InvalidArgument("n_starts must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n_starts as u64)
        .map(|s| cfg.seed.wrapping_add(s))
        .collect();
    exec::map_coarse(&seeds, |&seed| {
        let run_cfg = SolverConfig {
            seed,
            ..cfg.clone()
        };
        solve(y, d, batches, loss, &run_cfg)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiStartSummary {
    pub best_index: usize,
    pub best_relative_gap: f64,
    pub worst_relative_gap: f64,
    pub converged: usize,
    pub starts: usize,
}

pub fn summarize_starts(runs: &[Trajectory]) -> Option<MultiStartSummary> {
    let (best_index, best) = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.relative_gap().total_cmp(&b.1.relative_gap()))?;
    let worst = runs
        .iter()
        .map(Trajectory::relative_gap)
        .fold(f64::NEG_INFINITY, f64::max);
    Some(MultiStartSummary {
        best_index,
        best_relative_gap: best.relative_gap(),
        worst_relative_gap: worst,
        converged: runs.iter().filter(|r| r.converged()).count(),
        starts: runs.len(),
    })
}

/// Norm of the part of the Euclidean gradient that first-order optimality
/// forbids: the tangential component per column, with coordinates sitting
/// on the orthant boundary only counted when descent would leave it
/// inward.
pub fn first_order_residual(h: &EmbeddingMatrix, grad: &DMatrix<f64>, nonneg: bool) -> f64 {
    let mut total = 0.0;
    for (col, g) in h.as_matrix().column_iter().zip(grad.column_iter()) {
        let radial = col.dot(&g);
        for (&hv, &gv) in col.iter().zip(g.iter()) {
            let t = gv - radial * hv;
            let t = if nonneg && hv <= 1e-12 { t.min(0.0) } else { t };
            total += t * t;
        }
    }
    total.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_of;
    use crate::loss::scl_full_gradient;

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            decay: 0.0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            step_size: Some(-1.0),
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn random_inits_are_feasible() {
        for init in [Init::RandomNonneg, Init::RandomSphere] {
            for nonneg in [true, false] {
                let cfg = SolverConfig {
                    init,
                    nonneg,
                    ..SolverConfig::default()
                };
                let h = initial_embeddings(4, 7, &cfg).unwrap();
                assert!(h.is_feasible(nonneg, 1e-12));
            }
        }
        let cfg = SolverConfig {
            init: Init::Provided,
            ..SolverConfig::default()
        };
        assert!(initial_embeddings(2, 2, &cfg).is_err());
    }

    #[test]
    fn infeasible_start_rejected() {
        let y = LabelSet::new(vec![0, 0, 1, 1]).unwrap();
        let h = EmbeddingMatrix::new(DMatrix::from_element(2, 4, 0.5)).unwrap();
        let r = solve_from(
            &y,
            None,
            &LossConfig::default(),
            &SolverConfig::default(),
            h,
        );
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn starting_at_the_optimum_stops_immediately() {
        let y = LabelSet::from_counts(&[3, 2, 2]).unwrap();
        let h = EmbeddingMatrix::collapsed(&make_of(3, 4).unwrap(), &y).unwrap();
        let t = solve_from(
            &y,
            None,
            &LossConfig::default(),
            &SolverConfig::default(),
            h.clone(),
        )
        .unwrap();
        assert_eq!(t.termination, Termination::ConvergedToBound);
        assert_eq!(t.iterations, 0);
        assert_eq!(t.final_embeddings, h);
    }

    #[test]
    fn residual_vanishes_at_orthogonal_frame() {
        let y = LabelSet::from_counts(&[4, 2, 3]).unwrap();
        let h = EmbeddingMatrix::collapsed(&make_of(3, 5).unwrap(), &y).unwrap();
        let g = scl_full_gradient(&h, &y, &LossConfig::default()).unwrap();
        assert!(first_order_residual(&h, &g, true) < 1e-6);
        // Without the orthant the frame is not stationary.
        assert!(first_order_residual(&h, &g, false) > 1e-3);
    }

    #[test]
    fn small_run_descends_monotonically() {
        let y = LabelSet::from_counts(&[3, 3]).unwrap();
        let cfg = SolverConfig {
            metrics_every: 1,
            max_iters: 300,
            ..SolverConfig::default()
        };
        let t = solve(&y, 3, None, &LossConfig::default(), &cfg).unwrap();
        for w in t.records.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-12);
        }
        assert!(t.final_embeddings.is_feasible(true, 1e-10));
    }

    #[test]
    fn trajectory_csv_header() {
        let y = LabelSet::from_counts(&[2, 2]).unwrap();
        let cfg = SolverConfig {
            max_iters: 5,
            ..SolverConfig::default()
        };
        let t = solve(&y, 2, None, &LossConfig::default(), &cfg).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,loss,gap,delta_gm,beta_nc,mean_cos\n"));
    }
}
