//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scl_geometry::analysis::{
    build_non_of_optimizer, counterexample_embeddings, counterexample_labels,
    counterexample_losses, equality_conditions_hold, Construction,
};
use scl_geometry::batching::{
    all_permutation_batches, batch_binding, build_graph, check_cor_conditions, make_partition,
    BatchSet, Binding, Scheme,
};
use scl_geometry::exec::map_coarse;
use scl_geometry::geometry::{class_means, make_of};
use scl_geometry::loss::{
    batch_lower_bound, full_lower_bound, scl_batch_loss, scl_full_loss, Objective,
};
use scl_geometry::metrics::{beta_nc, delta_etf, delta_gm, mean_pairwise_cosine};
use scl_geometry::solver::{solve, SolverConfig, Trajectory};
use scl_geometry::{EmbeddingMatrix, LabelSet, LossConfig};

use common::{fd_gradient, random_batches, random_feasible, random_labels, relative_error};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// `Σ_c n_c log(n_c − 1 + (n − n_c) e^{−1/τ})` over classes with two or
/// more members.
fn bound_oracle(counts: &[usize], tau: f64) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c >= 2)
        .map(|&c| c as f64 * ((c - 1) as f64 + (n - c) as f64 * (-1.0 / tau).exp()).ln())
        .sum()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn collapsed_of(y: &LabelSet, d: usize) -> EmbeddingMatrix {
    EmbeddingMatrix::collapsed(&make_of(y.k(), d).unwrap(), y).unwrap()
}

fn instances() -> Vec<(String, LabelSet)> {
    let mut out = Vec::new();
    for k in [3usize, 5, 10] {
        out.push((format!("balanced k={k}"), LabelSet::balanced(k, 4).unwrap()));
        out.push((
            format!("step R=10 k={k}"),
            LabelSet::step(k, 10.0, 2).unwrap(),
        ));
        out.push((
            format!("step R=100 k={k}"),
            LabelSet::step(k, 100.0, 2).unwrap(),
        ));
        out.push((
            format!("longtail R=10 k={k}"),
            LabelSet::long_tail(k, 10.0, 2).unwrap(),
        ));
    }
    out
}

/// Restarts with seeds `0..max` until one run reaches the bound.
fn first_converged(
    y: &LabelSet,
    d: usize,
    tau: f64,
    batches: Option<&BatchSet>,
    max: u64,
) -> (Option<Trajectory>, u64) {
    let loss = LossConfig::with_tau(tau);
    for seed in 0..max {
        let cfg = SolverConfig {
            seed,
            ..SolverConfig::default()
        };
        let run = solve(y, d, batches, &loss, &cfg).unwrap();
        if run.converged() {
            return (Some(run), seed + 1);
        }
    }
    (None, max)
}

fn bound_achievement() -> Outcome {
    let start = Instant::now();
    let cases = instances();
    let results = map_coarse(&cases, |(name, y)| {
        let d = y.k() + 2;
        let (run, tried) = first_converged(y, d, 0.1, None, 10);
        let Some(run) = run else {
            return Err(format!("{name}: no restart of {tried} converged"));
        };
        let h = &run.final_embeddings;
        let bound = bound_oracle(y.counts(), 0.1);
        let loss = scl_full_loss(h, y, &LossConfig::with_tau(0.1)).unwrap();
        let means = class_means(h, y).unwrap();
        let gap = (loss - bound) / bound.abs();
        let dgm = delta_gm(&means).unwrap();
        let beta = beta_nc(h, y).unwrap();
        let cos = mean_pairwise_cosine(&means).unwrap();
        let ok = gap < 1e-5 && dgm < 1e-3 && beta < 1e-6 && cos.abs() < 1e-3;
        let line = format!("{name} (n={}, {tried} starts): gap {gap:.1e} dgm {dgm:.1e} beta {beta:.1e} cos {cos:.1e}", y.n());
        if ok {
            Ok(line)
        } else {
            Err(line)
        }
    });
    let secs = start.elapsed().as_secs_f64();
    let failures: Vec<String> = results.iter().filter_map(|r| r.clone().err()).collect();
    let worst = results.iter().filter_map(|r| r.as_ref().ok()).count();
    ensure(
        failures.is_empty() && secs < 300.0,
        if failures.is_empty() {
            format!("{worst}/12 instances at the bound in {secs:.1}s")
        } else {
            failures.join("; ")
        },
    )
}

fn bound_validity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::INFINITY;
    let mut points = 0;
    for (_, y) in instances() {
        let d = y.k() + 2;
        let cfg = LossConfig::with_tau(0.1);
        let bound = bound_oracle(y.counts(), 0.1);
        let samples: Vec<EmbeddingMatrix> = (0..200)
            .map(|_| random_feasible(&mut rng, d, y.n(), true))
            .collect();
        let values = map_coarse(&samples, |h| scl_full_loss(h, &y, &cfg).unwrap());
        for v in values {
            worst = worst.min((v - bound) / bound.abs().max(1.0));
            points += 1;
        }
    }
    ensure(
        worst >= -1e-9,
        format!("{points} points, smallest relative slack {worst:.3e}"),
    )
}

fn equality_case(h: &EmbeddingMatrix, y: &LabelSet, b: &BatchSet) -> (bool, bool) {
    let cfg = LossConfig::with_tau(1.0);
    let loss = scl_batch_loss(h, y, b, &cfg).unwrap();
    let bound = batch_lower_bound(b, y, &cfg).unwrap();
    let at_bound = rel(loss, bound) <= 1e-9;
    let holds = equality_conditions_hold(h, y, b, 1e-5).unwrap().holds;
    (at_bound, holds)
}

fn equality_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = Vec::new();
    let mut at_bound_cases = 0;
    let mut record = |name: String, (a, b): (bool, bool)| {
        if a {
            at_bound_cases += 1;
        }
        if a != b {
            mismatches.push(format!("{name}: at_bound={a} conditions={b}"));
        }
    };
    for case in 0..100 {
        let k = rng.random_range(2..=3);
        let y = random_labels(&mut rng, k, 1, 10 / k);
        let n = y.n();
        let count = rng.random_range(1..=4);
        let b = random_batches(&mut rng, n, count, 2, n);
        let d = k + 1;
        let h = if case % 4 == 0 {
            collapsed_of(&y, d)
        } else {
            random_feasible(&mut rng, d, n, true)
        };
        record(format!("random #{case}"), equality_case(&h, &y, &b));
    }
    let y = LabelSet::new(vec![0, 0, 1, 1, 2, 2]).unwrap();
    let split = BatchSet::new(6, vec![vec![0, 2, 4, 5], vec![1, 3, 4, 5]]).unwrap();
    let merge = BatchSet::new(6, vec![vec![0, 1, 2, 3], vec![2, 3, 4, 5]]).unwrap();
    for (i, b) in [&split, &merge].into_iter().enumerate() {
        for d in 4..=6 {
            let opt = build_non_of_optimizer(&y, b, d).unwrap();
            record(
                format!("non-OF {i} d={d}"),
                equality_case(&opt.embeddings, &y, b),
            );
        }
    }
    for trial in 0..7 {
        let k = 2 + trial % 2;
        let y = random_labels(&mut rng, k, 2, 3);
        let n = y.n();
        let b = random_batches(&mut rng, n, 3, 3, n);
        let d = k + 1;
        let h = collapsed_of(&y, d);
        record(format!("OF #{trial}"), equality_case(&h, &y, &b));

        let mut cols: Vec<DVector<f64>> = (0..n).map(|i| h.column(i)).collect();
        let batch = &b.batches()[0];
        let u = batch[0];
        let v = batch.iter().copied().find(|&j| y.label(j) != y.label(u));
        let w = batch
            .iter()
            .copied()
            .skip(1)
            .find(|&j| y.label(j) == y.label(u));
        if trial % 2 == 0 {
            // Tilt `u` toward another class's direction.
            let Some(v) = v else { continue };
            cols[u] = (&cols[u] + 0.5 * &cols[v]).normalize();
        } else {
            // Rotate `u` toward the spare axis, away from its classmates.
            if w.is_none() {
                continue;
            }
            let mut spare: DVector<f64> = DVector::zeros(d);
            spare[d - 1] = 1.0;
            cols[u] = (&cols[u] + 0.3 * spare).normalize();
        }
        let hp = EmbeddingMatrix::from_columns(&cols).unwrap();
        record(format!("perturbed #{trial}"), equality_case(&hp, &y, &b));
    }
    ensure(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("all cases agree ({at_bound_cases} at the bound)")
        } else {
            mismatches.join("; ")
        },
    )
}

fn batch_uniqueness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sets = Vec::new();
    while sets.len() < 20 {
        let k = rng.random_range(2..=4);
        let y = random_labels(&mut rng, k, 2, 4);
        let seed = rng.random();
        let raw = make_partition(&y, rng.random_range(2..=4), Scheme::Fixed, 0, seed).unwrap();
        let b = if rng.random_bool(0.5) {
            batch_binding(&raw, &y, &Binding::Random { seed }).unwrap()
        } else {
            raw
        };
        if check_cor_conditions(&build_graph(&b, &y).unwrap(), &y).satisfied {
            sets.push((y, b));
        }
    }
    let runs = map_coarse(&sets, |(y, b)| {
        let loss = LossConfig::with_tau(0.1);
        (0..3)
            .map(|seed| {
                let cfg = SolverConfig {
                    seed,
                    ..SolverConfig::default()
                };
                let run = solve(y, y.k() + 2, Some(b), &loss, &cfg).unwrap();
                run.converged()
                    .then(|| delta_gm(&class_means(&run.final_embeddings, y).unwrap()).unwrap())
            })
            .collect::<Vec<_>>()
    });
    let dgms: Vec<f64> = runs.iter().flatten().flatten().copied().collect();
    let worst = dgms.iter().copied().fold(0.0, f64::max);
    let sets_with_run = runs
        .iter()
        .filter(|r| r.iter().any(Option::is_some))
        .count();

    let y = LabelSet::new(vec![0, 0, 1, 1, 2, 2]).unwrap();
    let split = BatchSet::new(6, vec![vec![0, 2, 4, 5], vec![1, 3, 4, 5]]).unwrap();
    let merge = BatchSet::new(6, vec![vec![0, 1, 2, 3], vec![2, 3, 4, 5]]).unwrap();
    let a = build_non_of_optimizer(&y, &split, 4).unwrap();
    let m = build_non_of_optimizer(&y, &merge, 3).unwrap();
    let mut cases_ok = true;
    let mut notes = Vec::new();
    for (opt, b, want_split) in [(&a, &split, true), (&m, &merge, false)] {
        let cfg = LossConfig::with_tau(1.0);
        let loss = scl_batch_loss(&opt.embeddings, &y, b, &cfg).unwrap();
        let bound = batch_lower_bound(b, &y, &cfg).unwrap();
        let means = class_means(&opt.embeddings, &y).unwrap();
        let dgm = delta_gm(&means).unwrap();
        let beta = beta_nc(&opt.embeddings, &y).unwrap_or(0.0);
        let kind_ok = matches!(opt.construction, Construction::SplitClass { .. }) == want_split;
        let ok = kind_ok && rel(loss, bound) <= 1e-9 && (dgm > 0.1 || beta > 0.1);
        cases_ok &= ok;
        notes.push(format!(
            "{} gap {:.1e} dgm {dgm:.3} beta {beta:.3}",
            if want_split { "split" } else { "merge" },
            rel(loss, bound)
        ));
    }
    ensure(
        worst < 1e-3 && sets_with_run == 20 && cases_ok,
        format!(
            "{} converged runs on {sets_with_run}/20 sets, worst dgm {worst:.1e}; {}",
            dgms.len(),
            notes.join("; ")
        ),
    )
}

fn binding_guarantee() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut raw_fail = 0;
    let mut bound_pass = 0;
    for _ in 0..100 {
        let k = rng.random_range(3..=6);
        let y = random_labels(&mut rng, k, 2, 6);
        let seed: u64 = rng.random();
        let raw = make_partition(&y, rng.random_range(2..=3), Scheme::Fixed, 0, seed).unwrap();
        if !check_cor_conditions(&build_graph(&raw, &y).unwrap(), &y).satisfied {
            raw_fail += 1;
        }
        let bound = batch_binding(&raw, &y, &Binding::Random { seed }).unwrap();
        if check_cor_conditions(&build_graph(&bound, &y).unwrap(), &y).satisfied {
            bound_pass += 1;
        }
    }
    ensure(
        raw_fail >= 30 && bound_pass == 100,
        format!("raw partitions fail {raw_fail}/100, bound partitions pass {bound_pass}/100"),
    )
}

fn counterexample() -> Outcome {
    let e32 = (-1.5f64).exp();
    let e2 = (-2.0f64).exp();
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    let ratios: Vec<f64> = std::iter::once(1.0)
        .chain((1..=10).map(|r| 10.0 * r as f64))
        .collect();
    for n_min in 2..=10usize {
        for &r in &ratios {
            let res = counterexample_losses(n_min, r).unwrap();
            let n = n_min as f64;
            let etf = n
                * (r * (r * n - 1.0 + 2.0 * n * e32).ln()
                    + 2.0 * (n - 1.0 + n * (r + 1.0) * e32).ln());
            let tilde = n
                * (r * (r * n - 1.0 + 2.0 * n * e2).ln() + 2.0 * (2.0 * n - 1.0 + r * n * e2).ln());
            let (h_etf, h_tilde) = counterexample_embeddings(n_min, r).unwrap();
            let y = counterexample_labels(n_min, r).unwrap();
            let cfg = LossConfig::with_tau(1.0);
            let direct_etf = scl_full_loss(&h_etf, &y, &cfg).unwrap();
            let direct_tilde = scl_full_loss(&h_tilde, &y, &cfg).unwrap();
            for (a, b) in [
                (direct_etf, etf),
                (direct_tilde, tilde),
                (res.loss_etf, etf),
                (res.loss_tilde, tilde),
            ] {
                worst = worst.max((a - b).abs() / b.abs());
            }
            let want = r >= 10.0;
            if res.tilde_wins != want || (direct_tilde < direct_etf) != want {
                bad.push(format!("n_min={n_min} R={r}"));
            }
        }
    }
    ensure(
        bad.is_empty() && worst < 1e-9,
        format!(
            "{} grid points, wrong winner at [{}], closed-form discrepancy {worst:.1e}",
            9 * ratios.len(),
            bad.join(", ")
        ),
    )
}

fn of_to_etf() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 2..=16 {
        for d in [k, k + 3] {
            worst = worst.max(delta_etf(&make_of(k, d).unwrap()).unwrap());
        }
    }
    ensure(
        worst < 1e-12,
        format!("max delta_etf {worst:.1e} over k 2..=16"),
    )
}

fn shuffling_completeness() -> Outcome {
    let mut incomplete = Vec::new();
    let mut pairs = 0;
    for n in 2..=6 {
        for b in 2..=n {
            let g = all_permutation_batches(n, b).unwrap();
            pairs += 1;
            if g.edge_count() != n * (n - 1) / 2 {
                incomplete.push(format!("({n},{b})"));
            }
        }
    }
    ensure(
        incomplete.is_empty(),
        format!(
            "{pairs} (n, b) pairs, incomplete: [{}]",
            incomplete.join(", ")
        ),
    )
}

fn gradient_check() -> Outcome {
    let mut worst_full: f64 = 0.0;
    let mut worst_batch: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let k = rng.random_range(2..=3);
        let y = random_labels(&mut rng, k, 1, 4);
        let n = y.n();
        let d = rng.random_range(2..=5);
        let cfg = LossConfig {
            tau: *[0.1, 0.5, 1.0].choose(&mut rng).unwrap(),
            base_tau: rng.random_bool(0.5).then_some(0.07),
            per_sample: rng.random_bool(0.5),
        };
        let nonneg = rng.random_bool(0.5);
        let h = random_feasible(&mut rng, d, n, nonneg);
        let batches = random_batches(&mut rng, n, 3, 2, n);

        let full = Objective::full(&y, cfg);
        if full.validate(&h).is_ok() {
            let g = full.gradient(&h).unwrap();
            let fd = fd_gradient(|x| full.value(x).unwrap(), &h, 1e-6);
            worst_full = worst_full.max(relative_error(&g, &fd));
        }
        let batched = Objective::batched(&y, &batches, cfg);
        let g = batched.gradient(&h).unwrap();
        if g.norm() > 0.0 {
            let fd = fd_gradient(|x| batched.value(x).unwrap(), &h, 1e-6);
            worst_batch = worst_batch.max(relative_error(&g, &fd));
        }
    }
    ensure(
        worst_full < 1e-5 && worst_batch < 1e-5,
        format!("worst relative error full {worst_full:.1e}, batch {worst_batch:.1e}"),
    )
}

fn temperature_invariance() -> Outcome {
    let y = LabelSet::from_counts(&[15, 10, 5]).unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for tau in [0.1, 1.0] {
        let (run, tried) = first_converged(&y, 5, tau, None, 10);
        match run {
            Some(run) => {
                let dgm = delta_gm(&class_means(&run.final_embeddings, &y).unwrap()).unwrap();
                ok &= dgm < 1e-3;
                notes.push(format!("tau={tau}: dgm {dgm:.1e} ({tried} starts)"));
            }
            None => {
                ok = false;
                notes.push(format!("tau={tau}: no converged start"));
            }
        }
    }
    let h = collapsed_of(&y, 5);
    let mut worst: f64 = 0.0;
    for tau in [0.07, 0.1, 1.0, 10.0] {
        let cfg = LossConfig::with_tau(tau);
        let loss = scl_full_loss(&h, &y, &cfg).unwrap();
        let bound = full_lower_bound(y.counts(), &cfg).unwrap();
        worst = worst
            .max(rel(loss, bound))
            .max(rel(bound, bound_oracle(y.counts(), tau)));
    }
    ok &= worst < 1e-10;
    notes.push(format!("bound vs OF loss {worst:.1e}"));
    ensure(ok, notes.join("; "))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("bound achievement", bound_achievement),
        ("lower-bound validity", bound_validity),
        ("equality conditions", equality_oracle),
        ("mini-batch uniqueness", batch_uniqueness),
        ("batch binding", binding_guarantee),
        ("counterexample", counterexample),
        ("OF to ETF", of_to_etf),
        ("shuffling completeness", shuffling_completeness),
        ("gradient check", gradient_check),
        ("temperature invariance", temperature_invariance),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} {:>2} {name:<24} [{:.1}s] {detail}",
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
