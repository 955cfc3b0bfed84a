mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use scl_geometry::analysis::{counterexample_grid, write_counterexample_csv};
use scl_geometry::batching::{
    batch_binding, build_graph, check_cor_conditions, make_partition, BatchSet, Binding, Scheme,
};
use scl_geometry::geometry::{make_of, read_embeddings};
use scl_geometry::loss::{scl_full_loss, zeroed_classes, Objective};
use scl_geometry::metrics::{heatmap_payload, write_heatmap_csv, GeometryReport};
use scl_geometry::solver::{
    multi_start, summarize_starts, MultiStartSummary, RunSummary, Trajectory,
};
use scl_geometry::{EmbeddingMatrix, LabelSet, LossConfig, LossReport};

use config::{generate, Dist, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "sclgeo",
    version,
    about = "Supervised contrastive loss geometry lab"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lower bound for per-class counts, next to the loss of an exact
    /// orthogonal frame.
    Bound {
        /// Comma-separated class counts, e.g. 20,2,2.
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long)]
        base_tau: Option<f64>,
        #[arg(long)]
        per_sample: bool,
    },
    /// Run the solver described by a JSON experiment config.
    Optimize {
        config: PathBuf,
        /// Overrides solver.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides outputs.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report whether a batch set meets the graph conditions. Exits 1 when
    /// it does not.
    CheckBatches {
        #[arg(long)]
        batches: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Append one binding example per class to every batch. Without a seed
    /// the lowest index of each class is used.
    Bind {
        #[arg(long)]
        batches: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded partition of a label set into consecutive batches.
    Partition {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        batch_size: usize,
        #[arg(long, value_enum, default_value = "fixed")]
        scheme: SchemeArg,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ETF versus antipodal losses over an (n_min, R) grid, as CSV.
    Counterexample {
        /// Comma-separated minority sizes.
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8,9,10")]
        nmin: Vec<usize>,
        #[arg(long, default_value_t = 10.0)]
        rmin: f64,
        #[arg(long, default_value_t = 100.0)]
        rmax: f64,
        #[arg(long, default_value_t = 10.0)]
        step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Geometry report for an embedding CSV and a label CSV.
    Metrics {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Also write the max-normalized class-mean Gram as CSV.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Generate an imbalanced label set as a single CSV row. STEP gives the
    /// first ceil(k/2) classes ratio * n_min examples and the rest n_min;
    /// longtail gives class c round(n_max * ratio^(-c/(k-1))).
    GenLabels {
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum)]
        dist: Dist,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        n_min: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default experiment config.
    PrintDefaultConfig,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SchemeArg {
    Fixed,
    Reshuffle,
}

enum Failure {
    Input(anyhow::Error),
    Numerical(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Input(e)
    }
}

impl From<scl_geometry::Error> for Failure {
    fn from(e: scl_geometry::Error) -> Self {
        Self::Input(e.into())
    }
}

/// Writes through a sibling temp file and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path
        .file_name()
        .ok_or_else(|| anyhow!("{} is not a file path", path.display()))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => Ok(io::stdout().write_all(bytes)?),
    }
}

fn json_line<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn read_labels(path: &Path) -> Result<LabelSet> {
    LabelSet::read_csv(path).with_context(|| format!("reading labels from {}", path.display()))
}

fn read_batches(path: &Path) -> Result<BatchSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    BatchSet::from_json(&text).with_context(|| format!("parsing batches in {}", path.display()))
}

fn cmd_bound(counts: &[usize], cfg: LossConfig) -> Result<()> {
    let y = LabelSet::from_counts(counts)?;
    let h = EmbeddingMatrix::collapsed(&make_of(y.k(), y.k())?, &y)?;
    let objective = Objective::full(&y, cfg);
    let bound = objective.lower_bound()?;
    let value = if zeroed_classes(counts).len() == counts.len() {
        bound
    } else {
        scl_full_loss(&h, &y, &cfg)?
    };
    emit(
        None,
        &json_line(&LossReport::new(value, bound, &cfg, 1e-10))?,
    )
}

#[derive(Serialize)]
struct OptimizeSummary {
    #[serde(flatten)]
    run: RunSummary,
    n: usize,
    k: usize,
    d: usize,
    projection_fallbacks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    starts: Option<MultiStartSummary>,
}

fn cmd_optimize(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.solver.seed = s;
    }
    if let Some(dir) = out {
        cfg.outputs.dir = dir;
    }
    let y = cfg.labels.build()?;
    let batches = cfg.batching.as_ref().map(|b| b.build(&y)).transpose()?;
    if cfg.d < y.k() {
        eprintln!(
            "warning: d = {} is below the number of classes k = {}; the orthogonal-frame optimum is unreachable",
            cfg.d,
            y.k()
        );
    }
    let runs = multi_start(
        &y,
        cfg.d,
        batches.as_ref(),
        &cfg.loss,
        &cfg.solver,
        cfg.starts,
    )?;
    let starts = summarize_starts(&runs).filter(|_| runs.len() > 1);
    let best: &Trajectory = match starts {
        Some(s) => &runs[s.best_index],
        None => &runs[0],
    };

    let mut trajectory = Vec::new();
    best.write_csv(&mut trajectory)?;
    let dir = &cfg.outputs.dir;
    write_atomic(&dir.join(&cfg.outputs.trajectory), &trajectory)?;
    write_atomic(
        &dir.join(&cfg.outputs.embeddings),
        best.final_embeddings.to_csv_string().as_bytes(),
    )?;
    let summary = OptimizeSummary {
        run: best.summary(&y)?,
        n: y.n(),
        k: y.k(),
        d: cfg.d,
        projection_fallbacks: best.projection_fallbacks,
        starts,
    };
    write_atomic(&dir.join(&cfg.outputs.summary), &json_line(&summary)?)?;
    best.check().map_err(|e| Failure::Numerical(e.into()))?;
    Ok(())
}

fn cmd_check_batches(batches: &Path, labels: &Path) -> Result<bool> {
    let y = read_labels(labels)?;
    let b = read_batches(batches)?;
    let report = check_cor_conditions(&build_graph(&b, &y)?, &y);
    emit(None, &json_line(&report)?)?;
    Ok(report.satisfied)
}

fn ratio_grid(rmin: f64, rmax: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && rmin <= rmax) {
        return Err(anyhow!("need step > 0 and rmin <= rmax"));
    }
    let count = ((rmax - rmin) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|i| rmin + step * i as f64).collect())
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Bound {
            counts,
            tau,
            base_tau,
            per_sample,
        } => {
            let cfg = LossConfig {
                tau,
                base_tau,
                per_sample,
            };
            cfg.validate()?;
            cmd_bound(&counts, cfg)?;
        }
        Command::Optimize { config, seed, out } => cmd_optimize(&config, seed, out)?,
        Command::CheckBatches { batches, labels } => {
            if !cmd_check_batches(&batches, &labels)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Bind {
            batches,
            labels,
            seed,
            out,
        } => {
            let y = read_labels(&labels)?;
            let b = read_batches(&batches)?;
            let binding = seed.map_or(Binding::LowestIndex, |seed| Binding::Random { seed });
            let bound = batch_binding(&b, &y, &binding)?;
            emit(out.as_deref(), format!("{}\n", bound.to_json()?).as_bytes())?;
        }
        Command::Partition {
            labels,
            batch_size,
            scheme,
            epoch,
            seed,
            out,
        } => {
            let y = read_labels(&labels)?;
            let scheme = match scheme {
                SchemeArg::Fixed => Scheme::Fixed,
                SchemeArg::Reshuffle => Scheme::Reshuffle,
            };
            let b = make_partition(&y, batch_size, scheme, epoch, seed)?;
            emit(out.as_deref(), format!("{}\n", b.to_json()?).as_bytes())?;
        }
        Command::Counterexample {
            nmin,
            rmin,
            rmax,
            step,
            out,
        } => {
            let rows = counterexample_grid(&nmin, &ratio_grid(rmin, rmax, step)?)?;
            let mut buf = Vec::new();
            write_counterexample_csv(&rows, &mut buf)?;
            emit(out.as_deref(), &buf)?;
        }
        Command::Metrics {
            embeddings,
            labels,
            heatmap,
        } => {
            let h = read_embeddings(&embeddings)
                .with_context(|| format!("reading embeddings from {}", embeddings.display()))?;
            let y = read_labels(&labels)?;
            let report = GeometryReport::compute(&h, &y)?;
            if let Some(path) = heatmap {
                let means = scl_geometry::geometry::class_means(&h, &y)?;
                let mut buf = Vec::new();
                write_heatmap_csv(&heatmap_payload(&means.gram())?, &mut buf)?;
                write_atomic(&path, &buf)?;
            }
            emit(None, &json_line(&report)?)?;
        }
        Command::GenLabels {
            k,
            dist,
            ratio,
            n_min,
            out,
        } => {
            let y = generate(k, dist, ratio, n_min)?;
            emit(out.as_deref(), y.to_csv_string().as_bytes())?;
        }
        Command::PrintDefaultConfig => emit(None, &json_line(&ExperimentConfig::default())?)?,
    }
    Ok(ExitCode::SUCCESS)
}

#[cfg(feature = "parallel")]
fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(n) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building worker pool")?
            .install(f)),
        None => Ok(f()),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers.is_some_and(|n| n > 1) {
        eprintln!("warning: built without the parallel feature; --workers is ignored");
    }
    Ok(f())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = with_workers(cli.workers, || run(cli)).unwrap_or_else(|e| Err(Failure::Input(e)));
    match outcome {
        Ok(code) => code,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
