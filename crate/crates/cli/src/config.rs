use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use scl_geometry::batching::{batch_binding, make_partition, BatchSet, Binding, Scheme};
use scl_geometry::solver::SolverConfig;
use scl_geometry::{LabelSet, LossConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Dist {
    Step,
    Longtail,
}

/// Label source: an inline label list, per-class counts, or a generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelSpec {
    Inline(Vec<usize>),
    Counts {
        counts: Vec<usize>,
    },
    Generator {
        k: usize,
        dist: Dist,
        ratio: f64,
        n_min: usize,
    },
}

impl LabelSpec {
    pub fn build(&self) -> Result<LabelSet> {
        Ok(match self {
            Self::Inline(labels) => LabelSet::new(labels.clone())?,
            Self::Counts { counts } => LabelSet::from_counts(counts)?,
            Self::Generator {
                k,
                dist,
                ratio,
                n_min,
            } => generate(*k, *dist, *ratio, *n_min)?,
        })
    }
}

pub fn generate(k: usize, dist: Dist, ratio: f64, n_min: usize) -> Result<LabelSet> {
    Ok(match dist {
        Dist::Step => LabelSet::step(k, ratio, n_min)?,
        Dist::Longtail => LabelSet::long_tail(k, ratio, n_min)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchingConfig {
    pub scheme: Scheme,
    pub batch_size: usize,
    pub binding: bool,
    pub seed: u64,
    /// Partitions drawn; with `reshuffle` the loss sums over the union of
    /// every epoch's batches.
    pub epochs: u64,
}

impl Default for BatchingConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Fixed,
            batch_size: 4,
            binding: false,
            seed: 0,
            epochs: 1,
        }
    }
}

impl BatchingConfig {
    pub fn build(&self, y: &LabelSet) -> Result<BatchSet> {
        if self.epochs == 0 {
            bail!("batching.epochs must be at least 1");
        }
        let epochs = match self.scheme {
            Scheme::Fixed => 1,
            Scheme::Reshuffle => self.epochs,
        };
        let mut batches = Vec::new();
        for epoch in 0..epochs {
            let part = make_partition(y, self.batch_size, self.scheme, epoch, self.seed)?;
            batches.extend(part.batches().iter().cloned());
        }
        let set = BatchSet::new(y.n(), batches)?;
        Ok(if self.binding {
            batch_binding(&set, y, &Binding::Random { seed: self.seed })?
        } else {
            set
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub trajectory: String,
    pub embeddings: String,
    pub summary: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            trajectory: "trajectory.csv".into(),
            embeddings: "embeddings.csv".into(),
            summary: "summary.json".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub labels: LabelSpec,
    pub d: usize,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Independent restarts; the best run is written out.
    #[serde(default = "one")]
    pub starts: usize,
    /// Mini-batch loss when present, full-batch otherwise.
    #[serde(default)]
    pub batching: Option<BatchingConfig>,
    #[serde(default)]
    pub outputs: OutputConfig,
}

fn one() -> usize {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            labels: LabelSpec::Generator {
                k: 3,
                dist: Dist::Step,
                ratio: 10.0,
                n_min: 2,
            },
            d: 5,
            loss: LossConfig::default(),
            solver: SolverConfig::default(),
            starts: 1,
            batching: None,
            outputs: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("invalid experiment config")?;
        cfg.loss.validate()?;
        cfg.solver.validate()?;
        if cfg.d == 0 {
            bail!("d must be positive");
        }
        if cfg.starts == 0 {
            bail!("starts must be at least 1");
        }
        Ok(cfg)
    }
}
