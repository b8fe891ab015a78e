//! Experiment configuration: an optional JSON file merged with flags, flags
//! taking precedence. Everything is validated before any computation runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use msrlab::lab::SearchSpace;
use msrlab::Rule;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Properness,
    Quasiconcavity,
    TwoOutcomeTruthfulness,
    Deviation,
    Insensitivity,
    SsmProperties,
    Sybil,
    LossCompare,
}

impl Experiment {
    pub fn tag(self) -> &'static str {
        match self {
            Experiment::Properness => "properness",
            Experiment::Quasiconcavity => "quasiconcavity",
            Experiment::TwoOutcomeTruthfulness => "two-outcome-truthfulness",
            Experiment::Deviation => "deviation",
            Experiment::Insensitivity => "insensitivity",
            Experiment::SsmProperties => "ssm-properties",
            Experiment::Sybil => "sybil",
            Experiment::LossCompare => "loss-compare",
        }
    }

    fn default_outcomes(self) -> Outcomes {
        match self {
            Experiment::TwoOutcomeTruthfulness => Outcomes::Simplex(2),
            _ => Outcomes::Simplex(3),
        }
    }

    fn default_trials(self) -> usize {
        match self {
            Experiment::Properness | Experiment::Quasiconcavity => 100,
            Experiment::TwoOutcomeTruthfulness | Experiment::Sybil => 500,
            Experiment::Deviation => 10_000,
            Experiment::Insensitivity | Experiment::SsmProperties | Experiment::LossCompare => 100,
        }
    }
}

/// Outcome count, or the two-by-two product space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcomes {
    Simplex(usize),
    Product,
}

impl Outcomes {
    pub fn count(self) -> usize {
        match self {
            Outcomes::Simplex(k) => k,
            Outcomes::Product => 4,
        }
    }

    pub fn space(self) -> SearchSpace {
        match self {
            Outcomes::Simplex(k) => SearchSpace::Simplex { k },
            Outcomes::Product => SearchSpace::Product,
        }
    }
}

impl FromStr for Outcomes {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "product" {
            return Ok(Outcomes::Product);
        }
        s.parse::<usize>()
            .map(Outcomes::Simplex)
            .map_err(|_| format!("expected an outcome count or \"product\", got {s:?}"))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawOutcomes {
    Count(usize),
    Name(String),
}

impl<'de> Deserialize<'de> for Outcomes {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match RawOutcomes::deserialize(d)? {
            RawOutcomes::Count(k) => Ok(Outcomes::Simplex(k)),
            RawOutcomes::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Fields accepted in a config file or on the command line; all optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub rule: Option<String>,
    pub floor: Option<f64>,
    pub k: Option<Outcomes>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub threshold: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub gnuplot_script: Option<bool>,
}

impl Overrides {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fields set in `top` win over fields set here.
    pub fn merged(self, top: Overrides) -> Overrides {
        Overrides {
            experiment: top.experiment.or(self.experiment),
            rule: top.rule.or(self.rule),
            floor: top.floor.or(self.floor),
            k: top.k.or(self.k),
            seed: top.seed.or(self.seed),
            trials: top.trials.or(self.trials),
            threshold: top.threshold.or(self.threshold),
            out_dir: top.out_dir.or(self.out_dir),
            gnuplot_script: top.gnuplot_script.or(self.gnuplot_script),
        }
    }
}

/// A validated experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub rule: Rule,
    pub outcomes: Outcomes,
    pub seed: u64,
    pub trials: usize,
    pub threshold: f64,
    pub out_dir: PathBuf,
    pub gnuplot_script: bool,
}

pub const DEFAULT_OUT_DIR: &str = "msrlab-out";
pub const DEFAULT_THRESHOLD: f64 = 1e-3;
const MAX_OUTCOMES: usize = 6;

impl TryFrom<Overrides> for ExperimentConfig {
    type Error = anyhow::Error;

    fn try_from(o: Overrides) -> Result<Self> {
        let experiment = o.experiment.ok_or_else(|| anyhow!("no experiment given"))?;
        let tag = o.rule.ok_or_else(|| anyhow!("no rule given"))?;
        if tag == "brier" && o.floor.is_some() {
            bail!("the brier rule takes no floor");
        }
        if let Some(f) = o.floor {
            if !(f.is_finite() && f > 0.0) {
                bail!("floor must be positive, got {f}");
            }
        }
        let outcomes = o.k.unwrap_or(experiment.default_outcomes());
        match (experiment, outcomes) {
            (_, Outcomes::Simplex(k)) if !(2..=MAX_OUTCOMES).contains(&k) => {
                bail!("k must be between 2 and {MAX_OUTCOMES}, got {k}")
            }
            (Experiment::Deviation, _) => {}
            (_, Outcomes::Product) => bail!("k = product applies to the deviation experiment only"),
            (Experiment::TwoOutcomeTruthfulness, Outcomes::Simplex(k)) if k != 2 => {
                bail!("two-outcome-truthfulness needs k = 2, got {k}")
            }
            (Experiment::Insensitivity, Outcomes::Simplex(k)) if k != 3 => {
                bail!("insensitivity needs k = 3, got {k}")
            }
            _ => {}
        }
        let rule = Rule::from_tag(&tag, outcomes.count(), o.floor)?;
        let trials = o.trials.unwrap_or(experiment.default_trials());
        if trials == 0 {
            bail!("trials must be positive");
        }
        if experiment == Experiment::Insensitivity && trials < 3 {
            bail!("insensitivity needs at least 3 trials");
        }
        let threshold = o.threshold.unwrap_or(DEFAULT_THRESHOLD);
        if !(threshold.is_finite() && threshold > 0.0) {
            bail!("threshold must be positive, got {threshold}");
        }
        if experiment == Experiment::Deviation && threshold <= msrlab::lab::SOLVER_TOLERANCE {
            bail!("threshold must exceed the solver tolerance {}", msrlab::lab::SOLVER_TOLERANCE);
        }
        Ok(ExperimentConfig {
            experiment,
            rule,
            outcomes,
            seed: o.seed.unwrap_or(0),
            trials,
            threshold,
            out_dir: o.out_dir.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
            gnuplot_script: o.gnuplot_script.unwrap_or(false),
        })
    }
}
