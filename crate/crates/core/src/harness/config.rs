//! Flat key-value experiment configuration.
//!
//! The on-disk format is INI-style `key = value` lines with `#` comments;
//! the CLI applies `--key=value` overrides on top.  The format is flat on
//! purpose so experiment provenance diffs line by line.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::objective::ProblemKind;
use crate::spider::TheoryKnobs;

use super::HarnessError;

/// Which pipeline an experiment drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExperimentKind {
    SpiderEmpirical,
    SpiderPopulation,
    AboveThreshold,
    EmContinuous,
    EmPacking,
    RateScan,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::SpiderEmpirical => "spider_empirical",
            ExperimentKind::SpiderPopulation => "spider_population",
            ExperimentKind::AboveThreshold => "abovethreshold",
            ExperimentKind::EmContinuous => "em_continuous",
            ExperimentKind::EmPacking => "em_packing",
            ExperimentKind::RateScan => "rate_scan",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spider_empirical" => Ok(ExperimentKind::SpiderEmpirical),
            "spider_population" => Ok(ExperimentKind::SpiderPopulation),
            "abovethreshold" => Ok(ExperimentKind::AboveThreshold),
            "em_continuous" => Ok(ExperimentKind::EmContinuous),
            "em_packing" => Ok(ExperimentKind::EmPacking),
            "rate_scan" => Ok(ExperimentKind::RateScan),
            other => Err(HarnessError::Config(format!("unknown experiment {other}"))),
        }
    }
}

/// Where trials start.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum StartPoint {
    Origin,
    /// The strict saddle of the cubic landscape, (-1, 0, ..., 0).
    Saddle,
    Coords(Vec<f64>),
}

impl StartPoint {
    pub fn coords(&self, dim: usize) -> Vec<f64> {
        match self {
            StartPoint::Origin => vec![0.0; dim],
            StartPoint::Saddle => {
                let mut x = vec![0.0; dim];
                x[0] = -1.0;
                x
            }
            StartPoint::Coords(c) => {
                let mut x = c.clone();
                x.resize(dim, 0.0);
                x
            }
        }
    }

    fn render(&self) -> String {
        match self {
            StartPoint::Origin => "origin".into(),
            StartPoint::Saddle => "saddle".into(),
            StartPoint::Coords(c) => c
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(","),
        }
    }
}

impl FromStr for StartPoint {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "origin" => Ok(StartPoint::Origin),
            "saddle" => Ok(StartPoint::Saddle),
            other => {
                let coords: Result<Vec<f64>, _> =
                    other.split(',').map(|t| t.trim().parse::<f64>()).collect();
                coords
                    .map(StartPoint::Coords)
                    .map_err(|_| HarnessError::Config(format!("bad start point {other}")))
            }
        }
    }
}

/// Complete description of one experiment run.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub problem: ProblemKind,
    pub dim: usize,
    pub n: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub omega: f64,
    pub seed: u64,
    pub trials: usize,
    pub diameter: f64,
    pub perturbation: f64,
    pub saddle_coeff: f64,
    /// Target accuracy of the selection phase; when absent the derived
    /// analysis-derived accuracy is used.
    pub alpha: Option<f64>,
    pub x0: StartPoint,
    pub jobs: usize,
    /// Plain gradient-descent steps used to produce selector candidates.
    pub gd_steps: usize,
    pub knobs: TheoryKnobs,
    // Sampler overrides: when absent, parameters are derived.
    pub em_beta: Option<f64>,
    pub em_mu: Option<f64>,
    pub em_eta: Option<f64>,
    pub em_steps: Option<u64>,
    pub packing_radius: Option<f64>,
    /// Dataset sizes of the rate scan.
    pub scan_n: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::SpiderEmpirical,
            problem: ProblemKind::CubicSaddle,
            dim: 2,
            n: 4096,
            epsilon: 1.0,
            delta: 1e-6,
            omega: 0.05,
            seed: 42,
            trials: 10,
            diameter: 4.0,
            perturbation: 0.1,
            saddle_coeff: 1.0,
            alpha: None,
            x0: StartPoint::Origin,
            jobs: 1,
            gd_steps: 40,
            knobs: TheoryKnobs::default(),
            em_beta: None,
            em_mu: None,
            em_eta: None,
            em_steps: None,
            packing_radius: None,
            scan_n: vec![1024, 2048, 4096, 8192, 16384],
        }
    }
}

impl ExperimentConfig {
    /// Parse an INI-style document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.dim == 0 {
            return Err(HarnessError::Config("d must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(HarnessError::Config("n must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(HarnessError::Config("epsilon must be positive".into()));
        }
        if !(self.delta >= 0.0 && self.delta < 1.0) {
            return Err(HarnessError::Config("delta must lie in [0, 1)".into()));
        }
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return Err(HarnessError::Config("omega must lie in (0, 1)".into()));
        }
        if self.jobs == 0 {
            return Err(HarnessError::Config("jobs must be at least 1".into()));
        }
        if !(self.diameter > 0.0) {
            return Err(HarnessError::Config("diameter must be positive".into()));
        }
        Ok(())
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let bad = |what: &str| HarnessError::Config(format!("bad value for {what}: {value}"));
        match key {
            "experiment" => self.kind = value.parse()?,
            "problem" => {
                self.problem = value
                    .parse()
                    .map_err(|e| HarnessError::Config(format!("{e}")))?
            }
            "d" => self.dim = value.parse().map_err(|_| bad("d"))?,
            "n" => self.n = value.parse().map_err(|_| bad("n"))?,
            "epsilon" => self.epsilon = value.parse().map_err(|_| bad("epsilon"))?,
            "delta" => self.delta = value.parse().map_err(|_| bad("delta"))?,
            "omega" => self.omega = value.parse().map_err(|_| bad("omega"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "trials" => self.trials = value.parse().map_err(|_| bad("trials"))?,
            "diameter" => self.diameter = value.parse().map_err(|_| bad("diameter"))?,
            "perturbation" => self.perturbation = value.parse().map_err(|_| bad("perturbation"))?,
            "saddle_coeff" => self.saddle_coeff = value.parse().map_err(|_| bad("saddle_coeff"))?,
            "alpha" => self.alpha = Some(value.parse().map_err(|_| bad("alpha"))?),
            "x0" => self.x0 = value.parse()?,
            "jobs" => self.jobs = value.parse().map_err(|_| bad("jobs"))?,
            "gd_steps" => self.gd_steps = value.parse().map_err(|_| bad("gd_steps"))?,
            "em_beta" => self.em_beta = Some(value.parse().map_err(|_| bad("em_beta"))?),
            "em_mu" => self.em_mu = Some(value.parse().map_err(|_| bad("em_mu"))?),
            "em_eta" => self.em_eta = Some(value.parse().map_err(|_| bad("em_eta"))?),
            "em_steps" => self.em_steps = Some(value.parse().map_err(|_| bad("em_steps"))?),
            "packing_radius" => {
                self.packing_radius = Some(value.parse().map_err(|_| bad("packing_radius"))?)
            }
            "scan_n" => {
                let parsed: Result<Vec<usize>, _> =
                    value.split(',').map(|t| t.trim().parse()).collect();
                self.scan_n = parsed.map_err(|_| bad("scan_n"))?;
                if self.scan_n.is_empty() {
                    return Err(bad("scan_n"));
                }
            }
            "knob.c_gamma" => self.knobs.c_gamma = value.parse().map_err(|_| bad(key))?,
            "knob.c_big_gamma" => self.knobs.c_big_gamma = value.parse().map_err(|_| bad(key))?,
            "knob.c_t" => self.knobs.c_t = value.parse().map_err(|_| bad(key))?,
            "knob.threshold_log_exp" => {
                self.knobs.threshold_log_exp = value.parse().map_err(|_| bad(key))?
            }
            "knob.c_alpha" => self.knobs.c_alpha = value.parse().map_err(|_| bad(key))?,
            "knob.c_k" => self.knobs.c_k = value.parse().map_err(|_| bad(key))?,
            "knob.c_nsg" => self.knobs.c_nsg = value.parse().map_err(|_| bad(key))?,
            "knob.noiseless_gamma" => {
                self.knobs.noiseless_gamma = Some(value.parse().map_err(|_| bad(key))?)
            }
            other => {
                return Err(HarnessError::Config(format!("unknown key {other}")));
            }
        }
        Ok(())
    }

    /// Render back to the INI format; `parse(render())` reproduces the
    /// config exactly.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("experiment", self.kind.as_str().into());
        kv("problem", self.problem.to_string());
        kv("d", self.dim.to_string());
        kv("n", self.n.to_string());
        kv("epsilon", format!("{}", self.epsilon));
        kv("delta", format!("{}", self.delta));
        kv("omega", format!("{}", self.omega));
        kv("seed", self.seed.to_string());
        kv("trials", self.trials.to_string());
        kv("diameter", format!("{}", self.diameter));
        kv("perturbation", format!("{}", self.perturbation));
        kv("saddle_coeff", format!("{}", self.saddle_coeff));
        if let Some(a) = self.alpha {
            kv("alpha", format!("{a}"));
        }
        kv("x0", self.x0.render());
        kv("jobs", self.jobs.to_string());
        kv("gd_steps", self.gd_steps.to_string());
        if let Some(v) = self.em_beta {
            kv("em_beta", format!("{v}"));
        }
        if let Some(v) = self.em_mu {
            kv("em_mu", format!("{v}"));
        }
        if let Some(v) = self.em_eta {
            kv("em_eta", format!("{v}"));
        }
        if let Some(v) = self.em_steps {
            kv("em_steps", v.to_string());
        }
        if let Some(v) = self.packing_radius {
            kv("packing_radius", format!("{v}"));
        }
        kv(
            "scan_n",
            self.scan_n
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        let k = &self.knobs;
        kv("knob.c_gamma", format!("{}", k.c_gamma));
        kv("knob.c_big_gamma", format!("{}", k.c_big_gamma));
        kv("knob.c_t", format!("{}", k.c_t));
        kv("knob.threshold_log_exp", format!("{}", k.threshold_log_exp));
        kv("knob.c_alpha", format!("{}", k.c_alpha));
        kv("knob.c_k", format!("{}", k.c_k));
        kv("knob.c_nsg", format!("{}", k.c_nsg));
        if let Some(v) = k.noiseless_gamma {
            kv("knob.noiseless_gamma", format!("{v}"));
        }
        out
    }
}
