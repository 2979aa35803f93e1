//! Problem model: per-sample losses, synthetic benchmark family with
//! closed-form constants, and exact empirical/population evaluation.
//!
//! Every per-sample loss has the form `f(x; z) = g(x) + <z, x>` where `g`
//! is one of three base landscapes and `z` is a bounded perturbation
//! vector.  The base Hessian does not depend on `z`, so empirical Hessians
//! are exact and cheap.  Perturbations are uniform on a box so that the
//! Lipschitz constant is a hard almost-sure bound rather than a moment
//! bound.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Default floor reported for the Hessian-Lipschitz constant when the base
/// landscape has an exactly constant Hessian (quadratic kind).  Downstream
/// parameter derivations divide by the square root of this constant.
pub const DEFAULT_RHO_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("unknown problem kind: {0}")]
    UnknownKind(String),
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("perturbation bound must be nonnegative, got {0}")]
    NegativePerturbation(f64),
    #[error("subset of samples is empty")]
    EmptySubset,
    #[error("sample index {index} out of range for dataset of size {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("dataset header is malformed: {0}")]
    MalformedHeader(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid objective constants: {0}")]
    InvalidSpec(String),
}

/// Base landscape of the synthetic per-sample loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProblemKind {
    /// g(x) = ||x||^2 / 2, strongly convex sanity case.
    Quadratic,
    /// g(x) = a (x1^3/3 - x1) + ||x_rest||^2 / 2 with a strict saddle at
    /// (-1, 0) and a local minimum at (1, 0).
    CubicSaddle,
    /// g(x) = (x1^2 - 1)^2 / 4 + ||x_rest||^2 / 2 with two global minima
    /// at x1 = +-1 and a strict saddle at the origin.
    DoubleWell,
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProblemKind::Quadratic => "quadratic",
            ProblemKind::CubicSaddle => "cubic_saddle",
            ProblemKind::DoubleWell => "double_well",
        };
        write!(f, "{s}")
    }
}

impl FromStr for ProblemKind {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quadratic" => Ok(ProblemKind::Quadratic),
            "cubic_saddle" => Ok(ProblemKind::CubicSaddle),
            "double_well" => Ok(ProblemKind::DoubleWell),
            other => Err(ObjectiveError::UnknownKind(other.to_string())),
        }
    }
}

/// A synthetic problem instance.  The per-sample loss is
/// `f(x; z) = g(x) + <z, x>` with `z` uniform on
/// `[-perturbation_bound, perturbation_bound]^d`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Problem {
    pub kind: ProblemKind,
    pub dim: usize,
    /// Coefficient `a` of the cubic term; ignored by the other kinds.
    pub saddle_coeff: f64,
    pub perturbation_bound: f64,
    /// Seed used when generating datasets for this problem.
    pub seed: u64,
}

/// Problem constants every run derivation is parameterized by.
///
/// All values are upper bounds valid on the centered ball of the given
/// diameter; they are checked against random grids in tests.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    /// Gradient norm bound G.
    pub lipschitz: f64,
    /// Gradient Lipschitz constant M.
    pub smooth: f64,
    /// Hessian Lipschitz constant rho.
    pub hessian_lipschitz: f64,
    /// Range (sup - inf) of the risk over the domain, B.
    pub value_range: f64,
    /// Domain diameter D.
    pub diameter: f64,
    /// Ambient dimension d.
    pub dim: usize,
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let fields = [
            ("lipschitz", self.lipschitz),
            ("smooth", self.smooth),
            ("hessian_lipschitz", self.hessian_lipschitz),
            ("value_range", self.value_range),
            ("diameter", self.diameter),
            ("dim", self.dim as f64),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ObjectiveError::InvalidSpec(format!(
                    "{name} must be strictly positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Whether smoothness dominates the curvature threshold at accuracy
    /// `alpha`, i.e. M >= sqrt(rho * alpha).  Below this the second-order
    /// condition is vacuous next to the first-order one.
    pub fn curvature_condition_holds(&self, alpha: f64) -> bool {
        self.smooth >= (self.hessian_lipschitz * alpha).sqrt()
    }
}

/// An ordered list of perturbation vectors drawn i.i.d. uniform on a box.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    /// Row-major n x d storage.
    samples: Vec<f64>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.d..(i + 1) * self.d]
    }

    /// Mean perturbation vector over the whole dataset.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for i in 0..self.n {
            linalg::axpy(&mut m, self.sample(i), 1.0 / self.n as f64);
        }
        m
    }

    /// Split into two disjoint datasets of sizes ceil(n/2) and floor(n/2).
    pub fn split_halves(&self) -> (Dataset, Dataset) {
        let n1 = self.n.div_ceil(2);
        let first = Dataset {
            n: n1,
            d: self.d,
            samples: self.samples[..n1 * self.d].to_vec(),
            seed: self.seed,
        };
        let second = Dataset {
            n: self.n - n1,
            d: self.d,
            samples: self.samples[n1 * self.d..].to_vec(),
            seed: self.seed,
        };
        (first, second)
    }

    /// Serialize as CSV: a `#`-prefixed header line carrying
    /// (kind, seed, n, d, perturbation_bound), then one row per sample.
    pub fn write_csv<W: Write>(&self, problem: &Problem, w: &mut W) -> Result<(), ObjectiveError> {
        writeln!(
            w,
            "# kind={} seed={} n={} d={} perturbation_bound={}",
            problem.kind, self.seed, self.n, self.d, problem.perturbation_bound
        )?;
        for i in 0..self.n {
            let row: Vec<String> = self.sample(i).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Inverse of [`Dataset::write_csv`].  Returns the dataset together
    /// with the header fields needed to reconstruct the problem.
    pub fn read_csv<R: BufRead>(r: &mut R) -> Result<(Dataset, DatasetHeader), ObjectiveError> {
        let mut header_line = String::new();
        r.read_line(&mut header_line)?;
        let header = DatasetHeader::parse(header_line.trim())?;
        let mut samples = Vec::with_capacity(header.n * header.d);
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| {
                    ObjectiveError::MalformedHeader(format!("bad sample value: {field}"))
                })?;
                samples.push(v);
            }
        }
        if samples.len() != header.n * header.d {
            return Err(ObjectiveError::MalformedHeader(format!(
                "expected {} values, found {}",
                header.n * header.d,
                samples.len()
            )));
        }
        Ok((
            Dataset {
                n: header.n,
                d: header.d,
                samples,
                seed: header.seed,
            },
            header,
        ))
    }
}

/// Parsed dataset header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub kind: ProblemKind,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub perturbation_bound: f64,
}

impl DatasetHeader {
    fn parse(line: &str) -> Result<Self, ObjectiveError> {
        let line = line
            .strip_prefix('#')
            .ok_or_else(|| ObjectiveError::MalformedHeader("missing # prefix".into()))?;
        let mut kind = None;
        let mut seed = None;
        let mut n = None;
        let mut d = None;
        let mut p = None;
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| ObjectiveError::MalformedHeader(format!("bad token {tok}")))?;
            match k {
                "kind" => kind = Some(v.parse::<ProblemKind>()?),
                "seed" => seed = v.parse::<u64>().ok(),
                "n" => n = v.parse::<usize>().ok(),
                "d" => d = v.parse::<usize>().ok(),
                "perturbation_bound" => p = v.parse::<f64>().ok(),
                _ => {}
            }
        }
        match (kind, seed, n, d, p) {
            (Some(kind), Some(seed), Some(n), Some(d), Some(p)) => Ok(DatasetHeader {
                kind,
                seed,
                n,
                d,
                perturbation_bound: p,
            }),
            _ => Err(ObjectiveError::MalformedHeader(line.to_string())),
        }
    }
}

/// Value, gradient and (optionally) Hessian of an averaged loss.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Option<Vec<Vec<f64>>>,
}

/// Build a synthetic problem.  `seed` controls later dataset draws.
pub fn make_problem(
    kind: ProblemKind,
    dim: usize,
    perturbation_bound: f64,
    seed: u64,
) -> Result<Problem, ObjectiveError> {
    if dim == 0 {
        return Err(ObjectiveError::ZeroDimension);
    }
    if perturbation_bound < 0.0 {
        return Err(ObjectiveError::NegativePerturbation(perturbation_bound));
    }
    Ok(Problem {
        kind,
        dim,
        saddle_coeff: 1.0,
        perturbation_bound,
        seed,
    })
}

impl Problem {
    /// Override the cubic coefficient (only meaningful for `CubicSaddle`).
    pub fn with_saddle_coeff(mut self, a: f64) -> Self {
        assert!(a > 0.0, "saddle coefficient must be positive");
        self.saddle_coeff = a;
        self
    }

    /// Draw a dataset of `n` i.i.d. perturbations using the given rng.
    pub fn sample_dataset_with(&self, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let p = self.perturbation_bound;
        let mut samples = Vec::with_capacity(n * self.dim);
        for _ in 0..n * self.dim {
            let u: f64 = rng.random();
            samples.push(p * (2.0 * u - 1.0));
        }
        Dataset {
            n,
            d: self.dim,
            samples,
            seed: self.seed,
        }
    }

    /// Draw a dataset of `n` samples from the problem's own seed.
    pub fn sample_dataset(&self, n: usize) -> Dataset {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.sample_dataset_with(n, &mut rng)
    }

    /// Base value g(x).
    pub fn base_value(&self, x: &[f64]) -> f64 {
        let a = self.saddle_coeff;
        match self.kind {
            ProblemKind::Quadratic => 0.5 * linalg::norm_sq(x),
            ProblemKind::CubicSaddle => {
                let x1 = x[0];
                let rest: f64 = x[1..].iter().map(|v| v * v).sum();
                a * (x1 * x1 * x1 / 3.0 - x1) + 0.5 * rest
            }
            ProblemKind::DoubleWell => {
                let x1 = x[0];
                let rest: f64 = x[1..].iter().map(|v| v * v).sum();
                let q = x1 * x1 - 1.0;
                0.25 * q * q + 0.5 * rest
            }
        }
    }

    /// Base gradient of g.
    pub fn base_gradient(&self, x: &[f64]) -> Vec<f64> {
        let a = self.saddle_coeff;
        let mut grad = x.to_vec();
        match self.kind {
            ProblemKind::Quadratic => {}
            ProblemKind::CubicSaddle => {
                grad[0] = a * (x[0] * x[0] - 1.0);
            }
            ProblemKind::DoubleWell => {
                grad[0] = x[0] * (x[0] * x[0] - 1.0);
            }
        }
        grad
    }

    /// Diagonal of the base Hessian (the base Hessians are diagonal).
    pub fn base_hessian_diag(&self, x: &[f64]) -> Vec<f64> {
        let a = self.saddle_coeff;
        let mut diag = vec![1.0; self.dim];
        match self.kind {
            ProblemKind::Quadratic => {}
            ProblemKind::CubicSaddle => diag[0] = 2.0 * a * x[0],
            ProblemKind::DoubleWell => diag[0] = 3.0 * x[0] * x[0] - 1.0,
        }
        diag
    }

    /// Dense base Hessian; independent of the perturbation, so it equals
    /// the Hessian of every per-sample loss and of every average.
    pub fn base_hessian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let diag = self.base_hessian_diag(x);
        let d = self.dim;
        let mut h = vec![vec![0.0; d]; d];
        for (i, v) in diag.into_iter().enumerate() {
            h[i][i] = v;
        }
        h
    }

    /// Per-sample loss value and gradient at x for perturbation z.
    pub fn sample_eval(&self, z: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
        let value = self.base_value(x) + linalg::dot(z, x);
        let grad = linalg::add(&self.base_gradient(x), z);
        (value, grad)
    }

    /// Gradient of the population risk (the perturbation has mean zero, so
    /// this is the base gradient).
    pub fn population_gradient(&self, x: &[f64]) -> Vec<f64> {
        self.base_gradient(x)
    }

    /// Population risk value.
    pub fn population_value(&self, x: &[f64]) -> f64 {
        self.base_value(x)
    }
}

/// Closed-form constants (G, M, rho, B) valid on the centered ball of the
/// given diameter, with the quadratic kind's zero Hessian-Lipschitz
/// constant replaced by `rho_floor`.
pub fn problem_constants_with_floor(
    problem: &Problem,
    diameter: f64,
    rho_floor: f64,
) -> ObjectiveSpec {
    assert!(diameter > 0.0, "diameter must be positive");
    let r = diameter / 2.0;
    let a = problem.saddle_coeff;
    let d = problem.dim as f64;
    let p = problem.perturbation_bound;

    let (grad_x1_bound, smooth, rho, base_range) = match problem.kind {
        ProblemKind::Quadratic => {
            // ||grad g|| = ||x|| <= r handled below by treating the whole
            // gradient as the "rest" part; x1 adds nothing extra.
            (0.0, 1.0, rho_floor, 0.5 * r * r)
        }
        ProblemKind::CubicSaddle => {
            // |d g / d x1| = a |x1^2 - 1| <= a max(1, r^2 - 1)
            let m1 = a * (1.0f64).max(r * r - 1.0);
            let smooth = (2.0 * a * r).max(1.0);
            // value range of a (s^3/3 - s) over [-r, r]: extrema at the
            // endpoints and at s = +-1.
            let h = |s: f64| s * s * s / 3.0 - s;
            let mut candidates = vec![h(r), h(-r)];
            if r >= 1.0 {
                candidates.push(h(1.0));
                candidates.push(h(-1.0));
            }
            let hi = candidates.iter().cloned().fold(f64::MIN, f64::max);
            let lo = candidates.iter().cloned().fold(f64::MAX, f64::min);
            (m1, smooth, 2.0 * a, a * (hi - lo) + 0.5 * r * r)
        }
        ProblemKind::DoubleWell => {
            // |d g / d x1| = |x1^3 - x1|, extrema at s = 1/sqrt(3) and the
            // endpoint.
            let h = |s: f64| (s * s * s - s).abs();
            let mut m1 = h(r);
            let s_crit = 1.0 / 3.0f64.sqrt();
            if r >= s_crit {
                m1 = m1.max(h(s_crit));
            }
            let smooth = (3.0 * r * r - 1.0).max(1.0);
            let quart = |s: f64| {
                let q = s * s - 1.0;
                0.25 * q * q
            };
            let sup = quart(r).max(quart(0.0)) + 0.5 * r * r;
            (m1, smooth, 6.0 * r, sup)
        }
    };

    // ||grad g(x)|| <= sqrt(m1^2 + r^2): the non-x1 part of the gradient is
    // x_rest with norm at most r.  The perturbation adds at most p sqrt(d).
    let base_grad = (grad_x1_bound * grad_x1_bound + r * r).sqrt();
    let lipschitz = base_grad + p * d.sqrt();
    // The inner product term ranges over [-p sqrt(d) r, p sqrt(d) r].
    let value_range = base_range + 2.0 * p * d.sqrt() * r;

    ObjectiveSpec {
        lipschitz,
        smooth,
        hessian_lipschitz: rho.max(rho_floor),
        value_range,
        diameter,
        dim: problem.dim,
    }
}

/// [`problem_constants_with_floor`] with the default floor.
pub fn problem_constants(problem: &Problem, diameter: f64) -> ObjectiveSpec {
    problem_constants_with_floor(problem, diameter, DEFAULT_RHO_FLOOR)
}

/// Exact average of per-sample values/gradients (and the shared Hessian)
/// over the subset given by `indices`, or over the full dataset when
/// `indices` is `None`.
pub fn evaluate(
    problem: &Problem,
    dataset: &Dataset,
    indices: Option<&[usize]>,
    x: &[f64],
    want_hessian: bool,
) -> Result<Evaluation, ObjectiveError> {
    let base_grad = problem.base_gradient(x);
    let base_val = problem.base_value(x);
    let mut mean_z = vec![0.0; problem.dim];
    match indices {
        None => {
            if dataset.is_empty() {
                return Err(ObjectiveError::EmptySubset);
            }
            mean_z = dataset.mean();
        }
        Some(idx) => {
            if idx.is_empty() {
                return Err(ObjectiveError::EmptySubset);
            }
            for &i in idx {
                if i >= dataset.len() {
                    return Err(ObjectiveError::IndexOutOfRange {
                        index: i,
                        n: dataset.len(),
                    });
                }
                linalg::axpy(&mut mean_z, dataset.sample(i), 1.0 / idx.len() as f64);
            }
        }
    }
    let value = base_val + linalg::dot(&mean_z, x);
    let gradient = linalg::add(&base_grad, &mean_z);
    let hessian = want_hessian.then(|| problem.base_hessian(x));
    Ok(Evaluation {
        value,
        gradient,
        hessian,
    })
}

/// Reference used by grid-search reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridReference {
    GridSearch,
    BestCandidate,
}

/// Mean excess of a set of outputs over the domain minimum, for the
/// empirical objective and (when computable) the population risk.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExcessReport {
    pub empirical_excess: f64,
    pub population_excess: Option<f64>,
    pub reference: GridReference,
}

/// Dense grid search for the minimum of `objective` over the centered ball
/// of the given radius.  Supported for dim <= 2.
pub fn grid_search_minimum(
    dim: usize,
    radius: f64,
    points_per_axis: usize,
    objective: impl Fn(&[f64]) -> f64,
) -> Option<(Vec<f64>, f64)> {
    if dim == 0 || dim > 2 || points_per_axis < 2 {
        return None;
    }
    let step = 2.0 * radius / (points_per_axis - 1) as f64;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut consider = |x: Vec<f64>| {
        let v = objective(&x);
        if best.as_ref().map_or(true, |(_, bv)| v < *bv) {
            best = Some((x, v));
        }
    };
    match dim {
        1 => {
            for i in 0..points_per_axis {
                let x = -radius + i as f64 * step;
                consider(vec![x]);
            }
        }
        2 => {
            for i in 0..points_per_axis {
                let x0 = -radius + i as f64 * step;
                for j in 0..points_per_axis {
                    let x1 = -radius + j as f64 * step;
                    if x0 * x0 + x1 * x1 <= radius * radius + 1e-12 {
                        consider(vec![x0, x1]);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    best
}
