//! Noisy gradient oracles.
//!
//! Two oracle kinds are provided: the first estimates the gradient at one
//! point, the second estimates the gradient difference between two points.
//! Both come in an empirical flavor (full batch plus spherical Gaussian
//! noise) and a population flavor (minibatch drawn without replacement
//! plus Gaussian noise, with the difference oracle's noise scaled by the
//! distance between the query points).  The norm-subGaussian constants
//! induced by a parameter choice are computed here, never user-set.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::objective::{evaluate, Dataset, ObjectiveSpec, Problem};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(
        "sample budget exhausted: needed {needed} fresh samples, {available} remain; \
         the batch plan must satisfy b1*|K| + b2*T <= n/2"
    )]
    DataExhausted { needed: usize, available: usize },
    #[error("objective evaluation failed: {0}")]
    Objective(#[from] crate::objective::ObjectiveError),
    #[error("invalid oracle parameter: {0}")]
    InvalidParameter(String),
}

/// Whether oracles answer about the empirical or the population risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OracleMode {
    Empirical,
    Population,
}

/// Batch size of an oracle query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BatchSize {
    Full,
    Size(usize),
}

impl BatchSize {
    pub fn as_count(&self, n: usize) -> usize {
        match self {
            BatchSize::Full => n,
            BatchSize::Size(b) => *b,
        }
    }
}

/// Noise scales, batch sizes, and the induced norm-subGaussian constants.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OracleParams {
    pub sigma1: f64,
    pub sigma2: f64,
    pub b1: BatchSize,
    pub b2: BatchSize,
    pub zeta1: f64,
    pub zeta2: f64,
}

impl OracleParams {
    /// Empirical oracles: zeta_i = sigma_i sqrt(d).
    pub fn empirical(sigma1: f64, sigma2: f64, dim: usize) -> Self {
        let d = dim as f64;
        OracleParams {
            sigma1,
            sigma2,
            b1: BatchSize::Full,
            b2: BatchSize::Full,
            zeta1: sigma1 * d.sqrt(),
            zeta2: sigma2 * d.sqrt(),
        }
    }

    /// Population oracles with minibatches b1, b2 and subGaussian constant
    /// knob `c_nsg` (defaults to 1 upstream).
    pub fn population(
        sigma1: f64,
        sigma2: f64,
        b1: usize,
        b2: usize,
        spec: &ObjectiveSpec,
        c_nsg: f64,
    ) -> Self {
        let d = spec.dim as f64;
        OracleParams {
            sigma1,
            sigma2,
            b1: BatchSize::Size(b1),
            b2: BatchSize::Size(b2),
            zeta1: zeta_population(spec.lipschitz, d, b1 as f64, sigma1, c_nsg),
            zeta2: zeta_population(spec.smooth, d, b2 as f64, sigma2, c_nsg),
        }
    }
}

/// Norm-subGaussian constant of a population minibatch oracle:
/// c * scale * sqrt(ln d) / sqrt(b) + sigma * sqrt(d).
///
/// `scale` is the Lipschitz constant for the first kind and the
/// smoothness constant for the second kind.  Exposed with real-valued
/// dimension so the formula itself is testable.
pub fn zeta_population(scale: f64, dim: f64, batch: f64, sigma: f64, c_nsg: f64) -> f64 {
    let log_d = dim.ln().max(0.0);
    c_nsg * scale * log_d.sqrt() / batch.sqrt() + sigma * dim.sqrt()
}

/// Induced constants for either mode; see [`OracleParams`] invariants.
pub fn induced_zetas(
    mode: OracleMode,
    sigma1: f64,
    sigma2: f64,
    b1: usize,
    b2: usize,
    spec: &ObjectiveSpec,
    c_nsg: f64,
) -> (f64, f64) {
    match mode {
        OracleMode::Empirical => {
            let p = OracleParams::empirical(sigma1, sigma2, spec.dim);
            (p.zeta1, p.zeta2)
        }
        OracleMode::Population => {
            let p = OracleParams::population(sigma1, sigma2, b1, b2, spec, c_nsg);
            (p.zeta1, p.zeta2)
        }
    }
}

/// Without-replacement sample cursor.  Indices are served from a seeded
/// permutation and never reused across the whole run.
#[derive(Debug, Clone)]
pub struct SampleCursor {
    perm: Vec<usize>,
    next: usize,
}

impl SampleCursor {
    pub fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        SampleCursor { perm, next: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.perm.len() - self.next
    }

    pub fn consumed(&self) -> usize {
        self.next
    }

    pub fn consumed_indices(&self) -> &[usize] {
        &self.perm[..self.next]
    }

    pub fn take(&mut self, k: usize) -> Result<&[usize], OracleError> {
        if self.remaining() < k {
            return Err(OracleError::DataExhausted {
                needed: k,
                available: self.remaining(),
            });
        }
        let out = &self.perm[self.next..self.next + k];
        self.next += k;
        Ok(out)
    }
}

/// Kind of an oracle invocation, for the audit trail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OracleCallKind {
    First,
    Second,
}

/// One audit record per oracle invocation.
#[derive(Debug, Clone, Serialize)]
pub struct OracleEvent {
    pub kind: OracleCallKind,
    pub batch: usize,
    pub noise_scale: f64,
}

/// Interface the optimizer drives.  Implementations may be noisy
/// (production) or exact (tests).
pub trait GradientOracle {
    /// Unbiased estimate of the gradient at x.
    fn o1(&mut self, x: &[f64]) -> Result<Vec<f64>, OracleError>;
    /// Unbiased estimate of grad(x) - grad(y).
    fn o2(&mut self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, OracleError>;
}

/// Production oracle over a problem/dataset pair.
pub struct NoisyOracle<'a> {
    problem: &'a Problem,
    dataset: &'a Dataset,
    mode: OracleMode,
    params: OracleParams,
    cursor: Option<SampleCursor>,
    rng: ChaCha8Rng,
    events: Vec<OracleEvent>,
}

fn gaussian_vector(dim: usize, sd: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

impl<'a> NoisyOracle<'a> {
    pub fn new(
        problem: &'a Problem,
        dataset: &'a Dataset,
        mode: OracleMode,
        params: OracleParams,
        mut rng: ChaCha8Rng,
    ) -> Result<Self, OracleError> {
        let cursor = match mode {
            OracleMode::Empirical => None,
            OracleMode::Population => Some(SampleCursor::new(dataset.len(), &mut rng)),
        };
        if mode == OracleMode::Population {
            for (name, b) in [("b1", params.b1), ("b2", params.b2)] {
                if matches!(b, BatchSize::Full) {
                    return Err(OracleError::InvalidParameter(format!(
                        "population mode requires explicit batch size for {name}"
                    )));
                }
            }
        }
        Ok(NoisyOracle {
            problem,
            dataset,
            mode,
            params,
            cursor,
            rng,
            events: Vec::new(),
        })
    }

    pub fn events(&self) -> &[OracleEvent] {
        &self.events
    }

    pub fn cursor(&self) -> Option<&SampleCursor> {
        self.cursor.as_ref()
    }

    pub fn params(&self) -> &OracleParams {
        &self.params
    }

    fn batch_gradient(&mut self, x: &[f64], batch: BatchSize) -> Result<Vec<f64>, OracleError> {
        match self.mode {
            OracleMode::Empirical => {
                Ok(evaluate(self.problem, self.dataset, None, x, false)?.gradient)
            }
            OracleMode::Population => {
                let b = batch.as_count(self.dataset.len());
                let cursor = self.cursor.as_mut().expect("population cursor");
                let idx: Vec<usize> = cursor.take(b)?.to_vec();
                Ok(evaluate(self.problem, self.dataset, Some(&idx), x, false)?.gradient)
            }
        }
    }

    fn batch_gradient_difference(
        &mut self,
        x: &[f64],
        y: &[f64],
        batch: BatchSize,
    ) -> Result<Vec<f64>, OracleError> {
        match self.mode {
            OracleMode::Empirical => {
                let gx = evaluate(self.problem, self.dataset, None, x, false)?.gradient;
                let gy = evaluate(self.problem, self.dataset, None, y, false)?.gradient;
                Ok(linalg::sub(&gx, &gy))
            }
            OracleMode::Population => {
                // The same fresh batch is used at both points so the
                // perturbation terms cancel exactly.
                let b = batch.as_count(self.dataset.len());
                let cursor = self.cursor.as_mut().expect("population cursor");
                let idx: Vec<usize> = cursor.take(b)?.to_vec();
                let gx = evaluate(self.problem, self.dataset, Some(&idx), x, false)?.gradient;
                let gy = evaluate(self.problem, self.dataset, Some(&idx), y, false)?.gradient;
                Ok(linalg::sub(&gx, &gy))
            }
        }
    }
}

impl GradientOracle for NoisyOracle<'_> {
    fn o1(&mut self, x: &[f64]) -> Result<Vec<f64>, OracleError> {
        let mut g = self.batch_gradient(x, self.params.b1)?;
        let sd = self.params.sigma1;
        if sd > 0.0 {
            let noise = gaussian_vector(x.len(), sd, &mut self.rng);
            linalg::axpy(&mut g, &noise, 1.0);
        }
        self.events.push(OracleEvent {
            kind: OracleCallKind::First,
            batch: self.params.b1.as_count(self.dataset.len()),
            noise_scale: sd,
        });
        Ok(g)
    }

    fn o2(&mut self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, OracleError> {
        let mut g = self.batch_gradient_difference(x, y, self.params.b2)?;
        // Empirical noise has a fixed deviation; population noise scales
        // with the movement, so coincident points draw exactly zero.
        let sd = match self.mode {
            OracleMode::Empirical => self.params.sigma2,
            OracleMode::Population => self.params.sigma2 * linalg::dist(x, y),
        };
        if sd > 0.0 {
            let noise = gaussian_vector(x.len(), sd, &mut self.rng);
            linalg::axpy(&mut g, &noise, 1.0);
        }
        self.events.push(OracleEvent {
            kind: OracleCallKind::Second,
            batch: self.params.b2.as_count(self.dataset.len()),
            noise_scale: sd,
        });
        Ok(g)
    }
}

/// Exact oracle used by tests and the noiseless probes.
pub struct ExactOracle<'a> {
    pub problem: &'a Problem,
    pub dataset: &'a Dataset,
}

impl GradientOracle for ExactOracle<'_> {
    fn o1(&mut self, x: &[f64]) -> Result<Vec<f64>, OracleError> {
        Ok(evaluate(self.problem, self.dataset, None, x, false)?.gradient)
    }

    fn o2(&mut self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, OracleError> {
        let gx = evaluate(self.problem, self.dataset, None, x, false)?.gradient;
        let gy = evaluate(self.problem, self.dataset, None, y, false)?.gradient;
        Ok(linalg::sub(&gx, &gy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{make_problem, problem_constants, ProblemKind};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn empirical_zero_noise_is_exact() {
        let p = make_problem(ProblemKind::CubicSaddle, 2, 0.3, 5).unwrap();
        let ds = p.sample_dataset(20);
        let params = OracleParams::empirical(0.0, 0.0, 2);
        let mut o = NoisyOracle::new(&p, &ds, OracleMode::Empirical, params, rng(1)).unwrap();
        let x = [0.4, -0.2];
        let g = o.o1(&x).unwrap();
        let exact = evaluate(&p, &ds, None, &x, false).unwrap().gradient;
        assert_eq!(g, exact);
        let y = [0.1, 0.1];
        let d = o.o2(&x, &y).unwrap();
        let gy = evaluate(&p, &ds, None, &y, false).unwrap().gradient;
        assert_eq!(d, linalg::sub(&exact, &gy));
    }

    #[test]
    fn population_full_batch_zero_noise_matches_empirical() {
        let p = make_problem(ProblemKind::Quadratic, 2, 0.5, 9).unwrap();
        let ds = p.sample_dataset(8);
        let spec = problem_constants(&p, 2.0);
        let params = OracleParams::population(0.0, 0.0, 8, 8, &spec, 1.0);
        let mut o = NoisyOracle::new(&p, &ds, OracleMode::Population, params, rng(2)).unwrap();
        let x = [0.3, 0.3];
        let g = o.o1(&x).unwrap();
        let exact = evaluate(&p, &ds, None, &x, false).unwrap().gradient;
        assert!(linalg::dist(&g, &exact) < 1e-12);
        // Same full-batch identity for the difference oracle.
        let y = [-0.2, 0.6];
        let ds2 = p.sample_dataset(8);
        let params2 = OracleParams::population(0.0, 0.0, 8, 8, &spec, 1.0);
        let mut o2 = NoisyOracle::new(&p, &ds2, OracleMode::Population, params2, rng(3)).unwrap();
        let diff = o2.o2(&x, &y).unwrap();
        let gx = evaluate(&p, &ds2, None, &x, false).unwrap().gradient;
        let gy = evaluate(&p, &ds2, None, &y, false).unwrap().gradient;
        assert!(linalg::dist(&diff, &linalg::sub(&gx, &gy)) < 1e-12);
    }

    #[test]
    fn population_o2_coincident_points_are_noiseless_zero() {
        let p = make_problem(ProblemKind::DoubleWell, 2, 0.5, 9).unwrap();
        let ds = p.sample_dataset(16);
        let spec = problem_constants(&p, 2.0);
        let params = OracleParams::population(0.0, 3.0, 2, 2, &spec, 1.0);
        let mut o = NoisyOracle::new(&p, &ds, OracleMode::Population, params, rng(3)).unwrap();
        let x = [0.2, -0.7];
        let d = o.o2(&x, &x).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn data_exhaustion_is_reported() {
        let p = make_problem(ProblemKind::Quadratic, 2, 0.1, 9).unwrap();
        let ds = p.sample_dataset(5);
        let spec = problem_constants(&p, 2.0);
        let params = OracleParams::population(0.0, 0.0, 3, 3, &spec, 1.0);
        let mut o = NoisyOracle::new(&p, &ds, OracleMode::Population, params, rng(4)).unwrap();
        let x = [0.0, 0.0];
        o.o1(&x).unwrap();
        assert!(matches!(
            o.o1(&x),
            Err(OracleError::DataExhausted {
                needed: 3,
                available: 2
            })
        ));
    }

    #[test]
    fn cursor_never_repeats_indices() {
        let mut r = rng(7);
        let mut cursor = SampleCursor::new(100, &mut r);
        let mut seen = std::collections::HashSet::new();
        while cursor.remaining() >= 7 {
            for &i in cursor.take(7).unwrap() {
                assert!(seen.insert(i), "index {i} served twice");
            }
        }
        assert_eq!(seen.len(), cursor.consumed());
    }

    #[test]
    fn empirical_o1_unbiased_monte_carlo() {
        let p = make_problem(ProblemKind::CubicSaddle, 2, 0.0, 5).unwrap();
        let ds = p.sample_dataset(4);
        let x = [0.5, 0.25];
        let exact = evaluate(&p, &ds, None, &x, false).unwrap().gradient;
        let params = OracleParams::empirical(1.0, 0.0, 2);
        let mut o = NoisyOracle::new(&p, &ds, OracleMode::Empirical, params, rng(11)).unwrap();
        let reps = 100_000usize;
        let mut mean = vec![0.0, 0.0];
        for _ in 0..reps {
            let g = o.o1(&x).unwrap();
            linalg::axpy(&mut mean, &g, 1.0 / reps as f64);
        }
        let tol = 3.0 * 1.0 / (reps as f64).sqrt();
        for i in 0..2 {
            assert!(
                (mean[i] - exact[i]).abs() <= tol,
                "coordinate {i}: {} vs {}",
                mean[i],
                exact[i]
            );
        }
    }

    #[test]
    fn population_o1_unbiased_for_population_gradient() {
        // Fresh dataset and cursor per draw; the estimator must center on
        // the analytic population gradient.
        let p = make_problem(ProblemKind::DoubleWell, 2, 0.6, 5).unwrap();
        let spec = problem_constants(&p, 2.0);
        let x = [0.4, -0.3];
        let pop_grad = p.population_gradient(&x);
        let sigma1 = 0.05;
        let b1 = 4usize;
        let n = 8usize;
        let reps = 100_000usize;
        let mut outer = rng(21);
        let mut mean = vec![0.0, 0.0];
        for _ in 0..reps {
            let ds = p.sample_dataset_with(n, &mut outer);
            let params = OracleParams::population(sigma1, 0.0, b1, 1, &spec, 1.0);
            let chain_seed: u64 = outer.random();
            let mut o =
                NoisyOracle::new(&p, &ds, OracleMode::Population, params, rng(chain_seed)).unwrap();
            let g = o.o1(&x).unwrap();
            linalg::axpy(&mut mean, &g, 1.0 / reps as f64);
        }
        // Per-coordinate deviation: uniform perturbation variance p^2/3
        // averaged over b1, plus the Gaussian noise.
        let p_bound = 0.6f64;
        let sd = (p_bound * p_bound / 3.0 / b1 as f64 + sigma1 * sigma1).sqrt();
        let tol = 4.0 * sd / (reps as f64).sqrt();
        for i in 0..2 {
            assert!(
                (mean[i] - pop_grad[i]).abs() <= tol,
                "coordinate {i}: {} vs {} (tol {tol})",
                mean[i],
                pop_grad[i]
            );
        }
    }

    #[test]
    fn empirical_o1_error_passes_nsg_tail_check() {
        let p = make_problem(ProblemKind::Quadratic, 2, 0.0, 5).unwrap();
        let ds = p.sample_dataset(4);
        let x = [0.1, 0.9];
        let exact = evaluate(&p, &ds, None, &x, false).unwrap().gradient;
        let sigma1 = 0.8;
        let params = OracleParams::empirical(sigma1, 0.0, 2);
        let zeta1 = params.zeta1;
        let draws = 10_000usize;
        let mut o = NoisyOracle::new(&p, &ds, OracleMode::Empirical, params, rng(31)).unwrap();
        let mut errs = Vec::with_capacity(draws);
        for _ in 0..draws {
            let g = o.o1(&x).unwrap();
            errs.push(linalg::dist(&g, &exact));
        }
        for omega in [0.1, 0.01] {
            let t = zeta1 * (2.0 * (2.0f64 / omega).ln()).sqrt();
            let exceed = errs.iter().filter(|&&e| e >= t).count() as f64 / draws as f64;
            assert!(
                exceed <= omega * 1.5,
                "tail fraction {exceed} exceeds omega {omega} with slack"
            );
        }
    }

    #[test]
    fn population_o2_error_scaled_by_distance_passes_nsg_tail_check() {
        let p = make_problem(ProblemKind::CubicSaddle, 2, 0.4, 5).unwrap();
        let spec = problem_constants(&p, 4.0);
        let x = [0.6, 0.2];
        let y = [0.1, -0.3];
        let dist = linalg::dist(&x, &y);
        let sigma2 = 0.5;
        let b2 = 4usize;
        let n = 8usize;
        let draws = 10_000usize;
        let mut outer = rng(41);
        let mut ratios = Vec::with_capacity(draws);
        let params = OracleParams::population(0.0, sigma2, 1, b2, &spec, 1.0);
        let zeta2 = params.zeta2;
        for _ in 0..draws {
            let ds = p.sample_dataset_with(n, &mut outer);
            let chain_seed: u64 = outer.random();
            let mut o =
                NoisyOracle::new(&p, &ds, OracleMode::Population, params, rng(chain_seed)).unwrap();
            let d = o.o2(&x, &y).unwrap();
            let exact = linalg::sub(&p.population_gradient(&x), &p.population_gradient(&y));
            ratios.push(linalg::dist(&d, &exact) / dist);
        }
        for omega in [0.1, 0.01] {
            let t = zeta2 * (2.0 * (2.0f64 / omega).ln()).sqrt();
            let exceed = ratios.iter().filter(|&&e| e >= t).count() as f64 / draws as f64;
            assert!(
                exceed <= omega * 1.5,
                "tail fraction {exceed} exceeds omega {omega} with slack"
            );
        }
    }

    #[test]
    fn induced_zeta_examples() {
        // Empirical: sigma1 sqrt(d).
        let p = OracleParams::empirical(2.0, 0.0, 4);
        assert_eq!(p.zeta1, 4.0);
        // Population formula at real-valued dimension e: sqrt(ln e) = 1.
        let z = zeta_population(1.0, std::f64::consts::E, 1.0, 0.0, 1.0);
        assert!((z - 1.0).abs() < 1e-12);
        // Huge batch and no noise drive the constant to zero.
        let z = zeta_population(1.0, 8.0, 1e12, 0.0, 1.0);
        assert!(z < 1e-5);
    }
}
