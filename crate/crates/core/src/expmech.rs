//! Sampling from the regularized Gibbs density.
//!
//! The target is proportional to exp(-beta (F_D(x) + mu ||x||^2 / 2))
//! restricted to a centered ball.  Sampling alternates a forward Gaussian
//! step with an inner draw from the target tilted by a Gaussian around the
//! current point.  The inner draw is an exact rejection sampler: proposals
//! come from the tilting Gaussian restricted to the domain, and acceptance
//! uses a local lower bound of the potential built from its Lipschitz
//! constant, so the accepted law is the restricted tilted density itself
//! (up to the negligible mass beyond the proposal's effective support).
//!
//! Privacy parameters (beta, mu) are chosen so that the log-Sobolev bound
//! on the sampling cost stays within the requested budget; the choice is
//! certified by direct evaluation before any sampling happens.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::objective::{
    evaluate, grid_search_minimum, Dataset, ExcessReport, GridReference, Problem,
};
use crate::privacy::{lsi_dp_epsilon, stroock_clsi, PrivacyError};

#[derive(Debug, Error)]
pub enum ExpMechError {
    #[error(
        "no feasible inverse temperature: even the floor value violates the \
         privacy bound for the requested budget"
    )]
    ParamsInfeasible,
    #[error(
        "rejection sampler stalled after {attempts} attempts (acceptance \
         estimate {accept_estimate:.2e}); the step size is too large for the \
         potential's Lipschitz scale"
    )]
    RejectionStall { attempts: u64, accept_estimate: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

/// Attempt cap corresponding to an acceptance-rate floor of about 1e-4.
const MAX_REJECTION_ATTEMPTS: u64 = 200_000;

/// Sampling domain.
#[derive(Debug, Clone, Copy, Serialize)]
pub enum Domain {
    /// Centered Euclidean ball.
    Ball { radius: f64 },
    /// Test mode: no restriction.
    Unbounded,
}

impl Domain {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Domain::Ball { radius } => linalg::norm(x) <= *radius,
            Domain::Unbounded => true,
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Domain::Ball { radius } => {
                let n = linalg::norm(x);
                if n <= *radius || n == 0.0 {
                    x.to_vec()
                } else {
                    x.iter().map(|v| v * radius / n).collect()
                }
            }
            Domain::Unbounded => x.to_vec(),
        }
    }
}

/// Potential to sample from: x maps to beta (F_D(x) + mu ||x||^2 / 2).
pub struct Target<'a> {
    potential: Box<dyn Fn(&[f64]) -> f64 + Sync + 'a>,
    pub domain: Domain,
    /// Lipschitz constant of the potential on the domain; the inner
    /// sampler's acceptance lower bound is built from it.
    pub lipschitz: f64,
}

impl<'a> Target<'a> {
    pub fn new(
        potential: impl Fn(&[f64]) -> f64 + Sync + 'a,
        domain: Domain,
        lipschitz: f64,
    ) -> Self {
        Target {
            potential: Box::new(potential),
            domain,
            lipschitz,
        }
    }

    /// The regularized empirical target over a problem/dataset pair.
    /// `lipschitz_g` is the gradient bound of the unregularized risk.
    pub fn regularized_empirical(
        problem: &'a Problem,
        dataset: &'a Dataset,
        beta: f64,
        mu: f64,
        diameter: f64,
        lipschitz_g: f64,
    ) -> Self {
        let potential = move |x: &[f64]| {
            let value = evaluate(problem, dataset, None, x, false)
                .expect("nonempty dataset")
                .value;
            beta * (value + 0.5 * mu * linalg::norm_sq(x))
        };
        Target {
            potential: Box::new(potential),
            domain: Domain::Ball {
                radius: diameter / 2.0,
            },
            lipschitz: beta * (lipschitz_g + mu * diameter / 2.0),
        }
    }

    pub fn potential(&self, x: &[f64]) -> f64 {
        (self.potential)(x)
    }
}

/// Sampler configuration.
#[derive(Debug, Clone, Serialize)]
pub struct EMConfig {
    pub beta: f64,
    pub mu: f64,
    pub c_lsi: f64,
    pub eta_step: f64,
    pub t_steps: u64,
    pub delta_inner: f64,
    pub renyi_order: f64,
    pub warnings: Vec<String>,
}

/// Constant knobs of the step-size and step-count derivations.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EmKnobs {
    pub c_eta: f64,
    pub c_t: f64,
}

impl Default for EmKnobs {
    fn default() -> Self {
        EmKnobs {
            c_eta: 1.0,
            c_t: 1.0,
        }
    }
}

/// Pick the largest inverse temperature whose log-Sobolev privacy bound
/// fits the budget, with the regularizer weight tied to it as
/// mu = d / (D^2 beta), then derive the step size and step count.
pub fn choose_em_params(
    epsilon: f64,
    delta: f64,
    lipschitz: f64,
    diameter: f64,
    n: usize,
    d: usize,
    knobs: EmKnobs,
) -> Result<EMConfig, ExpMechError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(ExpMechError::InvalidParameter(format!(
            "epsilon must lie in (0, 1], got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta < 0.5) {
        return Err(ExpMechError::InvalidParameter(format!(
            "delta must lie in (0, 1/2), got {delta}"
        )));
    }
    if !(lipschitz > 0.0 && diameter > 0.0) || n == 0 || d == 0 {
        return Err(ExpMechError::InvalidParameter(
            "lipschitz, diameter, n, d must all be positive".into(),
        ));
    }
    let d_f = d as f64;
    let mu_of = |beta: f64| d_f / (diameter * diameter * beta);
    // Note beta * mu = d / D^2 independent of beta, so the bound is
    // strictly increasing in beta and the largest feasible value is found
    // by bisection.
    let bound_of = |beta: f64| -> Option<f64> {
        let c = stroock_clsi(beta, mu_of(beta), lipschitz, diameter).ok()?;
        lsi_dp_epsilon(lipschitz, beta, n, c, delta).ok()
    };
    let beta_floor = 1e-12;
    match bound_of(beta_floor) {
        Some(b) if b <= epsilon => {}
        _ => return Err(ExpMechError::ParamsInfeasible),
    }
    let beta_cap = crate::privacy::MAX_CLSI_EXPONENT / (lipschitz * diameter);
    let beta = if bound_of(beta_cap).is_some_and(|b| b <= epsilon) {
        beta_cap
    } else {
        let mut lo = beta_floor;
        let mut hi = beta_cap;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            match bound_of(mid) {
                Some(b) if b <= epsilon => lo = mid,
                _ => hi = mid,
            }
        }
        lo
    };
    let mu = mu_of(beta);
    let c_lsi = stroock_clsi(beta, mu, lipschitz, diameter)?;

    let mut warnings = Vec::new();
    if beta * lipschitz * diameter <= d_f {
        warnings.push(format!(
            "beta*G*D = {} is not above d = {d_f}: the utility bound's \
             precondition fails, privacy is unaffected",
            beta * lipschitz * diameter
        ));
    }

    // Effective Lipschitz constant of the potential on the domain.
    let l_pot = beta * (lipschitz + mu * diameter / 2.0);
    let q = 1.0;
    let eta_for = |delta_inner: f64| knobs.c_eta / (l_pot * l_pot * (1.0 / delta_inner).ln());
    // ln(exp(q beta G D) / delta^2) evaluated in log space.
    let log_term = q * beta * lipschitz * diameter + 2.0 * (1.0 / delta).ln();
    let t_for = |eta: f64| (knobs.c_t * (c_lsi / eta) * log_term).ceil().max(1.0);
    // The inner accuracy splits delta over the steps, and the step size
    // depends on the inner accuracy; one refinement pass settles the
    // logarithmic circular dependence.
    let eta0 = eta_for(delta / 2.0);
    let t0 = t_for(eta0);
    let delta_inner = delta / (2.0 * t0);
    let eta = eta_for(delta_inner);
    let t_steps_f = t_for(eta);
    let t_steps = if t_steps_f >= u64::MAX as f64 {
        u64::MAX
    } else {
        t_steps_f as u64
    };

    Ok(EMConfig {
        beta,
        mu,
        c_lsi,
        eta_step: eta,
        t_steps,
        delta_inner,
        renyi_order: q,
        warnings,
    })
}

/// Draw from the density proportional to
/// exp(-potential(x) - ||x - y||^2 / (2 eta)) restricted to the domain.
///
/// Exact rejection scheme: propose from the Gaussian centered at y,
/// discard proposals outside the domain or beyond the effective support
/// radius 6 sqrt(eta d), and accept with probability
/// exp(-(potential(x) - L_y)) where L_y lower-bounds the potential on the
/// support.  The contract requires eta of order at most
/// 1 / (L^2 ln(1/delta_inner)) for the acceptance rate to stay away from
/// zero; violations surface as [`ExpMechError::RejectionStall`].
pub fn restricted_gaussian_sample(
    target: &Target<'_>,
    y: &[f64],
    eta: f64,
    _delta_inner: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, u64), ExpMechError> {
    if !(eta > 0.0) {
        return Err(ExpMechError::InvalidParameter(format!(
            "eta must be positive, got {eta}"
        )));
    }
    let d = y.len();
    let sd = eta.sqrt();
    let r_eff = 6.0 * (eta * d as f64).sqrt();
    let anchor = target.domain.project(y);
    let lower_bound =
        target.potential(&anchor) - target.lipschitz * (r_eff + linalg::dist(y, &anchor));

    let mut attempts = 0u64;
    while attempts < MAX_REJECTION_ATTEMPTS {
        attempts += 1;
        let x: Vec<f64> = y
            .iter()
            .map(|&yi| {
                let z: f64 = StandardNormal.sample(rng);
                yi + sd * z
            })
            .collect();
        if !target.domain.contains(&x) || linalg::dist(&x, y) > r_eff {
            continue;
        }
        let gap = target.potential(&x) - lower_bound;
        debug_assert!(gap >= -1e-9, "potential fell below its lower bound");
        let u: f64 = rng.random();
        if u < (-gap).exp() {
            return Ok((x, attempts));
        }
    }
    Err(ExpMechError::RejectionStall {
        attempts,
        accept_estimate: 1.0 / attempts as f64,
    })
}

/// Per-chain diagnostics of [`alternate_sample`].
#[derive(Debug, Clone, Serialize)]
pub struct ChainDiagnostics {
    /// Rejection attempts per inner call.
    pub attempts: Vec<u64>,
    pub total_attempts: u64,
    /// Steps divided by total attempts.
    pub accept_rate: f64,
}

/// Alternate a forward Gaussian step with the restricted inner draw for
/// `t_steps` rounds and return the final point.
pub fn alternate_sample(
    target: &Target<'_>,
    x0: &[f64],
    config: &EMConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, ChainDiagnostics), ExpMechError> {
    alternate_sample_traced(target, x0, config, rng, |_, _| {})
}

/// [`alternate_sample`] with a per-step observer, used by convergence
/// tests that need intermediate states.
pub fn alternate_sample_traced(
    target: &Target<'_>,
    x0: &[f64],
    config: &EMConfig,
    rng: &mut ChaCha8Rng,
    mut observe: impl FnMut(u64, &[f64]),
) -> Result<(Vec<f64>, ChainDiagnostics), ExpMechError> {
    if !target.domain.contains(x0) {
        return Err(ExpMechError::InvalidParameter(
            "initial point lies outside the domain".into(),
        ));
    }
    let sd = config.eta_step.sqrt();
    let mut x = x0.to_vec();
    let mut attempts = Vec::with_capacity(config.t_steps as usize);
    for t in 0..config.t_steps {
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| {
                let z: f64 = StandardNormal.sample(rng);
                xi + sd * z
            })
            .collect();
        let (next, att) =
            restricted_gaussian_sample(target, &y, config.eta_step, config.delta_inner, rng)?;
        x = next;
        attempts.push(att);
        observe(t + 1, &x);
    }
    let total_attempts: u64 = attempts.iter().sum();
    let accept_rate = if total_attempts == 0 {
        1.0
    } else {
        config.t_steps as f64 / total_attempts as f64
    };
    Ok((
        x,
        ChainDiagnostics {
            attempts,
            total_attempts,
            accept_rate,
        },
    ))
}

/// One recorded alternation step.
#[derive(Debug, Clone, Serialize)]
pub struct ChainStep {
    pub t: u64,
    pub x: Vec<f64>,
    pub attempts: u64,
}

/// [`alternate_sample`] that also records every intermediate state.
pub fn run_chain_with_trace(
    target: &Target<'_>,
    x0: &[f64],
    config: &EMConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ChainStep>, ChainDiagnostics), ExpMechError> {
    let mut states: Vec<(u64, Vec<f64>)> = Vec::with_capacity(config.t_steps as usize);
    let (_, diag) = alternate_sample_traced(target, x0, config, rng, |t, x| {
        states.push((t, x.to_vec()));
    })?;
    let steps = states
        .into_iter()
        .zip(diag.attempts.iter())
        .map(|((t, x), &attempts)| ChainStep { t, x, attempts })
        .collect();
    Ok((steps, diag))
}

/// Per-chain diagnostics CSV: one row per step with the running
/// acceptance rate and the coordinates.
pub fn chain_steps_csv(chain_id: u64, steps: &[ChainStep]) -> String {
    let dim = steps.first().map(|s| s.x.len()).unwrap_or(0);
    let coord_header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    let mut out = format!("chain_id,t,accept_rate,{}\n", coord_header.join(","));
    let mut attempts_so_far = 0u64;
    for s in steps {
        attempts_so_far += s.attempts;
        let rate = s.t as f64 / attempts_so_far as f64;
        let coords: Vec<String> = s.x.iter().map(|v| format!("{v}")).collect();
        out.push_str(&format!(
            "{chain_id},{},{rate},{}\n",
            s.t,
            coords.join(",")
        ));
    }
    out
}

/// Draw the chain start from the density proportional to
/// exp(-beta mu ||x||^2 / 2) restricted to the domain.
pub fn sample_initial_point(
    beta: f64,
    mu: f64,
    d: usize,
    domain: Domain,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, ExpMechError> {
    if !(beta > 0.0 && mu > 0.0) {
        return Err(ExpMechError::InvalidParameter(
            "beta and mu must be positive".into(),
        ));
    }
    let sd = 1.0 / (beta * mu).sqrt();
    for _ in 0..MAX_REJECTION_ATTEMPTS {
        let x: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            })
            .collect();
        if domain.contains(&x) {
            return Ok(x);
        }
    }
    Err(ExpMechError::RejectionStall {
        attempts: MAX_REJECTION_ATTEMPTS,
        accept_estimate: 0.0,
    })
}

/// Mean excess of the samples over the domain minimum of the regularized
/// empirical objective, plus the population excess when the dimension
/// admits a grid search (d <= 2).  For larger d the best sample stands in
/// for the reference and only the empirical figure is reported.
pub fn em_excess_risk_report(
    samples: &[Vec<f64>],
    problem: &Problem,
    dataset: &Dataset,
    radius: f64,
    mu: f64,
) -> Result<ExcessReport, ExpMechError> {
    if samples.is_empty() {
        return Err(ExpMechError::InvalidParameter("no samples".into()));
    }
    let regularized = |x: &[f64]| {
        evaluate(problem, dataset, None, x, false).unwrap().value + 0.5 * mu * linalg::norm_sq(x)
    };
    let mean_reg: f64 =
        samples.iter().map(|x| regularized(x)).sum::<f64>() / samples.len() as f64;
    let points_per_axis = if problem.dim == 1 { 4001 } else { 401 };
    match grid_search_minimum(problem.dim, radius, points_per_axis, &regularized) {
        Some((_, reg_min)) => {
            let mean_pop: f64 = samples
                .iter()
                .map(|x| problem.population_value(x))
                .sum::<f64>()
                / samples.len() as f64;
            let (_, pop_min) =
                grid_search_minimum(problem.dim, radius, points_per_axis, |x| {
                    problem.population_value(x)
                })
                .expect("same dimension as above");
            Ok(ExcessReport {
                empirical_excess: mean_reg - reg_min,
                population_excess: Some(mean_pop - pop_min),
                reference: GridReference::GridSearch,
            })
        }
        None => {
            let best = samples
                .iter()
                .map(|x| regularized(x))
                .fold(f64::INFINITY, f64::min);
            Ok(ExcessReport {
                empirical_excess: mean_reg - best,
                population_excess: None,
                reference: GridReference::BestCandidate,
            })
        }
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

    /// Composite Simpson quadrature on [a, b] with an even panel count.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        assert!(panels % 2 == 0);
        let h = (b - a) / panels as f64;
        let mut acc = f(a) + f(b);
        for k in 1..panels {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + k as f64 * h);
        }
        acc * h / 3.0
    }

    /// Total variation between a sample histogram and a 1-d density known
    /// up to normalization, binned over [-radius, radius].
    fn tv_against_density(
        samples: &[f64],
        unnorm: impl Fn(f64) -> f64 + Copy,
        radius: f64,
        bins: usize,
    ) -> f64 {
        let z = simpson(unnorm, -radius, radius, 2000);
        let width = 2.0 * radius / bins as f64;
        let mut tv = 0.0;
        for b in 0..bins {
            let lo = -radius + b as f64 * width;
            let hi = lo + width;
            let p = simpson(unnorm, lo, hi, 10) / z;
            let count = samples.iter().filter(|&&x| x >= lo && x < hi).count();
            let q = count as f64 / samples.len() as f64;
            tv += (p - q).abs();
        }
        0.5 * tv
    }

    #[test]
    fn zero_potential_unbounded_is_plain_gaussian() {
        let target = Target::new(|_| 0.0, Domain::Unbounded, 0.0);
        let eta = 0.3;
        let y = vec![1.5, -0.5];
        let mut r = rng(1);
        let n = 50_000;
        let mut mean = vec![0.0, 0.0];
        let mut second = vec![0.0, 0.0];
        for _ in 0..n {
            let (x, att) = restricted_gaussian_sample(&target, &y, eta, 1e-6, &mut r).unwrap();
            assert_eq!(att, 1, "zero potential must accept immediately");
            for i in 0..2 {
                mean[i] += x[i] / n as f64;
                second[i] += (x[i] - y[i]) * (x[i] - y[i]) / n as f64;
            }
        }
        let se = (eta / n as f64).sqrt();
        for i in 0..2 {
            assert!((mean[i] - y[i]).abs() < 5.0 * se);
            assert!((second[i] - eta).abs() < 0.01);
        }
    }

    #[test]
    fn restricted_draw_histogram_matches_quadrature() {
        // d = 1 quadratic potential: the inner draw's law is proportional
        // to exp(-pot(x) - (x - y)^2 / (2 eta)) on the ball.
        let beta = 2.0;
        let radius = 1.0;
        let target = Target::new(
            move |x: &[f64]| 0.5 * beta * x[0] * x[0],
            Domain::Ball { radius },
            beta * radius,
        );
        let eta = 0.2;
        let y = vec![0.4];
        let mut r = rng(2);
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                restricted_gaussian_sample(&target, &y, eta, 1e-6, &mut r).unwrap().0[0]
            })
            .collect();
        let unnorm =
            move |x: f64| (-0.5 * beta * x * x - (x - 0.4) * (x - 0.4) / (2.0 * eta)).exp();
        let tv = tv_against_density(&samples, unnorm, radius, 80);
        assert!(tv <= 0.05, "TV {tv} too large");
    }

    #[test]
    fn boundary_center_with_tiny_eta_stays_in_domain() {
        let radius = 1.0;
        let target = Target::new(|_| 0.0, Domain::Ball { radius }, 0.0);
        let y = vec![1.0, 0.0]; // exactly on the boundary
        let mut r = rng(3);
        for _ in 0..2000 {
            let (x, _) = restricted_gaussian_sample(&target, &y, 1e-4, 1e-6, &mut r).unwrap();
            assert!(linalg::norm(&x) <= radius + 1e-12);
        }
    }

    #[test]
    fn stall_is_detected_for_hopeless_geometry() {
        // Center far outside the ball with a tiny step: proposals never
        // land inside.
        let target = Target::new(|_| 0.0, Domain::Ball { radius: 0.5 }, 0.0);
        let y = vec![50.0];
        let err = restricted_gaussian_sample(&target, &y, 1e-4, 1e-6, &mut rng(4));
        assert!(matches!(err, Err(ExpMechError::RejectionStall { .. })));
    }

    #[test]
    fn alternate_sample_zero_steps_returns_start() {
        let target = Target::new(|_| 0.0, Domain::Unbounded, 0.0);
        let cfg = EMConfig {
            beta: 1.0,
            mu: 1.0,
            c_lsi: 1.0,
            eta_step: 0.1,
            t_steps: 0,
            delta_inner: 1e-6,
            renyi_order: 1.0,
            warnings: Vec::new(),
        };
        let (x, diag) = alternate_sample(&target, &[0.7, -0.1], &cfg, &mut rng(5)).unwrap();
        assert_eq!(x, vec![0.7, -0.1]);
        assert_eq!(diag.total_attempts, 0);
    }

    /// Inverse-CDF draw from a 1-d density known up to normalization,
    /// tabulated on a fine grid.  Test-side oracle for stationary starts.
    fn inverse_cdf_sample(
        unnorm: impl Fn(f64) -> f64,
        radius: f64,
        grid: usize,
        u: f64,
    ) -> f64 {
        let h = 2.0 * radius / grid as f64;
        let mut cum = Vec::with_capacity(grid + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for k in 0..grid {
            let a = -radius + k as f64 * h;
            acc += 0.5 * (unnorm(a) + unnorm(a + h)) * h;
            cum.push(acc);
        }
        let target = u * acc;
        let idx = cum.partition_point(|&c| c < target).max(1);
        let (c0, c1) = (cum[idx - 1], cum[idx]);
        let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.5 };
        -radius + (idx - 1) as f64 * h + frac * h
    }

    #[test]
    fn alternate_sample_matches_gaussian_moments() {
        // Standard Gaussian potential on a wide ball.  Chains start from
        // the prescribed initial law, which here equals the target, so the
        // final moments check that the step preserves its stationary law.
        let radius = 4.0;
        let target = Target::new(
            |x: &[f64]| 0.5 * x[0] * x[0],
            Domain::Ball { radius },
            radius,
        );
        let cfg = EMConfig {
            beta: 1.0,
            mu: 1.0,
            c_lsi: 1.0,
            eta_step: 0.03,
            t_steps: 16,
            delta_inner: 1e-6,
            renyi_order: 1.0,
            warnings: Vec::new(),
        };
        let chains = 4000;
        let mut r = rng(6);
        let mut xs = Vec::with_capacity(chains);
        for _ in 0..chains {
            let x0 = sample_initial_point(1.0, 1.0, 1, target.domain, &mut r).unwrap();
            let (x, _) = alternate_sample(&target, &x0, &cfg, &mut r).unwrap();
            xs.push(x[0]);
        }
        let mean: f64 = xs.iter().sum::<f64>() / chains as f64;
        let var: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / chains as f64;
        assert!(mean.abs() < 0.06, "mean {mean}");
        assert!((var - 1.0).abs() < 0.09, "variance {var}");
    }

    #[test]
    fn double_well_stationary_law_is_preserved() {
        // Chains start from the target law (inverse-CDF oracle); after
        // several alternation rounds the law must still match quadrature.
        let beta = 6.0;
        let radius = 2.0;
        let pot = move |x: &[f64]| {
            let q = x[0] * x[0] - 1.0;
            beta * 0.25 * q * q
        };
        // max |pot'| = beta |x^3 - x| at the boundary.
        let lip = beta * 6.0;
        let target = Target::new(pot, Domain::Ball { radius }, lip);
        let cfg = EMConfig {
            beta,
            mu: 0.0,
            c_lsi: 1.0,
            eta_step: 1.3e-4,
            t_steps: 8,
            delta_inner: 1e-6,
            renyi_order: 1.0,
            warnings: Vec::new(),
        };
        let unnorm = move |x: f64| {
            let q = x * x - 1.0;
            (-(beta * 0.25 * q * q)).exp()
        };
        let chains = 8000;
        let mut r = rng(7);
        let mut samples = Vec::with_capacity(chains);
        for _ in 0..chains {
            let u: f64 = r.random();
            let x0 = vec![inverse_cdf_sample(unnorm, radius, 4000, u)];
            let (x, _) = alternate_sample(&target, &x0, &cfg, &mut r).unwrap();
            samples.push(x[0]);
        }
        let tv = tv_against_density(&samples, unnorm, radius, 40);
        assert!(tv <= 0.05, "TV {tv} too large");
    }

    #[test]
    fn chosen_params_respect_privacy_bound() {
        let cfg = choose_em_params(0.4, 1e-6, 1.0, 2.0, 50_000, 3, EmKnobs::default()).unwrap();
        let bound =
            lsi_dp_epsilon(1.0, cfg.beta, 50_000, cfg.c_lsi, 1e-6).unwrap();
        assert!(bound <= 0.4 + 1e-12);
        // mu = d / (D^2 beta)
        assert!((cfg.mu - 3.0 / (4.0 * cfg.beta)).abs() < 1e-12);
        // Largest feasible: nudging beta up breaks the bound (unless the
        // overflow cap binds first).
        let mu_up = 3.0 / (4.0 * (cfg.beta * 1.01));
        if let Ok(c_up) = stroock_clsi(cfg.beta * 1.01, mu_up, 1.0, 2.0) {
            let up = lsi_dp_epsilon(1.0, cfg.beta * 1.01, 50_000, c_up, 1e-6).unwrap();
            assert!(up > 0.4);
        }
    }

    #[test]
    fn chosen_beta_grows_with_n() {
        let a = choose_em_params(0.3, 1e-6, 1.0, 2.0, 10_000, 2, EmKnobs::default()).unwrap();
        let b = choose_em_params(0.3, 1e-6, 1.0, 2.0, 40_000, 2, EmKnobs::default()).unwrap();
        assert!(b.beta > a.beta);
    }

    #[test]
    fn infeasible_budget_is_reported() {
        // A budget below what even the beta floor costs cannot be met.
        let err = choose_em_params(1e-12, 1e-6, 10.0, 10.0, 1, 5, EmKnobs::default());
        assert!(matches!(err, Err(ExpMechError::ParamsInfeasible)));
    }

    #[test]
    fn chain_trace_csv_shape() {
        let target = Target::new(|x: &[f64]| 0.5 * x[0] * x[0], Domain::Unbounded, 1.0);
        let cfg = EMConfig {
            beta: 1.0,
            mu: 1.0,
            c_lsi: 1.0,
            eta_step: 0.05,
            t_steps: 5,
            delta_inner: 1e-6,
            renyi_order: 1.0,
            warnings: Vec::new(),
        };
        let (steps, diag) = run_chain_with_trace(&target, &[0.2], &cfg, &mut rng(9)).unwrap();
        assert_eq!(steps.len(), 5);
        assert_eq!(diag.attempts.len(), 5);
        let csv = chain_steps_csv(3, &steps);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "chain_id,t,accept_rate,x0");
        assert_eq!(lines.count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("3,1,"));
    }

    #[test]
    fn population_excess_tracks_empirical_on_the_quadratic() {
        // Monte Carlo relation between the two reported excesses: with a
        // light regularizer and a big dataset the two figures agree up to
        // sampling error, so the population figure cannot sit more than
        // four standard errors below the empirical one.
        let p = make_problem(ProblemKind::Quadratic, 1, 0.2, 31).unwrap();
        let ds = p.sample_dataset(20_000);
        let mu = 0.01;
        let radius = 1.0;
        let spec = problem_constants(&p, 2.0 * radius);
        let target =
            Target::regularized_empirical(&p, &ds, 5.0, mu, 2.0 * radius, spec.lipschitz);
        let cfg = EMConfig {
            beta: 5.0,
            mu,
            c_lsi: 1.0,
            eta_step: 0.002,
            t_steps: 12,
            delta_inner: 1e-6,
            renyi_order: 1.0,
            warnings: Vec::new(),
        };
        let mut r = rng(41);
        let chains = 200;
        let mut samples = Vec::with_capacity(chains);
        for _ in 0..chains {
            let x0 = sample_initial_point(5.0, mu, 1, target.domain, &mut r).unwrap();
            let (x, _) = alternate_sample(&target, &x0, &cfg, &mut r).unwrap();
            samples.push(x);
        }
        let rep = em_excess_risk_report(&samples, &p, &ds, radius, mu).unwrap();
        let pop_vals: Vec<f64> = samples.iter().map(|x| p.population_value(x)).collect();
        let mean = pop_vals.iter().sum::<f64>() / chains as f64;
        let var =
            pop_vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / chains as f64;
        let se = (var / chains as f64).sqrt();
        assert!(
            rep.population_excess.unwrap() >= rep.empirical_excess - 4.0 * se - 1e-3,
            "population {} vs empirical {} (se {se})",
            rep.population_excess.unwrap(),
            rep.empirical_excess
        );
    }

    #[test]
    fn excess_report_zero_at_minimizer() {
        let p = make_problem(ProblemKind::Quadratic, 1, 0.0, 1).unwrap();
        let ds = p.sample_dataset(8);
        let samples = vec![vec![0.0]];
        let rep = em_excess_risk_report(&samples, &p, &ds, 1.0, 0.5).unwrap();
        assert!(rep.empirical_excess.abs() < 1e-9);
        assert!(rep.population_excess.unwrap().abs() < 1e-9);
    }

    #[test]
    fn gibbs_mean_excess_obeys_utility_bound() {
        // d = 1 double well at beta = 20: the quadrature Gibbs mean of the
        // regularized objective must sit within (d/beta) ln(beta G D / d)
        // of the minimum, knob constant 3.
        let p = make_problem(ProblemKind::DoubleWell, 1, 0.1, 42).unwrap();
        let ds = p.sample_dataset(64);
        let radius = 1.0;
        let spec = problem_constants(&p, 2.0 * radius);
        let beta = 20.0;
        let mu = 0.05;
        let reg = |x: f64| {
            evaluate(&p, &ds, None, &[x], false).unwrap().value + 0.5 * mu * x * x
        };
        let unnorm = |x: f64| (-beta * reg(x)).exp();
        let z = simpson(unnorm, -radius, radius, 4000);
        let mean_value = simpson(|x| reg(x) * unnorm(x), -radius, radius, 4000) / z;
        let (_, reg_min) = grid_search_minimum(1, radius, 8001, |x| reg(x[0])).unwrap();
        let excess = mean_value - reg_min;
        let bound = 3.0 / beta
            * (beta * spec.lipschitz * spec.diameter / 1.0).ln();
        assert!(beta * spec.lipschitz * spec.diameter > 1.0);
        assert!(
            excess >= 0.0 && excess <= bound,
            "excess {excess} vs bound {bound}"
        );
    }

    #[test]
    fn neighboring_datasets_have_close_gibbs_means() {
        // Desk-scale stability: quadrature means of two neighboring
        // datasets differ by at most 5 G exp(beta G D) / (n mu).
        let p = make_problem(ProblemKind::Quadratic, 1, 0.5, 9).unwrap();
        let n = 50;
        let ds = p.sample_dataset(n);
        // Neighbor: flip the last sample.
        let mut buf = Vec::new();
        ds.write_csv(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(|s| s.to_string()).collect();
        let last = lines.last_mut().unwrap();
        *last = format!("{}", -last.parse::<f64>().unwrap());
        let joined = lines.join("\n");
        let (ds2, _) = Dataset::read_csv(&mut joined.as_bytes()).unwrap();

        let radius = 1.0;
        let spec = problem_constants(&p, 2.0 * radius);
        let beta = 1.0;
        let mu = 1.0;
        let mean_of = |data: &Dataset| {
            let reg = |x: f64| {
                evaluate(&p, data, None, &[x], false).unwrap().value + 0.5 * mu * x * x
            };
            let unnorm = |x: f64| (-beta * reg(x)).exp();
            let z = simpson(&unnorm, -radius, radius, 4000);
            simpson(|x| x * unnorm(x), -radius, radius, 4000) / z
        };
        let gap = (mean_of(&ds) - mean_of(&ds2)).abs();
        let bound = 5.0 * spec.lipschitz * (beta * spec.lipschitz * spec.diameter).exp()
            / (n as f64 * mu);
        assert!(gap <= bound, "gap {gap} vs bound {bound}");
    }
}
