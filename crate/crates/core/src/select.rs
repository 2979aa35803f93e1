//! Private candidate selection and stationarity certification.
//!
//! [`above_threshold`] scans an ordered candidate list with a pair of
//! noisy tests (gradient norm small, smallest Hessian eigenvalue not too
//! negative) and halts on the first pass.  The two thresholds are drawn
//! once per invocation; each candidate draws fresh comparison noise.  The
//! whole scan costs a single (epsilon, 0) ledger charge regardless of how
//! many candidates are inspected.
//!
//! Certification against the definition of an approximate second-order
//! stationary point is non-private and exact.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::objective::ObjectiveSpec;
use crate::privacy::{sample_laplace, Budget, Ledger, PrivacyError};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("matrix must be square and nonempty")]
    NotSquare,
    #[error("matrix contains a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

/// Dimension up to which the dense eigensolver is used.
pub const DENSE_EIGEN_LIMIT: usize = 512;

/// Relative tolerance of the shifted power iteration.
const POWER_TOL: f64 = 1e-8;

/// Smallest eigenvalue of a symmetric matrix.  Inputs are symmetrized by
/// averaging; dimensions up to [`DENSE_EIGEN_LIMIT`] use a cyclic Jacobi
/// sweep, larger ones a shifted power iteration on (shift*I - H).
pub fn smallest_eigenvalue(h: &[Vec<f64>]) -> Result<f64, SelectError> {
    let n = h.len();
    if n == 0 || h.iter().any(|row| row.len() != n) {
        return Err(SelectError::NotSquare);
    }
    for (i, row) in h.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(SelectError::NonFinite(i, j));
            }
        }
    }
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = 0.5 * (h[i][j] + h[j][i]);
        }
    }
    if n <= DENSE_EIGEN_LIMIT {
        Ok(jacobi_smallest(a))
    } else {
        Ok(power_iteration_smallest(&a))
    }
}

fn jacobi_smallest(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    if n == 1 {
        return a[0][0];
    }
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).fold(f64::INFINITY, f64::min)
}

fn power_iteration_smallest(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    // Gershgorin upper bound on the largest eigenvalue.
    let shift = (0..n)
        .map(|i| {
            a[i][i]
                + (0..n)
                    .filter(|&j| j != i)
                    .map(|j| a[i][j].abs())
                    .sum::<f64>()
        })
        .fold(f64::MIN, f64::max);
    let apply = |v: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| shift * v[i] - linalg::dot(&a[i], v))
            .collect()
    };
    // Deterministic non-degenerate start.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    let nv = linalg::norm(&v);
    for x in v.iter_mut() {
        *x /= nv;
    }
    let mut rayleigh = 0.0;
    for _ in 0..200_000 {
        let w = apply(&v);
        let new_rayleigh = linalg::dot(&v, &w);
        let wn = linalg::norm(&w);
        if wn <= 1e-300 {
            rayleigh = new_rayleigh;
            break;
        }
        let done = (new_rayleigh - rayleigh).abs() <= POWER_TOL * new_rayleigh.abs().max(1.0);
        rayleigh = new_rayleigh;
        v = w.into_iter().map(|x| x / wn).collect();
        if done {
            break;
        }
    }
    shift - rayleigh
}

/// Certificate of a point against the stationarity definition.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SOSPReport {
    pub grad_norm: f64,
    pub smin: f64,
    pub alpha: f64,
    pub rho: f64,
    pub is_fosp: bool,
    pub is_sosp: bool,
}

/// First/second-order stationarity flags, boundary inclusive:
/// first-order iff ||grad|| <= alpha, second-order additionally requires
/// smin >= -sqrt(rho * alpha).
pub fn certify_sosp(grad: &[f64], hess_smin: f64, alpha: f64, rho: f64) -> SOSPReport {
    let grad_norm = linalg::norm(grad);
    let is_fosp = grad_norm <= alpha;
    let is_sosp = is_fosp && hess_smin >= -(rho * alpha).sqrt();
    SOSPReport {
        grad_norm,
        smin: hess_smin,
        alpha,
        rho,
        is_fosp,
        is_sosp,
    }
}

/// Parameters of one selector invocation.
#[derive(Debug, Clone, Copy)]
pub struct AboveThresholdParams {
    pub alpha: f64,
    pub epsilon: f64,
    pub omega: f64,
    /// Size of the dataset the candidate statistics are computed on.
    pub n: usize,
    /// Test mode: noise scales forced to zero, margins kept.
    pub noise_disabled: bool,
}

/// Per-candidate decision record.
#[derive(Debug, Clone, Serialize)]
pub struct CandidateDecision {
    pub index: usize,
    pub noisy_grad: f64,
    pub noisy_smin: f64,
    pub passed: bool,
}

/// Audit log of one invocation.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionLog {
    pub t_hat1: f64,
    pub t_hat2: f64,
    pub margin_grad: f64,
    pub margin_smin: f64,
    pub decisions: Vec<CandidateDecision>,
    pub halted_at: Option<usize>,
}

/// Scan candidates in order and return the first one passing both noisy
/// stationarity tests, or `None`.  `stats` must return the exact
/// (gradient norm, smallest Hessian eigenvalue) of the dataset risk at the
/// given point; it is invoked only until the scan halts.
pub fn above_threshold<F>(
    points: &[Vec<f64>],
    mut stats: F,
    spec: &ObjectiveSpec,
    params: &AboveThresholdParams,
    ledger: &mut Ledger,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<(usize, Vec<f64>)>, SelectionLog), SelectError>
where
    F: FnMut(&[f64]) -> (f64, f64),
{
    if !(params.epsilon > 0.0) {
        return Err(SelectError::InvalidParameter(format!(
            "epsilon must be positive, got {}",
            params.epsilon
        )));
    }
    if params.n == 0 {
        return Err(SelectError::InvalidParameter("dataset is empty".into()));
    }
    if !(params.omega > 0.0 && params.omega < 1.0) {
        return Err(SelectError::InvalidParameter(format!(
            "omega must lie in (0, 1), got {}",
            params.omega
        )));
    }
    // One charge per invocation, before any data-dependent work.
    ledger.charge(
        "above_threshold",
        Budget {
            epsilon: params.epsilon,
            delta: 0.0,
        },
    )?;

    let n_eps = params.n as f64 * params.epsilon;
    let g = spec.lipschitz;
    let m = spec.smooth;
    let t = points.len().max(1) as f64;
    let log_factor = (2.0 * t / params.omega).ln();
    let margin_grad = 16.0 * log_factor * g / n_eps;
    let margin_smin = 16.0 * log_factor * m / n_eps;
    let noise = |scale: f64, rng: &mut ChaCha8Rng| {
        if params.noise_disabled {
            0.0
        } else {
            sample_laplace(scale, rng)
        }
    };

    let t_hat1 = params.alpha + noise(4.0 * g / n_eps, rng) + margin_grad;
    let t_hat2 = -(spec.hessian_lipschitz * params.alpha).sqrt() + noise(4.0 * m / n_eps, rng)
        - margin_smin;

    let mut log = SelectionLog {
        t_hat1,
        t_hat2,
        margin_grad,
        margin_smin,
        decisions: Vec::new(),
        halted_at: None,
    };

    for (i, point) in points.iter().enumerate() {
        let (grad_norm, smin) = stats(point);
        let noisy_grad = grad_norm + noise(8.0 * g / n_eps, rng);
        let noisy_smin = smin + noise(8.0 * m / n_eps, rng);
        let passed = noisy_grad <= t_hat1 && noisy_smin >= t_hat2;
        log.decisions.push(CandidateDecision {
            index: i,
            noisy_grad,
            noisy_smin,
            passed,
        });
        if passed {
            log.halted_at = Some(i);
            return Ok((Some((i, point.clone())), log));
        }
    }
    Ok((None, log))
}

/// High-probability deviation bounds between subset and population
/// statistics for a set of m samples:
/// (c_g G ln(d/omega) / sqrt(m), c_h M ln(d/omega) / sqrt(m)).
pub fn population_deviation_bound(
    m: usize,
    spec: &ObjectiveSpec,
    omega: f64,
    c_g: f64,
    c_h: f64,
) -> (f64, f64) {
    assert!(m >= 1, "need at least one sample");
    assert!(omega > 0.0 && omega < 1.0, "omega must lie in (0, 1)");
    let log_factor = (spec.dim as f64 / omega).ln();
    let root_m = (m as f64).sqrt();
    (
        c_g * spec.lipschitz * log_factor / root_m,
        c_h * spec.smooth * log_factor / root_m,
    )
}
