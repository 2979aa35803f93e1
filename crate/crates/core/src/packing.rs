//! Grid covering of the domain and the discrete exponential mechanism.
//!
//! Centers are the axis-aligned grid of spacing 2r/sqrt(d) intersected
//! with the centered ball (the origin is always a grid point), so any
//! domain point rounds to a grid point at distance at most r.  Near the
//! boundary the rounded point can fall outside the ball; grid points in
//! the band (R, R + r) are therefore projected onto the sphere and kept.
//! Projection onto the ball is 1-Lipschitz, so the projected center is at
//! most as far from the domain point as the grid point was and the
//! covering radius stays at most r.  The certificate stored on the
//! packing is measured by random probing at build time (d <= 3).
//!
//! Selection selects center p with probability proportional to
//! exp(-eps n (F_D(p) - min F_D) / (2 G D)): the score is the negative
//! empirical risk with sensitivity G D / n, with the standard factor two,
//! and the min-shift is mandatory so weights never underflow en masse.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::objective::{
    evaluate, grid_search_minimum, Dataset, ExcessReport, GridReference, Problem,
};

#[derive(Debug, Error)]
pub enum PackingError {
    #[error("dimension {0} exceeds the packing limit of {MAX_PACKING_DIM}")]
    DimensionTooLarge(usize),
    #[error("radius must lie in (0, D/2], got r = {r} for diameter {diameter}")]
    BadRadius { r: f64, diameter: f64 },
    #[error("center count would exceed the cap of {MAX_CENTERS}")]
    TooManyCenters,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Center-count explosion guard.
pub const MAX_CENTERS: usize = 10_000_000;

/// Covering construction is exponential in the dimension by design; desk
/// scale stops here.
pub const MAX_PACKING_DIM: usize = 4;

/// Probes used for the build-time covering certificate at d <= 3.
const CERT_PROBES: usize = 10_000;

/// A finite center set covering the domain.
#[derive(Debug, Clone, Serialize)]
pub struct Packing {
    pub centers: Vec<Vec<f64>>,
    pub radius: f64,
    /// Largest probe-to-nearest-center distance observed at build time
    /// (d <= 3), or the analytic grid bound r for d = 4.
    pub covering_radius_cert: f64,
    pub dim: usize,
    pub diameter: f64,
}

impl Packing {
    /// Distance from x to the nearest center.
    pub fn nearest_distance(&self, x: &[f64]) -> f64 {
        self.centers
            .iter()
            .map(|c| linalg::dist(c, x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Flat serialization: a header line then one center per line.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(
            w,
            "# d={} diameter={} r={} cert={} count={}",
            self.dim,
            self.diameter,
            self.radius,
            self.covering_radius_cert,
            self.centers.len()
        )?;
        for c in &self.centers {
            let row: Vec<String> = c.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// The radius the risk analysis balances to: D d / (eps n), clamped into
/// the buildable range (0, D/2].
pub fn default_radius(d: usize, diameter: f64, epsilon: f64, n: usize) -> f64 {
    let r = diameter * d as f64 / (epsilon * n as f64);
    r.min(diameter / 2.0).max(diameter * 1e-9)
}

/// Uniform draw from the centered ball by rejection from the cube.
fn uniform_in_ball(dim: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..dim)
            .map(|_| radius * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        if linalg::norm(&x) <= radius {
            return x;
        }
    }
}

/// Empirical covering radius over random probes.
pub fn probe_covering_radius(packing: &Packing, probes: usize, rng: &mut ChaCha8Rng) -> f64 {
    let radius = packing.diameter / 2.0;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let x = uniform_in_ball(packing.dim, radius, rng);
        worst = worst.max(packing.nearest_distance(&x));
    }
    worst
}

/// Build the grid covering.
pub fn build_packing(d: usize, diameter: f64, r: f64) -> Result<Packing, PackingError> {
    if d == 0 || d > MAX_PACKING_DIM {
        return Err(PackingError::DimensionTooLarge(d));
    }
    if !(diameter > 0.0) {
        return Err(PackingError::InvalidParameter(format!(
            "diameter must be positive, got {diameter}"
        )));
    }
    let radius = diameter / 2.0;
    if !(r > 0.0 && r <= radius) {
        return Err(PackingError::BadRadius { r, diameter });
    }
    let spacing = 2.0 * r / (d as f64).sqrt();
    let k_max = ((radius + r) / spacing + 1e-9).floor() as i64;
    let axis_count = (2 * k_max + 1) as f64;
    if axis_count.powi(d as i32) > MAX_CENTERS as f64 {
        return Err(PackingError::TooManyCenters);
    }

    let mut centers = Vec::new();
    let mut projected_seen = std::collections::HashSet::new();
    let mut index = vec![-k_max; d];
    let tol = 1e-9 * (1.0 + radius * radius);
    'outer: loop {
        let candidate: Vec<f64> = index.iter().map(|&k| k as f64 * spacing).collect();
        let norm_sq = linalg::norm_sq(&candidate);
        if norm_sq <= radius * radius + tol {
            centers.push(candidate);
        } else if norm_sq < (radius + r) * (radius + r) {
            // Boundary band: a domain point may round here, so keep the
            // projection onto the sphere (deduplicated bit-exactly).
            let norm = norm_sq.sqrt();
            let projected: Vec<f64> = candidate.iter().map(|v| v * radius / norm).collect();
            let key: Vec<u64> = projected.iter().map(|v| v.to_bits()).collect();
            if projected_seen.insert(key) {
                centers.push(projected);
            }
        }
        // Odometer increment over the grid indices.
        for slot in 0..d {
            index[slot] += 1;
            if index[slot] <= k_max {
                continue 'outer;
            }
            index[slot] = -k_max;
        }
        break;
    }
    if centers.len() > MAX_CENTERS {
        return Err(PackingError::TooManyCenters);
    }

    let mut packing = Packing {
        centers,
        radius: r,
        covering_radius_cert: r,
        dim: d,
        diameter,
    };
    if d <= 3 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
        packing.covering_radius_cert = probe_covering_radius(&packing, CERT_PROBES, &mut rng);
    }
    Ok(packing)
}

/// Normalized selection weights for score values, with the mandatory
/// min-shift: w_i = exp(-eps n (v_i - min v) / (2 gd)).
pub fn em_weights_from_values(values: &[f64], epsilon: f64, n: usize, gd: f64) -> Vec<f64> {
    assert!(!values.is_empty());
    assert!(gd > 0.0, "score range bound must be positive");
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = values
        .iter()
        .map(|v| (-(epsilon * n as f64 * (v - min)) / (2.0 * gd)).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / z).collect()
}

/// Exact selection probabilities of every center.
pub fn selection_probabilities(
    packing: &Packing,
    problem: &Problem,
    dataset: &Dataset,
    epsilon: f64,
    lipschitz: f64,
    diameter: f64,
) -> Vec<f64> {
    let values: Vec<f64> = packing
        .centers
        .iter()
        .map(|c| evaluate(problem, dataset, None, c, false).unwrap().value)
        .collect();
    em_weights_from_values(&values, epsilon, dataset.len(), lipschitz * diameter)
}

/// Result of one discrete selection.
#[derive(Debug, Clone, Serialize)]
pub struct PackingSelection {
    pub index: usize,
    pub point: Vec<f64>,
    /// Full weight vector, logged for audit when the packing is small.
    pub probabilities: Option<Vec<f64>>,
}

/// One draw of the discrete mechanism over the packing centers.
pub fn discrete_em_select(
    packing: &Packing,
    problem: &Problem,
    dataset: &Dataset,
    epsilon: f64,
    lipschitz: f64,
    diameter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PackingSelection, PackingError> {
    if packing.centers.is_empty() {
        return Err(PackingError::InvalidParameter("empty packing".into()));
    }
    if epsilon < 0.0 {
        return Err(PackingError::InvalidParameter(format!(
            "epsilon must be nonnegative, got {epsilon}"
        )));
    }
    let probs = selection_probabilities(packing, problem, dataset, epsilon, lipschitz, diameter);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut index = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            index = i;
            break;
        }
    }
    let point = packing.centers[index].clone();
    let probabilities = (packing.centers.len() <= 1000).then_some(probs);
    Ok(PackingSelection {
        index,
        point,
        probabilities,
    })
}

/// Excess of the selected point over the domain minimum, empirical and
/// population (grid search, d <= 2).
pub fn packing_risk_report(
    selected: &[f64],
    problem: &Problem,
    dataset: &Dataset,
    radius: f64,
) -> Result<ExcessReport, PackingError> {
    let empirical = |x: &[f64]| evaluate(problem, dataset, None, x, false).unwrap().value;
    let points_per_axis = if problem.dim == 1 { 4001 } else { 401 };
    match grid_search_minimum(problem.dim, radius, points_per_axis, &empirical) {
        Some((_, emp_min)) => {
            let (_, pop_min) = grid_search_minimum(problem.dim, radius, points_per_axis, |x| {
                problem.population_value(x)
            })
            .expect("same dimension");
            Ok(ExcessReport {
                empirical_excess: empirical(selected) - emp_min,
                population_excess: Some(problem.population_value(selected) - pop_min),
                reference: GridReference::GridSearch,
            })
        }
        None => Err(PackingError::InvalidParameter(format!(
            "grid search supports d <= 2, got d = {}",
            problem.dim
        ))),
    }
}
