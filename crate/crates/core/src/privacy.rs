//! Mechanism primitives and composition accounting.
//!
//! Every noise draw in the toolkit is calibrated here and recorded in a
//! [`Ledger`].  The ledger is strict by default: any charge that pushes
//! the summed cost past the target budget aborts the run, which makes
//! accounting bugs loud in tests.  Mechanisms that access the data many
//! times under a single composed guarantee reserve a group entry once and
//! then count accesses against a declared cap.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("parameter out of range: {0}")]
    InvalidParameter(String),
    #[error(
        "advanced composition precondition requires total epsilon <= 0.9, got {0}; \
         split the budget or use basic composition"
    )]
    EpsilonTooLargeForAdvanced(f64),
    #[error(
        "log-Sobolev constant is astronomically large: beta*G*D = {0} exceeds the \
         overflow guard of {MAX_CLSI_EXPONENT}"
    )]
    ClsiOverflow(f64),
    #[error(
        "privacy budget exceeded: charging {label} would bring the total to \
         ({eps_total}, {delta_total}) against target ({eps_target}, {delta_target})"
    )]
    BudgetExceeded {
        label: String,
        eps_total: f64,
        delta_total: f64,
        eps_target: f64,
        delta_target: f64,
    },
    #[error("mechanism {label} exceeded its reserved access count of {max}")]
    AccessOverflow { label: String, max: u64 },
    #[error("unknown ledger group handle")]
    UnknownHandle,
}

/// Exponent cap for the Stroock log-Sobolev bound; beyond this the
/// constant overflows f64 and is reported as a failure instead.
pub const MAX_CLSI_EXPONENT: f64 = 700.0;

/// An (epsilon, delta) privacy budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub epsilon: f64,
    pub delta: f64,
}

impl Budget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self, PrivacyError> {
        if !(epsilon >= 0.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "epsilon must be nonnegative, got {epsilon}"
            )));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(PrivacyError::InvalidParameter(format!(
                "delta must lie in [0, 1], got {delta}"
            )));
        }
        Ok(Budget { epsilon, delta })
    }
}

/// One ledger entry: the declared end-to-end cost of a mechanism (or a
/// composed group of accesses) and how many times it was invoked.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MechanismCost {
    pub label: String,
    pub epsilon: f64,
    pub delta: f64,
    pub count: u64,
}

#[derive(Debug, Clone)]
struct Entry {
    cost: MechanismCost,
    max_accesses: Option<u64>,
}

/// Opaque handle to a reserved group entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupHandle(usize);

/// Ordered cost ledger with a target budget.  Totals follow basic
/// composition: epsilons and deltas of entries add up exactly.
#[derive(Debug, Clone)]
pub struct Ledger {
    target: Budget,
    strict: bool,
    entries: Vec<Entry>,
}

impl Ledger {
    /// Strict ledger: charges beyond the target abort.
    pub fn new(target: Budget) -> Self {
        Ledger {
            target,
            strict: true,
            entries: Vec::new(),
        }
    }

    /// Non-strict ledger for diagnostics; overruns are recorded, not fatal.
    pub fn relaxed(target: Budget) -> Self {
        Ledger {
            target,
            strict: false,
            entries: Vec::new(),
        }
    }

    pub fn target(&self) -> Budget {
        self.target
    }

    /// Sum of declared costs (basic composition).
    pub fn total(&self) -> Budget {
        let epsilon = self.entries.iter().map(|e| e.cost.epsilon).sum();
        let delta = self.entries.iter().map(|e| e.cost.delta).sum();
        Budget { epsilon, delta }
    }

    pub fn entries(&self) -> impl Iterator<Item = &MechanismCost> {
        self.entries.iter().map(|e| &e.cost)
    }

    pub fn within_target(&self) -> bool {
        let t = self.total();
        t.epsilon <= self.target.epsilon + 1e-12 && t.delta <= self.target.delta + 1e-15
    }

    fn check(&self, label: &str) -> Result<(), PrivacyError> {
        if self.strict && !self.within_target() {
            let t = self.total();
            return Err(PrivacyError::BudgetExceeded {
                label: label.to_string(),
                eps_total: t.epsilon,
                delta_total: t.delta,
                eps_target: self.target.epsilon,
                delta_target: self.target.delta,
            });
        }
        Ok(())
    }

    /// Record a one-shot mechanism invocation.
    pub fn charge(&mut self, label: &str, cost: Budget) -> Result<(), PrivacyError> {
        self.entries.push(Entry {
            cost: MechanismCost {
                label: label.to_string(),
                epsilon: cost.epsilon,
                delta: cost.delta,
                count: 1,
            },
            max_accesses: None,
        });
        if let Err(e) = self.check(label) {
            self.entries.pop();
            return Err(e);
        }
        Ok(())
    }

    /// Reserve a composed group: the end-to-end cost is charged once, and
    /// up to `max_accesses` individual accesses may then be counted
    /// against it via [`Ledger::access`].
    pub fn reserve(
        &mut self,
        label: &str,
        cost: Budget,
        max_accesses: u64,
    ) -> Result<GroupHandle, PrivacyError> {
        self.entries.push(Entry {
            cost: MechanismCost {
                label: label.to_string(),
                epsilon: cost.epsilon,
                delta: cost.delta,
                count: 0,
            },
            max_accesses: Some(max_accesses),
        });
        if let Err(e) = self.check(label) {
            self.entries.pop();
            return Err(e);
        }
        Ok(GroupHandle(self.entries.len() - 1))
    }

    /// Count one access against a reserved group.
    pub fn access(&mut self, handle: GroupHandle) -> Result<(), PrivacyError> {
        let entry = self
            .entries
            .get_mut(handle.0)
            .ok_or(PrivacyError::UnknownHandle)?;
        entry.cost.count += 1;
        if let Some(max) = entry.max_accesses {
            if self.strict && entry.cost.count > max {
                return Err(PrivacyError::AccessOverflow {
                    label: entry.cost.label.clone(),
                    max,
                });
            }
        }
        Ok(())
    }

    /// JSON rendering: entries plus totals and target.
    pub fn to_json(&self) -> serde_json::Value {
        let entries: Vec<&MechanismCost> = self.entries().collect();
        serde_json::json!({
            "entries": entries,
            "total": self.total(),
            "target": self.target,
            "within_target": self.within_target(),
        })
    }
}

/// Quantile function of the Laplace distribution with the given scale:
/// sign(u - 1/2) * (-b) * ln(1 - 2|u - 1/2|).
pub fn laplace_inverse_cdf(u: f64, scale: f64) -> Result<f64, PrivacyError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(PrivacyError::InvalidParameter(format!(
            "quantile argument must lie in (0, 1), got {u}"
        )));
    }
    if !(scale > 0.0) {
        return Err(PrivacyError::InvalidParameter(format!(
            "laplace scale must be positive, got {scale}"
        )));
    }
    let c = u - 0.5;
    let sign = if c < 0.0 { -1.0 } else { 1.0 };
    Ok(sign * (-scale) * (1.0 - 2.0 * c.abs()).ln())
}

/// Draw Lap(scale) through the inverse CDF.  A scale of zero is allowed
/// as the noiseless test mode and returns exactly zero.
pub fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    loop {
        let u: f64 = rng.random();
        if u > 0.0 && u < 1.0 {
            return laplace_inverse_cdf(u, scale).expect("scale checked above");
        }
    }
}

/// Classical Gaussian-mechanism calibration for sensitivity `delta_sens`:
/// sigma = delta_sens * sqrt(2 ln(1.25/delta)) / epsilon.
pub fn gaussian_sigma(delta_sens: f64, epsilon: f64, delta: f64) -> Result<f64, PrivacyError> {
    if !(delta_sens > 0.0) {
        return Err(PrivacyError::InvalidParameter(format!(
            "sensitivity must be positive, got {delta_sens}"
        )));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(PrivacyError::InvalidParameter(format!(
            "epsilon must lie in (0, 1], got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::InvalidParameter(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    Ok(delta_sens * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Per-access budget so that k accesses compose to the given total:
/// (epsilon / (2 sqrt(2 k ln(2/delta))), delta / (2k)).
///
/// The total epsilon must not exceed 0.9; the split is only certified in
/// that regime.
pub fn compose_advanced(total: Budget, k: u64) -> Result<Budget, PrivacyError> {
    if total.epsilon > 0.9 {
        return Err(PrivacyError::EpsilonTooLargeForAdvanced(total.epsilon));
    }
    if k == 0 {
        return Err(PrivacyError::InvalidParameter(
            "composition count must be at least 1".into(),
        ));
    }
    if !(total.delta > 0.0 && total.delta < 1.0) {
        return Err(PrivacyError::InvalidParameter(format!(
            "delta must lie in (0, 1), got {}",
            total.delta
        )));
    }
    let k_f = k as f64;
    let per_eps = total.epsilon / (2.0 * (2.0 * k_f * (2.0 / total.delta).ln()).sqrt());
    let per_delta = total.delta / (2.0 * k_f);
    Ok(Budget {
        epsilon: per_eps,
        delta: per_delta,
    })
}

/// Privacy cost of sampling from a Gibbs density whose log-Sobolev
/// constant is `c_lsi`: 2 (G beta / n) sqrt(c_lsi) sqrt(1 + 2 ln(1/delta)).
pub fn lsi_dp_epsilon(
    lipschitz: f64,
    beta: f64,
    n: usize,
    c_lsi: f64,
    delta: f64,
) -> Result<f64, PrivacyError> {
    for (name, v) in [
        ("lipschitz", lipschitz),
        ("beta", beta),
        ("n", n as f64),
    ] {
        if !(v > 0.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    if c_lsi < 0.0 {
        return Err(PrivacyError::InvalidParameter(format!(
            "c_lsi must be nonnegative, got {c_lsi}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::InvalidParameter(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    Ok(2.0 * (lipschitz * beta / n as f64) * c_lsi.sqrt() * (1.0 + 2.0 * (1.0 / delta).ln()).sqrt())
}

/// Log-Sobolev constant of the regularized Gibbs density via bounded
/// perturbation of the strongly log-concave baseline:
/// exp(beta G D) / (beta mu).
pub fn stroock_clsi(beta: f64, mu: f64, lipschitz: f64, diameter: f64) -> Result<f64, PrivacyError> {
    for (name, v) in [("beta", beta), ("mu", mu)] {
        if !(v > 0.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    if lipschitz < 0.0 || diameter < 0.0 {
        return Err(PrivacyError::InvalidParameter(
            "lipschitz and diameter must be nonnegative".into(),
        ));
    }
    let exponent = beta * lipschitz * diameter;
    if exponent > MAX_CLSI_EXPONENT {
        return Err(PrivacyError::ClsiOverflow(exponent));
    }
    Ok(exponent.exp() / (beta * mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn laplace_quantile_examples() {
        // Median of a symmetric law.
        assert_eq!(laplace_inverse_cdf(0.5, 3.0).unwrap(), 0.0);
        // Solve (1/2) exp(-x/b) = 0.25 for b = 1: x = ln 2.
        let q = laplace_inverse_cdf(0.75, 1.0).unwrap();
        assert!((q - std::f64::consts::LN_2).abs() < 1e-12);
        // Symmetry of the previous at b = 2.
        let q = laplace_inverse_cdf(0.25, 2.0).unwrap();
        assert!((q + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(laplace_inverse_cdf(0.0, 1.0).is_err());
        assert!(laplace_inverse_cdf(1.0, 1.0).is_err());
        assert!(laplace_inverse_cdf(0.5, 0.0).is_err());
    }

    #[test]
    fn laplace_samples_pass_ks_test() {
        let b = 1.7;
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut xs: Vec<f64> = (0..n).map(|_| sample_laplace(b, &mut rng)).collect();
        xs.sort_by(|a, c| a.partial_cmp(c).unwrap());
        let cdf = |x: f64| {
            if x < 0.0 {
                0.5 * (x / b).exp()
            } else {
                1.0 - 0.5 * (-x / b).exp()
            }
        };
        let mut d_stat = 0.0f64;
        for (i, &x) in xs.iter().enumerate() {
            let f = cdf(x);
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d_stat = d_stat.max((f - lo).abs()).max((hi - f).abs());
        }
        // Kolmogorov-Smirnov critical value at level 1e-3.
        let crit = ((2.0f64 / 1e-3).ln() / 2.0).sqrt() / (n as f64).sqrt();
        assert!(d_stat <= crit, "KS statistic {d_stat} exceeds {crit}");
    }

    #[test]
    fn gaussian_sigma_examples() {
        assert!(gaussian_sigma(1.0, 1.0, 1.0).is_err());
        let s = gaussian_sigma(1.0, 1.0, 1e-5).unwrap();
        let expect = (2.0 * (1.25e5f64).ln()).sqrt();
        assert!((s - expect).abs() < 1e-12);
        // Linear in the sensitivity, inverse in epsilon.
        let s2 = gaussian_sigma(2.0, 0.5, 1e-5).unwrap();
        assert!((s2 - 4.0 * s).abs() < 1e-12);
    }

    #[test]
    fn advanced_composition_examples() {
        let total = Budget::new(0.5, 1e-6).unwrap();
        let per = compose_advanced(total, 1).unwrap();
        let expect = 0.5 / (2.0 * (2.0 * (2e6f64).ln()).sqrt());
        assert!((per.epsilon - expect).abs() < 1e-15);
        assert!((per.delta - 5e-7).abs() < 1e-21);

        let per4 = compose_advanced(total, 4).unwrap();
        assert!((per4.epsilon - expect / 2.0).abs() < 1e-15);
        assert!((per4.delta - 1.25e-7).abs() < 1e-21);

        assert!(matches!(
            compose_advanced(Budget::new(0.95, 1e-6).unwrap(), 2),
            Err(PrivacyError::EpsilonTooLargeForAdvanced(_))
        ));
    }

    #[test]
    fn advanced_composition_certificate_is_algebraic_identity() {
        // Recomposing the per-access split must reproduce the declared
        // total exactly.
        for k in [1u64, 3, 16, 100] {
            let total = Budget::new(0.7, 1e-8).unwrap();
            let per = compose_advanced(total, k).unwrap();
            let delta_back = per.delta * 2.0 * k as f64;
            let eps_back = per.epsilon * 2.0 * (2.0 * k as f64 * (2.0 / delta_back).ln()).sqrt();
            assert!((eps_back - total.epsilon).abs() / total.epsilon < 1e-12);
            assert!((delta_back - total.delta).abs() / total.delta < 1e-12);
        }
    }

    #[test]
    fn lsi_bound_examples() {
        let c = stroock_clsi(10.0, 1.0, 1.0, 1.0).unwrap();
        assert!((c - 10.0f64.exp() / 10.0).abs() < 1e-9);
        // Zero oscillation reduces to the strongly-log-concave baseline.
        let c0 = stroock_clsi(4.0, 2.0, 1.0, 0.0).unwrap();
        assert!((c0 - 1.0 / 8.0).abs() < 1e-15);
        assert!(matches!(
            stroock_clsi(1000.0, 1.0, 1.0, 1.0),
            Err(PrivacyError::ClsiOverflow(_))
        ));

        let eps = lsi_dp_epsilon(1.0, 10.0, 1000, c, 1e-6).unwrap();
        let expect = 2.0 * (10.0 / 1000.0)
            * (10.0f64.exp() / 10.0).sqrt()
            * (1.0 + 2.0 * (1e6f64).ln()).sqrt();
        assert!((eps - expect).abs() < 1e-12);
        assert!((eps - 5.02).abs() < 0.01);
        // Degenerate constant gives zero cost; doubling n halves the bound.
        assert_eq!(lsi_dp_epsilon(1.0, 10.0, 1000, 0.0, 1e-6).unwrap(), 0.0);
        let eps2 = lsi_dp_epsilon(1.0, 10.0, 2000, c, 1e-6).unwrap();
        assert!((eps2 - eps / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ledger_totals_are_exact_sums() {
        // Costs exactly representable in binary, so the basic-composition
        // total must be bit-exact.
        let mut ledger = Ledger::new(Budget::new(1.0, 0.25).unwrap());
        ledger.charge("a", Budget::new(0.125, 0.0625).unwrap()).unwrap();
        ledger.charge("b", Budget::new(0.25, 0.125).unwrap()).unwrap();
        ledger.charge("c", Budget::new(0.5, 0.0625).unwrap()).unwrap();
        let t = ledger.total();
        assert_eq!(t.epsilon, 0.875);
        assert_eq!(t.delta, 0.25);
        assert!(ledger.within_target());
    }

    #[test]
    fn strict_ledger_aborts_on_overrun() {
        let mut ledger = Ledger::new(Budget::new(0.5, 1e-6).unwrap());
        ledger.charge("first", Budget::new(0.4, 0.0).unwrap()).unwrap();
        let err = ledger.charge("second", Budget::new(0.2, 0.0).unwrap());
        assert!(matches!(err, Err(PrivacyError::BudgetExceeded { .. })));
        // The failed charge must not linger in the ledger.
        assert_eq!(ledger.entries().count(), 1);
        assert!(ledger.within_target());
    }

    #[test]
    fn group_reservation_counts_accesses() {
        let mut ledger = Ledger::new(Budget::new(1.0, 1e-6).unwrap());
        let h = ledger
            .reserve("composed", Budget::new(0.5, 5e-7).unwrap(), 3)
            .unwrap();
        for _ in 0..3 {
            ledger.access(h).unwrap();
        }
        assert!(matches!(
            ledger.access(h),
            Err(PrivacyError::AccessOverflow { .. })
        ));
        let entry = ledger.entries().next().unwrap();
        assert_eq!(entry.count, 4); // overflowing access is still recorded
    }

    #[test]
    fn ledger_json_shape() {
        let mut ledger = Ledger::new(Budget::new(1.0, 1e-6).unwrap());
        ledger.charge("x", Budget::new(0.5, 0.0).unwrap()).unwrap();
        let v = ledger.to_json();
        assert_eq!(v["entries"][0]["label"], "x");
        assert_eq!(v["within_target"], true);
    }
}
