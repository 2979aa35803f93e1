//! Drift-controlled variance-reduced iteration.
//!
//! The optimizer maintains a running gradient estimate and a drift
//! accumulator equal to the squared movement since the last fresh
//! gradient query.  Three branches are selected in order each step:
//!
//! 1. re-anchor: when the previous estimate is small and the cooldown has
//!    expired, query the accurate oracle and add isotropic exploration
//!    noise (this is what lets the iterate leave saddle points);
//! 2. large drift: when the accumulated movement exceeds `kappa`, the
//!    stale estimate may have drifted too far, so query the accurate
//!    oracle again;
//! 3. otherwise: update the estimate with the cheap difference oracle.
//!
//! All run parameters (gamma, Gamma, eta, T, the re-anchor threshold) are
//! derived from the problem constants, the oracle noise levels, and a set
//! of named constant knobs.

use serde::Serialize;
use thiserror::Error;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg;
use crate::objective::ObjectiveSpec;
use crate::oracle::{GradientOracle, OracleError, OracleMode, OracleParams};
use crate::privacy::{Budget, GroupHandle, Ledger, PrivacyError};

#[derive(Debug, Error)]
pub enum SpiderError {
    #[error(
        "derived step scale gamma is zero: both oracle noise constants vanish; \
         set a noiseless gamma floor in the knobs to run exact-oracle experiments"
    )]
    DegenerateGamma,
    #[error(
        "sample budget infeasible: the batch plan needs {needed} fresh samples \
         but only {available} are available for the optimization half"
    )]
    SampleBudgetInfeasible { needed: u64, available: u64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

/// Named constants the analysis leaves unspecified.  All default to 1
/// except the threshold log exponent, which defaults to 3.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TheoryKnobs {
    /// Multiplier inside gamma^2.
    pub c_gamma: f64,
    /// Multiplier on the cooldown length Gamma.
    pub c_big_gamma: f64,
    /// Multiplier on the step count T.
    pub c_t: f64,
    /// Exponent of the log factor in the re-anchor threshold.
    pub threshold_log_exp: f64,
    /// Multiplier on the predicted accuracy alpha_1.
    pub c_alpha: f64,
    /// Multiplier on the large-drift count bound.
    pub c_k: f64,
    /// Norm-subGaussian constant for population oracle bookkeeping.
    pub c_nsg: f64,
    /// Replace every log factor by 1 (used by formula-level tests).
    pub force_unit_logs: bool,
    /// Gamma to use when both oracle noise constants are exactly zero.
    pub noiseless_gamma: Option<f64>,
}

impl Default for TheoryKnobs {
    fn default() -> Self {
        TheoryKnobs {
            c_gamma: 1.0,
            c_big_gamma: 1.0,
            c_t: 1.0,
            threshold_log_exp: 3.0,
            c_alpha: 1.0,
            c_k: 1.0,
            c_nsg: 1.0,
            force_unit_logs: false,
            noiseless_gamma: None,
        }
    }
}

/// Derived run parameters.
#[derive(Debug, Clone, Serialize)]
pub struct SpiderConfig {
    pub gamma: f64,
    /// Cooldown length after a re-anchor.
    pub big_gamma: u64,
    pub eta: f64,
    pub t_max: u64,
    pub kappa: f64,
    pub omega: f64,
    /// Gradient-norm threshold of the re-anchor branch.
    pub threshold: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub alpha_target: f64,
    pub knobs: TheoryKnobs,
    pub warnings: Vec<String>,
}

fn ln_clamped(arg: f64, force: bool, warnings: &mut Vec<String>, what: &str) -> f64 {
    if force {
        return 1.0;
    }
    if arg <= 1.0 {
        warnings.push(format!(
            "log argument for {what} is {arg} <= 1; clamped to e so the factor is 1"
        ));
        1.0
    } else {
        arg.ln()
    }
}

/// Derive (gamma, Gamma, eta, T, threshold) from the problem constants and
/// oracle noise levels.
pub fn derive_config(
    spec: &ObjectiveSpec,
    zeta1: f64,
    zeta2: f64,
    kappa: f64,
    omega: f64,
    alpha_target: f64,
    knobs: TheoryKnobs,
) -> Result<SpiderConfig, SpiderError> {
    spec.validate()
        .map_err(|e| SpiderError::InvalidParameter(e.to_string()))?;
    if !(kappa > 0.0) {
        return Err(SpiderError::InvalidParameter(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    if !(omega > 0.0 && omega < 1.0) {
        return Err(SpiderError::InvalidParameter(format!(
            "omega must lie in (0, 1), got {omega}"
        )));
    }
    let mut warnings = Vec::new();
    let b = spec.value_range;
    let m = spec.smooth;
    let rho = spec.hessian_lipschitz;
    let d = spec.dim as f64;
    let force = knobs.force_unit_logs;

    let l_plain = ln_clamped(b * m * d / (rho * omega), force, &mut warnings, "gamma");
    let mut gamma = (4.0 * knobs.c_gamma * (zeta2 * zeta2 * kappa + 4.0 * zeta1 * zeta1) * l_plain)
        .sqrt();
    if gamma == 0.0 {
        match knobs.noiseless_gamma {
            Some(floor) if floor > 0.0 => {
                warnings.push(format!("gamma is zero; using noiseless floor {floor}"));
                gamma = floor;
            }
            _ => return Err(SpiderError::DegenerateGamma),
        }
    }

    let l_gamma = ln_clamped(
        d * m * b / (rho * gamma * omega),
        force,
        &mut warnings,
        "Gamma and T",
    );
    let big_gamma = (knobs.c_big_gamma * m * l_gamma / (rho * gamma).sqrt()).ceil() as u64;
    let big_gamma = big_gamma.max(1);
    let t_max = (knobs.c_t * b * m * l_gamma.powi(4) / (gamma * gamma)).ceil() as u64;
    let t_max = t_max.max(1);
    let threshold = gamma * l_plain.powf(knobs.threshold_log_exp);

    if !spec.curvature_condition_holds(alpha_target) {
        warnings.push(format!(
            "smoothness {m} is below sqrt(rho*alpha) = {}; the second-order \
             condition is vacuous at this accuracy",
            (rho * alpha_target).sqrt()
        ));
    }

    Ok(SpiderConfig {
        gamma,
        big_gamma,
        eta: 1.0 / m,
        t_max,
        kappa,
        omega,
        threshold,
        zeta1,
        zeta2,
        alpha_target,
        knobs,
        warnings,
    })
}

/// Which branch a step took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Branch {
    Reanchor,
    LargeDriftO1,
    O2,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Reanchor => "reanchor",
            Branch::LargeDriftO1 => "large_drift_o1",
            Branch::O2 => "o2",
        }
    }
}

/// Per-iteration record.  `drift` is the accumulator value at branch
/// decision time; `x` is the iterate produced by the step.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub t: u64,
    pub branch: Branch,
    pub grad_est_norm: f64,
    pub drift: f64,
    pub frozen: i64,
    pub x: Vec<f64>,
    pub true_grad_norm: Option<f64>,
    /// Distance between the estimate and the probed true gradient.
    pub grad_err: Option<f64>,
    pub eps_spent: f64,
}

/// Full run trace: the start point plus one record per step.
#[derive(Debug, Clone)]
pub struct Trace {
    pub x0: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub config: SpiderConfig,
}

impl Trace {
    /// Output iterates x_1, ..., x_T.
    pub fn iterates(&self) -> impl Iterator<Item = &[f64]> {
        self.steps.iter().map(|s| s.x.as_slice())
    }

    pub fn count_branch(&self, b: Branch) -> usize {
        self.steps.iter().filter(|s| s.branch == b).count()
    }

    /// CSV rendering with the config echoed as a JSON comment header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        out.push_str(&format!("# {cfg}\n"));
        out.push_str("t,branch,grad_est_norm,drift,frozen,true_grad_norm,eps_spent\n");
        for s in &self.steps {
            let tg = s
                .true_grad_norm
                .map(|v| format!("{v}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.t,
                s.branch.as_str(),
                s.grad_est_norm,
                s.drift,
                s.frozen,
                tg,
                s.eps_spent
            ));
        }
        out
    }
}

/// Mutable loop state.
#[derive(Debug, Clone)]
pub struct SpiderState {
    pub t: u64,
    pub x: Vec<f64>,
    pub x_prev: Option<Vec<f64>>,
    pub nabla_prev: Vec<f64>,
    pub drift: f64,
    pub frozen: i64,
    pub o1_query_count: u64,
}

impl SpiderState {
    /// Initialization: drift starts at kappa and the virtual previous
    /// estimate is zero with an expired cooldown, so the first step always
    /// takes the re-anchor branch and begins from a fresh accurate query.
    pub fn new(x0: Vec<f64>, kappa: f64) -> Self {
        let d = x0.len();
        SpiderState {
            t: 0,
            x: x0,
            x_prev: None,
            nabla_prev: vec![0.0; d],
            drift: kappa,
            frozen: 0,
            o1_query_count: 0,
        }
    }
}

/// Ledger charging plan for a run; group entries are reserved by the
/// caller so the composition story stays in one place.
pub struct ChargePlan<'a> {
    pub ledger: &'a mut Ledger,
    pub o1: GroupHandle,
    pub o2: GroupHandle,
}

/// One iteration.  The probe, when given, receives the pre-update iterate
/// and must return the exact gradient there; it never affects the dynamics
/// or the privacy accounting.
pub fn spider_step<O: GradientOracle>(
    state: &mut SpiderState,
    oracle: &mut O,
    config: &SpiderConfig,
    rng: &mut ChaCha8Rng,
    charge: &mut Option<ChargePlan<'_>>,
    probe: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
) -> Result<StepRecord, SpiderError> {
    let d = state.x.len();
    let drift_entry = state.drift;
    let frozen_entry = state.frozen;
    let prev_norm = linalg::norm(&state.nabla_prev);

    let branch = if prev_norm <= config.threshold && frozen_entry <= 0 {
        Branch::Reanchor
    } else if drift_entry >= config.kappa {
        Branch::LargeDriftO1
    } else {
        Branch::O2
    };

    let nabla = match branch {
        Branch::Reanchor => {
            if let Some(plan) = charge {
                plan.ledger.access(plan.o1)?;
            }
            let mut g = oracle.o1(&state.x)?;
            state.o1_query_count += 1;
            if config.zeta1 > 0.0 {
                let sd = config.zeta1 / (d as f64).sqrt();
                for gi in g.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *gi += sd * z;
                }
            }
            state.frozen = i64::try_from(config.big_gamma).unwrap_or(i64::MAX);
            state.drift = 0.0;
            g
        }
        Branch::LargeDriftO1 => {
            if let Some(plan) = charge {
                plan.ledger.access(plan.o1)?;
            }
            let g = oracle.o1(&state.x)?;
            state.o1_query_count += 1;
            state.drift = 0.0;
            state.frozen = frozen_entry - 1;
            g
        }
        Branch::O2 => {
            if let Some(plan) = charge {
                plan.ledger.access(plan.o2)?;
            }
            let prev = state
                .x_prev
                .as_ref()
                .expect("the first step re-anchors, so x_prev is set before any O2 step");
            let diff = oracle.o2(&state.x, prev)?;
            state.frozen = frozen_entry - 1;
            linalg::add(&state.nabla_prev, &diff)
        }
    };

    let (true_grad_norm, grad_err) = match probe {
        Some(f) => {
            let g = f(&state.x);
            (Some(linalg::norm(&g)), Some(linalg::dist(&nabla, &g)))
        }
        None => (None, None),
    };

    let x_next = linalg::add_scaled(&state.x, &nabla, -config.eta);
    // Movement accumulates onto the post-branch drift value, so a reset in
    // this very step starts the window from this movement alone.
    state.drift += config.eta * config.eta * linalg::norm_sq(&nabla);

    let record = StepRecord {
        t: state.t,
        branch,
        grad_est_norm: linalg::norm(&nabla),
        drift: drift_entry,
        frozen: state.frozen,
        x: x_next.clone(),
        true_grad_norm,
        grad_err,
        eps_spent: charge
            .as_ref()
            .map(|p| p.ledger.total().epsilon)
            .unwrap_or(0.0),
    };

    state.x_prev = Some(std::mem::replace(&mut state.x, x_next));
    state.nabla_prev = nabla;
    state.t += 1;
    Ok(record)
}

/// Run the full iteration from `x0`.
pub fn spider_run<O: GradientOracle>(
    x0: Vec<f64>,
    oracle: &mut O,
    config: &SpiderConfig,
    rng: &mut ChaCha8Rng,
    mut charge: Option<ChargePlan<'_>>,
    probe: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
) -> Result<Trace, SpiderError> {
    let mut state = SpiderState::new(x0.clone(), config.kappa);
    let mut steps = Vec::with_capacity(config.t_max as usize);
    for _ in 0..config.t_max {
        let record = spider_step(&mut state, oracle, config, rng, &mut charge, probe)?;
        steps.push(record);
    }
    Ok(Trace {
        x0,
        steps,
        config: config.clone(),
    })
}

/// Oracle parameters, kappa, and the predicted accuracy for one of the two
/// calibration regimes, plus the counts the privacy charging needs.
#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub oracle_params: OracleParams,
    pub kappa: f64,
    /// Predicted accuracy of the best output point.
    pub alpha1: f64,
    /// Dataset split (optimization half, selection half): population only.
    pub split: Option<(usize, usize)>,
    /// Bound on the number of large-drift accurate queries.
    pub k_bound: u64,
    /// Bound on the number of re-anchor queries (T / Gamma + 1).
    pub anchor_bound: u64,
    pub warnings: Vec<String>,
}

/// Derive oracle noise scales, batch sizes, kappa, and the predicted
/// accuracy from the problem constants and the privacy budget.
pub fn derive_calibration(
    spec: &ObjectiveSpec,
    budget: Budget,
    mode: OracleMode,
    n: usize,
    omega: f64,
    knobs: TheoryKnobs,
) -> Result<Calibration, SpiderError> {
    spec.validate()
        .map_err(|e| SpiderError::InvalidParameter(e.to_string()))?;
    if n == 0 {
        return Err(SpiderError::InvalidParameter("n must be positive".into()));
    }
    if !(budget.epsilon > 0.0) || !(budget.delta > 0.0 && budget.delta < 1.0) {
        return Err(SpiderError::InvalidParameter(format!(
            "budget must have positive epsilon and delta in (0, 1), got ({}, {})",
            budget.epsilon, budget.delta
        )));
    }
    let mut warnings = Vec::new();
    let g = spec.lipschitz;
    let b = spec.value_range;
    let m = spec.smooth;
    let rho = spec.hessian_lipschitz;
    let d = spec.dim as f64;
    let n_f = n as f64;
    let eps = budget.epsilon;
    let force = knobs.force_unit_logs;
    let ln_inv_delta = if force { 1.0 } else { (1.0 / budget.delta).ln() };
    let eta = 1.0 / m;

    match mode {
        OracleMode::Empirical => {
            if eps > 0.9 {
                warnings.push(format!(
                    "epsilon {eps} exceeds 0.9: the composed charging of accurate \
                     queries requires splitting the budget below 0.9 first"
                ));
            }
            let kappa = g.powf(4.0 / 3.0) * b.powf(1.0 / 3.0) / m.powf(5.0 / 3.0)
                * ((d * ln_inv_delta).sqrt() / (n_f * eps)).powf(2.0 / 3.0);
            let l_run = ln_clamped(n_f * d * m * b / omega, force, &mut warnings, "sigma factors");
            let sigma1 =
                g * (b * eta * ln_inv_delta * ln_inv_delta / kappa).sqrt() * l_run.powi(2)
                    / (n_f * eps);
            // The second noise scale references the target accuracy, which
            // itself depends on the noise; one pass through the closed form
            // below breaks the cycle.
            let l_alpha = ln_clamped(n_f * b * m * d / (rho * omega), force, &mut warnings, "alpha");
            let alpha1 = knobs.c_alpha
                * ((d * b * g * m * ln_inv_delta * ln_inv_delta).sqrt() / (n_f * eps))
                    .powf(2.0 / 3.0)
                * l_alpha.powi(6);
            let sigma2 = m * (ln_inv_delta * ln_inv_delta * b * m / (alpha1 * alpha1)).sqrt()
                * l_run.powi(5)
                / (n_f * eps);
            let oracle_params = OracleParams::empirical(sigma1, sigma2, spec.dim);
            let config = derive_config(
                spec,
                oracle_params.zeta1,
                oracle_params.zeta2,
                kappa,
                omega,
                alpha1,
                knobs,
            )?;
            let k_bound = large_drift_bound(&config, spec);
            let anchor_bound = config.t_max / config.big_gamma + 1;
            Ok(Calibration {
                oracle_params,
                kappa,
                alpha1,
                split: None,
                k_bound,
                anchor_bound,
                warnings,
            })
        }
        OracleMode::Population => {
            let ln_d = if force { 1.0 } else { d.ln().max(0.0) };
            let kappa_stat = g.powf(4.0 / 3.0) * b.powf(1.0 / 3.0) * ln_d.powf(1.0 / 3.0)
                / m.powf(5.0 / 3.0)
                * n_f.powf(-1.0 / 3.0);
            let kappa_priv = (g * b.powf(2.0 / 3.0) / m.powf(5.0 / 3.0)).powf(6.0 / 7.0)
                * ((d * ln_inv_delta).sqrt() / (n_f * eps)).powf(4.0 / 7.0);
            let kappa = kappa_stat.max(kappa_priv);

            let l_alpha = ln_clamped(n_f * b * m * d / (rho * omega), force, &mut warnings, "alpha");
            let alpha1 = knobs.c_alpha
                * ((b * g * m * ln_d).powf(1.0 / 3.0) * n_f.powf(-1.0 / 3.0)
                    + g.powf(1.0 / 7.0)
                        * b.powf(3.0 / 7.0)
                        * m.powf(3.0 / 7.0)
                        * ((d * ln_inv_delta).sqrt() / (n_f * eps)).powf(3.0 / 7.0))
                * l_alpha.powi(3);

            let b1_raw = n_f * kappa / (b * eta);
            let b2_raw = n_f * alpha1 * alpha1 / (b * m);
            let mut b1 = b1_raw.ceil() as usize;
            let mut b2 = b2_raw.ceil() as usize;
            if b1 < 1 {
                warnings.push(format!("computed b1 = {b1_raw} < 1; rounded up to 1"));
                b1 = 1;
            }
            if b2 < 1 {
                warnings.push(format!("computed b2 = {b2_raw} < 1; rounded up to 1"));
                b2 = 1;
            }
            let sigma1 = g * ln_inv_delta.sqrt() / (b1 as f64 * eps);
            let sigma2 = m * ln_inv_delta.sqrt() / (b2 as f64 * eps);
            let oracle_params = OracleParams::population(sigma1, sigma2, b1, b2, spec, knobs.c_nsg);
            let config = derive_config(
                spec,
                oracle_params.zeta1,
                oracle_params.zeta2,
                kappa,
                omega,
                alpha1,
                knobs,
            )?;
            let k_bound = large_drift_bound(&config, spec);
            let anchor_bound = config.t_max / config.big_gamma + 1;
            let needed = (b1 as u64) * (k_bound + anchor_bound) + (b2 as u64) * config.t_max;
            let available = (n / 2) as u64;
            if needed > available {
                return Err(SpiderError::SampleBudgetInfeasible { needed, available });
            }
            Ok(Calibration {
                oracle_params,
                kappa,
                alpha1,
                split: Some((n.div_ceil(2), n / 2)),
                k_bound,
                anchor_bound,
                warnings,
            })
        }
    }
}

/// Bound on the number of steps whose drift exceeds kappa:
/// c_k * B * eta * log^4(dMB / (rho gamma omega)) / kappa.
pub fn large_drift_bound(config: &SpiderConfig, spec: &ObjectiveSpec) -> u64 {
    let mut scratch = Vec::new();
    let l = ln_clamped(
        spec.dim as f64 * spec.smooth * spec.value_range
            / (spec.hessian_lipschitz * config.gamma * config.omega),
        config.knobs.force_unit_logs,
        &mut scratch,
        "drift bound",
    );
    (config.knobs.c_k * spec.value_range * config.eta * l.powi(4) / config.kappa).ceil() as u64
}
