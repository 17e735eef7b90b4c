//! Fixed-point equilibrium computation and contraction diagnostics.
//!
//! Outcomes solve `y = Xγ + λ Φ(y; G, θ) + ζ + ε` by fixed-point iteration
//! from `y⁰ = Xγ`. Convergence is monitored by the relative sup-norm change;
//! non-convergent solves are returned with `converged = false` rather than
//! erroring, so Monte Carlo callers can record and exclude them. A product
//! bound `|λ|·L_Φ < 1` certifies uniqueness (Banach).

use nalgebra::DVector;

use crate::aggregators::{exposure, AggregatorSpec, Family};
use crate::error::{Error, Result};
use crate::netcore::Panel;

/// Structural coefficients of the outcome equation.
#[derive(Debug, Clone)]
pub struct StructuralParams {
    /// Coefficients on the covariate columns (including the intercept column).
    pub gamma: DVector<f64>,
    /// Peer-effect coefficient on the exposure index.
    pub lambda: f64,
    /// Per-group intercepts ζ_s.
    pub group_effects: Vec<f64>,
    /// Shock standard deviation (recorded; shocks are passed in explicitly).
    pub sigma_eps: f64,
    pub aggregator: AggregatorSpec,
}

/// Iteration diagnostics for a fixed-point solve.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Last relative sup-norm change ‖y⁺−y‖∞ / (1+‖y⁺‖∞).
    pub final_residual: f64,
    pub converged: bool,
    /// |λ|·L_Φ estimate when an action box was available, else `None`.
    pub contraction_bound: Option<f64>,
}

/// Iterations of non-monotone residual tolerated before 0.5-damping engages.
const DAMPING_TRIGGER: usize = 100;

/// Solves the norm game for equilibrium outcomes given structural parameters
/// and an externally drawn shock vector.
///
/// Returns the last iterate with its report; `converged = false` marks a
/// non-convergent draw. A CES domain violation mid-iteration is an error
/// identifying the iteration and node.
pub fn solve_equilibrium(
    panel: &Panel,
    params: &StructuralParams,
    shocks: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, SolveReport)> {
    let n = panel.n_nodes();
    if shocks.len() != n {
        return Err(Error::Domain("shock vector length mismatch".into()));
    }
    if tol <= 0.0 {
        return Err(Error::Domain("tolerance must be positive".into()));
    }
    if params.gamma.len() != panel.n_covariates() {
        return Err(Error::Domain("gamma length must match covariate count".into()));
    }
    if params.group_effects.len() != panel.groups.len() {
        return Err(Error::Domain("one group effect per group required".into()));
    }

    // base = Xγ + ζ + ε; iteration adds λΦ(y) on non-isolates.
    let xg = &panel.x * &params.gamma;
    let mut base = xg.clone() + shocks;
    for (g, net) in panel.groups.iter().enumerate() {
        let zeta = params.group_effects[g];
        for i in 0..net.n {
            base[panel.global_index(g, i)] += zeta;
        }
    }

    let mut y = xg;
    let mut residual = f64::INFINITY;
    let mut prev_residual = f64::INFINITY;
    let mut non_monotone = 0usize;
    let mut damping = false;
    let mut iterations = 0usize;
    let mut converged = false;

    for it in 1..=max_iter {
        iterations = it;
        let phi = apply_exposure(panel, &y, &params.aggregator).map_err(|e| match e {
            Error::Domain(msg) => Error::Domain(format!("iteration {it}: {msg}")),
            other => other,
        })?;
        let mut next = base.clone();
        for i in 0..n {
            next[i] += params.lambda * phi[i];
        }
        if damping {
            next = 0.5 * &y + 0.5 * next;
        }
        let diff = (&next - &y).abs().max();
        let scale = 1.0 + next.abs().max();
        residual = diff / scale;
        y = next;
        if residual <= tol {
            converged = true;
            break;
        }
        if residual > prev_residual {
            non_monotone += 1;
            if non_monotone >= DAMPING_TRIGGER {
                damping = true;
            }
        }
        prev_residual = residual;
    }

    let bound = action_box(&y, &params.aggregator)
        .and_then(|b| contraction_bound(params, b).ok());

    Ok((
        y,
        SolveReport {
            iterations,
            final_residual: residual,
            converged,
            contraction_bound: bound,
        },
    ))
}

/// Stacked exposure over all groups; zero entries on isolates.
pub fn apply_exposure(
    panel: &Panel,
    y: &DVector<f64>,
    spec: &AggregatorSpec,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(panel.n_nodes());
    for (g, net) in panel.groups.iter().enumerate() {
        let local = panel.group_slice(y, g);
        let e = exposure(net, &local, spec)?;
        for i in 0..net.n {
            out[panel.global_index(g, i)] = e.values[i];
        }
    }
    Ok(out)
}

/// Shifted action box (lower, upper) for the CES bound; `None` when the
/// family needs no box or the box is invalid.
fn action_box(y: &DVector<f64>, spec: &AggregatorSpec) -> Option<(f64, f64)> {
    match spec.family {
        Family::Ces => {
            let lo = y.min() + spec.shift;
            let hi = y.max() + spec.shift;
            (lo > 0.0 && hi > lo).then_some((lo, hi))
        }
        _ => Some((0.0, 1.0)),
    }
}

/// Product bound `|λ|·L_Φ` certifying uniqueness when below 1.
///
/// `L_Φ` is 1 for LIM, smooth-max, and quantile norms; for CES on a positive
/// box it is the corner evaluation `(upper/lower)^{|β−1|}` of the row-formula
/// derivative bound.
pub fn contraction_bound(params: &StructuralParams, action_bounds: (f64, f64)) -> Result<f64> {
    let l_phi = match params.aggregator.family {
        Family::Lim | Family::SmoothMax | Family::Quantile => 1.0,
        Family::Ces => {
            let (lo, hi) = action_bounds;
            if !(0.0 < lo && lo < hi) {
                return Err(Error::Domain(format!(
                    "CES contraction bound needs 0 < lower < upper, got ({lo}, {hi})"
                )));
            }
            (hi / lo).powf((params.aggregator.theta - 1.0).abs())
        }
    };
    Ok(params.lambda.abs() * l_phi)
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Brock–Durlauf-type probability fixed point
/// `p_i = Λ(x_i'γ + J·Φ_i^SM(p_{-i}))` on `[0,1]^n`.
///
/// The report's `contraction_bound` is `|J|·L_Φ/4` (Λ' ≤ 1/4, smooth-max is
/// 1-Lipschitz), so a value below 1 — equivalently |J| < 4 — certifies
/// uniqueness.
pub fn logit_fixed_point(
    panel: &Panel,
    gamma: &DVector<f64>,
    j_coef: f64,
    spec: &AggregatorSpec,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, SolveReport)> {
    if spec.family != Family::SmoothMax {
        return Err(Error::Unsupported(
            "logit fixed point is defined for the smooth-max aggregator".into(),
        ));
    }
    if gamma.len() != panel.n_covariates() {
        return Err(Error::Domain("gamma length must match covariate count".into()));
    }
    let n = panel.n_nodes();
    let xg = &panel.x * gamma;
    let mut p = DVector::from_iterator(n, xg.iter().map(|&t| logistic(t)));
    let mut residual = f64::INFINITY;
    let mut iterations = 0usize;
    let mut converged = false;
    for it in 1..=max_iter {
        iterations = it;
        let phi = apply_exposure(panel, &p, spec)?;
        let next = DVector::from_iterator(
            n,
            (0..n).map(|i| logistic(xg[i] + j_coef * phi[i])),
        );
        residual = (&next - &p).abs().max() / (1.0 + next.abs().max());
        p = next;
        if residual <= tol {
            converged = true;
            break;
        }
    }
    Ok((
        p,
        SolveReport {
            iterations,
            final_residual: residual,
            converged,
            contraction_bound: Some(j_coef.abs() / 4.0),
        },
    ))
}
