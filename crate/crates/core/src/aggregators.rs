//! Peer-exposure aggregators and their marginal-influence fields.
//!
//! Four families map peers' actions into a scalar exposure:
//!
//! - `Lim`: weighted arithmetic mean `(G a)_i`,
//! - `Ces`: power mean `(Σ_j g_ij (a_j + c)^β)^{1/β} − c` with curvature β and
//!   positivity shift c,
//! - `SmoothMax`: log-sum-exp `κ⁻¹ log Σ_j g_ij exp(κ a_j)`, computed with
//!   max subtraction,
//! - `Quantile`: left-continuous weighted q-quantile (minimizer of the
//!   weighted check loss).
//!
//! The smooth families expose analytic Jacobians in peers' actions; the
//! quantile family has a one-hot subgradient influence matrix instead. The
//! derivative in the preference parameter is a central finite difference.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::netcore::Network;

/// Aggregator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Lim,
    Ces,
    SmoothMax,
    Quantile,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Family::Lim => "lim",
            Family::Ces => "ces",
            Family::SmoothMax => "smoothmax",
            Family::Quantile => "quantile",
        };
        f.write_str(s)
    }
}

/// A family together with its preference parameter and positivity shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatorSpec {
    pub family: Family,
    /// β for CES, κ for smooth-max, q for quantile; unused for LIM.
    pub theta: f64,
    /// Nonnegative shift c added to actions inside CES (same units as the
    /// action) and subtracted from the result. Ignored by other families.
    pub shift: f64,
}

impl AggregatorSpec {
    pub fn lim() -> Self {
        AggregatorSpec {
            family: Family::Lim,
            theta: 0.0,
            shift: 0.0,
        }
    }

    pub fn ces(beta: f64, shift: f64) -> Result<Self> {
        if beta == 0.0 || !beta.is_finite() {
            return Err(Error::Domain("CES requires finite beta != 0".into()));
        }
        if shift < 0.0 || !shift.is_finite() {
            return Err(Error::Domain("CES shift must be nonnegative".into()));
        }
        Ok(AggregatorSpec {
            family: Family::Ces,
            theta: beta,
            shift,
        })
    }

    pub fn smooth_max(kappa: f64) -> Result<Self> {
        if kappa <= 0.0 || !kappa.is_finite() {
            return Err(Error::Domain("smooth-max requires kappa > 0".into()));
        }
        Ok(AggregatorSpec {
            family: Family::SmoothMax,
            theta: kappa,
            shift: 0.0,
        })
    }

    pub fn quantile(q: f64) -> Result<Self> {
        if !(0.0 < q && q < 1.0) {
            return Err(Error::Domain("quantile requires 0 < q < 1".into()));
        }
        Ok(AggregatorSpec {
            family: Family::Quantile,
            theta: q,
            shift: 0.0,
        })
    }

    /// Same spec with the preference parameter replaced.
    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        match self.family {
            Family::Lim => Ok(*self),
            Family::Ces => AggregatorSpec::ces(theta, self.shift),
            Family::SmoothMax => AggregatorSpec::smooth_max(theta),
            Family::Quantile => AggregatorSpec::quantile(theta),
        }
    }

    /// Whether `theta` lies in the family's open parameter domain.
    pub fn theta_in_domain(&self, theta: f64) -> bool {
        match self.family {
            Family::Lim => true,
            // The CES domain excludes 0; stepping across it changes branch.
            Family::Ces => theta != 0.0 && theta.signum() == self.theta.signum(),
            Family::SmoothMax => theta > 0.0,
            Family::Quantile => 0.0 < theta && theta < 1.0,
        }
    }
}

/// Per-node exposure values; `defined_mask` is false on isolates.
#[derive(Debug, Clone)]
pub struct ExposureVector {
    pub values: DVector<f64>,
    pub defined_mask: Vec<bool>,
}

/// θ-derivative of the exposure; `one_sided` flags a domain-limited stencil.
#[derive(Debug, Clone)]
pub struct DthetaExposure {
    pub values: DVector<f64>,
    pub one_sided: bool,
}

/// Default relative step for finite differences in θ.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

fn check_actions_finite(actions: &DVector<f64>) -> Result<()> {
    if actions.iter().any(|a| !a.is_finite()) {
        return Err(Error::Domain("actions must be finite".into()));
    }
    Ok(())
}

/// Errors unless every action seen through a positive weight clears the CES
/// positivity requirement after the shift.
fn check_ces_domain(net: &Network, actions: &DVector<f64>, shift: f64) -> Result<()> {
    for i in 0..net.n {
        for (j, _) in net.neighbors(i) {
            if actions[j] + shift <= 0.0 {
                return Err(Error::Domain(format!(
                    "CES domain violation: action {} + shift {} <= 0 at peer {} of node {}",
                    actions[j], shift, j, i
                )));
            }
        }
    }
    Ok(())
}

/// Peer exposure `Φ_i(a_{-i}; G, θ)` for every node.
///
/// Isolate rows are masked out (value 0, `defined_mask` false).
pub fn exposure(net: &Network, actions: &DVector<f64>, spec: &AggregatorSpec) -> Result<ExposureVector> {
    if actions.len() != net.n {
        return Err(Error::Domain("action vector length mismatch".into()));
    }
    check_actions_finite(actions)?;
    let mut values = DVector::zeros(net.n);
    let defined: Vec<bool> = net.isolate_mask.iter().map(|&iso| !iso).collect();
    match spec.family {
        Family::Lim => {
            for i in 0..net.n {
                if defined[i] {
                    values[i] = net.neighbors(i).map(|(j, g)| g * actions[j]).sum();
                }
            }
        }
        Family::Ces => {
            check_ces_domain(net, actions, spec.shift)?;
            let beta = spec.theta;
            for i in 0..net.n {
                if defined[i] {
                    values[i] = ces_row(net, actions, i, beta, spec.shift);
                }
            }
        }
        Family::SmoothMax => {
            let kappa = spec.theta;
            for i in 0..net.n {
                if defined[i] {
                    values[i] = smooth_max_row(net, actions, i, kappa);
                }
            }
        }
        Family::Quantile => {
            let q = spec.theta;
            for i in 0..net.n {
                if defined[i] {
                    values[i] = weighted_quantile(net, actions, i, q);
                }
            }
        }
    }
    Ok(ExposureVector {
        values,
        defined_mask: defined,
    })
}

/// CES row in log domain: exp(LSE_j(ln g_ij + β ln s_j)/β) − c, stable for
/// large |β| (β = 200 on actions up to ~30 stays inside f64 range).
fn ces_row(net: &Network, actions: &DVector<f64>, i: usize, beta: f64, shift: f64) -> f64 {
    let mut max_term = f64::NEG_INFINITY;
    for (j, g) in net.neighbors(i) {
        let t = g.ln() + beta * (actions[j] + shift).ln();
        if t > max_term {
            max_term = t;
        }
    }
    let mut sum = 0.0;
    for (j, g) in net.neighbors(i) {
        let t = g.ln() + beta * (actions[j] + shift).ln();
        sum += (t - max_term).exp();
    }
    ((max_term + sum.ln()) / beta).exp() - shift
}

fn smooth_max_row(net: &Network, actions: &DVector<f64>, i: usize, kappa: f64) -> f64 {
    let m = net
        .neighbors(i)
        .map(|(j, _)| actions[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = net
        .neighbors(i)
        .map(|(j, g)| g * (kappa * (actions[j] - m)).exp())
        .sum();
    m + sum.ln() / kappa
}

/// Left-continuous weighted quantile: smallest peer value whose cumulative
/// weight reaches q (weights taken relative to the row total).
fn weighted_quantile(net: &Network, actions: &DVector<f64>, i: usize, q: f64) -> f64 {
    let mut peers: Vec<(f64, f64)> = net.neighbors(i).map(|(j, g)| (actions[j], g)).collect();
    peers.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = peers.iter().map(|p| p.1).sum();
    let target = q * total;
    let mut cum = 0.0;
    for &(value, w) in &peers {
        cum += w;
        if cum >= target {
            return value;
        }
    }
    peers.last().map(|p| p.0).unwrap_or(0.0)
}

/// Analytic Jacobian `W_ij = ∂Φ_i/∂a_j` for the smooth families.
///
/// LIM returns G itself; smooth-max rows are softmax probability vectors;
/// CES applies the power-mean row formula to shifted actions. The quantile
/// family is non-smooth — use [`quantile_influence`].
pub fn jacobian(net: &Network, actions: &DVector<f64>, spec: &AggregatorSpec) -> Result<DMatrix<f64>> {
    if actions.len() != net.n {
        return Err(Error::Domain("action vector length mismatch".into()));
    }
    check_actions_finite(actions)?;
    match spec.family {
        Family::Lim => Ok(net.weights.clone()),
        Family::Ces => {
            check_ces_domain(net, actions, spec.shift)?;
            let beta = spec.theta;
            let mut w = DMatrix::zeros(net.n, net.n);
            for i in 0..net.n {
                if net.isolate_mask[i] {
                    continue;
                }
                // W_ij = g_ij (s_j / M_i)^{β-1} with M_i the shifted norm;
                // the ratio form is stable for large |β|.
                let m_i = ces_row(net, actions, i, beta, spec.shift) + spec.shift;
                let ln_m = m_i.ln();
                for (j, g) in net.neighbors(i) {
                    let ln_s = (actions[j] + spec.shift).ln();
                    w[(i, j)] = g * ((beta - 1.0) * (ln_s - ln_m)).exp();
                }
            }
            Ok(w)
        }
        Family::SmoothMax => {
            let kappa = spec.theta;
            let mut w = DMatrix::zeros(net.n, net.n);
            for i in 0..net.n {
                if net.isolate_mask[i] {
                    continue;
                }
                let m = net
                    .neighbors(i)
                    .map(|(j, _)| actions[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = net
                    .neighbors(i)
                    .map(|(j, g)| g * (kappa * (actions[j] - m)).exp())
                    .sum();
                for (j, g) in net.neighbors(i) {
                    w[(i, j)] = g * (kappa * (actions[j] - m)).exp() / denom;
                }
            }
            Ok(w)
        }
        Family::Quantile => Err(Error::Unsupported(
            "quantile family has no smooth Jacobian; use quantile_influence".into(),
        )),
    }
}

/// Subgradient influence for the quantile norm: row i puts weight 1 split
/// equally among the peer(s) whose action attains the weighted q-quantile.
pub fn quantile_influence(net: &Network, actions: &DVector<f64>, q: f64) -> Result<DMatrix<f64>> {
    if !(0.0 < q && q < 1.0) {
        return Err(Error::Domain("quantile requires 0 < q < 1".into()));
    }
    if actions.len() != net.n {
        return Err(Error::Domain("action vector length mismatch".into()));
    }
    check_actions_finite(actions)?;
    let mut w = DMatrix::zeros(net.n, net.n);
    for i in 0..net.n {
        if net.isolate_mask[i] {
            continue;
        }
        let value = weighted_quantile(net, actions, i, q);
        let hits: Vec<usize> = net
            .neighbors(i)
            .filter(|&(j, _)| actions[j] == value)
            .map(|(j, _)| j)
            .collect();
        let share = 1.0 / hits.len() as f64;
        for j in hits {
            w[(i, j)] = share;
        }
    }
    Ok(w)
}

/// Central finite difference of the exposure in the preference parameter,
/// with step `h = step_rel * max(1, |θ|)`.
///
/// Falls back to a one-sided difference (flagged) when θ±h would leave the
/// family's domain. Supported for CES and smooth-max; the quantile q-slope is
/// available here too but is never placed in instrument menus by default.
pub fn dtheta_exposure(
    net: &Network,
    actions: &DVector<f64>,
    spec: &AggregatorSpec,
    step_rel: f64,
) -> Result<DthetaExposure> {
    match spec.family {
        Family::Ces | Family::SmoothMax | Family::Quantile => {}
        Family::Lim => {
            return Err(Error::Unsupported(
                "LIM has no preference parameter to differentiate".into(),
            ))
        }
    }
    if step_rel <= 0.0 {
        return Err(Error::Domain("finite-difference step must be positive".into()));
    }
    let theta = spec.theta;
    let h = step_rel * theta.abs().max(1.0);
    let up_ok = spec.theta_in_domain(theta + h);
    let dn_ok = spec.theta_in_domain(theta - h);
    let eval = |t: f64| -> Result<DVector<f64>> {
        Ok(exposure(net, actions, &spec.with_theta(t)?)?.values)
    };
    let (values, one_sided) = match (up_ok, dn_ok) {
        (true, true) => {
            let up = eval(theta + h)?;
            let dn = eval(theta - h)?;
            ((up - dn) / (2.0 * h), false)
        }
        (true, false) => {
            let up = eval(theta + h)?;
            let at = eval(theta)?;
            ((up - at) / h, true)
        }
        (false, true) => {
            let at = eval(theta)?;
            let dn = eval(theta - h)?;
            ((at - dn) / h, true)
        }
        (false, false) => {
            return Err(Error::Domain(format!(
                "theta {theta} +/- {h} leaves the {} domain on both sides",
                spec.family
            )))
        }
    };
    Ok(DthetaExposure { values, one_sided })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::row_normalize;
    use nalgebra::DMatrix;

    /// Node 0 observes peers 1..=k with the given weights.
    fn observer(weights: &[f64]) -> Network {
        let k = weights.len();
        let n = k + 1;
        let mut raw = DMatrix::zeros(n, n);
        for (j, w) in weights.iter().enumerate() {
            raw[(0, j + 1)] = *w;
        }
        row_normalize(raw).unwrap()
    }

    fn actions(obs: &[f64]) -> DVector<f64> {
        let mut v = vec![0.0];
        v.extend_from_slice(obs);
        DVector::from_vec(v)
    }

    #[test]
    fn ces_beta_one_e_mean() {
        let net = observer(&[0.5, 0.5]);
        let a = actions(&[2.0, 4.0]);
        let spec = AggregatorSpec::ces(1.0, 0.0).unwrap();
        let e = exposure(&net, &a, &spec).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_max_idempotent() {
        let net = observer(&[0.3, 0.7]);
        let a = actions(&[7.0, 7.0]);
        for kappa in [0.1, 1.0, 25.0] {
            let spec = AggregatorSpec::smooth_max(kappa).unwrap();
            let e = exposure(&net, &a, &spec).unwrap();
            assert!((e.values[0] - 7.0).abs() < 1e-10, "kappa={kappa}");
        }
    }

    #[test]
    fn quantile_median_of_three() {
        let net = observer(&[1.0, 1.0, 1.0]);
        let a = actions(&[1.0, 2.0, 3.0]);
        let spec = AggregatorSpec::quantile(0.5).unwrap();
        let e = exposure(&net, &a, &spec).unwrap();
        assert_eq!(e.values[0], 2.0);
    }

    #[test]
    fn ces_large_beta_approaches_max() {
        let net = observer(&[0.5, 0.5]);
        let a = actions(&[1.0, 5.0]);
        let spec = AggregatorSpec::ces(200.0, 0.0).unwrap();
        let e = exposure(&net, &a, &spec).unwrap();
        // limit oracle: max_j a_j
        assert!((e.values[0] - 5.0).abs() < 0.05);
    }

    #[test]
    fn ces_domain_violation_is_error() {
        let net = observer(&[1.0]);
        let a = actions(&[-2.0]);
        let spec = AggregatorSpec::ces(1.5, 1.0).unwrap();
        assert!(matches!(exposure(&net, &a, &spec), Err(Error::Domain(_))));
    }

    #[test]
    fn isolates_are_masked() {
        let net = observer(&[1.0]); // nodes 1 is a peer; node 1 itself is an isolate
        let a = actions(&[3.0]);
        let e = exposure(&net, &a, &AggregatorSpec::lim()).unwrap();
        assert!(e.defined_mask[0]);
        assert!(!e.defined_mask[1]);
        assert_eq!(e.values[1], 0.0);
    }

    #[test]
    fn lim_jacobian_is_adjacency() {
        let raw = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 2.0, 1.0, 0.0, 0.0, 3.0, 1.0, 0.0],
        );
        let net = row_normalize(raw).unwrap();
        let a = DVector::from_vec(vec![0.4, 1.2, -3.0]);
        let w = jacobian(&net, &a, &AggregatorSpec::lim()).unwrap();
        assert_eq!(w, net.weights);
    }

    #[test]
    fn ces_jacobian_hand_case() {
        // beta=2, c=0, peers (1,2) with weights (0.5,0.5):
        // Phi = sqrt(2.5), row = (0.5*Phi^{-1}, 0.5*Phi^{-1}*2)
        let net = observer(&[0.5, 0.5]);
        let a = actions(&[1.0, 2.0]);
        let spec = AggregatorSpec::ces(2.0, 0.0).unwrap();
        let w = jacobian(&net, &a, &spec).unwrap();
        let phi = 2.5_f64.sqrt();
        assert!((w[(0, 1)] - 0.5 / phi).abs() < 1e-12);
        assert!((w[(0, 2)] - 1.0 / phi).abs() < 1e-12);
    }

    #[test]
    fn smooth_max_jacobian_rows_sum_to_one() {
        let raw = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 2.0, 1.0, 1.0, 0.0, 4.0, 1.0, 1.0, 0.0],
        );
        let net = row_normalize(raw).unwrap();
        let a = DVector::from_vec(vec![0.5, 2.5, 1.5]);
        let w = jacobian(&net, &a, &AggregatorSpec::smooth_max(1.7).unwrap()).unwrap();
        for i in 0..3 {
            let s: f64 = w.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quantile_jacobian_unsupported() {
        let net = observer(&[1.0]);
        let a = actions(&[1.0]);
        let spec = AggregatorSpec::quantile(0.5).unwrap();
        assert!(matches!(
            jacobian(&net, &a, &spec),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn quantile_influence_cases() {
        // distinct actions: exactly one entry 1
        let net = observer(&[1.0, 1.0, 1.0]);
        let a = actions(&[1.0, 2.0, 3.0]);
        let w = quantile_influence(&net, &a, 0.5).unwrap();
        let row: Vec<f64> = w.row(0).iter().copied().collect();
        assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 1);

        // tie at the quantile value: split 0.5 each
        let a_tied = actions(&[2.0, 2.0, 5.0]);
        let w_tied = quantile_influence(&net, &a_tied, 0.5).unwrap();
        assert_eq!(w_tied[(0, 1)], 0.5);
        assert_eq!(w_tied[(0, 2)], 0.5);

        // cumulative-weight oracle: peers (1,2,3), weights (.2,.2,.6), q=.5
        let net_w = observer(&[0.2, 0.2, 0.6]);
        let a3 = actions(&[1.0, 2.0, 3.0]);
        let w3 = quantile_influence(&net_w, &a3, 0.5).unwrap();
        assert_eq!(w3[(0, 3)], 1.0);
    }

    #[test]
    fn dtheta_single_peer_is_zero() {
        let net = observer(&[1.0]);
        let a = actions(&[2.5]);
        for beta in [0.5, 1.2, 3.0] {
            let spec = AggregatorSpec::ces(beta, 0.5).unwrap();
            let d = dtheta_exposure(&net, &a, &spec, DEFAULT_FD_STEP).unwrap();
            assert!(d.values[0].abs() < 1e-9, "beta={beta}");
        }
    }

    #[test]
    fn dtheta_equal_peers_is_zero() {
        let net = observer(&[0.4, 0.6]);
        let a = actions(&[3.0, 3.0]);
        let spec = AggregatorSpec::smooth_max(2.0).unwrap();
        let d = dtheta_exposure(&net, &a, &spec, DEFAULT_FD_STEP).unwrap();
        assert!(d.values[0].abs() < 1e-9);
        assert!(!d.one_sided);
    }

    #[test]
    fn dtheta_matches_richardson_oracle() {
        // CES beta=1.2, peers (1,4), weights (0.5,0.5), c=0
        let net = observer(&[0.5, 0.5]);
        let a = actions(&[1.0, 4.0]);
        let spec = AggregatorSpec::ces(1.2, 0.0).unwrap();
        let d = dtheta_exposure(&net, &a, &spec, DEFAULT_FD_STEP).unwrap();

        // Richardson-extrapolated oracle on plain exposure evaluations.
        let phi = |beta: f64| -> f64 {
            let s = AggregatorSpec::ces(beta, 0.0).unwrap();
            exposure(&net, &a, &s).unwrap().values[0]
        };
        let h = 1e-3;
        let central = |h: f64| (phi(1.2 + h) - phi(1.2 - h)) / (2.0 * h);
        let oracle = (4.0 * central(h / 2.0) - central(h)) / 3.0;
        assert!(
            (d.values[0] - oracle).abs() < 1e-6,
            "got {} oracle {oracle}",
            d.values[0]
        );
    }

    #[test]
    fn dtheta_one_sided_near_domain_edge() {
        let net = observer(&[0.5, 0.5]);
        let a = actions(&[1.0, 4.0]);
        // kappa so small that kappa - h < 0 forces a one-sided stencil
        let spec = AggregatorSpec::smooth_max(5e-5).unwrap();
        let d = dtheta_exposure(&net, &a, &spec, DEFAULT_FD_STEP).unwrap();
        assert!(d.one_sided);
    }
}
