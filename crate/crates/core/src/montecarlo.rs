//! Monte Carlo harness: dispersion-bridge experiments, the two-star fixture,
//! and the replication loop producing accuracy/first-stage tables.
//!
//! Each replication draws networks, covariates, and shocks from seeded
//! substreams, solves the CES norm game to equilibrium, builds the exogenous
//! predictor, and estimates the peer coefficient under each instrument menu.
//! Replications are embarrassingly parallel; every stream is derived from
//! `(seed, n, β, replication, group, tag)`, so serial and parallel runs of
//! the same configuration agree bit for bit. Non-convergent equilibrium draws
//! are recorded and excluded from cell statistics.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aggregators::AggregatorSpec;
use crate::equilibrium::{solve_equilibrium, apply_exposure, StructuralParams};
use crate::error::{Error, Result};
use crate::estimate::{two_sls, EstimationResult};
use crate::geometry::{self, GeoBlocks};
use crate::netcore::{fmt_f64, Network, Panel};
use crate::par;
use crate::predictor::{predict, PredictorKind, PredictorSpec};
use crate::rng::{substream, tag};

// ---- Configuration -------------------------------------------------------

/// Instrument menus the harness compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Menu {
    /// One-step scalar instruments `[Φ(ŷ), ∂βΦ(ŷ)]`.
    Bruz,
    /// `P²X`, its β-derivative, and the hop-2 adjacency block on top of BRUZ.
    Geo,
    /// Every geometry block: steps to K, shells to H, torsion, and the
    /// preset extras.
    GeoFull,
}

impl Menu {
    pub fn label(&self) -> &'static str {
        match self {
            Menu::Bruz => "bruz",
            Menu::Geo => "geo",
            Menu::GeoFull => "geo_full",
        }
    }
}

fn one_or_many_usize<'de, D>(d: D) -> std::result::Result<Vec<usize>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum V {
        One(usize),
        Many(Vec<usize>),
    }
    Ok(match V::deserialize(d)? {
        V::One(v) => vec![v],
        V::Many(v) => v,
    })
}

fn one_or_many_f64<'de, D>(d: D) -> std::result::Result<Vec<f64>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum V {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match V::deserialize(d)? {
        V::One(v) => vec![v],
        V::Many(v) => v,
    })
}

/// Which network generator the harness draws groups from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    /// Two star blocks with equal hub covariates joined by bridge spokes
    /// ([`star_bridge`]); the configuration whose one-step menus collapse.
    Star,
    /// Two Erdős–Rényi blocks with expected degree `d_in`
    /// ([`dispersion_bridge`]).
    Er,
}

/// Positivity shift rule for the CES exposure inside the DGP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShiftRule {
    /// `max(0, 1 − min(Xγ+ζ+ε)) + slack`, recomputed per replication.
    Auto(AutoTag),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

/// Monte Carlo configuration; field names mirror the config file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    /// Total node counts; one table row per (n, β) pair.
    #[serde(deserialize_with = "one_or_many_usize")]
    pub n: Vec<usize>,
    /// CES curvatures of the exposure definition.
    #[serde(deserialize_with = "one_or_many_f64")]
    pub beta_fix: Vec<f64>,
    /// Nodes per group (n must be a multiple).
    pub group_size: usize,
    pub lambda0: f64,
    pub gamma0: Vec<f64>,
    pub sigma_eps: f64,
    pub zeta_scale: f64,
    pub replications: usize,
    pub seed: u64,
    pub menus: Vec<Menu>,
    pub design: DesignKind,
    pub predictor: PredictorKind,
    pub folds: usize,
    /// Equilibrium solver tolerance and iteration cap.
    pub tol: f64,
    pub max_iter: usize,
    /// Expected within-block degree.
    pub d_in: f64,
    /// Cross-block bridge edges per group.
    pub bridges: usize,
    /// Raw weight on bridge edges before row normalization.
    pub bridge_weight: f64,
    /// Covariate scale of the low-dispersion block.
    pub sigma_a: f64,
    /// Covariate scale of the high-dispersion block.
    pub sigma_b: f64,
    pub shift: ShiftRule,
    /// Slack added by the auto shift rule.
    pub shift_slack: f64,
    /// Draw ε = u_s + ν with a group-level component.
    pub correlated_shocks: bool,
    pub u_scale: f64,
    pub k_steps: usize,
    pub h_shells: usize,
    pub epsilon0: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n: vec![600],
            beta_fix: vec![0.8, 1.2, 1.6, 2.0],
            group_size: 60,
            lambda0: 0.9,
            gamma0: vec![0.0, 1.0],
            sigma_eps: 0.2,
            zeta_scale: 0.02,
            replications: 100,
            seed: 20260810,
            menus: vec![Menu::Bruz, Menu::Geo],
            design: DesignKind::Star,
            predictor: PredictorKind::CrossFit,
            folds: 5,
            tol: 1e-10,
            max_iter: 500,
            d_in: 6.0,
            bridges: 2,
            bridge_weight: 0.02,
            sigma_a: 1.25,
            sigma_b: 5.0,
            shift: ShiftRule::Auto(AutoTag::Auto),
            shift_slack: 12.0,
            correlated_shocks: false,
            u_scale: 0.5,
            k_steps: 3,
            h_shells: 4,
            epsilon0: geometry::DEFAULT_EPSILON0,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::Domain("replications must be >= 1".into()));
        }
        if self.n.is_empty() || self.beta_fix.is_empty() || self.menus.is_empty() {
            return Err(Error::Domain("n, beta_fix, and menus must be nonempty".into()));
        }
        for &n in &self.n {
            if n % self.group_size != 0 {
                return Err(Error::Domain(format!(
                    "n = {n} is not a multiple of group_size = {}",
                    self.group_size
                )));
            }
            if self.group_size < 8 {
                return Err(Error::Domain("group_size must be at least 8".into()));
            }
        }
        if self.gamma0.len() != 2 {
            return Err(Error::Domain(
                "gamma0 must have 2 entries (intercept, covariate)".into(),
            ));
        }
        if self.predictor == PredictorKind::CrossFit && self.folds < 2 {
            return Err(Error::Domain("cross-fitting requires folds >= 2".into()));
        }
        Ok(())
    }
}

// ---- Report ----------------------------------------------------------------

/// Influence-field summaries of the realized design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DesignDiagnostics {
    /// sd(w)/|mean(w)| of the endogenous exposure.
    pub exposure_cv: f64,
    /// Mean over nodes of the largest transport share max_j P_ij.
    pub pmax_mean: f64,
    /// 90th percentile of max_j P_ij.
    pub pmax_p90: f64,
    /// Coefficient of variation of the Jacobian row-sum intensity
    /// s_i = Σ_j g_ij ŷ_j^{β−1}.
    pub intensity_cv: f64,
}

/// One (n, β, menu) cell of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub n: usize,
    pub beta: f64,
    pub menu: String,
    pub bias_lambda: f64,
    pub rmse_lambda: f64,
    pub mean_partial_r2: f64,
    pub mean_f: f64,
    pub used_replications: usize,
    pub excluded_replications: usize,
    pub nonconverged_count: usize,
    /// Mean |λ|·L_Φ over converged replications (diagnostic; values at or
    /// above 1 void the uniqueness certificate but not the run).
    pub mean_contraction_bound: f64,
    pub contraction_warnings: usize,
    pub diagnostics: DesignDiagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RuntimeStats {
    pub total_seconds: f64,
    pub per_cell_seconds: Vec<f64>,
}

/// Full Monte Carlo report. Equality ignores the runtime block, which is the
/// only non-deterministic part.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub cells: Vec<McCell>,
    pub menus: Vec<String>,
    pub replications: usize,
    pub seed: u64,
    pub runtime: RuntimeStats,
}

impl PartialEq for McReport {
    fn eq(&self, other: &Self) -> bool {
        self.cells == other.cells
            && self.menus == other.menus
            && self.replications == other.replications
            && self.seed == other.seed
    }
}

// ---- Network generators ----------------------------------------------------

/// Parameters of the dispersion-bridge design.
#[derive(Debug, Clone, Copy)]
pub struct DispersionBridgeParams {
    pub d_in: f64,
    pub bridges: usize,
    /// Raw weight on each bridge edge before row normalization; small values
    /// let influence cross blocks without dominating the bridged rows.
    pub bridge_weight: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
}

/// Two blocks with different covariate dispersion joined by a few bridge
/// edges; ties are undirected and row-normalized. Regenerates with an
/// incremented sub-seed until both blocks are connected (100 attempts).
///
/// Returns the network and an `[intercept, x]` covariate matrix.
pub fn dispersion_bridge(
    n: usize,
    seed: u64,
    params: &DispersionBridgeParams,
) -> Result<(Network, DMatrix<f64>)> {
    if n < 8 {
        return Err(Error::Domain("dispersion-bridge design needs n >= 8".into()));
    }
    let n_a = n / 2;
    for attempt in 0..100u64 {
        let mut rng = substream(seed, &[tag::NETWORK, attempt]);
        let mut raw = DMatrix::zeros(n, n);
        let add_undirected = |raw: &mut DMatrix<f64>, i: usize, j: usize| {
            raw[(i, j)] = 1.0;
            raw[(j, i)] = 1.0;
        };
        for (start, end) in [(0, n_a), (n_a, n)] {
            let m = end - start;
            let p_edge = (params.d_in / (m.saturating_sub(1)) as f64).min(1.0);
            for i in start..end {
                for j in (i + 1)..end {
                    if rng.random::<f64>() < p_edge {
                        add_undirected(&mut raw, i, j);
                    }
                }
            }
        }
        let mut used: HashSet<(usize, usize)> = HashSet::new();
        let mut placed = 0usize;
        let mut guard = 0usize;
        while placed < params.bridges && guard < 10_000 {
            guard += 1;
            let a = rng.random_range(0..n_a);
            let b = rng.random_range(n_a..n);
            if used.insert((a, b)) {
                raw[(a, b)] = params.bridge_weight;
                raw[(b, a)] = params.bridge_weight;
                placed += 1;
            }
        }
        if !(block_connected(&raw, 0, n_a) && block_connected(&raw, n_a, n)) {
            continue;
        }

        let mut cov_rng = substream(seed, &[tag::COVARIATES, attempt]);
        let mut x = DMatrix::zeros(n, 2);
        for i in 0..n {
            let sigma = if i < n_a { params.sigma_a } else { params.sigma_b };
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
            x[(i, 0)] = 1.0;
            x[(i, 1)] = normal.sample(&mut cov_rng);
        }
        let net = Network::new(0, raw)?;
        return Ok((net, x));
    }
    Err(Error::Domain(format!(
        "dispersion-bridge generator: a block stayed disconnected after 100 attempts (n = {n}, d_in = {})",
        params.d_in
    )))
}

fn block_connected(raw: &DMatrix<f64>, start: usize, end: usize) -> bool {
    let m = end - start;
    if m == 0 {
        return false;
    }
    let mut seen = vec![false; m];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = stack.pop() {
        for j in 0..m {
            if !seen[j] && raw[(start + i, start + j)] > 0.0 {
                seen[j] = true;
                count += 1;
                stack.push(j);
            }
        }
    }
    count == m
}

/// Dispersion-bridge variant built from two star blocks.
///
/// Each block is a hub with `n/2 − 1` spokes; hub covariates are equal (the
/// common block mean 0), spoke covariates carry the block-specific scale, and
/// `b` bridge edges join random spokes across blocks. Spokes see a single hub
/// (plus a bridge partner at most), so one-step predicted norms are constant
/// and their β-slope vanishes, while hub outcomes respond to spoke covariates
/// two steps out — the collapse geometry the harness is built to exhibit.
pub fn star_bridge(
    n: usize,
    seed: u64,
    params: &DispersionBridgeParams,
) -> Result<(Network, DMatrix<f64>)> {
    if n < 8 {
        return Err(Error::Domain("star-bridge design needs n >= 8".into()));
    }
    let n_a = n / 2;
    let hub_a = 0usize;
    let hub_b = n_a;
    let mut raw = DMatrix::zeros(n, n);
    for i in 1..n_a {
        raw[(i, hub_a)] = 1.0;
        raw[(hub_a, i)] = 1.0;
    }
    for i in (n_a + 1)..n {
        raw[(i, hub_b)] = 1.0;
        raw[(hub_b, i)] = 1.0;
    }
    let mut rng = substream(seed, &[tag::NETWORK]);
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut placed = 0usize;
    let mut guard = 0usize;
    while placed < params.bridges && guard < 10_000 {
        guard += 1;
        let a = rng.random_range(1..n_a);
        let b = rng.random_range((n_a + 1)..n);
        if used.insert((a, b)) {
            raw[(a, b)] = params.bridge_weight;
            raw[(b, a)] = params.bridge_weight;
            placed += 1;
        }
    }
    let mut cov_rng = substream(seed, &[tag::COVARIATES]);
    let mut x = DMatrix::zeros(n, 2);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        if i == hub_a || i == hub_b {
            x[(i, 1)] = 0.0; // equal hub covariates
        } else {
            let sigma = if i < n_a { params.sigma_a } else { params.sigma_b };
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
            x[(i, 1)] = normal.sample(&mut cov_rng);
        }
    }
    let net = Network::new(0, raw)?;
    Ok((net, x))
}

/// Two disconnected stars in one group. Peripherals point at their hub with
/// weight 1; hubs spread weight 1/m over their peripherals.
///
/// Node order: hub A, peripherals A, hub B, peripherals B. Covariates are
/// `[1, x]` with deterministic distinct peripheral values; hub covariates are
/// equal when the flag is set (1.0 each), else 1.0 and 2.0.
pub fn two_star(m_a: usize, m_b: usize, equal_hub_covariates: bool) -> Result<(Network, DMatrix<f64>)> {
    if m_a < 2 || m_b < 2 {
        return Err(Error::Domain("two-star fixture needs at least 2 peripherals per hub".into()));
    }
    let n = m_a + m_b + 2;
    let hub_a = 0usize;
    let hub_b = m_a + 1;
    let mut raw = DMatrix::zeros(n, n);
    for k in 0..m_a {
        let i = 1 + k;
        raw[(i, hub_a)] = 1.0;
        raw[(hub_a, i)] = 1.0;
    }
    for k in 0..m_b {
        let i = hub_b + 1 + k;
        raw[(i, hub_b)] = 1.0;
        raw[(hub_b, i)] = 1.0;
    }
    let net = Network::new(0, raw)?;

    let mut x = DMatrix::zeros(n, 2);
    for i in 0..n {
        x[(i, 0)] = 1.0;
    }
    x[(hub_a, 1)] = 1.0;
    x[(hub_b, 1)] = if equal_hub_covariates { 1.0 } else { 2.0 };
    for k in 0..m_a {
        x[(1 + k, 1)] = 0.25 + 0.5 * k as f64;
    }
    for k in 0..m_b {
        x[(hub_b + 1 + k, 1)] = 0.5 + 0.5 * k as f64;
    }
    Ok((net, x))
}

/// Panel wrapper around [`two_star`].
pub fn two_star_panel(m_a: usize, m_b: usize, equal_hub_covariates: bool) -> Result<Panel> {
    let (net, x) = two_star(m_a, m_b, equal_hub_covariates)?;
    Panel::from_parts(vec![net], x, vec!["const".into(), "x1".into()], None)
}

// ---- Replication loop --------------------------------------------------------

#[derive(Clone)]
struct MenuRep {
    lambda_hat: f64,
    partial_r2: f64,
    f_stat: f64,
}

struct RepOutcome {
    /// One entry per menu; `Err` carries the failure reason.
    menus: Vec<std::result::Result<MenuRep, String>>,
    nonconverged: bool,
    contraction_bound: Option<f64>,
    diagnostics: Option<DesignDiagnostics>,
}

/// Excluded signature for one of the harness menus, stacked over the panel.
pub fn menu_signature(
    panel: &Panel,
    yhat: &DVector<f64>,
    spec: &AggregatorSpec,
    cfg: &McConfig,
    menu: Menu,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let (include, k) = match menu {
        Menu::Bruz => (GeoBlocks::none(), 2),
        Menu::Geo => (GeoBlocks::preset(), 2),
        Menu::GeoFull => (GeoBlocks::full(), cfg.k_steps),
    };
    geometry::panel_excluded(panel, yhat, spec, k, cfg.h_shells, cfg.epsilon0, include)
}

/// Influence-field diagnostics at the realized (ŷ, w).
fn design_diagnostics(
    panel: &Panel,
    yhat: &DVector<f64>,
    w: &DVector<f64>,
    spec: &AggregatorSpec,
) -> Result<DesignDiagnostics> {
    let mut pmax: Vec<f64> = Vec::new();
    let mut intensities: Vec<f64> = Vec::new();
    let beta = spec.theta;
    for (g, net) in panel.groups.iter().enumerate() {
        let local_yhat = panel.group_slice(yhat, g);
        let op = geometry::transport(net, &local_yhat, spec)?;
        for i in 0..net.n {
            if net.isolate_mask[i] {
                continue;
            }
            pmax.push(op.p.row(i).iter().copied().fold(0.0, f64::max));
            let s_i: f64 = net
                .neighbors(i)
                .map(|(j, gij)| gij * (local_yhat[j] + spec.shift).powf(beta - 1.0))
                .sum();
            intensities.push(s_i);
        }
    }
    let cv = |v: &[f64]| -> f64 {
        if v.is_empty() {
            return 0.0;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        if mean.abs() > 0.0 {
            var.sqrt() / mean.abs()
        } else {
            0.0
        }
    };
    pmax.sort_by(f64::total_cmp);
    let p90 = if pmax.is_empty() {
        0.0
    } else {
        pmax[((pmax.len() as f64 - 1.0) * 0.9).round() as usize]
    };
    let w_slice: Vec<f64> = w.iter().copied().collect();
    Ok(DesignDiagnostics {
        exposure_cv: cv(&w_slice),
        pmax_mean: pmax.iter().sum::<f64>() / pmax.len().max(1) as f64,
        pmax_p90: p90,
        intensity_cv: cv(&intensities),
    })
}

fn run_replication(cfg: &McConfig, n: usize, beta: f64, rep: usize) -> RepOutcome {
    let fail_all = |msg: String| RepOutcome {
        menus: vec![Err(msg); cfg.menus.len()],
        nonconverged: false,
        contraction_bound: None,
        diagnostics: None,
    };
    match replication_inner(cfg, n, beta, rep) {
        Ok(outcome) => outcome,
        Err(e) => fail_all(e.to_string()),
    }
}

fn replication_inner(cfg: &McConfig, n: usize, beta: f64, rep: usize) -> Result<RepOutcome> {
    let n_groups = n / cfg.group_size;
    let bits = beta.to_bits();
    let cell = &[n as u64, bits, rep as u64];

    // 1. networks and covariates
    let params = DispersionBridgeParams {
        d_in: cfg.d_in,
        bridges: cfg.bridges,
        bridge_weight: cfg.bridge_weight,
        sigma_a: cfg.sigma_a,
        sigma_b: cfg.sigma_b,
    };
    let mut groups = Vec::with_capacity(n_groups);
    let mut x = DMatrix::zeros(n, 2);
    for g in 0..n_groups {
        let sub = crate::rng::substream(cfg.seed, &[cell[0], cell[1], cell[2], g as u64])
            .random::<u64>();
        let (mut net, xg) = match cfg.design {
            DesignKind::Star => star_bridge(cfg.group_size, sub, &params)?,
            DesignKind::Er => dispersion_bridge(cfg.group_size, sub, &params)?,
        };
        net.group_id = g;
        x.view_mut((g * cfg.group_size, 0), (cfg.group_size, 2))
            .copy_from(&xg);
        groups.push(net);
    }
    let mut panel = Panel::from_parts(groups, x, vec!["const".into(), "x1".into()], None)?;

    // 2. shocks and group effects, then the equilibrium solve
    let gamma0 = DVector::from_vec(cfg.gamma0.clone());
    let mut zeta_rng = substream(cfg.seed, &[cell[0], cell[1], cell[2], tag::GROUP_EFFECTS]);
    let zeta_normal =
        Normal::new(0.0, cfg.zeta_scale).map_err(|e| Error::Domain(e.to_string()))?;
    let group_effects: Vec<f64> = (0..n_groups).map(|_| zeta_normal.sample(&mut zeta_rng)).collect();

    let mut shock_rng = substream(cfg.seed, &[cell[0], cell[1], cell[2], tag::SHOCKS]);
    let eps_normal = Normal::new(0.0, cfg.sigma_eps).map_err(|e| Error::Domain(e.to_string()))?;
    let mut shocks = DVector::from_fn(n, |_, _| eps_normal.sample(&mut shock_rng));
    if cfg.correlated_shocks {
        let u_normal = Normal::new(0.0, cfg.u_scale).map_err(|e| Error::Domain(e.to_string()))?;
        for g in 0..n_groups {
            let u = u_normal.sample(&mut shock_rng);
            for i in 0..cfg.group_size {
                shocks[g * cfg.group_size + i] += u;
            }
        }
    }

    let shift = match cfg.shift {
        ShiftRule::Fixed(c) => c,
        ShiftRule::Auto(_) => {
            let mut base = &panel.x * &gamma0 + &shocks;
            for g in 0..n_groups {
                for i in 0..cfg.group_size {
                    base[g * cfg.group_size + i] += group_effects[g];
                }
            }
            (1.0 - base.min()).max(0.0) + cfg.shift_slack
        }
    };
    let spec = AggregatorSpec::ces(beta, shift)?;
    let sparams = StructuralParams {
        gamma: gamma0.clone(),
        lambda: cfg.lambda0,
        group_effects,
        sigma_eps: cfg.sigma_eps,
        aggregator: spec,
    };
    let (y, report) = solve_equilibrium(&panel, &sparams, &shocks, cfg.tol, cfg.max_iter)?;
    if !report.converged {
        return Ok(RepOutcome {
            menus: vec![Err("equilibrium did not converge".into()); cfg.menus.len()],
            nonconverged: true,
            contraction_bound: report.contraction_bound,
            diagnostics: None,
        });
    }
    panel.y = Some(y.clone());

    // 3. exogenous predictor
    let pred_spec = match cfg.predictor {
        PredictorKind::Oracle => PredictorSpec::oracle(gamma0.clone()),
        PredictorKind::Ols => PredictorSpec::ols(),
        PredictorKind::CrossFit => PredictorSpec::cross_fit(cfg.folds)?,
    };
    let pred_seed = substream(cfg.seed, &[cell[0], cell[1], cell[2], tag::PREDICTOR]).random::<u64>();
    let yhat = predict(&panel, &pred_spec, pred_seed)?;

    // 4. endogenous exposure at the solved outcomes
    let w = apply_exposure(&panel, &y, &spec)?;
    let diagnostics = design_diagnostics(&panel, &yhat, &w, &spec).ok();

    // 5. per-menu estimation
    let menus = cfg
        .menus
        .iter()
        .map(|&menu| {
            let run = || -> Result<MenuRep> {
                let (z, names) = menu_signature(&panel, &yhat, &spec, cfg, menu)?;
                let res: EstimationResult =
                    two_sls(&y, &panel.x, &w, &z, &names, &panel.cluster_id)?;
                Ok(MenuRep {
                    lambda_hat: res.lambda_hat,
                    partial_r2: res.first_stage.partial_r2,
                    f_stat: res.first_stage.f_stat,
                })
            };
            run().map_err(|e| e.to_string())
        })
        .collect();

    Ok(RepOutcome {
        menus,
        nonconverged: false,
        contraction_bound: report.contraction_bound,
        diagnostics,
    })
}

/// Runs the full replication loop over the (n, β) grid.
pub fn run_mc(cfg: &McConfig) -> Result<McReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut cells = Vec::new();
    let mut per_cell_seconds = Vec::new();
    for &n in &cfg.n {
        for &beta in &cfg.beta_fix {
            let cell_start = Instant::now();
            let outcomes = par::map_range(cfg.replications, |rep| run_replication(cfg, n, beta, rep));

            let nonconverged = outcomes.iter().filter(|o| o.nonconverged).count();
            let bounds: Vec<f64> = outcomes.iter().filter_map(|o| o.contraction_bound).collect();
            let mean_bound = bounds.iter().sum::<f64>() / bounds.len().max(1) as f64;
            let warnings = bounds.iter().filter(|&&b| b >= 1.0).count();
            let diags: Vec<DesignDiagnostics> =
                outcomes.iter().filter_map(|o| o.diagnostics).collect();
            let mean_diag = DesignDiagnostics {
                exposure_cv: mean_of(&diags, |d| d.exposure_cv),
                pmax_mean: mean_of(&diags, |d| d.pmax_mean),
                pmax_p90: mean_of(&diags, |d| d.pmax_p90),
                intensity_cv: mean_of(&diags, |d| d.intensity_cv),
            };

            for (mi, &menu) in cfg.menus.iter().enumerate() {
                let ok: Vec<&MenuRep> = outcomes
                    .iter()
                    .filter_map(|o| o.menus[mi].as_ref().ok())
                    .collect();
                let used = ok.len();
                let lambda_mean = ok.iter().map(|r| r.lambda_hat).sum::<f64>() / used.max(1) as f64;
                let bias = lambda_mean - cfg.lambda0;
                let mse = ok
                    .iter()
                    .map(|r| (r.lambda_hat - cfg.lambda0).powi(2))
                    .sum::<f64>()
                    / used.max(1) as f64;
                cells.push(McCell {
                    n,
                    beta,
                    menu: menu.label().to_string(),
                    bias_lambda: bias,
                    rmse_lambda: mse.sqrt(),
                    mean_partial_r2: ok.iter().map(|r| r.partial_r2).sum::<f64>()
                        / used.max(1) as f64,
                    mean_f: ok.iter().map(|r| r.f_stat).sum::<f64>() / used.max(1) as f64,
                    used_replications: used,
                    excluded_replications: cfg.replications - used,
                    nonconverged_count: nonconverged,
                    mean_contraction_bound: mean_bound,
                    contraction_warnings: warnings,
                    diagnostics: mean_diag,
                });
            }
            per_cell_seconds.push(cell_start.elapsed().as_secs_f64());
        }
    }
    Ok(McReport {
        cells,
        menus: cfg.menus.iter().map(|m| m.label().to_string()).collect(),
        replications: cfg.replications,
        seed: cfg.seed,
        runtime: RuntimeStats {
            total_seconds: start.elapsed().as_secs_f64(),
            per_cell_seconds,
        },
    })
}

fn mean_of<T, F: Fn(&T) -> f64>(v: &[T], f: F) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(f).sum::<f64>() / v.len() as f64
}

// ---- Emission -----------------------------------------------------------------

/// Writes `table1.csv` (λ accuracy), `table2.csv` (first-stage strength), and
/// `report.json` under `dir`. Headers carry one bias/rmse (resp. R²/F) column
/// pair per menu; an empty report emits header-only tables.
pub fn emit_tables(report: &McReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let t1 = dir.join("table1.csv");
    let t2 = dir.join("table2.csv");
    let rj = dir.join("report.json");

    // group cells by (n, beta) preserving order
    let mut keys: Vec<(usize, f64)> = Vec::new();
    for c in &report.cells {
        if !keys.iter().any(|&(n, b)| n == c.n && b == c.beta) {
            keys.push((c.n, c.beta));
        }
    }
    let find = |n: usize, beta: f64, menu: &str| -> Option<&McCell> {
        report
            .cells
            .iter()
            .find(|c| c.n == n && c.beta == beta && c.menu == menu)
    };

    let mut f1 = std::fs::File::create(&t1)?;
    let mut header1 = vec!["n".to_string(), "beta".to_string()];
    for m in &report.menus {
        header1.push(format!("bias_{m}"));
        header1.push(format!("rmse_{m}"));
    }
    writeln!(f1, "{}", header1.join(","))?;
    for &(n, beta) in &keys {
        let mut row = vec![n.to_string(), format_beta(beta)];
        for m in &report.menus {
            match find(n, beta, m) {
                Some(c) => {
                    row.push(fmt_f64(c.bias_lambda));
                    row.push(fmt_f64(c.rmse_lambda));
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        writeln!(f1, "{}", row.join(","))?;
    }

    let mut f2 = std::fs::File::create(&t2)?;
    let mut header2 = vec!["n".to_string(), "beta".to_string()];
    for m in &report.menus {
        header2.push(format!("r2_{m}"));
        header2.push(format!("f_{m}"));
    }
    writeln!(f2, "{}", header2.join(","))?;
    for &(n, beta) in &keys {
        let mut row = vec![n.to_string(), format_beta(beta)];
        for m in &report.menus {
            match find(n, beta, m) {
                Some(c) => {
                    row.push(fmt_f64(c.mean_partial_r2));
                    row.push(fmt_f64(c.mean_f));
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        writeln!(f2, "{}", row.join(","))?;
    }

    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Estimation(format!("report serialization failed: {e}")))?;
    std::fs::write(&rj, json)?;
    Ok(vec![t1, t2, rj])
}

fn format_beta(beta: f64) -> String {
    format!("{beta}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregators::{dtheta_exposure, exposure};

    #[test]
    fn dispersion_bridge_is_deterministic() {
        let params = DispersionBridgeParams {
            d_in: 6.0,
            bridges: 2,
            bridge_weight: 1.0,
            sigma_a: 0.5,
            sigma_b: 2.0,
        };
        let (a, xa) = dispersion_bridge(30, 7, &params).unwrap();
        let (b, xb) = dispersion_bridge(30, 7, &params).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(xa, xb);
    }

    #[test]
    fn dispersion_bridge_zero_bridges_disconnects_blocks() {
        let params = DispersionBridgeParams {
            d_in: 6.0,
            bridges: 0,
            bridge_weight: 1.0,
            sigma_a: 0.5,
            sigma_b: 2.0,
        };
        let (net, _) = dispersion_bridge(24, 3, &params).unwrap();
        let n_a = 12;
        for i in 0..n_a {
            for j in n_a..24 {
                assert_eq!(net.weights[(i, j)], 0.0);
                assert_eq!(net.weights[(j, i)], 0.0);
            }
        }
    }

    #[test]
    fn dispersion_bridge_block_scales() {
        let params = DispersionBridgeParams {
            d_in: 6.0,
            bridges: 2,
            bridge_weight: 1.0,
            sigma_a: 0.5,
            sigma_b: 2.0,
        };
        // sampling oracle over many seeds: block-B sd exceeds block-A by
        // roughly the configured ratio
        let mut sd_a = 0.0;
        let mut sd_b = 0.0;
        let reps = 100;
        for seed in 0..reps {
            let (_, x) = dispersion_bridge(60, seed, &params).unwrap();
            let col: Vec<f64> = (0..60).map(|i| x[(i, 1)]).collect();
            let sd = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
            };
            sd_a += sd(&col[..30]);
            sd_b += sd(&col[30..]);
        }
        sd_a /= reps as f64;
        sd_b /= reps as f64;
        let ratio = sd_b / sd_a;
        assert!((ratio - 4.0).abs() / 4.0 < 0.2, "ratio {ratio}");
    }

    #[test]
    fn two_star_construction() {
        let (net, x) = two_star(5, 5, true).unwrap();
        assert_eq!(net.n, 12);
        // peripheral rows one-hot on their hub
        for k in 0..5 {
            assert_eq!(net.weights[(1 + k, 0)], 1.0);
            assert_eq!(net.weights[(7 + k, 6)], 1.0);
        }
        // hub rows spread 1/m
        for k in 0..5 {
            assert!((net.weights[(0, 1 + k)] - 0.2).abs() < 1e-15);
        }
        assert_eq!(x[(0, 1)], x[(6, 1)]);
    }

    #[test]
    fn two_star_peripheral_collapse() {
        let panel = two_star_panel(5, 5, true).unwrap();
        let gamma = DVector::from_vec(vec![0.0, 1.0]);
        let yhat = &panel.x * &gamma;
        let spec = AggregatorSpec::ces(1.4, 0.0).unwrap();
        let net = &panel.groups[0];
        let d = dtheta_exposure(net, &yhat, &spec, 1e-4).unwrap();
        let phi = exposure(net, &yhat, &spec).unwrap().values;
        for k in 0..5 {
            assert!(d.values[1 + k].abs() < 1e-10);
            assert!((phi[1 + k] - phi[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn run_mc_is_deterministic() {
        let cfg = McConfig {
            n: vec![120],
            beta_fix: vec![1.2],
            group_size: 60,
            replications: 3,
            folds: 2,
            ..Default::default()
        };
        let a = run_mc(&cfg).unwrap();
        let b = run_mc(&cfg).unwrap();
        assert_eq!(a, b, "same config+seed must give identical reports");
    }

    #[test]
    fn run_mc_null_dgp_lambda_near_zero() {
        let cfg = McConfig {
            n: vec![120],
            beta_fix: vec![1.2],
            group_size: 60,
            replications: 5,
            lambda0: 0.0,
            folds: 2,
            menus: vec![Menu::Geo],
            ..Default::default()
        };
        let report = run_mc(&cfg).unwrap();
        let cell = &report.cells[0];
        assert!(cell.used_replications > 0);
        assert!(
            cell.bias_lambda.abs() < 0.5,
            "null DGP bias {}",
            cell.bias_lambda
        );
    }

    #[test]
    fn cell_accounting_adds_up() {
        let cfg = McConfig {
            n: vec![120],
            beta_fix: vec![0.8, 1.6],
            group_size: 60,
            replications: 4,
            folds: 2,
            ..Default::default()
        };
        let report = run_mc(&cfg).unwrap();
        for cell in &report.cells {
            assert_eq!(
                cell.used_replications + cell.excluded_replications,
                cfg.replications
            );
            assert!(cell.rmse_lambda + 1e-12 >= cell.bias_lambda.abs());
        }
    }

    #[test]
    fn emit_tables_shapes() {
        let dir = tempfile::tempdir().unwrap();
        // empty report: header-only files
        let empty = McReport {
            cells: vec![],
            menus: vec!["bruz".into(), "geo".into()],
            replications: 0,
            seed: 0,
            runtime: RuntimeStats::default(),
        };
        emit_tables(&empty, dir.path()).unwrap();
        let t1 = std::fs::read_to_string(dir.path().join("table1.csv")).unwrap();
        assert_eq!(t1.lines().count(), 1);
        assert_eq!(t1.trim(), "n,beta,bias_bruz,rmse_bruz,bias_geo,rmse_geo");

        // single cell: one data row
        let one = McReport {
            cells: vec![McCell {
                n: 600,
                beta: 1.2,
                menu: "bruz".into(),
                bias_lambda: 0.01,
                rmse_lambda: 0.2,
                mean_partial_r2: 0.004,
                mean_f: 2.0,
                used_replications: 10,
                excluded_replications: 0,
                nonconverged_count: 0,
                mean_contraction_bound: 0.5,
                contraction_warnings: 0,
                diagnostics: DesignDiagnostics::default(),
            }],
            menus: vec!["bruz".into()],
            replications: 10,
            seed: 1,
            runtime: RuntimeStats::default(),
        };
        emit_tables(&one, dir.path()).unwrap();
        let t1 = std::fs::read_to_string(dir.path().join("table1.csv")).unwrap();
        assert_eq!(t1.lines().count(), 2);
        let t2 = std::fs::read_to_string(dir.path().join("table2.csv")).unwrap();
        assert!(t2.lines().next().unwrap().contains("r2_bruz"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = McConfig::default();
        cfg.n = vec![100];
        cfg.group_size = 60;
        assert!(cfg.validate().is_err(), "n not a multiple of group_size");
        let mut cfg2 = McConfig::default();
        cfg2.replications = 0;
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn config_parses_from_toml() {
        let text = r#"
            n = 600
            beta_fix = [0.8, 1.2]
            replications = 7
            seed = 99
            menus = ["bruz", "geo", "geo-full"]
            predictor = "crossfit"
            shift = "auto"
        "#;
        let cfg: McConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.n, vec![600]);
        assert_eq!(cfg.beta_fix, vec![0.8, 1.2]);
        assert_eq!(cfg.replications, 7);
        assert_eq!(cfg.menus, vec![Menu::Bruz, Menu::Geo, Menu::GeoFull]);
        assert_eq!(cfg.shift, ShiftRule::Auto(AutoTag::Auto));

        let fixed: McConfig = toml::from_str("shift = 3.5").unwrap();
        assert_eq!(fixed.shift, ShiftRule::Fixed(3.5));
    }
}
