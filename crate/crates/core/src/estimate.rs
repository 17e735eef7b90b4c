//! 2SLS/GMM estimation of (γ, λ) with cluster-robust inference.
//!
//! The endogenous regressor is the peer exposure; excluded instruments come
//! from a one-step or geometry-augmented signature. Conventions:
//!
//! - coefficient order is `[γ..., λ]` (λ last),
//! - the cluster sandwich uses the score-sum formula with small-sample
//!   factor `G/(G−1)·(N−1)/(N−K)`,
//! - first-stage partial R² and F partial out the included exogenous X;
//!   the homoskedastic F is the headline value, the cluster-robust Wald
//!   variant is reported alongside,
//! - GMM is two-step: identity weighting on RMS-standardized moments, then
//!   the clustered moment covariance; the profile criterion is the step-two
//!   objective (Hansen J) at the inner optimum.
//!
//! Excluded columns that are absorbed by X or nearly collinear with an
//! earlier column (|corr| > 0.9999 after partialling) are dropped with a
//! warning, keeping the first-listed column.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::par;

/// Pairwise absolute correlation beyond this drops the later column.
const COLLINEARITY_CUTOFF: f64 = 0.9999;

/// First-stage strength diagnostics for the endogenous exposure.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FirstStage {
    /// Partial R² of the excluded instruments after partialling X.
    pub partial_r2: f64,
    /// Homoskedastic joint F on the excluded coefficients.
    pub f_stat: f64,
    /// Cluster-robust Wald/m variant of the F statistic.
    pub f_stat_cluster: Option<f64>,
    /// Excluded instruments that survived the collinearity guard.
    pub excluded_count: usize,
}

/// Point estimates, covariance, and diagnostics from one estimation call.
#[derive(Debug, Clone)]
pub struct EstimationResult {
    /// Coefficients on the included exogenous columns.
    pub gamma_hat: DVector<f64>,
    /// Peer-effect coefficient.
    pub lambda_hat: f64,
    /// Cluster-robust covariance of `[γ..., λ]`; `None` when inference is
    /// unavailable (fewer than 2 clusters).
    pub vcov: Option<DMatrix<f64>>,
    pub se_lambda: Option<f64>,
    pub first_stage: FirstStage,
    /// Hansen J (GMM only).
    pub j_stat: Option<f64>,
    /// Preference parameter the exposure/instruments were built with.
    pub theta_used: Option<f64>,
    pub n_used: usize,
    pub warnings: Vec<String>,
}

impl EstimationResult {
    pub fn se_of(&self, idx: usize) -> Option<f64> {
        self.vcov.as_ref().map(|v| v[(idx, idx)].max(0.0).sqrt())
    }
}

/// Profile of the GMM criterion over a θ grid.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ProfileTrace {
    pub grid: Vec<f64>,
    /// Step-two GMM objective per θ (NaN where estimation failed).
    pub criterion: Vec<f64>,
    pub lambda_path: Vec<f64>,
    pub errors: Vec<Option<String>>,
    pub argmin: f64,
    /// Criterion range below 1e-6·(1+min): θ is not distinguished.
    pub flat: bool,
}

// ---- Small linear-algebra helpers ---------------------------------------

fn lstsq(x: &DMatrix<f64>, rhs: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let xtx = x.transpose() * x;
    let xtr = x.transpose() * rhs;
    xtx.cholesky()
        .map(|ch| ch.solve(&xtr))
        .ok_or_else(|| Error::Rank(format!("{what}: cross-product singular")))
}

/// Residuals of each `rhs` column after projecting on `x`.
fn partial_out(x: &DMatrix<f64>, rhs: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let coef = lstsq(x, rhs, what)?;
    Ok(rhs - x * coef)
}

fn column_rms(m: &DMatrix<f64>, j: usize) -> f64 {
    (m.column(j).norm_squared() / m.nrows() as f64).sqrt()
}

/// Cluster score sums `s_g = Σ_{i∈g} u_i · row_i` for the given design.
fn cluster_scores(design: &DMatrix<f64>, resid: &DVector<f64>, cluster_id: &[usize]) -> Vec<DVector<f64>> {
    let k = design.ncols();
    let n_clusters = cluster_id.iter().copied().max().map_or(0, |m| m + 1);
    let mut scores = vec![DVector::zeros(k); n_clusters];
    for i in 0..design.nrows() {
        let g = cluster_id[i];
        for c in 0..k {
            scores[g][c] += design[(i, c)] * resid[i];
        }
    }
    scores
}

fn n_distinct_clusters(cluster_id: &[usize]) -> usize {
    let mut seen = std::collections::HashSet::new();
    cluster_id.iter().for_each(|&c| {
        seen.insert(c);
    });
    seen.len()
}

// ---- Collinearity guard --------------------------------------------------

struct GuardedInstruments {
    z: DMatrix<f64>,
    names: Vec<String>,
    warnings: Vec<String>,
}

/// Drops excluded columns absorbed by X (partialled column ~ 0) and later
/// columns nearly collinear with an earlier one. Keeps the first listed.
fn guard_excluded(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    names: &[String],
) -> Result<GuardedInstruments> {
    let z_tilde = partial_out(x, z, "collinearity guard")?;
    let n = z.nrows();
    let m = z.ncols();
    let mut kept: Vec<usize> = Vec::new();
    let mut warnings = Vec::new();
    let name_of = |j: usize| -> String {
        names
            .get(j)
            .cloned()
            .unwrap_or_else(|| format!("z{}", j + 1))
    };
    for j in 0..m {
        let raw_scale = column_rms(z, j);
        let tilde_scale = column_rms(&z_tilde, j);
        if tilde_scale <= 1e-10 * (1.0 + raw_scale) {
            warnings.push(format!(
                "excluded instrument '{}' dropped: absorbed by included exogenous columns",
                name_of(j)
            ));
            continue;
        }
        let mut collinear_with = None;
        for &a in &kept {
            let corr = z_tilde.column(a).dot(&z_tilde.column(j))
                / (z_tilde.column(a).norm() * z_tilde.column(j).norm());
            if corr.abs() > COLLINEARITY_CUTOFF {
                collinear_with = Some(a);
                break;
            }
        }
        if let Some(a) = collinear_with {
            warnings.push(format!(
                "excluded instrument '{}' dropped: |corr| > {COLLINEARITY_CUTOFF} with '{}' after partialling",
                name_of(j),
                name_of(a)
            ));
            continue;
        }
        kept.push(j);
    }
    if kept.is_empty() {
        return Err(Error::Rank(
            "no excluded instruments survive the collinearity guard".into(),
        ));
    }
    let mut zk = DMatrix::zeros(n, kept.len());
    let mut kept_names = Vec::with_capacity(kept.len());
    for (c, &j) in kept.iter().enumerate() {
        zk.set_column(c, &z.column(j).into_owned());
        kept_names.push(name_of(j));
    }
    Ok(GuardedInstruments {
        z: zk,
        names: kept_names,
        warnings,
    })
}

// ---- First stage ----------------------------------------------------------

/// Partial R² and joint F of the excluded instruments for the endogenous
/// exposure, after partialling out the included exogenous X.
pub fn first_stage_diagnostics(
    endogenous: &DVector<f64>,
    x: &DMatrix<f64>,
    z_excluded: &DMatrix<f64>,
    cluster_id: &[usize],
) -> Result<FirstStage> {
    let n = endogenous.len();
    if x.nrows() != n || z_excluded.nrows() != n || cluster_id.len() != n {
        return Err(Error::Domain("first stage: row count mismatch".into()));
    }
    let m = z_excluded.ncols();
    let p = x.ncols();
    if m == 0 {
        return Err(Error::Domain("first stage needs excluded instruments".into()));
    }

    let w_mat = DMatrix::from_column_slice(n, 1, endogenous.as_slice());
    let w_tilde = partial_out(x, &w_mat, "first stage exposure")?.column(0).into_owned();
    let z_tilde = partial_out(x, z_excluded, "first stage instruments")?;

    let rss_restricted = w_tilde.norm_squared();
    let coef = lstsq(&z_tilde, &DMatrix::from_column_slice(n, 1, w_tilde.as_slice()), "first stage")?;
    let fitted = &z_tilde * &coef;
    let resid = &w_tilde - fitted.column(0).into_owned();
    let rss_unrestricted = resid.norm_squared();

    let partial_r2 = if rss_restricted > 0.0 {
        ((rss_restricted - rss_unrestricted) / rss_restricted).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let dof_resid = n.saturating_sub(p + m);
    let f_stat = if dof_resid > 0 && rss_unrestricted > 0.0 {
        ((rss_restricted - rss_unrestricted) / m as f64) / (rss_unrestricted / dof_resid as f64)
    } else {
        f64::INFINITY
    };

    // Cluster-robust Wald variant on the excluded coefficients.
    let f_stat_cluster = cluster_wald(&z_tilde, &coef.column(0).into_owned(), &resid, cluster_id, p);

    Ok(FirstStage {
        partial_r2,
        f_stat,
        f_stat_cluster,
        excluded_count: m,
    })
}

fn cluster_wald(
    z_tilde: &DMatrix<f64>,
    coef: &DVector<f64>,
    resid: &DVector<f64>,
    cluster_id: &[usize],
    p_partialled: usize,
) -> Option<f64> {
    let g = n_distinct_clusters(cluster_id);
    if g < 2 {
        return None;
    }
    let n = z_tilde.nrows();
    let m = z_tilde.ncols();
    let k = p_partialled + m;
    let a = (z_tilde.transpose() * z_tilde).cholesky()?.inverse();
    let scores = cluster_scores(z_tilde, resid, cluster_id);
    let mut meat = DMatrix::zeros(m, m);
    for s in &scores {
        meat += s * s.transpose();
    }
    let dof = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k as f64));
    let v = dof * &a * meat * &a;
    let v_inv = v.cholesky()?.inverse();
    let wald = (coef.transpose() * v_inv * coef)[(0, 0)];
    Some(wald / m as f64)
}

// ---- 2SLS -----------------------------------------------------------------

/// Two-stage least squares of `y` on `[X, endogenous]` with excluded
/// instruments `z_excluded`; cluster-robust sandwich covariance.
pub fn two_sls(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    endogenous: &DVector<f64>,
    z_excluded: &DMatrix<f64>,
    z_names: &[String],
    cluster_id: &[usize],
) -> Result<EstimationResult> {
    let n = y.len();
    if x.nrows() != n || endogenous.len() != n || z_excluded.nrows() != n || cluster_id.len() != n {
        return Err(Error::Domain("2SLS: row count mismatch".into()));
    }
    if z_excluded.ncols() == 0 {
        return Err(Error::Domain(
            "2SLS needs at least as many excluded instruments as endogenous regressors (1)".into(),
        ));
    }
    for v in y.iter().chain(endogenous.iter()).chain(z_excluded.iter()) {
        if !v.is_finite() {
            return Err(Error::Domain("2SLS: non-finite value in inputs".into()));
        }
    }
    let guarded = guard_excluded(x, z_excluded, z_names)?;
    let mut warnings = guarded.warnings.clone();

    let p = x.ncols();
    let k = p + 1;
    let m = guarded.z.ncols();

    // Full instrument set [X, Z]; regressors [X, w].
    let mut z_full = DMatrix::zeros(n, p + m);
    z_full.view_mut((0, 0), (n, p)).copy_from(x);
    z_full.view_mut((0, p), (n, m)).copy_from(&guarded.z);
    let mut w_full = DMatrix::zeros(n, k);
    w_full.view_mut((0, 0), (n, p)).copy_from(x);
    w_full.set_column(p, endogenous);

    let proj_coef = lstsq(&z_full, &w_full, "2SLS first-stage projection").map_err(|_| {
        Error::Rank(format!(
            "singular first-stage cross-product; instruments: {}",
            guarded.names.join(", ")
        ))
    })?;
    let w_hat = &z_full * proj_coef;

    let wtw = w_hat.transpose() * &w_hat;
    let wty = w_hat.transpose() * y;
    let a_inv = wtw
        .clone()
        .cholesky()
        .ok_or_else(|| {
            Error::Rank(format!(
                "second-stage cross-product singular; instruments: {}",
                guarded.names.join(", ")
            ))
        })?
        .inverse();
    let beta = &a_inv * wty;

    // Residuals at the original regressors.
    let resid = y - &w_full * &beta;

    let g = n_distinct_clusters(cluster_id);
    let (vcov, se_lambda) = if g < 2 {
        warnings.push("fewer than 2 clusters: cluster-robust inference unavailable".into());
        (None, None)
    } else {
        let scores = cluster_scores(&w_hat, &resid, cluster_id);
        let mut meat = DMatrix::zeros(k, k);
        for s in &scores {
            meat += s * s.transpose();
        }
        let dof = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k as f64));
        let mut v = dof * &a_inv * meat * &a_inv;
        // symmetrize fp noise
        v = (&v + v.transpose()) * 0.5;
        let se = v[(k - 1, k - 1)].max(0.0).sqrt();
        (Some(v), Some(se))
    };

    let first_stage = first_stage_diagnostics(endogenous, x, &guarded.z, cluster_id)?;

    Ok(EstimationResult {
        gamma_hat: beta.rows(0, p).into_owned(),
        lambda_hat: beta[p],
        vcov,
        se_lambda,
        first_stage,
        j_stat: None,
        theta_used: None,
        n_used: n,
        warnings,
    })
}

// ---- GMM -------------------------------------------------------------------

/// Options for the outer θ search in [`gmm`].
#[derive(Debug, Clone)]
pub struct GmmOptions {
    /// Domain of the preference parameter.
    pub theta_bounds: (f64, f64),
    /// Refinement rounds for the outer search.
    pub max_outer: usize,
    /// Stop when the objective improves by less than this (relative).
    pub obj_tol: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            theta_bounds: (0.05, 4.0),
            max_outer: 6,
            obj_tol: 1e-8,
        }
    }
}

/// Two-step GMM at a fixed θ. Returns the estimate and the step-two
/// objective (Hansen J), which doubles as the profile criterion.
pub fn gmm_at_theta(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    endogenous: &DVector<f64>,
    z_excluded: &DMatrix<f64>,
    z_names: &[String],
    cluster_id: &[usize],
    theta: f64,
) -> Result<EstimationResult> {
    let n = y.len();
    if x.nrows() != n || endogenous.len() != n || z_excluded.nrows() != n {
        return Err(Error::Domain("GMM: row count mismatch".into()));
    }
    let guarded = guard_excluded(x, z_excluded, z_names)?;
    let mut warnings = guarded.warnings.clone();

    let p = x.ncols();
    let k = p + 1;
    let m = guarded.z.ncols();
    let q = p + m;

    let mut z_full = DMatrix::zeros(n, q);
    z_full.view_mut((0, 0), (n, p)).copy_from(x);
    z_full.view_mut((0, p), (n, m)).copy_from(&guarded.z);
    let mut w_full = DMatrix::zeros(n, k);
    w_full.view_mut((0, 0), (n, p)).copy_from(x);
    w_full.set_column(p, endogenous);

    let ztw = z_full.transpose() * &w_full; // q×k
    let zty = z_full.transpose() * y; // q

    // Step 1: identity weighting on RMS-standardized moments.
    let mut w1 = DMatrix::zeros(q, q);
    for j in 0..q {
        let rms = column_rms(&z_full, j).max(1e-300);
        w1[(j, j)] = 1.0 / (rms * rms);
    }
    let b1 = solve_gmm(&ztw, &zty, &w1, "GMM step 1")?;
    let resid1 = y - &w_full * &b1;

    // Step 2: clustered moment covariance.
    let (s2, s_warn) = moment_covariance(&z_full, &resid1, cluster_id);
    if let Some(w) = s_warn {
        warnings.push(w);
    }
    let w2 = invert_psd(&s2).ok_or_else(|| {
        Error::Rank("GMM step 2: clustered moment covariance not invertible".into())
    })?;
    let b2 = solve_gmm(&ztw, &zty, &w2, "GMM step 2")?;
    let resid2 = y - &w_full * &b2;

    let gbar = (z_full.transpose() * &resid2) / n as f64;
    let j_stat = n as f64 * (gbar.transpose() * &w2 * &gbar)[(0, 0)];

    // Efficient-GMM covariance (Γ' S⁻¹ Γ)⁻¹ / n with the small-sample factor.
    let g = n_distinct_clusters(cluster_id);
    let (vcov, se_lambda) = if g < 2 {
        warnings.push("fewer than 2 clusters: cluster-robust inference unavailable".into());
        (None, None)
    } else {
        let gamma_mat = &ztw / n as f64;
        let bread = (gamma_mat.transpose() * &w2 * gamma_mat)
            .cholesky()
            .map(|c| c.inverse());
        match bread {
            Some(b) => {
                let dof = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k as f64));
                let mut v = (b / n as f64) * dof;
                v = (&v + v.transpose()) * 0.5;
                let se = v[(k - 1, k - 1)].max(0.0).sqrt();
                (Some(v), Some(se))
            }
            None => {
                warnings.push("GMM covariance bread not invertible".into());
                (None, None)
            }
        }
    };

    let first_stage = first_stage_diagnostics(endogenous, x, &guarded.z, cluster_id)?;

    Ok(EstimationResult {
        gamma_hat: b2.rows(0, p).into_owned(),
        lambda_hat: b2[p],
        vcov,
        se_lambda,
        first_stage,
        j_stat: Some(j_stat),
        theta_used: Some(theta),
        n_used: n,
        warnings,
    })
}

fn solve_gmm(
    ztw: &DMatrix<f64>,
    zty: &DVector<f64>,
    weight: &DMatrix<f64>,
    what: &str,
) -> Result<DVector<f64>> {
    let lhs = ztw.transpose() * weight * ztw;
    let rhs = ztw.transpose() * weight * zty;
    lhs.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Rank(format!("{what}: weighted cross-product singular")))
}

/// `S = (1/n) Σ_g h_g h_g'` with `h_g` the within-cluster moment sums.
/// Falls back to the heteroskedastic (per-observation) version when only one
/// cluster exists.
fn moment_covariance(
    z: &DMatrix<f64>,
    resid: &DVector<f64>,
    cluster_id: &[usize],
) -> (DMatrix<f64>, Option<String>) {
    let n = z.nrows();
    let q = z.ncols();
    let g = n_distinct_clusters(cluster_id);
    let mut s = DMatrix::zeros(q, q);
    if g >= 2 {
        for h in cluster_scores(z, resid, cluster_id) {
            s += &h * h.transpose();
        }
        (s / n as f64, None)
    } else {
        for i in 0..n {
            let zi = z.row(i).transpose() * resid[i];
            s += &zi * zi.transpose();
        }
        (
            s / n as f64,
            Some("single cluster: moment covariance uses per-observation scores".into()),
        )
    }
}

/// Cholesky inverse with an SVD pseudo-inverse fallback.
fn invert_psd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch.inverse());
    }
    let svd = m.clone().svd(true, true);
    let cutoff = 1e-12 * svd.singular_values.max();
    svd.pseudo_inverse(cutoff).ok()
}

/// Builders hand back the endogenous exposure and the excluded signature for
/// a candidate θ; they must be deterministic in θ.
pub type ExposureBuilder<'a> = &'a (dyn Fn(f64) -> Result<DVector<f64>> + Sync);
pub type InstrumentBuilder<'a> = &'a (dyn Fn(f64) -> Result<(DMatrix<f64>, Vec<String>)> + Sync);

/// Two-step GMM with an outer search over θ (iterated grid refinement on the
/// step-two objective). Non-convergence returns the best iterate, flagged.
pub fn gmm(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    exposure_builder: ExposureBuilder,
    z_builder: InstrumentBuilder,
    theta0: f64,
    cluster_id: &[usize],
    options: &GmmOptions,
) -> Result<EstimationResult> {
    let (mut lo, mut hi) = options.theta_bounds;
    if !(lo < hi) {
        return Err(Error::Domain("GMM theta bounds must satisfy lo < hi".into()));
    }
    let mut theta0 = theta0.clamp(lo, hi);
    let eval = |theta: f64| -> Result<EstimationResult> {
        let w = exposure_builder(theta)?;
        let (z, names) = z_builder(theta)?;
        gmm_at_theta(y, x, &w, &z, &names, cluster_id, theta)
    };

    let mut best: Option<EstimationResult> = None;
    let mut prev_obj = f64::INFINITY;
    let mut converged = false;
    const POINTS: usize = 7;
    for _round in 0..options.max_outer {
        // grid over the current bracket, always including theta0
        let mut grid: Vec<f64> = (0..POINTS)
            .map(|i| lo + (hi - lo) * i as f64 / (POINTS - 1) as f64)
            .collect();
        grid.push(theta0);
        grid.sort_by(f64::total_cmp);
        grid.dedup();

        let results: Vec<(f64, Result<EstimationResult>)> = grid
            .iter()
            .map(|&t| (t, eval(t)))
            .collect();
        let mut round_best: Option<(f64, f64)> = None; // (criterion, theta)
        for (t, r) in &results {
            if let Ok(res) = r {
                let crit = res.j_stat.unwrap_or(f64::INFINITY);
                let better = match round_best {
                    None => true,
                    Some((bc, bt)) => crit < bc || (crit == bc && *t < bt),
                };
                if better {
                    round_best = Some((crit, *t));
                }
            }
        }
        let (obj, theta_star) = match round_best {
            Some(v) => v,
            None => return Err(Error::Estimation("GMM: every θ evaluation failed".into())),
        };
        best = results
            .into_iter()
            .find(|(t, r)| *t == theta_star && r.is_ok())
            .and_then(|(_, r)| r.ok());
        if (prev_obj - obj).abs() <= options.obj_tol * (1.0 + obj.abs()) {
            converged = true;
            break;
        }
        prev_obj = obj;
        theta0 = theta_star;
        // shrink the bracket around the winner
        let width = (hi - lo) / 2.0;
        lo = (theta_star - width / 2.0).max(options.theta_bounds.0);
        hi = (theta_star + width / 2.0).min(options.theta_bounds.1);
    }
    let mut result = best.ok_or_else(|| Error::Estimation("GMM produced no estimate".into()))?;
    if !converged {
        result
            .warnings
            .push("outer θ search hit the iteration cap; best iterate returned".into());
    }
    Ok(result)
}

/// Profiles the step-two GMM objective over a θ grid and returns the trace
/// plus the estimate at the argmin (ties break to the smallest θ).
pub fn profile_iv(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    exposure_builder: ExposureBuilder,
    z_builder: InstrumentBuilder,
    theta_grid: &[f64],
    cluster_id: &[usize],
) -> Result<(ProfileTrace, EstimationResult)> {
    if theta_grid.is_empty() {
        return Err(Error::Domain("profile grid must be nonempty".into()));
    }
    let cells: Vec<std::result::Result<EstimationResult, String>> =
        par::map_range(theta_grid.len(), |i| {
            let theta = theta_grid[i];
            let run = || -> Result<EstimationResult> {
                let w = exposure_builder(theta)?;
                let (z, names) = z_builder(theta)?;
                gmm_at_theta(y, x, &w, &z, &names, cluster_id, theta)
            };
            run().map_err(|e| e.to_string())
        });

    let mut criterion = Vec::with_capacity(theta_grid.len());
    let mut lambda_path = Vec::with_capacity(theta_grid.len());
    let mut errors = Vec::with_capacity(theta_grid.len());
    let mut best: Option<(f64, f64, usize)> = None; // (criterion, theta, idx)
    for (i, cell) in cells.iter().enumerate() {
        match cell {
            Ok(res) => {
                let crit = res.j_stat.unwrap_or(f64::NAN);
                criterion.push(crit);
                lambda_path.push(res.lambda_hat);
                errors.push(None);
                let theta = theta_grid[i];
                let better = match best {
                    None => true,
                    Some((bc, bt, _)) => crit < bc || (crit == bc && theta < bt),
                };
                if better && crit.is_finite() {
                    best = Some((crit, theta, i));
                }
            }
            Err(msg) => {
                criterion.push(f64::NAN);
                lambda_path.push(f64::NAN);
                errors.push(Some(msg.clone()));
            }
        }
    }
    let (_, argmin_theta, argmin_idx) = best.ok_or_else(|| {
        Error::Estimation("profile: estimation failed at every grid point".into())
    })?;

    let finite: Vec<f64> = criterion.iter().copied().filter(|c| c.is_finite()).collect();
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let flat = (max - min) < 1e-6 * (1.0 + min.abs());

    let result = match &cells[argmin_idx] {
        Ok(res) => res.clone(),
        Err(_) => unreachable!("argmin points at a successful cell"),
    };
    Ok((
        ProfileTrace {
            grid: theta_grid.to_vec(),
            criterion,
            lambda_path,
            errors,
            argmin: argmin_theta,
            flat,
        },
        result,
    ))
}
