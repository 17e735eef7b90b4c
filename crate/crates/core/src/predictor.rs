//! Exogenous predictor ŷ = m(X): oracle, in-sample OLS, and cross-fitted.
//!
//! The cross-fitted variant assigns nodes to folds by a seeded shuffle
//! stratified by group, fits the linear predictor on the complement folds,
//! and predicts each held-out fold, so an observation's own outcome never
//! enters its own prediction.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::netcore::{check_full_rank, Panel};
use crate::rng::{substream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Oracle,
    Ols,
    CrossFit,
}

/// How ŷ is constructed.
#[derive(Debug, Clone)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    /// Fold count for cross-fitting (≥ 2).
    pub folds: usize,
    /// Add group dummies to the predictor regression.
    pub include_group_effects: bool,
    /// True coefficients for the oracle predictor.
    pub oracle_gamma: Option<DVector<f64>>,
}

impl PredictorSpec {
    pub fn oracle(gamma: DVector<f64>) -> Self {
        PredictorSpec {
            kind: PredictorKind::Oracle,
            folds: 0,
            include_group_effects: false,
            oracle_gamma: Some(gamma),
        }
    }

    pub fn ols() -> Self {
        PredictorSpec {
            kind: PredictorKind::Ols,
            folds: 0,
            include_group_effects: false,
            oracle_gamma: None,
        }
    }

    pub fn cross_fit(folds: usize) -> Result<Self> {
        if folds < 2 {
            return Err(Error::Domain("cross-fitting requires folds >= 2".into()));
        }
        Ok(PredictorSpec {
            kind: PredictorKind::CrossFit,
            folds,
            include_group_effects: false,
            oracle_gamma: None,
        })
    }
}

/// Builds ŷ for every node in the panel.
pub fn predict(panel: &Panel, spec: &PredictorSpec, seed: u64) -> Result<DVector<f64>> {
    match spec.kind {
        PredictorKind::Oracle => {
            let gamma = spec
                .oracle_gamma
                .as_ref()
                .ok_or_else(|| Error::Domain("oracle predictor needs oracle_gamma".into()))?;
            if gamma.len() != panel.n_covariates() {
                return Err(Error::Domain("oracle_gamma length mismatch".into()));
            }
            Ok(&panel.x * gamma)
        }
        PredictorKind::Ols => {
            let y = require_y(panel)?;
            let design = design_matrix(panel, spec);
            let coef = least_squares(&design, y, "in-sample predictor")?;
            Ok(&design * coef)
        }
        PredictorKind::CrossFit => {
            let y = require_y(panel)?;
            let design = design_matrix(panel, spec);
            let n = panel.n_nodes();
            let folds = assign_folds(panel, spec.folds, seed);
            let mut yhat = DVector::zeros(n);
            for f in 0..spec.folds {
                let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
                let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
                if test.is_empty() {
                    continue;
                }
                if train.is_empty() {
                    return Err(Error::Rank(format!("fold {f}: empty training split")));
                }
                let xt = select_rows(&design, &train);
                let yt = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
                let coef = least_squares(&xt, &yt, &format!("fold {f} training split"))?;
                for &i in &test {
                    yhat[i] = design.row(i).transpose().dot(&coef);
                }
            }
            Ok(yhat)
        }
    }
}

fn require_y(panel: &Panel) -> Result<&DVector<f64>> {
    panel
        .y
        .as_ref()
        .ok_or_else(|| Error::Domain("predictor needs outcomes y on the panel".into()))
}

/// X, optionally extended with group dummies (first group is the base).
fn design_matrix(panel: &Panel, spec: &PredictorSpec) -> DMatrix<f64> {
    if !spec.include_group_effects || panel.groups.len() < 2 {
        return panel.x.clone();
    }
    let n = panel.n_nodes();
    let p = panel.n_covariates();
    let extra = panel.groups.len() - 1;
    let mut design = DMatrix::zeros(n, p + extra);
    design.view_mut((0, 0), (n, p)).copy_from(&panel.x);
    for (g, net) in panel.groups.iter().enumerate().skip(1) {
        for i in 0..net.n {
            design[(panel.global_index(g, i), p + g - 1)] = 1.0;
        }
    }
    design
}

/// Per-group seeded shuffle dealt round-robin, so every group appears in
/// every training split where its size allows.
fn assign_folds(panel: &Panel, folds: usize, seed: u64) -> Vec<usize> {
    let mut assignment = vec![0usize; panel.n_nodes()];
    for (g, net) in panel.groups.iter().enumerate() {
        let mut local: Vec<usize> = (0..net.n).collect();
        let mut rng = substream(seed, &[tag::PREDICTOR, g as u64]);
        local.shuffle(&mut rng);
        for (pos, &i) in local.iter().enumerate() {
            assignment[panel.global_index(g, i)] = pos % folds;
        }
    }
    assignment
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), m.ncols());
    for (r, &i) in rows.iter().enumerate() {
        for c in 0..m.ncols() {
            out[(r, c)] = m[(i, c)];
        }
    }
    out
}

/// Least squares with a rank check; `what` names the split in errors.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    check_full_rank(x, what)?;
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    xtx.lu()
        .solve(&xty)
        .ok_or_else(|| Error::Rank(format!("{what}: normal equations singular")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{row_normalize, Panel};
    use nalgebra::DMatrix;

    fn two_group_panel(n_per: usize, seed: u64) -> Panel {
        use rand::Rng;
        let mut rng = substream(seed, &[7]);
        let mut groups = Vec::new();
        for g in 0..2 {
            let mut raw = DMatrix::zeros(n_per, n_per);
            for i in 0..n_per {
                raw[(i, (i + 1) % n_per)] = 1.0;
            }
            groups.push(crate::netcore::Network::new(g, raw).unwrap());
        }
        let n = 2 * n_per;
        let x = DMatrix::from_fn(n, 2, |_, j| {
            if j == 0 {
                1.0
            } else {
                rng.random::<f64>() * 2.0 - 1.0
            }
        });
        let mut panel =
            Panel::from_parts(groups, x, vec!["const".into(), "x1".into()], None).unwrap();
        let y = DVector::from_fn(n, |i, _| {
            panel.x[(i, 1)] * 2.0 + 0.5 + 0.1 * rng.random::<f64>()
        });
        panel.y = Some(y);
        panel
    }

    #[test]
    fn oracle_extracts_column() {
        let panel = two_group_panel(6, 1);
        let spec = PredictorSpec::oracle(DVector::from_vec(vec![0.0, 1.0]));
        let yhat = predict(&panel, &spec, 0).unwrap();
        for i in 0..panel.n_nodes() {
            assert_eq!(yhat[i], panel.x[(i, 1)]);
        }
    }

    #[test]
    fn ols_recovers_noiseless_outcome() {
        let mut panel = two_group_panel(8, 2);
        let gamma = DVector::from_vec(vec![0.5, 2.0]);
        panel.y = Some(&panel.x * &gamma);
        let yhat = predict(&panel, &PredictorSpec::ols(), 0).unwrap();
        let diff = (yhat - panel.y.unwrap()).abs().max();
        assert!(diff < 1e-10);
    }

    #[test]
    fn crossfit_is_deterministic() {
        let panel = two_group_panel(10, 3);
        let spec = PredictorSpec::cross_fit(2).unwrap();
        let a = predict(&panel, &spec, 42).unwrap();
        let b = predict(&panel, &spec, 42).unwrap();
        assert_eq!(a, b, "same seed must give bitwise-identical predictions");
        let c = predict(&panel, &spec, 43).unwrap();
        assert_ne!(a, c, "different seed should reshuffle folds");
    }

    #[test]
    fn crossfit_has_no_own_outcome_leakage() {
        let panel = two_group_panel(10, 4);
        let spec = PredictorSpec::cross_fit(5).unwrap();
        let base = predict(&panel, &spec, 7).unwrap();
        for i in [0usize, 5, 13, 19] {
            let mut perturbed = panel.clone();
            let mut y = perturbed.y.clone().unwrap();
            y[i] += 100.0;
            perturbed.y = Some(y);
            let alt = predict(&perturbed, &spec, 7).unwrap();
            assert_eq!(base[i], alt[i], "own-fold model must exclude node {i}");
        }
    }

    #[test]
    fn group_dummies_fit_group_shifts() {
        let mut panel = two_group_panel(8, 5);
        let gamma = DVector::from_vec(vec![0.0, 1.0]);
        let mut y = &panel.x * &gamma;
        for i in 0..8 {
            y[panel.global_index(1, i)] += 3.0; // group-1 shift
        }
        panel.y = Some(y.clone());
        let mut spec = PredictorSpec::ols();
        spec.include_group_effects = true;
        let yhat = predict(&panel, &spec, 0).unwrap();
        assert!((yhat - y).abs().max() < 1e-10);
    }

    #[test]
    fn missing_y_is_error() {
        let mut panel = two_group_panel(5, 6);
        panel.y = None;
        assert!(predict(&panel, &PredictorSpec::ols(), 0).is_err());
    }
}
