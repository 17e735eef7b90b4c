//! Helpers shared by the data-driven subcommands.

use nalgebra::DVector;
use normgeo::aggregators::{AggregatorSpec, Family};
use normgeo::netcore::{load_panel_opts, LoadOptions, Panel};
use normgeo::predictor::{predict, PredictorSpec};

use crate::{CliError, CliResult, CommonDataArgs};

pub fn load(args: &CommonDataArgs) -> CliResult<Panel> {
    let opts = LoadOptions {
        symmetrize: args.undirected,
    };
    Ok(load_panel_opts(&args.edges, &args.nodes, opts)?)
}

pub fn parse_family(args: &CommonDataArgs) -> CliResult<Family> {
    Ok(match args.family.as_str() {
        "lim" => Family::Lim,
        "ces" => Family::Ces,
        "smoothmax" => Family::SmoothMax,
        "quantile" => Family::Quantile,
        other => return Err(CliError::Usage(format!("unknown family '{other}'"))),
    })
}

/// Preference parameter from the family-specific flag.
pub fn parse_theta(args: &CommonDataArgs, family: Family) -> CliResult<f64> {
    let missing = |flag: &str| CliError::Usage(format!("family '{}' needs --{flag}", args.family));
    Ok(match family {
        Family::Lim => 0.0,
        Family::Ces => args.beta.ok_or_else(|| missing("beta"))?,
        Family::SmoothMax => args.kappa.ok_or_else(|| missing("kappa"))?,
        Family::Quantile => args.q.ok_or_else(|| missing("q"))?,
    })
}

/// Resolves the CES positivity shift: a number, or "auto" for
/// `max(0, 1 − min(actions))` over every action vector the spec will see.
pub fn resolve_shift(args: &CommonDataArgs, action_vectors: &[&DVector<f64>]) -> CliResult<f64> {
    if args.shift == "auto" {
        let min = action_vectors
            .iter()
            .flat_map(|v| v.iter().copied())
            .fold(f64::INFINITY, f64::min);
        if min.is_finite() {
            Ok((1.0 - min).max(0.0))
        } else {
            Ok(0.0)
        }
    } else {
        args.shift
            .parse::<f64>()
            .map_err(|_| CliError::Usage(format!("--shift must be a number or 'auto', got '{}'", args.shift)))
    }
}

pub fn build_spec(family: Family, theta: f64, shift: f64) -> CliResult<AggregatorSpec> {
    Ok(match family {
        Family::Lim => AggregatorSpec::lim(),
        Family::Ces => AggregatorSpec::ces(theta, shift)?,
        Family::SmoothMax => AggregatorSpec::smooth_max(theta)?,
        Family::Quantile => AggregatorSpec::quantile(theta)?,
    })
}

pub fn predictor_spec(args: &CommonDataArgs, panel: &Panel) -> CliResult<PredictorSpec> {
    Ok(match args.predictor.as_str() {
        "oracle" => {
            let raw = args.oracle_gamma.as_ref().ok_or_else(|| {
                CliError::Usage("--predictor oracle needs --oracle-gamma".into())
            })?;
            let coefs: Result<Vec<f64>, _> = raw.split(',').map(str::trim).map(str::parse).collect();
            let coefs =
                coefs.map_err(|_| CliError::Usage(format!("cannot parse --oracle-gamma '{raw}'")))?;
            if coefs.len() != panel.n_covariates() {
                return Err(CliError::Usage(format!(
                    "--oracle-gamma has {} entries, panel has {} covariates",
                    coefs.len(),
                    panel.n_covariates()
                )));
            }
            PredictorSpec::oracle(DVector::from_vec(coefs))
        }
        "ols" => PredictorSpec::ols(),
        "crossfit" => PredictorSpec::cross_fit(args.folds).map_err(|e| CliError::Usage(e.to_string()))?,
        other => return Err(CliError::Usage(format!("unknown predictor '{other}'"))),
    })
}

pub fn build_yhat(args: &CommonDataArgs, panel: &Panel) -> CliResult<DVector<f64>> {
    let spec = predictor_spec(args, panel)?;
    Ok(predict(panel, &spec, args.seed)?)
}
