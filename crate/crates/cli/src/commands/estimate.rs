//! `normgeo estimate`: profile-IV over a θ grid, one-step vs geometry menus.

use std::io::Write;
use std::process::ExitCode;

use nalgebra::DVector;
use normgeo::aggregators::Family;
use normgeo::equilibrium::apply_exposure;
use normgeo::estimate::{profile_iv, EstimationResult, ProfileTrace};
use normgeo::geometry::{panel_excluded, GeoBlocks};
use normgeo::netcore::{drop_isolates, fmt_f64};

use crate::commands::shared;
use crate::manifest::ManifestBuilder;
use crate::{CliError, CliResult, EstimateArgs};

/// Default θ grids per family (CES values mirror the reported profile grids;
/// smooth-max is log-spaced).
fn default_grid(family: Family) -> Vec<f64> {
    match family {
        Family::Lim => vec![1.0],
        Family::Ces => vec![0.05, 0.8, 1.2, 1.6, 2.0, 2.4],
        Family::SmoothMax => vec![0.05, 0.15, 0.45, 1.2, 3.5, 10.0],
        Family::Quantile => vec![0.25, 0.5, 0.75],
    }
}

pub fn run(args: EstimateArgs) -> CliResult<ExitCode> {
    let full_panel = shared::load(&args.data)?;
    if full_panel.y.is_none() {
        return Err(CliError::Usage(
            "estimation needs a 'y' column in the node file".into(),
        ));
    }
    // Isolates carry no exposure; estimate on the non-isolate panel.
    let (panel, warnings) = drop_isolates(&full_panel)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let y = panel.y.clone().expect("y survives drop_isolates");
    let family = shared::parse_family(&args.data)?;

    let grid: Vec<f64> = match &args.grid {
        None => default_grid(family),
        Some(raw) => {
            let parsed: Result<Vec<f64>, _> =
                raw.split(',').map(str::trim).map(str::parse).collect();
            parsed.map_err(|_| CliError::Usage(format!("cannot parse --grid '{raw}'")))?
        }
    };
    if grid.is_empty() {
        return Err(CliError::Usage("θ grid is empty".into()));
    }

    let yhat = shared::build_yhat(&args.data, &panel)?;
    let shift = if family == Family::Ces {
        shared::resolve_shift(&args.data, &[&y, &yhat])?
    } else {
        0.0
    };

    let mut manifest = ManifestBuilder::new(
        "estimate",
        serde_json::json!({
            "family": args.data.family,
            "grid": grid,
            "shift": shift,
            "geo_menu": args.geo_menu,
            "predictor": args.data.predictor,
            "undirected": args.data.undirected,
        }),
        args.data.seed,
    );
    manifest.add_input(&args.data.edges)?;
    manifest.add_input(&args.data.nodes)?;
    manifest.mark_phase("load");

    let exposure_builder = |theta: f64| -> normgeo::Result<DVector<f64>> {
        let spec = shared::build_spec(family, theta, shift)
            .map_err(|_| normgeo::Error::Domain(format!("bad theta {theta}")))?;
        apply_exposure(&panel, &y, &spec)
    };
    let geo_blocks = if args.geo_menu == "geo-full" {
        GeoBlocks::full()
    } else {
        GeoBlocks::preset()
    };
    let make_z_builder = |blocks: GeoBlocks| {
        let panel = &panel;
        let yhat = &yhat;
        let args = &args;
        move |theta: f64| -> normgeo::Result<(nalgebra::DMatrix<f64>, Vec<String>)> {
            let spec = shared::build_spec(family, theta, shift)
                .map_err(|_| normgeo::Error::Domain(format!("bad theta {theta}")))?;
            panel_excluded(
                panel,
                yhat,
                &spec,
                args.data.steps,
                args.data.shells,
                args.data.epsilon0,
                blocks,
            )
        }
    };

    let bruz_z = make_z_builder(GeoBlocks::none());
    let geo_z = make_z_builder(geo_blocks);
    let (bruz_trace, bruz_res) = profile_iv(
        &y,
        &panel.x,
        &exposure_builder,
        &bruz_z,
        &grid,
        &panel.cluster_id,
    )?;
    manifest.mark_phase("profile_bruz");
    let (geo_trace, geo_res) = profile_iv(
        &y,
        &panel.x,
        &exposure_builder,
        &geo_z,
        &grid,
        &panel.cluster_id,
    )?;
    manifest.mark_phase("profile_geo");

    write_comparison(&args, family, (&bruz_trace, &bruz_res), (&geo_trace, &geo_res))?;
    manifest.add_output(&args.out);
    let trace_path = args.out.with_extension("trace.json");
    let traces = serde_json::json!({
        "bruz": bruz_trace,
        "geo": geo_trace,
        "n_used": bruz_res.n_used,
        "warnings": { "bruz": bruz_res.warnings, "geo": geo_res.warnings },
    });
    std::fs::write(&trace_path, serde_json::to_string_pretty(&traces)?)?;
    manifest.add_output(&trace_path);
    manifest.mark_phase("emit");
    manifest.write(&args.out.with_extension("manifest.json"))?;

    println!(
        "bruz: theta={:?} lambda={:.4} se={:?}",
        bruz_res.theta_used, bruz_res.lambda_hat, bruz_res.se_lambda
    );
    println!(
        "geo:  theta={:?} lambda={:.4} se={:?}",
        geo_res.theta_used, geo_res.lambda_hat, geo_res.se_lambda
    );
    Ok(ExitCode::SUCCESS)
}

/// Comparison table row in the layout
/// `param_bruz, param_geo, lambda_bruz, se_bruz, lambda_geo, se_geo`.
fn write_comparison(
    args: &EstimateArgs,
    family: Family,
    bruz: (&ProfileTrace, &EstimationResult),
    geo: (&ProfileTrace, &EstimationResult),
) -> CliResult<()> {
    let mut file = std::fs::File::create(&args.out)?;
    writeln!(
        file,
        "param_bruz,param_geo,lambda_bruz,se_bruz,lambda_geo,se_geo"
    )?;
    let fmt_param = |trace: &ProfileTrace| -> String {
        if family == Family::Lim {
            String::new()
        } else {
            format!("{}", trace.argmin)
        }
    };
    let fmt_se = |res: &EstimationResult| -> String {
        res.se_lambda.map(fmt_f64).unwrap_or_default()
    };
    writeln!(
        file,
        "{},{},{},{},{},{}",
        fmt_param(bruz.0),
        fmt_param(geo.0),
        fmt_f64(bruz.1.lambda_hat),
        fmt_se(bruz.1),
        fmt_f64(geo.1.lambda_hat),
        fmt_se(geo.1),
    )?;
    Ok(())
}
