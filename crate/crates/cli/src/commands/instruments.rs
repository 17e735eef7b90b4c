//! `normgeo instruments`: build instrument CSVs and first-stage diagnostics.

use std::io::Write;
use std::process::ExitCode;

use nalgebra::DMatrix;
use normgeo::aggregators::Family;
use normgeo::equilibrium::apply_exposure;
use normgeo::estimate::first_stage_diagnostics;
use normgeo::geometry::{panel_bruz, panel_excluded, GeoBlocks};
use normgeo::netcore::fmt_f64;

use crate::commands::shared;
use crate::manifest::ManifestBuilder;
use crate::{CliResult, InstrumentsArgs};

pub fn run(args: InstrumentsArgs) -> CliResult<ExitCode> {
    let panel = shared::load(&args.data)?;
    let family = shared::parse_family(&args.data)?;
    let theta = shared::parse_theta(&args.data, family)?;

    let yhat = shared::build_yhat(&args.data, &panel)?;
    let shift = if family == Family::Ces {
        let mut vectors = vec![&yhat];
        if let Some(ref y) = panel.y {
            vectors.push(y);
        }
        shared::resolve_shift(&args.data, &vectors)?
    } else {
        0.0
    };
    let spec = shared::build_spec(family, theta, shift)?;

    let mut manifest = ManifestBuilder::new(
        "instruments",
        serde_json::json!({
            "family": args.data.family,
            "theta": theta,
            "shift": shift,
            "menu": args.menu,
            "predictor": args.data.predictor,
            "steps": args.data.steps,
            "shells": args.data.shells,
            "epsilon0": args.data.epsilon0,
            "undirected": args.data.undirected,
        }),
        args.data.seed,
    );
    manifest.add_input(&args.data.edges)?;
    manifest.add_input(&args.data.nodes)?;
    manifest.mark_phase("load");

    // Menu assembly: x block + phi (+ dphi) always; geometry columns per menu.
    let (bruz, bruz_names) = panel_bruz(&panel, &yhat, &spec)?;
    let include = match args.menu.as_str() {
        "bruz" => None,
        "geo" => Some(GeoBlocks::preset()),
        "geo-full" => Some(GeoBlocks::full()),
        other => unreachable!("clap filters menu values, got {other}"),
    };
    let (matrix, names) = match include {
        None => (bruz, bruz_names),
        Some(blocks) => {
            let (excl, excl_names) = panel_excluded(
                &panel,
                &yhat,
                &spec,
                args.data.steps,
                args.data.shells,
                args.data.epsilon0,
                blocks,
            )?;
            // bruz already carries [x, phi, dphi]; append the geometry
            // columns that the excluded signature adds beyond those.
            let skip = excl_names
                .iter()
                .take_while(|n| *n == "phi" || *n == "dphi")
                .count();
            let n = panel.n_nodes();
            let mut m = DMatrix::zeros(n, bruz.ncols() + excl.ncols() - skip);
            m.view_mut((0, 0), (n, bruz.ncols())).copy_from(&bruz);
            m.view_mut((0, bruz.ncols()), (n, excl.ncols() - skip))
                .copy_from(&excl.columns(skip, excl.ncols() - skip).into_owned());
            let mut all_names = bruz_names;
            all_names.extend(excl_names.into_iter().skip(skip));
            (m, all_names)
        }
    };
    manifest.mark_phase("build");

    let mut file = std::fs::File::create(&args.out)?;
    let mut header = vec!["group".to_string(), "node".to_string()];
    header.extend(names.iter().cloned());
    writeln!(file, "{}", header.join(","))?;
    for (g, net) in panel.groups.iter().enumerate() {
        for i in 0..net.n {
            let global = panel.global_index(g, i);
            let mut row = vec![
                panel.group_labels[g].clone(),
                panel.node_labels[global].clone(),
            ];
            for c in 0..matrix.ncols() {
                row.push(fmt_f64(matrix[(global, c)]));
            }
            writeln!(file, "{}", row.join(","))?;
        }
    }
    drop(file);
    manifest.add_output(&args.out);

    // First-stage diagnostics when an endogenous exposure is available.
    if let Some(ref y) = panel.y {
        let w = apply_exposure(&panel, y, &spec)?;
        let p = panel.n_covariates();
        let excluded = matrix.columns(p, matrix.ncols() - p).into_owned();
        let keep: Vec<usize> = panel
            .isolate_mask()
            .iter()
            .enumerate()
            .filter_map(|(i, &iso)| (!iso).then_some(i))
            .collect();
        let diag = first_stage_diagnostics(
            &nalgebra::DVector::from_iterator(keep.len(), keep.iter().map(|&i| w[i])),
            &select_rows(&panel.x, &keep),
            &select_rows(&excluded, &keep),
            &keep.iter().map(|&i| panel.cluster_id[i]).collect::<Vec<_>>(),
        )?;
        let diag_path = args.out.with_extension("diagnostics.json");
        std::fs::write(&diag_path, serde_json::to_string_pretty(&diag)?)?;
        manifest.add_output(&diag_path);
        println!(
            "first stage: partial_r2={:.4} F={:.2} excluded={}",
            diag.partial_r2, diag.f_stat, diag.excluded_count
        );
    }
    manifest.mark_phase("emit");
    manifest.write(&args.out.with_extension("manifest.json"))?;
    println!("wrote {} ({} columns)", args.out.display(), matrix.ncols());
    Ok(ExitCode::SUCCESS)
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), m.ncols());
    for (r, &i) in rows.iter().enumerate() {
        out.set_row(r, &m.row(i));
    }
    out
}
