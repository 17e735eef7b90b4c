// Temporary design-space probe; run with
//   cargo test -p normgeo --release --test probe -- --ignored --nocapture
use normgeo::montecarlo::{run_mc, McConfig, Menu};

fn show(cfg: &McConfig, label: &str) {
    let report = run_mc(cfg).unwrap();
    println!("=== {label}");
    for c in &report.cells {
        println!(
            "n={} beta={} menu={:8} r2={:.4} F={:8.1} bias={:8.4} rmse={:8.3} used={} noncvg={} bound={:.2} pmax={:.3} icv={:.3}",
            c.n, c.beta, c.menu, c.mean_partial_r2, c.mean_f, c.bias_lambda, c.rmse_lambda,
            c.used_replications, c.nonconverged_count, c.mean_contraction_bound,
            c.diagnostics.pmax_mean, c.diagnostics.intensity_cv
        );
    }
}

#[test]
#[ignore]
fn probe_star() {
    let base = McConfig {
        n: vec![600],
        beta_fix: vec![0.8, 1.2, 1.6, 2.0],
        replications: 10,
        menus: vec![Menu::Bruz, Menu::Geo],
        ..Default::default()
    };

    show(
        &McConfig {
            lambda0: 0.9,
            sigma_eps: 0.2,
            zeta_scale: 0.02,
            sigma_a: 1.25,
            sigma_b: 5.0,
            bridge_weight: 0.02,
            shift_slack: 12.0,
            replications: 100,
            ..base.clone()
        },
        "J100: acceptance-scale run",
    );
    show(
        &McConfig {
            lambda0: 0.9,
            sigma_eps: 0.2,
            zeta_scale: 0.02,
            sigma_a: 1.25,
            sigma_b: 5.0,
            bridge_weight: 0.02,
            shift_slack: 8.0,
            replications: 20,
            menus: vec![Menu::Bruz, Menu::GeoFull],
            ..base.clone()
        },
        "K: same as J but geo-full menu",
    );
    show(
        &McConfig {
            lambda0: 0.7,
            sigma_eps: 0.3,
            zeta_scale: 0.05,
            sigma_a: 1.0,
            sigma_b: 4.0,
            bridge_weight: 0.05,
            ..base.clone()
        },
        "E: l=.7 se=.3 z=.05 sa=1 sb=4 bw=.05",
    );

}
