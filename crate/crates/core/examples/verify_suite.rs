//! The verification suite on a small HPP model.
//!
//! `cargo run --release --example verify_suite`

use disaster_growth::simulate::SimSpec;
use disaster_growth::verify::{default_probes, run_suite, SuiteInputs, VerificationReport, VerifySettings};
use disaster_growth::{solve, Grid, Model, ModelParams, SchemeOpts, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let prm = ModelParams {
        rho: 0.05,
        a: 0.1,
        phi: 0.5,
        sigma_ab: 1.0,
        alpha: 0.05,
        chi: 1.0,
        epsilon: 2.0,
        beta: 0.5,
        delta: 0.1,
        xi: 1.0,
        eta: 0.0,
        lambda0: 0.05,
        lambda1: 0.0,
        sigma_p: 0.0,
        variant: Variant::Hpp,
    };
    let model = Model::unmarked(prm)?;
    let grid = Grid::new(0.1, 10.0, 256, 0.1, 10.0, 128)?;
    let scheme = SchemeOpts::default();
    let sim = SimSpec { n_paths: 1000, t_end: 200.0, dt: 1.0 / 64.0, master_seed: 42, opts: Default::default() };
    let settings = VerifySettings { suboptimal_paths: 500, martingale_paths: 1000, dpp_paths: 1000, ..Default::default() };
    let probes = default_probes(&grid.spec);
    let sol = solve(&model, &grid, &scheme)?;
    let inputs = SuiteInputs { model: &model, grid: &grid, scheme: &scheme, sim: &sim, probes: &probes, settings: &settings };
    let report = VerificationReport::new(prm.variant, "example".into(), sim.master_seed, run_suite(&inputs, &sol)?);
    for c in &report.checks {
        println!("{:<5} {:<40} {:>12.4e} <= {:<12.4e}", if c.passed { "ok" } else { "FAIL" }, c.name, c.statistic, c.tolerance);
    }
    println!("{}", if report.passed { "all checks passed" } else { "some checks failed" });
    Ok(())
}
