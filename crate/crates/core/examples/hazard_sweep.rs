//! How the value and abatement respond to the pollution slope of the hazard.
//!
//! `cargo run --release --example hazard_sweep`

use disaster_growth::{solve, Grid, Model, ModelParams, SchemeOpts, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = ModelParams {
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
        lambda0: 0.02,
        lambda1: 0.0,
        sigma_p: 0.0,
        variant: Variant::Nhpp,
    };
    let grid = Grid::new(0.1, 10.0, 96, 0.1, 10.0, 64)?;
    println!("lambda1   v(1,1)    share of nodes abating");
    for lambda1 in [0.0, 0.01, 0.02, 0.04, 0.08] {
        let model = Model::unmarked(ModelParams { lambda1, ..base })?;
        let sol = solve(&model, &grid, &SchemeOpts::default())?;
        let bar = model.params.bar_theta();
        let abating = sol.policy.theta.iter().filter(|&&t| t > 0.5 * bar).count() as f64 / grid.len() as f64;
        println!("{lambda1:<8}  {:<9.3} {abating:.3}", sol.value.interpolate(1.0, 1.0));
    }
    Ok(())
}
