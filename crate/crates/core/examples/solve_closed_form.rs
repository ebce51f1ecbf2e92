//! Solve the decoupled model and compare with its closed-form value.
//!
//! `cargo run --release --example solve_closed_form`

use std::time::Instant;

use disaster_growth::verify::core_sup_error;
use disaster_growth::{solve, CandidateValue, Grid, Model, ModelParams, SchemeOpts, State, ValueField, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let prm = ModelParams {
        rho: 0.05,
        a: 0.1,
        phi: 0.0,
        sigma_ab: 1.0,
        alpha: 0.02,
        chi: 1.0,
        epsilon: 2.0,
        beta: 0.5,
        delta: 0.0,
        xi: 0.0,
        eta: 0.0,
        lambda0: 0.0,
        lambda1: 0.0,
        sigma_p: 0.0,
        variant: Variant::Hpp,
    };
    let model = Model::unmarked(prm)?;
    let cv = CandidateValue::decoupled(&prm)?;
    println!("candidate: psi = {}, x = {}", cv.psi, cv.x);

    for n in [32, 64, 128] {
        let grid = Grid::new(0.25, 4.0, n, 0.3, 3.0, n)?;
        let t = Instant::now();
        let sol = solve(&model, &grid, &SchemeOpts::default())?;
        let exact = ValueField::from_fn(grid.clone(), prm, |s| cv.value(s, &prm));
        let err = core_sup_error(&grid, &sol.value.values, &exact.values, 0.6);
        let s = State { k: 1.0, p: 1.0 };
        println!(
            "{n:>4}x{n:<4} {:>3} iterations {:>8.2?}  sup error {:.3e}  v(1,1) = {:.4} (exact {:.4})",
            sol.report.iterations,
            t.elapsed(),
            err,
            sol.value.interpolate(1.0, 1.0),
            cv.value(s, &prm)
        );
    }
    Ok(())
}
