//! Solve an HPP model, then follow the solved policy along simulated paths.
//!
//! `cargo run --release --example simulate_paths`

use disaster_growth::rng::child;
use disaster_growth::simulate::{estimate_value, simulate_path, SimOpts};
use disaster_growth::{solve, Grid, Model, ModelParams, Policy, SchemeOpts, State, Variant};

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
    let grid = Grid::new(0.1, 10.0, 96, 0.1, 10.0, 64)?;
    let sol = solve(&model, &grid, &SchemeOpts::default())?;
    let policy = Policy::field(&sol.policy);
    let s0 = State { k: 1.0, p: 1.0 };
    let opts = SimOpts::default();

    let path = simulate_path(&model, &policy, s0, 50.0, 1.0 / 64.0, &opts, &mut child(7, 0))?;
    println!("one path over T = 50:");
    for ev in &path.jumps {
        println!("  disaster at t = {:6.2}: capital kept {:.3}", ev.time, ev.survival);
    }
    for s in (0..path.times.len()).step_by(640) {
        let c = path.controls[s];
        println!("  t = {:5.1}  K = {:.3}  P = {:.3}  C = {:.4}  theta = {:.2}", path.times[s], path.k[s], path.p[s], c.c, c.theta);
    }

    let est = estimate_value(&model, &policy, s0, 2000, 200.0, 1.0 / 64.0, 7, &opts)?;
    println!(
        "Monte Carlo gain {:.3} +- {:.3} (tail bound {:.3}, {:.1} disasters per path); solver value {:.3}",
        est.mean,
        est.stderr,
        est.tail_bound,
        est.mean_jumps,
        sol.value.interpolate(s0.k, s0.p)
    );
    Ok(())
}
