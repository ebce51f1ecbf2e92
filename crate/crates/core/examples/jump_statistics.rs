//! Sampling disaster times and magnitudes, with their empirical statistics.
//!
//! `cargo run --release --example jump_statistics`

use disaster_growth::jumps::{sample_hpp, sample_mark, thin_step};
use disaster_growth::rng::child;
use disaster_growth::simulate::mean_stderr;
use disaster_growth::{MarkModel, Model, ModelParams, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (lambda, horizon) = (0.3, 100.0);
    let mut rng = child(1, 0);
    let counts: Vec<f64> = (0..5000).map(|_| sample_hpp(lambda, horizon, &mut rng).map(|t| t.len() as f64)).collect::<Result<_, _>>()?;
    let (m, se) = mean_stderr(&counts);
    println!("HPP: mean count {m:.2} (stderr {se:.2}), expected {}", lambda * horizon);

    let prm = ModelParams {
        rho: 0.05,
        a: 0.1,
        phi: 0.0,
        sigma_ab: 1.0,
        alpha: 0.0,
        chi: 1.0,
        epsilon: 2.0,
        beta: 0.5,
        delta: 0.1,
        xi: 0.0,
        eta: 0.0,
        lambda0: 0.1,
        lambda1: 0.2,
        sigma_p: 0.0,
        variant: Variant::Nhpp,
    };
    let model = Model::unmarked(prm)?;
    let dt = 0.01;
    for p in [0.5, 1.0, 2.0] {
        let rate = model.total_intensity(p);
        let steps = 2_000_000;
        let mut n = 0;
        for s in 0..steps {
            n += thin_step(s as f64 * dt, p, dt, 1.5 * rate, &model, &mut rng)?.len();
        }
        println!("NHPP at P = {p}: thinned rate {:.4}, lambda0 + lambda1 P = {rate:.4}", n as f64 / (steps as f64 * dt));
    }

    for p in [0.5, 2.0] {
        let zs: Vec<f64> = (0..20_000).map(|_| sample_mark(p, &MarkModel::Gamma, &mut rng)).collect::<Result<_, _>>()?;
        let (m, se) = mean_stderr(&zs);
        println!("Gamma marks at P = {p}: mean {m:.4} (stderr {se:.4})");
    }
    Ok(())
}
