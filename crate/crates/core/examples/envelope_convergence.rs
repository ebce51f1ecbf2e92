//! Envelope residuals of exact value functions sampled on refined grids.
//!
//! `cargo run --release --example envelope_convergence`

use disaster_growth::envelope::{closed_form, envelope_residuals, Jet};
use disaster_growth::{Grid, Model, ModelParams, State, ValueField, Variant};

fn report(name: &str, prm: ModelParams, jet: &dyn Fn(State) -> Jet) -> Result<(), Box<dyn std::error::Error>> {
    let model = Model::unmarked(prm)?;
    let mut prev: Option<(f64, f64)> = None;
    for n in [17, 33, 65, 129, 257] {
        let grid = Grid::new(0.5, 4.0, n, 0.5, 4.0, n)?;
        let r = envelope_residuals(&ValueField::from_fn(grid, prm, |s| jet(s).v), &model)?;
        let (mk, mp) = (r.median_k(), r.median_p());
        match prev {
            Some((a, b)) => println!("{name} {n:>4}: median r_K {mk:.3e} (ratio {:.2})  r_P {mp:.3e} (ratio {:.2})", a / mk, b / mp),
            None => println!("{name} {n:>4}: median r_K {mk:.3e}  r_P {mp:.3e}"),
        }
        prev = Some((mk, mp));
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = ModelParams {
        rho: 0.05,
        a: 0.1,
        phi: 0.0,
        sigma_ab: 1.0,
        alpha: 0.02,
        chi: 1.0,
        epsilon: 2.0,
        beta: 0.5,
        delta: 0.3,
        xi: 0.0,
        eta: 0.0,
        lambda0: 0.2,
        lambda1: 0.0,
        sigma_p: 0.0,
        variant: Variant::Hpp,
    };
    report("HPP ", base, &closed_form::hpp(&base)?)?;
    let nhpp = ModelParams { alpha: 0.0, lambda0: 0.1, lambda1: 0.05, variant: Variant::Nhpp, ..base };
    report("NHPP", nhpp, &closed_form::nhpp(&nhpp)?)?;
    Ok(())
}
