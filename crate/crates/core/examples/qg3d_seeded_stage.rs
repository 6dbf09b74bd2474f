//! A 3D QG stage on a seeded level-0 state: nonzero stress and velocity, so
//! the amplitudes vary in space and the phases are transported.

use std::sync::Arc;
use std::time::Instant;

use qglab::scheme::{run_stage, EnergyProfile, SeedSpec, SeededSource, StageOptions, StageParams};
use qglab::spectral::Grid;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = Grid::new(64, 64, 96)?;
    let seed = SeedSpec {
        theta: 1e-5,
        sigma: 1e-7,
        duration: Some(0.15),
        ..SeedSpec::default()
    };
    let source = Arc::new(SeededSource::new(grid, 0, seed)?);
    let params = StageParams {
        q: 0,
        lambda_q: 13.0,
        lambda_next: 39,
        delta_next: 1.0,
        delta_next2: 0.25,
        mu: 10.0,
        ell: 13f64.powf(-0.75) * 39f64.powf(-0.25),
        eta: 1e-3,
    };
    let profile = EnergyProfile::Bump {
        center: 0.0,
        width: 0.4,
        height: 2.0,
    };
    let mut opts = StageOptions::new(params, profile, false);
    opts.energy_samples = 4;
    opts.residual_samples = 2;
    let start = Instant::now();
    let (_, report) = run_stage(source, opts)?;
    println!("pumped windows   {}", report.pumped_windows);
    println!("rho max          {:e}", report.rho_max);
    println!("low frequency    {:?}", report.o_low);
    println!("energy           {:?}", report.energy);
    println!("stress           {:?}", report.stress);
    println!("reconstruction   {:e}", report.reconstruction_max);
    println!("weak form        {:?}", report.weak_form_max);
    println!("frequency        {:?}", report.frequency);
    println!("flows            {:?}", report.flows);
    println!("parity           {:?}", report.parity);
    for s in &report.slices {
        let eps: Vec<_> = s.waves.iter().map(|w| (w.l, w.eps_ratio, w.eps)).collect();
        println!("t = {:.3}  waves {eps:?}", s.t);
    }
    println!("elapsed          {:.1?}", start.elapsed());
    Ok(())
}
