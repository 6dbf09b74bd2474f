//! One 2D Euler stage from the zero flow at λ₁ = 130 on a 512² grid.

use std::sync::Arc;
use std::time::Instant;

use qglab::scheme::{euler2d_stage, EnergyProfile, StageOptions, StageParams, ZeroSource};
use qglab::spectral::Grid;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(512);
    let grid = Grid::planar(n, n)?;
    let params = StageParams {
        q: 0,
        lambda_q: 13.0,
        lambda_next: 130,
        delta_next: 1.0,
        delta_next2: 0.25,
        mu: 10.0,
        ell: 13f64.powf(-0.75) * 130f64.powf(-0.25),
        eta: 1e-3,
    };
    let profile = EnergyProfile::Bump {
        center: 0.0,
        width: 4.0,
        height: 1.0,
    };
    let opts = StageOptions::new(params, profile, true);
    let start = Instant::now();
    let (_, report) = euler2d_stage(Arc::new(ZeroSource { grid, level: 0 }), opts)?;
    println!("pumped windows   {}", report.pumped_windows);
    println!("energy           {:?}", report.energy);
    println!("stress           {:?}", report.stress);
    println!("reconstruction   {:e}", report.reconstruction_max);
    println!("weak form        {:?}", report.weak_form_max);
    println!("frequency        {:?}", report.frequency);
    println!("flows            {:?}", report.flows);
    println!("elapsed          {:.1?}", start.elapsed());
    Ok(())
}
