// Backward flow maps of a shear flow and of a steady gradient velocity,
// and a stress transported along them.

use qglab::spectral::{random_field, Grid, MeanMode, VectorField};
use qglab::transport::{
    advance_flow, shear_flow_defect, transport_scalar, window_half_width, GradientVelocity,
    Velocity,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let grid = Grid::planar(64, 64)?;
    let mu = 10.0;
    for off in [-0.9, 0.3, 0.9] {
        let t = off * window_half_width(mu);
        println!(
            "shear flow at t = {t:+.3}: defect {:.2e}",
            shear_flow_defect(grid, 0, mu, t, 1.0)?
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let psi = random_field(grid, 3, MeanMode::MeanZero, &mut rng).scale(0.2);
    let grad: VectorField = psi.gradient();
    let vel = GradientVelocity::steady(&grad);
    println!("‖u‖_C¹ = {:.3}", vel.c1_norm());
    let t = 0.06;
    let flow = advance_flow(&vel, grid, 0, mu, t)?;
    println!(
        "Φ_0 at t = {t}: {} RK4 steps, max displacement {:.3e}, |det D̄Φ − 1| {:.2e}",
        flow.steps(),
        flow.max_displacement(),
        flow.det_defect()
    );
    // ψ is steady and advected by its own perpendicular gradient, so ψ∘Φ = ψ.
    let back = transport_scalar(&psi, &flow)?;
    println!("‖ψ∘Φ − ψ‖ / ‖ψ‖ = {:.2e}", back.sub(&psi).c0() / psi.c0());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
