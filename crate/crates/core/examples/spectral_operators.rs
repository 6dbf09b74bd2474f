// Inverse divergences and projections on a random band-limited field.

use qglab::spectral::{
    inverse_div_d, inverse_div_i, p_grad_bar, p_gradperp_bar, random_field, random_vector,
    riesz2_slicewise, Grid, MeanMode, VectorField,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let grid = Grid::new(32, 32, 16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = random_field(grid, 8, MeanMode::SliceMeanZero, &mut rng);
    let h = random_field(grid, 8, MeanMode::SliceMeanZero, &mut rng);

    // D inverts the horizontal divergence on (∇̄f, h).
    let gf = f.hgrad();
    let x = VectorField::new(gf.c[0].clone(), gf.c[1].clone(), h.clone());
    let d = inverse_div_d(&x)?;
    println!(
        "‖∇̄·D(X) − X‖ / ‖X‖   = {:.2e}",
        d.hdiv().sub(&x).c0() / x.c0()
    );
    println!("D(X) third column zero: {}", d.third_column_zero());
    let i = inverse_div_i(&h)?;
    println!(
        "‖∇̄·I(h) − h‖ / ‖h‖   = {:.2e}",
        i.hdiv().sub(&h).c0() / h.c0()
    );

    // Horizontal gradient / perpendicular-gradient split.
    let v = random_vector(grid, 8, MeanMode::SliceMeanZero, &mut rng);
    let (a, b) = (p_grad_bar(&v)?, p_gradperp_bar(&v)?);
    println!(
        "‖P v + P⊥ v − v‖ / ‖v‖ = {:.2e}",
        a.add(&b).sub(&v).c0() / v.c0()
    );

    let r = riesz2_slicewise(&f)?;
    println!(
        "‖R₁f‖ = {:.4}, ‖R₂f‖ = {:.4}, ‖f‖ = {:.4}",
        r.c[0].l2(),
        r.c[1].l2(),
        f.l2()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
