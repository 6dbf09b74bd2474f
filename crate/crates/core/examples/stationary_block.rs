// A stationary block on the first family at λ = 13: eigenfunction,
// pressure, mean flux, and the factorization with the stage-0 cutoff.

use qglab::blocks::{
    block_mean_flux, block_pressure, make_block, make_cutoff, mean_flux_formula,
    stationarity_residual, verify_algebraic_identity, verify_cutoff_factorization,
};
use qglab::exact_modes::build_family;
use qglab::spectral::{Grid, C};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let grid = Grid::new(32, 32, 128)?;
    let fam = build_family(1)?;
    let (mut dirs, mut cs) = (Vec::new(), Vec::new());
    for (n, k) in fam.half().iter().enumerate() {
        let c = C::from_polar(1.0, 0.7 * n as f64);
        dirs.extend([k.clone(), k.neg()]);
        cs.extend([c, c.conj()]);
    }
    let b = make_block(grid, 13, &dirs, &cs)?;
    let q = block_pressure(&b)?;
    println!(
        "stationarity residual   {:.2e}",
        stationarity_residual(&b, &q)?
    );
    println!(
        "divergence of the flux  {:.2e}",
        verify_algebraic_identity(&b)?
    );

    let measured = block_mean_flux(&b)?;
    let formula = mean_flux_formula(&b);
    println!("mean flux (measured)    {:?}", measured[0]);
    println!("mean flux (Σ|c|²k⊗k̄⊥)   {:?}", formula[0]);

    let cut = make_cutoff(0)?;
    let r = verify_cutoff_factorization(&b, &q, &cut)?;
    println!(
        "cutoff plateau {} support {}: r1 {:.2e}, r2 {:.2e}",
        cut.plateau, cut.support, r.r1, r.r2
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
