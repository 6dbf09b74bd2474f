// The direction families, their ε-balls, and an exact coefficient solve.

use qglab::exact_modes::{
    build_family, build_planar_family, solve_coefficients, verify_unit_sum, ModeMatrix,
};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    for j in [1, 2] {
        for f in [build_family(j)?, build_planar_family(j)?] {
            let dirs: Vec<String> = f.half().iter().map(ToString::to_string).collect();
            println!(
                "family {j}{}: ±{{{}}}, ε = {}",
                if f.is_planar() { " (planar)" } else { "" },
                dirs.join(", "),
                f.epsilon()
            );
        }
    }

    // A target near the base matrix: M_1 + N with a small rational N.
    let f = build_family(1)?;
    let n = ModeMatrix::from_ints([[1, 2, 0], [2, -1, 0], [-1, 1, 0]], 1000);
    let m = f.base_matrix().add(&n);
    let s = solve_coefficients(&f, &m)?;
    for (k, c2) in s.all() {
        println!("  c²({k}) = {c2}");
    }
    println!(
        "Σc² = {}, exact reconstruction: {}",
        verify_unit_sum(&f, &m)?,
        s.reconstruction_defect().is_zero()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
