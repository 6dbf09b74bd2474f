// Writes a vector field in the binary snapshot format and reads it back.

use std::io::Cursor;

use qglab::spectral::{read_snapshot, write_snapshot, Grid, ScalarField};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let grid = Grid::new(16, 16, 8)?;
    let f = ScalarField::from_fn(grid, |x, y, z| (2.0 * x).sin() * y.cos() + z.cos());
    let g = f.gradient();
    let mut buf = Vec::new();
    write_snapshot(&mut buf, &g.c.iter().collect::<Vec<_>>())?;
    println!(
        "{} bytes, magic {:?}",
        buf.len(),
        std::str::from_utf8(&buf[..4])?
    );
    let (read_grid, fields) = read_snapshot(&mut Cursor::new(buf))?;
    let err = fields
        .iter()
        .zip(&g.c)
        .map(|(a, b)| a.sub(b).c0())
        .fold(0.0, f64::max);
    println!(
        "grid {:?}, {} components, max error {err:e}",
        read_grid,
        fields.len()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
