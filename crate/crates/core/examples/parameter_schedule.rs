// The geometric schedule and the feasibility of its parameter inequalities.

use qglab::scheme::{
    check_inequalities, make_schedule, manual_schedule, GeometricParams, ManualParams,
};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let desk = |b: f64| GeometricParams {
        a: 26,
        b,
        c: 2.6,
        beta: 0.01,
        alpha: 0.001,
        eta: 0.01,
    };
    let s = make_schedule(desk(1.03), 3)?;
    for q in 0..3 {
        println!(
            "λ_{q} = {:.3e}  δ_{} = {:.3e}  μ_{} = {:.3e}",
            s.lambda[q],
            q + 1,
            s.delta[q + 1],
            q + 1,
            s.mu[q]
        );
    }
    for b in [1.001, 1.03, 1.06] {
        let r = check_inequalities(&desk(b), 0);
        println!("b = {b}: holds {:?}", r.holds);
    }

    let manual = manual_schedule(ManualParams {
        lambda: vec![13, 130],
        delta: vec![1.0, 0.25],
        mu: vec![10.0],
        eta: 1e-3,
    })?;
    println!("desk stage: {:?}", manual.stage(0)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
