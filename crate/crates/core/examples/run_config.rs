// A stage run driven by a JSON config, as the `run-stage` subcommand does.

use qglab::cli::{execute, parse_config_str, print_verdicts, write_artifacts};

const CONFIG: &str = r#"{
    "grid": {"nx": 160, "ny": 160},
    "manual": {"lambda": [13, 65], "delta": [1.0, 0.25], "mu": [10.0]},
    "mode": "euler2d",
    "energy_profile": {"type": "bump", "center": 0.0, "width": 2.0, "height": 0.5},
    "sampling": {"energy": 8, "residual": 2, "weak_form": 4}
}"#;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = parse_config_str(CONFIG)?;
    let out = execute(&cfg, 1)?;
    print_verdicts(&out.report);
    let dir = std::env::temp_dir().join("qglab-run-config-example");
    write_artifacts(&cfg, &out, &dir)?;
    println!("artifacts in {}", dir.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
