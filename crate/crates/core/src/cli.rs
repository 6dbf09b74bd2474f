//! Run configuration, verification suites, stage orchestration and the
//! artifacts written to disk.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{
    block_mean_flux, block_pressure, make_block, make_cutoff, mean_flux_formula,
    stationarity_residual, verify_algebraic_identity, verify_cutoff_factorization, StationaryBlock,
};
use crate::exact_modes::{build_family, certify, ModeCertificate};
use crate::scheme::stage::InvariantCheck;
use crate::scheme::{
    euler2d_stage, make_schedule, manual_schedule, run_stage, EnergyProfile, GeometricParams,
    ManualParams, ParameterSchedule, SchemeError, SeedSpec, SeededSource, StageOptions,
    StageReport, StateSource, ZeroSource,
};
use crate::spectral::{
    inv_gradperp, inverse_div_d, inverse_div_e, inverse_div_i, localize, p_curl3, p_grad3,
    p_grad_bar, p_gradperp_bar, random_field, random_vector, write_snapshot, FrequencyRegion, Grid,
    MeanMode, ScalarField, SpectralError, VectorField, BERNSTEIN_CONSTANT, C,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Qg3d,
    Euler2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "one")]
    pub nz: usize,
}

fn one() -> usize {
    1
}

/// Pass/fail thresholds applied to the stage reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Relative error of the perturbation energy against `Σχ²ρ∫L²`.
    pub energy: f64,
    /// Relative size of `∫∇Ψ_q·∇(LW)`.
    pub cross_term: f64,
    /// `O_low` pointwise residual, in units of `δ_{q+1}`.
    pub low_frequency: f64,
    /// Relative slack on the gap window `[δ/4, 3δ/4]`.
    pub gap_slack: f64,
    /// `|det D̄Φ − 1|`.
    pub flow_det: f64,
    /// Shear-flow closed-form defect.
    pub flow_shear: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            energy: 0.05,
            cross_term: 1e-12,
            low_frequency: 1e-7,
            gap_slack: 0.2,
            flow_det: 1e-8,
            flow_shear: 1e-9,
        }
    }
}

impl Tolerances {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            energy: self.energy * s,
            cross_term: self.cross_term * s,
            low_frequency: self.low_frequency * s,
            gap_slack: self.gap_slack * s,
            flow_det: self.flow_det * s,
            flow_shear: self.flow_shear * s,
        }
    }

    fn all_positive(&self) -> bool {
        [
            self.energy,
            self.cross_term,
            self.low_frequency,
            self.gap_slack,
            self.flow_det,
            self.flow_shear,
        ]
        .iter()
        .all(|&t| t > 0.0 && t.is_finite())
    }
}

/// Time sampling of each stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sampling {
    pub energy: usize,
    pub residual: usize,
    pub weak_form: usize,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            energy: 64,
            residual: 6,
            weak_form: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<GeometricParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manual: Option<ManualParams>,
    pub mode: Mode,
    pub energy_profile: EnergyProfile,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Level-0 state; the zero flow when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<SeedSpec>,
    /// Number of stages for `run`; all stages of the schedule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<usize>,
    #[serde(default)]
    pub sampling: Sampling,
    /// Write the final `∇Ψ` at `t = 0` as a binary field snapshot.
    #[serde(default)]
    pub snapshot: bool,
}

fn default_output() -> PathBuf {
    PathBuf::from("qglab-out")
}

impl RunConfig {
    pub fn grid(&self) -> Result<Grid, CliError> {
        let g = self.grid;
        Ok(if g.nz == 1 {
            Grid::planar(g.nx, g.ny)?
        } else {
            Grid::new(g.nx, g.ny, g.nz)?
        })
    }

    pub fn schedule(&self) -> Result<ParameterSchedule, CliError> {
        match (&self.schedule, &self.manual) {
            (Some(p), None) => Ok(make_schedule(*p, self.stages.unwrap_or(1))?),
            (None, Some(m)) => Ok(manual_schedule(m.clone())?),
            _ => Err(CliError::Invalid(
                "exactly one of `schedule` and `manual` must be given".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |s: String| Err(CliError::Invalid(s));
        let g = self.grid()?;
        match self.mode {
            Mode::Euler2d if !g.is_planar() => {
                return bad(format!("mode euler2d needs nz = 1, got nz = {}", g.nz))
            }
            Mode::Qg3d if g.is_planar() => return bad("mode qg3d needs nz > 1".into()),
            _ => {}
        }
        if !self.tolerances.all_positive() {
            return bad("all tolerances must be positive".into());
        }
        if !self.energy_profile.is_valid() {
            return bad(format!("invalid energy profile {:?}", self.energy_profile));
        }
        let s = self.schedule()?;
        if let Some(n) = self.stages {
            if n == 0 || n > s.stages() {
                return bad(format!("stages = {n} outside 1..={}", s.stages()));
            }
        }
        Ok(())
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| CliError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    parse_config_str(&fs::read_to_string(path).map_err(io_err(path))?)
}

// ---------------------------------------------------------------------------
// Verification suites

/// Identities of the inverse divergences and projections on random
/// band-limited inputs, and the `C/λ` gain of the order `−1` operators.
#[derive(Debug, Clone, Serialize)]
pub struct OperatorCertificate {
    pub grid: Grid,
    pub inputs: usize,
    pub inverse_e: f64,
    pub inverse_i: f64,
    pub inverse_d: f64,
    pub helmholtz_3d: f64,
    pub horizontal_pair: f64,
    pub gain: Vec<GainRow>,
    pub gain_constant: f64,
    pub identity_tol: f64,
    pub projection_tol: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GainRow {
    pub lambda: f64,
    pub inverse_d: f64,
    pub inverse_i: f64,
    pub inv_gradperp: f64,
}

fn rel_v(a: &VectorField, b: &VectorField) -> f64 {
    a.sub(b).c0() / b.c0().max(f64::MIN_POSITIVE)
}

fn rel_s(a: &ScalarField, b: &ScalarField) -> f64 {
    a.sub(b).c0() / b.c0().max(f64::MIN_POSITIVE)
}

pub fn verify_operators(
    grid: Grid,
    inputs: usize,
    seed: u64,
    scale: f64,
) -> Result<OperatorCertificate, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band = (grid.nx.min(grid.ny) / 4) as i64;
    let (mut e, mut i, mut d, mut h3, mut h2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..inputs {
        let f = random_field(grid, band, MeanMode::SliceMeanZero, &mut rng);
        let g = random_field(grid, band, MeanMode::SliceMeanZero, &mut rng);
        let gf = f.hgrad();
        e = e.max(rel_v(&inverse_div_e(&gf)?.hdiv(), &gf));
        i = i.max(rel_s(&inverse_div_i(&g)?.hdiv(), &g));
        let x = VectorField::new(gf.c[0].clone(), gf.c[1].clone(), g);
        d = d.max(rel_v(&inverse_div_d(&x)?.hdiv(), &x));
        let v = random_vector(grid, band, MeanMode::MeanZero, &mut rng);
        h3 = h3.max(rel_v(&p_grad3(&v)?.add(&p_curl3(&v)?), &v));
        let w = random_vector(grid, band, MeanMode::SliceMeanZero, &mut rng);
        h2 = h2.max(rel_v(&p_grad_bar(&w)?.add(&p_gradperp_bar(&w)?), &w));
    }
    let gain = operator_gain(seed)?;
    let worst_gain = gain
        .iter()
        .flat_map(|r| [r.inverse_d, r.inverse_i, r.inv_gradperp])
        .fold(0.0, f64::max);
    let (id_tol, pr_tol) = (1e-10 * scale, 1e-12 * scale);
    let passed = [e, i, d].iter().all(|&r| r <= id_tol)
        && h3 <= pr_tol
        && h2 <= pr_tol
        && worst_gain <= BERNSTEIN_CONSTANT;
    Ok(OperatorCertificate {
        grid,
        inputs,
        inverse_e: e,
        inverse_i: i,
        inverse_d: d,
        helmholtz_3d: h3,
        horizontal_pair: h2,
        gain,
        gain_constant: BERNSTEIN_CONSTANT,
        identity_tol: id_tol,
        projection_tol: pr_tol,
        passed,
    })
}

/// `λ‖T f‖_{C⁰}/‖f‖_{C⁰}` for `f` localized to the annulus at `λ`.
fn operator_gain(seed: u64) -> Result<Vec<GainRow>, CliError> {
    let g = Grid::new(96, 96, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a1);
    let mut rows = Vec::new();
    for lambda in [8.0, 16.0, 32.0] {
        let region = FrequencyRegion::Annulus { lambda };
        let f = localize(
            &random_field(g, 47, MeanMode::SliceMeanZero, &mut rng),
            &region,
        )?;
        let h = localize(
            &random_field(g, 47, MeanMode::SliceMeanZero, &mut rng),
            &region,
        )?;
        let gf = f.hgrad();
        let x = VectorField::new(gf.c[0].clone(), gf.c[1].clone(), f.clone());
        let v = VectorField::new(f.clone(), h, ScalarField::zeros(g));
        rows.push(GainRow {
            lambda,
            inverse_d: inverse_div_d(&x)?.c0() * lambda / x.c0(),
            inverse_i: inverse_div_i(&f)?.c0() * lambda / f.c0(),
            inv_gradperp: inv_gradperp(&v)?.c0() * lambda / v.c0(),
        });
    }
    Ok(rows)
}

/// Stationarity of blocks and the factorization with the stage-0 cutoff.
#[derive(Debug, Clone, Serialize)]
pub struct BlockCertificate {
    pub lambda: i64,
    pub stationarity: f64,
    pub algebraic_identity: f64,
    pub mean_flux: f64,
    pub factorization_r1: f64,
    pub factorization_r2: f64,
    pub stationarity_tol: f64,
    pub identity_tol: f64,
    pub factorization_tol: f64,
    pub passed: bool,
}

/// A random-coefficient block on the full family `Ω_1` at `λ = 13`.
pub fn random_family_block(grid: Grid, seed: u64) -> Result<StationaryBlock, CliError> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dirs, mut cs) = (Vec::new(), Vec::new());
    for k in build_family(1).map_err(SchemeError::from)?.half() {
        let c = C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        dirs.extend([k.clone(), k.neg()]);
        cs.extend([c, c.conj()]);
    }
    Ok(make_block(grid, 13, &dirs, &cs).map_err(SchemeError::from)?)
}

pub fn verify_blocks(seed: u64, scale: f64) -> Result<BlockCertificate, CliError> {
    let b = random_family_block(Grid::new(64, 64, 64)?, seed)?;
    let q = block_pressure(&b).map_err(SchemeError::from)?;
    let stationarity = stationarity_residual(&b, &q).map_err(SchemeError::from)?;
    let algebraic_identity = verify_algebraic_identity(&b).map_err(SchemeError::from)?;
    let measured = block_mean_flux(&b).map_err(SchemeError::from)?;
    let formula = mean_flux_formula(&b);
    let fscale = formula.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mean_flux = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| (measured[i][j] - formula[i][j]).abs())
        .fold(0.0, f64::max)
        / fscale;
    let bz = random_family_block(Grid::new(32, 32, 128)?, seed)?;
    let qz = block_pressure(&bz).map_err(SchemeError::from)?;
    let cut = make_cutoff(0).map_err(SchemeError::from)?;
    let r = verify_cutoff_factorization(&bz, &qz, &cut).map_err(SchemeError::from)?;
    let (st, it, ft) = (1e-10 * scale, 1e-12 * scale, 1e-9 * scale);
    Ok(BlockCertificate {
        lambda: b.lambda(),
        stationarity,
        algebraic_identity,
        mean_flux,
        factorization_r1: r.r1,
        factorization_r2: r.r2,
        stationarity_tol: st,
        identity_tol: it,
        factorization_tol: ft,
        passed: stationarity <= st
            && algebraic_identity <= it
            && mean_flux <= it
            && r.r1 <= ft
            && r.r2 <= ft,
    })
}

pub fn verify_modes(seed: u64) -> Result<ModeCertificate, CliError> {
    Ok(certify(seed, 100).map_err(SchemeError::from)?)
}

// ---------------------------------------------------------------------------
// Stage runs

/// One verdict in the run ledger. Informational checks are reported but do
/// not affect the exit code.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Verdict {
    pub stage: u32,
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub holds: bool,
    pub required: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageSummary {
    pub q: u32,
    pub pumped_windows: usize,
    pub rho_max: f64,
    pub energy_rel_err: f64,
    pub cross_term: f64,
    pub gap_min: f64,
    pub gap_max: f64,
    pub stress_c0: f64,
    pub stress_c1: f64,
    pub transport_c0: f64,
    pub nash_c0: f64,
    pub o_high_c0: f64,
    pub o_low_c0: f64,
    pub contraction: f64,
    pub reconstruction: f64,
    pub max_frequency: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    /// Factor applied to the energy profile so that `max e ≤ δ_1`.
    pub energy_scale: f64,
    pub stages: Vec<StageSummary>,
    pub verdicts: Vec<Verdict>,
    /// Set when a stage aborted; names the failed assumption.
    pub error: Option<String>,
    pub passed: bool,
}

impl RunReport {
    pub fn failures(&self) -> Vec<&Verdict> {
        self.verdicts
            .iter()
            .filter(|v| v.required && !v.holds)
            .collect()
    }
}

fn verdicts(r: &StageReport, tol: &Tolerances) -> Vec<Verdict> {
    let q = r.q;
    let v = |name: &str, value: f64, bound: f64, holds: bool, required: bool| Verdict {
        stage: q,
        name: name.into(),
        value,
        bound,
        holds,
        required,
    };
    let mut out: Vec<Verdict> = r
        .invariants
        .iter()
        .map(|c: &InvariantCheck| v(&c.name, c.value, c.bound, c.holds, true))
        .collect();
    let d2 = r.params.delta_next2;
    let (lo, hi) = (
        (1.0 - tol.gap_slack) * d2 / 4.0,
        (1.0 + tol.gap_slack) * 3.0 * d2 / 4.0,
    );
    let e = &r.energy;
    let window = e.gap_min >= lo && e.gap_max <= hi;
    let window = window || e.window_samples == 0;
    out.extend([
        v(
            "perturbation energy",
            e.perturbation_rel_err_max,
            tol.energy,
            e.perturbation_rel_err_max <= tol.energy,
            true,
        ),
        v(
            "cross term",
            e.cross_term_max,
            tol.cross_term,
            e.cross_term_max <= tol.cross_term,
            true,
        ),
        v(
            "energy gap window",
            if window { 0.0 } else { 1.0 },
            0.0,
            window,
            true,
        ),
        v(
            "stress contraction",
            r.stress.contraction,
            0.5,
            r.stress.contraction_holds,
            true,
        ),
        v(
            "low-frequency cancellation",
            r.o_low.max_residual,
            tol.low_frequency * r.params.delta_next,
            r.o_low.max_residual <= tol.low_frequency * r.params.delta_next,
            true,
        ),
        v(
            "flow determinant",
            r.flows.max_det_defect,
            tol.flow_det,
            r.flows.max_det_defect <= tol.flow_det,
            true,
        ),
        v(
            "shear flow",
            r.flows.max_shear_defect,
            tol.flow_shear,
            r.flows.max_shear_defect <= tol.flow_shear,
            true,
        ),
        v(
            "parity (full frequency)",
            r.parity.min_full_sum,
            r.parity.bound,
            r.parity.full_holds,
            true,
        ),
        // Fails for the 3D families by construction; reported, not enforced.
        v(
            "parity (horizontal)",
            r.parity.min_horizontal_sum,
            r.parity.bound,
            r.parity.horizontal_holds,
            false,
        ),
    ]);
    out
}

fn summary(r: &StageReport) -> StageSummary {
    StageSummary {
        q: r.q,
        pumped_windows: r.pumped_windows,
        rho_max: r.rho_max,
        energy_rel_err: r.energy.perturbation_rel_err_max,
        cross_term: r.energy.cross_term_max,
        gap_min: r.energy.gap_min,
        gap_max: r.energy.gap_max,
        stress_c0: r.stress.c0_max,
        stress_c1: r.stress.c1_max,
        transport_c0: r.stress.transport_c0,
        nash_c0: r.stress.nash_c0,
        o_high_c0: r.stress.o_high_c0,
        o_low_c0: r.stress.o_low_c0,
        contraction: r.stress.contraction,
        reconstruction: r.reconstruction_max,
        max_frequency: r.frequency.max_kbar,
    }
}

/// Stage reports plus the run ledger; nothing is written to disk.
pub struct RunOutcome {
    pub report: RunReport,
    pub stages: Vec<StageReport>,
    pub final_state: Option<Arc<dyn StateSource>>,
    pub timings: Vec<f64>,
}

/// Runs `stages` consecutive stages from the configured level-0 state.
pub fn execute(cfg: &RunConfig, stages: usize) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let schedule = cfg.schedule()?;
    let euler = cfg.mode == Mode::Euler2d;
    let (profile, energy_scale) = cfg.energy_profile.capped(schedule.delta[1]);
    let mut source: Arc<dyn StateSource> = match cfg.initial {
        Some(spec) => Arc::new(SeededSource::new(grid, 0, spec)?),
        None => Arc::new(ZeroSource { grid, level: 0 }),
    };
    let mut report = RunReport {
        mode: cfg.mode,
        seed: cfg.seed,
        energy_scale,
        stages: vec![],
        verdicts: vec![],
        error: None,
        passed: true,
    };
    let mut reports = Vec::new();
    let mut timings = Vec::new();
    for q in 0..stages as u32 {
        let params = schedule.stage(q)?;
        let mut opts = StageOptions::new(params, profile, euler);
        opts.energy_samples = cfg.sampling.energy;
        opts.residual_samples = cfg.sampling.residual;
        opts.weak_form_tests = cfg.sampling.weak_form;
        opts.seed = cfg.seed.wrapping_add(q as u64);
        let start = Instant::now();
        let out = if euler {
            euler2d_stage(source.clone(), opts)
        } else {
            run_stage(source.clone(), opts)
        };
        timings.push(start.elapsed().as_secs_f64());
        match out {
            Ok((next, r)) => {
                report.stages.push(summary(&r));
                report.verdicts.extend(verdicts(&r, &cfg.tolerances));
                reports.push(r);
                source = Arc::new(next);
            }
            Err(e) => {
                report.error = Some(format!("stage {q}: {e}"));
                report.passed = false;
                return Ok(RunOutcome {
                    report,
                    stages: reports,
                    final_state: None,
                    timings,
                });
            }
        }
    }
    report.passed = report.failures().is_empty();
    Ok(RunOutcome {
        report,
        stages: reports,
        final_state: Some(source),
        timings,
    })
}

/// Writes `summary.json`, `stage_<q>.json`, `stage_<q>.csv`, `timings.json`
/// and, if requested, `psi_grad.qgcf`. Everything except the timings is a
/// deterministic function of the config.
pub fn write_artifacts(cfg: &RunConfig, out: &RunOutcome, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(io_err(&p))
    };
    write(
        "summary.json",
        serde_json::to_string_pretty(&out.report)? + "\n",
    )?;
    for r in &out.stages {
        write(
            &format!("stage_{}.json", r.q),
            serde_json::to_string_pretty(r)? + "\n",
        )?;
        write(&format!("stage_{}.csv", r.q), r.csv())?;
    }
    write(
        "timings.json",
        serde_json::to_string_pretty(&out.timings)? + "\n",
    )?;
    if cfg.snapshot {
        if let Some(s) = &out.final_state {
            let snap = s.snapshot(0.0)?;
            let p = dir.join("psi_grad.qgcf");
            let mut f = fs::File::create(&p).map_err(io_err(&p))?;
            write_snapshot(&mut f, &snap.grad_psi.c.iter().collect::<Vec<_>>())?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(
    name = "qglab",
    version,
    about = "Convex-integration laboratory for QG and 2D Euler"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, global = true, default_value_t = 1.0)]
    pub tolerance_scale: f64,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Exact certificate of the direction families.
    VerifyModes,
    /// Identities of the Fourier-multiplier operators.
    VerifyOperators,
    /// Stationarity and cutoff factorization of the building blocks.
    VerifyBlocks,
    /// One stage `0 → 1`.
    RunStage,
    /// All configured stages.
    Run,
    /// Reads `summary.json` from the output directory and prints the verdicts.
    Report,
}

/// Caps the global thread pool at `QGLAB_THREADS` if set.
pub fn init_threads() {
    if let Some(n) = std::env::var("QGLAB_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Invalid("--config <path> is required".into()))?;
    let mut cfg = parse_config(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(o) = &cli.output {
        cfg.output_dir = o.clone();
    }
    if !(cli.tolerance_scale > 0.0) {
        return Err(CliError::Invalid(
            "--tolerance-scale must be positive".into(),
        ));
    }
    cfg.tolerances = cfg.tolerances.scaled(cli.tolerance_scale);
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a command; the returned code is 0 iff every required check passed.
pub fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let seed = cli.seed.unwrap_or(0);
    let code = |ok: bool| if ok { 0 } else { 1 };
    match cli.command {
        Command::VerifyModes => {
            let c = verify_modes(seed)?;
            print_json(&c)?;
            Ok(code(c.passed))
        }
        Command::VerifyOperators => {
            let c = verify_operators(Grid::new(64, 64, 64)?, 50, seed, cli.tolerance_scale)?;
            print_json(&c)?;
            Ok(code(c.passed))
        }
        Command::VerifyBlocks => {
            let c = verify_blocks(seed, cli.tolerance_scale)?;
            print_json(&c)?;
            Ok(code(c.passed))
        }
        Command::RunStage | Command::Run => {
            let cfg = load_config(cli)?;
            let n = match cli.command {
                Command::RunStage => 1,
                _ => cfg.stages.unwrap_or(cfg.schedule()?.stages()),
            };
            let out = execute(&cfg, n)?;
            write_artifacts(&cfg, &out, &cfg.output_dir)?;
            print_verdicts(&out.report);
            Ok(code(out.report.passed))
        }
        Command::Report => {
            let dir = cli.output.clone().unwrap_or_else(default_output);
            let p = dir.join("summary.json");
            let r: RunReport = serde_json::from_str(&fs::read_to_string(&p).map_err(io_err(&p))?)?;
            print_verdicts(&r);
            Ok(code(r.passed))
        }
    }
}

pub fn print_verdicts(r: &RunReport) {
    if r.energy_scale != 1.0 {
        println!("energy profile rescaled by {:e}", r.energy_scale);
    }
    for v in &r.verdicts {
        let tag = match (v.holds, v.required) {
            (true, _) => "pass",
            (false, true) => "FAIL",
            (false, false) => "info",
        };
        println!(
            "[{tag}] stage {} {:<28} {:e} (bound {:e})",
            v.stage, v.name, v.value, v.bound
        );
    }
    if let Some(e) = &r.error {
        println!("[FAIL] {e}");
    }
    println!(
        "{}",
        if r.passed {
            "all invariants hold"
        } else {
            "invariant failure"
        }
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "grid": {"nx": 160, "ny": 160},
        "manual": {"lambda": [13, 65], "delta": [1.0, 0.25], "mu": [10.0]},
        "mode": "euler2d",
        "energy_profile": {"type": "bump", "center": 0.0, "width": 0.3, "height": 0.5}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str(MINIMAL).unwrap();
        assert_eq!(c.grid.nz, 1);
        assert_eq!(c.seed, 0);
        assert_eq!(c.tolerances, Tolerances::default());
        assert_eq!(c.sampling, Sampling::default());
        assert_eq!(c.output_dir, PathBuf::from("qglab-out"));
        assert!(c.initial.is_none());
    }

    #[test]
    fn unknown_mode_names_the_key() {
        let text = MINIMAL.replace("euler2d", "qg4d");
        match parse_config_str(&text) {
            Err(CliError::Schema { path, .. }) => assert_eq!(path, "mode"),
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("\"mode\"", "\"colour\": 1, \"mode\"");
        assert!(matches!(
            parse_config_str(&text),
            Err(CliError::Schema { .. })
        ));
    }

    #[test]
    fn manual_lambda_must_increase() {
        let text = MINIMAL.replace("[13, 65]", "[65, 13]");
        assert!(matches!(
            parse_config_str(&text),
            Err(CliError::Scheme(SchemeError::Schedule(_)))
        ));
    }

    #[test]
    fn mode_must_match_the_grid() {
        let text = MINIMAL.replace("\"ny\": 160", "\"ny\": 160, \"nz\": 8");
        assert!(matches!(parse_config_str(&text), Err(CliError::Invalid(_))));
    }

    #[test]
    fn zero_energy_leaves_the_state_unchanged() {
        let mut c = parse_config_str(MINIMAL).unwrap();
        c.energy_profile = EnergyProfile::Zero;
        c.sampling = Sampling {
            energy: 4,
            residual: 2,
            weak_form: 0,
        };
        let out = execute(&c, 1).unwrap();
        assert!(out.report.passed, "{:?}", out.report);
        let s = &out.report.stages[0];
        assert_eq!(s.pumped_windows, 0);
        assert_eq!(s.stress_c0, 0.0);
        let snap = out.final_state.unwrap().snapshot(0.0).unwrap();
        assert!(snap.grad_psi.is_zero());
    }

    #[test]
    fn profile_is_capped_at_the_first_delta() {
        let mut c = parse_config_str(MINIMAL).unwrap();
        c.energy_profile = EnergyProfile::Bump {
            center: 0.0,
            width: 0.3,
            height: 4.0,
        };
        c.sampling = Sampling {
            energy: 4,
            residual: 1,
            weak_form: 0,
        };
        let out = execute(&c, 1).unwrap();
        assert_eq!(out.report.energy_scale, 0.25);
    }

    #[test]
    fn block_certificate_passes() {
        let c = verify_blocks(3, 1.0).unwrap();
        assert!(c.passed, "{c:?}");
    }
}
