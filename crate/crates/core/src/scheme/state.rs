//! Iteration states: triples `(∇Ψ_q, Q_q, M̊_q)` solving
//! `∂_t∇Ψ + ∇̄·(∇Ψ ⊗ ∇̄⊥Ψ) = curl Q + ∇̄·M̊`, exposed one time slice at a time.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    block_pressure, curl_weighted, grad_weighted, make_block, square_weight, CutoffProfile,
};
use crate::exact_modes::{build_family, build_planar_family, rational_to_f64, RationalDirection};
use crate::spectral::{
    self, inv_gradperp, inverse_div_d, p_grad_bar, random_field, Grid, MatrixField, MeanMode,
    ScalarField, SpectralError, VectorField, C,
};
use crate::transport::{GradientVelocity, Velocity, ZeroVelocity};

use super::SchemeError;

/// The triple at one time, with `curl Q` stored next to `Q`: `Q` may carry a
/// non-band-limited `z`-weight, for which the spectral curl is inexact.
#[derive(Debug, Clone)]
pub struct StateSnapshot {
    pub t: f64,
    pub grad_psi: VectorField,
    pub q: VectorField,
    pub curl_q: VectorField,
    pub stress: MatrixField,
}

/// `(−v2, v1, 0)`.
pub fn hperp(v: &VectorField) -> VectorField {
    VectorField::new(v.c[1].neg(), v.c[0].clone(), ScalarField::zeros(v.grid()))
}

/// `∇̄·(a ⊗ ∇̄⊥ψ)` given `a` and `∇ψ`.
pub fn flux_divergence(
    a: &VectorField,
    grad_b: &VectorField,
) -> Result<VectorField, SpectralError> {
    if a.is_zero() || grad_b.is_zero() {
        return Ok(VectorField::zeros(a.grid()));
    }
    Ok(spectral::outer(a, &hperp(grad_b))?.hdiv())
}

impl StateSnapshot {
    pub fn zero(grid: Grid, t: f64) -> Self {
        Self {
            t,
            grad_psi: VectorField::zeros(grid),
            q: VectorField::zeros(grid),
            curl_q: VectorField::zeros(grid),
            stress: MatrixField::zeros(grid),
        }
    }

    pub fn grid(&self) -> Grid {
        self.grad_psi.grid()
    }

    /// `∇̄·(∇Ψ ⊗ ∇̄⊥Ψ)`.
    pub fn flux(&self) -> Result<VectorField, SpectralError> {
        flux_divergence(&self.grad_psi, &self.grad_psi)
    }

    /// `∂_t∇Ψ` read off the equation the triple solves.
    pub fn dt_grad_psi(&self) -> Result<VectorField, SpectralError> {
        let mut out = self.curl_q.add(&self.stress.hdiv());
        out.axpy(-1.0, &self.flux()?);
        Ok(out)
    }

    /// `∫_{T³}|∇Ψ|²`.
    pub fn energy(&self) -> f64 {
        self.grad_psi.inner(&self.grad_psi)
    }
}

/// A level-`q` triple that can be sampled at any time.
pub trait StateSource: Send + Sync {
    fn grid(&self) -> Grid;
    fn level(&self) -> u32;
    fn snapshot(&self, t: f64) -> Result<StateSnapshot, SchemeError>;
    /// The horizontal velocity `∇̄⊥Ψ_q` for the flow maps.
    fn velocity(&self) -> Arc<dyn Velocity + Send + Sync>;
    fn is_zero(&self) -> bool {
        false
    }
    /// The stress vanishes within this distance of `z ∈ {0, 2π}`.
    fn support_wall(&self) -> f64;
}

/// The zero triple, the base case of the iteration.
#[derive(Debug, Clone, Copy)]
pub struct ZeroSource {
    pub grid: Grid,
    pub level: u32,
}

impl StateSource for ZeroSource {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn level(&self) -> u32 {
        self.level
    }
    fn snapshot(&self, t: f64) -> Result<StateSnapshot, SchemeError> {
        Ok(StateSnapshot::zero(self.grid, t))
    }
    fn velocity(&self) -> Arc<dyn Velocity + Send + Sync> {
        Arc::new(ZeroVelocity)
    }
    fn is_zero(&self) -> bool {
        true
    }
    fn support_wall(&self) -> f64 {
        PI
    }
}

/// A remainder `v` written as `∇̄·M + curl Q` with `M = D(P̄^grad v)` and
/// `Q = (0, 0, −(∇̄⊥)^{-1}v)`.
#[derive(Debug, Clone)]
pub struct CurlSplit {
    pub stress: MatrixField,
    pub q: VectorField,
    pub curl_q: VectorField,
}

pub fn split_remainder(v: &VectorField) -> Result<CurlSplit, SpectralError> {
    let grid = v.grid();
    let stress = inverse_div_d(&p_grad_bar(v)?)?;
    let g = inv_gradperp(v)?;
    let curl_q = g.hgradperp();
    let q = VectorField::new(ScalarField::zeros(grid), ScalarField::zeros(grid), g.neg());
    Ok(CurlSplit { stress, q, curl_q })
}

/// Parameters of a seeded level-`q` state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    /// Frequency of the seeded block: 13 in 3D, a multiple of 5 in 2D.
    pub lambda: i64,
    /// Envelope `θ(t) = theta·(1 + ½ sin(omega·t))·b(t/duration)`, with
    /// `b(s) = exp(1 − 1/(1 − s²))` on `|s| < 1`, or `b ≡ 1` without a duration.
    pub theta: f64,
    pub omega: f64,
    #[serde(default)]
    pub duration: Option<f64>,
    /// Weight of the divergence-free stress pair `∇̄·M̊_⊥ = −curl Q_⊥`.
    pub sigma: f64,
    /// The state vanishes within `wall` of `z ∈ {0, 2π}` (3D only).
    pub wall: f64,
    pub seed: u64,
}

impl Default for SeedSpec {
    fn default() -> Self {
        Self {
            lambda: 13,
            theta: 0.05,
            omega: 3.0,
            duration: None,
            sigma: 1e-4,
            wall: 0.5,
            seed: 7,
        }
    }
}

/// A nonzero exact solution of the level-`q` equation: `∇Ψ = θ(t)G` for
/// `G = ∇(L_s V)` with `V` a random-phase block, and
/// `Q = θ²(L_s²Q_V + Q_r) + σQ_⊥`, `M̊ = θ'D(G) + θ²M_r + σM̊_⊥`, where
/// `∇̄·(G ⊗ ∇̄⊥G) − curl(L_s²Q_V) = ∇̄·M_r + curl Q_r`.
pub struct SeededSource {
    grid: Grid,
    level: u32,
    spec: SeedSpec,
    g: VectorField,
    d_g: MatrixField,
    q2: VectorField,
    curl_q2: VectorField,
    m2: MatrixField,
    q_perp: VectorField,
    curl_perp: VectorField,
    m_perp: MatrixField,
    velocity: Arc<GradientVelocity>,
}

impl SeededSource {
    pub fn new(grid: Grid, level: u32, spec: SeedSpec) -> Result<Self, SchemeError> {
        let planar = grid.is_planar();
        let family = if planar {
            build_planar_family(1)?
        } else {
            build_family(1)?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let amp = rational_to_f64(&family.center_value()).sqrt();
        let mut dirs: Vec<RationalDirection> = family.half().to_vec();
        let mut coeffs: Vec<C> = dirs
            .iter()
            .map(|_| C::from_polar(amp, rng.gen_range(0.0..2.0 * PI)))
            .collect();
        let n = dirs.len();
        for i in 0..n {
            dirs.push(dirs[i].neg());
            coeffs.push(coeffs[i].conj());
        }
        let block = make_block(grid, spec.lambda, &dirs, &coeffs)?;
        let qv = block_pressure(&block)?;
        let cut = if planar {
            CutoffProfile::unit()
        } else {
            CutoffProfile::from_walls(spec.wall + 0.25, spec.wall)?
        };
        let (ls, dls) = (cut.samples(grid), cut.derivative_samples(grid));
        let (w2, dw2) = square_weight(&cut, grid);

        let g = grad_weighted(block.field(), &ls, &dls);
        let d_g = inverse_div_d(&g)?;
        let q_g = qv.mul_z(&w2);
        let curl_q_g = curl_weighted(&qv, &w2, &dw2);
        let rem = flux_divergence(&g, &g)?.sub(&curl_q_g);
        let split = split_remainder(&rem)?;

        let p = random_field(grid, 3, MeanMode::SliceMeanZero, &mut rng).mul_z(&ls);
        let (pxx, pxy, pyy) = (p.dx().dx(), p.dx().dy(), p.dy().dy());
        let mut m_perp = MatrixField::zeros(grid);
        m_perp.c[0][0] = pxy.scale(-2.0);
        m_perp.c[1][1] = pxy.scale(2.0);
        m_perp.c[0][1] = pxx.sub(&pyy);
        m_perp.c[1][0] = pxx.sub(&pyy);
        let lap = p.hlaplacian();
        let q_perp = VectorField::new(
            ScalarField::zeros(grid),
            ScalarField::zeros(grid),
            lap.clone(),
        );
        let curl_perp = VectorField::new(lap.dy(), lap.dx().neg(), ScalarField::zeros(grid));

        let velocity = Arc::new(GradientVelocity::new(
            &g,
            Arc::new(move |t| seed_theta(&spec, t).0),
        ));
        Ok(Self {
            grid,
            level,
            spec,
            d_g,
            q2: q_g.add(&split.q),
            curl_q2: curl_q_g.add(&split.curl_q),
            m2: split.stress,
            g,
            q_perp,
            curl_perp,
            m_perp,
            velocity,
        })
    }

    pub fn spec(&self) -> &SeedSpec {
        &self.spec
    }

    pub fn theta(&self, t: f64) -> f64 {
        seed_theta(&self.spec, t).0
    }

    pub fn theta_prime(&self, t: f64) -> f64 {
        seed_theta(&self.spec, t).1
    }

    /// Weight of the stress pair at `t`: `σ b(t)²`.
    fn sigma(&self, t: f64) -> f64 {
        self.spec.sigma * seed_envelope(&self.spec, t).0.powi(2)
    }
}

/// `(b, b')` of the time envelope.
fn seed_envelope(spec: &SeedSpec, t: f64) -> (f64, f64) {
    match spec.duration {
        None => (1.0, 0.0),
        Some(d) => {
            let s = t / d;
            if s.abs() >= 1.0 {
                return (0.0, 0.0);
            }
            let b = (1.0 - 1.0 / (1.0 - s * s)).exp();
            (b, -2.0 * s / (1.0 - s * s).powi(2) * b / d)
        }
    }
}

/// `(θ, θ')`.
fn seed_theta(spec: &SeedSpec, t: f64) -> (f64, f64) {
    let (b, db) = seed_envelope(spec, t);
    let w = spec.omega;
    let osc = 1.0 + 0.5 * (w * t).sin();
    (
        spec.theta * osc * b,
        spec.theta * (0.5 * w * (w * t).cos() * b + osc * db),
    )
}

impl StateSource for SeededSource {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn level(&self) -> u32 {
        self.level
    }
    fn snapshot(&self, t: f64) -> Result<StateSnapshot, SchemeError> {
        let (th, dth) = (self.theta(t), self.theta_prime(t));
        let s = self.sigma(t);
        let mut q = self.q2.scale(th * th);
        q.axpy(s, &self.q_perp);
        let mut curl_q = self.curl_q2.scale(th * th);
        curl_q.axpy(s, &self.curl_perp);
        let mut stress = self.d_g.scale(dth);
        stress.axpy(th * th, &self.m2);
        stress.axpy(s, &self.m_perp);
        Ok(StateSnapshot {
            t,
            grad_psi: self.g.scale(th),
            q,
            curl_q,
            stress,
        })
    }
    fn velocity(&self) -> Arc<dyn Velocity + Send + Sync> {
        self.velocity.clone()
    }
    fn support_wall(&self) -> f64 {
        if self.grid.is_planar() {
            0.0
        } else {
            self.spec.wall
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: &VectorField, b: &VectorField) -> f64 {
        a.sub(b).c0() / b.c0().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn zero_source_is_zero() {
        let s = ZeroSource {
            grid: Grid::planar(8, 8).unwrap(),
            level: 0,
        };
        let snap = s.snapshot(0.3).unwrap();
        assert!(snap.grad_psi.is_zero() && snap.stress.is_zero() && snap.q.is_zero());
        assert_eq!(snap.energy(), 0.0);
        assert!(s.velocity().is_zero());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn split_recovers_remainder(seed in any::<u64>()) {
            let grid = Grid::new(16, 16, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = spectral::random_vector(grid, 4, MeanMode::SliceMeanZero, &mut rng);
            let s = split_remainder(&v).unwrap();
            let back = s.stress.hdiv().add(&s.curl_q);
            prop_assert!(rel(&back, &v) < 1e-12);
            prop_assert!(rel(&s.q.curl(), &s.curl_q) < 1e-12);
            prop_assert!(s.stress.third_column_zero());
            prop_assert!(s.stress.top_block_defect() < 1e-12 * s.stress.c0());
        }
    }

    /// The seeded triple solves the equation: `∂_t∇Ψ` from the equation
    /// agrees with the closed-form `θ'G`.
    #[test]
    fn seeded_state_solves_the_equation() {
        for grid in [
            Grid::new(32, 32, 32).unwrap(),
            Grid::planar(32, 32).unwrap(),
        ] {
            let lambda = if grid.is_planar() { 5 } else { 13 };
            let src = SeededSource::new(
                grid,
                0,
                SeedSpec {
                    lambda,
                    ..SeedSpec::default()
                },
            )
            .unwrap();
            for t in [0.0, 0.37, -1.2] {
                let snap = src.snapshot(t).unwrap();
                let exact = src.g.scale(src.theta_prime(t));
                assert!(
                    rel(&snap.dt_grad_psi().unwrap(), &exact) < 1e-10,
                    "{grid:?} t = {t}"
                );
                if grid.is_planar() {
                    assert!(rel(&snap.q.curl(), &snap.curl_q) < 1e-10);
                }
                assert!(snap.stress.third_column_zero());
                assert!(snap.stress.top_block_defect() < 1e-12 * snap.stress.c0());
            }
        }
    }

    #[test]
    fn seeded_envelope_derivative_and_support() {
        let spec = SeedSpec {
            duration: Some(0.4),
            ..SeedSpec::default()
        };
        let h = 1e-6;
        for i in 0..50 {
            let t = -0.5 + i as f64 / 49.0;
            let fd = (seed_theta(&spec, t + h).0 - seed_theta(&spec, t - h).0) / (2.0 * h);
            assert!((fd - seed_theta(&spec, t).1).abs() < 1e-7, "t = {t}");
        }
        let grid = Grid::planar(16, 16).unwrap();
        let src = SeededSource::new(grid, 0, SeedSpec { lambda: 5, ..spec }).unwrap();
        let snap = src.snapshot(0.45).unwrap();
        assert!(snap.grad_psi.c0() == 0.0 && snap.stress.c0() == 0.0 && snap.q.c0() == 0.0);
    }

    #[test]
    fn seeded_state_is_supported_away_from_the_walls() {
        let grid = Grid::new(16, 16, 64).unwrap();
        let src = SeededSource::new(grid, 0, SeedSpec::default()).unwrap();
        let snap = src.snapshot(0.2).unwrap();
        let mut fields: Vec<&ScalarField> = snap.stress.c.iter().flatten().collect();
        fields.extend(snap.grad_psi.c.iter());
        fields.extend(snap.q.c.iter());
        crate::transport::check_support(&fields, 0.5).unwrap();
        assert!(crate::transport::check_support(&fields, 0.8).is_err());
    }

    #[test]
    fn seeded_velocity_is_the_perpendicular_gradient() {
        let grid = Grid::planar(16, 16).unwrap();
        let src = SeededSource::new(
            grid,
            0,
            SeedSpec {
                lambda: 5,
                ..SeedSpec::default()
            },
        )
        .unwrap();
        let t = 0.4;
        let snap = src.snapshot(t).unwrap();
        let u = hperp(&snap.grad_psi);
        let (u1, u2) = (u.c[0].samples(), u.c[1].samples());
        let vel = src.velocity();
        for i in [0usize, 17, 100, 255] {
            let (v, _) = vel.eval(t, 0, grid.x(i / 16), grid.y(i % 16));
            assert!((v[0] - u1[i]).abs() < 1e-12 && (v[1] - u2[i]).abs() < 1e-12);
        }
    }
}
