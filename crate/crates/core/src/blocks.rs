//! Approximately stationary building blocks: Laplacian eigenfunctions at one
//! frequency shell, their curl potential `Q`, the mean flux, and the `z`-cutoff.
//!
//! All `z`-derivatives of cutoff-weighted fields use the product rule with the
//! exact derivative of `L`, since `L` is not band-limited.

use rustfft::num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::exact_modes::RationalDirection;
use crate::spectral::{self, Grid, ScalarField, SpectralError, VectorField};

type C = Complex64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("λk is not an integer vector for λ = {0}, k = {1}")]
    NotLattice(i64, String),
    #[error("frequency {0:?} overflows the grid band")]
    BandOverflow([i64; 3]),
    #[error("direction set is not closed under negation")]
    NotSymmetric,
    #[error("amplitudes violate c_(-k) = conj(c_k) at k = {0}")]
    NotReal(String),
    #[error("{0} directions but {1} amplitudes")]
    LengthMismatch(usize, usize),
    #[error("empty plateau: need support wall {support} < plateau wall {plateau} < π")]
    EmptyPlateau { plateau: f64, support: f64 },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// `V = Σ_{k∈Ω} (1/λ) c_k e^{iλk·x}`.
#[derive(Debug, Clone)]
pub struct StationaryBlock {
    lambda: i64,
    directions: Vec<RationalDirection>,
    coeffs: Vec<C>,
    v: ScalarField,
}

impl StationaryBlock {
    pub fn lambda(&self) -> i64 {
        self.lambda
    }

    pub fn directions(&self) -> &[RationalDirection] {
        &self.directions
    }

    pub fn coeffs(&self) -> &[C] {
        &self.coeffs
    }

    pub fn field(&self) -> &ScalarField {
        &self.v
    }

    pub fn grid(&self) -> Grid {
        self.v.grid()
    }

    /// `‖|∇V|²‖_∞`.
    pub fn grad_sq_max(&self) -> f64 {
        dot_max(&self.v.gradient())
    }
}

fn dot_max(g: &VectorField) -> f64 {
    let s: Vec<Vec<f64>> = g.c.iter().map(|c| c.samples()).collect();
    (0..s[0].len())
        .map(|i| s[0][i] * s[0][i] + s[1][i] * s[1][i] + s[2][i] * s[2][i])
        .fold(0.0, f64::max)
}

pub fn make_block(
    grid: Grid,
    lambda: i64,
    directions: &[RationalDirection],
    c: &[C],
) -> Result<StationaryBlock, BlockError> {
    if directions.len() != c.len() {
        return Err(BlockError::LengthMismatch(directions.len(), c.len()));
    }
    let scale = c
        .iter()
        .fold(0.0f64, |m, v| m.max(v.norm()))
        .max(f64::MIN_POSITIVE);
    let mut spec = vec![C::new(0.0, 0.0); grid.len()];
    for (k, ck) in directions.iter().zip(c) {
        let j = directions
            .iter()
            .position(|d| *d == k.neg())
            .ok_or(BlockError::NotSymmetric)?;
        if (c[j] - ck.conj()).norm() > 1e-14 * scale {
            return Err(BlockError::NotReal(k.to_string()));
        }
        let p = k
            .scaled(lambda)
            .ok_or_else(|| BlockError::NotLattice(lambda, k.to_string()))?;
        if !grid.in_band(p) {
            return Err(BlockError::BandOverflow(p));
        }
        let iz = p[2].rem_euclid(grid.nz as i64) as usize;
        spec[grid.freq_index(p[0], p[1], iz)] += ck / lambda as f64;
    }
    let v = ScalarField::from_spectrum3(grid, spec)?;
    Ok(StationaryBlock {
        lambda,
        directions: directions.to_vec(),
        coeffs: c.to_vec(),
        v,
    })
}

/// `∇̄·(∇V ⊗ ∇̄⊥V)`.
pub fn block_flux_divergence(v: &ScalarField) -> Result<VectorField, SpectralError> {
    Ok(spectral::outer(&v.gradient(), &v.hgradperp())?.hdiv())
}

/// `Q = (−Δ)^{-1} curl ∇̄·(∇V ⊗ ∇̄⊥V)`.
pub fn block_pressure(block: &StationaryBlock) -> Result<VectorField, BlockError> {
    if block.coeffs.iter().all(|c| c.norm() == 0.0) {
        return Ok(VectorField::zeros(block.grid()));
    }
    let f = block_flux_divergence(&block.v)?;
    let cq = f.curl();
    Ok(VectorField {
        c: cq.c.clone().map(|x| x.inv_neg_laplacian()),
    })
}

fn normalizer(block: &StationaryBlock) -> f64 {
    (block.lambda as f64 * block.grad_sq_max()).max(f64::MIN_POSITIVE)
}

/// `‖∇̄·(∇V⊗∇̄⊥V) − curl Q‖_∞ / (λ‖(∇V)²‖_∞)`.
pub fn stationarity_residual(block: &StationaryBlock, q: &VectorField) -> Result<f64, BlockError> {
    let f = block_flux_divergence(&block.v)?;
    Ok(f.sub(&q.curl()).c0() / normalizer(block))
}

/// `‖∇·∇̄·(∇V⊗∇̄⊥V)‖_∞ / (λ³‖(∇V)²‖_∞)`.
pub fn verify_algebraic_identity(block: &StationaryBlock) -> Result<f64, BlockError> {
    let f = block_flux_divergence(&block.v)?;
    let l = block.lambda as f64;
    Ok(f.div().c0() / (l * l * normalizer(block)))
}

/// Zero-frequency coefficient of `∇V ⊗ ∇̄⊥V`.
pub fn block_mean_flux(block: &StationaryBlock) -> Result<[[f64; 3]; 3], BlockError> {
    Ok(spectral::outer(&block.v.gradient(), &block.v.hgradperp())?.mean())
}

/// `Σ_{k∈Ω} |c_k|² k ⊗ k̄⊥`, the closed form of the mean flux.
pub fn mean_flux_formula(block: &StationaryBlock) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for (k, c) in block.directions.iter().zip(&block.coeffs) {
        let kf = k.as_f64();
        let perp = [-kf[1], kf[0], 0.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += c.norm_sqr() * kf[i] * perp[j];
            }
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Cutoff

pub(crate) fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (10.0 - 15.0 * x + 6.0 * x * x)
}

pub(crate) fn smoothstep_prime(x: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) {
        return 0.0;
    }
    30.0 * x * x * (1.0 - x) * (1.0 - x)
}

/// `L(z)`: one on `[p, 2π − p]`, zero outside `[s, 2π − s]`, quintic ramps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CutoffProfile {
    pub plateau: f64,
    pub support: f64,
    /// `l_{q+1}` and `l_{q+2}`; zero for the trivial profile.
    pub l_inner: f64,
    pub l_outer: f64,
    pub trivial: bool,
}

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

impl CutoffProfile {
    /// `L ≡ 1`.
    pub fn unit() -> Self {
        Self {
            plateau: 0.0,
            support: 0.0,
            l_inner: 0.0,
            l_outer: 0.0,
            trivial: true,
        }
    }

    pub fn from_walls(plateau: f64, support: f64) -> Result<Self, BlockError> {
        if !(support > 0.0 && plateau > support && plateau < std::f64::consts::PI) {
            return Err(BlockError::EmptyPlateau { plateau, support });
        }
        Ok(Self {
            plateau,
            support,
            l_inner: 1.0 / plateau,
            l_outer: 1.0 / support,
            trivial: false,
        })
    }

    pub fn value(&self, z: f64) -> f64 {
        if self.trivial {
            return 1.0;
        }
        let w = self.plateau - self.support;
        let d = z.rem_euclid(TWO_PI);
        let d = d.min(TWO_PI - d);
        smoothstep((d - self.support) / w)
    }

    pub fn derivative(&self, z: f64) -> f64 {
        if self.trivial {
            return 0.0;
        }
        let w = self.plateau - self.support;
        let z = z.rem_euclid(TWO_PI);
        if z <= std::f64::consts::PI {
            smoothstep_prime((z - self.support) / w) / w
        } else {
            -smoothstep_prime((TWO_PI - z - self.support) / w) / w
        }
    }

    pub fn samples(&self, grid: Grid) -> Vec<f64> {
        if grid.is_planar() {
            return vec![1.0];
        }
        grid.z_points().iter().map(|&z| self.value(z)).collect()
    }

    pub fn derivative_samples(&self, grid: Grid) -> Vec<f64> {
        if grid.is_planar() {
            return vec![0.0];
        }
        grid.z_points()
            .iter()
            .map(|&z| self.derivative(z))
            .collect()
    }

    /// `∫_{T³} L²`.
    pub fn integral_sq(&self, grid: Grid) -> f64 {
        let s = self.samples(grid);
        grid.volume() * s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64
    }

    /// Largest `|L'|`, attained at the ramp midpoint.
    pub fn max_derivative(&self) -> f64 {
        if self.trivial {
            0.0
        } else {
            1.875 / (self.plateau - self.support)
        }
    }
}

/// `l_q = 2^{q+1}`.
pub fn l_param(q: u32) -> f64 {
    2f64.powi(q as i32 + 1)
}

/// Stage cutoff `L_{q+1}`: one on `[1/l_{q+1}, 2π − 1/l_{q+1}]`, supported in
/// `[1/l_{q+2}, 2π − 1/l_{q+2}]`.
pub fn make_cutoff(q: u32) -> Result<CutoffProfile, BlockError> {
    let mut c = CutoffProfile::from_walls(1.0 / l_param(q + 1), 1.0 / l_param(q + 2))?;
    c.l_inner = l_param(q + 1);
    c.l_outer = l_param(q + 2);
    Ok(c)
}

/// `∇(L f) = L∇f + L'f e₃`.
pub fn grad_weighted(f: &ScalarField, l: &[f64], dl: &[f64]) -> VectorField {
    let g = f.gradient();
    let mut out = g.mul_z(l);
    out.c[2].axpy(1.0, &f.mul_z(dl));
    out
}

/// `curl(w Q) = w curl Q + (−w'Q₂, w'Q₁, 0)` for a weight `w(z)`.
pub fn curl_weighted(q: &VectorField, w: &[f64], dw: &[f64]) -> VectorField {
    let mut out = q.curl().mul_z(w);
    out.c[0].axpy(-1.0, &q.c[1].mul_z(dw));
    out.c[1].axpy(1.0, &q.c[0].mul_z(dw));
    out
}

/// `(L², ∂_z L²)` sampled on the grid.
pub fn square_weight(cut: &CutoffProfile, grid: Grid) -> (Vec<f64>, Vec<f64>) {
    let l = cut.samples(grid);
    let dl = cut.derivative_samples(grid);
    let w = l.iter().map(|v| v * v).collect();
    let dw = l.iter().zip(&dl).map(|(a, b)| 2.0 * a * b).collect();
    (w, dw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactorizationResidual {
    pub r1: f64,
    pub r2: f64,
    /// `r₂` with the opposite sign on the lower-order term; equals
    /// `2‖∂_z(L²)(Q₂, −Q₁, 0)‖` up to round-off, so it is far from zero.
    pub r2_opposite_sign: f64,
}

/// `r₁ = ‖∇̄·(∇(LV)⊗∇̄⊥(LV)) − L²∇̄·(∇V⊗∇̄⊥V)‖` and
/// `r₂ = ‖L²∇̄·(∇V⊗∇̄⊥V) − curl(L²Q) − (Q₂∂_zL², −Q₁∂_zL², 0)‖`,
/// both over `λ‖(∇V)²‖_∞`. The sign of the lower-order term follows from
/// `curl(L²Q) = L² curl Q + ∇(L²) × Q`.
pub fn verify_cutoff_factorization(
    block: &StationaryBlock,
    q: &VectorField,
    cut: &CutoffProfile,
) -> Result<FactorizationResidual, BlockError> {
    let grid = block.grid();
    if q.grid() != grid {
        return Err(SpectralError::GridMismatch.into());
    }
    let v = &block.v;
    let l = cut.samples(grid);
    let dl = cut.derivative_samples(grid);
    let lv_grad = grad_weighted(v, &l, &dl);
    let lv_perp = v.hgradperp().mul_z(&l);
    let lhs = spectral::outer(&lv_grad, &lv_perp)?.hdiv();
    let (w, dw) = square_weight(cut, grid);
    let f = block_flux_divergence(v)?.mul_z(&w);
    let n = normalizer(block);
    let r1 = lhs.sub(&f).c0() / n;
    let mut lower = VectorField::zeros(grid);
    lower.c[0] = q.c[1].mul_z(&dw);
    lower.c[1] = q.c[0].mul_z(&dw).neg();
    let rest = f.sub(&curl_weighted(q, &w, &dw));
    let r2 = rest.sub(&lower).c0() / n;
    let r2_opposite_sign = rest.add(&lower).c0() / n;
    Ok(FactorizationResidual {
        r1,
        r2,
        r2_opposite_sign,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact_modes::{build_family, solve_coefficients};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid32() -> Grid {
        Grid::cube(32).unwrap()
    }

    fn pair_block(grid: Grid) -> StationaryBlock {
        let k = build_family(1).unwrap().half()[0].clone();
        make_block(
            grid,
            13,
            &[k.clone(), k.neg()],
            &[C::new(1.0, 0.0), C::new(1.0, 0.0)],
        )
        .unwrap()
    }

    fn random_block(grid: Grid, seed: u64, families: &[usize]) -> StationaryBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dirs = Vec::new();
        let mut cs = Vec::new();
        for &j in families {
            for k in build_family(j).unwrap().half() {
                let c = C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                dirs.push(k.clone());
                cs.push(c);
                dirs.push(k.neg());
                cs.push(c.conj());
            }
        }
        make_block(grid, 13, &dirs, &cs).unwrap()
    }

    #[test]
    fn pair_block_is_real_eigenfunction() {
        let b = pair_block(grid32());
        let v = b.field();
        assert!(v.is_real(1e-14));
        let lap = v.laplacian().add(&v.scale(169.0));
        assert!(lap.c0() <= 1e-12 * 169.0 * v.c0());
        assert!(v.mean().norm() < 1e-15);
    }

    #[test]
    fn reality_precondition() {
        let k = build_family(1).unwrap().half()[0].clone();
        let err = make_block(
            grid32(),
            13,
            &[k.clone(), k.neg()],
            &[C::new(1.0, 0.0), C::new(0.0, 1.0)],
        );
        assert!(matches!(err, Err(BlockError::NotReal(_))));
        assert!(matches!(
            make_block(grid32(), 13, &[k.clone()], &[C::new(1.0, 0.0)]),
            Err(BlockError::NotSymmetric)
        ));
        assert!(matches!(
            make_block(grid32(), 7, &[k.clone(), k.neg()], &[C::new(1.0, 0.0); 2]),
            Err(BlockError::NotLattice(..))
        ));
        assert!(matches!(
            make_block(grid32(), 26, &[k.clone(), k.neg()], &[C::new(1.0, 0.0); 2]),
            Err(BlockError::BandOverflow(_))
        ));
    }

    #[test]
    fn full_family_eigenfunction() {
        let b = random_block(grid32(), 1, &[1]);
        let v = b.field();
        assert!(v.laplacian().add(&v.scale(169.0)).c0() <= 1e-12 * 169.0 * v.c0());
    }

    #[test]
    fn zero_block_pressure() {
        let k = build_family(1).unwrap().half()[0].clone();
        let b = make_block(grid32(), 13, &[k.clone(), k.neg()], &[C::new(0.0, 0.0); 2]).unwrap();
        assert!(block_pressure(&b).unwrap().is_zero());
        assert_eq!(block_mean_flux(&b).unwrap(), [[0.0; 3]; 3]);
    }

    #[test]
    fn pair_block_stationary() {
        let b = pair_block(grid32());
        let q = block_pressure(&b).unwrap();
        assert!(stationarity_residual(&b, &q).unwrap() <= 1e-12);
        assert!(verify_algebraic_identity(&b).unwrap() <= 1e-13);
    }

    #[test]
    fn full_family_stationary_and_identity() {
        let b = random_block(grid32(), 2, &[1]);
        let q = block_pressure(&b).unwrap();
        assert!(stationarity_residual(&b, &q).unwrap() <= 1e-10);
        assert!(verify_algebraic_identity(&b).unwrap() <= 1e-12);
        let mixed = random_block(grid32(), 3, &[1, 2]);
        assert!(verify_algebraic_identity(&mixed).unwrap() <= 1e-12);
    }

    /// Mean of `∇V ⊗ ∇̄⊥V` by direct physical-space quadrature (trapezoid rule,
    /// exact for trigonometric polynomials resolved by the grid).
    fn quadrature_mean_flux(b: &StationaryBlock) -> [[f64; 3]; 3] {
        let g: Vec<Vec<f64>> = b.field().gradient().c.iter().map(|c| c.samples()).collect();
        let p: Vec<Vec<f64>> = b
            .field()
            .hgradperp()
            .c
            .iter()
            .map(|c| c.samples())
            .collect();
        let n = g[0].len() as f64;
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = g[i].iter().zip(&p[j]).map(|(a, b)| a * b).sum::<f64>() / n;
            }
        }
        m
    }

    fn max_diff(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> f64 {
        (0..9)
            .map(|i| (a[i / 3][i % 3] - b[i / 3][i % 3]).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn pair_mean_flux_matches_quadrature() {
        let b = pair_block(grid32());
        let quad = quadrature_mean_flux(&b);
        let spectral_mean = block_mean_flux(&b).unwrap();
        let formula = mean_flux_formula(&b);
        let scale = formula.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff(quad, spectral_mean) <= 1e-12 * scale);
        assert!(max_diff(quad, formula) <= 1e-12 * scale);
    }

    #[test]
    fn solved_coefficients_give_twice_the_target() {
        let fam = build_family(1).unwrap();
        let sol = solve_coefficients(&fam, fam.base_matrix()).unwrap();
        let mut dirs = Vec::new();
        let mut cs = Vec::new();
        for (k, c2) in sol.all() {
            dirs.push(k);
            cs.push(C::new(crate::exact_modes::rational_to_f64(&c2).sqrt(), 0.0));
        }
        let b = make_block(grid32(), 13, &dirs, &cs).unwrap();
        let quad = quadrature_mean_flux(&b);
        let target = fam.base_matrix().to_f64();
        for i in 0..3 {
            for j in 0..3 {
                assert!((quad[i][j] - 2.0 * target[i][j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cutoff_shape() {
        let c = make_cutoff(0).unwrap();
        let z: Vec<f64> = (0..20001).map(|i| TWO_PI * i as f64 / 20000.0).collect();
        let mut dmax: f64 = 0.0;
        for &t in &z {
            let v = c.value(t);
            assert!((0.0..=1.0).contains(&v));
            if (0.25..=TWO_PI - 0.25).contains(&t) {
                assert_eq!(v, 1.0);
            }
            if !(0.125..=TWO_PI - 0.125).contains(&t) {
                assert_eq!(v, 0.0);
            }
            dmax = dmax.max(c.derivative(t).abs());
        }
        assert!(dmax <= 4.0 * c.l_inner);
        assert!(make_cutoff(40).is_ok());
        assert!(matches!(
            CutoffProfile::from_walls(0.1, 0.2),
            Err(BlockError::EmptyPlateau { .. })
        ));
    }

    #[test]
    fn cutoff_derivative_matches_finite_difference() {
        let c = make_cutoff(1).unwrap();
        let h = 1e-6;
        for i in 0..1000 {
            let z = TWO_PI * i as f64 / 1000.0;
            let fd = (c.value(z + h) - c.value(z - h)) / (2.0 * h);
            assert!((fd - c.derivative(z)).abs() < 1e-4);
        }
    }

    #[test]
    fn factorization_without_cutoff() {
        let b = pair_block(grid32());
        let q = block_pressure(&b).unwrap();
        let r = verify_cutoff_factorization(&b, &q, &CutoffProfile::unit()).unwrap();
        assert!(r.r1 <= 1e-12 && r.r2 <= 1e-12);
    }

    #[test]
    fn factorization_with_stage_cutoff() {
        let grid = Grid::new(32, 32, 128).unwrap();
        let cut = make_cutoff(0).unwrap();
        for b in [pair_block(grid), random_block(grid, 4, &[1])] {
            let q = block_pressure(&b).unwrap();
            let r = verify_cutoff_factorization(&b, &q, &cut).unwrap();
            assert!(r.r1 <= 1e-9 && r.r2 <= 1e-9, "{r:?}");
            if q.c0() > 1e-8 * b.grad_sq_max() {
                assert!(r.r2_opposite_sign > 1e-3);
            }
        }
    }

    #[test]
    fn curl_weighted_matches_spectral_curl_for_smooth_weight() {
        let grid = Grid::new(16, 16, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = spectral::random_vector(grid, 4, spectral::MeanMode::Any, &mut rng);
        let w: Vec<f64> = grid
            .z_points()
            .iter()
            .map(|z| 1.0 + 0.5 * z.sin())
            .collect();
        let dw: Vec<f64> = grid.z_points().iter().map(|z| 0.5 * z.cos()).collect();
        let direct = q.mul_z(&w).curl();
        let rule = curl_weighted(&q, &w, &dw);
        assert!(direct.sub(&rule).c0() <= 1e-12 * direct.c0());
    }

    #[test]
    fn curl_of_weighted_pressure_vanishes_at_walls() {
        let grid = Grid::new(32, 32, 64).unwrap();
        let b = random_block(grid, 5, &[1]);
        let q = block_pressure(&b).unwrap();
        let (w, dw) = square_weight(&make_cutoff(0).unwrap(), grid);
        let c = curl_weighted(&q, &w, &dw);
        let s = c.c[2].samples();
        assert!(s[..grid.slice_len()].iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn random_blocks_are_stationary_eigenfunctions(seed in any::<u64>(), mixed in any::<bool>()) {
            let fams: &[usize] = if mixed { &[1, 2] } else { &[1] };
            let b = random_block(Grid::cube(32).unwrap(), seed, fams);
            let v = b.field();
            let lap = v.laplacian().add(&v.scale(169.0));
            prop_assert!(lap.c0() <= 1e-12 * 169.0 * v.c0());
            prop_assert!(verify_algebraic_identity(&b).unwrap() <= 1e-12);
            if !mixed {
                let q = block_pressure(&b).unwrap();
                prop_assert!(stationarity_residual(&b, &q).unwrap() <= 1e-10);
            }
        }
    }
}
