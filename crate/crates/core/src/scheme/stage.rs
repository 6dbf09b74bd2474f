//! The stage `q → q+1`: pumped amplitudes on transported phases, the new
//! perturbation `∇(L W)`, the residual at a time slice, and its split into
//! `curl Q_{q+1} + ∇̄·M̊_{q+1}`.
//!
//! All time derivatives are taken at the slice: `∂_t∇Ψ_q` from the level-`q`
//! equation, `∂_tχ_l` in closed form and `∂_t w = −u·∇̄w` for transported
//! quantities.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_traits::Zero;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::blocks::{curl_weighted, grad_weighted, make_cutoff, square_weight, CutoffProfile};
use crate::exact_modes::{
    build_family, build_planar_family, mode_matrix, rational_to_f64, DirectionFamily,
};
use crate::spectral::{
    inverse_div_d, localize, mode_potential, p_grad_bar, random_field, FrequencyRegion, Grid,
    MatrixField, MeanMode, ScalarField, VectorField, C,
};
use crate::transport::{
    advance_flow, check_support, mollify_z, shear_flow_defect, transport_with_gradient,
    window_half_width, MollifierSpec, TransportError, TrigInterpolant, Velocity,
};

use super::partition::{EnergyProfile, TimePartition};
use super::schedule::StageParams;
use super::state::{flux_divergence, split_remainder, StateSnapshot, StateSource};
use super::SchemeError;

/// Storage of the class coordinates `m1..m5` in a matrix.
const COORDS: [(usize, usize); 5] = [(0, 0), (0, 1), (1, 0), (2, 0), (2, 1)];
/// Relative size below which a stored coefficient counts as zero in the
/// frequency-support check.
pub const FREQUENCY_TOL: f64 = 1e-13;
/// `curl Q_{q+1} + ∇̄·M̊_{q+1}` must reproduce the residual to this relative accuracy.
pub const RECONSTRUCTION_TOL: f64 = 1e-9;

/// `ρ = (∫L²)^{-1} max(e − ∫|∇Ψ_q|² − δ_{q+2}/2, 0)`.
pub fn pump_rho(e: f64, energy: f64, delta_next2: f64, int_l2: f64) -> f64 {
    (e - energy - 0.5 * delta_next2).max(0.0) / int_l2
}

/// Largest `|k̄|` carrying a coefficient above `FREQUENCY_TOL` times the
/// largest one.
pub fn max_horizontal_frequency(f: &ScalarField) -> f64 {
    frequency_above(f, FREQUENCY_TOL * f.max_abs_coeff())
}

/// Largest `|k̄|` carrying a coefficient above `cut`. Fields of the new state
/// share one cut, so a stress that cancels to rounding level at a slice does
/// not count its rounding noise as support.
fn frequency_above(f: &ScalarField, cut: f64) -> f64 {
    let g = f.grid();
    let sig = |i: usize, n: usize| {
        if i < n / 2 {
            i as f64
        } else {
            i as f64 - n as f64
        }
    };
    let mut best = 0.0f64;
    for (i, v) in f.hspec().iter().enumerate() {
        if v.norm() > cut && v.norm() > 0.0 {
            let (ix, iy) = ((i / g.ny) % g.nx, i % g.ny);
            let (a, b) = (sig(ix, g.nx), sig(iy, g.ny));
            best = best.max((a * a + b * b).sqrt());
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageOptions {
    pub params: StageParams,
    pub profile: EnergyProfile,
    /// 2D Euler: planar families, `L ≡ 1`, no spatial-support constraint.
    pub euler2d: bool,
    /// Times at which the energy is sampled.
    pub energy_samples: usize,
    /// Times at which the full residual is assembled and split.
    pub residual_samples: usize,
    /// Random test functions for the weak-form check; zero disables it.
    pub weak_form_tests: usize,
    pub seed: u64,
}

impl StageOptions {
    pub fn new(params: StageParams, profile: EnergyProfile, euler2d: bool) -> Self {
        Self {
            params,
            profile,
            euler2d,
            energy_samples: 64,
            residual_samples: 6,
            weak_form_tests: 20,
            seed: 0,
        }
    }
}

struct FamilyData {
    family: DirectionFamily,
    /// Wave vectors `λk` of the half-family.
    lattice: Vec<[i64; 3]>,
    /// `k ⊗ k̄⊥` of the half-family.
    kk: Vec<[[f64; 3]; 3]>,
    rows: Vec<Vec<f64>>,
    center: [f64; 5],
    eps: f64,
}

impl FamilyData {
    fn new(family: DirectionFamily, lambda: i64) -> Result<Self, SchemeError> {
        let lattice = family
            .half()
            .iter()
            .map(|k| {
                k.scaled(lambda).ok_or_else(|| {
                    SchemeError::Config(format!("λ = {lambda} does not put {k} on the lattice"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let kk = family
            .half()
            .iter()
            .map(|k| mode_matrix(k).to_f64())
            .collect();
        let base = family.base_matrix().to_f64();
        let center = COORDS.map(|(i, j)| base[i][j]);
        let rows = family.inverse_rows_f64();
        let eps = rational_to_f64(family.epsilon());
        Ok(Self {
            family,
            lattice,
            kk,
            rows,
            center,
            eps,
        })
    }
}

/// One active wave window at a time slice.
#[derive(Debug, Clone, Serialize)]
pub struct WaveRecord {
    pub l: i64,
    /// Family index `j`: 1 for odd `l`, 2 for even `l`.
    pub family: usize,
    pub chi: f64,
    pub rho: f64,
    /// `max ‖½M̊_{q,l}/ρ_l‖` over the grid, to be compared with `ε_j`.
    pub eps_ratio: f64,
    pub eps: f64,
    pub det_defect: f64,
    pub flow_steps: usize,
}

/// `∇(LW)` and `∂_t∇(LW)` at one time.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub t: f64,
    pub w: ScalarField,
    pub dt_w: ScalarField,
    pub grad: VectorField,
    pub dt_grad: VectorField,
    pub waves: Vec<WaveRecord>,
    /// `max_x ‖½Σ_l χ_l² Σ_k a_kl² k⊗k̄⊥ − Σ_l χ_l² M_{q,l}‖`.
    pub o_low_residual: f64,
    /// `Σ_l χ_l² ρ_l ∫L²`.
    pub expected_energy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SliceDiagnostics {
    pub t: f64,
    pub rho: f64,
    pub energy: f64,
    pub gap: f64,
    pub perturbation_energy: f64,
    pub expected_energy: f64,
    /// `|∫∇Ψ_q·∇(LW)|` over `‖∇Ψ_q‖‖∇(LW)‖`.
    pub cross_term: f64,
    pub stress_c0: f64,
    pub stress_c1: f64,
    pub prev_stress_c0: f64,
    pub transport_c0: f64,
    pub nash_c0: f64,
    pub o_high_c0: f64,
    pub o_low_c0: f64,
    pub o_low_residual: f64,
    pub reconstruction: f64,
    pub weak_form: Option<f64>,
    pub max_frequency: f64,
    pub waves: Vec<WaveRecord>,
}

/// The level-`q+1` triple at one time, with diagnostics when requested.
#[derive(Debug, Clone)]
pub struct SliceResult {
    pub next: StateSnapshot,
    pub diagnostics: Option<SliceDiagnostics>,
}

pub struct Stage {
    source: Arc<dyn StateSource>,
    opts: StageOptions,
    grid: Grid,
    cutoff: CutoffProfile,
    l: Vec<f64>,
    dl: Vec<f64>,
    w2: Vec<f64>,
    dw2: Vec<f64>,
    int_l2: f64,
    families: [FamilyData; 2],
    partition: TimePartition,
    rho: Vec<f64>,
    mollifier: MollifierSpec,
    velocity: Arc<dyn Velocity + Send + Sync>,
    anchors: Mutex<HashMap<i64, Arc<Option<MatrixField>>>>,
}

impl Stage {
    pub fn new(source: Arc<dyn StateSource>, opts: StageOptions) -> Result<Self, SchemeError> {
        let grid = source.grid();
        let p = opts.params;
        if opts.euler2d && !grid.is_planar() {
            return Err(SchemeError::NotPlanar(format!("grid has nz = {}", grid.nz)));
        }
        if !opts.euler2d && grid.is_planar() {
            return Err(SchemeError::Config(
                "the 3D stage needs a grid with nz > 1".into(),
            ));
        }
        if !opts.profile.is_valid() {
            return Err(SchemeError::Config(format!(
                "invalid energy profile {:?}",
                opts.profile
            )));
        }
        let build = |j| {
            if opts.euler2d {
                build_planar_family(j)
            } else {
                build_family(j)
            }
        };
        let (f1, f2) = (build(1)?, build(2)?);
        let den = num_integer::lcm(f1.lattice_denominator(), f2.lattice_denominator());
        let lam = p.lambda_next;
        if lam <= 0 || lam % den != 0 {
            return Err(SchemeError::Config(format!(
                "λ_(q+1) = {lam} must be a positive multiple of {den}"
            )));
        }
        let families = [FamilyData::new(f1, lam)?, FamilyData::new(f2, lam)?];
        let r = (lam as f64 / 10.0).ceil() as i64;
        for fam in &families {
            for k in &fam.lattice {
                let zr = if grid.is_planar() { 0 } else { r };
                if !grid.in_band([k[0].abs() + r, k[1].abs() + r, k[2].abs() + zr]) {
                    return Err(SchemeError::BandOverflow(lam));
                }
            }
        }
        let cutoff = if opts.euler2d {
            CutoffProfile::unit()
        } else {
            make_cutoff(p.q)?
        };
        let mollifier = MollifierSpec::for_stage(p.lambda_q, lam as f64)?;
        if !opts.euler2d
            && !source.is_zero()
            && source.support_wall() < cutoff.plateau + p.ell - 1e-12
        {
            return Err(SchemeError::Transport(TransportError::MarginViolation {
                z: source.support_wall(),
                wall: cutoff.plateau,
                margin: p.ell,
            }));
        }
        let (l, dl) = (cutoff.samples(grid), cutoff.derivative_samples(grid));
        let (w2, dw2) = square_weight(&cutoff, grid);
        let int_l2 = cutoff.integral_sq(grid);
        let partition = TimePartition::new(p.mu, opts.profile.radius());
        let mut rho = Vec::new();
        for li in partition.l_min..=partition.l_max {
            let t = partition.anchor(li);
            let e = opts.profile.value(t);
            let energy = if e == 0.0 || source.is_zero() {
                0.0
            } else {
                source.snapshot(t)?.energy()
            };
            let r = pump_rho(e, energy, p.delta_next2, int_l2);
            if r > p.delta_next {
                return Err(SchemeError::RhoOverflow {
                    l: li,
                    rho: r,
                    delta: p.delta_next,
                });
            }
            rho.push(r);
        }
        let velocity = source.velocity();
        Ok(Self {
            source,
            opts,
            grid,
            cutoff,
            l,
            dl,
            w2,
            dw2,
            int_l2,
            families,
            partition,
            rho,
            mollifier,
            velocity,
            anchors: Mutex::new(HashMap::new()),
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn options(&self) -> &StageOptions {
        &self.opts
    }

    pub fn partition(&self) -> &TimePartition {
        &self.partition
    }

    pub fn cutoff(&self) -> &CutoffProfile {
        &self.cutoff
    }

    pub fn int_l2(&self) -> f64 {
        self.int_l2
    }

    pub fn source(&self) -> &Arc<dyn StateSource> {
        &self.source
    }

    /// `ρ_l`; zero outside the partition range.
    pub fn rho_l(&self, l: i64) -> f64 {
        if l < self.partition.l_min || l > self.partition.l_max {
            0.0
        } else {
            self.rho[(l - self.partition.l_min) as usize]
        }
    }

    /// Indices with `ρ_l > 0`.
    pub fn pumped(&self) -> Vec<i64> {
        (self.partition.l_min..=self.partition.l_max)
            .filter(|&l| self.rho_l(l) > 0.0)
            .collect()
    }

    /// `ρ(t)` between anchors.
    pub fn rho_at(&self, t: f64, energy_q: f64) -> f64 {
        pump_rho(
            self.opts.profile.value(t),
            energy_q,
            self.opts.params.delta_next2,
            self.int_l2,
        )
    }

    /// `1` for odd `l`, `2` for even `l`.
    pub fn family_index(l: i64) -> usize {
        if l.rem_euclid(2) == 1 {
            1
        } else {
            2
        }
    }

    /// Largest `|k̄|` the stage may create: `λ_{q+1}` in 3D, where every wave
    /// and every product of two waves stays below it; `2.2λ_{q+1}` for the
    /// planar families, whose waves sit at `|k̄| = λ_{q+1}` with a ball of
    /// radius `λ_{q+1}/10`.
    pub fn frequency_bound(&self) -> f64 {
        let lam = self.opts.params.lambda_next as f64;
        if self.opts.euler2d {
            2.2 * lam
        } else {
            lam
        }
    }

    /// `M̊_{q,ℓ}` at the anchor of `l`, cached.
    fn anchor_stress(&self, l: i64) -> Result<Arc<Option<MatrixField>>, SchemeError> {
        if let Some(m) = self.anchors.lock().unwrap().get(&l) {
            return Ok(m.clone());
        }
        let m = if self.source.is_zero() {
            None
        } else {
            let s = self.source.snapshot(self.partition.anchor(l))?.stress;
            if s.is_zero() {
                None
            } else {
                let plateau = if self.opts.euler2d {
                    0.0
                } else {
                    self.cutoff.plateau
                };
                Some(mollify_z(&s, &self.mollifier, plateau)?)
            }
        };
        let m = Arc::new(m);
        let mut cache = self.anchors.lock().unwrap();
        if cache.len() > 6 {
            cache.clear();
        }
        cache.insert(l, m.clone());
        Ok(m)
    }

    /// The perturbation at `t`, given the level-`q` snapshot at `t`.
    pub fn perturbation(&self, t: f64, snap: &StateSnapshot) -> Result<Perturbation, SchemeError> {
        let grid = self.grid;
        let n = grid.len();
        let sl = grid.slice_len();
        let lam = self.opts.params.lambda_next;
        let mu = self.opts.params.mu;
        let mut w_acc = ScalarField::zeros(grid);
        let mut dw_acc = ScalarField::zeros(grid);
        let mut olow = vec![[0.0f64; 6]; 0];
        let mut waves = Vec::new();
        let mut expected = 0.0;
        let u: Option<[Vec<f64>; 2]> = if snap.grad_psi.is_zero() {
            None
        } else {
            let g2: Vec<f64> = snap.grad_psi.c[1].samples().iter().map(|v| -v).collect();
            Some([g2, snap.grad_psi.c[0].samples()])
        };

        for l in self.partition.active(t) {
            let rho = self.rho_l(l);
            if rho == 0.0 {
                continue;
            }
            let (chi, dchi) = (self.partition.chi_l(l, t), self.partition.dchi_l(l, t));
            let j = Self::family_index(l);
            let fam = &self.families[j - 1];
            let dim = fam.family.dim();
            let flow = advance_flow(&*self.velocity, grid, l, mu, t)?;
            let stress = self.anchor_stress(l)?;

            // Transported stress coordinates and their horizontal gradients.
            let mut tm: Vec<Option<(Vec<C>, [Vec<C>; 2])>> = Vec::with_capacity(dim);
            for &(a, b) in COORDS.iter().take(dim) {
                let entry = match &*stress {
                    Some(m) if !m.c[a][b].is_zero() => {
                        let f = &m.c[a][b];
                        if flow.is_identity() {
                            Some((
                                f.complex_samples(),
                                [f.dx().complex_samples(), f.dy().complex_samples()],
                            ))
                        } else {
                            Some(transport_with_gradient(f, &flow)?)
                        }
                    }
                    _ => None,
                };
                tm.push(entry);
            }
            let coords = |i: usize| -> ([f64; 5], [[f64; 2]; 5]) {
                let mut m = [0.0; 5];
                let mut g = [[0.0; 2]; 5];
                for c in 0..dim {
                    m[c] = rho * fam.center[c];
                    if let Some((v, gr)) = &tm[c] {
                        m[c] -= 0.5 * v[i].re;
                        g[c] = [-0.5 * gr[0][i].re, -0.5 * gr[1][i].re];
                    }
                }
                (m, g)
            };

            let eps_ratio = (0..n)
                .into_par_iter()
                .map(|i| {
                    let (m, _) = coords(i);
                    (0..dim)
                        .map(|c| (m[c] - rho * fam.center[c]).abs())
                        .fold(0.0, f64::max)
                        / rho
                })
                .reduce(|| 0.0, f64::max);
            if eps_ratio >= fam.eps {
                return Err(SchemeError::EpsilonBall {
                    l,
                    ratio: eps_ratio,
                    eps: fam.eps,
                });
            }

            let amp = |i: usize, kidx: usize| -> (f64, [f64; 2]) {
                let (m, g) = coords(i);
                let row = &fam.rows[kidx];
                let c2: f64 = (0..dim).map(|c| row[c] * m[c]).sum();
                let a = c2.max(0.0).sqrt();
                if a == 0.0 {
                    return (0.0, [0.0; 2]);
                }
                let gc: [f64; 2] = [0, 1].map(|d| (0..dim).map(|c| row[c] * g[c][d]).sum::<f64>());
                (a, [gc[0] / (2.0 * a), gc[1] / (2.0 * a)])
            };

            for (kidx, (k, lk)) in fam.family.half().iter().zip(&fam.lattice).enumerate() {
                let kf = lk.map(|v| v as f64);
                let mut s = vec![C::new(0.0, 0.0); n];
                let mut ds = vec![C::new(0.0, 0.0); n];
                s.par_iter_mut()
                    .zip(ds.par_iter_mut())
                    .enumerate()
                    .for_each(|(i, (sv, dv))| {
                        let (a, ga) = amp(i, kidx);
                        let p = flow.point(i);
                        let jac = flow.jacobian(i);
                        let z = grid.z(i / sl);
                        let e = C::from_polar(1.0, kf[0] * p[0] + kf[1] * p[1] + kf[2] * z);
                        *sv = e * (chi * a);
                        let mut d = e * (dchi * a);
                        if let Some(u) = &u {
                            let gth = [
                                kf[0] * jac[0][0] + kf[1] * jac[1][0],
                                kf[0] * jac[0][1] + kf[1] * jac[1][1],
                            ];
                            let ge = [e * C::new(ga[0], a * gth[0]), e * C::new(ga[1], a * gth[1])];
                            d -= (ge[0] * u[0][i] + ge[1] * u[1][i]) * chi;
                        }
                        *dv = d;
                    });
                w_acc.axpy(
                    1.0,
                    &mode_potential(&ScalarField::from_complex_samples(grid, s)?, lam, k)?,
                );
                dw_acc.axpy(
                    1.0,
                    &mode_potential(&ScalarField::from_complex_samples(grid, ds)?, lam, k)?,
                );
            }

            if olow.is_empty() {
                olow = vec![[0.0f64; 6]; n];
            }
            let c2w = chi * chi;
            olow.par_iter_mut().enumerate().for_each(|(i, acc)| {
                let (m, _) = coords(i);
                let target = [[m[0], m[1]], [m[2], -m[0]], [m[3], m[4]]];
                for kidx in 0..fam.kk.len() {
                    let (a, _) = amp(i, kidx);
                    let kk = &fam.kk[kidx];
                    for r in 0..3 {
                        for c in 0..2 {
                            acc[2 * r + c] += c2w * a * a * kk[r][c];
                        }
                    }
                }
                for r in 0..3 {
                    for c in 0..2 {
                        acc[2 * r + c] -= c2w * target[r][c];
                    }
                }
            });
            expected += c2w * rho * self.int_l2;
            waves.push(WaveRecord {
                l,
                family: j,
                chi,
                rho,
                eps_ratio,
                eps: fam.eps,
                det_defect: flow.det_defect(),
                flow_steps: flow.steps(),
            });
        }

        let o_low_residual = olow
            .iter()
            .flat_map(|a| a.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let w = w_acc.twice_real_part();
        let dt_w = dw_acc.twice_real_part();
        let grad = grad_weighted(&w, &self.l, &self.dl);
        let dt_grad = grad_weighted(&dt_w, &self.l, &self.dl);
        Ok(Perturbation {
            t,
            w,
            dt_w,
            grad,
            dt_grad,
            waves,
            o_low_residual,
            expected_energy: expected,
        })
    }

    /// `∇Ψ_{q+1}(t)`.
    pub fn grad_next(&self, t: f64) -> Result<VectorField, SchemeError> {
        let snap = self.source.snapshot(t)?;
        let pert = self.perturbation(t, &snap)?;
        Ok(snap.grad_psi.add(&pert.grad))
    }

    /// Energy bookkeeping at `t` without assembling the residual:
    /// `(∫|∇Ψ_{q+1}|², ∫|∇(LW)|², Σχ²ρ∫L², relative cross term, ρ(t), pumped)`.
    pub fn energy_at(&self, t: f64) -> Result<EnergySample, SchemeError> {
        let snap = self.source.snapshot(t)?;
        let pert = self.perturbation(t, &snap)?;
        Ok(self.energy_sample(t, &snap, &pert))
    }

    fn energy_sample(&self, t: f64, snap: &StateSnapshot, pert: &Perturbation) -> EnergySample {
        let eq = snap.energy();
        let pe = pert.grad.inner(&pert.grad);
        let cross = snap.grad_psi.inner(&pert.grad);
        let norm = (eq * pe).sqrt();
        let next = eq + 2.0 * cross + pe;
        EnergySample {
            t,
            energy: next,
            gap: self.opts.profile.value(t) - next,
            perturbation_energy: pe,
            expected_energy: pert.expected_energy,
            cross_term: if norm > 0.0 { cross.abs() / norm } else { 0.0 },
            rho: self.rho_at(t, eq),
            pumped: !pert.waves.is_empty(),
            o_low_residual: pert.o_low_residual,
            max_det_defect: pert.waves.iter().map(|w| w.det_defect).fold(0.0, f64::max),
        }
    }

    /// The level-`q+1` triple at `t`. With `diagnostics`, also the per-term
    /// stress norms, energy bookkeeping and the weak-form defect.
    pub fn evaluate(&self, t: f64, diagnostics: bool) -> Result<SliceResult, SchemeError> {
        let grid = self.grid;
        let snap = self.source.snapshot(t)?;
        let pert = self.perturbation(t, &snap)?;
        let grad_next = snap.grad_psi.add(&pert.grad);
        let div_m_q = snap.stress.hdiv();

        // R = ∂_t∇Ψ_{q+1} + ∇̄·(∇Ψ_{q+1} ⊗ ∇̄⊥Ψ_{q+1}).
        let mut r_eq = snap.dt_grad_psi()?.add(&pert.dt_grad);
        r_eq.axpy(1.0, &flux_divergence(&grad_next, &grad_next)?);

        // L²∇̄·(∇W ⊗ ∇̄⊥W) = curl(L²Q_F) + gradient part + cutoff terms.
        let (qf_l2, curl_qf_l2) = if pert.w.is_zero() {
            (VectorField::zeros(grid), VectorField::zeros(grid))
        } else {
            let gw = pert.w.gradient();
            let f = flux_divergence(&gw, &gw)?;
            let qf = VectorField {
                c: f.curl().c.map(|x| x.inv_neg_laplacian()),
            };
            (qf.mul_z(&self.w2), curl_weighted(&qf, &self.w2, &self.dw2))
        };
        let g = r_eq.sub(&snap.curl_q).sub(&curl_qf_l2);
        let split = split_remainder(&g)?;
        let q = snap.q.add(&qf_l2).add(&split.q);
        let curl_q = snap.curl_q.add(&curl_qf_l2).add(&split.curl_q);
        let stress = split.stress;

        let scale = r_eq.c0().max(curl_q.c0()).max(f64::MIN_POSITIVE);
        let reconstruction = curl_q.add(&stress.hdiv()).sub(&r_eq).c0() / scale;
        if reconstruction > RECONSTRUCTION_TOL {
            return Err(SchemeError::Decomposition(reconstruction));
        }

        let diag = if diagnostics {
            let stress_of = |v: &VectorField| -> Result<f64, SchemeError> {
                if v.is_zero() {
                    return Ok(0.0);
                }
                Ok(inverse_div_d(&p_grad_bar(v)?)?.c0())
            };
            let transport = pert
                .dt_grad
                .add(&flux_divergence(&pert.grad, &snap.grad_psi)?);
            let nash = flux_divergence(&snap.grad_psi, &pert.grad)?;
            let osc = g.sub(&transport).sub(&nash);
            let region = FrequencyRegion::CylinderBall {
                lambda: self.opts.params.lambda_next as f64 / 13.0,
            };
            let osc_wave = osc.sub(&div_m_q);
            let low_wave = VectorField {
                c: osc_wave
                    .c
                    .clone()
                    .map(|x| localize(&x, &region).expect("region is nonempty")),
            };
            let o_low = low_wave.add(&div_m_q);
            let o_high = osc.sub(&o_low);

            let es = self.energy_sample(t, &snap, &pert);
            let weak_form = if self.opts.weak_form_tests > 0 {
                Some(self.weak_form_defect(&r_eq, &stress)?)
            } else {
                None
            };
            let fields: Vec<&ScalarField> = grad_next
                .c
                .iter()
                .chain(q.c.iter())
                .chain(stress.c.iter().flatten())
                .collect();
            let scale = fields.iter().map(|f| f.max_abs_coeff()).fold(0.0, f64::max);
            let max_frequency = fields
                .iter()
                .map(|f| frequency_above(f, FREQUENCY_TOL * scale))
                .fold(0.0, f64::max);
            Some(SliceDiagnostics {
                t,
                rho: es.rho,
                energy: es.energy,
                gap: es.gap,
                perturbation_energy: es.perturbation_energy,
                expected_energy: es.expected_energy,
                cross_term: es.cross_term,
                stress_c0: stress.c0(),
                stress_c1: stress.c1(),
                prev_stress_c0: snap.stress.c0(),
                transport_c0: stress_of(&transport)?,
                nash_c0: stress_of(&nash)?,
                o_high_c0: stress_of(&o_high)?,
                o_low_c0: stress_of(&o_low)?,
                o_low_residual: pert.o_low_residual,
                reconstruction,
                weak_form,
                max_frequency,
                waves: pert.waves.clone(),
            })
        } else {
            None
        };
        Ok(SliceResult {
            next: StateSnapshot {
                t,
                grad_psi: grad_next,
                q,
                curl_q,
                stress,
            },
            diagnostics: diag,
        })
    }

    /// `max_φ |⟨R, ∇φ⟩ − ⟨∇̄·M̊, ∇φ⟩| / (‖R‖‖∇φ‖)` over random band-limited `φ`.
    fn weak_form_defect(&self, r: &VectorField, stress: &MatrixField) -> Result<f64, SchemeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed ^ 0x5eed);
        let div_m = stress.hdiv();
        let rn = r.l2();
        if rn == 0.0 {
            return Ok(0.0);
        }
        let mut worst = 0.0f64;
        for _ in 0..self.opts.weak_form_tests {
            let phi = random_field(self.grid, 12, MeanMode::MeanZero, &mut rng);
            let gp = phi.gradient();
            let d = (r.inner(&gp) - div_m.inner(&gp)).abs() / (rn * gp.l2());
            worst = worst.max(d);
        }
        Ok(worst)
    }

    /// Exact check on the families: `Ω₁ ∩ Ω₂ = ∅`, and the smallest
    /// `|k̄ + k̄'|` and `|k + k'|` over `k ∈ Ω₁`, `k' ∈ Ω₂`.
    pub fn parity_check(&self) -> ParityCheck {
        family_parity(&self.families[0].family, &self.families[1].family)
    }

    /// Sampling times covering the pumped windows.
    fn sample_times(&self) -> (Vec<f64>, Vec<f64>) {
        let mu = self.opts.params.mu;
        let pumped = self.pumped();
        let (lo, hi) = match (pumped.first(), pumped.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => (0, 0),
        };
        let hw = window_half_width(mu);
        let (t0, t1) = (lo as f64 / mu - hw, hi as f64 / mu + hw);
        let ne = self.opts.energy_samples.max(2);
        let energy: Vec<f64> = (0..ne)
            .map(|i| t0 + (t1 - t0) * (i as f64 + 0.5) / ne as f64)
            .collect();
        // Alternate anchor-adjacent times (one window active) with overlap
        // times (two windows active).
        let nr = self.opts.residual_samples;
        let residual = (0..nr)
            .map(|i| {
                let frac = if nr == 1 {
                    0.5
                } else {
                    i as f64 / (nr - 1) as f64
                };
                let l = lo + ((hi - lo) as f64 * frac).round() as i64;
                let off = if i % 2 == 0 { 0.1 } else { 0.5 };
                let l = if l == hi && off > 0.25 && hi > lo {
                    l - 1
                } else {
                    l
                };
                (l as f64 + off) / mu
            })
            .collect();
        (energy, residual)
    }

    /// Samples the stage and checks every invariant of the new state.
    pub fn report(&self) -> Result<StageReport, SchemeError> {
        let p = self.opts.params;
        let (etimes, rtimes) = self.sample_times();
        let energy: Vec<EnergySample> = etimes
            .iter()
            .map(|&t| self.energy_at(t))
            .collect::<Result<_, _>>()?;
        let mut slices = Vec::new();
        let mut support_ok = true;
        let mut class_defect = 0.0f64;
        let mut dz_zero = true;
        for &t in &rtimes {
            let r = self.evaluate(t, true)?;
            let next = &r.next;
            if !self.opts.euler2d {
                let mut fields: Vec<&ScalarField> = next.stress.c.iter().flatten().collect();
                fields.extend(next.q.c.iter());
                fields.extend(next.grad_psi.c.iter());
                support_ok &= check_support(&fields, self.cutoff.support).is_ok();
            } else {
                dz_zero &= next.grad_psi.c[2].is_zero();
            }
            let third = (0..3).map(|i| next.stress.c[i][2].c0()).fold(0.0, f64::max);
            class_defect = class_defect.max(
                (third.max(next.stress.top_block_defect()))
                    / next.stress.c0().max(f64::MIN_POSITIVE),
            );
            slices.push(r.diagnostics.expect("requested"));
        }

        let mut shear = 0.0f64;
        let pumped = self.pumped();
        let hw = window_half_width(p.mu);
        for &l in &pumped {
            let a = self.partition.anchor(l);
            for off in [-0.9, 0.6] {
                shear = shear.max(shear_flow_defect(self.grid, l, p.mu, a + off * hw, 1.0)?);
            }
        }

        let fold = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, f64::max);
        let (lo, hi) = (0.8 * p.delta_next2 / 4.0, 1.2 * 3.0 * p.delta_next2 / 4.0);
        let window: Vec<&EnergySample> = energy.iter().filter(|e| e.pumped).collect();
        let gap_min = window.iter().map(|e| e.gap).fold(f64::INFINITY, f64::min);
        let gap_max = window
            .iter()
            .map(|e| e.gap)
            .fold(f64::NEG_INFINITY, f64::max);
        let pert_rel = fold(
            &mut energy
                .iter()
                .filter(|e| e.expected_energy > 0.0)
                .map(|e| (e.perturbation_energy - e.expected_energy).abs() / e.expected_energy),
        );
        let energy_summary = EnergySummary {
            perturbation_rel_err_max: pert_rel,
            cross_term_max: fold(&mut energy.iter().map(|e| e.cross_term)),
            window_lo: lo,
            window_hi: hi,
            gap_min,
            gap_max,
            window_samples: window.len(),
            window_holds: window.iter().all(|e| e.gap >= lo && e.gap <= hi),
        };

        let c0_max = fold(&mut slices.iter().map(|s| s.stress_c0));
        let prev = fold(&mut slices.iter().map(|s| s.prev_stress_c0));
        let reference = prev.max(p.delta_next2);
        let stress = StressSummary {
            c0_max,
            c1_max: fold(&mut slices.iter().map(|s| s.stress_c1)),
            prev_c0_max: prev,
            contraction: c0_max / reference,
            contraction_holds: c0_max <= 0.5 * reference,
            ratio_to_eta_delta: c0_max / (p.eta * p.delta_next2),
            transport_c0: fold(&mut slices.iter().map(|s| s.transport_c0)),
            nash_c0: fold(&mut slices.iter().map(|s| s.nash_c0)),
            o_high_c0: fold(&mut slices.iter().map(|s| s.o_high_c0)),
            o_low_c0: fold(&mut slices.iter().map(|s| s.o_low_c0)),
        };
        let o_low_max = fold(
            &mut energy
                .iter()
                .map(|e| e.o_low_residual)
                .chain(slices.iter().map(|s| s.o_low_residual)),
        );
        let o_low = OLowSummary {
            max_residual: o_low_max,
            bound: 1e-7 * p.delta_next,
            holds: o_low_max <= 1e-7 * p.delta_next,
        };
        let max_freq = fold(&mut slices.iter().map(|s| s.max_frequency));
        let frequency = FrequencySummary {
            max_kbar: max_freq,
            bound: self.frequency_bound(),
            lambda_next: p.lambda_next as f64,
            holds: max_freq <= self.frequency_bound() + 1e-9,
        };
        let flows = FlowSummary {
            windows: pumped.len(),
            max_det_defect: fold(
                &mut energy.iter().map(|e| e.max_det_defect).chain(
                    slices
                        .iter()
                        .flat_map(|s| s.waves.iter().map(|w| w.det_defect)),
                ),
            ),
            max_shear_defect: shear,
            max_steps: slices
                .iter()
                .flat_map(|s| s.waves.iter().map(|w| w.flow_steps))
                .max()
                .unwrap_or(0),
        };
        let reconstruction_max = fold(&mut slices.iter().map(|s| s.reconstruction));
        let weak_form_max = slices.iter().filter_map(|s| s.weak_form).reduce(f64::max);

        let mut invariants = vec![
            InvariantCheck::new(
                "frequency support",
                max_freq,
                self.frequency_bound(),
                frequency.holds,
            ),
            InvariantCheck::new("class M stress", class_defect, 1e-10, class_defect <= 1e-10),
            InvariantCheck::new(
                "reconstruction",
                reconstruction_max,
                RECONSTRUCTION_TOL,
                reconstruction_max <= RECONSTRUCTION_TOL,
            ),
        ];
        if self.opts.euler2d {
            invariants.push(InvariantCheck::new(
                "z-independence",
                if dz_zero { 0.0 } else { 1.0 },
                0.0,
                dz_zero,
            ));
        } else {
            invariants.push(InvariantCheck::new(
                "spatial support",
                self.cutoff.support,
                self.cutoff.support,
                support_ok,
            ));
        }

        let mut series: Vec<SeriesRow> = energy
            .iter()
            .map(|e| SeriesRow {
                t: e.t,
                energy: e.energy,
                gap: e.gap,
                stress_c0: None,
                stress_c1: None,
                rho: e.rho,
            })
            .collect();
        series.extend(slices.iter().map(|s| SeriesRow {
            t: s.t,
            energy: s.energy,
            gap: s.gap,
            stress_c0: Some(s.stress_c0),
            stress_c1: Some(s.stress_c1),
            rho: s.rho,
        }));
        series.sort_by(|a, b| a.t.total_cmp(&b.t));

        Ok(StageReport {
            q: p.q,
            mode: if self.opts.euler2d { "euler2d" } else { "qg3d" }.into(),
            grid: self.grid,
            params: p,
            profile: self.opts.profile,
            int_l2: self.int_l2,
            pumped_windows: pumped.len(),
            rho_max: self.rho.iter().copied().fold(0.0, f64::max),
            series,
            slices,
            energy: energy_summary,
            stress,
            o_low,
            reconstruction_max,
            weak_form_max,
            flows,
            parity: self.parity_check(),
            frequency,
            invariants,
        })
    }
}

/// Exact check on two families: `Ω₁ ∩ Ω₂ = ∅`, and the smallest
/// `|k̄ + k̄'|` and `|k + k'|` over `k ∈ Ω₁`, `k' ∈ Ω₂` with `k + k' ≠ 0`.
pub fn family_parity(f1: &DirectionFamily, f2: &DirectionFamily) -> ParityCheck {
    let d1 = f1.directions();
    let d2 = f2.directions();
    let disjoint = d1.iter().all(|k| !d2.contains(k));
    let mut hmin = f64::INFINITY;
    let mut fmin = f64::INFINITY;
    for k in &d1 {
        for kp in &d2 {
            let s: Vec<_> = (0..3).map(|i| k.component(i) + kp.component(i)).collect();
            if s.iter().all(Zero::is_zero) {
                continue;
            }
            let h = rational_to_f64(&(&s[0] * &s[0] + &s[1] * &s[1]));
            let z = rational_to_f64(&(&s[2] * &s[2]));
            hmin = hmin.min(h.sqrt());
            fmin = fmin.min((h + z).sqrt());
        }
    }
    ParityCheck {
        disjoint,
        min_horizontal_sum: hmin,
        min_full_sum: fmin,
        bound: 1.0 / 13.0,
        horizontal_holds: disjoint && hmin >= 1.0 / 13.0 - 1e-15,
        full_holds: disjoint && fmin >= 1.0 / 13.0 - 1e-15,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergySample {
    pub t: f64,
    pub energy: f64,
    pub gap: f64,
    pub perturbation_energy: f64,
    pub expected_energy: f64,
    pub cross_term: f64,
    pub rho: f64,
    /// Some window with `ρ_l ≠ 0` is active.
    pub pumped: bool,
    pub o_low_residual: f64,
    pub max_det_defect: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeriesRow {
    pub t: f64,
    pub energy: f64,
    pub gap: f64,
    pub stress_c0: Option<f64>,
    pub stress_c1: Option<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantCheck {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub holds: bool,
}

impl InvariantCheck {
    fn new(name: &str, value: f64, bound: f64, holds: bool) -> Self {
        Self {
            name: name.into(),
            value,
            bound,
            holds,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergySummary {
    pub perturbation_rel_err_max: f64,
    pub cross_term_max: f64,
    pub window_lo: f64,
    pub window_hi: f64,
    pub gap_min: f64,
    pub gap_max: f64,
    pub window_samples: usize,
    pub window_holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StressSummary {
    pub c0_max: f64,
    pub c1_max: f64,
    pub prev_c0_max: f64,
    /// `‖M̊_{q+1}‖_{C⁰} / max(‖M̊_q‖_{C⁰}, δ_{q+2})`.
    pub contraction: f64,
    pub contraction_holds: bool,
    pub ratio_to_eta_delta: f64,
    pub transport_c0: f64,
    pub nash_c0: f64,
    pub o_high_c0: f64,
    pub o_low_c0: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OLowSummary {
    pub max_residual: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowSummary {
    pub windows: usize,
    pub max_det_defect: f64,
    pub max_shear_defect: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParityCheck {
    pub disjoint: bool,
    pub min_horizontal_sum: f64,
    pub min_full_sum: f64,
    pub bound: f64,
    pub horizontal_holds: bool,
    pub full_holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrequencySummary {
    pub max_kbar: f64,
    pub bound: f64,
    pub lambda_next: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub q: u32,
    pub mode: String,
    pub grid: Grid,
    pub params: StageParams,
    pub profile: EnergyProfile,
    pub int_l2: f64,
    pub pumped_windows: usize,
    pub rho_max: f64,
    pub series: Vec<SeriesRow>,
    pub slices: Vec<SliceDiagnostics>,
    pub energy: EnergySummary,
    pub stress: StressSummary,
    pub o_low: OLowSummary,
    pub reconstruction_max: f64,
    pub weak_form_max: Option<f64>,
    pub flows: FlowSummary,
    pub parity: ParityCheck,
    pub frequency: FrequencySummary,
    pub invariants: Vec<InvariantCheck>,
}

impl StageReport {
    pub fn failed_invariant(&self) -> Option<&InvariantCheck> {
        self.invariants.iter().find(|c| !c.holds)
    }

    /// CSV with header `t,energy,gap,stress_c0,stress_c1,rho`; stress columns
    /// are empty at energy-only samples.
    pub fn csv(&self) -> String {
        let mut s = String::from("t,energy,gap,stress_c0,stress_c1,rho\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.series {
            s.push_str(&format!(
                "{:e},{:e},{:e},{},{},{:e}\n",
                r.t,
                r.energy,
                r.gap,
                opt(r.stress_c0),
                opt(r.stress_c1),
                r.rho
            ));
        }
        s
    }
}

/// The level-`q+1` triple produced by a stage, recomputed at any time.
pub struct StagedSource {
    stage: Arc<Stage>,
    velocity: Arc<SampledVelocity>,
}

impl StagedSource {
    pub fn new(stage: Arc<Stage>) -> Result<Self, SchemeError> {
        let velocity = Arc::new(SampledVelocity::new(stage.clone())?);
        Ok(Self { stage, velocity })
    }

    pub fn stage(&self) -> &Arc<Stage> {
        &self.stage
    }
}

impl StateSource for StagedSource {
    fn grid(&self) -> Grid {
        self.stage.grid
    }
    fn level(&self) -> u32 {
        self.stage.opts.params.q + 1
    }
    fn snapshot(&self, t: f64) -> Result<StateSnapshot, SchemeError> {
        Ok(self.stage.evaluate(t, false)?.next)
    }
    fn velocity(&self) -> Arc<dyn Velocity + Send + Sync> {
        self.velocity.clone()
    }
    fn is_zero(&self) -> bool {
        self.stage.source.is_zero() && self.stage.pumped().is_empty()
    }
    fn support_wall(&self) -> f64 {
        if self.stage.opts.euler2d {
            0.0
        } else {
            self.stage.cutoff.support
        }
    }
}

type GradInterp = Arc<[TrigInterpolant; 2]>;

/// `∇̄⊥Ψ_{q+1}` of a staged source, interpolated from snapshots at the RK4
/// node times announced through `prepare`.
pub struct SampledVelocity {
    stage: Arc<Stage>,
    c1: f64,
    cache: Mutex<HashMap<u64, GradInterp>>,
}

impl SampledVelocity {
    fn new(stage: Arc<Stage>) -> Result<Self, SchemeError> {
        let mu = stage.opts.params.mu;
        let mut times: Vec<f64> = stage
            .pumped()
            .iter()
            .flat_map(|&l| [l as f64 / mu, (l as f64 + 0.5) / mu])
            .collect();
        if times.is_empty() {
            times.push(0.0);
        }
        let stride = times.len().div_ceil(8);
        let mut c1 = 0.0f64;
        for &t in times.iter().step_by(stride) {
            let g = stage.grad_next(t)?;
            let u = [g.c[1].neg(), g.c[0].clone()];
            let c0 = u.iter().map(|f| f.c0()).fold(0.0, f64::max);
            let d = u
                .iter()
                .map(|f| f.dx().c0() + f.dy().c0())
                .fold(0.0, f64::max);
            c1 = c1.max(c0 + d);
        }
        Ok(Self {
            stage,
            c1: 1.25 * c1,
            cache: Mutex::new(HashMap::new()),
        })
    }

    fn interp(&self, t: f64) -> Result<GradInterp, SchemeError> {
        if let Some(v) = self.cache.lock().unwrap().get(&t.to_bits()) {
            return Ok(v.clone());
        }
        let g = self.stage.grad_next(t)?;
        let v: GradInterp =
            Arc::new([TrigInterpolant::new(&g.c[0]), TrigInterpolant::new(&g.c[1])]);
        self.cache.lock().unwrap().insert(t.to_bits(), v.clone());
        Ok(v)
    }
}

impl Velocity for SampledVelocity {
    fn eval(&self, t: f64, iz: usize, x: f64, y: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let g = self.interp(t).expect("velocity snapshot");
        let (a, da) = g[0].eval_grad(iz, x, y);
        let (b, db) = g[1].eval_grad(iz, x, y);
        (
            [-b.re, a.re],
            [[-db[0].re, -db[1].re], [da[0].re, da[1].re]],
        )
    }
    fn c1_norm(&self) -> f64 {
        self.c1
    }
    fn is_zero(&self) -> bool {
        self.c1 == 0.0
    }
    fn prepare(&self, times: &[f64]) -> Result<(), TransportError> {
        {
            let mut cache = self.cache.lock().unwrap();
            if cache.len() + times.len() > 4096 {
                cache.clear();
            }
        }
        for &t in times {
            self.interp(t)
                .map_err(|e| TransportError::Velocity(e.to_string()))?;
        }
        Ok(())
    }
}

/// Runs one QG stage on `source`: builds the stage, samples it, and aborts
/// with the name of the first failed inductive assumption.
pub fn run_stage(
    source: Arc<dyn StateSource>,
    opts: StageOptions,
) -> Result<(StagedSource, StageReport), SchemeError> {
    if opts.euler2d {
        return Err(SchemeError::Config(
            "run_stage is the 3D stage; use euler2d_stage".into(),
        ));
    }
    finish(Stage::new(source, opts)?)
}

/// The 2D Euler stage: planar families, `L ≡ 1`, planar stress required.
pub fn euler2d_stage(
    source: Arc<dyn StateSource>,
    mut opts: StageOptions,
) -> Result<(StagedSource, StageReport), SchemeError> {
    opts.euler2d = true;
    let grid = source.grid();
    if !grid.is_planar() {
        return Err(SchemeError::NotPlanar(format!("grid has nz = {}", grid.nz)));
    }
    if !source.is_zero() {
        let s = source.snapshot(0.0)?.stress;
        if !(0..3).all(|j| s.c[2][j].is_zero()) {
            return Err(SchemeError::NotPlanar(
                "stress has a nonzero third row".into(),
            ));
        }
    }
    finish(Stage::new(source, opts)?)
}

fn finish(stage: Stage) -> Result<(StagedSource, StageReport), SchemeError> {
    let stage = Arc::new(stage);
    let report = stage.report()?;
    if let Some(c) = report.failed_invariant() {
        return Err(SchemeError::invariant(
            &c.name,
            format!("value {:e}, bound {:e}", c.value, c.bound),
        ));
    }
    Ok((StagedSource::new(stage)?, report))
}
