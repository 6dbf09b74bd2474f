//! Band-limited periodic fields on `T³ = [0, 2π)³` and their Fourier operators.
//!
//! Fields are stored as horizontal Fourier coefficients sampled at physical
//! `z` points: `hspec[(iz·nx + ix)·ny + iy] = f̂(k̄, z_iz)`. Horizontal
//! operators act slice by slice and are therefore exactly local in `z`; the
//! genuinely three-dimensional operators take an extra transform in `z`.
//! A grid with `nz = 1` holds `z`-independent fields.
//!
//! Coefficients are normalized so that the forward transform divides by the
//! number of points; Nyquist modes are treated as absent by every derivative
//! and by products.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::exact_modes::RationalDirection;

pub type C = Complex64;

const ZERO: C = C { re: 0.0, im: 0.0 };
const I: C = C { re: 0.0, im: 1.0 };

/// Relative tolerance for the (slice-)mean-zero preconditions.
pub const MEAN_TOL: f64 = 1e-11;
/// Frozen bound on `λ‖K f‖_∞/‖f‖_∞` for the order −1 operators `E, I, D` and
/// `(∇̄⊥)^{-1}` acting on data supported at `|k̄| ≥ λ/2`.
pub const BERNSTEIN_CONSTANT: f64 = 1.5;
/// Relative tolerance for the horizontal-gradient precondition of `D`.
pub const GRADIENT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("grid sizes must be positive and even (nz may be 1): {0}x{1}x{2}")]
    BadGrid(usize, usize, usize),
    #[error("sample array has {got} entries, grid needs {want}")]
    SizeMismatch { got: usize, want: usize },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("field has nonzero mean {0:e}")]
    NonzeroMean(f64),
    #[error("field has nonzero mean {0:e} on a z-slice")]
    NonzeroSliceMean(f64),
    #[error("first two components are not a horizontal gradient (relative curl {0:e})")]
    NotHorizontalGradient(f64),
    #[error("frequency region contains no retained frequency")]
    EmptyRegion,
    #[error("frequency {0:?} lies outside the grid band")]
    OutOfBand([i64; 3]),
    #[error("λk is not an integer vector for λ = {0} and k = {1}")]
    NotLattice(i64, String),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

/// Points per axis. Retained frequencies satisfy `|k_i| < N_i/2`; products are
/// formed on a grid padded by 3/2 in `x, y`, which makes every retained
/// coefficient of a product alias-free. Products are pointwise in `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum DealiasRule {
    ThreeHalvesPadding,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self, SpectralError> {
        let even = |n: usize| n >= 2 && n % 2 == 0;
        if !even(nx) || !even(ny) || !(nz == 1 || even(nz)) {
            return Err(SpectralError::BadGrid(nx, ny, nz));
        }
        Ok(Self { nx, ny, nz })
    }

    pub fn cube(n: usize) -> Result<Self, SpectralError> {
        Self::new(n, n, n)
    }

    pub fn planar(nx: usize, ny: usize) -> Result<Self, SpectralError> {
        Self::new(nx, ny, 1)
    }

    pub fn is_planar(&self) -> bool {
        self.nz == 1
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    /// Largest retained |frequency| per axis.
    pub fn max_frequency(&self) -> [i64; 3] {
        let m = |n: usize| if n == 1 { 0 } else { n as i64 / 2 - 1 };
        [m(self.nx), m(self.ny), m(self.nz)]
    }

    pub fn dealias_rule(&self) -> DealiasRule {
        DealiasRule::ThreeHalvesPadding
    }

    pub fn in_band(&self, k: [i64; 3]) -> bool {
        let m = self.max_frequency();
        (0..3).all(|i| k[i].abs() <= m[i])
    }

    pub fn x(&self, ix: usize) -> f64 {
        2.0 * PI * ix as f64 / self.nx as f64
    }

    pub fn y(&self, iy: usize) -> f64 {
        2.0 * PI * iy as f64 / self.ny as f64
    }

    pub fn z(&self, iz: usize) -> f64 {
        2.0 * PI * iz as f64 / self.nz as f64
    }

    pub fn z_points(&self) -> Vec<f64> {
        (0..self.nz).map(|i| self.z(i)).collect()
    }

    /// Volume of `T³`; planar grids represent `z`-independent fields on `T³`.
    pub fn volume(&self) -> f64 {
        (2.0 * PI).powi(3)
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.nx + ix) * self.ny + iy
    }

    /// Storage index of the horizontal frequency `(k1, k2)` on slice `iz`.
    pub fn freq_index(&self, k1: i64, k2: i64, iz: usize) -> usize {
        let w = |k: i64, n: usize| k.rem_euclid(n as i64) as usize;
        self.index(w(k1, self.nx), w(k2, self.ny), iz)
    }
}

/// Signed frequency of storage index `i` on an axis with `n` points, and
/// whether it is the Nyquist mode.
fn axis_freq(i: usize, n: usize) -> (f64, bool) {
    if n == 1 {
        return (0.0, false);
    }
    let k = if i < n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    };
    (k, i == n / 2)
}

/// A frequency as seen by a multiplier kernel.
#[derive(Debug, Clone, Copy)]
pub struct Freq {
    pub k: [f64; 3],
    pub nyq: [bool; 3],
}

impl Freq {
    /// Symbol of `∂_j`; zero on the Nyquist mode of that axis.
    pub fn d(&self, j: usize) -> C {
        if self.nyq[j] {
            ZERO
        } else {
            I * self.k[j]
        }
    }

    pub fn kbar2(&self) -> f64 {
        self.k[0] * self.k[0] + self.k[1] * self.k[1]
    }

    pub fn k2(&self) -> f64 {
        self.kbar2() + self.k[2] * self.k[2]
    }

    pub fn horizontal_nyquist(&self) -> bool {
        self.nyq[0] || self.nyq[1]
    }

    pub fn any_nyquist(&self) -> bool {
        self.nyq.iter().any(|&b| b)
    }
}

// ---------------------------------------------------------------------------
// FFT machinery

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    let mut p = PLANNER
        .get_or_init(|| Mutex::new(FftPlanner::new()))
        .lock()
        .unwrap();
    if inverse {
        p.plan_fft_inverse(n)
    } else {
        p.plan_fft_forward(n)
    }
}

fn fft_rows(data: &mut [C], n: usize, inverse: bool) {
    if n == 1 {
        return;
    }
    let fft = plan(n, inverse);
    let rows = (8192 / n).max(1);
    data.par_chunks_mut(n * rows).for_each(|chunk| {
        let mut scratch = vec![ZERO; fft.get_inplace_scratch_len()];
        fft.process_with_scratch(chunk, &mut scratch);
    });
}

/// `out[c·rows + r] = src[r·cols + c]`.
fn transpose(src: &[C], rows: usize, cols: usize) -> Vec<C> {
    let mut out = vec![ZERO; src.len()];
    out.par_chunks_mut(rows).enumerate().for_each(|(c, col)| {
        for (r, v) in col.iter_mut().enumerate() {
            *v = src[r * cols + c];
        }
    });
    out
}

/// Unnormalized 2D transform of each of the `nz` slices of size `nx × ny`.
fn fft2_slices(data: &mut [C], nx: usize, ny: usize, inverse: bool) {
    fft_rows(data, ny, inverse);
    if nx == 1 {
        return;
    }
    let slice = nx * ny;
    for s in data.chunks_mut(slice) {
        let mut t = transpose(s, nx, ny);
        fft_rows(&mut t, nx, inverse);
        s.copy_from_slice(&transpose(&t, ny, nx));
    }
}

/// Unnormalized transform along `z` of an `nz × slice` array.
fn fft_z(data: &mut [C], slice: usize, nz: usize, inverse: bool) {
    if nz == 1 {
        return;
    }
    let mut t = transpose(data, nz, slice);
    fft_rows(&mut t, nz, inverse);
    data.copy_from_slice(&transpose(&t, slice, nz));
}

fn scale_in_place(data: &mut [C], s: f64) {
    data.par_iter_mut().for_each(|v| *v *= s);
}

// ---------------------------------------------------------------------------
// Fields

/// A periodic scalar field in horizontal-spectral storage. Real fields are
/// Hermitian-symmetric slice by slice; general complex fields are allowed and
/// are used for single-sided wave packets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    hspec: Vec<C>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            hspec: vec![ZERO; grid.len()],
        }
    }

    pub fn from_hspec(grid: Grid, hspec: Vec<C>) -> Result<Self, SpectralError> {
        if hspec.len() != grid.len() {
            return Err(SpectralError::SizeMismatch {
                got: hspec.len(),
                want: grid.len(),
            });
        }
        Ok(Self { grid, hspec })
    }

    /// Forward transform of real samples laid out as `(iz·nx + ix)·ny + iy`.
    pub fn from_samples(grid: Grid, samples: &[f64]) -> Result<Self, SpectralError> {
        let c: Vec<C> = samples.iter().map(|&v| C::new(v, 0.0)).collect();
        Self::from_complex_samples(grid, c)
    }

    pub fn from_complex_samples(grid: Grid, mut samples: Vec<C>) -> Result<Self, SpectralError> {
        if samples.len() != grid.len() {
            return Err(SpectralError::SizeMismatch {
                got: samples.len(),
                want: grid.len(),
            });
        }
        fft2_slices(&mut samples, grid.nx, grid.ny, false);
        scale_in_place(&mut samples, 1.0 / grid.slice_len() as f64);
        Ok(Self {
            grid,
            hspec: samples,
        })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64, f64) -> f64 + Sync) -> Self {
        let samples = sample_fn(grid, |x, y, z| C::new(f(x, y, z), 0.0));
        Self::from_complex_samples(grid, samples).expect("sizes agree")
    }

    pub fn from_complex_fn(grid: Grid, f: impl Fn(f64, f64, f64) -> C + Sync) -> Self {
        Self::from_complex_samples(grid, sample_fn(grid, f)).expect("sizes agree")
    }

    /// Builds a field from full 3D coefficients in storage order.
    pub fn from_spectrum3(grid: Grid, mut spec: Vec<C>) -> Result<Self, SpectralError> {
        if spec.len() != grid.len() {
            return Err(SpectralError::SizeMismatch {
                got: spec.len(),
                want: grid.len(),
            });
        }
        fft_z(&mut spec, grid.slice_len(), grid.nz, true);
        Ok(Self { grid, hspec: spec })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn hspec(&self) -> &[C] {
        &self.hspec
    }

    pub fn hspec_mut(&mut self) -> &mut [C] {
        &mut self.hspec
    }

    /// Full 3D coefficients `f̂(k̄, k3)` with `k3` in place of the slice index.
    pub fn spectrum3(&self) -> Vec<C> {
        let mut s = self.hspec.clone();
        fft_z(&mut s, self.grid.slice_len(), self.grid.nz, false);
        scale_in_place(&mut s, 1.0 / self.grid.nz as f64);
        s
    }

    pub fn complex_samples(&self) -> Vec<C> {
        let mut s = self.hspec.clone();
        fft2_slices(&mut s, self.grid.nx, self.grid.ny, true);
        s
    }

    /// Real parts of the physical samples.
    pub fn samples(&self) -> Vec<f64> {
        self.complex_samples().into_iter().map(|v| v.re).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.hspec.iter().all(|v| *v == ZERO)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.hspec.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    /// Largest violation of `f̂(−k̄, z) = conj f̂(k̄, z)`, excluding Nyquist rows.
    pub fn hermitian_defect(&self) -> f64 {
        let g = self.grid;
        let mut worst: f64 = 0.0;
        for iz in 0..g.nz {
            for ix in 0..g.nx {
                for iy in 0..g.ny {
                    let (k1, n1) = axis_freq(ix, g.nx);
                    let (k2, n2) = axis_freq(iy, g.ny);
                    if n1 || n2 {
                        continue;
                    }
                    let a = self.hspec[g.index(ix, iy, iz)];
                    let b = self.hspec[g.freq_index(-(k1 as i64), -(k2 as i64), iz)];
                    worst = worst.max((a - b.conj()).norm());
                }
            }
        }
        worst
    }

    pub fn is_real(&self, tol: f64) -> bool {
        self.hermitian_defect() <= tol * self.max_abs_coeff().max(f64::MIN_POSITIVE)
    }

    /// Mean over `T³`.
    pub fn mean(&self) -> C {
        self.slice_means().iter().sum::<C>() / self.grid.nz as f64
    }

    pub fn slice_means(&self) -> Vec<C> {
        (0..self.grid.nz)
            .map(|iz| self.hspec[self.grid.index(0, 0, iz)])
            .collect()
    }

    pub fn check_mean_zero(&self) -> Result<(), SpectralError> {
        let m = self.mean().norm();
        if m > MEAN_TOL * self.max_abs_coeff().max(f64::MIN_POSITIVE) && m > 1e-300 {
            return Err(SpectralError::NonzeroMean(m));
        }
        Ok(())
    }

    pub fn check_slice_mean_zero(&self) -> Result<(), SpectralError> {
        let scale = self.max_abs_coeff().max(f64::MIN_POSITIVE);
        let m = self
            .slice_means()
            .iter()
            .fold(0.0f64, |a, v| a.max(v.norm()));
        if m > MEAN_TOL * scale && m > 1e-300 {
            return Err(SpectralError::NonzeroSliceMean(m));
        }
        Ok(())
    }

    /// Removes the `k̄ = 0` content on every slice.
    pub fn remove_slice_means(&self) -> Self {
        let mut out = self.clone();
        for iz in 0..self.grid.nz {
            let i = self.grid.index(0, 0, iz);
            out.hspec[i] = ZERO;
        }
        out
    }

    fn zip(&self, other: &Self, f: impl Fn(C, C) -> C + Sync) -> Self {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        let hspec = self
            .hspec
            .par_iter()
            .zip(&other.hspec)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self {
            grid: self.grid,
            hspec,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.scale_complex(C::new(s, 0.0))
    }

    pub fn scale_complex(&self, s: C) -> Self {
        Self {
            grid: self.grid,
            hspec: self.hspec.par_iter().map(|&a| a * s).collect(),
        }
    }

    pub fn axpy(&mut self, s: f64, other: &Self) {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        self.hspec
            .par_iter_mut()
            .zip(&other.hspec)
            .for_each(|(a, &b)| *a += b * s);
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    /// Multiplication by a function of `z` alone, given at the `z` samples.
    /// Exact, since slices are stored separately.
    pub fn mul_z(&self, profile: &[f64]) -> Self {
        assert_eq!(profile.len(), self.grid.nz);
        let s = self.grid.slice_len();
        let mut out = self.clone();
        out.hspec
            .par_chunks_mut(s)
            .zip(profile)
            .for_each(|(sl, &p)| sl.iter_mut().for_each(|v| *v *= p));
        out
    }

    /// The field `conj(f)`: coefficients `conj f̂(−k̄)`.
    pub fn conj(&self) -> Self {
        let g = self.grid;
        let mut out = Self::zeros(g);
        for iz in 0..g.nz {
            for ix in 0..g.nx {
                for iy in 0..g.ny {
                    let (k1, _) = axis_freq(ix, g.nx);
                    let (k2, _) = axis_freq(iy, g.ny);
                    out.hspec[g.index(ix, iy, iz)] =
                        self.hspec[g.freq_index(-(k1 as i64), -(k2 as i64), iz)].conj();
                }
            }
        }
        out
    }

    /// `2 Re f`, the real field `f + conj(f)`.
    pub fn twice_real_part(&self) -> Self {
        self.add(&self.conj())
    }

    pub fn dx(&self) -> Self {
        hmap1(self, |f, v| f.d(0) * v)
    }

    pub fn dy(&self) -> Self {
        hmap1(self, |f, v| f.d(1) * v)
    }

    pub fn dz(&self) -> Self {
        if self.grid.is_planar() {
            return Self::zeros(self.grid);
        }
        map3(&[self], 1, |f, i, o| o[0] = f.d(2) * i[0])
            .pop()
            .unwrap()
    }

    pub fn gradient(&self) -> VectorField {
        let [a, b, c] = map3(&[self], 3, |f, i, o| {
            for j in 0..3 {
                o[j] = f.d(j) * i[0];
            }
        })
        .try_into()
        .unwrap();
        VectorField::new(a, b, c)
    }

    pub fn hgrad(&self) -> VectorField {
        VectorField::new(self.dx(), self.dy(), Self::zeros(self.grid))
    }

    /// `∇̄⊥f = (−∂_y f, ∂_x f, 0)`.
    pub fn hgradperp(&self) -> VectorField {
        VectorField::new(self.dy().neg(), self.dx(), Self::zeros(self.grid))
    }

    pub fn laplacian(&self) -> Self {
        map3(&[self], 1, |f, i, o| o[0] = -f.k2() * i[0])
            .pop()
            .unwrap()
    }

    pub fn hlaplacian(&self) -> Self {
        hmap1(self, |f, v| -f.kbar2() * v)
    }

    /// `(−Δ)^{-1}` on `T³`, dropping the zero mode.
    pub fn inv_neg_laplacian(&self) -> Self {
        map3(&[self], 1, |f, i, o| {
            o[0] = if f.k2() > 0.0 { i[0] / f.k2() } else { ZERO }
        })
        .pop()
        .unwrap()
    }

    pub fn padded(&self) -> Padded {
        Padded::from_field(self)
    }

    pub fn l2(&self) -> f64 {
        norms_l2(self)
    }

    pub fn c0(&self) -> f64 {
        self.complex_samples()
            .iter()
            .fold(0.0, |m, v| m.max(v.norm()))
    }

    pub fn c1(&self) -> f64 {
        let g = self.gradient();
        self.c0().max(g.c0())
    }

    /// `∫_{T³} f·conj(g)` by Parseval.
    pub fn inner(&self, other: &Self) -> C {
        assert_eq!(self.grid, other.grid);
        // Fixed chunks summed in order, so the result does not depend on
        // the thread count.
        let parts: Vec<C> = self
            .hspec
            .par_chunks(4096)
            .zip(other.hspec.par_chunks(4096))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y.conj()).sum())
            .collect();
        let s: C = parts.iter().sum();
        s * self.grid.volume() / self.grid.nz as f64
    }
}

fn sample_fn(grid: Grid, f: impl Fn(f64, f64, f64) -> C + Sync) -> Vec<C> {
    let mut out = vec![ZERO; grid.len()];
    out.par_chunks_mut(grid.ny)
        .enumerate()
        .for_each(|(row, r)| {
            let iz = row / grid.nx;
            let ix = row % grid.nx;
            let (x, z) = (grid.x(ix), grid.z(iz));
            for (iy, v) in r.iter_mut().enumerate() {
                *v = f(x, grid.y(iy), z);
            }
        });
    out
}

fn check_grids(fields: &[&ScalarField]) -> Result<Grid, SpectralError> {
    let g = fields[0].grid;
    if fields.iter().any(|f| f.grid != g) {
        return Err(SpectralError::GridMismatch);
    }
    Ok(g)
}

/// Applies a pointwise-in-frequency kernel to buffers laid out on `grid`;
/// `kz_axis` says whether the slice index is a `z` frequency.
fn kernel_map<F>(grid: Grid, inputs: &[&[C]], nout: usize, kz_axis: bool, f: F) -> Vec<Vec<C>>
where
    F: Fn(&Freq, &[C], &mut [C]) + Sync,
{
    let nin = inputs.len();
    assert!(nin <= 9 && nout <= 9);
    let len = grid.len();
    let mut inter = vec![ZERO; len * nout];
    inter
        .par_chunks_mut(nout * grid.ny)
        .enumerate()
        .for_each(|(row, chunk)| {
            let iz = row / grid.nx;
            let ix = row % grid.nx;
            let (k1, n1) = axis_freq(ix, grid.nx);
            let (k3, n3) = if kz_axis {
                axis_freq(iz, grid.nz)
            } else {
                (0.0, false)
            };
            let mut ibuf = [ZERO; 9];
            for iy in 0..grid.ny {
                let (k2, n2) = axis_freq(iy, grid.ny);
                let idx = grid.index(ix, iy, iz);
                for (j, b) in inputs.iter().enumerate() {
                    ibuf[j] = b[idx];
                }
                let fr = Freq {
                    k: [k1, k2, k3],
                    nyq: [n1, n2, n3],
                };
                f(&fr, &ibuf[..nin], &mut chunk[iy * nout..(iy + 1) * nout]);
            }
        });
    (0..nout)
        .map(|o| {
            let mut v = vec![ZERO; len];
            v.par_iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = inter[i * nout + o]);
            v
        })
        .collect()
}

/// Horizontal multiplier acting slice by slice.
pub fn hmap<F>(inputs: &[&ScalarField], nout: usize, f: F) -> Vec<ScalarField>
where
    F: Fn(&Freq, &[C], &mut [C]) + Sync,
{
    let grid = check_grids(inputs).expect("grid mismatch");
    let bufs: Vec<&[C]> = inputs.iter().map(|x| x.hspec.as_slice()).collect();
    kernel_map(grid, &bufs, nout, false, f)
        .into_iter()
        .map(|hspec| ScalarField { grid, hspec })
        .collect()
}

fn hmap1(f: &ScalarField, k: impl Fn(&Freq, C) -> C + Sync) -> ScalarField {
    hmap(&[f], 1, |fr, i, o| o[0] = k(fr, i[0])).pop().unwrap()
}

/// Three-dimensional multiplier.
pub fn map3<F>(inputs: &[&ScalarField], nout: usize, f: F) -> Vec<ScalarField>
where
    F: Fn(&Freq, &[C], &mut [C]) + Sync,
{
    let grid = check_grids(inputs).expect("grid mismatch");
    let specs: Vec<Vec<C>> = inputs.iter().map(|x| x.spectrum3()).collect();
    let bufs: Vec<&[C]> = specs.iter().map(|s| s.as_slice()).collect();
    kernel_map(grid, &bufs, nout, true, f)
        .into_iter()
        .map(|s| ScalarField::from_spectrum3(grid, s).expect("sizes agree"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub c: [ScalarField; 3],
}

impl VectorField {
    pub fn new(a: ScalarField, b: ScalarField, c: ScalarField) -> Self {
        assert!(a.grid == b.grid && b.grid == c.grid, "grid mismatch");
        Self { c: [a, b, c] }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::new(
            ScalarField::zeros(grid),
            ScalarField::zeros(grid),
            ScalarField::zeros(grid),
        )
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64, f64) -> [f64; 3] + Sync) -> Self {
        let g = &f;
        Self::new(
            ScalarField::from_fn(grid, |x, y, z| g(x, y, z)[0]),
            ScalarField::from_fn(grid, |x, y, z| g(x, y, z)[1]),
            ScalarField::from_fn(grid, |x, y, z| g(x, y, z)[2]),
        )
    }

    pub fn grid(&self) -> Grid {
        self.c[0].grid
    }

    pub fn refs(&self) -> [&ScalarField; 3] {
        [&self.c[0], &self.c[1], &self.c[2]]
    }

    fn map(&self, f: impl Fn(&ScalarField) -> ScalarField) -> Self {
        Self {
            c: [f(&self.c[0]), f(&self.c[1]), f(&self.c[2])],
        }
    }

    fn zip(&self, o: &Self, f: impl Fn(&ScalarField, &ScalarField) -> ScalarField) -> Self {
        Self {
            c: [
                f(&self.c[0], &o.c[0]),
                f(&self.c[1], &o.c[1]),
                f(&self.c[2], &o.c[2]),
            ],
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        self.zip(o, ScalarField::add)
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.zip(o, ScalarField::sub)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|f| f.scale(s))
    }

    pub fn axpy(&mut self, s: f64, o: &Self) {
        for j in 0..3 {
            self.c[j].axpy(s, &o.c[j]);
        }
    }

    pub fn mul_z(&self, p: &[f64]) -> Self {
        self.map(|f| f.mul_z(p))
    }

    pub fn is_zero(&self) -> bool {
        self.c.iter().all(|f| f.is_zero())
    }

    /// Largest component magnitude over the physical samples.
    pub fn c0(&self) -> f64 {
        self.c.iter().map(|f| f.c0()).fold(0.0, f64::max)
    }

    pub fn l2(&self) -> f64 {
        self.c.iter().map(|f| f.l2().powi(2)).sum::<f64>().sqrt()
    }

    /// `∫ v·w` (real parts).
    pub fn inner(&self, o: &Self) -> f64 {
        (0..3).map(|j| self.c[j].inner(&o.c[j]).re).sum()
    }

    pub fn div(&self) -> ScalarField {
        map3(&self.refs(), 1, |f, i, o| {
            o[0] = f.d(0) * i[0] + f.d(1) * i[1] + f.d(2) * i[2]
        })
        .pop()
        .unwrap()
    }

    /// `∂_x v1 + ∂_y v2`.
    pub fn hdiv(&self) -> ScalarField {
        hmap(&[&self.c[0], &self.c[1]], 1, |f, i, o| {
            o[0] = f.d(0) * i[0] + f.d(1) * i[1]
        })
        .pop()
        .unwrap()
    }

    pub fn curl(&self) -> Self {
        let [a, b, c] = map3(&self.refs(), 3, |f, i, o| {
            o[0] = f.d(1) * i[2] - f.d(2) * i[1];
            o[1] = f.d(2) * i[0] - f.d(0) * i[2];
            o[2] = f.d(0) * i[1] - f.d(1) * i[0];
        })
        .try_into()
        .unwrap();
        Self::new(a, b, c)
    }

    pub fn check_mean_zero(&self) -> Result<(), SpectralError> {
        self.c.iter().try_for_each(|f| f.check_mean_zero())
    }

    pub fn check_slice_mean_zero(&self) -> Result<(), SpectralError> {
        self.c.iter().try_for_each(|f| f.check_slice_mean_zero())
    }
}

/// Matrix field; `c[i][j]` is row `i`, column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    pub c: [[ScalarField; 3]; 3],
}

impl MatrixField {
    pub fn zeros(grid: Grid) -> Self {
        let z = || ScalarField::zeros(grid);
        Self {
            c: [[z(), z(), z()], [z(), z(), z()], [z(), z(), z()]],
        }
    }

    pub fn from_rows(r: [VectorField; 3]) -> Self {
        let [a, b, c] = r;
        Self { c: [a.c, b.c, c.c] }
    }

    pub fn grid(&self) -> Grid {
        self.c[0][0].grid
    }

    /// Constant matrix field.
    pub fn constant(grid: Grid, m: [[f64; 3]; 3]) -> Self {
        let mut out = Self::zeros(grid);
        for i in 0..3 {
            for j in 0..3 {
                for iz in 0..grid.nz {
                    out.c[i][j].hspec[grid.index(0, 0, iz)] = C::new(m[i][j], 0.0);
                }
            }
        }
        out
    }

    fn map(&self, f: impl Fn(&ScalarField) -> ScalarField) -> Self {
        let mut out = self.clone();
        for i in 0..3 {
            for j in 0..3 {
                out.c[i][j] = f(&self.c[i][j]);
            }
        }
        out
    }

    fn zip(&self, o: &Self, f: impl Fn(&ScalarField, &ScalarField) -> ScalarField) -> Self {
        let mut out = self.clone();
        for i in 0..3 {
            for j in 0..3 {
                out.c[i][j] = f(&self.c[i][j], &o.c[i][j]);
            }
        }
        out
    }

    pub fn add(&self, o: &Self) -> Self {
        self.zip(o, ScalarField::add)
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.zip(o, ScalarField::sub)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|f| f.scale(s))
    }

    pub fn axpy(&mut self, s: f64, o: &Self) {
        for i in 0..3 {
            for j in 0..3 {
                self.c[i][j].axpy(s, &o.c[i][j]);
            }
        }
    }

    pub fn mul_z(&self, p: &[f64]) -> Self {
        self.map(|f| f.mul_z(p))
    }

    pub fn is_zero(&self) -> bool {
        self.c.iter().flatten().all(|f| f.is_zero())
    }

    /// Largest entry magnitude over the physical samples.
    pub fn c0(&self) -> f64 {
        self.c
            .iter()
            .flatten()
            .filter(|f| !f.is_zero())
            .map(|f| f.c0())
            .fold(0.0, f64::max)
    }

    pub fn c1(&self) -> f64 {
        self.c
            .iter()
            .flatten()
            .filter(|f| !f.is_zero())
            .map(|f| f.c1())
            .fold(0.0, f64::max)
    }

    /// Horizontal divergence by rows: `(∇̄·M)_i = ∂_x M_i1 + ∂_y M_i2`.
    pub fn hdiv(&self) -> VectorField {
        let row = |i: usize| {
            hmap(&[&self.c[i][0], &self.c[i][1]], 1, |f, v, o| {
                o[0] = f.d(0) * v[0] + f.d(1) * v[1]
            })
            .pop()
            .unwrap()
        };
        VectorField::new(row(0), row(1), row(2))
    }

    /// Entry values at the zero frequency (slice-averaged over `z`).
    pub fn mean(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = self.c[i][j].mean().re;
            }
        }
        m
    }

    /// True when the third column vanishes identically.
    pub fn third_column_zero(&self) -> bool {
        (0..3).all(|i| self.c[i][2].is_zero())
    }

    /// Largest of `|M12 − M21|` and `|M11 + M22|` over the samples.
    pub fn top_block_defect(&self) -> f64 {
        let a = self.c[0][1].sub(&self.c[1][0]).c0();
        let b = self.c[0][0].add(&self.c[1][1]).c0();
        a.max(b)
    }
}

// ---------------------------------------------------------------------------
// Products

/// Physical samples on the 3/2-padded horizontal grid.
#[derive(Debug, Clone)]
pub struct Padded {
    grid: Grid,
    data: Vec<C>,
}

impl Padded {
    fn dims(grid: Grid) -> (usize, usize) {
        (3 * grid.nx / 2, 3 * grid.ny / 2)
    }

    pub fn from_field(f: &ScalarField) -> Self {
        let g = f.grid;
        let (mx, my) = Self::dims(g);
        let mut data = vec![ZERO; mx * my * g.nz];
        data.par_chunks_mut(mx * my)
            .enumerate()
            .for_each(|(iz, sl)| {
                for ix in 0..g.nx {
                    let (k1, n1) = axis_freq(ix, g.nx);
                    if n1 {
                        continue;
                    }
                    let px = (k1 as i64).rem_euclid(mx as i64) as usize;
                    for iy in 0..g.ny {
                        let (k2, n2) = axis_freq(iy, g.ny);
                        if n2 {
                            continue;
                        }
                        let py = (k2 as i64).rem_euclid(my as i64) as usize;
                        sl[px * my + py] = f.hspec[g.index(ix, iy, iz)];
                    }
                }
            });
        fft2_slices(&mut data, mx, my, true);
        Self { grid: g, data }
    }

    pub fn zeros(grid: Grid) -> Self {
        let (mx, my) = Self::dims(grid);
        Self {
            grid,
            data: vec![ZERO; mx * my * grid.nz],
        }
    }

    pub fn mul(&self, o: &Self) -> Self {
        assert_eq!(self.grid, o.grid);
        Self {
            grid: self.grid,
            data: self
                .data
                .par_iter()
                .zip(&o.data)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    /// `self += s·a·b`.
    pub fn add_product(&mut self, s: f64, a: &Self, b: &Self) {
        self.data
            .par_iter_mut()
            .zip(a.data.par_iter().zip(&b.data))
            .for_each(|(v, (x, y))| *v += x * y * s);
    }

    pub fn map(&self, f: impl Fn(C) -> C + Sync) -> Self {
        Self {
            grid: self.grid,
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn samples(&self) -> &[C] {
        &self.data
    }

    /// Forward transform and truncation to the retained band.
    pub fn to_field(&self) -> ScalarField {
        let g = self.grid;
        let (mx, my) = Self::dims(g);
        let mut data = self.data.clone();
        fft2_slices(&mut data, mx, my, false);
        let norm = 1.0 / (mx * my) as f64;
        let mut out = ScalarField::zeros(g);
        out.hspec
            .par_chunks_mut(g.slice_len())
            .enumerate()
            .for_each(|(iz, sl)| {
                let src = &data[iz * mx * my..(iz + 1) * mx * my];
                for ix in 0..g.nx {
                    let (k1, n1) = axis_freq(ix, g.nx);
                    if n1 {
                        continue;
                    }
                    let px = (k1 as i64).rem_euclid(mx as i64) as usize;
                    for iy in 0..g.ny {
                        let (k2, n2) = axis_freq(iy, g.ny);
                        if n2 {
                            continue;
                        }
                        let py = (k2 as i64).rem_euclid(my as i64) as usize;
                        sl[ix * g.ny + iy] = src[px * my + py] * norm;
                    }
                }
            });
        out
    }
}

/// Dealiased pointwise product.
pub fn product(f: &ScalarField, g: &ScalarField) -> Result<ScalarField, SpectralError> {
    check_grids(&[f, g])?;
    if f.is_zero() || g.is_zero() {
        return Ok(ScalarField::zeros(f.grid));
    }
    Ok(f.padded().mul(&g.padded()).to_field())
}

fn padded_or_none(f: &ScalarField) -> Option<Padded> {
    (!f.is_zero()).then(|| f.padded())
}

/// Dealiased outer product `a ⊗ b`.
pub fn outer(a: &VectorField, b: &VectorField) -> Result<MatrixField, SpectralError> {
    if a.grid() != b.grid() {
        return Err(SpectralError::GridMismatch);
    }
    let pa: Vec<Option<Padded>> = a.c.iter().map(padded_or_none).collect();
    let pb: Vec<Option<Padded>> = b.c.iter().map(padded_or_none).collect();
    let mut out = MatrixField::zeros(a.grid());
    for i in 0..3 {
        for j in 0..3 {
            if let (Some(x), Some(y)) = (&pa[i], &pb[j]) {
                out.c[i][j] = x.mul(y).to_field();
            }
        }
    }
    Ok(out)
}

/// Dealiased `Σ_i a_i b_i`.
pub fn dot(a: &VectorField, b: &VectorField) -> Result<ScalarField, SpectralError> {
    if a.grid() != b.grid() {
        return Err(SpectralError::GridMismatch);
    }
    let mut acc = Padded::zeros(a.grid());
    for i in 0..3 {
        if let (Some(x), Some(y)) = (padded_or_none(&a.c[i]), padded_or_none(&b.c[i])) {
            acc.add_product(1.0, &x, &y);
        }
    }
    Ok(acc.to_field())
}

/// Dealiased `f·v`.
pub fn scalar_times_vector(f: &ScalarField, v: &VectorField) -> Result<VectorField, SpectralError> {
    Ok(VectorField::new(
        product(f, &v.c[0])?,
        product(f, &v.c[1])?,
        product(f, &v.c[2])?,
    ))
}

// ---------------------------------------------------------------------------
// Riesz transforms and projectors

/// `R³f`, multiplier `ik/|k|`.
pub fn riesz3(f: &ScalarField) -> Result<VectorField, SpectralError> {
    f.check_mean_zero()?;
    let [a, b, c] = map3(&[f], 3, |fr, i, o| {
        let k = fr.k2().sqrt();
        for j in 0..3 {
            o[j] = if k > 0.0 { fr.d(j) / k * i[0] } else { ZERO };
        }
    })
    .try_into()
    .unwrap();
    Ok(VectorField::new(a, b, c))
}

/// `R²f` on every slice, multiplier `ik̄/|k̄|` in the first two components.
pub fn riesz2_slicewise(f: &ScalarField) -> Result<VectorField, SpectralError> {
    f.check_slice_mean_zero()?;
    let [a, b] = hmap(&[f], 2, |fr, i, o| {
        let k = fr.kbar2().sqrt();
        for j in 0..2 {
            o[j] = if k > 0.0 { fr.d(j) / k * i[0] } else { ZERO };
        }
    })
    .try_into()
    .unwrap();
    Ok(VectorField::new(a, b, ScalarField::zeros(f.grid)))
}

fn grad_kernel(fr: &Freq, i: &[C], o: &mut [C]) {
    let k2 = fr.k2();
    if k2 == 0.0 || fr.any_nyquist() {
        o.iter_mut().for_each(|v| *v = ZERO);
        return;
    }
    let kv: C = (0..3).map(|j| i[j] * fr.k[j]).sum();
    for j in 0..3 {
        o[j] = kv * fr.k[j] / k2;
    }
}

/// `P_∇ = −R³⊗R³`.
pub fn p_grad3(v: &VectorField) -> Result<VectorField, SpectralError> {
    v.check_mean_zero()?;
    Ok(p_grad3_unchecked(v))
}

pub(crate) fn p_grad3_unchecked(v: &VectorField) -> VectorField {
    let [a, b, c] = map3(&v.refs(), 3, grad_kernel).try_into().unwrap();
    VectorField::new(a, b, c)
}

/// `P_curl = Id − P_∇`.
pub fn p_curl3(v: &VectorField) -> Result<VectorField, SpectralError> {
    Ok(v.sub(&p_grad3(v)?))
}

fn check_horizontal_slice_means(v: &VectorField) -> Result<(), SpectralError> {
    v.c[0].check_slice_mean_zero()?;
    v.c[1].check_slice_mean_zero()
}

fn hgrad_part(v: &VectorField) -> [ScalarField; 2] {
    hmap(&[&v.c[0], &v.c[1]], 2, |fr, i, o| {
        let k2 = fr.kbar2();
        if k2 == 0.0 || fr.horizontal_nyquist() {
            o[0] = ZERO;
            o[1] = ZERO;
            return;
        }
        let kv = i[0] * fr.k[0] + i[1] * fr.k[1];
        o[0] = kv * fr.k[0] / k2;
        o[1] = kv * fr.k[1] / k2;
    })
    .try_into()
    .unwrap()
}

/// Horizontal gradient projector on the first two components, identity on
/// the third.
pub fn p_grad_bar(v: &VectorField) -> Result<VectorField, SpectralError> {
    check_horizontal_slice_means(v)?;
    let [a, b] = hgrad_part(v);
    Ok(VectorField::new(a, b, v.c[2].clone()))
}

/// `Id − P^grad` on the first two components, zero on the third.
pub fn p_gradperp_bar(v: &VectorField) -> Result<VectorField, SpectralError> {
    check_horizontal_slice_means(v)?;
    let [a, b] = hgrad_part(v);
    Ok(VectorField::new(
        v.c[0].sub(&a),
        v.c[1].sub(&b),
        ScalarField::zeros(v.grid()),
    ))
}

/// The scalar `g` with `∇̄⊥g = P^{grad⊥}v`, i.e. `g = Δ̄^{-1}(∇̄⊥·v)` with
/// `∇̄⊥·v = −∂_y v1 + ∂_x v2`.
pub fn inv_gradperp(v: &VectorField) -> Result<ScalarField, SpectralError> {
    check_horizontal_slice_means(v)?;
    Ok(inv_gradperp_unchecked(v))
}

pub(crate) fn inv_gradperp_unchecked(v: &VectorField) -> ScalarField {
    hmap(&[&v.c[0], &v.c[1]], 1, |fr, i, o| {
        let k2 = fr.kbar2();
        o[0] = if k2 == 0.0 {
            ZERO
        } else {
            -(fr.d(0) * i[1] - fr.d(1) * i[0]) / k2
        };
    })
    .pop()
    .unwrap()
}

// ---------------------------------------------------------------------------
// Frequency localization

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum FrequencyRegion {
    /// `λ/2 ≤ |k̄| ≤ 2λ`.
    Annulus { lambda: f64 },
    /// `lo ≤ |k̄| ≤ hi`.
    Shell { lo: f64, hi: f64 },
    /// `|k̄| ≤ λ`.
    CylinderBall { lambda: f64 },
    /// `|k̄| ≥ λ`.
    CylinderExterior { lambda: f64 },
    /// `|k − center| < radius` in three dimensions.
    Ball { center: [f64; 3], radius: f64 },
    /// Union of the balls around `±center`; keeps real fields real.
    BallPair { center: [f64; 3], radius: f64 },
}

impl FrequencyRegion {
    pub fn contains(&self, k: [f64; 3]) -> bool {
        let kb = (k[0] * k[0] + k[1] * k[1]).sqrt();
        let dist = |c: [f64; 3], s: f64| {
            ((k[0] - s * c[0]).powi(2) + (k[1] - s * c[1]).powi(2) + (k[2] - s * c[2]).powi(2))
                .sqrt()
        };
        match *self {
            Self::Annulus { lambda } => kb >= lambda / 2.0 && kb <= 2.0 * lambda,
            Self::Shell { lo, hi } => kb >= lo && kb <= hi,
            Self::CylinderBall { lambda } => kb <= lambda,
            Self::CylinderExterior { lambda } => kb >= lambda,
            Self::Ball { center, radius } => dist(center, 1.0) < radius,
            Self::BallPair { center, radius } => {
                dist(center, 1.0) < radius || dist(center, -1.0) < radius
            }
        }
    }

    fn three_dimensional(&self) -> bool {
        matches!(self, Self::Ball { .. } | Self::BallPair { .. })
    }

    /// Number of retained frequencies of `grid` in the region.
    pub fn count(&self, grid: Grid) -> usize {
        let m = grid.max_frequency();
        let mut n = 0;
        for a in -m[0]..=m[0] {
            for b in -m[1]..=m[1] {
                for c in -m[2]..=m[2] {
                    if self.contains([a as f64, b as f64, c as f64]) {
                        n += 1;
                    }
                }
            }
        }
        n
    }
}

/// Zeroes every coefficient outside the region.
pub fn localize(f: &ScalarField, region: &FrequencyRegion) -> Result<ScalarField, SpectralError> {
    if region.count(f.grid) == 0 {
        return Err(SpectralError::EmptyRegion);
    }
    Ok(localize_unchecked(f, region))
}

fn localize_unchecked(f: &ScalarField, region: &FrequencyRegion) -> ScalarField {
    let r = *region;
    let kernel = move |fr: &Freq, i: &[C], o: &mut [C]| {
        o[0] = if !fr.any_nyquist() && r.contains(fr.k) {
            i[0]
        } else {
            ZERO
        };
    };
    if region.three_dimensional() {
        map3(&[f], 1, kernel).pop().unwrap()
    } else {
        hmap(&[f], 1, kernel).pop().unwrap()
    }
}

fn lattice_point(
    grid: Grid,
    lambda: i64,
    k: &RationalDirection,
) -> Result<[i64; 3], SpectralError> {
    let p = k
        .scaled(lambda)
        .ok_or_else(|| SpectralError::NotLattice(lambda, k.to_string()))?;
    if !grid.in_band(p) {
        return Err(SpectralError::OutOfBand(p));
    }
    Ok(p)
}

/// Restriction of `ĝ` to `B(λk, λ/10) ∪ B(−λk, λ/10)` followed by `P_∇`.
pub fn p_grad_mode(
    g: &VectorField,
    lambda: i64,
    k: &RationalDirection,
) -> Result<VectorField, SpectralError> {
    let p = lattice_point(g.grid(), lambda, k)?;
    let region = FrequencyRegion::BallPair {
        center: p.map(|v| v as f64),
        radius: lambda as f64 / 10.0,
    };
    let loc = VectorField {
        c: g.c.clone().map(|f| localize_unchecked(&f, &region)),
    };
    Ok(p_grad3_unchecked(&loc))
}

/// Scalar potential of the single-sided mode projection of the wave `s·ik`:
/// `Ŵ(m) = (m·k) ŝ(m)/|m|²` for `m ∈ B(λk, λ/10)`, zero elsewhere. Then
/// `∇W = P_∇ restricted to the ball` applied to `s·ik`.
pub fn mode_potential(
    s: &ScalarField,
    lambda: i64,
    k: &RationalDirection,
) -> Result<ScalarField, SpectralError> {
    let p = lattice_point(s.grid, lambda, k)?;
    let kf = k.as_f64();
    let region = FrequencyRegion::Ball {
        center: p.map(|v| v as f64),
        radius: lambda as f64 / 10.0,
    };
    Ok(map3(&[s], 1, move |fr, i, o| {
        let m2 = fr.k2();
        o[0] = if m2 > 0.0 && !fr.any_nyquist() && region.contains(fr.k) {
            i[0] * ((fr.k[0] * kf[0] + fr.k[1] * kf[1] + fr.k[2] * kf[2]) / m2)
        } else {
            ZERO
        };
    })
    .pop()
    .unwrap())
}

// ---------------------------------------------------------------------------
// Inverse divergences

fn horizontal_curl_defect(v: &VectorField) -> f64 {
    let g = v.grid();
    let (a, b) = (&v.c[0].hspec, &v.c[1].hspec);
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for iz in 0..g.nz {
        for ix in 0..g.nx {
            let (k1, _) = axis_freq(ix, g.nx);
            for iy in 0..g.ny {
                let (k2, _) = axis_freq(iy, g.ny);
                let i = g.index(ix, iy, iz);
                num = num.max((a[i] * k2 - b[i] * k1).norm());
                den = den.max((k1 * k1 + k2 * k2).sqrt() * a[i].norm().max(b[i].norm()));
            }
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn e_block(v: &VectorField) -> [ScalarField; 3] {
    // f̂ from ∇̄f, then (k1² − k2²)f̂/|k̄|² and 2k1k2 f̂/|k̄|².
    hmap(&[&v.c[0], &v.c[1]], 3, |fr, i, o| {
        let k2 = fr.kbar2();
        if k2 == 0.0 || fr.horizontal_nyquist() {
            o.iter_mut().for_each(|x| *x = ZERO);
            return;
        }
        let (a, b) = (fr.k[0], fr.k[1]);
        let f = -I * (i[0] * a + i[1] * b) / k2;
        o[0] = f * ((a * a - b * b) / k2);
        o[1] = f * (2.0 * a * b / k2);
        o[2] = -o[0];
    })
    .try_into()
    .unwrap()
}

fn i_row(g: &ScalarField) -> [ScalarField; 2] {
    hmap(&[g], 2, |fr, i, o| {
        let k2 = fr.kbar2();
        for j in 0..2 {
            o[j] = if k2 == 0.0 {
                ZERO
            } else {
                -fr.d(j) * i[0] / k2
            };
        }
    })
    .try_into()
    .unwrap()
}

/// Symmetric trace-free `E` with `∇̄·E = ∇̄f`, from the first two components
/// of `v = ∇̄f`.
pub fn inverse_div_e(v: &VectorField) -> Result<MatrixField, SpectralError> {
    check_horizontal_slice_means(v)?;
    let d = horizontal_curl_defect(v);
    if d > GRADIENT_TOL {
        return Err(SpectralError::NotHorizontalGradient(d));
    }
    let [e11, e12, e22] = e_block(v);
    let mut m = MatrixField::zeros(v.grid());
    m.c[0][1] = e12.clone();
    m.c[1][0] = e12;
    m.c[0][0] = e11;
    m.c[1][1] = e22;
    Ok(m)
}

/// `I(g) = −(−Δ̄)^{-1}∇̄g`, with `∇̄·I(g) = g`.
pub fn inverse_div_i(g: &ScalarField) -> Result<VectorField, SpectralError> {
    g.check_slice_mean_zero()?;
    let [a, b] = i_row(g);
    Ok(VectorField::new(a, b, ScalarField::zeros(g.grid)))
}

/// `D(X)` for `X = (∂_x f, ∂_y f, g)`: rows one and two are `E(∇̄f)`, row
/// three is `I(g)`, and the third column vanishes.
pub fn inverse_div_d(x: &VectorField) -> Result<MatrixField, SpectralError> {
    x.check_slice_mean_zero()?;
    let d = horizontal_curl_defect(x);
    if d > GRADIENT_TOL {
        return Err(SpectralError::NotHorizontalGradient(d));
    }
    Ok(inverse_div_d_unchecked(x))
}

pub(crate) fn inverse_div_d_unchecked(x: &VectorField) -> MatrixField {
    let [e11, e12, e22] = e_block(x);
    let [i1, i2] = i_row(&x.c[2]);
    let mut m = MatrixField::zeros(x.grid());
    m.c[0][1] = e12.clone();
    m.c[1][0] = e12;
    m.c[0][0] = e11;
    m.c[1][1] = e22;
    m.c[2][0] = i1;
    m.c[2][1] = i2;
    m
}

// ---------------------------------------------------------------------------
// Norms

fn norms_l2(f: &ScalarField) -> f64 {
    let s: f64 = f.hspec.iter().map(|v| v.norm_sqr()).sum();
    (s * f.grid.volume() / f.grid.nz as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Norms {
    pub l2: f64,
    pub c0: f64,
    pub c1: f64,
    pub holder: f64,
    pub alpha: f64,
}

/// `L²` by Parseval, `C⁰`/`C¹` as maxima over the samples of `f` and its
/// first derivatives, and the dyadic Hölder estimate `sup_j 2^{jα}‖Δ_j f‖_∞`
/// over horizontal shells `2^{j−1} ≤ |k̄| < 2^j` (`j = 0`: `k̄ = 0`).
pub fn norms(f: &ScalarField, alpha: f64) -> Norms {
    Norms {
        l2: f.l2(),
        c0: f.c0(),
        c1: f.c1(),
        holder: dyadic_holder(f, alpha),
        alpha,
    }
}

pub fn dyadic_holder(f: &ScalarField, alpha: f64) -> f64 {
    let m = f.grid.max_frequency();
    let kmax = ((m[0] * m[0] + m[1] * m[1]) as f64).sqrt();
    let mut best: f64 = 0.0;
    let mut j = 0;
    loop {
        let (lo, hi) = if j == 0 {
            (0.0, 1.0)
        } else {
            (2f64.powi(j - 1), 2f64.powi(j))
        };
        if lo > kmax {
            break;
        }
        let piece = hmap(&[f], 1, |fr, i, o| {
            let kb = fr.kbar2().sqrt();
            o[0] = if kb >= lo && kb < hi { i[0] } else { ZERO };
        })
        .pop()
        .unwrap();
        if !piece.is_zero() {
            best = best.max(2f64.powf(j as f64 * alpha) * piece.c0());
        }
        j += 1;
    }
    best
}

// ---------------------------------------------------------------------------
// Snapshot format

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"QGCF";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Little-endian header `{"QGCF", version, nx, ny, nz, components}` followed
/// by complex64 coefficients of each component, frequency index row-major
/// with `z` fastest.
pub fn write_snapshot(w: &mut impl Write, fields: &[&ScalarField]) -> Result<(), SpectralError> {
    let io = |e: std::io::Error| SpectralError::Snapshot(e.to_string());
    let g = check_grids(fields)?;
    w.write_all(SNAPSHOT_MAGIC).map_err(io)?;
    for v in [
        SNAPSHOT_VERSION,
        g.nx as u32,
        g.ny as u32,
        g.nz as u32,
        fields.len() as u32,
    ] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for f in fields {
        let s = f.spectrum3();
        let mut buf = Vec::with_capacity(8 * s.len());
        for ix in 0..g.nx {
            for iy in 0..g.ny {
                for iz in 0..g.nz {
                    let v = s[g.index(ix, iy, iz)];
                    buf.extend_from_slice(&(v.re as f32).to_le_bytes());
                    buf.extend_from_slice(&(v.im as f32).to_le_bytes());
                }
            }
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

pub fn read_snapshot(r: &mut impl Read) -> Result<(Grid, Vec<ScalarField>), SpectralError> {
    let io = |e: std::io::Error| SpectralError::Snapshot(e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(SpectralError::Snapshot("bad magic".into()));
    }
    let mut word = || -> Result<u32, SpectralError> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = word()?;
    if version != SNAPSHOT_VERSION {
        return Err(SpectralError::Snapshot(format!(
            "unsupported version {version}"
        )));
    }
    let (nx, ny, nz, n) = (word()?, word()?, word()?, word()?);
    let g = Grid::new(nx as usize, ny as usize, nz as usize)?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let mut buf = vec![0u8; 8 * g.len()];
        r.read_exact(&mut buf).map_err(io)?;
        let mut s = vec![ZERO; g.len()];
        let mut p = 0;
        for ix in 0..g.nx {
            for iy in 0..g.ny {
                for iz in 0..g.nz {
                    let re = f32::from_le_bytes(buf[p..p + 4].try_into().unwrap());
                    let im = f32::from_le_bytes(buf[p + 4..p + 8].try_into().unwrap());
                    s[g.index(ix, iy, iz)] = C::new(re as f64, im as f64);
                    p += 8;
                }
            }
        }
        out.push(ScalarField::from_spectrum3(g, s)?);
    }
    Ok((g, out))
}

// ---------------------------------------------------------------------------
// Random band-limited data

/// Which means a random field should have removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanMode {
    Any,
    MeanZero,
    SliceMeanZero,
}

/// A random real field with `|k_i| ≤ band` on every axis.
pub fn random_field(
    grid: Grid,
    band: i64,
    mean: MeanMode,
    rng: &mut impl rand::Rng,
) -> ScalarField {
    let m = grid.max_frequency();
    let b = [band.min(m[0]), band.min(m[1]), band.min(m[2])];
    let mut spec = vec![ZERO; grid.len()];
    for k1 in -b[0]..=b[0] {
        for k2 in -b[1]..=b[1] {
            for k3 in -b[2]..=b[2] {
                let drop = match mean {
                    MeanMode::Any => false,
                    MeanMode::MeanZero => k1 == 0 && k2 == 0 && k3 == 0,
                    MeanMode::SliceMeanZero => k1 == 0 && k2 == 0,
                };
                if drop {
                    continue;
                }
                let i = grid.freq_index(k1, k2, k3.rem_euclid(grid.nz as i64) as usize);
                spec[i] = C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
    }
    let f = ScalarField::from_spectrum3(grid, spec).expect("sizes agree");
    f.twice_real_part().scale(0.5)
}

pub fn random_vector(
    grid: Grid,
    band: i64,
    mean: MeanMode,
    rng: &mut impl rand::Rng,
) -> VectorField {
    VectorField::new(
        random_field(grid, band, mean, rng),
        random_field(grid, band, mean, rng),
        random_field(grid, band, mean, rng),
    )
}
