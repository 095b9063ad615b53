//! Projected Green's-function weights on a padded index grid and the
//! FFT convolution that advances a value surface by one period.
//!
//! Transform convention: unnormalized forward DFT, `1/(n1 n2)` inverse.
//! Physical scale factors live in the `dx1 * dx2` multiplier applied in
//! [`advance_time`].

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::MarketParams;

/// Uniform log-coordinate grid. Node `i` sits at `x_min + i * dx` for
/// `i = 0..n`; `x_max = x_min + n * dx` is the periodic image of node 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n1: usize,
    pub n2: usize,
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
    pub x1_anchor: f64,
    pub x2_anchor: f64,
}

impl GridSpec {
    pub fn new(n1: usize, n2: usize, x1: (f64, f64), x2: (f64, f64), anchor: (f64, f64)) -> Result<Self> {
        let g = Self {
            n1,
            n2,
            x1_min: x1.0,
            x1_max: x1.1,
            x2_min: x2.0,
            x2_max: x2.1,
            x1_anchor: anchor.0,
            x2_anchor: anchor.1,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.n1.is_power_of_two() || !self.n2.is_power_of_two() || self.n1 < 2 || self.n2 < 2 {
            return Err(Error::Dimension(format!(
                "grid sizes must be powers of two >= 2, got {} x {}",
                self.n1, self.n2
            )));
        }
        if !(self.x1_max > self.x1_min && self.x2_max > self.x2_min) {
            return Err(Error::ParameterDomain("grid requires x_max > x_min".into()));
        }
        Ok(())
    }

    pub fn p1(&self) -> f64 {
        self.x1_max - self.x1_min
    }

    pub fn p2(&self) -> f64 {
        self.x2_max - self.x2_min
    }

    pub fn dx1(&self) -> f64 {
        self.p1() / self.n1 as f64
    }

    pub fn dx2(&self) -> f64 {
        self.p2() / self.n2 as f64
    }

    pub fn x1(&self, i: usize) -> f64 {
        self.x1_min + i as f64 * self.dx1()
    }

    pub fn x2(&self, k: usize) -> f64 {
        self.x2_min + k as f64 * self.dx2()
    }

    /// Largest node coordinate in each direction.
    pub fn x1_last(&self) -> f64 {
        self.x1(self.n1 - 1)
    }

    pub fn x2_last(&self) -> f64 {
        self.x2(self.n2 - 1)
    }

    /// Dimensions of the doubled auxiliary grid.
    pub fn padded_dims(&self) -> (usize, usize) {
        (2 * self.n1, 2 * self.n2)
    }

    /// Array offset of the unpadded block inside the padded array.
    pub fn pad_offset(&self) -> (usize, usize) {
        (self.n1 / 2, self.n2 / 2)
    }

    /// Same spacing and widths, translated by `(d1, d2)`.
    pub fn shifted(&self, d1: f64, d2: f64) -> Self {
        Self {
            x1_min: self.x1_min + d1,
            x1_max: self.x1_max + d1,
            x2_min: self.x2_min + d2,
            x2_max: self.x2_max + d2,
            x1_anchor: self.x1_anchor + d1,
            x2_anchor: self.x2_anchor + d2,
            ..*self
        }
    }
}

/// Cached forward/inverse plans for one 2-D size.
#[derive(Clone)]
pub struct Fft2 {
    n1: usize,
    n2: usize,
    fwd1: Arc<dyn Fft<f64>>,
    fwd2: Arc<dyn Fft<f64>>,
    inv1: Arc<dyn Fft<f64>>,
    inv2: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({} x {})", self.n1, self.n2)
    }
}

impl Fft2 {
    pub fn new(n1: usize, n2: usize) -> Result<Self> {
        if !n1.is_power_of_two() || !n2.is_power_of_two() {
            return Err(Error::Dimension(format!(
                "DFT sizes must be powers of two, got {n1} x {n2}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n1,
            n2,
            fwd1: planner.plan_fft_forward(n1),
            fwd2: planner.plan_fft_forward(n2),
            inv1: planner.plan_fft_inverse(n1),
            inv2: planner.plan_fft_inverse(n2),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.n1 * self.n2 {
            return Err(Error::Dimension(format!(
                "buffer of length {len} does not match {} x {}",
                self.n1, self.n2
            )));
        }
        Ok(())
    }

    /// In-place unnormalized forward transform of a row-major buffer.
    pub fn forward(&self, data: &mut [Complex64]) -> Result<()> {
        self.check(data.len())?;
        self.run(data, &self.fwd1, &self.fwd2);
        Ok(())
    }

    /// In-place inverse transform, normalized by `1/(n1 n2)`.
    pub fn inverse(&self, data: &mut [Complex64]) -> Result<()> {
        self.check(data.len())?;
        self.run(data, &self.inv1, &self.inv2);
        let scale = 1.0 / (self.n1 * self.n2) as f64;
        data.par_iter_mut().for_each(|z| *z *= scale);
        Ok(())
    }

    fn run(&self, data: &mut [Complex64], along1: &Arc<dyn Fft<f64>>, along2: &Arc<dyn Fft<f64>>) {
        let (n1, n2) = (self.n1, self.n2);
        data.par_chunks_mut(n2).for_each(|row| along2.process(row));
        let mut t = vec![Complex64::new(0.0, 0.0); n1 * n2];
        transpose(data, &mut t, n1, n2);
        t.par_chunks_mut(n1).for_each(|col| along1.process(col));
        transpose(&t, data, n2, n1);
    }
}

/// Blocked transpose of a `rows x cols` row-major matrix.
fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Unnormalized forward 2-D DFT.
pub fn dft2(values: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let (n1, n2) = values.dim();
    let plan = Fft2::new(n1, n2)?;
    let mut buf: Vec<Complex64> = values.iter().copied().collect();
    plan.forward(&mut buf)?;
    Ok(Array2::from_shape_vec((n1, n2), buf).expect("shape"))
}

/// Inverse of [`dft2`].
pub fn idft2(values: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let (n1, n2) = values.dim();
    let plan = Fft2::new(n1, n2)?;
    let mut buf: Vec<Complex64> = values.iter().copied().collect();
    plan.inverse(&mut buf)?;
    Ok(Array2::from_shape_vec((n1, n2), buf).expect("shape"))
}

/// Settings for the truncated-series weight construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    /// Monotonicity tolerance `δ`.
    pub delta: f64,
    /// Total horizon `T`; the negative-mass budget per step is `δ Δτ / T`.
    pub horizon: f64,
    /// Ceiling on the oversampling ratio `N^g / N†` in each direction.
    pub max_oversample: usize,
    /// Series sizes up to this many terms per direction are always allowed,
    /// whatever the oversampling ratio. Small grids need it because the
    /// bond volatility damps the series slowly.
    pub min_series: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            delta: 1e-6,
            horizon: 30.0,
            max_oversample: 8,
            min_series: 4096,
        }
    }
}

/// Projected Green's function on the padded index set, stored in FFT
/// order (offset `l` at index `l mod n`), with its DFT and diagnostics.
#[derive(Debug, Clone)]
pub struct GreenWeights {
    pub weights: Array2<f64>,
    pub weights_dft: Array2<Complex64>,
    pub dt: f64,
    pub dx1: f64,
    pub dx2: f64,
    /// Unpadded grid size the weights were built for.
    pub base: (usize, usize),
    /// Series truncation sizes `(N₁^g, N₂^g)` finally used.
    pub series: (usize, usize),
    pub neg_mass: f64,
    pub wrap_mass: f64,
    pub total_mass: f64,
    pub use_borrow_spread: bool,
}

impl GreenWeights {
    pub fn padded_dims(&self) -> (usize, usize) {
        self.weights.dim()
    }

    /// Binary dump: n1, n2 as u64 then dt, neg_mass, wrap_mass, total_mass
    /// as f64, then the padded weight array row-major; all little-endian.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<()> {
        let (n1, n2) = self.padded_dims();
        out.write_all(&(n1 as u64).to_le_bytes())?;
        out.write_all(&(n2 as u64).to_le_bytes())?;
        for v in [self.dt, self.neg_mass, self.wrap_mass, self.total_mass] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in self.weights.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Contents of a weight dump.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDump {
    pub dt: f64,
    pub neg_mass: f64,
    pub wrap_mass: f64,
    pub total_mass: f64,
    pub weights: Array2<f64>,
}

pub fn read_weight_dump<R: Read>(mut input: R) -> Result<WeightDump> {
    let mut b8 = [0u8; 8];
    let mut next_u64 = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8))
    };
    let n1 = next_u64(&mut input)? as usize;
    let n2 = next_u64(&mut input)? as usize;
    let mut hdr = [0.0; 4];
    for h in hdr.iter_mut() {
        *h = f64::from_bits(next_u64(&mut input)?);
    }
    let mut data = Vec::with_capacity(n1 * n2);
    for _ in 0..n1 * n2 {
        data.push(f64::from_bits(next_u64(&mut input)?));
    }
    Ok(WeightDump {
        dt: hdr[0],
        neg_mass: hdr[1],
        wrap_mass: hdr[2],
        total_mass: hdr[3],
        weights: Array2::from_shape_vec((n1, n2), data)
            .map_err(|e| Error::Dimension(e.to_string()))?,
    })
}

/// `sin²(πωΔx)/(πωΔx)²` with the limit 1 at ω = 0.
fn sinc2(omega: f64, dx: f64) -> f64 {
    let a = PI * omega * dx;
    if a == 0.0 {
        1.0
    } else {
        let s = a.sin() / a;
        s * s
    }
}

/// Offset represented by FFT-order index `i` on an axis of length `n`.
fn offset(i: usize, n: usize) -> isize {
    if i < n / 2 {
        i as isize
    } else {
        i as isize - n as isize
    }
}

/// Builds the projected Green's-function weights on the padded grid,
/// doubling the series truncation size until the negative mass satisfies
/// `neg_mass < δ Δτ / T` or the oversampling ceiling is reached.
pub fn build_green_weights(
    mkt: &MarketParams,
    grid: &GridSpec,
    dt: f64,
    cfg: &KernelConfig,
    use_borrow_spread: bool,
) -> Result<GreenWeights> {
    grid.validate()?;
    mkt.validate()?;
    if !(dt > 0.0) || !(cfg.delta > 0.0) || !(cfg.horizon > 0.0) {
        return Err(Error::ParameterDomain("dt, delta and horizon must be positive".into()));
    }
    let limit = cfg.delta * dt / cfg.horizon;
    let plan = Fft2::new(grid.padded_dims().0, grid.padded_dims().1)?;
    let mut factor = 1;
    loop {
        let w = build_at_oversampling(mkt, grid, dt, factor, use_borrow_spread, &plan)?;
        if w.neg_mass < limit {
            return Ok(w);
        }
        let np = grid.padded_dims().0.max(grid.padded_dims().1);
        let ceiling = (np * cfg.max_oversample).max(cfg.min_series);
        if np * factor * 2 > ceiling {
            return Err(Error::Monotonicity {
                neg_mass: w.neg_mass,
                limit,
                ng1: w.series.0,
                ng2: w.series.1,
            });
        }
        factor *= 2;
    }
}

fn build_at_oversampling(
    mkt: &MarketParams,
    grid: &GridSpec,
    dt: f64,
    factor: usize,
    use_borrow_spread: bool,
    plan: &Fft2,
) -> Result<GreenWeights> {
    let (np1, np2) = grid.padded_dims();
    let (ng1, ng2) = (np1 * factor, np2 * factor);
    let (dx1, dx2) = (grid.dx1(), grid.dx2());
    let (pp1, pp2) = (2.0 * grid.p1(), 2.0 * grid.p2());
    let spread = if use_borrow_spread { mkt.mu_c_bond } else { 0.0 };

    // Separable factors of the damped series; the cross term is applied per pair.
    let freq = |u: usize, ng: usize, period: f64| offset(u, ng) as f64 / period;
    let along1: Vec<(f64, Complex64)> = (0..ng1)
        .map(|u| {
            let w = freq(u, ng1, pp1);
            Ok((w, sinc2(w, dx1) * (mkt.stock_exponent(w)? * dt).exp()))
        })
        .collect::<Result<_>>()?;
    let along2: Vec<(f64, Complex64)> = (0..ng2)
        .map(|p| {
            let w = freq(p, ng2, pp2);
            Ok((w, sinc2(w, dx2) * (mkt.bond_exponent(w, spread)? * dt).exp()))
        })
        .collect::<Result<_>>()?;
    let cross = -mkt.rho_sb * mkt.stock.sigma * mkt.bond.sigma * 4.0 * PI * PI * dt;

    // Summing the oversampled series and subsampling at stride N^g/N† is the
    // same as folding coefficients modulo N† and transforming at size N†.
    let mut folded = vec![Complex64::new(0.0, 0.0); np1 * np2];
    folded.par_chunks_mut(np2).enumerate().for_each(|(r1, row)| {
        for u in (r1..ng1).step_by(np1) {
            let (w1, a) = along1[u];
            if a.norm_sqr() == 0.0 {
                continue;
            }
            for (p, &(w2, b)) in along2.iter().enumerate() {
                let c = if cross != 0.0 { (cross * w1 * w2).exp() } else { 1.0 };
                row[p % np2] += a * b * c;
            }
        }
    });
    plan.inverse(&mut folded)?;
    let scale = (np1 * np2) as f64 / (pp1 * pp2);
    let weights = Array2::from_shape_fn((np1, np2), |(i, k)| folded[i * np2 + k].re * scale);

    let mut buf: Vec<Complex64> = weights.iter().map(|&g| Complex64::new(g, 0.0)).collect();
    plan.forward(&mut buf)?;
    let weights_dft = Array2::from_shape_vec((np1, np2), buf).expect("shape");

    let cell = dx1 * dx2;
    let (n1, n2) = (grid.n1 as isize, grid.n2 as isize);
    let (mut total, mut neg, mut wrap) = (0.0, 0.0, 0.0);
    for ((i, k), &g) in weights.indexed_iter() {
        total += g;
        if g < 0.0 {
            neg -= g;
        }
        let (l, m) = (offset(i, np1), offset(k, np2));
        if l < -n1 / 2 || l > n1 / 2 - 1 || m < -n2 / 2 || m > n2 / 2 - 1 {
            wrap += g.abs();
        }
    }
    Ok(GreenWeights {
        weights,
        weights_dft,
        dt,
        dx1,
        dx2,
        base: (grid.n1, grid.n2),
        series: (ng1, ng2),
        neg_mass: cell * neg,
        wrap_mass: cell * wrap,
        total_mass: cell * total,
        use_borrow_spread,
    })
}

/// Kernel mass outside the unpadded offset range. The per-step wrap-around
/// error is bounded by this quantity times a bound on the padded solution.
pub fn wrap_diagnostic(w: &GreenWeights) -> f64 {
    w.wrap_mass
}

fn check_dims(v: &ArrayView2<f64>, w: &GreenWeights) -> Result<()> {
    if v.dim() != w.padded_dims() {
        return Err(Error::Dimension(format!(
            "padded surface {:?} does not match weights {:?}",
            v.dim(),
            w.padded_dims()
        )));
    }
    Ok(())
}

/// Restriction of a padded array to the unpadded block.
fn restrict(full: &[Complex64], np2: usize, base: (usize, usize), imag: bool) -> Array2<f64> {
    let (o1, o2) = (base.0 / 2, base.1 / 2);
    Array2::from_shape_fn(base, |(i, k)| {
        let z = full[(i + o1) * np2 + k + o2];
        if imag {
            z.im
        } else {
            z.re
        }
    })
}

/// One-period advance: `IDFT(G̃† ∘ DFT(v†))` scaled by `Δx₁Δx₂`, restricted
/// to the unpadded block.
pub fn advance_time(v_padded: ArrayView2<f64>, w: &GreenWeights, plan: &Fft2) -> Result<Array2<f64>> {
    check_dims(&v_padded, w)?;
    let (np1, np2) = w.padded_dims();
    if plan.dims() != (np1, np2) {
        return Err(Error::Dimension("FFT plan does not match weights".into()));
    }
    let mut buf: Vec<Complex64> = v_padded.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    plan.forward(&mut buf)?;
    let cell = w.dx1 * w.dx2;
    buf.par_iter_mut()
        .zip(w.weights_dft.as_slice().expect("contiguous").par_iter())
        .for_each(|(z, g)| *z *= g * cell);
    plan.inverse(&mut buf)?;

    let vmax = v_padded.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let resid = buf.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
    if resid > 1e-10 * vmax.max(f64::MIN_POSITIVE) {
        return Err(Error::NonFinite(format!(
            "imaginary residue {resid:e} after advance exceeds 1e-10 * {vmax:e}"
        )));
    }
    Ok(restrict(&buf, np2, w.base, false))
}

/// Advances two real surfaces with their own kernels using a single
/// complex transform pair: the surfaces are packed as `a + i b`.
pub fn advance_pair(
    a_padded: ArrayView2<f64>,
    wa: &GreenWeights,
    b_padded: ArrayView2<f64>,
    wb: &GreenWeights,
    plan: &Fft2,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_dims(&a_padded, wa)?;
    check_dims(&b_padded, wb)?;
    let (np1, np2) = wa.padded_dims();
    if wb.padded_dims() != (np1, np2) || wa.base != wb.base || plan.dims() != (np1, np2) {
        return Err(Error::Dimension("paired advance needs matching sizes".into()));
    }
    let mut z: Vec<Complex64> = a_padded
        .iter()
        .zip(b_padded.iter())
        .map(|(&x, &y)| Complex64::new(x, y))
        .collect();
    plan.forward(&mut z)?;
    let ga = wa.weights_dft.as_slice().expect("contiguous");
    let gb = wb.weights_dft.as_slice().expect("contiguous");
    let (ca, cb) = (wa.dx1 * wa.dx2, wb.dx1 * wb.dx2);
    let half = Complex64::new(0.5, 0.0);
    let mut out = vec![Complex64::new(0.0, 0.0); np1 * np2];
    out.par_chunks_mut(np2).enumerate().for_each(|(i, row)| {
        let ni = (np1 - i) % np1;
        for (k, o) in row.iter_mut().enumerate() {
            let nk = (np2 - k) % np2;
            let zk = z[i * np2 + k];
            let zc = z[ni * np2 + nk].conj();
            let fa = (zk + zc) * half;
            let fb = (zk - zc) * Complex64::new(0.0, -0.5);
            let idx = i * np2 + k;
            *o = fa * ga[idx] * ca + Complex64::new(0.0, 1.0) * fb * gb[idx] * cb;
        }
    });
    plan.inverse(&mut out)?;
    Ok((restrict(&out, np2, wa.base, false), restrict(&out, np2, wa.base, true)))
}

/// Places an unpadded surface into the centre of a zeroed padded array.
pub fn embed_center(v: &Array2<f64>) -> Array2<f64> {
    let (n1, n2) = v.dim();
    let mut p = Array2::zeros((2 * n1, 2 * n2));
    p.slice_mut(s![n1 / 2..n1 / 2 + n1, n2 / 2..n2 / 2 + n2]).assign(v);
    p
}
