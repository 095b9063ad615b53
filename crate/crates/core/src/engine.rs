//! Backward solve between rebalancing dates on the two solution domains:
//! `(log s, log b)` for `b >= 0` and `(log s, log b̂)` with `b̂ = -b > 0`
//! for debt. The surfaces evolve independently between rebalancing times;
//! they only exchange information through the control step.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{advance_pair, build_green_weights, Fft2, GreenWeights, GridSpec, KernelConfig};
use crate::market::MarketParams;

/// Decumulation scenario. Monetary amounts in thousands (real).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Horizon `T` in years.
    pub horizon: f64,
    /// Number of rebalancing periods `M`; withdrawals at `t_0 .. t_{M-1}`.
    pub periods: usize,
    pub w0: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub p_max: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub epsilon: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            horizon: 30.0,
            periods: 30,
            w0: 1000.0,
            q_min: 30.0,
            q_max: 60.0,
            p_max: 1.0,
            alpha: 0.05,
            kappa: 0.866,
            epsilon: -1e-4,
        }
    }
}

impl Scenario {
    pub fn dt(&self) -> f64 {
        self.horizon / self.periods as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ParameterDomain(m));
        if !(self.horizon > 0.0) || self.periods == 0 {
            return bad("horizon and periods must be positive".into());
        }
        if !(self.q_min <= self.q_max) || self.q_min < 0.0 {
            return bad(format!("need 0 <= q_min <= q_max, got {} / {}", self.q_min, self.q_max));
        }
        if !(self.p_max >= 0.0) {
            return bad(format!("p_max = {} < 0", self.p_max));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha = {} outside (0, 1]", self.alpha));
        }
        if !(self.kappa >= 0.0) {
            return bad(format!("kappa = {} < 0", self.kappa));
        }
        if !self.epsilon.is_finite() || !self.w0.is_finite() {
            return bad("epsilon and w0 must be finite".into());
        }
        Ok(())
    }

    /// Feasible withdrawal interval at pre-withdrawal wealth `w`.
    pub fn withdrawal_bounds(&self, w: f64) -> (f64, f64) {
        if w >= self.q_max {
            (self.q_min, self.q_max)
        } else {
            (self.q_min, self.q_min.max(w))
        }
    }
}

/// Numerical settings. Grid sizes are per direction on the unpadded grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    pub grid: usize,
    /// Wealth at the anchor node, `x̂⁰ = log(anchor_wealth)`.
    pub anchor_wealth: f64,
    pub x_min_offset: f64,
    pub x_max_offset: f64,
    pub delta: f64,
    pub max_oversample: usize,
    pub min_series: usize,
    /// `N_w = wealth_multiplier * grid`.
    pub wealth_multiplier: usize,
    /// Fixed wealth-grid range; by default it spans every wealth reachable
    /// on the PDE grids.
    pub wealth_bounds: Option<[f64; 2]>,
    /// `N_p = N_q = grid / control_divisor`.
    pub control_divisor: usize,
    pub wstar_coarse_grid: usize,
    pub wstar_candidates: usize,
    /// Coarse scan range for `W*` in units of `W₀`.
    pub wstar_lo: f64,
    pub wstar_hi: f64,
    /// Golden-section tolerance in units of `W₀`.
    pub wstar_tol: f64,
    /// Largest acceptable fraction of interpolation queries clamped at the
    /// top of the grid.
    pub max_clamp_fraction: f64,
    /// Largest acceptable kernel mass in the outer half of the padded grid.
    pub max_wrap_mass: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            grid: 512,
            anchor_wealth: 100.0,
            x_min_offset: -7.5,
            x_max_offset: 10.0,
            delta: 1e-6,
            max_oversample: 8,
            min_series: 4096,
            wealth_multiplier: 4,
            wealth_bounds: None,
            control_divisor: 10,
            wstar_coarse_grid: 128,
            wstar_candidates: 65,
            wstar_lo: -1.0,
            wstar_hi: 3.0,
            wstar_tol: 1e-3,
            max_clamp_fraction: 0.05,
            max_wrap_mass: 1e-12,
        }
    }
}

impl Numerics {
    pub fn with_grid(&self, grid: usize) -> Self {
        Self { grid, ..self.clone() }
    }

    pub fn n_wealth(&self) -> usize {
        self.wealth_multiplier * self.grid
    }

    pub fn n_controls(&self) -> usize {
        (self.grid / self.control_divisor.max(1)).max(2)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.grid.is_power_of_two() || self.grid < 4 {
            return Err(Error::Dimension(format!("grid {} must be a power of two >= 4", self.grid)));
        }
        if !(self.x_max_offset > self.x_min_offset) || !(self.anchor_wealth > 0.0) {
            return Err(Error::ParameterDomain("invalid domain offsets".into()));
        }
        if !(self.delta > 0.0) || self.max_oversample == 0 || self.wealth_multiplier == 0 {
            return Err(Error::ParameterDomain("invalid kernel or wealth-grid settings".into()));
        }
        if self.wstar_candidates < 2 || !(self.wstar_hi > self.wstar_lo) || !(self.wstar_tol > 0.0) {
            return Err(Error::ParameterDomain("invalid W* search settings".into()));
        }
        if !self.wstar_coarse_grid.is_power_of_two() {
            return Err(Error::Dimension("W* coarse grid must be a power of two".into()));
        }
        Ok(())
    }
}

/// Which solution domain a surface lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `x₂ = log b`, `b > 0`.
    Pos,
    /// `x₂ = log b̂`, `b = -b̂ < 0`.
    Debt,
}

impl Side {
    /// Total wealth at log-coordinates `(x1, x2)`.
    pub fn wealth(self, x1: f64, x2: f64) -> f64 {
        match self {
            Side::Pos => x1.exp() + x2.exp(),
            Side::Debt => x1.exp() - x2.exp(),
        }
    }
}

/// Log-coordinate grids of the two domains; both share one layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPair {
    pub pos: GridSpec,
    pub neg: GridSpec,
}

/// Grid layout: configured offsets about the anchor, widened if needed so
/// that `e^{x_min} <= 1e-4 W₀` and `x_max` clears a four-sigma stock path.
pub fn build_grids(scn: &Scenario, mkt: &MarketParams, numerics: &Numerics) -> Result<GridPair> {
    scn.validate()?;
    numerics.validate()?;
    let anchor = numerics.anchor_wealth.ln();
    let mut x_min = anchor + numerics.x_min_offset;
    let mut x_max = anchor + numerics.x_max_offset;
    let floor = (1e-4 * scn.w0.abs().max(1e-12)).ln();
    if x_min > floor {
        x_min = floor;
    }
    let four_sigma = mkt.stock.mu * scn.horizon + 4.0 * mkt.stock.sigma * scn.horizon.sqrt();
    if x_max < anchor + four_sigma {
        x_max = anchor + four_sigma;
    }
    let n = numerics.grid;
    let g = GridSpec::new(n, n, (x_min, x_max), (x_min, x_max), (anchor, anchor))?;
    Ok(GridPair { pos: g, neg: g })
}

/// Objective at `T⁺`: `κ(W* + min(w - W*, 0)/α) + ε w` with `w = s + b`.
pub fn terminal_value(s: f64, b_signed: f64, w_star: f64, scn: &Scenario) -> f64 {
    let w = s + b_signed;
    scn.kappa * (w_star + (w - w_star).min(0.0) / scn.alpha) + scn.epsilon * w
}

/// Value arrays on the two domains at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurfacePair {
    pub pos: Array2<f64>,
    pub neg: Array2<f64>,
    pub time_index: usize,
}

impl ValueSurfacePair {
    /// Evaluates `f(wealth)` at every node of both grids.
    pub fn from_wealth_fn<F: Fn(f64) -> f64>(grids: &GridPair, time_index: usize, f: F) -> Self {
        let make = |g: &GridSpec, side: Side| {
            Array2::from_shape_fn((g.n1, g.n2), |(i, k)| f(side.wealth(g.x1(i), g.x2(k))))
        };
        Self {
            pos: make(&grids.pos, Side::Pos),
            neg: make(&grids.neg, Side::Debt),
            time_index,
        }
    }

    pub fn terminal(grids: &GridPair, w_star: f64, scn: &Scenario) -> Self {
        Self::from_wealth_fn(grids, scn.periods, |w| terminal_value(w, 0.0, w_star, scn))
    }

    pub fn is_finite(&self) -> bool {
        self.pos.iter().chain(self.neg.iter()).all(|v| v.is_finite())
    }
}

/// Padded array on the doubled grid. Left and bottom pads repeat the
/// nearest edge value (`s → 0`, `b → 0`); top and right pads continue the
/// surface linearly in total wealth from the outermost two interior nodes.
pub fn make_padded(v: &Array2<f64>, grid: &GridSpec, side: Side) -> Array2<f64> {
    let (n1, n2) = (grid.n1, grid.n2);
    assert_eq!(v.dim(), (n1, n2), "surface does not match grid");
    let (o1, o2) = grid.pad_offset();
    let (dx1, dx2) = (grid.dx1(), grid.dx2());
    let wealth = |i: isize, k: isize| {
        side.wealth(grid.x1_min + i as f64 * dx1, grid.x2_min + k as f64 * dx2)
    };
    let (last1, last2) = (n1 as isize - 1, n2 as isize - 1);
    Array2::from_shape_fn(grid.padded_dims(), |(pi, pk)| {
        let j = pi as isize - o1 as isize;
        let k = pk as isize - o2 as isize;
        let jc = j.clamp(0, last1);
        let kc = k.clamp(0, last2);
        if j <= last1 && k <= last2 {
            return v[(jc as usize, kc as usize)];
        }
        // Two interior nodes along the extrapolation direction.
        let (a, b) = if j > last1 {
            ((last1 - 1, kc), (last1, kc))
        } else {
            ((jc, last2 - 1), (jc, last2))
        };
        let (wa, wb) = (wealth(a.0, a.1), wealth(b.0, b.1));
        let (va, vb) = (v[(a.0 as usize, a.1 as usize)], v[(b.0 as usize, b.1 as usize)]);
        let slope = (vb - va) / (wb - wa);
        vb + slope * (wealth(j, k) - wb)
    })
}

/// Kernels for one grid and period length, shared by every solve on it.
#[derive(Debug)]
pub struct Kernels {
    pub grids: GridPair,
    pub pos: GreenWeights,
    pub neg: GreenWeights,
    pub plan: Fft2,
}

impl Kernels {
    pub fn build(scn: &Scenario, mkt: &MarketParams, numerics: &Numerics) -> Result<Arc<Self>> {
        let grids = build_grids(scn, mkt, numerics)?;
        let cfg = KernelConfig {
            delta: numerics.delta,
            horizon: scn.horizon,
            max_oversample: numerics.max_oversample,
            min_series: numerics.min_series,
        };
        let pos = build_green_weights(mkt, &grids.pos, scn.dt(), &cfg, false)?;
        let neg = build_green_weights(mkt, &grids.neg, scn.dt(), &cfg, true)?;
        let (np1, np2) = grids.pos.padded_dims();
        Ok(Arc::new(Self {
            grids,
            pos,
            neg,
            plan: Fft2::new(np1, np2)?,
        }))
    }
}

/// Advances both surfaces one period backward in time. Surfaces do not
/// couple: `b = 0` is a barrier for the uncontrolled process.
pub fn step_between_rebalances(v: &ValueSurfacePair, kernels: &Kernels) -> Result<ValueSurfacePair> {
    let g = &kernels.grids;
    let pp = make_padded(&v.pos, &g.pos, Side::Pos);
    let pn = make_padded(&v.neg, &g.neg, Side::Debt);
    let (pos, neg) = advance_pair(pp.view(), &kernels.pos, pn.view(), &kernels.neg, &kernels.plan)?;
    let out = ValueSurfacePair {
        pos,
        neg,
        time_index: v.time_index.saturating_sub(1),
    };
    if !out.is_finite() {
        return Err(Error::NonFinite("value surface after advance".into()));
    }
    Ok(out)
}
