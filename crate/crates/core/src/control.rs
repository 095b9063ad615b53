//! Rebalancing-time control search, the outer `W*` maximization and
//! frontier assembly.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use log::{debug, info, warn};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{
    step_between_rebalances, GridPair, Kernels, Numerics, Scenario, Side,
    ValueSurfacePair,
};
use crate::error::{Error, Result};
use crate::fourier::GridSpec;
use crate::market::MarketParams;

/// Feasible withdrawal interval at pre-withdrawal wealth `w`.
pub fn withdrawal_bounds(q_min: f64, q_max: f64, w: f64) -> (f64, f64) {
    if w >= q_max {
        (q_min, q_max)
    } else {
        (q_min, q_min.max(w))
    }
}

fn signed_log(w: f64, scale: f64) -> f64 {
    w.signum() * (w.abs() / scale).ln_1p()
}

fn signed_exp(y: f64, scale: f64) -> f64 {
    y.signum() * scale * y.abs().exp_m1()
}

/// Increasing wealth nodes; by default uniform in
/// `sgn(w) log(1 + |w|/scale)` so negative wealth is representable.
#[derive(Debug, Clone, PartialEq)]
pub struct WealthGrid {
    pub nodes: Vec<f64>,
    pub scale: f64,
}

impl WealthGrid {
    pub fn new(w_min: f64, w_max: f64, n: usize, scale: f64) -> Result<Self> {
        if n < 2 || !(w_max > w_min) || !(scale > 0.0) {
            return Err(Error::ParameterDomain(format!(
                "wealth grid needs n >= 2 and w_max > w_min, got n={n}, [{w_min}, {w_max}]"
            )));
        }
        let (y_lo, y_hi) = (signed_log(w_min, scale), signed_log(w_max, scale));
        let dy = (y_hi - y_lo) / (n - 1) as f64;
        let mut nodes: Vec<f64> = (0..n).map(|k| signed_exp(y_lo + k as f64 * dy, scale)).collect();
        nodes[0] = w_min;
        nodes[n - 1] = w_max;
        Self::from_nodes(nodes, scale)
    }

    pub fn from_nodes(nodes: Vec<f64>, scale: f64) -> Result<Self> {
        if nodes.len() < 2 || !nodes.windows(2).all(|p| p[1] > p[0]) || !nodes.iter().all(|w| w.is_finite()) {
            return Err(Error::ParameterDomain("wealth nodes must be finite and strictly increasing".into()));
        }
        Ok(Self { nodes, scale })
    }

    /// Wealth grid covering every wealth reachable on the two PDE grids.
    pub fn for_grids(grids: &GridPair, n: usize) -> Result<Self> {
        let g = &grids.pos;
        let w_min = g.x1_min.exp() - grids.neg.x2_last().exp();
        let w_max = g.x1_last().exp() + g.x2_last().exp();
        Self::new(w_min, w_max, n, 1.0)
    }

    pub fn w_min(&self) -> f64 {
        self.nodes[0]
    }

    pub fn w_max(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bracketing interval and linear weight; clamps outside the range.
    pub fn locate(&self, w: f64) -> (usize, f64) {
        let n = self.nodes.len();
        if !(w > self.nodes[0]) {
            return (0, 0.0);
        }
        if w >= self.nodes[n - 1] {
            return (n - 2, 1.0);
        }
        let i = self.nodes.partition_point(|&x| x <= w) - 1;
        let (a, b) = (self.nodes[i], self.nodes[i + 1]);
        (i, (w - a) / (b - a))
    }

    pub fn interp(&self, vals: &[f64], w: f64) -> f64 {
        let (i, t) = self.locate(w);
        vals[i] + t * (vals[i + 1] - vals[i])
    }
}

/// Counts of interpolation queries clamped at the top of a PDE grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClampStats {
    pub queries: u64,
    pub upper: u64,
}

impl ClampStats {
    pub fn fraction(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.upper as f64 / self.queries as f64
        }
    }

    fn merge(self, o: Self) -> Self {
        Self {
            queries: self.queries + o.queries,
            upper: self.upper + o.upper,
        }
    }
}

/// Bilinear interpolation in log coordinates, clamped to the grid.
/// Returns the value and whether either coordinate overflowed the top.
pub fn bilinear(v: &Array2<f64>, g: &GridSpec, z1: f64, z2: f64) -> (f64, bool) {
    let axis = |z: f64, lo: f64, dx: f64, n: usize| -> (usize, f64, bool) {
        let f = (z - lo) / dx;
        if !(f > 0.0) {
            return (0, 0.0, false);
        }
        let top = (n - 1) as f64;
        if f >= top {
            return (n - 2, 1.0, f > top + 1e-9);
        }
        let i = (f.floor() as usize).min(n - 2);
        (i, f - i as f64, false)
    };
    let (i, t, c1) = axis(z1, g.x1_min, g.dx1(), g.n1);
    let (k, u, c2) = axis(z2, g.x2_min, g.dx2(), g.n2);
    let a = v[(i, k)] + u * (v[(i, k + 1)] - v[(i, k)]);
    let b = v[(i + 1, k)] + u * (v[(i + 1, k + 1)] - v[(i + 1, k)]);
    (a + t * (b - a), c1 || c2)
}

/// Surface value after allocating a fraction `p` of post-withdrawal
/// wealth `w` to stocks.
pub(crate) fn allocation_value(v: &ValueSurfacePair, grids: &GridPair, w: f64, p: f64) -> (f64, bool) {
    if w <= 0.0 {
        return bilinear(&v.neg, &grids.neg, f64::NEG_INFINITY, (-w).ln());
    }
    if p <= 1.0 {
        bilinear(&v.pos, &grids.pos, (w * p).ln(), (w * (1.0 - p)).ln())
    } else {
        bilinear(&v.neg, &grids.neg, (w * p).ln(), (w * (p - 1.0)).ln())
    }
}

pub(crate) fn candidates(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let m = if hi > lo { n.max(2) } else { 1 };
    (0..m).map(move |j| match j {
        0 => lo,
        j if j == m - 1 => hi,
        j => lo + (hi - lo) * (j as f64 / (m - 1) as f64),
    })
}

/// Optimal stock fraction `p*` and retained value `h` on every wealth node.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub p_star: Vec<f64>,
    pub h_vals: Vec<f64>,
    pub clamps: ClampStats,
}

/// Exhaustive search over `n_p` equally spaced fractions in `[0, p_max]`;
/// the smallest fraction wins ties.
pub fn optimize_allocation(
    v: &ValueSurfacePair,
    grids: &GridPair,
    wealth: &WealthGrid,
    p_max: f64,
    n_p: usize,
) -> Allocation {
    let per_node: Vec<(f64, f64, ClampStats)> = wealth
        .nodes
        .par_iter()
        .map(|&w| {
            let mut cl = ClampStats::default();
            if w <= 0.0 {
                let (h, c) = allocation_value(v, grids, w, 0.0);
                cl.queries += 1;
                cl.upper += c as u64;
                return (0.0, h, cl);
            }
            let mut best = (0.0, f64::NEG_INFINITY);
            for p in candidates(0.0, p_max, n_p) {
                let (h, c) = allocation_value(v, grids, w, p);
                cl.queries += 1;
                cl.upper += c as u64;
                if h > best.1 {
                    best = (p, h);
                }
            }
            (best.0, best.1, cl)
        })
        .collect();
    let mut out = Allocation {
        p_star: Vec::with_capacity(per_node.len()),
        h_vals: Vec::with_capacity(per_node.len()),
        clamps: ClampStats::default(),
    };
    for (p, h, c) in per_node {
        out.p_star.push(p);
        out.h_vals.push(h);
        out.clamps = out.clamps.merge(c);
    }
    out
}

/// Retained value on the wealth grid under a given allocation.
pub fn retained_value(v: &ValueSurfacePair, grids: &GridPair, wealth: &WealthGrid, p_star: &[f64]) -> Vec<f64> {
    wealth
        .nodes
        .par_iter()
        .zip(p_star.par_iter())
        .map(|(&w, &p)| allocation_value(v, grids, w, p).0)
        .collect()
}

/// Maximizes `q + h(w - q)` over `n_q` equally spaced withdrawals in the
/// feasible set at each wealth node; the smallest withdrawal wins ties.
pub fn optimize_withdrawal(h_vals: &[f64], wealth: &WealthGrid, q_min: f64, q_max: f64, n_q: usize) -> Vec<f64> {
    wealth
        .nodes
        .par_iter()
        .map(|&w| {
            let (lo, hi) = withdrawal_bounds(q_min, q_max, w);
            let mut best = (lo, f64::NEG_INFINITY);
            for q in candidates(lo, hi, n_q) {
                let val = q + wealth.interp(h_vals, w - q);
                if val > best.1 {
                    best = (q, val);
                }
            }
            best.0
        })
        .collect()
}

/// Controls at one rebalancing time, tabulated on the wealth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlStep {
    pub q_star: Vec<f64>,
    pub p_star: Vec<f64>,
    pub h_vals: Vec<f64>,
}

/// Feedback controls for `t_0 .. t_{M-1}` with their feasibility data.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTables {
    pub wealth: WealthGrid,
    pub steps: Vec<ControlStep>,
    pub horizon: f64,
    pub w_star: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub p_max: f64,
}

const MAGIC: &[u8; 8] = b"DECUMCTL";
const VERSION: u32 = 1;

impl ControlTables {
    pub fn periods(&self) -> usize {
        self.steps.len()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps.len() as f64
    }

    /// Interpolated withdrawal projected onto the feasible interval.
    pub fn q_at(&self, n: usize, w: f64) -> f64 {
        let (lo, hi) = withdrawal_bounds(self.q_min, self.q_max, w);
        self.wealth.interp(&self.steps[n].q_star, w).clamp(lo, hi)
    }

    /// Interpolated stock fraction; zero for non-positive wealth.
    pub fn p_at(&self, n: usize, w_plus: f64) -> f64 {
        if w_plus <= 0.0 {
            return 0.0;
        }
        self.wealth.interp(&self.steps[n].p_star, w_plus).clamp(0.0, self.p_max)
    }

    /// Fixed withdrawal `q` and constant stock fraction `p`.
    pub fn constant(scn: &Scenario, q: f64, p: f64) -> Result<Self> {
        scn.validate()?;
        // Zero fraction at non-positive wealth, `p` from the first positive node on.
        let wealth = WealthGrid::from_nodes(vec![-1e8, 0.0, 1e-9, 1e8], 1.0)?;
        let step = ControlStep {
            q_star: vec![q; 4],
            p_star: vec![0.0, 0.0, p, p],
            h_vals: vec![0.0; 4],
        };
        Ok(Self {
            wealth,
            steps: vec![step; scn.periods],
            horizon: scn.horizon,
            w_star: 0.0,
            q_min: q,
            q_max: q,
            p_max: p,
        })
    }

    /// Forty per year with half in stocks.
    pub fn bengen(scn: &Scenario) -> Result<Self> {
        Self::constant(scn, 40.0, 0.5)
    }

    /// Share of nodes with `w >= q_max` whose tabulated withdrawal lies
    /// strictly inside `(q_min, q_max)`, over all rebalancing times.
    pub fn interior_withdrawal_fraction(&self) -> f64 {
        let tol = 1e-9 * (self.q_max - self.q_min);
        let (mut inside, mut total) = (0usize, 0usize);
        for st in &self.steps {
            for (&w, &q) in self.wealth.nodes.iter().zip(&st.q_star) {
                if w >= self.q_max {
                    total += 1;
                    inside += (q > self.q_min + tol && q < self.q_max - tol) as usize;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            inside as f64 / total as f64
        }
    }

    /// Checks every tabulated control against the feasibility rules.
    pub fn audit(&self) -> Result<()> {
        for (n, st) in self.steps.iter().enumerate() {
            for (k, &w) in self.wealth.nodes.iter().enumerate() {
                let (lo, hi) = withdrawal_bounds(self.q_min, self.q_max, w);
                let q = st.q_star[k];
                let p = st.p_star[k];
                let p_ok = if w <= 0.0 { p == 0.0 } else { (0.0..=self.p_max).contains(&p) };
                if !(q >= lo && q <= hi) || !p_ok {
                    return Err(Error::ParameterDomain(format!(
                        "infeasible control at t{n}, w={w}: q={q}, p={p}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        for n in [self.steps.len() as u64, self.wealth.len() as u64] {
            out.write_all(&n.to_le_bytes())?;
        }
        for x in [
            self.wealth.w_min(),
            self.wealth.w_max(),
            self.wealth.scale,
            self.horizon,
            self.w_star,
            self.q_min,
            self.q_max,
            self.p_max,
        ] {
            out.write_all(&x.to_le_bytes())?;
        }
        for st in &self.steps {
            for arr in [&self.wealth.nodes, &st.q_star, &st.p_star, &st.h_vals] {
                for x in arr.iter() {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a control table file".into()));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Format(format!("version {version}, expected {VERSION}")));
        }
        let mut b8 = [0u8; 8];
        let mut u64_ = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let m = u64_(&mut input)? as usize;
        let nw = u64_(&mut input)? as usize;
        if m == 0 || nw < 2 || nw > 1 << 28 || m > 1 << 20 {
            return Err(Error::Format(format!("implausible sizes M={m}, N_w={nw}")));
        }
        let f64_ = |r: &mut R| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let mut h = [0.0; 8];
        for x in h.iter_mut() {
            *x = f64_(&mut input)?;
        }
        let [w_min, w_max, scale, horizon, w_star, q_min, q_max, p_max] = h;
        let read_vec = |r: &mut R| -> Result<Vec<f64>> { (0..nw).map(|_| f64_(r)).collect() };
        let mut wealth = None;
        let mut steps = Vec::with_capacity(m);
        for _ in 0..m {
            let nodes = read_vec(&mut input)?;
            match &wealth {
                None => wealth = Some(WealthGrid::from_nodes(nodes, scale)?),
                Some(g) if g.nodes != nodes => {
                    return Err(Error::Format("wealth grid differs between time steps".into()))
                }
                _ => {}
            }
            steps.push(ControlStep {
                q_star: read_vec(&mut input)?,
                p_star: read_vec(&mut input)?,
                h_vals: read_vec(&mut input)?,
            });
        }
        let wealth = wealth.expect("m >= 1");
        if wealth.w_min() != w_min || wealth.w_max() != w_max {
            return Err(Error::Format("wealth grid does not match header range".into()));
        }
        Ok(Self { wealth, steps, horizon, w_star, q_min, q_max, p_max })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "time_index,wealth,q_star,p_star,h")?;
        for (n, st) in self.steps.iter().enumerate() {
            for (k, w) in self.wealth.nodes.iter().enumerate() {
                writeln!(out, "{n},{w},{},{},{}", st.q_star[k], st.p_star[k], st.h_vals[k])?;
            }
        }
        Ok(())
    }
}

/// Assigns `q*(w) + h(w - q*(w))` to every node of both surfaces.
fn apply_withdrawal(
    grids: &GridPair,
    wealth: &WealthGrid,
    q_at: impl Fn(f64) -> f64 + Sync,
    h: &[f64],
    count_q: bool,
    time_index: usize,
) -> ValueSurfacePair {
    let fill = |g: &GridSpec, side: Side| {
        let x2: Vec<f64> = (0..g.n2).map(|k| g.x2(k).exp()).collect();
        let rows: Vec<f64> = (0..g.n1)
            .into_par_iter()
            .flat_map_iter(|i| {
                let s = g.x1(i).exp();
                let x2 = &x2;
                let q_at = &q_at;
                (0..g.n2).map(move |k| {
                    let w = match side {
                        Side::Pos => s + x2[k],
                        Side::Debt => s - x2[k],
                    };
                    let q = q_at(w);
                    let add = if count_q { q } else { 0.0 };
                    add + wealth.interp(h, w - q)
                })
            })
            .collect();
        Array2::from_shape_vec((g.n1, g.n2), rows).expect("grid shape")
    };
    ValueSurfacePair {
        pos: fill(&grids.pos, Side::Pos),
        neg: fill(&grids.neg, Side::Debt),
        time_index,
    }
}

/// Kernel and control diagnostics for one backward solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub grid: usize,
    pub neg_mass: f64,
    pub neg_mass_limit: f64,
    pub wrap_mass: f64,
    pub total_mass_error: f64,
    pub series: usize,
    pub clamps: ClampStats,
    pub advances: usize,
    pub optimizations: usize,
}

impl SolveDiagnostics {
    /// Threshold violations, empty when every diagnostic passes.
    pub fn failures(&self, numerics: &Numerics) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.neg_mass < self.neg_mass_limit) {
            out.push(format!("negative mass {:e} >= {:e}", self.neg_mass, self.neg_mass_limit));
        }
        if !(self.wrap_mass < numerics.max_wrap_mass) {
            out.push(format!("wrap mass {:e} >= {:e}", self.wrap_mass, numerics.max_wrap_mass));
        }
        if self.clamps.fraction() > numerics.max_clamp_fraction {
            out.push(format!(
                "clamped lookups {:.4} > {}",
                self.clamps.fraction(),
                numerics.max_clamp_fraction
            ));
        }
        out
    }
}

/// Result of one backward solve with `W*` held fixed.
#[derive(Debug, Clone)]
pub struct FixedSolve {
    pub w_star: f64,
    /// `ṽ(0, W₀, W*, 0⁻)`.
    pub value: f64,
    pub tables: ControlTables,
    pub diagnostics: SolveDiagnostics,
}

/// PIDE-side split of the objective under fixed controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub ew_per_year: f64,
    pub es: f64,
    pub expected_terminal_wealth: f64,
}

/// One efficient point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub kappa: f64,
    pub w_star: f64,
    pub ew_per_year: f64,
    pub es: f64,
    pub value: f64,
}

/// Optimized `W*` with induced controls.
#[derive(Debug, Clone)]
pub struct OptimizedSolve {
    pub point: FrontierPoint,
    pub solve: FixedSolve,
    pub decomposition: Decomposition,
    /// Every `(grid, W*, value)` evaluated during the search.
    pub history: Vec<(usize, f64, f64)>,
}

/// Backward solver with kernels cached per grid size.
pub struct Solver {
    scenario: Scenario,
    market: MarketParams,
    numerics: Numerics,
    cache: HashMap<usize, Arc<Kernels>>,
}

impl Solver {
    pub fn new(scenario: Scenario, market: MarketParams, numerics: Numerics) -> Result<Self> {
        scenario.validate()?;
        market.validate()?;
        numerics.validate()?;
        Ok(Self {
            scenario,
            market,
            numerics,
            cache: HashMap::new(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn numerics(&self) -> &Numerics {
        &self.numerics
    }

    /// Replaces the scenario; kernels survive unless the period structure
    /// or initial wealth changed.
    pub fn set_scenario(&mut self, scn: Scenario) -> Result<()> {
        scn.validate()?;
        let old = self.scenario;
        if old.horizon != scn.horizon || old.periods != scn.periods || old.w0 != scn.w0 {
            self.cache.clear();
        }
        self.scenario = scn;
        Ok(())
    }

    pub fn kernels(&mut self, grid: usize) -> Result<Arc<Kernels>> {
        if let Some(k) = self.cache.get(&grid) {
            return Ok(k.clone());
        }
        let t = std::time::Instant::now();
        let k = Kernels::build(&self.scenario, &self.market, &self.numerics.with_grid(grid))?;
        debug!("kernels for {grid}^2 built in {:.2?}, series {:?}", t.elapsed(), k.pos.series);
        self.cache.insert(grid, k.clone());
        Ok(k)
    }

    fn wealth_grid(&self, kernels: &Kernels) -> Result<WealthGrid> {
        let n = self.numerics.wealth_multiplier * kernels.grids.pos.n1;
        match self.numerics.wealth_bounds {
            Some([lo, hi]) => WealthGrid::new(lo, hi, n, 1.0),
            None => WealthGrid::for_grids(&kernels.grids, n),
        }
    }

    fn n_controls(&self, grid: usize) -> usize {
        self.numerics.with_grid(grid).n_controls()
    }

    /// Terminal condition, then `M` rounds of (advance, optimize).
    pub fn solve_fixed_wstar(&mut self, grid: usize, w_star: f64) -> Result<FixedSolve> {
        if !w_star.is_finite() {
            return Err(Error::NonFinite("W*".into()));
        }
        let k = self.kernels(grid)?;
        let scn = self.scenario;
        let wealth = self.wealth_grid(&k)?;
        let n_c = self.n_controls(grid);
        let m = scn.periods;
        let mut diag = SolveDiagnostics {
            grid,
            neg_mass: k.pos.neg_mass.max(k.neg.neg_mass),
            neg_mass_limit: self.numerics.delta * scn.dt() / scn.horizon,
            wrap_mass: k.pos.wrap_mass.max(k.neg.wrap_mass),
            total_mass_error: (k.pos.total_mass - 1.0).abs().max((k.neg.total_mass - 1.0).abs()),
            series: k.pos.series.0.max(k.neg.series.0),
            ..Default::default()
        };
        let mut v = ValueSurfacePair::terminal(&k.grids, w_star, &scn);
        let mut steps = Vec::with_capacity(m);
        let mut value = f64::NAN;
        for n in (0..m).rev() {
            v = step_between_rebalances(&v, &k)?;
            diag.advances += 1;
            let alloc = optimize_allocation(&v, &k.grids, &wealth, scn.p_max, n_c);
            let q_star = optimize_withdrawal(&alloc.h_vals, &wealth, scn.q_min, scn.q_max, n_c);
            diag.optimizations += 1;
            diag.clamps = diag.clamps.merge(alloc.clamps);
            let q_at = |w: f64| {
                let (lo, hi) = withdrawal_bounds(scn.q_min, scn.q_max, w);
                wealth.interp(&q_star, w).clamp(lo, hi)
            };
            if n > 0 {
                v = apply_withdrawal(&k.grids, &wealth, q_at, &alloc.h_vals, true, n);
            } else {
                let q0 = q_at(scn.w0);
                value = q0 + wealth.interp(&alloc.h_vals, scn.w0 - q0);
            }
            steps.push(ControlStep {
                q_star,
                p_star: alloc.p_star,
                h_vals: alloc.h_vals,
            });
        }
        steps.reverse();
        if !value.is_finite() {
            return Err(Error::NonFinite("value at initial wealth".into()));
        }
        if diag.clamps.fraction() > self.numerics.max_clamp_fraction {
            warn!(
                "{:.2}% of interpolation queries clamped at the grid top",
                100.0 * diag.clamps.fraction()
            );
        }
        Ok(FixedSolve {
            w_star,
            value,
            tables: ControlTables {
                wealth,
                steps,
                horizon: scn.horizon,
                w_star,
                q_min: scn.q_min,
                q_max: scn.q_max,
                p_max: scn.p_max,
            },
            diagnostics: diag,
        })
    }

    /// Expected value at `(0, W₀)` of `Σ q` (if `count_q`) plus
    /// `terminal(W_T)` under fixed controls.
    pub fn evaluate_controls<F: Fn(f64) -> f64>(
        &mut self,
        grid: usize,
        tables: &ControlTables,
        terminal: F,
        count_q: bool,
    ) -> Result<f64> {
        let k = self.kernels(grid)?;
        let scn = self.scenario;
        if tables.periods() != scn.periods {
            return Err(Error::HorizonMismatch {
                expected: scn.periods,
                found: tables.periods(),
            });
        }
        let mut v = ValueSurfacePair::from_wealth_fn(&k.grids, scn.periods, terminal);
        for n in (0..scn.periods).rev() {
            v = step_between_rebalances(&v, &k)?;
            let h = retained_value(&v, &k.grids, &tables.wealth, &tables.steps[n].p_star);
            if n > 0 {
                v = apply_withdrawal(&k.grids, &tables.wealth, |w| tables.q_at(n, w), &h, count_q, n);
            } else {
                let q0 = tables.q_at(0, scn.w0);
                let add = if count_q { q0 } else { 0.0 };
                return Ok(add + tables.wealth.interp(&h, scn.w0 - q0));
            }
        }
        unreachable!("periods >= 1")
    }

    /// Expected withdrawals, expected shortfall and expected terminal
    /// wealth implied by the stored controls.
    pub fn decompose(&mut self, grid: usize, tables: &ControlTables) -> Result<Decomposition> {
        let scn = self.scenario;
        let w_star = tables.w_star;
        let sum_q = self.evaluate_controls(grid, tables, |_| 0.0, true)?;
        let es = self.evaluate_controls(grid, tables, |w| w_star + (w - w_star).min(0.0) / scn.alpha, false)?;
        let wt = self.evaluate_controls(grid, tables, |w| w, false)?;
        Ok(Decomposition {
            ew_per_year: sum_q / scn.periods as f64,
            es,
            expected_terminal_wealth: wt,
        })
    }

    /// Coarse scan of `W*` on the coarsest grid, then golden-section
    /// refinement on each doubled grid up to the target grid.
    pub fn optimize_wstar(&mut self) -> Result<OptimizedSolve> {
        let scn = self.scenario;
        let nm = self.numerics.clone();
        let target = nm.grid;
        let mut history = Vec::new();
        let best = if scn.kappa == 0.0 {
            let s = self.solve_fixed_wstar(target, 0.0)?;
            history.push((target, 0.0, s.value));
            s
        } else {
            let coarse = nm.wstar_coarse_grid.min(target);
            let mut levels = vec![coarse];
            while *levels.last().unwrap() < target {
                levels.push(levels.last().unwrap() * 2);
            }
            let (lo, hi) = (nm.wstar_lo * scn.w0, nm.wstar_hi * scn.w0);
            let n = nm.wstar_candidates;
            let step = (hi - lo) / (n - 1) as f64;
            let mut center = (lo, f64::NEG_INFINITY);
            for j in 0..n {
                let w = lo + step * j as f64;
                let val = self.solve_fixed_wstar(coarse, w)?.value;
                history.push((coarse, w, val));
                if val > center.1 {
                    center = (w, val);
                }
            }
            info!("coarse W* scan on {coarse}^2: best {:.3} (value {:.4})", center.0, center.1);
            let refine_levels = if levels.len() > 1 { &levels[1..] } else { &levels[..] };
            let mut last = None;
            for &g in refine_levels {
                let s = self.refine_level(g, center.0, step, nm.wstar_tol * scn.w0.abs().max(1.0), &mut history)?;
                center = (s.w_star, s.value);
                last = Some(s);
            }
            last.expect("at least one refinement level")
        };
        let decomposition = self.decompose(target, &best.tables)?;
        let point = FrontierPoint {
            kappa: scn.kappa,
            w_star: best.w_star,
            ew_per_year: decomposition.ew_per_year,
            es: decomposition.es,
            value: best.value,
        };
        Ok(OptimizedSolve {
            point,
            solve: best,
            decomposition,
            history,
        })
    }

    fn refine_level(
        &mut self,
        grid: usize,
        center: f64,
        half_width: f64,
        tol: f64,
        history: &mut Vec<(usize, f64, f64)>,
    ) -> Result<FixedSolve> {
        let mut best: Option<FixedSolve> = None;
        let mut eval = |this: &mut Self, w: f64, best: &mut Option<FixedSolve>| -> Result<f64> {
            let s = this.solve_fixed_wstar(grid, w)?;
            let v = s.value;
            history.push((grid, w, v));
            if best.as_ref().is_none_or(|b| v > b.value) {
                *best = Some(s);
            }
            Ok(v)
        };
        let v_center = eval(self, center, &mut best)?;
        let (a, b) = (center - half_width, center + half_width);
        let (_, fx) = golden_section_max(|w| eval(self, w, &mut best), a, b, tol)?;
        if fx < v_center {
            warn!("W* refinement on {grid}^2 worsened the centre value; falling back to a scan");
            for j in 0..9 {
                let w = a + (b - a) * j as f64 / 8.0;
                eval(self, w, &mut best)?;
            }
        }
        let best = best.expect("evaluated at least once");
        info!("W* on {grid}^2: {:.4} (value {:.6})", best.w_star, best.value);
        Ok(best)
    }
}

/// Golden-section search for the maximum of `f` on `[a, b]`.
pub fn golden_section_max<F: FnMut(f64) -> Result<f64>>(mut f: F, a: f64, b: f64, tol: f64) -> Result<(f64, f64)> {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc >= fd { (c, fc) } else { (d, fd) })
}

/// One `W*` optimization per `κ`, kernels shared; sorted by ES.
pub fn sweep_frontier(
    scn: &Scenario,
    mkt: &MarketParams,
    numerics: &Numerics,
    kappas: &[f64],
) -> Result<Vec<FrontierPoint>> {
    if kappas.is_empty() {
        return Err(Error::ParameterDomain("empty kappa list".into()));
    }
    let mut solver = Solver::new(*scn, mkt.clone(), numerics.clone())?;
    let mut out = Vec::with_capacity(kappas.len());
    for &kappa in kappas {
        solver.set_scenario(Scenario { kappa, ..*scn })?;
        out.push(solver.optimize_wstar()?.point);
    }
    out.sort_by(|x, y| x.es.total_cmp(&y.es));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::build_grids;
    use crate::market::KouAssetParams;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent bilinear oracle: clamps to the node range and finds the
    /// cell by linear scan over node coordinates.
    fn oracle_bilinear(v: &Array2<f64>, g: &GridSpec, z1: f64, z2: f64) -> f64 {
        let cell = |z: f64, n: usize, node: &dyn Fn(usize) -> f64| {
            let z = z.clamp(node(0), node(n - 1));
            let mut i = 0;
            while i + 2 < n && node(i + 1) <= z {
                i += 1;
            }
            (i, (z - node(i)) / (node(i + 1) - node(i)))
        };
        let (i, t) = cell(z1, g.n1, &|i| g.x1(i));
        let (k, u) = cell(z2, g.n2, &|k| g.x2(k));
        (1.0 - t) * (1.0 - u) * v[(i, k)]
            + t * (1.0 - u) * v[(i + 1, k)]
            + (1.0 - t) * u * v[(i, k + 1)]
            + t * u * v[(i + 1, k + 1)]
    }

    fn desk_grids(n: usize) -> GridPair {
        let a = 100f64.ln();
        let g = GridSpec::new(n, n, (a - 7.5, a + 10.0), (a - 7.5, a + 10.0), (a, a)).unwrap();
        GridPair { pos: g, neg: g }
    }

    fn random_pair(grids: &GridPair, seed: u64) -> ValueSurfacePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n1, n2) = (grids.pos.n1, grids.pos.n2);
        ValueSurfacePair {
            pos: Array2::from_shape_fn((n1, n2), |_| rng.random_range(-10.0..10.0)),
            neg: Array2::from_shape_fn((n1, n2), |_| rng.random_range(-10.0..10.0)),
            time_index: 0,
        }
    }

    #[test]
    fn wealth_grid_is_uniform_in_signed_log() {
        let g = WealthGrid::new(-5000.0, 20000.0, 257, 1.0).unwrap();
        let y: Vec<f64> = g.nodes.iter().map(|&w| w.signum() * w.abs().ln_1p()).collect();
        let dy = y[1] - y[0];
        for p in y.windows(2) {
            assert_abs_diff_eq!(p[1] - p[0], dy, epsilon = 1e-9);
        }
        assert_eq!(g.w_min(), -5000.0);
        assert_eq!(g.w_max(), 20000.0);
        assert!(g.nodes.iter().any(|&w| w < 0.0));
    }

    #[test]
    fn wealth_interpolation_is_exact_for_linear_data() {
        let g = WealthGrid::new(-300.0, 5000.0, 64, 1.0).unwrap();
        let vals: Vec<f64> = g.nodes.iter().map(|w| 3.0 - 0.25 * w).collect();
        for w in [-299.0, -1.0, 0.0, 0.3, 45.0, 1000.0, 4999.0] {
            assert_abs_diff_eq!(g.interp(&vals, w), 3.0 - 0.25 * w, epsilon = 1e-9);
        }
        for (k, &w) in g.nodes.iter().enumerate() {
            assert_eq!(g.interp(&vals, w), vals[k]);
        }
        assert_eq!(g.interp(&vals, -1e9), vals[0]);
        assert_eq!(g.interp(&vals, 1e9), vals[63]);
        assert!(WealthGrid::from_nodes(vec![1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn withdrawal_bounds_follow_feasibility_rules() {
        assert_eq!(withdrawal_bounds(30.0, 60.0, 100.0), (30.0, 60.0));
        assert_eq!(withdrawal_bounds(30.0, 60.0, 60.0), (30.0, 60.0));
        assert_eq!(withdrawal_bounds(30.0, 60.0, 45.0), (30.0, 45.0));
        assert_eq!(withdrawal_bounds(30.0, 60.0, 10.0), (30.0, 30.0));
        assert_eq!(withdrawal_bounds(30.0, 60.0, -50.0), (30.0, 30.0));
    }

    #[test]
    fn bilinear_matches_oracle() {
        let grids = desk_grids(8);
        let v = random_pair(&grids, 3);
        let g = &grids.pos;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let z1 = rng.random_range(g.x1_min - 1.0..g.x1_max + 1.0);
            let z2 = rng.random_range(g.x2_min - 1.0..g.x2_max + 1.0);
            let (a, _) = bilinear(&v.pos, g, z1, z2);
            assert_abs_diff_eq!(a, oracle_bilinear(&v.pos, g, z1, z2), epsilon = 1e-12);
        }
        let (_, clamped) = bilinear(&v.pos, g, g.x1_max + 0.5, g.x2_min);
        assert!(clamped);
        let (_, clamped) = bilinear(&v.pos, g, f64::NEG_INFINITY, f64::NEG_INFINITY);
        assert!(!clamped);
    }

    #[test]
    fn zero_pmax_keeps_everything_in_bonds() {
        let grids = desk_grids(16);
        let v = random_pair(&grids, 5);
        let wealth = WealthGrid::new(-2000.0, 5000.0, 64, 1.0).unwrap();
        let a = optimize_allocation(&v, &grids, &wealth, 0.0, 7);
        for (k, &w) in wealth.nodes.iter().enumerate() {
            assert_eq!(a.p_star[k], 0.0);
            let (surf, z2) = if w > 0.0 { (&v.pos, w.ln()) } else { (&v.neg, (-w).ln()) };
            let oracle = oracle_bilinear(surf, &grids.pos, grids.pos.x1_min, z2);
            assert_abs_diff_eq!(a.h_vals[k], oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn ties_go_to_the_smallest_fraction() {
        let grids = desk_grids(16);
        let v = ValueSurfacePair::from_wealth_fn(&grids, 0, |_| 7.0);
        let wealth = WealthGrid::new(1.0, 5000.0, 32, 1.0).unwrap();
        let a = optimize_allocation(&v, &grids, &wealth, 1.3, 9);
        assert!(a.p_star.iter().all(|&p| p == 0.0));
        // A wealth-only surface gives h close to w for every fraction.
        let grids = desk_grids(64);
        let v = ValueSurfacePair::from_wealth_fn(&grids, 0, |w| w);
        let a = optimize_allocation(&v, &grids, &wealth, 1.0, 9);
        for (k, &w) in wealth.nodes.iter().enumerate().filter(|(_, w)| **w > 10.0 && **w < 1e4) {
            assert!((a.h_vals[k] - w).abs() < 0.05 * w, "h({w}) = {}", a.h_vals[k]);
        }
    }

    #[test]
    fn allocation_matches_brute_force_on_desk_surface() {
        let grids = desk_grids(8);
        let v = random_pair(&grids, 11);
        let wealth = WealthGrid::new(-3000.0, 50000.0, 40, 1.0).unwrap();
        let p_max = 1.5;
        let a = optimize_allocation(&v, &grids, &wealth, p_max, 5);
        for (k, &w) in wealth.nodes.iter().enumerate() {
            let mut best = (0.0, f64::NEG_INFINITY);
            if w <= 0.0 {
                best = (0.0, oracle_bilinear(&v.neg, &grids.neg, f64::NEG_INFINITY, (-w).ln()));
            } else {
                for j in 0..5 {
                    let p = p_max * j as f64 / 4.0;
                    let val = if p <= 1.0 {
                        oracle_bilinear(&v.pos, &grids.pos, (w * p).ln(), (w * (1.0 - p)).ln())
                    } else {
                        oracle_bilinear(&v.neg, &grids.neg, (w * p).ln(), (w * (p - 1.0)).ln())
                    };
                    if val > best.1 {
                        best = (p, val);
                    }
                }
            }
            assert_eq!(a.p_star[k], best.0, "w = {w}");
            assert_abs_diff_eq!(a.h_vals[k], best.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_retained_value_gives_bang_bang_withdrawals() {
        let wealth = WealthGrid::new(-500.0, 5000.0, 200, 1.0).unwrap();
        let half: Vec<f64> = wealth.nodes.iter().map(|w| 0.5 * w).collect();
        let double: Vec<f64> = wealth.nodes.iter().map(|w| 2.0 * w).collect();
        let q_hi = optimize_withdrawal(&half, &wealth, 30.0, 60.0, 11);
        let q_lo = optimize_withdrawal(&double, &wealth, 30.0, 60.0, 11);
        for (k, &w) in wealth.nodes.iter().enumerate() {
            let (_, hi) = withdrawal_bounds(30.0, 60.0, w);
            assert_abs_diff_eq!(q_hi[k], hi, epsilon = 1e-12);
            assert_eq!(q_lo[k], 30.0);
        }
    }

    #[test]
    fn restricted_withdrawal_set_matches_enumeration() {
        let wealth = WealthGrid::new(-500.0, 5000.0, 300, 1.0).unwrap();
        let h: Vec<f64> = wealth.nodes.iter().map(|w| -(w - 7.0).powi(2) / 40.0).collect();
        let q = optimize_withdrawal(&h, &wealth, 30.0, 60.0, 5);
        let k = wealth.locate(45.0).0;
        let w = wealth.nodes[k];
        assert!(w > 30.0 && w < 60.0);
        let mut best = (0.0, f64::NEG_INFINITY);
        for j in 0..5 {
            let c = 30.0 + (w - 30.0) * j as f64 / 4.0;
            let val = c + wealth.interp(&h, w - c);
            if val > best.1 {
                best = (c, val);
            }
        }
        assert_eq!(q[k], best.0);
        assert!(q[k] <= w);
    }

    #[test]
    fn two_stage_search_matches_joint_brute_force() {
        let grids = desk_grids(16);
        let v = random_pair(&grids, 21);
        // Uniform nodes with spacing 5 so every w - q lands on a node.
        let nodes: Vec<f64> = (0..121).map(|k| -100.0 + 5.0 * k as f64).collect();
        let wealth = WealthGrid::from_nodes(nodes, 1.0).unwrap();
        let (q_min, q_max, p_max, n_p, n_q) = (30.0, 60.0, 1.2, 7, 7);
        let a = optimize_allocation(&v, &grids, &wealth, p_max, n_p);
        let q = optimize_withdrawal(&a.h_vals, &wealth, q_min, q_max, n_q);
        for (k, &w) in wealth.nodes.iter().enumerate() {
            if (w > q_min && w < q_max) || w - q_max < wealth.w_min() {
                continue;
            }
            let (lo, hi) = withdrawal_bounds(q_min, q_max, w);
            let mut joint = (0.0, f64::NEG_INFINITY);
            for qi in candidates(lo, hi, n_q) {
                let wp = w - qi;
                for pj in candidates(0.0, p_max, n_p) {
                    let p = if wp <= 0.0 { 0.0 } else { pj };
                    let val = qi + allocation_value(&v, &grids, wp, p).0;
                    if val > joint.1 {
                        joint = (qi, val);
                    }
                }
            }
            let two_stage = q[k] + wealth.interp(&a.h_vals, w - q[k]);
            assert_eq!(q[k], joint.0, "w = {w}");
            assert_eq!(two_stage, joint.1, "w = {w}");
        }
    }

    #[test]
    fn golden_section_finds_quadratic_peak() {
        let (x, fx) = golden_section_max(|w| Ok(-(w - 100.0) * (w - 100.0)), -1000.0, 3000.0, 1e-3).unwrap();
        assert!((x - 100.0).abs() < 1e-3);
        assert!(fx > -1e-6);
    }

    fn sample_tables() -> ControlTables {
        let wealth = WealthGrid::new(-100.0, 1e5, 33, 1.0).unwrap();
        let steps = (0..3)
            .map(|n| ControlStep {
                q_star: wealth.nodes.iter().map(|&w| withdrawal_bounds(30.0, 60.0, w).1).collect(),
                p_star: wealth.nodes.iter().map(|&w| if w > 0.0 { 0.1 * n as f64 } else { 0.0 }).collect(),
                h_vals: wealth.nodes.iter().map(|w| w.sin()).collect(),
            })
            .collect();
        ControlTables {
            wealth,
            steps,
            horizon: 3.0,
            w_star: 123.456,
            q_min: 30.0,
            q_max: 60.0,
            p_max: 1.0,
        }
    }

    #[test]
    fn tables_round_trip_bit_exactly() {
        let t = sample_tables();
        let mut bytes = Vec::new();
        t.write_binary(&mut bytes).unwrap();
        let back = ControlTables::read_binary(bytes.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(ControlTables::read_binary(bad.as_slice()), Err(Error::Format(_))));
        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("time_index,wealth,q_star,p_star,h\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 33);
        t.audit().unwrap();
    }

    #[test]
    fn table_lookups_are_feasible() {
        let t = sample_tables();
        for w in [-50.0, 0.0, 10.0, 31.0, 45.0, 59.9, 60.0, 1000.0] {
            let (lo, hi) = withdrawal_bounds(30.0, 60.0, w);
            let q = t.q_at(1, w);
            assert!(q >= lo && q <= hi);
            let p = t.p_at(2, w);
            if w <= 0.0 {
                assert_eq!(p, 0.0);
            } else {
                assert!((0.0..=1.0).contains(&p));
            }
        }
        let b = ControlTables::bengen(&Scenario::default()).unwrap();
        assert_eq!(b.q_at(0, 1e4), 40.0);
        assert_eq!(b.q_at(5, 10.0), 40.0);
        assert_eq!(b.p_at(3, 500.0), 0.5);
        assert_eq!(b.p_at(3, -5.0), 0.0);
    }

    /// Driftless, jump-free bond with small volatility. A zero-volatility
    /// kernel is a point mass, which a truncated series cannot resolve.
    fn quiet_bond_market() -> MarketParams {
        let mut m = MarketParams::fitted();
        m.bond = KouAssetParams {
            mu: 0.0,
            sigma: 0.02,
            lambda: 0.0,
            ..m.bond
        };
        m
    }

    /// One period, all wealth in bonds, grid anchored so that `anchor` is a
    /// node of the bond axis.
    fn one_period(q_min: f64, q_max: f64, epsilon: f64, anchor: f64) -> (Scenario, Numerics) {
        let scn = Scenario {
            horizon: 1.0,
            periods: 1,
            q_min,
            q_max,
            p_max: 0.0,
            epsilon,
            ..Scenario::default()
        };
        let numerics = Numerics {
            grid: 128,
            anchor_wealth: anchor,
            x_min_offset: -10.0,
            x_max_offset: 6.0,
            // The bond kernel is a few cells wide; its truncation ripple
            // shrinks with the monotonicity tolerance.
            delta: 1e-12,
            max_oversample: 64,
            ..Numerics::default()
        };
        (scn, numerics)
    }

    #[test]
    fn forced_withdrawal_one_period_chain() {
        // W* far below the remaining wealth: the payoff is linear in b on the
        // support and E[b_T] = b for a driftless bond.
        let (scn, numerics) = one_period(40.0, 40.0, -1e-4, 960.0);
        let mut s = Solver::new(scn, quiet_bond_market(), numerics).unwrap();
        let r = s.solve_fixed_wstar(128, 500.0).unwrap();
        let oracle = 40.0 + crate::engine::terminal_value(0.0, 960.0, 500.0, &scn);
        assert!((r.value - oracle).abs() < 1e-3, "{} vs {oracle}", r.value);
        assert_eq!(r.diagnostics.advances, 1);
        assert_eq!(r.diagnostics.optimizations, 1);
    }

    #[test]
    fn free_withdrawal_one_period_matches_enumeration() {
        // Negative epsilon favours withdrawing; a large positive one favours
        // keeping wealth invested.
        for (epsilon, anchor, q_expected, tol) in [(-1e-4, 940.0, 60.0, 1e-3), (2.0, 970.0, 30.0, 5.0)] {
            let (scn, numerics) = one_period(30.0, 60.0, epsilon, anchor);
            let n_q = numerics.n_controls();
            let mut s = Solver::new(scn, quiet_bond_market(), numerics).unwrap();
            let r = s.solve_fixed_wstar(128, 500.0).unwrap();
            let (q_best, oracle) = (0..n_q)
                .map(|j| 30.0 + 30.0 * j as f64 / (n_q - 1) as f64)
                .map(|q| (q, q + crate::engine::terminal_value(0.0, 1000.0 - q, 500.0, &scn)))
                .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            assert_eq!(q_best, q_expected);
            assert_eq!(r.tables.q_at(0, 1000.0), q_expected);
            // Off-node wealth is interpolated in log coordinates.
            assert!((r.value - oracle).abs() < tol, "eps={epsilon}: {} vs {oracle}", r.value);
        }
    }

    #[test]
    fn coarse_solve_is_feasible_and_decomposes() {
        let scn = Scenario {
            periods: 5,
            horizon: 5.0,
            ..Scenario::default()
        };
        let mut s = Solver::new(scn, MarketParams::fitted(), Numerics::default().with_grid(32)).unwrap();
        let r = s.solve_fixed_wstar(32, 400.0).unwrap();
        r.tables.audit().unwrap();
        assert_eq!(r.tables.periods(), 5);
        assert_eq!(r.diagnostics.advances, 5);
        let d = s.decompose(32, &r.tables).unwrap();
        // The objective is linear in the terminal payoff under fixed controls.
        let recombined = 5.0 * d.ew_per_year + scn.kappa * d.es + scn.epsilon * d.expected_terminal_wealth;
        assert!((recombined - r.value).abs() < 1e-6 * r.value.abs(), "{recombined} vs {}", r.value);
        assert!(d.ew_per_year >= scn.q_min - 1e-9 && d.ew_per_year <= scn.q_max + 1e-9);
        assert!(d.es <= 400.0 + 1e-6);
    }

    #[test]
    fn zero_kappa_reports_zero_wstar() {
        let scn = Scenario {
            periods: 3,
            horizon: 3.0,
            kappa: 0.0,
            ..Scenario::default()
        };
        let mut s = Solver::new(scn, MarketParams::fitted(), Numerics::default().with_grid(16)).unwrap();
        let r = s.optimize_wstar().unwrap();
        assert_eq!(r.point.w_star, 0.0);
        assert_eq!(r.history.len(), 1);
    }

    #[test]
    fn grids_for_wealth_cover_both_domains() {
        let g = build_grids(&Scenario::default(), &MarketParams::fitted(), &Numerics::default().with_grid(64)).unwrap();
        let w = WealthGrid::for_grids(&g, 256).unwrap();
        assert!(w.w_min() < -1e5);
        assert!(w.w_max() > 1e5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn withdrawals_always_feasible(seed in 0u64..1000, q_min in 0.0f64..50.0, span in 0.0f64..40.0) {
            let q_max = q_min + span;
            let wealth = WealthGrid::new(-200.0, 2000.0, 80, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h: Vec<f64> = wealth.nodes.iter().map(|_| rng.random_range(-50.0..50.0)).collect();
            let q = optimize_withdrawal(&h, &wealth, q_min, q_max, 6);
            for (k, &w) in wealth.nodes.iter().enumerate() {
                let (lo, hi) = withdrawal_bounds(q_min, q_max, w);
                prop_assert!(q[k] >= lo && q[k] <= hi);
            }
        }
    }
}
