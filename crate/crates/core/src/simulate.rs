//! Forward Monte Carlo evaluation of stored controls.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{withdrawal_bounds, ControlTables};
use crate::engine::Scenario;
use crate::error::{Error, Result};
use crate::market::{KouAssetParams, MarketParams};

/// Paths per work unit; fixed so results do not depend on thread count.
const CHUNK: usize = 1024;

/// Per-path generator: one stream per path index under a common seed.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Log-return over `dt` given the diffusion shock `z`.
fn log_return<R: Rng + ?Sized>(a: &KouAssetParams, dt: f64, extra_drift: f64, z: f64, rng: &mut R) -> Result<f64> {
    let gamma = a.mean_jump_multiplier()?;
    let mut x = (a.mu + extra_drift - a.lambda * gamma - 0.5 * a.sigma * a.sigma) * dt + a.sigma * dt.sqrt() * z;
    if a.lambda > 0.0 {
        let n = Poisson::new(a.lambda * dt)
            .map_err(|e| Error::ParameterDomain(e.to_string()))?
            .sample(rng) as u64;
        for _ in 0..n {
            x += sample_log_jump(a, rng)?;
        }
    }
    Ok(x)
}

/// One draw of `log ξ`: `Exp(η₁)` with probability `u`, else `-Exp(η₂)`.
pub fn sample_log_jump<R: Rng + ?Sized>(a: &KouAssetParams, rng: &mut R) -> Result<f64> {
    let bad = |e: rand_distr::ExpError| Error::ParameterDomain(e.to_string());
    Ok(if rng.random::<f64>() < a.u_up {
        Exp::new(a.eta1).map_err(bad)?.sample(rng)
    } else {
        -Exp::new(a.eta2).map_err(bad)?.sample(rng)
    })
}

/// One gross return for a single asset; `borrow` adds `spread` to the drift.
pub fn sample_period_return<R: Rng + ?Sized>(
    a: &KouAssetParams,
    dt: f64,
    rng: &mut R,
    borrow: bool,
    spread: f64,
) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::ParameterDomain("dt must be positive".into()));
    }
    let z: f64 = rng.sample(StandardNormal);
    Ok(log_return(a, dt, if borrow { spread } else { 0.0 }, z, rng)?.exp())
}

/// Correlated stock and bond gross returns (bond without spread).
pub fn sample_return_pair<R: Rng + ?Sized>(mkt: &MarketParams, dt: f64, rng: &mut R) -> Result<(f64, f64)> {
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let rho = mkt.rho_sb;
    let zb = rho * z1 + (1.0 - rho * rho).sqrt() * z2;
    let rs = log_return(&mkt.stock, dt, 0.0, z1, rng)?.exp();
    let rb = log_return(&mkt.bond, dt, 0.0, zb, rng)?.exp();
    Ok((rs, rb))
}

/// One rebalancing decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub w_minus: f64,
    pub q: f64,
    pub w_plus: f64,
    pub p: f64,
}

/// State along a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathState {
    pub s: f64,
    pub b: f64,
    pub w: f64,
    /// Set once wealth has gone non-positive and trading stopped.
    pub insolvent: bool,
}

/// Applies the controls along one path of annual gross returns
/// `(stock, bond)`. Negative bond balances earn the bond return times
/// `borrow_factor`. Returns terminal wealth.
pub fn run_path(
    controls: &ControlTables,
    w0: f64,
    returns: &[(f64, f64)],
    borrow_factor: f64,
    mut log: impl FnMut(usize, &Decision),
) -> f64 {
    let mut st = PathState {
        s: 0.0,
        b: w0,
        w: w0,
        insolvent: w0 <= 0.0,
    };
    for (n, &(rs, rb)) in returns.iter().enumerate() {
        let q = controls.q_at(n, st.w);
        let w_plus = st.w - q;
        let p = controls.p_at(n, w_plus);
        log(n, &Decision { w_minus: st.w, q, w_plus, p });
        if w_plus <= 0.0 {
            st.insolvent = true;
            st.s = 0.0;
            st.b = w_plus;
        } else {
            st.s = p * w_plus;
            st.b = (1.0 - p) * w_plus;
        }
        let gb = if st.b < 0.0 { rb * borrow_factor } else { rb };
        st.s *= rs;
        st.b *= gb;
        st.w = st.s + st.b;
    }
    st.w
}

/// Wealth buckets for the heat map; values outside the range fall into
/// the edge buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapSpec {
    pub w_lo: f64,
    pub w_hi: f64,
    pub buckets: usize,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        Self {
            w_lo: 0.0,
            w_hi: 3000.0,
            buckets: 60,
        }
    }
}

impl HeatmapSpec {
    fn bucket(&self, w: f64) -> usize {
        let f = (w - self.w_lo) / (self.w_hi - self.w_lo) * self.buckets as f64;
        (f.floor().max(0.0) as usize).min(self.buckets - 1)
    }

    pub fn lower_edge(&self, k: usize) -> f64 {
        self.w_lo + (self.w_hi - self.w_lo) * k as f64 / self.buckets as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub count: u64,
    pub sum_p: f64,
    pub sum_q_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub n_paths: usize,
    pub seed: u64,
    pub heatmap: HeatmapSpec,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            seed: 42,
            heatmap: HeatmapSpec::default(),
        }
    }
}

/// 5th, 50th and 95th percentiles.
pub type Fan = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct SimStats {
    pub n_paths: usize,
    pub seed: u64,
    pub alpha: f64,
    pub ew_per_year: f64,
    pub es: f64,
    pub var: f64,
    pub mean_terminal: f64,
    /// Wealth before withdrawal at `t_0 .. t_{M-1}`, then terminal wealth.
    pub wealth_fan: Vec<Fan>,
    pub fraction_fan: Vec<Fan>,
    pub withdrawal_fan: Vec<Fan>,
    pub heatmap_spec: HeatmapSpec,
    /// `[year][bucket]`, bucketed on wealth before withdrawal.
    pub heatmap: Vec<Vec<HeatCell>>,
    /// Share of unconstrained decisions (`w >= q_max`) with `q` strictly
    /// inside `(q_min, q_max)`.
    pub interior_withdrawal_fraction: f64,
    /// Decisions violating the feasibility rules; zero unless broken.
    pub infeasible_decisions: u64,
}

/// `(ES, VaR)` at level `alpha`: VaR is the `⌈αN⌉`-th smallest outcome and
/// ES the mean of the `⌈αN⌉` smallest.
pub fn compute_es(terminal: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if terminal.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::ParameterDomain(format!("alpha = {alpha} outside (0, 1]")));
    }
    let n = terminal.len();
    if (n as f64) * alpha < 1.0 - 1e-12 {
        return Err(Error::ParameterDomain(format!("need at least 1/alpha samples, got {n}")));
    }
    let k = ((alpha * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut v = terminal.to_vec();
    v.select_nth_unstable_by(k - 1, f64::total_cmp);
    let var = v[k - 1];
    let es = v[..k].iter().sum::<f64>() / k as f64;
    Ok((es, var))
}

fn percentile(sorted: &[f32], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let (i, t) = (h.floor() as usize, h - h.floor());
    let a = sorted[i] as f64;
    let b = sorted[(i + 1).min(sorted.len() - 1)] as f64;
    a + t * (b - a)
}

fn fans(values: &mut [f32], n_paths: usize, years: usize) -> Vec<Fan> {
    (0..years)
        .map(|y| {
            let col = &mut values[y * n_paths..(y + 1) * n_paths];
            col.sort_unstable_by(f32::total_cmp);
            [percentile(col, 0.05), percentile(col, 0.5), percentile(col, 0.95)]
        })
        .collect()
}

struct ChunkOut {
    terminal: Vec<f64>,
    sum_q: f64,
    heat: Vec<Vec<HeatCell>>,
    interior: (u64, u64),
    infeasible: u64,
}

/// Evaluates the controls over `n_paths` paths whose annual gross returns
/// are produced by `draw(rng, out)`. Shared by the synthetic and the
/// historical market.
pub fn evaluate_paths<F>(
    controls: &ControlTables,
    scn: &Scenario,
    settings: &SimSettings,
    borrow_factor: f64,
    draw: F,
) -> Result<SimStats>
where
    F: Fn(&mut ChaCha8Rng, &mut [(f64, f64)]) -> Result<()> + Sync,
{
    let m = scn.periods;
    if controls.periods() != m {
        return Err(Error::HorizonMismatch {
            expected: m,
            found: controls.periods(),
        });
    }
    let n_paths = settings.n_paths;
    if n_paths == 0 {
        return Err(Error::EmptySample);
    }
    let hs = settings.heatmap;
    if hs.buckets == 0 || !(hs.w_hi > hs.w_lo) {
        return Err(Error::ParameterDomain("invalid heat-map range".into()));
    }
    let (qmin, qmax) = (controls.q_min, controls.q_max);
    let q_span = qmax - qmin;
    // Path-major f32 logs, transposed to year-major when fans are built.
    let mut wealth = vec![0f32; (m + 1) * n_paths];
    let mut fracs = vec![0f32; m * n_paths];
    let mut draws = vec![0f32; m * n_paths];

    let outs: Vec<ChunkOut> = wealth
        .par_chunks_mut(CHUNK * (m + 1))
        .zip(fracs.par_chunks_mut(CHUNK * m))
        .zip(draws.par_chunks_mut(CHUNK * m))
        .enumerate()
        .map(|(c, ((wl, pl), ql))| -> Result<ChunkOut> {
            let first = c * CHUNK;
            let count = wl.len() / (m + 1);
            let mut out = ChunkOut {
                terminal: Vec::with_capacity(count),
                sum_q: 0.0,
                heat: vec![vec![HeatCell::default(); hs.buckets]; m],
                interior: (0, 0),
                infeasible: 0,
            };
            let mut rets = vec![(1.0, 1.0); m];
            for j in 0..count {
                let mut rng = path_rng(settings.seed, (first + j) as u64);
                draw(&mut rng, &mut rets)?;
                let wt = run_path(controls, scn.w0, &rets, borrow_factor, |n, d| {
                    wl[j * (m + 1) + n] = d.w_minus as f32;
                    pl[j * m + n] = d.p as f32;
                    ql[j * m + n] = d.q as f32;
                    out.sum_q += d.q;
                    let (lo, hi) = withdrawal_bounds(qmin, qmax, d.w_minus);
                    let p_ok = if d.w_plus <= 0.0 { d.p == 0.0 } else { d.p >= 0.0 && d.p <= controls.p_max };
                    if !(d.q >= lo && d.q <= hi) || !p_ok {
                        out.infeasible += 1;
                    }
                    if d.w_minus >= qmax && q_span > 0.0 {
                        out.interior.1 += 1;
                        let tol = 1e-9 * q_span;
                        if d.q > qmin + tol && d.q < qmax - tol {
                            out.interior.0 += 1;
                        }
                    }
                    let cell = &mut out.heat[n][hs.bucket(d.w_minus)];
                    cell.count += 1;
                    cell.sum_p += d.p;
                    cell.sum_q_norm += if q_span > 0.0 { (d.q - qmin) / q_span } else { 0.0 };
                });
                if !wt.is_finite() {
                    return Err(Error::NonFinite(format!("terminal wealth on path {}", first + j)));
                }
                wl[j * (m + 1) + m] = wt as f32;
                out.terminal.push(wt);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut terminal = Vec::with_capacity(n_paths);
    let mut sum_q = 0.0;
    let mut heat = vec![vec![HeatCell::default(); hs.buckets]; m];
    let (mut inside, mut free, mut infeasible) = (0u64, 0u64, 0u64);
    for o in outs {
        terminal.extend_from_slice(&o.terminal);
        sum_q += o.sum_q;
        for (row, orow) in heat.iter_mut().zip(&o.heat) {
            for (c, oc) in row.iter_mut().zip(orow) {
                c.count += oc.count;
                c.sum_p += oc.sum_p;
                c.sum_q_norm += oc.sum_q_norm;
            }
        }
        inside += o.interior.0;
        free += o.interior.1;
        infeasible += o.infeasible;
    }
    let (es, var) = compute_es(&terminal, scn.alpha)?;
    let mean_terminal = terminal.iter().sum::<f64>() / n_paths as f64;

    let transpose = |src: &[f32], cols: usize| {
        let mut t = vec![0f32; src.len()];
        for (j, row) in src.chunks(cols).enumerate() {
            for (y, &x) in row.iter().enumerate() {
                t[y * n_paths + j] = x;
            }
        }
        t
    };
    let mut wt = transpose(&wealth, m + 1);
    drop(wealth);
    let mut pt = transpose(&fracs, m);
    drop(fracs);
    let mut qt = transpose(&draws, m);
    drop(draws);

    Ok(SimStats {
        n_paths,
        seed: settings.seed,
        alpha: scn.alpha,
        ew_per_year: sum_q / (n_paths * m) as f64,
        es,
        var,
        mean_terminal,
        wealth_fan: fans(&mut wt, n_paths, m + 1),
        fraction_fan: fans(&mut pt, n_paths, m),
        withdrawal_fan: fans(&mut qt, n_paths, m),
        heatmap_spec: hs,
        heatmap: heat,
        interior_withdrawal_fraction: if free == 0 { 0.0 } else { inside as f64 / free as f64 },
        infeasible_decisions: infeasible,
    })
}

/// Evaluates the controls in the synthetic jump-diffusion market.
pub fn simulate_paths(
    controls: &ControlTables,
    scn: &Scenario,
    mkt: &MarketParams,
    settings: &SimSettings,
) -> Result<SimStats> {
    scn.validate()?;
    mkt.validate()?;
    let dt = scn.dt();
    let borrow = (mkt.mu_c_bond * dt).exp();
    evaluate_paths(controls, scn, settings, borrow, |rng, out| {
        for r in out.iter_mut() {
            *r = sample_return_pair(mkt, dt, rng)?;
        }
        Ok(())
    })
}

impl SimStats {
    pub fn write_percentiles_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "year,statistic,p5,p50,p95")?;
        for (name, fan) in [
            ("wealth", &self.wealth_fan),
            ("fraction_stock", &self.fraction_fan),
            ("withdrawal", &self.withdrawal_fan),
        ] {
            for (y, f) in fan.iter().enumerate() {
                writeln!(out, "{y},{name},{},{},{}", f[0], f[1], f[2])?;
            }
        }
        Ok(())
    }

    pub fn write_heatmap_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "year,wealth_lower,mean_p,mean_q_norm,count")?;
        for (y, row) in self.heatmap.iter().enumerate() {
            for (k, c) in row.iter().enumerate() {
                let (mp, mq) = if c.count > 0 {
                    (c.sum_p / c.count as f64, c.sum_q_norm / c.count as f64)
                } else {
                    (f64::NAN, f64::NAN)
                };
                writeln!(out, "{y},{},{mp},{mq},{}", self.heatmap_spec.lower_edge(k), c.count)?;
            }
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "ew_per_year,es,var,alpha,mean_terminal,n_paths,seed,interior_withdrawal_fraction,infeasible_decisions")?;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            self.ew_per_year,
            self.es,
            self.var,
            self.alpha,
            self.mean_terminal,
            self.n_paths,
            self.seed,
            self.interior_withdrawal_fraction,
            self.infeasible_decisions
        )?;
        Ok(())
    }
}
