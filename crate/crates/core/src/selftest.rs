//! Grid-size-independent invariant checks, cheap enough to run from the
//! command line (all grids at or below 128²).

use std::time::Instant;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bootstrap::{annualize, resample_indices, resample_path, run_historical_test, BootstrapSpec, Month, ReturnSeries};
use crate::control::{
    allocation_value, candidates, optimize_allocation, optimize_withdrawal, withdrawal_bounds, ControlTables, Solver,
    WealthGrid,
};
use crate::engine::{GridPair, Numerics, Scenario, ValueSurfacePair};
use crate::error::Result;
use crate::fourier::{advance_time, build_green_weights, dft2, idft2, Fft2, GridSpec, KernelConfig};
use crate::market::MarketParams;
use crate::simulate::{compute_es, simulate_paths, SimSettings};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type CheckFn = fn() -> Result<(bool, String)>;

pub const CHECKS: &[(&str, CheckFn)] = &[
    ("dft_round_trip", dft_round_trip),
    ("convolution_theorem", convolution_theorem),
    ("comparison_principle", comparison_principle),
    ("two_stage_vs_joint_search", two_stage_vs_joint),
    ("es_vs_rockafellar", es_vs_rockafellar),
    ("bootstrap_pairing", bootstrap_pairing),
    ("bootstrap_frequency", bootstrap_frequency),
    ("bootstrap_annualization", bootstrap_annualization),
    ("decision_feasibility_audit", feasibility_audit),
    ("deterministic_replay", deterministic_replay),
];

pub fn run_all() -> Vec<Check> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let t = Instant::now();
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            Check {
                name,
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn random_complex(n1: usize, n2: usize, seed: u64) -> Array2<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n1, n2), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn dft_round_trip() -> Result<(bool, String)> {
    let v = random_complex(64, 32, 1);
    let back = idft2(&dft2(&v)?)?;
    let err = v.iter().zip(back.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
    Ok((err < 1e-12, format!("max error {err:.2e}")))
}

fn convolution_theorem() -> Result<(bool, String)> {
    let (n1, n2) = (8, 16);
    let a = random_complex(n1, n2, 2);
    let b = random_complex(n1, n2, 3);
    let conv = idft2(&(&dft2(&a)? * &dft2(&b)?))?;
    let mut err = 0.0f64;
    for l in 0..n1 {
        for m in 0..n2 {
            let mut direct = Complex64::new(0.0, 0.0);
            for j in 0..n1 {
                for k in 0..n2 {
                    direct += a[((l + n1 - j) % n1, (m + n2 - k) % n2)] * b[(j, k)];
                }
            }
            err = err.max((direct - conv[(l, m)]).norm());
        }
    }
    Ok((err < 1e-12, format!("max error {err:.2e}")))
}

fn desk_grid(n: usize) -> Result<GridSpec> {
    let a = 100f64.ln();
    GridSpec::new(n, n, (a - 7.5, a + 10.0), (a - 7.5, a + 10.0), (a, a))
}

fn comparison_principle() -> Result<(bool, String)> {
    let cfg = KernelConfig::default();
    let w = build_green_weights(&MarketParams::fitted(), &desk_grid(64)?, 1.0, &cfg, true)?;
    let plan = Fft2::new(128, 128)?;
    let mut worst = f64::INFINITY;
    let mut ok = true;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Array2::from_shape_fn((128, 128), |_| rng.random_range(-100.0..100.0));
        let gap = Array2::from_shape_fn((128, 128), |_| rng.random_range(0.0..50.0));
        let v = &u + &gap;
        let (vu, uu) = (advance_time(v.view(), &w, &plan)?, advance_time(u.view(), &w, &plan)?);
        let slack = cfg.delta / cfg.horizon * gap.iter().fold(0.0f64, |m, x| m.max(*x));
        for (a, b) in vu.iter().zip(uu.iter()) {
            worst = worst.min(a - b);
            ok &= *a >= *b - slack;
        }
    }
    Ok((ok, format!("min advanced gap {worst:.3e} over 20 ordered pairs")))
}

fn two_stage_vs_joint() -> Result<(bool, String)> {
    let g = desk_grid(16)?;
    let grids = GridPair { pos: g, neg: g };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let v = ValueSurfacePair {
        pos: Array2::from_shape_fn((16, 16), |_| rng.random_range(-10.0..10.0)),
        neg: Array2::from_shape_fn((16, 16), |_| rng.random_range(-10.0..10.0)),
        time_index: 0,
    };
    // Spacing 5 puts every w - q on a node, so the stages compose exactly.
    let wealth = WealthGrid::from_nodes((0..121).map(|k| -100.0 + 5.0 * k as f64).collect(), 1.0)?;
    let (q_min, q_max, p_max, n_p, n_q) = (30.0, 60.0, 1.2, 7, 7);
    let a = optimize_allocation(&v, &grids, &wealth, p_max, n_p);
    let q = optimize_withdrawal(&a.h_vals, &wealth, q_min, q_max, n_q);
    let (mut checked, mut mismatches) = (0, 0);
    for (k, &w) in wealth.nodes.iter().enumerate() {
        if (w > q_min && w < q_max) || w - q_max < wealth.w_min() {
            continue;
        }
        let (lo, hi) = withdrawal_bounds(q_min, q_max, w);
        let mut joint = (0.0, f64::NEG_INFINITY);
        for qi in candidates(lo, hi, n_q) {
            let wp = w - qi;
            for pj in candidates(0.0, p_max, n_p) {
                let val = qi + allocation_value(&v, &grids, wp, if wp <= 0.0 { 0.0 } else { pj }).0;
                if val > joint.1 {
                    joint = (qi, val);
                }
            }
        }
        checked += 1;
        if q[k] != joint.0 || q[k] + wealth.interp(&a.h_vals, w - q[k]) != joint.1 {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{checked} nodes, {mismatches} mismatches")))
}

fn es_vs_rockafellar() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let xs: Vec<f64> = (0..1000).map(|_| rng.random_range(-500.0..2000.0)).collect();
    let alpha = 0.05;
    let (es, _) = compute_es(&xs, alpha)?;
    let objective = |w: f64| w + xs.iter().map(|x| (x - w).min(0.0)).sum::<f64>() / (xs.len() as f64 * alpha);
    let best = (0..=25_000)
        .map(|i| -500.0 + 0.1 * i as f64)
        .chain(xs.iter().copied())
        .map(objective)
        .fold(f64::NEG_INFINITY, f64::max);
    let err = (es - best).abs();
    Ok((err < 1e-9, format!("es {es:.6}, oracle {best:.6}")))
}

/// Synthetic monthly series for the bootstrap checks.
pub fn synthetic_series(n: usize, seed: u64) -> ReturnSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Month { year: 1926, month: 1 };
    let mut s = ReturnSeries {
        dates: Vec::with_capacity(n),
        stock: Vec::with_capacity(n),
        bond: Vec::with_capacity(n),
    };
    for _ in 0..n {
        s.dates.push(m);
        s.stock.push(1.0 + rng.random_range(-0.08..0.1));
        s.bond.push(1.0 + rng.random_range(-0.02..0.025));
        m = m.next();
    }
    s
}

fn bootstrap_pairing() -> Result<(bool, String)> {
    let s = synthetic_series(240, 3);
    let spec = BootstrapSpec {
        expected_blocksize_months: 12.0,
        ..Default::default()
    };
    let mut ok = true;
    for path in 0..200 {
        let mut a = ChaCha8Rng::seed_from_u64(path);
        let mut b = ChaCha8Rng::seed_from_u64(path);
        let idx = resample_indices(s.len(), 12.0, 360, &mut a)?;
        let ret = resample_path(&s, &spec, 360, &mut b)?;
        ok &= idx.iter().zip(&ret).all(|(&i, &r)| r == (s.stock[i], s.bond[i]));
    }
    Ok((ok, "200 resamples, stock and bond share source indices".into()))
}

fn bootstrap_frequency() -> Result<(bool, String)> {
    let n = 120;
    let mut counts = vec![0usize; n];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut total = 0;
    while total < 100_000 {
        for i in resample_indices(n, 6.0, 360, &mut rng)? {
            counts[i] += 1;
            total += 1;
        }
    }
    let p = 1.0 / n as f64;
    // Blocks of mean length b inflate the count variance by about 2b - 1.
    let se = (p * (1.0 - p) / total as f64 * 11.0).sqrt();
    let worst = counts.iter().map(|&c| ((c as f64 / total as f64) - p).abs() / se).fold(0.0, f64::max);
    Ok((worst < 4.0, format!("worst deviation {worst:.2} SE over {total} draws")))
}

fn bootstrap_annualization() -> Result<(bool, String)> {
    let s = synthetic_series(300, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let monthly = resample_path(&s, &BootstrapSpec::default(), 360, &mut rng)?;
    let mut annual = vec![(0.0, 0.0); 30];
    annualize(&monthly, 12, &mut annual);
    let mut worst = 0.0f64;
    for (y, &(a, b)) in annual.iter().enumerate() {
        let year = &monthly[12 * y..12 * y + 12];
        let ls: f64 = year.iter().map(|r| r.0.ln()).sum();
        let lb: f64 = year.iter().map(|r| r.1.ln()).sum();
        worst = worst.max((a / ls.exp() - 1.0).abs()).max((b / lb.exp() - 1.0).abs());
    }
    Ok((worst < 1e-12, format!("max relative error {worst:.2e}")))
}

fn small_solve() -> Result<ControlTables> {
    let scn = Scenario::default();
    let mut solver = Solver::new(scn, MarketParams::fitted(), Numerics::default().with_grid(32))?;
    Ok(solver.solve_fixed_wstar(32, 50.0)?.tables)
}

fn feasibility_audit() -> Result<(bool, String)> {
    let scn = Scenario::default();
    let mkt = MarketParams::fitted();
    let settings = SimSettings {
        n_paths: 20_000,
        ..Default::default()
    };
    let mut decisions = 0;
    let mut bad = 0;
    for tables in [small_solve()?, ControlTables::bengen(&scn)?] {
        tables.audit()?;
        let st = simulate_paths(&tables, &scn, &mkt, &settings)?;
        decisions += st.n_paths * scn.periods;
        bad += st.infeasible_decisions;
    }
    Ok((bad == 0, format!("{bad} infeasible of {decisions} decisions")))
}

fn deterministic_replay() -> Result<(bool, String)> {
    let scn = Scenario::default();
    let mkt = MarketParams::fitted();
    let tables = small_solve()?;
    let settings = SimSettings {
        n_paths: 5000,
        seed: 2024,
        ..Default::default()
    };
    let a = simulate_paths(&tables, &scn, &mkt, &settings)?;
    let b = simulate_paths(&tables, &scn, &mkt, &settings)?;
    let s = synthetic_series(300, 8);
    let spec = BootstrapSpec {
        n_resamples: 5000,
        ..Default::default()
    };
    let c = run_historical_test(&tables, &scn, &s, &spec, mkt.mu_c_bond)?;
    let d = run_historical_test(&tables, &scn, &s, &spec, mkt.mu_c_bond)?;
    let again = small_solve()?;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    tables.write_binary(&mut x)?;
    again.write_binary(&mut y)?;
    Ok((a == b && c == d && x == y, "solve, simulation and bootstrap replayed bitwise".into()))
}
