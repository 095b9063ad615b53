//! `decum`: batch driver for the decumulation solver.

mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use decumulation::bootstrap::{load_returns, run_historical_test, BootstrapSpec};
use decumulation::control::{ControlTables, FrontierPoint, Solver};
use decumulation::engine::Scenario;
use decumulation::selftest;
use decumulation::simulate::{simulate_paths, SimSettings, SimStats};
use log::info;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "decum", version, about = "Optimal withdrawal and allocation for pension decumulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize W*, write the control tables and a summary.
    Solve(Common),
    /// Solve for each kappa and write the efficient frontier.
    Frontier(Common),
    /// Monte Carlo evaluation of stored controls in the synthetic market.
    Simulate(Common),
    /// Block-bootstrap evaluation of stored controls on historical returns.
    Bootstrap(Common),
    /// Run the invariant checks.
    Selftest(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Control file written by `solve`.
    #[arg(long)]
    controls: Option<PathBuf>,
    /// Evaluate the constant 40-per-year, half-in-stocks rule instead of a control file.
    #[arg(long)]
    bengen: bool,
    /// Monthly return CSV for `bootstrap`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grid: Option<usize>,
    /// Repeat for several values (`frontier`).
    #[arg(long)]
    kappa: Vec<f64>,
    #[arg(long)]
    paths: Option<usize>,
    /// Repeat for several values (`bootstrap`).
    #[arg(long)]
    blocksize_years: Vec<f64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(g) = self.grid {
            cfg.numerics.grid = g;
        }
        if !self.kappa.is_empty() {
            cfg.scenario.kappa = self.kappa[0];
            cfg.frontier.kappas = self.kappa.clone();
        }
        if let Some(s) = self.seed {
            cfg.simulate.seed = s;
            cfg.bootstrap.seed = s;
        }
        if let Some(n) = self.paths {
            cfg.simulate.paths = n;
            cfg.bootstrap.resamples = n;
        }
        if !self.blocksize_years.is_empty() {
            cfg.bootstrap.blocksize_years = self.blocksize_years.clone();
        }
        if let Some(d) = &self.data {
            cfg.bootstrap.data = Some(d.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn controls(&self, scn: &Scenario) -> Result<(ControlTables, String)> {
        match (&self.controls, self.bengen) {
            (Some(_), true) => bail!("--controls and --bengen are mutually exclusive"),
            (None, true) => Ok((ControlTables::bengen(scn)?, "bengen".into())),
            (Some(p), false) => {
                let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
                let t = ControlTables::read_binary(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?;
                Ok((t, p.display().to_string()))
            }
            (None, false) => bail!("need --controls FILE or --bengen"),
        }
    }
}

/// Collects outputs and diagnostics, then writes `manifest.toml`.
struct Run {
    command: &'static str,
    out_dir: PathBuf,
    config: RunConfig,
    inputs: toml::Table,
    outputs: Vec<String>,
    diagnostics: toml::Table,
    failures: Vec<String>,
}

impl Run {
    fn new(command: &'static str, common: &Common) -> Result<Self> {
        let config = common.resolve()?;
        fs::create_dir_all(&common.out_dir).with_context(|| format!("creating {}", common.out_dir.display()))?;
        Ok(Self {
            command,
            out_dir: common.out_dir.clone(),
            config,
            inputs: toml::Table::new(),
            outputs: Vec::new(),
            diagnostics: toml::Table::new(),
            failures: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.out_dir.join(name);
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        ))
    }

    fn diag<T: serde::Serialize>(&mut self, key: &str, v: &T) -> Result<()> {
        self.diagnostics.insert(key.into(), toml::Value::try_from(v)?);
        Ok(())
    }

    fn finish(self) -> Result<ExitCode> {
        let mut table = self.config.to_table()?;
        let mut run = toml::Table::new();
        run.insert("command".into(), self.command.into());
        run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        run.insert("passed".into(), self.failures.is_empty().into());
        run.insert("failures".into(), toml::Value::try_from(&self.failures)?);
        run.insert("outputs".into(), toml::Value::try_from(&self.outputs)?);
        run.insert("inputs".into(), self.inputs.into());
        table.insert("run".into(), run.into());
        table.insert("diagnostics".into(), self.diagnostics.into());
        let path = self.out_dir.join("manifest.toml");
        fs::write(&path, toml::to_string(&table)?).with_context(|| format!("writing {}", path.display()))?;
        if self.failures.is_empty() {
            Ok(ExitCode::SUCCESS)
        } else {
            for f in &self.failures {
                eprintln!("diagnostic failed: {f}");
            }
            Ok(ExitCode::from(2))
        }
    }
}

fn write_frontier(out: impl Write, points: &[FrontierPoint]) -> Result<()> {
    let mut out = out;
    writeln!(out, "kappa,w_star,ew_per_year,es,value")?;
    for p in points {
        writeln!(out, "{},{},{},{},{}", p.kappa, p.w_star, p.ew_per_year, p.es, p.value)?;
    }
    Ok(())
}

fn cmd_solve(common: &Common) -> Result<ExitCode> {
    let mut run = Run::new("solve", common)?;
    let cfg = run.config.clone();
    let mut solver = Solver::new(cfg.scenario, cfg.market, cfg.numerics.clone())?;
    let o = solver.optimize_wstar()?;
    let tables = &o.solve.tables;
    tables.audit()?;
    tables.write_binary(run.create("controls.bin")?)?;
    tables.write_csv(run.create("controls.csv")?)?;
    let mut s = run.create("solve_summary.csv")?;
    writeln!(s, "kappa,w_star,value,ew_per_year,es,expected_terminal_wealth,grid")?;
    let (p, d) = (o.point, o.decomposition);
    writeln!(
        s,
        "{},{},{},{},{},{},{}",
        p.kappa, p.w_star, p.value, d.ew_per_year, d.es, d.expected_terminal_wealth, cfg.numerics.grid
    )?;
    s.flush()?;
    let mut h = run.create("wstar_history.csv")?;
    writeln!(h, "grid,w_star,value")?;
    for (g, w, v) in &o.history {
        writeln!(h, "{g},{w},{v}")?;
    }
    h.flush()?;
    println!(
        "value {:.4}  W* {:.3}  EW/M {:.4}  ES {:.3}",
        p.value, p.w_star, d.ew_per_year, d.es
    );
    run.diag("solve", &o.solve.diagnostics)?;
    run.diag("point", &p)?;
    run.diag("decomposition", &d)?;
    run.diag("interior_withdrawal_fraction", &tables.interior_withdrawal_fraction())?;
    run.failures = o.solve.diagnostics.failures(&cfg.numerics);
    run.finish()
}

fn cmd_frontier(common: &Common) -> Result<ExitCode> {
    let mut run = Run::new("frontier", common)?;
    let cfg = run.config.clone();
    if cfg.frontier.kappas.is_empty() {
        bail!("frontier needs at least one kappa");
    }
    let mut solver = Solver::new(cfg.scenario, cfg.market, cfg.numerics.clone())?;
    let mut points = Vec::new();
    for &kappa in &cfg.frontier.kappas {
        solver.set_scenario(Scenario { kappa, ..cfg.scenario })?;
        let o = solver.optimize_wstar()?;
        info!("kappa {kappa}: EW/M {:.4}, ES {:.3}", o.point.ew_per_year, o.point.es);
        run.diag(&format!("kappa_{kappa}"), &o.solve.diagnostics)?;
        run.failures
            .extend(o.solve.diagnostics.failures(&cfg.numerics).into_iter().map(|f| format!("kappa {kappa}: {f}")));
        points.push(o.point);
    }
    points.sort_by(|a, b| a.es.total_cmp(&b.es));
    let mut f = run.create("frontier.csv")?;
    write_frontier(&mut f, &points)?;
    f.flush()?;
    write_frontier(std::io::stdout().lock(), &points)?;
    run.finish()
}

fn write_stats(run: &mut Run, prefix: &str, st: &SimStats) -> Result<()> {
    let mut f = run.create(&format!("{prefix}_percentiles.csv"))?;
    st.write_percentiles_csv(&mut f)?;
    f.flush()?;
    let mut f = run.create(&format!("{prefix}_heatmap.csv"))?;
    st.write_heatmap_csv(&mut f)?;
    f.flush()?;
    let mut f = run.create(&format!("{prefix}_summary.csv"))?;
    st.write_summary_csv(&mut f)?;
    f.flush()?;
    let mut t = toml::Table::new();
    t.insert("ew_per_year".into(), st.ew_per_year.into());
    t.insert("es".into(), st.es.into());
    t.insert("var".into(), st.var.into());
    t.insert("n_paths".into(), (st.n_paths as i64).into());
    t.insert("infeasible_decisions".into(), (st.infeasible_decisions as i64).into());
    t.insert("interior_withdrawal_fraction".into(), st.interior_withdrawal_fraction.into());
    run.diagnostics.insert(prefix.into(), t.into());
    if st.infeasible_decisions > 0 {
        run.failures.push(format!("{prefix}: {} infeasible decisions", st.infeasible_decisions));
    }
    println!("{prefix}: EW/M {:.4}  ES {:.3}  VaR {:.3}", st.ew_per_year, st.es, st.var);
    Ok(())
}

fn cmd_simulate(common: &Common) -> Result<ExitCode> {
    let mut run = Run::new("simulate", common)?;
    let cfg = run.config.clone();
    let (tables, source) = common.controls(&cfg.scenario)?;
    run.inputs.insert("controls".into(), source.into());
    let settings = SimSettings {
        n_paths: cfg.simulate.paths,
        seed: cfg.simulate.seed,
        heatmap: cfg.simulate.heatmap,
    };
    let st = simulate_paths(&tables, &cfg.scenario, &cfg.market, &settings)?;
    write_stats(&mut run, "sim", &st)?;
    run.finish()
}

/// File-name tag for a blocksize, e.g. `b0.5y`.
fn blocksize_tag(years: f64) -> String {
    format!("boot_b{years}y")
}

fn cmd_bootstrap(common: &Common) -> Result<ExitCode> {
    let mut run = Run::new("bootstrap", common)?;
    let cfg = run.config.clone();
    let data = cfg
        .bootstrap
        .data
        .clone()
        .context("need --data FILE or [bootstrap] data")?;
    let series = load_returns(&data).with_context(|| format!("loading {}", data.display()))?;
    let (tables, source) = common.controls(&cfg.scenario)?;
    run.inputs.insert("controls".into(), source.into());
    run.inputs.insert("data".into(), data.display().to_string().into());
    run.inputs.insert("months".into(), (series.len() as i64).into());
    if let (Some(a), Some(b)) = (series.dates.first(), series.dates.last()) {
        run.inputs.insert("date_range".into(), format!("{a} to {b}").into());
    }
    let mut summary = Vec::new();
    for &years in &cfg.bootstrap.blocksize_years {
        let spec = BootstrapSpec {
            expected_blocksize_months: 12.0 * years,
            n_resamples: cfg.bootstrap.resamples,
            seed: cfg.bootstrap.seed,
            heatmap: cfg.simulate.heatmap,
        };
        let st = run_historical_test(&tables, &cfg.scenario, &series, &spec, cfg.market.mu_c_bond)?;
        write_stats(&mut run, &blocksize_tag(years), &st)?;
        summary.push((years, st.ew_per_year, st.es, st.var));
    }
    let mut f = run.create("boot_summary.csv")?;
    writeln!(f, "blocksize_years,ew_per_year,es,var")?;
    for (b, ew, es, var) in summary {
        writeln!(f, "{b},{ew},{es},{var}")?;
    }
    f.flush()?;
    run.finish()
}

fn cmd_selftest(common: &Common) -> Result<ExitCode> {
    let mut run = Run::new("selftest", common)?;
    let checks = selftest::run_all();
    let mut f = run.create("selftest.csv")?;
    writeln!(f, "check,passed,seconds,detail")?;
    for c in &checks {
        println!(
            "{} {:<28} {:>7.2}s  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.seconds,
            c.detail
        );
        writeln!(f, "{},{},{:.3},\"{}\"", c.name, c.passed, c.seconds, c.detail.replace('"', "'"))?;
        if !c.passed {
            run.failures.push(format!("{}: {}", c.name, c.detail));
        }
    }
    f.flush()?;
    run.finish()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(c) => cmd_solve(c),
        Command::Frontier(c) => cmd_frontier(c),
        Command::Simulate(c) => cmd_simulate(c),
        Command::Bootstrap(c) => cmd_bootstrap(c),
        Command::Selftest(c) => cmd_selftest(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
