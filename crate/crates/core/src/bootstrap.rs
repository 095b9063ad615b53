//! Stationary block bootstrap of paired monthly real returns.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::control::ControlTables;
use crate::engine::Scenario;
use crate::error::{Error, Result};
use crate::simulate::{evaluate_paths, HeatmapSpec, SimSettings, SimStats};

/// Shortest series accepted for resampling (ten years).
pub const MIN_MONTHS: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Month {
    pub year: i32,
    pub month: u32,
}

impl Month {
    fn parse(s: &str) -> Option<Self> {
        let (y, m) = s.trim().split_once('-')?;
        let m: u32 = m.get(..2)?.parse().ok()?;
        let year = y.parse().ok()?;
        (1..=12).contains(&m).then_some(Self { year, month: m })
    }

    pub fn next(self) -> Self {
        if self.month == 12 {
            Self { year: self.year + 1, month: 1 }
        } else {
            Self { month: self.month + 1, ..self }
        }
    }
}

impl std::fmt::Display for Month {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// Contiguous monthly series of paired gross real returns.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    pub dates: Vec<Month>,
    pub stock: Vec<f64>,
    pub bond: Vec<f64>,
}

#[derive(Deserialize)]
struct Row {
    date: String,
    stock_real_return: f64,
    bond_real_return: f64,
}

impl ReturnSeries {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Parses CSV with header `date,stock_real_return,bond_real_return`.
    /// Dates are `YYYY-MM` (a trailing day is ignored); returns are net.
    pub fn parse<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
        for want in ["date", "stock_real_return", "bond_real_return"] {
            if !headers.iter().any(|h| h == want) {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("missing column `{want}`"),
                });
            }
        }
        let mut s = Self {
            dates: Vec::new(),
            stock: Vec::new(),
            bond: Vec::new(),
        };
        for rec in rdr.deserialize::<Row>() {
            let line = s.len() + 2;
            let row = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(line, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let date = Month::parse(&row.date).ok_or_else(|| Error::Parse {
                line,
                msg: format!("bad date `{}`, expected YYYY-MM", row.date),
            })?;
            if let Some(&prev) = s.dates.last() {
                if date != prev.next() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("months not contiguous: {prev} followed by {date}"),
                    });
                }
            }
            let (gs, gb) = (1.0 + row.stock_real_return, 1.0 + row.bond_real_return);
            if !(gs > 0.0 && gb > 0.0 && gs.is_finite() && gb.is_finite()) {
                return Err(Error::Parse {
                    line,
                    msg: format!("gross return must be positive (stock {gs}, bond {gb})"),
                });
            }
            s.dates.push(date);
            s.stock.push(gs);
            s.bond.push(gb);
        }
        if s.is_empty() {
            return Err(Error::EmptySample);
        }
        Ok(s)
    }
}

pub fn load_returns(path: impl AsRef<Path>) -> Result<ReturnSeries> {
    ReturnSeries::parse(File::open(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub expected_blocksize_months: f64,
    pub n_resamples: usize,
    pub seed: u64,
    #[serde(default)]
    pub heatmap: HeatmapSpec,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        Self {
            expected_blocksize_months: 24.0,
            n_resamples: 100_000,
            seed: 42,
            heatmap: HeatmapSpec::default(),
        }
    }
}

impl BootstrapSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.expected_blocksize_months >= 1.0) || !self.expected_blocksize_months.is_finite() {
            return Err(Error::ParameterDomain("expected blocksize must be at least one month".into()));
        }
        if self.n_resamples == 0 {
            return Err(Error::ParameterDomain("n_resamples must be positive".into()));
        }
        Ok(())
    }
}

/// Source indices of one stationary-bootstrap resample: blocks start at a
/// uniform index, have geometric length with mean `b`, and wrap at the end.
pub fn resample_indices<R: Rng + ?Sized>(n: usize, expected_blocksize: f64, horizon_months: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let geo = Geometric::new(1.0 / expected_blocksize).map_err(|e| Error::ParameterDomain(e.to_string()))?;
    let mut idx = Vec::with_capacity(horizon_months);
    while idx.len() < horizon_months {
        let start = rng.random_range(0..n);
        let len = 1 + geo.sample(rng) as usize;
        let take = len.min(horizon_months - idx.len());
        idx.extend((0..take).map(|k| (start + k) % n));
    }
    Ok(idx)
}

/// Paired `(stock, bond)` monthly gross returns drawn at shared indices.
pub fn resample_path<R: Rng + ?Sized>(
    series: &ReturnSeries,
    spec: &BootstrapSpec,
    horizon_months: usize,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    let idx = resample_indices(series.len(), spec.expected_blocksize_months, horizon_months, rng)?;
    Ok(idx.iter().map(|&i| (series.stock[i], series.bond[i])).collect())
}

/// Compounds consecutive monthly pairs into per-period gross returns.
pub fn annualize(monthly: &[(f64, f64)], months_per_period: usize, out: &mut [(f64, f64)]) {
    for (o, chunk) in out.iter_mut().zip(monthly.chunks(months_per_period)) {
        *o = chunk.iter().fold((1.0, 1.0), |a, r| (a.0 * r.0, a.1 * r.1));
    }
}

/// Evaluates stored controls in the bootstrapped historical market. The
/// borrowing spread is a deterministic factor `e^{spread dt}` on negative
/// bond balances.
pub fn run_historical_test(
    controls: &ControlTables,
    scn: &Scenario,
    series: &ReturnSeries,
    spec: &BootstrapSpec,
    spread: f64,
) -> Result<SimStats> {
    scn.validate()?;
    spec.validate()?;
    if series.len() < MIN_MONTHS {
        return Err(Error::ParameterDomain(format!(
            "return series has {} months, at least {MIN_MONTHS} required",
            series.len()
        )));
    }
    let horizon_months = (12.0 * scn.horizon).round() as usize;
    if (horizon_months as f64 - 12.0 * scn.horizon).abs() > 1e-9 || horizon_months % scn.periods != 0 {
        return Err(Error::HorizonMismatch {
            expected: horizon_months,
            found: scn.periods,
        });
    }
    let per = horizon_months / scn.periods;
    let settings = SimSettings {
        n_paths: spec.n_resamples,
        seed: spec.seed,
        heatmap: spec.heatmap,
    };
    evaluate_paths(controls, scn, &settings, (spread * scn.dt()).exp(), |rng, out| {
        let monthly = resample_path(series, spec, horizon_months, rng)?;
        annualize(&monthly, per, out);
        Ok(())
    })
}
