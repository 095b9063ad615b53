use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use decumulation::engine::{Numerics, Scenario};
use decumulation::market::MarketParams;
use decumulation::simulate::HeatmapSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontierConfig {
    pub kappas: Vec<f64>,
}

impl Default for FrontierConfig {
    fn default() -> Self {
        Self {
            kappas: vec![0.1, 0.3, 0.866, 2.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub paths: usize,
    pub seed: u64,
    pub heatmap: HeatmapSpec,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            paths: 100_000,
            seed: 42,
            heatmap: HeatmapSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub data: Option<PathBuf>,
    pub blocksize_years: Vec<f64>,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            data: None,
            blocksize_years: vec![2.0],
            resamples: 100_000,
            seed: 42,
        }
    }
}

/// Everything a run depends on besides the input files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub market: MarketParams,
    pub numerics: Numerics,
    pub frontier: FrontierConfig,
    pub simulate: SimulateConfig,
    pub bootstrap: BootstrapConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate().context("[scenario]")?;
        self.market.validate().context("[market]")?;
        self.numerics.validate().context("[numerics]")?;
        if self.frontier.kappas.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
            bail!("[frontier] kappas must be finite and non-negative");
        }
        if self.simulate.paths == 0 || self.bootstrap.resamples == 0 {
            bail!("path counts must be positive");
        }
        let h = self.simulate.heatmap;
        if h.buckets == 0 || !(h.w_hi > h.w_lo) {
            bail!("[simulate.heatmap] needs w_hi > w_lo and at least one bucket");
        }
        if self.bootstrap.blocksize_years.iter().any(|b| !(*b * 12.0 >= 1.0) || !b.is_finite()) {
            bail!("[bootstrap] blocksizes must be at least one month");
        }
        Ok(())
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        Ok(toml::Table::try_from(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn shipped_default_matches_built_in() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/default.toml");
        let c = RunConfig::load(&path).unwrap();
        c.validate().unwrap();
        assert_eq!(c.scenario, Scenario::default());
        assert_eq!(c.market, MarketParams::fitted());
        assert_eq!(c.numerics, Numerics::default());
    }

    #[test]
    fn partial_sections_fill_in() {
        let c: RunConfig = toml::from_str("[scenario]\nkappa = 0.5\n[numerics]\ngrid = 64\n").unwrap();
        assert_eq!(c.scenario.kappa, 0.5);
        assert_eq!(c.scenario.w0, 1000.0);
        assert_eq!(c.numerics.grid, 64);
        assert_eq!(c.market, MarketParams::fitted());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.numerics.wealth_bounds = Some([-1e4, 1e6]);
        c.bootstrap.data = Some("data/x.csv".into());
        c.scenario.epsilon = 1.0 / 3.0;
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "[scenario]\nalpha = 1.5\n",
            "[numerics]\ngrid = 100\n",
            "[market]\nrho_sb = 2.0\n",
            "[frontier]\nkappas = [-1.0]\n",
            "[bootstrap]\nblocksize_years = [0.01]\n",
        ] {
            let c: RunConfig = toml::from_str(bad).unwrap();
            assert!(c.validate().is_err(), "{bad}");
        }
        assert!(toml::from_str::<RunConfig>("[scenario]\nkappa = \"x\"\n").is_err());
        assert!(toml::from_str::<RunConfig>("[market]\nmu_c = 0.03\n").is_err());
    }
}
