//! Jump-diffusion asset model: Kou double-exponential jumps on top of a
//! correlated pair of geometric Brownian motions (stock and bond index).
//!
//! All rates are real (inflation adjusted) and per year.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of one asset following a Kou jump diffusion.
///
/// `mu` is the uncompensated drift; the compensator `lambda * gamma` is
/// subtracted wherever the process is evolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KouAssetParams {
    pub mu: f64,
    pub sigma: f64,
    pub lambda: f64,
    #[serde(rename = "u")]
    pub u_up: f64,
    pub eta1: f64,
    pub eta2: f64,
}

impl KouAssetParams {
    pub fn new(mu: f64, sigma: f64, lambda: f64, u_up: f64, eta1: f64, eta2: f64) -> Result<Self> {
        let p = Self {
            mu,
            sigma,
            lambda,
            u_up,
            eta1,
            eta2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.mu, self.sigma, self.lambda, self.u_up, self.eta1, self.eta2]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::ParameterDomain("asset parameters must be finite".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::ParameterDomain(format!("sigma = {} < 0", self.sigma)));
        }
        if self.lambda < 0.0 {
            return Err(Error::ParameterDomain(format!("lambda = {} < 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.u_up) {
            return Err(Error::ParameterDomain(format!("u = {} outside [0, 1]", self.u_up)));
        }
        if self.eta1 <= 1.0 {
            return Err(Error::ParameterDomain(format!(
                "eta1 = {} must exceed 1 for a finite mean jump",
                self.eta1
            )));
        }
        if self.eta2 <= 0.0 {
            return Err(Error::ParameterDomain(format!("eta2 = {} <= 0", self.eta2)));
        }
        Ok(())
    }

    /// `E[xi - 1]` for the jump multiplier `xi = e^y`.
    pub fn mean_jump_multiplier(&self) -> Result<f64> {
        if self.eta1 <= 1.0 {
            return Err(Error::ParameterDomain(format!(
                "eta1 = {} must exceed 1 for a finite mean jump",
                self.eta1
            )));
        }
        let u = self.u_up;
        Ok(u * self.eta1 / (self.eta1 - 1.0) + (1.0 - u) * self.eta2 / (self.eta2 + 1.0) - 1.0)
    }

    /// Density of the log jump size `y = log xi`.
    pub fn jump_density(&self, y: f64) -> f64 {
        if y >= 0.0 {
            self.u_up * self.eta1 * (-self.eta1 * y).exp()
        } else {
            (1.0 - self.u_up) * self.eta2 * (self.eta2 * y).exp()
        }
    }

    /// `E[log xi]`.
    pub fn mean_log_jump(&self) -> f64 {
        self.u_up / self.eta1 - (1.0 - self.u_up) / self.eta2
    }

    /// Complex conjugate of the Fourier transform of the log-jump density,
    /// i.e. `∫ f(y) e^{+2πiωy} dy`.
    pub fn density_fourier_conjugate(&self, omega: f64) -> Complex64 {
        let z = Complex64::new(0.0, 2.0 * PI * omega);
        let one = Complex64::new(1.0, 0.0);
        self.u_up / (one - z / self.eta1) + (1.0 - self.u_up) / (one + z / self.eta2)
    }

    /// One-dimensional characteristic exponent (per unit time) of the
    /// log-price increment, excluding the `-lambda` term that the 2-D
    /// exponent collects for both assets.
    fn exponent_1d(&self, omega: f64, extra_drift: f64) -> Result<Complex64> {
        let gamma = self.mean_jump_multiplier()?;
        let w = 2.0 * PI * omega;
        let s2 = self.sigma * self.sigma;
        let drift = self.mu + extra_drift - self.lambda * gamma - 0.5 * s2;
        Ok(Complex64::new(-0.5 * s2 * w * w, drift * w)
            + self.lambda * self.density_fourier_conjugate(omega))
    }
}

/// Stock and bond parameters plus their diffusive correlation and the
/// spread paid on negative bond holdings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketParams {
    pub stock: KouAssetParams,
    pub bond: KouAssetParams,
    pub rho_sb: f64,
    #[serde(rename = "borrow_spread")]
    pub mu_c_bond: f64,
}

impl MarketParams {
    /// CRSP real cap-weighted index and real 30-day T-bills, 1926:1 to 2024:12.
    pub fn fitted() -> Self {
        Self {
            stock: KouAssetParams {
                mu: 0.088241,
                sigma: 0.147361,
                lambda: 0.31313,
                u_up: 0.22581,
                eta1: 4.3608,
                eta2: 5.5309,
            },
            bond: KouAssetParams {
                mu: 0.0034,
                sigma: 0.0139,
                lambda: 0.3838,
                u_up: 0.3947,
                eta1: 61.510,
                eta2: 53.356,
            },
            rho_sb: 0.096279,
            mu_c_bond: 0.03,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stock.validate()?;
        self.bond.validate()?;
        if !(self.rho_sb.is_finite() && self.rho_sb.abs() <= 1.0) {
            return Err(Error::ParameterDomain(format!("|rho_sb| = {} > 1", self.rho_sb.abs())));
        }
        if !(self.mu_c_bond.is_finite() && self.mu_c_bond >= 0.0) {
            return Err(Error::ParameterDomain(format!(
                "borrow spread = {} < 0",
                self.mu_c_bond
            )));
        }
        Ok(())
    }

    /// `Ψ(ω₁, ω₂)` such that the transform of the one-period Green's function
    /// is `exp(Ψ Δτ)`. With `use_borrow_spread` the bond drift is raised by
    /// the borrowing spread (the debt grid).
    pub fn characteristic_exponent(
        &self,
        omega1: f64,
        omega2: f64,
        use_borrow_spread: bool,
    ) -> Result<Complex64> {
        let spread = if use_borrow_spread { self.mu_c_bond } else { 0.0 };
        Ok(self.stock_exponent(omega1)? + self.bond_exponent(omega2, spread)?
            + self.cross_exponent(omega1, omega2))
    }

    /// Stock part of `Ψ`, including its share `-λ^s` of the jump-rate term.
    pub(crate) fn stock_exponent(&self, omega1: f64) -> Result<Complex64> {
        Ok(self.stock.exponent_1d(omega1, 0.0)? - self.stock.lambda)
    }

    pub(crate) fn bond_exponent(&self, omega2: f64, spread: f64) -> Result<Complex64> {
        Ok(self.bond.exponent_1d(omega2, spread)? - self.bond.lambda)
    }

    pub(crate) fn cross_exponent(&self, omega1: f64, omega2: f64) -> f64 {
        -self.rho_sb
            * self.stock.sigma
            * self.bond.sigma
            * (2.0 * PI * omega1)
            * (2.0 * PI * omega2)
    }
}

impl Default for MarketParams {
    fn default() -> Self {
        Self::fitted()
    }
}
