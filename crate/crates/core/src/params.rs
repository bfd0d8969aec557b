//! Rate parameters shared by every model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("rate `{name}` must be finite and nonnegative, got {value}")]
    InvalidRate { name: &'static str, value: f64 },
    #[error("step growth requires omega0 > omega1 >= 0, got omega0={omega0}, omega1={omega1}")]
    StepOrder { omega0: f64, omega1: f64 },
    #[error("step threshold delta0 must lie in (0,1), got {0}")]
    StepThreshold(f64),
    #[error("sapling death rate mu={mu} is below tree death rate nu={nu}")]
    DeathOrder { mu: f64, nu: f64 },
}

/// Sapling-to-tree growth rate as a function of the local grass fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Growth {
    Constant {
        omega: f64,
    },
    /// `omega0` while grass is below `1 - delta0`, `omega1` otherwise.
    Step {
        omega0: f64,
        omega1: f64,
        delta0: f64,
    },
}

impl Growth {
    pub fn constant(omega: f64) -> Self {
        Growth::Constant { omega }
    }

    pub fn step(omega0: f64, omega1: f64, delta0: f64) -> Self {
        Growth::Step {
            omega0,
            omega1,
            delta0,
        }
    }

    /// Rate at grass fraction `grass`. The step is right-continuous: the
    /// threshold `1 - delta0` itself belongs to the low-growth regime.
    #[inline]
    pub fn rate(&self, grass: f64) -> f64 {
        match *self {
            Growth::Constant { omega } => omega,
            Growth::Step {
                omega0,
                omega1,
                delta0,
            } => {
                if grass < 1.0 - delta0 {
                    omega0
                } else {
                    omega1
                }
            }
        }
    }

    pub fn min_rate(&self) -> f64 {
        match *self {
            Growth::Constant { omega } => omega,
            Growth::Step { omega1, .. } => omega1,
        }
    }

    pub fn max_rate(&self) -> f64 {
        match *self {
            Growth::Constant { omega } => omega,
            Growth::Step { omega0, .. } => omega0,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.min_rate() == self.max_rate()
    }
}

/// Birth, death and growth rates (all per unit time).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    pub beta: f64,
    pub mu: f64,
    pub nu: f64,
    pub growth: Growth,
}

fn check_rate(name: &'static str, value: f64) -> Result<(), ParamError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(ParamError::InvalidRate { name, value })
    }
}

impl RateParams {
    /// Validates nonnegativity and the step-function shape. The ordering
    /// `mu >= nu` is checked separately by [`RateParams::check_death_order`]
    /// because only the graphical representation depends on it.
    pub fn new(beta: f64, mu: f64, nu: f64, growth: Growth) -> Result<Self, ParamError> {
        check_rate("beta", beta)?;
        check_rate("mu", mu)?;
        check_rate("nu", nu)?;
        match growth {
            Growth::Constant { omega } => check_rate("omega", omega)?,
            Growth::Step {
                omega0,
                omega1,
                delta0,
            } => {
                check_rate("omega0", omega0)?;
                check_rate("omega1", omega1)?;
                if omega0 <= omega1 {
                    return Err(ParamError::StepOrder { omega0, omega1 });
                }
                if !(delta0 > 0.0 && delta0 < 1.0) {
                    return Err(ParamError::StepThreshold(delta0));
                }
            }
        }
        Ok(RateParams {
            beta,
            mu,
            nu,
            growth,
        })
    }

    /// Krone parameters with constant growth `omega`.
    pub fn krone(beta: f64, mu: f64, nu: f64, omega: f64) -> Result<Self, ParamError> {
        Self::new(beta, mu, nu, Growth::constant(omega))
    }

    pub fn check_death_order(&self) -> Result<(), ParamError> {
        if self.mu >= self.nu {
            Ok(())
        } else {
            Err(ParamError::DeathOrder {
                mu: self.mu,
                nu: self.nu,
            })
        }
    }

    /// Growth rate of the dominated Krone process, `omega(1)`.
    pub fn krone_omega(&self) -> f64 {
        self.growth.min_rate()
    }

    /// Largest per-site transition rate, `beta + mu + nu + omega_max`.
    pub fn rate_sum(&self) -> f64 {
        self.beta + self.mu + self.nu + self.growth.max_rate()
    }

    pub fn with_nu(mut self, nu: f64) -> Self {
        self.nu = nu;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_is_right_continuous_at_threshold() {
        let g = Growth::step(2.0, 0.5, 0.25);
        assert_eq!(g.rate(0.74), 2.0);
        assert_eq!(g.rate(0.75), 0.5);
        assert_eq!(g.rate(1.0), 0.5);
        assert_eq!(g.min_rate(), 0.5);
        assert_eq!(g.max_rate(), 2.0);
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(RateParams::krone(-1.0, 1.0, 1.0, 1.0).is_err());
        assert!(RateParams::krone(1.0, f64::NAN, 1.0, 1.0).is_err());
        assert!(RateParams::new(1.0, 1.0, 1.0, Growth::step(1.0, 1.0, 0.5)).is_err());
        assert!(RateParams::new(1.0, 1.0, 1.0, Growth::step(2.0, 1.0, 1.0)).is_err());
        let p = RateParams::krone(1.0, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(
            p.check_death_order(),
            Err(ParamError::DeathOrder { mu: 0.5, nu: 1.0 })
        );
    }
}
