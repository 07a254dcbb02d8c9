//! Consensus weight sequences and the closed-form tuning results built on them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::LaplacianSpectrum;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedule parameter {name} = {value} must be positive")]
    NonPositive { name: &'static str, value: f64 },
    #[error("tau = {0} must be nonnegative")]
    NegativeTau(f64),
    #[error("graph is disconnected (lambda_2 = 0)")]
    Disconnected,
    #[error("payoff threshold needs N >= 2, got N = {0}")]
    TooFewSensors(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Step-size family. `k` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSchedule {
    /// `alpha_k = b0 / (a + k)`
    AlphaHarmonic { a: f64, b0: f64 },
    /// `beta_k = b0 / (a + k^tau)`
    BetaPower { a: f64, b0: f64, tau: f64 },
    Constant { alpha: f64 },
}

impl WeightSchedule {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let pos = |name, value: f64| {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(ScheduleError::NonPositive { name, value })
            }
        };
        match *self {
            WeightSchedule::AlphaHarmonic { a, b0 } => {
                pos("a", a)?;
                pos("b0", b0)
            }
            WeightSchedule::BetaPower { a, b0, tau } => {
                pos("a", a)?;
                pos("b0", b0)?;
                if tau >= 0.0 && tau.is_finite() {
                    Ok(())
                } else {
                    Err(ScheduleError::NegativeTau(tau))
                }
            }
            WeightSchedule::Constant { alpha } => pos("alpha", alpha),
        }
    }

    pub fn weight_at(&self, k: usize) -> f64 {
        let kf = k as f64;
        match *self {
            WeightSchedule::AlphaHarmonic { a, b0 } => b0 / (a + kf),
            WeightSchedule::BetaPower { a, b0, tau } => b0 / (a + kf.powf(tau)),
            WeightSchedule::Constant { alpha } => alpha,
        }
    }

    /// `(a, b0)` for the decaying families.
    pub fn offset_and_gain(&self) -> Option<(f64, f64)> {
        match *self {
            WeightSchedule::AlphaHarmonic { a, b0 } | WeightSchedule::BetaPower { a, b0, .. } => {
                Some((a, b0))
            }
            WeightSchedule::Constant { .. } => None,
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match *self {
            WeightSchedule::AlphaHarmonic { .. } => Some(1.0),
            WeightSchedule::BetaPower { tau, .. } => Some(tau),
            WeightSchedule::Constant { .. } => None,
        }
    }

    /// Largest weight over `k >= 1`. All families are nonincreasing in `k`.
    pub fn max_weight(&self) -> f64 {
        self.weight_at(1)
    }
}

/// Config form of a schedule. Missing `b0` means the closed-form optimum,
/// missing `a` means the smallest admissible offset `b0 * lambda_N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Alpha,
    Beta,
    Constant,
}

impl ScheduleSpec {
    pub fn resolve(&self, g_c: f64, spectrum: &LaplacianSpectrum) -> Result<WeightSchedule, ScheduleError> {
        let gain = || -> Result<f64, ScheduleError> {
            match self.b0 {
                Some(b0) => Ok(b0),
                None => {
                    if !spectrum.is_connected() {
                        return Err(ScheduleError::Disconnected);
                    }
                    if !(g_c > 0.0 && g_c.is_finite()) {
                        return Err(ScheduleError::Invalid(format!(
                            "cannot pick the optimal b0 with G_c = {g_c}"
                        )));
                    }
                    Ok(optimal_b0(g_c, spectrum.lambda2()))
                }
            }
        };
        let sched = match self.kind {
            ScheduleKind::Alpha => {
                let b0 = gain()?;
                let a = self.a.unwrap_or(b0 * spectrum.lambda_max());
                WeightSchedule::AlphaHarmonic { a, b0 }
            }
            ScheduleKind::Beta => {
                let b0 = gain()?;
                let a = self.a.unwrap_or(b0 * spectrum.lambda_max());
                let tau = self
                    .tau
                    .ok_or_else(|| ScheduleError::Invalid("beta schedule needs `tau`".into()))?;
                WeightSchedule::BetaPower { a, b0, tau }
            }
            ScheduleKind::Constant => WeightSchedule::Constant {
                alpha: self
                    .alpha
                    .ok_or_else(|| ScheduleError::Invalid("constant schedule needs `alpha`".into()))?,
            },
        };
        sched.validate()?;
        Ok(sched)
    }
}

/// Result of checking `a >= b0 lambda_N` and `b0 > max(0, (c_mu - 1)/lambda_2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlphaCheck {
    pub offset_ok: bool,
    pub gain_ok: bool,
    /// `a - b0 lambda_N`
    pub offset_margin: f64,
    /// `b0 - max(0, (c_mu - 1)/lambda_2)`
    pub gain_margin: f64,
    pub a: f64,
    pub b0: f64,
    pub lambda2: f64,
    pub lambda_max: f64,
    /// Open interval that `||W(k) - J||` falls in when the offset condition holds.
    pub w_tilde_bounds: (f64, f64),
}

impl AlphaCheck {
    pub fn passed(&self) -> bool {
        self.offset_ok && self.gain_ok
    }

    /// `||W(k) - J|| = 1 - b0 lambda_2 / (a + k)`.
    pub fn w_tilde_norm(&self, k: usize) -> f64 {
        1.0 - self.b0 * self.lambda2 / (self.a + k as f64)
    }
}

pub fn validate_alpha(a: f64, b0: f64, spectrum: &LaplacianSpectrum, c_mu: f64) -> Result<AlphaCheck, ScheduleError> {
    if !spectrum.is_connected() {
        return Err(ScheduleError::Disconnected);
    }
    let (l2, ln) = (spectrum.lambda2(), spectrum.lambda_max());
    let offset_margin = a - b0 * ln;
    let gain_margin = b0 - ((c_mu - 1.0) / l2).max(0.0);
    Ok(AlphaCheck {
        offset_ok: offset_margin >= 0.0 && b0 * ln > 0.0,
        gain_ok: gain_margin > 0.0,
        offset_margin,
        gain_margin,
        a,
        b0,
        lambda2: l2,
        lambda_max: ln,
        w_tilde_bounds: (1.0 - l2 / ln, 1.0),
    })
}

/// `c0 = (3/2) 2^{-1/3}`, the constant of the optimized bound.
pub fn c0() -> f64 {
    1.5 * 2f64.powf(-1.0 / 3.0)
}

/// Closed-form gain `(G_c / (4 lambda_2))^{1/3}`.
pub fn optimal_b0(g_c: f64, lambda2: f64) -> f64 {
    g_c.cbrt() / (lambda2.cbrt() * 4f64.cbrt())
}

/// Smallest communication gain for which noisy cooperation beats the best isolated sensor.
pub fn payoff_threshold(n: usize, lambda2: f64) -> Result<f64, ScheduleError> {
    if n < 2 {
        return Err(ScheduleError::TooFewSensors(n));
    }
    if lambda2 <= 0.0 {
        return Err(ScheduleError::Disconnected);
    }
    let nf = n as f64;
    Ok((c0() * nf / (nf - 1.0)).powi(3) / (lambda2 * lambda2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PayoffVerdict {
    pub threshold: f64,
    pub g_c: f64,
    pub achieved: bool,
    /// The verdict presumes the closed-form optimal gain.
    pub b0_used: f64,
}

pub fn payoff_achieved(g_c: f64, n: usize, lambda2: f64) -> Result<PayoffVerdict, ScheduleError> {
    let threshold = payoff_threshold(n, lambda2)?;
    Ok(PayoffVerdict {
        threshold,
        g_c,
        achieved: g_c >= threshold,
        b0_used: optimal_b0(g_c, lambda2),
    })
}
