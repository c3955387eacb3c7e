//! The angle-function family psi(theta) behind the large-margin softmax
//! losses, together with the annealing schedule that blends psi with
//! cos(theta) early in training.
//!
//! psi is implemented as a function of u = cos(theta). For the additive
//! regime (m1 = 1) the value is evaluated in closed form,
//! `u cos(m2) - sqrt(1 - u^2) sin(m2) - m3`, so arccos never appears in the
//! gradient path. For the multiplicative regime (integer m1 > 1.5) the
//! piecewise sector form `(-1)^k cos(m1 theta) - 2k` is used, with
//! cos(m1 theta) and its derivative evaluated through Chebyshev polynomials.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Inputs are clamped to `[-1 + U_CLAMP, 1 - U_CLAMP]`: small enough not to
/// perturb training logits, large enough that `sqrt(1 - u^2)` stays
/// well-conditioned in f64.
pub const U_CLAMP: f64 = 1e-7;

/// The margin triple `(m1, m2, m3)`: multiplicative angular, additive
/// angular (radians), additive cosine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginSet {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

impl MarginSet {
    pub fn new(m1: f64, m2: f64, m3: f64) -> Result<Self> {
        let m = MarginSet { m1, m2, m3 };
        m.validate()?;
        Ok(m)
    }

    /// No margin at all: psi(u) = u.
    pub fn trivial() -> Self {
        MarginSet { m1: 1.0, m2: 0.0, m3: 0.0 }
    }

    pub fn is_trivial(&self) -> bool {
        self.m1 == 1.0 && self.m2 == 0.0 && self.m3 == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m1.is_finite() && self.m2.is_finite() && self.m3.is_finite()) {
            return Err(Error::Config("margins must be finite".into()));
        }
        if self.m1 < 1.0 {
            return Err(Error::Config(format!("m1 = {} but must be >= 1", self.m1)));
        }
        if self.m2 < 0.0 || self.m3 < 0.0 {
            return Err(Error::Config("m2 and m3 must be >= 0".into()));
        }
        if self.m1 > 1.5 {
            // Sector form: integer sector count, no other margin stacked on top.
            if self.m1.fract() != 0.0 {
                return Err(Error::Config(format!(
                    "m1 = {} is not an integer; multiplicative margins above 1.5 must be whole sector counts",
                    self.m1
                )));
            }
            if self.m2 != 0.0 || self.m3 != 0.0 {
                return Err(Error::Config(
                    "multiplicative margin m1 > 1.5 cannot be combined with m2 or m3".into(),
                ));
            }
        } else {
            if self.m1 > 1.1 {
                return Err(Error::Config(format!(
                    "m1 = {} is outside [1, 1.1]; the closed-form regime is only valid near 1",
                    self.m1
                )));
            }
            if self.m2 >= 1.0 {
                return Err(Error::Config(format!(
                    "m2 = {} must be < 1 radian in the closed-form regime",
                    self.m2
                )));
            }
        }
        Ok(())
    }
}

/// `lambda(step) = max(lambda_floor, lambda_base * (1 + gamma * step)^(-alpha))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub lambda_floor: f64,
    pub lambda_base: f64,
    pub gamma: f64,
    pub alpha: f64,
}

impl AnnealSchedule {
    /// No annealing: lambda is 0 at every step.
    pub fn disabled() -> Self {
        AnnealSchedule { lambda_floor: 0.0, lambda_base: 0.0, gamma: 0.0, alpha: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_floor >= 0.0
            && self.lambda_base >= 0.0
            && self.gamma >= 0.0
            && self.alpha >= 0.0;
        if !ok {
            return Err(Error::Config("annealing parameters must all be >= 0".into()));
        }
        Ok(())
    }
}

pub fn anneal_lambda(step: u64, schedule: &AnnealSchedule) -> f64 {
    let decay = schedule.lambda_base * (1.0 + schedule.gamma * step as f64).powf(-schedule.alpha);
    schedule.lambda_floor.max(decay)
}

fn clamp_u(u: f64) -> f64 {
    u.clamp(-1.0 + U_CLAMP, 1.0 - U_CLAMP)
}

/// Chebyshev polynomial of the first kind, T_m(u) = cos(m arccos u).
fn chebyshev_t(m: u32, u: f64) -> f64 {
    match m {
        0 => 1.0,
        1 => u,
        _ => {
            let (mut prev, mut cur) = (1.0, u);
            for _ in 2..=m {
                let next = 2.0 * u * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Chebyshev polynomial of the second kind; T_m'(u) = m * U_{m-1}(u).
fn chebyshev_u(m: u32, u: f64) -> f64 {
    match m {
        0 => 1.0,
        1 => 2.0 * u,
        _ => {
            let (mut prev, mut cur) = (1.0, 2.0 * u);
            for _ in 2..=m {
                let next = 2.0 * u * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Sector index for the piecewise form, clamped into `[0, m1 - 1]` to absorb
/// rounding at the theta = pi boundary. Forward value only; no gradient
/// flows through k.
fn sector_index(m: u32, theta: f64) -> (f64, f64) {
    let k = (m as f64 * theta / PI).floor().clamp(0.0, (m - 1) as f64);
    let sign = if (k as u64) % 2 == 0 { 1.0 } else { -1.0 };
    (k, sign)
}

/// The angle function evaluated at `u = cos(theta)`.
///
/// For m1 = 1 the angle argument `theta + m2` is capped at pi, so psi
/// flattens to `-1 - m3` instead of turning back upward; this keeps psi
/// monotone in theta and below cos(theta) on the whole domain.
pub fn psi_of_cos(u: f64, margins: &MarginSet) -> f64 {
    debug_assert!(margins.validate().is_ok());
    let u = clamp_u(u);
    if margins.m1 > 1.5 {
        let m = margins.m1 as u32;
        let theta = u.acos();
        let (k, sign) = sector_index(m, theta);
        sign * chebyshev_t(m, u) - 2.0 * k
    } else if margins.m1 == 1.0 {
        if u <= -margins.m2.cos() {
            return -1.0 - margins.m3;
        }
        u * margins.m2.cos() - (1.0 - u * u).sqrt() * margins.m2.sin() - margins.m3
    } else {
        // Non-integer m1 slightly above 1: no closed form in u, so theta is
        // materialized; the clamp on u keeps the arccos derivative bounded.
        let angle = margins.m1 * u.acos() + margins.m2;
        if angle >= PI {
            -1.0 - margins.m3
        } else {
            angle.cos() - margins.m3
        }
    }
}

/// Exact derivative of [`psi_of_cos`] with respect to its (unclamped) input.
/// Zero where the input clamp or the angle cap is active, matching the
/// flat forward value there.
pub fn dpsi_du(u: f64, margins: &MarginSet) -> f64 {
    debug_assert!(margins.validate().is_ok());
    if u <= -1.0 + U_CLAMP || u >= 1.0 - U_CLAMP {
        return 0.0;
    }
    if margins.m1 > 1.5 {
        let m = margins.m1 as u32;
        let theta = u.acos();
        let (_, sign) = sector_index(m, theta);
        sign * m as f64 * chebyshev_u(m - 1, u)
    } else if margins.m1 == 1.0 {
        if u <= -margins.m2.cos() {
            return 0.0;
        }
        margins.m2.cos() + u / (1.0 - u * u).sqrt() * margins.m2.sin()
    } else {
        let theta = u.acos();
        let angle = margins.m1 * theta + margins.m2;
        if angle >= PI {
            0.0
        } else {
            margins.m1 * angle.sin() / (1.0 - u * u).sqrt()
        }
    }
}

/// Annealed target logit `(psi(u) + lambda u) / (1 + lambda)` and its
/// u-derivative `(psi'(u) + lambda) / (1 + lambda)`.
pub fn blended_target_logit(u: f64, margins: &MarginSet, lambda: f64) -> (f64, f64) {
    debug_assert!(lambda >= 0.0);
    let value = (psi_of_cos(u, margins) + lambda * u) / (1.0 + lambda);
    let deriv = (dpsi_du(u, margins) + lambda) / (1.0 + lambda);
    (value, deriv)
}

/// The margin settings swept in the experiments: sector margins m1 in
/// {2, 4}, additive angular margins m2 in {0.20..0.35}, and additive cosine
/// margins m3 in {0.15..0.30}. Gradient checks run over all of them.
pub fn margin_grid() -> Vec<MarginSet> {
    let mut grid = vec![
        MarginSet { m1: 2.0, m2: 0.0, m3: 0.0 },
        MarginSet { m1: 4.0, m2: 0.0, m3: 0.0 },
    ];
    for m2 in [0.20, 0.25, 0.30, 0.35] {
        grid.push(MarginSet { m1: 1.0, m2, m3: 0.0 });
    }
    for m3 in [0.15, 0.20, 0.25, 0.30] {
        grid.push(MarginSet { m1: 1.0, m2: 0.0, m3 });
    }
    grid
}
