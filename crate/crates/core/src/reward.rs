//! Per-step reward terms and their ω-scalarization.
//!
//! The scalar reward is `ω·r_eff + (1 − ω)·r_env + r_saf`. The safety term is
//! added unscaled so that ω only trades efficiency against emissions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Fuel, StepOutcome, World};

pub const COLLISION_PENALTY: f64 = -10.0;
pub const STANDSTILL_PENALTY: f64 = -1.0;

/// Petrol CO₂ surrogate: `c_idle + c_v·v + c_av·v·max(a, 0)` in g/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmissionModel {
    pub c_idle: f64,
    pub c_v: f64,
    pub c_av: f64,
}

impl Default for EmissionModel {
    fn default() -> Self {
        Self {
            c_idle: 1.0,
            c_v: 0.15,
            c_av: 0.3,
        }
    }
}

impl EmissionModel {
    pub fn validate(&self) -> Result<()> {
        for (key, value) in [("c_idle", self.c_idle), ("c_v", self.c_v), ("c_av", self.c_av)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::InvalidConfig {
                    key: format!("reward.{key}"),
                    reason: "must be a finite non-negative number".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub r_eff: f64,
    pub r_env: f64,
    pub r_saf: f64,
    pub omega: f64,
    pub r_scalar: f64,
}

impl RewardVector {
    pub fn new(r_eff: f64, r_env: f64, r_saf: f64, omega: f64) -> Result<Self> {
        Ok(Self {
            r_eff,
            r_env,
            r_saf,
            omega,
            r_scalar: scalarize(r_eff, r_env, r_saf, omega)?,
        })
    }

    /// Evaluates all terms for the world state that follows `outcome`.
    pub fn from_step(world: &World, outcome: &StepOutcome, omega: f64) -> Result<Self> {
        let v_lim = world.config().v_lim;
        let ratios: Vec<f64> = world.vehicles().iter().map(|v| v.v / v_lim).collect();
        Self::new(r_eff(&ratios), r_env(world, world.emission_model()), r_saf(outcome), omega)
    }
}

/// Per-vehicle efficiency score for a speed ratio `x = v / v_lim`.
pub fn efficiency_score(x: f64) -> f64 {
    if x <= 0.8 {
        1.25 * x
    } else if x <= 1.0 {
        1.0
    } else {
        6.0 - 5.0 * x
    }
}

/// Mean efficiency score; zero when no vehicle is present.
pub fn r_eff(speed_ratios: &[f64]) -> f64 {
    if speed_ratios.is_empty() {
        return 0.0;
    }
    speed_ratios.iter().map(|&x| efficiency_score(x)).sum::<f64>() / speed_ratios.len() as f64
}

pub fn emission_rate(v: f64, a: f64, model: &EmissionModel) -> f64 {
    model.c_idle + model.c_v * v + model.c_av * v * a.max(0.0)
}

/// Negative mean petrol emission over one step (g per vehicle); zero with no
/// petrol vehicles.
pub fn r_env(world: &World, model: &EmissionModel) -> f64 {
    let dt = world.config().dt;
    let (sum, n) = world
        .vehicles()
        .iter()
        .filter(|v| v.fuel == Fuel::Petrol)
        .fold((0.0, 0usize), |(sum, n), v| {
            (sum + emission_rate(v.v, v.a_meas, model) * dt, n + 1)
        });
    if n == 0 {
        0.0
    } else {
        -sum / n as f64
    }
}

/// Safety term; a collision outranks a standstill.
pub fn r_saf(outcome: &StepOutcome) -> f64 {
    if outcome.collided {
        COLLISION_PENALTY
    } else if outcome.all_standstill {
        STANDSTILL_PENALTY
    } else {
        0.0
    }
}

pub fn scalarize(r_eff: f64, r_env: f64, r_saf: f64, omega: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::OutOfRange { what: "omega", value: omega });
    }
    Ok(omega * r_eff + (1.0 - omega) * r_env + r_saf)
}
